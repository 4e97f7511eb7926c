"""Command line entry point: ``reidgan <subcommand>`` (or ``python -m reidgan``)."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from . import condense as cn
from . import gan as gn
from .data import SYNTHETIC, Dataset, Sample, ToyCorpusConfig, load_dataset, synth_toy_corpus, write_manifest
from .evaluation import EvalReport, ScoreMatrix, evaluate_scores
from .harness import compare_to_registry, format_comparison, load_config, preset_names, run_experiment
from .plots import emit_plots
from .registry import ResultsRegistry
from .semfilter import make_detector

log = logging.getLogger("reidgan")


def _dataset(args) -> Dataset:
    if getattr(args, "toy_config", None):
        return synth_toy_corpus(ToyCorpusConfig.from_file(args.toy_config), args.data_seed)
    if not args.data:
        raise SystemExit("give --data MANIFEST (with --n-identities) or --toy-config FILE")
    if args.n_identities is None:
        raise SystemExit("--n-identities is required with --data")
    return load_dataset(args.data, args.n_identities, args.patch_size)


def _add_data_args(p):
    p.add_argument("--data", help="manifest.csv (path,label,session,tracklet)")
    p.add_argument("--n-identities", type=int, help="N, the number of known identities")
    p.add_argument("--patch-size", type=int, help="resize patches to this side")
    p.add_argument("--toy-config", help="YAML toy-corpus config instead of a manifest")
    p.add_argument("--data-seed", type=int, default=0)


def cmd_prepare(args):
    cfg = ToyCorpusConfig.from_file(args.toy_config) if args.toy_config else ToyCorpusConfig()
    ds = synth_toy_corpus(cfg, args.seed)
    manifest = write_manifest(ds, args.out)
    faces = sum(bool(s.has_face) for s in ds)
    print(f"wrote {len(ds)} samples ({faces} with face glyph) to {manifest}")


def cmd_train_gan(args):
    ds = _dataset(args)
    data = ds if args.mode == "generic" else ds.of_class(args.class_id)
    if args.mode == "class" and args.class_id is None:
        raise SystemExit("--class-id is required with --mode class")
    overrides = yaml.safe_load(Path(args.config).read_text()) if args.config else {}
    conf = gn.GanConfig.from_dict({**overrides, "filter_enabled": args.filter == "on"})
    detector = make_detector(args.detector, args.detector_spec) if args.filter == "on" else None
    if args.warm_start:
        base = gn.load_gan_checkpoint(args.warm_start)
        state = gn.warm_start(base, args.class_id if args.class_id is not None else 0, conf, seed=args.seed)
    else:
        state = gn.init_dcgan(conf, args.seed)
        if args.mode == "class":
            state.target_class = args.class_id
    out = Path(args.out)
    gn.train_dcgan(state, data, detector, iterations=args.iterations, checkpoint_dir=out.parent)
    gn.save_gan_checkpoint(state, out)
    gn.write_loss_csv(state, out.with_suffix(".loss.csv"))
    msg = f"trained {state.generator_id} for {state.iteration} iterations -> {out}"
    if state.filter_stats is not None:
        msg += f"; filter kept {state.filter_stats.n_kept}/{state.filter_stats.n_total}"
    print(msg)


def cmd_sample(args):
    state = gn.load_gan_checkpoint(args.checkpoint)
    samples = gn.sample_generator(state, args.count, args.seed, args.labeling)
    out = Path(args.out)
    write_manifest(Dataset(tuple(samples), max(1, max(s.label for s in samples))), out)
    meta = {"generator_id": samples[0].generator_id, "labeling": args.labeling,
            "label_mode": samples[0].label_mode, "count": len(samples), "seed": args.seed}
    (out / "synthetic.json").write_text(json.dumps(meta, indent=2) + "\n")
    print(f"wrote {len(samples)} samples from {meta['generator_id']} to {out}")


def _load_synthetic(directory: str, n_identities: int, patch_size: int | None) -> list[Sample]:
    meta = json.loads((Path(directory) / "synthetic.json").read_text())
    ds = load_dataset(Path(directory) / "manifest.csv", n_identities, patch_size)
    return [
        Sample(s.image, s.label, origin=SYNTHETIC, generator_id=meta["generator_id"], label_mode=meta["label_mode"])
        for s in ds
    ]


def cmd_train_reid(args):
    ds = _dataset(args)
    synthetic = []
    entries = []
    for d in args.synthetic or []:
        part = _load_synthetic(d, ds.n_identities, args.patch_size)
        synthetic.extend(part)
        meta = json.loads((Path(d) / "synthetic.json").read_text())
        entries.append(gn.PlanEntry(meta["generator_id"].split("@")[0], len(part), meta["labeling"], False))
    plan = gn.AugmentationPlan("cli", tuple(entries), len(ds)) if entries else None
    cfg_map = yaml.safe_load(Path(args.config).read_text()) if args.config else {}
    cfg_map.update(num_classes=ds.n_identities + 1, input_size=ds.patch_size)
    if args.epochs is not None:
        cfg_map["epochs"] = args.epochs
    conf = cn.CondenseConfig.from_dict({**cn.CondenseConfig().to_dict(), **cfg_map})
    model = cn.build_condensenet(conf, args.seed)
    result = cn.train_reid(model, list(ds) + synthetic, plan, conf, args.seed, Path(args.out).parent)
    cn.save_reid_checkpoint(model, args.out)
    cn.write_training_log(result.log, Path(args.out).with_suffix(".log.csv"))
    params, madds = cn.count_params_flops(model)
    last = result.log[-1] if result.log else None
    print(f"saved {args.out}: {params} live params, {madds} multiply-adds"
          + (f", final loss {last.loss:.4f}, train prec@1 {last.train_prec1:.3f}" if last else ""))


def cmd_eval(args):
    ds = _dataset(args)
    model = cn.load_reid_checkpoint(args.model)
    scores = cn.predict_scores(model, ds)
    report = evaluate_scores(ScoreMatrix(scores, ds.labels()), args.ks, {"model": str(args.model)})
    if args.out:
        report.save(args.out)
    print(report.to_json())


def cmd_report(args):
    run = Path(args.run)
    if not args.no_plots:
        for p in emit_plots(run, args.sparse_every, args.rank_cap):
            print(f"plot: {p}")
    agg = json.loads((run / "aggregate.json").read_text())
    registry = ResultsRegistry.load()
    for row in args.row or []:
        print(format_comparison(compare_to_registry(agg, row, registry), f"{row}: {registry[row].method}"))
        print()


def cmd_run(args):
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = load_config(args.preset, overrides)
    out = run_experiment(cfg, args.out)
    print(f"run directory: {out}")
    print((out / "aggregate.json").read_text())


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="reidgan", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="render a toy corpus to PNG patches + manifest")
    p.add_argument("--toy-config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train-gan", help="train a (face-gated) DCGAN")
    _add_data_args(p)
    p.add_argument("--mode", choices=["generic", "class"], default="generic")
    p.add_argument("--class-id", type=int)
    p.add_argument("--filter", choices=["on", "off"], default="on")
    p.add_argument("--detector", choices=["oracle", "external", "none"], default="oracle")
    p.add_argument("--detector-spec", help="module:attr of an external detector")
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="YAML with GanConfig fields")
    p.add_argument("--warm-start", help="base checkpoint to copy parameters from")
    p.add_argument("--out", required=True, help="checkpoint path (.pt)")
    p.set_defaults(func=cmd_train_gan)

    p = sub.add_parser("sample", help="draw synthetic samples from a generator checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--labeling", choices=list(gn.LABELINGS), default="uniform_soft")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("train-reid", help="train the CondenseNet classifier")
    _add_data_args(p)
    p.add_argument("--synthetic", action="append", help="directory written by `sample` (repeatable)")
    p.add_argument("--config", help="YAML with CondenseConfig fields")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_reid)

    p = sub.add_parser("eval", help="closed-set evaluation of a classifier checkpoint")
    _add_data_args(p)
    p.add_argument("--model", required=True)
    p.add_argument("--ks", type=int, nargs="+", default=[1, 5])
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="plots and registry comparison for a run directory")
    p.add_argument("--run", required=True)
    p.add_argument("--row", action="append", help="registry row, e.g. 'LIMA row 3' (repeatable)")
    p.add_argument("--sparse-every", type=int, default=100)
    p.add_argument("--rank-cap", type=int, default=50)
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("run", help="full pipeline from a preset or config file")
    p.add_argument("--preset", required=True, help=f"one of {', '.join(preset_names())} or a YAML path")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_run)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())

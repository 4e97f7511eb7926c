"""Experiment orchestration: config presets, the full pipeline, registry comparison."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from . import condense as cn
from . import gan as gn
from .data import (
    Dataset,
    ToyCorpusConfig,
    holdout_per_class,
    load_dataset,
    make_loso_splits,
    synth_toy_corpus,
)
from .evaluation import (
    EvalReport,
    ScoreMatrix,
    aggregate_reports,
    cmc_single_query,
    evaluate_scores,
    write_cmc_csv,
    write_confusion_csv,
)
from .registry import ResultsRegistry
from .semfilter import filter_samples, make_detector

log = logging.getLogger(__name__)

MANIFEST_NAME = "run_manifest.json"


class ConfigError(Exception):
    pass


class StageError(Exception):
    """A pipeline stage failed; ``checkpoint`` points at the last saved state, if any."""

    def __init__(self, stage: str, cause: BaseException, checkpoint: str | None = None):
        super().__init__(f"stage {stage!r} failed: {cause}" + (f" (resume from {checkpoint})" if checkpoint else ""))
        self.stage = stage
        self.cause = cause
        self.checkpoint = checkpoint


# --------------------------------------------------------------------------
# configuration

def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def preset_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("reidgan").joinpath("presets").iterdir() if p.name.endswith(".yaml"))


def _read_yaml(name_or_path: str, search_dir: Path | None) -> dict:
    path = Path(name_or_path)
    if path.suffix in (".yaml", ".yml") and path.is_file():
        return yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    if search_dir is not None and (search_dir / f"{name_or_path}.yaml").is_file():
        return yaml.safe_load((search_dir / f"{name_or_path}.yaml").read_text(encoding="utf-8")) or {}
    res = resources.files("reidgan").joinpath("presets").joinpath(f"{name_or_path}.yaml")
    if res.is_file():
        return yaml.safe_load(res.read_text(encoding="utf-8")) or {}
    raise ConfigError(f"no preset or config file {name_or_path!r}; presets: {', '.join(preset_names())}")


def load_config(name_or_path: str, overrides: dict | None = None) -> dict:
    """Resolve a preset name or YAML file, following ``inherit`` chains."""
    search_dir = Path(name_or_path).parent if Path(name_or_path).is_file() else None
    chain, seen = [], set()
    current = name_or_path
    while current is not None:
        if current in seen:
            raise ConfigError(f"preset inheritance cycle at {current!r}")
        seen.add(current)
        raw = _read_yaml(current, search_dir)
        chain.append(raw)
        current = raw.get("inherit")
    cfg: dict = {}
    for raw in reversed(chain):
        cfg = deep_merge(cfg, {k: v for k, v in raw.items() if k != "inherit"})
    if overrides:
        cfg = deep_merge(cfg, overrides)
    cfg.setdefault("name", Path(name_or_path).stem)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    ds = cfg.get("dataset") or {}
    if ds.get("kind") == "manifest":
        if not ds.get("manifest") or not Path(ds["manifest"]).is_file():
            raise ConfigError(f"manifest {ds.get('manifest')!r} does not exist")
        if not ds.get("n_identities"):
            raise ConfigError("manifest datasets need n_identities")
    elif ds.get("kind") == "toy":
        ToyCorpusConfig.from_mapping(ds.get("toy") or {})
    else:
        raise ConfigError(f"unknown dataset kind {ds.get('kind')!r}")
    if (cfg.get("split") or {}).get("kind") not in ("holdout", "loso"):
        raise ConfigError("split.kind must be holdout or loso")
    gan_cfg = cfg.get("gan")
    if gan_cfg is not None:
        if gan_cfg.get("mode") not in ("generic", "per_class"):
            raise ConfigError("gan.mode must be generic or per_class")
        if not cfg.get("augmentation"):
            raise ConfigError("a gan stage needs an augmentation section")
        base = gan_cfg.get("base_checkpoint")
        if base and not Path(base).is_file():
            raise ConfigError(f"gan.base_checkpoint {base!r} does not exist")
        gn.GanConfig.from_dict(gan_cfg.get("config") or {}).validate()
    if cfg.get("augmentation") and cfg.get("gan") is None:
        raise ConfigError("augmentation requires a gan section")
    if "seed" not in cfg:
        raise ConfigError("config needs a seed")


def config_echo(cfg: dict) -> dict:
    """Config as recorded in artifacts: everything except where outputs go."""
    return {k: v for k, v in cfg.items() if k != "output_dir"}


def derive_seed(seed: int, *tags) -> int:
    h = hashlib.sha256(json.dumps([seed, *tags]).encode()).digest()
    return int.from_bytes(h[:4], "little")


# --------------------------------------------------------------------------
# pipeline pieces

def build_dataset(spec: dict, default_seed: int) -> Dataset:
    if spec["kind"] == "toy":
        return synth_toy_corpus(ToyCorpusConfig.from_mapping(spec.get("toy") or {}), spec.get("seed", default_seed))
    return load_dataset(spec["manifest"], spec["n_identities"], spec.get("patch_size"))


def folds_for(cfg: dict, dataset: Dataset, seed: int) -> list[tuple[str, Dataset, Dataset]]:
    split = cfg["split"]
    if split["kind"] == "holdout":
        train, test = holdout_per_class(dataset, split.get("fraction", 0.15), derive_seed(seed, "holdout"))
        return [("fold_0", train, test)]
    plan = make_loso_splits(dataset, split.get("fraction", 0.15))
    folds = []
    for k, (train_s, test_s) in enumerate(plan.folds):
        if split.get("max_folds") is not None and k >= split["max_folds"]:
            break
        folds.append((f"fold_{k}", dataset.select_sessions(train_s), dataset.select_sessions(test_s)))
    return folds


def scaled_counts(aug: dict, n_identities: int) -> dict | int:
    scale = float(aug.get("scale", 1.0))

    def sc(v):
        return max(1, int(round(float(v) * scale)))

    counts = aug["counts"]
    if aug.get("mode", "generic") == "generic":
        return sc(counts)
    if "Gj" in counts or "G0" in counts:
        return {j: sc(counts["G0"] if j == 0 else counts["Gj"]) for j in range(n_identities + 1)}
    return {int(k): sc(v) for k, v in counts.items()}


@dataclass
class _Artifacts:
    root: Path
    entries: list

    def add(self, path: Path, kind: str, **meta):
        rel = str(Path(path).relative_to(self.root))
        digest = hashlib.sha256(Path(path).read_bytes()).hexdigest()
        self.entries.append({"path": rel, "kind": kind, "sha256": digest, **meta})

    def skip(self, stage: str, reason: str, **meta):
        self.entries.append({"stage": stage, "skipped": reason, **meta})


def _write_json(path: Path, obj: Any) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _train_generators(cfg, fold_dir, train, n_identities, detector, seed, arts, original_count):
    """Train the configured generators and draw the synthetic samples."""
    gcfg = cfg["gan"]
    aug = cfg["augmentation"]
    base_conf = gn.GanConfig.from_dict(gcfg.get("config") or {})
    source = train
    if gcfg.get("source"):
        source = build_dataset(gcfg["source"], derive_seed(seed, "source"))
    counts = scaled_counts(aug, n_identities)
    filtered = bool(gcfg.get("filter", False))
    plan = gn.build_augmentation_plan(
        aug.get("mode", "generic"), counts, aug.get("labeling") if aug.get("mode", "generic") == "generic" else None,
        n_identities, filtered, original_count,
    )
    gan_dir = fold_dir / "gan"
    iterations = int(gcfg.get("iterations", base_conf.max_iterations))
    thr = cfg["filter"].get("threshold", 0.0)

    def fit(state, data, name):
        ckpt = gan_dir / f"{name}.pt"
        try:
            gn.train_dcgan(state, data, detector, thr, iterations=state_iters[name], checkpoint_dir=gan_dir)
        except gn.DivergenceError as exc:
            raise StageError(f"gan:{name}", exc, str(exc.checkpoint) if exc.checkpoint else None) from exc
        gn.save_gan_checkpoint(state, ckpt)
        arts.add(ckpt, "gan_checkpoint", generator=name, iterations=state.iteration, provenance=state.provenance)
        arts.add(gn.write_loss_csv(state, gan_dir / f"{name}_loss.csv"), "gan_loss", generator=name)
        if state.filter_stats is not None:
            arts.add(_write_json(gan_dir / f"{name}_filter.json", state.filter_stats.as_dict()), "filter_stats", generator=name)
        return state

    synthetic, state_iters = [], {}
    base_state = None
    if plan.mode == "generic" or gcfg.get("warm_start", True):
        if gcfg.get("base_checkpoint"):
            base_state = gn.load_gan_checkpoint(gcfg["base_checkpoint"])
        else:
            conf = replace(base_conf, filter_enabled=filtered)
            base_state = gn.init_dcgan(conf, derive_seed(seed, "gan", "G"))
            state_iters["G"] = iterations
            fit(base_state, source, "G")
    for entry in plan.entries:
        if entry.generator == "G":
            state = base_state
        else:
            j = entry.class_id
            class_data = source.of_class(j)
            conf = replace(base_conf, filter_enabled=entry.filtered)
            if not len(class_data):
                arts.skip(f"gan:{entry.generator}", f"class {j} has no training samples")
                continue
            if entry.filtered and not filter_samples(class_data, detector, thr)[0]:
                arts.skip(f"gan:{entry.generator}", f"face filter removed every sample of class {j}")
                continue
            if base_state is not None and gcfg.get("warm_start", True):
                state = gn.warm_start(base_state, j, conf, seed=derive_seed(seed, "gan", entry.generator))
            else:
                state = gn.init_dcgan(conf, derive_seed(seed, "gan", entry.generator))
                state.target_class = j
            state_iters[entry.generator] = int(gcfg.get("class_iterations", iterations))
            fit(state, class_data, entry.generator)
        samples = gn.sample_generator(state, entry.count, derive_seed(seed, "sample", entry.generator), entry.labeling)
        synthetic.extend(samples)
    arts.add(_write_json(gan_dir / "plan.json", plan.to_dict()), "augmentation_plan")
    return plan, synthetic


def _evaluate(cfg, model, train_originals, test, n_identities, echo) -> EvalReport:
    scores = cn.predict_scores(model, test)
    report = evaluate_scores(ScoreMatrix(scores, test.labels()), cfg["eval"].get("ks", [1, 5]), echo)
    if cfg["eval"].get("retrieval", False):
        q = cn.predict_features(model, list(test))
        g = cn.predict_features(model, list(train_originals))
        dist = ((q[:, None, :] - g[None, :, :]) ** 2).sum(-1)
        q_lab, g_lab = test.labels(), np.array([s.label for s in train_originals])
        q_cam = np.array([s.session_id for s in test])
        g_cam = np.array([s.session_id for s in train_originals])
        excl = cfg["eval"].get("exclude_same_camera", True)
        valid = []
        for i in range(len(q_lab)):
            ok = g_lab == q_lab[i]
            if excl:
                ok &= g_cam != q_cam[i]
            valid.append(bool(ok.any()))
        valid = np.array(valid)
        if valid.any():
            max_rank = min(cfg["eval"].get("max_rank", 50), len(g_lab))
            cmc, rmap = cmc_single_query(dist[valid], q_lab[valid], g_lab, q_cam[valid], g_cam, excl, max_rank)
            report.cmc, report.retrieval_map = [float(v) for v in cmc], rmap
        if (~valid).any():
            report.warnings.append(f"retrieval: {int((~valid).sum())} queries without a valid gallery match skipped")
    return report


def run_experiment(cfg: dict, output_dir: str | Path | None = None) -> Path:
    """Run the configured pipeline variant; returns the run directory.

    Layout: ``config.yaml``, ``run_manifest.json``, ``aggregate.json`` and one
    ``fold_k/`` per fold holding ``gan/``, ``reid/`` and ``eval/`` artifacts.
    """
    validate_config(cfg)
    out = Path(output_dir or cfg.get("output_dir") or f"runs/{cfg.get('name', 'run')}")
    out.mkdir(parents=True, exist_ok=True)
    seed = int(cfg["seed"])
    echo = config_echo(cfg)
    (out / "config.yaml").write_text(yaml.safe_dump(echo, sort_keys=True), encoding="utf-8")
    arts = _Artifacts(out, [])
    arts.add(out / "config.yaml", "config")

    def stage(name, fn, checkpoint=None):
        try:
            return fn()
        except StageError:
            raise
        except Exception as exc:
            raise StageError(name, exc, checkpoint) from exc

    dataset = stage("data", lambda: build_dataset(cfg["dataset"], seed))
    n_ids = dataset.n_identities
    detector = stage("filter", lambda: make_detector(cfg["filter"].get("detector", "oracle"), cfg["filter"].get("spec")))
    folds = stage("split", lambda: folds_for(cfg, dataset, seed))
    reports = []
    summary = {"n_samples": len(dataset), "n_identities": n_ids, "sessions": dataset.sessions, "folds": {}}
    for name, train, test in folds:
        fold_dir = out / name
        fold_info = {"train": len(train), "test": len(test)}
        reid_train = list(train)
        if cfg["filter"].get("apply_to_reid"):
            kept, stats = stage(f"{name}:filter", lambda: filter_samples(train, detector, cfg["filter"].get("threshold", 0.0)))
            reid_train = kept
            fold_info["reid_filter"] = stats.as_dict()
            arts.add(_write_json(fold_dir / "reid_filter.json", stats.as_dict()), "filter_stats", fold=name)
        else:
            arts.skip(f"{name}:reid_filter", "filter not applied to classifier input", fold=name)
        plan, synthetic = None, []
        if cfg.get("gan"):
            plan, synthetic = stage(
                f"{name}:gan",
                lambda: _train_generators(cfg, fold_dir, train, n_ids, detector, derive_seed(seed, name), arts, len(reid_train)),
            )
            fold_info["synthetic"] = len(synthetic)
            fold_info["synthesis_ratio"] = plan.synthesis_ratio
        else:
            arts.skip(f"{name}:gan", "no augmentation configured", fold=name)
        fold_info["reid_train_original"] = len(reid_train)
        fold_info["reid_train_fraction"] = len(reid_train) / len(train)

        ccfg = cn.CondenseConfig(num_classes=n_ids + 1, **(cfg.get("condense") or {}))
        model = stage(f"{name}:reid", lambda: cn.build_condensenet(ccfg, derive_seed(seed, name, "reid")))
        result = stage(
            f"{name}:reid",
            lambda: cn.train_reid(model, reid_train + synthetic, plan, ccfg, derive_seed(seed, name, "reid_train"), fold_dir / "reid"),
        )
        ckpt = cn.save_reid_checkpoint(model, fold_dir / "reid" / "model.pt")
        arts.add(ckpt, "reid_checkpoint", fold=name)
        arts.add(cn.write_training_log(result.log, fold_dir / "reid" / "train_log.csv"), "reid_log", fold=name)
        params, madds = cn.count_params_flops(model)
        fold_info["reid_params"], fold_info["reid_multiply_adds"] = params, madds

        report = stage(f"{name}:eval", lambda: _evaluate(cfg, model, list(train), test, n_ids, echo), str(ckpt))
        report.config = {**echo, "fold": name}
        arts.add(report.save(fold_dir / "eval" / "report.json"), "eval_report", fold=name)
        arts.add(write_confusion_csv(report.confusion, report.present, fold_dir / "eval" / "confusion.csv"), "confusion", fold=name)
        if report.cmc is not None:
            arts.add(write_cmc_csv(report.cmc, fold_dir / "eval" / "cmc.csv"), "cmc", fold=name)
        reports.append(report)
        summary["folds"][name] = fold_info

    aggregate = aggregate_reports(reports)
    arts.add(_write_json(out / "aggregate.json", aggregate), "aggregate")
    arts.add(_write_json(out / "summary.json", summary), "summary")
    _write_json(out / MANIFEST_NAME, {"name": cfg.get("name"), "seed": seed, "config": echo, "artifacts": arts.entries})
    return out


# --------------------------------------------------------------------------
# registry comparison

def compare_to_registry(report: EvalReport | dict, row: str, registry: ResultsRegistry | None = None) -> list[dict]:
    """Side-by-side computed vs published values (percent). Never asserts agreement."""
    registry = registry or ResultsRegistry.load()
    entry = registry[row]
    out = []
    for metric, stored in entry.values().items():
        if isinstance(report, EvalReport):
            computed = report.metric(metric)
        else:
            key = metric if metric in report else f"ALL {metric}"
            computed = report.get(key)
        delta = None if computed is None or stored is None else computed - stored
        out.append({"metric": metric, "computed": computed, "published": stored, "delta": delta})
    return out


def format_comparison(rows: list[dict], title: str = "") -> str:
    def f(v):
        return "-" if v is None else f"{v:.2f}"

    lines = [title] if title else []
    lines.append(f"{'metric':<14}{'computed':>10}{'published':>11}{'delta':>9}")
    for r in rows:
        lines.append(f"{r['metric']:<14}{f(r['computed']):>10}{f(r['published']):>11}{f(r['delta']):>9}")
    return "\n".join(lines)

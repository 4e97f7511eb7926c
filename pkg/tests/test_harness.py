import json

import pytest
import yaml

from reidgan import harness as hs
from reidgan.cli import main
from reidgan.evaluation import EvalReport
from reidgan.plots import ArtifactMissingError, emit_plots
from reidgan.registry import RegistryError, ResultsRegistry

FAST = {
    "dataset": {"toy": {"samples_per_session": 20, "patch_size": 16}},
    "condense": {"input_size": 16, "epochs": 2},
}
FAST_GAN = hs.deep_merge(FAST, {
    "gan": {"iterations": 6, "class_iterations": 4, "config": {"image_size": 16, "batch_size": 8}},
    "augmentation": {"counts": 1000, "scale": 0.01},
})


def test_presets_load_and_validate():
    names = hs.preset_names()
    for expected in ["base", "no_aug", "FR", "aug_24kG", "aug_48kG", "aug_F322kG", "aug_24kG0_F24kGj",
                     "transfer_24kG", "loso", "smoke"]:
        assert expected in names
    for n in names:
        cfg = hs.load_config(n)
        assert cfg["seed"] == 0


def test_every_registry_preset_exists():
    names = set(hs.preset_names())
    assert all(r.preset in names for r in ResultsRegistry.load() if r.preset)


def test_load_config_overrides_and_errors(tmp_path):
    cfg = hs.load_config("aug_24kG", {"seed": 5, "augmentation": {"scale": 0.5}})
    assert cfg["seed"] == 5 and cfg["augmentation"]["counts"] == 24000 and cfg["augmentation"]["scale"] == 0.5
    with pytest.raises(hs.ConfigError):
        hs.load_config("nonexistent_preset")
    with pytest.raises(hs.ConfigError):
        hs.load_config("no_aug", {"split": {"kind": "random"}})
    with pytest.raises(hs.ConfigError):
        hs.load_config("no_aug", {"dataset": {"kind": "manifest", "manifest": str(tmp_path / "nope.csv"), "n_identities": 2}})
    own = tmp_path / "mine.yaml"
    own.write_text(yaml.safe_dump({"inherit": "no_aug", "condense": {"epochs": 1}}))
    assert hs.load_config(str(own))["condense"]["epochs"] == 1


def test_scaled_counts():
    assert hs.scaled_counts({"mode": "generic", "counts": 24000, "scale": 0.01}, 4) == 240
    assert hs.scaled_counts({"mode": "per_class", "counts": {"G0": 100, "Gj": 50}}, 2) == {0: 100, 1: 50, 2: 50}


def test_derive_seed_stable():
    assert hs.derive_seed(0, "gan", "G") == hs.derive_seed(0, "gan", "G")
    assert hs.derive_seed(0, "gan", "G") != hs.derive_seed(1, "gan", "G")


def test_registry_lookup():
    reg = ResultsRegistry.load()
    assert reg["LIMA row 1"].value("ALL prec@1") == 89.1
    assert reg["LIMA row 6"].values() == {"ALL prec@1": 92.58, "p-ID prec@1": 94.57, "ALL mAP": 91.14, "p-ID mAP": 97.02}
    assert reg["Duke row 5"].value("prec@1") == 88.84
    assert reg["LIMA row 1"].value("p-ID mAP") is None
    with pytest.raises(RegistryError):
        reg["LIMA row 9"]


def test_compare_to_registry_reports_deltas():
    rows = hs.compare_to_registry({"ALL prec@1": 90.0, "p-ID prec@1": None}, "LIMA row 2")
    first = rows[0]
    assert first["published"] == 91.98 and first["delta"] == pytest.approx(-1.98)
    assert rows[1]["computed"] is None and rows[1]["delta"] is None
    duke = hs.compare_to_registry({"ALL prec@1": 50.0, "CMC@1 S-Q": 10.0}, "Duke row 4")
    assert duke[0]["computed"] == 50.0 and duke[3]["published"] == 36.45
    assert "published" in hs.format_comparison(rows, "LIMA row 2")


def _read(run, rel):
    return json.loads((run / rel).read_text())


def test_no_augmentation_run(tmp_path):
    run = hs.run_experiment(hs.load_config("no_aug", FAST), tmp_path / "run")
    manifest = _read(run, "run_manifest.json")
    assert not any(e.get("kind") == "gan_checkpoint" for e in manifest["artifacts"])
    assert any(e.get("stage") == "fold_0:gan" and e.get("skipped") for e in manifest["artifacts"])
    assert not (run / "fold_0" / "gan").exists()
    report = EvalReport.load(run / "fold_0" / "eval" / "report.json")
    assert 0.0 <= report.prec_at["ALL"][1] <= 1.0
    assert set(_read(run, "aggregate.json")) >= {"folds", "ALL prec@1", "p-ID mAP"}
    for e in manifest["artifacts"]:
        if "path" in e:
            assert (run / e["path"]).is_file()


def test_fr_run_reports_retention(tmp_path):
    run = hs.run_experiment(hs.load_config("FR", FAST), tmp_path / "run")
    info = _read(run, "summary.json")["folds"]["fold_0"]
    assert 0.0 < info["reid_filter"]["retention"] < 1.0
    assert info["reid_train_original"] == info["reid_filter"]["kept"]


def test_loso_run_four_folds(tmp_path):
    run = hs.run_experiment(hs.load_config("loso", FAST), tmp_path / "run")
    reports = sorted(run.glob("fold_*/eval/report.json"))
    assert len(reports) == 4
    agg = _read(run, "aggregate.json")
    assert agg["folds"] == 4
    vals = [EvalReport.load(p).metric("ALL prec@1") for p in reports]
    assert agg["ALL prec@1"] == pytest.approx(sum(vals) / 4)


def test_generic_augmentation_run_and_plots(tmp_path):
    run = hs.run_experiment(hs.load_config("aug_24kG", FAST_GAN), tmp_path / "run")
    info = _read(run, "summary.json")["folds"]["fold_0"]
    assert info["synthetic"] == 10
    plan = _read(run, "fold_0/gan/plan.json")
    assert plan["entries"][0]["labeling"] == "uniform_soft"
    written = emit_plots(run)
    names = {p.name for p in written}
    assert {"fold_0_confusion.png", "fold_0_cmc.png", "fold_0_G_loss.png"} <= names
    assert all(p.stat().st_size > 0 for p in written)


def test_per_class_run(tmp_path):
    cfg = hs.load_config("aug_24kG0_F24kGj", hs.deep_merge(FAST_GAN, {"augmentation": {"counts": {"G0": 500, "Gj": 500}}}))
    run = hs.run_experiment(cfg, tmp_path / "run")
    plan = _read(run, "fold_0/gan/plan.json")
    assert [e["generator"] for e in plan["entries"]] == ["G0", "G1", "G2", "G3", "G4"]
    manifest = _read(run, "run_manifest.json")
    provs = [e["provenance"] for e in manifest["artifacts"] if e.get("kind") == "gan_checkpoint" and e["generator"] != "G"]
    assert provs and all(p.startswith("warm_started(") for p in provs)


def test_run_deterministic(tmp_path):
    cfg = hs.load_config("aug_24kG", FAST_GAN)
    a = hs.run_experiment(cfg, tmp_path / "a")
    b = hs.run_experiment(cfg, tmp_path / "b")
    assert (a / "fold_0/eval/report.json").read_bytes() == (b / "fold_0/eval/report.json").read_bytes()
    assert (a / "aggregate.json").read_bytes() == (b / "aggregate.json").read_bytes()


def test_emit_plots_missing_artifacts(tmp_path):
    with pytest.raises(ArtifactMissingError):
        emit_plots(tmp_path)
    (tmp_path / "run_manifest.json").write_text("{}")
    (tmp_path / "fold_0").mkdir()
    with pytest.raises(ArtifactMissingError):
        emit_plots(tmp_path)


def test_cli_end_to_end(tmp_path, capsys):
    toy = tmp_path / "toy.yaml"
    toy.write_text(yaml.safe_dump({"n_identities": 2, "n_sessions": 2, "samples_per_session": 16, "patch_size": 16}))
    gan_cfg = tmp_path / "gan.yaml"
    gan_cfg.write_text(yaml.safe_dump({"image_size": 16, "batch_size": 4}))
    reid_cfg = tmp_path / "reid.yaml"
    reid_cfg.write_text(yaml.safe_dump({"input_size": 16}))
    assert main(["prepare", "--toy-config", str(toy), "--out", str(tmp_path / "data")]) == 0
    data = ["--data", str(tmp_path / "data" / "manifest.csv"), "--n-identities", "2"]
    main(["train-gan", *data, "--iterations", "3", "--config", str(gan_cfg), "--out", str(tmp_path / "g.pt")])
    main(["train-gan", *data, "--mode", "class", "--class-id", "1", "--iterations", "2", "--config", str(gan_cfg),
          "--warm-start", str(tmp_path / "g.pt"), "--out", str(tmp_path / "g1.pt")])
    main(["sample", "--checkpoint", str(tmp_path / "g.pt"), "--count", "8", "--out", str(tmp_path / "syn")])
    main(["sample", "--checkpoint", str(tmp_path / "g1.pt"), "--count", "8", "--labeling", "class_label",
          "--out", str(tmp_path / "syn1")])
    main(["train-reid", *data, "--synthetic", str(tmp_path / "syn"), "--synthetic", str(tmp_path / "syn1"),
          "--config", str(reid_cfg), "--epochs", "2", "--out", str(tmp_path / "r.pt")])
    main(["eval", *data, "--model", str(tmp_path / "r.pt"), "--ks", "1", "2", "--out", str(tmp_path / "rep.json")])
    assert EvalReport.load(tmp_path / "rep.json").prec_at["ALL"].keys() == {1, 2}
    out = capsys.readouterr().out
    assert "warm_started" not in out  # provenance lives in the checkpoint, not the log line
    assert "trained G1@" in out and "wrote 8 samples" in out


def test_cli_run_and_report(tmp_path, capsys):
    preset = tmp_path / "tiny.yaml"
    preset.write_text(yaml.safe_dump(hs.deep_merge({"inherit": "aug_24kG"}, FAST_GAN)))
    main(["run", "--preset", str(preset), "--out", str(tmp_path / "run")])
    main(["report", "--run", str(tmp_path / "run"), "--row", "LIMA row 3", "--row", "Duke row 4"])
    out = capsys.readouterr().out
    assert "LIMA row 3" in out and "36.45" in out and "plot:" in out

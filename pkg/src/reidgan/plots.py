"""Figures for a run directory: GAN loss curves, CMC curves, confusion heat tables."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


class ArtifactMissingError(FileNotFoundError):
    pass


def _read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def plot_gan_losses(loss_csv: Path, out_png: Path, sparse_every: int = 100) -> Path:
    """Discriminator loss on originals dense, on generated samples every ``sparse_every`` iterations."""
    _, rows = _read_csv(loss_csv)
    it = np.array([int(r[0]) for r in rows])
    real, fake, g = (np.array([float(r[k]) for r in rows]) for k in (1, 2, 3))
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.plot(it, real, color="tab:blue", lw=0.8, label="D loss, original samples")
    step = max(1, sparse_every)
    ax.plot(it[::step], fake[::step], "o", color="tab:red", ms=3, label=f"D loss, generated (every {step})")
    ax.plot(it, g, color="tab:gray", lw=0.6, alpha=0.6, label="G loss")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_title(loss_csv.stem.replace("_loss", ""))
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def plot_cmc(cmc_csv: Path, out_png: Path, rank_cap: int = 50) -> Path:
    _, rows = _read_csv(cmc_csv)
    rows = rows[:rank_cap]
    ranks = [int(r[0]) for r in rows]
    vals = [100 * float(r[1]) for r in rows]
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(ranks, vals, marker=".", lw=1)
    ax.set_xlabel("rank")
    ax.set_ylabel("match rate (%)")
    ax.set_xlim(1, max(ranks[-1], 2))
    ax.set_ylim(0, 100)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def plot_confusion(confusion_csv: Path, out_png: Path) -> Path:
    """Row-normalised heat table; classes absent from the test data show as blank (nan) rows."""
    header, rows = _read_csv(confusion_csv)
    n = len(header) - 1
    cm = np.array([[float(v) for v in r[1:]] for r in rows])
    with np.errstate(invalid="ignore", divide="ignore"):
        norm = cm / cm.sum(axis=1, keepdims=True)
    fig, ax = plt.subplots(figsize=(3.6, 3.2))
    im = ax.imshow(norm, vmin=0, vmax=1, cmap="Blues")
    for i in range(n):
        for j in range(n):
            if np.isfinite(cm[i, j]):
                ax.text(j, i, f"{int(cm[i, j])}", ha="center", va="center", fontsize=7)
    ax.set_xticks(range(n))
    ax.set_yticks(range(n))
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def emit_plots(run_dir: str | Path, sparse_every: int = 100, rank_cap: int = 50) -> list[Path]:
    """Render every plot the run's artifacts support into ``run_dir/plots``."""
    run_dir = Path(run_dir)
    if not (run_dir / "run_manifest.json").is_file():
        raise ArtifactMissingError(f"{run_dir}: run_manifest.json not found (not a run directory?)")
    folds = sorted(p for p in run_dir.glob("fold_*") if p.is_dir())
    if not folds:
        raise ArtifactMissingError(f"{run_dir}: no fold directories")
    out_dir = run_dir / "plots"
    out_dir.mkdir(exist_ok=True)
    written = []
    for fold in folds:
        conf = fold / "eval" / "confusion.csv"
        if not conf.is_file():
            raise ArtifactMissingError(f"{conf} missing")
        written.append(plot_confusion(conf, out_dir / f"{fold.name}_confusion.png"))
        cmc = fold / "eval" / "cmc.csv"
        if cmc.is_file():
            written.append(plot_cmc(cmc, out_dir / f"{fold.name}_cmc.png", rank_cap))
        for loss_csv in sorted((fold / "gan").glob("*_loss.csv")):
            written.append(plot_gan_losses(loss_csv, out_dir / f"{fold.name}_{loss_csv.stem}.png", sparse_every))
    return written

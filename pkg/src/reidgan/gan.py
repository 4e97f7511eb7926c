"""DCGAN with a face-gated real-sample stream, warm starts and sampling.

Discriminator outputs are logits; ``sigmoid(logit)`` is the probability that
an image is real, so the "is synthetic" score is ``1 - sigmoid(logit)``.
Losses, all averaged over the batch:

* real step:       ``-log D(x)``          on filter-approved originals
* fake step, D:    ``-log(1 - D(G(z)))``
* fake step, G:    ``-log D(G(z))``        (non-saturating)
"""

from __future__ import annotations

import copy
import csv
import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import HARD, SYNTHETIC, UNIFORM_SOFT, Dataset, Sample
from .semfilter import Detector, DetectorError, FilterStats, filter_samples, verdict

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "reidgan.gan/1"

UNKNOWN_CLASS = "unknown_class"
CLASS_LABEL = "class_label"
LABELINGS = (UNKNOWN_CLASS, UNIFORM_SOFT, CLASS_LABEL)


class GanError(Exception):
    pass


class ArchitectureError(GanError):
    pass


class GatingViolationError(GanError):
    pass


class EmptyFilteredSetError(GanError):
    pass


class DivergenceError(GanError):
    """A loss went non-finite. ``state`` holds the last accepted update."""

    def __init__(self, message, state=None, checkpoint=None):
        super().__init__(message)
        self.state = state
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class GanConfig:
    latent_dim: int = 32
    image_size: int = 32
    g_channels: tuple[int, ...] | None = None
    d_channels: tuple[int, ...] | None = None
    learning_rate: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    g_learning_rate: float | None = None
    d_learning_rate: float | None = None
    batch_size: int = 16
    max_iterations: int = 2000
    filter_enabled: bool = True
    filter_threshold: float = 0.0
    checkpoint_every: int = 0
    dtype: str = "float32"

    @property
    def n_upsamples(self) -> int:
        return int(math.log2(self.image_size)) - 2

    @property
    def generator_channels(self) -> tuple[int, ...]:
        if self.g_channels is not None:
            return tuple(self.g_channels)
        n = self.n_upsamples
        return tuple(16 * 2 ** (n - 1 - i) for i in range(n))

    @property
    def discriminator_channels(self) -> tuple[int, ...]:
        if self.d_channels is not None:
            return tuple(self.d_channels)
        return tuple(16 * 2**i for i in range(self.n_upsamples))

    @property
    def torch_dtype(self) -> torch.dtype:
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]

    def validate(self) -> "GanConfig":
        s = self.image_size
        if s < 8 or s & (s - 1):
            raise ArchitectureError(f"image_size must be a power of two >= 8, got {s}")
        if self.latent_dim < 1:
            raise ArchitectureError("latent_dim must be >= 1")
        if self.batch_size < 2:
            raise ArchitectureError("batch_size must be >= 2")
        n = self.n_upsamples
        for name, ch in (("g_channels", self.generator_channels), ("d_channels", self.discriminator_channels)):
            if len(ch) != n or any(c < 1 for c in ch):
                raise ArchitectureError(
                    f"{name} needs {n} positive entries for image_size {s}, got {list(ch)}"
                )
        if self.dtype not in ("float32", "float64"):
            raise ArchitectureError(f"unsupported dtype {self.dtype}")
        if not 0.0 <= self.filter_threshold <= 1.0:
            raise GanError("filter_threshold must be in [0, 1]")
        return self

    def architecture(self) -> tuple:
        return (self.latent_dim, self.image_size, self.generator_channels, self.discriminator_channels, self.dtype)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["g_channels"] = list(self.generator_channels)
        d["d_channels"] = list(self.discriminator_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GanConfig":
        d = dict(d)
        for k in ("g_channels", "d_channels"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)


class Generator(nn.Module):
    def __init__(self, latent_dim: int, channels: Sequence[int]):
        super().__init__()
        layers = [
            nn.ConvTranspose2d(latent_dim, channels[0], 4, 1, 0, bias=False),
            nn.BatchNorm2d(channels[0]),
            nn.ReLU(True),
        ]
        for c_in, c_out in zip(channels, channels[1:]):
            layers += [nn.ConvTranspose2d(c_in, c_out, 4, 2, 1, bias=False), nn.BatchNorm2d(c_out), nn.ReLU(True)]
        layers += [nn.ConvTranspose2d(channels[-1], 3, 4, 2, 1, bias=False), nn.Tanh()]
        self.net = nn.Sequential(*layers)
        self.latent_dim = latent_dim

    def forward(self, z):
        return self.net(z.view(z.shape[0], self.latent_dim, 1, 1))


class Discriminator(nn.Module):
    def __init__(self, channels: Sequence[int]):
        super().__init__()
        layers = [nn.Conv2d(3, channels[0], 4, 2, 1, bias=False), nn.LeakyReLU(0.2, True)]
        for c_in, c_out in zip(channels, channels[1:]):
            layers += [nn.Conv2d(c_in, c_out, 4, 2, 1, bias=False), nn.BatchNorm2d(c_out), nn.LeakyReLU(0.2, True)]
        layers += [nn.Conv2d(channels[-1], 1, 4, 1, 0, bias=False)]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x).view(-1)


def _dcgan_init(m: nn.Module):
    name = type(m).__name__
    if "Conv" in name:
        nn.init.normal_(m.weight, 0.0, 0.02)
    elif "BatchNorm" in name:
        nn.init.normal_(m.weight, 1.0, 0.02)
        nn.init.zeros_(m.bias)


# loss terms on discriminator logits
def real_loss(logits: torch.Tensor) -> torch.Tensor:
    return F.softplus(-logits).mean()


def fake_loss(logits: torch.Tensor) -> torch.Tensor:
    return F.softplus(logits).mean()


def generator_loss(logits: torch.Tensor) -> torch.Tensor:
    return F.softplus(-logits).mean()


def synthetic_score(logits: torch.Tensor) -> torch.Tensor:
    """The "is synthetic" score ``v = 1 - D(x)``."""
    return torch.sigmoid(-logits)


@dataclass
class LossRecord:
    iteration: int
    d_loss_real: float
    d_loss_fake: float
    g_loss: float


@dataclass
class GatingAudit:
    real_batches: int = 0
    real_samples: int = 0
    approved_samples: int = 0
    verified: bool = True

    @property
    def compliance(self) -> float:
        return self.approved_samples / self.real_samples if self.real_samples else 1.0


@dataclass(eq=False)
class GanState:
    config: GanConfig
    generator: Generator
    discriminator: Discriminator
    g_optimizer: torch.optim.Optimizer
    d_optimizer: torch.optim.Optimizer
    rng: torch.Generator
    seed: int
    iteration: int = 0
    loss_history: list[LossRecord] = field(default_factory=list)
    provenance: str = "scratch"
    target_class: int | None = None
    audit: GatingAudit = field(default_factory=GatingAudit)
    filter_stats: FilterStats | None = None
    pending_real_loss: float | None = None

    @property
    def state_id(self) -> str:
        """Content hash of both parameter sets."""
        h = hashlib.sha1()
        for module in (self.generator, self.discriminator):
            for name, t in module.state_dict().items():
                h.update(name.encode())
                h.update(t.detach().cpu().numpy().tobytes())
        return h.hexdigest()[:12]

    @property
    def generator_id(self) -> str:
        tag = "G" if self.target_class is None else f"G{self.target_class}"
        return f"{tag}@{self.state_id}"

    def generator_params(self) -> list[torch.Tensor]:
        return [p.detach().clone() for p in self.generator.parameters()]

    def discriminator_params(self) -> list[torch.Tensor]:
        return [p.detach().clone() for p in self.discriminator.parameters()]

    def n_parameters(self) -> int:
        return sum(p.numel() for m in (self.generator, self.discriminator) for p in m.parameters())


def _optimizers(config: GanConfig, g: nn.Module, d: nn.Module):
    betas = (config.beta1, config.beta2)
    g_lr = config.learning_rate if config.g_learning_rate is None else config.g_learning_rate
    d_lr = config.learning_rate if config.d_learning_rate is None else config.d_learning_rate
    return (
        torch.optim.Adam(g.parameters(), lr=g_lr, betas=betas),
        torch.optim.Adam(d.parameters(), lr=d_lr, betas=betas),
    )


def init_dcgan(config: GanConfig, seed: int = 0) -> GanState:
    config.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        g = Generator(config.latent_dim, config.generator_channels)
        d = Discriminator(config.discriminator_channels)
        g.apply(_dcgan_init)
        d.apply(_dcgan_init)
    g.to(config.torch_dtype)
    d.to(config.torch_dtype)
    g_opt, d_opt = _optimizers(config, g, d)
    rng = torch.Generator().manual_seed(seed)
    return GanState(config, g, d, g_opt, d_opt, rng, seed)


def _to_tensor(images: np.ndarray, dtype: torch.dtype) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2))).to(dtype)


def _check_finite(value: torch.Tensor, what: str, state: GanState):
    if not torch.isfinite(value):
        raise DivergenceError(f"{what} is not finite at iteration {state.iteration}", state)


def discriminator_step_real(
    state: GanState,
    real_batch: Sequence[Sample],
    detector: Detector | None = None,
    threshold: float | None = None,
) -> tuple[GanState, float]:
    """Update D alone on original samples, minimising ``-log D(x)``.

    With ``filter_enabled`` every sample is re-checked against ``detector``;
    a sample without a detected face raises :class:`GatingViolationError`.
    """
    if not real_batch:
        raise GanError("real batch is empty")
    cfg = state.config
    approved = 0
    if cfg.filter_enabled:
        if detector is None:
            raise DetectorError("filter_enabled but no detector supplied")
        thr = cfg.filter_threshold if threshold is None else threshold
        for i, s in enumerate(real_batch):
            if not verdict(s.image, detector, thr).present:
                raise GatingViolationError(f"batch element {i} (label {s.label}) failed the face filter")
            approved += 1
    else:
        state.audit.verified = False
    x = _to_tensor(np.stack([s.image for s in real_batch]), cfg.torch_dtype)
    loss = real_loss(state.discriminator(x))
    _check_finite(loss, "d_loss_real", state)
    state.d_optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.d_optimizer.step()
    state.audit.real_batches += 1
    state.audit.real_samples += len(real_batch)
    state.audit.approved_samples += approved
    value = float(loss.detach())
    state.pending_real_loss = value
    return state, value


def latent_batch(state: GanState, batch: int | None = None) -> torch.Tensor:
    n = state.config.batch_size if batch is None else batch
    return torch.randn(n, state.config.latent_dim, generator=state.rng, dtype=state.config.torch_dtype)


def adversarial_step_fake(state: GanState, z: torch.Tensor) -> tuple[GanState, float, float]:
    """One discriminator update on ``G(z)`` followed by one generator update.

    Appends a loss record and advances the iteration counter.
    """
    if z.ndim != 2 or z.shape[1] != state.config.latent_dim:
        raise GanError(f"latent batch must be (batch, {state.config.latent_dim}), got {tuple(z.shape)}")
    fake = state.generator(z)
    d_loss = fake_loss(state.discriminator(fake.detach()))
    _check_finite(d_loss, "d_loss_fake", state)
    state.d_optimizer.zero_grad(set_to_none=True)
    d_loss.backward()
    state.d_optimizer.step()

    g_loss = generator_loss(state.discriminator(fake))
    _check_finite(g_loss, "g_loss", state)
    state.g_optimizer.zero_grad(set_to_none=True)
    g_loss.backward()
    state.g_optimizer.step()
    state.discriminator.zero_grad(set_to_none=True)

    d_fake, g = float(d_loss.detach()), float(g_loss.detach())
    real = state.pending_real_loss if state.pending_real_loss is not None else float("nan")
    state.iteration += 1
    state.loss_history.append(LossRecord(state.iteration, real, d_fake, g))
    state.pending_real_loss = None
    return state, d_fake, g


def training_pool(
    samples: Dataset | Sequence[Sample], config: GanConfig, detector: Detector | None, threshold: float | None = None
) -> tuple[list[Sample], FilterStats | None]:
    samples = list(samples)
    if not config.filter_enabled:
        return samples, None
    thr = config.filter_threshold if threshold is None else threshold
    kept, stats = filter_samples(samples, detector, thr)
    if not kept:
        raise EmptyFilteredSetError(
            f"face filter kept 0 of {len(samples)} training samples"
        )
    return kept, stats


def train_dcgan(
    state: GanState,
    samples: Dataset | Sequence[Sample],
    detector: Detector | None = None,
    threshold: float | None = None,
    iterations: int | None = None,
    checkpoint_dir: str | Path | None = None,
) -> GanState:
    """Alternate the real-sample step and the fake-sample step.

    Real batches are drawn (with replacement, from ``state.rng``) out of the
    filter-approved pool when filtering is enabled.
    """
    cfg = state.config
    iterations = cfg.max_iterations if iterations is None else iterations
    if iterations <= 0:
        return state
    pool, stats = training_pool(samples, cfg, detector, threshold)
    if not pool:
        raise GanError("no training samples")
    state.filter_stats = stats
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else None
    n = len(pool)
    target = state.iteration + iterations
    while state.iteration < target:
        idx = torch.randint(n, (cfg.batch_size,), generator=state.rng).tolist()
        try:
            discriminator_step_real(state, [pool[i] for i in idx], detector, threshold)
            adversarial_step_fake(state, latent_batch(state))
        except DivergenceError as exc:
            if ckpt_dir is not None:
                exc.checkpoint = save_gan_checkpoint(state, ckpt_dir / f"gan_diverged_{state.iteration:06d}.pt")
            raise
        if ckpt_dir is not None and cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0:
            save_gan_checkpoint(state, ckpt_dir / f"gan_{state.iteration:06d}.pt")
    return state


def warm_start(
    base: GanState, target_class: int, config: GanConfig | None = None, seed: int | None = None
) -> GanState:
    """Start a class-specific pair from a generically trained base pair.

    ``config`` may change optimisation and filtering settings, not the
    architecture. Optimiser moments start fresh.
    """
    config = base.config if config is None else config.validate()
    if config.architecture() != base.config.architecture():
        raise ArchitectureError(
            f"warm start needs matching architecture: base {base.config.architecture()} vs target {config.architecture()}"
        )
    g = copy.deepcopy(base.generator)
    d = copy.deepcopy(base.discriminator)
    g_opt, d_opt = _optimizers(config, g, d)
    seed = base.seed + 7919 * (int(target_class) + 1) if seed is None else seed
    return GanState(
        config, g, d, g_opt, d_opt, torch.Generator().manual_seed(seed), seed,
        provenance=f"warm_started({base.state_id})", target_class=int(target_class),
    )


@torch.no_grad()
def generate(state: GanState, z: torch.Tensor) -> torch.Tensor:
    """Generator output in inference mode (batch-norm running statistics)."""
    was_training = state.generator.training
    state.generator.eval()
    try:
        return state.generator(z.to(state.config.torch_dtype))
    finally:
        state.generator.train(was_training)


def sample_generator(
    state: GanState, count: int, seed: int, label: int | str = UNIFORM_SOFT, chunk: int = 512
) -> list[Sample]:
    """Draw ``count`` synthetic samples.

    ``label`` is an explicit identity label or one of ``unknown_class``
    (label 0), ``uniform_soft`` (uniform target over all classes) and
    ``class_label`` (the state's target class).
    """
    if count < 1:
        raise GanError("count must be >= 1")
    mode = HARD
    if isinstance(label, str):
        if label == UNKNOWN_CLASS:
            label = 0
        elif label == UNIFORM_SOFT:
            label, mode = 0, UNIFORM_SOFT
        elif label == CLASS_LABEL:
            if state.target_class is None:
                raise GanError("class_label labeling needs a class-specific generator")
            label = state.target_class
        else:
            raise GanError(f"unknown labeling {label!r}")
    rng = torch.Generator().manual_seed(seed)
    gid = state.generator_id
    out = []
    done = 0
    while done < count:
        n = min(chunk, count - done)
        z = torch.randn(n, state.config.latent_dim, generator=rng, dtype=state.config.torch_dtype)
        imgs = generate(state, z).to(torch.float32).clamp_(-1.0, 1.0).permute(0, 2, 3, 1).numpy()
        out.extend(
            Sample(img, int(label), origin=SYNTHETIC, generator_id=gid, label_mode=mode) for img in imgs
        )
        done += n
    return out


# --------------------------------------------------------------------------
# augmentation plans

@dataclass(frozen=True)
class PlanEntry:
    generator: str  # "G", "G0", "G1", ...
    count: int
    labeling: str
    filtered: bool
    class_id: int | None = None


@dataclass(frozen=True)
class AugmentationPlan:
    mode: str
    entries: tuple[PlanEntry, ...]
    original_count: int | None = None

    @property
    def total(self) -> int:
        return sum(e.count for e in self.entries)

    @property
    def synthesis_ratio(self) -> float | None:
        """Synthetic count relative to the original training data."""
        if not self.original_count:
            return None
        return self.total / self.original_count

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "entries": [asdict(e) for e in self.entries],
            "total": self.total,
            "original_count": self.original_count,
            "synthesis_ratio": self.synthesis_ratio,
        }


def build_augmentation_plan(
    mode: str,
    counts: int | dict,
    labeling: str | None = None,
    n_identities: int | None = None,
    filtered: bool = True,
    original_count: int | None = None,
) -> AugmentationPlan:
    """Validate and enumerate (generator, count, labeling) triples.

    ``generic``: one generator ``G`` over all classes; ``counts`` is an int.
    ``per_class``: ``counts`` maps every class 0..N to a count. ``G0`` labels
    its output unknown and is trained unfiltered; ``G1..GN`` use their own
    label and the face filter when ``filtered``.
    """
    if mode == "generic":
        if isinstance(counts, dict):
            if set(counts) != {"G"}:
                raise GanError("generic mode takes a single count for G")
            counts = counts["G"]
        if int(counts) < 1:
            raise GanError("counts must be positive")
        labeling = labeling or UNIFORM_SOFT
        if labeling not in (UNKNOWN_CLASS, UNIFORM_SOFT):
            raise GanError(f"generic generator cannot use labeling {labeling!r}")
        entries = (PlanEntry("G", int(counts), labeling, filtered),)
    elif mode == "per_class":
        if n_identities is None or not isinstance(counts, dict):
            raise GanError("per_class mode needs n_identities and a per-class count mapping")
        keys = {int(k) for k in counts}
        expected = set(range(n_identities + 1))
        if keys != expected:
            raise GanError(f"per_class mode needs counts for classes {sorted(expected)}, got {sorted(keys)}")
        norm = {int(k): int(v) for k, v in counts.items()}
        if any(v < 1 for v in norm.values()):
            raise GanError("counts must be positive")
        entries = tuple(
            PlanEntry(f"G{j}", norm[j], UNKNOWN_CLASS if j == 0 else CLASS_LABEL, filtered and j > 0, j)
            for j in sorted(norm)
        )
    else:
        raise GanError(f"unknown augmentation mode {mode!r}")
    return AugmentationPlan(mode, entries, original_count)


# --------------------------------------------------------------------------
# persistence

def save_gan_checkpoint(state: GanState, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "config": state.config.to_dict(),
            "seed": state.seed,
            "iteration": state.iteration,
            "provenance": state.provenance,
            "target_class": state.target_class,
            "generator": state.generator.state_dict(),
            "discriminator": state.discriminator.state_dict(),
            "g_optimizer": state.g_optimizer.state_dict(),
            "d_optimizer": state.d_optimizer.state_dict(),
            "rng_state": state.rng.get_state(),
            "loss_history": [asdict(r) for r in state.loss_history],
            "audit": asdict(state.audit),
        },
        path,
    )
    return path


def load_gan_checkpoint(path: str | Path) -> GanState:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("format") != CHECKPOINT_FORMAT:
        raise GanError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
    config = GanConfig.from_dict(ckpt["config"])
    state = init_dcgan(config, ckpt["seed"])
    state.generator.load_state_dict(ckpt["generator"])
    state.discriminator.load_state_dict(ckpt["discriminator"])
    state.g_optimizer.load_state_dict(ckpt["g_optimizer"])
    state.d_optimizer.load_state_dict(ckpt["d_optimizer"])
    state.rng.set_state(ckpt["rng_state"])
    state.iteration = ckpt["iteration"]
    state.provenance = ckpt["provenance"]
    state.target_class = ckpt["target_class"]
    state.loss_history = [LossRecord(**r) for r in ckpt["loss_history"]]
    state.audit = GatingAudit(**ckpt["audit"])
    return state


def write_loss_csv(state: GanState, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "d_loss_real", "d_loss_fake", "g_loss"])
        for r in state.loss_history:
            w.writerow([r.iteration, repr(r.d_loss_real), repr(r.d_loss_fake), repr(r.g_loss)])
    return path


def first_below(values: Sequence[float], tau: float, window: int = 1) -> int | None:
    """Iteration count (1-based) at which the trailing mean of ``values`` first drops below ``tau``."""
    vals = np.asarray(values, dtype=float)
    if len(vals) < window:
        return None
    means = np.convolve(vals, np.ones(window) / window, mode="valid")
    hits = np.nonzero(means < tau)[0]
    return int(hits[0] + window) if len(hits) else None

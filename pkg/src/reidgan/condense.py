"""CondenseNet-style Re-ID classifier with learned group convolutions.

Every dense block starts with a 1x1 :class:`LearnedGroupConv`: its output
channels are split into ``groups`` groups and each group learns which input
channels it reads. Over ``C - 1`` condensing stages each group drops the
lowest-magnitude ``1/C`` of its fan-in, so after stage ``s`` a group keeps
``ceil(fan_in * (C - s) / C)`` inputs and ``ceil(fan_in / C)`` at the end.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import UNIFORM_SOFT, Dataset, Sample

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "reidgan.condense/1"


class CondenseError(Exception):
    pass


class ArchitectureError(CondenseError):
    pass


class ScheduleError(CondenseError):
    pass


class TrainingError(CondenseError):
    pass


class DivergenceError(TrainingError):
    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class ShapeError(CondenseError):
    pass


@dataclass(frozen=True)
class CondenseConfig:
    num_classes: int = 5
    input_size: int = 32
    stem_channels: int = 16
    stage_depths: tuple[int, ...] = (2, 2)
    growth_rates: tuple[int, ...] = (8, 16)
    bottleneck: int = 4
    groups: int = 4
    condensation_factor: int = 4
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    stem_stride: int = 2
    dtype: str = "float32"

    @property
    def torch_dtype(self) -> torch.dtype:
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]

    def validate(self) -> "CondenseConfig":
        if self.condensation_factor < 1:
            raise ArchitectureError("condensation_factor must be >= 1")
        if self.groups < 1:
            raise ArchitectureError("groups must be >= 1")
        if self.epochs < 0:
            raise ArchitectureError("epochs must be >= 0")
        if self.num_classes < 2:
            raise ArchitectureError("num_classes (N + 1) must be >= 2")
        if len(self.stage_depths) != len(self.growth_rates) or not self.stage_depths:
            raise ArchitectureError("stage_depths and growth_rates must be non-empty and of equal length")
        downsample = self.stem_stride * 2 ** (len(self.stage_depths) - 1)
        if self.input_size % downsample:
            raise ArchitectureError(f"input_size {self.input_size} not divisible by total stride {downsample}")
        for c_in, c_mid, k in self.layer_plan():
            if c_in % self.groups:
                raise ArchitectureError(
                    f"1x1 learned group conv with {c_in} input channels is not divisible by groups={self.groups}"
                )
            if c_mid % self.groups or k % self.groups:
                raise ArchitectureError(
                    f"channels {c_mid}->{k} not divisible by groups={self.groups}"
                )
        return self

    def layer_plan(self) -> list[tuple[int, int, int]]:
        """(input channels, bottleneck channels, growth) for every dense layer."""
        plan = []
        c = self.stem_channels
        for depth, k in zip(self.stage_depths, self.growth_rates):
            for _ in range(depth):
                plan.append((c, self.bottleneck * k, k))
                c += k
        return plan

    @property
    def out_channels(self) -> int:
        return self.stem_channels + sum(d * k for d, k in zip(self.stage_depths, self.growth_rates))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_depths"] = list(self.stage_depths)
        d["growth_rates"] = list(self.growth_rates)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CondenseConfig":
        d = dict(d)
        d["stage_depths"] = tuple(d["stage_depths"])
        d["growth_rates"] = tuple(d["growth_rates"])
        return cls(**d)


class LearnedGroupConv(nn.Module):
    """BN-ReLU-1x1 convolution whose weights are multiplied by a binary mask."""

    def __init__(self, c_in: int, c_out: int, groups: int, condensation_factor: int):
        super().__init__()
        if c_in % groups or c_out % groups:
            raise ArchitectureError(f"learned group conv {c_in}->{c_out} not divisible by groups={groups}")
        self.groups = groups
        self.condensation_factor = condensation_factor
        self.norm = nn.BatchNorm2d(c_in)
        self.conv = nn.Conv2d(c_in, c_out, 1, bias=False)
        self.register_buffer("mask", torch.ones(c_out, c_in, 1, 1))
        self.stage = 0

    @property
    def fan_in(self) -> int:
        return self.conv.in_channels

    def kept_per_group(self, stage: int | None = None) -> int:
        s = self.stage if stage is None else stage
        c = self.condensation_factor
        return math.ceil(self.fan_in * (c - s) / c)

    def group_slices(self):
        per = self.conv.out_channels // self.groups
        return [slice(g * per, (g + 1) * per) for g in range(self.groups)]

    def live_inputs(self) -> list[torch.Tensor]:
        """Boolean input-channel mask per output group."""
        return [self.mask[sl, :, 0, 0][0].bool() for sl in self.group_slices()]

    def forward(self, x):
        x = F.relu(self.norm(x))
        return F.conv2d(x, self.conv.weight * self.mask)

    @torch.no_grad()
    def condense(self):
        """Advance one stage: each group masks its weakest live inputs."""
        if self.stage + 1 > self.condensation_factor - 1:
            raise ScheduleError(
                f"layer already at final stage {self.stage} for C={self.condensation_factor}"
            )
        target = self.kept_per_group(self.stage + 1)
        w = self.conv.weight[:, :, 0, 0].abs()
        for sl, live in zip(self.group_slices(), self.live_inputs()):
            importance = w[sl].sum(dim=0).cpu().numpy()
            live_idx = np.nonzero(live.cpu().numpy())[0]
            n_drop = len(live_idx) - target
            if n_drop <= 0:
                continue
            # ascending magnitude, ties by channel index
            order = live_idx[np.lexsort((live_idx, importance[live_idx]))]
            self.mask[sl, torch.as_tensor(order[:n_drop])] = 0.0
        self.stage += 1
        self.conv.weight.mul_(self.mask)

    def live_fraction(self) -> float:
        return float(self.mask.sum() / self.mask.numel())


class DenseLayer(nn.Module):
    def __init__(self, c_in: int, bottleneck: int, growth: int, groups: int, condensation_factor: int):
        super().__init__()
        self.lgc = LearnedGroupConv(c_in, bottleneck, groups, condensation_factor)
        self.norm = nn.BatchNorm2d(bottleneck)
        self.conv = nn.Conv2d(bottleneck, growth, 3, padding=1, groups=groups, bias=False)

    def forward(self, x):
        y = self.conv(F.relu(self.norm(self.lgc(x))))
        return torch.cat([x, y], dim=1)


class ReidModel(nn.Module):
    """The Re-ID classifier; ``forward`` returns logits over N + 1 classes."""

    def __init__(self, config: CondenseConfig):
        super().__init__()
        cfg = config.validate()
        self.config = cfg
        self.stem = nn.Conv2d(3, cfg.stem_channels, 3, stride=cfg.stem_stride, padding=1, bias=False)
        stages = []
        plan = iter(cfg.layer_plan())
        for si, depth in enumerate(cfg.stage_depths):
            layers = [DenseLayer(*next(plan), cfg.groups, cfg.condensation_factor) for _ in range(depth)]
            if si < len(cfg.stage_depths) - 1:
                layers.append(nn.AvgPool2d(2))
            stages.append(nn.Sequential(*layers))
        self.features = nn.Sequential(*stages)
        self.head_norm = nn.BatchNorm2d(cfg.out_channels)
        self.classifier = nn.Linear(cfg.out_channels, cfg.num_classes)
        self.epoch = 0
        self.stage = 0

    def forward(self, x):
        x = self.features(self.stem(x))
        x = F.adaptive_avg_pool2d(F.relu(self.head_norm(x)), 1).flatten(1)
        return self.classifier(x)

    def learned_group_convs(self) -> list[LearnedGroupConv]:
        return [m for m in self.modules() if isinstance(m, LearnedGroupConv)]


def build_condensenet(config: CondenseConfig, seed: int = 0) -> ReidModel:
    config.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = ReidModel(config)
        for m in model.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight)
            elif isinstance(m, nn.Linear):
                nn.init.normal_(m.weight, 0.0, 0.01)
                nn.init.zeros_(m.bias)
    return model.to(config.torch_dtype)


def condensation_step(model: ReidModel, stage: int) -> ReidModel:
    """Apply condensing stage ``stage`` (must be the model's next stage)."""
    c = model.config.condensation_factor
    if stage != model.stage + 1 or stage > c - 1:
        raise ScheduleError(f"cannot apply stage {stage}: model at stage {model.stage}, C={c}")
    for layer in model.learned_group_convs():
        layer.condense()
    model.stage = stage
    return model


def condensation_epochs(epochs: int, condensation_factor: int) -> list[int]:
    """Epoch counts after which stages 1..C-1 run, spread over the first half."""
    c = condensation_factor
    if c <= 1 or epochs <= 0:
        return []
    return [max(1, math.ceil(s * epochs / (2 * (c - 1)))) for s in range(1, c)]


def score_vector(logits: torch.Tensor) -> torch.Tensor:
    return torch.softmax(logits, dim=-1)


def soft_cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean of ``-sum_c q_c log softmax(logits)_c`` over the batch."""
    return -(targets * F.log_softmax(logits, dim=-1)).sum(dim=-1).mean()


def target_distribution(samples: Sequence[Sample], num_classes: int, dtype=torch.float32) -> torch.Tensor:
    """One-hot rows for hard labels, uniform rows for ``uniform_soft`` samples."""
    t = torch.zeros(len(samples), num_classes, dtype=dtype)
    for i, s in enumerate(samples):
        if s.label_mode == UNIFORM_SOFT:
            t[i] = 1.0 / num_classes
        else:
            t[i, s.label] = 1.0
    return t


def images_tensor(samples: Sequence[Sample], dtype=torch.float32) -> torch.Tensor:
    arr = np.stack([s.image for s in samples]).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)


@dataclass
class EpochLog:
    epoch: int
    loss: float
    train_prec1: float
    lr: float
    stage: int


@dataclass
class TrainResult:
    model: ReidModel
    log: list[EpochLog] = field(default_factory=list)


def _check_plan(samples: Sequence[Sample], plan) -> None:
    if plan is None:
        if any(s.origin == "synthetic" for s in samples):
            raise TrainingError("synthetic samples present but no augmentation plan given")
        return
    for s in samples:
        if s.origin != "synthetic":
            continue
        tag = s.generator_id.split("@", 1)[0] if s.generator_id else None
        entry = next((e for e in plan.entries if e.generator == tag), None)
        if entry is None:
            raise TrainingError(f"synthetic sample from {s.generator_id!r} not in augmentation plan")
        soft = s.label_mode == UNIFORM_SOFT
        if soft != (entry.labeling == UNIFORM_SOFT):
            raise TrainingError(f"sample from {tag} labelled {s.label_mode}, plan says {entry.labeling}")


def train_reid(
    model: ReidModel,
    train_set: Dataset | Sequence[Sample],
    plan=None,
    config: CondenseConfig | None = None,
    seed: int = 0,
    checkpoint_dir: str | Path | None = None,
) -> TrainResult:
    """SGD with Nesterov momentum and cosine annealing, condensing on schedule.

    ``config`` supplies epochs and optimiser settings (defaults to the
    model's own). Samples are consumed in a seeded shuffle; original and
    synthetic samples are simply concatenated.
    """
    cfg = model.config if config is None else config
    samples = list(train_set)
    result = TrainResult(model)
    if cfg.epochs == 0:
        return result
    if not samples:
        raise TrainingError("empty training set")
    _check_plan(samples, plan)
    dtype = model.config.torch_dtype
    x_all = images_tensor(samples, dtype)
    if x_all.shape[-1] != model.config.input_size:
        raise ShapeError(f"training patches are {x_all.shape[-1]}px, model expects {model.config.input_size}")
    t_all = target_distribution(samples, model.config.num_classes, dtype)
    hard = t_all.argmax(dim=1)
    is_hard = torch.tensor([s.label_mode != UNIFORM_SOFT for s in samples])

    opt = torch.optim.SGD(
        model.parameters(), lr=cfg.lr, momentum=cfg.momentum, nesterov=True, weight_decay=cfg.weight_decay
    )
    steps_per_epoch = math.ceil(len(samples) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    schedule = condensation_epochs(cfg.epochs, model.config.condensation_factor)
    gen = torch.Generator().manual_seed(seed)
    step = 0
    model.train()
    start_epoch = model.epoch
    for e in range(cfg.epochs):
        perm = torch.randperm(len(samples), generator=gen)
        loss_sum, correct, counted = 0.0, 0, 0
        for b in range(steps_per_epoch):
            idx = perm[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            if len(idx) < 2:
                continue  # batch norm needs two samples
            lr = 0.5 * cfg.lr * (1 + math.cos(math.pi * step / total_steps))
            for g in opt.param_groups:
                g["lr"] = lr
            logits = model(x_all[idx])
            loss = soft_cross_entropy(logits, t_all[idx])
            if not torch.isfinite(loss):
                ckpt = None
                if checkpoint_dir is not None:
                    ckpt = save_reid_checkpoint(model, Path(checkpoint_dir) / f"reid_diverged_e{model.epoch}.pt")
                raise DivergenceError(f"non-finite loss at epoch {model.epoch}", ckpt)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            with torch.no_grad():
                for layer in model.learned_group_convs():
                    layer.conv.weight.mul_(layer.mask)
            step += 1
            loss_sum += float(loss.detach()) * len(idx)
            h = is_hard[idx]
            correct += int((logits.detach().argmax(1)[h] == hard[idx][h]).sum())
            counted += int(h.sum())
        model.epoch += 1
        while model.stage < len(schedule) and model.epoch - start_epoch >= schedule[model.stage]:
            condensation_step(model, model.stage + 1)
        result.log.append(
            EpochLog(model.epoch, loss_sum / len(samples), correct / counted if counted else float("nan"), lr, model.stage)
        )
        log.debug("epoch %d loss %.4f prec@1 %.3f", model.epoch, result.log[-1].loss, result.log[-1].train_prec1)
    model.eval()
    return result


@torch.no_grad()
def predict_scores(model: ReidModel, images: np.ndarray | Sequence[Sample], batch: int = 256) -> np.ndarray:
    """Score matrix (M x (N + 1)) for a stack of HxWx3 images or samples."""
    if len(images) and isinstance(images[0], Sample):
        images = np.stack([s.image for s in images])
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[1] != model.config.input_size or images.shape[2] != model.config.input_size:
        raise ShapeError(f"expected (M, {model.config.input_size}, {model.config.input_size}, 3), got {images.shape}")
    was_training = model.training
    model.eval()
    out = []
    for i in range(0, len(images), batch):
        x = torch.from_numpy(np.ascontiguousarray(images[i : i + batch].transpose(0, 3, 1, 2))).to(model.config.torch_dtype)
        out.append(score_vector(model(x)).double().numpy())
    model.train(was_training)
    return np.concatenate(out) if out else np.zeros((0, model.config.num_classes))


@torch.no_grad()
def predict_features(model: ReidModel, samples: Sequence[Sample], batch: int = 256) -> np.ndarray:
    """L2-normalised pooled features (input to the classifier head), for retrieval."""
    was_training = model.training
    model.eval()
    out = []
    for i in range(0, len(samples), batch):
        x = images_tensor(samples[i : i + batch], model.config.torch_dtype)
        f = model.features(model.stem(x))
        f = F.adaptive_avg_pool2d(F.relu(model.head_norm(f)), 1).flatten(1)
        out.append(F.normalize(f, dim=1).double().numpy())
    model.train(was_training)
    return np.concatenate(out) if out else np.zeros((0, model.config.out_channels))


def infer(model: ReidModel, image: np.ndarray) -> np.ndarray:
    """Score vector over N + 1 identities for one HxWx3 patch."""
    image = np.asarray(image)
    if image.shape != (model.config.input_size, model.config.input_size, 3):
        raise ShapeError(f"expected ({model.config.input_size}, {model.config.input_size}, 3), got {image.shape}")
    return predict_scores(model, image[None])[0]


# --------------------------------------------------------------------------
# parameter and multiply-add accounting

def conv_cost(
    c_in: int, c_out: int, k: int | tuple[int, int], h_out: int, w_out: int,
    groups: int = 1, live: int | None = None, bias: bool = False,
) -> tuple[int, int]:
    """(params, multiply-adds) of a convolution; ``live`` overrides the weight count."""
    kh, kw = (k, k) if isinstance(k, int) else k
    weights = (c_in // groups) * c_out * kh * kw if live is None else live
    return weights + (c_out if bias else 0), weights * h_out * w_out


def count_params_flops(model: nn.Module, input_size: int | None = None, in_channels: int = 3) -> tuple[int, int]:
    """Live parameter count and multiply-adds for one input image.

    Convolutions are costed from their shapes and groups (learned group
    convolutions by unmasked weights only), linear layers as ``in * out``.
    Batch-norm affine parameters are counted; their arithmetic is not.
    """
    if input_size is None:
        input_size = model.config.input_size
    sizes: dict[nn.Module, tuple[int, int]] = {}
    hooks = []
    for m in model.modules():
        if isinstance(m, LearnedGroupConv):
            # the masked convolution is applied functionally
            hooks.append(m.register_forward_hook(
                lambda mod, inp, out: sizes.__setitem__(mod.conv, tuple(out.shape[-2:]))))
        elif isinstance(m, nn.Conv2d):
            hooks.append(m.register_forward_hook(
                lambda mod, inp, out: sizes.__setitem__(mod, tuple(out.shape[-2:]))))
    dtype = next(model.parameters()).dtype
    was_training = model.training
    model.eval()
    with torch.no_grad():
        model(torch.zeros(1, in_channels, input_size, input_size, dtype=dtype))
    model.train(was_training)
    for h in hooks:
        h.remove()

    masked = {lgc.conv: lgc for lgc in model.modules() if isinstance(lgc, LearnedGroupConv)}
    params = flops = 0
    for m in model.modules():
        if isinstance(m, nn.Conv2d):
            h, w = sizes[m]
            live = int(masked[m].mask.sum()) if m in masked else None
            p, f = conv_cost(m.in_channels, m.out_channels, m.kernel_size, h, w, m.groups, live, m.bias is not None)
            params += p
            flops += f
        elif isinstance(m, nn.Linear):
            params += m.in_features * m.out_features + (m.out_features if m.bias is not None else 0)
            flops += m.in_features * m.out_features
        elif isinstance(m, nn.BatchNorm2d) and m.affine:
            params += 2 * m.num_features
    return params, flops


# --------------------------------------------------------------------------
# persistence

def save_reid_checkpoint(model: ReidModel, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "config": model.config.to_dict(),
            "state_dict": model.state_dict(),
            "stage": model.stage,
            "layer_stages": [l.stage for l in model.learned_group_convs()],
            "epoch": model.epoch,
        },
        path,
    )
    return path


def load_reid_checkpoint(path: str | Path) -> ReidModel:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("format") != CHECKPOINT_FORMAT:
        raise CondenseError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
    model = build_condensenet(CondenseConfig.from_dict(ckpt["config"]))
    model.load_state_dict(ckpt["state_dict"])
    model.stage = ckpt["stage"]
    model.epoch = ckpt["epoch"]
    for layer, s in zip(model.learned_group_convs(), ckpt["layer_stages"]):
        layer.stage = s
    model.eval()
    return model


def write_training_log(entries: Sequence[EpochLog], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "train_prec1", "lr", "stage"])
        for e in entries:
            w.writerow([e.epoch, repr(e.loss), repr(e.train_prec1), repr(e.lr), e.stage])
    return path

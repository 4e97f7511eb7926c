"""Samples, datasets, manifests, the toy corpus and split construction."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import yaml
from PIL import Image

ORIGINAL = "original"
SYNTHETIC = "synthetic"
HARD = "hard"
UNIFORM_SOFT = "uniform_soft"

MANIFEST_HEADER = ("path", "label", "session", "tracklet")


class DataError(Exception):
    """Base class for dataset problems."""


class LoadError(DataError):
    pass


class SchemaError(DataError):
    pass


class EmptyDatasetError(DataError):
    pass


class SplitError(DataError):
    pass


class HoldoutError(DataError):
    pass


class ConfigError(DataError):
    pass


def check_label(j: int, n_identities: int) -> int:
    """Validate an identity label; 0 is the unknown identity."""
    if n_identities < 1:
        raise SchemaError(f"n_identities must be >= 1, got {n_identities}")
    if not 0 <= int(j) <= n_identities:
        raise SchemaError(f"label {j} outside 0..{n_identities}")
    return int(j)


@dataclass(frozen=True, eq=False)
class Sample:
    """One image patch (H x W x 3, values in [-1, 1]) with provenance.

    ``label_mode`` is ``"hard"`` for a one-hot target on ``label`` and
    ``"uniform_soft"`` for a uniform target over all classes (``label`` is then
    nominal). ``has_face`` is generation metadata, known only for toy samples.
    """

    image: np.ndarray
    label: int
    session_id: int = 0
    tracklet_id: int = 0
    origin: str = ORIGINAL
    generator_id: str | None = None
    label_mode: str = HARD
    has_face: bool | None = None

    def __post_init__(self):
        if self.origin not in (ORIGINAL, SYNTHETIC):
            raise SchemaError(f"unknown origin {self.origin!r}")
        if self.origin == ORIGINAL and self.generator_id is not None:
            raise SchemaError("original samples carry no generator_id")
        if self.label_mode not in (HARD, UNIFORM_SOFT):
            raise SchemaError(f"unknown label_mode {self.label_mode!r}")
        img = self.image
        if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] != img.shape[1]:
            raise SchemaError(f"expected square HxWx3 image, got {img.shape}")
        if img.size and (img.min() < -1.0 or img.max() > 1.0):
            raise SchemaError("pixel values outside [-1, 1]")
        if img.flags.writeable:
            img = np.array(img, dtype=np.float32)
            img.flags.writeable = False
            object.__setattr__(self, "image", img)

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, f.name), getattr(other, f.name))
            if f.name == "image"
            else getattr(self, f.name) == getattr(other, f.name)
            for f in fields(self)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Dataset:
    samples: tuple[Sample, ...]
    n_identities: int
    session_index: dict[int, tuple[int, ...]] = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        index: dict[int, list[int]] = {}
        for i, s in enumerate(self.samples):
            check_label(s.label, self.n_identities)
            index.setdefault(s.session_id, []).append(i)
        object.__setattr__(
            self, "session_index", {k: tuple(v) for k, v in sorted(index.items())}
        )

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.n_identities == other.n_identities and self.samples == other.samples

    __hash__ = None

    @property
    def sessions(self) -> list[int]:
        return list(self.session_index)

    @property
    def patch_size(self) -> int | None:
        return self.samples[0].image.shape[0] if self.samples else None

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def images(self) -> np.ndarray:
        """Stacked images, shape (M, H, W, 3)."""
        return np.stack([s.image for s in self.samples])

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return Dataset(tuple(self.samples[i] for i in indices), self.n_identities)

    def select_sessions(self, sessions: Iterable[int]) -> "Dataset":
        keep = set(sessions)
        return Dataset(
            tuple(s for s in self.samples if s.session_id in keep), self.n_identities
        )

    def of_class(self, j: int) -> "Dataset":
        return Dataset(tuple(s for s in self.samples if s.label == j), self.n_identities)

    def extended(self, extra: Sequence[Sample]) -> "Dataset":
        return Dataset(self.samples + tuple(extra), self.n_identities)

    def class_counts(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for s in self.samples:
            counts[s.label] = counts.get(s.label, 0) + 1
        return dict(sorted(counts.items()))


@dataclass(frozen=True)
class SplitPlan:
    folds: tuple[tuple[frozenset, frozenset], ...]
    holdout_fraction: float = 0.15


def _to_unit_range(pixels: np.ndarray) -> np.ndarray:
    return (pixels.astype(np.float32) / 127.5) - 1.0


def load_dataset(
    manifest_path: str | Path, n_identities: int, patch_size: int | None = None
) -> Dataset:
    """Read a ``path,label,session,tracklet`` manifest into a Dataset.

    Image paths are resolved relative to the manifest's directory. Pixels are
    rescaled from 0..255 to [-1, 1]; ``patch_size`` resizes each patch.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise LoadError(f"manifest not found: {manifest_path}")
    root = manifest_path.parent
    samples = []
    with open(manifest_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_HEADER:
            raise SchemaError(
                f"manifest header must be {','.join(MANIFEST_HEADER)}, got {reader.fieldnames}"
            )
        for rowno, row in enumerate(reader, start=2):
            try:
                label = int(row["label"])
                session = int(row["session"])
                tracklet = int(row["tracklet"])
            except (TypeError, ValueError) as exc:
                raise SchemaError(f"row {rowno}: non-integer field ({exc})") from None
            if session < 0 or tracklet < 0:
                raise SchemaError(f"row {rowno}: negative session/tracklet")
            try:
                check_label(label, n_identities)
            except SchemaError as exc:
                raise SchemaError(f"row {rowno}: {exc}") from None
            path = root / row["path"]
            try:
                with Image.open(path) as im:
                    im = im.convert("RGB")
                    if patch_size is not None and im.size != (patch_size, patch_size):
                        im = im.resize((patch_size, patch_size), Image.BILINEAR)
                    pixels = np.asarray(im)
            except (OSError, ValueError) as exc:
                raise LoadError(f"row {rowno}: cannot read image {row['path']!r}: {exc}") from None
            samples.append(Sample(_to_unit_range(pixels), label, session, tracklet))
    if not samples:
        raise EmptyDatasetError(f"manifest {manifest_path} lists no samples")
    sizes = {s.image.shape for s in samples}
    if len(sizes) > 1:
        raise SchemaError(f"mixed patch sizes {sorted(sizes)}; pass patch_size")
    return Dataset(tuple(samples), n_identities)


def write_manifest(dataset: Dataset, directory: str | Path) -> Path:
    """Write a dataset as PNG patches plus manifest.csv (inverse of load_dataset)."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    manifest = directory / "manifest.csv"
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_HEADER)
        for i, s in enumerate(dataset.samples):
            rel = f"images/{i:06d}.png"
            pixels = np.round((s.image + 1.0) * 127.5).clip(0, 255).astype(np.uint8)
            Image.fromarray(pixels).save(directory / rel)
            w.writerow([rel, s.label, s.session_id, s.tracklet_id])
    return manifest


def make_loso_splits(dataset: Dataset, holdout_fraction: float = 0.15) -> SplitPlan:
    """One fold per session: that session is the test set, the rest train."""
    sessions = dataset.sessions
    if len(sessions) < 2:
        raise SplitError(f"leave-one-session-out needs >= 2 sessions, got {len(sessions)}")
    everything = frozenset(sessions)
    folds = tuple((everything - {s}, frozenset({s})) for s in sessions)
    return SplitPlan(folds, holdout_fraction)


def holdout_count(n: int, fraction: float) -> int:
    return max(1, math.floor(fraction * n))


def holdout_per_class(
    dataset: Dataset, fraction: float = 0.15, seed: int = 0
) -> tuple[Dataset, Dataset]:
    """Withhold ``max(1, floor(fraction * n_c))`` samples of every class for testing.

    Both outputs keep the input's sample order.
    """
    if not 0.0 < fraction < 1.0:
        raise HoldoutError(f"fraction must be in (0, 1), got {fraction}")
    by_class: dict[int, list[int]] = {}
    for i, s in enumerate(dataset.samples):
        by_class.setdefault(s.label, []).append(i)
    rng = np.random.default_rng(seed)
    test_idx: set[int] = set()
    for label, idx in sorted(by_class.items()):
        if len(idx) < 2:
            raise HoldoutError(f"class {label} has {len(idx)} sample(s); need >= 2")
        order = rng.permutation(len(idx))
        test_idx.update(idx[k] for k in order[: holdout_count(len(idx), fraction)])
    train = [i for i in range(len(dataset)) if i not in test_idx]
    test = [i for i in range(len(dataset)) if i in test_idx]
    return dataset.subset(train), dataset.subset(test)


# --------------------------------------------------------------------------
# toy corpus

SKIN = np.array([0.85, 0.45, 0.15], dtype=np.float32)
HAIR = np.array([-0.55, -0.75, -0.85], dtype=np.float32)
EYE = np.array([-1.0, -1.0, -1.0], dtype=np.float32)
NOISE = 0.06
# colours closer than this (L-inf) to SKIN are never drawn outside a face glyph
SKIN_MARGIN = 0.45


@dataclass(frozen=True)
class ToyCorpusConfig:
    """Parameters of the procedurally rendered desk-scale corpus.

    Key-value file fields (YAML): ``n_identities``, ``n_sessions``,
    ``samples_per_session``, ``patch_size``, ``p_face``, ``p_unknown``,
    ``p_outfit_change``.
    """

    n_identities: int = 4
    n_sessions: int = 4
    samples_per_session: int = 50
    patch_size: int = 32
    p_face: float = 0.6
    p_unknown: float = 0.15
    p_outfit_change: float = 0.25

    def __post_init__(self):
        if not 0.0 <= self.p_face <= 1.0:
            raise ConfigError(f"p_face must be in [0, 1], got {self.p_face}")
        if not 0.0 <= self.p_unknown < 1.0:
            raise ConfigError(f"p_unknown must be in [0, 1), got {self.p_unknown}")
        if not 0.0 <= self.p_outfit_change <= 1.0:
            raise ConfigError("p_outfit_change must be in [0, 1]")
        if self.n_identities < 1 or self.n_sessions < 1 or self.samples_per_session < 1:
            raise ConfigError("counts must be positive")
        if self.patch_size < 16:
            raise ConfigError("patch_size must be >= 16")

    @classmethod
    def from_file(cls, path: str | Path) -> "ToyCorpusConfig":
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
        return cls.from_mapping(raw)

    @classmethod
    def from_mapping(cls, raw: dict) -> "ToyCorpusConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown toy-corpus keys: {sorted(unknown)}")
        return cls(**raw)


def _far_from_skin(rng: np.random.Generator, lo: float = -0.9, hi: float = 0.9) -> np.ndarray:
    while True:
        c = rng.uniform(lo, hi, size=3).astype(np.float32)
        if np.abs(c - SKIN).max() > SKIN_MARGIN + 0.15 and np.abs(c - HAIR).max() > 0.3:
            return c


@dataclass(frozen=True)
class _Look:
    shirt: np.ndarray
    pants: np.ndarray
    width: float  # torso half-width in units of patch size
    stripe: bool


def _render_person(img, look: _Look, cx: float, top: float, face: bool, s: int):
    unit = s / 32.0
    head = max(3, int(round(6 * unit)))
    hx0 = int(round(cx - head / 2))
    hy0 = int(round(top))
    torso_h = int(round(11 * unit))
    legs_h = int(round(9 * unit))
    half = look.width * s
    tx0, tx1 = int(round(cx - half)), int(round(cx + half))
    ty0 = hy0 + head + 1
    img[ty0 : ty0 + torso_h, tx0:tx1] = look.shirt
    if look.stripe:
        img[ty0 + torso_h // 2 : ty0 + torso_h // 2 + max(1, int(unit * 2)), tx0:tx1] = look.pants
    ly0 = ty0 + torso_h
    gap = max(1, int(round(unit)))
    img[ly0 : ly0 + legs_h, tx0 : int(round(cx)) - gap // 2 + 1 - 1] = look.pants
    img[ly0 : ly0 + legs_h, int(round(cx)) + gap // 2 + 1 : tx1] = look.pants
    if face:
        img[hy0 : hy0 + head, hx0 : hx0 + head] = SKIN
        ey = hy0 + head // 3
        img[ey, hx0 + head // 4] = EYE
        img[ey, hx0 + head - 1 - head // 4] = EYE
    else:
        img[hy0 : hy0 + head, hx0 : hx0 + head] = HAIR


def synth_toy_corpus(config: ToyCorpusConfig, seed: int = 0) -> Dataset:
    """Render a deterministic corpus of toy "person" patches.

    Each identity has a signature outfit (shirt and trouser colours, torso
    width, optional stripe) that may change between sessions. Label 0 patches
    are clutter: random rectangles or two partial people. A face glyph (skin
    block with two eye pixels) replaces the back-of-head block with
    probability ``p_face``; its presence is stored in ``Sample.has_face``.
    """
    rng = np.random.default_rng(seed)
    n, s = config.n_identities, config.patch_size
    looks = {
        j: _Look(_far_from_skin(rng), _far_from_skin(rng), rng.uniform(0.14, 0.26), bool(rng.random() < 0.5))
        for j in range(1, n + 1)
    }
    session_looks = {}
    session_bg = {}
    for sess in range(config.n_sessions):
        session_bg[sess] = _far_from_skin(rng, -0.8, 0.2)
        for j in range(1, n + 1):
            base = looks[j]
            if rng.random() < config.p_outfit_change:
                session_looks[sess, j] = _Look(_far_from_skin(rng), base.pants, base.width, base.stripe)
            else:
                session_looks[sess, j] = base

    samples = []
    for sess in range(config.n_sessions):
        tracklet = 0
        prev_label = None
        for _ in range(config.samples_per_session):
            if rng.random() < config.p_unknown:
                label = 0
            else:
                label = int(rng.integers(1, n + 1))
            if label != prev_label:
                tracklet += 1
                prev_label = label
            face = bool(rng.random() < config.p_face)
            img = np.empty((s, s, 3), dtype=np.float32)
            img[:] = session_bg[sess] + rng.uniform(-0.08, 0.08, size=3).astype(np.float32)
            cx = s / 2 + rng.uniform(-2, 2) * s / 32
            top = 2 * s / 32 + rng.uniform(0, 2) * s / 32
            if label == 0:
                for _ in range(int(rng.integers(2, 5))):
                    x0, y0 = rng.integers(0, s - 4, size=2)
                    w, h = rng.integers(3, s // 2, size=2)
                    img[y0 : y0 + h, x0 : x0 + w] = _far_from_skin(rng)
                if rng.random() < 0.5:
                    extra = _Look(_far_from_skin(rng), _far_from_skin(rng), 0.12, False)
                    _render_person(img, extra, s * 0.25, top, False, s)
                    _render_person(img, extra, s * 0.75, top + s / 16, False, s)
                _render_person(img, _Look(_far_from_skin(rng), _far_from_skin(rng), 0.1, False), cx, top, face, s)
            else:
                _render_person(img, session_looks[sess, label], cx, top, face, s)
            img += rng.uniform(-NOISE, NOISE, size=img.shape).astype(np.float32)
            np.clip(img, -1.0, 1.0, out=img)
            samples.append(Sample(img, label, sess, tracklet, has_face=face))
    return Dataset(tuple(samples), n)

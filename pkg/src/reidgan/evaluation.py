"""Closed-set and retrieval metrics: prec@k, mAP, CMC, confusion matrices.

Ranking ties are always broken by ascending class (or gallery/row) index.
``scope="ALL"`` evaluates every ground-truth label; ``scope="p-ID"`` drops
rows whose ground truth is the unknown identity 0 but keeps all N + 1 score
columns.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

ALL = "ALL"
PID = "p-ID"
SCOPES = (ALL, PID)


class MetricError(Exception):
    pass


class ProtocolError(MetricError):
    pass


@dataclass(frozen=True)
class ScoreMatrix:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if scores.ndim != 2 or labels.shape != (scores.shape[0],):
            raise MetricError(f"scores {scores.shape} and labels {labels.shape} do not align")
        if scores.size and not np.allclose(scores.sum(axis=1), 1.0, atol=1e-6):
            raise MetricError("score rows must sum to 1")
        if labels.size and (labels.min() < 0 or labels.max() >= scores.shape[1]):
            raise MetricError("labels out of range")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels)

    @property
    def num_classes(self) -> int:
        return self.scores.shape[1]

    def in_scope(self, scope: str) -> "ScoreMatrix":
        if scope == ALL:
            return self
        if scope == PID:
            keep = self.labels != 0
            return ScoreMatrix(self.scores[keep], self.labels[keep])
        raise MetricError(f"unknown scope {scope!r}")


def _rank_order(scores: np.ndarray) -> np.ndarray:
    """Column order per row: descending score, ascending index on ties."""
    return np.argsort(-scores, axis=1, kind="stable")


def true_class_rank(matrix: ScoreMatrix) -> np.ndarray:
    """0-based rank of each row's true class."""
    order = _rank_order(matrix.scores)
    return np.argmax(order == matrix.labels[:, None], axis=1)


def prec_at_k(matrix: ScoreMatrix, k: int = 1, scope: str = ALL) -> float:
    if not 1 <= k <= matrix.num_classes:
        raise MetricError(f"k must be in 1..{matrix.num_classes}, got {k}")
    m = matrix.in_scope(scope)
    if len(m.labels) == 0:
        raise MetricError(f"no rows in scope {scope}")
    return float(np.mean(true_class_rank(m) < k))


def average_precision(relevant_in_rank_order: np.ndarray) -> float:
    """AP of a ranked binary relevance list (must contain a positive)."""
    rel = np.asarray(relevant_in_rank_order, dtype=bool)
    hits = np.cumsum(rel)
    precision = hits / np.arange(1, len(rel) + 1)
    return float(precision[rel].mean())


def classification_ap(matrix: ScoreMatrix, scope: str = ALL) -> tuple[dict[int, float], list[int]]:
    """One-vs-rest AP per in-scope class, plus classes excluded for lacking positives."""
    m = matrix.in_scope(scope)
    classes = range(matrix.num_classes) if scope == ALL else range(1, matrix.num_classes)
    aps, excluded = {}, []
    for c in classes:
        pos = m.labels == c
        if not pos.any():
            excluded.append(c)
            continue
        order = np.argsort(-m.scores[:, c], kind="stable")
        aps[c] = average_precision(pos[order])
    return aps, excluded


def mean_ap_classification(matrix: ScoreMatrix, scope: str = ALL) -> float:
    aps, _ = classification_ap(matrix, scope)
    if not aps:
        raise MetricError(f"no class in scope {scope} has a positive row")
    return float(np.mean(list(aps.values())))


def cmc_single_query(
    distmat: np.ndarray,
    q_labels: Sequence[int],
    g_labels: Sequence[int],
    q_cams: Sequence[int] | None = None,
    g_cams: Sequence[int] | None = None,
    exclude_same_camera: bool = True,
    max_rank: int | None = None,
) -> tuple[np.ndarray, float]:
    """Single-query CMC curve and retrieval mAP from a query x gallery distance matrix.

    Smaller distance ranks first. With ``exclude_same_camera`` gallery entries
    of the query's identity taken by the query's camera (session) are
    dropped before ranking. The curve has ``max_rank`` entries (default: the
    gallery size); queries whose filtered gallery is shorter carry their last
    value forward.
    """
    distmat = np.asarray(distmat, dtype=np.float64)
    q_labels, g_labels = np.asarray(q_labels), np.asarray(g_labels)
    n_q, n_g = distmat.shape
    if q_labels.shape != (n_q,) or g_labels.shape != (n_g,):
        raise ProtocolError("label arrays do not match the distance matrix")
    if exclude_same_camera and (q_cams is None or g_cams is None):
        raise ProtocolError("camera ids required when excluding same-camera matches")
    max_rank = n_g if max_rank is None else max_rank
    curves, aps = [], []
    for qi in range(n_q):
        order = np.argsort(distmat[qi], kind="stable")
        keep = np.ones(n_g, dtype=bool)
        if exclude_same_camera:
            keep = ~((g_labels[order] == q_labels[qi]) & (np.asarray(g_cams)[order] == q_cams[qi]))
        matches = g_labels[order][keep] == q_labels[qi]
        if not matches.any():
            raise ProtocolError(f"query {qi} (label {q_labels[qi]}) has no valid gallery match")
        hit = np.cumsum(matches) > 0
        curve = np.ones(max_rank)
        curve[: min(max_rank, len(hit))] = hit[:max_rank]
        curves.append(curve)
        aps.append(average_precision(matches))
    if not curves:
        raise ProtocolError("no queries")
    return np.mean(curves, axis=0), float(np.mean(aps))


def confusion_matrix(matrix: ScoreMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Counts indexed (true, predicted) and a per-class presence flag."""
    n = matrix.num_classes
    pred = _rank_order(matrix.scores)[:, 0] if len(matrix.labels) else np.zeros(0, dtype=np.int64)
    cm = np.zeros((n, n), dtype=np.int64)
    np.add.at(cm, (matrix.labels, pred), 1)
    return cm, cm.sum(axis=1) > 0


@dataclass
class EvalReport:
    prec_at: dict[str, dict[int, float]]
    map_all: float | None
    map_pid: float | None
    confusion: list[list[int]]
    present: list[bool]
    cmc: list[float] | None = None
    retrieval_map: float | None = None
    map_protocol: str = "classification one-vs-rest"
    warnings: list[str] = field(default_factory=list)
    n_rows: dict[str, int] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "prec_at": {s: {str(k): v for k, v in d.items()} for s, d in self.prec_at.items()},
            "map_all": self.map_all,
            "map_pid": self.map_pid,
            "map_protocol": self.map_protocol,
            "cmc": self.cmc,
            "retrieval_map": self.retrieval_map,
            "confusion": self.confusion,
            "present": self.present,
            "n_rows": self.n_rows,
            "warnings": self.warnings,
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json() + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            prec_at={s: {int(k): v for k, v in m.items()} for s, m in d["prec_at"].items()},
            map_all=d["map_all"], map_pid=d["map_pid"], confusion=d["confusion"], present=d["present"],
            cmc=d["cmc"], retrieval_map=d["retrieval_map"], map_protocol=d["map_protocol"],
            warnings=d["warnings"], n_rows=d["n_rows"], config=d["config"],
        )

    def metric(self, name: str) -> float | None:
        """Registry-style lookup, as percentages: ``ALL prec@1``, ``p-ID mAP``, ``CMC@1 S-Q`` ..."""
        scope, _, what = name.partition(" ")
        if name == "CMC@1 S-Q":
            return None if self.cmc is None else 100 * self.cmc[0]
        if name == "mAP S-Q":
            return None if self.retrieval_map is None else 100 * self.retrieval_map
        if scope not in SCOPES:
            scope, what = ALL, name
        if what == "mAP":
            v = self.map_all if scope == ALL else self.map_pid
            return None if v is None else 100 * v
        if what.startswith("prec@"):
            v = self.prec_at.get(scope, {}).get(int(what[5:]))
            return None if v is None else 100 * v
        raise KeyError(name)


def evaluate_scores(matrix: ScoreMatrix, ks: Sequence[int] = (1, 5), config: dict | None = None) -> EvalReport:
    """Build an EvalReport for a closed-set score matrix (both scopes)."""
    prec, n_rows, warns = {}, {}, []
    maps = {}
    for scope in SCOPES:
        m = matrix.in_scope(scope)
        n_rows[scope] = int(len(m.labels))
        if not len(m.labels):
            warns.append(f"{scope}: no rows in scope; metrics undefined")
            maps[scope] = None
            continue
        prec[scope] = {k: prec_at_k(matrix, k, scope) for k in ks if k <= matrix.num_classes}
        aps, excluded = classification_ap(matrix, scope)
        for c in excluded:
            warns.append(f"{scope}: class {c} has no test rows; excluded from mAP")
        maps[scope] = float(np.mean(list(aps.values()))) if aps else None
    cm, present = confusion_matrix(matrix)
    return EvalReport(
        prec_at=prec, map_all=maps[ALL], map_pid=maps[PID], confusion=cm.tolist(),
        present=present.tolist(), warnings=warns, n_rows=n_rows, config=dict(config or {}),
    )


def aggregate_reports(reports: Sequence[EvalReport]) -> dict:
    """Mean of every scalar metric over folds, skipping undefined values."""
    out: dict = {"folds": len(reports)}
    names = ["ALL prec@1", "p-ID prec@1", "ALL prec@5", "p-ID prec@5", "ALL mAP", "p-ID mAP", "CMC@1 S-Q", "mAP S-Q"]
    for name in names:
        vals = [r.metric(name) for r in reports]
        vals = [v for v in vals if v is not None]
        out[name] = float(np.mean(vals)) if vals else None
    return out


def write_cmc_csv(cmc: Sequence[float], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "match_rate"])
        for r, v in enumerate(cmc, start=1):
            w.writerow([r, repr(float(v))])
    return path


def write_confusion_csv(confusion: Sequence[Sequence[int]], present: Sequence[bool], path: str | Path) -> Path:
    """Rows are true classes; absent classes are written as ``nan``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = len(confusion)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["true\\pred"] + [str(c) for c in range(n)])
        for c, row in enumerate(confusion):
            w.writerow([c] + ([str(v) for v in row] if present[c] else ["nan"] * n))
    return path

"""Retrieval and phrase-localization metrics plus report writers."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError

__all__ = [
    "RetrievalRanking",
    "recall_at_k",
    "rsum",
    "BoundingBox",
    "iou",
    "LocalizationCase",
    "localization_recall",
    "rank_by_score",
    "retrieval_metrics",
    "write_metric_report",
]


@dataclass
class RetrievalRanking:
    """One query's ranked candidate ids and the gold ids that count as hits."""

    query_id: str
    ranked_ids: list
    gold_ids: set

    def __post_init__(self):
        self.ranked_ids = list(self.ranked_ids)
        self.gold_ids = set(self.gold_ids)
        if len(set(self.ranked_ids)) != len(self.ranked_ids):
            raise InvalidArgumentError(f"query {self.query_id!r}: ranked ids contain duplicates")
        if not self.gold_ids:
            raise InvalidArgumentError(f"query {self.query_id!r}: gold id set is empty")


def recall_at_k(rankings, k: int) -> float:
    """Fraction of queries with a gold id among the top k candidates.

    A k beyond the candidate list counts a hit iff a gold id appears
    anywhere in the ranking.
    """
    if k < 1:
        raise InvalidArgumentError(f"k must be >= 1, got {k}")
    rankings = list(rankings)
    if not rankings:
        raise InvalidArgumentError("empty ranking list")
    hits = sum(1 for r in rankings if any(c in r.gold_ids for c in r.ranked_ids[:k]))
    return hits / len(rankings)


def rsum(i2t, t2i) -> float:
    """Sum of six recall fractions reported in percentage points."""
    values = list(i2t) + list(t2i)
    if len(values) != 6:
        raise InvalidArgumentError(f"expected three recalls per direction, got {len(list(i2t))} and {len(list(t2i))}")
    for v in values:
        if not -1e-9 <= v <= 1.0 + 1e-9:
            raise InvalidArgumentError(f"recall fraction {v!r} outside [0, 1]")
    return float(sum(100.0 * v for v in values))


@dataclass
class BoundingBox:
    """Axis-aligned box with corner (x1, y1) inclusive and (x2, y2) exclusive."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise InvalidArgumentError(f"box must have positive area, got ({self.x1}, {self.y1}, {self.x2}, {self.y2})")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)


def _coords(box) -> tuple[float, float, float, float]:
    if isinstance(box, BoundingBox):
        return box.x1, box.y1, box.x2, box.y2
    vals = tuple(float(c) for c in box)
    if len(vals) != 4:
        raise InvalidArgumentError(f"box needs 4 coordinates, got {len(vals)}")
    if not (vals[2] > vals[0] and vals[3] > vals[1]):
        raise InvalidArgumentError(f"box must have positive area, got {vals}")
    return vals


def iou(a, b) -> float:
    """Intersection over union of two boxes, in [0, 1]."""
    ax1, ay1, ax2, ay2 = _coords(a)
    bx1, by1, bx2, by2 = _coords(b)
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


@dataclass
class LocalizationCase:
    """One token to ground: candidate region boxes and nonempty gold boxes."""

    token_index: int
    candidate_boxes: list
    gold_boxes: list

    def __post_init__(self):
        if not self.gold_boxes:
            raise InvalidArgumentError(f"token {self.token_index}: gold box list is empty")
        if not self.candidate_boxes:
            raise InvalidArgumentError(f"token {self.token_index}: candidate box list is empty")


def localization_recall(cases, predictions, k: int, iou_threshold: float = 0.5) -> float:
    """Fraction of cases where a top-k predicted region overlaps a gold box.

    `predictions[i]` is the ranked region index list for `cases[i]`; a case
    hits when any of its first k regions reaches `iou_threshold` against any
    gold box.
    """
    if k < 1:
        raise InvalidArgumentError(f"k must be >= 1, got {k}")
    if not 0.0 <= iou_threshold <= 1.0:
        raise InvalidArgumentError(f"iou_threshold must be in [0, 1], got {iou_threshold}")
    cases = list(cases)
    predictions = list(predictions)
    if not cases:
        raise InvalidArgumentError("empty case list")
    if len(cases) != len(predictions):
        raise InvalidArgumentError(f"{len(cases)} cases but {len(predictions)} predictions")
    hits = 0
    for case, ranked in zip(cases, predictions):
        for idx in list(ranked)[:k]:
            if not 0 <= idx < len(case.candidate_boxes):
                raise InvalidArgumentError(f"token {case.token_index}: predicted region {idx} out of range")
        top = [case.candidate_boxes[i] for i in list(ranked)[:k]]
        if any(iou(box, gold) >= iou_threshold for box in top for gold in case.gold_boxes):
            hits += 1
    return hits / len(cases)


def rank_by_score(scores, candidate_ids=None) -> list:
    """Candidates ordered by descending score; ties keep the lowest index."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.size < 1:
        raise InvalidArgumentError(f"scores must be 1-d and nonempty, got shape {s.shape}")
    order = np.argsort(-s, kind="stable")
    if candidate_ids is None:
        return [int(i) for i in order]
    candidate_ids = list(candidate_ids)
    if len(candidate_ids) != s.size:
        raise InvalidArgumentError(f"{len(candidate_ids)} ids for {s.size} scores")
    return [candidate_ids[i] for i in order]


def retrieval_metrics(scores, ks=(1, 5, 10)) -> dict[str, float]:
    """Both-direction R@k and rsum from a square image-by-text score matrix.

    Row i scores image i against every text; the matching index is the gold
    in both directions.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise InvalidArgumentError(f"score matrix must be square, got shape {s.shape}")
    n = s.shape[0]
    i2t = [RetrievalRanking(f"image{i}", rank_by_score(s[i]), {i}) for i in range(n)]
    t2i = [RetrievalRanking(f"text{j}", rank_by_score(s[:, j]), {j}) for j in range(n)]
    metrics = {}
    for k in ks:
        metrics[f"i2t_R@{k}"] = recall_at_k(i2t, k)
        metrics[f"t2i_R@{k}"] = recall_at_k(t2i, k)
    metrics["rsum"] = rsum([metrics[f"i2t_R@{k}"] for k in ks], [metrics[f"t2i_R@{k}"] for k in ks])
    return metrics


def format_metric_lines(metrics: dict[str, float]) -> list[str]:
    """Render recalls as percent with 9 significant digits, one line each."""
    lines = []
    for key in sorted(metrics, key=_metric_order):
        value = metrics[key] * 100.0 if key != "rsum" else metrics[key]
        lines.append(f"{key}={value:.9g}")
    return lines


def _metric_order(key: str):
    prefix = 0 if key.startswith("i2t") else 1 if key.startswith("t2i") else 2 if key.startswith("loc") else 3
    digits = "".join(c for c in key if c.isdigit())
    return (prefix, int(digits) if digits else 0, key)


def write_metric_report(prefix, metrics: dict[str, float], metadata: dict) -> tuple[Path, Path]:
    """Write `<prefix>.txt` (key=value lines) and `<prefix>.json` (full data).

    The JSON carries exact fractions, percent values rounded to one decimal,
    and the run metadata (seed, config hash, dataset id, ...).
    """
    prefix = Path(prefix)
    txt_path = prefix.with_name(prefix.name + ".txt")
    json_path = prefix.with_name(prefix.name + ".json")
    txt_path.write_text("\n".join(format_metric_lines(metrics)) + "\n", encoding="ascii")
    rounded = {
        key: round(value if key == "rsum" else value * 100.0, 1) for key, value in metrics.items()
    }
    payload = {"metrics": dict(sorted(metrics.items())), "rounded_percent": dict(sorted(rounded.items())), "metadata": metadata}
    json_path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return txt_path, json_path

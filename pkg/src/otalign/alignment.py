"""Cross-modal alignment scores between region and token feature bags.

A bag is any 2-d array whose rows are feature vectors (FeatureBag instances
are accepted wherever a bag is expected).  Scores combine a sum-max cosine
term with the negated optimal transport cost over the cosine-distance
matrix.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dataio
from .errors import InvalidArgumentError
from .solvers import SolverConfig, TransportPlan, solve, uniform_histogram, validate_histogram

__all__ = [
    "NORM_FLOOR",
    "AlignmentResult",
    "cosine_similarity_matrix",
    "cost_from_similarity",
    "summax_text_image",
    "summax_image_text",
    "ot_similarity",
    "composed_score",
    "score_matrix",
    "localize",
    "export_heatmap",
]

# Zero-norm guard: norms are floored here before dividing.
NORM_FLOOR = 1e-12


def _as_bag(x, label: str) -> np.ndarray:
    arr = np.asarray(getattr(x, "vectors", x), dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InvalidArgumentError(f"{label} bag must be a 2-d array of vectors, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{label} bag contains non-finite entries")
    return arr


def cosine_similarity_matrix(regions, tokens) -> np.ndarray:
    """Pairwise cosine similarities, one row per region, one column per token.

    Entries are clipped to [-1, 1] against float rounding, so derived costs
    stay in [0, 2].
    """
    v = _as_bag(regions, "region")
    e = _as_bag(tokens, "token")
    if v.shape[1] != e.shape[1]:
        raise InvalidArgumentError(f"feature dimensions differ: {v.shape[1]} vs {e.shape[1]}")
    vn = np.maximum(np.linalg.norm(v, axis=1), NORM_FLOOR)
    en = np.maximum(np.linalg.norm(e, axis=1), NORM_FLOOR)
    sim = (v @ e.T) / np.outer(vn, en)
    return np.clip(sim, -1.0, 1.0)


def _check_similarity(similarity) -> np.ndarray:
    s = np.asarray(similarity, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] < 1 or s.shape[1] < 1:
        raise InvalidArgumentError(f"similarity matrix must be 2-d, got shape {s.shape}")
    if np.any(np.abs(s) > 1.0 + 1e-9):
        raise InvalidArgumentError(f"similarity entries must lie in [-1, 1], max |s| is {np.abs(s).max()}")
    return s


def cost_from_similarity(similarity) -> np.ndarray:
    """Transport cost matrix 1 - s, entrywise."""
    return 1.0 - _check_similarity(similarity)


def summax_text_image(similarity) -> float:
    """Sum over tokens of the best region similarity (column maxima)."""
    return float(_check_similarity(similarity).max(axis=0).sum())


def summax_image_text(similarity) -> float:
    """Sum over regions of the best token similarity (row maxima)."""
    return float(_check_similarity(similarity).max(axis=1).sum())


def ot_similarity(regions, tokens, config: SolverConfig | None = None, source_weights=None, target_weights=None):
    """Negated transport cost between the bags, with the plan that attained it.

    Marginals default to uniform; explicit histograms are validated.  The
    score is -<T, 1 - s>, so it lies in [-2, 0] and increases as the
    coupled entries agree.
    """
    sim = cosine_similarity_matrix(regions, tokens)
    cost = 1.0 - sim
    mu = uniform_histogram(sim.shape[0]) if source_weights is None else validate_histogram(source_weights)
    nu = uniform_histogram(sim.shape[1]) if target_weights is None else validate_histogram(target_weights)
    plan, distance, _ = solve(cost, mu, nu, config)
    return 0.0 - distance, plan


@dataclass
class AlignmentResult:
    """Composed score with its parts, the similarity matrix, and the plan."""

    s_cos: float
    s_ot: float
    s_composed: float
    similarity: np.ndarray
    plan: TransportPlan


def pair_score_parts(v, e, config, with_ot):
    # Assumes validated bags; used by composed_score, score_matrix, and the
    # training gradients.
    sim = cosine_similarity_matrix(v, e)
    s_cos = float(sim.max(axis=0).sum())
    if not with_ot:
        return sim, s_cos, 0.0, None
    cost = 1.0 - sim
    mu = uniform_histogram(sim.shape[0])
    nu = uniform_histogram(sim.shape[1])
    plan, distance, _ = solve(cost, mu, nu, config)
    return sim, s_cos, 0.0 - distance, plan


def composed_score(regions, tokens, ot_weight: float, config: SolverConfig | None = None) -> AlignmentResult:
    """Sum-max cosine score plus `ot_weight` times the transport similarity."""
    if ot_weight < 0:
        raise InvalidArgumentError(f"ot_weight must be >= 0, got {ot_weight}")
    config = config if config is not None else SolverConfig()
    sim, s_cos, s_ot, plan = pair_score_parts(regions, tokens, config, with_ot=True)
    return AlignmentResult(s_cos, s_ot, s_cos + ot_weight * s_ot, sim, plan)


def score_matrix(image_bags, text_bags, ot_weight: float, config: SolverConfig | None = None, threads: int = 1) -> np.ndarray:
    """Composed score for every image bag against every text bag.

    Entry (i, j) equals composed_score(image_bags[i], text_bags[j]).  With
    ot_weight = 0 the transport solve is skipped; results do not depend on
    `threads`.
    """
    if ot_weight < 0:
        raise InvalidArgumentError(f"ot_weight must be >= 0, got {ot_weight}")
    config = config if config is not None else SolverConfig()
    images = [_as_bag(b, "region") for b in image_bags]
    texts = [_as_bag(b, "token") for b in text_bags]
    with_ot = ot_weight != 0.0
    scores = np.empty((len(images), len(texts)))

    def fill_row(i):
        v = images[i]
        for j, e in enumerate(texts):
            _, s_cos, s_ot, _ = pair_score_parts(v, e, config, with_ot)
            scores[i, j] = s_cos + ot_weight * s_ot

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(fill_row, range(len(images))))
    else:
        for i in range(len(images)):
            fill_row(i)
    return scores


def localize(source, token_index: int) -> list[int]:
    """Region indices ranked for one token, best first; ties keep low indices.

    `source` may be a transport plan or a similarity matrix; its column
    `token_index` supplies the ranking weights.
    """
    entries = source.entries if isinstance(source, TransportPlan) else np.asarray(source, dtype=np.float64)
    if entries.ndim != 2:
        raise InvalidArgumentError(f"expected a 2-d plan or similarity matrix, got shape {entries.shape}")
    if not 0 <= token_index < entries.shape[1]:
        raise InvalidArgumentError(f"token_index {token_index} outside [0, {entries.shape[1]})")
    column = entries[:, token_index]
    order = np.argsort(-column, kind="stable")
    return [int(i) for i in order]


def export_heatmap(result: AlignmentResult, prefix, tokens=None, region_boxes=None) -> list[Path]:
    """Write `<prefix>.plan.txt`, `<prefix>.similarity.txt`, `<prefix>.meta.json`.

    The matrices round-trip through the text matrix format; the JSON carries
    the scores plus optional token strings and region boxes for rendering.
    """
    prefix = Path(prefix)
    plan_path = prefix.with_name(prefix.name + ".plan.txt")
    sim_path = prefix.with_name(prefix.name + ".similarity.txt")
    meta_path = prefix.with_name(prefix.name + ".meta.json")
    dataio.write_matrix(plan_path, result.plan.entries)
    dataio.write_matrix(sim_path, result.similarity)
    meta = {
        "regions": int(result.similarity.shape[0]),
        "tokens_count": int(result.similarity.shape[1]),
        "s_cos": result.s_cos,
        "s_ot": result.s_ot,
        "s_composed": result.s_composed,
        "tokens": list(tokens) if tokens is not None else None,
        "region_boxes": [list(map(float, b)) for b in region_boxes] if region_boxes is not None else None,
    }
    meta_path.write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return [plan_path, sim_path, meta_path]

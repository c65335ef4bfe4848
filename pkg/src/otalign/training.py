"""Training of the two projection layers with a hardest-negative triplet
loss over composed alignment scores.

Gradients treat the transport plan as constant (exact at unique optima) and
the sum-max term as selecting fixed argmax regions, then chain through the
cosine and the affine projections analytically.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .alignment import NORM_FLOOR, pair_score_parts, score_matrix
from .errors import CheckpointFormatError, InvalidArgumentError, NumericInstabilityError
from .solvers import SolverConfig

__all__ = [
    "CHECKPOINT_FORMAT",
    "ProjectionLayer",
    "ModelParams",
    "TrainConfig",
    "LossGradients",
    "project",
    "initialize_params",
    "batch_score_matrix",
    "triplet_loss_hardest",
    "loss_gradients",
    "train",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_FORMAT = "OTALIGN-CKPT-1"

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class ProjectionLayer:
    """Affine map x -> W x + b from raw features to the shared space."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2:
            raise InvalidArgumentError(f"weights must be 2-d, got shape {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise InvalidArgumentError(
                f"bias shape {self.bias.shape} does not match {self.weights.shape[0]} output rows"
            )
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise InvalidArgumentError("projection parameters must be finite")

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]


def project(features, layer: ProjectionLayer) -> np.ndarray:
    """Apply the affine layer to each row of `features`."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2:
        raise InvalidArgumentError(f"features must be 2-d, got shape {f.shape}")
    if f.shape[1] != layer.in_dim:
        raise InvalidArgumentError(f"feature dimension {f.shape[1]} does not match layer input {layer.in_dim}")
    return f @ layer.weights.T + layer.bias


@dataclass
class ModelParams:
    """Both projections plus the score composition constants."""

    image_projection: ProjectionLayer
    text_projection: ProjectionLayer
    ot_weight: float
    margin: float

    def __post_init__(self):
        if self.ot_weight < 0:
            raise InvalidArgumentError(f"ot_weight must be >= 0, got {self.ot_weight}")
        if not self.margin > 0:
            raise InvalidArgumentError(f"margin must be positive, got {self.margin}")
        if self.image_projection.out_dim != self.text_projection.out_dim:
            raise InvalidArgumentError(
                f"projections disagree on embedding dimension: "
                f"{self.image_projection.out_dim} vs {self.text_projection.out_dim}"
            )


@dataclass
class TrainConfig:
    """Optimization settings; defaults follow the reference training regime."""

    epochs: int = 30
    batch_size: int = 128
    learning_rate: float = 0.0002
    lr_decay_factor: float = 0.1
    lr_decay_epoch: int = 15
    grad_clip_norm: float = 2.0
    seed: int = 0
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise InvalidArgumentError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise InvalidArgumentError(f"batch_size must be >= 2 for negative mining, got {self.batch_size}")
        # 0 is allowed so no-update runs stay expressible.
        if self.learning_rate < 0:
            raise InvalidArgumentError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0 < self.lr_decay_factor <= 1:
            raise InvalidArgumentError(f"lr_decay_factor must be in (0, 1], got {self.lr_decay_factor}")
        if self.lr_decay_epoch < 0:
            raise InvalidArgumentError(f"lr_decay_epoch must be >= 0, got {self.lr_decay_epoch}")
        if not self.grad_clip_norm > 0:
            raise InvalidArgumentError(f"grad_clip_norm must be positive, got {self.grad_clip_norm}")


@dataclass
class LossGradients:
    """Gradients mirroring ModelParams' projection arrays."""

    image_weights: np.ndarray
    image_bias: np.ndarray
    text_weights: np.ndarray
    text_bias: np.ndarray

    def arrays(self):
        return (self.image_weights, self.image_bias, self.text_weights, self.text_bias)

    def global_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(a * a)) for a in self.arrays())))

    def clipped(self, max_norm: float) -> "LossGradients":
        """Rescale all arrays together so the global norm is at most max_norm."""
        if not max_norm > 0:
            raise InvalidArgumentError(f"max_norm must be positive, got {max_norm}")
        norm = self.global_norm()
        if norm <= max_norm:
            return self
        scale = max_norm / norm
        return LossGradients(*(a * scale for a in self.arrays()))


def initialize_params(
    embed_dim: int,
    image_raw_dim: int,
    text_raw_dim: int,
    ot_weight: float,
    margin: float,
    seed: int = 0,
) -> ModelParams:
    """Seeded Gaussian weights scaled by 1/sqrt(fan-in), zero biases."""
    if embed_dim < 1 or image_raw_dim < 1 or text_raw_dim < 1:
        raise InvalidArgumentError("dimensions must be >= 1")
    rng = np.random.default_rng(seed)
    w_img = rng.normal(0.0, 1.0 / np.sqrt(image_raw_dim), (embed_dim, image_raw_dim))
    w_txt = rng.normal(0.0, 1.0 / np.sqrt(text_raw_dim), (embed_dim, text_raw_dim))
    return ModelParams(
        ProjectionLayer(w_img, np.zeros(embed_dim)),
        ProjectionLayer(w_txt, np.zeros(embed_dim)),
        ot_weight,
        margin,
    )


def triplet_loss_hardest(scores, margin: float) -> float:
    """Hinge loss against the hardest in-batch negative in both directions.

    For each pair j the hardest negative text (row j) and hardest negative
    image (column j) are compared against the matched score; hinges at
    exactly zero contribute nothing.
    """
    if not margin > 0:
        raise InvalidArgumentError(f"margin must be positive, got {margin}")
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise InvalidArgumentError(f"score matrix must be square, got shape {s.shape}")
    if s.shape[0] < 2:
        raise InvalidArgumentError("need at least 2 pairs to mine negatives")
    diag = np.diag(s)
    off = s.copy()
    np.fill_diagonal(off, -np.inf)
    row_loss = np.maximum(0.0, off.max(axis=1) - diag + margin)
    col_loss = np.maximum(0.0, off.max(axis=0) - diag + margin)
    return float(row_loss.sum() + col_loss.sum())


def _as_pairs(pairs):
    out = []
    for f, g in pairs:
        out.append((np.asarray(f, dtype=np.float64), np.asarray(g, dtype=np.float64)))
    if len(out) < 2:
        raise InvalidArgumentError(f"need at least 2 pairs, got {len(out)}")
    return out


def batch_score_matrix(
    pairs, params: ModelParams, solver_config: SolverConfig | None = None, threads: int = 1
) -> np.ndarray:
    """Composed score of every projected image bag against every text bag."""
    pairs = _as_pairs(pairs)
    images = [project(f, params.image_projection) for f, _ in pairs]
    texts = [project(g, params.text_projection) for _, g in pairs]
    return score_matrix(images, texts, params.ot_weight, solver_config, threads=threads)


def _pair_grads(v, e, ot_weight, config):
    # d(composed score)/dV and /dE with the plan and argmax selections fixed.
    sim, _, _, plan = pair_score_parts(v, e, config, with_ot=ot_weight != 0.0)
    g = ot_weight * plan.entries if plan is not None else np.zeros_like(sim)
    best_rows = np.argmax(sim, axis=0)
    g[best_rows, np.arange(sim.shape[1])] += 1.0
    vn_raw = np.linalg.norm(v, axis=1)
    en_raw = np.linalg.norm(e, axis=1)
    vn = np.maximum(vn_raw, NORM_FLOOR)
    en = np.maximum(en_raw, NORM_FLOOR)
    p = g / np.outer(vn, en)
    # Where a norm sits at the floor the denominator is constant, so the
    # norm-direction term vanishes.
    v_mask = (vn_raw > NORM_FLOOR).astype(np.float64)
    e_mask = (en_raw > NORM_FLOOR).astype(np.float64)
    dv = p @ e - (v_mask * (g * sim).sum(axis=1) / vn**2)[:, np.newaxis] * v
    de = p.T @ v - (e_mask * (g * sim).sum(axis=0) / en**2)[:, np.newaxis] * e
    return dv, de


def _loss_and_gradients(pairs, params, solver_config):
    raw_images = [f for f, _ in pairs]
    raw_texts = [g for _, g in pairs]
    images = [project(f, params.image_projection) for f in raw_images]
    texts = [project(g, params.text_projection) for g in raw_texts]
    scores = score_matrix(images, texts, params.ot_weight, solver_config)
    loss = triplet_loss_hardest(scores, params.margin)

    batch = len(pairs)
    diag = np.diag(scores)
    off = scores.copy()
    np.fill_diagonal(off, -np.inf)
    coef: dict[tuple[int, int], float] = {}

    def add(i, j, w):
        coef[(i, j)] = coef.get((i, j), 0.0) + w

    for j in range(batch):
        hard_text = int(np.argmax(off[j]))
        if off[j, hard_text] - diag[j] + params.margin > 0:
            add(j, hard_text, 1.0)
            add(j, j, -1.0)
        hard_image = int(np.argmax(off[:, j]))
        if off[hard_image, j] - diag[j] + params.margin > 0:
            add(hard_image, j, 1.0)
            add(j, j, -1.0)

    grads = LossGradients(
        np.zeros_like(params.image_projection.weights),
        np.zeros_like(params.image_projection.bias),
        np.zeros_like(params.text_projection.weights),
        np.zeros_like(params.text_projection.bias),
    )
    for (i, j), w in coef.items():
        if w == 0.0:
            continue
        dv, de = _pair_grads(images[i], texts[j], params.ot_weight, solver_config)
        grads.image_weights += w * (dv.T @ raw_images[i])
        grads.image_bias += w * dv.sum(axis=0)
        grads.text_weights += w * (de.T @ raw_texts[j])
        grads.text_bias += w * de.sum(axis=0)
    return loss, grads, scores


def loss_gradients(pairs, params: ModelParams, solver_config: SolverConfig | None = None) -> LossGradients:
    """Analytic loss gradient with respect to both projection layers."""
    pairs = _as_pairs(pairs)
    config = solver_config if solver_config is not None else SolverConfig()
    _, grads, _ = _loss_and_gradients(pairs, params, config)
    return grads


def train(pairs, config: TrainConfig, params: ModelParams) -> tuple[ModelParams, list[float]]:
    """Adam over shuffled mini-batches; returns final params and loss trace.

    The trace holds one mean batch loss per epoch.  Shuffling draws from a
    generator seeded with `config.seed`, so identical inputs give identical
    parameters.  A trailing batch of one pair is skipped (no negatives).
    Non-finite losses abort with the offending epoch, batch, and score.
    """
    pairs = _as_pairs(pairs)
    rng = np.random.default_rng(config.seed)
    theta = [
        params.image_projection.weights.copy(),
        params.image_projection.bias.copy(),
        params.text_projection.weights.copy(),
        params.text_projection.bias.copy(),
    ]
    first_moment = [np.zeros_like(a) for a in theta]
    second_moment = [np.zeros_like(a) for a in theta]
    step = 0
    trace = []
    for epoch in range(config.epochs):
        lr = config.learning_rate * (config.lr_decay_factor if epoch >= config.lr_decay_epoch else 1.0)
        order = rng.permutation(len(pairs))
        epoch_total = 0.0
        batches = 0
        for start in range(0, len(pairs), config.batch_size):
            chunk = order[start : start + config.batch_size]
            if chunk.size < 2:
                continue
            batch = [pairs[k] for k in chunk]
            current = ModelParams(
                ProjectionLayer(theta[0], theta[1]),
                ProjectionLayer(theta[2], theta[3]),
                params.ot_weight,
                params.margin,
            )
            loss, grads, scores = _loss_and_gradients(batch, current, config.solver)
            if not np.isfinite(loss):
                bad = np.argwhere(~np.isfinite(scores))
                where = (
                    f"score[{bad[0][0]},{bad[0][1]}] = {scores[bad[0][0], bad[0][1]]!r}"
                    if bad.size
                    else "all scores finite"
                )
                raise NumericInstabilityError(
                    f"non-finite loss {loss!r} at epoch {epoch}, batch {batches}: {where}"
                )
            epoch_total += loss
            batches += 1
            grads = grads.clipped(config.grad_clip_norm)
            step += 1
            for k, grad in enumerate(grads.arrays()):
                first_moment[k] = ADAM_BETA1 * first_moment[k] + (1 - ADAM_BETA1) * grad
                second_moment[k] = ADAM_BETA2 * second_moment[k] + (1 - ADAM_BETA2) * grad * grad
                m_hat = first_moment[k] / (1 - ADAM_BETA1**step)
                v_hat = second_moment[k] / (1 - ADAM_BETA2**step)
                theta[k] -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        trace.append(epoch_total / batches if batches else 0.0)
    final = ModelParams(
        ProjectionLayer(theta[0], theta[1]),
        ProjectionLayer(theta[2], theta[3]),
        params.ot_weight,
        params.margin,
    )
    return final, trace


# ---------------------------------------------------------------------------
# Checkpoints.
# ---------------------------------------------------------------------------


def save_checkpoint(path, params: ModelParams, train_config: TrainConfig | None = None) -> None:
    """JSON checkpoint; float values round-trip exactly through repr."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "embed_dim": params.image_projection.out_dim,
        "image_raw_dim": params.image_projection.in_dim,
        "text_raw_dim": params.text_projection.in_dim,
        "ot_weight": float(params.ot_weight),
        "margin": float(params.margin),
        "image_projection": {
            "weights": params.image_projection.weights.tolist(),
            "bias": params.image_projection.bias.tolist(),
        },
        "text_projection": {
            "weights": params.text_projection.weights.tolist(),
            "bias": params.text_projection.bias.tolist(),
        },
        "train_config": asdict(train_config) if train_config is not None else None,
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n", encoding="ascii")


def load_checkpoint(path) -> tuple[ModelParams, dict | None]:
    """Rebuild ModelParams from a checkpoint, verifying tag and dimensions."""
    try:
        payload = json.loads(Path(path).read_text(encoding="ascii"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: not a valid checkpoint: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointFormatError(
            f"{path}: format tag {payload.get('format') if isinstance(payload, dict) else None!r} "
            f"does not match {CHECKPOINT_FORMAT!r}"
        )
    try:
        image = ProjectionLayer(
            np.array(payload["image_projection"]["weights"], dtype=np.float64),
            np.array(payload["image_projection"]["bias"], dtype=np.float64),
        )
        text = ProjectionLayer(
            np.array(payload["text_projection"]["weights"], dtype=np.float64),
            np.array(payload["text_projection"]["bias"], dtype=np.float64),
        )
        params = ModelParams(image, text, float(payload["ot_weight"]), float(payload["margin"]))
        declared = (int(payload["embed_dim"]), int(payload["image_raw_dim"]), int(payload["text_raw_dim"]))
    except (KeyError, TypeError, ValueError, InvalidArgumentError) as exc:
        raise CheckpointFormatError(f"{path}: malformed checkpoint payload: {exc}") from exc
    actual = (image.out_dim, image.in_dim, text.in_dim)
    if declared != actual:
        raise CheckpointFormatError(f"{path}: declared dimensions {declared} do not match arrays {actual}")
    return params, payload.get("train_config")

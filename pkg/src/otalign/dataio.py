"""On-disk formats: feature bags, matrix/histogram text files, manifests,
and the synthetic paired dataset generator."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CorruptFileError,
    DanglingReferenceError,
    FileFormatError,
    InvalidArgumentError,
)

__all__ = [
    "FEATURE_BAG_FORMAT",
    "FeatureBag",
    "read_feature_bag",
    "write_feature_bag",
    "read_matrix",
    "write_matrix",
    "read_histogram",
    "write_histogram",
    "ManifestRecord",
    "DatasetManifest",
    "load_manifest",
    "write_manifest",
    "load_pair_arrays",
    "SyntheticConfig",
    "generate_synthetic",
    "load_hidden_alignment",
]

FEATURE_BAG_FORMAT = "OTALIGN-FB-1"

_KINDS = ("image", "text")


@dataclass
class FeatureBag:
    """A stack of same-dimension feature vectors tagged with their modality."""

    vectors: np.ndarray
    kind: str

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise InvalidArgumentError(f"feature bag needs a 2-d array, got shape {self.vectors.shape}")
        n, d = self.vectors.shape
        if n < 1 or d < 1:
            raise InvalidArgumentError(f"feature bag needs >= 1 vector of dimension >= 1, got {n}x{d}")
        if self.kind not in _KINDS:
            raise InvalidArgumentError(f"feature bag kind must be one of {_KINDS}, got {self.kind!r}")

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def write_feature_bag(path, bag: FeatureBag) -> None:
    """Write `bag` as an ASCII header line plus little-endian float64 payload."""
    header = f"{FEATURE_BAG_FORMAT} {bag.count} {bag.dim} {bag.kind}\n".encode("ascii")
    payload = np.ascontiguousarray(bag.vectors, dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_feature_bag(path) -> FeatureBag:
    """Read a feature bag, reproducing the written vectors bit for bit."""
    with open(path, "rb") as fh:
        header = fh.readline()
        payload = fh.read()
    try:
        fields = header.decode("ascii").split()
    except UnicodeDecodeError as exc:
        raise FileFormatError(f"{path}: header is not ASCII") from exc
    if len(fields) != 4 or fields[0] != FEATURE_BAG_FORMAT:
        raise FileFormatError(f"{path}: bad header {header!r}, expected '{FEATURE_BAG_FORMAT} N D kind'")
    try:
        n, d = int(fields[1]), int(fields[2])
    except ValueError as exc:
        raise FileFormatError(f"{path}: non-integer counts in header {header!r}") from exc
    kind = fields[3]
    if n < 1 or d < 1:
        raise FileFormatError(f"{path}: header counts must be >= 1, got {n}x{d}")
    if kind not in _KINDS:
        raise FileFormatError(f"{path}: unknown kind {kind!r}")
    expected = n * d * 8
    if len(payload) < expected:
        offset = len(header) + len(payload)
        raise CorruptFileError(f"{path}: payload truncated at byte {offset}, expected {expected} payload bytes, found {len(payload)}")
    if len(payload) > expected:
        raise FileFormatError(f"{path}: {len(payload) - expected} trailing bytes after payload")
    vectors = np.frombuffer(payload, dtype="<f8").reshape(n, d).copy()
    return FeatureBag(vectors, kind)


def write_matrix(path, matrix) -> None:
    """Text matrix: first line 'K M', then K rows of M values (repr round-trip)."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise InvalidArgumentError(f"matrix must be 2-d, got shape {m.shape}")
    lines = [f"{m.shape[0]} {m.shape[1]}"]
    for row in m:
        lines.append(" ".join(repr(float(x)) for x in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_matrix(path) -> np.ndarray:
    text = Path(path).read_text(encoding="ascii")
    head, _, rest = text.partition("\n")
    parts = head.split()
    if len(parts) != 2:
        raise FileFormatError(f"{path}: first line must be 'K M', got {head!r}")
    try:
        k, m = int(parts[0]), int(parts[1])
    except ValueError as exc:
        raise FileFormatError(f"{path}: non-integer dimensions {head!r}") from exc
    if k < 1 or m < 1:
        raise FileFormatError(f"{path}: dimensions must be >= 1, got {k}x{m}")
    tokens = rest.split()
    if len(tokens) != k * m:
        raise FileFormatError(f"{path}: expected {k * m} values, found {len(tokens)}")
    try:
        values = np.array([float(t) for t in tokens])
    except ValueError as exc:
        raise FileFormatError(f"{path}: non-numeric matrix entry") from exc
    return values.reshape(k, m)


def write_histogram(path, weights) -> None:
    """Text histogram: first line N, then N values on one line."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size < 1:
        raise InvalidArgumentError(f"histogram must be 1-d with >= 1 entry, got shape {w.shape}")
    body = " ".join(repr(float(x)) for x in w)
    Path(path).write_text(f"{w.size}\n{body}\n", encoding="ascii")


def read_histogram(path) -> np.ndarray:
    text = Path(path).read_text(encoding="ascii")
    head, _, rest = text.partition("\n")
    try:
        n = int(head.split()[0]) if head.split() else -1
    except ValueError as exc:
        raise FileFormatError(f"{path}: first line must be a count, got {head!r}") from exc
    if n < 1:
        raise FileFormatError(f"{path}: histogram count must be >= 1, got {head!r}")
    tokens = rest.split()
    if len(tokens) != n:
        raise FileFormatError(f"{path}: expected {n} values, found {len(tokens)}")
    try:
        return np.array([float(t) for t in tokens])
    except ValueError as exc:
        raise FileFormatError(f"{path}: non-numeric histogram entry") from exc


# ---------------------------------------------------------------------------
# Dataset manifests.
# ---------------------------------------------------------------------------


@dataclass
class ManifestRecord:
    """One image/text pair: feature file paths plus optional grounding data."""

    pair_id: str
    image_features: str
    text_features: str
    tokens: list[str] | None = None
    region_boxes: list[list[float]] | None = None
    phrase_gold: dict[int, list[list[float]]] | None = None


@dataclass
class DatasetManifest:
    """Parsed manifest plus the directory its relative paths resolve against."""

    records: list[ManifestRecord]
    root: Path = field(default_factory=Path)

    def resolve(self, relative: str) -> Path:
        return self.root / relative


def _parse_boxes(raw, path, pair_id):
    boxes = []
    for box in raw:
        if not isinstance(box, (list, tuple)) or len(box) != 4:
            raise FileFormatError(f"{path}: pair {pair_id}: box must have 4 coordinates, got {box!r}")
        boxes.append([float(c) for c in box])
    return boxes


def load_manifest(path) -> DatasetManifest:
    """Parse a JSONL manifest and verify every referenced feature file exists."""
    path = Path(path)
    records = []
    seen = set()
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FileFormatError(f"{path}:{line_no}: invalid JSON: {exc}") from exc
        for key in ("pair_id", "image_features", "text_features"):
            if key not in obj:
                raise FileFormatError(f"{path}:{line_no}: missing required key {key!r}")
        pair_id = str(obj["pair_id"])
        if pair_id in seen:
            raise FileFormatError(f"{path}:{line_no}: duplicate pair_id {pair_id!r}")
        seen.add(pair_id)
        tokens = obj.get("tokens")
        if tokens is not None:
            tokens = [str(t) for t in tokens]
        region_boxes = obj.get("region_boxes")
        if region_boxes is not None:
            region_boxes = _parse_boxes(region_boxes, path, pair_id)
        phrase_gold = obj.get("phrase_gold")
        if phrase_gold is not None:
            parsed = {}
            for key, boxes in phrase_gold.items():
                try:
                    idx = int(key)
                except ValueError as exc:
                    raise FileFormatError(f"{path}: pair {pair_id}: phrase_gold key {key!r} is not a token index") from exc
                parsed[idx] = _parse_boxes(boxes, path, pair_id)
            phrase_gold = parsed
        records.append(
            ManifestRecord(pair_id, str(obj["image_features"]), str(obj["text_features"]), tokens, region_boxes, phrase_gold)
        )
    manifest = DatasetManifest(records, path.parent)
    for rec in manifest.records:
        for rel in (rec.image_features, rec.text_features):
            if not manifest.resolve(rel).is_file():
                raise DanglingReferenceError(f"pair {rec.pair_id!r} references missing feature file {rel!r}")
    return manifest


def write_manifest(path, records) -> None:
    lines = []
    for rec in records:
        obj = {
            "pair_id": rec.pair_id,
            "image_features": rec.image_features,
            "text_features": rec.text_features,
        }
        if rec.tokens is not None:
            obj["tokens"] = rec.tokens
        if rec.region_boxes is not None:
            obj["region_boxes"] = rec.region_boxes
        if rec.phrase_gold is not None:
            obj["phrase_gold"] = {str(k): v for k, v in sorted(rec.phrase_gold.items())}
        lines.append(json.dumps(obj, sort_keys=True, separators=(",", ":")))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_pair_arrays(manifest: DatasetManifest) -> list[tuple[np.ndarray, np.ndarray]]:
    """Read every pair's feature bags, checking the modality tags."""
    pairs = []
    for rec in manifest.records:
        img = read_feature_bag(manifest.resolve(rec.image_features))
        txt = read_feature_bag(manifest.resolve(rec.text_features))
        if img.kind != "image":
            raise FileFormatError(f"pair {rec.pair_id!r}: {rec.image_features!r} is tagged {img.kind!r}, expected 'image'")
        if txt.kind != "text":
            raise FileFormatError(f"pair {rec.pair_id!r}: {rec.text_features!r} is tagged {txt.kind!r}, expected 'text'")
        pairs.append((img.vectors, txt.vectors))
    return pairs


# ---------------------------------------------------------------------------
# Synthetic paired data with a hidden region/token alignment.
# ---------------------------------------------------------------------------


@dataclass
class SyntheticConfig:
    """Controls for the synthetic generator.

    Each pair draws its regions from one cluster of unit-norm prototype
    vectors; tokens are noisy copies of permuted regions, so the permutation
    is the ground-truth alignment.  It is written to a separate file, never
    to the manifest.
    """

    num_pairs: int = 100
    num_clusters: int = 100
    regions: int = 4
    tokens: int = 4
    raw_dim: int = 16
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.num_pairs < 1:
            raise InvalidArgumentError(f"num_pairs must be >= 1, got {self.num_pairs}")
        if not 1 <= self.num_clusters <= self.num_pairs:
            raise InvalidArgumentError(f"num_clusters must be in [1, num_pairs], got {self.num_clusters}")
        if self.regions < 1 or self.tokens < 1:
            raise InvalidArgumentError("regions and tokens must be >= 1")
        if self.raw_dim < 1:
            raise InvalidArgumentError(f"raw_dim must be >= 1, got {self.raw_dim}")
        if self.noise_sigma < 0:
            raise InvalidArgumentError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


def generate_synthetic(config: SyntheticConfig, out_dir) -> tuple[DatasetManifest, dict[str, list[int]]]:
    """Write feature bags, manifest, and hidden alignment file under `out_dir`.

    Returns the loaded manifest and the pair_id -> token_to_region mapping.
    token_to_region[j] is the region index token j was copied from; tokens
    beyond min(regions, tokens) sample a random prototype and stay
    unrecorded.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(config.seed)
    K, M, D = config.regions, config.tokens, config.raw_dim
    matched = min(K, M)

    prototypes = []
    for _ in range(config.num_clusters):
        p = rng.normal(size=(K, D))
        p /= np.maximum(np.linalg.norm(p, axis=1, keepdims=True), 1e-12)
        prototypes.append(p)

    records = []
    alignment = {}
    width = max(4, len(str(config.num_pairs - 1)))
    for idx in range(config.num_pairs):
        proto = prototypes[idx % config.num_clusters]
        pair_id = f"pair{idx:0{width}d}"
        regions = proto + config.noise_sigma * rng.normal(size=(K, D))
        perm = rng.permutation(K)
        token_to_region = [int(perm[j]) for j in range(matched)]
        text = np.empty((M, D))
        for j in range(M):
            src = token_to_region[j] if j < matched else int(rng.integers(K))
            text[j] = proto[src] + config.noise_sigma * rng.normal(size=D)
        img_name = f"{pair_id}.img.fb"
        txt_name = f"{pair_id}.txt.fb"
        write_feature_bag(out / img_name, FeatureBag(regions, "image"))
        write_feature_bag(out / txt_name, FeatureBag(text, "text"))
        records.append(ManifestRecord(pair_id, img_name, txt_name))
        alignment[pair_id] = token_to_region

    write_manifest(out / "manifest.jsonl", records)
    lines = [
        json.dumps({"pair_id": pid, "token_to_region": alignment[pid]}, sort_keys=True, separators=(",", ":"))
        for pid in sorted(alignment)
    ]
    (out / "alignment.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return load_manifest(out / "manifest.jsonl"), alignment


def load_hidden_alignment(path) -> dict[str, list[int]]:
    mapping = {}
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FileFormatError(f"{path}:{line_no}: invalid JSON: {exc}") from exc
        if "pair_id" not in obj or "token_to_region" not in obj:
            raise FileFormatError(f"{path}:{line_no}: expected pair_id and token_to_region keys")
        mapping[str(obj["pair_id"])] = [int(r) for r in obj["token_to_region"]]
    return mapping

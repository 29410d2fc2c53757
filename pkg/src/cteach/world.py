"""Synthetic scenes and the frozen teacher.

Scenes are Voronoi partitions of a token grid.  The teacher side provides
per-pixel dense tokens (category embedding plus noise, normalized), a
global CLS summary token, and a fixed table of unit-norm category
embeddings standing in for text features.  The student side sees an
independent noisy rendering of the scene, so nothing can shortcut by
reading teacher tokens directly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, NumericError

IGNORE = -1

_SCENE_MAGIC = b"CTSC"
_SCENE_VERSION = 1


@dataclass(frozen=True)
class Vocabulary:
    """Category names plus the seen/unseen split. Ids are 0..len(names)-1."""

    names: tuple[str, ...]
    seen: tuple[int, ...]
    unseen: tuple[int, ...]

    def __post_init__(self):
        ids = set(range(len(self.names)))
        if not self.seen or not self.unseen:
            raise ConfigError("vocabulary needs at least one seen and one unseen category")
        if set(self.seen) & set(self.unseen):
            raise ConfigError("seen and unseen categories overlap")
        if set(self.seen) | set(self.unseen) != ids:
            raise ConfigError("seen/unseen split does not cover the vocabulary")

    def __len__(self) -> int:
        return len(self.names)

    @property
    def ids(self) -> tuple[int, ...]:
        return tuple(range(len(self.names)))

    def is_seen(self, cat: int) -> bool:
        return cat in self.seen

    def to_json(self) -> dict:
        return {
            "categories": [{"id": i, "name": n} for i, n in enumerate(self.names)],
            "seen": list(self.seen),
            "unseen": list(self.unseen),
        }

    @staticmethod
    def from_json(doc: dict) -> "Vocabulary":
        try:
            cats = sorted(doc["categories"], key=lambda c: c["id"])
            if [c["id"] for c in cats] != list(range(len(cats))):
                raise DataError("vocabulary ids must be dense from 0")
            return Vocabulary(
                names=tuple(c["name"] for c in cats),
                seen=tuple(doc["seen"]),
                unseen=tuple(doc["unseen"]),
            )
        except (KeyError, TypeError) as e:
            raise DataError(f"malformed vocabulary document: {e}") from e


def make_vocabulary(num_seen: int, num_unseen: int) -> Vocabulary:
    if num_seen < 1 or num_unseen < 1:
        raise ConfigError("need at least one seen and one unseen category")
    n = num_seen + num_unseen
    return Vocabulary(
        names=tuple(f"cat{i:02d}" for i in range(n)),
        seen=tuple(range(num_seen)),
        unseen=tuple(range(num_seen, n)),
    )


@dataclass(frozen=True)
class TextTable:
    """Fixed unit-norm embedding per category, row order = category id."""

    vectors: np.ndarray
    seed: int
    coherence: float

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def row(self, cat: int) -> np.ndarray:
        return self.vectors[cat]

    def rows(self, cats) -> np.ndarray:
        return self.vectors[np.asarray(cats, dtype=np.int64)]


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    if np.any(norms < 1e-12):
        raise NumericError("cannot normalize a zero vector")
    return x / norms


def embed_categories(
    vocab: Vocabulary, seed: int, dim: int, coherence: float = 1.0
) -> TextTable:
    """Draw one unit embedding per category, deterministic per (vocab, seed).

    coherence=1 gives independent Gaussian directions (near-orthogonal for
    dim >= 8); lower values blend in a shared component so categories grow
    mutually similar.
    """
    if len(vocab) < 2:
        raise ConfigError("need at least 2 categories to embed")
    if dim < 8:
        raise ConfigError(f"embedding dim must be >= 8, got {dim}")
    if not (0.0 < coherence <= 1.0):
        raise ConfigError(f"coherence must lie in (0, 1], got {coherence}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, len(vocab), dim]))
    shared = rng.standard_normal(dim)
    g = rng.standard_normal((len(vocab), dim))
    vecs = _unit_rows(coherence * g + (1.0 - coherence) * shared[None, :])
    return TextTable(vectors=vecs, seed=seed, coherence=coherence)


@dataclass
class Scene:
    """One synthetic image: labels, student input, frozen teacher outputs."""

    gt_labels: np.ndarray  # (H, W) int32 category ids
    seen_labels: np.ndarray  # (H, W) int32, IGNORE where unseen
    pixel_input: np.ndarray  # (H, W, C_in) float64 student input
    dense_tokens: np.ndarray  # (H, W, C) float64 unit-norm teacher tokens
    cls_token: np.ndarray  # (C,) float64 unit-norm global summary

    def __post_init__(self):
        h, w = self.gt_labels.shape
        if self.seen_labels.shape != (h, w):
            raise DataError("seen_labels shape differs from gt_labels")
        if self.pixel_input.shape[:2] != (h, w) or self.dense_tokens.shape[:2] != (h, w):
            raise DataError("feature planes do not match the label grid")
        if self.cls_token.shape != (self.dense_tokens.shape[2],):
            raise DataError("cls_token dimension differs from dense tokens")
        if not (self.seen_labels != IGNORE).any():
            raise DataError("scene has no seen pixel")
        if not np.all(np.isfinite(self.dense_tokens)):
            raise NumericError("dense tokens contain non-finite values")
        if abs(float(np.linalg.norm(self.cls_token)) - 1.0) > 1e-9:
            raise DataError("cls_token is not unit-norm")

    @property
    def height(self) -> int:
        return self.gt_labels.shape[0]

    @property
    def width(self) -> int:
        return self.gt_labels.shape[1]


def mask_unseen(gt_labels: np.ndarray, vocab: Vocabulary) -> np.ndarray:
    """Replace unseen-category pixels by the reserved IGNORE id."""
    known = np.isin(gt_labels, vocab.ids)
    if not known.all():
        bad = np.unique(gt_labels[~known])
        raise DataError(f"unknown category ids in label map: {bad.tolist()}")
    out = gt_labels.astype(np.int32).copy()
    out[np.isin(gt_labels, vocab.unseen)] = IGNORE
    return out


def _input_projection(table: TextTable, input_dim: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([table.seed, table.dim, input_dim, 7]))
    return rng.standard_normal((table.dim, input_dim)) / np.sqrt(table.dim)


def generate_scene(
    vocab: Vocabulary,
    table: TextTable,
    seed,
    height: int,
    width: int,
    region_count: int,
    noise_sigma: float,
    input_dim: int | None = None,
) -> Scene:
    """Voronoi scene with teacher tokens; deterministic per seed.

    ``seed`` may be an int or a sequence of ints (stream derivation).  Each
    region gets a distinct category; at least one region is forced seen so
    every scene carries supervision.
    """
    if height < 8 or width < 8:
        raise ConfigError("scene grid must be at least 8x8")
    if region_count < 2:
        raise ConfigError("region_count must be >= 2")
    if region_count > height * width:
        raise ConfigError("more regions than grid cells")
    if region_count > len(vocab):
        raise ConfigError("region_count exceeds vocabulary size (categories are distinct per scene)")
    if noise_sigma < 0:
        raise ConfigError("noise_sigma must be >= 0")
    cin = table.dim if input_dim is None else int(input_dim)

    entropy = [seed] if isinstance(seed, int) else list(seed)
    rng = np.random.default_rng(np.random.SeedSequence(entropy))

    cells = rng.choice(height * width, size=region_count, replace=False)
    sites = np.stack([cells // width, cells % width], axis=1).astype(np.float64)
    rr, cc = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    d2 = (rr[..., None] - sites[:, 0]) ** 2 + (cc[..., None] - sites[:, 1]) ** 2
    region = d2.argmin(axis=2)

    cats = rng.choice(len(vocab), size=region_count, replace=False)
    if not np.isin(cats, vocab.seen).any():
        cats[rng.integers(region_count)] = rng.choice(vocab.seen)
    gt = cats[region].astype(np.int32)

    toks = table.vectors[gt]
    if noise_sigma > 0:
        toks = toks + noise_sigma * rng.standard_normal(toks.shape)
    dense = _unit_rows(toks)
    cls = _unit_rows(dense.reshape(-1, table.dim).mean(axis=0)[None, :])[0]

    proj = _input_projection(table, cin)
    pix = table.vectors[gt] @ proj
    if noise_sigma > 0:
        pix = pix + noise_sigma * rng.standard_normal(pix.shape)

    return Scene(
        gt_labels=gt,
        seen_labels=mask_unseen(gt, vocab),
        pixel_input=pix,
        dense_tokens=dense,
        cls_token=cls,
    )


# ---------------------------------------------------------------------------
# file formats


def write_scene(scene: Scene, path) -> None:
    """Little-endian binary: magic, version, H, W, C, C_in, then planes.

    Plane order: gt_labels (i32), seen_labels (i32), pixel_input (f64),
    dense_tokens (f64), cls_token (f64), all row-major.
    """
    h, w = scene.gt_labels.shape
    c = scene.dense_tokens.shape[2]
    cin = scene.pixel_input.shape[2]
    with open(path, "wb") as f:
        f.write(_SCENE_MAGIC)
        f.write(struct.pack("<5I", _SCENE_VERSION, h, w, c, cin))
        f.write(scene.gt_labels.astype("<i4").tobytes())
        f.write(scene.seen_labels.astype("<i4").tobytes())
        f.write(scene.pixel_input.astype("<f8").tobytes())
        f.write(scene.dense_tokens.astype("<f8").tobytes())
        f.write(scene.cls_token.astype("<f8").tobytes())


def read_scene(path) -> Scene:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 24 or raw[:4] != _SCENE_MAGIC:
        raise DataError(f"{path}: not a scene file")
    version, h, w, c, cin = struct.unpack("<5I", raw[4:24])
    if version != _SCENE_VERSION:
        raise DataError(f"{path}: unsupported scene version {version}")
    need = 24 + 2 * h * w * 4 + (h * w * cin + h * w * c + c) * 8
    if len(raw) != need:
        raise DataError(f"{path}: truncated scene file ({len(raw)} of {need} bytes)")
    off = 24

    def take(count, dtype, shape):
        nonlocal off
        n = count * np.dtype(dtype).itemsize
        arr = np.frombuffer(raw[off : off + n], dtype=dtype).reshape(shape)
        off += n
        return arr

    gt = take(h * w, "<i4", (h, w)).astype(np.int32)
    seen = take(h * w, "<i4", (h, w)).astype(np.int32)
    pix = take(h * w * cin, "<f8", (h, w, cin)).astype(np.float64)
    dense = take(h * w * c, "<f8", (h, w, c)).astype(np.float64)
    cls = take(c, "<f8", (c,)).astype(np.float64)
    return Scene(gt, seen, pix, dense, cls)


def write_vocabulary(vocab: Vocabulary, path) -> None:
    with open(path, "w") as f:
        json.dump(vocab.to_json(), f, indent=2, sort_keys=True)
        f.write("\n")


def read_vocabulary(path) -> Vocabulary:
    with open(path) as f:
        return Vocabulary.from_json(json.load(f))

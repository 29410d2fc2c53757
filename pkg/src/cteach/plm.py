"""Pixel learning: pseudo labels for ignore regions and generated classifiers.

Pipeline per scene:
  1. init_centers      - window means of teacher tokens at several scales
  2. kmeans_ignore     - Lloyd iterations restricted to ignore pixels
  3. mask_fusion       - greedy grouping of clusters by center cosine
  4. build_pseudo_labels - seen annotations + fused masks as one label map
Batch-level, on the student features:
  5. region_centroids  - per-label feature means (differentiable)
  6. vla_forward       - cross-attention adapter turning centroids into
                         classifier weights (training only)
  7. pixel_logits / pixel_losses - per-pixel classification losses
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DiffTensor
from .errors import ConfigError, DataError, InternalError, NumericError, ShapeError
from .world import IGNORE

VLA_VARIANTS = ("decoder", "mlp", "raw")
KMEANS_DISTANCES = ("cosine", "euclidean")

FOCAL_GAMMA = 2.0
DICE_EPS = 1.0


@dataclass
class CenterSet:
    centers: np.ndarray  # (N, C)
    provenance: list[tuple[int, int, int]]  # (scale, window_row, window_col)

    def __len__(self) -> int:
        return len(self.provenance)


@dataclass
class MaskSet:
    masks: list[np.ndarray]  # boolean (H, W), pairwise disjoint over ignore
    centers: np.ndarray  # (N, C) final cluster means
    distortions: list[float] = field(default_factory=list)  # Lloyd trace
    converged: bool = True

    def __len__(self) -> int:
        return len(self.masks)


@dataclass
class PseudoLabelMap:
    labels: np.ndarray  # (H, W) seen ids plus pseudo ids, no IGNORE left
    pseudo_base: int  # first pseudo id (category ids stay below it)
    pseudo_count: int


@dataclass
class VlaParams:
    """Single cross-attention block plus feed-forward; mlp reuses the FF."""

    wq: DiffTensor
    wk: DiffTensor
    wv: DiffTensor
    wo: DiffTensor
    ff1_w: DiffTensor
    ff1_b: DiffTensor
    ff2_w: DiffTensor
    ff2_b: DiffTensor
    dim: int

    def named(self) -> dict[str, DiffTensor]:
        return {
            "vla.wq": self.wq,
            "vla.wk": self.wk,
            "vla.wv": self.wv,
            "vla.wo": self.wo,
            "vla.ff1_w": self.ff1_w,
            "vla.ff1_b": self.ff1_b,
            "vla.ff2_w": self.ff2_w,
            "vla.ff2_b": self.ff2_b,
        }


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    return x / np.maximum(norms, 1e-12)


def init_centers(tokens: np.ndarray, scales, ignore_mask: np.ndarray) -> CenterSet:
    """One center per window that touches the ignore region, at every scale.

    The grid is tiled into non-overlapping s-by-s windows (ragged edges
    clipped); a window's center is the mean of the normalized teacher
    tokens of its ignore pixels.  Windows without ignore pixels contribute
    nothing.
    """
    scales = sorted({int(s) for s in scales})
    if not scales:
        raise ConfigError("init_centers: empty scale set")
    h, w, c = tokens.shape
    for s in scales:
        if s < 1 or s > min(h, w):
            raise ConfigError(f"scale {s} outside [1, {min(h, w)}]")
    if not np.all(np.isfinite(tokens)):
        raise NumericError("init_centers: non-finite tokens")
    tn = _unit_rows(tokens)
    centers, prov = [], []
    for s in scales:
        for wr in range(0, h, s):
            for wc in range(0, w, s):
                ign = ignore_mask[wr : wr + s, wc : wc + s]
                if ign.any():
                    centers.append(tn[wr : wr + s, wc : wc + s][ign].mean(axis=0))
                    prov.append((s, wr // s, wc // s))
    arr = np.array(centers) if centers else np.zeros((0, c))
    return CenterSet(centers=arr, provenance=prov)


def kmeans_ignore(
    tokens: np.ndarray,
    centers: CenterSet,
    ignore_mask: np.ndarray,
    max_iters: int = 10,
    tol: float = 0.0,
    distance: str = "cosine",
) -> MaskSet:
    """Lloyd clustering of ignore pixels from the given centers.

    Cosine distance (1 - cosine of normalized vectors) by default; the
    update step uses normalized cluster means, so total distortion is
    non-increasing (spherical k-means).  Stops when no assignment changes,
    when the distortion improvement drops to ``tol``, or at ``max_iters``.
    Empty clusters are dropped from the output; the returned masks
    partition the ignore region exactly.
    """
    if max_iters < 1:
        raise ConfigError(f"max_iters must be >= 1, got {max_iters}")
    if distance not in KMEANS_DISTANCES:
        raise ConfigError(f"unknown distance {distance!r}, expected one of {KMEANS_DISTANCES}")
    if not np.all(np.isfinite(tokens)):
        raise NumericError("kmeans_ignore: non-finite tokens")
    h, w, c = tokens.shape
    if not ignore_mask.any() or len(centers) == 0:
        return MaskSet(masks=[], centers=np.zeros((0, c)))

    pts = _unit_rows(tokens[ignore_mask]) if distance == "cosine" else tokens[ignore_mask]
    cents = centers.centers.copy()
    if distance == "cosine":
        cents = _unit_rows(cents)
    p = pts.shape[0]
    which = np.arange(p)

    assign = None
    prev = None
    distortions: list[float] = []
    converged = False
    for _ in range(max_iters):
        if distance == "cosine":
            sims = pts @ cents.T
            assign = sims.argmax(axis=1)
            distortions.append(float((1.0 - sims[which, assign]).sum()))
        else:
            d2 = ((pts[:, None, :] - cents[None, :, :]) ** 2).sum(axis=2)
            assign = d2.argmin(axis=1)
            distortions.append(float(d2[which, assign].sum()))
        if prev is not None and np.array_equal(assign, prev):
            converged = True
            break
        if tol > 0 and len(distortions) >= 2 and distortions[-2] - distortions[-1] <= tol:
            break
        prev = assign
        for k in np.unique(assign):
            m = pts[assign == k].mean(axis=0)
            cents[k] = _unit_rows(m[None, :])[0] if distance == "cosine" else m

    kept = np.unique(assign)
    flat_idx = np.flatnonzero(ignore_mask.ravel())
    masks, out_centers = [], []
    for k in kept:
        sel = assign == k
        m = np.zeros(h * w, dtype=bool)
        m[flat_idx[sel]] = True
        masks.append(m.reshape(h, w))
        out_centers.append(pts[sel].mean(axis=0))
    return MaskSet(
        masks=masks, centers=np.array(out_centers), distortions=distortions, converged=converged
    )


def mask_fusion(masks: list[np.ndarray], centers: np.ndarray, threshold: float) -> list[np.ndarray]:
    """Greedy fusion of redundant cluster masks by center cosine similarity.

    Repeatedly seed at the row holding the global maximum of the (still
    valid) similarity matrix, group every valid mask whose similarity to
    the seed reaches the threshold, emit the union, and invalidate the
    whole group.  Self-similarity is 1, so with threshold <= 1 every mask
    ends up in exactly one fused mask: the output partitions the input.
    """
    if not (0.0 < threshold <= 1.0):
        raise ConfigError(f"fusion threshold must lie in (0, 1], got {threshold}")
    if len(masks) != len(centers):
        raise ShapeError(f"{len(masks)} masks but {len(centers)} centers")
    n = len(masks)
    if n == 0:
        return []
    cn = _unit_rows(np.asarray(centers, dtype=np.float64))
    sim = cn @ cn.T
    np.fill_diagonal(sim, 1.0)

    fused: list[np.ndarray] = []
    valid = np.ones(n, dtype=bool)
    while valid.any():
        grid = np.where(valid[:, None] & valid[None, :], sim, -np.inf)
        best = grid.max()
        if best < threshold:
            break
        seed = int(np.unravel_index(np.argmax(grid), grid.shape)[0])
        group = valid & (sim[seed] >= threshold)
        group[seed] = True
        union = np.zeros_like(masks[0], dtype=bool)
        for j in np.flatnonzero(group):
            union |= masks[j]
        fused.append(union)
        valid[group] = False
    return fused


def build_pseudo_labels(
    seen_labels: np.ndarray, fused: list[np.ndarray], pseudo_base: int
) -> PseudoLabelMap:
    """Overlay fused masks as fresh pseudo ids on top of the seen annotation.

    Pseudo id pseudo_base + k covers fused[k].  The fused masks must be a
    partition of the ignore region; violations indicate a broken fusion
    postcondition and raise InternalError.
    """
    labels = seen_labels.astype(np.int32).copy()
    ignore = seen_labels == IGNORE
    covered = np.zeros_like(ignore)
    for k, mask in enumerate(fused):
        if (mask & ~ignore).any():
            raise InternalError(f"fused mask {k} leaks outside the ignore region")
        if (mask & covered).any():
            raise InternalError(f"fused mask {k} overlaps an earlier mask")
        labels[mask] = pseudo_base + k
        covered |= mask
    if (ignore & ~covered).any():
        raise InternalError("fused masks do not cover the ignore region")
    return PseudoLabelMap(labels=labels, pseudo_base=pseudo_base, pseudo_count=len(fused))


def region_centroids(features: DiffTensor, labels_flat: np.ndarray):
    """Mean student feature per label over all pixels (and batch).

    ``features`` is (N, C) pixel rows, ``labels_flat`` the matching label
    per row.  Returns (centroids (Q, C), labels list) with labels in
    ascending id order: seen categories first, pseudo ids after (pseudo
    ids are assigned above every category id).  Labels without pixels
    simply do not appear.
    """
    labels_flat = np.asarray(labels_flat)
    n, c = features.shape
    if labels_flat.shape != (n,):
        raise ShapeError(f"labels length {labels_flat.shape} does not match {n} feature rows")
    if (labels_flat == IGNORE).any():
        raise InternalError("label map still contains IGNORE pixels")
    present = np.unique(labels_flat)
    rows = []
    for lab in present:
        idx = np.flatnonzero(labels_flat == lab)
        weight = np.zeros((1, n))
        weight[0, idx] = 1.0 / idx.size
        rows.append(ad.matmul(ad.constant(weight), features))
    return ad.concatenate(rows, axis=0), [int(x) for x in present]


def init_vla(seed: int, dim: int, hidden: int | None = None) -> VlaParams:
    """Variance-scaled projection matrices, zero biases, deterministic per seed."""
    if dim < 2:
        raise ConfigError(f"adapter dimension must be >= 2, got {dim}")
    h = dim if hidden is None else int(hidden)
    rng = np.random.default_rng(np.random.SeedSequence([seed, dim, h, 13]))

    def mat(fan_in, shape, gain=1.0):
        return ad.parameter(rng.standard_normal(shape) * gain / np.sqrt(fan_in))

    return VlaParams(
        wq=mat(dim, (dim, dim)),
        wk=mat(dim, (dim, dim)),
        wv=mat(dim, (dim, dim)),
        wo=mat(dim, (dim, dim)),
        ff1_w=mat(dim, (dim, h), gain=np.sqrt(2.0)),
        ff1_b=ad.parameter(np.zeros(h)),
        ff2_w=mat(h, (h, dim)),
        ff2_b=ad.parameter(np.zeros(dim)),
        dim=dim,
    )


def vla_forward(
    queries: DiffTensor, cls_tokens: np.ndarray, params: VlaParams | None, variant: str
) -> DiffTensor:
    """Generate classifier features from region centroids.

    decoder: one cross-attention block (queries against the batch CLS
    tokens as key/value) with residual, then a residual feed-forward.
    mlp: plain two-layer feed-forward.  raw: identity.
    """
    if variant not in VLA_VARIANTS:
        raise ConfigError(f"unknown adapter variant {variant!r}, expected one of {VLA_VARIANTS}")
    if variant == "raw":
        return queries
    if params is None:
        raise ConfigError(f"adapter variant {variant!r} requires parameters")
    q, c = queries.shape
    if q == 0:
        return queries
    if c != params.dim:
        raise ShapeError(f"query dim {c} does not match adapter dim {params.dim}")
    if variant == "mlp":
        hidden = ad.relu(ad.add_bias(ad.matmul(queries, params.ff1_w), params.ff1_b))
        return ad.add_bias(ad.matmul(hidden, params.ff2_w), params.ff2_b)
    cls_np = np.asarray(cls_tokens, dtype=np.float64)
    if cls_np.ndim != 2 or cls_np.shape[1] != c:
        raise ShapeError(f"cls tokens shape {cls_np.shape} does not match dim {c}")
    keys = cls_np @ params.wk.data  # teacher side carries no gradient
    qm = ad.matmul(queries, params.wq)
    att = ad.row_softmax(ad.matmul(qm, ad.constant(keys.T)), temperature=float(np.sqrt(c)))
    values = ad.matmul(ad.constant(cls_np), params.wv)
    h1 = ad.add(queries, ad.matmul(ad.matmul(att, values), params.wo))
    ff = ad.add_bias(
        ad.matmul(ad.relu(ad.add_bias(ad.matmul(h1, params.ff1_w), params.ff1_b)), params.ff2_w),
        params.ff2_b,
    )
    return ad.add(h1, ff)


def generate_loss(gen_seen: DiffTensor, seen_ids: list[int], table) -> DiffTensor:
    """Mean squared distance between generated seen features and their embeddings."""
    if len(seen_ids) == 0:
        return ad.constant(np.array(0.0))
    if gen_seen.shape[0] != len(seen_ids):
        raise ShapeError(f"{gen_seen.shape[0]} generated rows for {len(seen_ids)} ids")
    k = table.vectors.shape[0]
    for cid in seen_ids:
        if not (0 <= cid < k):
            raise DataError(f"category id {cid} missing from the embedding table")
    target = ad.constant(table.rows(seen_ids))
    return ad.scale(ad.sum_all(ad.square(ad.subtract(gen_seen, target))), 1.0 / len(seen_ids))


def pixel_logits(
    features: DiffTensor, gen_potential: DiffTensor | None, seen_text: np.ndarray
) -> DiffTensor:
    """Per-pixel logits: seen text columns first, then generated pseudo columns."""
    seen_const = ad.constant(np.asarray(seen_text, dtype=np.float64))
    if gen_potential is None or gen_potential.shape[0] == 0:
        classifier = seen_const
    else:
        if gen_potential.shape[1] != seen_text.shape[1]:
            raise ShapeError(
                f"channel mismatch: text {seen_text.shape[1]}, generated {gen_potential.shape[1]}"
            )
        classifier = ad.concatenate([seen_const, gen_potential], axis=0)
    return ad.matmul(features, ad.transpose(classifier))


def pixel_losses(logits: DiffTensor, targets: np.ndarray):
    """Cross-entropy, focal and dice losses over every labeled pixel.

    Targets are column indices of the logits; every pixel carries one
    (formerly ignored pixels hold pseudo targets).  Focal uses the exponent
    2; dice averages over classes present in the batch with smoothing 1.
    """
    t = np.asarray(targets, dtype=np.int64)
    n, k = logits.shape
    if t.shape != (n,):
        raise ShapeError(f"need {n} targets, got shape {t.shape}")
    if t.min() < 0 or t.max() >= k:
        raise DataError(f"target id outside the {k} classifier columns")

    ce = ad.cross_entropy(logits, t)

    logp_t = ad.pick_rowwise(ad.row_log_softmax(logits), t)
    p_t = ad.exp(logp_t)
    focal = ad.mean_all(ad.multiply(ad.square(ad.affine(p_t, -1.0, 1.0)), ad.scale(logp_t, -1.0)))

    probs = ad.row_softmax(logits)
    onehot = np.zeros((n, k))
    onehot[np.arange(n), t] = 1.0
    inter = ad.col_sum(ad.multiply(probs, ad.constant(onehot)))
    pred_sum = ad.col_sum(probs)
    target_sum = onehot.sum(axis=0)
    ratio = ad.divide(
        ad.affine(inter, 2.0, DICE_EPS),
        ad.add(pred_sum, ad.constant(target_sum + DICE_EPS)),
    )
    present = np.unique(t)
    dice = ad.affine(ad.masked_mean(ratio, present), -1.0, 1.0)
    return ce, focal, dice

"""Training loop, calibrated inference, metrics, checkpoints.

One step: teacher encode -> segmenter forward -> global contrastive loss
against the token bank -> pseudo-label mining on ignore regions ->
adapter-generated classifiers -> pixel losses -> unweighted sum ->
backward -> AdamW update -> bank rotation.  Scene streams are derived
from (seed, iteration, slot), so a resumed run replays identically.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import glm, plm, segmenter, world
from .autodiff import DiffTensor
from .config import RunConfig
from .errors import ConfigError, DataError, NumericError
from .world import IGNORE, Scene, TextTable, Vocabulary

_CKPT_MAGIC = b"CTCK"
_CKPT_VERSION = 1
_TRAIN_NS = 101
_EVAL_NS = 202

LOSS_PARTS = ("global", "ce", "focal", "dice", "generate")


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


@dataclass
class TrainState:
    config: RunConfig
    config_hash: str
    vocab: Vocabulary
    table: TextTable
    seg: segmenter.SegmenterParams
    vla: plm.VlaParams
    bank: glm.TokenBank
    adam: AdamState
    iteration: int = 0

    def named_params(self) -> dict[str, DiffTensor]:
        return {**self.seg.named(), **self.vla.named()}


def init_state(config: RunConfig) -> TrainState:
    config.validate()
    w = config.world
    vocab = world.make_vocabulary(w.num_seen, w.num_unseen)
    table = world.embed_categories(vocab, config.seed, w.feature_dim, w.coherence)
    input_dim = w.feature_dim if w.input_dim is None else w.input_dim
    seg = segmenter.init_params(config.seed, config.model.widths, w.feature_dim, input_dim)
    vla = plm.init_vla(config.seed, w.feature_dim, config.plm.vla_hidden)
    return TrainState(
        config=config,
        config_hash=config.canonical_hash(),
        vocab=vocab,
        table=table,
        seg=seg,
        vla=vla,
        bank=glm.TokenBank(config.glm.bank_capacity),
        adam=AdamState(),
    )


def training_scene(state: TrainState, iteration: int, slot: int) -> Scene:
    w = state.config.world
    return world.generate_scene(
        state.vocab,
        state.table,
        (state.config.seed, _TRAIN_NS, iteration, slot),
        w.height,
        w.width,
        w.region_count,
        w.noise_sigma,
        w.input_dim,
    )


def eval_scene(state: TrainState, index: int) -> Scene:
    w = state.config.world
    return world.generate_scene(
        state.vocab,
        state.table,
        (state.config.seed, _EVAL_NS, index),
        w.height,
        w.width,
        w.region_count,
        w.noise_sigma,
        w.input_dim,
    )


def total_loss(parts: dict[str, DiffTensor]) -> DiffTensor:
    """Unweighted sum of the enabled loss parts."""
    for name, part in parts.items():
        if not np.all(np.isfinite(part.data)):
            raise NumericError(f"loss part {name!r} is non-finite")
    terms = list(parts.values())
    if not terms:
        return ad.constant(np.array(0.0))
    out = terms[0]
    for t in terms[1:]:
        out = ad.add(out, t)
    return out


def _mine_pseudo_labels(state: TrainState, scenes: list[Scene]) -> np.ndarray:
    """Per-scene clustering + fusion; pseudo ids continue across the batch."""
    cfg = state.config.plm
    base = len(state.vocab)
    next_id = base
    batch_labels = []
    for sc in scenes:
        ignore = sc.seen_labels == IGNORE
        if not ignore.any():
            batch_labels.append(sc.seen_labels.copy())
            continue
        centers = plm.init_centers(sc.dense_tokens, cfg.scales, ignore)
        ms = plm.kmeans_ignore(
            sc.dense_tokens,
            centers,
            ignore,
            max_iters=cfg.kmeans_max_iters,
            distance=cfg.kmeans_distance,
        )
        fused = plm.mask_fusion(ms.masks, ms.centers, cfg.fusion_threshold)
        pl = plm.build_pseudo_labels(sc.seen_labels, fused, next_id)
        next_id += pl.pseudo_count
        batch_labels.append(pl.labels)
    return np.stack(batch_labels)


def train_step(state: TrainState, scenes: list[Scene]) -> dict[str, float]:
    """Run one optimization step in place; returns the loss parts."""
    cfg = state.config
    b = len(scenes)
    if b != cfg.train.batch_size:
        raise ConfigError(f"batch of {b} scenes, configured batch_size {cfg.train.batch_size}")
    inputs = np.stack([sc.pixel_input for sc in scenes])
    cls_batch = np.stack([sc.cls_token for sc in scenes])

    if cfg.train.bank_update_before_loss:
        glm.bank_update(state.bank, cls_batch)

    feats = segmenter.segment_forward(inputs, state.seg)  # (B, C, L)
    parts: dict[str, DiffTensor] = {}

    if cfg.train.use_cls_token:
        pooled = glm.pool_variant(cls_batch, feats, cfg.glm.pooling)
        parts["global"] = glm.infonce_global(
            cls_batch,
            pooled,
            state.bank,
            cfg.glm.temperature,
            include_batch=cfg.glm.negatives_include_batch,
        )

    need_pixel = cfg.train.use_ce or cfg.train.use_focal_dice
    if need_pixel or cfg.train.use_generate:
        labels = _mine_pseudo_labels(state, scenes)
        labels_flat = labels.reshape(-1)
        feats_rows = segmenter.features_as_rows(feats)
        queries, qlabels = plm.region_centroids(feats_rows, labels_flat)
        generated = plm.vla_forward(queries, cls_batch, state.vla, cfg.plm.vla_variant)

        base = len(state.vocab)
        seen_rows = [i for i, lab in enumerate(qlabels) if lab < base]
        pseudo_rows = [i for i, lab in enumerate(qlabels) if lab >= base]

        if cfg.train.use_generate and seen_rows:
            seen_ids = [qlabels[i] for i in seen_rows]
            parts["generate"] = plm.generate_loss(
                ad.gather_rows(generated, seen_rows), seen_ids, state.table
            )

        if need_pixel:
            gen_potential = ad.gather_rows(generated, pseudo_rows) if pseudo_rows else None
            seen_list = list(state.vocab.seen)
            seen_text = state.table.rows(seen_list)
            logits = plm.pixel_logits(feats_rows, gen_potential, seen_text)

            col_of = {cid: i for i, cid in enumerate(seen_list)}
            targets = np.empty_like(labels_flat)
            seen_mask = labels_flat < base
            targets[seen_mask] = [col_of[int(x)] for x in labels_flat[seen_mask]]
            targets[~seen_mask] = len(seen_list) + (labels_flat[~seen_mask] - base)

            ce, focal, dice = plm.pixel_losses(logits, targets)
            if cfg.train.use_ce:
                parts["ce"] = ce
            if cfg.train.use_focal_dice:
                parts["focal"] = focal
                parts["dice"] = dice

    loss = total_loss(parts)
    if parts:
        ad.backward(loss)
        _adamw_update(state)
    if not cfg.train.bank_update_before_loss:
        glm.bank_update(state.bank, cls_batch)
    state.iteration += 1

    out = {name: 0.0 for name in LOSS_PARTS}
    out.update({name: part.item() for name, part in parts.items()})
    out["total"] = loss.item()
    return out


def _adamw_update(state: TrainState) -> None:
    t = state.config.train
    adam = state.adam
    adam.step += 1
    bc1 = 1.0 - t.beta1**adam.step
    bc2 = 1.0 - t.beta2**adam.step
    for name, p in state.named_params().items():
        g = p.grad
        if g is None:
            continue
        m = adam.m.get(name)
        if m is None:
            m = adam.m[name] = np.zeros_like(p.data)
        v = adam.v.get(name)
        if v is None:
            v = adam.v[name] = np.zeros_like(p.data)
        m *= t.beta1
        m += (1.0 - t.beta1) * g
        v *= t.beta2
        v += (1.0 - t.beta2) * g * g
        p.data -= t.learning_rate * ((m / bc1) / (np.sqrt(v / bc2) + t.eps) + t.weight_decay * p.data)
        p.grad = None


def train_loop(state: TrainState, iterations: int | None = None, on_step=None) -> list[dict]:
    """Advance ``state`` until the configured iteration count (or +N more)."""
    target = state.config.train.iterations if iterations is None else state.iteration + iterations
    rows = []
    while state.iteration < target:
        it = state.iteration
        scenes = [training_scene(state, it, s) for s in range(state.config.train.batch_size)]
        parts = train_step(state, scenes)
        rows.append({"iteration": it, **parts})
        if on_step is not None:
            on_step(it, parts)
    return rows


# ---------------------------------------------------------------------------
# inference and metrics


def infer_features(
    features: np.ndarray, table: TextTable, vocab: Vocabulary, gamma: float
) -> np.ndarray:
    """Argmax over text-feature logits, unseen columns offset by gamma.

    ``features`` is (L, C) pixel rows; returns flat predicted category ids.
    Classifiers at inference are the text embeddings only.
    """
    logits = features @ table.vectors.T
    logits[:, list(vocab.unseen)] += gamma
    return logits.argmax(axis=1)


def infer_scene(
    scene: Scene, seg: segmenter.SegmenterParams, table: TextTable, vocab: Vocabulary, gamma: float
) -> np.ndarray:
    feats = segmenter.segment_forward(scene.pixel_input[None], seg)
    rows = feats.data[0].T  # (L, C)
    flat = infer_features(rows, table, vocab, gamma)
    return flat.reshape(scene.height, scene.width).astype(np.int32)


def harmonic_iou(miou_seen: float, miou_unseen: float) -> float:
    if miou_seen + miou_unseen == 0:
        return 0.0
    return 2.0 * miou_seen * miou_unseen / (miou_seen + miou_unseen)


@dataclass
class MetricsReport:
    pacc: float
    miou_seen: float
    miou_unseen: float
    hiou: float
    per_class: dict[int, float]
    pixel_counts: dict[int, int]

    def __post_init__(self):
        for v in (self.pacc, self.miou_seen, self.miou_unseen, self.hiou, *self.per_class.values()):
            if not (-1e-12 <= v <= 1.0 + 1e-12):
                raise DataError(f"metric outside [0, 1]: {v}")

    def to_json_dict(self) -> dict:
        return {
            "pAcc": self.pacc,
            "mIoU_S": self.miou_seen,
            "mIoU_U": self.miou_unseen,
            "hIoU": self.hiou,
            "per_class": {str(k): v for k, v in sorted(self.per_class.items())},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True, indent=2) + "\n"


def evaluate(preds: list[np.ndarray], gts: list[np.ndarray], vocab: Vocabulary) -> MetricsReport:
    """Global-confusion IoU metrics over the full vocabulary.

    Per-class IoU = TP / (TP + FP + FN) accumulated over all scenes;
    classes absent from both prediction and ground truth are excluded from
    the split means.
    """
    if len(preds) != len(gts):
        raise DataError(f"{len(preds)} predictions for {len(gts)} label maps")
    k = len(vocab)
    conf = np.zeros((k, k), dtype=np.int64)
    for p, g in zip(preds, gts):
        if p.shape != g.shape:
            raise DataError(f"prediction shape {p.shape} differs from labels {g.shape}")
        pf, gf = p.ravel(), g.ravel()
        if pf.min() < 0 or pf.max() >= k or gf.min() < 0 or gf.max() >= k:
            raise DataError("prediction or label id outside the vocabulary")
        conf += np.bincount(gf * k + pf, minlength=k * k).reshape(k, k)

    tp = np.diag(conf).astype(np.float64)
    fp = conf.sum(axis=0) - tp
    fn = conf.sum(axis=1) - tp
    denom = tp + fp + fn
    present = denom > 0
    per_class = {int(c): float(tp[c] / denom[c]) for c in np.flatnonzero(present)}
    counts = {int(c): int(conf.sum(axis=1)[c]) for c in range(k)}

    def split_mean(ids):
        vals = [per_class[c] for c in ids if c in per_class]
        return float(np.mean(vals)) if vals else 0.0

    miou_s = split_mean(vocab.seen)
    miou_u = split_mean(vocab.unseen)
    total = conf.sum()
    return MetricsReport(
        pacc=float(tp.sum() / total) if total else 0.0,
        miou_seen=miou_s,
        miou_unseen=miou_u,
        hiou=harmonic_iou(miou_s, miou_u),
        per_class=per_class,
        pixel_counts=counts,
    )


def evaluate_state(state: TrainState, gamma: float | None = None, scenes=None) -> MetricsReport:
    g = state.config.train.gamma if gamma is None else gamma
    if scenes is None:
        scenes = [eval_scene(state, i) for i in range(state.config.train.eval_scenes)]
    preds = [infer_scene(sc, state.seg, state.table, state.vocab, g) for sc in scenes]
    return evaluate(preds, [sc.gt_labels for sc in scenes], state.vocab)


# ---------------------------------------------------------------------------
# checkpoints


def _state_records(state: TrainState) -> dict[str, np.ndarray]:
    rec = {name: p.data for name, p in state.named_params().items()}
    for name, arr in state.adam.m.items():
        rec[f"adam.m.{name}"] = arr
    for name, arr in state.adam.v.items():
        rec[f"adam.v.{name}"] = arr
    for i, entry in enumerate(state.bank.entries):
        rec[f"bank.{i:04d}"] = entry
    rec["meta.iteration"] = np.array([float(state.iteration)])
    rec["meta.adam_step"] = np.array([float(state.adam.step)])
    return rec


def save_checkpoint(state: TrainState, path) -> None:
    """Named float64 tensor records, little-endian, bit-exact round trip."""
    records = _state_records(state)
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", _CKPT_VERSION))
        h = state.config_hash.encode()
        f.write(struct.pack("<I", len(h)))
        f.write(h)
        f.write(struct.pack("<I", len(records)))
        for name in sorted(records):
            arr = np.ascontiguousarray(records[name], dtype="<f8")
            nb = name.encode()
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path, config: RunConfig) -> TrainState:
    """Rebuild a state from a checkpoint; refuses hash or version mismatch."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(raw):
            raise DataError(f"{path}: truncated checkpoint")
        chunk = raw[off : off + n]
        off += n
        return chunk

    if take(4) != _CKPT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack("<I", take(4))
    if version != _CKPT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<I", take(4))
    stored_hash = take(hlen).decode()
    if stored_hash != config.canonical_hash():
        raise DataError(
            f"{path}: checkpoint config hash {stored_hash[:12]}... does not match "
            f"the supplied config ({config.canonical_hash()[:12]}...)"
        )
    (count,) = struct.unpack("<I", take(4))
    records: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode()
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        n = int(np.prod(dims)) if dims else 1
        records[name] = np.frombuffer(take(n * 8), dtype="<f8").reshape(dims).astype(np.float64)
    if off != len(raw):
        raise DataError(f"{path}: trailing bytes after checkpoint records")

    state = init_state(config)
    for name, p in state.named_params().items():
        if name not in records:
            raise DataError(f"{path}: missing parameter record {name}")
        if records[name].shape != p.data.shape:
            raise DataError(f"{path}: shape mismatch for {name}")
        p.data = records[name].copy()
    for name in state.named_params():
        if f"adam.m.{name}" in records:
            state.adam.m[name] = records[f"adam.m.{name}"].copy()
            state.adam.v[name] = records[f"adam.v.{name}"].copy()
    bank_keys = sorted(k for k in records if k.startswith("bank."))
    state.bank.restore([records[k] for k in bank_keys])
    state.iteration = int(records["meta.iteration"][0])
    state.adam.step = int(records["meta.adam_step"][0])
    return state

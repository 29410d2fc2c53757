"""Finite-difference verification of every differentiable path.

Each entry builds a small random instance, defines a scalar loss as a
function of one leaf tensor, and compares the tape gradient against
central differences.  Network-shaped paths use a smaller step to keep
clear of ReLU kinks.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import glm, plm, segmenter
from .autodiff import DiffTensor, finite_difference_check

TOLERANCE = 1e-4
_NET_STEP = 1e-5


def _rng(seed: int, tag: int):
    return np.random.default_rng(np.random.SeedSequence([seed, tag]))


def _away_from_zero(rng, shape):
    # keep clear of relu/abs kinks: magnitudes in [0.2, 1.2]
    return rng.uniform(0.2, 1.2, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _primitive_checks(seed: int) -> dict[str, float]:
    rng = _rng(seed, 1)
    x = rng.standard_normal((2, 3))
    pos = rng.uniform(0.5, 2.0, size=(2, 3))
    other = ad.constant(rng.standard_normal((2, 3)))
    posc = ad.constant(rng.uniform(0.5, 2.0, size=(2, 3)))
    mat = ad.constant(rng.standard_normal((3, 4)))
    idx = np.array([1, 0, 1])
    picks = np.array([2, 0])
    flat_idx = np.array([0, 4, 5])
    targets = np.array([1, 2])

    harnesses = {
        "add": (x, lambda t: ad.sum_all(ad.square(ad.add(t, other)))),
        "subtract": (x, lambda t: ad.sum_all(ad.square(ad.subtract(t, other)))),
        "multiply": (x, lambda t: ad.sum_all(ad.square(ad.multiply(t, other)))),
        "divide": (x, lambda t: ad.sum_all(ad.square(ad.divide(t, posc)))),
        "scale": (x, lambda t: ad.sum_all(ad.square(ad.scale(t, 1.7)))),
        "affine": (x, lambda t: ad.sum_all(ad.square(ad.affine(t, -0.6, 0.3)))),
        "exp": (x, lambda t: ad.sum_all(ad.exp(t))),
        "log": (pos, lambda t: ad.sum_all(ad.square(ad.log(t)))),
        "square": (x, lambda t: ad.sum_all(ad.square(t))),
        "relu": (_away_from_zero(rng, (2, 3)), lambda t: ad.sum_all(ad.square(ad.relu(t)))),
        "reshape": (x, lambda t: ad.sum_all(ad.square(ad.reshape(t, (3, 2))))),
        "transpose": (x, lambda t: ad.sum_all(ad.square(ad.transpose(t)))),
        "permute": (
            rng.standard_normal((2, 3, 2)),
            lambda t: ad.sum_all(ad.square(ad.permute(t, (2, 0, 1)))),
        ),
        "concatenate": (x, lambda t: ad.sum_all(ad.square(ad.concatenate([t, other], axis=0)))),
        "gather": (x, lambda t: ad.sum_all(ad.square(ad.gather_rows(t, idx)))),
        "pick_rowwise": (x, lambda t: ad.sum_all(ad.square(ad.pick_rowwise(t, picks)))),
        "masked_mean": (x, lambda t: ad.square(ad.masked_mean(t, flat_idx))),
        "sum": (x, lambda t: ad.square(ad.sum_all(t))),
        "mean": (x, lambda t: ad.square(ad.mean_all(t))),
        "row_sum": (x, lambda t: ad.sum_all(ad.square(ad.row_sum(t)))),
        "col_sum": (x, lambda t: ad.sum_all(ad.square(ad.col_sum(t)))),
        "row_max": (x, lambda t: ad.sum_all(ad.square(ad.row_max(t)))),
        "matmul": (x, lambda t: ad.sum_all(ad.square(ad.matmul(t, mat)))),
        "add_bias": (x, lambda t: ad.sum_all(ad.square(ad.add_bias(t, ad.constant(np.array([0.3, -0.2, 0.9])))))),
        "l2_norm": (x, lambda t: ad.square(ad.l2_norm(t))),
        "normalize_rows": (x, lambda t: ad.sum_all(ad.square(ad.normalize_rows(t)))),
        "row_softmax": (x, lambda t: ad.sum_all(ad.square(ad.row_softmax(t, 0.7)))),
        "row_log_softmax": (x, lambda t: ad.sum_all(ad.square(ad.row_log_softmax(t)))),
        "im2col": (
            rng.standard_normal((3, 3, 2)),
            lambda t: ad.sum_all(ad.square(ad.im2col(t, 3))),
        ),
        "cross_entropy": (x, lambda t: ad.cross_entropy(t, targets)),
        "mse": (x, lambda t: ad.mse(t, other)),
    }
    return {
        f"primitive:{name}": finite_difference_check(lambda t, f=f: f(t), ad.constant(arr))
        for name, (arr, f) in harnesses.items()
    }


def _param_paths(seed: int) -> dict[str, float]:
    """Composite forward passes checked against each trainable leaf."""
    rng = _rng(seed, 2)
    results: dict[str, float] = {}

    def check_leaf(tag, leaf, loss_fn, peers=(), h=_NET_STEP):
        """FD against one parameter leaf, perturbing it in place."""
        ad.zero_grads([leaf, *peers])
        ad.backward(loss_fn())
        analytic = leaf.grad.copy() if leaf.grad is not None else np.zeros_like(leaf.data)
        ad.zero_grads([leaf, *peers])
        numeric = np.zeros(leaf.size)
        for i in range(leaf.size):
            orig = leaf.data.flat[i]
            leaf.data.flat[i] = orig + h
            fp = loss_fn().item()
            leaf.data.flat[i] = orig - h
            fm = loss_fn().item()
            leaf.data.flat[i] = orig
            numeric[i] = (fp - fm) / (2 * h)
        err = np.abs(analytic.ravel() - numeric) / np.maximum(1.0, np.abs(numeric))
        results[tag] = float(err.max()) if err.size else 0.0

    # segmenter: loss = sum of squared features, checked against each weight
    c, cin = 5, 3
    seg = segmenter.init_params(seed + 1, (4, 4), c, cin, probe=False)
    x = rng.standard_normal((1, 4, 4, cin))
    seg_loss = lambda: ad.sum_all(ad.square(segmenter.segment_forward(x, seg)))
    seg_leaves = list(seg.named().values())
    for name, leaf in seg.named().items():
        check_leaf(f"segmenter:{name}", leaf, seg_loss, peers=seg_leaves)

    # global path: attention pooling + contrastive loss w.r.t. raw features
    b, l = 2, 6
    cls = rng.standard_normal((b, c))
    cls /= np.linalg.norm(cls, axis=1, keepdims=True)
    bank = glm.TokenBank(capacity=3)
    for _ in range(2):
        e = rng.standard_normal((b, c))
        bank.push(e / np.linalg.norm(e, axis=1, keepdims=True))
    feats0 = rng.standard_normal((b, c, l))

    def glm_loss_on(t: DiffTensor) -> DiffTensor:
        pooled = glm.pool_variant(cls, t, "attention")
        return glm.infonce_global(cls, pooled, bank, temperature=0.5)

    results["glm:attention_infonce"] = finite_difference_check(glm_loss_on, ad.constant(feats0))
    for variant in ("mean", "max"):
        results[f"glm:pool_{variant}"] = finite_difference_check(
            lambda t, v=variant: glm.infonce_global(cls, glm.pool_variant(cls, t, v), bank, 0.5),
            ad.constant(feats0),
        )

    # pixel path: centroids -> adapter -> logits -> ce/focal/dice
    n_pix, n_seen, n_pseudo = 12, 2, 2
    labels = rng.integers(0, n_seen + n_pseudo, size=n_pix)
    labels[:n_seen + n_pseudo] = np.arange(n_seen + n_pseudo)  # every label present
    seen_text = rng.standard_normal((n_seen, c))
    seen_text /= np.linalg.norm(seen_text, axis=1, keepdims=True)
    vla = plm.init_vla(seed + 2, c)
    feats_rows0 = rng.standard_normal((n_pix, c))

    class _Table:
        vectors = seen_text

        def rows(self, ids):
            return seen_text[np.asarray(ids)]

    def pixel_chain(t: DiffTensor, which: str) -> DiffTensor:
        queries, qlabels = plm.region_centroids(t, labels)
        gen = plm.vla_forward(queries, cls, vla, "decoder")
        seen_rows = [i for i, lab in enumerate(qlabels) if lab < n_seen]
        pseudo_rows = [i for i, lab in enumerate(qlabels) if lab >= n_seen]
        if which == "generate":
            return plm.generate_loss(
                ad.gather_rows(gen, seen_rows), [qlabels[i] for i in seen_rows], _Table()
            )
        logits = plm.pixel_logits(t, ad.gather_rows(gen, pseudo_rows), seen_text)
        ce, focal, dice = plm.pixel_losses(logits, labels)
        if which == "ce":
            return ce
        if which == "focal":
            return focal
        if which == "dice":
            return dice
        return ad.add(ad.add(ce, focal), dice)

    results["plm:region_centroids"] = finite_difference_check(
        lambda t: ad.sum_all(ad.square(plm.region_centroids(t, labels)[0])), ad.constant(feats_rows0)
    )
    for which in ("generate", "ce", "focal", "dice", "chain"):
        results[f"plm:{which}"] = finite_difference_check(
            lambda t, w=which: pixel_chain(t, w), ad.constant(feats_rows0), h=_NET_STEP
        )
    vla_leaves = list(vla.named().values())
    for name, leaf in vla.named().items():
        check_leaf(
            f"vla:{name}",
            leaf,
            lambda: pixel_chain(ad.constant(feats_rows0), "chain"),
            peers=vla_leaves,
        )
    # mlp adapter variant
    results["vla:mlp_variant"] = finite_difference_check(
        lambda t: ad.sum_all(ad.square(plm.vla_forward(t, cls, vla, "mlp"))),
        ad.constant(rng.standard_normal((3, c))),
    )
    return results


def run_suite(seed: int = 0) -> dict[str, float]:
    """Max relative FD error per differentiable path."""
    out = _primitive_checks(seed)
    out.update(_param_paths(seed))
    return out


def failing_paths(errors: dict[str, float], tolerance: float = TOLERANCE) -> list[str]:
    return [name for name, err in errors.items() if not (err < tolerance)]

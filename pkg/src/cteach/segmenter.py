"""Trainable per-pixel segmenter.

Deliberately generic: two 3x3 same-padding convolutions with ReLU, then a
1x1 projection to the teacher channel count.  Any dense-feature model with
matching output channels would slot into the rest of the pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DiffTensor
from .errors import ConfigError, ShapeError


@dataclass
class SegmenterParams:
    conv1_w: DiffTensor  # (9*C_in, w1)
    conv1_b: DiffTensor  # (w1,)
    conv2_w: DiffTensor  # (9*w1, w2)
    conv2_b: DiffTensor  # (w2,)
    proj_w: DiffTensor  # (w2, C)
    proj_b: DiffTensor  # (C,)
    input_dim: int
    widths: tuple[int, int]
    out_dim: int

    def named(self) -> dict[str, DiffTensor]:
        return {
            "seg.conv1_w": self.conv1_w,
            "seg.conv1_b": self.conv1_b,
            "seg.conv2_w": self.conv2_w,
            "seg.conv2_b": self.conv2_b,
            "seg.proj_w": self.proj_w,
            "seg.proj_b": self.proj_b,
        }

    @property
    def count(self) -> int:
        return sum(t.size for t in self.named().values())


def init_params(
    seed: int, widths, out_dim: int, input_dim: int, probe: bool = True
) -> SegmenterParams:
    """He-initialized weights, zero biases, deterministic per seed.

    A one-batch probe verifies every parameter receives gradient (no dead
    subgraph); a seed that fails the probe is rejected.
    """
    w1, w2 = (int(x) for x in widths)
    if w1 < 4 or w2 < 4:
        raise ConfigError(f"layer widths must be >= 4, got {widths}")
    if out_dim < 1 or input_dim < 1:
        raise ConfigError("channel counts must be positive")
    rng = np.random.default_rng(np.random.SeedSequence([seed, w1, w2, out_dim, input_dim]))

    def he(fan_in, shape):
        return ad.parameter(rng.standard_normal(shape) * np.sqrt(2.0 / fan_in))

    params = SegmenterParams(
        conv1_w=he(9 * input_dim, (9 * input_dim, w1)),
        conv1_b=ad.parameter(np.zeros(w1)),
        conv2_w=he(9 * w1, (9 * w1, w2)),
        conv2_b=ad.parameter(np.zeros(w2)),
        proj_w=he(w2, (w2, out_dim)),
        proj_b=ad.parameter(np.zeros(out_dim)),
        input_dim=input_dim,
        widths=(w1, w2),
        out_dim=out_dim,
    )
    if probe:
        x = rng.standard_normal((1, 8, 8, input_dim))
        ad.backward(ad.sum_all(segment_forward(x, params)))
        dead = [n for n, t in params.named().items() if not np.any(t.grad)]
        ad.zero_grads(params.named().values())
        if dead:
            raise ConfigError(f"dead parameters at init (reroll the seed): {dead}")
    return params


def segment_forward(inputs: np.ndarray, params: SegmenterParams) -> DiffTensor:
    """Dense features for a batch: (B, H, W, C_in) -> (B, C, L), L = H*W.

    The L axis is row-major over (row, col), identical to label flattening
    everywhere else in the system.
    """
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 4 or x.shape[3] != params.input_dim:
        raise ShapeError(
            f"segment_forward: expected (B, H, W, {params.input_dim}), got {x.shape}"
        )
    b, h, w, _ = x.shape
    l = h * w
    w1 = params.widths[0]

    patches = ad.concatenate([ad.im2col(ad.constant(x[i]), 3) for i in range(b)], axis=0)
    h1 = ad.relu(ad.add_bias(ad.matmul(patches, params.conv1_w), params.conv1_b))
    per_scene = [
        ad.im2col(ad.reshape(ad.gather_rows(h1, np.arange(i * l, (i + 1) * l)), (h, w, w1)), 3)
        for i in range(b)
    ]
    h2 = ad.relu(ad.add_bias(ad.matmul(ad.concatenate(per_scene, axis=0), params.conv2_w), params.conv2_b))
    out = ad.add_bias(ad.matmul(h2, params.proj_w), params.proj_b)  # (B*L, C)
    if not np.all(np.isfinite(out.data)):
        raise ShapeError("segment_forward: non-finite activations")
    return ad.permute(ad.reshape(out, (b, l, params.out_dim)), (0, 2, 1))


def features_as_rows(feats: DiffTensor) -> DiffTensor:
    """(B, C, L) features -> (B*L, C) pixel rows in label-flattening order."""
    b, c, l = feats.shape
    return ad.reshape(ad.permute(feats, (0, 2, 1)), (b * l, c))


def flatten_labels(labels: np.ndarray) -> np.ndarray:
    """Row-major flattening shared by features and label maps."""
    return np.ascontiguousarray(labels).ravel()


def unflatten_labels(flat: np.ndarray, height: int, width: int) -> np.ndarray:
    return np.asarray(flat).reshape(height, width)

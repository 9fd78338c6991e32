"""Grid-prediction CNN shared by the localisation head and the region embeddings.

Layout (input 1 x 128 x 128, pixels mapped from [0, 1] to [-2, 2])::

    conv1  1 -> 8   3x3 stride 1 pad 1   relu   128 x 128
    conv2  8 -> 16  2x2 stride 2         relu    64 x 64
    conv3 16 -> 32  2x2 stride 2         relu    32 x 32
    conv4 32 -> 64  2x2 stride 2         relu    16 x 16   <- feature map f
    head1 64 -> 32  1x1                  relu
    head2 32 -> K   1x1                  sigmoid           <- grid probabilities p

Grid cell ``(r, c)`` covers pixels ``[8r, 8r+7] x [8c, 8c+7]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from gren import diffcore as dc
from gren.diffcore import Tensor

IMAGE_SIDE = 128
GRID = 16
CELL = IMAGE_SIDE // GRID
FEATURE_CHANNELS = 64

# name, in, out, kernel, stride, padding
BACKBONE = (
    ("conv1", 1, 8, 3, 1, 1),
    ("conv2", 8, 16, 2, 2, 0),
    ("conv3", 16, 32, 2, 2, 0),
    ("conv4", 32, FEATURE_CHANNELS, 2, 2, 0),
)
HEAD_HIDDEN = 32
# Fixed affine map applied to [0, 1] pixels before conv1. Uncentred input gives every
# conv1 unit a large shared offset, and early steps then drive whole layers dead.
INPUT_SHIFT = 0.5
INPUT_SCALE = 0.25

Params = dict[str, Tensor]


def _layers(num_classes: int):
    return BACKBONE + (
        ("head1", FEATURE_CHANNELS, HEAD_HIDDEN, 1, 1, 0),
        ("head2", HEAD_HIDDEN, num_classes, 1, 1, 0),
    )


def init_params(seed: int, num_classes: int = 2) -> Params:
    """Kaiming-uniform (fan-in, relu gain) weights, zero biases."""
    if num_classes < 1:
        raise ValueError("num_classes must be positive")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xC0DE]))
    params: Params = {}
    for name, cin, cout, k, _, _ in _layers(num_classes):
        bound = math.sqrt(6.0 / (cin * k * k))
        params[f"{name}.weight"] = Tensor(rng.uniform(-bound, bound, size=(cout, cin, k, k)), requires_grad=True)
        params[f"{name}.bias"] = Tensor(np.zeros(cout), requires_grad=True)
    return params


def num_classes_of(params: Params) -> int:
    return params["head2.weight"].shape[0]


def copy_params(params: Params, requires_grad: bool = True) -> Params:
    return {k: Tensor(v.data.copy(), requires_grad=requires_grad) for k, v in params.items()}


@dataclass
class ModelOutput:
    """Feature map ``[.., 64, 16, 16]``, grid logits and probabilities ``[.., K, P, P]``."""

    features: Tensor
    logits: Tensor
    probs: Tensor

    def __getitem__(self, i: int) -> "ModelOutput":
        return ModelOutput(self.features[i], self.logits[i], self.probs[i])


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of the last two axes."""
    return dc.repeat_spatial(x, 2)


def forward(params: Params, images, upsample: bool = False) -> ModelOutput:
    """Run the network on one ``[128, 128]`` image or a ``[N, 128, 128]`` stack."""
    arr = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
    single = arr.ndim == 2
    if single:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[1:] != (IMAGE_SIDE, IMAGE_SIDE):
        raise ValueError(f"expected {IMAGE_SIDE}x{IMAGE_SIDE} images, got shape {arr.shape}")
    h = Tensor((arr[:, None] - INPUT_SHIFT) / INPUT_SCALE)
    for name, _, _, _, stride, pad in BACKBONE:
        h = dc.relu(dc.conv2d(h, params[f"{name}.weight"], params[f"{name}.bias"], stride, pad))
    features = h
    if upsample:
        h = upsample2x(h)
    h = dc.relu(dc.conv2d(h, params["head1.weight"], params["head1.bias"]))
    logits = dc.conv2d(h, params["head2.weight"], params["head2.bias"])
    out = ModelOutput(features, logits, dc.sigmoid(logits))
    return out[0] if single else out


def downsample_mask(mask, grid: int = GRID) -> np.ndarray:
    """Max-pool a pixel mask to grid resolution (any covered pixel counts)."""
    m = np.asarray(mask).astype(bool)
    side = m.shape[0]
    if m.shape != (side, side) or side % grid:
        raise ValueError(f"mask shape {m.shape} does not tile into a {grid}x{grid} grid")
    cell = side // grid
    return m.reshape(grid, cell, grid, cell).any(axis=(1, 3))


def _pooled(features: Tensor, mask_grid: np.ndarray, what: str) -> Tensor:
    if not mask_grid.any():
        raise ValueError(f"{what} mask is empty at grid resolution")
    return dc.l2_normalize(dc.masked_avg_pool(features, mask_grid.astype(np.float64)))


def _single_features(output) -> Tensor:
    features = output.features if isinstance(output, ModelOutput) else output
    if features.ndim != 3:
        raise ValueError("expected the output of a single image")
    return features


def region_embeddings(output, left_mask, right_mask) -> tuple[Tensor, Tensor]:
    features = _single_features(output)
    grid = features.shape[-1]
    f_l = _pooled(features, downsample_mask(left_mask, grid), "left lung")
    f_r = _pooled(features, downsample_mask(right_mask, grid), "right lung")
    return f_l, f_r


def whole_embedding(output, left_mask, right_mask) -> Tensor:
    features = _single_features(output)
    grid = features.shape[-1]
    union = downsample_mask(np.asarray(left_mask, bool) | np.asarray(right_mask, bool), grid)
    return _pooled(features, union, "lung union")

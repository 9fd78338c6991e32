"""Supervision losses, similarity graphs and graph-regularised objective.

Supervision per sample ``i`` and class ``k`` is a grid BCE when the class
carries a box (weighted by ``beta``) and a multiple-instance loss on the
image label otherwise. Two regularisers subtract edge-weighted Euclidean
distances between lung-region embeddings (left vs right of one image) and
between whole-image embeddings (every unordered in-batch pair). Edge
weights come either from perceptual-hash Hamming distances or from cosine
similarities of the embeddings themselves.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Literal, Sequence

import numpy as np

from gren import diffcore as dc
from gren import model
from gren.diffcore import Tensor
from gren.phash import HASH_BITS, hamming
from gren.synthgen import Batch, Box, RegionHashes

EdgeMode = Literal["hash", "cosine"]


@dataclass(frozen=True)
class ObjectiveConfig:
    beta: float = 4.0
    lambda1: float = 0.11
    lambda2: float = 0.15
    lambda3: float = 0.15
    lambda4: float = 0.15
    edge_mode: EdgeMode = "hash"
    prob_clamp: float = 1e-6

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        for name in ("lambda1", "lambda2", "lambda3", "lambda4"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 < self.prob_clamp < 0.5:
            raise ValueError("prob_clamp must be in (0, 0.5)")
        if self.edge_mode not in ("hash", "cosine"):
            raise ValueError(f"edge_mode must be 'hash' or 'cosine', got {self.edge_mode!r}")


# --------------------------------------------------------------- grid labels


@dataclass
class GridLabels:
    y: np.ndarray       # [K, P, P] of {0, 1}
    valid: np.ndarray   # [K] of {0, 1}


def rasterize_box_labels(
    boxes: Sequence[Box],
    num_classes: int,
    grid: int = model.GRID,
    image_side: int = model.IMAGE_SIDE,
    annotated=None,
) -> GridLabels:
    """Label a cell 1 when any pixel of it lies inside a box of that class."""
    cell = image_side // grid
    y = np.zeros((num_classes, grid, grid), dtype=np.int64)
    for b in boxes:
        if not (0 <= b.x0 <= b.x1 < image_side and 0 <= b.y0 <= b.y1 < image_side):
            raise ValueError(f"box {b} outside the {image_side}x{image_side} image")
        if not 0 <= b.k < num_classes:
            raise ValueError(f"box class {b.k} out of range")
        y[b.k, b.y0 // cell:b.y1 // cell + 1, b.x0 // cell:b.x1 // cell + 1] = 1
    if annotated is None:
        valid = (y.reshape(num_classes, -1).max(axis=1) > 0).astype(np.int64)
    else:
        valid = np.asarray(annotated, dtype=np.int64).copy()
        y[valid == 0] = 0
    return GridLabels(y, valid)


# ----------------------------------------------------------- supervision


def _clamped(p: Tensor, k: int, eps: float) -> Tensor:
    return dc.clip(p[k], eps, 1.0 - eps)


def grid_bce_loss(p: Tensor, labels: GridLabels, k: int, eps: float = 1e-6) -> Tensor:
    """Summed per-cell BCE for class ``k`` on probabilities clamped to [eps, 1 - eps]."""
    if not labels.valid[k]:
        raise ValueError(f"class {k} has no box annotation; grid BCE does not apply")
    q = _clamped(p, k, eps)
    y = labels.y[k].astype(np.float64)
    return -(dc.tsum(y * dc.log(q)) + dc.tsum((1.0 - y) * dc.log(1.0 - q)))


# log(1 - exp(S)) diverges at S = 0, reachable only if every cell is certain-negative
_LOG_NONE_CEILING = -1e-300


def _bag_loss(log_none: Tensor, y: int) -> Tensor:
    log_none = dc.clip(log_none, -np.inf, _LOG_NONE_CEILING)
    if y:
        return -dc.log1mexp(log_none)
    return -log_none


def mil_loss(p: Tensor, y: int, k: int, eps: float = 1e-6) -> Tensor:
    """Bag loss on clamped probabilities; ``S = sum_j log(1 - p_j)`` stays in log space."""
    return _bag_loss(dc.tsum(dc.log(1.0 - _clamped(p, k, eps))), y)


def grid_bce_loss_logits(z: Tensor, labels: GridLabels, k: int) -> Tensor:
    """``grid_bce_loss`` evaluated from logits, without clamping.

    ``-log p = softplus(-z)`` and ``-log(1 - p) = softplus(z)``, so the value
    matches the probability form wherever the clamp is inactive, and the
    gradient does not vanish once the sigmoid saturates.
    """
    if not labels.valid[k]:
        raise ValueError(f"class {k} has no box annotation; grid BCE does not apply")
    y = labels.y[k].astype(np.float64)
    return dc.tsum(y * dc.softplus(-z[k])) + dc.tsum((1.0 - y) * dc.softplus(z[k]))


def mil_loss_logits(z: Tensor, y: int, k: int) -> Tensor:
    """``mil_loss`` evaluated from logits: ``S = -sum_j softplus(z_j)``."""
    return _bag_loss(-dc.tsum(dc.softplus(z[k])), y)


def supervision_loss(
    outputs: Tensor,
    image_labels,
    grid_labels: Sequence[GridLabels],
    config: ObjectiveConfig,
    from_logits: bool = True,
) -> Tensor:
    """Sum over samples and classes of ``beta * grid BCE`` (box given) or the bag loss.

    ``outputs`` is ``[N, K, P, P]``: logits by default, clamped
    probabilities with ``from_logits=False``.
    """
    image_labels = np.asarray(image_labels)
    n, num_classes = outputs.shape[0], outputs.shape[1]
    if image_labels.shape != (n, num_classes) or len(grid_labels) != n:
        raise ValueError("labels do not match the batch of predictions")
    terms = []
    for i in range(n):
        o = outputs[i]
        for k in range(num_classes):
            if grid_labels[i].valid[k]:
                bce = (grid_bce_loss_logits(o, grid_labels[i], k) if from_logits
                       else grid_bce_loss(o, grid_labels[i], k, config.prob_clamp))
                terms.append(config.beta * bce)
            else:
                y = int(image_labels[i, k])
                terms.append(mil_loss_logits(o, y, k) if from_logits else mil_loss(o, y, k, config.prob_clamp))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


# ------------------------------------------------------------------- graphs


@dataclass
class EdgeSet:
    intra: list[float]
    inter: dict[tuple[int, int], float]
    provenance: EdgeMode = "hash"

    def __post_init__(self):
        weights = list(self.intra) + list(self.inter.values())
        if any(not 0.0 <= w <= 1.0 for w in weights):
            raise ValueError("edge weights must lie in [0, 1]")
        if any(u >= v for u, v in self.inter):
            raise ValueError("inter edges are keyed by unordered pairs (u, v) with u < v")


def intra_edge(h_l: int, h_r: int) -> float:
    return hamming(h_l, h_r) / HASH_BITS


def inter_edge(hu_l: int, hu_r: int, hv_l: int, hv_r: int) -> float:
    return (hamming(hu_l, hv_l) + hamming(hu_r, hv_r)) / (2 * HASH_BITS)


def hash_edges(hashes: Sequence[RegionHashes]) -> EdgeSet:
    # intra compares the mirrored left lung with the right lung
    intra = [intra_edge(h.left_flipped, h.right) for h in hashes]
    inter = {
        (u, v): inter_edge(hashes[u].left, hashes[u].right, hashes[v].left, hashes[v].right)
        for u, v in combinations(range(len(hashes)), 2)
    }
    return EdgeSet(intra, inter, "hash")


def _cos(a: Tensor, b: Tensor) -> float:
    return min(max(dc.cosine_similarity(a.detach(), b.detach()).item(), 0.0), 1.0)


def cosine_edges(region_embeddings: Sequence[tuple[Tensor, Tensor]]) -> EdgeSet:
    """Edge weights from (detached) region embeddings, clamped to [0, 1]."""
    intra = [_cos(f_l, f_r) for f_l, f_r in region_embeddings]
    inter = {
        (u, v): 0.5 * (_cos(region_embeddings[u][0], region_embeddings[v][0])
                       + _cos(region_embeddings[u][1], region_embeddings[v][1]))
        for u, v in combinations(range(len(region_embeddings)), 2)
    }
    return EdgeSet(intra, inter, "cosine")


def intra_regularizer(weights: Sequence[float], region_embeddings: Sequence[tuple[Tensor, Tensor]]) -> Tensor:
    if len(weights) != len(region_embeddings):
        raise ValueError(f"{len(weights)} intra edges for {len(region_embeddings)} samples")
    total = Tensor(0.0)
    for e, (f_l, f_r) in zip(weights, region_embeddings):
        total = total - e * dc.euclidean_distance(f_l, f_r)
    return total


def inter_regularizer(weights: dict[tuple[int, int], float], embeddings: Sequence[Tensor]) -> Tensor:
    total = Tensor(0.0)
    for u, v in combinations(range(len(embeddings)), 2):
        if (u, v) not in weights:
            raise ValueError(f"inter edge ({u}, {v}) missing")
        total = total - weights[(u, v)] * dc.euclidean_distance(embeddings[u], embeddings[v])
    return total


# ---------------------------------------------------------------- objective


@dataclass
class LossBreakdown:
    L: Tensor
    D_intra: Tensor
    D_inter: Tensor
    Q: Tensor
    edges: EdgeSet | None = field(default=None, repr=False)

    def values(self) -> dict[str, float]:
        return {"L": self.L.item(), "D_intra": self.D_intra.item(),
                "D_inter": self.D_inter.item(), "Q": self.Q.item()}


def batch_grid_labels(batch: Batch, num_classes: int, grid: int = model.GRID) -> list[GridLabels]:
    return [
        rasterize_box_labels(s.boxes, num_classes, grid, s.image.shape[0], annotated=s.annotated)
        for s in batch.samples
    ]


def total_objective(
    batch: Batch,
    params: model.Params,
    config: ObjectiveConfig,
    edges: EdgeSet | None = None,
    upsample: bool = False,
) -> LossBreakdown:
    """Q = L + l1*D_intra + l2*D_inter (hash) or L + l3*D_inter + l4*D_intra (cosine).

    ``edges`` overrides the per-batch edge computation; it is how a caller
    freezes cosine weights across repeated evaluations.
    """
    if len(batch) < 2:
        raise ValueError("the objective needs at least two images per batch")
    num_classes = model.num_classes_of(params)
    images = np.stack([s.image for s in batch.samples])
    out = model.forward(params, images, upsample=upsample)
    grid = out.probs.shape[-1]
    L = supervision_loss(
        out.logits,
        np.stack([s.labels for s in batch.samples]),
        batch_grid_labels(batch, num_classes, grid),
        config,
    )

    region, whole = [], []
    for i, s in enumerate(batch.samples):
        feats = out.features[i]
        region.append(model.region_embeddings(feats, s.left_mask, s.right_mask))
        whole.append(model.whole_embedding(feats, s.left_mask, s.right_mask))

    if edges is None:
        edges = hash_edges(batch.hashes) if config.edge_mode == "hash" else cosine_edges(region)
    d_intra = intra_regularizer(edges.intra, region)
    d_inter = inter_regularizer(edges.inter, whole)
    if config.edge_mode == "hash":
        Q = L + config.lambda1 * d_intra + config.lambda2 * d_inter
    else:
        Q = L + config.lambda3 * d_inter + config.lambda4 * d_intra
    return LossBreakdown(L, d_intra, d_inter, Q, edges)

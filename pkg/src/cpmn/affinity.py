"""Inter-feature alignment via pairwise-similarity affinity graphs.

A feature map (C, D, H, W) is tiled into non-overlapping b x b x b blocks
(granularity beta = b^3); each block is average-pooled into one node vector.
Every node connects to its ``alpha`` nearest neighbours in node-grid space
(ties broken by ascending node index), and each connection carries the cosine
similarity of the two node vectors. The alignment loss is the normalized sum
of squared similarity differences between two graphs built with identical
(alpha, beta); gradients flow only into the second graph's source features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

_ZERO_NORM = 1e-12


@dataclass(frozen=True)
class AffinityGraph:
    """Node features, per-node connection lists, and per-connection similarities."""

    node_features: torch.Tensor  # (N, C)
    connections: torch.Tensor  # (N, alpha), int64 node indices
    similarities: torch.Tensor  # (N, alpha), cosine values in [-1, 1]
    alpha: int
    beta: int
    node_grid: tuple[int, int, int]

    @property
    def num_nodes(self) -> int:
        return int(self.node_features.shape[0])


def _cube_root(beta: int) -> int:
    b = round(beta ** (1 / 3))
    if b**3 != beta or b < 1:
        raise ValueError(f"granularity must be a perfect cube, got {beta}")
    return b


def _neighbour_table(node_grid: tuple[int, int, int], alpha: int) -> torch.Tensor:
    """alpha nearest node indices per node by Euclidean node-grid distance."""
    coords = np.stack(
        np.meshgrid(*[np.arange(g) for g in node_grid], indexing="ij"), axis=-1
    ).reshape(-1, 3)
    n = coords.shape[0]
    diff = coords[:, None, :] - coords[None, :, :]
    dist2 = (diff**2).sum(axis=-1)
    np.fill_diagonal(dist2, np.iinfo(np.int64).max)  # exclude self
    index = np.broadcast_to(np.arange(n), (n, n))
    order = np.lexsort((index, dist2), axis=-1)  # distance first, index breaks ties
    return torch.from_numpy(np.ascontiguousarray(order[:, :alpha]).astype(np.int64))


def build_graph(feature: torch.Tensor, alpha: int, beta: int) -> AffinityGraph:
    """Build the affinity graph for one feature map of shape (C, D, H, W)."""
    if feature.ndim != 4:
        raise ValueError(f"feature must be (C, D, H, W), got shape {tuple(feature.shape)}")
    b = _cube_root(beta)
    spatial = tuple(feature.shape[1:])
    if any(s % b != 0 for s in spatial):
        raise ValueError(f"block edge {b} must divide spatial extents {spatial}")
    node_grid = tuple(s // b for s in spatial)
    n = node_grid[0] * node_grid[1] * node_grid[2]
    if not 1 <= alpha <= n - 1:
        raise ValueError(f"connection range alpha={alpha} must lie in [1, {n - 1}] for {n} nodes")

    pooled = F.avg_pool3d(feature.unsqueeze(0), kernel_size=b, stride=b).squeeze(0)
    node_features = pooled.reshape(pooled.shape[0], -1).transpose(0, 1)  # (N, C) raster order

    norms = node_features.norm(dim=1, keepdim=True)
    unit = node_features / norms.clamp_min(_ZERO_NORM)
    unit = torch.where(norms >= _ZERO_NORM, unit, torch.zeros_like(unit))
    sim_full = unit @ unit.transpose(0, 1)

    connections = _neighbour_table(node_grid, alpha).to(feature.device)
    similarities = torch.gather(sim_full, 1, connections)
    return AffinityGraph(
        node_features=node_features,
        connections=connections,
        similarities=similarities,
        alpha=alpha,
        beta=beta,
        node_grid=node_grid,
    )


def alignment_loss(
    g1: AffinityGraph, g2: AffinityGraph, normalization: str = "mean"
) -> torch.Tensor:
    """Normalized squared difference of connected-pair similarities.

    ``normalization="mean"`` divides by N * alpha (one per residual);
    ``"spatial"`` divides by spatial_size * alpha (= N * beta * alpha), the
    literal form where granularity is not folded into the node count. The
    first graph is treated as a constant: gradients reach only ``g2``.
    """
    if (g1.alpha, g1.beta, g1.node_grid) != (g2.alpha, g2.beta, g2.node_grid):
        raise ValueError(
            "parameter mismatch: graphs were built with different (alpha, beta) or extents: "
            f"({g1.alpha}, {g1.beta}, {g1.node_grid}) vs ({g2.alpha}, {g2.beta}, {g2.node_grid})"
        )
    if normalization == "mean":
        z = g1.num_nodes * g1.alpha
    elif normalization == "spatial":
        z = g1.num_nodes * g1.beta * g1.alpha
    else:
        raise ValueError(f"unknown normalization {normalization!r}")
    residual = g1.similarities.detach() - g2.similarities
    return (residual**2).sum() / z

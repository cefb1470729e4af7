"""Gaussian graph construction: exact kNN, farthest-point sampling, pooling plans."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class GaussianGraph:
    """Zero-mean node coordinates, node features, fixed-degree neighbor table."""

    coords: np.ndarray     # (n, 3), mean 0
    feats: np.ndarray      # (n, c)
    neighbors: np.ndarray  # (n, j) indices, self excluded


def knn_indices(coords: np.ndarray, k: int, chunk: int = 256) -> np.ndarray:
    """Exact k nearest neighbors by Euclidean distance, self excluded.

    Distance ties resolve toward the smaller node index (stable sort), which
    makes the table well defined on clouds with duplicated points.
    """
    pts = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    if k < 1 or k >= n:
        raise ValueError(f"need 1 <= k < n, got k={k}, n={n}")
    out = np.empty((n, k), dtype=np.int64)
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        diff = pts[start:stop, None, :] - pts[None, :, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        d2[np.arange(stop - start), np.arange(start, stop)] = -1.0  # self sorts first
        order = np.argsort(d2, axis=1, kind="stable")
        out[start:stop] = order[:, 1:k + 1]
    return out


def farthest_point_sample(coords: np.ndarray, n_keep: int) -> np.ndarray:
    """Greedy farthest-point selection seeded at the node nearest the centroid.

    Returns indices in selection order; ties fall to the smaller index.
    """
    pts = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    if not 1 <= n_keep <= n:
        raise ValueError(f"need 1 <= n_keep <= n, got n_keep={n_keep}, n={n}")
    centroid = pts.mean(axis=0)
    d2c = np.einsum("ij,ij->i", pts - centroid, pts - centroid)
    seed = int(np.argmin(d2c))
    selected = np.empty(n_keep, dtype=np.int64)
    selected[0] = seed
    diff = pts - pts[seed]
    dist = np.einsum("ij,ij->i", diff, diff)
    for i in range(1, n_keep):
        nxt = int(np.argmax(dist))
        selected[i] = nxt
        diff = pts - pts[nxt]
        dist = np.minimum(dist, np.einsum("ij,ij->i", diff, diff))
    return selected


def build_graph(vs, n_neighbors: int) -> GaussianGraph:
    """Graph over a voxelized scene: zero-mean coords, 56 non-position features."""
    n = len(vs)
    if n <= n_neighbors:
        raise ValueError(f"graph needs more nodes ({n}) than neighbors ({n_neighbors})")
    coords = vs.coords - vs.coords.mean(axis=0)
    feats = vs.encoded[:, 3:].copy()
    return GaussianGraph(coords=coords, feats=feats,
                         neighbors=knn_indices(coords, n_neighbors))


def pool_plan(coords: np.ndarray, pool_ratio: float, n_neighbors: int) -> tuple:
    """Survivor indices plus the rebuilt graph structure after one pooling step."""
    if not 0.0 < pool_ratio <= 1.0:
        raise ValueError(f"pool_ratio must lie in (0, 1], got {pool_ratio}")
    n = len(coords)
    n_keep = int(np.ceil(pool_ratio * n))
    if n_keep < n_neighbors + 1:
        raise ValueError(
            f"pooling to {n_keep} nodes cannot support {n_neighbors} neighbors")
    if n_keep == n:
        keep = np.arange(n, dtype=np.int64)
    else:
        keep = farthest_point_sample(coords, n_keep)
    new_coords = coords[keep]
    return keep, new_coords, knn_indices(new_coords, n_neighbors)

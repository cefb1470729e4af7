"""Central finite-difference verification of the analytic gradients.

Each named stage builds a small randomized instance, runs the analytic
backward pass, and compares every parameter and input tensor against a
central-difference estimate of the same scalar loss (a fixed random
projection of the stage output). Discrete structure (neighbor tables,
pooling survivors) is part of the instance and stays frozen.
"""

from __future__ import annotations

import numpy as np

from . import layers as L
from .graph import farthest_point_sample, knn_indices
from .network import NetConfig, backward_from_plan, build_plan, forward_from_plan, init_params

STAGES = ("gconv", "pool", "pos_ffn", "attention", "netvlad", "mlp", "full")


def fd_gradient(fn, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function, element by element."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn(x)
        flat[i] = orig - eps
        lo = fn(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray,
                       floor: float = 1e-6) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(floor, np.abs(a) + np.abs(n))
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def _compare(tensors: dict, analytic: dict, loss_fn, eps: float) -> float:
    """FD-check each named tensor in place; returns the worst relative error."""
    worst = 0.0
    for name, tensor in tensors.items():
        numeric = fd_gradient(lambda _t, nm=name: loss_fn(), tensor, eps=eps)
        worst = max(worst, max_relative_error(analytic[name], numeric))
    return worst


def check_gradients(stage: str, seed: int, eps: float = 1e-5) -> float:
    """Max relative error between analytic and FD gradients for one stage."""
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}; choose from {STAGES}")
    rng = np.random.default_rng(seed)

    if stage == "gconv":
        n, j, c_in, c_out, s = 16, 4, 5, 4, 1
        coords = rng.normal(size=(n, 3)) * 2.0
        feats = rng.normal(size=(n, c_in))
        neighbors = knn_indices(coords, j)
        w_center = rng.normal(size=(c_in, c_out)) * 0.5
        w_support = rng.normal(size=(s, c_in, c_out)) * 0.5
        dirs = rng.normal(size=(s, 3))
        upstream = rng.normal(size=(n, c_out))
        tensors = {"feats": feats, "coords": coords, "w_center": w_center,
                   "w_support": w_support, "support_dirs": dirs}

        def loss_fn():
            out, _ = L.gconv_forward(coords, feats, neighbors, w_center, w_support, dirs)
            return float(np.sum(out * upstream))

        out, cache = L.gconv_forward(coords, feats, neighbors, w_center, w_support, dirs)
        dfeats, dcoords, dwc, dws, ddirs = L.gconv_backward(upstream, cache)
        analytic = {"feats": dfeats, "coords": dcoords, "w_center": dwc,
                    "w_support": dws, "support_dirs": ddirs}
        return _compare(tensors, analytic, loss_fn, eps)

    if stage == "pool":
        n, j, c = 16, 4, 5
        coords = rng.normal(size=(n, 3)) * 2.0
        feats = rng.normal(size=(n, c))
        neighbors = knn_indices(coords, j)
        keep = farthest_point_sample(coords, 8)
        upstream = rng.normal(size=(8, c))

        def loss_fn():
            out, _ = L.graph_maxpool_forward(feats, neighbors, keep)
            return float(np.sum(out * upstream))

        _, cache = L.graph_maxpool_forward(feats, neighbors, keep)
        analytic = {"feats": L.graph_maxpool_backward(upstream, cache)}
        return _compare({"feats": feats}, analytic, loss_fn, eps)

    if stage == "pos_ffn":
        n, d = 8, 6
        coords = rng.normal(size=(n, 3))
        w1 = rng.normal(size=(3, d)) * 0.5
        b1 = rng.normal(size=d) * 0.1
        w2 = rng.normal(size=(d, d)) * 0.5
        b2 = rng.normal(size=d) * 0.1
        upstream = rng.normal(size=(n, d))
        tensors = {"coords": coords, "w1": w1, "b1": b1, "w2": w2, "b2": b2}

        def loss_fn():
            out, _ = L.pos_ffn_forward(coords, w1, b1, w2, b2)
            return float(np.sum(out * upstream))

        _, cache = L.pos_ffn_forward(coords, w1, b1, w2, b2)
        dc, dw1, db1, dw2, db2 = L.pos_ffn_backward(upstream, cache)
        analytic = {"coords": dc, "w1": dw1, "b1": db1, "w2": dw2, "b2": db2}
        return _compare(tensors, analytic, loss_fn, eps)

    if stage == "attention":
        n, d, d_ffn, heads = 6, 8, 12, 2
        x = rng.normal(size=(n, d))
        p = {"wq": rng.normal(size=(d, d)) * 0.5, "bq": rng.normal(size=d) * 0.1,
             "wk": rng.normal(size=(d, d)) * 0.5, "bk": rng.normal(size=d) * 0.1,
             "wv": rng.normal(size=(d, d)) * 0.5, "bv": rng.normal(size=d) * 0.1,
             "wo": rng.normal(size=(d, d)) * 0.5, "bo": rng.normal(size=d) * 0.1,
             "ln1_g": rng.uniform(0.5, 1.5, size=d), "ln1_b": rng.normal(size=d) * 0.1,
             "ffn_w1": rng.normal(size=(d, d_ffn)) * 0.5, "ffn_b1": rng.normal(size=d_ffn) * 0.1,
             "ffn_w2": rng.normal(size=(d_ffn, d)) * 0.5, "ffn_b2": rng.normal(size=d) * 0.1,
             "ln2_g": rng.uniform(0.5, 1.5, size=d), "ln2_b": rng.normal(size=d) * 0.1}
        upstream = rng.normal(size=(n, d))

        def loss_fn():
            out, _ = L.attention_block_forward(x, p, heads)
            return float(np.sum(out * upstream))

        _, cache = L.attention_block_forward(x, p, heads)
        dx, grads = L.attention_block_backward(upstream, cache)
        analytic = dict(grads)
        analytic["x"] = dx
        tensors = dict(p)
        tensors["x"] = x
        return _compare(tensors, analytic, loss_fn, eps)

    if stage == "netvlad":
        n, d, k = 7, 6, 3
        x = rng.normal(size=(n, d))
        centers = rng.normal(size=(k, d)) * 0.5
        w_assign = rng.normal(size=(d, k)) * 0.5
        b_assign = rng.normal(size=k) * 0.1
        upstream = rng.normal(size=k * d)
        tensors = {"x": x, "centers": centers, "w_assign": w_assign, "b_assign": b_assign}

        def loss_fn():
            out, _ = L.netvlad_forward(x, centers, w_assign, b_assign)
            return float(out @ upstream)

        _, cache = L.netvlad_forward(x, centers, w_assign, b_assign)
        dx, dcenters, dw, db = L.netvlad_backward(upstream, cache)
        analytic = {"x": dx, "centers": dcenters, "w_assign": dw, "b_assign": db}
        return _compare(tensors, analytic, loss_fn, eps)

    if stage == "mlp":
        d_in, d_out = 10, 4
        v = rng.normal(size=d_in)
        w = rng.normal(size=(d_in, d_out)) * 0.5
        b = rng.normal(size=d_out) * 0.1
        upstream = rng.normal(size=d_out)
        tensors = {"v": v, "w": w, "b": b}

        def loss_fn():
            y, _ = L.linear_forward(v[None, :], w, b)
            vec, _ = L.l2norm_forward(y[0])
            return float(vec @ upstream)

        y, c_lin = L.linear_forward(v[None, :], w, b)
        vec, c_norm = L.l2norm_forward(y[0])
        dy = L.l2norm_backward(upstream, c_norm)
        dv, dw, db = L.linear_backward(dy[None, :], c_lin)
        analytic = {"v": dv[0], "w": dw, "b": db}
        return _compare(tensors, analytic, loss_fn, eps)

    # stage == "full": every parameter tensor plus the input features
    cfg = NetConfig(in_dim=56, channels=(4, 5, 6), n_neighbors=4, n_support=1,
                    pool_ratio=0.5, n_fusion_convs=2, d_model=8, d_ffn=12,
                    n_head=2, n_clusters=3, out_dim=6)
    n = 32
    coords = rng.normal(size=(n, 3)) * 5.0
    feats = rng.normal(size=(n, cfg.in_dim)) * 0.5
    plan = build_plan(coords, cfg)
    params = init_params(cfg, seed=seed + 1)
    upstream = rng.normal(size=cfg.out_dim)

    def loss_fn():
        vec, _ = forward_from_plan(plan, feats, params, cfg)
        return float(vec @ upstream)

    vec, cache = forward_from_plan(plan, feats, params, cfg)
    grads, dfeats, _ = backward_from_plan(upstream, cache, plan, cfg)
    analytic = dict(grads)
    analytic["feats"] = dfeats
    tensors = dict(params)
    tensors["feats"] = feats
    return _compare(tensors, analytic, loss_fn, eps)

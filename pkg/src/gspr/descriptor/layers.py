"""Network layers as explicit forward/backward pairs.

Every forward returns (output, cache); the matching backward consumes the
upstream gradient plus the cache and returns gradients for each input and
parameter. Discrete choices (neighbor tables, argmax winners) are frozen in
the cache, so backward routes subgradients exactly where forward looked.
"""

from __future__ import annotations

import numpy as np

LAYERNORM_EPS = 1e-6
_GCONV_CHUNK = 2048


# ---------------------------------------------------------------------------
# Dense primitives
# ---------------------------------------------------------------------------

def linear_forward(x, w, b):
    return x @ w + b, (x, w)


def linear_backward(grad, cache):
    x, w = cache
    return grad @ w.T, x.T @ grad, grad.sum(axis=0)


def relu_forward(x):
    return np.maximum(x, 0.0), (x > 0.0)


def relu_backward(grad, cache):
    return grad * cache


def layernorm_forward(x, gamma, beta, eps: float = LAYERNORM_EPS):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv_std
    return xhat * gamma + beta, (xhat, inv_std, gamma)


def layernorm_backward(grad, cache):
    xhat, inv_std, gamma = cache
    dgamma = (grad * xhat).sum(axis=0)
    dbeta = grad.sum(axis=0)
    dxhat = grad * gamma
    dx = inv_std * (dxhat
                    - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgamma, dbeta


def softmax_rows(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(grad, softmax_out):
    return softmax_out * (grad - (grad * softmax_out).sum(axis=-1, keepdims=True))


def l2norm_forward(v):
    norm = float(np.linalg.norm(v))
    if norm < 1e-12:
        raise FloatingPointError("cannot normalize a near-zero vector")
    y = v / norm
    return y, (y, norm)


def l2norm_backward(grad, cache):
    y, norm = cache
    return (grad - y * float(y @ grad)) / norm


# ---------------------------------------------------------------------------
# Graph convolution (center weights + direction-gated support weights)
# ---------------------------------------------------------------------------

def gconv_forward(coords, feats, neighbors, w_center, w_support, support_dirs):
    """out[n, c] = <f_n, w_center[:, c]>
                 + sum_s max_j <f_j, w_support[s, :, c]> * cos(d_jn, k_s).

    Zero displacements contribute a hard 0 to the max candidates. The cosine
    normalizes by both the displacement and the support-vector norm, so the
    gradient of an off-unit support vector is still exact.
    """
    n, j = neighbors.shape
    s_count = len(support_dirs)
    out = feats @ w_center

    diff = coords[neighbors] - coords[:, None, :]            # (n, j, 3)
    dnorm = np.linalg.norm(diff, axis=2)                     # (n, j)
    nonzero = dnorm > 0.0

    cos_all = np.zeros((s_count, n, j))
    proj_all = np.empty((s_count, n, w_center.shape[1]))
    arg_all = np.empty((s_count, n, w_center.shape[1]), dtype=np.int64)
    for s in range(s_count):
        k = support_dirs[s]
        knorm = float(np.linalg.norm(k))
        cos = np.zeros((n, j))
        np.divide(diff @ k, dnorm * knorm, out=cos, where=nonzero)
        proj = feats @ w_support[s]                          # (n, c_out)
        for start in range(0, n, _GCONV_CHUNK):
            stop = min(start + _GCONV_CHUNK, n)
            vals = proj[neighbors[start:stop]] * cos[start:stop, :, None]
            arg = vals.argmax(axis=1)
            arg_all[s, start:stop] = arg
            out[start:stop] += np.take_along_axis(vals, arg[:, None, :], axis=1)[:, 0, :]
        cos_all[s] = cos
        proj_all[s] = proj
    cache = (coords, feats, neighbors, w_center, w_support, support_dirs,
             diff, dnorm, nonzero, cos_all, proj_all, arg_all)
    return out, cache


def gconv_backward(grad, cache):
    """Gradients for feats, coords and all kernel tensors.

    The max over neighbors routes its gradient to the cached winner of each
    (node, support, channel) triple.
    """
    (coords, feats, neighbors, w_center, w_support, support_dirs,
     diff, dnorm, nonzero, cos_all, proj_all, arg_all) = cache
    n, j = neighbors.shape
    s_count = len(support_dirs)
    rows = np.arange(n)[:, None]

    dfeats = grad @ w_center.T
    dw_center = feats.T @ grad
    dw_support = np.zeros_like(w_support)
    dsupport = np.zeros_like(support_dirs)
    dcoords = np.zeros_like(coords)

    for s in range(s_count):
        arg = arg_all[s]                                     # (n, c_out)
        win_nodes = neighbors[rows, arg]                     # (n, c_out)
        win_cos = cos_all[s][rows, arg]

        # dL/dproj routed through the winners
        a = np.zeros_like(proj_all[s])
        np.add.at(a, (win_nodes, np.broadcast_to(np.arange(grad.shape[1]), arg.shape)),
                  grad * win_cos)
        dfeats += a @ w_support[s].T
        dw_support[s] = feats.T @ a

        # dL/dcos at each (node, neighbor-slot)
        win_proj = proj_all[s][win_nodes, np.arange(grad.shape[1])[None, :]]
        dcos = np.zeros((n, j))
        np.add.at(dcos, (rows, arg), grad * win_proj)

        k = support_dirs[s]
        knorm = float(np.linalg.norm(k))
        v = k / knorm
        active = nonzero & (dcos != 0.0)
        if active.any():
            nn, jj = np.nonzero(active)
            d = diff[nn, jj]
            dn = dnorm[nn, jj][:, None]
            u = d / dn
            c = cos_all[s][nn, jj][:, None]
            coeff = dcos[nn, jj][:, None]
            ddiff = coeff * (v[None, :] - u * c) / dn
            dsupport[s] += (coeff * (u - v[None, :] * c) / knorm).sum(axis=0)
            np.add.at(dcoords, neighbors[nn, jj], ddiff)
            np.subtract.at(dcoords, nn, ddiff)
    return dfeats, dcoords, dw_center, dw_support, dsupport


# ---------------------------------------------------------------------------
# Graph max pooling
# ---------------------------------------------------------------------------

def graph_maxpool_forward(feats, neighbors, keep_idx):
    """Element-wise max over each survivor and its current neighbors."""
    cand = np.column_stack([keep_idx, neighbors[keep_idx]])   # (m, j + 1)
    vals = feats[cand]                                        # (m, j + 1, c)
    arg = vals.argmax(axis=1)
    out = np.take_along_axis(vals, arg[:, None, :], axis=1)[:, 0, :]
    return out, (feats.shape, cand, arg)


def graph_maxpool_backward(grad, cache):
    shape, cand, arg = cache
    dfeats = np.zeros(shape)
    winners = cand[np.arange(len(cand))[:, None], arg]        # (m, c)
    np.add.at(dfeats, (winners, np.broadcast_to(np.arange(shape[1]), winners.shape)), grad)
    return dfeats


# ---------------------------------------------------------------------------
# Positional feed-forward embedding
# ---------------------------------------------------------------------------

def pos_ffn_forward(coords, w1, b1, w2, b2):
    h, c_lin1 = linear_forward(coords, w1, b1)
    a, c_relu = relu_forward(h)
    out, c_lin2 = linear_forward(a, w2, b2)
    return out, (c_lin1, c_relu, c_lin2)


def pos_ffn_backward(grad, cache):
    c_lin1, c_relu, c_lin2 = cache
    da, dw2, db2 = linear_backward(grad, c_lin2)
    dh = relu_backward(da, c_relu)
    dcoords, dw1, db1 = linear_backward(dh, c_lin1)
    return dcoords, dw1, db1, dw2, db2


# ---------------------------------------------------------------------------
# Multi-head self-attention block (post-norm transformer encoder)
# ---------------------------------------------------------------------------

def _split_heads(x, n_head):
    n, d = x.shape
    return x.reshape(n, n_head, d // n_head).transpose(1, 0, 2)


def _merge_heads(x):
    h, n, dk = x.shape
    return x.transpose(1, 0, 2).reshape(n, h * dk)


def mha_forward(x, p, n_head):
    """Scaled dot-product self-attention with per-head softmax rows."""
    q, cq = linear_forward(x, p["wq"], p["bq"])
    k, ck = linear_forward(x, p["wk"], p["bk"])
    v, cv = linear_forward(x, p["wv"], p["bv"])
    qh, kh, vh = (_split_heads(t, n_head) for t in (q, k, v))
    scale = 1.0 / np.sqrt(qh.shape[2])
    scores = qh @ kh.transpose(0, 2, 1) * scale
    attn = softmax_rows(scores)
    ctx = _merge_heads(attn @ vh)
    out, co = linear_forward(ctx, p["wo"], p["bo"])
    return out, (cq, ck, cv, co, qh, kh, vh, attn, scale, n_head)


def mha_backward(grad, cache):
    cq, ck, cv, co, qh, kh, vh, attn, scale, n_head = cache
    dctx, dwo, dbo = linear_backward(grad, co)
    dctx_h = _split_heads(dctx, n_head)
    dattn = dctx_h @ vh.transpose(0, 2, 1)
    dvh = attn.transpose(0, 2, 1) @ dctx_h
    dscores = softmax_backward(dattn, attn)
    dqh = dscores @ kh * scale
    dkh = dscores.transpose(0, 2, 1) @ qh * scale
    dx_q, dwq, dbq = linear_backward(_merge_heads(dqh), cq)
    dx_k, dwk, dbk = linear_backward(_merge_heads(dkh), ck)
    dx_v, dwv, dbv = linear_backward(_merge_heads(dvh), cv)
    grads = {"wq": dwq, "bq": dbq, "wk": dwk, "bk": dbk,
             "wv": dwv, "bv": dbv, "wo": dwo, "bo": dbo}
    return dx_q + dx_k + dx_v, grads


def attention_block_forward(x, p, n_head):
    """Attention + residual + layer norm + feed-forward + residual + layer norm."""
    a, c_mha = mha_forward(x, p, n_head)
    y, c_ln1 = layernorm_forward(x + a, p["ln1_g"], p["ln1_b"])
    h, c_f1 = linear_forward(y, p["ffn_w1"], p["ffn_b1"])
    r, c_relu = relu_forward(h)
    f, c_f2 = linear_forward(r, p["ffn_w2"], p["ffn_b2"])
    z, c_ln2 = layernorm_forward(y + f, p["ln2_g"], p["ln2_b"])
    return z, (c_mha, c_ln1, c_f1, c_relu, c_f2, c_ln2)


def attention_block_backward(grad, cache):
    c_mha, c_ln1, c_f1, c_relu, c_f2, c_ln2 = cache
    dy_f, dln2_g, dln2_b = layernorm_backward(grad, c_ln2)
    dr, dffn_w2, dffn_b2 = linear_backward(dy_f, c_f2)
    dh = relu_backward(dr, c_relu)
    dy_ffn, dffn_w1, dffn_b1 = linear_backward(dh, c_f1)
    dy = dy_f + dy_ffn
    dxa, dln1_g, dln1_b = layernorm_backward(dy, c_ln1)
    dx_attn, mha_grads = mha_backward(dxa, c_mha)
    grads = dict(mha_grads)
    grads.update({"ln1_g": dln1_g, "ln1_b": dln1_b,
                  "ffn_w1": dffn_w1, "ffn_b1": dffn_b1,
                  "ffn_w2": dffn_w2, "ffn_b2": dffn_b2,
                  "ln2_g": dln2_g, "ln2_b": dln2_b})
    return dxa + dx_attn, grads


# ---------------------------------------------------------------------------
# NetVLAD aggregation
# ---------------------------------------------------------------------------

def netvlad_forward(x, centers, w_assign, b_assign):
    """Soft-assigned residual aggregation to a normalized flat vector.

    Residuals to every cluster center are weighted by the softmax of a
    linear assignment, normalized per cluster, flattened and normalized
    again. Row order of x cannot affect the result.
    """
    logits = x @ w_assign + b_assign                     # (n, k)
    assign = softmax_rows(logits)
    mass = assign.sum(axis=0)                            # (k,)
    vlad = assign.T @ x - centers * mass[:, None]        # (k, d)
    norms = np.linalg.norm(vlad, axis=1)
    safe = np.maximum(norms, 1e-12)
    intra = vlad / safe[:, None]
    flat = intra.reshape(-1)
    out, c_norm = l2norm_forward(flat)
    return out, (x, centers, w_assign, assign, vlad, safe, intra, c_norm)


def netvlad_backward(grad, cache):
    x, centers, w_assign, assign, vlad, safe, intra, c_norm = cache
    dflat = l2norm_backward(grad, c_norm)
    dintra = dflat.reshape(intra.shape)
    dvlad = (dintra - intra * (dintra * intra).sum(axis=1, keepdims=True)) / safe[:, None]

    dx = assign @ dvlad
    dcenters = -assign.sum(axis=0)[:, None] * dvlad
    dassign = x @ dvlad.T - (dvlad * centers).sum(axis=1)[None, :]
    dlogits = softmax_backward(dassign, assign)
    dx += dlogits @ w_assign.T
    dw_assign = x.T @ dlogits
    db_assign = dlogits.sum(axis=0)
    return dx, dcenters, dw_assign, db_assign

"""Descriptor network assembly: config, parameters, forward/backward, checkpoints.

The pipeline is: graph over the voxelized scene -> three (graph conv, max
pool, ReLU) blocks -> linear lift to the attention width -> positional
embedding add + two fusion graph convs -> one post-norm attention block ->
soft-assignment VLAD -> linear head -> unit normalization.

Graph structure (neighbor tables, pooling survivors) depends only on the
voxel coordinates, so it is computed once per scene as a GraphPlan and
reused across forward passes while parameters change.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from ..scene_io import ATTR_SLICES, RigidTransform
from ..voxelizer import VoxelizedScene
from . import layers as L
from .graph import knn_indices, pool_plan

CHECKPOINT_MAGIC = b"GSCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetConfig:
    """Network hyperparameters; defaults follow the published configuration."""

    in_dim: int = 56
    channels: tuple = (64, 128, 256)
    n_neighbors: int = 25   # receptive-field size J
    n_support: int = 1      # kernel support vectors S
    pool_ratio: float = 0.25
    n_fusion_convs: int = 2
    d_model: int = 512      # also the positional embedding width
    d_ffn: int = 1024
    n_head: int = 8
    n_clusters: int = 64
    out_dim: int = 256

    def __post_init__(self):
        if self.d_model % self.n_head != 0:
            raise ValueError("d_model must be divisible by n_head")
        if not 0.0 < self.pool_ratio <= 1.0:
            raise ValueError("pool_ratio must lie in (0, 1]")
        if min(self.in_dim, self.n_neighbors, self.n_clusters, self.out_dim) < 1:
            raise ValueError("dimensions must be positive")


@dataclass
class Descriptor:
    """Unit-norm place descriptor plus identity metadata for evaluation."""

    vector: np.ndarray
    place_id: int = -1
    pose: RigidTransform = field(default_factory=RigidTransform.identity)


@dataclass(frozen=True)
class FeatureMask:
    """Input-feature ablation switches; a disabled group is zeroed in place."""

    use_position: bool = True
    use_scale: bool = True
    use_rotation: bool = True
    use_sh: bool = True
    use_opacity: bool = True

    @property
    def all_on(self) -> bool:
        return all((self.use_position, self.use_scale, self.use_rotation,
                    self.use_sh, self.use_opacity))


def apply_feature_mask(vs: VoxelizedScene, mask: FeatureMask) -> VoxelizedScene:
    """Zero the disabled attribute groups while keeping tensor shapes."""
    if mask.all_on:
        return vs
    encoded = vs.encoded.copy()
    for name, flag in (("position", mask.use_position), ("scale", mask.use_scale),
                       ("rotation", mask.use_rotation), ("sh", mask.use_sh),
                       ("opacity", mask.use_opacity)):
        if not flag:
            encoded[:, ATTR_SLICES[name]] = 0.0
    return VoxelizedScene(encoded=encoded, place_id=vs.place_id)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(cfg: NetConfig, seed: int) -> dict:
    """Fresh parameter tensors from a zero-mean uniform law scaled by 1/sqrt(fan_in)."""
    rng = np.random.default_rng(seed)
    p = {}

    c_in = cfg.in_dim
    for i, c_out in enumerate(cfg.channels):
        p[f"conv{i}.w_center"] = _uniform(rng, c_in, (c_in, c_out))
        p[f"conv{i}.w_support"] = _uniform(rng, c_in, (cfg.n_support, c_in, c_out))
        dirs = rng.normal(size=(cfg.n_support, 3))
        p[f"conv{i}.support_dirs"] = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
        c_in = c_out

    d = cfg.d_model
    p["lift.w"] = _uniform(rng, c_in, (c_in, d))
    p["lift.b"] = _uniform(rng, c_in, (d,))
    p["pos.w1"] = _uniform(rng, 3, (3, d))
    p["pos.b1"] = _uniform(rng, 3, (d,))
    p["pos.w2"] = _uniform(rng, d, (d, d))
    p["pos.b2"] = _uniform(rng, d, (d,))

    for i in range(cfg.n_fusion_convs):
        p[f"fuse{i}.w_center"] = _uniform(rng, d, (d, d))
        p[f"fuse{i}.w_support"] = _uniform(rng, d, (cfg.n_support, d, d))
        dirs = rng.normal(size=(cfg.n_support, 3))
        p[f"fuse{i}.support_dirs"] = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)

    for name in ("wq", "wk", "wv", "wo"):
        p[f"attn.{name}"] = _uniform(rng, d, (d, d))
    for name in ("bq", "bk", "bv", "bo"):
        p[f"attn.{name}"] = _uniform(rng, d, (d,))
    p["attn.ln1_g"] = np.ones(d)
    p["attn.ln1_b"] = np.zeros(d)
    p["attn.ffn_w1"] = _uniform(rng, d, (d, cfg.d_ffn))
    p["attn.ffn_b1"] = _uniform(rng, d, (cfg.d_ffn,))
    p["attn.ffn_w2"] = _uniform(rng, cfg.d_ffn, (cfg.d_ffn, d))
    p["attn.ffn_b2"] = _uniform(rng, cfg.d_ffn, (d,))
    p["attn.ln2_g"] = np.ones(d)
    p["attn.ln2_b"] = np.zeros(d)

    p["vlad.centers"] = _uniform(rng, d, (cfg.n_clusters, d))
    p["vlad.w_assign"] = _uniform(rng, d, (d, cfg.n_clusters))
    p["vlad.b_assign"] = _uniform(rng, d, (cfg.n_clusters,))

    vlad_dim = cfg.n_clusters * d
    p["head.w"] = _uniform(rng, vlad_dim, (vlad_dim, cfg.out_dim))
    p["head.b"] = _uniform(rng, vlad_dim, (cfg.out_dim,))
    return p


def support_dir_keys(params: dict) -> list:
    """Parameter names holding kernel support vectors (kept unit length)."""
    return [k for k in params if k.endswith(".support_dirs")]


# ---------------------------------------------------------------------------
# Graph plan (structure fixed per scene)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GraphPlan:
    """Per-scene discrete structure: coordinates, neighbors and pool survivors."""

    level_coords: tuple
    level_neighbors: tuple
    level_keep: tuple
    final_coords: np.ndarray
    final_neighbors: np.ndarray


def build_plan(coords: np.ndarray, cfg: NetConfig) -> GraphPlan:
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    coords = coords - coords.mean(axis=0)
    if len(coords) <= cfg.n_neighbors:
        raise ValueError(
            f"scene has {len(coords)} voxels but the graph needs more than "
            f"{cfg.n_neighbors}")
    neighbors = knn_indices(coords, cfg.n_neighbors)

    level_coords = []
    level_neighbors = []
    level_keep = []
    for _ in cfg.channels:
        level_coords.append(coords)
        level_neighbors.append(neighbors)
        keep, coords, neighbors = pool_plan(coords, cfg.pool_ratio, cfg.n_neighbors)
        level_keep.append(keep)
    return GraphPlan(tuple(level_coords), tuple(level_neighbors), tuple(level_keep),
                     final_coords=coords, final_neighbors=neighbors)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def _attn_params(params: dict) -> dict:
    return {k.split(".", 1)[1]: v for k, v in params.items() if k.startswith("attn.")}


def forward_from_plan(plan: GraphPlan, feats: np.ndarray, params: dict,
                      cfg: NetConfig) -> tuple:
    """Run the network on precomputed structure; returns (vector, cache)."""
    cache = {}
    h = feats
    for i in range(len(cfg.channels)):
        h, cache[f"conv{i}"] = L.gconv_forward(
            plan.level_coords[i], h, plan.level_neighbors[i],
            params[f"conv{i}.w_center"], params[f"conv{i}.w_support"],
            params[f"conv{i}.support_dirs"])
        h, cache[f"pool{i}"] = L.graph_maxpool_forward(
            h, plan.level_neighbors[i], plan.level_keep[i])
        h, cache[f"relu{i}"] = L.relu_forward(h)

    x, cache["lift"] = L.linear_forward(h, params["lift.w"], params["lift.b"])
    pe, cache["pos"] = L.pos_ffn_forward(plan.final_coords, params["pos.w1"],
                                         params["pos.b1"], params["pos.w2"],
                                         params["pos.b2"])
    x = x + pe
    for i in range(cfg.n_fusion_convs):
        x, cache[f"fuse{i}"] = L.gconv_forward(
            plan.final_coords, x, plan.final_neighbors,
            params[f"fuse{i}.w_center"], params[f"fuse{i}.w_support"],
            params[f"fuse{i}.support_dirs"])
        x, cache[f"fuse_relu{i}"] = L.relu_forward(x)

    x, cache["attn"] = L.attention_block_forward(x, _attn_params(params), cfg.n_head)
    v, cache["vlad"] = L.netvlad_forward(x, params["vlad.centers"],
                                         params["vlad.w_assign"], params["vlad.b_assign"])
    y, cache["head"] = L.linear_forward(v[None, :], params["head.w"], params["head.b"])
    vec, cache["norm"] = L.l2norm_forward(y[0])
    return vec, cache


def backward_from_plan(dvec: np.ndarray, cache: dict, plan: GraphPlan,
                       cfg: NetConfig) -> tuple:
    """Gradients for all parameters plus the input features and coordinates."""
    grads = {}
    dy = L.l2norm_backward(dvec, cache["norm"])
    dv, grads["head.w"], grads["head.b"] = L.linear_backward(dy[None, :], cache["head"])
    dx, grads["vlad.centers"], grads["vlad.w_assign"], grads["vlad.b_assign"] = \
        L.netvlad_backward(dv[0], cache["vlad"])
    dx, attn_grads = L.attention_block_backward(dx, cache["attn"])
    for name, g in attn_grads.items():
        grads[f"attn.{name}"] = g

    dcoords_final = np.zeros_like(plan.final_coords)
    for i in reversed(range(cfg.n_fusion_convs)):
        dx = L.relu_backward(dx, cache[f"fuse_relu{i}"])
        dx, dc, grads[f"fuse{i}.w_center"], grads[f"fuse{i}.w_support"], \
            grads[f"fuse{i}.support_dirs"] = L.gconv_backward(dx, cache[f"fuse{i}"])
        dcoords_final += dc

    dpe_coords, grads["pos.w1"], grads["pos.b1"], grads["pos.w2"], grads["pos.b2"] = \
        L.pos_ffn_backward(dx, cache["pos"])
    dcoords_final += dpe_coords
    dh, grads["lift.w"], grads["lift.b"] = L.linear_backward(dx, cache["lift"])

    dcoords_level = dcoords_final
    for i in reversed(range(len(cfg.channels))):
        dh = L.relu_backward(dh, cache[f"relu{i}"])
        dh = L.graph_maxpool_backward(dh, cache[f"pool{i}"])
        dh, dc, grads[f"conv{i}.w_center"], grads[f"conv{i}.w_support"], \
            grads[f"conv{i}.support_dirs"] = L.gconv_backward(dh, cache[f"conv{i}"])
        full = np.zeros_like(plan.level_coords[i])
        full[plan.level_keep[i]] += dcoords_level
        full += dc
        dcoords_level = full

    dfeats = dh
    dcoords_input = dcoords_level - dcoords_level.mean(axis=0)
    return grads, dfeats, dcoords_input


def descriptor_forward(vs: VoxelizedScene, params: dict, cfg: NetConfig,
                       pose: RigidTransform | None = None) -> Descriptor:
    """Full pipeline from a voxelized scene to a unit-norm descriptor."""
    plan = build_plan(vs.coords, cfg)
    feats = vs.encoded[:, 3:]
    vec, _ = forward_from_plan(plan, feats, params, cfg)
    return Descriptor(vector=vec, place_id=vs.place_id,
                      pose=pose or RigidTransform.identity())


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def config_hash(cfg: NetConfig) -> bytes:
    payload = json.dumps(asdict(cfg), sort_keys=True).encode("utf-8")
    return hashlib.sha256(payload).digest()


def save_checkpoint(path, params: dict, cfg: NetConfig) -> None:
    """Flat binary: magic, version, config hash, then named float32 tensors."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(config_hash(cfg))
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            tensor = np.asarray(params[name], dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", tensor.ndim))
            fh.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
            fh.write(tensor.tobytes())


def load_checkpoint(path, cfg: NetConfig | None = None) -> dict:
    """Read a checkpoint back; verifies the config hash when cfg is given."""
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        stored_hash = fh.read(32)
        if cfg is not None and stored_hash != config_hash(cfg):
            raise ValueError(f"{path}: checkpoint was written for a different config")
        (count,) = struct.unpack("<I", fh.read(4))
        params = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            n_items = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(fh.read(4 * n_items), dtype="<f4")
            params[name] = data.astype(np.float64).reshape(shape)
    return params

"""Cylindrical voxel partitioning and mean encoding of Gaussian scenes.

An unordered scene becomes a fixed-size (n_target, 59) array: Gaussians are
binned into cylindrical cells, each non-empty cell collapses to the
attribute-wise mean of its occupants, and a seeded selection pads or
subsamples to the requested voxel budget.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from .scene_io import GAUSSIAN_DIM, GaussianScene, canonicalize_quaternions

BLOB_MAGIC = b"VXGS"
BLOB_VERSION = 1


@dataclass(frozen=True)
class CylGridConfig:
    """Cylindrical grid geometry and voxel budget."""

    max_range: float = 40.0
    n_rho: int = 40
    n_theta: int = 120
    n_z: int = 10
    z_min: float = -3.0
    z_max: float = 7.0
    max_occupancy: int = 16   # most Gaussians kept per voxel
    n_target: int = 8192      # voxel count after selection

    def __post_init__(self):
        if min(self.n_rho, self.n_theta, self.n_z) < 1:
            raise ValueError("bin counts must be >= 1")
        if self.max_range <= 0:
            raise ValueError("max_range must be positive")
        if self.z_max <= self.z_min:
            raise ValueError("z_max must exceed z_min")
        if self.max_occupancy < 1 or self.n_target < 1:
            raise ValueError("max_occupancy and n_target must be >= 1")

    def with_max_range(self, max_range: float) -> "CylGridConfig":
        return replace(self, max_range=max_range)


@dataclass
class VoxelizedScene:
    """Mean-encoded voxels ordered by linear cell index."""

    encoded: np.ndarray  # (n, 59)
    place_id: int = -1

    def __post_init__(self):
        self.encoded = np.asarray(self.encoded, dtype=np.float64).reshape(-1, GAUSSIAN_DIM)

    @property
    def coords(self) -> np.ndarray:
        """Cartesian voxel centroids (the mean-position columns)."""
        return self.encoded[:, :3]

    def __len__(self) -> int:
        return len(self.encoded)


@dataclass(frozen=True)
class VoxelPartition:
    """Occupancy map from linear voxel index to scene row indices."""

    matrix: np.ndarray          # (m, 59) source rows
    voxel_ids: np.ndarray       # (k,) sorted linear indices of non-empty voxels
    occupants: tuple            # k arrays of row indices, capped at max_occupancy
    n_dropped: int              # rows outside the grid
    place_id: int


def to_cylindrical(xyz) -> tuple:
    """(rho, theta, z) with theta wrapped into [0, 2*pi)."""
    x, y, z = np.asarray(xyz, dtype=np.float64).reshape(3)
    rho = float(np.hypot(x, y))
    theta = float(np.arctan2(y, x))
    if theta < 0.0:
        theta += 2.0 * np.pi
    if theta >= 2.0 * np.pi:
        theta = 0.0
    return rho, theta, float(z)


def voxel_indices(positions: np.ndarray, cfg: CylGridConfig) -> tuple:
    """Linear cell index per position plus the in-grid mask.

    Positions beyond max_range or outside [z_min, z_max] are masked out;
    boundary values stay inside (the top edge folds into the last bin).
    """
    pts = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    rho = np.hypot(pts[:, 0], pts[:, 1])
    theta = np.arctan2(pts[:, 1], pts[:, 0])
    theta = np.where(theta < 0.0, theta + 2.0 * np.pi, theta)
    z = pts[:, 2]

    keep = (rho <= cfg.max_range) & (z >= cfg.z_min) & (z <= cfg.z_max)

    i_rho = np.minimum((rho / (cfg.max_range / cfg.n_rho)).astype(np.int64), cfg.n_rho - 1)
    i_theta = np.minimum((theta / (2.0 * np.pi / cfg.n_theta)).astype(np.int64), cfg.n_theta - 1)
    i_z = np.minimum(((z - cfg.z_min) / ((cfg.z_max - cfg.z_min) / cfg.n_z)).astype(np.int64),
                     cfg.n_z - 1)
    linear = (i_rho * cfg.n_theta + i_theta) * cfg.n_z + i_z
    return np.where(keep, linear, -1), keep


def partition(scene: GaussianScene, cfg: CylGridConfig) -> VoxelPartition:
    """Assign each in-range Gaussian to exactly one cylindrical cell.

    Cells over capacity keep the max_occupancy occupants with the largest
    opacity, ties resolved toward the earlier scene row.
    """
    if len(scene) == 0:
        raise ValueError("cannot partition an empty scene")
    matrix = scene.as_matrix()
    linear, keep = voxel_indices(scene.positions, cfg)
    n_dropped = int(np.count_nonzero(~keep))

    kept_rows = np.nonzero(keep)[0]
    voxel_ids = []
    occupants = []
    if len(kept_rows):
        cells = linear[kept_rows]
        order = np.argsort(cells, kind="stable")
        sorted_rows = kept_rows[order]
        sorted_cells = cells[order]
        boundaries = np.nonzero(np.diff(sorted_cells))[0] + 1
        for chunk in np.split(sorted_rows, boundaries):
            rows = chunk
            if len(rows) > cfg.max_occupancy:
                by_opacity = np.lexsort((rows, -scene.opacities[rows]))
                rows = np.sort(rows[by_opacity[:cfg.max_occupancy]])
            voxel_ids.append(int(linear[rows[0]]))
            occupants.append(rows)
    return VoxelPartition(matrix=matrix, voxel_ids=np.asarray(voxel_ids, dtype=np.int64),
                          occupants=tuple(occupants), n_dropped=n_dropped,
                          place_id=scene.place_id)


def encode(part: VoxelPartition) -> VoxelizedScene:
    """Collapse every non-empty voxel to the attribute-wise occupant mean.

    Quaternions are sign-aligned to the first occupant before averaging and
    renormalized afterwards.
    """
    n = len(part.voxel_ids)
    encoded = np.zeros((n, GAUSSIAN_DIM))
    for row, occupant_rows in enumerate(part.occupants):
        block = part.matrix[occupant_rows]
        quats = block[:, 6:10]
        flip = quats @ quats[0] < 0
        quats = np.where(flip[:, None], -quats, quats)
        mean = block.mean(axis=0)
        mean[6:10] = quats.mean(axis=0)
        mean[6:10] = canonicalize_quaternions(mean[6:10][None, :])[0]
        encoded[row] = mean
    return VoxelizedScene(encoded=encoded, place_id=part.place_id)


def select_voxels(vs: VoxelizedScene, n_target: int, seed: int) -> VoxelizedScene:
    """Fix the voxel count: seeded subsample when over budget, seeded
    resample-with-replacement padding when under; row order is preserved."""
    n = len(vs)
    if n == 0:
        raise ValueError("cannot select from an empty voxel set")
    if n == n_target:
        return VoxelizedScene(vs.encoded.copy(), place_id=vs.place_id)
    rng = np.random.default_rng(seed)
    if n > n_target:
        chosen = np.sort(rng.choice(n, size=n_target, replace=False))
    else:
        pad = rng.integers(0, n, size=n_target - n)
        chosen = np.sort(np.concatenate([np.arange(n), pad]))
    return VoxelizedScene(vs.encoded[chosen], place_id=vs.place_id)


def voxelize_scene(scene: GaussianScene, cfg: CylGridConfig, seed: int) -> VoxelizedScene:
    """partition -> encode -> select, the standard pipeline entry."""
    vs = encode(partition(scene, cfg))
    if len(vs) == 0:
        raise ValueError("no Gaussians fell inside the voxel grid")
    return select_voxels(vs, cfg.n_target, seed)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def save_voxelized(vs: VoxelizedScene, path) -> None:
    """Flat blob: 16-byte header (magic, version, n, 59) + float32 rows."""
    header = BLOB_MAGIC + struct.pack("<III", BLOB_VERSION, len(vs), GAUSSIAN_DIM)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(vs.encoded.astype("<f4").tobytes())


def load_voxelized(path, place_id: int = -1) -> VoxelizedScene:
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) != 16 or header[:4] != BLOB_MAGIC:
            raise ValueError(f"{path}: not a voxel blob")
        version, n, dim = struct.unpack("<III", header[4:])
        if version != BLOB_VERSION:
            raise ValueError(f"{path}: unsupported blob version {version}")
        if dim != GAUSSIAN_DIM:
            raise ValueError(f"{path}: unexpected row width {dim}")
        data = np.frombuffer(fh.read(n * dim * 4), dtype="<f4").astype(np.float64)
    return VoxelizedScene(encoded=data.reshape(n, dim), place_id=place_id)

"""Multimodal scene preparation: LiDAR prior, coloring, dome, masks, losses.

Everything here is a pure function over immutable inputs. The output of
`assemble_sequence` (a colored point prior plus provenance) is what an
external Gaussian optimizer consumes; the loss functions supervise that
optimization as plain image-pair operations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .scene_io import (
    Box3D,
    CalibratedFrame,
    CameraModel,
    GaussianScene,
    RigidTransform,
    SOURCE_INIT,
)

PROV_LIDAR = 0
PROV_DOME = 1

# DC spherical-harmonic basis constant: color = 0.5 + C0 * dc.
SH_C0 = 0.28209479177387814


@dataclass(frozen=True)
class InitPrior:
    """Colored points seeding Gaussian optimization, with per-point origin."""

    points: np.ndarray      # (p, 3) meters, center ego frame
    colors: np.ndarray      # (p, 3) in [0, 1]
    provenance: np.ndarray  # (p,) uint8, PROV_LIDAR or PROV_DOME

    def __post_init__(self):
        object.__setattr__(self, "points", np.asarray(self.points, dtype=np.float64).reshape(-1, 3))
        object.__setattr__(self, "colors", np.asarray(self.colors, dtype=np.float64).reshape(-1, 3))
        object.__setattr__(self, "provenance", np.asarray(self.provenance, dtype=np.uint8).reshape(-1))
        if len(self.points) != len(self.colors) or len(self.points) != len(self.provenance):
            raise ValueError("points, colors and provenance lengths differ")
        if self.colors.size and (self.colors.min() < 0.0 or self.colors.max() > 1.0):
            raise ValueError("colors must lie in [0, 1]")


@dataclass(frozen=True)
class MaskBundle:
    """Static overlay mask and dynamic loss-detach mask for one image."""

    static_mask: np.ndarray
    dynamic_mask: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "static_mask", np.asarray(self.static_mask, dtype=bool))
        object.__setattr__(self, "dynamic_mask", np.asarray(self.dynamic_mask, dtype=bool))
        if self.static_mask.shape != self.dynamic_mask.shape:
            raise ValueError("mask dimensions differ")


# ---------------------------------------------------------------------------
# Projection geometry
# ---------------------------------------------------------------------------

def project_points(points: np.ndarray, camera: CameraModel) -> tuple:
    """Project LiDAR-frame points; returns continuous (u, v) and camera depth.

    Pixel (i, j) has its center at u = i, v = j. Points at non-positive
    depth get NaN coordinates.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cam = camera.extrinsics.apply(pts)
    depth = cam[:, 2]
    uvw = cam @ camera.intrinsics.T
    uv = np.full((len(pts), 2), np.nan)
    ok = depth > 0
    uv[ok] = uvw[ok, :2] / uvw[ok, 2:3]
    return uv, depth


def frustum_cull(points: np.ndarray, camera: CameraModel) -> np.ndarray:
    """Indices of points with positive depth projecting inside the image."""
    uv, depth = project_points(points, camera)
    ok = depth > 0
    inside = ok & (uv[:, 0] >= 0) & (uv[:, 0] < camera.width) \
        & (uv[:, 1] >= 0) & (uv[:, 1] < camera.height)
    return np.nonzero(inside)[0]


def _bilinear_sample(image: np.ndarray, uv: np.ndarray) -> np.ndarray:
    h, w = image.shape[:2]
    u, v = uv[:, 0], uv[:, 1]
    x0 = np.floor(u).astype(np.int64)
    y0 = np.floor(v).astype(np.int64)
    fx = (u - x0)[:, None]
    fy = (v - y0)[:, None]
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    return ((1 - fx) * (1 - fy) * image[y0c, x0c]
            + fx * (1 - fy) * image[y0c, x1c]
            + (1 - fx) * fy * image[y1c, x0c]
            + fx * fy * image[y1c, x1c])


def colorize_points(points: np.ndarray, frame: CalibratedFrame) -> np.ndarray:
    """Bilinearly sample the frame image at each point's projection."""
    uv, depth = project_points(points, frame.camera)
    inside = (depth > 0) & (uv[:, 0] >= 0) & (uv[:, 0] < frame.camera.width) \
        & (uv[:, 1] >= 0) & (uv[:, 1] < frame.camera.height)
    if not inside.all():
        raise ValueError(f"point {int(np.argmin(inside))} lies outside the camera frustum")
    return _bilinear_sample(frame.image, uv)


# ---------------------------------------------------------------------------
# Point-cloud cleanup
# ---------------------------------------------------------------------------

_VERTICAL_COS = np.cos(np.deg2rad(30.0))


def fit_dominant_plane(points: np.ndarray, distance_threshold: float,
                       seed: int = 0, n_iterations: int = 200) -> tuple:
    """Randomized-consensus plane fit; returns (unit normal, offset).

    The plane is n . p + d = 0 for the 3-point candidate with the most
    inliers within the threshold. Deterministic for a fixed seed.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) < 3:
        raise ValueError("plane fitting needs at least 3 points")
    rng = np.random.default_rng(seed)
    best = None
    best_count = -1
    for _ in range(n_iterations):
        i, j, k = rng.choice(len(pts), size=3, replace=False)
        normal = np.cross(pts[j] - pts[i], pts[k] - pts[i])
        norm = np.linalg.norm(normal)
        if norm < 1e-12:
            continue
        normal = normal / norm
        d = -normal @ pts[i]
        count = int(np.count_nonzero(np.abs(pts @ normal + d) <= distance_threshold))
        if count > best_count:
            best_count = count
            best = (normal, d)
    if best is None:
        raise ValueError("all consensus samples were degenerate")
    return best


def filter_ground(points: np.ndarray, distance_threshold: float,
                  seed: int = 0, n_iterations: int = 200) -> np.ndarray:
    """Indices of points that survive dominant-plane removal.

    Points within the threshold of the fitted plane are removed only when
    the plane normal is within 30 degrees of vertical; a tilted dominant
    plane (a wall, say) removes nothing.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) < 3:
        raise ValueError("ground filtering needs at least 3 points")
    normal, d = fit_dominant_plane(pts, distance_threshold, seed=seed,
                                   n_iterations=n_iterations)
    if abs(normal[2]) < _VERTICAL_COS:
        return np.arange(len(pts))
    keep = np.abs(pts @ normal + d) > distance_threshold
    return np.nonzero(keep)[0]


def erase_boxes(points: np.ndarray, boxes3d) -> np.ndarray:
    """Indices of points outside every yaw-rotated box (boundaries inclusive)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    erased = np.zeros(len(pts), dtype=bool)
    for box in boxes3d:
        c, s = np.cos(-box.yaw), np.sin(-box.yaw)
        rel = pts - box.center
        local = np.column_stack([c * rel[:, 0] - s * rel[:, 1],
                                 s * rel[:, 0] + c * rel[:, 1],
                                 rel[:, 2]])
        erased |= np.all(np.abs(local) <= box.size / 2.0, axis=1)
    return np.nonzero(~erased)[0]


def generate_dome(points: np.ndarray, n_dome: int, radius_factor: float) -> np.ndarray:
    """Fibonacci-lattice points on the upper hemisphere around the ego origin.

    The hemisphere radius is radius_factor times the farthest point range,
    so the dome always encloses the cloud.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("cannot size a dome around an empty cloud")
    if n_dome <= 0:
        raise ValueError("n_dome must be positive")
    if radius_factor < 1.0:
        raise ValueError("radius_factor must be >= 1")
    radius = radius_factor * float(np.linalg.norm(pts, axis=1).max())

    i = np.arange(n_dome)
    z = (i + 0.5) / n_dome
    phi = i * np.pi * (3.0 - np.sqrt(5.0))
    r_xy = np.sqrt(1.0 - z * z)
    return radius * np.column_stack([r_xy * np.cos(phi), r_xy * np.sin(phi), z])


# ---------------------------------------------------------------------------
# Masks
# ---------------------------------------------------------------------------

def make_static_mask(semantic_map: np.ndarray, static_classes) -> np.ndarray:
    """True exactly where the semantic class belongs to the static set."""
    sem = np.asarray(semantic_map)
    if not static_classes:
        return np.zeros(sem.shape, dtype=bool)
    return np.isin(sem, list(static_classes))


def _box_corners(box: Box3D) -> np.ndarray:
    half = box.size / 2.0
    signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
                     dtype=np.float64)
    local = signs * half
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return local @ rot.T + box.center


def make_dynamic_mask(boxes3d, semantic_map: np.ndarray, camera: CameraModel) -> np.ndarray:
    """Mark pixels inside each box's projected hull that share its class.

    Corners behind the camera are ignored; a fully-behind box contributes
    nothing. The hull is the axis-aligned bound of the projected corners,
    clipped to the image.
    """
    sem = np.asarray(semantic_map)
    mask = np.zeros(sem.shape, dtype=bool)
    for box in boxes3d:
        corners = _box_corners(box)
        uv, depth = project_points(corners, camera)
        front = depth > 0
        if not front.any():
            continue
        u, v = uv[front, 0], uv[front, 1]
        col_lo = int(np.ceil(max(0.0, u.min())))
        col_hi = int(np.floor(min(camera.width - 1.0, u.max())))
        row_lo = int(np.ceil(max(0.0, v.min())))
        row_hi = int(np.floor(min(camera.height - 1.0, v.max())))
        if col_lo > col_hi or row_lo > row_hi:
            continue
        region = sem[row_lo:row_hi + 1, col_lo:col_hi + 1]
        mask[row_lo:row_hi + 1, col_lo:col_hi + 1] |= region == box.class_id
    return mask


# ---------------------------------------------------------------------------
# Reconstruction losses
# ---------------------------------------------------------------------------

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def l1_loss(a: np.ndarray, b: np.ndarray) -> float:
    """Mean absolute difference over every scalar."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean(np.abs(a - b)))


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _window_filter(channel: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Valid-mode windowed weighted mean (only fully-inside windows)."""
    half = len(kernel) // 2
    t = correlate1d(channel, kernel, axis=0, mode="constant")
    t = correlate1d(t, kernel, axis=1, mode="constant")
    return t[half:channel.shape[0] - half, half:channel.shape[1] - half]


def dssim_loss(a: np.ndarray, b: np.ndarray) -> float:
    """Structural dissimilarity (1 - SSIM) / 2 with an 11x11 Gaussian window."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW} pixels per side")
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]

    kernel = _gaussian_window()
    ssim_channels = []
    for ch in range(a.shape[2]):
        x, y = a[:, :, ch], b[:, :, ch]
        mu_x = _window_filter(x, kernel)
        mu_y = _window_filter(y, kernel)
        sigma_x = _window_filter(x * x, kernel) - mu_x * mu_x
        sigma_y = _window_filter(y * y, kernel) - mu_y * mu_y
        sigma_xy = _window_filter(x * y, kernel) - mu_x * mu_y
        ssim_map = ((2 * mu_x * mu_y + SSIM_C1) * (2 * sigma_xy + SSIM_C2)
                    / ((mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (sigma_x + sigma_y + SSIM_C2)))
        ssim_channels.append(np.mean(ssim_map))
    return float((1.0 - np.mean(ssim_channels)) / 2.0)


def mgs_loss(render: np.ndarray, gt: np.ndarray, lam: float,
             detach_mask: np.ndarray | None = None) -> float:
    """Blend of L1 and D-SSIM with loss-detached regions.

    Detach-masked pixels of the render are treated as exactly equal to the
    ground truth, which zeroes both their residual and their gradient.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    render = np.asarray(render, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if render.shape != gt.shape:
        raise ValueError(f"image shapes differ: {render.shape} vs {gt.shape}")
    if detach_mask is not None:
        mask = np.asarray(detach_mask, dtype=bool)
        if mask.shape != render.shape[:2]:
            raise ValueError("detach mask dimensions do not match the images")
        if render.ndim == 3:
            mask = mask[:, :, None]
        render = np.where(mask, gt, render)

    term_l1 = l1_loss(render, gt) if lam < 1.0 else 0.0
    term_dssim = dssim_loss(render, gt) if lam > 0.0 else 0.0
    return float((1.0 - lam) * term_l1 + lam * term_dssim)


# ---------------------------------------------------------------------------
# Sequence assembly
# ---------------------------------------------------------------------------

def _checked_inverse(pose: RigidTransform) -> RigidTransform:
    det = np.linalg.det(pose.rotation)
    if abs(abs(det) - 1.0) > 1e-6:
        raise ValueError(f"pose rotation is not orthonormal (det {det:.6g})")
    return pose.inverse()


def _frame_color_or_gray(points: np.ndarray, frame: CalibratedFrame) -> np.ndarray:
    """Color visible points from the frame image; the rest go neutral gray."""
    colors = np.full((len(points), 3), 0.5)
    if len(points) == 0:
        return colors
    visible = frustum_cull(points, frame.camera)
    if len(visible):
        colors[visible] = colorize_points(points[visible], frame)
    return colors


def assemble_sequence(frames, poses, ground_threshold: float = 0.2,
                      n_dome: int = 2000, radius_factor: float = 1.2,
                      use_ground_filter: bool = True, use_box_erase: bool = True,
                      use_dome: bool = True, seed: int = 0) -> InitPrior:
    """Merge a 3-frame window into one colored prior in the center ego frame.

    Each scan is cleaned (ground plane, box erasing) and colored in its own
    frame, then transformed by the relative pose to the center observation.
    Dome points wrap the merged cloud and take the color of the nearest
    camera that sees them, or neutral gray if none does.
    """
    if len(frames) != 3 or len(poses) != 3:
        raise ValueError("a sequence window is exactly 3 frames with 3 poses")
    center_inv = _checked_inverse(poses[1])

    merged_points = []
    merged_colors = []
    to_center = []
    for frame, pose in zip(frames, poses):
        _checked_inverse(pose)
        rel = center_inv.compose(pose)
        to_center.append(rel)
        pts = frame.lidar
        if use_ground_filter and len(pts) >= 3:
            pts = pts[filter_ground(pts, ground_threshold, seed=seed)]
        if use_box_erase:
            pts = pts[erase_boxes(pts, frame.boxes3d)]
        merged_colors.append(_frame_color_or_gray(pts, frame))
        merged_points.append(rel.apply(pts))

    points = np.vstack(merged_points)
    colors = np.vstack(merged_colors)
    provenance = np.full(len(points), PROV_LIDAR, dtype=np.uint8)

    if use_dome and len(points):
        dome = generate_dome(points, n_dome, radius_factor)
        dome_colors = np.full((len(dome), 3), 0.5)
        best_depth = np.full(len(dome), np.inf)
        for frame, rel in zip(frames, to_center):
            local = rel.inverse().apply(dome)
            uv, depth = project_points(local, frame.camera)
            inside = (depth > 0) & (uv[:, 0] >= 0) & (uv[:, 0] < frame.camera.width) \
                & (uv[:, 1] >= 0) & (uv[:, 1] < frame.camera.height)
            better = inside & (depth < best_depth)
            if better.any():
                dome_colors[better] = _bilinear_sample(frame.image, uv[better])
                best_depth[better] = depth[better]
        points = np.vstack([points, dome])
        colors = np.vstack([colors, dome_colors])
        provenance = np.concatenate([provenance, np.full(len(dome), PROV_DOME, dtype=np.uint8)])

    return InitPrior(points, np.clip(colors, 0.0, 1.0), provenance)


def random_prior(seed: int, n_points: int, radius: float,
                 z_low: float = 0.0, z_high: float = 5.0) -> InitPrior:
    """Uniform gray prior standing in for the LiDAR one (ablation baseline)."""
    rng = np.random.default_rng(seed)
    rho = radius * np.sqrt(rng.random(n_points))
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n_points)
    pts = np.column_stack([rho * np.cos(theta), rho * np.sin(theta),
                           rng.uniform(z_low, z_high, size=n_points)])
    return InitPrior(pts, np.full((n_points, 3), 0.5),
                     np.full(n_points, PROV_LIDAR, dtype=np.uint8))


def to_initialization_scene(prior: InitPrior, place_id: int = -1,
                            default_scale: float = 0.1,
                            default_opacity: float = 0.5,
                            ego_pose: RigidTransform | None = None) -> GaussianScene:
    """Initialization-grade scene: one isotropic splat per prior point."""
    n = len(prior.points)
    if n == 0:
        raise ValueError("prior is empty")
    sh = np.zeros((n, 48))
    dc = (prior.colors - 0.5) / SH_C0
    for ch in range(3):
        sh[:, ch * 16] = dc[:, ch]
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    return GaussianScene(
        positions=prior.points.copy(),
        scales=np.full((n, 3), default_scale),
        rotations=rotations,
        sh=sh,
        opacities=np.full(n, default_opacity),
        ego_pose=ego_pose or RigidTransform.identity(),
        place_id=place_id,
        source=SOURCE_INIT)


# ---------------------------------------------------------------------------
# Artifact writers
# ---------------------------------------------------------------------------

def write_prior_ply(prior: InitPrior, path) -> None:
    """Colored-point PLY (x, y, z float32 + red, green, blue uchar)."""
    n = len(prior.points)
    dtype = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                      ("red", "u1"), ("green", "u1"), ("blue", "u1")])
    data = np.zeros(n, dtype=dtype)
    data["x"], data["y"], data["z"] = prior.points.T.astype(np.float32)
    rgb = np.round(prior.colors * 255.0).astype(np.uint8)
    data["red"], data["green"], data["blue"] = rgb.T
    header = "\n".join([
        "ply", "format binary_little_endian 1.0", f"element vertex {n}",
        "property float x", "property float y", "property float z",
        "property uchar red", "property uchar green", "property uchar blue",
        "end_header"]) + "\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(data.tobytes())


def write_mask_bundle(bundle: MaskBundle, static_path, dynamic_path) -> None:
    from PIL import Image
    Image.fromarray(bundle.static_mask.astype(np.uint8) * 255, mode="L").save(static_path)
    Image.fromarray(bundle.dynamic_mask.astype(np.uint8) * 255, mode="L").save(dynamic_path)

"""Gaussian scene and dataset frame I/O.

Scenes are stored in the community splat PLY layout (62 float32 properties
per vertex; scale in log space, opacity in logit space). In memory all
attributes are kept in activated space: scales positive, opacity in (0,1),
quaternions unit with non-negative w. Dataset frames are described by a
tab-separated manifest that points at per-frame image / semantic / LiDAR /
box files and carries calibration inline.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image


class FormatError(ValueError):
    """A file does not match the expected on-disk layout."""


class DataError(ValueError):
    """A file is structurally fine but carries invalid values."""


# ---------------------------------------------------------------------------
# Geometry primitives
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RigidTransform:
    """Rotation + translation, applied as ``p -> R p + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Transform equal to applying ``other`` first, then ``self``."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        rot_t = self.rotation.T
        return RigidTransform(rot_t, -rot_t @ self.translation)

    def to_row_major(self) -> np.ndarray:
        """Flatten the 3x4 matrix [R | t] row by row (12 floats)."""
        m = np.hstack([self.rotation, self.translation[:, None]])
        return m.reshape(-1)

    @classmethod
    def from_row_major(cls, values) -> "RigidTransform":
        m = np.asarray(values, dtype=np.float64).reshape(3, 4)
        return cls(m[:, :3], m[:, 3])

    @property
    def planar(self) -> np.ndarray:
        """(x, y) of the translation, used for track distances."""
        return self.translation[:2]


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics plus the LiDAR-to-camera extrinsic transform."""

    intrinsics: np.ndarray
    extrinsics: RigidTransform
    width: int
    height: int

    def __post_init__(self):
        k = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        object.__setattr__(self, "intrinsics", k)
        if k[0, 0] <= 0 or k[1, 1] <= 0:
            raise DataError("camera intrinsics need positive focal terms")
        if not np.allclose(k[2], [0.0, 0.0, 1.0]):
            raise DataError("camera intrinsics bottom row must be [0, 0, 1]")


@dataclass(frozen=True)
class Box3D:
    """Yaw-rotated 3D bounding box; ``size`` holds full extents in meters."""

    center: np.ndarray
    size: np.ndarray
    yaw: float
    class_id: int

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        object.__setattr__(self, "size", np.asarray(self.size, dtype=np.float64).reshape(3))
        if np.any(self.size <= 0):
            raise DataError("box sizes must be positive")


# ---------------------------------------------------------------------------
# Gaussian scene types
# ---------------------------------------------------------------------------

# Scalar layout of one encoded Gaussian: 3 + 3 + 4 + 48 + 1 = 59.
GAUSSIAN_DIM = 59
SH_CHANNELS = 3
SH_COEFFS = 16  # degree-3 spherical harmonics
ATTR_SLICES = {
    "position": slice(0, 3),
    "scale": slice(3, 6),
    "rotation": slice(6, 10),
    "sh": slice(10, 58),
    "opacity": slice(58, 59),
}

SOURCE_EXTERNAL = "external_optimized"
SOURCE_INIT = "initialization_only"
SOURCE_SYNTHETIC = "synthetic"
SCENE_SOURCES = frozenset({SOURCE_EXTERNAL, SOURCE_INIT, SOURCE_SYNTHETIC})


@dataclass(frozen=True)
class Gaussian:
    """A single splat primitive in activated space."""

    position: np.ndarray  # (3,) meters
    scale: np.ndarray     # (3,) meters, > 0
    rotation: np.ndarray  # (4,) unit quaternion (w, x, y, z), w >= 0
    sh: np.ndarray        # (48,) channel-major: [ch0 c0..c15, ch1 ..., ch2 ...]
    opacity: float        # in (0, 1)


@dataclass
class GaussianScene:
    """A set of Gaussians expressed in the ego frame of the center observation."""

    positions: np.ndarray   # (n, 3)
    scales: np.ndarray      # (n, 3)
    rotations: np.ndarray   # (n, 4)
    sh: np.ndarray          # (n, 48)
    opacities: np.ndarray   # (n,)
    ego_pose: RigidTransform = field(default_factory=RigidTransform.identity)
    place_id: int = -1
    source: str = SOURCE_EXTERNAL

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(n, 3)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.sh = np.asarray(self.sh, dtype=np.float64).reshape(n, SH_CHANNELS * SH_COEFFS)
        self.opacities = np.asarray(self.opacities, dtype=np.float64).reshape(n)
        if self.source not in SCENE_SOURCES:
            raise DataError(f"unknown scene source {self.source!r}")

    def __len__(self) -> int:
        return len(self.positions)

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(self.positions[i], self.scales[i], self.rotations[i],
                        self.sh[i], float(self.opacities[i]))

    def as_matrix(self) -> np.ndarray:
        """Stack all attributes into the canonical (n, 59) layout."""
        return np.hstack([self.positions, self.scales, self.rotations,
                          self.sh, self.opacities[:, None]])

    @classmethod
    def from_matrix(cls, matrix: np.ndarray, **meta) -> "GaussianScene":
        m = np.asarray(matrix, dtype=np.float64).reshape(-1, GAUSSIAN_DIM)
        return cls(positions=m[:, ATTR_SLICES["position"]],
                   scales=m[:, ATTR_SLICES["scale"]],
                   rotations=m[:, ATTR_SLICES["rotation"]],
                   sh=m[:, ATTR_SLICES["sh"]],
                   opacities=m[:, 58], **meta)

    def validate(self):
        """Raise DataError on any violated invariant."""
        mat = self.as_matrix()
        if len(mat) == 0:
            raise DataError("scene is empty")
        bad = ~np.isfinite(mat)
        if bad.any():
            raise DataError(f"non-finite attribute at record {int(np.argwhere(bad)[0][0])}")
        if np.any(self.scales <= 0):
            raise DataError("scale components must be positive")
        if np.any(self.opacities <= 0) or np.any(self.opacities >= 1):
            raise DataError("opacity must lie strictly inside (0, 1)")
        norms = np.linalg.norm(self.rotations, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise DataError("quaternions must be unit length")
        if np.any(self.rotations[:, 0] < 0):
            raise DataError("quaternions must carry canonical sign (w >= 0)")


@dataclass
class CalibratedFrame:
    """One observation: image, semantics, LiDAR scan, boxes, pose, calibration."""

    image: np.ndarray         # (h, w, 3) in [0, 1]
    semantic_map: np.ndarray  # (h, w) class ids
    camera: CameraModel
    lidar: np.ndarray         # (p, 3) meters, LiDAR frame
    boxes3d: list
    pose: RigidTransform

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.semantic_map = np.asarray(self.semantic_map)
        self.lidar = np.asarray(self.lidar, dtype=np.float64).reshape(-1, 3)
        if self.image.shape[:2] != self.semantic_map.shape:
            raise DataError("image and semantic map dimensions differ")
        if (self.camera.height, self.camera.width) != self.image.shape[:2]:
            raise DataError("camera dimensions do not match the image")


def canonicalize_quaternions(quats: np.ndarray) -> np.ndarray:
    """Normalize quaternions and fix the sign so that w >= 0."""
    q = np.asarray(quats, dtype=np.float64).reshape(-1, 4)
    norms = np.linalg.norm(q, axis=1)
    if np.any(norms == 0):
        raise DataError(f"zero quaternion at record {int(np.argmax(norms == 0))}")
    q = q / norms[:, None]
    flip = q[:, 0] < 0
    # w == 0: pick the sign that makes the first nonzero component positive
    zero_w = q[:, 0] == 0
    if zero_w.any():
        rest = q[zero_w, 1:]
        lead = rest[np.arange(len(rest)), np.argmax(rest != 0, axis=1)]
        flip = flip.copy()
        flip[zero_w] = lead < 0
    q[flip] *= -1.0
    return q


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _logit(p: np.ndarray) -> np.ndarray:
    return np.log(p) - np.log1p(-p)


# ---------------------------------------------------------------------------
# Splat PLY read / write
# ---------------------------------------------------------------------------

PLY_PROPERTIES = (
    ["x", "y", "z", "nx", "ny", "nz"]
    + [f"f_dc_{i}" for i in range(3)]
    + [f"f_rest_{i}" for i in range(45)]
    + ["opacity"]
    + [f"scale_{i}" for i in range(3)]
    + [f"rot_{i}" for i in range(4)]
)

_PLY_TYPE_MAP = {
    "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
    "uchar": "u1", "uint8": "u1", "char": "i1", "int8": "i1",
    "short": "<i2", "ushort": "<u2", "int": "<i4", "int32": "<i4",
    "uint": "<u4", "uint32": "<u4",
}


def _parse_ply_header(raw: bytes, path) -> tuple:
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply") or end < 0:
        raise FormatError(f"{path}: not a PLY file")
    header = raw[:end].decode("ascii", errors="replace").splitlines()
    body_offset = end + len(b"end_header\n")

    fmt = None
    count = None
    props = []
    in_vertex = False
    for line in header[1:]:
        tokens = line.split()
        if not tokens or tokens[0] == "comment":
            continue
        if tokens[0] == "format":
            fmt = tokens[1]
        elif tokens[0] == "element":
            if tokens[1] == "vertex":
                count = int(tokens[2])
                in_vertex = True
            else:
                in_vertex = False
        elif tokens[0] == "property" and in_vertex:
            if tokens[1] == "list":
                raise FormatError(f"{path}: list properties are not supported")
            props.append((tokens[2], tokens[1]))
    if fmt != "binary_little_endian":
        raise FormatError(f"{path}: expected binary_little_endian, got {fmt!r}")
    if count is None:
        raise FormatError(f"{path}: element 'vertex' missing")
    return count, props, body_offset


def read_gaussian_ply(path, place_id: int = -1,
                      ego_pose: RigidTransform | None = None,
                      source: str = SOURCE_EXTERNAL) -> GaussianScene:
    """Read a splat PLY and return the scene with activated attributes.

    Raw scales are exponentiated, raw opacities pass through a sigmoid and
    quaternions are normalized with the sign fixed to w >= 0. Scene metadata
    (pose, place id) is not part of the PLY and comes from the arguments.
    """
    path = Path(path)
    raw = path.read_bytes()
    count, props, body_offset = _parse_ply_header(raw, path)

    names = [name for name, _ in props]
    for required in PLY_PROPERTIES:
        if required not in names:
            raise FormatError(f"{path}: missing property '{required}'")
    dtype = np.dtype([(name, _PLY_TYPE_MAP.get(kind, "<f4")) for name, kind in props])
    records = np.frombuffer(raw, dtype=dtype, count=count, offset=body_offset)

    cols = {name: records[name].astype(np.float64) for name in PLY_PROPERTIES}
    stacked = np.column_stack([cols[name] for name in PLY_PROPERTIES])
    bad = ~np.isfinite(stacked)
    if bad.any():
        raise DataError(f"{path}: non-finite value at record {int(np.argwhere(bad)[0][0])}")

    positions = np.column_stack([cols["x"], cols["y"], cols["z"]])
    scales = np.exp(np.column_stack([cols[f"scale_{i}"] for i in range(3)]))
    opacities = _sigmoid(cols["opacity"])
    rotations = canonicalize_quaternions(
        np.column_stack([cols[f"rot_{i}"] for i in range(4)]))

    sh = np.zeros((count, SH_CHANNELS * SH_COEFFS))
    for ch in range(SH_CHANNELS):
        sh[:, ch * SH_COEFFS] = cols[f"f_dc_{ch}"]
        for m in range(1, SH_COEFFS):
            sh[:, ch * SH_COEFFS + m] = cols[f"f_rest_{ch * (SH_COEFFS - 1) + m - 1}"]

    return GaussianScene(positions, scales, rotations, sh, opacities,
                         ego_pose=ego_pose or RigidTransform.identity(),
                         place_id=place_id, source=source)


def write_gaussian_ply(scene: GaussianScene, path) -> None:
    """Write the scene in the 62-property splat layout (binary little-endian)."""
    scene.validate()
    path = Path(path)
    n = len(scene)

    data = np.zeros(n, dtype=np.dtype([(name, "<f4") for name in PLY_PROPERTIES]))
    data["x"], data["y"], data["z"] = scene.positions.T
    raw_scale = np.log(scene.scales)
    for i in range(3):
        data[f"scale_{i}"] = raw_scale[:, i]
    data["opacity"] = _logit(scene.opacities)
    for i in range(4):
        data[f"rot_{i}"] = scene.rotations[:, i]
    for ch in range(SH_CHANNELS):
        data[f"f_dc_{ch}"] = scene.sh[:, ch * SH_COEFFS]
        for m in range(1, SH_COEFFS):
            data[f"f_rest_{ch * (SH_COEFFS - 1) + m - 1}"] = scene.sh[:, ch * SH_COEFFS + m]

    header_lines = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header_lines += [f"property float {name}" for name in PLY_PROPERTIES]
    header_lines.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header_lines) + "\n").encode("ascii"))
        fh.write(data.tobytes())


# ---------------------------------------------------------------------------
# Frame files and manifests
# ---------------------------------------------------------------------------

def write_image_png(path, image) -> None:
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8), mode="RGB").save(path)


def read_image_png(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0


def write_semantic_png(path, class_map) -> None:
    arr = np.asarray(class_map)
    if arr.min() < 0 or arr.max() > np.iinfo(np.uint16).max:
        raise DataError("semantic class ids must fit in 16 bits")
    Image.fromarray(arr.astype(np.uint16), mode="I;16").save(path)


def read_semantic_png(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img, dtype=np.int64)


def write_boxes_json(path, boxes) -> None:
    payload = [{"center": list(map(float, b.center)), "size": list(map(float, b.size)),
                "yaw": float(b.yaw), "class_id": int(b.class_id)} for b in boxes]
    Path(path).write_text(json.dumps(payload, indent=1), encoding="utf-8")


def read_boxes_json(path) -> list:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    return [Box3D(b["center"], b["size"], b["yaw"], b["class_id"]) for b in payload]


@dataclass(frozen=True)
class FrameRecord:
    """One manifest line: file paths plus inline calibration."""

    image_path: str
    semantic_path: str
    lidar_path: str
    boxes_path: str
    intrinsics: np.ndarray
    extrinsics: RigidTransform
    pose: RigidTransform


def write_manifest(path, records) -> None:
    """One frame per line, tab-separated; poses flattened to 12 floats."""
    lines = []
    for rec in records:
        fields = [rec.image_path, rec.semantic_path, rec.lidar_path, rec.boxes_path]
        fields += [repr(v) for v in np.asarray(rec.intrinsics, dtype=np.float64).reshape(9)]
        fields += [repr(v) for v in rec.extrinsics.to_row_major()]
        fields += [repr(v) for v in rec.pose.to_row_major()]
        lines.append("\t".join(fields))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> list:
    records = []
    for ln, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 4 + 9 + 12 + 12:
            raise FormatError(f"{path}: line {ln + 1} has {len(fields)} fields, expected 37")
        vals = np.array([float(v) for v in fields[4:]])
        records.append(FrameRecord(
            image_path=fields[0], semantic_path=fields[1],
            lidar_path=fields[2], boxes_path=fields[3],
            intrinsics=vals[:9].reshape(3, 3),
            extrinsics=RigidTransform.from_row_major(vals[9:21]),
            pose=RigidTransform.from_row_major(vals[21:33])))
    return records


def load_frame(record: FrameRecord, base_dir) -> CalibratedFrame:
    """Materialize a manifest record into a CalibratedFrame."""
    base = Path(base_dir)
    image = read_image_png(base / record.image_path)
    semantic = read_semantic_png(base / record.semantic_path)
    lidar = np.load(base / record.lidar_path)
    boxes = read_boxes_json(base / record.boxes_path)
    h, w = image.shape[:2]
    camera = CameraModel(record.intrinsics, record.extrinsics, width=w, height=h)
    return CalibratedFrame(image=image, semantic_map=semantic, camera=camera,
                           lidar=lidar, boxes3d=boxes, pose=record.pose)


def write_frame_files(frame: CalibratedFrame, directory, stem: str) -> FrameRecord:
    """Write the four per-frame files and return the matching manifest record."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = {
        "image": f"{stem}_image.png", "semantic": f"{stem}_semantic.png",
        "lidar": f"{stem}_lidar.npy", "boxes": f"{stem}_boxes.json",
    }
    write_image_png(directory / names["image"], frame.image)
    write_semantic_png(directory / names["semantic"], frame.semantic_map)
    np.save(directory / names["lidar"], frame.lidar.astype(np.float64))
    write_boxes_json(directory / names["boxes"], frame.boxes3d)
    return FrameRecord(names["image"], names["semantic"], names["lidar"], names["boxes"],
                       frame.camera.intrinsics, frame.camera.extrinsics, frame.pose)


# ---------------------------------------------------------------------------
# Synthetic scenes
# ---------------------------------------------------------------------------

# Shared landmark color palette: places differ mostly by geometry, which keeps
# color-only descriptors weaker than full-feature ones.
_PALETTE = np.array([
    [0.9, 0.2, 0.2], [0.2, 0.9, 0.2], [0.2, 0.3, 0.9], [0.9, 0.8, 0.1],
    [0.7, 0.3, 0.8], [0.2, 0.8, 0.8], [0.8, 0.5, 0.2], [0.6, 0.6, 0.6],
])


@dataclass(frozen=True)
class SyntheticSceneSpec:
    """Generation parameters for a deterministic synthetic scene.

    The landmark template (cluster layout, sizes, appearance) is a pure
    function of (template_seed, place_id); the observation seed only perturbs
    the draw, so two seeds of one place look like two traversals.
    """

    n_gaussians: int = 600
    n_landmarks: int = 12
    inner_radius: float = 4.0
    extent: float = 36.0
    z_low: float = 0.0
    z_high: float = 5.0
    place_id: int = 0
    position_jitter: float = 0.05
    appearance_jitter: float = 0.01
    template_seed: int = 0

    def __post_init__(self):
        if self.n_gaussians <= 0 or self.n_landmarks <= 0:
            raise DataError("synthetic scene counts must be positive")
        if self.extent <= self.inner_radius:
            raise DataError("extent must exceed inner_radius")


def _landmark_template(spec: SyntheticSceneSpec) -> dict:
    rng = np.random.default_rng((spec.template_seed, spec.place_id, 0x5CE7E))
    k = spec.n_landmarks
    radius = spec.inner_radius + (spec.extent - spec.inner_radius) * rng.random(k) ** 0.7
    theta = rng.uniform(0.0, 2.0 * np.pi, size=k)
    centers = np.column_stack([radius * np.cos(theta), radius * np.sin(theta),
                               rng.uniform(spec.z_low, spec.z_high, size=k)])
    spread = rng.uniform(0.5, 2.0, size=k)
    log_scale = rng.uniform(-2.5, -0.5, size=(k, 3))
    color = _PALETTE[rng.integers(0, len(_PALETTE), size=k)] + rng.normal(0.0, 0.05, size=(k, 3))
    sh_rest = rng.normal(0.0, 0.05, size=(k, SH_CHANNELS, SH_COEFFS - 1))
    opacity_logit = rng.uniform(-0.5, 2.5, size=k)
    axis = rng.normal(size=(k, 3))
    axis /= np.linalg.norm(axis, axis=1, keepdims=True)
    angle = rng.uniform(0.0, np.pi, size=k)
    quat = np.column_stack([np.cos(angle / 2.0), np.sin(angle / 2.0)[:, None] * axis])
    return {"centers": centers, "spread": spread, "log_scale": log_scale,
            "color": color, "sh_rest": sh_rest, "opacity_logit": opacity_logit,
            "quat": canonicalize_quaternions(quat)}


def generate_synthetic_scene(seed: int, spec: SyntheticSceneSpec) -> GaussianScene:
    """Draw a deterministic scene from the place's landmark template.

    Bit-identical for equal (seed, spec); different seeds of the same
    place_id sample the same landmarks with fresh offsets and jitter.
    """
    template = _landmark_template(spec)
    rng = np.random.default_rng((seed, spec.place_id, 0x0B5E12E))

    n = spec.n_gaussians
    k = spec.n_landmarks
    # Deterministic near-even landmark occupancy, remainder to the first ones.
    counts = np.full(k, n // k)
    counts[: n % k] += 1
    assignment = np.repeat(np.arange(k), counts)

    centers = template["centers"][assignment]
    spread = template["spread"][assignment]
    positions = centers + rng.normal(size=(n, 3)) * spread[:, None]
    positions += rng.normal(0.0, spec.position_jitter, size=(n, 3))

    log_scale = template["log_scale"][assignment] + rng.normal(0.0, spec.appearance_jitter, size=(n, 3))
    scales = np.exp(log_scale)

    quat = template["quat"][assignment]
    wobble_axis = rng.normal(size=(n, 3))
    wobble_axis /= np.linalg.norm(wobble_axis, axis=1, keepdims=True)
    wobble = rng.normal(0.0, 0.05, size=n)
    dq = np.column_stack([np.cos(wobble / 2.0), np.sin(wobble / 2.0)[:, None] * wobble_axis])
    rotations = canonicalize_quaternions(_quat_multiply(dq, quat))

    sh = np.zeros((n, SH_CHANNELS * SH_COEFFS))
    dc = template["color"][assignment] + rng.normal(0.0, spec.appearance_jitter, size=(n, 3))
    for ch in range(SH_CHANNELS):
        sh[:, ch * SH_COEFFS] = dc[:, ch]
        sh[:, ch * SH_COEFFS + 1: (ch + 1) * SH_COEFFS] = (
            template["sh_rest"][assignment, ch]
            + rng.normal(0.0, spec.appearance_jitter, size=(n, SH_COEFFS - 1)))

    logits = template["opacity_logit"][assignment] + rng.normal(0.0, spec.appearance_jitter, size=n)
    opacities = _sigmoid(logits)

    return GaussianScene(positions, scales, rotations, sh, opacities,
                         place_id=spec.place_id, source=SOURCE_SYNTHETIC)


def _quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a.T
    bw, bx, by, bz = b.T
    return np.column_stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])

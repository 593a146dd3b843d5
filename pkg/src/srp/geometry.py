"""Rigid-body math, pinhole camera model, meshes and pose-error metrics.

Quaternions are stored as ``(w, x, y, z)``. Euler angles at I/O boundaries use
extrinsic rotations about X, then Y, then Z, i.e. ``R = Rz(yaw) @ Ry(pitch) @ Rx(roll)``.
Camera frames follow the usual optical convention: x right, y down, z forward.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

AXES = {"x": 0, "y": 1, "z": 2}


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


# --------------------------------------------------------------------------
# quaternion helpers (w, x, y, z)
# --------------------------------------------------------------------------

def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ValueError("zero-norm quaternion")
    q = q / n
    # canonical hemisphere keeps representations unique
    return np.where(q[..., :1] < 0, -q, q)


def quat_mul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conj(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrix (or stack of them) for unit quaternion(s)."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    r = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return r.reshape(q.shape[:-1] + (3, 3))


def matrix_to_quat(m) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    return quat_normalize(q)


def axis_angle_to_quat(axis, angle) -> np.ndarray:
    """Quaternion(s) for rotation by ``angle`` about unit ``axis`` (broadcasts)."""
    axis = np.asarray(axis, dtype=float)
    angle = np.asarray(angle, dtype=float)
    half = 0.5 * angle
    return np.concatenate([np.cos(half)[..., None], np.sin(half)[..., None] * axis], axis=-1)


def quat_angle(q) -> np.ndarray:
    """Rotation angle in [0, pi] of unit quaternion(s)."""
    q = np.asarray(q, dtype=float)
    return 2.0 * np.arctan2(np.linalg.norm(q[..., 1:], axis=-1), np.abs(q[..., 0]))


def euler_to_quat(roll, pitch, yaw) -> np.ndarray:
    qx = axis_angle_to_quat([1.0, 0.0, 0.0], roll)
    qy = axis_angle_to_quat([0.0, 1.0, 0.0], pitch)
    qz = axis_angle_to_quat([0.0, 0.0, 1.0], yaw)
    return quat_normalize(quat_mul(qz, quat_mul(qy, qx)))


def matrix_to_euler(m) -> tuple[float, float, float]:
    m = np.asarray(m, dtype=float)
    pitch = float(np.arcsin(np.clip(-m[2, 0], -1.0, 1.0)))
    if abs(m[2, 0]) < 1.0 - 1e-12:
        roll = float(np.arctan2(m[2, 1], m[2, 2]))
        yaw = float(np.arctan2(m[1, 0], m[0, 0]))
    else:  # gimbal lock: fold everything into yaw
        roll = 0.0
        yaw = float(np.arctan2(-m[0, 1], m[1, 1]))
    return roll, pitch, yaw


def random_unit_quats(rng: np.random.Generator, n: int) -> np.ndarray:
    """Uniformly distributed rotations (normalized 4D Gaussians)."""
    return quat_normalize(rng.standard_normal((n, 4)))


# --------------------------------------------------------------------------
# Pose
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform: rotate by ``orientation`` then translate by ``position``."""

    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    orientation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        p = np.asarray(self.position, dtype=float).reshape(3)
        if not np.all(np.isfinite(p)):
            raise ValueError("pose position must be finite")
        object.__setattr__(self, "position", _frozen(p))
        object.__setattr__(self, "orientation", _frozen(quat_normalize(np.asarray(self.orientation, float).reshape(4))))

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_translation(cls, x: float, y: float, z: float) -> "Pose":
        return cls([x, y, z])

    @classmethod
    def from_euler(cls, position, roll: float, pitch: float, yaw: float) -> "Pose":
        return cls(position, euler_to_quat(roll, pitch, yaw))

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=float)
        return cls(m[:3, 3], matrix_to_quat(m[:3, :3]))

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.orientation)

    @property
    def euler(self) -> tuple[float, float, float]:
        return matrix_to_euler(self.rotation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.position
        return m

    def inverse(self) -> "Pose":
        qi = quat_conj(self.orientation)
        return Pose(-quat_to_matrix(qi) @ self.position, qi)

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return pts @ self.rotation.T + self.position

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        same_rot = quat_angle(quat_mul(quat_conj(self.orientation), other.orientation)) <= atol
        return bool(np.allclose(self.position, other.position, atol=atol) and same_rot)

    def to_dict(self) -> dict:
        return {
            "position": [float(v) for v in self.position],
            "quaternion": [float(v) for v in self.orientation],
            "euler_xyz": [float(v) for v in self.euler],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        if "quaternion" in d:
            return cls(d["position"], d["quaternion"])
        if "euler_xyz" in d:
            r, p, y = d["euler_xyz"]
            return cls.from_euler(d["position"], r, p, y)
        raise ValueError("pose needs 'quaternion' or 'euler_xyz'")

    def __repr__(self) -> str:
        p = ", ".join(f"{v:.4f}" for v in self.position)
        q = ", ".join(f"{v:.4f}" for v in self.orientation)
        return f"Pose(position=[{p}], orientation=[{q}])"


def compose(a: Pose, b: Pose) -> Pose:
    """``b`` expressed in ``a``'s frame: x -> a(b(x))."""
    return Pose(a.rotation @ b.position + a.position, quat_mul(a.orientation, b.orientation))


def inverse(p: Pose) -> Pose:
    return p.inverse()


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera pose (optical frame, z forward, y down) at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=float)
    f = np.asarray(target, dtype=float) - eye
    f /= np.linalg.norm(f)
    x = np.cross(f, np.asarray(up, dtype=float))
    x /= np.linalg.norm(x)
    y = np.cross(f, x)
    return Pose(eye, matrix_to_quat(np.column_stack([x, y, f])))


# --------------------------------------------------------------------------
# camera and images
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.1
    far: float = 4.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.near < self.far):
            raise ValueError("need 0 < near < far")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be >= 1")

    @classmethod
    def default(cls, scale: float = 0.25) -> "CameraIntrinsics":
        """Kinect-like 640x480 intrinsics, scaled (0.25 gives 160x120)."""
        return cls(525.0, 525.0, 319.5, 239.5, 640, 480).scaled(scale)

    def scaled(self, factor: float) -> "CameraIntrinsics":
        # pixel centers sit at integer coordinates
        return CameraIntrinsics(
            self.fx * factor,
            self.fy * factor,
            (self.cx + 0.5) * factor - 0.5,
            (self.cy + 0.5) * factor - 0.5,
            int(round(self.width * factor)),
            int(round(self.height * factor)),
            self.near,
            self.far,
        )

    def ray_norms(self) -> np.ndarray:
        """Per-pixel |(x/z, y/z, 1)|, so a depth difference times this is a 3D distance."""
        u = (np.arange(self.width) - self.cx) / self.fx
        v = (np.arange(self.height) - self.cy) / self.fy
        return np.sqrt(u[None, :] ** 2 + v[:, None] ** 2 + 1.0)

    def to_dict(self) -> dict:
        return dict(fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy, width=self.width,
                    height=self.height, near=self.near, far=self.far)

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]), float(d.get("near", 0.1)), float(d.get("far", 4.0)))


@dataclass(frozen=True, eq=False)
class DepthImage:
    """Row-major depth in meters; 0 marks a missing measurement."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=float)
        if d.ndim != 2:
            raise ValueError("depth data must be 2-D (height, width)")
        if np.any(~np.isfinite(d)) or np.any(d < 0):
            raise ValueError("depth values must be finite and >= 0")
        object.__setattr__(self, "data", _frozen(d))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @classmethod
    def empty(cls, cam: CameraIntrinsics) -> "DepthImage":
        return cls(np.zeros((cam.height, cam.width)))


def backproject(img: DepthImage, cam: CameraIntrinsics) -> np.ndarray:
    """Camera-frame 3D points (N, 3) for every pixel with a depth reading."""
    if img.width != cam.width or img.height != cam.height:
        raise ValueError(f"image {img.width}x{img.height} does not match camera {cam.width}x{cam.height}")
    v, u = np.nonzero(img.data > 0)
    d = img.data[v, u]
    return np.column_stack([(u - cam.cx) * d / cam.fx, (v - cam.cy) * d / cam.fy, d])


def backproject_pixel(u, v, d, cam: CameraIntrinsics) -> np.ndarray:
    u, v, d = (np.asarray(a, dtype=float) for a in (u, v, d))
    return np.stack([(u - cam.cx) * d / cam.fx, (v - cam.cy) * d / cam.fy, d], axis=-1)


def write_pgm(path, img: DepthImage) -> None:
    """16-bit binary PGM, millimeters."""
    mm = np.clip(np.rint(img.data * 1000.0), 0, 65535).astype(">u2")
    with open(path, "wb") as f:
        f.write(f"P5\n{img.width} {img.height}\n65535\n".encode("ascii"))
        f.write(mm.tobytes())


def read_pgm(path) -> DepthImage:
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5)")
    w, h, maxval = (int(t) for t in tokens[1:])
    dtype = ">u2" if maxval > 255 else "u1"
    data = np.frombuffer(raw, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    return DepthImage(data.astype(float) / 1000.0)


# --------------------------------------------------------------------------
# meshes and models
# --------------------------------------------------------------------------

class MeshFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TriMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        t = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(t) == 0:
            raise ValueError("mesh needs at least one triangle")
        if not np.all(np.isfinite(v)):
            raise ValueError("mesh vertices must be finite")
        if t.min() < 0 or t.max() >= len(v):
            raise ValueError("triangle index out of range")
        object.__setattr__(self, "vertices", _frozen(v))
        object.__setattr__(self, "triangles", _frozen(t, np.int64))

    @staticmethod
    def merge(meshes: Iterable["TriMesh"]) -> "TriMesh":
        verts, tris, off = [], [], 0
        for m in meshes:
            verts.append(m.vertices)
            tris.append(m.triangles + off)
            off += len(m.vertices)
        return TriMesh(np.vstack(verts), np.vstack(tris))

    def translated(self, offset) -> "TriMesh":
        return TriMesh(self.vertices + np.asarray(offset, dtype=float), self.triangles)

    def to_obj(self) -> str:
        lines = [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in self.vertices]
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in self.triangles]
        return "\n".join(lines) + "\n"


def load_mesh(path) -> TriMesh:
    """Parse the triangulated ASCII OBJ subset (``v`` and ``f`` records only)."""
    return parse_obj(Path(path).read_text(), str(path))


def parse_obj(text: str, source: str = "<obj>") -> TriMesh:
    verts: list[list[float]] = []
    faces: list[tuple[int, int, int]] = []
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split("#", 1)[0].split()
        if not parts:
            continue
        tag, args = parts[0], parts[1:]
        if tag == "v":
            if len(args) < 3:
                raise MeshFormatError(f"{source}:{lineno}: vertex needs 3 coordinates")
            try:
                xyz = [float(a) for a in args[:3]]
            except ValueError:
                raise MeshFormatError(f"{source}:{lineno}: bad vertex coordinate") from None
            if not all(np.isfinite(xyz)):
                raise MeshFormatError(f"{source}:{lineno}: non-finite vertex coordinate")
            verts.append(xyz)
        elif tag == "f":
            if len(args) != 3:
                raise MeshFormatError(f"{source}:{lineno}: non-triangular face ({len(args)} vertices)")
            idx = []
            for a in args:
                try:
                    i = int(a.split("/", 1)[0])
                except ValueError:
                    raise MeshFormatError(f"{source}:{lineno}: bad face index {a!r}") from None
                i = i - 1 if i > 0 else len(verts) + i
                if not 0 <= i < len(verts):
                    raise MeshFormatError(f"{source}:{lineno}: face index {a} out of range")
                idx.append(i)
            faces.append(tuple(idx))
        # normals, texture coords, groups etc. are ignored
    if not faces:
        raise MeshFormatError(f"{source}: no faces")
    return TriMesh(np.array(verts), np.array(faces))


@dataclass(frozen=True)
class VirtualRegion:
    region_id: str
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]

    def contains(self, point_in_parent) -> bool:
        p = np.asarray(point_in_parent, dtype=float)
        return bool(np.all(p >= np.asarray(self.lo)) and np.all(p <= np.asarray(self.hi)))


@dataclass(frozen=True, eq=False)
class ModelInfo:
    model_id: str
    mesh: TriMesh
    box_dims: tuple[float, float, float]
    symmetry_axis: str | None = None
    concave: bool = False
    virtual_regions: tuple[VirtualRegion, ...] = ()

    def __post_init__(self):
        dims = tuple(float(d) for d in self.box_dims)
        if len(dims) != 3 or min(dims) <= 0:
            raise ValueError(f"{self.model_id}: box_dims must be 3 positive values")
        half = np.asarray(dims) / 2 + 1e-6
        if np.any(np.abs(self.mesh.vertices) > half):
            raise ValueError(f"{self.model_id}: box_dims do not enclose the mesh")
        if self.symmetry_axis is not None and self.symmetry_axis not in AXES:
            raise ValueError(f"{self.model_id}: symmetry_axis must be x, y or z")
        object.__setattr__(self, "box_dims", dims)
        object.__setattr__(self, "virtual_regions", tuple(self.virtual_regions))

    def region(self, region_id: str) -> VirtualRegion:
        for r in self.virtual_regions:
            if r.region_id == region_id:
                return r
        raise KeyError(f"{self.model_id} has no virtual region {region_id!r}")

    def box_corners(self) -> np.ndarray:
        h = np.asarray(self.box_dims) / 2
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], float)
        return signs * h


# --------------------------------------------------------------------------
# pose error
# --------------------------------------------------------------------------

def swing_twist(q, axis) -> tuple[np.ndarray, np.ndarray]:
    """Split ``q = swing * twist`` with ``twist`` a rotation about ``axis``."""
    q = quat_normalize(q)
    axis = np.asarray(axis, dtype=float)
    proj = np.dot(q[1:], axis) * axis
    twist = np.concatenate([[q[0]], proj])
    n = np.linalg.norm(twist)
    # 180-degree swing: twist is undefined, take identity
    twist = np.array([1.0, 0.0, 0.0, 0.0]) if n < 1e-12 else twist / n
    swing = quat_mul(q, quat_conj(twist))
    return swing, twist


def pose_error(estimate: Pose, truth: Pose, info: ModelInfo | None = None) -> tuple[float, float]:
    """Position error (m) and rotation error (rad); symmetric-axis spin is ignored."""
    dt = float(np.linalg.norm(estimate.position - truth.position))
    rel = quat_mul(quat_conj(truth.orientation), estimate.orientation)
    if info is not None and info.symmetry_axis is not None:
        axis = np.eye(3)[AXES[info.symmetry_axis]]
        rel, _ = swing_twist(rel, axis)
    return dt, float(quat_angle(rel))


def convex_hull_2d(points: Sequence) -> np.ndarray:
    """Counter-clockwise hull (Andrew's monotone chain), no repeated endpoint."""
    pts = sorted(set(map(tuple, np.round(np.asarray(points, dtype=float), 12))))
    if len(pts) <= 2:
        return np.array(pts, dtype=float)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1], dtype=float)


def polygon_area(poly) -> float:
    p = np.asarray(poly, dtype=float)
    if len(p) < 3:
        return 0.0
    x, y = p[:, 0], p[:, 1]
    return float(0.5 * (np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))

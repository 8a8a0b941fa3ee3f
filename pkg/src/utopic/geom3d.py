"""Point clouds, rigid transforms, brute-force neighbours and Euler angles."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffmath import ContractError

# Intrinsic Z-Y-X (yaw, pitch, roll); R = Rz(yaw) @ Ry(pitch) @ Rx(roll).
EULER_CONVENTION = "intrinsic-zyx-deg"


@dataclass
class PointCloud:
    points: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point cloud contains non-finite coordinates")
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
            if len(self.labels) != len(self.points):
                raise ValueError("labels must have one entry per point")

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, idx) -> "PointCloud":
        return PointCloud(self.points[idx], None if self.labels is None else self.labels[idx])


@dataclass
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    def is_valid(self, tol: float = 1e-9) -> bool:
        r = self.rotation
        return (np.abs(r.T @ r - np.eye(3)).max() < tol
                and abs(np.linalg.det(r) - 1.0) < tol)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.reshape(-1).tolist(),
                "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "RigidTransform":
        return cls(np.array(d["rotation"]).reshape(3, 3), np.array(d["translation"]))


def apply(t: RigidTransform, pc):
    """Map every point to R p + t. Accepts a PointCloud or an (N, 3) array."""
    if isinstance(pc, PointCloud):
        return PointCloud(pc.points @ t.rotation.T + t.translation, pc.labels)
    return np.asarray(pc, dtype=np.float64) @ t.rotation.T + t.translation


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """The transform x -> a(b(x))."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(t: RigidTransform) -> RigidTransform:
    rt = t.rotation.T
    return RigidTransform(rt, -rt @ t.translation)


def axis_angle_matrix(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(angle) * k + (1 - math.cos(angle)) * (k @ k)


def _half_angle_deg(diff_norm: float, sum_norm: float) -> float:
    # |A - B|_F^2 = 8 sin^2(theta/2) and |A + B|_F^2 = 4 + 8 cos^2(theta/2) for rotations A, B
    s = diff_norm / math.sqrt(8.0)
    c2 = (sum_norm ** 2 - 4.0) / 8.0
    return math.degrees(2.0 * math.atan2(s, math.sqrt(max(c2, 0.0))))


def rotation_angle_deg(r: np.ndarray) -> float:
    """Geodesic angle of a rotation, arccos((tr R - 1) / 2) in degrees.

    Evaluated through half-angle norms, which stays accurate near 0 and 180
    degrees where the arccos form loses about half the digits.
    """
    r = np.asarray(r, dtype=np.float64)
    return _half_angle_deg(np.linalg.norm(np.eye(3) - r), np.linalg.norm(np.eye(3) + r))


def rotation_error_deg(r_pred: np.ndarray, r_gt: np.ndarray) -> float:
    """Isotropic error arccos((tr(R_gt^T R_pred) - 1) / 2) in degrees."""
    a, b = np.asarray(r_pred, dtype=np.float64), np.asarray(r_gt, dtype=np.float64)
    return _half_angle_deg(np.linalg.norm(a - b), np.linalg.norm(a + b))


def random_unit_vector(rng: np.random.Generator) -> np.ndarray:
    while True:
        v = rng.standard_normal(3)
        n = np.linalg.norm(v)
        if n > 1e-12:
            return v / n


def random_transform(rng: np.random.Generator, max_rot_deg: float = 45.0,
                     max_trans: float = 0.5) -> RigidTransform:
    """Uniform axis and uniform angle magnitude in [0, max_rot_deg] (not Haar-uniform)."""
    if not 0.0 <= max_rot_deg <= 180.0:
        raise ContractError("max_rot_deg must lie in [0, 180]")
    axis = random_unit_vector(rng)
    angle = math.radians(rng.uniform(0.0, max_rot_deg))
    trans = rng.uniform(-max_trans, max_trans, size=3)
    return RigidTransform(axis_angle_matrix(axis, angle), trans)


def pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def knn_all(points: np.ndarray, k: int, exclude_self: bool = True) -> np.ndarray:
    """k nearest neighbours of every point, ties broken by ascending index."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    avail = n - 1 if exclude_self else n
    if k > avail or (exclude_self and k >= n):
        raise ContractError(f"k={k} needs more than {n} points")
    d = pairwise_sq_dists(points, points)
    if exclude_self:
        np.fill_diagonal(d, np.inf)
    # stable sort keeps index order among equal distances
    return np.argsort(d, axis=1, kind="stable")[:, :k]


def knn(pc, i: int, k: int, exclude_self: bool = True) -> np.ndarray:
    points = pc.points if isinstance(pc, PointCloud) else np.asarray(pc, dtype=np.float64)
    n = len(points)
    if k >= n:
        raise ContractError(f"k={k} must be smaller than the cloud size {n}")
    diff = points - points[i]
    d = np.einsum("ij,ij->i", diff, diff)
    if exclude_self:
        d[i] = np.inf
    return np.argsort(d, kind="stable")[:k]


def _rx(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _ry(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def _rz(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def rotation_from_euler(angles_deg, convention: str = EULER_CONVENTION) -> np.ndarray:
    """Angles are (roll_x, pitch_y, yaw_z) in degrees; R = Rz @ Ry @ Rx."""
    if convention != EULER_CONVENTION:
        raise ContractError(f"unsupported Euler convention {convention!r}")
    x, y, z = (math.radians(a) for a in angles_deg)
    return _rz(z) @ _ry(y) @ _rx(x)


def euler_from_rotation(r: np.ndarray, convention: str = EULER_CONVENTION) -> np.ndarray:
    """Inverse of :func:`rotation_from_euler`; returns (roll_x, pitch_y, yaw_z) degrees.

    At gimbal lock (|pitch| = 90 deg) the roll angle is set to 0.
    """
    if convention != EULER_CONVENTION:
        raise ContractError(f"unsupported Euler convention {convention!r}")
    r = np.asarray(r, dtype=np.float64)
    sy = -r[2, 0]
    sy = min(1.0, max(-1.0, sy))
    pitch = math.asin(sy)
    if abs(abs(sy) - 1.0) < 1e-12:
        roll = 0.0
        yaw = math.atan2(-r[0, 1], r[1, 1])
    else:
        roll = math.atan2(r[2, 1], r[2, 2])
        yaw = math.atan2(r[1, 0], r[0, 0])
    return np.degrees([roll, pitch, yaw])


# ---------------------------------------------------------------- file IO

def save_xyz(path, pc: PointCloud) -> None:
    np.savetxt(path, pc.points, fmt="%.17g")


def load_xyz(path) -> PointCloud:
    pts = np.loadtxt(path, dtype=np.float64, ndmin=2)
    if pts.shape[1] != 3:
        raise ValueError(f"{path}: expected 3 columns, got {pts.shape[1]}")
    if np.isnan(pts).any():
        raise ValueError(f"{path}: NaN coordinate")
    return PointCloud(pts)


def save_ply(path, pc: PointCloud, colors: np.ndarray | None = None,
             scalars: dict[str, np.ndarray] | None = None, double: bool = True) -> None:
    """Binary little-endian PLY with x/y/z, optional uchar RGB and float scalars.

    ``double`` writes coordinates as 64-bit so a dataset round-trips exactly.
    """
    n = len(pc)
    scalars = scalars or {}
    ctype, cfmt = ("double", "<f8") if double else ("float", "<f4")
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}",
              f"property {ctype} x", f"property {ctype} y", f"property {ctype} z"]
    fields = [("x", cfmt), ("y", cfmt), ("z", cfmt)]
    if colors is not None:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    for name in scalars:
        header.append(f"property float {name}")
        fields.append((name, "<f4"))
    header.append("end_header")
    rec = np.zeros(n, dtype=fields)
    rec["x"], rec["y"], rec["z"] = pc.points.T
    if colors is not None:
        colors = np.asarray(colors, dtype=np.uint8)
        rec["red"], rec["green"], rec["blue"] = colors.T
    for name, vals in scalars.items():
        rec[name] = vals
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(rec.tobytes())


_PLY_TYPES = {"char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1", "short": "<i2",
              "int16": "<i2", "ushort": "<u2", "uint16": "<u2", "int": "<i4", "int32": "<i4",
              "uint": "<u4", "uint32": "<u4", "float": "<f4", "float32": "<f4",
              "double": "<f8", "float64": "<f8"}


def load_ply(path) -> PointCloud:
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise ValueError(f"{path}: not a PLY file")
    body_start = raw.index(b"\n", end) + 1
    lines = raw[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in lines:
        raise ValueError(f"{path}: only binary_little_endian PLY is supported")
    n, fields, in_vertex = 0, [], False
    for line in lines:
        parts = line.split()
        if parts[:1] == ["element"]:
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                n = int(parts[2])
        elif parts[:1] == ["property"] and in_vertex:
            if parts[1] == "list":
                raise ValueError(f"{path}: list properties in vertex element are unsupported")
            fields.append((parts[2], _PLY_TYPES[parts[1]]))
    rec = np.frombuffer(raw, dtype=fields, count=n, offset=body_start)
    try:
        pts = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    except ValueError as exc:
        raise ValueError(f"{path}: missing x/y/z properties") from exc
    if np.isnan(pts).any():
        raise ValueError(f"{path}: NaN coordinate")
    return PointCloud(pts)


def load_cloud(path) -> PointCloud:
    p = str(path).lower()
    if p.endswith(".ply"):
        return load_ply(path)
    return load_xyz(path)

"""Partial-overlap pair synthesis and ground-truth labelling."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .geom3d import (EULER_CONVENTION, PointCloud, RigidTransform, apply, load_ply,
                     pairwise_sq_dists, random_transform, random_unit_vector, save_ply)

META_VERSION = 1
SHAPE_FAMILIES = ("box", "sphere", "cylinder", "torus")


class GenerationError(RuntimeError):
    pass


@dataclass
class GenConfig:
    points_per_cloud: int = 1024
    keep_fraction: float = 0.7
    rot_range_deg: float = 45.0
    trans_range: float = 0.5
    noise_sigma: float = 0.01
    noise_clip: float = 0.05
    shuffle: bool = True
    match_radius: float = 0.075
    deform: float = 0.15

    def __post_init__(self):
        if not 0.0 < self.keep_fraction <= 1.0:
            raise ValueError("keep_fraction must lie in (0, 1]")
        if self.noise_clip < 0:
            raise ValueError("noise_clip must be non-negative")
        if self.keep_count < 3:
            raise ValueError("keep_fraction * points_per_cloud must be at least 3")

    @property
    def keep_count(self) -> int:
        return int(round(self.keep_fraction * self.points_per_cloud))

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown generation config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class PairSample:
    source: PointCloud
    target: PointCloud
    gt_transform: RigidTransform
    gt_correspondence: np.ndarray
    gt_overlap_p: np.ndarray
    gt_overlap_q: np.ndarray
    complete_source: PointCloud
    complete_target: PointCloud
    meta: dict = field(default_factory=dict)
    clean_source: PointCloud | None = None
    clean_target: PointCloud | None = None


# ---------------------------------------------------------------- shapes

def _box(n, rng):
    d = rng.uniform(0.4, 1.0, size=3)
    areas = np.array([d[1] * d[2], d[0] * d[2], d[0] * d[1]] * 2)
    face = rng.choice(6, size=n, p=areas / areas.sum())
    pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * d
    axis = face % 3
    sign = np.where(face < 3, 1.0, -1.0)
    pts[np.arange(n), axis] = sign * d[axis]
    return pts


def _sphere(n, rng):
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * rng.uniform(0.6, 1.0, size=3)


def _cylinder(n, rng):
    h, r = rng.uniform(0.4, 1.0), rng.uniform(0.3, 0.7)
    side, cap = 2 * np.pi * r * 2 * h, np.pi * r * r
    part = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    theta = rng.uniform(0, 2 * np.pi, size=n)
    rad = np.where(part == 0, r, r * np.sqrt(rng.uniform(0, 1, size=n)))
    z = np.where(part == 1, h, np.where(part == 2, -h, rng.uniform(-h, h, size=n)))
    return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)


def _torus(n, rng):
    big, small = 0.7, rng.uniform(0.15, 0.3)
    out = np.empty((0, 3))
    while len(out) < n:
        m = 2 * (n - len(out))
        u, v = rng.uniform(0, 2 * np.pi, size=(2, m))
        # area element is proportional to big + small * cos(v)
        ok = rng.uniform(0, 1, size=m) <= (big + small * np.cos(v)) / (big + small)
        u, v = u[ok], v[ok]
        ring = big + small * np.cos(v)
        out = np.concatenate([out, np.stack([ring * np.cos(u), ring * np.sin(u), small * np.sin(v)], 1)])
    return out[:n]


_SAMPLERS = {"box": _box, "sphere": _sphere, "cylinder": _cylinder, "torus": _torus}


def normalize_unit_sphere(pts: np.ndarray) -> np.ndarray:
    pts = pts - pts.mean(axis=0)
    return pts / np.linalg.norm(pts, axis=1).max()


def sample_primitive(family: str, n: int, rng: np.random.Generator, deform: float = 0.15) -> PointCloud:
    """Uniform surface samples of a primitive with random proportions.

    ``deform`` > 0 adds a smooth random warp x + a sin(B x + phi) so the shape
    has no exact rotational symmetry. The result is centred and scaled into
    the unit ball.
    """
    if family not in _SAMPLERS:
        raise ValueError(f"unknown shape family {family!r}; choose from {SHAPE_FAMILIES}")
    pts = _SAMPLERS[family](n, rng)
    if deform > 0:
        freq = rng.standard_normal((3, 3)) * 1.5
        phase = rng.uniform(0, 2 * np.pi, size=3)
        pts = pts + deform * np.sin(pts @ freq + phase)
    return PointCloud(normalize_unit_sphere(pts))


# ---------------------------------------------------------------- labels

def ground_truth_correspondence(p, q, t_gt: RigidTransform, r: float) -> np.ndarray:
    """Binary slack matrix from mutual nearest neighbours closer than r after T(P)."""
    if r <= 0:
        raise ValueError("match radius must be positive")
    pp = apply(t_gt, p.points if isinstance(p, PointCloud) else np.asarray(p, dtype=np.float64))
    qq = q.points if isinstance(q, PointCloud) else np.asarray(q, dtype=np.float64)
    n, m = len(pp), len(qq)
    d2 = pairwise_sq_dists(pp, qq)
    nn_q = np.argmin(d2, axis=1)          # for each T(p_i), nearest q
    nn_p = np.argmin(d2, axis=0)          # for each q_j, nearest T(p)
    c = np.zeros((n + 1, m + 1))
    rows = np.arange(n)
    mutual = (nn_p[nn_q] == rows) & (d2[rows, nn_q] < r * r)
    c[rows[mutual], nn_q[mutual]] = 1.0
    c[:n, m] = 1.0 - c[:n, :m].sum(axis=1)
    c[n, :m] = 1.0 - c[:n, :m].sum(axis=0)
    return c


def ground_truth_overlap(c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    c = np.asarray(c)
    n, m = c.shape[0] - 1, c.shape[1] - 1
    block = c[:n, :m]
    return ((block.sum(axis=1) == 1).astype(np.int64),
            (block.sum(axis=0) == 1).astype(np.int64))


def overlap_ratio(sample: PairSample) -> float:
    o = np.asarray(sample.gt_overlap_p)
    return float(o.mean()) if len(o) else 0.0


# ---------------------------------------------------------------- generation

def halfspace_crop(points: np.ndarray, keep: int, normal: np.ndarray) -> np.ndarray:
    """Indices of the ``keep`` points with the largest projection on ``normal``."""
    proj = points @ normal
    return np.sort(np.argsort(-proj, kind="stable")[:keep])


def generate_pair(shape, cfg: GenConfig, rng: np.random.Generator) -> PairSample:
    """Crop two copies with independent half-space directions, move one, add noise, shuffle.

    ``shape`` is a PointCloud (subsampled to ``points_per_cloud``) or the name
    of a procedural family.
    """
    if isinstance(shape, str):
        family = shape
        full = sample_primitive(shape, cfg.points_per_cloud, rng, cfg.deform).points
    else:
        family = "file"
        pts = shape.points
        if len(pts) < cfg.points_per_cloud:
            raise GenerationError(f"shape has {len(pts)} points, need {cfg.points_per_cloud}")
        if len(pts) > cfg.points_per_cloud:
            pts = pts[np.sort(rng.choice(len(pts), cfg.points_per_cloud, replace=False))]
        full = normalize_unit_sphere(pts)
    keep = cfg.keep_count
    if keep < 3:
        raise GenerationError("crop keeps fewer than 3 points")
    n_p, n_q = random_unit_vector(rng), random_unit_vector(rng)
    idx_p, idx_q = halfspace_crop(full, keep, n_p), halfspace_crop(full, keep, n_q)
    t = random_transform(rng, cfg.rot_range_deg, cfg.trans_range)
    clean_p = full[idx_p]
    clean_q = apply(t, full[idx_q])

    def noise(k):
        return np.clip(rng.normal(0.0, cfg.noise_sigma, size=(k, 3)), -cfg.noise_clip, cfg.noise_clip)

    noisy_p = clean_p + noise(len(clean_p))
    noisy_q = clean_q + noise(len(clean_q))
    perm_p = rng.permutation(len(noisy_p)) if cfg.shuffle else np.arange(len(noisy_p))
    perm_q = rng.permutation(len(noisy_q)) if cfg.shuffle else np.arange(len(noisy_q))
    src, tgt = PointCloud(noisy_p[perm_p]), PointCloud(noisy_q[perm_q])
    c = ground_truth_correspondence(src, tgt, t, cfg.match_radius)
    op, oq = ground_truth_overlap(c)
    meta = {"shape_family": family,
            "crop": {"rule": "halfspace", "independent_directions": True,
                     "normal_p": n_p.tolist(), "normal_q": n_q.tolist(), "keep": keep}}
    return PairSample(src, tgt, t, c, op, oq, PointCloud(full), PointCloud(apply(t, full)), meta,
                      PointCloud(clean_p[perm_p]), PointCloud(clean_q[perm_q]))


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for sample ``index`` of a run seeded with ``seed``."""
    return np.random.default_rng([seed, index])


def generate_dataset(n: int, cfg: GenConfig, seed: int, families=SHAPE_FAMILIES,
                     start: int = 0) -> list[PairSample]:
    out = []
    for k in range(start, start + n):
        s = generate_pair(families[k % len(families)], cfg, sample_rng(seed, k))
        s.meta["seed"] = [int(seed), int(k)]
        out.append(s)
    return out


# ---------------------------------------------------------------- disk layout

META_SCHEMA = {
    "type": "object",
    "required": ["format_version", "gt_rotation", "gt_translation", "gt_pairs",
                 "gt_overlap_p", "gt_overlap_q", "n_source", "n_target", "config",
                 "seed", "shape_family", "crop", "euler_convention"],
    "additionalProperties": False,
    "properties": {
        "format_version": {"const": META_VERSION},
        "gt_rotation": {"type": "array", "items": {"type": "number"}, "minItems": 9, "maxItems": 9},
        "gt_translation": {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3},
        "gt_pairs": {"type": "array", "items": {"type": "array", "items": {"type": "integer"},
                                                "minItems": 2, "maxItems": 2}},
        "gt_overlap_p": {"type": "array", "items": {"enum": [0, 1]}},
        "gt_overlap_q": {"type": "array", "items": {"enum": [0, 1]}},
        "n_source": {"type": "integer", "minimum": 3},
        "n_target": {"type": "integer", "minimum": 3},
        "config": {"type": "object"},
        "seed": {"type": "array", "items": {"type": "integer"}},
        "shape_family": {"type": "string"},
        "crop": {"type": "object", "required": ["rule", "independent_directions"]},
        "euler_convention": {"type": "string"},
    },
}


def sample_meta(sample: PairSample, cfg: GenConfig) -> dict:
    c = sample.gt_correspondence
    n, m = c.shape[0] - 1, c.shape[1] - 1
    ii, jj = np.nonzero(c[:n, :m] > 0.5)
    return {"format_version": META_VERSION,
            "gt_rotation": sample.gt_transform.rotation.reshape(-1).tolist(),
            "gt_translation": sample.gt_transform.translation.tolist(),
            "gt_pairs": [[int(i), int(j)] for i, j in zip(ii, jj)],
            "gt_overlap_p": [int(x) for x in sample.gt_overlap_p],
            "gt_overlap_q": [int(x) for x in sample.gt_overlap_q],
            "n_source": n, "n_target": m,
            "config": asdict(cfg),
            "seed": list(sample.meta.get("seed", [])),
            "shape_family": sample.meta.get("shape_family", "unknown"),
            "crop": sample.meta.get("crop", {"rule": "halfspace", "independent_directions": True}),
            "euler_convention": EULER_CONVENTION}


def save_sample(directory, sample: PairSample, cfg: GenConfig) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_ply(d / "source.ply", sample.source)
    save_ply(d / "target.ply", sample.target)
    save_ply(d / "complete.ply", sample.complete_source)
    (d / "meta.json").write_text(json.dumps(sample_meta(sample, cfg), indent=1, sort_keys=True))


def load_sample(directory) -> PairSample:
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text())
    src, tgt = load_ply(d / "source.ply"), load_ply(d / "target.ply")
    t = RigidTransform(np.array(meta["gt_rotation"]).reshape(3, 3), np.array(meta["gt_translation"]))
    n, m = len(src), len(tgt)
    c = np.zeros((n + 1, m + 1))
    for i, j in meta["gt_pairs"]:
        c[i, j] = 1.0
    c[:n, m] = 1.0 - c[:n, :m].sum(axis=1)
    c[n, :m] = 1.0 - c[:n, :m].sum(axis=0)
    complete = load_ply(d / "complete.ply") if (d / "complete.ply").exists() else src
    return PairSample(src, tgt, t, c, np.array(meta["gt_overlap_p"]), np.array(meta["gt_overlap_q"]),
                      complete, PointCloud(apply(t, complete.points)), meta)


def list_samples(root) -> list[Path]:
    root = Path(root)
    return sorted(p for p in root.iterdir() if (p / "meta.json").exists()) if root.exists() else []

"""Overlap-weighted hard correspondences and the closed-form rigid solve."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .geom3d import PointCloud, RigidTransform
from .matching import lap_solve


class NoCorrespondence(RuntimeError):
    """The hard assignment selected no non-slack pair."""


class UnderDetermined(ValueError):
    """Fewer than three weighted pairs."""


@dataclass
class RegistrationResult:
    transform: RigidTransform
    hard_correspondence: np.ndarray
    weights: list                       # (i, j, w) triples over selected pairs
    overlap_p: np.ndarray
    overlap_q: np.ndarray
    uncertainty_p: np.ndarray
    uncertainty_q: np.ndarray
    failed: bool = False
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "rotation": self.transform.rotation.reshape(-1).tolist(),
            "translation": self.transform.translation.tolist(),
            "overlap_p": self.overlap_p.tolist(),
            "overlap_q": self.overlap_q.tolist(),
            "uncertainty_p": self.uncertainty_p.tolist(),
            "uncertainty_q": self.uncertainty_q.tolist(),
            "correspondences": [[int(i), int(j), float(w)] for i, j, w in self.weights],
            "failed": bool(self.failed),
            "diagnostics": self.diagnostics,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RegistrationResult":
        t = RigidTransform(np.array(d["rotation"]).reshape(3, 3), np.array(d["translation"]))
        op, oq = np.array(d["overlap_p"]), np.array(d["overlap_q"])
        hard = np.zeros((len(op) + 1, len(oq) + 1))
        for i, j, _ in d["correspondences"]:
            hard[int(i), int(j)] = 1.0
        hard[:-1, -1] = 1.0 - hard[:-1, :-1].sum(axis=1)
        hard[-1, :-1] = 1.0 - hard[:-1, :-1].sum(axis=0)
        return cls(t, hard, [tuple(x) for x in d["correspondences"]], op, oq,
                   np.array(d["uncertainty_p"]), np.array(d["uncertainty_q"]),
                   d["failed"], d.get("diagnostics", {}))


def correspondence_weights(hard: np.ndarray, o_p, o_q) -> list[tuple[int, int, float]]:
    """w_ij = o_i o_j / sum over selected pairs of o_i o_j."""
    hard = np.asarray(hard)
    n, m = hard.shape[0] - 1, hard.shape[1] - 1
    ii, jj = np.nonzero(hard[:n, :m] > 0.5)
    if len(ii) == 0:
        raise NoCorrespondence("no non-slack pair selected")
    o_p, o_q = np.asarray(o_p).reshape(-1), np.asarray(o_q).reshape(-1)
    prod = o_p[ii] * o_q[jj]
    total = prod.sum()
    w = prod / total if total > 0 else np.full(len(prod), 1.0 / len(prod))
    return [(int(i), int(j), float(x)) for i, j, x in zip(ii, jj, w)]


def weighted_svd(p_sel, q_sel, w, return_info: bool = False):
    """Weighted least-squares rotation and translation taking p_sel onto q_sel.

    R = V diag(1, 1, det(V U^T)) U^T for H = U S V^T, so a reflection is never
    returned even when it would fit better.
    """
    p = np.asarray(p_sel, dtype=np.float64).reshape(-1, 3)
    q = np.asarray(q_sel, dtype=np.float64).reshape(-1, 3)
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    if len(p) != len(q) or len(p) != len(w):
        raise ValueError("weighted_svd: mismatched pair counts")
    if np.count_nonzero(w > 0) < 3:
        raise UnderDetermined("need at least three pairs with positive weight")
    w = w / w.sum()
    pc = w @ p
    qc = w @ q
    h = (p - pc).T @ ((q - qc) * w[:, None])
    u, s, vt = np.linalg.svd(h)
    v = vt.T
    d = np.sign(np.linalg.det(v @ u.T))
    if d == 0:
        d = 1.0
    r = v @ np.diag([1.0, 1.0, d]) @ u.T
    t = RigidTransform(r, qc - r @ pc)
    if return_info:
        cond = float(s[1] / s[0]) if s[0] > 0 else 0.0
        return t, {"sigma_ratio": cond, "reflection_corrected": bool(d < 0)}
    return t


def solve_from_soft(c_bar: np.ndarray, o_p: np.ndarray, o_q: np.ndarray,
                    p: np.ndarray, q: np.ndarray):
    """LAP -> overlap weights -> weighted SVD, with identity fallback."""
    hard = lap_solve(c_bar)
    diag = {"n_selected": int(hard[:-1, :-1].sum())}
    try:
        weights = correspondence_weights(hard, o_p, o_q)
        ii = [i for i, _, _ in weights]
        jj = [j for _, j, _ in weights]
        t, info = weighted_svd(p[ii], q[jj], [x for _, _, x in weights], return_info=True)
        diag.update(info)
        return t, hard, weights, False, diag
    except (NoCorrespondence, UnderDetermined) as exc:
        diag["failure"] = type(exc).__name__
        return RigidTransform.identity(), hard, [], True, diag


def register_pair(p, q, model, training: bool = False, rng: np.random.Generator | None = None,
                  inputs=None) -> RegistrationResult:
    """Full pipeline for one pair. ``model`` is a :class:`~utopic.network.UTOPICNet`."""
    from .network import prepare_cloud

    p_pts = p.points if isinstance(p, PointCloud) else np.asarray(p, dtype=np.float64)
    q_pts = q.points if isinstance(q, PointCloud) else np.asarray(q, dtype=np.float64)
    if len(p_pts) < 3 or len(q_pts) < 3:
        raise ValueError("both clouds need at least 3 points")
    if inputs is None:
        inputs = (prepare_cloud(p_pts, model.cfg), prepare_cloud(q_pts, model.cfg))
    out = model.forward(inputs[0], inputs[1], rng=rng, training=training, with_completion=False)
    o_p = out["overlap_p"].data.reshape(-1)
    o_q = out["overlap_q"].data.reshape(-1)
    t, hard, weights, failed, diag = solve_from_soft(out["c_bar"].data, o_p, o_q, p_pts, q_pts)
    diag["sinkhorn_iters"] = model.cfg.sinkhorn_iters
    return RegistrationResult(t, hard, weights, o_p, o_q,
                              out["dist_p"].uncertainty.data.reshape(-1) * np.ones(len(o_p)),
                              out["dist_q"].uncertainty.data.reshape(-1) * np.ones(len(o_q)),
                              failed, diag)

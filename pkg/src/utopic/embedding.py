"""Rigid-invariant pairwise relation channels: distance, triplet angle, perimeter difference."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffmath import ContractError
from .geom3d import PointCloud, knn_all


def _points(pc) -> np.ndarray:
    return pc.points if isinstance(pc, PointCloud) else np.asarray(pc, dtype=np.float64)


@dataclass
class RelationEmbedding:
    rho: np.ndarray
    alpha: np.ndarray
    eta: np.ndarray

    @property
    def g(self) -> np.ndarray:
        """Stacked N x N x 3 array (rho, alpha, eta)."""
        return np.stack([self.rho, self.alpha, self.eta], axis=-1)

    @property
    def n(self) -> int:
        return self.rho.shape[0]

    @property
    def nbytes(self) -> int:
        return self.rho.nbytes + self.alpha.nbytes + self.eta.nbytes


def pairwise_distance(pc) -> np.ndarray:
    p = _points(pc)
    diff = p[:, None, :] - p[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def two_nn(pc) -> np.ndarray:
    return knn_all(_points(pc), 2, exclude_self=True)


def triplet_angle(pc, knn2: np.ndarray) -> np.ndarray:
    """alpha[i, j] = angle between (p_k1 - p_i) + (p_k2 - p_i) and p_j - p_i.

    Zero-length vectors give an angle of 0.
    """
    p = _points(pc)
    anchor = (p[knn2[:, 0]] - p) + (p[knn2[:, 1]] - p)          # N x 3
    offs = p[None, :, :] - p[:, None, :]                        # N x N x 3, row i: p_j - p_i
    dot = np.einsum("ik,ijk->ij", anchor, offs)
    cross = np.cross(anchor[:, None, :], offs)
    # atan2 stays accurate for near-parallel vectors where arccos does not
    alpha = np.arctan2(np.linalg.norm(cross, axis=2), dot)
    degenerate = (np.linalg.norm(anchor, axis=1)[:, None] == 0) | (np.linalg.norm(offs, axis=2) == 0)
    alpha[degenerate] = 0.0
    return alpha


def triangle_perimeter(pc, knn2: np.ndarray) -> np.ndarray:
    p = _points(pc)
    a, b = p[knn2[:, 0]], p[knn2[:, 1]]
    return (np.linalg.norm(p - a, axis=1) + np.linalg.norm(p - b, axis=1)
            + np.linalg.norm(a - b, axis=1))


def perimeter_difference(pc, knn2: np.ndarray) -> np.ndarray:
    per = triangle_perimeter(pc, knn2)
    return per[:, None] - per[None, :]


def relation_embedding(pc, knn2: np.ndarray | None = None) -> RelationEmbedding:
    p = _points(pc)
    if len(p) < 3:
        raise ContractError("relation embedding needs at least 3 points")
    if knn2 is None:
        knn2 = two_nn(p)
    return RelationEmbedding(pairwise_distance(p), triplet_angle(p, knn2),
                             perimeter_difference(p, knn2))

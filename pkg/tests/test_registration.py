import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from utopic.geom3d import RigidTransform, random_transform, rotation_error_deg
from utopic.registration import (NoCorrespondence, RegistrationResult, UnderDetermined,
                                 correspondence_weights, solve_from_soft, weighted_svd)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(3, 30))
def test_exact_recovery(seed, n):
    rng = np.random.default_rng(seed)
    t = random_transform(rng, 180.0, 2.0)
    p = rng.normal(size=(n, 3))
    w = rng.uniform(0.1, 1.0, size=n)
    est = weighted_svd(p, p @ t.rotation.T + t.translation, w)
    assert rotation_error_deg(est.rotation, t.rotation) < 1e-6
    assert np.linalg.norm(est.translation - t.translation) < 1e-9
    assert np.linalg.det(est.rotation) == pytest.approx(1.0)


def test_reflection_is_never_returned(rng):
    p = rng.normal(size=(10, 3))
    q = p * np.array([1.0, 1.0, -1.0])     # a mirror fits exactly
    est, info = weighted_svd(p, q, np.ones(10), return_info=True)
    assert np.linalg.det(est.rotation) == pytest.approx(1.0)
    assert info["reflection_corrected"]


def test_weights_select_inliers(rng):
    t = random_transform(rng)
    p = rng.normal(size=(20, 3))
    q = p @ t.rotation.T + t.translation
    q[:5] += rng.normal(size=(5, 3))
    w = np.r_[np.zeros(5), np.ones(15)]
    est = weighted_svd(p, q, w)
    assert rotation_error_deg(est.rotation, t.rotation) < 1e-6


def test_under_determined():
    with pytest.raises(UnderDetermined):
        weighted_svd(np.zeros((3, 3)), np.zeros((3, 3)), [1.0, 1.0, 0.0])
    with pytest.raises(ValueError):
        weighted_svd(np.zeros((3, 3)), np.zeros((4, 3)), [1.0, 1.0, 1.0])


def test_correspondence_weights_normalise_products():
    hard = np.zeros((4, 4))
    hard[0, 1] = hard[2, 0] = 1
    hard[1, 3] = 1
    hard[3, 2] = 1
    w = correspondence_weights(hard, [0.5, 0.9, 0.2], [0.4, 1.0, 0.3])
    assert w == [(0, 1, pytest.approx(0.5 / 0.58)), (2, 0, pytest.approx(0.08 / 0.58))]
    with pytest.raises(NoCorrespondence):
        correspondence_weights(np.eye(3)[[2, 2, 2]], [1, 1], [1, 1])


def test_solve_from_soft_falls_back_to_identity(rng):
    c = np.zeros((4, 4))
    c[:, 3] = 1.0
    c[3, :] = 1.0
    t, hard, weights, failed, diag = solve_from_soft(c, np.ones(3), np.ones(3), rng.normal(size=(3, 3)),
                                                     rng.normal(size=(3, 3)))
    assert failed and weights == [] and diag["failure"] == "NoCorrespondence"
    assert np.array_equal(t.rotation, np.eye(3))


def test_result_json_round_trip(rng):
    t = random_transform(rng)
    hard = np.zeros((3, 3))
    hard[0, 1] = hard[1, 0] = 1
    res = RegistrationResult(t, hard, [(0, 1, 0.5), (1, 0, 0.5)], np.array([0.2, 0.8]),
                             np.array([0.6, 0.4]), np.zeros(2), np.ones(2))
    back = RegistrationResult.from_dict(json.loads(res.to_json()))
    assert np.array_equal(back.transform.rotation, t.rotation)
    assert np.array_equal(back.hard_correspondence, hard)

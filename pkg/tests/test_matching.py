import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from utopic import diffmath as dm
from utopic.diffmath import DimensionError, Tensor, grad_check
from utopic.matching import (affinity, assignment_objective, hard_pairs, lap_solve, marginal_error,
                             pad_slack, sinkhorn_slack)

from oracles import lap_brute_force


def test_affinity_bilinear_form(rng):
    fp, fq, w = rng.normal(size=(4, 3)), rng.normal(size=(5, 2)), rng.normal(size=(3, 2))
    assert np.allclose(affinity(fp, fq, w).data, fp @ w @ fq.T)
    with pytest.raises(DimensionError):
        affinity(fp, fq, rng.normal(size=(2, 2)))


def test_pad_slack_layout():
    c = pad_slack(np.ones((2, 3)), slack_init=-1.5).data
    assert c.shape == (3, 4)
    assert np.all(c[:2, 3] == -1.5) and np.all(c[2] == -1.5)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 64), st.integers(1, 48), st.integers(0, 2 ** 32 - 1))
def test_sinkhorn_converges_with_many_iterations(n, m, seed):
    a = np.random.default_rng(seed).uniform(-5, 5, size=(n, m))
    c = sinkhorn_slack(a, iters=200).data
    assert marginal_error(c) < 1e-6
    assert np.all(c >= 0)


def test_sinkhorn_last_step_fixes_columns(rng):
    # whatever the iteration count, non-slack columns are exactly normalised
    c = sinkhorn_slack(rng.uniform(-5, 5, size=(7, 9)), iters=1).data
    assert np.allclose(c[:, :9].sum(axis=0), 1.0, atol=1e-12)


def test_sinkhorn_slack_cell_untouched(rng):
    c = sinkhorn_slack(rng.normal(size=(4, 4)), iters=3, slack_init=0.7).data
    assert c[-1, -1] == pytest.approx(np.exp(0.7))


def test_sinkhorn_gradient(rng):
    w = Tensor(rng.normal(size=(4, 5)))
    assert grad_check(lambda a: dm.tsum(sinkhorn_slack(a, iters=5) * w), rng.normal(size=(3, 4))) < 1e-6


def test_sinkhorn_rejects_zero_iterations():
    with pytest.raises(dm.ContractError):
        sinkhorn_slack(np.zeros((2, 2)), iters=0)


def test_lap_matches_brute_force(rng):
    for _ in range(60):
        n, m = rng.integers(1, 5), rng.integers(1, 6)
        c = rng.uniform(0, 1, size=(n + 1, m + 1))
        hard = lap_solve(c)
        assert assignment_objective(c, hard) == pytest.approx(lap_brute_force(c), abs=1e-12)


def test_lap_hard_matrix_is_a_partial_permutation(rng):
    c = rng.uniform(size=(8, 6))
    hard = lap_solve(c)
    assert set(np.unique(hard)) <= {0.0, 1.0}
    assert np.all(hard[:-1].sum(axis=1) == 1) and np.all(hard[:, :-1].sum(axis=0) == 1)
    pairs = hard_pairs(hard)
    assert len({i for i, _ in pairs}) == len(pairs) == len({j for _, j in pairs})


def test_lap_slack_dominant_rows_stay_unmatched():
    c = np.array([[0.1, 0.2, 0.9], [0.8, 0.1, 0.0], [0.0, 0.3, 0.0]])
    hard = lap_solve(c)
    assert hard_pairs(hard) == [(1, 0)]
    assert hard[0, 2] == 1


def test_lap_rejects_nonfinite():
    with pytest.raises(ValueError):
        lap_solve(np.array([[np.nan, 0], [0, 0]]))

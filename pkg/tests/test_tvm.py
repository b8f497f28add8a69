import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from advlab.imagecore import InvalidInputError, SeedStream
from advlab.tvm import (
    TvmConfig,
    objective,
    sample_mask,
    tv_norm,
    tvm_defense,
    tvm_defense_batch,
    tvm_reconstruct,
    tvm_reconstruct_batch,
)
from oracles import cvxpy_tv_optimum, tv_objective, tv_value

small_images = hnp.arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 3)), elements=st.floats(-2, 2))


def random_instance(seed, shape=(8, 8, 1), keep=0.5):
    x = np.random.default_rng(seed).random(shape)
    return x, sample_mask(shape, keep, SeedStream(seed, 77))


def test_tv_fixtures():
    assert tv_norm(np.full((5, 4, 3), 0.7), 1) == 0.0
    assert tv_norm(np.full((5, 4, 3), 0.7), 2) == 0.0
    z = np.array([[0.0, 1.0], [0.0, 1.0]])[..., None]
    assert tv_norm(z, 1) == 2.0
    assert tv_norm(z, 2) == math.sqrt(2)
    with pytest.raises(InvalidInputError):
        tv_norm(z, 3)


@given(small_images, st.sampled_from([1, 2]), st.floats(-3, 3))
def test_tv_matches_loops_and_is_homogeneous(z, p, c):
    assert tv_norm(z, p) == pytest.approx(tv_value(z, p), rel=1e-12, abs=1e-12)
    assert tv_norm(c * z, p) == pytest.approx(abs(c) * tv_norm(z, p), rel=1e-9, abs=1e-12)


def test_mask_sampling():
    m = sample_mask((32, 32, 3), 0.5, SeedStream(0))
    assert 0.44 <= m.mean() <= 0.56
    assert set(np.unique(m)) <= {0.0, 1.0}
    np.testing.assert_array_equal(m, sample_mask((32, 32, 3), 0.5, SeedStream(0)))
    assert np.all(sample_mask((4, 4, 1), 1.0, SeedStream(1)) == 1)
    with pytest.raises(InvalidInputError):
        sample_mask((2, 2, 1), 0.0, SeedStream(0))


def test_config_validation():
    for bad in (dict(lam=0), dict(p=3), dict(keep_prob=1.5), dict(tol=0), dict(max_iter=0)):
        with pytest.raises(InvalidInputError):
            TvmConfig(**bad)


def test_objective_matches_oracle_formula():
    x, m = random_instance(0, (6, 5, 3))
    z = np.random.default_rng(1).random(x.shape)
    for p in (1, 2):
        assert objective(z[None], x[None], m[None], 0.07, p)[0] == pytest.approx(tv_objective(z, x, m, 0.07, p), rel=1e-12)


def test_tiny_lambda_with_full_mask_is_identity():
    x = np.random.default_rng(2).random((8, 8, 3))
    sol = tvm_reconstruct(x, np.ones_like(x), TvmConfig(lam=1e-8))
    assert np.abs(sol.z - x).max() < 1e-4
    out = tvm_defense(x, TvmConfig(lam=1e-8, keep_prob=1.0), SeedStream(3))
    assert np.abs(out - x).max() < 1e-4


@pytest.mark.parametrize("keep", [0.3, 1.0])
def test_constant_input_is_fixed(keep):
    x = np.full((8, 8, 3), 0.42)
    _, m = random_instance(3, x.shape, keep)
    sol = tvm_reconstruct(x, m, TvmConfig(lam=0.1))
    np.testing.assert_allclose(sol.z, 0.42, atol=1e-6)
    assert sol.objective < 1e-6


@pytest.mark.parametrize("p", [1, 2])
@pytest.mark.parametrize("seed", range(3))
def test_matches_interior_point_optimum(p, seed):
    x, m = random_instance(10 + seed, (8, 8, 2))
    lam = 0.03
    sol = tvm_reconstruct(x, m, TvmConfig(lam=lam, p=p, max_iter=3000, tol=1e-9))
    ref = cvxpy_tv_optimum(x, m, lam, p)
    achieved = tv_objective(sol.z.astype(np.float64), x, m, lam, p)
    assert achieved <= ref * (1 + 1e-3)
    assert sol.objective == pytest.approx(achieved, rel=1e-5)


def test_history_is_monotone_and_raw_history_recorded():
    x, m = random_instance(5, (8, 8, 3))
    sol = tvm_reconstruct(x, m, TvmConfig(lam=0.05, tol=1e-8, max_iter=300))
    h = sol.history
    assert len(h) == sol.iterations + 1 == len(sol.raw_history)
    assert all(b <= a + 1e-9 for a, b in zip(h[5:], h[6:]))
    assert min(sol.raw_history) == pytest.approx(h[-1])


def test_non_convergence_reports_best_iterate():
    x, m = random_instance(6, (8, 8, 1))
    sol = tvm_reconstruct(x, m, TvmConfig(lam=0.05, tol=1e-12, max_iter=5))
    assert not sol.converged and sol.iterations == 5
    assert sol.objective == pytest.approx(min(sol.history))


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_midpoint_never_beats_solver(seed):
    x, m = random_instance(seed, (6, 6, 1))
    lam = 0.05
    sol = tvm_reconstruct(x, m, TvmConfig(lam=lam, tol=1e-9, max_iter=2000))
    other = np.random.default_rng(seed + 1).random(x.shape)
    mid = 0.5 * (sol.z + other)
    assert tv_objective(mid, x, m, lam, 2) >= sol.objective * (1 - 1e-4)


def test_batch_matches_single_and_output_in_box():
    xs = np.random.default_rng(7).random((3, 8, 8, 3))
    masks = np.stack([sample_mask(x.shape, 0.5, SeedStream(8, i)) for i, x in enumerate(xs)])
    cfg = TvmConfig(lam=0.1)
    batch = tvm_reconstruct_batch(xs, masks, cfg)
    for x, m, s in zip(xs, masks, batch):
        single = tvm_reconstruct(x, m, cfg)
        np.testing.assert_allclose(single.z, s.z, atol=1e-6)
        assert s.z.min() >= 0 and s.z.max() <= 1
        assert s.z.dtype == np.float32


def test_defense_is_randomized_and_deterministic():
    x = np.random.default_rng(9).random((16, 16, 3))
    cfg = TvmConfig(lam=0.1, tol=1e-4)
    a = tvm_defense(x, cfg, SeedStream(1, 1))
    np.testing.assert_array_equal(a, tvm_defense(x, cfg, SeedStream(1, 1)))
    assert np.any(a != tvm_defense(x, cfg, SeedStream(1, 2)))
    b = tvm_defense_batch(x[None], cfg, [SeedStream(1, 1)])
    np.testing.assert_allclose(b[0], a, atol=1e-6)


def test_reconstruction_removes_total_variation_from_noise():
    x = np.clip(0.5 + np.random.default_rng(10).normal(0, 0.05, (16, 16, 3)), 0, 1)
    z = tvm_defense(x, TvmConfig(lam=0.1), SeedStream(2))
    assert tv_norm(z) < tv_norm(x)

import numpy as np
import pytest

from conftest import grid_argmin
from spectral_nlctf.kbr import (
    KbrParams, KbrState, blend_target, kbr_step, logsum_core, logsum_rank,
    scalar_logsum_prox, surrogate_objective, update_core, update_factor,
    update_mode_aux, update_multipliers,
)
from spectral_nlctf.tensor_core import kron_others, multi_mode_product, reconstruct, thin_svd, unfold


def test_params_validation_and_gamma():
    p = KbrParams(alpha=10, delta=0.02, theta=250, epsilon=1e-3)
    assert p.gamma == 1.0 / (0.02 + 3 * 250)
    for bad in (dict(alpha=0), dict(delta=-1), dict(theta=0), dict(epsilon=1.0)):
        with pytest.raises(ValueError):
            KbrParams(**bad)


def test_logsum_core_values():
    assert logsum_core(np.zeros((2, 2, 2)), 1e-3) == 0
    c = np.zeros((2, 2, 2))
    c[0, 0, 0] = 1e-3
    assert np.isclose(logsum_core(c, 1e-3), np.log(2) / -np.log(1e-3))
    assert np.isclose(logsum_core(c, 1e-3), 0.10034, atol=1e-5)
    r = np.random.default_rng(0).standard_normal((3, 3, 3))
    assert logsum_core(2 * r, 1e-3) > logsum_core(r, 1e-3)


def test_logsum_rank_values(rng):
    assert logsum_rank(np.zeros((3, 4)), 1e-3) == 0
    assert np.isclose(logsum_rank(np.eye(2), 1e-3), 2.0003, atol=1e-4)
    m = rng.standard_normal((4, 7))
    assert np.isclose(logsum_rank(m, 1e-3), logsum_rank(m.T, 1e-3))


def test_prox_zero_and_large_inputs():
    assert scalar_logsum_prox(0.0, 0.1, 1e-3) == 0
    gamma, eps = 0.05, 1e-3
    c1 = -1 / np.log(eps)
    thr = 2 * np.sqrt(c1 * gamma) - eps
    for d in (100 * thr, -150 * thr):
        out = scalar_logsum_prox(d, gamma, eps)
        assert abs(out - d) <= 0.01 * abs(d)
        assert np.isclose(out, d - np.sign(d) * c1 * gamma / abs(d), rtol=1e-3)


def test_prox_matches_grid_oracle(rng):
    for _ in range(200):
        gamma = 10 ** rng.uniform(-4, 0)
        eps = 10 ** rng.uniform(-4, -1)
        d = rng.uniform(-2, 2)
        out = scalar_logsum_prox(d, gamma, eps)
        assert abs(out - grid_argmin(d, gamma, eps)) <= 2e-4
        assert abs(out) <= abs(d)


def test_blend_formula(rng):
    cube = rng.standard_normal((3, 4, 2))
    st = KbrState.from_cube(cube, 1e-3)
    st.m_aux = [np.zeros_like(cube)] * 3
    st.z = [np.zeros_like(cube)] * 3
    p = KbrParams()
    target, w = rng.standard_normal(cube.shape), rng.standard_normal(cube.shape)
    assert np.allclose(blend_target(st, target, w, p), p.delta / (p.delta + 3 * p.theta) * (target + w))


def test_update_core_matches_oracle(rng):
    p = KbrParams(alpha=1, delta=1, theta=0.1, epsilon=1e-2)
    b = rng.standard_normal((4, 3, 5))
    st = KbrState.from_cube(rng.standard_normal((4, 3, 5)), p.epsilon)
    core = update_core(st, b, p)
    d = multi_mode_product(b, st.q, transpose=True)
    oracle = np.vectorize(lambda v: grid_argmin(v, p.gamma, p.epsilon))(d)
    assert np.max(np.abs(core - oracle)) <= 2e-4
    assert not np.any(update_core(st, np.zeros_like(b), p))
    eye = KbrState.from_cube(np.eye(4)[:, :3, None] * np.ones((1, 1, 5)), p.epsilon)
    eye.q = [np.eye(4), np.eye(3), np.eye(5)]
    assert not np.any(update_core(eye, np.full(b.shape, 1e-3), p))


def test_update_factor_properties(rng):
    cube = rng.standard_normal((5, 4, 3))
    st = KbrState.from_cube(cube, 1e-3)
    b = cube + 0.3 * rng.standard_normal(cube.shape)
    for mode in (1, 2, 3):
        old = st.q[mode - 1].copy()
        before = np.linalg.norm(reconstruct(st.core, st.q) - b)
        # Procrustes matrix from the explicit Kronecker product
        lmat = unfold(b, mode) @ kron_others(st.q, mode) @ unfold(st.core, mode).T
        new = update_factor(st, b, mode)
        assert np.sum(lmat * new) >= np.sum(lmat * old) - 1e-12
        assert np.linalg.norm(new.T @ new - np.eye(new.shape[1])) <= 1e-10
        assert np.linalg.norm(reconstruct(st.core, st.q) - b) <= before + 1e-9


def test_update_factor_fixed_point(rng):
    cube = rng.standard_normal((4, 3, 2))
    st = KbrState.from_cube(cube, 1e-3)
    b = reconstruct(st.core, st.q)
    update_factor(st, b, 2)
    assert np.linalg.norm(reconstruct(st.core, st.q) - b) <= 1e-9


def test_update_mode_aux_matches_oracle(rng):
    p = KbrParams(alpha=1.0, delta=1.0, theta=2.0, epsilon=1e-2)
    cube = rng.standard_normal((9, 4, 6))
    st = KbrState.from_cube(cube, p.epsilon)
    st.z = [0.1 * rng.standard_normal(cube.shape) for _ in range(3)]
    st.fstar[:] = [0.6, 0.5, 0.7]
    for mode in (1, 2, 3):
        others = [n for n in range(3) if n != mode - 1]
        weight = p.alpha / p.theta * st.fstar[others[0]] * st.fstar[others[1]]
        _, s_in, _ = thin_svd(unfold(st.recon + st.z[mode - 1], mode))
        out = update_mode_aux(st, mode, p)
        _, s_out, _ = thin_svd(unfold(out, mode))
        oracle = np.sort([grid_argmin(s, weight, p.epsilon) for s in s_in])[::-1]
        assert np.max(np.abs(s_out - oracle)) <= 2e-4


def test_update_mode_aux_zero_and_negligible_weight(rng):
    p = KbrParams(alpha=1e-30, theta=1.0)
    st = KbrState.from_cube(np.zeros((3, 2, 4)), p.epsilon)
    assert not np.any(update_mode_aux(st, 1, p))
    cube = rng.standard_normal((3, 2, 4))
    st = KbrState.from_cube(cube, p.epsilon)
    assert np.allclose(update_mode_aux(st, 2, p), cube, atol=1e-9)


def test_update_multipliers(rng):
    cube = rng.standard_normal((2, 3, 2))
    st = KbrState.from_cube(cube, 1e-3)
    update_multipliers(st)
    assert all(not np.any(z) for z in st.z)
    e = rng.standard_normal(cube.shape)
    st.m_aux = [st.recon + e] * 3
    update_multipliers(st)
    assert np.allclose(st.z[0], -e)
    update_multipliers(st)
    assert np.allclose(st.z[1], -2 * e)


def test_kbr_step_zero_target():
    st = KbrState.from_cube(np.zeros((4, 3, 5)), 1e-3)
    out = kbr_step(st, np.zeros((4, 3, 5)), np.zeros((4, 3, 5)), KbrParams())
    assert out.shape == (4, 3, 5) and not np.any(out)


def test_low_rank_recovery(rng):
    # delta >> theta so the data term dominates the blend.
    p = KbrParams(alpha=10, delta=1000.0, theta=1.0, epsilon=1e-3)
    for _ in range(5):
        core = rng.standard_normal((2, 2, 2))
        qs = [np.linalg.qr(rng.standard_normal((d, 2)))[0] for d in (8, 6, 7)]
        target = reconstruct(core, qs)
        st = KbrState.from_cube(target, p.epsilon)
        for _ in range(10):
            out = kbr_step(st, target, np.zeros_like(target), p)
        assert np.linalg.norm(out - target) / np.linalg.norm(target) <= 5e-2


def test_batched_step_equals_single(rng):
    cubes = rng.random((3, 6, 4, 5))
    p = KbrParams()
    batch = KbrState.from_cube(cubes, p.epsilon)
    kbr_step(batch, cubes, np.zeros_like(cubes), p)
    for i in range(3):
        single = KbrState.from_cube(cubes[i], p.epsilon)
        kbr_step(single, cubes[i], np.zeros_like(cubes[i]), p)
        assert np.allclose(batch.recon[i], single.recon, atol=1e-10)
        assert np.allclose(surrogate_objective(batch, cubes, 0 * cubes, p)[i],
                           surrogate_objective(single, cubes[i], 0 * cubes[i], p))

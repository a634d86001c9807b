import numpy as np
import pytest

from conftest import small_geometry
from spectral_nlctf.geometry import GeometryError
from spectral_nlctf.patches import PatchGridSpec, build_grid, extract_cubes
from spectral_nlctf.recon import (
    ReconConfig, ReconError, ReconState, _CubeGroup, _regularization, data_operator,
    nlctf_image_update, nlctf_reconstruct, sart_reconstruct, sart_sweep,
)

SMALL_PATCH = PatchGridSpec(patch_w=4, patch_h=4, stride=4, search_window=12, t=4)


def disk_phantom(n, s=2):
    yy, xx = np.mgrid[:n, :n] - (n - 1) / 2
    x = np.zeros((n, n, s))
    for k in range(s):
        x[..., k] = 0.3 * (xx**2 + yy**2 < (0.35 * n) ** 2) * (1 + 0.5 * k)
        x[..., k] += 0.4 * ((xx - 0.1 * n) ** 2 + (yy + 0.05 * n) ** 2 < (0.1 * n) ** 2)
    return x


@pytest.fixture(scope="module")
def op32():
    return data_operator(small_geometry(n=32, n_views=36, n_det=61))


@pytest.fixture(scope="module")
def op64():
    return data_operator(small_geometry(n=64, n_views=48, n_det=97))


def test_sart_rmse_monotone_noise_free(op64):
    truth = disk_phantom(64)
    y = op64.forward(truth)
    _, trace = sart_reconstruct(y, op64, 50, 0.5, reference=truth)
    for s in (1, 2):
        r = np.array([row[f"rmse_{s}"] for row in trace])
        assert np.all(np.diff(r) <= 0), r
        assert r[-1] < 0.5 * r[0]


def test_sart_fixed_point(op32):
    truth = disk_phantom(32)
    y = op32.forward(truth)
    x = sart_sweep(truth, y, op32, 0.7)
    assert np.max(np.abs(x - truth)) <= 1e-12


def test_sart_zero_case_and_shape_check(op32):
    x, trace = sart_reconstruct(np.zeros((36, 61, 2)), op32, 3, 0.5)
    assert not x.any() and len(trace) == 3
    with pytest.raises(GeometryError):
        sart_reconstruct(np.zeros((35, 61, 2)), op32, 1, 0.5)
    with pytest.raises(ReconError):
        sart_reconstruct(np.full((36, 61, 1), np.nan), op32, 1, 0.5)


def test_simultaneous_and_ordered_subsets_agree_at_fixed_point():
    geom = small_geometry(n=32, n_views=36, n_det=61)
    truth = disk_phantom(32)
    for n in (1, 4):
        op = data_operator(geom, n)
        assert np.max(np.abs(sart_sweep(truth, op.forward(truth), op, 1.0) - truth)) <= 1e-12


def test_mu_zero_equals_sart(op32):
    truth = disk_phantom(32)
    y = op32.forward(truth) + 0.01 * np.random.default_rng(0).standard_normal((36, 61, 2))
    cfg = ReconConfig(mu=0.0, beta=0.4, patch=SMALL_PATCH, outer_iters=6)
    x_n, trace = nlctf_reconstruct(y, op32, cfg)
    x_s, _ = sart_reconstruct(y, op32, 6, 0.4)
    assert x_n.tobytes() == x_s.tobytes()
    assert "multiplier_residual" not in trace[0]
    state = ReconState(x=x_s)
    assert np.array_equal(nlctf_image_update(state, y, op32, cfg), sart_sweep(x_s, y, op32, 0.4))


def test_regularization_vanishes_when_cubes_match(op32):
    rng = np.random.default_rng(1)
    x = rng.random((32, 32, 2))
    refs = build_grid((32, 32), SMALL_PATCH)
    pos = np.stack([refs, np.roll(refs, 1, axis=0)], axis=1)
    g = _CubeGroup(index=np.arange(len(refs)), positions=pos)

    class _S:
        recon = extract_cubes(x, pos, SMALL_PATCH)

    g.state = _S()
    g.w = np.zeros_like(_S.recon)
    state = ReconState(x=x, groups=[g])
    reg = _regularization(x, state, SMALL_PATCH, 0.5)
    assert not reg.any()
    # a pure feedback cube pulls the image down by mu * W on covered pixels
    g.w = np.ones_like(_S.recon)
    reg = _regularization(x, state, SMALL_PATCH, 0.5)
    assert np.allclose(reg, -0.5)


def test_zero_iterations_gives_zero(op32):
    x, trace = nlctf_reconstruct(np.ones((36, 61, 2)), op32, ReconConfig(outer_iters=0, patch=SMALL_PATCH))
    assert x.shape == (32, 32, 2) and not x.any() and trace == []


def noisy_case(op, seed=3):
    truth = disk_phantom(32, s=3)
    y = op.forward(truth)
    y = y + 0.02 * np.random.default_rng(seed).standard_normal(y.shape)
    return truth, y


def test_nlctf_nonnegative_every_iteration_and_traced(op32):
    truth, y = noisy_case(op32)
    seen = []
    cfg = ReconConfig(beta=0.3, patch=SMALL_PATCH, outer_iters=5)
    _, trace = nlctf_reconstruct(y, op32, cfg, reference=truth,
                                 callback=lambda it, st: seen.append(st.x.min()))
    assert len(seen) == 5 and min(seen) >= 0.0
    assert [r["iteration"] for r in trace] == [1, 2, 3, 4, 5]
    for r in trace:
        assert np.isfinite(r["multiplier_residual"]) and r["changed_cubes"] >= 0
        assert {"rmse_1", "rmse_2", "rmse_3", "psnr_1", "data_residual"} <= set(r)
    assert trace[0]["changed_cubes"] == len(build_grid((32, 32), SMALL_PATCH))


def test_nlctf_deterministic_across_threads(op32):
    _, y = noisy_case(op32)
    cfg = ReconConfig(beta=0.3, patch=SMALL_PATCH, outer_iters=4, chunk=8)
    a, ta = nlctf_reconstruct(y, op32, cfg)
    b, tb = nlctf_reconstruct(y, op32, cfg.with_updates(threads=3))
    assert a.tobytes() == b.tobytes() and ta == tb


def test_nlctf_beats_sart_on_noisy_small_case(op32):
    truth, y = noisy_case(op32)
    cfg = ReconConfig(beta=0.3, patch=SMALL_PATCH, outer_iters=15)
    x_n, _ = nlctf_reconstruct(y, op32, cfg)
    x_s, _ = sart_reconstruct(y, op32, 15, 0.3)
    rn = np.sqrt(np.mean((x_n - truth) ** 2))
    rs = np.sqrt(np.mean((x_s - truth) ** 2))
    assert rn < rs


@pytest.mark.parametrize("kw", [
    {"beta": 0.0}, {"beta": 2.0}, {"rho": 0.0}, {"tau": 0.0}, {"mu": -1.0},
    {"outer_iters": -1}, {"inner_iters": 0}, {"match_interval": 0}, {"n_subsets": 0},
    {"data_step": "newton"}, {"threads": 0}, {"alpha": -1.0}, {"epsilon": 0.0},
])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        ReconConfig(**kw)


def test_config_defaults():
    c = ReconConfig()
    assert (c.alpha, c.tau, c.theta, c.mu, c.beta, c.rho, c.outer_iters) == (10.0, 0.05, 250.0, 0.5, 0.03, 1.0, 50)
    assert np.isclose(c.delta, 0.02)
    assert c.patch.patch_w == 6 and c.patch.t == 50 and c.patch.search_window == 80

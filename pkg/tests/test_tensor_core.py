import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spectral_nlctf.tensor_core import (
    TensorError, as_tensor, flatten, fold, hosvd, kron_others, left_singular,
    mode_product, multi_mode_product, reconstruct, thin_svd, unfold,
)

dims3 = st.tuples(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5))


def test_layout_is_first_index_fastest():
    t = as_tensor(np.arange(24), (2, 3, 4))
    assert t[1, 2, 3] == 1 + 2 * 2 + 2 * 3 * 3
    assert np.array_equal(flatten(t), np.arange(24))


def test_unfold_hand_enumerated_2x2x2():
    t = as_tensor(np.arange(8), (2, 2, 2))
    assert np.array_equal(unfold(t, 1), [[0, 2, 4, 6], [1, 3, 5, 7]])
    assert np.array_equal(fold(np.array([[0, 2, 4, 6], [1, 3, 5, 7]]), 1, (2, 2, 2)), t)


def _unfold_oracle(t, mode):
    # Element-by-element placement using the cyclic column rule.
    d1, d2, d3 = t.shape
    rows = t.shape[mode - 1]
    out = np.zeros((rows, t.size // rows))
    for i1 in range(d1):
        for i2 in range(d2):
            for i3 in range(d3):
                if mode == 1:
                    out[i1, i2 + d2 * i3] = t[i1, i2, i3]
                elif mode == 2:
                    out[i2, i3 + d3 * i1] = t[i1, i2, i3]
                else:
                    out[i3, i1 + d1 * i2] = t[i1, i2, i3]
    return out


@given(dims3, st.sampled_from([1, 2, 3]))
@settings(max_examples=60, deadline=None)
def test_unfold_matches_index_rule_and_roundtrips(dims, mode):
    t = np.random.default_rng(sum(dims)).standard_normal(dims)
    assert np.array_equal(unfold(t, mode), _unfold_oracle(t, mode))
    assert np.array_equal(fold(unfold(t, mode), mode, dims), t)


def test_degenerate_and_zero_cases():
    t = np.full((1, 1, 1), 3.5)
    for m in (1, 2, 3):
        assert unfold(t, m).shape == (1, 1) and unfold(t, m)[0, 0] == 3.5
    assert np.array_equal(fold(np.zeros((3, 8)), 2, (2, 3, 4)), np.zeros((2, 3, 4)))


def test_fold_shape_mismatch_raises():
    with pytest.raises(TensorError):
        fold(np.zeros((3, 5)), 1, (3, 2, 2))
    with pytest.raises(TensorError):
        unfold(np.zeros((2, 2, 2)), 4)


def test_mode_product_identity_sums_and_commuting(rng):
    t = rng.standard_normal((3, 4, 5))
    for m, d in zip((1, 2, 3), t.shape):
        assert np.array_equal(mode_product(t, np.eye(d), m), t)
        ones = mode_product(t, np.ones((1, d)), m)
        assert np.allclose(np.squeeze(ones, axis=m - 1), t.sum(axis=m - 1), atol=1e-12)
        a = rng.standard_normal((2, d))
        assert np.allclose(mode_product(t, a, m), fold(a @ unfold(t, m), m, ones.shape[:m - 1] + (2,) + ones.shape[m:]))
    q1, q2 = rng.standard_normal((6, 3)), rng.standard_normal((2, 4))
    assert np.allclose(mode_product(mode_product(t, q1, 1), q2, 2),
                       mode_product(mode_product(t, q2, 2), q1, 1), atol=1e-12)
    with pytest.raises(TensorError):
        mode_product(t, np.eye(7), 1)


def test_kronecker_identity_all_modes(rng):
    core = rng.standard_normal((3, 4, 2))
    qs = [np.linalg.qr(rng.standard_normal((d + 2, d)))[0] for d in core.shape]
    full = reconstruct(core, qs)
    for m in (1, 2, 3):
        lhs = unfold(full, m)
        rhs = qs[m - 1] @ unfold(core, m) @ kron_others(qs, m).T
        assert np.allclose(lhs, rhs, atol=1e-12)


def test_batched_mode_product_matches_loop(rng):
    t = rng.standard_normal((5, 3, 4, 2))
    a = rng.standard_normal((5, 4, 4))
    batched = mode_product(t, a, 2)
    for i in range(5):
        assert np.allclose(batched[i], mode_product(t[i], a[i], 2))


def test_thin_svd_examples(rng):
    assert np.allclose(thin_svd(np.eye(3))[1], 1)
    assert np.allclose(thin_svd(np.diag([3.0, 2.0, 1.0]))[1], [3, 2, 1])
    m = rng.standard_normal((10, 4))
    u, s, v = thin_svd(m)
    assert np.linalg.norm(u * s @ v.T - m) / np.linalg.norm(m) <= 1e-10
    assert np.all(np.diff(s) <= 0)
    big = np.argmax(np.abs(u), axis=0)
    assert np.all(u[big, np.arange(u.shape[1])] >= 0)
    with pytest.raises(TensorError):
        thin_svd(np.array([[np.nan]]))


def test_left_singular_agrees_with_svd(rng):
    m = rng.standard_normal((7, 4, 30))
    u, s = left_singular(m)
    u_ref, s_ref, _ = thin_svd(m)
    assert np.allclose(s, s_ref, rtol=1e-10)
    assert np.allclose(u, u_ref, atol=1e-8)


def test_hosvd_rank_one_core(rng):
    a, b, c = rng.standard_normal(4), rng.standard_normal(3), rng.standard_normal(5)
    t = np.einsum("i,j,k->ijk", a, b, c)
    core = hosvd(t).core
    flat = np.sort(np.abs(core.ravel()))
    assert np.isclose(flat[-1], np.linalg.norm(a) * np.linalg.norm(b) * np.linalg.norm(c), rtol=1e-12)
    assert np.all(flat[:-1] <= 1e-10)


def test_hosvd_zero_and_random():
    assert np.array_equal(hosvd(np.zeros((2, 3, 4))).core, np.zeros((2, 3, 4)))
    t = np.random.default_rng(1).standard_normal((6, 8, 3))
    f = hosvd(t)
    rec = multi_mode_product(f.core, f.factors)
    assert np.linalg.norm(rec - t) / np.linalg.norm(t) <= 1e-10
    for q in f.factors:
        assert np.linalg.norm(q.T @ q - np.eye(q.shape[1])) <= 1e-10

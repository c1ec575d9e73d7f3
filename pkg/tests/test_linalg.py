import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from klshampoo import linalg
from klshampoo.errors import (
    InvalidInput,
    NotPositiveDefinite,
    NotSymmetric,
    RankDeficient,
    ShapeError,
    SingularPower,
)

from conftest import spd

seeds = st.integers(0, 2**31 - 1)
dims = st.integers(1, 8)


def test_sym_eigen_diagonal_sorted_descending():
    e = linalg.sym_eigen(np.diag([1.0, 4.0]))
    np.testing.assert_allclose(e.values, [4.0, 1.0])
    np.testing.assert_allclose(np.abs(e.basis), [[0, 1], [1, 0]], atol=1e-15)


def test_sym_eigen_rejects_asymmetric():
    with pytest.raises(NotSymmetric):
        linalg.sym_eigen(np.array([[1.0, 2.0], [0.0, 1.0]]))


@pytest.mark.parametrize("bad", [np.ones((2, 3)), np.ones(3)])
def test_sym_eigen_rejects_non_square(bad):
    with pytest.raises(ShapeError):
        linalg.sym_eigen(bad)


def test_sym_eigen_rejects_nan():
    with pytest.raises(InvalidInput):
        linalg.sym_eigen(np.array([[np.nan, 0.0], [0.0, 1.0]]))


def test_qr_of_positive_diagonal_is_identity():
    np.testing.assert_allclose(linalg.qr_orthonormalize(np.diag([2.0, 3.0])), np.eye(2), atol=1e-15)


def test_qr_sign_convention_largest_entry_positive():
    Q = linalg.qr_orthonormalize(np.array([[0.0, 1.0], [-2.0, 0.5]]))
    idx = np.argmax(np.abs(Q), axis=0)
    assert np.all(Q[idx, [0, 1]] > 0)


def test_qr_rank_deficient():
    with pytest.raises(RankDeficient):
        linalg.qr_orthonormalize(np.array([[1.0, 2.0], [2.0, 4.0]]))


def test_inverse_sqrt_of_diagonal():
    out = linalg.matrix_power_from_eigen(linalg.sym_eigen(np.diag([4.0, 9.0])), -0.5)
    np.testing.assert_allclose(out, np.diag([0.5, 1.0 / 3.0]), rtol=1e-14)


def test_power_zero_is_identity():
    out = linalg.matrix_power_from_eigen(linalg.sym_eigen(np.diag([0.0, 2.0])), 0)
    np.testing.assert_array_equal(out, np.eye(2))


@pytest.mark.parametrize("p", [-1.0, -0.5, -0.25])
def test_negative_power_of_singular_matrix(p):
    with pytest.raises(SingularPower):
        linalg.matrix_power_from_eigen(linalg.sym_eigen(np.diag([1.0, 0.0])), p)


def test_fractional_power_of_indefinite_matrix():
    with pytest.raises(SingularPower):
        linalg.matrix_power_from_eigen(linalg.sym_eigen(np.diag([1.0, -1.0])), 0.5)


def test_kron_of_diagonals():
    out = linalg.kron(np.diag([2.0, 3.0]), np.diag([5.0, 7.0]))
    np.testing.assert_array_equal(out, np.diag([10.0, 14.0, 15.0, 21.0]))


def test_vec_is_row_major_and_mat_inverts_it():
    G = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(linalg.vec(G), [1, 2, 3, 4])
    np.testing.assert_array_equal(linalg.mat(linalg.vec(G), 2, 2), G)


def test_mat_shape_error():
    with pytest.raises(ShapeError):
        linalg.mat(np.arange(5.0), 2, 3)


def test_unfold_rank_one_tensor():
    u, v, w = np.array([1.0, 2.0]), np.array([1.0, -1.0, 3.0]), np.array([2.0, 0.5])
    T = np.einsum("i,j,k->ijk", u, v, w)
    np.testing.assert_allclose(linalg.mode_unfold(T, "a"), np.outer(u, np.kron(v, w)))
    np.testing.assert_allclose(linalg.mode_unfold(T, "b"), np.outer(v, np.kron(u, w)))
    np.testing.assert_allclose(linalg.mode_unfold(T, "c"), np.outer(w, np.kron(u, v)))


@pytest.mark.parametrize("mode", ["a", "b", "c"])
def test_fold_inverts_unfold(mode, rng):
    T = rng.standard_normal((2, 3, 4))
    np.testing.assert_array_equal(linalg.mode_fold(linalg.mode_unfold(T, mode), mode, T.shape), T)


def test_unfold_bad_mode():
    with pytest.raises(ShapeError):
        linalg.mode_unfold(np.zeros((2, 2, 2)), "d")


def test_logdet_diagonal():
    assert linalg.spd_logdet(np.diag([2.0, 3.0])) == pytest.approx(np.log(6.0), rel=1e-15)


def test_logdet_not_spd():
    with pytest.raises(NotPositiveDefinite):
        linalg.spd_logdet(np.diag([1.0, -1.0]))


def test_log_exp_roundtrip(rng):
    S = spd(5, 3)
    np.testing.assert_allclose(linalg.matrix_exp(linalg.matrix_log(S)), S, rtol=1e-12, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(d=dims, seed=seeds)
def test_eigen_reconstruction(d, seed):
    S = spd(d, seed, cond=1e4)
    Q, lam = linalg.sym_eigen(S)
    np.testing.assert_allclose(Q.T @ Q, np.eye(d), atol=1e-12)
    np.testing.assert_allclose((Q * lam) @ Q.T, S, atol=1e-12 * np.abs(S).max())
    assert np.all(np.diff(lam) <= 0)


@settings(max_examples=50, deadline=None)
@given(d=dims, seed=seeds)
def test_qr_orthonormal_and_same_span(d, seed):
    M = np.random.default_rng(seed).standard_normal((d, d))
    Q = linalg.qr_orthonormalize(M)
    np.testing.assert_allclose(Q.T @ Q, np.eye(d), atol=1e-12)
    # M = Q R with R upper triangular
    R = Q.T @ M
    np.testing.assert_allclose(np.tril(R, -1), 0.0, atol=1e-10 * np.abs(M).max())


@settings(max_examples=50, deadline=None)
@given(d=dims, seed=seeds, p=st.sampled_from([-1.0, -0.5, -0.25, 0.25, 0.5, 1.0]))
def test_power_composition(d, seed, p):
    e = linalg.sym_eigen(spd(d, seed))
    A = linalg.matrix_power_from_eigen(e, p)
    B = linalg.matrix_power_from_eigen(e, -p)
    np.testing.assert_allclose(A @ B, np.eye(d), atol=1e-10)


@settings(max_examples=50, deadline=None)
@given(da=st.integers(1, 5), db=st.integers(1, 5), seed=seeds)
def test_kron_vec_identity(da, db, seed):
    rng = np.random.default_rng(seed)
    A, B, G = rng.standard_normal((da, da)), rng.standard_normal((db, db)), rng.standard_normal((da, db))
    np.testing.assert_allclose(linalg.kron(A, B) @ linalg.vec(G), linalg.vec(A @ G @ B.T), atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(da=st.integers(1, 5), db=st.integers(1, 5), seed=seeds)
def test_logdet_of_kron(da, db, seed):
    A, B = spd(da, seed), spd(db, seed + 1)
    want = db * linalg.spd_logdet(A) + da * linalg.spd_logdet(B)
    assert linalg.spd_logdet(linalg.kron(A, B)) == pytest.approx(want, rel=1e-10, abs=1e-10)


@pytest.mark.parametrize("S,expected", [(np.eye(3), True), (np.diag([1.0, 0.0]), False), (np.diag([1.0, -2.0]), False)])
def test_is_spd(S, expected):
    assert linalg.is_spd(S) is expected


@settings(max_examples=50, deadline=None)
@given(d=dims, seed=seeds)
def test_qr_idempotent(d, seed):
    Q = linalg.qr_orthonormalize(np.random.default_rng(seed).standard_normal((d, d)))
    np.testing.assert_allclose(linalg.qr_orthonormalize(Q), Q, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(d=dims, seed=seeds)
def test_square_of_square_root(d, seed):
    S = spd(d, seed, cond=100.0)
    root = linalg.matrix_power_from_eigen(linalg.sym_eigen(S), 0.5)
    back = linalg.matrix_power_from_eigen(linalg.sym_eigen(root), 2)
    np.testing.assert_allclose(back, S, rtol=1e-8, atol=1e-8)

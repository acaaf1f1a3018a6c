import numpy as np
import pytest
from hypothesis import given, strategies as st

from aipod.errors import InfeasibleError, InputError
from aipod.geometry import (
    AffineConstraint,
    check_feasible,
    consensus_constraints,
    decompose,
    project,
    server_average,
    weighted_norm_sq,
)

from conftest import low_rank


def _mp_ok(dec):
    A, P = dec.matrix, dec.pinv
    nA, nP = np.linalg.norm(A), np.linalg.norm(P)
    assert np.linalg.norm(A @ P @ A - A) <= 1e-10 * max(nA, 1)
    assert np.linalg.norm(P @ A @ P - P) <= 1e-10 * max(nP, 1)
    V1, V2 = dec.range_basis, dec.null_basis
    assert np.linalg.norm(V2.T @ V2 - np.eye(V2.shape[1])) <= 1e-12
    assert np.linalg.norm(V1.T @ V1 - np.eye(V1.shape[1])) <= 1e-12
    assert np.linalg.norm(A @ V2) <= 1e-10 * max(nA, 1)
    assert np.linalg.norm(V1 @ V1.T + V2 @ V2.T - np.eye(A.shape[1])) <= 1e-10
    assert np.linalg.norm(np.eye(A.shape[1]) - P @ A - V2 @ V2.T) <= 1e-10


def test_diagonal_example():
    dec = decompose(np.diag([2.0, 0.0]))
    assert dec.rank == 1
    np.testing.assert_allclose(dec.pinv, np.diag([0.5, 0.0]))
    np.testing.assert_allclose(dec.null_basis, [[0.0], [1.0]])


def test_two_client_consensus_null_basis():
    dec = decompose(np.array([[1.0, -1.0]]))
    np.testing.assert_allclose(dec.null_basis[:, 0], [1 / np.sqrt(2), 1 / np.sqrt(2)])


def test_factorised_rank_and_pinv(rng):
    G1, G2 = rng.standard_normal((40, 25)), rng.standard_normal((25, 100))
    A = G1 @ G2
    dec = decompose(A)
    assert dec.rank == 25
    # independent pinv from the factors: A^+ = G2^+ G1^+ for full-rank factors
    ref = G2.T @ np.linalg.solve(G2 @ G2.T, np.linalg.solve(G1.T @ G1, G1.T))
    np.testing.assert_allclose(dec.pinv, ref, atol=1e-8 * np.abs(ref).max())
    A, P = dec.matrix, dec.pinv
    assert np.linalg.norm(A @ P @ A - A) <= 1e-8 * np.linalg.norm(A)


def test_zero_and_empty_matrix():
    dec = decompose(np.zeros((3, 4)))
    assert dec.rank == 0
    np.testing.assert_array_equal(dec.null_basis, np.eye(4))
    v = np.array([1.0, -2.0, 3.0, 0.5])
    np.testing.assert_array_equal(project(AffineConstraint(dec, np.zeros(3)), v), v)
    assert weighted_norm_sq(dec, v) == pytest.approx(v @ v)


def test_identity_weighted_norm_is_zero():
    dec = decompose(np.eye(5))
    assert weighted_norm_sq(dec, np.arange(5.0)) == pytest.approx(0.0, abs=1e-20)


def test_weighted_norm_example():
    assert weighted_norm_sq(decompose([[1.0, -1.0]]), np.array([3.0, 1.0])) == pytest.approx(8.0)


def test_nonfinite_rejected():
    with pytest.raises(InputError):
        decompose(np.array([[1.0, np.nan]]))
    with pytest.raises(InputError):
        decompose(np.eye(2), rank_tolerance=-1.0)


def test_sign_convention_is_deterministic(rng):
    A = low_rank(rng, 6, 9, 3)
    d1, d2 = decompose(A), decompose(A.copy())
    np.testing.assert_array_equal(d1.null_basis, d2.null_basis)
    for col in d1.null_basis.T:
        nz = col[np.abs(col) > 1e-12]
        assert nz[0] > 0


def test_projection_examples():
    A = np.array([[1.0, -1.0, 0.0], [0.0, 1.0, -1.0]])
    out = project(AffineConstraint(decompose(A), np.zeros(2)), np.array([1.0, 2.0, 3.0]))
    np.testing.assert_allclose(out, [2.0, 2.0, 2.0], atol=1e-12)
    # Lagrange: minimise ||y||^2 s.t. y1 + y2 = 2 gives (1, 1)
    out = project(AffineConstraint(decompose([[1.0, 1.0]]), np.array([2.0])), np.zeros(2))
    np.testing.assert_allclose(out, [1.0, 1.0], atol=1e-12)


def test_infeasible_reports_residual():
    con = AffineConstraint(decompose(np.array([[1.0, 0.0], [0.0, 0.0]])), np.array([1.0, 1.0]))
    ok, res = check_feasible(con)
    assert not ok and res == pytest.approx(1.0)
    with pytest.raises(InfeasibleError) as info:
        project(con, np.zeros(2))
    assert info.value.residual == pytest.approx(1.0)
    assert "1.000e+00" in str(info.value)


def test_full_row_rank_always_feasible(rng):
    A = rng.standard_normal((3, 7))
    assert check_feasible(AffineConstraint(decompose(A), rng.standard_normal(3)))[0]


def test_consensus_feasible_at_zero():
    _, dec = consensus_constraints(4, 2)
    assert check_feasible(AffineConstraint(dec, np.zeros(6)))[0]


def test_dimension_mismatch():
    con = AffineConstraint(decompose(np.eye(3)[:1]), np.zeros(1))
    with pytest.raises(InputError):
        project(con, np.zeros(4))
    with pytest.raises(InputError):
        weighted_norm_sq(con.decomposition, np.zeros(2))


def test_consensus_constraints_examples():
    A, dec = consensus_constraints(2, 1)
    np.testing.assert_array_equal(A, [[1.0, -1.0]])
    np.testing.assert_allclose(dec.null_basis[:, 0], [1 / np.sqrt(2)] * 2)
    _, dec = consensus_constraints(3, 2)
    y = np.array([1.0, 0.0, 2.0, 2.0, 3.0, 4.0])
    np.testing.assert_allclose(dec.project_null(y), [2.0, 2.0] * 3, atol=1e-12)
    V2 = dec.null_basis
    np.testing.assert_allclose(V2 @ (V2.T @ y), dec.project_null(y), atol=1e-12)
    with pytest.raises(InputError):
        consensus_constraints(1, 3)


def test_server_average():
    np.testing.assert_array_equal(server_average([np.array([1.0]), np.array([3.0])]), [2.0])
    b = np.array([0.3, -1.7])
    np.testing.assert_array_equal(server_average([b, b, b]), b)
    with pytest.raises(InputError):
        server_average([])


@st.composite
def instances(draw):
    seed = draw(st.integers(0, 2**31 - 1))
    d = draw(st.integers(2, 12))
    m = draw(st.integers(1, 12))
    r = draw(st.integers(0, min(m, d)))
    rng = np.random.default_rng(seed)
    A = low_rank(rng, m, d, r) if r else np.zeros((m, d))
    b = A @ rng.standard_normal(d)
    return A, b, rng


@given(instances())
def test_decomposition_invariants(inst):
    A, _, _ = inst
    _mp_ok(decompose(A))


@given(instances())
def test_projection_properties(inst):
    A, b, rng = inst
    con = AffineConstraint(decompose(A), b)
    d = A.shape[1]
    u, v = rng.standard_normal(d), rng.standard_normal(d)
    pu, pv = project(con, u), project(con, v)
    assert np.linalg.norm(A @ pu - b) <= 1e-8 * (1 + np.linalg.norm(b))
    np.testing.assert_allclose(project(con, pu), pu, atol=1e-10 * (1 + np.abs(pu).max()))
    assert np.linalg.norm(pu - pv) <= np.linalg.norm(u - v) + 1e-10
    a = rng.random()
    mix = project(con, a * u + (1 - a) * v)
    np.testing.assert_allclose(mix, a * pu + (1 - a) * pv, atol=1e-10 * (1 + np.abs(mix).max()))
    zero = AffineConstraint(con.decomposition, np.zeros_like(b))
    V2 = con.decomposition.null_basis
    np.testing.assert_allclose(project(zero, u), V2 @ (V2.T @ u), atol=1e-10)


@given(instances())
def test_projected_gradient_identity(inst):
    B, e, rng = inst
    con = AffineConstraint(decompose(B), e)
    x = project(con, rng.standard_normal(B.shape[1]))
    g = rng.standard_normal(B.shape[1])
    target = weighted_norm_sq(con.decomposition, g)
    for lam in (0.1, 1.0, 10.0):
        lhs = np.linalg.norm((x - project(con, x - lam * g)) / lam) ** 2
        assert abs(lhs - target) <= 1e-10 * max(1.0, target)


@given(st.integers(2, 6), st.integers(1, 4), st.integers(0, 10**6))
def test_consensus_projection_is_average(M, d, seed):
    _, dec = consensus_constraints(M, d)
    y = np.random.default_rng(seed).standard_normal(M * d)
    blocks = list(y.reshape(M, d))
    np.testing.assert_allclose(dec.project_null(y), np.tile(np.mean(blocks, axis=0), M), atol=1e-12)
    V2 = dec.null_basis
    np.testing.assert_allclose(V2 @ (V2.T @ y), dec.project_null(y), atol=1e-12)

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import linalg

from levychain.errors import ConfigurationError
from levychain.scale_geometry import (
    ChainMatrix,
    ChainShape,
    det_T_exponent,
    embedding,
    fit_resolvent_block_constant,
    resolvent,
    resolvent_family,
    resolvent_scaling_factor,
    scale_matrix,
)


def test_shape_validation():
    sh = ChainShape((2, 2, 1))
    assert (sh.n, sh.d, sh.N) == (3, 2, 5)
    assert sh.block(2) == slice(2, 4)
    assert sh.level_of().tolist() == [1, 1, 2, 2, 3]
    with pytest.raises(ConfigurationError):
        ChainShape((1, 2))
    with pytest.raises(ConfigurationError):
        ChainShape(())


def test_embedding():
    B = embedding(ChainShape((2, 1)))
    assert B.tolist() == [[1, 0], [0, 1], [0, 0]]


def test_subdiagonal_identity_structure():
    sh = ChainShape((2, 1, 1))
    A = ChainMatrix.subdiagonal_identity(sh).constant
    expected = np.zeros((4, 4))
    expected[2, 0] = 1.0
    expected[3, 2] = 1.0
    assert np.array_equal(A, expected)


def test_matrix_rejects_far_blocks_and_rank_loss():
    sh = ChainShape((1, 1, 1))
    A = ChainMatrix.subdiagonal_identity(sh).constant.copy()
    bad = A.copy()
    bad[2, 0] = 1.0
    with pytest.raises(ConfigurationError, match="must vanish"):
        ChainMatrix.from_constant(sh, bad)
    bad = A.copy()
    bad[1, 0] = 0.0
    with pytest.raises(ConfigurationError, match="rank"):
        ChainMatrix.from_constant(sh, bad)
    with pytest.raises(ConfigurationError, match="bound"):
        ChainMatrix(sh, lambda t: A * (1 + t), bound=1.0)


def test_scale_matrix_values():
    sh = ChainShape((2, 1, 1))
    sc = scale_matrix(sh, 1.5, 0.3)
    assert np.allclose(sc.m, [1, 1, 0.3, 0.09])
    assert np.allclose(sc.T, 0.3 ** (1 / 1.5) * sc.m)
    assert sc.det_T == pytest.approx(np.prod(sc.T), rel=1e-12)
    assert det_T_exponent(sh, 1.5) == pytest.approx(2 / 1.5 + (1 + 1.5) / 1.5 + (1 + 3) / 1.5)
    with pytest.raises(ConfigurationError):
        scale_matrix(sh, 1.5, -1.0)


@settings(max_examples=50, deadline=None)
@given(a=st.floats(1e-3, 1e3), b=st.floats(1e-3, 1e3), alpha=st.floats(1.01, 1.99))
def test_scale_matrices_are_multiplicative(a, b, alpha):
    sh = ChainShape((1, 1, 1))
    ab, sa, sb = scale_matrix(sh, alpha, a * b), scale_matrix(sh, alpha, a), scale_matrix(sh, alpha, b)
    assert np.allclose(ab.m, sa.m * sb.m, rtol=1e-12)
    assert np.allclose(ab.T, sa.T * sb.T, rtol=1e-12)


def _commuting_matrix(sh):
    A0 = ChainMatrix.subdiagonal_identity(sh).constant
    return ChainMatrix(sh, lambda t: (1.0 + np.sin(t)) * A0, bound=2.0), A0


def test_resolvent_time_dependent_against_closed_form():
    sh = ChainShape((1, 1, 1))
    M, A0 = _commuting_matrix(sh)
    F = lambda u: u - np.cos(u)  # noqa: E731
    t, s = 0.2, 0.9
    ref = linalg.expm((F(s) - F(t)) * A0)
    assert np.allclose(resolvent(M, t, s), ref, atol=1e-9)
    assert np.allclose(resolvent(M, s, t), linalg.inv(ref), atol=1e-9)


def test_resolvent_semigroup_and_family():
    sh = ChainShape((1, 1))
    M, _ = _commuting_matrix(sh)
    R = resolvent(M, 0.1, 0.8)
    assert np.allclose(resolvent(M, 0.5, 0.8) @ resolvent(M, 0.1, 0.5), R, atol=1e-9)
    us = np.array([0.1, 0.3, 0.6])
    fam = resolvent_family(M, 0.8, us)
    for u, Ru in zip(us, fam):
        assert np.allclose(Ru, resolvent(M, u, 0.8), atol=1e-9)


def test_resolvent_scaling_factor_is_gap_invariant_for_constant_chain():
    sh = ChainShape((1, 1, 1))
    M = ChainMatrix.subdiagonal_identity(sh)
    a = resolvent_scaling_factor(M, 0.0, 1.0, 0.4)
    b = resolvent_scaling_factor(M, 0.0, 0.01, 0.4)
    assert np.allclose(a, b, atol=1e-12)


def test_resolvent_block_constant_is_bounded_across_gaps():
    sh = ChainShape((1, 1, 1))
    M, _ = _commuting_matrix(sh)
    Cs = [fit_resolvent_block_constant(M, 0.0, h) for h in (1.0, 0.1, 0.01)]
    assert all(1.0 <= C < 10.0 for C in Cs)

"""Both kernel backends agree with each other and with plain loops."""
import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from maskkv import _kernels_py, kernels

BACKENDS = {"python": _kernels_py}
try:
    from maskkv import _ckernels

    BACKENDS["cython"] = _ckernels
except ImportError:  # pragma: no cover - extension not built
    _ckernels = None

needs_ext = pytest.mark.skipif(_ckernels is None, reason="compiled kernels not built")
finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


@pytest.fixture(params=sorted(BACKENDS))
def impl(request):
    return BACKENDS[request.param]


def test_default_backend_prefers_compiled():
    assert kernels.BACKEND == ("cython" if _ckernels is not None else "python")


def test_set_backend_switches_and_rejects_unknown():
    before = kernels.BACKEND
    try:
        kernels.set_backend("python")
        assert kernels.topk_indices is _kernels_py.topk_indices
    finally:
        kernels.set_backend(before)
    with pytest.raises(ValueError):
        kernels.set_backend("fortran")


def test_column_vote_matches_loops(impl, rng):
    A = rng.random((7, 11))
    got = impl.column_vote(A, 2, 6, 9)
    want = [sum(A[i, j] for i in range(2, 6)) for j in range(9)]
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-15)


def test_column_vote_empty_rows(impl):
    assert np.array_equal(impl.column_vote(np.ones((3, 4)), 1, 1, 4), np.zeros(4))


def test_mass_over(impl, rng):
    A = rng.random((5, 8))
    cols = np.array([0, 3, 7], dtype=np.int64)
    assert impl.mass_over(A, cols) == pytest.approx(A[:, cols].sum(), rel=1e-14)
    assert impl.mass_over(A, np.array([], dtype=np.int64)) == 0.0


@pytest.mark.parametrize("k,want", [(0, []), (1, [1]), (2, [1, 2]), (3, [0, 1, 2]), (9, [0, 1, 2])])
def test_topk_small(impl, k, want):
    assert impl.topk_indices(np.array([0.1, 0.9, 0.5]), k).tolist() == want


def test_topk_ties_lower_index(impl):
    assert impl.topk_indices(np.array([0.5, 0.5, 0.3]), 1).tolist() == [0]
    assert impl.topk_indices(np.zeros(6), 3).tolist() == [0, 1, 2]


def test_row_cosine_zero_rows(impl):
    a = np.array([[1.0, 0.0], [0.0, 0.0], [1.0, 1.0]])
    b = np.array([[0.0, 2.0], [1.0, 1.0], [-1.0, -1.0]])
    cos, n_zero = impl.row_cosine(a, b)
    np.testing.assert_allclose(cos, [0.0, 1.0, -1.0], atol=1e-15)
    assert n_zero == 1


@needs_ext
@given(arrays(np.float64, st.tuples(st.integers(1, 9), st.integers(1, 12)), elements=finite))
def test_backend_parity_vote_and_cosine(A):
    n_rows, n_cols = A.shape
    np.testing.assert_allclose(_ckernels.column_vote(A, 0, n_rows, n_cols),
                               _kernels_py.column_vote(A, 0, n_rows, n_cols), rtol=1e-12, atol=1e-9)
    B = A[::-1].copy()
    c1, z1 = _ckernels.row_cosine(A, B)
    c2, z2 = _kernels_py.row_cosine(A, B)
    assert z1 == z2
    np.testing.assert_allclose(c1, c2, rtol=1e-9, atol=1e-9)


@needs_ext
@given(arrays(np.float64, st.integers(1, 40), elements=st.sampled_from([0.0, 0.25, 0.5, 1.0, 2.0])),
       st.integers(-1, 45))
def test_backend_parity_topk_with_ties(scores, k):
    assert np.array_equal(_ckernels.topk_indices(scores, k), _kernels_py.topk_indices(scores, k))


@given(arrays(np.float64, st.tuples(st.integers(1, 9), st.integers(1, 12)), elements=finite),
       st.floats(1e-3, 1e3))
def test_row_cosine_stays_in_range(A, scale):
    for impl in BACKENDS.values():
        for B in (A[::-1].copy(), -scale * A, scale * A):
            cos, _ = impl.row_cosine(A, np.ascontiguousarray(B))
            assert np.all(cos >= -1.0) and np.all(cos <= 1.0)

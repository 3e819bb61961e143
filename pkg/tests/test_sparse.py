import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gcnstage.dense import ShapeError
from gcnstage.sparse import (
    CooEdge,
    CsrMatrix,
    add_self_loops,
    from_arrays,
    from_coo,
    from_dense,
    identity,
    normalize_in_degree,
    spmm,
    transpose,
)
from oracles import column_normalize, dense_from_triples, random_graph, spmm_loops


def test_from_coo_sums_duplicates_and_sorts():
    a = from_coo([(2, 0), CooEdge(0, 1, 2.5), (0, 1, 0.5), (1, 1)], 3)
    a.validate()
    assert a.nnz == 3
    assert a.row_ptr.tolist() == [0, 1, 2, 3]
    assert a.col_idx.tolist() == [1, 1, 0]
    assert a.values.tolist() == [3.0, 1.0, 1.0]
    np.testing.assert_array_equal(a.todense(), [[0, 3, 0], [0, 1, 0], [1, 0, 0]])


def test_from_arrays_range_and_length_errors():
    with pytest.raises(ValueError, match="out of range"):
        from_arrays([0, 3], [1, 1], shape=(3, 3))
    with pytest.raises(ShapeError):
        from_arrays([0, 1], [1])
    with pytest.raises(ShapeError):
        from_arrays([0], [1], weights=[1.0, 2.0])


def test_empty_matrix():
    a = from_arrays([], [], shape=(4, 4))
    assert a.nnz == 0 and a.row_ptr.tolist() == [0] * 5
    np.testing.assert_array_equal(spmm(a, np.ones((4, 2))), np.zeros((4, 2)))


def test_validate_rejects_broken_structure():
    with pytest.raises(ValueError):
        CsrMatrix(2, 2, np.array([0, 2, 1]), np.array([0, 1], np.int32), np.ones(2)).validate()
    with pytest.raises(ValueError, match="increasing"):
        CsrMatrix(1, 3, np.array([0, 2]), np.array([2, 1], np.int32), np.ones(2)).validate()
    with pytest.raises(ValueError, match="outside"):
        CsrMatrix(1, 2, np.array([0, 1]), np.array([5], np.int32), np.ones(1)).validate()


def test_transpose_matches_dense():
    rng = np.random.default_rng(0)
    d, *_ = random_graph(rng, 30, 0.2)
    at = transpose(from_dense(d))
    at.validate()
    np.testing.assert_array_equal(at.todense(), d.T)
    np.testing.assert_array_equal(transpose(at).todense(), d)


def test_rectangular_transpose_and_spmm():
    rng = np.random.default_rng(1)
    d = np.where(rng.random((5, 8)) < 0.4, rng.standard_normal((5, 8)), 0)
    a = from_dense(d)
    h = rng.standard_normal((8, 3))
    np.testing.assert_allclose(spmm(a, h), d @ h, rtol=1e-13, atol=1e-13)
    np.testing.assert_array_equal(transpose(a).todense(), d.T)


def test_normalize_in_degree_columns_sum_to_one():
    rng = np.random.default_rng(2)
    d, *_ = random_graph(rng, 40, 0.1)
    d[:, 3] = 0  # a vertex without in-edges
    a = normalize_in_degree(from_dense(d))
    np.testing.assert_allclose(a.todense(), column_normalize(d), rtol=1e-15)
    colsum = a.todense().sum(axis=0)
    nz = d.sum(axis=0) > 0
    np.testing.assert_allclose(colsum[nz], 1.0, rtol=1e-13)
    assert colsum[3] == 0


def test_add_self_loops_keeps_existing():
    a = from_coo([(0, 0, 5.0), (0, 1)], 3)
    b = add_self_loops(a)
    np.testing.assert_array_equal(b.todense(), [[5, 1, 0], [0, 1, 0], [0, 0, 1]])
    np.testing.assert_array_equal(identity(3).todense(), np.eye(3))


def test_spmm_matches_loop_oracle_bitwise():
    rng = np.random.default_rng(3)
    for n, dens, w in [(1, 0.5, 1), (17, 0.3, 5), (60, 0.05, 32)]:
        d, *_ = random_graph(rng, n, dens)
        h = rng.standard_normal((n, w))
        out = spmm(from_dense(d), h)
        np.testing.assert_array_equal(out, spmm_loops(d, h))


def test_spmm_thread_count_does_not_change_result():
    rng = np.random.default_rng(4)
    d, *_ = random_graph(rng, 101, 0.2)
    h = rng.standard_normal((101, 7))
    a = from_dense(d)
    ref = spmm(a, h)
    for t in (2, 3, 8):
        np.testing.assert_array_equal(spmm(a, h, threads=t), ref)


def test_spmm_accumulate_and_errors():
    a = identity(3)
    h = np.arange(6.0).reshape(3, 2)
    out = np.ones((3, 2))
    spmm(a, h, accumulate=True, out=out)
    np.testing.assert_array_equal(out, h + 1)
    with pytest.raises(ShapeError):
        spmm(a, np.ones((4, 2)))
    with pytest.raises(ShapeError):
        spmm(a, h, out=np.zeros((2, 2)))
    with pytest.raises(ValueError, match="alias"):
        spmm(a, h, out=h)
    with pytest.raises(ValueError):
        spmm(a, h, accumulate=True)


def test_spmm_single_precision():
    rng = np.random.default_rng(5)
    d, *_ = random_graph(rng, 20, 0.3)
    h = rng.standard_normal((20, 4)).astype(np.float32)
    out = spmm(from_dense(d).astype(np.float32), h)
    assert out.dtype == np.float32
    np.testing.assert_allclose(out, d @ h.astype(np.float64), rtol=1e-5, atol=1e-5)


@settings(max_examples=40, deadline=None)
@given(
    st.integers(1, 25),
    st.lists(st.tuples(st.integers(0, 24), st.integers(0, 24), st.floats(-4, 4, allow_nan=False)), max_size=80),
    st.integers(1, 6),
    st.integers(0, 2**31),
)
def test_spmm_property_against_dense_oracle(n, triples, width, seed):
    triples = [(r % n, c % n, v) for r, c, v in triples]
    rows, cols, vals = zip(*triples) if triples else ((), (), ())
    a = from_arrays(list(rows), list(cols), list(vals), shape=(n, n))
    a.validate()
    d = dense_from_triples(n, n, rows, cols, vals)
    np.testing.assert_allclose(a.todense(), d, rtol=1e-15, atol=1e-15)
    h = np.random.default_rng(seed).standard_normal((n, width))
    np.testing.assert_allclose(spmm(a, h), d @ h, rtol=1e-12, atol=1e-12)
    np.testing.assert_array_equal(transpose(transpose(a)).todense(), a.todense())

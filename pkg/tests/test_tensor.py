import itertools
import json
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deepmem import tensor as tn


def _matricize_oracle(a, I, J):
    # row index = sum_k d_{I[k]} * M**(|I|-1-k), most significant first
    M = a.shape[0]
    out = np.empty((M ** len(I), M ** len(J)), dtype=a.dtype)
    for d in itertools.product(range(M), repeat=a.ndim):
        r = sum(d[i] * M ** (len(I) - 1 - k) for k, i in enumerate(I))
        c = sum(d[j] * M ** (len(J) - 1 - k) for k, j in enumerate(J))
        out[r, c] = a[d]
    return out


def _naive_mps(cores, left, right):
    R = len(left)
    M = cores[0].shape[1]
    T = len(cores)
    out = np.zeros((M,) * T)
    for d in itertools.product(range(M), repeat=T):
        total = 0.0
        for bonds in itertools.product(range(R), repeat=T + 1):
            term = left[bonds[0]] * right[bonds[-1]]
            for t in range(T):
                term *= cores[t][bonds[t], d[t], bonds[t + 1]]
            total += term
        out[d] = total
    return out


class TestMatricize:
    @pytest.mark.parametrize("I", [(0, 1), (1, 3), (0, 2), (3,), (0, 1, 2)])
    def test_matches_index_formula(self, I):
        rng = np.random.default_rng(len(I))
        a = rng.standard_normal((3, 3, 3, 3))
        J = tuple(k for k in range(4) if k not in I)
        np.testing.assert_array_equal(tn.matricize(a, tn.Partition(I, J)), _matricize_oracle(a, I, J))

    def test_start_end_small_example(self):
        a = np.arange(16).reshape(2, 2, 2, 2)
        m = tn.matricize(a, tn.Partition.start_end(4))
        assert m.shape == (4, 4)
        # entry (d0,d1,d2,d3) = (1,0,0,1): row 2, column 1
        assert m[2, 1] == a[1, 0, 0, 1]

    def test_roundtrip(self):
        a = np.random.default_rng(2).standard_normal((2,) * 5)
        p = tn.Partition((1, 4), (0, 2, 3))
        np.testing.assert_array_equal(tn.unmatricize(tn.matricize(a, p), p, 2), a)

    def test_partition_validation(self):
        with pytest.raises(tn.TensorError):
            tn.Partition((0, 1), (1, 2))
        with pytest.raises(tn.TensorError):
            tn.Partition((0,), (2,))
        with pytest.raises(tn.TensorError):
            tn.Partition.start_end(3)

    def test_order_mismatch(self):
        with pytest.raises(tn.TensorError):
            tn.matricize(np.zeros((2, 2, 2)), tn.Partition.start_end(4))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 3), st.integers(2, 5), st.data())
    def test_rank_bounded_by_shape(self, M, T, data):
        I = tuple(sorted(data.draw(st.sets(st.integers(0, T - 1), min_size=1, max_size=T - 1))))
        J = tuple(k for k in range(T) if k not in I)
        a = np.random.default_rng(M * 10 + T).standard_normal((M,) * T)
        m = tn.matricize(a, tn.Partition(I, J))
        assert tn.numeric_rank(m) <= min(m.shape)


class TestRank:
    def test_singular_values_match_numpy(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            r, c = rng.integers(1, 12, size=2)
            m = rng.standard_normal((r, c))
            np.testing.assert_allclose(tn.singular_values(m), np.linalg.svd(m, compute_uv=False),
                                       rtol=1e-10, atol=1e-12)

    def test_numeric_rank_of_products(self):
        rng = np.random.default_rng(1)
        for k in range(0, 6):
            m = rng.standard_normal((9, k)) @ rng.standard_normal((k, 7)) if k else np.zeros((9, 7))
            assert tn.numeric_rank(m) == k

    def test_exact_equals_numeric_on_integer_matrices(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            n, m = rng.integers(1, 21, size=2)
            k = int(rng.integers(0, min(n, m) + 1))
            a = rng.integers(-3, 4, size=(n, k)) @ rng.integers(-3, 4, size=(k, m)) if k else np.zeros((n, m), int)
            assert tn.exact_rank(tn.to_exact(a)) == tn.numeric_rank(a.astype(float))

    def test_exact_rank_rationals(self):
        a = tn.to_exact(np.array([[1, 2], [2, 4]]))
        a[0, 0] = Fraction(1, 3)
        assert tn.exact_rank(a) == 2
        a[0, 0] = Fraction(1)
        assert tn.exact_rank(a) == 1
        assert tn.exact_rank(tn.to_exact(np.zeros((3, 3)))) == 0

    def test_exact_rank_huge_entries(self):
        big = Fraction(2) ** 600
        a = np.array([[big, 1], [1, Fraction(1, 7)]], dtype=object)
        assert tn.exact_rank(a) == 2
        a = np.array([[big, 2 * big], [Fraction(1), Fraction(2)]], dtype=object)
        assert tn.exact_rank(a) == 1

    def test_matrix_rank_dispatch(self):
        m = np.eye(3)
        assert tn.matrix_rank(m) == 3
        assert tn.matrix_rank(tn.to_exact(m)) == 3


class TestCombinatorics:
    @pytest.mark.parametrize("n,k,expected", [(2, 2, 3), (3, 2, 6), (2, 3, 4), (3, 3, 10), (5, 0, 1), (1, 7, 1)])
    def test_multiset(self, n, k, expected):
        assert tn.multiset_coeff(n, k) == expected

    def test_multiset_matches_enumeration(self):
        for n in range(1, 5):
            for k in range(0, 5):
                count = sum(1 for _ in itertools.combinations_with_replacement(range(n), k))
                assert tn.multiset_coeff(n, k) == count

    def test_multiset_errors(self):
        with pytest.raises(ValueError):
            tn.multiset_coeff(0, 2)
        with pytest.raises(ValueError):
            tn.multiset_coeff(-1, 0)

    def test_hadamard_power(self):
        m = np.array([[1.0, 2.0], [3.0, -1.0]])
        np.testing.assert_array_equal(tn.hadamard_power(m, 3), [[1, 8], [27, -1]])
        np.testing.assert_array_equal(tn.hadamard_power(m, 0), np.ones((2, 2)))
        with pytest.raises(ValueError):
            tn.hadamard_power(m, -1)

    def test_delta(self):
        d = tn.delta_tensor(3)
        assert d.sum() == 3 and d[1, 1, 1] == 1 and d[0, 1, 1] == 0
        assert tn.is_exact(tn.delta_tensor(2, exact=True))


class TestProductsAndMps:
    def test_tensor_product(self):
        a = np.array([1.0, 2.0])
        b = np.array([[1.0, 0.0], [0.0, 3.0]])
        out = tn.tensor_product(a, b)
        assert out.shape == (2, 2, 2)
        assert out[1, 1, 1] == 6.0

    def test_tensor_product_kind_mismatch(self):
        with pytest.raises(tn.TensorError):
            tn.tensor_product(np.ones(2), tn.to_exact(np.ones(2)))

    def test_unit_cell_layout(self):
        w_in = np.array([[1.0, 2.0], [3.0, 4.0]])
        w_hid = np.array([[5.0, 6.0], [7.0, 8.0]])
        core = tn.mps_unit_cell(w_in, w_hid)
        for kp, d, k in itertools.product(range(2), repeat=3):
            assert core[kp, d, k] == w_in[k, d] * w_hid[k, kp]

    def test_contract_matches_nested_loops(self):
        rng = np.random.default_rng(4)
        for R, M, T in [(1, 2, 3), (2, 2, 3), (3, 2, 4), (2, 3, 3)]:
            cores = [rng.standard_normal((R, M, R)) for _ in range(T)]
            left, right = rng.standard_normal(R), rng.standard_normal(R)
            got = tn.mps_contract(tn.MpsChain(cores, left, right))
            np.testing.assert_allclose(got, _naive_mps(cores, left, right), rtol=1e-12, atol=1e-12)

    def test_bond_mismatch(self):
        with pytest.raises(tn.TensorError):
            tn.MpsChain([np.ones((2, 2, 3)), np.ones((2, 2, 2))], np.ones(2), np.ones(2))
        with pytest.raises(tn.TensorError):
            tn.MpsChain([np.ones((2, 2, 2))], np.ones(2), np.ones(3))

    def test_cap(self):
        chain = tn.MpsChain([np.ones((1, 2, 1))] * 12, np.ones(1), np.ones(1))
        with pytest.raises(tn.CapExceeded):
            tn.mps_contract(chain, cap=1000)
        with pytest.raises(tn.CapExceeded):
            tn.check_cap(tn.MAX_ENTRIES + 1)

    def test_contract_vectors(self):
        a = np.arange(8.0).reshape(2, 2, 2)
        e = np.eye(2)
        assert tn.contract_vectors(a, [e[1], e[0], e[1]]) == a[1, 0, 1]


class TestDenseTensor:
    def test_json_roundtrip_exact(self):
        t = tn.DenseTensor(tn.to_exact(np.array([[1, 2], [3, 4]])) / 3)
        doc = json.loads(t.to_json())
        assert doc["shape"] == [2, 2] and doc["kind"] == "exact"
        back = tn.DenseTensor.from_json(t.to_json())
        assert back.entries == t.entries and back.kind == "exact"

    def test_json_roundtrip_float(self):
        t = tn.DenseTensor(np.array([0.5, math.pi]))
        back = tn.DenseTensor.from_json(t.to_json())
        assert back.kind == "float64" and back.entries == t.entries and back.order == 1

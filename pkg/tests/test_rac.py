import itertools
from fractions import Fraction

import numpy as np
import pytest

from deepmem import rac
from deepmem import tensor as tn


def _weights_oracle(net, c, T):
    # A[d] = sum over hidden paths: W_out[c, k_T] prod_t W_in[k_t, d_t] W_hid[k_t, k_{t-1}], k_0 summed with 1
    layer = net.layers[0]
    R, M = layer.w_in.shape
    out = np.empty((M,) * T, dtype=object)
    for d in itertools.product(range(M), repeat=T):
        total = Fraction(0)
        for ks in itertools.product(range(R), repeat=T):
            term = net.w_out[c, ks[-1]]
            for t in range(T):
                term *= layer.w_in[ks[t], d[t]]
                if t > 0:
                    term *= layer.w_hid[ks[t], ks[t - 1]]
            total += term
        out[d] = total
    return out


def _small_net(rng, M, R, C=1):
    return rac.random_rational_rac(rng, M, R, C)


class TestForward:
    def test_empty_sequence_returns_readout_of_h0(self):
        net = _small_net(np.random.default_rng(0), 2, 2)
        np.testing.assert_array_equal(rac.deep_forward(net, []), net.w_out @ net.layers[0].h0)

    def test_rac_update_by_hand(self):
        w_in = np.array([[1.0, 2.0], [0.5, -1.0]])
        w_hid = np.array([[0.0, 1.0], [1.0, 0.0]])
        h0 = np.array([1.0, 3.0])
        net = rac.RacNetwork([rac.LayerWeights(w_in, w_hid, h0)], np.array([[1.0, 1.0]]))
        h1 = (w_hid @ h0) * w_in[:, 1]
        h2 = (w_hid @ h1) * w_in[:, 0]
        assert rac.deep_forward(net, [1, 0])[0] == pytest.approx(h2.sum())

    @pytest.mark.parametrize("kind", ["tanh", "modrelu"])
    def test_additive_nonlinearities(self, kind):
        rng = np.random.default_rng(1)
        w_in, w_hid = rng.standard_normal((3, 2)), rng.standard_normal((3, 3))
        bias = np.array([-0.1, 0.2, 0.0]) if kind == "modrelu" else None
        net = rac.RacNetwork([rac.LayerWeights(w_in, w_hid, np.zeros(3), bias)], np.eye(3), kind)
        z = w_in[:, 1]
        expect = np.tanh(z) if kind == "tanh" else np.sign(z) * np.maximum(np.abs(z) + bias, 0)
        np.testing.assert_allclose(rac.deep_forward(net, [1]), expect)

    def test_deep_network_feeds_layer_outputs_upward(self):
        rng = np.random.default_rng(2)
        net = rac.random_float_rac(rng, 2, 3, C=2, L=2)
        l1, l2 = net.layers
        h1, h2 = l1.h0, l2.h0
        for tok in (0, 1, 1):
            h1 = (l1.w_hid @ h1) * l1.w_in[:, tok]
            h2 = (l2.w_hid @ h2) * (l2.w_in @ h1)
        np.testing.assert_allclose(rac.deep_forward(net, [0, 1, 1]), net.w_out @ h2)

    def test_shallow_forward_rejects_deep(self):
        with pytest.raises(ValueError):
            rac.shallow_forward(rac.random_float_rac(np.random.default_rng(0), 2, 2, L=2), [0])

    def test_bad_token(self):
        net = _small_net(np.random.default_rng(0), 2, 2)
        with pytest.raises(ValueError):
            rac.deep_forward(net, [2])

    def test_dimension_checks(self):
        with pytest.raises(tn.TensorError):
            rac.LayerWeights(np.ones((2, 3)), np.ones((3, 3)), np.ones(3))
        with pytest.raises(tn.TensorError):
            rac.RacNetwork([rac.LayerWeights(np.ones((2, 3)), np.eye(2), np.ones(2))], np.ones((1, 3)))
        with pytest.raises(ValueError):
            rac.RacNetwork([rac.LayerWeights(np.ones((2, 3)), np.eye(2), np.ones(2))], np.ones((1, 2)), "relu")


class TestWeightsTensor:
    def test_tt_matches_path_sum_oracle(self):
        rng = np.random.default_rng(3)
        for M, R, T in [(2, 2, 2), (2, 3, 3), (3, 2, 2)]:
            net = _small_net(rng, M, R)
            got = rac.build_weights_tensor_tt(net, 0, T)
            assert (got == _weights_oracle(net, 0, T)).all()

    def test_triple_equivalence(self):
        rng = np.random.default_rng(4)
        for _ in range(15):
            M, R, T = (int(v) for v in rng.integers(1, 4, size=3))
            net = _small_net(rng, M, R, C=2)
            for c in range(2):
                tt = rac.build_weights_tensor_tt(net, c, T)
                mps = tn.mps_contract(rac.shallow_mps(net, c, T))
                grid = rac.grid_tensor(rac.score_evaluator(net, c), M, T)
                assert (tt == mps).all() and (tt == grid).all()

    def test_closed_form_score_with_custom_embedding(self):
        rng = np.random.default_rng(5)
        net = rac.random_float_rac(rng, 3, 2)
        F = rng.standard_normal((3, 3))
        emb = rac.Embedding(3, F)
        A = rac.build_weights_tensor_tt(rac.RacNetwork(net.layers, net.w_out), 0, 3)
        # the TT tensor assumes W_hid h0 == 1, which pinv init guarantees for invertible W_hid
        for tokens in [(0, 1, 2), (2, 2, 0)]:
            assert rac.closed_form_score(A, tokens, emb) == pytest.approx(rac.deep_forward(net, tokens, emb)[0])

    def test_requires_shallow_rac(self):
        net = rac.random_float_rac(np.random.default_rng(0), 2, 2, L=2)
        with pytest.raises(ValueError):
            rac.build_weights_tensor_tt(net, 0, 2)

    def test_cap(self):
        net = _small_net(np.random.default_rng(0), 3, 2)
        with pytest.raises(tn.CapExceeded):
            rac.build_weights_tensor_tt(net, 0, 8, cap=1000)


class TestExplicitDeepAssignment:
    def test_z_entries(self):
        Z = rac.power_tower_z(2, 2, 2, 5)
        assert Z[0, 0] == 2**5 and Z[1, 1] == 2**25
        assert Z[0, 1] == 1 and Z[1, 0] == 1

    def test_z_rows_beyond_m_are_zero(self):
        Z = rac.power_tower_z(2, 3, 2, 5)
        assert list(Z[2]) == [0, 0]

    def test_forward_matches_closed_form_entry(self):
        net = rac.explicit_deep_assignment(2, 2, 4, 2, 5)
        grid = rac.deep_grid_closed_form(2, 2, 4, 2, 5)
        assert rac.deep_forward(net, (0, 1, 0, 1))[0] == grid[0, 1, 0, 1]

    @pytest.mark.parametrize("M,R,T", [(2, 2, 2), (2, 2, 4), (2, 1, 4), (1, 2, 3)])
    def test_whole_grid_matches_forward(self, M, R, T):
        omega = (T // 2) ** 2 + 1
        net = rac.explicit_deep_assignment(M, R, T, 2, omega)
        grid = rac.grid_tensor(rac.score_evaluator(net), M, T)
        assert (grid == rac.deep_grid_closed_form(M, R, T, 2, omega)).all()

    def test_custom_embedding_cancels(self):
        F = np.array([[2, 1], [1, 1]])
        net = rac.explicit_deep_assignment(2, 2, 4, 2, 5, F=F)
        emb = rac.Embedding(2, tn.to_exact(F))
        grid = rac.deep_grid_closed_form(2, 2, 4, 2, 5)
        for d in itertools.product(range(2), repeat=4):
            assert rac.deep_forward(net, d, emb)[0] == grid[d]

    def test_closed_form_cap(self):
        with pytest.raises(tn.CapExceeded):
            rac.deep_grid_closed_form(2, 2, 10, 2, 26)
        with pytest.raises(tn.CapExceeded):
            rac.deep_grid_closed_form(4, 2, 4, 2, 5)

    def test_invalid_z(self):
        with pytest.raises(ValueError):
            rac.power_tower_z(2, 2, 0, 5)


class TestInitAndSizes:
    def test_pinv_init_exact(self):
        w = tn.to_exact(np.array([[2, 1], [1, 1]]))
        h0 = rac.pseudo_inverse_init(w)
        assert list(w @ h0) == [1, 1]

    def test_pinv_init_singular_exact_matches_numpy(self):
        w = np.array([[1, 2], [2, 4]])
        got = rac.pseudo_inverse_init(tn.to_exact(w))
        np.testing.assert_allclose(tn.to_float(got), np.linalg.pinv(w) @ np.ones(2))

    def test_pinv_init_float(self):
        w = np.random.default_rng(0).standard_normal((4, 4))
        np.testing.assert_allclose(w @ rac.pseudo_inverse_init(w), np.ones(4))

    def test_param_count(self):
        assert rac.param_count(1, 4, 3, 2) == 12 + 16 + 8
        assert rac.param_count(2, 4, 3, 2) == 12 + 16 + 32 + 8
        assert rac.param_count(2, 4, 3, 2, "modrelu") == 12 + 16 + 32 + 8 + 8
        with pytest.raises(ValueError):
            rac.param_count(0, 1, 1, 1)

    def test_random_rational_weights_are_nonzero_integers(self):
        net = rac.random_rational_rac(np.random.default_rng(0), 3, 4, L=2)
        for layer in net.layers:
            for a in (layer.w_in, layer.w_hid):
                assert all(isinstance(v, Fraction) and v != 0 and v.denominator == 1 for v in a.reshape(-1))
            assert tn.exact_rank(layer.w_hid) == 4

    def test_random_integer_matrix_has_no_zero_row(self):
        m = rac.random_integer_matrix(np.random.default_rng(1), 200, 1, -1, 1)
        assert all(v != 0 for v in m[:, 0])


class TestSerialization:
    def test_exact_roundtrip(self):
        net = rac.random_rational_rac(np.random.default_rng(0), 2, 3, C=2, L=2)
        back = rac.RacNetwork.from_json(net.to_json())
        assert back.exact and back.depth == 2
        for a, b in zip(net.layers, back.layers):
            assert (a.w_in == b.w_in).all() and (a.h0 == b.h0).all()
        assert (back.w_out == net.w_out).all()

    def test_float_modrelu_roundtrip(self):
        rng = np.random.default_rng(1)
        layer = rac.LayerWeights(rng.standard_normal((2, 3)), np.eye(2), np.zeros(2), np.array([0.1, -0.2]))
        net = rac.RacNetwork([layer], rng.standard_normal((1, 2)), "modrelu")
        back = rac.RacNetwork.from_json(net.to_json())
        np.testing.assert_array_equal(back.layers[0].bias, [0.1, -0.2])
        assert back.nonlinearity == "modrelu"

    def test_modrelu_bias_defaults_to_zero(self):
        net = rac.RacNetwork([rac.LayerWeights(np.ones((2, 2)), np.eye(2), np.zeros(2))], np.ones((1, 2)), "modrelu")
        np.testing.assert_array_equal(net.layers[0].bias, [0.0, 0.0])


def test_interface_aliases():
    assert rac.appendix_z is rac.power_tower_z
    assert rac.appendix_b_assignment is rac.explicit_deep_assignment

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from somnnet.compression import compute_prune_mask
from somnnet.costs import (OVERHEAD_ADD, OVERHEAD_MUL, count_ops, count_params, discrepancies,
                           energy_from_adds, layer_costs, render_table)
from somnnet.errors import ConfigError, ParameterError
from somnnet.gradcheck import toy_config
from somnnet.model import LayerSpec, NetworkConfig, build_reference_network, reference_config

# per-layer (weights, output positions each weight is used at) from the layer sizes
LAYERS = [(6 * 1 * 25, 88), (50 * 6 * 10, 88), (30 * 50 * 15, 44), (2 * 660, 1)]
PRODUCTS = sum(w * u for w, u in LAYERS)


class TestLayerCosts:
    def test_products_closed_form(self):
        assert PRODUCTS == 13_200 + 264_000 + 990_000 + 1_320 == 1_268_520
        assert sum(c.products for c in layer_costs(reference_config())) == PRODUCTS

    def test_weights(self):
        assert [c.weights for c in layer_costs(reference_config())] == [w for w, _ in LAYERS]


class TestParams:
    def test_reference(self):
        pc = count_params(reference_config())
        assert (pc.prunable, pc.biases) == (26_970, 88)

    def test_published_anchor(self):
        assert count_params(reference_config(), 0.1).total == 24_485
        assert count_params(reference_config(), binarized=True).total == 27_094

    def test_analytic_anchor(self):
        pc = count_params(reference_config(), anchor="analytic")
        assert pc.total == 26_970 + 88 + 4 * 88

    def test_fixed_plus_prunable(self):
        for s in (0, 0.35, 0.9):
            r = count_ops(reference_config(), s)
            assert r.params_total == r.params_prunable + r.params_fixed

    def test_bad_anchor(self):
        with pytest.raises(ConfigError):
            count_params(reference_config(), anchor="guess")


class TestOps:
    def test_model1(self):
        r = count_ops(reference_config())
        assert (r.muls, r.adds) == (1_270_016, 1_272_876)
        assert r.muls == PRODUCTS + OVERHEAD_MUL

    def test_sparse_80(self):
        r = count_ops(reference_config(), 0.8)
        assert (r.muls, r.adds) == (255_200, 258_060)

    def test_binarized_muls(self):
        assert count_ops(reference_config(), binarized=True).muls == 1_496

    def test_binarized_adds_closed_form(self):
        outputs = 6 * 88 + 50 * 88 + 30 * 44 + 2
        assert count_ops(reference_config(), binarized=True).adds == OVERHEAD_ADD + PRODUCTS - outputs

    def test_no_overhead_off_reference(self):
        r = count_ops(toy_config())
        assert r.muls == r.adds == sum(c.products for c in layer_costs(toy_config()))

    @given(st.floats(0, 0.95))
    def test_non_negative(self, s):
        for b in (False, True):
            r = count_ops(reference_config(), s, b)
            assert r.muls >= 0 and r.adds >= 0

    def test_mask_exact_global_mask(self):
        net = build_reference_network(0)
        names = ["conv1.kernel", "conv2.kernel", "conv3.kernel", "dense1.weight"]
        for s in (0.1, 0.5, 0.8):
            mask = compute_prune_mask(net, s).masks
            exact = count_ops(reference_config(), s, mode="mask-exact", mask=mask)
            expected = sum(int(np.count_nonzero(mask[n])) * u for n, (_, u) in zip(names, LAYERS))
            assert exact.muls == OVERHEAD_MUL + expected

    @given(st.lists(st.tuples(st.integers(1, 8), st.integers(1, 9)), min_size=1, max_size=3),
           st.integers(12, 64), st.floats(0, 0.95), st.integers(0, 2**16))
    @settings(max_examples=40, deadline=None)
    def test_uniform_per_layer_mask_tracks_estimate(self, convs, length, s, seed):
        layers = [LayerSpec("conv1d", kernel_length=k, filter_count=f) for f, k in convs]
        config = NetworkConfig(layers=tuple(layers) + (LayerSpec("flatten"), LayerSpec("dense", filter_count=2),
                                                       LayerSpec("softmax")), input_length=length)
        g = np.random.default_rng(seed)
        mask = {}
        for c in layer_costs(config):
            keep = np.ones(c.weights, bool)
            keep[g.permutation(c.weights)[:int(s * c.weights + 0.5)]] = False
            mask[f"{c.name}.kernel" if c.kind == "conv1d" else f"{c.name}.weight"] = keep
        exact = count_ops(config, s, mode="mask-exact", mask=mask).muls
        uniform = count_ops(config, s).muls
        # each layer's kept count is within half a weight of (1 - s) * weights
        assert abs(exact - uniform) <= 0.5 * sum(c.usage for c in layer_costs(config)) + 1

    def test_mode_requires_mask(self):
        with pytest.raises(ParameterError):
            count_ops(reference_config(), mode="mask-exact")

    def test_bad_sparsity(self):
        with pytest.raises(ParameterError):
            count_ops(reference_config(), 0.99)


class TestEnergy:
    def test_model1(self):
        assert energy_from_adds(1_272_876, False) == 0.4964

    def test_sparse(self):
        assert energy_from_adds(258_060, False) == 0.1006

    def test_zero(self):
        assert energy_from_adds(0, False) == 0.0

    def test_binary(self):
        assert energy_from_adds(1_179_946, True) == 0.0236


class TestTable:
    def test_single_model1_row(self):
        csv_text, aligned = render_table([count_ops(reference_config())])
        header, row = csv_text.strip().splitlines()
        cells = row.split(",")
        assert cells[4:8] == ["27182", "1270016", "1272876", "0.4964"]
        assert cells[-1] == ""
        assert "Model 1" in aligned

    @pytest.mark.parametrize("s", [0.4, 0.6])
    def test_clean_rows(self, s):
        assert discrepancies(count_ops(reference_config(), s)) == []

    def test_80_flags_params_only(self):
        notes = discrepancies(count_ops(reference_config(), 0.8))
        assert notes == ["params 5606 vs published 10106"]

    def test_20_flagged(self):
        notes = discrepancies(count_ops(reference_config(), 0.2))
        assert "mul 1016312 vs published 818840" in notes

    def test_empty(self):
        with pytest.raises(ParameterError):
            render_table([])

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import entroad.autodiff as ad
from entroad.entropy import compute_entropy_map
from entroad.errors import ConfigError
from entroad.routing import (
    RoutingConfig,
    aggregate_tokens,
    confidence_gate,
    route,
    route_features,
    routing_weights,
)


def np_softmax(x):
    e = np.exp(x - x.max())
    return e / e.sum()


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


class TestRoutingWeights:
    def test_symmetric_inputs_give_uniform_weights(self):
        p = np.array([0.5, 0.5])
        e = np.array([0.5, 0.5])
        w_a, w_n = routing_weights(p, e, temperature=0.37)
        np.testing.assert_allclose(w_a, [0.5, 0.5], atol=1e-12)
        np.testing.assert_allclose(w_n, [0.5, 0.5], atol=1e-12)

    def test_extreme_inputs_at_low_temperature(self):
        p = np.array([1.0, 0.0])
        e = np.array([1.0, 0.0])
        w_a, w_n = routing_weights(p, e, temperature=0.1)
        expected = np_softmax(np.array([10.0, 0.0]))
        np.testing.assert_allclose(w_a, expected, atol=1e-9)
        np.testing.assert_allclose(w_a, [0.99995, 4.54e-5], atol=5e-6)  # rounded refs
        np.testing.assert_allclose(w_n, expected[::-1], atol=1e-9)

    def test_matches_brute_force_oracle(self, rng):
        for _ in range(20):
            p = rng.random(3)
            e = rng.random(3)
            temp = 0.1 + rng.random()
            w_a, w_n = routing_weights(p, e, temp)
            np.testing.assert_allclose(w_a, np_softmax(p * e / temp), atol=1e-7)
            np.testing.assert_allclose(w_n, np_softmax((1 - p) * (1 - e) / temp), atol=1e-7)

    def test_nonpositive_temperature_rejected(self):
        with pytest.raises(ConfigError):
            routing_weights(np.array([0.5]), np.array([0.5]), 0.0)

    @given(st.integers(0, 2**31 - 1), st.integers(2, 30))
    @settings(max_examples=30, deadline=None)
    def test_weights_on_simplex(self, seed, n):
        rng = np.random.default_rng(seed)
        w_a, w_n = routing_weights(rng.random(n), rng.random(n), 0.1)
        for w in (w_a, w_n):
            assert (w >= 0).all()
            assert abs(w.sum() - 1.0) < 1e-6

    def test_permutation_equivariance(self, rng):
        p, e = rng.random(6), rng.random(6)
        z = rng.normal(size=(6, 3))
        perm = rng.permutation(6)
        t_a, t_n = aggregate_tokens(z, *routing_weights(p, e, 0.1))
        t_a2, t_n2 = aggregate_tokens(z[perm], *routing_weights(p[perm], e[perm], 0.1))
        np.testing.assert_allclose(t_a, t_a2, atol=1e-12)
        np.testing.assert_allclose(t_n, t_n2, atol=1e-12)


class TestAggregation:
    def test_one_hot_weight_selects_row(self, rng):
        z = rng.normal(size=(4, 5))
        w = np.array([0.0, 0.0, 1.0, 0.0])
        t_a, t_n = aggregate_tokens(z, w, w)
        np.testing.assert_array_equal(t_a, z[2])
        np.testing.assert_array_equal(t_n, z[2])

    def test_uniform_weight_gives_mean(self, rng):
        z = rng.normal(size=(5, 3))
        w = np.full(5, 0.2)
        t_a, _ = aggregate_tokens(z, w, w)
        np.testing.assert_allclose(t_a, z.mean(axis=0), atol=1e-12)

    def test_tokens_inside_convex_hull(self, rng):
        for _ in range(20):
            z = rng.normal(size=(7, 4))
            w_a, w_n = routing_weights(rng.random(7), rng.random(7), 0.2)
            t_a, t_n = aggregate_tokens(z, w_a, w_n)
            for t in (t_a, t_n):
                assert (t >= z.min(axis=0) - 1e-9).all()
                assert (t <= z.max(axis=0) + 1e-9).all()


class TestConfidenceGate:
    def test_gate_half_at_threshold(self):
        p = np.array([0.2, 0.5])
        e = np.array([0.1, 0.9])
        g = confidence_gate(p, e, tau=0.5, k0=5.0, k1=50.0)
        assert float(ad.value_of(g)) == pytest.approx(0.5, abs=1e-12)

    def test_reference_constants_case(self):
        # p_max 0.6, tau 0.5, k0 5, k1 50, entropy spread zero
        p = np.array([0.6, 0.1])
        e = np.array([0.3, 0.3])
        g = float(ad.value_of(confidence_gate(p, e, 0.5, 5.0, 50.0)))
        assert g == pytest.approx(sigmoid(0.5), abs=1e-9)
        assert g == pytest.approx(0.6225, abs=1e-4)

    def test_monotone_in_peak_evidence(self):
        e = np.array([0.2, 0.8, 0.5])
        gates = [
            float(ad.value_of(confidence_gate(np.array([pm, 0.0, 0.0]), e, 0.5, 5.0, 50.0)))
            for pm in np.linspace(0.05, 0.95, 10)
        ]
        assert all(b > a for a, b in zip(gates, gates[1:]))

    def test_population_std_used(self):
        e = np.array([0.0, 1.0])
        p = np.array([0.7, 0.0])
        g = float(ad.value_of(confidence_gate(p, e, 0.5, 5.0, 50.0)))
        assert g == pytest.approx(sigmoid(0.2 * (5.0 + 50.0 * 0.5)), abs=1e-9)

    def test_gate_strictly_inside_unit_interval(self, rng):
        for _ in range(50):
            g = float(ad.value_of(confidence_gate(rng.random(8), rng.random(8), 0.5, 5.0, 50.0)))
            assert 0.0 < g < 1.0


class TestRouteComposition:
    def test_small_gate_shrinks_anomaly_token(self, tiny_bundles):
        bundle = tiny_bundles[0]
        emap = compute_entropy_map(bundle, bundle.layers)
        p = np.full(bundle.n_patches, 0.05)  # far below tau -> tiny gate
        tokens = route(bundle, emap, p, RoutingConfig())
        assert tokens.g < 0.05
        assert np.linalg.norm(tokens.t_a) <= tokens.g * np.linalg.norm(tokens.t_a_raw) + 1e-9

    def test_route_deterministic(self, tiny_bundles, rng):
        bundle = tiny_bundles[0]
        emap = compute_entropy_map(bundle, bundle.layers)
        p = rng.random(bundle.n_patches)
        a = route(bundle, emap, p, RoutingConfig())
        b = route(bundle, emap, p, RoutingConfig())
        np.testing.assert_array_equal(a.t_a, b.t_a)
        np.testing.assert_array_equal(a.w_n, b.w_n)

    def test_matches_straight_line_oracle(self, rng):
        z = rng.normal(size=(4, 3))
        p = rng.random(4)
        e = rng.random(4)
        cfg = RoutingConfig(temperature=0.1, tau=0.5, k0=5.0, k1=50.0)
        tokens = route_features(z, p, e, cfg)

        w_a = np_softmax(p * e / 0.1)
        w_n = np_softmax((1 - p) * (1 - e) / 0.1)
        t_a_raw = w_a @ z
        t_n = w_n @ z
        sigma = e.std()
        g = sigmoid((p.max() - 0.5) * (5.0 + 50.0 * sigma))
        np.testing.assert_allclose(tokens.t_n, t_n, atol=1e-6)
        np.testing.assert_allclose(tokens.t_a_raw, t_a_raw, atol=1e-6)
        np.testing.assert_allclose(float(tokens.g), g, atol=1e-6)
        np.testing.assert_allclose(tokens.t_a, g * t_a_raw, atol=1e-6)

    def test_gate_disabled_passes_raw_token(self, rng):
        z = rng.normal(size=(4, 3))
        tokens = route_features(z, rng.random(4), rng.random(4), RoutingConfig(gate_enabled=False))
        np.testing.assert_array_equal(tokens.t_a, tokens.t_a_raw)
        assert tokens.g == 1.0


class TestTokenGradients:
    def test_token_gradients_match_finite_differences(self, rng):
        """Gradients of both tokens w.r.t. evidence, entropy, and features."""
        z0 = rng.normal(size=(5, 3))
        p0 = np.clip(rng.random(5), 0.05, 0.95)
        e0 = np.clip(rng.random(5), 0.05, 0.95)
        probe_a = rng.normal(size=3)
        probe_n = rng.normal(size=3)
        cfg = RoutingConfig()

        def loss_fn(arrs):
            tokens = route_features(arrs["z"], arrs["p"], arrs["e"], cfg)
            return ad.add(ad.matmul(tokens.t_a, probe_a), ad.matmul(tokens.t_n, probe_n))

        tensors = {
            "z": ad.Tensor(z0, requires_grad=True),
            "p": ad.Tensor(p0, requires_grad=True),
            "e": ad.Tensor(e0, requires_grad=True),
        }
        loss_fn(tensors).backward()
        fd = ad.finite_difference(
            lambda arrs: float(ad.value_of(loss_fn(arrs))),
            {"z": z0, "p": p0, "e": e0},
            h=1e-6,
        )
        for name, tensor in tensors.items():
            for idx, numeric in fd[name].items():
                rel = ad.relative_error(float(tensor.grad[idx]), numeric)
                assert rel < 1e-4, f"{name}{idx}: rel err {rel}"

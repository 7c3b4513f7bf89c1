import numpy as np
import pytest

import entroad.autodiff as ad
from entroad.errors import ConfigError, DataError
from entroad.prompt import (
    BranchAdapter,
    PromptLearner,
    TextEncoderSpec,
    branch_bias,
    encode_prompt,
    read_text_table,
    similarity_maps,
    synthesize_prompts,
    write_text_table,
)


@pytest.fixture()
def learner():
    return PromptLearner.init(n_context=3, d_t=6, context_seed=1, class_seed=2, dtype=np.float64)


@pytest.fixture()
def adapter():
    a = BranchAdapter.init(d=4, d_t=6, seed=3, dtype=np.float64)
    rng = np.random.default_rng(7)
    a.w2 = rng.normal(size=a.w2.shape) * 0.1
    a.b2 = rng.normal(size=a.b2.shape) * 0.1
    return a


class TestBranchBias:
    def test_zero_output_layer_gives_zero_bias(self, rng):
        adapter = BranchAdapter.init(d=4, d_t=6, seed=0, dtype=np.float64)
        b = branch_bias(rng.normal(size=4), rng.normal(size=4), adapter)
        np.testing.assert_array_equal(np.asarray(b), np.zeros(6))

    def test_dead_hidden_layer_passes_output_bias(self, rng):
        adapter = BranchAdapter.init(d=4, d_t=6, seed=0, dtype=np.float64)
        adapter.w1 = np.zeros_like(adapter.w1)
        adapter.b2 = np.full(6, 1.25)
        b = branch_bias(rng.normal(size=4), rng.normal(size=4), adapter)
        np.testing.assert_allclose(np.asarray(b), np.full(6, 1.25), atol=1e-12)

    def test_dimension_mismatch_rejected(self, adapter, rng):
        with pytest.raises(DataError, match="token dim"):
            branch_bias(rng.normal(size=3), rng.normal(size=4), adapter)

    def test_gradient_of_bias_norm_matches_fd(self, adapter, rng):
        t_n = rng.normal(size=4)
        t_a = rng.normal(size=4)
        params = {"w1": adapter.w1, "b1": adapter.b1 + 0.1, "w2": adapter.w2, "b2": adapter.b2}

        def loss_fn(arrs):
            shadow = BranchAdapter(w1=arrs["w1"], b1=arrs["b1"], w2=arrs["w2"], b2=arrs["b2"])
            b = branch_bias(t_n, t_a, shadow)
            return ad.sum_(ad.mul(b, b))

        tensors = {k: ad.Tensor(np.asarray(v, dtype=np.float64), requires_grad=True) for k, v in params.items()}
        loss_fn(tensors).backward()
        fd = ad.finite_difference(lambda arrs: float(ad.value_of(loss_fn(arrs))), params, h=1e-5)
        for name, tensor in tensors.items():
            for idx, numeric in fd[name].items():
                assert ad.relative_error(float(tensor.grad[idx]), numeric) < 1e-4


class TestSynthesizePrompts:
    def test_zero_bias_keeps_learner_prompts(self, learner):
        prompt_n, prompt_a = synthesize_prompts(learner, np.zeros(6))
        np.testing.assert_array_equal(np.asarray(prompt_n)[:3], learner.context)
        np.testing.assert_array_equal(np.asarray(prompt_n)[3], learner.class_embed_normal)
        np.testing.assert_array_equal(np.asarray(prompt_a)[3], learner.class_embed_anomaly)

    def test_bias_broadcasts_to_every_context_row(self, learner):
        bias = np.zeros(6)
        bias[2] = 0.5
        prompt_n, _ = synthesize_prompts(learner, bias)
        delta = np.asarray(prompt_n)[:3] - learner.context
        np.testing.assert_allclose(delta[:, 2], 0.5, atol=1e-12)
        assert np.abs(np.delete(delta, 2, axis=1)).max() == 0.0

    def test_bias_additivity(self, learner, rng):
        b1 = rng.normal(size=6)
        b2 = rng.normal(size=6)
        combined, _ = synthesize_prompts(learner, b1 + b2)
        first, _ = synthesize_prompts(learner, b1)
        np.testing.assert_allclose(
            np.asarray(combined)[:3],
            np.asarray(first)[:3] + b2[None, :],
            atol=1e-12,
        )


class TestEncodePrompt:
    def test_output_unit_norm(self, learner, rng):
        spec = TextEncoderSpec.toy(6, seed=5, dtype=np.float64)
        prompt, _ = synthesize_prompts(learner, rng.normal(size=6))
        u = np.asarray(encode_prompt(spec, prompt))
        assert abs(np.linalg.norm(u) - 1.0) < 1e-6

    def test_same_seed_same_embedding(self, learner):
        prompt, _ = synthesize_prompts(learner, np.zeros(6))
        u1 = np.asarray(encode_prompt(TextEncoderSpec.toy(6, seed=9, dtype=np.float64), prompt))
        u2 = np.asarray(encode_prompt(TextEncoderSpec.toy(6, seed=9, dtype=np.float64), prompt))
        np.testing.assert_array_equal(u1, u2)

    def test_gradient_through_context_matches_fd(self, learner, rng):
        spec = TextEncoderSpec.toy(6, seed=5, dtype=np.float64)
        probe = rng.normal(size=6)
        class_n = learner.class_embed_normal

        def loss_fn(arrs):
            shadow = PromptLearner(
                context=arrs["ctx"],
                class_embed_normal=class_n,
                class_embed_anomaly=learner.class_embed_anomaly,
            )
            prompt, _ = synthesize_prompts(shadow, np.zeros(6))
            return ad.matmul(encode_prompt(spec, prompt), probe)

        ctx = np.array(learner.context, dtype=np.float64)
        tensor = ad.Tensor(ctx, requires_grad=True)
        loss_fn({"ctx": tensor}).backward()
        fd = ad.finite_difference(lambda arrs: float(ad.value_of(loss_fn(arrs))), {"ctx": ctx}, h=1e-6)
        for idx, numeric in fd["ctx"].items():
            assert ad.relative_error(float(tensor.grad[idx]), numeric) < 1e-4

    def test_precomputed_mode_lookup_and_missing_key(self):
        table = {"normal object": np.array([1.0, 0.0]), "damaged object": np.array([0.0, 1.0])}
        spec = TextEncoderSpec(mode="precomputed", table=table)
        np.testing.assert_array_equal(encode_prompt(spec, "normal object"), table["normal object"])
        with pytest.raises(DataError, match="missing"):
            encode_prompt(spec, "unknown prompt")


class TestSimilarityMaps:
    def test_equal_similarities_give_half(self, rng):
        u = rng.normal(size=4)
        s_n, s_a = similarity_maps(np.tile(u, (3, 1)), u, u, tau_s=0.07)
        np.testing.assert_allclose(np.asarray(s_a), 0.5, atol=1e-12)
        np.testing.assert_allclose(np.asarray(s_n), 0.5, atol=1e-12)

    def test_orthogonal_match_saturates(self):
        u_n = np.array([1.0, 0.0])
        u_a = np.array([0.0, 1.0])
        z = np.array([[0.0, 1.0]])
        _, s_a = similarity_maps(z, u_n, u_a, tau_s=0.07)
        expected = 1.0 / (1.0 + np.exp(-1.0 / 0.07))
        assert np.asarray(s_a)[0] == pytest.approx(expected, abs=1e-9)
        assert np.asarray(s_a)[0] > 1 - 1e-6

    def test_swapping_embeddings_swaps_maps(self, rng):
        z = rng.normal(size=(5, 4))
        u_n = rng.normal(size=4)
        u_a = rng.normal(size=4)
        s_n, s_a = similarity_maps(z, u_n, u_a, 0.07)
        s_n2, s_a2 = similarity_maps(z, u_a, u_n, 0.07)
        np.testing.assert_allclose(np.asarray(s_n), np.asarray(s_a2), atol=1e-12)
        np.testing.assert_allclose(np.asarray(s_a), np.asarray(s_n2), atol=1e-12)

    def test_maps_sum_to_one(self, rng):
        z = rng.normal(size=(8, 4))
        s_n, s_a = similarity_maps(z, rng.normal(size=4), rng.normal(size=4), 0.07)
        np.testing.assert_allclose(np.asarray(s_n) + np.asarray(s_a), 1.0, atol=1e-6)

    def test_internal_normalization(self, rng):
        z = rng.normal(size=(5, 4))
        u_n = rng.normal(size=4)
        u_a = rng.normal(size=4)
        _, s_a = similarity_maps(z, u_n, u_a, 0.07)
        _, s_a_scaled = similarity_maps(3.7 * z, 0.2 * u_n, 5.0 * u_a, 0.07)
        np.testing.assert_allclose(np.asarray(s_a), np.asarray(s_a_scaled), atol=1e-9)

    def test_nonpositive_temperature_rejected(self, rng):
        with pytest.raises(ConfigError):
            similarity_maps(rng.normal(size=(2, 3)), rng.normal(size=3), rng.normal(size=3), 0.0)


class TestTextTable:
    def test_round_trip(self, tmp_path, rng):
        def unit(v):
            return v / np.linalg.norm(v)

        table = {
            "a photo of a normal object": unit(rng.normal(size=8)),
            "a photo of a damaged object": unit(rng.normal(size=8)),
        }
        path = tmp_path / "table.eatx"
        write_text_table(table, path)
        back = read_text_table(path)
        assert set(back) == set(table)
        for key in table:
            np.testing.assert_allclose(back[key], table[key], atol=1e-6)

    def test_non_unit_embedding_rejected(self, tmp_path):
        with pytest.raises(DataError, match="unit-norm"):
            write_text_table({"p": np.array([2.0, 0.0])}, tmp_path / "t.eatx")

    def test_empty_table_rejected(self, tmp_path):
        with pytest.raises(DataError):
            write_text_table({}, tmp_path / "t.eatx")

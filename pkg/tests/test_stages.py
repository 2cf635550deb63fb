import numpy as np
import pytest

from vexlm.model import (
    ModelConfig,
    ParamGroup,
    attach_adapters,
    backward,
    forward,
    has_adapters,
    init_params,
    merge_adapters,
)
from vexlm.stages import StagePlan, apply_mask, mask_for, trainable_index_sets

G = ParamGroup


EXPECTED_MASKS = {
    0: set(),
    1: {G.INPUT_EMBED_NEW},
    2: {G.OUTPUT_EMBED_NEW},
    3: {G.INPUT_EMBED_NEW, G.OUTPUT_EMBED_NEW},
    4: {G.OUTPUT_EMBED_OLD, G.OUTPUT_EMBED_NEW},
    5: {G.INPUT_EMBED_NEW, G.OUTPUT_EMBED_OLD, G.OUTPUT_EMBED_NEW},
    6: {G.INPUT_EMBED_OLD, G.INPUT_EMBED_NEW, G.OUTPUT_EMBED_OLD, G.OUTPUT_EMBED_NEW, G.INTERNAL},
    7: {G.INTERNAL},
}


@pytest.fixture
def expanded(tiny_config):
    params = init_params(tiny_config, np.random.default_rng(0))
    params.base_size = 280  # ids 280..299 act as the "new" rows
    return params, tiny_config


class TestMaskTable:
    @pytest.mark.parametrize("stage_id", range(8))
    def test_mask_for(self, stage_id):
        assert mask_for(stage_id).trainable == frozenset(EXPECTED_MASKS[stage_id])

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            mask_for(8)
        with pytest.raises(ValueError):
            mask_for(-1)


class TestApplyMask:
    def _grads(self, expanded):
        params, cfg = expanded
        rng = np.random.default_rng(1)
        ids = rng.integers(270, 300, size=(2, 8))  # mix of old and new ids
        targets = rng.integers(270, 300, size=(2, 8))
        _, grads = backward(params, cfg, ids, targets)
        return grads

    def test_all_frozen_zeroes_everything(self, expanded):
        params, _ = expanded
        grads = self._grads(expanded)
        apply_mask(grads, mask_for(0), params.base_size)
        assert all(not g.any() for g in grads.values())

    def test_stage1_sparsity(self, expanded):
        params, _ = expanded
        grads = self._grads(expanded)
        apply_mask(grads, mask_for(1), params.base_size)
        assert grads["in_embed"][280:].any()
        assert not grads["in_embed"][:280].any()
        assert not grads["out_embed"].any()
        assert all(not g.any() for n, g in grads.items() if n not in ("in_embed",))

    def test_stage4_zeroes_internal(self, expanded):
        params, _ = expanded
        grads = self._grads(expanded)
        assert grads["layers.0.wq"].any()
        apply_mask(grads, mask_for(4), params.base_size)
        assert not grads["layers.0.wq"].any()
        assert grads["out_embed"].any()
        assert not grads["in_embed"].any()

    def test_stage7_trains_only_internal(self, expanded):
        params, _ = expanded
        grads = self._grads(expanded)
        apply_mask(grads, mask_for(7), params.base_size)
        assert not grads["in_embed"].any()
        assert not grads["out_embed"].any()
        assert grads["layers.0.wq"].any()


class TestProgression:
    def test_stage3_is_union_of_1_and_2(self, expanded):
        params, _ = expanded
        s1 = trainable_index_sets(params, mask_for(1))
        s2 = trainable_index_sets(params, mask_for(2))
        s3 = trainable_index_sets(params, mask_for(3))
        assert s3 == s1 | s2

    def test_stage5_is_union_of_3_and_4(self, expanded):
        params, _ = expanded
        s3 = trainable_index_sets(params, mask_for(3))
        s4 = trainable_index_sets(params, mask_for(4))
        s5 = trainable_index_sets(params, mask_for(5))
        assert s5 == s3 | s4

    def test_stage6_is_everything(self, expanded):
        params, _ = expanded
        s6 = trainable_index_sets(params, mask_for(6))
        everything = set()
        for name, arr in params.tensors.items():
            everything.update((name, i) for i in range(arr.shape[0]))
        assert s6 == everything


class TestStagePlan:
    def test_adapters_only_stage6(self):
        with pytest.raises(ValueError):
            StagePlan(stage_id=5, use_low_rank_adapters=True)
        StagePlan(stage_id=6, use_low_rank_adapters=True)

    def test_stage_id_range(self):
        with pytest.raises(ValueError):
            StagePlan(stage_id=8)

    def test_window_must_fit(self):
        from vexlm.stages import ConvergenceSettings

        with pytest.raises(ValueError):
            StagePlan(stage_id=1, max_steps=5, convergence=ConvergenceSettings(window=10))


class TestAdapters:
    def test_zero_delta_at_attach(self, tiny_config):
        params = init_params(tiny_config, np.random.default_rng(0))
        with_adapters = attach_adapters(params, tiny_config, rank=2, alpha=4.0, rng=np.random.default_rng(1))
        ids = np.arange(10)
        np.testing.assert_array_equal(forward(params, tiny_config, ids), forward(with_adapters, tiny_config, ids))

    def test_merge_preserves_function(self, tiny_config):
        params = init_params(tiny_config, np.random.default_rng(0))
        adapted = attach_adapters(params, tiny_config, rank=2, alpha=4.0, rng=np.random.default_rng(1))
        # Give the adapters a nonzero delta before merging.
        for name, arr in adapted.tensors.items():
            if name.endswith("_lora_b"):
                arr[...] = np.random.default_rng(2).standard_normal(arr.shape) * 0.05
        merged = merge_adapters(adapted)
        assert not has_adapters(merged)
        ids = np.arange(12)
        np.testing.assert_allclose(
            forward(adapted, tiny_config, ids), forward(merged, tiny_config, ids), rtol=0, atol=1e-12
        )

    def test_adapter_gradients_flow(self, tiny_config):
        params = init_params(tiny_config, np.random.default_rng(0))
        adapted = attach_adapters(params, tiny_config, rank=2, alpha=4.0, rng=np.random.default_rng(1))
        for name, arr in adapted.tensors.items():
            if name.endswith("_lora_b"):
                arr[...] = 0.01
        rng = np.random.default_rng(3)
        ids = rng.integers(0, 300, size=(1, 8))
        targets = rng.integers(0, 300, size=(1, 8))
        _, grads = backward(adapted, tiny_config, ids, targets)
        assert grads["layers.0.wq_lora_a"].any()
        assert grads["layers.0.wq_lora_b"].any()

    def test_adapter_gradients_match_finite_differences(self, tiny_config):
        from vexlm.model import eval_loss

        params = init_params(tiny_config, np.random.default_rng(0))
        adapted = attach_adapters(params, tiny_config, rank=2, alpha=4.0, rng=np.random.default_rng(1))
        for name, arr in adapted.tensors.items():
            if name.endswith("_lora_b"):
                arr[...] = np.random.default_rng(4).standard_normal(arr.shape) * 0.05
        rng = np.random.default_rng(5)
        ids = rng.integers(0, 300, size=(1, 8))
        targets = rng.integers(0, 300, size=(1, 8))
        _, grads = backward(adapted, tiny_config, ids, targets)
        eps = 1e-5
        for name in ("layers.0.wq_lora_a", "layers.1.wo_lora_b", "layers.0.wv"):
            arr = adapted.tensors[name].reshape(-1)
            g = grads[name].reshape(-1)
            for i in range(0, arr.size, 3):
                orig = arr[i]
                arr[i] = orig + eps
                lp = eval_loss(adapted, tiny_config, ids, targets)
                arr[i] = orig - eps
                lm = eval_loss(adapted, tiny_config, ids, targets)
                arr[i] = orig
                fd = (lp - lm) / (2 * eps)
                assert abs(fd - g[i]) / max(abs(fd) + abs(g[i]), 1e-4) < 1e-4

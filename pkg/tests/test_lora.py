from __future__ import annotations

import math

import numpy as np
import pytest

from prunekit.data import Segment
from prunekit.errors import StateError
from prunekit.lora import (
    LoraAdapter,
    LoraConfig,
    adapter_forward,
    attach_adapters,
    merge_adapter,
    qlora_finetune,
    trainable_fraction,
)
from prunekit.model import TrainConfig, build, forward, greedy_decode
from prunekit.numerics import Rng, Tensor, grad_check, matmul, tsum
from prunekit.quant import quantize_model


class TestScaling:
    def test_rs_lora_scale(self) -> None:
        assert LoraConfig(rank=64, alpha=128).scale == 16.0

    def test_classic_scale(self) -> None:
        assert LoraConfig(rank=64, alpha=128, rs_lora=False).scale == 2.0

    def test_scale_law_sqrt_rank(self) -> None:
        # identical factor values, declared rank bumped 4 -> 16 at fixed
        # alpha: rsLoRA contribution shrinks by sqrt(4/16) = 1/2
        rng = Rng(0)
        x = Tensor(rng.normal((3, 6)))
        down = Tensor(rng.normal((4, 6)))
        up = Tensor(rng.normal((5, 4)))
        delta_r4 = LoraAdapter(down, up, LoraConfig(rank=4, alpha=8).scale).delta(x)
        delta_r16 = LoraAdapter(down, up, LoraConfig(rank=16, alpha=8).scale).delta(x)
        assert np.allclose(delta_r16.data, 0.5 * delta_r4.data, atol=1e-12)


class TestAttach:
    def test_attach_neutral_bitwise(self, tiny_config) -> None:
        model = build(tiny_config, Rng(1))
        before = forward(model, [3, 4, 5], [1, 6, 7]).data.copy()
        attach_adapters(model, LoraConfig(rank=2, alpha=4), Rng(2))
        after = forward(model, [3, 4, 5], [1, 6, 7]).data
        assert np.array_equal(before, after)

    def test_only_adapters_trainable(self, tiny_config) -> None:
        model = build(tiny_config, Rng(1))
        attach_adapters(model, LoraConfig(rank=2, alpha=4), Rng(2))
        names = [n for n, _ in model.trainable_parameters()]
        assert names
        assert all(".adapter." in n for n in names)

    def test_double_attach_refused(self, tiny_config) -> None:
        model = build(tiny_config, Rng(1))
        attach_adapters(model, LoraConfig(rank=2, alpha=4), Rng(2))
        with pytest.raises(StateError):
            attach_adapters(model, LoraConfig(rank=2, alpha=4), Rng(3))

    def test_trainable_fraction_matches_formula(self, tiny_config) -> None:
        model = build(tiny_config, Rng(1))
        rank = 2
        expected_adapter = sum(
            rank * (lin.shape[0] + lin.shape[1])
            for _, lin in model.named_linears()
        )
        attach_adapters(model, LoraConfig(rank=rank, alpha=4), Rng(2))
        assert model.adapter_param_count() == expected_adapter
        expected_fraction = expected_adapter / (model.param_count() + expected_adapter)
        assert trainable_fraction(model) == pytest.approx(expected_fraction)

    def test_down_init_statistics(self, tiny_config) -> None:
        model = build(tiny_config, Rng(1))
        attach_adapters(model, LoraConfig(rank=8, alpha=16), Rng(2))
        downs = np.concatenate([
            lin.adapter.down.data.reshape(-1)
            for _, lin in model.named_linears()
        ])
        ups = [lin.adapter.up.data for _, lin in model.named_linears()]
        assert all(np.all(u == 0.0) for u in ups)
        assert abs(downs.std() * math.sqrt(16) - 1.0) < 0.25  # std ~ 1/sqrt(in)


class TestAdapterForward:
    def test_zero_up_is_base_only(self) -> None:
        rng = Rng(3)
        base = Tensor(rng.normal((6, 4)))
        adapter = LoraAdapter(Tensor(rng.normal((2, 6))), Tensor(np.zeros((4, 2))), 3.0)
        x = Tensor(rng.normal((5, 6)))
        assert np.array_equal(adapter_forward(base, adapter, x).data,
                              (x.data @ base.data))

    def test_rank_one_unit_factors_hand_case(self) -> None:
        # down = e1^T picks x column 0, up = e1 writes output column 0
        base = Tensor(np.zeros((3, 3)))
        down = Tensor(np.array([[1.0, 0.0, 0.0]]))
        up = Tensor(np.array([[1.0], [0.0], [0.0]]))
        adapter = LoraAdapter(down, up, 2.5)
        x = Tensor(np.array([[4.0, 5.0, 6.0]]))
        out = adapter_forward(base, adapter, x)
        assert np.allclose(out.data, [[2.5 * 4.0, 0.0, 0.0]])

    def test_gradients_flow_to_factors_not_base(self) -> None:
        rng = Rng(4)
        base = Tensor(rng.normal((5, 4)), requires_grad=False)
        down = Tensor(rng.normal((2, 5)), requires_grad=True)
        up = Tensor(rng.normal((4, 2)) * 0.3, requires_grad=True)
        adapter = LoraAdapter(down, up, 1.7)
        x = Tensor(rng.normal((3, 5)))

        def loss():
            return tsum(adapter_forward(base, adapter, x))

        report = grad_check(loss, [("down", down), ("up", up)], h=1e-4, tol=1e-3)
        assert report.passed, report.per_param
        loss().backward()
        assert base.grad is None

    def test_quantized_base_dequantizes_on_the_fly(self) -> None:
        from prunekit.quant import quantize_nf4
        rng = Rng(5)
        dense = rng.normal((8, 4))
        q = quantize_nf4(dense, block_size=8)
        adapter = LoraAdapter(Tensor(rng.normal((2, 8))),
                              Tensor(rng.normal((4, 2))), 0.5)
        x = Tensor(rng.normal((3, 8)))
        got = adapter_forward(q, adapter, x).data
        expected = x.data @ q.dequantize_data() + adapter.delta(x).data
        assert np.allclose(got, expected, atol=1e-12)


class TestQloraFinetune:
    def _mini_corpus(self):
        return [Segment((3, 4, 5), (5, 4, 3)), Segment((6, 7, 8), (8, 7, 6)),
                Segment((9, 10, 3), (3, 10, 9))]

    def test_frozen_base_bitwise_after_training(self, tiny_config) -> None:
        model = quantize_model(build(tiny_config, Rng(6)))
        payload_before = {n: lin.base.packed.tobytes()
                          for n, lin in model.named_linears()}
        scales_before = {n: lin.base.absmax.copy()
                         for n, lin in model.named_linears()}
        qlora_finetune(model, self._mini_corpus(), LoraConfig(rank=2, alpha=4),
                       TrainConfig(epochs=2, batch_size=3, learning_rate=1e-3),
                       Rng(7))
        for name, lin in model.named_linears():
            assert lin.base.packed.tobytes() == payload_before[name], name
            assert np.array_equal(lin.base.absmax, scales_before[name]), name

    def test_adapter_training_reduces_loss(self, tiny_config) -> None:
        model = quantize_model(build(tiny_config, Rng(8)))
        _, curve = qlora_finetune(
            model, self._mini_corpus(), LoraConfig(rank=4, alpha=8),
            TrainConfig(epochs=20, batch_size=3, learning_rate=3e-3),
            Rng(9),
        )
        assert curve[-1] < curve[0]

    def test_zero_lr_keeps_decode_identical(self, tiny_config) -> None:
        model = quantize_model(build(tiny_config, Rng(10)))
        before = greedy_decode(model, (3, 4, 5), max_len=8)
        qlora_finetune(model, self._mini_corpus(), LoraConfig(rank=2, alpha=4),
                       TrainConfig(epochs=2, batch_size=3, learning_rate=0.0),
                       Rng(11))
        assert greedy_decode(model, (3, 4, 5), max_len=8) == before

    def test_unquantized_base_warns_but_trains(self, tiny_config, caplog) -> None:
        import logging
        model = build(tiny_config, Rng(12))
        with caplog.at_level(logging.WARNING):
            qlora_finetune(model, self._mini_corpus(), LoraConfig(rank=2, alpha=4),
                           TrainConfig(epochs=1, batch_size=3, learning_rate=1e-3),
                           Rng(13))
        assert any("not quantized" in r.message for r in caplog.records)
        assert model.has_adapters()


class TestMerge:
    def test_merge_matches_adapter_forward(self, tiny_config) -> None:
        model = build(tiny_config, Rng(14))
        attach_adapters(model, LoraConfig(rank=2, alpha=4), Rng(15))
        # push adapters off zero so the merge is non-trivial
        for _, lin in model.named_linears():
            lin.adapter.up.data += Rng(16).normal(lin.adapter.up.shape) * 0.05
        before = forward(model, [3, 4, 5], [1, 6, 7]).data.copy()
        merge_adapter(model)
        after = forward(model, [3, 4, 5], [1, 6, 7]).data
        assert not model.has_adapters()
        assert np.abs(after - before).max() < 1e-5

    def test_merge_without_adapters_is_noop(self, tiny_config) -> None:
        model = build(tiny_config, Rng(17))
        before = forward(model, [3, 4], [1, 5]).data.copy()
        merge_adapter(model)
        assert np.array_equal(forward(model, [3, 4], [1, 5]).data, before)

    def test_merge_into_quantized_refused(self, tiny_config) -> None:
        model = quantize_model(build(tiny_config, Rng(18)))
        attach_adapters(model, LoraConfig(rank=2, alpha=4), Rng(19))
        with pytest.raises(StateError, match="quantized"):
            merge_adapter(model)

    def test_storage_after_merge_excludes_adapters(self, tiny_config) -> None:
        from prunekit.quant import storage_bytes
        model = build(tiny_config, Rng(20))
        attach_adapters(model, LoraConfig(rank=2, alpha=4), Rng(21))
        with_adapters = storage_bytes(model)
        assert with_adapters.adapter_bytes > 0
        merge_adapter(model)
        merged = storage_bytes(model)
        assert merged.adapter_bytes == 0
        assert merged.total_bytes == with_adapters.total_bytes - \
            with_adapters.adapter_bytes

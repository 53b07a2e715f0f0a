from __future__ import annotations

import json

import numpy as np
import pytest

from oracles import oracle_greedy_plan
from prunekit.data import Segment, gen_corpus, tokens_to_text, train_test_split
from prunekit.errors import ConfigError, StateError
from prunekit.metrics import make_scorer, score
from prunekit.model import (
    LayerId,
    ModelConfig,
    TrainConfig,
    build,
    greedy_decode,
    train_full,
)
from prunekit.numerics import Rng
from prunekit.pruning import (
    PruningStrategy,
    apply_plan,
    evaluate_layer_importance,
    middle_block_indices,
    prune_iteratively,
    prune_middle,
    prune_with_recovery,
)

from conftest import identity_task

CHRF = make_scorer("chrf")


def _devset(n=6):
    task = identity_task()
    return gen_corpus(task, n, seed=4).segments


class TestImportance:
    def test_candidate_cardinality(self, copy_model) -> None:
        scores = evaluate_layer_importance(copy_model, _devset(), CHRF,
                                           max_len=10)
        assert len(scores) == len(copy_model.decoder_stack) == 2

    def test_original_model_untouched(self, copy_model) -> None:
        before = {n: t.data.copy() for n, t in copy_model.named_parameters()}
        depth = len(copy_model.decoder_stack)
        evaluate_layer_importance(copy_model, _devset(), CHRF, max_len=10)
        assert len(copy_model.decoder_stack) == depth
        for name, tensor in copy_model.named_parameters():
            assert np.array_equal(tensor.data, before[name]), name

    def test_noop_layer_scores_highest(self, copy_model) -> None:
        model = copy_model.clone()
        # make decoder layer 1 an exact identity: zero every sublayer output
        _, layer = model.decoder_stack[1]
        layer.self_attn.wo.base.data[:] = 0.0
        layer.cross_attn.wo.base.data[:] = 0.0
        layer.ffn.w2.base.data[:] = 0.0
        layer.ffn.b2.data[:] = 0.0
        scores = evaluate_layer_importance(model, _devset(), CHRF, max_len=10)
        noop = LayerId("decoder", 1)
        assert scores[noop] == max(scores.values())

    def test_deterministic_across_calls(self, copy_model) -> None:
        a = evaluate_layer_importance(copy_model, _devset(), CHRF, max_len=10)
        b = evaluate_layer_importance(copy_model, _devset(), CHRF, max_len=10)
        assert a == b

    def test_empty_devset_rejected(self, copy_model) -> None:
        with pytest.raises(ValueError):
            evaluate_layer_importance(copy_model, [], CHRF)


class TestIterative:
    def test_zero_removals_is_identity(self, copy_model) -> None:
        strategy = PruningStrategy("iterative", 0, selection_metric=CHRF)
        pruned, plan = prune_iteratively(copy_model, strategy, _devset(), max_len=10)
        assert plan.removed == [] and plan.reports == []
        assert pruned.param_count() == copy_model.param_count()

    def test_param_drop_is_exact(self) -> None:
        from prunekit.model import analytic_layer_params
        config = ModelConfig(vocab_size=12, d_model=16, n_heads=2, d_ff=32,
                             encoder_layers=1, decoder_layers=8, max_positions=16)
        model = build(config, Rng(0))
        strategy = PruningStrategy("iterative", 2, selection_metric=CHRF)
        pruned, plan = prune_iteratively(model, strategy, _devset(4), max_len=6)
        assert model.param_count() - pruned.param_count() == \
            2 * analytic_layer_params(config, "decoder")
        assert len(plan.removed) == 2
        assert len(set(plan.removed)) == 2

    def test_greedy_per_step_optimality(self, copy_model) -> None:
        strategy = PruningStrategy("iterative", 1, selection_metric=CHRF)
        _, plan = prune_iteratively(copy_model, strategy, _devset(), max_len=10)
        report = plan.reports[0]
        chosen_score = report.candidate_scores[report.chosen]
        assert all(s <= chosen_score for s in report.candidate_scores.values())

    def test_matches_independent_greedy_oracle(self) -> None:
        # lightly trained 6-decoder-layer model so candidate scores differ
        config = ModelConfig(vocab_size=12, d_model=16, n_heads=2, d_ff=32,
                             encoder_layers=1, decoder_layers=6, max_positions=16)
        model = build(config, Rng(1))
        task = identity_task()
        corpus = train_test_split(gen_corpus(task, 60, seed=5), 8, 0, 6)
        train_full(model, corpus,
                   TrainConfig(epochs=3, batch_size=8, learning_rate=2e-3,
                               weight_decay=0.0), Rng(2))
        devset = corpus.split("dev")
        strategy = PruningStrategy("iterative", 3, selection_metric=CHRF)
        _, plan = prune_iteratively(model, strategy, devset, max_len=8)
        expected = oracle_greedy_plan(model, devset, CHRF, 3, max_len=8)
        assert plan.removed == expected

    def test_pool_discipline_decoder_only(self, copy_model) -> None:
        encoder_before = sum(
            lin.element_count for n, lin in copy_model.named_linears()
            if n.startswith("encoder.")
        )
        strategy = PruningStrategy("iterative", 1, selection_metric=CHRF)
        pruned, plan = prune_iteratively(copy_model, strategy, _devset(), max_len=10)
        encoder_after = sum(
            lin.element_count for n, lin in pruned.named_linears()
            if n.startswith("encoder.")
        )
        assert encoder_before == encoder_after
        assert all(lid.pool == "decoder" for lid in plan.removed)

    def test_budget_exhaustion_refused(self, copy_model) -> None:
        strategy = PruningStrategy("iterative", 5, selection_metric=CHRF)
        with pytest.raises(StateError):
            prune_iteratively(copy_model, strategy, _devset(), max_len=10)

    def test_wrong_kind_rejected(self, copy_model) -> None:
        with pytest.raises(ConfigError):
            prune_iteratively(copy_model, PruningStrategy("middle", 1),
                              _devset(), max_len=10)

    def test_plan_replay_reproduces_architecture(self, copy_model) -> None:
        strategy = PruningStrategy("iterative", 1, selection_metric=CHRF)
        pruned, plan = prune_iteratively(copy_model, strategy, _devset(), max_len=10)
        replayed = apply_plan(copy_model, plan)
        assert [lid for lid, _ in replayed.decoder_stack] == \
            [lid for lid, _ in pruned.decoder_stack]
        assert replayed.param_count() == pruned.param_count()

    def test_plan_serializes_to_json(self, copy_model, tmp_path) -> None:
        strategy = PruningStrategy("iterative", 1, selection_metric=CHRF)
        _, plan = prune_iteratively(copy_model, strategy, _devset(), max_len=10)
        path = tmp_path / "plan.json"
        plan.save(path)
        payload = json.loads(path.read_text())
        assert payload["strategy"]["kind"] == "iterative"
        assert payload["removed"][0]["pool"] == "decoder"
        assert payload["rounds"][0]["scores"]


class TestMiddle:
    def test_paper_indices_32_to_24(self) -> None:
        assert middle_block_indices(32, 8) == list(range(12, 20))

    def test_depth8_n2(self) -> None:
        assert middle_block_indices(8, 2) == [3, 4]

    def test_n_equals_depth_minus_one_allowed(self) -> None:
        assert middle_block_indices(8, 7) == [0, 1, 2, 3, 4, 5, 6]

    def test_n_equals_depth_refused(self) -> None:
        with pytest.raises(StateError):
            middle_block_indices(8, 8)

    def test_prune_middle_on_model(self) -> None:
        config = ModelConfig(vocab_size=12, d_model=16, n_heads=2, d_ff=32,
                             encoder_layers=1, decoder_layers=8, max_positions=16)
        model = build(config, Rng(3))
        pruned, plan = prune_middle(model, PruningStrategy("middle", 2))
        assert [lid.original_index for lid in plan.removed] == [3, 4]
        assert [lid.original_index for lid, _ in pruned.decoder_stack] == \
            [0, 1, 2, 5, 6, 7]
        assert plan.reports == []

    def test_both_pools_variant(self) -> None:
        config = ModelConfig(vocab_size=12, d_model=16, n_heads=2, d_ff=32,
                             encoder_layers=4, decoder_layers=4, max_positions=16)
        model = build(config, Rng(4))
        pruned, plan = prune_middle(
            model, PruningStrategy("middle", 1, pool="encoder_and_decoder"))
        assert len(pruned.encoder_stack) == 3
        assert len(pruned.decoder_stack) == 3
        assert {lid.pool for lid in plan.removed} == {"encoder", "decoder"}


class TestRecovery:
    def _setup(self):
        config = ModelConfig(vocab_size=12, d_model=16, n_heads=2, d_ff=32,
                             encoder_layers=1, decoder_layers=3, max_positions=16)
        model = build(config, Rng(5))
        task = identity_task()
        corpus = train_test_split(gen_corpus(task, 40, seed=6), 6, 0, 6)
        train_full(model, corpus,
                   TrainConfig(epochs=4, batch_size=8, learning_rate=2e-3,
                               weight_decay=0.0), Rng(7))
        return model, corpus

    def test_single_removal_equals_iterative_plus_finetune(self) -> None:
        model, corpus = self._setup()
        devset = corpus.split("dev")
        cfg = TrainConfig(epochs=1, batch_size=8, learning_rate=1e-3,
                          weight_decay=0.0)
        strategy_r = PruningStrategy("iterative_recovery", 1, selection_metric=CHRF)
        recovered, plan_r = prune_with_recovery(
            model, strategy_r, devset, cfg, corpus, Rng(8), max_len=8)

        strategy_i = PruningStrategy("iterative", 1, selection_metric=CHRF)
        plain, plan_i = prune_iteratively(model, strategy_i, devset, max_len=8)
        train_full(plain, corpus, cfg, Rng(8).split("recovery-0"))
        assert plan_r.removed == plan_i.removed
        for (n, a), (_, b) in zip(recovered.named_parameters(),
                                  plain.named_parameters()):
            assert np.array_equal(a.data, b.data), n

    def test_finetune_count_equals_removals(self, monkeypatch) -> None:
        model, corpus = self._setup()
        calls = []
        import prunekit.pruning as pruning_module

        real = pruning_module.train_full

        def counting(*args, **kwargs):
            calls.append(1)
            return real(*args, **kwargs)

        monkeypatch.setattr(pruning_module, "train_full", counting)
        strategy = PruningStrategy("iterative_recovery", 2, selection_metric=CHRF)
        prune_with_recovery(model, strategy, corpus.split("dev"),
                            TrainConfig(epochs=1, batch_size=8,
                                        learning_rate=1e-3, weight_decay=0.0),
                            corpus, Rng(9), max_len=8)
        assert len(calls) == 2

    def test_recovery_score_not_worse_pre_final(self) -> None:
        # recovery fine-tunes between rounds, so the model entering the last
        # round scores at least as well as the plain-pruned model pre-FT
        model, corpus = self._setup()
        devset = corpus.split("dev")
        test = corpus.split("test")
        cfg = TrainConfig(epochs=2, batch_size=8, learning_rate=2e-3,
                          weight_decay=0.0)
        recovered, _ = prune_with_recovery(
            model, PruningStrategy("iterative_recovery", 1, selection_metric=CHRF),
            devset, cfg, corpus, Rng(10), max_len=8)
        plain, _ = prune_iteratively(
            model, PruningStrategy("iterative", 1, selection_metric=CHRF),
            devset, max_len=8)

        def chrf_on(m):
            hyps = [tokens_to_text(greedy_decode(m, s.source, max_len=8))
                    for s in test]
            refs = [tokens_to_text(s.target) for s in test]
            return score(CHRF, hyps, refs)

        assert chrf_on(recovered) >= chrf_on(plain)


class TestCustomScorerPluggability:
    def test_custom_importance_signal(self, copy_model) -> None:
        # a scorer that prefers longer outputs, standing in for a learned metric
        length_scorer = make_scorer(
            "custom",
            custom_fn=lambda hyps, refs: float(np.mean([len(h) for h in hyps])),
            custom_name="mean-len",
        )
        scores = evaluate_layer_importance(copy_model, _devset(), length_scorer,
                                           max_len=10)
        assert len(scores) == 2

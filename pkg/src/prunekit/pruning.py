"""Layer importance evaluation and the three pruning strategies.

Importance of a layer = dev-set translation score of the model with that
single layer removed (higher means the layer mattered less). The iterative
strategy repeatedly removes the current best-to-remove layer; the middle
strategy removes a fixed centered block without evaluation; the recovery
strategy fine-tunes after every removal.

Candidate evaluations within a round are independent (each works on its own
clone) and are reduced in sorted LayerId order, so the chosen layer never
depends on evaluation order. Ties on equal scores go to the lowest original
index (decoder pool first when both pools are in play).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .data import Segment, tokens_to_text
from .errors import ConfigError, StateError
from .metrics import ScorerConfig, make_scorer, score
from .model import (
    LayerId,
    TrainConfig,
    TransformerModel,
    greedy_decode,
    remove_layer,
    train_full,
)
from .numerics import Rng

DECODER_ONLY = "decoder_only"
ENCODER_AND_DECODER = "encoder_and_decoder"


@dataclass(frozen=True)
class PruningStrategy:
    kind: str  # iterative | middle | iterative_recovery
    target_removals: int
    pool: str = DECODER_ONLY
    selection_metric: ScorerConfig = field(default_factory=lambda: make_scorer("chrf++"))
    # "dev" keeps selection away from the final test split; "test" reproduces
    # the protocol of evaluating candidates on the test split directly.
    eval_split: str = "dev"

    def __post_init__(self):
        if self.kind not in ("iterative", "middle", "iterative_recovery"):
            raise ConfigError(f"unknown pruning strategy '{self.kind}'")
        if self.pool not in (DECODER_ONLY, ENCODER_AND_DECODER):
            raise ConfigError(f"unknown layer pool '{self.pool}'")
        if self.target_removals < 0:
            raise ConfigError("target_removals must be >= 0")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "target_removals": self.target_removals,
            "pool": self.pool,
            "selection_metric": self.selection_metric.name,
            "eval_split": self.eval_split,
        }


@dataclass
class ImportanceReport:
    iteration: int
    candidate_scores: dict[LayerId, float]
    chosen: LayerId


@dataclass
class PruningPlan:
    removed: list[LayerId]
    reports: list[ImportanceReport]
    strategy: PruningStrategy

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy.to_dict(),
            "removed": [
                {"pool": lid.pool, "original_index": lid.original_index}
                for lid in self.removed
            ],
            "rounds": [
                {
                    "iteration": r.iteration,
                    "chosen": {"pool": r.chosen.pool,
                               "original_index": r.chosen.original_index},
                    "scores": {str(lid): s for lid, s in r.candidate_scores.items()},
                }
                for r in self.reports
            ],
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def _pool_ids(model: TransformerModel, pool: str) -> list[LayerId]:
    if pool == DECODER_ONLY:
        return model.layer_ids("decoder")
    return sorted(model.layer_ids())


def _decode_corpus(model: TransformerModel, devset: Sequence[Segment],
                   max_len: int) -> list[str]:
    return [tokens_to_text(greedy_decode(model, seg.source, max_len=max_len))
            for seg in devset]


def evaluate_layer_importance(
    model: TransformerModel,
    devset: Sequence[Segment],
    scorer: ScorerConfig,
    pool: str = DECODER_ONLY,
    max_len: int = 1024,
) -> dict[LayerId, float]:
    """Score the model with each candidate layer removed, one clone per
    candidate; the input model is never touched. A pool with a single layer
    yields no candidates for that stack (the last layer must survive)."""
    if not devset:
        raise ValueError("devset must be non-empty")
    references = [tokens_to_text(seg.target) for seg in devset]
    depths = {"encoder": len(model.encoder_stack), "decoder": len(model.decoder_stack)}
    scores: dict[LayerId, float] = {}
    for lid in _pool_ids(model, pool):
        if depths[lid.pool] <= 1:
            continue
        candidate = remove_layer(model.clone(), lid)
        try:
            hypotheses = _decode_corpus(candidate, devset, max_len)
        except Exception as exc:
            raise RuntimeError(f"decode failed with layer {lid} removed: {exc}") from exc
        scores[lid] = score(scorer, hypotheses, references)
    return scores


def _choose_best(scores: dict[LayerId, float]) -> LayerId:
    """Maximal score; ties resolved by lowest original index, decoder first."""
    return min(
        scores,
        key=lambda lid: (-scores[lid], lid.original_index, lid.pool != "decoder"),
    )


def prune_iteratively(
    model: TransformerModel,
    strategy: PruningStrategy,
    devset: Sequence[Segment],
    max_len: int = 1024,
) -> tuple[TransformerModel, PruningPlan]:
    """Greedy removal: evaluate every candidate, remove the one whose absence
    scores best, repeat. Extending a plan by one layer only ever adds a single
    new choice to the already-found prefix."""
    if strategy.kind != "iterative":
        raise ConfigError(f"prune_iteratively needs kind=iterative, got {strategy.kind}")
    _check_budget(model, strategy)
    pruned = model.clone()
    plan = PruningPlan([], [], strategy)
    for round_index in range(strategy.target_removals):
        scores = evaluate_layer_importance(
            pruned, devset, strategy.selection_metric, strategy.pool, max_len
        )
        if not scores:
            raise StateError("layer pool exhausted before reaching target_removals")
        chosen = _choose_best(scores)
        plan.reports.append(ImportanceReport(round_index, scores, chosen))
        plan.removed.append(chosen)
        remove_layer(pruned, chosen)
    return pruned, plan


def middle_block_indices(depth: int, removals: int) -> list[int]:
    """Centered contiguous block: start = floor((depth - removals) / 2)."""
    if removals >= depth:
        raise StateError(
            f"cannot remove {removals} of {depth} layers; one must survive"
        )
    start = (depth - removals) // 2
    return list(range(start, start + removals))


def prune_middle(
    model: TransformerModel,
    strategy: PruningStrategy,
) -> tuple[TransformerModel, PruningPlan]:
    """Remove the centered block of target_removals layers, no evaluation.
    With the encoder_and_decoder pool the block is removed from each stack."""
    if strategy.kind != "middle":
        raise ConfigError(f"prune_middle needs kind=middle, got {strategy.kind}")
    pruned = model.clone()
    plan = PruningPlan([], [], strategy)
    stacks = [pruned.decoder_stack]
    if strategy.pool == ENCODER_AND_DECODER:
        stacks = [pruned.encoder_stack, pruned.decoder_stack]
    for stack in stacks:
        victims = [stack[i][0] for i in middle_block_indices(len(stack), strategy.target_removals)]
        for lid in victims:
            plan.removed.append(lid)
            remove_layer(pruned, lid)
    return pruned, plan


def prune_with_recovery(
    model: TransformerModel,
    strategy: PruningStrategy,
    devset: Sequence[Segment],
    train_cfg: TrainConfig,
    corpus,
    rng: Rng | None = None,
    max_len: int = 1024,
) -> tuple[TransformerModel, PruningPlan]:
    """Iterative pruning with a fine-tune after every removal ("immediate
    recovery"). Recovery shifts the relative importance of the remaining
    layers, so the chosen ids can differ from plain iterative pruning."""
    if strategy.kind != "iterative_recovery":
        raise ConfigError(
            f"prune_with_recovery needs kind=iterative_recovery, got {strategy.kind}"
        )
    _check_budget(model, strategy)
    rng = rng or Rng(0)
    pruned = model.clone()
    plan = PruningPlan([], [], strategy)
    for round_index in range(strategy.target_removals):
        scores = evaluate_layer_importance(
            pruned, devset, strategy.selection_metric, strategy.pool, max_len
        )
        if not scores:
            raise StateError("layer pool exhausted before reaching target_removals")
        chosen = _choose_best(scores)
        plan.reports.append(ImportanceReport(round_index, scores, chosen))
        plan.removed.append(chosen)
        remove_layer(pruned, chosen)
        train_full(pruned, corpus, train_cfg, rng.split(f"recovery-{round_index}"))
    return pruned, plan


def _check_budget(model: TransformerModel, strategy: PruningStrategy) -> None:
    if strategy.pool == DECODER_ONLY:
        available = len(model.decoder_stack) - 1
    else:
        available = len(model.encoder_stack) + len(model.decoder_stack) - 2
    if strategy.target_removals > available:
        raise StateError(
            f"target_removals {strategy.target_removals} exceeds the "
            f"{available} removable layers in pool {strategy.pool}"
        )


def apply_plan(model: TransformerModel, plan: PruningPlan) -> TransformerModel:
    """Replay a plan's removals on a fresh copy of the pre-pruning model."""
    replayed = model.clone()
    for lid in plan.removed:
        remove_layer(replayed, lid)
    return replayed

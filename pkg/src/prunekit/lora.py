"""Low-rank adapters with rank-stabilized scaling over frozen bases.

An adapter is a factor pair (down: rank x in, up: out x rank) attached to a
linear matrix. `up` starts at zero so attaching is output-neutral bitwise;
only the factors train. With rs_lora the contribution is scaled alpha/sqrt(rank)
instead of the classic alpha/rank. Bases may be full precision (frozen) or
NF4-quantized; quantized bases are dequantized on the fly and their packed
codes never change during fine-tuning.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .data import ParallelCorpus
from .errors import ShapeError, StateError
from .model import Linear, TrainConfig, TransformerModel, train_full
from .numerics import Rng, Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 64
    alpha: float = 128.0
    dropout: float = 0.0
    rs_lora: bool = True
    targets: str = "all_linear"

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("lora rank must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("lora dropout must lie in [0, 1)")
        if self.targets != "all_linear":
            raise ValueError(f"unsupported adapter target set '{self.targets}'")

    @property
    def scale(self) -> float:
        return self.alpha / math.sqrt(self.rank) if self.rs_lora \
            else self.alpha / self.rank

    def to_dict(self) -> dict:
        return {"rank": self.rank, "alpha": self.alpha, "dropout": self.dropout,
                "rs_lora": self.rs_lora, "targets": self.targets}


class LoraAdapter:
    """Factor pair plus scale; `delta(x) = scale * (x @ down.T) @ up.T`."""

    __slots__ = ("down", "up", "scale", "dropout")

    def __init__(self, down: Tensor, up: Tensor, scale: float, dropout: float = 0.0):
        if down.shape[0] != up.shape[1]:
            raise ShapeError(
                f"adapter rank mismatch: down {down.shape} vs up {up.shape}"
            )
        self.down = down
        self.up = up
        self.scale = scale
        self.dropout = dropout

    @property
    def rank(self) -> int:
        return self.down.shape[0]

    def delta(self, x: Tensor) -> Tensor:
        low = nm.matmul(x, nm.transpose(self.down))
        return nm.mul(nm.matmul(low, nm.transpose(self.up)), self.scale)

    def merged_delta(self) -> np.ndarray:
        """The dense [in, out] update this adapter is equivalent to."""
        return self.scale * (self.up.data @ self.down.data).T

    def clone(self) -> "LoraAdapter":
        return LoraAdapter(
            Tensor(self.down.data.copy(), requires_grad=self.down.requires_grad),
            Tensor(self.up.data.copy(), requires_grad=self.up.requires_grad),
            self.scale, self.dropout,
        )


def _init_adapter(in_dim: int, out_dim: int, config: LoraConfig, rng: Rng) -> LoraAdapter:
    down = Tensor(rng.normal((config.rank, in_dim), std=1.0 / math.sqrt(in_dim)),
                  requires_grad=True)
    up = Tensor(np.zeros((out_dim, config.rank)), requires_grad=True)
    return LoraAdapter(down, up, config.scale, config.dropout)


def attach_adapters(model: TransformerModel, config: LoraConfig, rng: Rng) -> TransformerModel:
    """Give every linear matrix an adapter and freeze everything else.

    After attaching, the only trainable parameters are the adapter factors;
    model outputs are bitwise unchanged until training moves `up` off zero.
    """
    for name, lin in model.named_linears():
        if lin.adapter is not None:
            raise StateError(f"attach_adapters: {name} already has an adapter")
    for _, tensor in model.named_parameters():
        tensor.requires_grad = False
        tensor.zero_grad()
    for _, lin in model.named_linears():
        in_dim, out_dim = lin.shape
        lin.adapter = _init_adapter(in_dim, out_dim, config, rng)
    model.metadata["lora"] = config.to_dict()
    return model


def adapter_forward(base, adapter: LoraAdapter | None, x: Tensor) -> Tensor:
    """y = x @ base + adapter delta; base may be a quantized tensor."""
    lin = Linear(base)
    lin.adapter = adapter
    return lin.apply(x)


def trainable_fraction(model: TransformerModel) -> float:
    """Adapter parameters over total (base + adapter) parameters."""
    adapter = model.adapter_param_count()
    return adapter / (model.param_count() + adapter)


def qlora_finetune(
    model: TransformerModel,
    corpus: ParallelCorpus,
    lora_cfg: LoraConfig | None = None,
    train_cfg: TrainConfig | None = None,
    rng: Rng | None = None,
) -> tuple[TransformerModel, list[float]]:
    """Adapter-only fine-tuning over a frozen (normally quantized) base.

    Attaches adapters when none are present. An unquantized base is allowed
    (plain LoRA, useful when inference speed matters more than storage) and
    only logs a note.
    """
    rng = rng or Rng(0)
    if not model.has_quantized():
        log.warning("qlora_finetune: base is not quantized; proceeding as plain LoRA")
    if not model.has_adapters():
        attach_adapters(model, lora_cfg or LoraConfig(), rng.split("lora-init"))
    trainable = model.trainable_parameters()
    adapter_names = {
        f"{name}.adapter.{part}"
        for name, lin in model.named_linears() if lin.adapter is not None
        for part in ("down", "up")
    }
    stray = [n for n, _ in trainable if n not in adapter_names]
    if stray:
        raise StateError(f"qlora_finetune: non-adapter parameters trainable: {stray}")
    return train_full(model, corpus, train_cfg or TrainConfig(epochs=4),
                      rng.split("train"))


def merge_adapter(model: TransformerModel) -> TransformerModel:
    """Fold adapters into full-precision bases (base += scale * up @ down,
    transposed to the [in, out] layout) and drop them. Quantized bases are
    refused: codes cannot absorb a dense update."""
    quantized = [name for name, lin in model.named_linears()
                 if lin.adapter is not None and lin.is_quantized]
    if quantized:
        raise StateError(
            "merge_adapter: cannot merge into quantized bases "
            f"{quantized}; dequantize or keep adapters separate"
        )
    for _, lin in model.named_linears():
        if lin.adapter is not None:
            lin.base.data += lin.adapter.merged_delta()
            lin.adapter = None
    model.metadata.pop("lora", None)
    return model

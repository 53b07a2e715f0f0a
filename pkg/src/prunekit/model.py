"""Encoder-decoder transformer with stable per-layer identities.

Layers carry a `LayerId` fixed at construction: the pool (encoder/decoder)
plus the position in the unpruned model. Removing a layer never renumbers
the survivors, so pruning plans and reports always speak in original indices.

Pre-norm residual blocks; learned positions; source and target embeddings
are separate and untied from the output projection. Token ids 0/1/2 are
pad/bos/eos. A model is exclusively owned while it is being trained or
pruned; `clone()` produces an independent snapshot that is safe to evaluate
concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import numerics as nm
from .data import BOS_ID, EOS_ID, ParallelCorpus, Segment
from .errors import (
    ConfigError,
    LayerNotFoundError,
    NumericError,
    SequenceLengthError,
    StateError,
)
from .numerics import Rng, Tensor

ATTENTION_MASK_VALUE = -1e9


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    encoder_layers: int = 8
    decoder_layers: int = 8
    max_positions: int = 64
    dropout: float = 0.0

    def __post_init__(self):
        if self.vocab_size < 4:
            raise ConfigError("vocab_size must cover pad/bos/eos plus content")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.encoder_layers < 1 or self.decoder_layers < 1:
            raise ConfigError("encoder_layers and decoder_layers must be >= 1")
        if self.max_positions < 2:
            raise ConfigError("max_positions must be >= 2")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size, "d_model": self.d_model,
            "n_heads": self.n_heads, "d_ff": self.d_ff,
            "encoder_layers": self.encoder_layers,
            "decoder_layers": self.decoder_layers,
            "max_positions": self.max_positions, "dropout": self.dropout,
        }


@dataclass(frozen=True, order=True)
class LayerId:
    pool: str  # "encoder" | "decoder"
    original_index: int

    def __post_init__(self):
        if self.pool not in ("encoder", "decoder"):
            raise ConfigError(f"unknown layer pool '{self.pool}'")

    def __str__(self) -> str:
        return f"{self.pool}.{self.original_index}"


class Linear:
    """One weight matrix [in_dim, out_dim]: y = x @ w.

    `base` is either a trainable full-precision Tensor or a frozen
    quantized tensor (any object with `.shape` and `.dequantize_data()`);
    a matrix is never both. An optional low-rank adapter adds
    scale * (x @ down.T) @ up.T on top of the frozen or live base.
    """

    __slots__ = ("base", "adapter")

    def __init__(self, base):
        self.base = base
        self.adapter = None

    @property
    def is_quantized(self) -> bool:
        return not isinstance(self.base, Tensor)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.base.shape)

    @property
    def element_count(self) -> int:
        return int(np.prod(self.base.shape))

    def weight(self) -> Tensor:
        if self.is_quantized:
            # Dequantize on the fly; deliberately no cached full-precision copy.
            return Tensor(self.base.dequantize_data())
        return self.base

    def apply(self, x: Tensor) -> Tensor:
        y = nm.matmul(x, self.weight())
        if self.adapter is not None:
            y = nm.add(y, self.adapter.delta(x))
        return y

    def clone(self) -> "Linear":
        if self.is_quantized:
            out = Linear(self.base.copy())
        else:
            t = Tensor(self.base.data.copy(), requires_grad=self.base.requires_grad)
            out = Linear(t)
        if self.adapter is not None:
            out.adapter = self.adapter.clone()
        return out


def _clone_tensor(t: Tensor) -> Tensor:
    return Tensor(t.data.copy(), requires_grad=t.requires_grad)


class _AttentionBlock:
    __slots__ = ("wq", "wk", "wv", "wo", "n_heads")

    def __init__(self, wq, wk, wv, wo, n_heads: int):
        self.wq, self.wk, self.wv, self.wo = wq, wk, wv, wo
        self.n_heads = n_heads

    def __call__(self, query: Tensor, memory: Tensor, mask: np.ndarray | None) -> Tensor:
        t_q, d = query.shape
        t_kv = memory.shape[0]
        d_head = d // self.n_heads
        q = nm.transpose(nm.reshape(self.wq.apply(query), (t_q, self.n_heads, d_head)), (1, 0, 2))
        k = nm.transpose(nm.reshape(self.wk.apply(memory), (t_kv, self.n_heads, d_head)), (1, 0, 2))
        v = nm.transpose(nm.reshape(self.wv.apply(memory), (t_kv, self.n_heads, d_head)), (1, 0, 2))
        scores = nm.mul(nm.matmul(q, nm.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(d_head))
        if mask is not None:
            scores = nm.add(scores, Tensor(mask))
        attn = nm.softmax(scores, axis=-1)
        mixed = nm.transpose(nm.matmul(attn, v), (1, 0, 2))
        return self.wo.apply(nm.reshape(mixed, (t_q, d)))

    def linears(self) -> list[tuple[str, Linear]]:
        return [("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)]

    def clone(self) -> "_AttentionBlock":
        return _AttentionBlock(
            self.wq.clone(), self.wk.clone(), self.wv.clone(), self.wo.clone(),
            self.n_heads,
        )


class _FeedForward:
    __slots__ = ("w1", "b1", "w2", "b2")

    def __init__(self, w1, b1, w2, b2):
        self.w1, self.b1, self.w2, self.b2 = w1, b1, w2, b2

    def __call__(self, x: Tensor) -> Tensor:
        hidden = nm.relu(nm.add(self.w1.apply(x), self.b1))
        return nm.add(self.w2.apply(hidden), self.b2)

    def clone(self) -> "_FeedForward":
        return _FeedForward(self.w1.clone(), _clone_tensor(self.b1),
                            self.w2.clone(), _clone_tensor(self.b2))


class EncoderLayer:
    __slots__ = ("self_attn", "ln1_g", "ln1_b", "ffn", "ln2_g", "ln2_b")

    def __init__(self, self_attn, ln1_g, ln1_b, ffn, ln2_g, ln2_b):
        self.self_attn = self_attn
        self.ln1_g, self.ln1_b = ln1_g, ln1_b
        self.ffn = ffn
        self.ln2_g, self.ln2_b = ln2_g, ln2_b

    def __call__(self, x: Tensor) -> Tensor:
        normed = nm.layer_norm(x, self.ln1_g, self.ln1_b)
        a = nm.add(x, self.self_attn(normed, normed, None))
        return nm.add(a, self.ffn(nm.layer_norm(a, self.ln2_g, self.ln2_b)))

    def clone(self) -> "EncoderLayer":
        return EncoderLayer(
            self.self_attn.clone(), _clone_tensor(self.ln1_g), _clone_tensor(self.ln1_b),
            self.ffn.clone(), _clone_tensor(self.ln2_g), _clone_tensor(self.ln2_b),
        )


class DecoderLayer:
    __slots__ = ("self_attn", "cross_attn", "ln1_g", "ln1_b", "ln2_g", "ln2_b",
                 "ffn", "ln3_g", "ln3_b")

    def __init__(self, self_attn, cross_attn, ln1_g, ln1_b, ln2_g, ln2_b,
                 ffn, ln3_g, ln3_b):
        self.self_attn = self_attn
        self.cross_attn = cross_attn
        self.ln1_g, self.ln1_b = ln1_g, ln1_b
        self.ln2_g, self.ln2_b = ln2_g, ln2_b
        self.ffn = ffn
        self.ln3_g, self.ln3_b = ln3_g, ln3_b

    def __call__(self, x: Tensor, memory: Tensor, causal_mask: np.ndarray) -> Tensor:
        normed = nm.layer_norm(x, self.ln1_g, self.ln1_b)
        a = nm.add(x, self.self_attn(normed, normed, causal_mask))
        b = nm.add(a, self.cross_attn(nm.layer_norm(a, self.ln2_g, self.ln2_b),
                                      memory, None))
        return nm.add(b, self.ffn(nm.layer_norm(b, self.ln3_g, self.ln3_b)))

    def clone(self) -> "DecoderLayer":
        return DecoderLayer(
            self.self_attn.clone(), self.cross_attn.clone(),
            _clone_tensor(self.ln1_g), _clone_tensor(self.ln1_b),
            _clone_tensor(self.ln2_g), _clone_tensor(self.ln2_b),
            self.ffn.clone(),
            _clone_tensor(self.ln3_g), _clone_tensor(self.ln3_b),
        )


class TransformerModel:
    def __init__(self, config: ModelConfig, src_embed, tgt_embed, pos_embed,
                 encoder_stack, decoder_stack, enc_norm_g, enc_norm_b,
                 dec_norm_g, dec_norm_b, output_projection):
        self.config = config
        self.src_embed = src_embed
        self.tgt_embed = tgt_embed
        self.pos_embed = pos_embed
        self.encoder_stack: list[tuple[LayerId, EncoderLayer]] = encoder_stack
        self.decoder_stack: list[tuple[LayerId, DecoderLayer]] = decoder_stack
        self.enc_norm_g, self.enc_norm_b = enc_norm_g, enc_norm_b
        self.dec_norm_g, self.dec_norm_b = dec_norm_g, dec_norm_b
        self.output_projection: Linear = output_projection
        self.metadata: dict = {}

    # -- structure walkers -------------------------------------------------

    def layer_ids(self, pool: str | None = None) -> list[LayerId]:
        ids = [lid for lid, _ in self.encoder_stack] + \
              [lid for lid, _ in self.decoder_stack]
        if pool is not None:
            ids = [lid for lid in ids if lid.pool == pool]
        return ids

    def named_linears(self) -> Iterator[tuple[str, Linear]]:
        for lid, layer in self.encoder_stack:
            for name, lin in layer.self_attn.linears():
                yield f"encoder.{lid.original_index}.self_attn.{name}", lin
            yield f"encoder.{lid.original_index}.ffn.w1", layer.ffn.w1
            yield f"encoder.{lid.original_index}.ffn.w2", layer.ffn.w2
        for lid, layer in self.decoder_stack:
            for name, lin in layer.self_attn.linears():
                yield f"decoder.{lid.original_index}.self_attn.{name}", lin
            for name, lin in layer.cross_attn.linears():
                yield f"decoder.{lid.original_index}.cross_attn.{name}", lin
            yield f"decoder.{lid.original_index}.ffn.w1", layer.ffn.w1
            yield f"decoder.{lid.original_index}.ffn.w2", layer.ffn.w2
        yield "output_projection", self.output_projection

    def named_plain_tensors(self) -> Iterator[tuple[str, Tensor]]:
        """Non-linear parameters: embeddings, norms, biases."""
        yield "src_embed", self.src_embed
        yield "tgt_embed", self.tgt_embed
        yield "pos_embed", self.pos_embed
        for lid, layer in self.encoder_stack:
            p = f"encoder.{lid.original_index}"
            yield f"{p}.ln1.g", layer.ln1_g
            yield f"{p}.ln1.b", layer.ln1_b
            yield f"{p}.ln2.g", layer.ln2_g
            yield f"{p}.ln2.b", layer.ln2_b
            yield f"{p}.ffn.b1", layer.ffn.b1
            yield f"{p}.ffn.b2", layer.ffn.b2
        for lid, layer in self.decoder_stack:
            p = f"decoder.{lid.original_index}"
            yield f"{p}.ln1.g", layer.ln1_g
            yield f"{p}.ln1.b", layer.ln1_b
            yield f"{p}.ln2.g", layer.ln2_g
            yield f"{p}.ln2.b", layer.ln2_b
            yield f"{p}.ln3.g", layer.ln3_g
            yield f"{p}.ln3.b", layer.ln3_b
            yield f"{p}.ffn.b1", layer.ffn.b1
            yield f"{p}.ffn.b2", layer.ffn.b2
        yield "enc_norm.g", self.enc_norm_g
        yield "enc_norm.b", self.enc_norm_b
        yield "dec_norm.g", self.dec_norm_g
        yield "dec_norm.b", self.dec_norm_b

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        """Every full-precision tensor, adapters included, quantized bases not."""
        yield from self.named_plain_tensors()
        for name, lin in self.named_linears():
            if not lin.is_quantized:
                yield name, lin.base
            if lin.adapter is not None:
                yield f"{name}.adapter.down", lin.adapter.down
                yield f"{name}.adapter.up", lin.adapter.up

    def trainable_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.named_parameters() if t.requires_grad]

    def param_count(self) -> int:
        """Logical base-model parameters (adapters counted separately)."""
        total = sum(t.size for _, t in self.named_plain_tensors())
        total += sum(lin.element_count for _, lin in self.named_linears())
        return total

    def adapter_param_count(self) -> int:
        return sum(
            lin.adapter.down.size + lin.adapter.up.size
            for _, lin in self.named_linears() if lin.adapter is not None
        )

    def has_adapters(self) -> bool:
        return any(lin.adapter is not None for _, lin in self.named_linears())

    def has_quantized(self) -> bool:
        return any(lin.is_quantized for _, lin in self.named_linears())

    def clone(self) -> "TransformerModel":
        out = TransformerModel(
            self.config,
            _clone_tensor(self.src_embed), _clone_tensor(self.tgt_embed),
            _clone_tensor(self.pos_embed),
            [(lid, layer.clone()) for lid, layer in self.encoder_stack],
            [(lid, layer.clone()) for lid, layer in self.decoder_stack],
            _clone_tensor(self.enc_norm_g), _clone_tensor(self.enc_norm_b),
            _clone_tensor(self.dec_norm_g), _clone_tensor(self.dec_norm_b),
            self.output_projection.clone(),
        )
        out.metadata = dict(self.metadata)
        return out

    def save(self, path, **metadata) -> None:
        from .checkpoint import save_model
        save_model(self, path, **metadata)


def analytic_layer_params(config: ModelConfig, pool: str) -> int:
    """Exact per-layer parameter count for one encoder or decoder layer."""
    d, f = config.d_model, config.d_ff
    attn = 4 * d * d
    ffn = d * f + f + f * d + d
    norms = 2 * 2 * d
    if pool == "decoder":
        return 2 * attn + ffn + 3 * 2 * d
    return attn + ffn + norms


def analytic_param_count(config: ModelConfig, n_encoder: int, n_decoder: int) -> int:
    """Closed-form parameter count for a model with the given live depths."""
    d, v, p = config.d_model, config.vocab_size, config.max_positions
    total = 2 * v * d + p * d          # source/target/position embeddings
    total += n_encoder * analytic_layer_params(config, "encoder")
    total += n_decoder * analytic_layer_params(config, "decoder")
    total += 2 * 2 * d                 # final encoder/decoder norms
    total += d * v                     # output projection
    return total


def build(config: ModelConfig, rng: Rng) -> TransformerModel:
    """Initialize a model; identical seeds give bitwise-identical weights."""
    d, v, f = config.d_model, config.vocab_size, config.d_ff

    def weight(rows: int, cols: int) -> Tensor:
        return Tensor(rng.normal((rows, cols), std=1.0 / math.sqrt(rows)),
                      requires_grad=True)

    def gain() -> Tensor:
        return Tensor(np.ones(d), requires_grad=True)

    def bias(n: int | None = None) -> Tensor:
        return Tensor(np.zeros(n if n is not None else d), requires_grad=True)

    def attention() -> _AttentionBlock:
        return _AttentionBlock(Linear(weight(d, d)), Linear(weight(d, d)),
                               Linear(weight(d, d)), Linear(weight(d, d)),
                               config.n_heads)

    def feed_forward() -> _FeedForward:
        return _FeedForward(Linear(weight(d, f)), bias(f), Linear(weight(f, d)), bias(d))

    src_embed = Tensor(rng.normal((v, d), std=1.0 / math.sqrt(d)), requires_grad=True)
    tgt_embed = Tensor(rng.normal((v, d), std=1.0 / math.sqrt(d)), requires_grad=True)
    pos_embed = Tensor(rng.normal((config.max_positions, d), std=1.0 / math.sqrt(d)),
                       requires_grad=True)

    encoder_stack = []
    for i in range(config.encoder_layers):
        encoder_stack.append((
            LayerId("encoder", i),
            EncoderLayer(attention(), gain(), bias(), feed_forward(), gain(), bias()),
        ))
    decoder_stack = []
    for i in range(config.decoder_layers):
        decoder_stack.append((
            LayerId("decoder", i),
            DecoderLayer(attention(), attention(), gain(), bias(), gain(), bias(),
                         feed_forward(), gain(), bias()),
        ))
    return TransformerModel(
        config, src_embed, tgt_embed, pos_embed, encoder_stack, decoder_stack,
        gain(), bias(), gain(), bias(), Linear(weight(d, v)),
    )


def _check_tokens(config: ModelConfig, tokens: Sequence[int], what: str) -> None:
    if len(tokens) > config.max_positions:
        raise SequenceLengthError(
            f"{what} length {len(tokens)} exceeds max_positions {config.max_positions}"
        )
    for t in tokens:
        if not 0 <= int(t) < config.vocab_size:
            raise ValueError(f"{what} token id {t} outside vocabulary")


def _causal_mask(t: int) -> np.ndarray:
    return np.triu(np.full((t, t), ATTENTION_MASK_VALUE), k=1)


def encode(model: TransformerModel, source_tokens: Sequence[int]) -> Tensor:
    """Run the encoder stack; returns the memory the decoder attends to."""
    _check_tokens(model.config, source_tokens, "source")
    if len(source_tokens) == 0:
        raise ValueError("source must be non-empty")
    idx = np.asarray(source_tokens, dtype=np.int64)
    x = nm.add(nm.take_rows(model.src_embed, idx),
               nm.take_rows(model.pos_embed, np.arange(len(idx))))
    for _, layer in model.encoder_stack:
        x = layer(x)
    return nm.layer_norm(x, model.enc_norm_g, model.enc_norm_b)


def decode_logits(model: TransformerModel, memory: Tensor,
                  target_prefix: Sequence[int]) -> Tensor:
    _check_tokens(model.config, target_prefix, "target")
    if len(target_prefix) == 0:
        raise ValueError("target prefix must be non-empty")
    idx = np.asarray(target_prefix, dtype=np.int64)
    x = nm.add(nm.take_rows(model.tgt_embed, idx),
               nm.take_rows(model.pos_embed, np.arange(len(idx))))
    mask = _causal_mask(len(idx))
    for _, layer in model.decoder_stack:
        x = layer(x, memory, mask)
    x = nm.layer_norm(x, model.dec_norm_g, model.dec_norm_b)
    return model.output_projection.apply(x)


def forward(model: TransformerModel, source_tokens: Sequence[int],
            target_prefix: Sequence[int]) -> Tensor:
    """Logits [len(target_prefix), vocab] with causal decoder masking."""
    return decode_logits(model, encode(model, source_tokens), target_prefix)


def greedy_decode(model: TransformerModel, source_tokens: Sequence[int],
                  max_len: int = 1024) -> list[int]:
    """Argmax decoding until eos or max_len tokens; exact logit ties go to the
    lowest token id. Returns generated content tokens (no bos/eos)."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    prepared = list(source_tokens) + [EOS_ID]
    memory = encode(model, prepared)
    prefix = [BOS_ID]
    out: list[int] = []
    limit = min(max_len, model.config.max_positions - 1)
    for _ in range(limit):
        logits = decode_logits(model, memory, prefix)
        nxt = int(np.argmax(logits.data[-1]))
        if nxt == EOS_ID:
            break
        out.append(nxt)
        prefix.append(nxt)
    return out


@dataclass(frozen=True)
class TrainConfig:
    """Defaults mirror the desk-scale recipe; the 7B-scale settings
    (lr 1e-5, wd 0.001, 3 epochs, batch 4) remain expressible."""

    epochs: int = 3
    batch_size: int = 4
    learning_rate: float = 3e-4
    weight_decay: float = 1e-3

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")


def training_pair(segment: Segment) -> tuple[list[int], list[int], list[int]]:
    """(encoder input, decoder input, labels) for one segment."""
    enc_in = list(segment.source) + [EOS_ID]
    dec_in = [BOS_ID] + list(segment.target)
    labels = list(segment.target) + [EOS_ID]
    return enc_in, dec_in, labels


def segment_loss(model: TransformerModel, segment: Segment) -> Tensor:
    enc_in, dec_in, labels = training_pair(segment)
    logits = forward(model, enc_in, dec_in)
    return nm.cross_entropy(logits, labels)


def train_full(
    model: TransformerModel,
    corpus: ParallelCorpus | Sequence[Segment],
    config: TrainConfig | None = None,
    rng: Rng | None = None,
) -> tuple[TransformerModel, list[float]]:
    """Train every non-frozen parameter on the corpus's train split (or on
    the plain segment list). Gradients are averaged over each batch; the
    returned curve holds one mean loss per optimizer step."""
    config = config or TrainConfig()
    rng = rng or Rng(0)
    if isinstance(corpus, ParallelCorpus):
        segments = corpus.split("train") if "train" in corpus.splits else corpus.segments
    else:
        segments = list(corpus)
    if not segments:
        raise ValueError("training corpus is empty")

    params = model.trainable_parameters()
    optimizer = nm.AdamW(params, learning_rate=config.learning_rate,
                         weight_decay=config.weight_decay)
    curve: list[float] = []
    step = 0
    for _ in range(config.epochs):
        order = rng.permutation(len(segments))
        for start in range(0, len(order), config.batch_size):
            batch = [segments[i] for i in order[start:start + config.batch_size]]
            nm.zero_grads(t for _, t in params)
            total = 0.0
            for segment in batch:
                loss = nm.mul(segment_loss(model, segment), 1.0 / len(batch))
                if np.isnan(loss.data):
                    raise NumericError(f"NaN loss at step {step}")
                loss.backward()
                total += loss.item()
            if params:
                optimizer.update()
            curve.append(total)
            step += 1
    return model, curve


def remove_layer(model: TransformerModel, layer_id: LayerId) -> TransformerModel:
    """Excise one layer in place (and return the model). Survivors keep their
    original indices and order; the last layer of a pool cannot be removed."""
    stack = model.encoder_stack if layer_id.pool == "encoder" else model.decoder_stack
    positions = [i for i, (lid, _) in enumerate(stack) if lid == layer_id]
    if not positions:
        raise LayerNotFoundError(f"no layer {layer_id} in model")
    if len(stack) <= 1:
        raise StateError(f"refusing to remove the last {layer_id.pool} layer")
    del stack[positions[0]]
    return model


def param_count(model: TransformerModel) -> int:
    return model.param_count()

"""Synthetic translation tasks, corpus splits, and JSONL IO.

The task family is a token cipher plus a deterministic local reordering:
target = reorder(cipher(source)). It stands in for real language pairs at
desk scale and is deliberately non-trivial (difficulty knobs: vocabulary
size and reorder window) so that pruning visibly hurts quality and
fine-tuning visibly recovers it.

Token ids 0/1/2 are reserved for pad/bos/eos; content tokens start at 3.
For evaluation, token sequences map to text one character per token (ids as
space-separated single-character words), which makes word n-grams coincide
with token n-grams and keeps character metrics meaningful.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
FIRST_CONTENT_ID = 3

# Paper-analog sweep sizes for the out-of-domain corpus, 1/10 of the
# 10k/50k/80k/100k utterance grid.
OOD_SWEEP_SIZES = (1000, 5000, 8000, 10000)

_BASE62 = string.ascii_lowercase + string.ascii_uppercase + string.digits


def token_to_char(token_id: int) -> str:
    """Stable printable character for a token id (base62, then CJK plane)."""
    if token_id < len(_BASE62):
        return _BASE62[token_id]
    return chr(0x4E00 + token_id - len(_BASE62))


def tokens_to_text(tokens) -> str:
    return " ".join(token_to_char(int(t)) for t in tokens)


@dataclass(frozen=True)
class Segment:
    """One aligned source/target pair with provenance for dedup/oversampling."""

    source: tuple[int, ...]
    target: tuple[int, ...]
    provenance: str = "authentic"

    def __post_init__(self):
        object.__setattr__(self, "source", tuple(int(t) for t in self.source))
        object.__setattr__(self, "target", tuple(int(t) for t in self.target))
        if len(self.source) == 0:
            raise ValueError("segment source must be non-empty")
        if self.provenance not in ("authentic", "distilled", "out_of_domain"):
            raise ValueError(f"unknown provenance '{self.provenance}'")

    @property
    def dedup_key(self) -> tuple[tuple[int, ...], tuple[int, ...]]:
        return (self.source, self.target)


@dataclass
class ParallelCorpus:
    """Segment list plus optional named, disjoint index splits."""

    segments: list[Segment]
    splits: dict[str, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        seen: set[int] = set()
        for name, indices in self.splits.items():
            for i in indices:
                if not 0 <= i < len(self.segments):
                    raise ValueError(f"split '{name}' references index {i}")
                if i in seen:
                    raise ValueError(f"split '{name}' overlaps another split at {i}")
                seen.add(i)

    def __len__(self) -> int:
        return len(self.segments)

    def split(self, name: str) -> list[Segment]:
        if name not in self.splits:
            raise KeyError(f"corpus has no '{name}' split")
        return [self.segments[i] for i in self.splits[name]]


@dataclass(frozen=True)
class TaskSpec:
    """Cipher-and-reorder task definition.

    `cipher` is a full permutation over token ids that fixes pad/bos/eos.
    `reorder_window` w >= 2 reverses each consecutive block of w positions
    (parity of the position within its block decides where it lands); 0 or 1
    means no reordering. `content_range` is the half-open id interval that
    in-domain sources draw from.
    """

    vocab_size: int
    cipher: tuple[int, ...]
    reorder_window: int = 2
    min_len: int = 4
    max_len: int = 8
    seed: int = 0
    content_range: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if self.vocab_size < FIRST_CONTENT_ID + 2:
            raise ValueError("vocab_size too small for a content alphabet")
        if sorted(self.cipher) != list(range(self.vocab_size)):
            raise ValueError("cipher must be a permutation of all token ids")
        if self.cipher[:FIRST_CONTENT_ID] != (PAD_ID, BOS_ID, EOS_ID):
            raise ValueError("cipher must fix pad/bos/eos")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("invalid length range")
        lo, hi = self.content_range
        if not (FIRST_CONTENT_ID <= lo < hi <= self.vocab_size):
            raise ValueError(f"content_range {self.content_range} out of bounds")

    def apply_cipher(self, tokens: tuple[int, ...]) -> tuple[int, ...]:
        return tuple(self.cipher[t] for t in tokens)

    def invert_cipher(self, tokens: tuple[int, ...]) -> tuple[int, ...]:
        inverse = [0] * self.vocab_size
        for src, dst in enumerate(self.cipher):
            inverse[dst] = src
        return tuple(inverse[t] for t in tokens)

    def apply_reorder(self, tokens: tuple[int, ...]) -> tuple[int, ...]:
        w = self.reorder_window
        if w < 2:
            return tokens
        out = list(tokens)
        for start in range(0, len(out) - w + 1, w):
            out[start:start + w] = reversed(out[start:start + w])
        return tuple(out)

    # Block reversal is an involution, so the inverse is itself.
    invert_reorder = apply_reorder

    def target_for(self, source: tuple[int, ...]) -> tuple[int, ...]:
        return self.apply_reorder(self.apply_cipher(source))


def make_task(
    vocab_size: int,
    reorder_window: int = 2,
    min_len: int = 4,
    max_len: int = 8,
    seed: int = 0,
) -> TaskSpec:
    """Seeded task: random cipher over content ids, in-domain pool sized to
    leave headroom for a partially fresh out-of-domain vocabulary region."""
    gen = np.random.Generator(np.random.PCG64(seed))
    content = np.arange(FIRST_CONTENT_ID, vocab_size)
    cipher = tuple(range(FIRST_CONTENT_ID)) + tuple(
        int(t) for t in gen.permutation(content)
    )
    usable = vocab_size - FIRST_CONTENT_ID
    pool = max(2, (usable * 2) // 3)
    return TaskSpec(
        vocab_size=vocab_size,
        cipher=cipher,
        reorder_window=reorder_window,
        min_len=min_len,
        max_len=max_len,
        seed=seed,
        content_range=(FIRST_CONTENT_ID, FIRST_CONTENT_ID + pool),
    )


def _draw_segments(
    spec: TaskSpec,
    n: int,
    seed: int,
    pool: tuple[int, int],
    min_len: int,
    max_len: int,
    provenance: str,
) -> list[Segment]:
    gen = np.random.Generator(np.random.PCG64(seed))
    lo, hi = pool
    segments = []
    for _ in range(n):
        length = int(gen.integers(min_len, max_len + 1))
        source = tuple(int(t) for t in gen.integers(lo, hi, size=length))
        segments.append(Segment(source, spec.target_for(source), provenance))
    return segments


def gen_corpus(spec: TaskSpec, n: int, seed: int = 0) -> ParallelCorpus:
    """In-domain corpus: n seeded segments, target = reorder(cipher(source))."""
    if n < 1:
        raise ValueError("corpus size must be >= 1")
    segments = _draw_segments(
        spec, n, seed, spec.content_range, spec.min_len, spec.max_len, "authentic"
    )
    return ParallelCorpus(segments)


def gen_ood_corpus(
    spec: TaskSpec,
    n: int,
    seed: int = 0,
    vocab_overlap: float = 0.5,
    length_shift: int = 2,
) -> ParallelCorpus:
    """Out-of-domain variant: same cipher/reorder family, shifted lengths,
    and a token pool that shares only `vocab_overlap` of the in-domain pool
    (the rest comes from ids above it)."""
    if n < 1:
        raise ValueError("corpus size must be >= 1")
    if not 0.0 <= vocab_overlap <= 1.0:
        raise ValueError("vocab_overlap must be in [0, 1]")
    lo, hi = spec.content_range
    pool_size = hi - lo
    shared = round(pool_size * vocab_overlap)
    fresh = pool_size - shared
    if hi + fresh > spec.vocab_size:
        raise ValueError(
            f"vocab_size {spec.vocab_size} leaves no room for {fresh} fresh "
            f"out-of-domain tokens above id {hi}"
        )
    pool = (hi - shared, hi + fresh)
    segments = _draw_segments(
        spec, n, seed, pool,
        spec.min_len + length_shift, spec.max_len + length_shift,
        "out_of_domain",
    )
    return ParallelCorpus(segments)


def train_test_split(
    corpus: ParallelCorpus,
    test_size: int = 100,
    seed: int = 0,
    dev_size: int = 50,
) -> ParallelCorpus:
    """Uniform test sample without replacement, then a dev carve-out from the
    remainder; what is left is train. Splits are disjoint and cover the corpus.

    dev_size=0 reproduces the plain two-way protocol (e.g. 884 -> 784 train
    + 100 test); the default keeps a dedicated dev split for layer-importance
    evaluation so selection never sees the final test data.
    """
    n = len(corpus)
    if test_size >= n:
        raise ValueError(f"test_size {test_size} must be < corpus size {n}")
    if test_size + dev_size >= n:
        raise ValueError("test_size + dev_size must leave at least one train segment")
    gen = np.random.Generator(np.random.PCG64(seed))
    order = gen.permutation(n)
    test = sorted(int(i) for i in order[:test_size])
    dev = sorted(int(i) for i in order[test_size:test_size + dev_size])
    train = sorted(int(i) for i in order[test_size + dev_size:])
    splits = {"train": train, "test": test}
    if dev_size > 0:
        splits["dev"] = dev
    return ParallelCorpus(list(corpus.segments), splits)


def save_jsonl(corpus: ParallelCorpus, path: str | Path) -> None:
    """One JSON object per line: src, tgt, provenance. Splits go to a sidecar
    manifest `<path>.splits.json` when present."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for seg in corpus.segments:
            fh.write(json.dumps({
                "src": list(seg.source),
                "tgt": list(seg.target),
                "provenance": seg.provenance,
            }) + "\n")
    sidecar = path.with_name(path.name + ".splits.json")
    if corpus.splits:
        sidecar.write_text(json.dumps(corpus.splits, sort_keys=True))
    elif sidecar.exists():
        sidecar.unlink()


def load_jsonl(path: str | Path) -> ParallelCorpus:
    path = Path(path)
    segments: list[Segment] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                segments.append(Segment(
                    tuple(obj["src"]), tuple(obj["tgt"]),
                    obj.get("provenance", "authentic"),
                ))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}: malformed segment on line {lineno}: {exc}") from exc
    sidecar = path.with_name(path.name + ".splits.json")
    splits: dict[str, list[int]] = {}
    if sidecar.exists():
        splits = {k: list(map(int, v)) for k, v in json.loads(sidecar.read_text()).items()}
    return ParallelCorpus(segments, splits)

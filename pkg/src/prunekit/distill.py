"""Sequence-level knowledge distillation: teacher decoding, augmentation
with duplicate filtering, and oversampling.

Distillation is hard-target: the teacher greedy-decodes the training
sources and the outputs become new target-side segments. Augmentation keeps
every authentic segment and appends distilled ones whose (source, target)
pair has not been seen; the paper-style counts fall out of that rule
(n segments when the teacher reproduces every reference, 2n when it differs
on all of them).
"""

from __future__ import annotations

from typing import Iterable, Sequence

from .data import ParallelCorpus, Segment
from .model import TransformerModel, greedy_decode


def generate_kd(
    teacher_model: TransformerModel,
    sources: Sequence[Sequence[int]],
    max_len: int = 1024,
) -> list[Segment]:
    """Greedy-decode each source with the teacher; deterministic, order
    preserving. Produces provenance='distilled' segments."""
    out: list[Segment] = []
    for index, source in enumerate(sources):
        try:
            target = greedy_decode(teacher_model, source, max_len=max_len)
        except Exception as exc:
            raise RuntimeError(f"teacher decode failed on segment {index}: {exc}") from exc
        out.append(Segment(tuple(source), tuple(target), "distilled"))
    return out


def augment(
    authentic: Iterable[Segment],
    distilled: Iterable[Segment],
    dedup_on: str = "pair",
) -> ParallelCorpus:
    """Concatenate authentic + distilled, dropping exact duplicates.

    The default key is the (source, target) pair, which preserves cases
    where teacher and reference diverge on the same source; `dedup_on`
    can be switched to "target" for sensitivity runs. Authentic segments
    are never dropped and keep their order; surviving distilled segments
    follow in input order.
    """
    if dedup_on not in ("pair", "target"):
        raise ValueError(f"unknown dedup key '{dedup_on}'")

    def key(seg: Segment):
        return seg.dedup_key if dedup_on == "pair" else seg.target

    segments: list[Segment] = []
    seen = set()
    for seg in authentic:
        segments.append(seg)
        seen.add(key(seg))
    for seg in distilled:
        k = key(seg)
        if k in seen:
            continue
        seen.add(k)
        segments.append(seg)
    return ParallelCorpus(segments)


def oversample(
    corpus: ParallelCorpus,
    provenance_filter: str | set[str],
    factor: int,
) -> ParallelCorpus:
    """Repeat matching segments `factor` times (repeats adjacent, original
    order otherwise); non-matching segments appear once."""
    if not isinstance(factor, int) or isinstance(factor, bool) or factor < 1:
        raise ValueError(f"oversample factor must be an integer >= 1, got {factor!r}")
    wanted = {provenance_filter} if isinstance(provenance_filter, str) else set(provenance_filter)
    segments: list[Segment] = []
    for seg in corpus.segments:
        repeats = factor if seg.provenance in wanted else 1
        segments.extend([seg] * repeats)
    return ParallelCorpus(segments)

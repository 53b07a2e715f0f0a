"""Blockwise 4-bit NF4 quantization, double quantization, storage accounting.

The 16-level codebook comes from evenly spaced quantiles of the standard
normal, normalized to [-1, 1], with asymmetric halves around an exact zero
(8 positive levels, 7 negative, plus 0). Weights are scaled per block by the
block's absolute maximum, snapped to the nearest level (ties to the lower
code), and packed two codes per byte, low nibble first.

Double quantization compresses the per-block absmax array itself: an 8-bit
affine code per block, one float scale per group of 256 blocks, and a single
offset per tensor (the smallest absmax), so dequantized scales can never go
negative.

Storage accounting is decoupled from the in-memory float width: full
precision is counted at 4 bytes per parameter (2 under the bf16 accounting
flag), nf4 at half a byte plus scale overhead. Gigabytes are decimal
(1 GB = 1000^3 bytes).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from statistics import NormalDist

import numpy as np

from .errors import CheckpointError, NumericError, StateError
from .numerics import Tensor

NF4_BLOCK_SIZE = 64
DOUBLE_QUANT_GROUP = 256
GB = 1000 ** 3

FULL_PRECISION_BYTES = 4     # f32-equivalent accounting for live weights
BF16_BYTES = 2               # accounting width under the bf16 flag
ABSMAX_BYTES = 4             # one f32 scale per block, single quantization
ABSMAX_CODE_BYTES = 1        # 8-bit absmax code per block, double quantization
GROUP_SCALE_BYTES = 4        # f32 second-level scale per group of blocks
OFFSET_BYTES = 4             # single f32 offset per tensor


@dataclass(frozen=True)
class Nf4Codebook:
    levels: tuple[float, ...]

    def __post_init__(self):
        if len(self.levels) != 16:
            raise ValueError("nf4 codebook must have 16 levels")
        if list(self.levels) != sorted(set(self.levels)):
            raise ValueError("nf4 levels must be strictly increasing")
        if self.levels[0] != -1.0 or self.levels[7] != 0.0 or self.levels[15] != 1.0:
            raise ValueError("nf4 anchors must be -1 at 0, 0 at 7, 1 at 15")

    def as_array(self) -> np.ndarray:
        return np.asarray(self.levels)

    def midpoints(self) -> np.ndarray:
        lv = self.as_array()
        return (lv[:-1] + lv[1:]) / 2.0

    def max_half_gap(self) -> float:
        lv = self.as_array()
        return float(np.max(np.diff(lv)) / 2.0)


def build_nf4_codebook() -> Nf4Codebook:
    """Quantile construction: 8 evenly spaced upper-tail quantiles, 7 lower,
    an exact zero, everything normalized by the largest magnitude."""
    inv_cdf = NormalDist().inv_cdf
    offset = 1.0 - 0.5 * (1.0 / 32.0 + 1.0 / 30.0)
    positive = [inv_cdf(p) for p in np.linspace(offset, 0.5, 9)[:-1]]
    negative = [-inv_cdf(p) for p in np.linspace(offset, 0.5, 8)[:-1]]
    levels = sorted(negative + [0.0] + positive)
    top = max(levels)
    normalized = [v / top for v in levels]
    normalized[0] = -1.0
    normalized[7] = 0.0
    normalized[15] = 1.0
    return Nf4Codebook(tuple(normalized))


NF4_CODEBOOK = build_nf4_codebook()
NF4_LEVELS = NF4_CODEBOOK.as_array()
_NF4_MIDPOINTS = NF4_CODEBOOK.midpoints()


@dataclass
class DoubleQuantMeta:
    """8-bit affine codes for the per-block absmax values.

    absmax[i] = codes[i] * group_scales[i // group_size] + offset, with
    offset = min(absmax) shared by the whole tensor, so every dequantized
    absmax is >= 0.
    """

    codes: np.ndarray            # uint8, one per block
    group_scales: np.ndarray     # float64, one per group of group_size blocks
    offset: float
    group_size: int = DOUBLE_QUANT_GROUP

    def dequantize(self) -> np.ndarray:
        scales = np.repeat(self.group_scales, self.group_size)[: len(self.codes)]
        return self.codes.astype(np.float64) * scales + self.offset

    def copy(self) -> "DoubleQuantMeta":
        return DoubleQuantMeta(self.codes.copy(), self.group_scales.copy(),
                               self.offset, self.group_size)


@dataclass
class QuantizedTensor:
    """NF4 nibble payload plus per-block scales (plain or double-quantized)."""

    shape: tuple[int, ...]
    block_size: int
    packed: np.ndarray                      # uint8, two codes per byte
    absmax: np.ndarray | DoubleQuantMeta    # float64 per block, or meta

    @property
    def element_count(self) -> int:
        return int(np.prod(self.shape))

    @property
    def n_blocks(self) -> int:
        return math.ceil(self.element_count / self.block_size)

    @property
    def double_quant(self) -> bool:
        return isinstance(self.absmax, DoubleQuantMeta)

    def codes(self) -> np.ndarray:
        n = self.element_count
        expected = math.ceil(n / 2)
        if len(self.packed) != expected:
            raise CheckpointError(
                f"nibble payload holds {len(self.packed)} bytes, "
                f"expected {expected} for {n} elements"
            )
        low = self.packed & 0x0F
        high = (self.packed >> 4) & 0x0F
        codes = np.empty(len(self.packed) * 2, dtype=np.uint8)
        codes[0::2] = low
        codes[1::2] = high
        return codes[:n]

    def block_absmax(self) -> np.ndarray:
        if self.double_quant:
            return self.absmax.dequantize()
        return self.absmax

    def dequantize_data(self) -> np.ndarray:
        scales = np.repeat(self.block_absmax(), self.block_size)[: self.element_count]
        return (NF4_LEVELS[self.codes()] * scales).reshape(self.shape)

    def payload_bytes(self) -> int:
        """Packed nibble bytes only (the 0.5 byte/param part)."""
        return int(len(self.packed))

    def scale_bytes(self) -> int:
        """Accounting bytes for the scale machinery."""
        if self.double_quant:
            n_groups = math.ceil(self.n_blocks / self.absmax.group_size)
            return (self.n_blocks * ABSMAX_CODE_BYTES
                    + n_groups * GROUP_SCALE_BYTES + OFFSET_BYTES)
        return self.n_blocks * ABSMAX_BYTES

    def copy(self) -> "QuantizedTensor":
        absmax = self.absmax.copy()
        return QuantizedTensor(self.shape, self.block_size, self.packed.copy(), absmax)


def _pack_nibbles(codes: np.ndarray) -> np.ndarray:
    if len(codes) % 2 == 1:
        codes = np.concatenate([codes, np.array([7], dtype=np.uint8)])
    return (codes[0::2] | (codes[1::2] << 4)).astype(np.uint8)


def _double_quantize_absmax(absmax: np.ndarray, group_size: int) -> DoubleQuantMeta:
    offset = float(absmax.min()) if len(absmax) else 0.0
    shifted = absmax - offset
    n_groups = math.ceil(len(absmax) / group_size)
    codes = np.zeros(len(absmax), dtype=np.uint8)
    scales = np.zeros(n_groups, dtype=np.float64)
    for g in range(n_groups):
        chunk = shifted[g * group_size:(g + 1) * group_size]
        top = float(chunk.max()) if len(chunk) else 0.0
        if top > 0.0:
            scale = top / 255.0
            scales[g] = scale
            codes[g * group_size:g * group_size + len(chunk)] = np.clip(
                np.round(chunk / scale), 0, 255
            ).astype(np.uint8)
    return DoubleQuantMeta(codes, scales, offset, group_size)


def quantize_nf4(
    tensor: Tensor | np.ndarray,
    block_size: int = NF4_BLOCK_SIZE,
    double_quant: bool = False,
) -> QuantizedTensor:
    """Blockwise nearest-level NF4 quantization over row-major order.

    All-zero blocks get absmax 0 and code 7 (the exact-zero level), so they
    round-trip to exact zeros.
    """
    data = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise NumericError("quantize_nf4: non-finite input")
    if block_size < 1:
        raise ValueError("block_size must be >= 1")
    flat = data.reshape(-1)
    n = flat.size
    n_blocks = math.ceil(n / block_size)
    padded = np.zeros(n_blocks * block_size)
    padded[:n] = flat
    blocks = padded.reshape(n_blocks, block_size)
    absmax = np.abs(blocks).max(axis=1)
    scaled = np.divide(blocks, absmax[:, None], out=np.zeros_like(blocks),
                       where=absmax[:, None] > 0)
    # searchsorted over level midpoints = nearest level, ties to lower code
    codes = np.searchsorted(_NF4_MIDPOINTS, scaled.reshape(-1), side="left")
    codes = codes.astype(np.uint8)[:n]
    packed = _pack_nibbles(codes)
    if double_quant:
        return QuantizedTensor(data.shape, block_size, packed,
                               _double_quantize_absmax(absmax, DOUBLE_QUANT_GROUP))
    return QuantizedTensor(data.shape, block_size, packed, absmax)


def dequantize(q: QuantizedTensor) -> Tensor:
    """Map codes back through the codebook: value = level[code] * absmax."""
    return Tensor(q.dequantize_data())


def quantize_model(model, block_size: int = NF4_BLOCK_SIZE,
                   double_quant: bool = True):
    """Quantize-freeze every linear matrix in place (attention, FFN, output
    projection). Embeddings, norms and biases stay full precision. Refuses
    models that already carry adapters or quantized matrices."""
    for name, lin in model.named_linears():
        if lin.adapter is not None:
            raise StateError(f"quantize_model: adapter already attached to {name}")
        if lin.is_quantized:
            raise StateError(f"quantize_model: {name} is already quantized")
    for _, lin in model.named_linears():
        lin.base = quantize_nf4(lin.base, block_size=block_size,
                                double_quant=double_quant)
    return model


def double_quant_overhead_bits_per_param(
    block_size: int = NF4_BLOCK_SIZE,
    group_size: int = DOUBLE_QUANT_GROUP,
) -> float:
    """Scale overhead of double quantization on top of the 4 code bits,
    excluding the constant per-tensor offset."""
    return (8.0 * ABSMAX_CODE_BYTES) / block_size + \
           (8.0 * GROUP_SCALE_BYTES) / (block_size * group_size)


@dataclass
class StorageReport:
    """Byte accounting for one model; decimal GB, model tensors only."""

    full_precision_params: int
    quantized_params: int
    adapter_params: int
    full_precision_bytes: int
    quant_payload_bytes: int
    quant_scale_bytes: int
    adapter_bytes: int
    bytes_per_full_param: int

    @property
    def logical_params(self) -> int:
        return self.full_precision_params + self.quantized_params

    @property
    def total_bytes(self) -> int:
        return (self.full_precision_bytes + self.quant_payload_bytes
                + self.quant_scale_bytes + self.adapter_bytes)

    @property
    def total_gb(self) -> float:
        return bytes_to_gb(self.total_bytes)

    def to_dict(self) -> dict:
        return {
            "logical_params": self.logical_params,
            "full_precision_params": self.full_precision_params,
            "quantized_params": self.quantized_params,
            "adapter_params": self.adapter_params,
            "full_precision_bytes": self.full_precision_bytes,
            "quant_payload_bytes": self.quant_payload_bytes,
            "quant_scale_bytes": self.quant_scale_bytes,
            "adapter_bytes": self.adapter_bytes,
            "bytes_per_full_param": self.bytes_per_full_param,
            "total_bytes": self.total_bytes,
            "total_gb": self.total_gb,
        }


def bytes_to_gb(n_bytes: int | float) -> float:
    return n_bytes / GB


def full_precision_bytes(n_params: int, bf16_accounting: bool = False) -> int:
    return n_params * (BF16_BYTES if bf16_accounting else FULL_PRECISION_BYTES)


def storage_bytes(model, bf16_accounting: bool = False) -> StorageReport:
    """Accounting over the model's tensors. The logical parameter count and
    the packed byte size are reported separately: packing nf4 weights halves
    bytes but does not remove parameters."""
    width = BF16_BYTES if bf16_accounting else FULL_PRECISION_BYTES
    full_params = sum(t.size for _, t in model.named_plain_tensors())
    quant_params = 0
    payload = 0
    scales = 0
    for _, lin in model.named_linears():
        if lin.is_quantized:
            quant_params += lin.base.element_count
            payload += lin.base.payload_bytes()
            scales += lin.base.scale_bytes()
        else:
            full_params += lin.base.size
    adapter_params = model.adapter_param_count()
    return StorageReport(
        full_precision_params=full_params,
        quantized_params=quant_params,
        adapter_params=adapter_params,
        full_precision_bytes=full_params * width,
        quant_payload_bytes=payload,
        quant_scale_bytes=scales,
        adapter_bytes=adapter_params * width,
        bytes_per_full_param=width,
    )

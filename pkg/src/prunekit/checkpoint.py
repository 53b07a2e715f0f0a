"""Binary checkpoint format.

Little-endian layout:

    magic "PKPT" | u32 version | u32 header_len | header JSON (utf-8)
    u32 tensor_count
    per tensor:
        u16 name_len | name utf-8
        u8 dtype tag: 0 = f64 full precision, 1 = nf4-packed
        u8 trainable flag (f64 tensors; 0 for nf4)
        u8 ndim | u32 * ndim extents
        f64 payload: raw doubles
        nf4 payload: u32 block_size | u8 double_quant
                     | plain:  u32 n_blocks | f64 absmax * n_blocks
                     | double: u32 n_blocks | u8 codes * n_blocks
                               | u32 n_groups | f64 scales * n_groups
                               | f64 offset | u32 group_size
                     | nibble bytes, ceil(elements / 2), low nibble first

The header JSON carries the model config, the surviving layer ids per
stack (original indices), run metadata (stage, seed, pruning-plan
reference), and the adapter manifest (target, rank, alpha, rs flag,
dropout). Round-trips are bitwise for weights, codes and scales.

Full-precision payloads are stored as f64 because that is the compute
dtype; storage *accounting* still counts them at the declared 4 (or 2)
bytes per parameter, see quant.storage_bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .model import LayerId, ModelConfig, TransformerModel, build, remove_layer
from .numerics import Rng, Tensor
from .quant import DoubleQuantMeta, QuantizedTensor

MAGIC = b"PKPT"
FORMAT_VERSION = 1
DTYPE_F64 = 0
DTYPE_NF4 = 1


class _Writer:
    def __init__(self):
        self.chunks: list[bytes] = []

    def u8(self, v: int):
        self.chunks.append(struct.pack("<B", v))

    def u16(self, v: int):
        self.chunks.append(struct.pack("<H", v))

    def u32(self, v: int):
        self.chunks.append(struct.pack("<I", v))

    def f64(self, v: float):
        self.chunks.append(struct.pack("<d", v))

    def raw(self, b: bytes):
        self.chunks.append(b)

    def f64_array(self, a: np.ndarray):
        self.raw(np.ascontiguousarray(a, dtype="<f8").tobytes())

    def getvalue(self) -> bytes:
        return b"".join(self.chunks)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def _take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(
                f"truncated checkpoint: wanted {n} bytes", offset=self.pos
            )
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return struct.unpack("<B", self._take(1))[0]

    def u16(self) -> int:
        return struct.unpack("<H", self._take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self._take(8))[0]

    def f64_array(self, count: int, shape=None) -> np.ndarray:
        arr = np.frombuffer(self._take(8 * count), dtype="<f8").astype(np.float64)
        return arr.reshape(shape) if shape is not None else arr

    def u8_array(self, count: int) -> np.ndarray:
        return np.frombuffer(self._take(count), dtype=np.uint8).copy()


def _write_tensor(w: _Writer, name: str, obj) -> None:
    encoded = name.encode()
    w.u16(len(encoded))
    w.raw(encoded)
    if isinstance(obj, Tensor):
        w.u8(DTYPE_F64)
        w.u8(1 if obj.requires_grad else 0)
        w.u8(obj.data.ndim)
        for extent in obj.data.shape:
            w.u32(extent)
        w.f64_array(obj.data)
        return
    q: QuantizedTensor = obj
    w.u8(DTYPE_NF4)
    w.u8(0)
    w.u8(len(q.shape))
    for extent in q.shape:
        w.u32(extent)
    w.u32(q.block_size)
    w.u8(1 if q.double_quant else 0)
    if q.double_quant:
        meta: DoubleQuantMeta = q.absmax
        w.u32(len(meta.codes))
        w.raw(meta.codes.astype(np.uint8).tobytes())
        w.u32(len(meta.group_scales))
        w.f64_array(meta.group_scales)
        w.f64(meta.offset)
        w.u32(meta.group_size)
    else:
        w.u32(len(q.absmax))
        w.f64_array(q.absmax)
    w.raw(q.packed.astype(np.uint8).tobytes())


def _read_tensor(r: _Reader) -> tuple[str, object, bool]:
    name = r._take(r.u16()).decode()
    dtype = r.u8()
    trainable = bool(r.u8())
    ndim = r.u8()
    shape = tuple(r.u32() for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    if dtype == DTYPE_F64:
        data = r.f64_array(count, shape)
        tensor = Tensor(data, requires_grad=trainable)
        return name, tensor, trainable
    if dtype != DTYPE_NF4:
        raise CheckpointError(f"unknown dtype tag {dtype} for '{name}'", offset=r.pos)
    block_size = r.u32()
    double_quant = bool(r.u8())
    if double_quant:
        n_blocks = r.u32()
        codes = r.u8_array(n_blocks)
        n_groups = r.u32()
        scales = r.f64_array(n_groups)
        offset = r.f64()
        group_size = r.u32()
        absmax: np.ndarray | DoubleQuantMeta = DoubleQuantMeta(
            codes, scales, offset, group_size
        )
    else:
        absmax = r.f64_array(r.u32())
    packed = r.u8_array((count + 1) // 2)
    return name, QuantizedTensor(shape, block_size, packed, absmax), False


def _collect_tensors(model: TransformerModel) -> list[tuple[str, object]]:
    entries: list[tuple[str, object]] = list(model.named_plain_tensors())
    for name, lin in model.named_linears():
        entries.append((name, lin.base))
        if lin.adapter is not None:
            entries.append((f"{name}.adapter.down", lin.adapter.down))
            entries.append((f"{name}.adapter.up", lin.adapter.up))
    return entries


def _adapter_manifest(model: TransformerModel) -> dict:
    manifest = {}
    for name, lin in model.named_linears():
        ad = lin.adapter
        if ad is not None:
            manifest[name] = {
                "rank": ad.rank,
                "scale": ad.scale,
                "dropout": ad.dropout,
            }
    return manifest


def save_model(model: TransformerModel, path, **metadata) -> None:
    """Serialize weights, layer identities and metadata; see module docs."""
    header = {
        "config": model.config.to_dict(),
        "encoder_layers": [lid.original_index for lid, _ in model.encoder_stack],
        "decoder_layers": [lid.original_index for lid, _ in model.decoder_stack],
        "metadata": {**model.metadata, **metadata},
        "adapters": _adapter_manifest(model),
    }
    header_blob = json.dumps(header, sort_keys=True).encode()
    w = _Writer()
    w.raw(MAGIC)
    w.u32(FORMAT_VERSION)
    w.u32(len(header_blob))
    w.raw(header_blob)
    entries = _collect_tensors(model)
    w.u32(len(entries))
    for name, obj in entries:
        _write_tensor(w, name, obj)
    Path(path).write_bytes(w.getvalue())


def load_model(path) -> TransformerModel:
    """Rebuild a model bitwise from a checkpoint file."""
    blob = Path(path).read_bytes()
    r = _Reader(blob)
    if r._take(4) != MAGIC:
        raise CheckpointError("bad magic; not a PKPT checkpoint", offset=0)
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {version}", offset=4)
    try:
        header = json.loads(r._take(r.u32()).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header: {exc}", offset=r.pos) from exc

    config = ModelConfig(**header["config"])
    model = build(config, Rng(0))
    for pool, survivors in (("encoder", header["encoder_layers"]),
                            ("decoder", header["decoder_layers"])):
        keep = set(survivors)
        for lid in model.layer_ids(pool):
            if lid.original_index not in keep:
                remove_layer(model, LayerId(pool, lid.original_index))
    model.metadata = dict(header.get("metadata", {}))

    tensors: dict[str, object] = {}
    flags: dict[str, bool] = {}
    for _ in range(r.u32()):
        name, obj, trainable = _read_tensor(r)
        tensors[name] = obj
        flags[name] = trainable

    for name, tensor in model.named_plain_tensors():
        stored = tensors.pop(name, None)
        if not isinstance(stored, Tensor):
            raise CheckpointError(f"missing tensor '{name}'")
        if stored.shape != tensor.shape:
            raise CheckpointError(
                f"tensor '{name}' has shape {stored.shape}, expected {tensor.shape}"
            )
        tensor.data = stored.data
        tensor.requires_grad = stored.requires_grad

    from .lora import LoraAdapter  # deferred: lora imports model

    manifest = header.get("adapters", {})
    for name, lin in model.named_linears():
        stored = tensors.pop(name, None)
        if stored is None:
            raise CheckpointError(f"missing tensor '{name}'")
        if tuple(stored.shape) != lin.shape:
            raise CheckpointError(
                f"tensor '{name}' has shape {tuple(stored.shape)}, expected {lin.shape}"
            )
        lin.base = stored
        if name in manifest:
            entry = manifest[name]
            down = tensors.pop(f"{name}.adapter.down")
            up = tensors.pop(f"{name}.adapter.up")
            lin.adapter = LoraAdapter(down, up, entry["scale"], entry["dropout"])
    if tensors:
        raise CheckpointError(f"unexpected tensors in checkpoint: {sorted(tensors)}")
    return model

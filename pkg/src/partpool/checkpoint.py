"""Binary checkpoint format.

Layout: the magic ``b"PPOOL1\\n"``, then one record per tensor::

    uint32 name length | name bytes (UTF-8) | 4 x int32 shape | float32 data

All integers and floats are little-endian. Tensors of rank < 4 are stored
with leading unit dimensions. Two ``meta.*`` records describe the
architecture and the compact bilinear projection so a checkpoint rebuilds
its model on its own.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig
from .errors import DataError
from .model import ModelConfig, PartModel

MAGIC = b"PPOOL1\n"
_HOLISTIC = ("gap", "compact_bilinear", "none")
_POOL = ("mean", "max")


def _shape4(shape) -> tuple[int, int, int, int]:
    if len(shape) > 4:
        raise DataError(f"cannot store rank-{len(shape)} tensor")
    return (1,) * (4 - len(shape)) + tuple(int(s) for s in shape)


def encode_records(records: list[tuple[str, np.ndarray]]) -> bytes:
    out = [MAGIC]
    for name, arr in records:
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<4i", *_shape4(arr.shape)))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def decode_records(buf: bytes) -> list[tuple[str, np.ndarray]]:
    if not buf.startswith(MAGIC):
        raise DataError("not a PPOOL1 checkpoint (bad magic)")
    pos, records = len(MAGIC), []
    try:
        while pos < len(buf):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            shape = struct.unpack_from("<4i", buf, pos)
            pos += 16
            count = int(np.prod(shape))
            if min(shape) < 0 or pos + 4 * count > len(buf):
                raise DataError(f"truncated tensor {name!r}")
            arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(shape)
            pos += 4 * count
            records.append((name, arr))
    except (struct.error, UnicodeDecodeError) as exc:
        raise DataError(f"corrupt checkpoint: {exc}") from exc
    return records


def _meta(model: PartModel) -> list[tuple[str, np.ndarray]]:
    c, b = model.config, model.config.backbone
    arch = [b.input_size, b.blocks, int(b.pool_last), b.feature_channels, b.num_parts, c.num_classes,
            c.window, _POOL.index(c.pool_mode), int(c.use_parts), _HOLISTIC.index(c.holistic),
            int(c.compact_per_part), c.seed % (1 << 24)]
    seed = int(c.compact_seed) % (1 << 32)
    cbp = [int(c.uses_compact), c.compact_dim, seed >> 16, seed & 0xFFFF]
    return [("meta.model", np.array(arch, dtype=np.float32)),
            ("meta.compact_bilinear", np.array(cbp, dtype=np.float32))]


def checkpoint_bytes(model: PartModel) -> bytes:
    records = _meta(model) + [(name, p.data) for name, p in model.named_parameters()]
    return encode_records(records)


def save_checkpoint(model: PartModel, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def model_from_records(records) -> PartModel:
    table = dict(records)
    try:
        arch = [int(v) for v in table["meta.model"].ravel()]
        cbp = [int(v) for v in table["meta.compact_bilinear"].ravel()]
        (input_size, blocks, pool_last, feat, parts, classes, window, pool, use_parts,
         holistic, per_part, seed) = arch
        widths = [int(table[f"backbone.block{b}.conv1.weight"].shape[0]) for b in range(blocks)]
    except (KeyError, ValueError) as exc:
        raise DataError(f"checkpoint lacks architecture metadata: {exc}") from exc
    config = ModelConfig(
        backbone=BackboneConfig(input_size=input_size, widths=widths, blocks=blocks, feature_channels=feat,
                                num_parts=parts, pool_last=bool(pool_last)),
        num_classes=classes, window=window, pool_mode=_POOL[pool], use_parts=bool(use_parts),
        holistic=_HOLISTIC[holistic], compact_per_part=bool(per_part), compact_dim=cbp[1],
        compact_seed=(cbp[2] << 16) | cbp[3], seed=seed)
    model = PartModel(config)
    for name, p in model.named_parameters():
        if name not in table:
            raise DataError(f"checkpoint is missing parameter {name!r}")
        arr = table[name]
        if arr.size != p.data.size:
            raise DataError(f"parameter {name!r} has {arr.size} values, model expects {p.data.size}")
        p.data = arr.reshape(p.data.shape).astype(np.float32)
        p.zero_grad()
    return model


def load_checkpoint(path) -> PartModel:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: cannot read checkpoint ({exc})") from exc
    return model_from_records(decode_records(buf))

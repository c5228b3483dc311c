"""Binary checkpoint format.

    magic "KWSC" | u32 version | u32 tensor count
    per tensor: u16 name length | UTF-8 name | u8 rank | u32 dims... | f32 data
    u32 CRC32 of every preceding byte

All integers and floats are little-endian, data row-major. Metadata travels
as a rank-1 tensor named "__meta__" whose entries are the bytes of a JSON
document. Adam moments are stored as "adam/m/<name>" and "adam/v/<name>".
"""

import json
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from model.config import ConditioningMode, ModelConfig
from model.network import ParameterSet
from numerics.errors import KwsError
from numerics.optim import AdamState

logger = logging.getLogger(__name__)

MAGIC = b"KWSC"
VERSION = 1
META_NAME = "__meta__"
FIRST_MOMENT_PREFIX = "adam/m/"
SECOND_MOMENT_PREFIX = "adam/v/"
SUFFIX = ".kwsc"


class CheckpointFormatError(KwsError):
    def __init__(self, source: str, offset: int, reason: str):
        super().__init__(f"{source}: {reason} at byte offset {offset}")
        self.source = source
        self.offset = offset


@dataclass(frozen=True)
class Checkpoint:
    params: ParameterSet
    adam: AdamState | None = None
    meta: dict = field(default_factory=dict)

    @property
    def step(self) -> int:
        return int(self.meta.get("step", 0))

    @property
    def regime(self) -> str | None:
        return self.meta.get("regime")

    @property
    def locale(self) -> str | None:
        return self.meta.get("locale")

    @property
    def locale_names(self) -> list[str]:
        return list(self.meta.get("locale_names", []))


def _pack_tensor(name: str, values: np.ndarray) -> bytes:
    encoded = name.encode("utf-8")
    header = struct.pack("<H", len(encoded)) + encoded
    header += struct.pack("<B", values.ndim)
    header += struct.pack(f"<{values.ndim}I", *values.shape)
    return header + np.ascontiguousarray(values, dtype="<f4").tobytes()


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    params = checkpoint.params
    meta = dict(checkpoint.meta)
    meta["model_config"] = params.config.model_dump(mode="json")
    meta["mode"] = params.mode.value
    meta["num_locales"] = params.num_locales
    if checkpoint.adam is not None:
        meta["adam"] = {
            "step": checkpoint.adam.step,
            "lr": checkpoint.adam.lr,
            "beta1": checkpoint.adam.beta1,
            "beta2": checkpoint.adam.beta2,
            "epsilon": checkpoint.adam.epsilon,
        }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")

    tensors: list[tuple[str, np.ndarray]] = [
        (META_NAME, np.frombuffer(meta_bytes, dtype=np.uint8).astype(np.float32))
    ]
    tensors += list(params.tensors.items())
    if checkpoint.adam is not None:
        tensors += [
            (FIRST_MOMENT_PREFIX + name, checkpoint.adam.first_moment[name])
            for name in params.tensors
        ]
        tensors += [
            (SECOND_MOMENT_PREFIX + name, checkpoint.adam.second_moment[name])
            for name in params.tensors
        ]

    body = MAGIC + struct.pack("<II", VERSION, len(tensors))
    body += b"".join(_pack_tensor(name, np.asarray(values)) for name, values in tensors)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data = data
        self.source = source
        self.offset = 0

    def take(self, fmt: str) -> tuple:
        size = struct.calcsize(fmt)
        if self.offset + size > len(self.data):
            raise CheckpointFormatError(self.source, self.offset, "truncated file")
        values = struct.unpack_from(fmt, self.data, self.offset)
        self.offset += size
        return values

    def take_bytes(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise CheckpointFormatError(self.source, self.offset, "truncated file")
        chunk = self.data[self.offset : self.offset + size]
        self.offset += size
        return chunk


def decode_checkpoint(data: bytes, source: str = "<memory>") -> Checkpoint:
    if len(data) < len(MAGIC) + 12:
        raise CheckpointFormatError(source, len(data), "truncated file")
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(source, 0, f"bad magic {data[:4]!r}")
    stored_crc = struct.unpack_from("<I", data, len(data) - 4)[0]
    if zlib.crc32(data[:-4]) != stored_crc:
        raise CheckpointFormatError(source, len(data) - 4, "CRC32 mismatch")

    reader = _Reader(data[:-4], source)
    reader.offset = len(MAGIC)
    version, count = reader.take("<II")
    if version != VERSION:
        raise CheckpointFormatError(source, 4, f"unsupported version {version}")

    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_length,) = reader.take("<H")
        name = reader.take_bytes(name_length).decode("utf-8")
        (rank,) = reader.take("<B")
        dims = reader.take(f"<{rank}I")
        size = int(np.prod(dims)) if rank else 1
        raw = reader.take_bytes(4 * size)
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float64)
    if reader.offset != len(reader.data):
        raise CheckpointFormatError(source, reader.offset, "trailing bytes before CRC")
    if META_NAME not in tensors:
        raise CheckpointFormatError(source, 12, f"missing {META_NAME} tensor")

    meta = json.loads(tensors.pop(META_NAME).astype(np.uint8).tobytes().decode("utf-8"))
    first = {
        name[len(FIRST_MOMENT_PREFIX) :]: value
        for name, value in tensors.items()
        if name.startswith(FIRST_MOMENT_PREFIX)
    }
    second = {
        name[len(SECOND_MOMENT_PREFIX) :]: value
        for name, value in tensors.items()
        if name.startswith(SECOND_MOMENT_PREFIX)
    }
    weights = {
        name: value
        for name, value in tensors.items()
        if not name.startswith((FIRST_MOMENT_PREFIX, SECOND_MOMENT_PREFIX))
    }
    params = ParameterSet(
        tensors=weights,
        config=ModelConfig.model_validate(meta.pop("model_config")),
        mode=ConditioningMode(meta.pop("mode")),
        num_locales=int(meta.pop("num_locales")),
    )
    adam = None
    adam_meta = meta.pop("adam", None)
    if adam_meta is not None:
        adam = AdamState(
            first_moment=first,
            second_moment=second,
            step=int(adam_meta["step"]),
            lr=float(adam_meta["lr"]),
            beta1=float(adam_meta["beta1"]),
            beta2=float(adam_meta["beta2"]),
            epsilon=float(adam_meta["epsilon"]),
        )
    return Checkpoint(params=params, adam=adam, meta=meta)


def save_checkpoint(checkpoint: Checkpoint, path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(checkpoint))
    logger.info("wrote checkpoint %s (step %d)", path, checkpoint.step)
    return path


def load_checkpoint(path: Path | str) -> Checkpoint:
    path = Path(path)
    return decode_checkpoint(path.read_bytes(), source=str(path))

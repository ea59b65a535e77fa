"""Named parameter collections and the RLTN checkpoint format."""
from __future__ import annotations

import struct
import zlib

import numpy as np

from .tensor import ContractError, DimensionError, Tensor

CHECKPOINT_MAGIC = b"RLTN"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


class ParamSet:
    """Ordered name -> Tensor map.

    A frozen ParamSet never allocates gradient buffers and is never touched
    by optimizer calls; freezing is one-way.
    """

    def __init__(self, frozen: bool = False):
        self._items: dict[str, Tensor] = {}
        self.frozen = frozen

    def new(self, name: str, data) -> Tensor:
        if name in self._items:
            raise ContractError(f"duplicate parameter name: {name}")
        t = Tensor(data, requires_grad=not self.frozen)
        self._items[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __len__(self) -> int:
        return len(self._items)

    def names(self) -> list[str]:
        return list(self._items.keys())

    def items(self):
        return self._items.items()

    def freeze(self):
        self.frozen = True
        for t in self._items.values():
            t.requires_grad = False
            t.grad = None

    def zero_grad(self):
        for t in self._items.values():
            t.grad = None

    def grads_disabled(self):
        """Context: treat these params as constants (skips their gradient
        GEMMs) without freezing; used when another net's loss flows through."""
        params = self

        class _Ctx:
            def __enter__(self):
                self._prev = [(t, t.requires_grad) for t in params._items.values()]
                for t in params._items.values():
                    t.requires_grad = False
                return self

            def __exit__(self, *exc):
                for t, rg in self._prev:
                    t.requires_grad = rg
                return False

        return _Ctx()

    def n_scalars(self) -> int:
        return sum(t.size for t in self._items.values())

    def checksum(self) -> int:
        """CRC32 over names and raw little-endian float bytes, name-sorted."""
        crc = 0
        for name in sorted(self._items):
            t = self._items[name]
            crc = zlib.crc32(name.encode("utf-8"), crc)
            crc = zlib.crc32(np.ascontiguousarray(t.data, dtype="<f4").tobytes(), crc)
        return crc

    def copy_values_from(self, other: "ParamSet"):
        if sorted(self._items) != sorted(other._items):
            raise ContractError("parameter name sets differ")
        for name, t in self._items.items():
            src = other._items[name]
            if src.data.shape != t.data.shape:
                raise ContractError(f"shape mismatch for {name}")
            t.data = src.data.copy()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._items.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        for name, t in self._items.items():
            if name not in state:
                raise CheckpointError(f"missing parameter in checkpoint: {name}")
            arr = np.asarray(state[name], dtype=np.float32)
            if arr.shape != t.data.shape:
                raise CheckpointError(
                    f"shape mismatch for {name}: {arr.shape} vs {t.data.shape}"
                )
            t.data = arr.copy()

    def save(self, path):
        save_arrays(path, {k: v.data for k, v in self._items.items()})

    def load(self, path):
        self.load_state_dict(load_arrays(path))


def save_arrays(path, arrays: dict[str, np.ndarray]):
    """Write named float32 arrays: magic, version u32, then per-array records
    (name length u16, name bytes, rank u8, extents u32 x rank, f32 LE data).
    Records are name-sorted so identical contents give identical bytes."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            for ext in arr.shape:
                f.write(struct.pack("<I", ext))
            f.write(arr.tobytes())


def load_arrays(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: version {version} unsupported (expected {CHECKPOINT_VERSION})"
        )
    out: dict[str, np.ndarray] = {}
    off = 8
    try:
        while off < len(blob):
            (nlen,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off : off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", blob, off)
            off += 1
            extents = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            count = int(np.prod(extents)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off)
            off += 4 * count
            out[name] = arr.reshape(extents).astype(np.float32)
    except (struct.error, ValueError) as e:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint") from e
    if off != len(blob):
        raise CheckpointError(f"{path}: trailing bytes in checkpoint")
    return out


def check_shapes_match(a: ParamSet, b: ParamSet):
    if sorted(a.names()) != sorted(b.names()):
        raise ContractError("parameter name sets differ")
    for name, t in a.items():
        if b[name].data.shape != t.data.shape:
            raise DimensionError(f"shape mismatch for {name}")

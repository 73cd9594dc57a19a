"""Named-tensor weight store with binary serialization (SSTW format).

All learnable parameters in the package (encoders, attention, recurrent
fusion, prediction heads) live in one flat ``name -> float32 array`` map so
a whole model round-trips through a single file, bit-exactly.

File layout, little-endian: magic ``SSTW``, u32 version, u32 tensor count,
then per tensor: u32 name length, utf-8 name, u32 rank, i32 dims, f32 data.
"""

from __future__ import annotations

import struct

import numpy as np

WEIGHTS_MAGIC = b"SSTW"
WEIGHTS_VERSION = 1


class WeightStore:
    """Flat map of named float32 tensors."""

    def __init__(self, tensors: dict | None = None):
        self.tensors: dict = dict(tensors) if tensors else {}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        self.tensors[name] = np.ascontiguousarray(value, dtype=np.float32)

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self) -> list:
        return sorted(self.tensors.keys())

    def update(self, other: "WeightStore") -> None:
        self.tensors.update(other.tensors)


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """Seeded uniform(-k, k) with k = 1/sqrt(fan_in)."""
    k = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-k, k, size=shape).astype(np.float32)


def save_weights(path, store: WeightStore) -> None:
    names = store.names()
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        f.write(struct.pack("<II", WEIGHTS_VERSION, len(names)))
        for name in names:
            arr = store.tensors[name]
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}i", *arr.shape))
            f.write(arr.astype("<f4").tobytes())


def load_weights(path) -> WeightStore:
    store = WeightStore()
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != WEIGHTS_MAGIC:
            raise ValueError(f"bad magic {magic!r}, expected {WEIGHTS_MAGIC!r}")
        version, count = struct.unpack("<II", f.read(8))
        if version != WEIGHTS_VERSION:
            raise ValueError(f"unsupported weight file version {version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<I", f.read(4))
            name = f.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", f.read(4))
            dims = struct.unpack(f"<{rank}i", f.read(4 * rank))
            n = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(f.read(4 * n), dtype="<f4").reshape(dims)
            store.tensors[name] = data.copy()
    return store

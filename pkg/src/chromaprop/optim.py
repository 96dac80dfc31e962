"""Named parameter collections, the Adam optimizer, and checkpoint files.

Checkpoint layout (little-endian throughout):

    magic   b"CPRV"
    version u32 (currently 1)
    count   u32
    entry*  name_len u32 | name utf-8 | rank u32 | extents u32*rank | f32 data

Values are stored as float32 regardless of the in-memory dtype; loading casts
to the requested dtype and validates shape congruence entry by entry.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError, NumericError
from .tensor import Tensor

CHECKPOINT_MAGIC = b"CPRV"
CHECKPOINT_VERSION = 1


class ParameterSet:
    """Ordered, uniquely named collection of trainable tensors."""

    def __init__(self, version: str = "1"):
        self.version = version
        self._entries: dict[str, Tensor] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._entries:
            raise ContractError(f"duplicate parameter name {name!r}")
        tensor.requires_grad = True
        self._entries[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def tensors(self) -> list[Tensor]:
        return list(self._entries.values())

    def zero_grads(self) -> None:
        for t in self._entries.values():
            t.zero_grad()

    def all_finite(self) -> bool:
        return all(np.isfinite(t.data).all() for t in self._entries.values())

    def astype(self, dtype) -> "ParameterSet":
        clone = ParameterSet(self.version)
        for name, t in self._entries.items():
            clone.add(name, Tensor(t.data.astype(dtype)))
        return clone

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self._entries.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        """Copy values in, validating that names and shapes line up."""
        missing = [n for n in self._entries if n not in arrays]
        if missing:
            raise FormatError(f"checkpoint is missing parameters: {missing}")
        for name, tensor in self._entries.items():
            arr = arrays[name]
            if tuple(arr.shape) != tuple(tensor.data.shape):
                raise FormatError(
                    f"shape mismatch for {name!r}: checkpoint {arr.shape}, expected {tensor.data.shape}")
            tensor.data = arr.astype(tensor.data.dtype)


@dataclass
class OptimizerState:
    """Adam moments plus hyperparameters; buffers are keyed by parameter name."""

    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ParameterSet, state: OptimizerState) -> None:
    """One bias-corrected Adam update; gradients are left for the caller to reset."""
    for name, t in params.items():
        if t.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient")
    state.step_count += 1
    t_step = state.step_count
    lr = state.learning_rate
    b1, b2, eps = state.beta1, state.beta2, state.epsilon
    for name, p in params.items():
        g = p.grad
        m = state.first_moment.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.second_moment[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.first_moment[name] = m
        state.second_moment[name] = v
        m_hat = m / (1.0 - b1 ** t_step)
        v_hat = v / (1.0 - b2 ** t_step)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
    if not params.all_finite():
        raise NumericError("non-finite parameter after optimizer step")


# ---------------------------------------------------------------------------
# checkpoint files
# ---------------------------------------------------------------------------

def save_checkpoint(path: str | Path, params: ParameterSet) -> None:
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION),
              struct.pack("<I", len(params))]
    for name, tensor in params.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(tensor.data, dtype=np.float32)
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (count,) = struct.unpack_from("<I", blob, 8)
    offset = 12
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        shape = struct.unpack_from(f"<{rank}I", blob, offset)
        offset += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(blob, dtype="<f4", count=size, offset=offset).reshape(shape)
        offset += 4 * size
        arrays[name] = data.copy()
    if offset != len(blob):
        raise FormatError(f"{path}: {len(blob) - offset} trailing bytes")
    return arrays


def checkpoint_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()

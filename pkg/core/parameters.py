"""
Named trainable tensors grouped by the modality that owns them, plus the checkpoint file format.

Checkpoint layout (all integers little-endian):
    8 bytes   magic b"DGMCKPT1"
    8 bytes   uint64 header length H
    H bytes   UTF-8 JSON header: {"entries": [{name, group, shape, offset, count}], "meta": {...}}
    payload   float64 values of every entry, back to back; `offset` is relative to the payload start
"""

import json
import struct
import zlib
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Iterator, List, Optional, Sequence, Union

import numpy as np
from tenacity import retry, retry_if_exception_type, stop_after_attempt, wait_exponential

from core.autodiff import DTYPE, Tensor
from utils.errors import ParseError, UsageError, ValidationError
from utils.logger import logger

MAGIC = b"DGMCKPT1"
STATE_GROUP = "state"


class Ownership(str, Enum):
    AUDIO = "audio"
    VISUAL = "visual"
    SHARED = "shared"


@dataclass(frozen=True)
class Parameter:
    name: str
    group: Ownership
    tensor: Tensor

    @property
    def grad(self) -> Optional[np.ndarray]:
        return self.tensor.grad


class ParameterStore:
    """Ordered, uniquely named parameters; the ownership tag is fixed at creation"""

    def __init__(self):
        self._entries: Dict[str, Parameter] = {}

    def add(self, name: str, values: Union[np.ndarray, Sequence], group: Union[Ownership, str]) -> Tensor:
        if name in self._entries:
            raise UsageError(f"parameter {name!r} already exists")
        tensor = Tensor(values, requires_grad=True, name=name)
        tensor.zero_grad()
        self._entries[name] = Parameter(name, Ownership(group), tensor)
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._entries[name].tensor
        except KeyError:
            raise UsageError(f"unknown parameter {name!r}")

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._entries.values())

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> List[str]:
        return list(self._entries)

    def group_of(self, name: str) -> Ownership:
        return self._entries[name].group

    def in_group(self, group: Union[Ownership, str]) -> List[Parameter]:
        group = Ownership(group)
        return [p for p in self._entries.values() if p.group is group]

    def count(self, group: Union[Ownership, str, None] = None) -> int:
        """Number of scalar values, optionally restricted to one group"""
        entries = self._entries.values() if group is None else self.in_group(group)
        return int(np.sum([p.tensor.size for p in entries])) if entries else 0

    def zero_grads(self):
        for p in self._entries.values():
            p.tensor.zero_grad()

    def ensure_grads(self):
        """Give every parameter without a gradient buffer a zero one"""
        for p in self._entries.values():
            if p.tensor.grad is None:
                p.tensor.zero_grad()

    def state(self) -> Dict[str, np.ndarray]:
        return {name: p.tensor.data.copy() for name, p in self._entries.items()}

    def load_state(self, state: Dict[str, np.ndarray]):
        for name, values in state.items():
            tensor = self[name]
            if tensor.shape != tuple(values.shape):
                raise ValidationError(f"shape of {name!r} is {tuple(values.shape)}, expected {tensor.shape}")
            tensor.data[...] = values

    def copy(self) -> "ParameterStore":
        """An independent replica, e.g. for concurrent read-only evaluation"""
        replica = ParameterStore()
        for p in self._entries.values():
            replica.add(p.name, p.tensor.data, p.group)
        return replica


def seeded_uniform(seed: int, name: str, shape: Sequence[int], bound: float) -> np.ndarray:
    """Uniform(-bound, bound) values drawn from a stream keyed by (seed, name)"""
    rng = np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])
    return rng.uniform(-bound, bound, size=tuple(shape))


@dataclass
class Checkpoint:
    params: ParameterStore
    meta: Dict[str, Any] = field(default_factory=dict)
    state: Dict[str, np.ndarray] = field(default_factory=dict)


def save_checkpoint(path: str, params: ParameterStore, meta: Optional[Dict[str, Any]] = None,
                    state: Optional[Dict[str, np.ndarray]] = None):
    """Write parameters (and optional optimizer state arrays) to a single file"""
    entries = []
    blobs = []
    offset = 0
    rows = [(p.name, p.group.value, p.tensor.data) for p in params]
    rows += [(name, STATE_GROUP, values) for name, values in (state or {}).items()]
    for name, group, values in rows:
        blob = np.ascontiguousarray(values, dtype="<f8").tobytes()
        entries.append({
            "name": name,
            "group": group,
            "shape": list(values.shape),
            "offset": offset,
            "count": int(values.size),
        })
        blobs.append(blob)
        offset += len(blob)

    header = json.dumps({"entries": entries, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    logger.debug(f"Checkpoint written to {path} ({len(entries)} entries, {offset} payload bytes)")


@retry(retry=retry_if_exception_type((TimeoutError, BlockingIOError, InterruptedError)),
       stop=stop_after_attempt(3), wait=wait_exponential(multiplier=0.1, max=2), reraise=True)
def _read_bytes(path: str) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def load_checkpoint(path: str) -> Checkpoint:
    raw = _read_bytes(path)
    prefix = len(MAGIC) + 8
    if len(raw) < prefix:
        raise ParseError("checkpoint shorter than its fixed prefix", len(raw))
    if raw[:len(MAGIC)] != MAGIC:
        raise ParseError("not a checkpoint file", 0)
    (header_len,) = struct.unpack("<Q", raw[len(MAGIC):prefix])
    if prefix + header_len > len(raw):
        raise ParseError("header runs past end of file", len(raw))
    try:
        header = json.loads(raw[prefix:prefix + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        position = getattr(e, "pos", None) or getattr(e, "start", 0)
        raise ParseError(f"malformed checkpoint header: {e}", prefix + position)

    payload = raw[prefix + header_len:]
    expected = int(np.sum([e["count"] for e in header["entries"]])) * 8 if header["entries"] else 0
    if len(payload) != expected:
        raise ValidationError(f"checkpoint payload has {len(payload)} bytes, header declares {expected}")

    params = ParameterStore()
    state: Dict[str, np.ndarray] = {}
    for entry in header["entries"]:
        start = entry["offset"]
        count = entry["count"]
        shape = tuple(entry["shape"])
        if int(np.prod(shape)) != count:
            raise ValidationError(f"entry {entry['name']!r}: shape {shape} does not hold {count} values")
        values = np.frombuffer(payload, dtype="<f8", count=count, offset=start).astype(DTYPE).reshape(shape)
        if entry["group"] == STATE_GROUP:
            state[entry["name"]] = values.copy()
        else:
            params.add(entry["name"], values, entry["group"])
    return Checkpoint(params=params, meta=header.get("meta", {}), state=state)

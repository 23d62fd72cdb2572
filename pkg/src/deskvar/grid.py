"""Grid geometry, state containers, latitude/variable weights, climatology.

The model state is a dense V x H x W array: V variable levels, H latitude
rows on an equiangular grid (cell centers), W periodic longitude columns.
All in-memory arithmetic is float64; the on-disk state format stores
float32 (see write_state/read_state).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagicError,
    EmptySlotError,
    NonFiniteValueError,
    ShapeMismatchError,
)

STATE_MAGIC = b"XCST"
STATE_VERSION = 1


@dataclass(frozen=True)
class GridSpec:
    """Grid dimensions. Latitudes are cell centers: lat(i) = -90 + (i+0.5)*180/H."""

    V: int
    H: int
    W: int

    def __post_init__(self):
        if self.V < 1 or self.H < 2 or self.W < 4:
            raise ShapeMismatchError(
                f"grid must satisfy V>=1, H>=2, W>=4, got V={self.V} H={self.H} W={self.W}"
            )

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.V, self.H, self.W)

    @property
    def size(self) -> int:
        return self.V * self.H * self.W

    def lat(self, i: int) -> float:
        return -90.0 + (i + 0.5) * 180.0 / self.H

    @property
    def lats(self) -> np.ndarray:
        return -90.0 + (np.arange(self.H) + 0.5) * 180.0 / self.H


@dataclass
class StateField:
    """One snapshot of the full state at an integer model-hour.

    data layout is row-major with v slowest, then i, then j.
    """

    spec: GridSpec
    time: int
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.shape != self.spec.shape:
            raise ShapeMismatchError(
                f"state data shape {self.data.shape} != grid shape {self.spec.shape}"
            )
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteValueError("state contains non-finite values")

    def copy(self) -> "StateField":
        return StateField(self.spec, self.time, self.data.copy())

    def with_data(self, data: np.ndarray, time: int | None = None) -> "StateField":
        return StateField(self.spec, self.time if time is None else time, data)


@dataclass(frozen=True)
class LatWeights:
    """Per-row latitude weights, normalized so their mean over rows is 1."""

    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", v)
        if np.any(v <= 0):
            raise ValueError("latitude weights must be positive")


@dataclass(frozen=True)
class VariableWeights:
    """Per-level weights in the training and scoring sums; default uniform."""

    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", v)
        if np.any(v <= 0):
            raise ValueError("variable weights must be positive")

    @classmethod
    def uniform(cls, V: int) -> "VariableWeights":
        return cls(np.ones(V))


def lat_weights(spec: GridSpec) -> LatWeights:
    """Cosine-latitude weights normalized by their mean: L(i) = cos(lat_i)/mean(cos)."""
    cos = np.cos(np.deg2rad(spec.lats))
    return LatWeights(cos / np.mean(cos))


@dataclass
class Climatology:
    """Per-slot-of-day mean fields from a training nature run.

    Slot granularity equals the cycle interval, so a 12-hour cycle gives two
    slots per model day. Only training-period states should be fed in.
    """

    slot_hours: int
    means: np.ndarray  # (n_slots, V, H, W)

    @property
    def n_slots(self) -> int:
        return self.means.shape[0]

    def slot_for_time(self, t: int) -> int:
        return (int(t) % 24) // self.slot_hours

    def field_at(self, t: int) -> np.ndarray:
        return self.means[self.slot_for_time(t)]


def build_climatology(states, slot_hours: int = 12) -> Climatology:
    """Arithmetic per-slot mean over the given states, in fixed input order."""
    if 24 % slot_hours != 0:
        raise ValueError(f"slot_hours must divide 24, got {slot_hours}")
    n_slots = 24 // slot_hours
    states = list(states)
    if not states:
        raise EmptySlotError("no states supplied")
    spec = states[0].spec
    sums = np.zeros((n_slots,) + spec.shape)
    counts = np.zeros(n_slots, dtype=np.int64)
    for s in states:
        k = (int(s.time) % 24) // slot_hours
        sums[k] += s.data
        counts[k] += 1
    empty = np.nonzero(counts == 0)[0]
    if empty.size:
        raise EmptySlotError(f"climatology slots without samples: {empty.tolist()}")
    return Climatology(slot_hours, sums / counts[:, None, None, None])


def write_state(path, state: StateField) -> None:
    """Serialize a state: magic, u32 [version,V,H,W], i64 time, f32 payload (v,i,j order)."""
    spec = state.spec
    header = STATE_MAGIC + struct.pack(
        "<IIIIq", STATE_VERSION, spec.V, spec.H, spec.W, int(state.time)
    )
    payload = np.ascontiguousarray(state.data, dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)


def read_state(path) -> StateField:
    """Inverse of write_state. Values come back as float64 after the f32 round trip."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != STATE_MAGIC:
        raise BadMagicError(f"{path}: expected magic {STATE_MAGIC!r}, got {raw[:4]!r}")
    if len(raw) < 4 + 16 + 8:
        raise ShapeMismatchError(f"{path}: truncated header")
    version, V, H, W, time = struct.unpack("<IIIIq", raw[4 : 4 + 24])
    if version != STATE_VERSION:
        raise BadMagicError(f"{path}: unsupported version {version}")
    body = raw[28:]
    if V < 1 or H < 2 or W < 4 or len(body) != 4 * V * H * W:
        raise ShapeMismatchError(
            f"{path}: header says {V}x{H}x{W} but payload holds {len(body)} bytes"
        )
    values = np.frombuffer(body, dtype="<f4").astype(np.float64).reshape(V, H, W)
    if not np.all(np.isfinite(values)):
        raise NonFiniteValueError(f"{path}: payload contains non-finite values")
    return StateField(GridSpec(V, H, W), time, values)

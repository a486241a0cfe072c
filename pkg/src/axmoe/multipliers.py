"""8-bit signed approximate multipliers emulated as exhaustive lookup tables.

A multiplier is a function f(a, b) on signed 8-bit operands. Nothing is
assumed about f beyond its table: commutativity and zero-annihilation hold
for the exact multiplier but not in general, so the table stores all
256 x 256 = 65536 products and callers must not fold (a, b) with (b, a).

Table layout: index (a + 128) * 256 + (b + 128), int16 products. The same
layout is used on disk (magic "AXM8", see save_lut/load_lut).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ParameterError

INT8_MIN, INT8_MAX = -128, 127
TABLE_SIZE = 256 * 256

MAGIC = b"AXM8"
VERSION = 1
NAME_BYTES = 32
# magic(4) + version(1) + name(32) + power float64(8) + 65536 int16 products
FILE_SIZE = 4 + 1 + NAME_BYTES + 8 + TABLE_SIZE * 2

EXACT_NAME = "mul8s_1KV6"
EXACT_POWER_NW = 0.425


def lut_index(a, b):
    """Table index for operand pair (a, b); accepts scalars or arrays."""
    return (np.asarray(a, dtype=np.int32) + 128) * 256 + (np.asarray(b, dtype=np.int32) + 128)


def exact_mul8s(a: int, b: int) -> int:
    """Reference signed 8-bit product. Domain-checked, never approximate."""
    if not (INT8_MIN <= a <= INT8_MAX and INT8_MIN <= b <= INT8_MAX):
        raise ParameterError(f"operands ({a}, {b}) outside signed 8-bit range")
    return int(a) * int(b)


@dataclass(frozen=True)
class ErrorStats:
    """Exhaustive error figures of a multiplier against the exact product."""

    error_probability: float  # fraction of the 65536 pairs with a wrong product
    mean_abs_error: float
    max_abs_error: int
    mean_error: float  # signed, exposes systematic bias

    def __post_init__(self):
        zero = self.error_probability == 0.0
        if zero != (self.mean_abs_error == 0.0) or zero != (self.max_abs_error == 0):
            raise ParameterError("inconsistent error stats: zero probability requires zero errors")


@dataclass(frozen=True)
class AxMultiplier:
    """A named 8-bit signed multiplier backed by its exhaustive product table."""

    name: str
    power_nw: float
    lut: np.ndarray  # (65536,) int16, index (a+128)*256+(b+128)

    def __post_init__(self):
        if not self.name:
            raise ParameterError("multiplier name must be non-empty")
        if len(self.name.encode("utf-8")) > NAME_BYTES:
            raise ParameterError(f"multiplier name exceeds {NAME_BYTES} bytes: {self.name!r}")
        if not (self.power_nw > 0):
            raise ParameterError(f"power must be positive, got {self.power_nw}")
        if self.lut.shape != (TABLE_SIZE,) or self.lut.dtype != np.int16:
            raise ParameterError("lut must be a (65536,) int16 array")
        self.lut.setflags(write=False)

    def multiply(self, a, b):
        """Look up products for int operands; broadcasts, returns int16 array."""
        return self.lut[lut_index(a, b)]

    def __call__(self, a: int, b: int) -> int:
        return int(self.lut[lut_index(a, b)])


def _operand_grids():
    ops = np.arange(INT8_MIN, INT8_MAX + 1, dtype=np.int32)
    return ops[:, None], ops[None, :]  # a varies over rows, b over columns


def _exact_table() -> np.ndarray:
    a, b = _operand_grids()
    return (a * b).astype(np.int16).ravel()


def build_exact_multiplier(name: str = EXACT_NAME, power_nw: float = EXACT_POWER_NW) -> AxMultiplier:
    """Exact signed 8-bit multiplier; the power baseline for savings figures."""
    return AxMultiplier(name=name, power_nw=power_nw, lut=_exact_table())


def _truncate_magnitude(v: np.ndarray, bits: int) -> np.ndarray:
    mag = np.abs(v)
    mag = (mag >> bits) << bits
    return np.sign(v) * mag


def truncation_power_nw(dropped_low_bits: int) -> float:
    """Stand-in power figure for the synthetic family, linear between the
    exact multiplier (k=0) and the smallest reference design (k=7)."""
    if not 0 <= dropped_low_bits <= 7:
        raise ParameterError(f"dropped_low_bits must be in [0, 7], got {dropped_low_bits}")
    return EXACT_POWER_NW - dropped_low_bits * (EXACT_POWER_NW - 0.200) / 7.0


def build_truncation_multiplier(dropped_low_bits: int, power_nw: float | None = None) -> AxMultiplier:
    """Synthetic multiplier that zeroes the lowest k bits of each operand's
    magnitude before multiplying exactly. k in [1, 7]."""
    k = int(dropped_low_bits)
    if not 1 <= k <= 7:
        raise ParameterError(f"dropped_low_bits must be in [1, 7], got {dropped_low_bits}")
    a, b = _operand_grids()
    lut = (_truncate_magnitude(a, k) * _truncate_magnitude(b, k)).astype(np.int16).ravel()
    if power_nw is None:
        power_nw = truncation_power_nw(k)
    return AxMultiplier(name=f"trunc{k}", power_nw=power_nw, lut=lut)


def error_stats(m: AxMultiplier) -> ErrorStats:
    """Compare the full table against exact products."""
    diff = m.lut.astype(np.int32) - _exact_table().astype(np.int32)
    wrong = diff != 0
    return ErrorStats(
        error_probability=float(np.count_nonzero(wrong)) / TABLE_SIZE,
        mean_abs_error=float(np.abs(diff).mean()),
        max_abs_error=int(np.abs(diff).max()),
        mean_error=float(diff.mean()),
    )


def per_op_saving(m: AxMultiplier, baseline: AxMultiplier) -> float:
    """Per-operation power saving in percent relative to the baseline design."""
    if not (baseline.power_nw > 0):
        raise ParameterError("baseline power must be positive")
    return (1.0 - m.power_nw / baseline.power_nw) * 100.0


def save_lut(m: AxMultiplier, path) -> None:
    name = m.name.encode("utf-8").ljust(NAME_BYTES, b"\x00")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<B", VERSION))
        fh.write(name)
        fh.write(struct.pack("<d", m.power_nw))
        fh.write(m.lut.astype("<i2").tobytes())


def load_lut(path) -> AxMultiplier:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic, expected {MAGIC!r}")
    if len(blob) != FILE_SIZE:
        raise FormatError(f"{path}: expected {FILE_SIZE} bytes, got {len(blob)}")
    version = blob[4]
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    name = blob[5 : 5 + NAME_BYTES].rstrip(b"\x00").decode("utf-8")
    (power_nw,) = struct.unpack("<d", blob[5 + NAME_BYTES : 13 + NAME_BYTES])
    lut = np.frombuffer(blob[13 + NAME_BYTES :], dtype="<i2").astype(np.int16)
    try:
        return AxMultiplier(name=name, power_nw=power_nw, lut=lut)
    except ParameterError as exc:
        raise FormatError(f"{path}: {exc}") from exc


@dataclass(frozen=True)
class ReferenceEntry:
    """Published datasheet figures for one design of the mul8s family."""

    name: str
    power_nw: float
    saving_pct: float
    error_probability_pct: float


# Datasheet power and error figures for the EvoApproxLib 8-bit signed family.
# Savings are relative to mul8s_1KV6 and are re-derived (not read) at runtime.
REFERENCE_MULTIPLIERS = (
    ReferenceEntry("mul8s_1KV6", 0.425, 0.0, 0.0),
    ReferenceEntry("mul8s_1KV8", 0.422, 0.7, 50.0),
    ReferenceEntry("mul8s_1KV9", 0.410, 3.5, 68.75),
    ReferenceEntry("mul8s_1KVA", 0.391, 8.0, 81.25),
    ReferenceEntry("mul8s_1KVM", 0.369, 13.2, 49.80),
    ReferenceEntry("mul8s_1KVP", 0.363, 14.6, 74.8),
    ReferenceEntry("mul8s_1L2J", 0.301, 29.2, 74.61),
    ReferenceEntry("mul8s_1L2L", 0.200, 52.9, 93.16),
)

REFERENCE_POWER_NW = {e.name: e.power_nw for e in REFERENCE_MULTIPLIERS}


def builtin_multiplier(name: str) -> AxMultiplier:
    """Construct a multiplier available without external table files.

    Supported: the exact design by name, and "trunc1".."trunc7".
    """
    if name == EXACT_NAME or name == "exact":
        return build_exact_multiplier()
    if name.startswith("trunc"):
        suffix = name[len("trunc") :]
        if suffix.isdigit():
            return build_truncation_multiplier(int(suffix))
    raise ParameterError(f"no builtin multiplier named {name!r}")

"""Signed 8x8 multiplier models and their error profiles.

A model is a total function int8 x int8 -> product. Three kinds exist:

* ``exact``      a * b
* ``truncated``  both operands have the ``k`` least significant bits of their
                 magnitude zeroed (sign kept) before an exact multiply
* ``lut``        a 65,536-entry table indexed by ``(a + 128) * 256 + (b + 128)``

In the MAC units the first operand is the weight and the second the
activation.
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import ConfigError, LoadError

TABLE_SIZE = 256 * 256
PRODUCT_BOUND = 16384

_OPERANDS = np.arange(-128, 128, dtype=np.int32)


def lut_index(a, b):
    return (np.asarray(a, dtype=np.int32) + 128) * 256 + (np.asarray(b, dtype=np.int32) + 128)


def zero_lsbs(x, k: int):
    """Zero the ``k`` low magnitude bits of int8 value(s), keeping the sign.

    Truncation is toward zero, so the error is sign-symmetric and grows
    with ``k`` up to ``k = 8``, where every operand becomes 0.
    """
    x = np.asarray(x, dtype=np.int32)
    return np.sign(x) * (np.abs(x) & ~((1 << k) - 1))


@dataclass(frozen=True, eq=False)
class MultiplierModel:
    name: str
    kind: str = "exact"
    k: int = 0
    table: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("exact", "truncated", "lut"):
            raise ConfigError(f"unknown multiplier kind {self.kind!r}")
        if self.kind == "truncated" and not 0 <= self.k <= 8:
            raise ConfigError(f"truncation width must be in [0, 8], got {self.k}")
        if self.kind == "lut":
            if self.table is None:
                raise ConfigError(f"LUT multiplier {self.name!r} has no table")
            table = np.array(self.table, dtype=np.int16, copy=True).reshape(-1)
            if table.size != TABLE_SIZE:
                raise ConfigError(f"LUT must have {TABLE_SIZE} entries, got {table.size}")
            if np.abs(table.astype(np.int32)).max() > PRODUCT_BOUND:
                raise ConfigError("LUT products must lie in [-16384, 16384]")
            table.flags.writeable = False
            object.__setattr__(self, "table", table)

    @property
    def is_exact(self) -> bool:
        return self.kind == "exact" or (self.kind == "truncated" and self.k == 0)

    def mul(self, a: int, b: int) -> int:
        return mul(self, a, b)

    def products(self, a, b) -> np.ndarray:
        """Vectorized ``mul`` over broadcastable int8 arrays (int32 result)."""
        a = np.asarray(a, dtype=np.int32)
        b = np.asarray(b, dtype=np.int32)
        if self.kind == "exact":
            return a * b
        if self.kind == "truncated":
            return zero_lsbs(a, self.k) * zero_lsbs(b, self.k)
        return self.table[lut_index(a, b)].astype(np.int32)

    def full_table(self) -> np.ndarray:
        """All 65,536 products as int16 in LUT index order."""
        if self.kind == "lut":
            return self.table
        a, b = np.meshgrid(_OPERANDS, _OPERANDS, indexing="ij")
        return self.products(a, b).astype(np.int16).reshape(-1)

    def describe(self) -> str:
        if self.kind == "truncated":
            return f"truncated:{self.k}"
        if self.kind == "lut":
            return f"lut:{table_checksum(self.table)}"
        return "exact"

    def __eq__(self, other):
        if not isinstance(other, MultiplierModel):
            return NotImplemented
        return (self.name, self.kind, self.k) == (other.name, other.kind, other.k) and (
            np.array_equal(self.full_table(), other.full_table())
        )

    def __hash__(self):
        return hash((self.name, self.kind, self.k))


EXACT = MultiplierModel("exact")


def exact() -> MultiplierModel:
    return EXACT


def truncated(k: int) -> MultiplierModel:
    return MultiplierModel(f"trunc{k}", "truncated", k)


def lut(name: str, table) -> MultiplierModel:
    return MultiplierModel(name, "lut", table=table)


def exact_table() -> np.ndarray:
    return EXACT.full_table()


def mul(model: MultiplierModel, a: int, b: int) -> int:
    if not (-128 <= a <= 127 and -128 <= b <= 127):
        raise ValueError(f"operands must be int8, got ({a}, {b})")
    if model.kind == "exact":
        return a * b
    if model.kind == "truncated":
        return int(zero_lsbs(a, model.k)) * int(zero_lsbs(b, model.k))
    if model.table is None:
        raise ConfigError(f"LUT multiplier {model.name!r} has no table")
    return int(model.table[(a + 128) * 256 + (b + 128)])


def table_checksum(table: np.ndarray) -> str:
    return hashlib.sha256(np.asarray(table, dtype="<i2").tobytes()).hexdigest()


# --- LUT files -------------------------------------------------------------


def _read_csv_table(path: Path) -> np.ndarray:
    table = np.zeros(TABLE_SIZE, dtype=np.int32)
    seen = np.zeros(TABLE_SIZE, dtype=bool)
    rows = 0
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().lower() == "a":
                continue
            try:
                a, b, p = (int(v) for v in row[:3])
            except ValueError as exc:
                raise LoadError(f"bad CSV row {row!r}", str(path)) from exc
            if not (-128 <= a <= 127 and -128 <= b <= 127):
                raise LoadError(f"operand out of int8 range in row {row!r}", str(path))
            idx = (a + 128) * 256 + (b + 128)
            if seen[idx]:
                raise LoadError(f"duplicate operand pair ({a}, {b})", str(path))
            seen[idx] = True
            table[idx] = p
            rows += 1
    if rows != TABLE_SIZE:
        raise LoadError(f"expected {TABLE_SIZE} rows, found {rows}", str(path))
    return table


def load_lut(path, name: str | None = None) -> MultiplierModel:
    """Load a LUT multiplier from a binary (``.bin``) or CSV (``.csv``) file.

    Binary files hold 65,536 little-endian int16 products. CSV files hold one
    ``a,b,product`` row per operand pair, an optional header is skipped. When
    a ``<file>.sha256`` sidecar exists it must match the table checksum.
    """
    path = Path(path)
    name = name or path.stem
    if not path.is_file():
        raise LoadError("file not found", str(path))
    if path.suffix.lower() == ".csv":
        table = _read_csv_table(path)
    else:
        raw = path.read_bytes()
        if len(raw) != 2 * TABLE_SIZE:
            raise LoadError(
                f"expected {2 * TABLE_SIZE} bytes ({TABLE_SIZE} int16 entries), got {len(raw)}",
                str(path),
            )
        table = np.frombuffer(raw, dtype="<i2").astype(np.int32)
    if np.abs(table).max() > PRODUCT_BOUND:
        raise LoadError("product outside [-16384, 16384]", str(path))
    sidecar = path.with_name(path.name + ".sha256")
    if sidecar.is_file():
        expected = sidecar.read_text().split()[0]
        if expected != table_checksum(table):
            raise LoadError("checksum mismatch against sidecar", str(path))
    return lut(name, table)


def save_lut(model: MultiplierModel, path, fmt: str = "bin") -> None:
    path = Path(path)
    table = model.full_table()
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["a", "b", "product"])
        for i, p in enumerate(table.tolist()):
            writer.writerow([i // 256 - 128, i % 256 - 128, p])
        path.write_text(buf.getvalue())
    else:
        path.write_bytes(np.asarray(table, dtype="<i2").tobytes())
    path.with_name(path.name + ".sha256").write_text(table_checksum(table) + "\n")


def resolve(spec: str) -> MultiplierModel:
    """Turn a CLI multiplier spec into a model.

    Accepts ``exact``, ``truncN`` / ``truncated:N``, or a LUT file path.
    """
    s = spec.strip()
    low = s.lower()
    if low == "exact":
        return EXACT
    for prefix in ("truncated:", "trunc:", "trunc"):
        if low.startswith(prefix) and low[len(prefix):].isdigit():
            return truncated(int(low[len(prefix):]))
    if Path(s).exists():
        return load_lut(s)
    raise ConfigError(f"unknown multiplier {spec!r}: expected exact, truncN or a LUT path")


# --- error profiling -------------------------------------------------------


@dataclass(frozen=True)
class ErrorProfile:
    mae: float
    error_rate: float
    var_ed: float
    rms_ed: float
    worst_ed: int
    mean_ed: float

    def to_dict(self):
        return {
            "mae": self.mae,
            "error_rate": self.error_rate,
            "var_ed": self.var_ed,
            "rms_ed": self.rms_ed,
            "worst_ed": self.worst_ed,
            "mean_ed": self.mean_ed,
        }


def profile(model: MultiplierModel) -> ErrorProfile:
    """Error-distance statistics over all 65,536 operand pairs.

    ED(a, b) = a*b - approx(a, b). Sums are exact integers, so the result is
    independent of summation order.
    """
    ed = (exact_table().astype(np.int64) - model.full_table().astype(np.int64))
    n = TABLE_SIZE
    s1 = int(ed.sum())
    s2 = int((ed * ed).sum())
    mean = Fraction(s1, n)
    mean_sq = Fraction(s2, n)
    return ErrorProfile(
        mae=float(Fraction(int(np.abs(ed).sum()), n)),
        error_rate=float(Fraction(int(np.count_nonzero(ed)), n)),
        var_ed=float(mean_sq - mean * mean),
        rms_ed=math.sqrt(mean_sq),
        worst_ed=int(np.abs(ed).max()),
        mean_ed=float(mean),
    )


def rank_candidates(models, weight_var: float = 1.0, weight_rms: float = 1.0):
    """Order models by ``weight_var * var_ed + weight_rms * rms_ed`` ascending.

    Returns a list of ``(model, profile, score)``; ties break on name.
    """
    if weight_var < 0 or weight_rms < 0:
        raise ConfigError("ranking weights must be non-negative")
    if weight_var == 0 and weight_rms == 0:
        raise ConfigError("ranking weights must not both be zero")
    scored = []
    for m in models:
        p = profile(m)
        scored.append((m, p, weight_var * p.var_ed + weight_rms * p.rms_ed))
    scored.sort(key=lambda item: (item[2], item[0].name))
    return scored

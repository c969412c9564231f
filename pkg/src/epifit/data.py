"""Count lattices stratified by time, group and region."""
from __future__ import annotations

import datetime as dt
import hashlib
import re
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .contact_matrix import ContactMatrix

_ISO_WEEK = re.compile(r"^(\d{4})-W(\d{2})$")


class DataError(ValueError):
    """Invalid input data; ``code`` is a short machine-readable tag."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def parse_iso_week(label: str) -> tuple[int, int]:
    m = _ISO_WEEK.match(str(label).strip())
    if not m:
        raise DataError("bad_week", f"not an ISO week label (YYYY-Www): {label!r}")
    year, week = int(m.group(1)), int(m.group(2))
    try:
        dt.date.fromisocalendar(year, week, 1)
    except ValueError:
        raise DataError("bad_week", f"week {week} does not exist in ISO year {year}") from None
    return year, week


def next_iso_weeks(label: str, n: int) -> list[str]:
    year, week = parse_iso_week(label)
    monday = dt.date.fromisocalendar(year, week, 1)
    out = []
    for k in range(1, n + 1):
        y, w, _ = (monday + dt.timedelta(weeks=k)).isocalendar()
        out.append(f"{y}-W{w:02d}")
    return out


def week_numbers(weeks: Sequence[str]) -> np.ndarray:
    """Calendar week numbers; non-ISO labels are read as a 0-based index
    and wrapped onto weeks 1..52."""
    out = []
    for i, lab in enumerate(weeks):
        try:
            out.append(parse_iso_week(lab)[1])
        except DataError:
            out.append(i % 52 + 1)
    return np.array(out, dtype=int)


@dataclass(frozen=True, eq=False)
class StratifiedCounts:
    """Counts ``Y[t, g, r]`` with population ``n[g, r]`` (optionally ``n[t, g, r]``).

    ``offset`` defaults to population fractions ``n / sum(n)``; region
    adjacency ``orders`` and the base ``contacts`` matrix travel with the
    data because every model fitted to it shares them.
    """

    counts: np.ndarray
    weeks: tuple[str, ...]
    groups: tuple[str, ...]
    regions: tuple[str, ...]
    population: np.ndarray
    offset: np.ndarray | None = None
    orders: np.ndarray | None = None
    contacts: ContactMatrix | None = None

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 3:
            raise DataError("bad_shape", "counts must be a (time, group, region) array")
        if np.any(counts < 0):
            t, g, r = np.argwhere(counts < 0)[0]
            raise DataError("negative_count", f"negative count at week {self.weeks[t]}, "
                            f"group {self.groups[g]}, region {self.regions[r]}")
        if not np.all(np.equal(np.mod(counts, 1), 0)):
            raise DataError("bad_count", "counts must be integers")
        counts = counts.astype(np.int64)
        T, G, R = counts.shape
        object.__setattr__(self, "counts", counts)
        for name, labels, n in (("weeks", self.weeks, T), ("groups", self.groups, G),
                                ("regions", self.regions, R)):
            labels = tuple(str(x) for x in labels)
            if len(labels) != n:
                raise DataError("label_mismatch", f"{len(labels)} {name} labels for axis of length {n}")
            if len(set(labels)) != n:
                raise DataError("label_mismatch", f"duplicate {name} labels")
            object.__setattr__(self, name, labels)
        if T < 2:
            raise DataError("bad_shape", "need at least two time points")
        pop = np.asarray(self.population, dtype=float)
        if pop.shape not in ((G, R), (T, G, R)):
            raise DataError("bad_shape", f"population shape {pop.shape} does not match counts")
        if np.any(pop <= 0):
            raise DataError("bad_population", "population sizes must be positive")
        object.__setattr__(self, "population", pop)
        if self.offset is None:
            total = pop.sum(axis=(-2, -1), keepdims=True)
            object.__setattr__(self, "offset", pop / total)
        else:
            off = np.asarray(self.offset, dtype=float)
            if off.shape not in ((G, R), (T, G, R)) or np.any(off <= 0):
                raise DataError("bad_offset", "offset must be positive and match the lattice")
            object.__setattr__(self, "offset", off)
        if self.orders is not None:
            o = np.asarray(self.orders, dtype=int)
            if o.shape != (R, R):
                raise DataError("bad_shape", "adjacency order matrix must be regions x regions")
            object.__setattr__(self, "orders", o)
        if self.contacts is not None and self.contacts.labels != self.groups:
            object.__setattr__(self, "contacts", self.contacts.reorder(self.groups))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.counts.shape

    @property
    def time_varying_offset(self) -> bool:
        return self.offset.ndim == 3

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(repr((self.counts.shape, self.weeks, self.groups, self.regions)).encode())
        h.update(np.ascontiguousarray(self.counts, dtype="<i8").tobytes())
        return h.hexdigest()

    def summary(self) -> str:
        T, G, R = self.shape
        pop = self.population if self.population.ndim == 2 else self.population[0]
        return (f"T={T} weeks ({self.weeks[0]} .. {self.weeks[-1]}), G={G} groups, "
                f"R={R} regions, total cases={int(self.counts.sum())}, "
                f"population={pop.sum():.0f}")

    def with_counts(self, counts: np.ndarray, weeks: Sequence[str] | None = None) -> "StratifiedCounts":
        return replace(self, counts=counts, weeks=tuple(weeks) if weeks is not None else self.weeks)


def scale_counts(data: StratifiedCounts, factors: Sequence[float]) -> StratifiedCounts:
    """Multiply counts by per-group factors, rounding half up; zeros stay zero."""
    f = np.asarray(factors, dtype=float)
    if f.shape != (len(data.groups),):
        raise DataError("bad_scale_factors", f"expected {len(data.groups)} scale factors, got {f.size}")
    if not np.all(f > 0):
        raise DataError("bad_scale_factors", "scale factors must be positive")
    scaled = np.floor(data.counts * f[None, :, None] + 0.5).astype(np.int64)
    return replace(data, counts=scaled)

"""Age-structured contact matrices: reciprocal estimation, aggregation,
row normalization and the eigendecomposition-based power transform."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

IMAG_TOL = 1e-9
COND_MAX = 1e12


@dataclass(frozen=True, eq=False)
class ContactMatrix:
    """Mean daily contacts ``values[participant, contact]`` between groups."""

    values: np.ndarray
    labels: tuple[str, ...]
    population: np.ndarray | None = None
    row_normalized: bool = False

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2 or values.shape[0] != values.shape[1]:
            raise ValueError(f"contact matrix must be square, got shape {values.shape}")
        if len(self.labels) != values.shape[0]:
            raise ValueError("number of group labels does not match the matrix size")
        if np.any(values < 0) or not np.all(np.isfinite(values)):
            raise ValueError("contact rates must be finite and nonnegative")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "labels", tuple(str(x) for x in self.labels))
        if self.population is not None:
            pop = np.asarray(self.population, dtype=float)
            if pop.shape != (values.shape[0],):
                raise ValueError("population vector does not match the matrix size")
            object.__setattr__(self, "population", pop)

    @property
    def size(self) -> int:
        return len(self.labels)

    def reorder(self, labels: Sequence[str]) -> "ContactMatrix":
        labels = tuple(labels)
        if set(labels) != set(self.labels) or len(labels) != len(self.labels):
            raise ValueError(
                f"contact matrix groups {list(self.labels)} do not match {list(labels)}"
            )
        idx = [self.labels.index(lab) for lab in labels]
        pop = None if self.population is None else self.population[idx]
        return replace(self, values=self.values[np.ix_(idx, idx)], labels=labels,
                       population=pop)


@dataclass(frozen=True, eq=False)
class SurveyRecords:
    """Diary rows ``(participant_group, contact_group, count)`` plus the
    number of participants in each group (from the participant roster)."""

    participant_group: tuple[str, ...]
    contact_group: tuple[str, ...]
    count: np.ndarray
    participants: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self):
        count = np.asarray(self.count, dtype=float)
        if not (len(self.participant_group) == len(self.contact_group) == len(count)):
            raise ValueError("survey record columns have different lengths")
        if np.any(count < 0):
            raise ValueError("contact counts must be nonnegative")
        object.__setattr__(self, "count", count)

    def sample_means(self, labels: Sequence[str]) -> np.ndarray:
        """Mean number of contacts per participant and day, ``m[g', g]``."""
        labels = list(labels)
        index = {lab: i for i, lab in enumerate(labels)}
        unknown = (set(self.participant_group) | set(self.contact_group)
                   | set(self.participants)) - set(labels)
        if unknown:
            raise ValueError(f"survey uses undeclared groups: {sorted(unknown)}")
        totals = np.zeros((len(labels), len(labels)))
        for p, c, n in zip(self.participant_group, self.contact_group, self.count):
            totals[index[p], index[c]] += n
        for lab in labels:
            if self.participants.get(lab, 0) <= 0:
                raise ValueError(f"no survey participants in group {lab!r}")
        n_part = np.array([self.participants[lab] for lab in labels], dtype=float)
        return totals / n_part[:, None]


def estimate_contact_matrix(records: SurveyRecords, population: Mapping[str, float] | Sequence[float],
                            labels: Sequence[str] | None = None) -> ContactMatrix:
    """Reciprocity-corrected contact matrix.

    Sample means ``m`` are symmetrized at the population level,
    ``c[a, b] = (m[a, b] n[a] + m[b, a] n[b]) / (2 n[a])``, so that
    ``c[a, b] n[a] == c[b, a] n[b]``.
    """
    if isinstance(population, Mapping):
        if labels is None:
            labels = list(population)
        if set(population) != set(labels):
            raise ValueError(
                f"population groups {sorted(population)} do not match {sorted(labels)}"
            )
        pop = np.array([population[lab] for lab in labels], dtype=float)
    else:
        if labels is None:
            raise ValueError("labels are required when population is given as a sequence")
        pop = np.asarray(population, dtype=float)
        if pop.shape != (len(labels),):
            raise ValueError("population vector does not match the group labels")
    if np.any(pop <= 0):
        raise ValueError("population sizes must be positive")
    m = records.sample_means(labels)
    flow = m * pop[:, None]
    c = (flow + flow.T) / (2.0 * pop[:, None])
    return ContactMatrix(c, tuple(labels), pop)


def aggregate_contact_matrix(fine: ContactMatrix, grouping: Mapping[str, str],
                             fine_population: Sequence[float] | None = None) -> ContactMatrix:
    """Collapse fine groups into coarse ones.

    Columns being joined are summed; rows are averaged with population
    weights. Coarse groups are ordered by first appearance in ``fine.labels``.
    """
    pop = fine.population if fine_population is None else np.asarray(fine_population, float)
    if pop is None or pop.shape != (fine.size,):
        raise ValueError("fine population vector is required and must match the matrix")
    missing = [lab for lab in fine.labels if lab not in grouping]
    if missing:
        raise ValueError(f"grouping does not cover fine groups {missing}")
    coarse = list(dict.fromkeys(grouping[lab] for lab in fine.labels))
    member = np.zeros((len(coarse), fine.size))
    for j, lab in enumerate(fine.labels):
        member[coarse.index(grouping[lab]), j] = 1.0
    coarse_pop = member @ pop
    for a, lab in enumerate(coarse):
        if coarse_pop[a] <= 0:
            raise ValueError(f"coarse group {lab!r} has zero total population")
    # rows: population-weighted average; columns: sums
    weighted = (member * pop[None, :]) @ fine.values @ member.T
    values = weighted / coarse_pop[:, None]
    return ContactMatrix(values, tuple(coarse), coarse_pop)


def row_normalize(C: ContactMatrix) -> ContactMatrix:
    sums = C.values.sum(axis=1)
    zero = np.flatnonzero(sums <= 0)
    if zero.size:
        raise ValueError(f"contact matrix row for group {C.labels[zero[0]]!r} sums to zero")
    return replace(C, values=C.values / sums[:, None], row_normalized=True)


def matrix_power(C: ContactMatrix | np.ndarray, kappa: float, truncate: bool = True):
    """Fractional power ``E diag(lambda**kappa) E^-1`` of a row-normalized matrix.

    Computed in complex arithmetic; the imaginary residue must stay below
    ``IMAG_TOL``. Negative entries are set to zero (rows are not
    renormalized) unless ``truncate=False``, in which case a plain array is
    returned; otherwise the result has the same type as ``C``.
    """
    values = C.values if isinstance(C, ContactMatrix) else np.asarray(C, dtype=float)
    if kappa < 0 or not np.isfinite(kappa):
        raise ValueError(f"kappa must be a finite nonnegative number, got {kappa}")
    if values.ndim != 2 or values.shape[0] != values.shape[1]:
        raise ValueError("matrix_power needs a square matrix")
    if not np.allclose(values.sum(axis=1), 1.0, rtol=0, atol=1e-9):
        raise ValueError("matrix_power expects a row-normalized contact matrix")

    fired = False
    if kappa == 0:
        out = np.eye(values.shape[0])
    else:
        eigval, eigvec = np.linalg.eig(values)
        cond = np.linalg.cond(eigvec)
        if not np.isfinite(cond) or cond > COND_MAX:
            raise ValueError(
                f"contact matrix is (nearly) defective: eigenvector condition number {cond:.3g}"
            )
        powered = np.power(eigval.astype(complex), kappa)
        full = (eigvec * powered[None, :]) @ np.linalg.inv(eigvec)
        imag = np.max(np.abs(full.imag))
        if imag > IMAG_TOL:
            raise ValueError(
                f"C^kappa has a non-negligible imaginary part ({imag:.3g}) for kappa={kappa}"
            )
        out = full.real
        if truncate:
            neg = out < 0
            if neg.any():
                fired = True
                cells = list(zip(*np.nonzero(neg)))
                logger.info("C^%g: truncated %d negative entries at %s (min %.3g)",
                            kappa, len(cells), cells, out.min())
                out = np.where(neg, 0.0, out)
    if isinstance(C, ContactMatrix) and truncate:
        return replace(C, values=out, row_normalized=not fired)
    return out

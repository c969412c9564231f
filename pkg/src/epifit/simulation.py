"""Forward simulation of a fitted endemic-epidemic process and mean diagnostics."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping

import numpy as np
import pandas as pd

from .data import StratifiedCounts, next_iso_weeks, parse_iso_week, week_numbers, DataError
from .inference import FitResult
from .model import Model, ModelSpec, propagate

logger = logging.getLogger(__name__)

DEFAULT_MAX_COUNT = 1e9


@dataclass
class SimulationConfig:
    """What to simulate.

    ``data`` supplies offsets, adjacency orders, contacts and the calendar;
    ``initial`` defaults to its last observed slice and the simulated weeks
    continue from its last week.
    """

    spec: ModelSpec
    params: np.ndarray | Mapping[str, float]
    data: StratifiedCounts
    horizon: int
    n_replicates: int = 1
    seed: int | None = None
    initial: np.ndarray | None = None
    kappa: float | None = None
    max_count: float = DEFAULT_MAX_COUNT
    allow_explosive: bool = False

    @classmethod
    def from_fit(cls, fit: FitResult, data: StratifiedCounts, horizon: int, **kw) -> "SimulationConfig":
        return cls(spec=fit.spec, params=fit.theta, data=data, horizon=horizon,
                   kappa=fit.kappa, **kw)


def _future_weeks(last: str, n: int) -> list[str]:
    try:
        parse_iso_week(last)
    except DataError:
        start = int(last) if str(last).lstrip("-").isdigit() else 0
        return [str(start + k) for k in range(1, n + 1)]
    return next_iso_weeks(last, n)


def simulate(config: SimulationConfig) -> list[StratifiedCounts]:
    """Draw ``n_replicates`` trajectories of length ``horizon + 1``
    (the initial slice followed by ``horizon`` simulated weeks)."""
    if config.horizon < 1:
        raise ValueError("horizon must be at least 1")
    if config.n_replicates < 1:
        raise ValueError("need at least one replicate")
    data = config.data
    model = Model(config.spec, data, config.kappa)
    theta = model._coerce(config.params)
    T, G, R = data.shape

    if config.spec.epidemic is not None or config.spec.autoregressive is not None:
        radius = float(np.max(np.abs(np.linalg.eigvals(model.coefficient_matrix(theta)))))
        if radius >= 1:
            if not config.allow_explosive:
                raise ValueError(f"epidemic coefficient matrix has spectral radius {radius:.3g} >= 1; "
                                 "pass allow_explosive=True to simulate anyway")
            logger.warning("simulating an explosive process (spectral radius %.3g)", radius)

    init = data.counts[-1] if config.initial is None else np.asarray(config.initial)
    if init.shape != (G, R):
        raise ValueError(f"initial slice must have shape {(G, R)}, got {init.shape}")
    labels = [data.weeks[-1]] + _future_weeks(data.weeks[-1], config.horizon)
    cal = week_numbers(labels)
    log_off = np.log(data.offset[-1] if data.time_varying_offset else data.offset)
    psi = model.psi(theta)

    n_rep = config.n_replicates
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(n_rep)]
    out = np.zeros((n_rep, config.horizon + 1, G, R), dtype=np.int64)
    out[:, 0] = init
    for t in range(1, config.horizon + 1):
        # replicates share the model evaluation; draws use per-replicate streams
        mu = model.components(theta, ylag=out[:, t - 1].astype(float),
                              weeks=np.full(n_rep, cal[t]), log_offset=log_off).mean
        if np.any(mu > config.max_count):
            i, g, r = np.argwhere(mu > config.max_count)[0]
            raise OverflowError(f"mean exceeds {config.max_count:g} in replicate {i}, week "
                                f"{labels[t]}, group {data.groups[g]}, region {data.regions[r]}")
        for i, rng in enumerate(rngs):
            m = mu[i]
            if psi is not None:
                k = 1.0 / psi
                m = rng.gamma(shape=k, scale=m / k)
            draw = rng.poisson(m)
            if np.any(draw > config.max_count):
                g, r = np.argwhere(draw > config.max_count)[0]
                raise OverflowError(f"count exceeds {config.max_count:g} in replicate {i}, week "
                                    f"{labels[t]}, group {data.groups[g]}, region {data.regions[r]}")
            out[i, t] = draw

    pop = data.population[-1] if data.population.ndim == 3 else data.population
    off = data.offset[-1] if data.time_varying_offset else data.offset
    return [StratifiedCounts(out[i], tuple(labels), data.groups, data.regions, pop, off,
                             data.orders, data.contacts) for i in range(n_rep)]


def spectral_radius(matrix: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(matrix)))) if matrix.size else 0.0


def epidemic_proportion(fit: FitResult | ModelSpec, data: StratifiedCounts,
                        params=None, kappa: float | None = None) -> float:
    """Spectral radius of the epidemic coefficient matrix."""
    if isinstance(fit, FitResult):
        spec, params, kappa = fit.spec, fit.theta, fit.kappa
    else:
        spec = fit
        if params is None:
            raise ValueError("params are required when passing a ModelSpec")
    model = Model(spec, data, kappa)
    if spec.epidemic is None and spec.autoregressive is None:
        return 0.0
    return spectral_radius(model.coefficient_matrix(params))


@dataclass
class MeanDecomposition:
    weeks: tuple[str, ...]
    cells: tuple[str, ...]
    endemic: np.ndarray
    within: np.ndarray
    between: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.endemic + self.within + self.between

    def to_frame(self) -> pd.DataFrame:
        frames = []
        for comp, values in (("endemic", self.endemic), ("epidemic_within", self.within),
                             ("epidemic_between", self.between)):
            t_idx, c_idx = np.meshgrid(np.arange(len(self.weeks)), np.arange(len(self.cells)),
                                       indexing="ij")
            frames.append(pd.DataFrame({
                "t": np.asarray(self.weeks)[t_idx.ravel()],
                "cell": np.asarray(self.cells)[c_idx.ravel()],
                "component": comp,
                "value": values.ravel(),
            }))
        return pd.concat(frames, ignore_index=True)


def _decompose(model: Model, theta: np.ndarray):
    comps = model.components(theta)
    within = comps.autoregressive.copy()
    between = np.zeros_like(within)
    if comps.phi is not None:
        b = model.layout.blocks
        sw = model.spatial(theta[b["w"]])[0] if model.spatial is not None else np.ones((1, 1, 1))
        own = np.diag(np.diag(model.cw))
        within = within + comps.phi * propagate(model.ylag, own, sw)
        between = comps.phi * propagate(model.ylag, model.cw - own, sw)
    return comps.endemic, within, between


def mean_decomposition(fit: FitResult, data: StratifiedCounts, aggregate: str = "group") -> MeanDecomposition:
    """Split fitted means into endemic, own-group epidemic and other-group
    epidemic parts, summed over regions (``group``), groups (``region``),
    everything (``total``) or kept per cell (``cell``)."""
    model = Model(fit.spec, data, fit.kappa)
    parts = _decompose(model, fit.theta)
    if aggregate == "group":
        cells = data.groups
        parts = [p.sum(axis=2) for p in parts]
    elif aggregate == "region":
        cells = data.regions
        parts = [p.sum(axis=1) for p in parts]
    elif aggregate == "total":
        cells = ("total",)
        parts = [p.sum(axis=(1, 2))[:, None] for p in parts]
    elif aggregate == "cell":
        cells = tuple(f"{g}|{r}" for g in data.groups for r in data.regions)
        parts = [p.reshape(p.shape[0], -1) for p in parts]
    else:
        raise ValueError("aggregate must be one of group, region, total, cell")
    return MeanDecomposition(data.weeks[1:], tuple(cells), *parts)

"""Model specification, parameter layout and evaluation of the conditional mean.

The mean of cell ``(g, r)`` in week ``t`` is

    mu = e[g, r] * exp(endemic predictor)
         + lambda[g, r] * Y[t-1, g, r]                          (three-component only)
         + phi[g, r] * sum_{g', r'} cw[g', g] * sw[g', r', r] * Y[t-1, g', r']

where ``cw`` and ``sw`` are the row-normalized contact and spatial weights.
Because both factors are row-normalized separately, their product is the
contact x spatial weight normalized jointly over all ``(g, r)``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from .contact_matrix import matrix_power, row_normalize
from .data import StratifiedCounts, week_numbers
from .spatial import WEIGHT_VARIANTS

SEASONALITY = ("none", "shared", "group")
CONTACT_STRUCTURES = ("matrix", "identity", "ones")
OVERDISPERSION = ("shared", "group", "region", "poisson")


@dataclass(frozen=True)
class EndemicSpec:
    group_effects: bool = True
    region_effects: bool = True
    christmas: bool = False
    seasonality: str = "none"
    period: float = 52.0
    offset: bool = True

    def __post_init__(self):
        if self.seasonality not in SEASONALITY:
            raise ValueError(f"seasonality must be one of {SEASONALITY}")


@dataclass(frozen=True)
class EpidemicSpec:
    """Log-linear predictor of an epidemic coefficient (phi or lambda).

    An intercept is always included; ``population_exponent`` adds
    ``tau * log(e[g, r])``.
    """

    group_effects: bool = False
    region_effects: bool = False
    population_exponent: bool = False


@dataclass(frozen=True)
class WeightConfig:
    variant: str = "power_law_with_self"
    group_specific: bool = False

    def __post_init__(self):
        if self.variant not in WEIGHT_VARIANTS:
            raise ValueError(f"weight variant must be one of {WEIGHT_VARIANTS}")
        if self.group_specific and self.variant == "free_order_weights":
            raise ValueError("group-specific weights are only available for power laws")


@dataclass(frozen=True)
class ContactSpec:
    structure: str = "matrix"
    kappa: float | None = None
    profile: bool = False

    def __post_init__(self):
        if self.structure not in CONTACT_STRUCTURES:
            raise ValueError(f"contact structure must be one of {CONTACT_STRUCTURES}")
        if (self.profile or self.kappa is not None) and self.structure != "matrix":
            raise ValueError("a power kappa only applies to the 'matrix' contact structure")
        if self.kappa is not None and self.kappa < 0:
            raise ValueError("kappa must be nonnegative")


@dataclass(frozen=True)
class ModelSpec:
    name: str = "model"
    endemic: EndemicSpec | None = field(default_factory=EndemicSpec)
    epidemic: EpidemicSpec | None = None
    autoregressive: EpidemicSpec | None = None
    weights: WeightConfig = field(default_factory=WeightConfig)
    contact: ContactSpec = field(default_factory=ContactSpec)
    overdispersion: str = "shared"

    def __post_init__(self):
        if self.overdispersion not in OVERDISPERSION:
            raise ValueError(f"overdispersion must be one of {OVERDISPERSION}")

    @property
    def variant(self) -> str:
        if self.autoregressive is not None:
            return "three_component"
        return "merged" if self.epidemic is not None else "endemic_only"

    @property
    def profiles_kappa(self) -> bool:
        return self.epidemic is not None and self.contact.profile

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ModelSpec":
        d = dict(d)
        unknown = set(d) - {"name", "endemic", "epidemic", "autoregressive", "weights",
                            "contact", "overdispersion"}
        if unknown:
            raise ValueError(f"unknown model keys: {sorted(unknown)}")

        def sub(kind, value):
            if value is None or value is False:
                return None
            return kind(**(value if isinstance(value, Mapping) else {}))

        return cls(
            name=str(d.get("name", "model")),
            endemic=sub(EndemicSpec, d.get("endemic", {})),
            epidemic=sub(EpidemicSpec, d.get("epidemic")),
            autoregressive=sub(EpidemicSpec, d.get("autoregressive")),
            weights=WeightConfig(**d.get("weights", {}) or {}),
            contact=ContactSpec(**d.get("contact", {}) or {}),
            overdispersion=str(d.get("overdispersion", "shared")),
        )

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------------------
# parameter layout


@dataclass(frozen=True)
class ParameterLayout:
    """Names and scales of the free parameters.

    ``log_scale[i]`` marks parameters stored as the log of a positive
    quantity (rho, psi, free weights); all others are regression
    coefficients on the linear-predictor scale.
    """

    names: tuple[str, ...]
    log_scale: tuple[bool, ...]
    blocks: Mapping[str, slice]

    def __len__(self):
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown parameter {name!r}; known: {list(self.names)}") from None

    def pack(self, values: Mapping[str, float]) -> np.ndarray:
        missing = set(self.names) - set(values)
        extra = set(values) - set(self.names)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing {sorted(missing)}, unknown {sorted(extra)}")
        return np.array([float(values[n]) for n in self.names])

    def unpack(self, theta: np.ndarray) -> dict[str, float]:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (len(self.names),):
            raise ValueError(f"expected {len(self.names)} parameters, got shape {theta.shape}")
        return {n: float(v) for n, v in zip(self.names, theta)}

    def natural(self, theta: np.ndarray) -> dict[str, float]:
        return {n: float(np.exp(v) if lg else v)
                for n, v, lg in zip(self.names, theta, self.log_scale)}


def _max_order(orders: np.ndarray | None) -> int:
    return 0 if orders is None else int(np.max(orders))


def build_layout(spec: ModelSpec, groups: Sequence[str], regions: Sequence[str],
                 max_order: int | None = None) -> ParameterLayout:
    names: list[str] = []
    logs: list[bool] = []
    blocks: dict[str, slice] = {}

    def add(block, items):
        start = len(names)
        for n, lg in items:
            names.append(n)
            logs.append(lg)
        blocks[block] = slice(start, len(names))

    groups, regions = list(groups), list(regions)
    end = spec.endemic
    items = []
    if end is not None:
        items.append(("end.intercept", False))
        if end.group_effects:
            items += [(f"end.group.{g}", False) for g in groups[1:]]
        if end.region_effects:
            items += [(f"end.region.{r}", False) for r in regions[1:]]
        if end.christmas:
            items.append(("end.christmas", False))
        if end.seasonality == "shared":
            items += [("end.sin", False), ("end.cos", False)]
        elif end.seasonality == "group":
            for g in groups:
                items += [(f"end.sin.{g}", False), (f"end.cos.{g}", False)]
    add("end", items)

    for block, comp in (("ar", spec.autoregressive), ("ne", spec.epidemic)):
        items = []
        if comp is not None:
            items.append((f"{block}.intercept", False))
            if comp.group_effects:
                items += [(f"{block}.group.{g}", False) for g in groups[1:]]
            if comp.region_effects:
                items += [(f"{block}.region.{r}", False) for r in regions[1:]]
            if comp.population_exponent:
                items.append((f"{block}.tau", False))
        add(block, items)

    items = []
    if spec.epidemic is not None and len(regions) > 1:
        w = spec.weights
        if w.variant == "free_order_weights":
            if max_order is None:
                raise ValueError("free order weights need the maximum adjacency order")
            items += [(f"ne.weight.{k}", True) for k in range(1, max_order + 1)]
        elif w.group_specific:
            items += [(f"ne.rho.{g}", True) for g in groups]
        else:
            items.append(("ne.rho", True))
    add("w", items)

    od = spec.overdispersion
    if od == "shared":
        items = [("psi", True)]
    elif od == "group":
        items = [(f"psi.{g}", True) for g in groups]
    elif od == "region":
        items = [(f"psi.{r}", True) for r in regions]
    else:
        items = []
    add("psi", items)
    return ParameterLayout(tuple(names), tuple(logs), blocks)


def parameter_count(spec: ModelSpec, n_groups: int, n_regions: int,
                    max_order: int | None = None) -> int:
    """Free parameters after identifiability constraints; a profiled kappa counts once."""
    layout = build_layout(spec, [str(i) for i in range(n_groups)],
                          [str(i) for i in range(n_regions)], max_order)
    return len(layout) + int(spec.profiles_kappa)


# ---------------------------------------------------------------------------
# design arrays


def christmas_indicator(weeks: np.ndarray) -> np.ndarray:
    w = np.minimum(weeks, 52)
    return ((w == 52) | (w == 1)).astype(float)


def endemic_design(end: EndemicSpec, weeks: np.ndarray, G: int, R: int) -> np.ndarray:
    """Design array ``(n_t, G, R, p)`` for calendar week numbers ``weeks``."""
    n = len(weeks)
    cols = [np.ones((n, G, R))]
    if end.group_effects:
        for g in range(1, G):
            c = np.zeros((n, G, R))
            c[:, g, :] = 1.0
            cols.append(c)
    if end.region_effects:
        for r in range(1, R):
            c = np.zeros((n, G, R))
            c[:, :, r] = 1.0
            cols.append(c)
    if end.christmas:
        cols.append(np.broadcast_to(christmas_indicator(weeks)[:, None, None], (n, G, R)))
    if end.seasonality != "none":
        # week 53 shares the angle of week 52
        angle = 2 * np.pi * np.minimum(weeks, 52) / end.period
        s = np.broadcast_to(np.sin(angle)[:, None, None], (n, G, R))
        c = np.broadcast_to(np.cos(angle)[:, None, None], (n, G, R))
        if end.seasonality == "shared":
            cols += [s, c]
        else:
            for g in range(G):
                mask = np.zeros((1, G, 1))
                mask[0, g, 0] = 1.0
                cols += [s * mask, c * mask]
    return np.stack(cols, axis=-1)


def epidemic_design(comp: EpidemicSpec, log_offset: np.ndarray) -> np.ndarray:
    """Design array ``(n_t or 1, G, R, p)``; time-varying only through the offset."""
    lo = log_offset if log_offset.ndim == 3 else log_offset[None]
    n, G, R = lo.shape
    cols = [np.ones((n, G, R))]
    if comp.group_effects:
        for g in range(1, G):
            c = np.zeros((n, G, R))
            c[:, g, :] = 1.0
            cols.append(c)
    if comp.region_effects:
        for r in range(1, R):
            c = np.zeros((n, G, R))
            c[:, :, r] = 1.0
            cols.append(c)
    if comp.population_exponent:
        cols.append(lo)
    return np.stack(cols, axis=-1)


def contact_weights(spec: ModelSpec, data: StratifiedCounts, kappa: float | None = None) -> np.ndarray:
    """Row-normalized ``G x G`` contact weights for the model's contact structure."""
    G = len(data.groups)
    structure = spec.contact.structure
    if structure == "identity":
        return np.eye(G)
    if structure == "ones":
        return np.full((G, G), 1.0 / G)
    if kappa is None:
        kappa = spec.contact.kappa
    if spec.contact.profile and kappa is None:
        raise ValueError(f"model {spec.name!r} profiles kappa; pass a kappa value")
    if data.contacts is None:
        if G == 1:
            return np.ones((1, 1))
        raise ValueError("the 'matrix' contact structure needs a contact matrix in the data")
    C = row_normalize(data.contacts)
    if kappa is not None:
        C = matrix_power(C, float(kappa))
    return row_normalize(C).values


class SpatialWeights:
    """Row-normalized spatial weights ``sw[a, r', r]`` and their derivatives.

    ``a`` indexes the infecting group when the power law is group-specific;
    otherwise the leading axis has length 1.
    """

    def __init__(self, config: WeightConfig, orders: np.ndarray | None, n_groups: int):
        self.config = config
        if orders is None:
            raise ValueError("spatial weights need the adjacency order matrix")
        self.orders = np.asarray(orders)
        o = self.orders.astype(float)
        self.R = o.shape[0]
        self.A = n_groups if config.group_specific else 1
        if config.variant == "power_law_with_self":
            self.mask = np.ones_like(o)
            self.base = -np.log(o + 1.0)
        elif config.variant == "power_law_no_self":
            self.mask = (o > 0).astype(float)
            with np.errstate(divide="ignore"):
                self.base = np.where(o > 0, -np.log(np.where(o > 0, o, 1.0)), 0.0)
        else:
            self.mask = np.ones_like(o)
            self.base = None

    def __call__(self, theta_w: np.ndarray, derivatives: bool = False):
        R, A = self.R, self.A
        if self.R == 1:
            return np.ones((1, 1, 1)), []
        if self.base is None:
            logw = np.concatenate([[0.0], theta_w])[self.orders][None]
            D = [(self.orders == k + 1).astype(float)[None] for k in range(len(theta_w))]
        else:
            rho = np.exp(theta_w)
            if A == 1:
                logw = (rho[0] * self.base)[None]
                D = [logw.copy()]
            else:
                logw = rho[:, None, None] * self.base[None]
                D = []
                for a in range(A):
                    d = np.zeros((A, R, R))
                    d[a] = logw[a]
                    D.append(d)
        w = np.exp(logw) * self.mask
        W = w / w.sum(axis=-1, keepdims=True)
        if not derivatives:
            return W, []
        dW = [W * (d - (W * d).sum(axis=-1, keepdims=True)) for d in D]
        return W, dW


def propagate(ylag: np.ndarray, cw: np.ndarray, sw: np.ndarray) -> np.ndarray:
    """``S[t, g, r] = sum_{a, c} cw[a, g] sw[a, c, r] ylag[t, a, c]``."""
    if sw.shape[0] == 1:
        M = ylag @ sw[0]
    else:
        M = np.einsum("tac,acr->tar", ylag, sw)
    return np.einsum("tar,ag->tgr", M, cw)


def _linear(design: np.ndarray, beta: np.ndarray) -> np.ndarray:
    return design @ beta


@dataclass
class Components:
    endemic: np.ndarray
    autoregressive: np.ndarray
    epidemic: np.ndarray
    phi: np.ndarray | None = None
    lam: np.ndarray | None = None
    spread: np.ndarray | None = None

    @property
    def mean(self) -> np.ndarray:
        return self.endemic + self.autoregressive + self.epidemic


class Model:
    """A spec bound to a dataset, with design arrays precomputed."""

    def __init__(self, spec: ModelSpec, data: StratifiedCounts, kappa: float | None = None):
        self.spec = spec
        self.data = data
        T, G, R = data.shape
        self.G, self.R = G, R
        self.layout = build_layout(spec, data.groups, data.regions, _max_order(data.orders))
        self.y = data.counts[1:].astype(float)
        self.ylag = data.counts[:-1].astype(float)
        self.weeks = week_numbers(data.weeks)[1:]
        off = data.offset[1:] if data.time_varying_offset else data.offset
        self.log_offset = np.log(off)
        self.kappa = kappa if kappa is not None else spec.contact.kappa
        if spec.endemic is not None:
            self.X_end = endemic_design(spec.endemic, self.weeks, G, R)
        self.Z_ar = (epidemic_design(spec.autoregressive, self.log_offset)
                     if spec.autoregressive is not None else None)
        if spec.epidemic is not None:
            self.Z_ne = epidemic_design(spec.epidemic, self.log_offset)
            self.cw = contact_weights(spec, data, self.kappa)
            self.spatial = (SpatialWeights(spec.weights, data.orders, G) if R > 1 else None)
        od = spec.overdispersion
        gi, ri = np.meshgrid(np.arange(G), np.arange(R), indexing="ij")
        self.psi_index = {"shared": np.zeros((G, R), int), "group": gi, "region": ri,
                          "poisson": None}[od]

    # -- parameters ---------------------------------------------------------

    def default_theta(self) -> np.ndarray:
        """Deterministic start: endemic intercept at log(mean count / mean
        offset), rho = 1, tau = 1, psi = 1 and every other coefficient 0."""
        theta = np.zeros(len(self.layout))
        names = self.layout.names
        if "end.intercept" in names:
            mean_y = max(self.y.mean(), 1e-3)
            off = np.exp(self.log_offset).mean() if self.spec.endemic.offset else 1.0
            theta[names.index("end.intercept")] = np.log(mean_y / off)
        for block in ("ar", "ne"):
            if f"{block}.tau" in names:
                theta[names.index(f"{block}.tau")] = 1.0
        return theta

    def _coerce(self, params) -> np.ndarray:
        if isinstance(params, Mapping):
            return self.layout.pack(params)
        theta = np.asarray(params, dtype=float)
        if theta.shape != (len(self.layout),):
            raise ValueError(f"expected {len(self.layout)} parameters, got shape {theta.shape}")
        return theta

    # -- mean ----------------------------------------------------------------

    def components(self, params, ylag: np.ndarray | None = None,
                   weeks: np.ndarray | None = None, log_offset: np.ndarray | None = None) -> Components:
        theta = self._coerce(params)
        b = self.layout.blocks
        if ylag is None:
            ylag, X_end, log_off = self.ylag, getattr(self, "X_end", None), self.log_offset
            Z_ar, Z_ne = self.Z_ar, getattr(self, "Z_ne", None)
        else:
            if log_offset is None:
                log_offset = self.log_offset[-1] if self.log_offset.ndim == 3 else self.log_offset
            log_off = log_offset
            X_end = (endemic_design(self.spec.endemic, np.asarray(weeks), self.G, self.R)
                     if self.spec.endemic is not None else None)
            Z_ar = (epidemic_design(self.spec.autoregressive, log_off)
                    if self.spec.autoregressive is not None else None)
            Z_ne = epidemic_design(self.spec.epidemic, log_off) if self.spec.epidemic is not None else None
        shape = ylag.shape
        zero = np.zeros(shape)

        if self.spec.endemic is not None:
            eta = _linear(X_end, theta[b["end"]])
            if self.spec.endemic.offset:
                eta = eta + log_off
            with np.errstate(over="ignore"):
                endemic = np.exp(eta)
        else:
            endemic = zero
        lam = phi = spread = None
        ar = ne = zero
        if Z_ar is not None:
            lam = np.exp(_linear(Z_ar, theta[b["ar"]]))
            ar = lam * ylag
        if Z_ne is not None:
            phi = np.exp(_linear(Z_ne, theta[b["ne"]]))
            sw = self.spatial(theta[b["w"]])[0] if self.spatial is not None else np.ones((1, 1, 1))
            spread = propagate(ylag, self.cw, sw)
            ne = phi * spread
        comps = Components(endemic, ar, ne, phi, lam, spread)
        mu = comps.mean
        bad = ~np.isfinite(mu)
        if bad.any():
            t, g, r = np.argwhere(bad)[0]
            raise FloatingPointError(f"non-finite mean at (t={t + 1}, group={self.data.groups[g]}, "
                                     f"region={self.data.regions[r]})")
        return comps

    def means(self, params) -> np.ndarray:
        return self.components(params).mean

    def psi(self, params) -> np.ndarray | None:
        """Overdispersion per cell ``(G, R)``; None for Poisson."""
        if self.psi_index is None:
            return None
        theta = self._coerce(params)
        return np.exp(theta[self.layout.blocks["psi"]])[self.psi_index]

    # -- branching-process view ---------------------------------------------

    def coefficient_matrix(self, params) -> np.ndarray:
        """``A[(g, r), (g', r')]``: expected cases in (g, r) per case in (g', r')
        last week. Rows and columns are group-major (index ``g * R + r``)."""
        theta = self._coerce(params)
        G, R = self.G, self.R
        b = self.layout.blocks
        A = np.zeros((G, R, G, R))
        for name, Z in (("ar", self.Z_ar), ("ne", getattr(self, "Z_ne", None))):
            if Z is not None and Z.shape[0] != 1:
                raise ValueError("epidemic coefficients vary over time; no single coefficient matrix")
        if self.Z_ar is not None:
            lam = np.exp(_linear(self.Z_ar[0], theta[b["ar"]]))
            idx = np.arange(G)[:, None], np.arange(R)[None, :]
            A[idx[0], idx[1], idx[0], idx[1]] += lam
        if self.spec.epidemic is not None:
            phi = np.exp(_linear(self.Z_ne[0], theta[b["ne"]]))
            sw = self.spatial(theta[b["w"]])[0] if self.spatial is not None else np.ones((1, 1, 1))
            sw = np.broadcast_to(sw, (G, R, R))
            A += np.einsum("gr,ag,acr->grac", phi, self.cw, sw)
        return A.reshape(G * R, G * R)


def _model(spec, data, kappa=None) -> Model:
    return Model(spec, data, kappa)


def compute_means(spec: ModelSpec, params, data: StratifiedCounts, kappa: float | None = None) -> np.ndarray:
    """Conditional means ``mu[t, g, r]`` for weeks 2..T of ``data``."""
    return _model(spec, data, kappa).means(params)


def epidemic_coefficient_matrix(spec: ModelSpec, params, data: StratifiedCounts,
                                kappa: float | None = None) -> np.ndarray:
    return _model(spec, data, kappa).coefficient_matrix(params)


def seasonal_peak_week(spec: ModelSpec, params, groups: Sequence[str], group: str | int = 0) -> int:
    """Calendar week (1..52) where the endemic seasonal wave peaks for ``group``."""
    end = spec.endemic
    if end is None or end.seasonality == "none":
        raise ValueError("model has no seasonal terms")
    if isinstance(params, Mapping):
        values = params
    else:
        raise TypeError("pass parameters as a name -> value mapping")
    label = groups[group] if isinstance(group, int) else group
    if end.seasonality == "shared":
        gamma, delta = values["end.sin"], values["end.cos"]
    else:
        gamma, delta = values[f"end.sin.{label}"], values[f"end.cos.{label}"]
    if gamma == 0 and delta == 0:
        raise ValueError("seasonal amplitude is zero; peak undefined")
    omega = 2 * np.pi / end.period
    # gamma sin(wt) + delta cos(wt) = A cos(wt - atan2(gamma, delta))
    t = (np.arctan2(gamma, delta) / omega) % end.period
    week = int(np.floor(t + 0.5)) % int(round(end.period))
    return week if week != 0 else int(round(end.period))

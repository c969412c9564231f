"""Likelihood inference: negative binomial log-likelihood and score,
quasi-Newton fitting, Wald and profile-likelihood intervals, AIC tables."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
import pandas as pd
from scipy import optimize, stats
from scipy.special import digamma, gammaln, xlogy

from .data import StratifiedCounts
from .model import Model, ModelSpec, ParameterLayout, propagate

logger = logging.getLogger(__name__)

_SERIES_RATIO = 1e-3


# ---------------------------------------------------------------------------
# log-likelihood


def _power_sums(y):
    s1 = y * (y - 1) / 2
    s2 = (y - 1) * y * (2 * y - 1) / 6
    return s1, s2, s1 * s1


def _lgamma_ratio(y, k):
    """``log Gamma(y + k) - log Gamma(k) - y log k`` without cancellation for large k."""
    y, k = np.broadcast_arrays(np.asarray(y, float), np.asarray(k, float))
    small = y < _SERIES_RATIO * k
    out = np.empty(y.shape)
    if small.any():
        ys, ks = y[small], k[small]
        s1, s2, s3 = _power_sums(ys)
        out[small] = s1 / ks - s2 / (2 * ks**2) + s3 / (3 * ks**3)
    big = ~small
    if big.any():
        yb, kb = y[big], k[big]
        out[big] = gammaln(yb + kb) - gammaln(kb) - yb * np.log(kb)
    return out


def _digamma_ratio(y, k):
    """``digamma(y + k) - digamma(k) - y / k``, stable for large k."""
    y, k = np.broadcast_arrays(np.asarray(y, float), np.asarray(k, float))
    small = y < _SERIES_RATIO * k
    out = np.empty(y.shape)
    if small.any():
        ys, ks = y[small], k[small]
        s1, s2, s3 = _power_sums(ys)
        out[small] = -s1 / ks**2 + s2 / ks**3 - s3 / ks**4
    big = ~small
    if big.any():
        yb, kb = y[big], k[big]
        out[big] = digamma(yb + kb) - digamma(kb) - yb / kb
    return out


def nb_logpmf(y, mu, psi):
    """Negative binomial log-pmf with mean ``mu`` and variance ``mu (1 + psi mu)``."""
    y = np.asarray(y, float)
    mu = np.asarray(mu, float)
    k = 1.0 / np.asarray(psi, float)
    return (_lgamma_ratio(y, k) + xlogy(y, mu) - gammaln(y + 1)
            - (k + y) * np.log1p(mu / k))


def poisson_logpmf(y, mu):
    y = np.asarray(y, float)
    return xlogy(y, mu) - mu - gammaln(y + 1)


def _check_finite(value, model: Model, terms=None):
    if not np.isfinite(value):
        where = ""
        if terms is not None:
            bad = np.argwhere(~np.isfinite(terms))
            if bad.size:
                t, g, r = bad[0]
                where = (f" at (t={t + 1}, group={model.data.groups[g]}, "
                         f"region={model.data.regions[r]})")
        raise FloatingPointError(f"non-finite log-likelihood{where}")


def _loglik(model: Model, theta: np.ndarray) -> float:
    mu = model.means(theta)
    psi = model.psi(theta)
    terms = poisson_logpmf(model.y, mu) if psi is None else nb_logpmf(model.y, mu, psi)
    value = float(terms.sum())
    _check_finite(value, model, terms)
    return value


def _score(model: Model, theta: np.ndarray) -> np.ndarray:
    comps = model.components(theta)
    mu = comps.mean
    y = model.y
    psi = model.psi(theta)
    b = model.layout.blocks
    grad = np.zeros(len(model.layout))
    with np.errstate(divide="ignore", invalid="ignore"):
        if psi is None:
            u = np.where(mu > 0, y / mu - 1.0, 0.0)
        else:
            k = 1.0 / psi
            u = np.where(mu > 0, y / mu - (y + k) / (k + mu), 0.0)

    if model.spec.endemic is not None:
        grad[b["end"]] = np.tensordot(u * comps.endemic, model.X_end, axes=3)
    if model.Z_ar is not None:
        grad[b["ar"]] = _project(u * comps.autoregressive, model.Z_ar)
    if model.spec.epidemic is not None:
        grad[b["ne"]] = _project(u * comps.epidemic, model.Z_ne)
        if model.spatial is not None and b["w"].stop > b["w"].start:
            _, dW = model.spatial(theta[b["w"]], derivatives=True)
            up = u * comps.phi
            grad[b["w"]] = [float(np.sum(up * propagate(model.ylag, model.cw, d))) for d in dW]
    if psi is not None:
        k = 1.0 / psi
        dk = (_digamma_ratio(y, k) - np.log1p(mu / k) + (k + y) * mu / (k * (k + mu)))
        cell = (-k * dk).sum(axis=0)
        n_psi = b["psi"].stop - b["psi"].start
        grad[b["psi"]] = np.bincount(model.psi_index.ravel(), weights=cell.ravel(),
                                     minlength=n_psi)
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite score")
    return grad


def _project(v: np.ndarray, Z: np.ndarray) -> np.ndarray:
    if Z.shape[0] == 1:
        return np.tensordot(v.sum(axis=0), Z[0], axes=2)
    return np.tensordot(v, Z, axes=3)


def log_likelihood(spec: ModelSpec, params, data: StratifiedCounts, kappa: float | None = None) -> float:
    model = Model(spec, data, kappa)
    return _loglik(model, model._coerce(params))


def score(spec: ModelSpec, params, data: StratifiedCounts, kappa: float | None = None) -> np.ndarray:
    """Gradient of the log-likelihood with respect to the free parameters."""
    model = Model(spec, data, kappa)
    return _score(model, model._coerce(params))


def numerical_hessian(model: Model, theta: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Hessian of the log-likelihood by central differences of the score."""
    p = len(theta)
    H = np.empty((p, p))
    for j in range(p):
        h = step * max(1.0, abs(theta[j]))
        e = np.zeros(p)
        e[j] = h
        H[:, j] = (_score(model, theta + e) - _score(model, theta - e)) / (2 * h)
    return (H + H.T) / 2


# ---------------------------------------------------------------------------
# fitting


@dataclass
class FitOptions:
    max_iter: int = 2000
    gtol: float = 1e-6
    ftol: float = 1e-10
    newton_steps: int = 50
    hessian_step: float = 1e-5


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, trace: list[dict[str, float]]):
        super().__init__(message)
        self.trace = trace


@dataclass
class FitResult:
    spec: ModelSpec
    layout: ParameterLayout
    theta: np.ndarray
    loglik: float
    dim: int
    cov: np.ndarray | None
    converged: bool
    iterations: int
    grad_norm: float
    data_fingerprint: str
    n_obs: int
    kappa: float | None = None
    kappa_se_log: float | None = None
    message: str = ""
    extra: dict[str, Any] = field(default_factory=dict)

    @property
    def aic(self) -> float:
        return -2.0 * self.loglik + 2.0 * self.dim

    @property
    def se(self) -> np.ndarray:
        if self.cov is None:
            return np.full(len(self.theta), np.nan)
        return np.sqrt(np.clip(np.diag(self.cov), 0, None))

    @property
    def estimates(self) -> dict[str, float]:
        """Estimates on the natural scale (log-scale parameters exponentiated)."""
        return self.layout.natural(self.theta)

    def to_dict(self) -> dict[str, Any]:
        se = self.se
        params = []
        for i, name in enumerate(self.layout.names):
            row = {"name": name, "scale": "log" if self.layout.log_scale[i] else "linear",
                   "estimate": float(self.theta[i]),
                   "se": None if not np.isfinite(se[i]) else float(se[i])}
            if self.cov is not None:
                lo, hi = wald_ci(self, name)
                row.update(value=_nat(self.theta[i], self.layout.log_scale[i]),
                           ci_lower=lo, ci_upper=hi)
            else:
                row.update(value=_nat(self.theta[i], self.layout.log_scale[i]),
                           ci_lower=None, ci_upper=None)
            params.append(row)
        out = {
            "model": self.spec.name,
            "spec": self.spec.to_dict(),
            "spec_fingerprint": self.spec.fingerprint(),
            "data_fingerprint": self.data_fingerprint,
            "n_obs": self.n_obs,
            "parameters": params,
            "loglik": self.loglik,
            "dim": self.dim,
            "aic": self.aic,
            "covariance_available": self.cov is not None,
            "convergence": {"converged": self.converged, "iterations": self.iterations,
                            "gradient_max_norm": self.grad_norm, "message": self.message},
            "kappa": None,
        }
        if self.kappa is not None:
            kap = {"value": self.kappa, "profiled": self.spec.profiles_kappa}
            if self.kappa_se_log is not None:
                lo, hi = wald_ci(self, "kappa")
                kap.update(se_log=self.kappa_se_log, ci_lower=lo, ci_upper=hi)
            out["kappa"] = kap
        out.update(self.extra)
        return out


def _nat(v, log):
    return float(math.exp(v) if log else v)


def _objective(model: Model):
    def f(theta):
        try:
            return -_loglik(model, theta), -_score(model, theta)
        except FloatingPointError:
            return np.inf, np.zeros_like(theta)
    return f


def _newton_polish(model: Model, theta: np.ndarray, ll: float, opts: FitOptions, trace):
    """Damped Newton steps with the numerical Hessian until first-order
    conditions hold to ``gtol`` or the log-likelihood stalls."""
    for _ in range(opts.newton_steps):
        g = _score(model, theta)
        if np.max(np.abs(g)) < opts.gtol:
            return theta, ll, True
        H = numerical_hessian(model, theta, opts.hessian_step)
        negH = -H
        try:
            np.linalg.cholesky(negH)
            direction = np.linalg.solve(negH, g)
        except np.linalg.LinAlgError:
            shift = abs(np.min(np.linalg.eigvalsh(negH))) + 1e-6
            direction = np.linalg.solve(negH + shift * np.eye(len(g)), g)
        step, improved = 1.0, False
        for _ in range(30):
            cand = theta + step * direction
            try:
                ll_new = _loglik(model, cand)
            except FloatingPointError:
                step /= 2
                continue
            if ll_new >= ll - 1e-12 * abs(ll):
                improved = True
                break
            step /= 2
        if not improved:
            return theta, ll, False
        change = abs(ll_new - ll) / max(abs(ll), 1.0)
        theta, ll = cand, ll_new
        trace.append({"stage": "newton", "loglik": ll, "step": step})
        if change < opts.ftol and np.max(np.abs(_score(model, theta))) < max(opts.gtol, 1e-3):
            return theta, ll, True
    g = _score(model, theta)
    return theta, ll, bool(np.max(np.abs(g)) < opts.gtol)


def _fit_model(model: Model, init=None, options: FitOptions | None = None,
               covariance: bool = True) -> FitResult:
    opts = options or FitOptions()
    theta0 = model.default_theta() if init is None else model._coerce(init).copy()
    trace: list[dict[str, float]] = []
    f = _objective(model)
    if not np.isfinite(f(theta0)[0]):
        theta0 = model.default_theta()
    w = model.layout.blocks.get("w", slice(0, 0))
    if init is None and w.stop > w.start and w.stop - w.start < len(theta0):
        # settle the other coefficients with the distance decay held at its
        # start value; a free decay from a weak epidemic start can drift onto
        # the flat own-region-only plateau (rho -> infinity)
        free = np.ones(len(theta0), bool)
        free[w] = False

        def f_rest(x):
            t = theta0.copy()
            t[free] = x
            v, g = f(t)
            return v, g[free]
        stage = optimize.minimize(f_rest, theta0[free], jac=True, method="BFGS",
                                  options={"gtol": 1e-3, "maxiter": opts.max_iter, "norm": np.inf})
        if np.isfinite(stage.fun):
            theta0 = theta0.copy()
            theta0[free] = stage.x
            trace.append({"stage": "bfgs-fixed-decay", "loglik": -float(stage.fun),
                          "iterations": int(stage.nit)})
    res = optimize.minimize(f, theta0, jac=True, method="BFGS",
                            options={"gtol": opts.gtol, "maxiter": opts.max_iter, "norm": np.inf})
    theta = res.x
    ll = -float(res.fun)
    trace.append({"stage": "bfgs", "loglik": ll, "iterations": int(res.nit)})
    if not np.isfinite(ll):
        raise ConvergenceError(f"optimizer failed: {res.message}", trace)
    theta, ll, ok = _newton_polish(model, theta, ll, opts, trace)
    g = _score(model, theta)
    gnorm = float(np.max(np.abs(g))) if len(g) else 0.0
    if not ok:
        raise ConvergenceError(
            f"no convergence for model {model.spec.name!r}: gradient max-norm {gnorm:.3g}", trace)
    cov = None
    message = "converged"
    if covariance and len(theta):
        H = numerical_hessian(model, theta, opts.hessian_step)
        try:
            np.linalg.cholesky(-H)
            cov = np.linalg.inv(-H)
            cov = (cov + cov.T) / 2
        except np.linalg.LinAlgError:
            message = "converged; Hessian not negative definite, covariance unavailable"
            logger.warning("%s: %s", model.spec.name, message)
    dim = len(model.layout) + int(model.spec.profiles_kappa)
    return FitResult(spec=model.spec, layout=model.layout, theta=theta, loglik=ll, dim=dim,
                     cov=cov, converged=True, iterations=len(trace) + int(res.nit),
                     grad_norm=gnorm, data_fingerprint=model.data.fingerprint(),
                     n_obs=int(model.y.size), kappa=model.kappa, message=message)


def fit(spec: ModelSpec, data: StratifiedCounts, init=None, options: FitOptions | None = None,
        kappa: float | None = None) -> FitResult:
    """Maximum likelihood fit; ``kappa`` fixes the contact-matrix power."""
    return _fit_model(Model(spec, data, kappa), init, options)


# ---------------------------------------------------------------------------
# intervals

_ALIASES = {"tau": "ne.tau", "rho": "ne.rho"}


def wald_ci(fit: FitResult, name: str, level: float = 0.95) -> tuple[float, float]:
    """Wald interval on the estimation scale, back-transformed."""
    z = stats.norm.ppf(0.5 + level / 2)
    if name == "kappa":
        if fit.kappa is None or fit.kappa_se_log is None:
            raise KeyError("no profiled kappa with a standard error in this fit")
        c = math.log(fit.kappa)
        return math.exp(c - z * fit.kappa_se_log), math.exp(c + z * fit.kappa_se_log)
    name = _ALIASES.get(name, name) if name not in fit.layout.names else name
    i = fit.layout.index(name)
    if fit.cov is None:
        raise ValueError("covariance unavailable for this fit")
    est, se = fit.theta[i], fit.se[i]
    lo, hi = est - z * se, est + z * se
    if fit.layout.log_scale[i]:
        return math.exp(lo), math.exp(hi)
    return float(lo), float(hi)


@dataclass
class ProfileResult:
    trace: list[tuple[float, float]]
    kappa_hat: float
    loglik: float
    ci: tuple[float, float]
    level: float
    fit: FitResult

    def to_dict(self) -> dict[str, Any]:
        return {"kappa_hat": self.kappa_hat, "loglik": self.loglik, "level": self.level,
                "profile_ci": list(self.ci),
                "wald_ci": list(wald_ci(self.fit, "kappa")) if self.fit.kappa_se_log else None,
                "trace": [{"kappa": k, "loglik": v} for k, v in sorted(self.trace)],
                "fit": self.fit.to_dict()}


class _Profile:
    """Profile log-likelihood in kappa with warm-started inner fits."""

    def __init__(self, spec, data, options):
        self.spec, self.data, self.options = spec, data, options
        self.cache: dict[float, tuple[float, np.ndarray]] = {}

    def __call__(self, kappa: float) -> float:
        kappa = float(kappa)
        if kappa in self.cache:
            return self.cache[kappa][0]
        init = None
        if self.cache:
            nearest = min(self.cache, key=lambda k: abs(k - kappa))
            init = self.cache[nearest][1]
        model = Model(self.spec, self.data, kappa)
        try:
            res = _fit_model(model, init, self.options, covariance=False)
        except ConvergenceError:
            if init is None:
                raise
            res = _fit_model(model, None, self.options, covariance=False)
        self.cache[kappa] = (res.loglik, res.theta)
        return res.loglik


def profile_kappa(spec: ModelSpec, data: StratifiedCounts, kappa_range=(0.05, 2.0),
                  search: str = "grid", n_grid: int = 12, level: float = 0.95,
                  tol: float = 1e-3, options: FitOptions | None = None) -> ProfileResult:
    """Profile likelihood estimate and interval for the contact-matrix power.

    The interval is ``{kappa: 2 (l(kappa_hat) - l(kappa)) <= chi2_1(level)}``
    with endpoints found by bisection to ``tol``.
    """
    if not spec.profiles_kappa:
        raise ValueError(f"model {spec.name!r} does not profile kappa")
    lo, hi = map(float, kappa_range)
    if not 0 <= lo < hi:
        raise ValueError("kappa range must satisfy 0 <= lo < hi")
    prof = _Profile(spec, data, options)
    cutoff = stats.chi2.ppf(level, 1)

    if search == "grid":
        grid = np.linspace(lo, hi, n_grid)
        values = [prof(k) for k in grid]
        i = int(np.argmax(values))
        if i in (0, n_grid - 1):
            raise ValueError(f"profile maximum at the boundary kappa={grid[i]:.4g}; "
                             f"widen the kappa range {kappa_range}")
        a, b = grid[i - 1], grid[i + 1]
    elif search == "golden":
        a, b = lo, hi
    else:
        raise ValueError("search must be 'grid' or 'golden'")
    opt = optimize.minimize_scalar(lambda k: -prof(k), bounds=(a, b), method="bounded",
                                   options={"xatol": tol / 10})
    k_hat = float(opt.x)
    ll_hat = prof(k_hat)
    best = max(prof.cache, key=lambda k: prof.cache[k][0])
    if prof.cache[best][0] > ll_hat:
        k_hat, ll_hat = best, prof.cache[best][0]
    if min(k_hat - lo, hi - k_hat) < tol:
        raise ValueError(f"profile maximum at the boundary kappa={k_hat:.4g}; "
                         f"widen the kappa range {kappa_range}")

    def dev(k):
        return 2 * (ll_hat - prof(k)) - cutoff

    def endpoint(inside, edge):
        outside = None
        # nearest already-evaluated point beyond the cutoff on this side
        side = [k for k in prof.cache if (k - inside) * (edge - inside) > 0]
        for k in sorted(side, key=lambda k: abs(k - inside)):
            if dev(k) > 0:
                outside = k
                break
        if outside is None:
            if dev(edge) <= 0:
                logger.warning("profile interval for kappa reaches the range end %.4g", edge)
                truncated.append(edge)
                return edge
            outside = edge
        a, b = inside, outside
        while abs(b - a) > tol:
            m = (a + b) / 2
            if dev(m) > 0:
                b = m
            else:
                a = m
        return (a + b) / 2

    truncated: list[float] = []
    ci = (endpoint(k_hat, lo), endpoint(k_hat, hi))

    final = _fit_model(Model(spec, data, k_hat), prof.cache[k_hat][1], options)
    final.kappa_se_log = _kappa_se_log(prof, k_hat, final.loglik)
    final.extra["profile_ci"] = list(ci)
    final.extra["profile_ci_truncated"] = truncated
    return ProfileResult(trace=sorted((k, v[0]) for k, v in prof.cache.items()),
                         kappa_hat=k_hat, loglik=final.loglik, ci=ci, level=level, fit=final)


def _kappa_se_log(prof: _Profile, k_hat: float, ll_hat: float, h: float = 0.05) -> float | None:
    """Standard error of log(kappa) from the curvature of the profile."""
    c = math.log(k_hat)
    up, down = prof(math.exp(c + h)), prof(math.exp(c - h))
    curv = (up - 2 * ll_hat + down) / h**2
    if not curv < 0:
        return None
    return 1.0 / math.sqrt(-curv)


# ---------------------------------------------------------------------------
# model comparison


def compare_models(fits: Sequence[FitResult], reference: int = 0, level: float = 0.95) -> pd.DataFrame:
    """AIC table with the columns of a model-summary table: dim, AIC
    difference to ``fits[reference]``, and tau / rho / kappa with Wald CIs."""
    if not fits:
        raise ValueError("no fits to compare")
    fps = {f.data_fingerprint for f in fits}
    if len(fps) != 1:
        raise ValueError("fits were computed on different datasets")
    if len({f.n_obs for f in fits}) != 1:
        raise ValueError("fits cover different numbers of observations")
    ref = fits[reference].aic
    rows = []
    for f in fits:
        row = {"model": f.spec.name, "dim": f.dim, "loglik": f.loglik, "aic": f.aic,
               "delta_aic": f.aic - ref}
        for label, name in (("tau", "ne.tau"), ("rho", "ne.rho"), ("kappa", "kappa")):
            est = lo = hi = np.nan
            if name == "kappa":
                if f.kappa is not None and f.spec.profiles_kappa:
                    est = f.kappa
                    if f.kappa_se_log is not None:
                        lo, hi = wald_ci(f, "kappa", level)
            elif name in f.layout.names:
                i = f.layout.index(name)
                est = _nat(f.theta[i], f.layout.log_scale[i])
                if f.cov is not None:
                    lo, hi = wald_ci(f, name, level)
            row.update({label: est, f"{label}_lower": lo, f"{label}_upper": hi})
        rows.append(row)
    return pd.DataFrame(rows)

"""Acceptance criteria, one test (and one summary line) per criterion.

Run ``pytest tests/test_acceptance.py -v``; the terminal summary lists
PASS / FAIL / SKIP for every criterion.
"""
from __future__ import annotations

import contextlib
import json
import math
import os
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
import yaml

from epifit import (ContactMatrix, ContactSpec, EndemicSpec, EpidemicSpec, ModelSpec,
                    SimulationConfig, WeightConfig, epidemic_coefficient_matrix,
                    fit, log_likelihood, matrix_power, parameter_count, power_law_weights,
                    profile_kappa, score, simulate, wald_ci)
from epifit.cli import main
from epifit.model import Model, build_layout
from epifit.simulation import spectral_radius
from epifit.io import write_counts_csv, write_matrix_csv, write_population_csv

from conftest import record
from synth import C3, berlin_spec, generate, random_theta, recovery_scenario, template


@contextlib.contextmanager
def criterion(label, title):
    try:
        yield
    except pytest.skip.Exception:
        record(label, title, "SKIP")
        raise
    except BaseException:
        record(label, title, "FAIL")
        raise
    record(label, title, "PASS")


def test_1_power_law_weights():
    with criterion(1, "power-law weights for orders 0-4 at rho = 2.27"):
        w = power_law_weights(np.arange(5), 2.27)
        assert np.round(w, 2).tolist() == [1.00, 0.21, 0.08, 0.04, 0.03]


def test_2_parameter_counts():
    with criterion(2, "Berlin-shaped parameter counts 36 / 55 / 56"):
        assert parameter_count(berlin_spec(epidemic=False), 6, 12, 4) == 36
        for structure in ("matrix", "ones", "identity"):
            assert parameter_count(berlin_spec(structure), 6, 12, 4) == 55
        assert parameter_count(berlin_spec("matrix", profile=True), 6, 12, 4) == 56


def _random_stochastic(rng, n):
    M = rng.uniform(0.05, 1.0, size=(n, n)) + np.eye(n) * n
    return M / M.sum(axis=1, keepdims=True)


def test_3_matrix_power_algebra():
    with criterion(3, "C^kappa algebra suite"):
        rng = np.random.default_rng(2024)
        labels3 = ("a", "b", "c")
        C = ContactMatrix(C3, labels3, row_normalized=True)
        assert np.array_equal(matrix_power(C, 0.0).values, np.eye(3))
        np.testing.assert_allclose(matrix_power(C, 1.0).values, C3, rtol=0, atol=1e-12)
        for _ in range(10):
            n = int(rng.integers(2, 7))
            M = _random_stochastic(rng, n)
            Cm = ContactMatrix(M, tuple(f"g{i}" for i in range(n)), row_normalized=True)
            for k in (1, 2, 3):
                np.testing.assert_allclose(matrix_power(Cm, float(k)).values,
                                           np.linalg.matrix_power(M, k), rtol=0, atol=1e-9)
            for kappa in rng.uniform(0, 3, size=4):
                raw = matrix_power(Cm, float(kappa), truncate=False)
                np.testing.assert_allclose(raw.sum(axis=1), 1.0, atol=1e-9)
        # C3 has positive real spectrum and stays nonnegative, so no truncation fires
        for a, b in ((0.5, 0.7), (0.3, 2.0), (1.7, 0.4)):
            assert np.all(matrix_power(C, a, truncate=False) >= 0)
            assert np.all(matrix_power(C, a * b, truncate=False) >= 0)
            np.testing.assert_allclose(matrix_power(matrix_power(C, a), b).values,
                                       matrix_power(C, a * b).values, rtol=0, atol=1e-8)
        ex = ContactMatrix(np.array([[0.8, 0.2], [0.3, 0.7]]), ("x", "y"), row_normalized=True)
        np.testing.assert_allclose(matrix_power(ex, 2.0).values, [[0.70, 0.30], [0.45, 0.55]],
                                   atol=1e-12)
        np.testing.assert_allclose(matrix_power(ex, 50.0).values, [[0.6, 0.4], [0.6, 0.4]], atol=1e-6)


def _gradient_specs():
    end = EndemicSpec(seasonality="group", christmas=True)
    ep = EpidemicSpec(group_effects=True, region_effects=True, population_exponent=True)
    return {
        "endemic-only": (ModelSpec("end", end, overdispersion="group"), None),
        "epidemic C=I": (ModelSpec("id", end, epidemic=ep, contact=ContactSpec("identity"),
                                   overdispersion="group"), None),
        "epidemic C^kappa": (ModelSpec("kap", end, epidemic=ep,
                                       contact=ContactSpec("matrix", profile=True),
                                       overdispersion="group"), 0.6),
        "three-component": (ModelSpec("three", end, autoregressive=EpidemicSpec(group_effects=True),
                                      epidemic=ep, weights=WeightConfig("power_law_no_self"),
                                      contact=ContactSpec("matrix", kappa=0.8),
                                      overdispersion="group"), None),
    }


def test_4_gradient_contract():
    with criterion(4, "analytic score vs central differences (10 points x 4 specs)"):
        tmpl = template(3, 4, seed=40)
        rng = np.random.default_rng(41)
        from epifit.data import next_iso_weeks
        weeks = (tmpl.weeks[0],) + tuple(next_iso_weeks(tmpl.weeks[0], 59))
        data = tmpl.with_counts(rng.negative_binomial(4, 0.4, size=(60, 3, 4)), weeks)
        h = 1e-6
        for label, (spec, kappa) in _gradient_specs().items():
            layout = build_layout(spec, data.groups, data.regions, int(data.orders.max()))
            for _ in range(10):
                theta = random_theta(layout, rng)
                g = score(spec, theta, data, kappa)
                for j in range(len(theta)):
                    e = np.zeros_like(theta)
                    e[j] = h * max(1.0, abs(theta[j]))
                    fd = (log_likelihood(spec, theta + e, data, kappa)
                          - log_likelihood(spec, theta - e, data, kappa)) / (2 * e[j])
                    rel = abs(g[j] - fd) / max(1.0, abs(fd))
                    assert rel <= 1e-6, (label, layout.names[j], g[j], fd)


@pytest.fixture(scope="module")
def recovery_runs():
    """20 replicates from the kappa = 0.6 scenario, each profiled in kappa
    and refitted with C = 1 and C = I."""
    spec, truth, tmpl = recovery_scenario()
    ones, _, _ = recovery_scenario(structure="ones")
    ident, _, _ = recovery_scenario(structure="identity")
    sims = generate(spec, truth, tmpl, T=200, seed=2024, kappa=0.6, n_replicates=20)
    runs = []
    for data in sims:
        prof = profile_kappa(spec, data, (0.0, 2.0), n_grid=11)
        runs.append({"profile": prof, "aic_ones": fit(ones, data).aic,
                     "aic_identity": fit(ident, data).aic})
    return truth, runs


def test_5_simulation_recovery(recovery_runs):
    with criterion(5, "simulation recovery: 95% intervals cover truth >= 15/20, median kappa in [0.45, 0.75]"):
        truth, runs = recovery_runs
        hits = {name: 0 for name in list(truth) + ["kappa"]}
        for run in runs:
            prof = run["profile"]
            lo, hi = prof.ci
            hits["kappa"] += lo <= 0.6 <= hi
            f = prof.fit
            for name, value in truth.items():
                i = f.layout.index(name)
                target = math.exp(value) if f.layout.log_scale[i] else value
                lo, hi = wald_ci(f, name)
                hits[name] += lo <= target <= hi
        median = float(np.median([r["profile"].kappa_hat for r in runs]))
        assert all(h >= 15 for h in hits.values()), hits
        assert 0.45 <= median <= 0.75, median


def test_6_model_selection(recovery_runs):
    with criterion(6, "C^kappa beats C = 1 and C = I on AIC in >= 16/20"):
        _, runs = recovery_runs
        wins = sum(r["profile"].fit.aic < min(r["aic_ones"], r["aic_identity"]) for r in runs)
        assert wins >= 16, wins


def test_7_branching_process():
    with criterion(7, "coefficient matrix reproduces epidemic part; simulated stationary mean"):
        rng = np.random.default_rng(70)
        from epifit.data import next_iso_weeks
        for G, R, seed in ((3, 4, 1), (2, 5, 2), (6, 3, 3)):
            tmpl = template(G, R, seed=seed)
            weeks = (tmpl.weeks[0],) + tuple(next_iso_weeks(tmpl.weeks[0], 19))
            data = tmpl.with_counts(rng.poisson(8, size=(20, G, R)), weeks)
            spec = ModelSpec("ep", EndemicSpec(), epidemic=EpidemicSpec(True, True, True),
                             contact=ContactSpec("matrix", kappa=float(rng.uniform(0.2, 1.5))))
            m = Model(spec, data)
            for _ in range(5):
                theta = random_theta(m.layout, rng)
                A = epidemic_coefficient_matrix(spec, theta, data)
                pred = (data.counts[:-1].reshape(-1, G * R) @ A.T).reshape(-1, G, R)
                np.testing.assert_allclose(pred, m.components(theta).epidemic, rtol=1e-10, atol=1e-10)

        tmpl = template(2, 2, seed=7, contacts=np.array([[0.75, 0.25], [0.35, 0.65]]))
        spec = ModelSpec("ep", EndemicSpec(), epidemic=EpidemicSpec(group_effects=True,
                                                                    population_exponent=True),
                         contact=ContactSpec("matrix"), overdispersion="shared")
        m = Model(spec, tmpl)
        theta = m.layout.pack({"end.intercept": math.log(30), "end.group.b": -0.2,
                               "end.region.r2": 0.25, "ne.intercept": math.log(0.6) + 0.9 * math.log(4),
                               "ne.group.b": -0.3, "ne.tau": 0.9, "ne.rho": math.log(2.0),
                               "psi": math.log(0.15)})
        A = m.coefficient_matrix(theta)
        assert spectral_radius(A) < 1
        nu = m.components(theta).endemic[0].ravel()
        target = np.linalg.solve(np.eye(4) - A, nu)
        sims = simulate(SimulationConfig(spec, theta, tmpl, horizon=80, n_replicates=1000, seed=77,
                                         initial=np.zeros((2, 2), int)))
        late = np.stack([d.counts for d in sims])[:, 41:].reshape(-1, 4)
        np.testing.assert_allclose(late.mean(axis=0), target, rtol=0.05)


def test_8_poisson_limit():
    with criterion(8, "psi = 1e-10 log-likelihood matches Poisson within 1e-5"):
        rng = np.random.default_rng(8)
        tmpl = template(2, 3, seed=8)
        from epifit.data import next_iso_weeks
        weeks = (tmpl.weeks[0],) + tuple(next_iso_weeks(tmpl.weeks[0], 11))
        data = tmpl.with_counts(rng.poisson(6, size=(12, 2, 3)), weeks)
        kw = dict(endemic=EndemicSpec(seasonality="shared"),
                  epidemic=EpidemicSpec(population_exponent=True), contact=ContactSpec("matrix"))
        pois = ModelSpec("p", overdispersion="poisson", **kw)
        nb = ModelSpec("nb", overdispersion="shared", **kw)
        theta = random_theta(build_layout(pois, data.groups, data.regions, 2), rng)
        ll_nb = log_likelihood(nb, np.append(theta, math.log(1e-10)), data)
        assert abs(ll_nb - log_likelihood(pois, theta, data)) < 1e-5


# reference values for the Berlin dataset; keys are model names in the Berlin config
BERLIN_DELTA_AIC = {"ones": -415.4, "identity": -602.8, "matrix": -631.9, "kappa": -659.4}
BERLIN_PARAMS = {("kappa", "kappa"): 0.47, ("kappa", "rho"): 2.27, ("kappa", "tau"): 0.86,
                 ("matrix", "tau"): 0.97, ("matrix", "rho"): 2.34}
BERLIN_RADIUS = 0.71


def _five_model_config(tmp: Path) -> Path:
    spec, truth, tmpl = recovery_scenario()
    data = generate(spec, truth, tmpl, T=100, seed=90, kappa=0.6)
    write_counts_csv(data, tmp / "counts.csv")
    write_population_csv(data, tmp / "population.csv")
    r = data.regions
    pd.DataFrame([(r[i], r[i + 1]) for i in range(len(r) - 1)],
                 columns=["region_a", "region_b"]).to_csv(tmp / "adjacency.csv", index=False)
    write_matrix_csv(C3, tmp / "contacts.csv", data.groups)
    end = {"region_effects": False, "seasonality": "shared"}
    ep = {"population_exponent": True}
    cfg = {"data": {"counts": "counts.csv", "population": "population.csv",
                    "adjacency": "adjacency.csv", "contacts": "contacts.csv"},
           "profile": {"range": [0.0, 2.0], "grid_size": 9},
           "simulate": {"horizon": 10, "replicates": 4, "seed": 3},
           "reference": 0,
           "models": [{"name": "endemic", "endemic": end},
                      {"name": "ones", "endemic": end, "epidemic": ep, "contact": {"structure": "ones"}},
                      {"name": "identity", "endemic": end, "epidemic": ep,
                       "contact": {"structure": "identity"}},
                      {"name": "matrix", "endemic": end, "epidemic": ep, "contact": {"structure": "matrix"}},
                      {"name": "kappa", "endemic": end, "epidemic": ep,
                       "contact": {"structure": "matrix", "profile": True}}]}
    path = tmp / "five.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


def test_9a_compare_table_layout(tmp_path):
    with criterion("9a", "compare emits a five-row table with dim, delta AIC, tau, rho, kappa and CIs"):
        cfg = _five_model_config(tmp_path)
        assert main(["compare", "--config", str(cfg), "--out", str(tmp_path / "out")]) == 0
        table = pd.read_csv(tmp_path / "out" / "compare.csv")
        assert table["model"].tolist() == ["endemic", "ones", "identity", "matrix", "kappa"]
        for col in ("dim", "delta_aic", "tau", "tau_lower", "tau_upper", "rho", "rho_lower",
                    "rho_upper", "kappa", "kappa_lower", "kappa_upper"):
            assert col in table.columns
        assert table["delta_aic"].iloc[0] == 0.0
        assert table["dim"].iloc[4] == table["dim"].iloc[3] + 1


@pytest.mark.berlin
def test_9b_berlin_reference_values(tmp_path):
    with criterion("9b", "Berlin reference estimates (needs EPIFIT_BERLIN_CONFIG)"):
        config = os.environ.get("EPIFIT_BERLIN_CONFIG")
        if not config:
            pytest.skip("set EPIFIT_BERLIN_CONFIG to a run config for the Berlin dataset")
        assert main(["compare", "--config", config, "--out", str(tmp_path)]) == 0
        doc = json.loads((tmp_path / "compare.json").read_text())
        table = pd.DataFrame(doc["table"]).set_index("model")
        for name, value in BERLIN_DELTA_AIC.items():
            assert abs(table.loc[name, "delta_aic"] - value) <= 1.0, name
        for (name, col), value in BERLIN_PARAMS.items():
            assert abs(table.loc[name, col] - value) <= 0.02, (name, col)
        models = {m["model"]: m for m in doc["models"]}
        assert abs(models["kappa"]["epidemic_proportion"] - BERLIN_RADIUS) <= 0.02


def test_10_determinism(tmp_path):
    with criterion(10, "byte-identical fit JSON and simulation CSV across runs"):
        cfg = _five_model_config(tmp_path)
        fixed = yaml.safe_load(cfg.read_text())
        fixed["models"] = fixed["models"][3:4]
        (tmp_path / "fixed.yaml").write_text(yaml.safe_dump(fixed))
        outs = []
        for run in ("a", "b"):
            out = tmp_path / run
            assert main(["fit", "--config", str(tmp_path / "fixed.yaml"), "--out", str(out)]) == 0
            assert main(["simulate", "--config", str(tmp_path / "fixed.yaml"), "--out", str(out),
                         "--seed", "123"]) == 0
            outs.append(out)
        for name in ("fit.json", "simulations.csv", "decomposition.csv"):
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name
        # the library path is deterministic too
        spec, truth, tmpl = recovery_scenario("matrix", profile=False)
        theta = build_layout(spec, tmpl.groups, tmpl.regions, 3).pack(truth)
        cfg_sim = SimulationConfig(spec, theta, tmpl, horizon=30, n_replicates=3, seed=5, kappa=0.6)
        a = np.stack([d.counts for d in simulate(cfg_sim)])
        b = np.stack([d.counts for d in simulate(cfg_sim)])
        assert np.array_equal(a, b)

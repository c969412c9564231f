"""``epifit`` command line: fit, profile, simulate, compare, contacts."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import pandas as pd
from threadpoolctl import threadpool_limits

from . import __version__
from .contact_matrix import matrix_power, row_normalize
from .data import DataError, scale_counts
from .inference import ConvergenceError, FitResult, compare_models, fit, profile_kappa
from .io import RunConfig, counts_frame, dump_json, write_matrix_csv
from .simulation import SimulationConfig, epidemic_proportion, mean_decomposition, simulate

logger = logging.getLogger("epifit")

EXIT_DATA = 2
EXIT_CONVERGENCE = 3
EXIT_OTHER = 1


def _parse_floats(text: str, what: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise DataError("bad_argument", f"cannot parse {what}: {text!r}") from None


def _prepare(cfg: RunConfig, args):
    data, _, _ = cfg.load_dataset()
    factors = args.scale_factors if args.scale_factors is not None else cfg.scale_factors
    if factors is not None:
        if isinstance(factors, str):
            factors = _parse_floats(factors, "scale factors")
        data = scale_counts(data, factors)
    logger.info("data: %s", data.summary())
    return data, factors


def _run_info(cfg: RunConfig, args, factors, data) -> dict:
    return {"command": args.command, "config": cfg.raw, "scale_factors": factors,
            "seed": args.seed, "data_summary": data.summary()}


def _fit_or_profile(spec, data, cfg: RunConfig, args):
    if spec.profiles_kappa:
        return _profile(spec, data, cfg, args).fit
    return fit(spec, data)


def _profile(spec, data, cfg, args):
    p = cfg.profile
    rng = args.kappa_range or p.get("range", [0.05, 2.0])
    if isinstance(rng, str):
        rng = _parse_floats(rng, "kappa range")
    if len(rng) != 2:
        raise DataError("bad_argument", "kappa range needs two values lo,hi")
    return profile_kappa(spec, data, tuple(rng), search=p.get("search", "grid"),
                         n_grid=int(p.get("grid_size", 12)), level=float(p.get("level", 0.95)))


def _fit_document(res: FitResult, data, info) -> dict:
    doc = res.to_dict()
    doc["run"] = info
    if res.spec.epidemic is not None or res.spec.autoregressive is not None:
        doc["epidemic_proportion"] = epidemic_proportion(res, data)
    return doc


def cmd_fit(cfg: RunConfig, args, out: Path) -> None:
    data, factors = _prepare(cfg, args)
    spec = _one_model(cfg)
    res = _fit_or_profile(spec, data, cfg, args)
    dump_json(_fit_document(res, data, _run_info(cfg, args, factors, data)), out / "fit.json")
    mean_decomposition(res, data, "group").to_frame().to_csv(out / "decomposition.csv", index=False,
                                                            float_format="%.10g")
    print(f"{spec.name}: loglik={res.loglik:.4f} AIC={res.aic:.2f} dim={res.dim}")


def cmd_profile(cfg: RunConfig, args, out: Path) -> None:
    data, factors = _prepare(cfg, args)
    spec = _one_model(cfg)
    prof = _profile(spec, data, cfg, args)
    doc = prof.to_dict()
    doc["fit"]["run"] = _run_info(cfg, args, factors, data)
    doc["data_fingerprint"] = data.fingerprint()
    dump_json(doc, out / "profile.json")
    pd.DataFrame(prof.trace, columns=["kappa", "loglik"]).to_csv(out / "profile_trace.csv", index=False,
                                                                 float_format="%.12g")
    print(f"{spec.name}: kappa={prof.kappa_hat:.4f} "
          f"({prof.level:.0%} profile CI {prof.ci[0]:.4f}-{prof.ci[1]:.4f})")


def cmd_simulate(cfg: RunConfig, args, out: Path) -> None:
    data, factors = _prepare(cfg, args)
    spec = _one_model(cfg)
    s = cfg.simulate
    res = _fit_or_profile(spec, data, cfg, args)
    seed = args.seed if args.seed is not None else s.get("seed", 0)
    sims = simulate(SimulationConfig.from_fit(
        res, data, horizon=int(s.get("horizon", 52)), n_replicates=int(s.get("replicates", 10)),
        seed=seed, allow_explosive=bool(s.get("allow_explosive", False))))
    frame = pd.concat([counts_frame(d, replicate=i) for i, d in enumerate(sims)], ignore_index=True)
    frame.to_csv(out / "simulations.csv", index=False)
    dump_json(_fit_document(res, data, _run_info(cfg, args, factors, data)), out / "fit.json")
    print(f"{spec.name}: {len(sims)} replicates x {len(sims[0].weeks) - 1} weeks")


def cmd_compare(cfg: RunConfig, args, out: Path) -> None:
    if not cfg.models:
        raise DataError("bad_config", "compare needs a 'models' list")
    data, factors = _prepare(cfg, args)
    fits = [_fit_or_profile(spec, data, cfg, args) for spec in cfg.models]
    table = compare_models(fits, reference=cfg.reference)
    table.to_csv(out / "compare.csv", index=False, float_format="%.10g")
    dump_json({"data_fingerprint": data.fingerprint(), "reference": cfg.models[cfg.reference].name,
               "run": _run_info(cfg, args, factors, data),
               "models": [_fit_document(f, data, None) for f in fits],
               "table": table.to_dict(orient="records")}, out / "compare.json")
    print(table[["model", "dim", "delta_aic", "tau", "rho", "kappa"]].to_string(index=False))


def cmd_contacts(cfg: RunConfig, args, out: Path) -> None:
    C = cfg.contact_matrix()
    if C is None:
        raise DataError("bad_config", "contacts needs data.contacts or data.survey")
    kappa = args.kappa if args.kappa is not None else cfg.contacts.get("kappa")
    if cfg.contacts.get("normalize", True) or kappa is not None:
        C = row_normalize(C)
    if kappa is not None:
        C = matrix_power(C, float(kappa))
    write_matrix_csv(C, out / "contacts.csv")
    print(f"contact matrix {C.size}x{C.size} written to {out / 'contacts.csv'}")


def _one_model(cfg: RunConfig):
    if not cfg.models:
        raise DataError("bad_config", "config has no model")
    return cfg.models[0]


COMMANDS = {"fit": cmd_fit, "profile": cmd_profile, "simulate": cmd_simulate,
            "compare": cmd_compare, "contacts": cmd_contacts}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="epifit", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="YAML run configuration")
    parser.add_argument("--out", default="epifit-out", help="output directory")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--scale-factors", default=None,
                        help="comma-separated per-group multipliers for the counts")
    parser.add_argument("--kappa-range", default=None, help="lo,hi for the kappa profile")
    parser.add_argument("--kappa", type=float, default=None, help="power for the contacts command")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def _limit_threads() -> None:
    n = os.environ.get("EPIFIT_THREADS")
    if not n:
        return
    threadpool_limits(int(n))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _limit_threads()
    try:
        cfg = RunConfig.load(args.config)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, args, out)
    except DataError as e:
        print(f"epifit: error code={e.code}: {e}", file=sys.stderr)
        return EXIT_DATA
    except ConvergenceError as e:
        print(f"epifit: error code=no_convergence: {e}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (ValueError, KeyError, FloatingPointError, OverflowError) as e:
        code = type(e).__name__.lower()
        print(f"epifit: error code={code}: {e}", file=sys.stderr)
        return EXIT_OTHER
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""CSV and config ingestion with validation, plus writers for results."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import pandas as pd
import yaml

from .contact_matrix import ContactMatrix, SurveyRecords, aggregate_contact_matrix, estimate_contact_matrix
from .data import DataError, StratifiedCounts, next_iso_weeks, parse_iso_week
from .model import ModelSpec
from .spatial import RegionGraph, adjacency_orders


def _read_csv(path, columns: Sequence[str], what: str) -> pd.DataFrame:
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except FileNotFoundError:
        raise DataError("missing_file", f"{what} file not found: {path}") from None
    df.columns = [c.strip() for c in df.columns]
    missing = [c for c in columns if c not in df.columns]
    if missing:
        raise DataError("missing_column", f"{what} file {path} lacks columns {missing}")
    for c in columns:
        df[c] = df[c].str.strip()
    return df


def _numbers(series: pd.Series, what: str) -> np.ndarray:
    # python float() parses decimal text exactly (round-trip safe)
    out = np.empty(len(series))
    for i, text in enumerate(series):
        try:
            out[i] = float(text)
        except ValueError:
            raise DataError("bad_number", f"non-numeric {what}: {text!r}") from None
    if not np.all(np.isfinite(out)):
        raise DataError("bad_number", f"non-finite {what}")
    return out


def read_population(path) -> tuple[tuple[str, ...], tuple[str, ...], np.ndarray]:
    """Population CSV ``region,group,population`` -> (groups, regions, n[g, r]).

    Labels keep their order of first appearance in the file.
    """
    df = _read_csv(path, ["region", "group", "population"], "population")
    if df.duplicated(["region", "group"]).any():
        row = df[df.duplicated(["region", "group"])].iloc[0]
        raise DataError("duplicate_cell", f"duplicate population row for region {row.region}, group {row.group}")
    groups = tuple(dict.fromkeys(df["group"]))
    regions = tuple(dict.fromkeys(df["region"]))
    pop = np.full((len(groups), len(regions)), np.nan)
    gi = {g: i for i, g in enumerate(groups)}
    ri = {r: i for i, r in enumerate(regions)}
    for r, g, n in zip(df["region"], df["group"], _numbers(df["population"], "population")):
        pop[gi[g], ri[r]] = n
    if np.isnan(pop).any():
        g, r = np.argwhere(np.isnan(pop))[0]
        raise DataError("missing_cell", f"no population for group {groups[g]}, region {regions[r]}")
    return groups, regions, pop


def _week_key(label: str):
    try:
        return parse_iso_week(label)
    except DataError:
        if label.lstrip("-").isdigit():
            return (0, int(label))
        raise


def read_counts(path, groups: Sequence[str], regions: Sequence[str]) -> tuple[tuple[str, ...], np.ndarray]:
    """Long-format counts ``week,region,group,count`` -> (weeks, Y[t, g, r])."""
    df = _read_csv(path, ["week", "region", "group", "count"], "counts")
    counts = _numbers(df["count"], "count")
    if np.any(counts < 0):
        row = df[counts < 0].iloc[0]
        raise DataError("negative_count", f"negative count in week {row.week}, region {row.region}, "
                        f"group {row.group}")
    if np.any(counts != np.round(counts)):
        raise DataError("bad_count", "counts must be integers")
    for col, labels in (("group", groups), ("region", regions)):
        seen = set(df[col])
        if seen != set(labels):
            raise DataError("label_mismatch",
                            f"{col} labels differ between counts and population: "
                            f"only in counts {sorted(seen - set(labels))}, "
                            f"only in population {sorted(set(labels) - seen)}")
    dup = df.duplicated(["week", "region", "group"])
    if dup.any():
        row = df[dup].iloc[0]
        raise DataError("duplicate_cell", f"duplicate row for week {row.week}, region {row.region}, "
                        f"group {row.group}")
    weeks = tuple(sorted(set(df["week"]), key=_week_key))
    iso = [w for w in weeks if _week_key(w)[0] != 0]
    if iso and len(iso) == len(weeks):
        expected = [weeks[0]] + next_iso_weeks(weeks[0], len(weeks) - 1)
        if list(weeks) != expected:
            gap = next(e for w, e in zip(weeks, expected) if w != e)
            raise DataError("week_gap", f"weeks are not consecutive: {gap} is missing")
    Y = np.full((len(weeks), len(groups), len(regions)), -1, dtype=np.int64)
    ti = {w: i for i, w in enumerate(weeks)}
    gi = {g: i for i, g in enumerate(groups)}
    ri = {r: i for i, r in enumerate(regions)}
    Y[df["week"].map(ti).to_numpy(), df["group"].map(gi).to_numpy(),
      df["region"].map(ri).to_numpy()] = counts.astype(np.int64)
    if np.any(Y < 0):
        t, g, r = np.argwhere(Y < 0)[0]
        raise DataError("missing_cell", f"no count for week {weeks[t]}, region {regions[r]}, "
                        f"group {groups[g]}")
    return weeks, Y


def read_adjacency(path, regions: Sequence[str]) -> RegionGraph:
    df = _read_csv(path, ["region_a", "region_b"], "adjacency")
    unknown = (set(df["region_a"]) | set(df["region_b"])) - set(regions)
    if unknown:
        raise DataError("label_mismatch", f"adjacency file names unknown regions {sorted(unknown)}")
    try:
        return RegionGraph(tuple(regions), tuple(zip(df["region_a"], df["region_b"])))
    except ValueError as e:
        raise DataError("bad_graph", str(e)) from None


def read_matrix_csv(path) -> ContactMatrix:
    """Square matrix CSV whose header row and first column hold group labels."""
    try:
        df = pd.read_csv(path, index_col=0, dtype={0: str}, float_precision="round_trip")
    except FileNotFoundError:
        raise DataError("missing_file", f"contact matrix file not found: {path}") from None
    rows = [str(x).strip() for x in df.index]
    cols = [str(x).strip() for x in df.columns]
    if rows != cols:
        raise DataError("label_mismatch", f"contact matrix row labels {rows} differ from columns {cols}")
    try:
        return ContactMatrix(df.to_numpy(dtype=float), tuple(rows))
    except ValueError as e:
        raise DataError("bad_matrix", str(e)) from None


def write_matrix_csv(C: ContactMatrix | np.ndarray, path, labels: Sequence[str] | None = None) -> None:
    values = C.values if isinstance(C, ContactMatrix) else np.asarray(C)
    labels = C.labels if isinstance(C, ContactMatrix) else labels
    df = pd.DataFrame(values, index=list(labels), columns=list(labels))
    df.index.name = "group"
    df.to_csv(path, float_format="%.17g")


def read_group_population(path) -> dict[str, float]:
    df = _read_csv(path, ["group", "population"], "group population")
    return dict(zip(df["group"], _numbers(df["population"], "population")))


def read_survey(records_path, roster_path) -> SurveyRecords:
    rec = _read_csv(records_path, ["participant_group", "contact_group", "count"], "survey")
    roster = _read_csv(roster_path, ["participant_id", "group"], "participant roster")
    if roster["participant_id"].duplicated().any():
        pid = roster["participant_id"][roster["participant_id"].duplicated()].iloc[0]
        raise DataError("duplicate_participant", f"participant {pid} listed twice in the roster")
    try:
        return SurveyRecords(tuple(rec["participant_group"]), tuple(rec["contact_group"]),
                             _numbers(rec["count"], "contact count"),
                             roster["group"].value_counts().to_dict())
    except ValueError as e:
        raise DataError("bad_survey", str(e)) from None


def contacts_from_survey(cfg: Mapping[str, Any], base: Path) -> ContactMatrix:
    records = read_survey(base / cfg["records"], base / cfg["participants"])
    population = read_group_population(base / cfg["population"])
    try:
        C = estimate_contact_matrix(records, population)
        if cfg.get("grouping"):
            C = aggregate_contact_matrix(C, {str(k): str(v) for k, v in cfg["grouping"].items()})
    except ValueError as e:
        raise DataError("bad_survey", str(e)) from None
    return C


def load_dataset(counts, population, adjacency=None, contacts: ContactMatrix | str | Path | None = None):
    """Read and cross-validate the input files.

    Returns ``(StratifiedCounts, RegionGraph | None, ContactMatrix | None)``.
    """
    groups, regions, pop = read_population(population)
    weeks, Y = read_counts(counts, groups, regions)
    graph = orders = None
    if adjacency is not None:
        graph = read_adjacency(adjacency, regions)
        try:
            orders = adjacency_orders(graph)
        except ValueError as e:
            raise DataError("disconnected_graph", str(e)) from None
    C = read_matrix_csv(contacts) if isinstance(contacts, (str, Path)) else contacts
    if C is not None:
        if set(C.labels) != set(groups):
            raise DataError("label_mismatch", f"contact matrix groups {list(C.labels)} differ from "
                            f"data groups {list(groups)}")
        C = C.reorder(groups)
    data = StratifiedCounts(Y, weeks, groups, regions, pop, orders=orders, contacts=C)
    return data, graph, C


def counts_frame(data: StratifiedCounts, replicate: int | None = None) -> pd.DataFrame:
    T, G, R = data.shape
    t, g, r = np.meshgrid(np.arange(T), np.arange(G), np.arange(R), indexing="ij")
    df = pd.DataFrame({
        "week": np.asarray(data.weeks)[t.ravel()],
        "region": np.asarray(data.regions)[r.ravel()],
        "group": np.asarray(data.groups)[g.ravel()],
        "count": data.counts.ravel(),
    })
    if replicate is not None:
        df.insert(0, "replicate", replicate)
    return df


def write_counts_csv(data: StratifiedCounts, path) -> None:
    counts_frame(data).to_csv(path, index=False)


def write_population_csv(data: StratifiedCounts, path) -> None:
    pop = data.population if data.population.ndim == 2 else data.population[0]
    rows = [(r, g, pop[i, j]) for j, r in enumerate(data.regions) for i, g in enumerate(data.groups)]
    pd.DataFrame(rows, columns=["region", "group", "population"]).to_csv(path, index=False)


def _clean(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, (np.floating,)):
        return _clean(float(obj))
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, Mapping):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def dump_json(obj, path) -> None:
    text = json.dumps(_clean(obj), indent=2, sort_keys=True, allow_nan=False)
    Path(path).write_text(text + "\n")


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    """A YAML run configuration; relative paths resolve against ``base``."""

    base: Path
    data: dict[str, Any]
    models: list[ModelSpec]
    reference: int = 0
    profile: dict[str, Any] = field(default_factory=dict)
    simulate: dict[str, Any] = field(default_factory=dict)
    contacts: dict[str, Any] = field(default_factory=dict)
    scale_factors: list[float] | None = None
    raw: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            raw = yaml.safe_load(path.read_text()) or {}
        except FileNotFoundError:
            raise DataError("missing_file", f"config file not found: {path}") from None
        except yaml.YAMLError as e:
            raise DataError("bad_config", f"cannot parse {path}: {e}") from None
        if not isinstance(raw, dict):
            raise DataError("bad_config", "config must be a mapping")
        unknown = set(raw) - {"data", "model", "models", "reference", "profile", "simulate",
                              "contacts", "scale_factors"}
        if unknown:
            raise DataError("bad_config", f"unknown config sections {sorted(unknown)}")
        specs = raw.get("models") or ([raw["model"]] if raw.get("model") else [])
        try:
            models = [ModelSpec.from_dict(m) for m in specs]
        except (TypeError, ValueError) as e:
            raise DataError("bad_config", f"invalid model specification: {e}") from None
        names = [m.name for m in models]
        if len(set(names)) != len(names):
            raise DataError("bad_config", f"model names must be unique: {names}")
        return cls(base=path.parent, data=dict(raw.get("data") or {}), models=models,
                   reference=int(raw.get("reference", 0)), profile=dict(raw.get("profile") or {}),
                   simulate=dict(raw.get("simulate") or {}), contacts=dict(raw.get("contacts") or {}),
                   scale_factors=raw.get("scale_factors"), raw=raw)

    def path(self, key: str) -> Path | None:
        value = self.data.get(key)
        return None if value is None else self.base / value

    def contact_matrix(self) -> ContactMatrix | None:
        if self.data.get("contacts") is not None:
            return read_matrix_csv(self.path("contacts"))
        if self.data.get("survey") is not None:
            return contacts_from_survey(self.data["survey"], self.base)
        return None

    def load_dataset(self):
        for key in ("counts", "population"):
            if self.data.get(key) is None:
                raise DataError("bad_config", f"config data section needs '{key}'")
        return load_dataset(self.path("counts"), self.path("population"),
                            self.path("adjacency"), self.contact_matrix())

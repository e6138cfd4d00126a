"""Replication engine: R simulated panels x estimators x regimes x horizons.

Ground truth is computed once per (regime, horizon) from the generator;
replicate seeds derive from the master seed; every cell failure is recorded
in its row and the run continues.  All aggregation is over sorted keys, so
the report is deterministic given the config.
"""

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DtrBenchError, InvalidParameterError
from .estimators import (DEFAULT_LEARNER, METHODS, OUTCOME_LEARNERS,
                         estimate_iptw, estimate_ltmle, estimate_msm,
                         estimate_seq_g, estimate_ts)
from .sem import (REGIME_KINDS, SimSpec, counterfactual_truth_curve,
                  make_regime, simulate_panel)
from .weights import fit_propensities

REGIME_ALIASES = {
    "always": "always_treat",
    "never": "never_treat",
    "750s": "threshold_750",
    "350s": "threshold_350",
}

CONFIG_KEYS = ("n", "K", "R", "seed", "mc_samples", "methods", "learners",
               "regimes", "horizons", "out_dir")

_TRUTH_SALT, _PANEL_SALT, _EST_SALT = 1, 2, 3


def canonical_kind(name: str) -> str:
    """Resolve a CLI regime name or full kind to the canonical kind."""
    kind = REGIME_ALIASES.get(name, name)
    if kind not in REGIME_KINDS:
        raise InvalidParameterError(f"unknown regime {name!r}")
    return kind


@dataclass(frozen=True)
class BenchConfig:
    """Benchmark run settings."""

    n_subjects: int = 1000
    horizon: int = 11
    replicates: int = 10
    seed: int = 0
    mc_samples: int = 1_000_000
    methods: tuple = (("iptw", None), ("msm", None), ("seq_g", "L1"),
                      ("ltmle", "L2"), ("ts", "dkl"))
    regimes: tuple = REGIME_KINDS
    horizons: tuple = (10, 11)
    out_dir: str = "bench_out"

    def __post_init__(self):
        if self.replicates < 1:
            raise InvalidParameterError("replicates must be >= 1")
        if self.n_subjects < 1:
            raise InvalidParameterError("n_subjects must be >= 1")
        if self.mc_samples < 1:
            raise InvalidParameterError("mc_samples must be >= 1")
        if not self.horizons:
            raise InvalidParameterError("horizons must be nonempty")
        for h in self.horizons:
            if not 0 <= h <= self.horizon:
                raise InvalidParameterError(f"horizon {h} outside 0..{self.horizon}")
        for method, learner in self.methods:
            if method not in METHODS:
                raise InvalidParameterError(f"unknown method {method!r}")
            if learner is not None and learner not in OUTCOME_LEARNERS:
                raise InvalidParameterError(f"unknown learner {learner!r}")
        for kind in self.regimes:
            if kind not in REGIME_KINDS:
                raise InvalidParameterError(f"unknown regime kind {kind!r}")


@dataclass(frozen=True)
class ReportRow:
    """One benchmark cell: a method (with learner) at a regime and time point."""

    method: str
    learner: str
    regime: str
    horizon: int
    time_point: int
    truth: float
    estimates: tuple
    errors: tuple
    mae: float
    esd: float
    runtime_s: float = field(compare=False, default=0.0)

    @property
    def label(self) -> str:
        return self.method if self.learner is None else f"{self.method}_{self.learner}"


@dataclass(frozen=True)
class ReportTable:
    config: BenchConfig
    rows: tuple
    truths: tuple          # ((kind, horizon, value, mc_se), ...)
    replicate_seeds: tuple


def _derive_seed(master: int, *path) -> int:
    return int(np.random.SeedSequence([int(master)] + [int(x) for x in path]).generate_state(1)[0])


def summarize(estimates, truth: float):
    """(MAE, ESD) over the non-missing estimates; ESD needs >= 2 of them."""
    got = [e for e in estimates if e is not None]
    mae = float(np.mean([abs(e - truth) for e in got])) if got else None
    esd = float(np.std(got, ddof=1)) if len(got) >= 2 else None
    return mae, esd


def _needs(config: BenchConfig, method: str) -> bool:
    return any(m == method for m, _ in config.methods)


def run_benchmark(config: BenchConfig) -> ReportTable:
    m_fit = max(config.horizons)

    # Ground truth: one interventional Monte Carlo pass per regime covers
    # every requested horizon (earlier time points are prefixes).
    truth_kinds = sorted(set(config.regimes))
    truths = {}
    truth_rows = []
    for kind in truth_kinds:
        tseed = _derive_seed(config.seed, _TRUTH_SALT, REGIME_KINDS.index(kind))
        curve = counterfactual_truth_curve(
            SimSpec(n_subjects=1, horizon=m_fit, seed=tseed),
            make_regime(kind), config.mc_samples)
        for h in sorted(set(config.horizons)):
            g = curve[h]
            truths[(kind, h)] = g
            truth_rows.append((kind, h, g.value, g.mc_standard_error))

    rep_seeds = tuple(_derive_seed(config.seed, _PANEL_SALT, r)
                      for r in range(config.replicates))

    # cells[(method, learner, kind, h)] -> {"est": [...], "err": {...}, "t": s}
    cells = {}
    for method, learner in config.methods:
        for kind in config.regimes:
            for h in config.horizons:
                cells[(method, learner, kind, h)] = {
                    "est": [None] * config.replicates, "err": {}, "t": 0.0}

    want_marginal = any(m == "ts" for m, _ in config.methods)
    follower_kinds = sorted(set(
        (config.regimes if (_needs(config, "iptw") or _needs(config, "ltmle")) else ())
    ) | (set(REGIME_KINDS) if _needs(config, "msm") else set()))

    for r in range(config.replicates):
        panel = simulate_panel(SimSpec(n_subjects=config.n_subjects,
                                       horizon=config.horizon, seed=rep_seeds[r]))
        est_seed = _derive_seed(config.seed, _EST_SALT, r)

        marginal_props = None
        if want_marginal:
            marginal_props = fit_propensities(panel, m_max=m_fit,
                                              restrict="all_uncensored")
        follower_props = {}
        for kind in follower_kinds:
            try:
                follower_props[kind] = fit_propensities(
                    panel, m_max=m_fit, regime=make_regime(kind),
                    restrict="regime_followers")
            except DtrBenchError as exc:
                follower_props[kind] = exc

        for method, learner in config.methods:
            if method == "msm":
                continue
            for kind in config.regimes:
                regime = make_regime(kind)
                for h in config.horizons:
                    cell = cells[(method, learner, kind, h)]
                    t0 = time.perf_counter()
                    try:
                        if method in ("iptw", "ltmle"):
                            props = follower_props[kind]
                            if isinstance(props, DtrBenchError):
                                raise props
                        if method == "iptw":
                            est = estimate_iptw(panel, regime, h, propensities=props)
                        elif method == "ltmle":
                            est = estimate_ltmle(panel, regime, h, learner=learner,
                                                 seed=est_seed, propensities=props)
                        elif method == "seq_g":
                            est = estimate_seq_g(panel, regime, h, learner=learner,
                                                 seed=est_seed)
                        elif method == "ts":
                            est = estimate_ts(panel, regime, h, outcome_learner=learner,
                                              seed=est_seed, propensities=marginal_props)
                        cell["est"][r] = est.value
                    except DtrBenchError as exc:
                        cell["err"][r] = str(exc)
                    cell["t"] += time.perf_counter() - t0

        if _needs(config, "msm"):
            learner = next(l for m, l in config.methods if m == "msm")
            prop_map = {k: v for k, v in follower_props.items()
                        if not isinstance(v, DtrBenchError)}
            for h in config.horizons:
                t0 = time.perf_counter()
                try:
                    table = estimate_msm(panel, h, propensity_map=prop_map)
                except DtrBenchError as exc:
                    table = exc
                dt = time.perf_counter() - t0
                for kind in config.regimes:
                    cell = cells[("msm", learner, kind, h)]
                    cell["t"] += dt / max(len(config.regimes), 1)
                    if isinstance(table, DtrBenchError):
                        cell["err"][r] = str(table)
                    elif kind in table:
                        cell["est"][r] = table[kind].value
                    else:
                        cell["err"][r] = f"msm could not estimate regime {kind}"

    rows = []
    for key in sorted(cells, key=lambda k: (k[0], k[1] or "", k[2], k[3])):
        method, learner, kind, h = key
        cell = cells[key]
        truth = truths[(kind, h)].value
        mae, esd = summarize(cell["est"], truth)
        errors = tuple(sorted((r, msg) for r, msg in cell["err"].items()))
        rows.append(ReportRow(method=method, learner=learner, regime=kind,
                              horizon=h, time_point=h + 1, truth=truth,
                              estimates=tuple(cell["est"]), errors=errors,
                              mae=mae, esd=esd,
                              runtime_s=cell["t"] / config.replicates))

    return ReportTable(config=config, rows=tuple(rows),
                       truths=tuple(sorted(truth_rows)),
                       replicate_seeds=rep_seeds)


def _fmt(x) -> str:
    if x is None:
        return "NA"
    return repr(float(x))


def table_record(table_or_record) -> dict:
    """Normalize a ReportTable (or an already-parsed record) to a plain dict."""
    if isinstance(table_or_record, dict):
        return table_or_record
    table = table_or_record
    cfg = table.config
    return {
        "config": {
            "n": cfg.n_subjects, "K": cfg.horizon, "R": cfg.replicates,
            "seed": cfg.seed, "mc_samples": cfg.mc_samples,
            "methods": [[m, l] for m, l in cfg.methods],
            "regimes": list(cfg.regimes), "horizons": list(cfg.horizons),
            "out_dir": cfg.out_dir,
        },
        "truths": [{"regime": k, "K": h, "value": v, "mc_standard_error": se}
                   for k, h, v, se in table.truths],
        "replicate_seeds": list(table.replicate_seeds),
        "rows": [{
            "method": row.method, "learner": row.learner, "regime": row.regime,
            "K": row.horizon, "time": row.time_point, "truth": row.truth,
            "estimates": list(row.estimates),
            "errors": [[r, msg] for r, msg in row.errors],
            "mae": row.mae, "esd": row.esd, "runtime_s": row.runtime_s,
        } for row in table.rows],
    }


def emit_report(table_or_record, out_dir: str = None,
                formats=("csv", "json", "plotdata")) -> list:
    """Write mae.csv/esd.csv ("csv"), report.json ("json"), plotdata.csv
    ("plotdata") into out_dir; returns the written paths."""
    for f in formats:
        if f not in ("csv", "json", "plotdata"):
            raise InvalidParameterError(f"unknown report format {f!r}")
    rec = table_record(table_or_record)
    if not rec["rows"]:
        raise InvalidParameterError("report table is empty")
    if out_dir is None:
        out_dir = rec["config"]["out_dir"]
    written = []
    if not formats:
        return written
    os.makedirs(out_dir, exist_ok=True)

    def label(row):
        return row["method"] if row["learner"] is None else f"{row['method']}_{row['learner']}"

    if "csv" in formats:
        col_keys = sorted({(r["regime"], r["time"]) for r in rec["rows"]})
        row_keys = sorted({(r["method"], r["learner"] or "") for r in rec["rows"]})
        by_cell = {(r["method"], r["learner"] or "", r["regime"], r["time"]): r
                   for r in rec["rows"]}
        for metric in ("mae", "esd"):
            path = os.path.join(out_dir, f"{metric}.csv")
            with open(path, "w") as fh:
                fh.write("method,learner," +
                         ",".join(f"{k}@{t}" for k, t in col_keys) + "\n")
                for method, learner in row_keys:
                    vals = []
                    for kind, t in col_keys:
                        row = by_cell.get((method, learner, kind, t))
                        vals.append(_fmt(None if row is None else row[metric]))
                    fh.write(f"{method},{learner}," + ",".join(vals) + "\n")
            written.append(path)

    if "json" in formats:
        path = os.path.join(out_dir, "report.json")
        with open(path, "w") as fh:
            json.dump(rec, fh, indent=2)
            fh.write("\n")
        written.append(path)

    if "plotdata" in formats:
        path = os.path.join(out_dir, "plotdata.csv")
        with open(path, "w") as fh:
            fh.write("method,regime,time,value\n")
            for row in sorted(rec["rows"], key=lambda r: (label(r), r["regime"], r["time"])):
                fh.write(f"{label(row)},{row['regime']},{row['time']},{_fmt(row['mae'])}\n")
        written.append(path)

    return written


def _parse_methods(text: str) -> list:
    out = []
    for token in text.split(","):
        token = token.strip()
        if not token:
            continue
        if ":" in token:
            method, learner = token.split(":", 1)
            out.append((method.strip(), learner.strip()))
        else:
            out.append((token, DEFAULT_LEARNER.get(token)))
    return out


def parse_config_text(text: str, base: BenchConfig = None) -> BenchConfig:
    """Parse flat `key = value` lines (# comments allowed) into a BenchConfig."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidParameterError(f"config line {lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise InvalidParameterError(f"config line {lineno}: unknown key {key!r}")
        values[key] = val

    base = base or BenchConfig()
    kw = {
        "n_subjects": base.n_subjects, "horizon": base.horizon,
        "replicates": base.replicates, "seed": base.seed,
        "mc_samples": base.mc_samples, "methods": base.methods,
        "regimes": base.regimes, "horizons": base.horizons,
        "out_dir": base.out_dir,
    }
    if "n" in values:
        kw["n_subjects"] = int(values["n"])
    if "K" in values:
        kw["horizon"] = int(values["K"])
    if "R" in values:
        kw["replicates"] = int(values["R"])
    if "seed" in values:
        kw["seed"] = int(values["seed"])
    if "mc_samples" in values:
        kw["mc_samples"] = int(values["mc_samples"])
    if "out_dir" in values:
        kw["out_dir"] = values["out_dir"]
    if "methods" in values:
        kw["methods"] = tuple(_parse_methods(values["methods"]))
    if "learners" in values:
        override = dict(
            (m.strip(), l.strip()) for m, l in
            (tok.split(":", 1) for tok in values["learners"].split(",") if tok.strip()))
        kw["methods"] = tuple((m, override.get(m, l)) for m, l in kw["methods"])
    if "regimes" in values:
        kw["regimes"] = tuple(canonical_kind(tok.strip())
                              for tok in values["regimes"].split(",") if tok.strip())
    if "horizons" in values:
        kw["horizons"] = tuple(int(tok) for tok in values["horizons"].split(",") if tok.strip())
    return BenchConfig(**kw)


def load_config(path: str, base: BenchConfig = None) -> BenchConfig:
    with open(path) as fh:
        return parse_config_text(fh.read(), base=base)

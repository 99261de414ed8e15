"""Experiment configuration, trial execution, sweeps and reports.

Configs are INI files with sections ``[instance]``, ``[algorithm]``,
``[oracle]``, ``[run]`` and optionally ``[sweep]``; see README for the
grammar.  Every trial gets its own RNG streams derived from
``(seed, trial)``, so serial and parallel sweeps give identical rows.
"""
from __future__ import annotations

import configparser
import csv
import dataclasses
import hashlib
import io
import itertools
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .algorithms import (dpsgd_parameters, dpsgd_run, phased_erm_parameters, phased_erm_run,
                         phased_sgd_parameters, phased_sgd_run, sgd_iterates)
from .core import SplittableRng
from .instances import (load_instance, sample_nonsmooth_instance,
                        sample_quadratic_instance, sample_smooth_instance)
from .oracles import OracleHandle, quantized_bits

COLUMNS = ["config_hash", "trial", "seed", "d", "n", "alpha", "rho", "mbar", "gamma",
           "algorithm", "oracle", "subopt", "calls_total", "unique_points", "eps", "delta",
           "wall_ms", "error"]

FAMILIES = ("nonsmooth", "smooth", "quadratic")
ALGORITHMS = ("dpsgd", "phased_sgd", "phased_erm", "sgd")
ORACLES = ("identity", "gaussian", "quantized")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InstanceSection:
    family: str = "nonsmooth"
    d: int = 256
    n: int = 1
    c: float = 2.0
    B: float = 1.0
    L: float = 1.0
    curvature: float = 0.5
    center_norm: float = 0.5
    spread: float = 0.25
    file: str = ""


@dataclass(frozen=True)
class AlgorithmSection:
    name: str = "dpsgd"
    alpha: float = 0.2
    rho: float = 1.0
    mbar: float = math.inf
    delta: float = 1e-6
    exact_zcdp: bool = False
    steps: int = 1000
    eta: float = 0.01


@dataclass(frozen=True)
class OracleSection:
    kind: str = "gaussian"
    bits: int = 2
    gamma: int = 0


@dataclass(frozen=True)
class RunSection:
    trials: int = 20
    seed: int = 0
    timing: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    instance: InstanceSection = field(default_factory=InstanceSection)
    algorithm: AlgorithmSection = field(default_factory=AlgorithmSection)
    oracle: OracleSection = field(default_factory=OracleSection)
    run: RunSection = field(default_factory=RunSection)

    def validate(self) -> "ExperimentConfig":
        i, a, o, r = self.instance, self.algorithm, self.oracle, self.run
        if i.family not in FAMILIES:
            raise ConfigError(f"instance.family must be one of {FAMILIES}, got {i.family!r}")
        if a.name not in ALGORITHMS:
            raise ConfigError(f"algorithm.name must be one of {ALGORITHMS}, got {a.name!r}")
        if o.kind not in ORACLES:
            raise ConfigError(f"oracle.kind must be one of {ORACLES}, got {o.kind!r}")
        if i.d < 1 or i.n < 1:
            raise ConfigError("instance.d and instance.n must be positive")
        if not (a.alpha > 0 and a.rho > 0 and 0 < a.delta < 1 and a.mbar >= 1):
            raise ConfigError("need alpha > 0, rho > 0, 0 < delta < 1, mbar >= 1")
        if a.name == "sgd" and (a.steps < 1 or a.eta <= 0):
            raise ConfigError("sgd needs steps >= 1 and eta > 0")
        if a.name == "sgd" and o.kind == "gaussian":
            raise ConfigError("sgd runs with the identity or quantized oracle")
        if o.bits < 1:
            raise ConfigError("oracle.bits must be >= 1")
        if o.kind == "quantized" and o.gamma and o.gamma < quantized_bits(i.d, o.bits):
            raise ConfigError(f"oracle.gamma={o.gamma} below message length "
                              f"{quantized_bits(i.d, o.bits)}")
        if r.trials < 1 or not 0 <= r.seed < 2 ** 64:
            raise ConfigError("run.trials must be >= 1 and run.seed a u64")
        return self

    def with_override(self, key: str, value) -> "ExperimentConfig":
        section, _, name = key.partition(".")
        if section not in ("instance", "algorithm", "oracle", "run") or not name:
            raise ConfigError(f"bad parameter key {key!r}; use section.name")
        sec = getattr(self, section)
        types = {f.name: f.type for f in dataclasses.fields(sec)}
        if name not in types:
            raise ConfigError(f"unknown parameter {key!r}")
        return dataclasses.replace(
            self, **{section: dataclasses.replace(sec, **{name: _coerce(types[name], value, key)})})

    def point_dict(self) -> dict:
        """Everything that identifies a grid point (trial count excluded)."""
        d = dataclasses.asdict(self)
        d["run"].pop("trials")
        d["run"].pop("timing")
        return d

    @property
    def hash(self) -> str:
        return config_hash(self)


def _canon(x):
    if isinstance(x, float):
        return repr(x)
    if isinstance(x, dict):
        return {k: _canon(v) for k, v in x.items()}
    return x


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(_canon(cfg.point_dict()), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _coerce(typ, value, key):
    if not isinstance(value, str):
        return value
    v = value.strip()
    try:
        if typ in ("int", int):
            f = float(v)
            if f != int(f):
                raise ValueError
            return int(f)
        if typ in ("float", float):
            return math.inf if v.lower() in ("inf", "infinity") else float(v)
        if typ in ("bool", bool):
            if v.lower() in ("1", "true", "yes", "on"):
                return True
            if v.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {typ}") from None
    return v


@dataclass(frozen=True)
class SweepGrid:
    params: tuple[tuple[str, tuple[str, ...]], ...]
    mode: str = "cross"

    def __post_init__(self):
        if not self.params or any(len(v) == 0 for _, v in self.params):
            raise ConfigError("sweep grid is empty")
        if self.mode not in ("cross", "paired"):
            raise ConfigError("sweep mode must be 'cross' or 'paired'")
        if self.mode == "paired" and len({len(v) for _, v in self.params}) > 1:
            raise ConfigError("paired sweep needs equally long value lists")

    def points(self) -> list[dict]:
        keys = [k for k, _ in self.params]
        vals = [v for _, v in self.params]
        combos = itertools.product(*vals) if self.mode == "cross" else zip(*vals)
        return [dict(zip(keys, c)) for c in combos]


def parse_config(text: str) -> tuple[ExperimentConfig, SweepGrid | None]:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    cfg = ExperimentConfig()
    for section in cp.sections():
        if section == "sweep":
            continue
        if section not in ("instance", "algorithm", "oracle", "run"):
            raise ConfigError(f"unknown section [{section}]")
        for key, value in cp.items(section):
            cfg = cfg.with_override(f"{section}.{key}", value)
    grid = None
    if cp.has_section("sweep"):
        mode = "cross"
        params = []
        for key, value in cp.items("sweep"):
            if key == "mode":
                mode = value.strip()
                continue
            vals = tuple(v.strip() for v in value.split(",") if v.strip())
            cfg.with_override(key, vals[0] if vals else "0")  # key check
            params.append((key, vals))
        grid = SweepGrid(tuple(params), mode)
    return cfg.validate(), grid


def load_config(path) -> tuple[ExperimentConfig, SweepGrid | None]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    return parse_config(text)


# ---------------------------------------------------------------------------
# trials
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunRecord:
    config_hash: str
    trial: int
    seed: int
    d: int
    n: int
    alpha: float
    rho: float | str
    mbar: float | str
    gamma: int | str
    algorithm: str
    oracle: str
    subopt: float | str
    calls_total: int
    unique_points: int
    eps: float | str
    delta: float | str
    wall_ms: float
    error: str = ""
    cnt_max: int = 0

    def row(self) -> list[str]:
        return [_fmt(getattr(self, c)) for c in COLUMNS]


def _fmt(v) -> str:
    if isinstance(v, float):
        if math.isnan(v):
            return ""
        return repr(v)
    return str(v)


def build_instance(cfg: ExperimentConfig, rng):
    i, a = cfg.instance, cfg.algorithm
    if i.file:
        return load_instance(i.file)
    if i.family == "nonsmooth":
        return sample_nonsmooth_instance(i.d, a.alpha, i.n, rng, c=i.c, seed=cfg.run.seed)
    if i.family == "smooth":
        return sample_smooth_instance(i.d, i.n, a.alpha, i.B, i.L, rng, seed=cfg.run.seed)
    return sample_quadratic_instance(i.d, i.n, i.B, i.curvature, i.center_norm, i.spread, rng,
                                     seed=cfg.run.seed)


def run_trial(cfg: ExperimentConfig, trial: int, timing: bool = True) -> RunRecord:
    a, o = cfg.algorithm, cfg.oracle
    root = SplittableRng(cfg.run.seed).child("trial", trial)
    gamma = quantized_bits(cfg.instance.d, o.bits) if o.kind == "quantized" else ""
    base = dict(config_hash=cfg.hash, trial=trial, seed=cfg.run.seed, d=cfg.instance.d,
                n=cfg.instance.n, alpha=a.alpha, algorithm=a.name, oracle=o.kind,
                gamma=(o.gamma or gamma) if o.kind == "quantized" else "")
    rho, mbar, eps, delta = "", "", "", ""
    try:
        inst = build_instance(cfg, root.child("instance"))
        run_rng = root.child("run")
        if a.name == "dpsgd":
            pc = dpsgd_parameters(a.alpha, a.rho, a.mbar, inst.d, inst.radius,
                                  inst.lipschitz, a.exact_zcdp, a.delta)
            res = dpsgd_run(inst, o.kind, pc, run_rng, bits_per_coord=o.bits,
                            gamma=o.gamma or None)
            rho, mbar = a.rho, a.mbar
        elif a.name == "phased_sgd":
            pc = phased_sgd_parameters(a.alpha, a.delta, inst.d, inst.n, inst.radius,
                                       inst.lipschitz)
            res = phased_sgd_run(inst, pc, run_rng)
        elif a.name == "phased_erm":
            pc = phased_erm_parameters(a.alpha, a.delta, inst.d, inst.n, inst.radius,
                                       inst.lipschitz)
            res = phased_erm_run(inst, pc, rng=run_rng)
        else:
            res = _sgd_trial(inst, cfg, run_rng)
        if res.privacy is not None and hasattr(res.privacy, "eps"):
            eps, delta = res.privacy.eps, res.privacy.delta
        return RunRecord(**base, rho=rho, mbar=mbar, subopt=float(res.subopt),
                         calls_total=res.stats.calls_total,
                         unique_points=res.stats.unique_points, eps=eps, delta=delta,
                         wall_ms=round(res.wall_ms, 3) if timing else 0.0,
                         cnt_max=int(res.stats.cnt.max()) if res.stats.cnt.size else 0)
    except Exception as exc:  # recorded per row, the sweep continues
        return RunRecord(**base, rho=rho, mbar=mbar, subopt="", calls_total=0,
                         unique_points=0, eps="", delta="", wall_ms=0.0,
                         error=f"{type(exc).__name__}: {exc}".replace("\n", " "))


def _sgd_trial(inst, cfg, rng):
    from .algorithms import RunResult

    a, o = cfg.algorithm, cfg.oracle
    handle = OracleHandle(inst)
    avg, _, _ = sgd_iterates(inst, a.steps, a.eta, rng=rng, handle=handle, proxy=o.kind,
                             bits_per_coord=o.bits)
    return RunResult(avg, float(inst.suboptimality(avg)), handle.stats)


def _trial_star(args):
    return run_trial(*args)


def _execute(jobs, parallel: int, on_record=None) -> list[RunRecord]:
    out = []
    if parallel > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            for rec in pool.map(_trial_star, jobs):
                out.append(rec)
                if on_record:
                    on_record(rec)
    else:
        for job in jobs:
            rec = _trial_star(job)
            out.append(rec)
            if on_record:
                on_record(rec)
    return out


def sort_records(records) -> list[RunRecord]:
    return sorted(records, key=lambda r: (r.config_hash, r.trial))


def run_experiment(cfg: ExperimentConfig, parallel: int = 1, timing: bool | None = None
                   ) -> list[RunRecord]:
    cfg.validate()
    timing = cfg.run.timing if timing is None else timing
    jobs = [(cfg, t, timing) for t in range(cfg.run.trials)]
    return sort_records(_execute(jobs, parallel))


def expand_grid(grid: SweepGrid, base: ExperimentConfig) -> list[ExperimentConfig]:
    out = []
    for point in grid.points():
        cfg = base
        for k, v in point.items():
            cfg = cfg.with_override(k, v)
        out.append(cfg.validate())
    return out


def sweep(grid: SweepGrid, base: ExperimentConfig, out, parallel: int = 1,
          timing: bool | None = None) -> Path:
    """Run every grid point and trial, appending rows as they finish.

    Rows already present in ``out`` (keyed by config hash and trial) are
    kept and not rerun, so an interrupted sweep resumes where it stopped.
    The final file is canonically sorted.
    """
    out = Path(out)
    timing = base.run.timing if timing is None else timing
    done = {(r["config_hash"], int(r["trial"])): r for r in read_rows(out)} if out.exists() else {}
    jobs = [(cfg, t, timing) for cfg in expand_grid(grid, base)
            for t in range(cfg.run.trials) if (cfg.hash, t) not in done]
    new_file = not out.exists() or out.stat().st_size == 0
    with out.open("a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new_file:
            w.writerow(COLUMNS)

        def append(rec):
            w.writerow(rec.row())
            fh.flush()

        _execute(jobs, parallel, append)
    rows = read_rows(out)
    rows.sort(key=lambda r: (r["config_hash"], int(r["trial"])))
    _write_rows(out, rows)
    return out


def read_rows(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    seen = {}
    for r in rows:
        seen[(r["config_hash"], r["trial"])] = r
    return list(seen.values())


def _write_rows(path, rows):
    tmp = Path(str(path) + ".tmp")
    with tmp.open("w", newline="") as fh:
        w = csv.DictWriter(fh, COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def records_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in sort_records(records):
        w.writerow(r.row())
    return buf.getvalue()


def _as_rows(records) -> list[dict]:
    return [dict(zip(COLUMNS, r.row())) if isinstance(r, RunRecord) else r for r in records]


def loglog_fit(xs, ys) -> tuple[float, float]:
    """Least-squares slope and intercept of ``log y`` against ``log x``."""
    lx, ly = np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float))
    if np.unique(lx).size < 2:
        return math.nan, math.nan
    slope, icpt = np.polyfit(lx, ly, 1)
    return float(slope), float(icpt)


def _swept_column(rows) -> str:
    for col in ("d", "mbar", "alpha", "rho", "n", "gamma"):
        vals = {r[col] for r in rows if r[col] not in ("", "inf")}
        if len(vals) > 1:
            return col
    return "d"


def scatter_svg(rows, x: str | None = None, y: str = "calls_total") -> tuple[str, float]:
    rows = [r for r in _as_rows(rows) if not r["error"]]
    x = x or _swept_column(rows)
    pts = []
    for r in rows:
        try:
            xv, yv = float(r[x]), float(r[y])
        except ValueError:
            continue
        if xv > 0 and yv > 0 and math.isfinite(xv) and math.isfinite(yv):
            pts.append((xv, yv))
    W, H, pad = 640, 480, 60
    slope, icpt = loglog_fit(*zip(*pts)) if len(pts) >= 2 else (math.nan, math.nan)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
             f'viewBox="0 0 {W} {H}">',
             f'<rect width="{W}" height="{H}" fill="white"/>',
             f'<line x1="{pad}" y1="{H - pad}" x2="{W - pad}" y2="{H - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{H - pad}" stroke="black"/>',
             f'<text x="{W / 2}" y="{H - 15}" text-anchor="middle" font-size="14">'
             f'log10 {x}</text>',
             f'<text x="18" y="{H / 2}" text-anchor="middle" font-size="14" '
             f'transform="rotate(-90 18 {H / 2})">log10 {y}</text>']
    if pts:
        lx = np.log10([p[0] for p in pts])
        ly = np.log10([p[1] for p in pts])
        x0, x1 = lx.min(), lx.max()
        y0, y1 = ly.min(), ly.max()
        x1 = x1 if x1 > x0 else x0 + 1
        y1 = y1 if y1 > y0 else y0 + 1

        def sx(v):
            return pad + (v - x0) / (x1 - x0) * (W - 2 * pad)

        def sy(v):
            return H - pad - (v - y0) / (y1 - y0) * (H - 2 * pad)

        for k in range(5):
            tx = x0 + k * (x1 - x0) / 4
            ty = y0 + k * (y1 - y0) / 4
            parts.append(f'<text x="{sx(tx):.1f}" y="{H - pad + 18}" text-anchor="middle" '
                         f'font-size="11">{tx:.2f}</text>')
            parts.append(f'<text x="{pad - 6}" y="{sy(ty) + 4:.1f}" text-anchor="end" '
                         f'font-size="11">{ty:.2f}</text>')
        for a, b in zip(lx, ly):
            parts.append(f'<circle cx="{sx(a):.2f}" cy="{sy(b):.2f}" r="3" fill="steelblue"/>')
        if math.isfinite(slope):
            # fit was in natural logs; slope is base independent, intercept is not
            c10 = icpt / math.log(10)
            parts.append(f'<line x1="{sx(x0):.2f}" y1="{sy(c10 + slope * x0):.2f}" '
                         f'x2="{sx(x1):.2f}" y2="{sy(c10 + slope * x1):.2f}" '
                         f'stroke="firebrick" stroke-dasharray="4 3"/>')
    label = f"slope = {slope:.3f}" if math.isfinite(slope) else "slope = n/a"
    parts.append(f'<text x="{W - pad}" y="{pad - 20}" text-anchor="end" font-size="14">'
                 f'{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n", slope


def emit_report(records, kind: str, path, x: str | None = None) -> Path:
    records = list(records)
    if not records:
        raise ValueError("no records to report")
    path = Path(path)
    if kind == "csv":
        if isinstance(records[0], RunRecord):
            path.write_text(records_csv(records))
        else:
            rows = sorted(records, key=lambda r: (r["config_hash"], int(r["trial"])))
            _write_rows(path, rows)
    elif kind in ("svg", "svg-scatter"):
        path.write_text(scatter_svg(records, x)[0])
    else:
        raise ValueError(f"unknown report kind {kind!r}")
    return path


"""
Command-line front end: configuration files, subcommands and run directories.

Configuration files are flat ``key = value`` lines grouped under
``[section]`` headers, with ``#`` or ``;`` starting a comment line::

    schema = 1

    [grid]
    a = 1.0
    b = 2.0
    Nr = 32
    Ntheta = 64

    [equilibrium]
    potential = log_radial
    gamma = 1.0

Every key has a default (see :data:`SCHEMA`), unknown keys are errors, and
:func:`emit_config` writes the canonical form that :func:`parse_config` reads
back unchanged.

Each subcommand except ``diagnose`` writes into a fresh run directory under
``--out`` named after the git-style hash of the canonical configuration.
Existing directories are never modified by later runs; a rerun gets a
numbered sibling.  ``diagnose`` reads a ``simulate`` run directory and writes
``report.json`` and ``report.md`` computed only from files in it, so
repeating it reproduces the report byte for byte.

Exit codes: 0 success, 2 invalid input, 3 numerical failure, 4 failed
diagnostic assertion.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .diagnostics import (
    asymptotics_report,
    conservation_drift,
    energy_identity_residual,
    lyapunov_check,
    read_csv,
    regularity_flags,
    theorem16_conditions,
    weighted_functional_report,
)
from .eigensolver import full_spectrum_check
from .equilibrium import BC_SETS, POTENTIAL_KINDS, PhysicsParams, linear_profile, make_equilibrium, make_potential
from .errors import AnnulusError, NumericalError, ParseError, ValidationError
from .spectral import make_grid
from .timestepper import MODES, SCHEMES, SeedSpec, SimConfig, TimeSeries, run, save_state

__all__ = [
    "RunConfig",
    "SCHEMA",
    "parse_config",
    "emit_config",
    "git_hash",
    "dispatch",
    "main",
]

WORKERS_ENV = "BOUSSINESQ_ANNULUS_WORKERS"

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL, EXIT_DIAGNOSTIC = 0, 2, 3, 4

SEED_KINDS = ("random", "stokes", "eigenmode", "file", "zero")

# section -> key -> (type, default); "" is the top level
SCHEMA: dict[str, dict[str, tuple[type, object]]] = {
    "": {"schema": (int, 1)},
    "grid": {"a": (float, 1.0), "b": (float, 2.0), "Nr": (int, 32), "Ntheta": (int, 64)},
    "physics": {"nu": (float, 0.1), "rho_star": (float, 1.0), "alpha": (float, 0.0),
                "bc_set": (str, "paper_mixed")},
    "equilibrium": {"potential": (str, "log_radial"), "g": (float, 1.0), "c0": (float, 0.0),
                    "c_log": (float, 0.0), "terms": (str, ""), "profile": (str, ""),
                    "gamma": (float, 1.0), "beta": (float, 0.0)},
    "time": {"dt": (float, 1e-3), "T_end": (float, 1.0), "scheme": (str, "CNAB2"),
             "mode": (str, "nonlinear")},
    "seed": {"kind": (str, "random"), "amplitude": (float, 1e-3), "seed": (int, 0),
             "path": (str, ""), "rho_scale": (float, 0.0), "modes": (int, 8),
             "radial": (int, 2)},
    "output": {"cadence": (int, 1), "snapshot_every": (int, 0), "gamma_lyap": (float, 1.0),
               "beta_lyap": (float, 0.0)},
    "eig": {"modes": (str, "0-8"), "s_samples": (int, 8)},
    "diagnose": {"energy_tol": (float, 1e-6), "lyap_tol": (float, 1e-6), "drift_tol": (float, 1e-6),
                 "bc_tol": (float, 1e-8)},
}

SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# configuration


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(float(v))
    return str(v)


def _convert(typ, raw: str, key: str, line: int | None):
    if typ is str:
        if len(raw) >= 2 and raw[0] == raw[-1] == '"':
            raw = raw[1:-1]
        return raw
    try:
        if typ is int:
            return int(raw)
        v = float(raw)
    except ValueError:
        raise ValidationError(key, f"expected {typ.__name__}, got {raw!r}", line) from None
    if not math.isfinite(v):
        raise ValidationError(key, f"must be finite, got {raw!r}", line)
    return v


def parse_modes(text: str) -> list[int]:
    """``"0-8"``, ``"1,3,5"`` or a mix such as ``"0-2,5"``."""
    out: list[int] = []
    for part in (p.strip() for p in text.split(",")):
        if not part:
            continue
        if "-" in part[1:]:
            lo, hi = part.split("-", 1) if part[0] != "-" else (part, "")
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    return out


def parse_terms(text: str) -> list[tuple[int, float, float]]:
    """``"m:a_m:b_m, ..."`` for harmonic-series potentials."""
    terms = []
    for part in (p.strip() for p in text.split(",")):
        if not part:
            continue
        m, ca, cb = part.split(":")
        terms.append((int(m), float(ca), float(cb)))
    return terms


@dataclass
class RunConfig:
    """Typed configuration values plus the source line of each explicitly set key."""

    values: dict = field(default_factory=dict)
    lines: dict = field(default_factory=dict)

    def get(self, section: str, key: str):
        return self.values[section][key]

    @property
    def schema(self) -> int:
        return self.values[""]["schema"]

    def resolve_key(self, name: str) -> tuple[str, str]:
        """``section.key``, or a bare key that appears in exactly one section."""
        if "." in name:
            sec, key = name.split(".", 1)
            if sec not in SCHEMA or key not in SCHEMA[sec]:
                raise ValidationError(name, "unknown key")
            return sec, key
        hits = [sec for sec, keys in SCHEMA.items() if name in keys]
        if not hits:
            raise ValidationError(name, "unknown key")
        if len(hits) > 1:
            raise ValidationError(name, f"ambiguous key; use one of {[f'{h}.{name}' for h in hits]}")
        return hits[0], name

    def with_overrides(self, items) -> "RunConfig":
        values = {sec: dict(keys) for sec, keys in self.values.items()}
        for item in items or ():
            if "=" not in item:
                raise ValidationError(item, "override must look like key=value")
            name, raw = (s.strip() for s in item.split("=", 1))
            sec, key = self.resolve_key(name)
            values[sec][key] = _convert(SCHEMA[sec][key][0], raw, key, None)
        cfg = RunConfig(values, dict(self.lines))
        validate(cfg)
        return cfg

    # builders ---------------------------------------------------------------

    def grid(self):
        g = self.values["grid"]
        return make_grid(g["a"], g["b"], g["Nr"], g["Ntheta"])

    def params(self) -> PhysicsParams:
        p = self.values["physics"]
        g = self.values["equilibrium"]["g"]
        return PhysicsParams(nu=p["nu"], rho_star=p["rho_star"], alpha=p["alpha"], g=g)

    def potential(self, grid=None):
        e = self.values["equilibrium"]
        grid = grid or self.grid()
        kind = e["potential"]
        if kind == "harmonic_series":
            params = {"c0": e["c0"], "c_log": e["c_log"], "terms": parse_terms(e["terms"])}
        else:
            params = {"g": e["g"]}
        return make_potential(kind, params, grid)

    def equilibrium(self, grid=None):
        e = self.values["equilibrium"]
        prof = e["profile"] or linear_profile(e["gamma"], e["beta"])
        return make_equilibrium(self.potential(grid), prof)

    def seed(self) -> SeedSpec:
        s = self.values["seed"]
        return SeedSpec(kind=s["kind"], amplitude=s["amplitude"], seed=s["seed"], path=s["path"],
                        rho_scale=s["rho_scale"], modes=s["modes"], radial=s["radial"])

    def eig_modes(self) -> list[int]:
        return parse_modes(self.values["eig"]["modes"])

    def sim_config(self, equilibrium=None, stability=None, workers: int = 1) -> SimConfig:
        t = self.values["time"]
        o = self.values["output"]
        return SimConfig(
            params=self.params(),
            equilibrium=equilibrium or self.equilibrium(),
            dt=t["dt"],
            T_end=t["T_end"],
            scheme=t["scheme"],
            bc_set=self.values["physics"]["bc_set"],
            seed=self.seed(),
            cadence=o["cadence"],
            mode=t["mode"],
            workers=workers,
            gamma_lyap=o["gamma_lyap"],
            beta_lyap=o["beta_lyap"],
            snapshot_every=o["snapshot_every"],
            stability=stability,
        )


def _check(cond: bool, cfg: RunConfig, sec: str, key: str, msg: str):
    if not cond:
        raise ValidationError(f"{sec}.{key}" if sec else key, msg, cfg.lines.get((sec, key)))


def validate(cfg: RunConfig) -> RunConfig:
    v = cfg.values
    _check(v[""]["schema"] == SCHEMA_VERSION, cfg, "", "schema", f"unsupported schema version (expected {SCHEMA_VERSION})")
    g = v["grid"]
    _check(g["a"] > 0, cfg, "grid", "a", "inner radius must be positive")
    _check(g["b"] > g["a"], cfg, "grid", "b", "outer radius must exceed the inner radius")
    _check(g["Nr"] >= 3, cfg, "grid", "Nr", "need at least 3 radial nodes")
    _check(g["Ntheta"] >= 4 and g["Ntheta"] % 2 == 0, cfg, "grid", "Ntheta", "must be even and >= 4")
    p = v["physics"]
    _check(p["nu"] > 0, cfg, "physics", "nu", "viscosity must be positive")
    _check(p["rho_star"] > 0, cfg, "physics", "rho_star", "reference density must be positive")
    _check(p["nu"] / g["a"] + p["alpha"] >= 0, cfg, "physics", "alpha", "need nu/a + alpha >= 0")
    _check(p["bc_set"] in BC_SETS, cfg, "physics", "bc_set", f"expected one of {BC_SETS}")
    e = v["equilibrium"]
    _check(e["potential"] in POTENTIAL_KINDS, cfg, "equilibrium", "potential", f"expected one of {POTENTIAL_KINDS}")
    try:
        parse_terms(e["terms"])
    except ValueError:
        _check(False, cfg, "equilibrium", "terms", "expected comma-separated m:a_m:b_m triples")
    t = v["time"]
    _check(t["dt"] > 0, cfg, "time", "dt", "must be positive")
    _check(t["T_end"] >= 0, cfg, "time", "T_end", "must be >= 0")
    _check(t["scheme"] in SCHEMES, cfg, "time", "scheme", f"expected one of {SCHEMES}")
    _check(t["mode"] in MODES, cfg, "time", "mode", f"expected one of {MODES}")
    s = v["seed"]
    _check(s["kind"] in SEED_KINDS, cfg, "seed", "kind", f"expected one of {SEED_KINDS}")
    _check(s["amplitude"] >= 0, cfg, "seed", "amplitude", "must be >= 0")
    _check(s["rho_scale"] >= 0, cfg, "seed", "rho_scale", "must be >= 0")
    _check(s["modes"] >= 1, cfg, "seed", "modes", "must be >= 1")
    _check(s["radial"] >= 1, cfg, "seed", "radial", "must be >= 1")
    _check(s["kind"] != "file" or bool(s["path"]), cfg, "seed", "path", "file seeds need a path")
    o = v["output"]
    _check(o["cadence"] >= 1, cfg, "output", "cadence", "must be >= 1")
    _check(o["snapshot_every"] >= 0, cfg, "output", "snapshot_every", "must be >= 0")
    try:
        modes = parse_modes(v["eig"]["modes"])
    except ValueError:
        modes = None
    _check(bool(modes) and min(modes) >= 0, cfg, "eig", "modes", "expected a list like 0-8 or 1,2,5")
    _check(v["eig"]["s_samples"] >= 0, cfg, "eig", "s_samples", "must be >= 0")
    for key, val in v["diagnose"].items():
        _check(val > 0, cfg, "diagnose", key, "tolerance must be positive")
    return cfg


def default_config() -> RunConfig:
    return RunConfig({sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()})


def parse_config(text: str) -> RunConfig:
    """Parse and validate configuration text; missing keys take their defaults."""
    cfg = default_config()
    section = ""
    seen: set = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ParseError(f"unterminated section header {line!r}", lineno)
            section = line[1:-1].strip()
            if section not in SCHEMA or not section:
                raise ParseError(f"unknown section [{section}]", lineno, section)
            continue
        if "=" not in line:
            raise ParseError(f"expected key = value, got {line!r}", lineno)
        key, val = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ParseError("empty key", lineno)
        name = f"{section}.{key}" if section else key
        if key not in SCHEMA[section]:
            raise ParseError(f"unknown key {name!r}", lineno, name)
        if (section, key) in seen:
            raise ParseError(f"duplicate key {name!r}", lineno, name)
        seen.add((section, key))
        cfg.values[section][key] = _convert(SCHEMA[section][key][0], val, name, lineno)
        cfg.lines[(section, key)] = lineno
    return validate(cfg)


def emit_config(cfg: RunConfig) -> str:
    """Canonical text: every key, schema order, ``repr`` floats."""
    out = []
    for sec, keys in SCHEMA.items():
        if sec:
            out.append(f"\n[{sec}]")
        for key in keys:
            out.append(f"{key} = {_fmt(cfg.values[sec][key])}")
    return "\n".join(out) + "\n"


def git_hash(data: bytes) -> str:
    """Hash of ``data`` as git stores a blob."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


# ---------------------------------------------------------------------------
# run directories


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, default=_json_default) + "\n"


def _json_default(o):
    if hasattr(o, "item"):
        return o.item()
    return str(o)


def new_run_dir(out: Path, command: str, cfg_text: str) -> Path:
    """Fresh directory ``<command>-<hash12>``, numbered if that name is taken."""
    out.mkdir(parents=True, exist_ok=True)
    base = f"{command}-{git_hash(cfg_text.encode())[:12]}"
    path = out / base
    k = 1
    while True:
        try:
            path.mkdir()
            break
        except FileExistsError:
            k += 1
            path = out / f"{base}-{k}"
    (path / "config.ini").write_text(cfg_text)
    return path


def write_manifest(path: Path) -> dict:
    """Git-style hashes of every file in the run directory except the manifest."""
    files = {}
    for p in sorted(path.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            files[str(p.relative_to(path))] = git_hash(p.read_bytes())
    (path / "manifest.json").write_text(_dumps(files))
    return files


def _load_run_config(path) -> tuple[RunConfig, str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ValidationError("--config", f"cannot read {path}: {exc.strerror}") from None
    return parse_config(text), text


# ---------------------------------------------------------------------------
# subcommands


def _stability(cfg: RunConfig, eq, workers: int, want_eigenmode: bool = True):
    return full_spectrum_check(eq, cfg.params(), modes=cfg.eig_modes(),
                               bc_set=cfg.get("physics", "bc_set"),
                               s_samples=cfg.get("eig", "s_samples"), workers=workers,
                               want_eigenmode=want_eigenmode)


def cmd_classify(cfg: RunConfig, out: Path, workers: int, quiet: bool = False) -> dict:
    text = emit_config(cfg)
    eq = cfg.equilibrium()
    cls = eq.stability
    path = new_run_dir(out, "classify", text)
    result = {"classification": str(cls), "kind": type(cls).__name__,
              "equilibrium": eq.descriptor(), "config_hash": git_hash(text.encode())}
    (path / "result.json").write_text(_dumps(result))
    write_manifest(path)
    if not quiet:
        print(str(cls))
    result["run_dir"] = str(path)
    return result


def cmd_eig(cfg: RunConfig, out: Path, workers: int, quiet: bool = False) -> dict:
    text = emit_config(cfg)
    eq = cfg.equilibrium()
    res = _stability(cfg, eq, workers)
    path = new_run_dir(out, "eig", text)
    lines = ["m,s,alpha"]
    for pm in res.per_mode:
        m = "coupled" if pm.m is None else str(pm.m)
        lines.extend(f"{m},{_fmt(float(s))},{_fmt(float(al))}" for s, al in pm.alpha_curve)
    (path / "alpha.csv").write_text("\n".join(lines) + "\n")
    summary = res.summary()
    summary["per_mode"] = [{"m": pm.m, "s_star": pm.s_star, "defect": pm.defect} for pm in res.per_mode]
    (path / "summary.json").write_text(_dumps(summary))
    write_manifest(path)
    if not quiet:
        lam = summary["lambda"]
        print(f"{summary['classification']}  lambda={'none' if lam is None else f'{lam:.10g}'}"
              f"  mode={summary['mode']}")
    summary["run_dir"] = str(path)
    return summary


def cmd_simulate(cfg: RunConfig, out: Path, workers: int, quiet: bool = False) -> dict:
    text = emit_config(cfg)
    eq = cfg.equilibrium()
    stability = None
    if cfg.get("seed", "kind") == "eigenmode":
        stability = _stability(cfg, eq, workers)
    sim = cfg.sim_config(eq, stability, workers)
    path = new_run_dir(out, "simulate", text)
    snaps = path / "snapshots"
    csv_path = path / "timeseries.csv"
    status = {"status": "running"}
    with csv_path.open("w", newline="") as fh:
        header: list = []

        def on_row(row):
            if not header:
                header.extend(row.keys())
                fh.write(",".join(header) + "\n")
            fh.write(",".join(_fmt(row[c]) for c in header) + "\n")
            fh.flush()

        def on_snapshot(st):
            snaps.mkdir(exist_ok=True)
            save_state(snaps / f"step_{st.step:08d}", st)

        try:
            final, series = run(sim, on_row=on_row, on_snapshot=on_snapshot)
        except NumericalError as exc:
            series = getattr(exc, "series", TimeSeries())
            status = {"status": "failed", "error": f"{type(exc).__name__}: {exc}",
                      "rows": len(series)}
            final = None
            exc_out = exc
        else:
            exc_out = None
            status = {"status": "ok", "rows": len(series)}
    meta = dict(getattr(series, "meta", {}) or {})
    meta.update({"config_hash": git_hash(text.encode()), "version": __version__,
                 "seed_kind": cfg.get("seed", "kind")})
    if stability is not None:
        meta["lambda"] = stability.lam
    (path / "meta.json").write_text(_dumps(meta))
    if final is not None:
        save_state(path / "final", final)
        last = series[-1]
        status.update({"t": last["t"], "KE": last["KE"], "H1u": last["H1u"], "CFL": last["CFL"]})
    (path / "summary.json").write_text(_dumps(status))
    write_manifest(path)
    status["run_dir"] = str(path)
    if exc_out is not None:
        exc_out.run_dir = str(path)
        raise exc_out
    if not quiet:
        print(f"{path}  t={status['t']:.6g}  KE={status['KE']:.6e}  H1u={status['H1u']:.6e}")
    return status


def _check_entry(value, tol, ok=None):
    ok = bool(value <= tol) if ok is None else bool(ok)
    return {"value": value, "tol": tol, "pass": ok}


def build_report(run_dir: Path) -> dict:
    """Diagnostics of a ``simulate`` run directory from its stored files only."""
    cfg, _ = _load_run_config(run_dir / "config.ini")
    meta = json.loads((run_dir / "meta.json").read_text())
    series = read_csv((run_dir / "timeseries.csv").read_text(), meta)
    if len(series) == 0:
        raise ValidationError("timeseries.csv", "run produced no rows")
    tol = cfg.values["diagnose"]
    mode = meta.get("mode", cfg.get("time", "mode"))
    gamma, beta = meta["gamma_lyap"], meta["beta_lyap"]
    checks = {}
    bc = max(max(abs(r["bc_res_a"]), abs(r["bc_res_b"])) for r in series)
    checks["bc_residual"] = _check_entry(bc, tol["bc_tol"])
    cfl = max(r["CFL"] for r in series)
    checks["cfl"] = _check_entry(cfl, 0.8, cfl < 0.8)
    info = {"rows": len(series), "t_end": series[-1]["t"], "mode": mode}
    if mode == "nonlinear":
        checks["energy_identity"] = _check_entry(energy_identity_residual(series), tol["energy_tol"])
        lyap = lyapunov_check(series, gamma, beta, tol["lyap_tol"])
        checks["lyapunov_identity"] = _check_entry(lyap.combined_violation, tol["lyap_tol"])
        checks["lyapunov_monotone"] = _check_entry(lyap.monotone_violation, tol["lyap_tol"])
        checks["density_L2_drift"] = _check_entry(conservation_drift(series), tol["drift_tol"])
        info["asymptotics"] = asymptotics_report(series, gamma, beta, raise_on_drift=False)
        info["convergence_conditions"] = theorem16_conditions(series, gamma, beta, raise_on_drift=False)
    else:
        info["regularity"] = regularity_flags(series)
        if mode == "linear_polar":
            info["weighted_functional"] = weighted_functional_report(series)
    passed = all(c["pass"] for c in checks.values())
    return {"run": meta.get("config_hash"), "passed": passed, "checks": checks, "info": info}


def _markdown(report: dict) -> str:
    out = [f"# Run report `{report['run']}`", "", f"Overall: {'PASS' if report['passed'] else 'FAIL'}", "",
           "| check | value | tolerance | result |", "|---|---|---|---|"]
    for name, c in report["checks"].items():
        out.append(f"| {name} | {c['value']:.3e} | {c['tol']:.1e} | {'pass' if c['pass'] else 'FAIL'} |")
    out += ["", "## Details", "", "```json", json.dumps(report["info"], sort_keys=True, indent=2,
                                                      default=_json_default), "```", ""]
    return "\n".join(out)


def cmd_diagnose(run_dir: Path, quiet: bool = False) -> dict:
    if not (run_dir / "timeseries.csv").is_file():
        raise ValidationError("--run", f"{run_dir} is not a simulate run directory")
    report = build_report(run_dir)
    (run_dir / "report.json").write_text(_dumps(report))
    (run_dir / "report.md").write_text(_markdown(report))
    if not quiet:
        for name, c in report["checks"].items():
            print(f"{'PASS' if c['pass'] else 'FAIL'}  {name}: {c['value']:.3e} (tol {c['tol']:.1e})")
    return report


ACTIONS = {"classify": cmd_classify, "eig": cmd_eig, "simulate": cmd_simulate}


def cmd_sweep(cfg: RunConfig, out: Path, workers: int, param: str, values: list[str],
              action: str = "classify") -> list[dict]:
    sec, key = cfg.resolve_key(param)
    name = f"{sec}.{key}" if sec else key
    subcfgs = [cfg.with_overrides([f"{name}={v}"]) for v in values]
    text = emit_config(cfg) + f"# sweep {name} = {','.join(values)} ({action})\n"
    path = new_run_dir(out, "sweep", text)
    fn = ACTIONS[action]

    def one(c):
        try:
            res = fn(c, path, 1, quiet=True)
            return {"status": "ok", **res}
        except AnnulusError as exc:
            return {"status": f"error: {type(exc).__name__}: {exc}"}

    with ThreadPoolExecutor(max(1, workers)) as ex:
        results = list(ex.map(one, subcfgs))
    rows = []
    for v, res in zip(values, results):
        outcome = res.get("classification", res.get("status"))
        if action == "simulate" and res.get("status") == "ok":
            outcome = f"KE={res['KE']:.6e}"
        lam = res.get("lambda")
        rows.append({name: v, "result": outcome, "lambda": "" if lam is None else _fmt(float(lam)),
                     "run_dir": Path(res["run_dir"]).name if "run_dir" in res else ""})
    cols = [name, "result", "lambda", "run_dir"]
    lines = [",".join(cols)] + [",".join(str(r[c]) for c in cols) for r in rows]
    (path / "summary.csv").write_text("\n".join(lines) + "\n")
    width = max(len(name), *(len(str(r[name])) for r in rows))
    print(f"{name:<{width}}  result")
    for r in rows:
        print(f"{str(r[name]):<{width}}  {r['result']}" + (f"  lambda={r['lambda']}" if r["lambda"] else ""))
    return rows


# ---------------------------------------------------------------------------
# entry point


def _default_workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValidationError(WORKERS_ENV, f"expected an integer, got {raw!r}") from None
    if n < 1:
        raise ValidationError(WORKERS_ENV, "must be >= 1")
    return n


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="boussinesq-annulus",
        description="Stability analysis and simulation of stratified viscous flow in an annulus.",
        epilog=f"Exit codes: 0 ok, 2 invalid input, 3 numerical failure, 4 failed diagnostic. "
               f"Default worker count comes from ${WORKERS_ENV}.",
    )
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="configuration file")
        p.add_argument("--out", default="runs", help="parent directory for run directories (default: runs)")
        p.add_argument("--workers", type=int, default=None, help="worker threads")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value; KEY is section.key or a unique bare key")

    common(sub.add_parser("eig", help="growth rates and alpha(s) curves per azimuthal mode"))
    common(sub.add_parser("simulate", help="time integration with diagnostics time series"))
    common(sub.add_parser("classify", help="stability class of the configured equilibrium"))
    d = sub.add_parser("diagnose", help="check a simulate run directory and write its report")
    d.add_argument("run", nargs="?", help="run directory")
    d.add_argument("--run", dest="run_opt", help="run directory (alternative to the positional)")
    s = sub.add_parser("sweep", help="repeat a subcommand over values of one config key")
    common(s)
    s.add_argument("--param", required=True, help="key to vary (section.key or a unique bare key)")
    s.add_argument("--values", required=True, help="comma-separated values")
    s.add_argument("--action", choices=sorted(ACTIONS), default="classify")
    return ap


def dispatch(argv=None) -> int:
    """Run one command line; returns the process exit code."""
    ap = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    # let "--values -1,1" through: argparse would read "-1,1" as an option
    for i in range(len(argv) - 1):
        if argv[i] == "--values":
            argv[i:i + 2] = [f"--values={argv[i + 1]}"]
            break
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "diagnose":
            target = args.run or args.run_opt
            if not target:
                raise ValidationError("run", "diagnose needs a run directory")
            report = cmd_diagnose(Path(target))
            return EXIT_OK if report["passed"] else EXIT_DIAGNOSTIC
        workers = args.workers if args.workers is not None else _default_workers()
        if workers < 1:
            raise ValidationError("--workers", "must be >= 1")
        cfg, _ = _load_run_config(args.config)
        cfg = cfg.with_overrides(args.override)
        out = Path(args.out)
        if args.command == "sweep":
            values = [v.strip() for v in args.values.split(",") if v.strip()]
            if not values:
                raise ValidationError("--values", "need at least one value")
            cmd_sweep(cfg, out, workers, args.param, values, args.action)
        else:
            ACTIONS[args.command](cfg, out, workers)
        return EXIT_OK
    except NumericalError as exc:
        where = getattr(exc, "run_dir", None)
        print(f"numerical failure: {type(exc).__name__}: {exc}" + (f" (partial output in {where})" if where else ""),
              file=sys.stderr)
        return EXIT_NUMERICAL
    except (AnnulusError, ValueError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()

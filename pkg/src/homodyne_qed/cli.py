"""Command-line entry point: ``homodyne-qed {verify,evolve,sample,conditional,sme}``.

Configuration is a YAML file whose keys are checked strictly against the
dataclasses below; unknown keys are errors.  Results go to ``--output`` as
CSV (numeric series) or JSON, next to a ``manifest.json`` that records the
resolved configuration, seed, library versions and truncation diagnostics.

Exit codes: 0 success, 1 a verification check failed, 2 configuration
error, 3 numerical or truncation error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import itertools
import json
import math
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np
import scipy
import yaml

from . import __version__
from .conditional import block_trace_ratio, conditional_state, eigenvalue_ratio
from .conditional import real_beta_invariance, smooth_on_steady
from .extended import steady_low_rank
from .diffusive import SMEConfig, sme_ensemble
from .disentangle import check_corollary, check_theorem1, check_theorem2
from .dynamics import LindbladGenerator, build_rho_ss, evolve_unconditional
from .errors import (ConfigError, CostError, DomainError, StepSizeError, TruncationError,
                     ZeroProbability)
from .hilbert import (PM_BASIS, SystemParams, coherent_state, field_annihilator, ket_to_dm,
                      make_annihilator, make_atomic_ops, product_state, purity)
from .jumps import lemma1_residual, sample_ensemble

NUMERIC_ERRORS = (TruncationError, StepSizeError, CostError, ZeroProbability, DomainError,
                  OverflowError, FloatingPointError)


# Configuration ---------------------------------------------------------------

@dataclass
class ParamsConfig:
    g: float = 1.0
    E: float = 0.5
    beta: Any = 0.5
    gamma: float = 1.0
    n_fock: Any = 40
    tol: float = 1e-10
    leak_tol: float = 1e-9


@dataclass
class EvolveConfig:
    t_total: float = 1.0
    dt: float = 0.005
    rho0: Any = "steady"
    stride: int = 10


@dataclass
class SampleConfig:
    n_traj: int = 10
    seed: int = 0
    dt: float = 0.005
    t_total: float = 1.0
    rho0: Any = "steady"


@dataclass
class ConditionalConfig:
    record: Any = field(default_factory=list)
    record_file: Any = None
    dt_total: float = 0.4
    rho0: Any = "steady"
    ordering: str = "symmetric"
    precision: str = "double"
    ratio_form: str = "printed"


@dataclass
class VerifyConfig:
    checks: Any = field(default_factory=lambda: list(CHECKS))
    tolerance: Any = None
    times: Any = field(default_factory=lambda: [0.1, 0.5, 1.0])
    record: Any = field(default_factory=lambda: [1, 2, 1])
    dt_total: float = 0.5
    ratio_form: str = "corrected"


@dataclass
class SMESection:
    phi: float = 0.0
    eta: float = 1.0
    dt: float = 0.005
    n_traj: int = 10
    seed: int = 0
    stride: int = 20
    t_total: float = 1.0
    rho0: Any = "vacuum"
    drift: str = "euler"


@dataclass
class OutputConfig:
    path: str = "out"
    format: str = "csv"


@dataclass
class RunConfig:
    params: ParamsConfig = field(default_factory=ParamsConfig)
    evolve: EvolveConfig = field(default_factory=EvolveConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    conditional: ConditionalConfig = field(default_factory=ConditionalConfig)
    verify: VerifyConfig = field(default_factory=VerifyConfig)
    sme: SMESection = field(default_factory=SMESection)
    output: OutputConfig = field(default_factory=OutputConfig)
    base_dir: str = field(default=".", metadata={"internal": True})


def _coerce(value, kind: str, where):
    if kind == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        if not math.isfinite(value):
            raise ConfigError(f"{where}: must be finite")
        return float(value)
    if kind == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def _build(cls, data, where):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    known = {f.name: f for f in dataclasses.fields(cls) if not f.metadata.get("internal")}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}")
    obj = cls()
    for name, value in data.items():
        default = getattr(obj, name)
        if dataclasses.is_dataclass(default):
            setattr(obj, name, _build(type(default), value, f"{where}.{name}"))
        else:
            setattr(obj, name, _coerce(value, known[name].type, f"{where}.{name}"))
    return obj


def load_config(path: str | Path | None) -> RunConfig:
    """Parse a YAML config; ``None`` gives the defaults."""
    if path is None:
        return RunConfig()
    p = Path(path)
    try:
        data = yaml.safe_load(p.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {p}: {exc}") from exc
    cfg = _build(RunConfig, data, "config")
    cfg.base_dir = str(p.parent)
    return cfg


def parse_complex(value, where="value") -> complex:
    if isinstance(value, bool):
        raise ConfigError(f"{where}: expected a number")
    if isinstance(value, (int, float)):
        return complex(value)
    if isinstance(value, dict):
        if set(value) - {"re", "im"}:
            raise ConfigError(f"{where}: complex numbers take keys re and im")
        return complex(float(value.get("re", 0.0)), float(value.get("im", 0.0)))
    raise ConfigError(f"{where}: expected a number or {{re, im}}, got {value!r}")


def make_params(pc: ParamsConfig) -> SystemParams:
    n = pc.n_fock
    if n is not None and (isinstance(n, bool) or not isinstance(n, int)):
        raise ConfigError("params.n_fock must be an integer or null")
    try:
        return SystemParams(g=float(pc.g), E=float(pc.E), beta=parse_complex(pc.beta, "params.beta"),
                            gamma=float(pc.gamma), n_fock=n, tol=float(pc.tol),
                            leak_tol=float(pc.leak_tol))
    except TruncationError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"params: {exc}") from exc


_ATOMS = {"g": np.array([1, 0]), "e": np.array([0, 1]), "+": PM_BASIS[:, 0], "-": PM_BASIS[:, 1]}


def make_state(spec, params: SystemParams) -> np.ndarray:
    """``"steady"``, ``"vacuum"`` or ``{coherent: amp, atom: g|e|+|-}``."""
    if spec == "steady":
        return build_rho_ss(params)
    if spec == "vacuum":
        spec = {"coherent": 0.0, "atom": "g"}
    if isinstance(spec, dict):
        if set(spec) - {"coherent", "atom"}:
            raise ConfigError(f"rho0: unknown key(s) {sorted(set(spec) - {'coherent', 'atom'})}")
        atom = spec.get("atom", "g")
        if atom not in _ATOMS:
            raise ConfigError(f"rho0.atom must be one of {sorted(_ATOMS)}")
        amp = parse_complex(spec.get("coherent", 0.0), "rho0.coherent")
        vec = product_state(_ATOMS[atom], coherent_state(amp, params).vector)
        return ket_to_dm(vec)
    raise ConfigError(f"rho0: unrecognized state {spec!r}")


def parse_record(labels, where="record") -> tuple:
    if not isinstance(labels, list):
        raise ConfigError(f"{where}: expected a list of detector labels")
    out = []
    for item in labels:
        k = item.get("k") if isinstance(item, dict) else item
        if k not in (1, 2) or isinstance(k, bool):
            raise ConfigError(f"{where}: labels must be 1 or 2, got {item!r}")
        out.append(k)
    return tuple(out)


# Serialization ---------------------------------------------------------------

def fmt(x) -> str:
    """Round-trip decimal text for a real number."""
    return format(float(x), ".17g")


def _jsonable(x):
    if isinstance(x, (complex, np.complexfloating)):
        return {"re": float(x.real), "im": float(x.imag)}
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return float(x)
    if isinstance(x, np.ndarray):
        return [_jsonable(v) for v in x.tolist()]
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


def dumps_json(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=False) + "\n"


def write_table(path: Path, columns: list[str], rows: list[list], fmt_name: str) -> Path:
    """Write rows as CSV (17-digit decimals) or as a JSON list of objects."""
    if fmt_name == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in r])
        out = path.with_suffix(".csv")
        out.write_text(buf.getvalue())
    elif fmt_name == "json":
        out = path.with_suffix(".json")
        out.write_text(dumps_json([dict(zip(columns, r)) for r in rows]))
    else:
        raise ConfigError(f"unknown output format {fmt_name!r}")
    return out


def read_table(path: Path) -> tuple[list[str], list[list]]:
    """Inverse of ``write_table``; numeric cells come back as float."""
    path = Path(path)
    if path.suffix == ".json":
        rows = json.loads(path.read_text())
        cols = list(rows[0]) if rows else []
        return cols, [[r[c] for c in cols] for r in rows]
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        cols = next(reader)
        rows = []
        for r in reader:
            parsed = []
            for v in r:
                try:
                    parsed.append(int(v))
                except ValueError:
                    try:
                        parsed.append(float(v))
                    except ValueError:
                        parsed.append(v)
            rows.append(parsed)
    return cols, rows


OBS_COLUMNS = ["time", "tr", "purity", "n_mean", "sz", "a_re", "a_im"]


class _Observables:
    def __init__(self, params: SystemParams):
        a = make_annihilator(params)
        self.a = a
        self.n = a.conj().T @ a
        self.sz = make_atomic_ops(params).sigma_z

    def __call__(self, t, rho) -> list:
        am = complex(np.einsum("ij,ji->", self.a, rho))
        return [float(t), float(np.trace(rho).real), purity(rho),
                float(np.einsum("ij,ji->", self.n, rho).real),
                float(np.einsum("ij,ji->", self.sz, rho).real), am.real, am.imag]


def leakage_report(params: SystemParams) -> dict:
    alpha = params.alpha
    out = {"n_fock": params.n_fock, "alpha": alpha}
    try:
        out["steady_leakage"] = coherent_state(alpha, params).leakage
    except TruncationError as exc:
        out["steady_leakage"] = str(exc)
    return out


def write_manifest(outdir: Path, command: str, cfg: RunConfig, params: SystemParams | None,
                   files: list[Path], extra: dict | None = None) -> Path:
    man = {
        "command": command,
        "config": dataclasses.asdict(cfg),
        "versions": {"homodyne_qed": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "files": [f.name for f in files],
    }
    man["config"].pop("base_dir", None)
    if params is not None:
        man["truncation"] = leakage_report(params)
    if extra:
        man.update(extra)
    path = outdir / "manifest.json"
    path.write_text(dumps_json(man))
    return path


# Commands ---------------------------------------------------------------------

def cmd_evolve(cfg: RunConfig, outdir: Path) -> int:
    params = make_params(cfg.params)
    ev = cfg.evolve
    rho0 = make_state(ev.rho0, params)
    obs = _Observables(params)
    rows = [obs(0.0, rho0)]
    gen = LindbladGenerator(params)
    counter = itertools.count(1)
    stride = max(1, ev.stride)

    def record(t, rho):
        if next(counter) % stride == 0:
            rows.append(obs(t, rho))

    res = evolve_unconditional(rho0, ev.t_total, ev.dt, gen, callback=record)
    if res.steps and res.steps % stride:
        rows.append(obs(res.t, res.rho))
    f = write_table(outdir / "evolve", OBS_COLUMNS, rows, cfg.output.format)
    write_manifest(outdir, "evolve", cfg, params, [f],
                   {"error_estimate": res.error_estimate, "max_trace_drift": res.max_trace_drift})
    return 0


def cmd_sample(cfg: RunConfig, outdir: Path) -> int:
    params = make_params(cfg.params)
    sc = cfg.sample
    rho0 = make_state(sc.rho0, params)
    ens = sample_ensemble(rho0, sc.t_total, sc.dt, sc.n_traj, sc.seed, params)
    recs = [{"index": i, "log_weight": float(ens.log_weights[i]), "record": r.to_json()}
            for i, r in enumerate(ens.records)]
    rec_path = outdir / "records.json"
    rec_path.write_text(dumps_json(recs))
    obs = _Observables(params)
    rows = [[i, r.m, float(ens.log_weights[i])] + obs(sc.t_total, ens.state(i))[1:]
            for i, r in enumerate(ens.records)]
    f = write_table(outdir / "sample", ["index", "m", "log_weight"] + OBS_COLUMNS[1:], rows,
                    cfg.output.format)
    write_manifest(outdir, "sample", cfg, params, [rec_path, f], {"seed": sc.seed})
    return 0


def _load_record(cc: ConditionalConfig, base: Path) -> tuple:
    if cc.record_file is not None:
        p = Path(cc.record_file)
        if not p.is_absolute():
            p = base / p
        if not p.exists():
            raise ConfigError(f"conditional.record_file {p} does not exist")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"record file {p}: {exc}") from exc
        if isinstance(data, dict):
            data = data.get("record", [])
        return parse_record(data, "conditional.record_file")
    return parse_record(cc.record, "conditional.record")


def cmd_conditional(cfg: RunConfig, outdir: Path) -> int:
    params = make_params(cfg.params)
    cc = cfg.conditional
    labels = _load_record(cc, Path(cfg.base_dir))
    if cc.precision not in ("double", "extended"):
        raise ConfigError("conditional.precision must be double or extended")
    if cc.precision == "extended" and cc.rho0 == "steady":
        rho0 = steady_low_rank(params)
    else:
        rho0 = make_state(cc.rho0, params)
    res = conditional_state(rho0, labels, cc.dt_total, params, ordering=cc.ordering,
                            precision=cc.precision)
    obs = _Observables(params)
    ratio_block = block_trace_ratio(res.rho_c, params.n_fock)
    cols = ["m", "weight", "log_weight"] + OBS_COLUMNS[1:] + ["lambda1", "lambda2", "ratio_block"]
    row = [len(labels), res.weight, res.log_weight] + obs(cc.dt_total, res.rho_c)[1:]
    row += [ratio_block / (1 + ratio_block), 1 / (1 + ratio_block), ratio_block]
    if params.beta.real == 0 and params.beta.imag != 0 and params.g:
        cols.append("ratio_formula")
        row.append(eigenvalue_ratio(labels, cc.dt_total, params, form=cc.ratio_form))
    f = write_table(outdir / "conditional", cols, [row], cfg.output.format)
    write_manifest(outdir, "conditional", cfg, params, [f], {"record": list(labels)})
    return 0


def cmd_sme(cfg: RunConfig, outdir: Path) -> int:
    params = make_params(cfg.params)
    s = cfg.sme
    sme_cfg = SMEConfig(phi=s.phi, eta=s.eta, dt=s.dt, n_traj=s.n_traj, seed=s.seed, stride=s.stride,
                        drift=s.drift)
    gen = LindbladGenerator(params)
    rho0 = make_state(s.rho0, params)
    res = sme_ensemble(rho0, s.t_total, sme_cfg, gen)
    obs = _Observables(params)
    rows = [obs(t, res.states[j].mean(axis=0)) for j, t in enumerate(res.times)]
    f1 = write_table(outdir / "sme_mean", OBS_COLUMNS, rows, cfg.output.format)
    cur = [[i, (step + 1) * s.dt, res.current[i, step]]
           for i in range(res.current.shape[0]) for step in range(res.current.shape[1])]
    f2 = write_table(outdir / "photocurrent", ["traj", "time", "current"], cur, cfg.output.format)
    write_manifest(outdir, "sme", cfg, params, [f1, f2],
                   {"seed": s.seed, "max_purity": res.max_purity})
    return 0


# Verification -----------------------------------------------------------------

def _slope(taus, vals) -> float:
    return float(np.polyfit(np.log(taus), np.log(vals), 1)[0])


def _check_lemma1(params, vc):
    taus = np.logspace(-4, -2, 7)
    ss = build_rho_ss(params)
    return [("lemma1_slope", abs(_slope(taus, [lemma1_residual(t, ss, params) for t in taus]) - 2.0),
             0.1)]


def _check_t1(params, vc):
    return [(f"theorem1_t={t:g}", check_theorem1(t, params).residual, 1e-8) for t in vc.times]


def _check_t2(params, vc):
    return [(f"theorem2_k={k}_t={t:g}", check_theorem2(k, t, params).residual, 1e-8)
            for t in vc.times for k in (1, 2)]


def _check_cor(params, vc):
    return [(f"corollary_t={t:g}", check_corollary(t, params).residual, 1e-8) for t in vc.times]


def _check_lemma2(params, vc):
    out = []
    for t in vc.times:
        sc = smooth_on_steady(t, params)
        out.append((f"lemma2_t={t:g}", sc.residual, 1e-6))
        out.append((f"lemma2_scalar_t={t:g}", sc.scalar_residual, 1e-14 * max(1.0, abs(params.alpha))))
    return out


def _check_real_beta(params, vc):
    p = params.replace(beta=params.beta.real if params.beta.real else 0.5)
    chk = real_beta_invariance(parse_record(vc.record), vc.dt_total, p)
    return [("real_beta_distance", chk.distance, 1e-9), ("real_beta_scalar", chk.scalar_error, 1e-9)]


def _check_ratio(params, vc):
    beta0 = params.beta.imag or abs(params.beta) or 0.5
    p = params.replace(beta=1j * beta0)
    labels = parse_record(vc.record)
    res = conditional_state(steady_low_rank(p), labels, vc.dt_total, p, precision="extended")
    block = block_trace_ratio(res.rho_c, p.n_fock)
    formula = eigenvalue_ratio(labels, vc.dt_total, p, form=vc.ratio_form)
    return [(f"ratio_{vc.ratio_form}", abs(formula - block) / abs(block), 1e-10)]


CHECKS: dict[str, Callable] = {
    "theorem1": _check_t1,
    "theorem2": _check_t2,
    "corollary": _check_cor,
    "lemma1": _check_lemma1,
    "lemma2": _check_lemma2,
    "real_beta": _check_real_beta,
    "ratio": _check_ratio,
}


def cmd_verify(cfg: RunConfig, outdir: Path) -> int:
    vc = cfg.verify
    if not isinstance(vc.checks, list) or any(c not in CHECKS for c in vc.checks):
        raise ConfigError(f"verify.checks must be a list drawn from {sorted(CHECKS)}")
    if vc.ratio_form not in ("printed", "corrected"):
        raise ConfigError("verify.ratio_form must be printed or corrected")
    tol_override = None if vc.tolerance is None else float(vc.tolerance)
    rows = []
    params = None
    for name in vc.checks:
        try:
            params = make_params(cfg.params)
            results = CHECKS[name](params, vc)
        except NUMERIC_ERRORS as exc:
            raise type(exc)(f"check {name}: {exc}") from exc
        for label, residual, tol in results:
            tol = tol if tol_override is None else tol_override
            rows.append([name, label, float(residual), float(tol),
                         "pass" if residual < tol else "fail"])
    f = write_table(outdir / "verify", ["check", "case", "residual", "tolerance", "status"], rows,
                    cfg.output.format)
    write_manifest(outdir, "verify", cfg, params, [f])
    for r in rows:
        print(f"{r[4]:4s}  {r[1]:28s} residual={r[2]:.3e}  tol={r[3]:.1e}")
    return 0 if all(r[4] == "pass" for r in rows) else 1


COMMANDS = {"verify": cmd_verify, "evolve": cmd_evolve, "sample": cmd_sample,
            "conditional": cmd_conditional, "sme": cmd_sme}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="homodyne-qed",
                                 description="Driven atom-cavity homodyne detection simulator")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", type=Path, default=None, help="YAML configuration file")
    ap.add_argument("--output", type=Path, default=None, help="output directory")
    ap.add_argument("--seed", type=int, default=None, help="overrides sample/sme seeds")
    ap.add_argument("--format", choices=("csv", "json"), default=None)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.sample.seed = args.seed
            cfg.sme.seed = args.seed
        if args.format is not None:
            cfg.output.format = args.format
        if cfg.output.format not in ("csv", "json"):
            raise ConfigError(f"output.format must be csv or json, got {cfg.output.format!r}")
        outdir = args.output if args.output is not None else Path(cfg.output.path)
        outdir.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, outdir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NUMERIC_ERRORS as exc:
        print(f"numerical error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

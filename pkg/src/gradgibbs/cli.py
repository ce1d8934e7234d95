"""Command-line orchestration: configs, experiment subcommands and run manifests.

Every subcommand reads one JSON config, writes its outputs into ``--out``
and finishes with ``run_manifest.json`` (config echo, seed, worker count,
timings, sha256 of every output, status).  Exit codes: 0 ok, 2 config
error, 3 numerical error, 4 acceptance failure.  Flags can also be given
through ``GRADGIBBS_CONFIG``, ``GRADGIBBS_SEED``, ``GRADGIBBS_WORKERS`` and
``GRADGIBBS_OUT``; explicit flags win.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .errors import ConvergenceError, InconsistencyError, NumericalError, PreconditionError, ResolutionError
from .homogenize import EffectiveMatrix, corrector, effective_matrix_from_corrector
from .lattice import ConductanceField, Torus, grad, integrate
from .potential import MixtureMeasure
from .sampler import (
    ChainConfig,
    chain_conductances,
    chain_diagnostics,
    iid_conductances,
    read_archive,
    run_chain_states,
    write_archive,
)
from .scaling import (
    TestFunctionSpec,
    discretize,
    gff_report_from_values,
    h_norm_sq,
    inverse_laplacian_form,
    l2_norm_sq,
    normalize_amplitude,
    quadratic_form_limit_scan,
    report_json,
    rows_to_csv,
)
from .walk import annealed_q_estimate, derivative_decay_check

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_ACCEPTANCE = 0, 2, 3, 4
ENV_PREFIX = "GRADGIBBS_"
COMMANDS = ("sample", "homogenize", "walk-decay", "corrector", "verify-gff", "report")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


def load_schema(name: str) -> dict:
    return json.loads(resources.files("gradgibbs").joinpath("schemas", f"{name}.schema.json").read_text())


def validate_report(report: dict) -> None:
    jsonschema.validate(report, load_schema("report"))


def load_config(path) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON in {path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    validate_config(cfg)
    return cfg


def validate_config(cfg) -> None:
    try:
        jsonschema.validate(cfg, load_schema("config"))
    except jsonschema.ValidationError as exc:
        where = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config field '{where}': {exc.message}") from exc


def _require(cfg, *sections):
    for s in sections:
        if s not in cfg:
            raise ConfigError(f"config field '{s}' is required for this command")


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    workers: int
    version: str = __version__
    timings: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    status: str = "running"
    message: str = ""

    def write(self, out: Path) -> None:
        self.outputs = {
            p.name: hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(out.iterdir())
            if p.is_file() and p.name != "run_manifest.json"
        }
        (out / "run_manifest.json").write_text(json.dumps(asdict(self), indent=2))


class _Timer:
    def __init__(self, manifest: RunManifest):
        self.manifest = manifest

    def __call__(self, stage):
        timer = self

        class _Stage:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                timer.manifest.timings[stage] = timer.manifest.timings.get(stage, 0.0) + time.perf_counter() - self.t0

        return _Stage()


def _check(name, passed, value=None, tolerance=None, detail=""):
    def num(v):
        return None if v is None or not math.isfinite(float(v)) else float(v)

    return {"name": name, "passed": bool(passed), "value": num(value), "tolerance": num(tolerance), "detail": detail}


def _report(command, cfg, checks, results) -> dict:
    status = "ok" if all(c["passed"] for c in checks) else "acceptance_failure"
    rep = json.loads(report_json({"command": command, "version": __version__, "status": status, "config": cfg, "checks": checks, "results": results}))
    validate_report(rep)
    return rep


# --- plans: everything that can fail on bad input happens before any output -------------


def _model(cfg) -> MixtureMeasure:
    m = cfg["model"]
    try:
        return MixtureMeasure.from_dict(m, **({"floor": m["floor"]} if "floor" in m else {}))
    except ValueError as exc:
        raise ConfigError(f"config field 'model': {exc}") from exc


def _torus(cfg) -> Torus:
    return Torus(cfg["torus"]["d"], cfg["torus"]["L"])


def _chain_config(cfg, seed) -> ChainConfig:
    ch = cfg.get("chain", {})
    try:
        return ChainConfig(
            _model(cfg), _torus(cfg),
            burn_in=ch.get("burn_in", 100), thinning=ch.get("thinning", 1), seed=seed,
            phi_update_mode=ch.get("phi_update_mode", "exact"), heat_bath_sweeps=ch.get("heat_bath_sweeps", 1),
        )
    except PreconditionError as exc:
        raise ConfigError(f"config field 'chain': {exc}") from exc


def _archive_path(value, field_name) -> Path:
    p = Path(value)
    if not (p / "samples.bin").is_file():
        raise ConfigError(f"config field '{field_name}': no sample archive at {p}")
    return p


def _environment_plan(cfg, seed):
    _require(cfg, "environments")
    env = cfg["environments"]
    src = env["source"]
    n = env.get("n", 8)
    if src == "archive":
        path = _archive_path(env.get("archive", ""), "environments.archive")
        return lambda: [k for _, k in read_archive(path)][:n]
    _require(cfg, "torus")
    torus = _torus(cfg)
    if src == "constant":
        value = env.get("value", 1.0)
        return lambda: [ConductanceField.constant(torus, value)] * n
    _require(cfg, "model")
    if src == "iid":
        rho = _model(cfg)
        return lambda: iid_conductances(rho, torus, n, seed)
    chain = _chain_config(cfg, seed)
    return lambda: chain_conductances(chain, n)


def _oracle_q(cfg):
    """Exact effective matrix when one is known: constant conductance or a one-dimensional chain."""
    env = cfg["environments"]
    if env["source"] == "constant" and "torus" in cfg:
        return 2 * env.get("value", 1.0) * np.eye(cfg["torus"]["d"])
    if env["source"] == "iid" and "model" in cfg and cfg.get("torus", {}).get("d") == 1:
        rho = _model(cfg)
        return np.array([[2 / float(np.sum(rho.weights / rho.kappa))]])
    return None


# --- commands -------------------------------------------------------------------------


def cmd_sample(cfg, seed, workers, out, timer):
    _require(cfg, "model", "torus")
    chain = _chain_config(cfg, seed)
    n = cfg.get("chain", {}).get("n_samples", 100)

    def execute():
        with timer("chain"):
            samples = ((s.sweep_count, grad(s.phi), s.kappa) for s in run_chain_states(chain, n_samples=n))
            manifest = write_archive(out, chain, samples)
        checks = [_check("sample_count", len(manifest["sweep_indices"]) == n, len(manifest["sweep_indices"]), n)]
        return _report("sample", cfg, checks, {"diagnostics": manifest["diagnostics"], "n_samples": n})

    return execute


def cmd_corrector(cfg, seed, workers, out, timer):
    envs_of = _environment_plan(cfg, seed)
    tol = cfg.get("homogenize", {}).get("tol", 1e-10)

    def execute():
        with timer("environments"):
            envs = envs_of()
        with timer("corrector"):
            cors = [corrector(k, tol=tol) for k in envs]
            q = effective_matrix_from_corrector(cors, workers=workers)
        for i, c in enumerate(cors):
            c.save(out / f"corrector_{i:03d}.bin")
        worst = max(c.residual for c in cors)
        checks = [_check("harmonicity_residual", worst <= 1e-8, worst, 1e-8)]
        return _report("corrector", cfg, checks, {"corrector": q.to_dict(), "residuals": [c.residual for c in cors]})

    return execute


def q_discrepancy(a, b) -> float:
    """Largest entrywise difference measured in units of ``sqrt(q_ii q_jj)`` of ``b``."""
    a, b = np.asarray(a), np.asarray(b)
    scale = np.sqrt(np.outer(np.diag(b), np.diag(b)))
    return float(np.max(np.abs(a - b) / scale))


def cmd_homogenize(cfg, seed, workers, out, timer):
    envs_of = _environment_plan(cfg, seed)
    h = cfg.get("homogenize", {})
    t, n_paths, rtol = h.get("t", 20.0), h.get("n_paths", 200), h.get("rtol", 0.05)
    oracle = _oracle_q(cfg)

    def execute():
        with timer("environments"):
            envs = envs_of()
        with timer("corrector"):
            qc = effective_matrix_from_corrector(envs, workers=workers)
        with timer("walk"):
            qw = annealed_q_estimate(envs, t, len(envs), n_paths, seed=seed)
        disc = q_discrepancy(qw.q, qc.q)
        checks = [_check("estimators_agree", disc <= rtol, disc, rtol)]
        results = {"corrector": qc.to_dict(), "walk": qw.to_dict(), "discrepancy": disc}
        if oracle is not None:
            results["oracle"] = oracle.tolist()
            for name, q in (("corrector", qc), ("walk", qw)):
                err = q_discrepancy(q.q, oracle)
                checks.append(_check(f"{name}_matches_oracle", err <= rtol, err, rtol))
        return _report("homogenize", cfg, checks, results)

    return execute


def cmd_walk_decay(cfg, seed, workers, out, timer):
    envs_of = _environment_plan(cfg, seed)
    _require(cfg, "walk_decay")
    wd = cfg["walk_decay"]
    times = wd["times"]
    kind = wd.get("kind", "mixed")
    tol = wd.get("slope_tol", 0.15)

    def execute():
        with timer("environments"):
            envs = envs_of()
        d = envs[0].torus.d
        with timer("heat_kernels"):
            fit = derivative_decay_check(envs, times, len(envs), seed=seed, kind=kind)
        (out / "decay.csv").write_text(fit.to_csv())
        target = -(d / 2 + 1)
        checks = [_check("decay_slope", abs(fit.slope - target) <= tol, fit.slope, tol, f"target {target}")]
        results = {"slope": fit.slope, "slope_se": fit.slope_se, "c1": fit.c1, "kind": kind, "target": target, "n_env": fit.n_env}
        return _report("walk-decay", cfg, checks, results)

    return execute


DEFAULT_TEST_FUNCTIONS = [{"name": "radial", "radii": [0.45], "target_g": 1.5}]


def _test_function_specs(cfg, d):
    out = []
    for i, tf in enumerate(cfg["gff"].get("test_functions", DEFAULT_TEST_FUNCTIONS)):
        try:
            spec = TestFunctionSpec(d, tuple(tf["radii"]), tf.get("theta", 0.0), 1.0, tf.get("center"))
        except ValueError as exc:
            raise ConfigError(f"config field 'gff.test_functions.{i}': {exc}") from exc
        out.append((tf.get("name", f"f{i}"), spec, tf.get("target_g", 1.5)))
    return out


def cmd_verify_gff(cfg, seed, workers, out, timer):
    _require(cfg, "model", "torus", "gff")
    g = cfg["gff"]
    torus = _torus(cfg)
    rho = _model(cfg)
    eps = g.get("epsilon", 1 / torus.L)
    q_scale = g.get("q_scale", 1.0)
    allowance = g.get("allowance", 0.05)
    specs = _test_function_specs(cfg, torus.d)
    try:
        unit = [discretize(s, torus, eps) for _, s, _ in specs]
    except ResolutionError as exc:
        raise ConfigError(f"config field 'gff.epsilon': {exc}") from exc
    end_to_end = g.get("end_to_end", "archive" not in g)
    if end_to_end:
        chain = _chain_config(cfg, seed)
        n = cfg.get("chain", {}).get("n_samples", 1000)
        n_q = g.get("q_envs", 8)
    else:
        archive = _archive_path(g["archive"], "gff.archive")
        if "q_report" not in g or not Path(g["q_report"]).is_file():
            raise ConfigError("config field 'gff.q_report': a q report file is required with an archive")
        q_path = Path(g["q_report"])

    def execute():
        with timer("samples"):
            if end_to_end:
                stride = max(n // n_q, 1)
                vals, q_envs = [], []
                for i, s in enumerate(run_chain_states(chain, n_samples=n)):
                    vals.append([f.values @ s.phi.phi for f in unit])
                    if i % stride == 0 and len(q_envs) < n_q:
                        q_envs.append(s.kappa)
            else:
                vals, q_envs = [], []
                for eta, kappa in read_archive(archive):
                    phi = integrate(eta).phi
                    vals.append([f.values @ phi for f in unit])
                    q_envs.append(kappa)
            vals = np.array(vals)
        with timer("effective_matrix"):
            if end_to_end:
                q_hat = effective_matrix_from_corrector(q_envs, workers=workers)
            else:
                data = json.loads(q_path.read_text())
                q_hat = EffectiveMatrix.from_dict(data.get("results", data).get("corrector", data))
        q_used = q_scale * q_hat.q
        checks, reports, scans = [], {}, {}
        with timer("comparison"):
            for (name, spec, target_g), column in zip(specs, vals.T):
                scaled = normalize_amplitude(spec, target_g, q_hat.q)
                rep = gff_report_from_values(column * scaled.amplitude, scaled, eps, q_used, allowance)
                reports[name] = rep.to_dict()
                checks.append(_check(f"gff[{name}]", rep.discrepancy <= 3 * rep.re_se + allowance, rep.discrepancy, 3 * rep.re_se + allowance))
                checks.append(_check(f"imaginary[{name}]", abs(rep.im) <= 3 * rep.im_se, abs(rep.im), 3 * rep.im_se))
                lhs = h_norm_sq(scaled.rescaled(eps))
                rhs = eps**2 * l2_norm_sq(scaled) + inverse_laplacian_form(scaled)
                checks.append(_check(f"h_norm_identity[{name}]", abs(lhs / rhs - 1) <= 1e-6, abs(lhs / rhs - 1), 1e-6))
        with timer("form_scan"):
            eps_list = [e for e in g.get("scan_epsilons", [8 * eps, 4 * eps, 2 * eps, eps]) if e * torus.L >= 1]
            c = 1.25 / rho.kappa.min()
            worst = 0.0
            for name, spec, target_g in specs:
                rows = quadratic_form_limit_scan(q_envs, normalize_amplitude(spec, target_g, q_hat.q), eps_list, q=q_hat.q)
                scans[name] = [asdict(r) for r in rows]
                (out / f"form_scan_{name}.csv").write_text(rows_to_csv(rows))
                worst = max(worst, max(r.max_ratio for r in rows))
            checks.append(_check("form_bound", worst <= c, worst, c))
        results = {"q_hat": q_hat.to_dict(), "q_scale": q_scale, "q_used": q_used.tolist(), "n_samples": len(vals), "gff": reports, "form_scans": scans}
        return _report("verify-gff", cfg, checks, results)

    return execute


def cmd_report(cfg, seed, workers, out, timer):
    inputs = cfg.get("report", {}).get("inputs")
    if inputs is None:
        if not out.is_dir():
            raise ConfigError(f"no report inputs given and output directory {out} does not exist")
        inputs = [str(p) for p in sorted(out.glob("*.json")) if p.name not in ("report.json", "run_manifest.json", "manifest.json")]
    reports = []
    for p in inputs:
        try:
            rep = json.loads(Path(p).read_text())
            validate_report(rep)
        except (OSError, json.JSONDecodeError, jsonschema.ValidationError) as exc:
            raise ConfigError(f"report input {p} is not a valid report: {exc}") from exc
        reports.append((p, rep))

    def execute():
        checks = [
            dict(c, name=f"{rep['command']}:{c['name']}")
            for _, rep in reports
            for c in rep["checks"]
        ]
        for c in checks:
            print(f"{'PASS' if c['passed'] else 'FAIL'} {c['name']}")
        return _report("report", cfg, checks, {"inputs": [p for p, _ in reports]})

    return execute


HANDLERS = {
    "sample": cmd_sample,
    "homogenize": cmd_homogenize,
    "walk-decay": cmd_walk_decay,
    "corrector": cmd_corrector,
    "verify-gff": cmd_verify_gff,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    env = os.environ
    parser = argparse.ArgumentParser(prog="gradgibbs", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=env.get(ENV_PREFIX + "CONFIG"), help="JSON configuration file")
        p.add_argument("--seed", type=int, default=_env_int("SEED"), help="root seed (overrides the config)")
        p.add_argument("--workers", type=int, default=_env_int("WORKERS") or 1, help="worker processes")
        p.add_argument("--out", default=env.get(ENV_PREFIX + "OUT", "out"), help="output directory")
    return parser


def _env_int(name):
    value = os.environ.get(ENV_PREFIX + name)
    return int(value) if value not in (None, "") else None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    try:
        if args.config is None:
            cfg = {}
            if args.command != "report":
                raise ConfigError("--config is required")
        else:
            cfg = load_config(args.config)
        seed = args.seed if args.seed is not None else cfg.get("seed", 0)
        if args.workers < 1:
            raise ConfigError("--workers must be at least 1")
        manifest = RunManifest(args.command, cfg, seed, args.workers)
        execute = HANDLERS[args.command](cfg, seed, args.workers, out, _Timer(manifest))
    except (ConfigError, PreconditionError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out.mkdir(parents=True, exist_ok=True)
    try:
        report = execute()
    except PreconditionError as exc:
        return _fail(manifest, out, "config_error", exc, EXIT_CONFIG)
    except (NumericalError, ConvergenceError, ResolutionError, InconsistencyError, FloatingPointError) as exc:
        return _fail(manifest, out, "numerical_error", exc, EXIT_NUMERICAL)
    (out / f"{args.command.replace('-', '_')}.json").write_text(json.dumps(report, indent=2))
    manifest.status = report["status"]
    manifest.write(out)
    for c in report["checks"]:
        if not c["passed"]:
            print(f"FAIL {c['name']}: value {c['value']} tolerance {c['tolerance']}", file=sys.stderr)
    return EXIT_OK if report["status"] == "ok" else EXIT_ACCEPTANCE


def _fail(manifest, out, status, exc, code) -> int:
    print(f"{status.replace('_', ' ')}: {exc}", file=sys.stderr)
    manifest.status = status
    manifest.message = str(exc)
    manifest.write(out)
    return code


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()

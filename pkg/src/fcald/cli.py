"""``fcald`` command line: synthetic truth, DN campaigns, verification and reconstruction.

Every command reads one JSON config and writes into the output directory
(``--out``, else ``$FCALD_OUT``, else the config's ``out``, else
``fcald_out``).  Reports contain only deterministic numbers; wall-clock
timings go into a separate ``<command>_timings.json``.

Exit codes: 0 pass, 2 threshold failure, 3 solver failure, 4 config or
dataset error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig
from .dnmap import DatasetDN, DNDataset, LiveDN, RecordingDN, dataset_digest, default_jobs
from .errors import (ConfigError, DatasetError, DomainError, ExtractionError, IllPosedError, SmallnessError,
                     SolverError)
from .forward import solve_semilinear
from .grid import boundary_index, restrict_mask
from .hol import verify_identity
from .io import read_field_csv, write_field_csv, write_json, write_pgm, write_rows_csv
from .nonlinearity import NonlinearitySpec, PowerTerm
from .profiles import make_boundary, make_field
from .reconstruction import l2_norm, recover_full, recover_partial, relative_l2, staged_recovery

log = logging.getLogger("fcald")

EXIT_PASS, EXIT_THRESHOLD, EXIT_SOLVER, EXIT_CONFIG = 0, 2, 3, 4
DATASET = "dn.jsonl"
SPEC_FILE = "spec.json"


class Run:
    """Per-invocation state owned by the orchestrator."""

    def __init__(self, command: str, cfg: ExperimentConfig, out: Path, jobs: int, method: str | None = None):
        self.command, self.cfg, self.out, self.jobs, self.method = command, cfg, out, jobs, method
        self.timings: dict[str, float] = {}
        self.failures: list[dict] = []
        self.metrics: dict[str, float] = {}

    @contextmanager
    def phase(self, name: str):
        t = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - t

    def check(self, name: str, value, limit, op: str = "<=") -> bool:
        value = float(value)
        ok = value <= limit if op == "<=" else value >= limit
        self.metrics[name] = value
        if not ok:
            self.failures.append({"check": name, "value": value, "threshold": limit, "op": op})
        return ok

    @property
    def passed(self) -> bool:
        return not self.failures

    def report(self, results: dict) -> dict:
        return {"command": self.command, "version": __version__, "name": self.cfg.name, "seed": self.cfg.seed,
                "config": self.cfg.data, "config_fingerprint": self.cfg.fingerprint(), "passed": self.passed,
                "failures": self.failures, "metrics": self.metrics, "results": results,
                "timings_file": f"{self.stem}_timings.json"}

    @property
    def stem(self) -> str:
        return self.command.replace("-", "_")

    def finish(self, results: dict) -> int:
        write_json(self.out / f"{self.stem}_report.json", self.report(results))
        write_json(self.out / f"{self.stem}_timings.json",
                   {k: round(v, 6) for k, v in self.timings.items()} | {"jobs": self.jobs})
        for f in self.failures:
            log.error("threshold failed: %s = %.6g (%s %.6g)", f["check"], f["value"], f["op"], f["threshold"])
        return EXIT_PASS if self.passed else EXIT_THRESHOLD


# ----------------------------------------------------------------------------
# shared helpers


def _mask(run: Run):
    sel = run.cfg.mask_selector
    if sel == "all":
        return None
    return restrict_mask(boundary_index(run.cfg.grid()), sel)


def load_truth(run: Run, grid=None) -> NonlinearitySpec:
    """Ground-truth spec written by ``synth``; only measurement and error steps call this."""
    import json

    path = run.out / SPEC_FILE
    if not path.exists():
        raise ConfigError(f"{path} not found; run `fcald synth` first")
    meta = json.loads(path.read_text(encoding="utf-8"))
    grid = grid or run.cfg.grid()
    terms, refs = [], []
    for t in meta["terms"]:
        g2, q = read_field_csv(run.out / t["q"])
        if g2.fingerprint() != grid.fingerprint():
            raise ConfigError(f"{t['q']} was synthesized on a different grid")
        q_neg = read_field_csv(run.out / t["q_neg"])[1] if t.get("q_neg") else None
        terms.append(PowerTerm(q, float(t["r"]), q_neg))
        refs.append(t["q"])
    return NonlinearitySpec(tuple(terms), tuple(refs))


def _identity_probes(run: Run, grid):
    ident = run.cfg.data["identity"]
    f0 = make_boundary(grid, ident.get("f0", "constant:1"))
    fs = [make_boundary(grid, p) for p in ident["directions"]] + [make_boundary(grid, ident["test"])]
    return f0, fs


def _identity_exponent(run: Run) -> float:
    rs = run.cfg.exponents()
    if len(rs) != 1:
        raise ConfigError("verify-identity needs a single-term nonlinearity")
    return rs[0]


def _run_identity(run: Run, access, q):
    ident = run.cfg.data["identity"]
    r = _identity_exponent(run)
    f0, fs = _identity_probes(run, access.grid)
    return verify_identity(access, q, r, f0, fs, run.cfg.ladder(), ident.get("threshold", 0.05),
                           n_terms=ident.get("n_terms", 2))


def _run_recovery(run: Run, access, method: str):
    rec = run.cfg.recovery()
    ladder = run.cfg.ladder()
    rs = run.cfg.recovery_exponents()
    if method == "full":
        field, est = recover_full(access, rs[0], rec.get("m", 4), ladder, rec.get("shape", "disc"),
                                  rec.get("n_terms", 2), rec.get("dispersion", "discrete"))
        return [field], est.to_json()
    if method == "partial":
        res = recover_partial(access, rs[0], _mask(run), rec.get("basis", "bspline"), rec.get("d", 25),
                              rec.get("n_pairs", 200), rec.get("lam"), rec.get("lam_scale", 1e-4), ladder,
                              row_normalize=rec.get("row_normalize", False), n_terms=rec.get("n_terms", 2))
        return [res.field], res.to_json()
    if method == "staged":
        sim = dataclasses.replace(run.cfg.forward_options(), smallness_gate=1.0)
        ledger = staged_recovery(access, rs, ladder, rec.get("m", 4), rec.get("shape", "disc"),
                                 rec.get("n_basis"), rec.get("dispersion", "discrete"), sim, run.jobs)
        stages = ledger.to_json()
        for s, st in zip(stages["stages"], ledger.stages):
            s["modes"] = st.estimate.to_json()["modes"]
        return ledger.fields(), stages
    raise ConfigError(f"unknown recovery method {method!r}")


def planned_inputs(run: Run, grid, mask) -> list[np.ndarray]:
    """Every boundary input the configured verification and recovery will request."""
    dry = RecordingDN(grid, mask, run.cfg.trace)
    cfg = run.cfg.data
    if "identity" in cfg:
        _run_identity(run, dry, np.zeros(grid.shape))
    if "recovery" in cfg:
        _run_recovery(run, dry, run.method or cfg["recovery"]["method"])
    return dry.inputs()


def open_dataset(run: Run) -> DatasetDN:
    path = run.out / DATASET
    if not path.exists():
        raise DatasetError(f"{path} not found; run `fcald dnmap` first")
    ds = DNDataset.read(path)
    if ds.grid.fingerprint() != run.cfg.grid().fingerprint():
        raise DatasetError("dataset grid does not match the configured grid")
    if ds.kind != run.cfg.trace:
        raise DatasetError(f"dataset trace {ds.kind!r} does not match config trace {run.cfg.trace!r}")
    return DatasetDN(ds)


# ----------------------------------------------------------------------------
# commands


def cmd_synth(run: Run) -> int:
    grid = run.cfg.grid()
    terms = run.cfg.data.get("nonlinearity", {}).get("terms", [])
    entries, stats = [], []
    with run.phase("synth"):
        for idx, t in enumerate(terms, start=1):
            q = make_field(grid, t["q"], run.cfg.base)
            name = f"q_{idx}.csv"
            write_field_csv(run.out / name, grid, q)
            entry = {"r": float(t["r"]), "q": name, "profile": t["q"]}
            if t.get("q_neg"):
                qn = make_field(grid, t["q_neg"], run.cfg.base)
                entry["q_neg"] = f"q_{idx}_neg.csv"
                write_field_csv(run.out / entry["q_neg"], grid, qn)
            entries.append(entry)
            stats.append({"file": name, "min": float(q.min()), "max": float(q.max()), "l2": l2_norm(grid, q)})
    spec = load_truth_from_entries(run, grid, entries)
    write_json(run.out / "grid.json", grid.to_json() | {"fingerprint": grid.fingerprint()})
    write_json(run.out / SPEC_FILE, {"grid": grid.to_json(), "terms": entries, "fingerprint": spec.fingerprint(),
                                     "seed": run.cfg.seed})
    return run.finish({"fields": stats, "spec_fingerprint": spec.fingerprint()})


def load_truth_from_entries(run: Run, grid, entries) -> NonlinearitySpec:
    terms = []
    for e in entries:
        q = read_field_csv(run.out / e["q"])[1]
        qn = read_field_csv(run.out / e["q_neg"])[1] if e.get("q_neg") else None
        terms.append(PowerTerm(q, e["r"], qn))
    return NonlinearitySpec(tuple(terms), tuple(e["q"] for e in entries))


def cmd_dnmap(run: Run) -> int:
    grid = run.cfg.grid()
    spec = load_truth(run, grid)
    mask = _mask(run)
    with run.phase("plan"):
        inputs = planned_inputs(run, grid, mask)
    live = LiveDN(grid, spec, run.cfg.forward_options(), mask, run.cfg.trace, run.jobs)
    noise = float(run.cfg.data.get("noise", {}).get("level", 0.0))
    meta = {"config_fingerprint": run.cfg.fingerprint(), "seed": run.cfg.seed, "noise_level": noise}
    with run.phase("solve"):
        try:
            ds = DNDataset.from_live(live, inputs, meta)
        except SolverError as exc:
            bad = next((i for i, f in enumerate(inputs) if not _solves(grid, spec, run, f)), None)
            log.error("forward solve failed on record %s: %s", bad, exc)
            raise
    if noise > 0:
        rng = np.random.default_rng(run.cfg.seed)
        ds.outputs = [df + noise * float(np.max(np.abs(df), initial=0.0)) * rng.standard_normal(df.shape)
                      for df in ds.outputs]
        if mask is not None:
            ind = mask.indicator(len(boundary_index(grid)))
            ds.outputs = [np.where(ind, df, 0.0) for df in ds.outputs]
    with run.phase("write"):
        ds.write(run.out / DATASET)
    return run.finish({"records": len(inputs), "solves": live.solves, "dataset": DATASET,
                       "dataset_digest": dataset_digest(run.out / DATASET), "spec_fingerprint": spec.fingerprint(),
                       "trace": run.cfg.trace, "mask": run.cfg.mask_selector})


def _solves(grid, spec, run, f) -> bool:
    try:
        solve_semilinear(grid, spec, f, run.cfg.forward_options())
        return True
    except (SolverError, SmallnessError):
        return False


def cmd_verify_identity(run: Run) -> int:
    if "identity" not in run.cfg.data:
        raise ConfigError("config has no identity section")
    access = open_dataset(run)
    spec = load_truth(run, access.grid)
    with run.phase("identity"):
        rep = _run_identity(run, access, spec.terms[0].q)
    tol = run.cfg.data["identity"].get("exponent_tol", 0.05)
    run.check("identity_rel_error", rep.rel_error, run.cfg.data["identity"].get("threshold", 0.05))
    if not (abs(rep.rhs) <= 1e-8 and abs(rep.lhs) <= 1e-8):
        dev = abs(rep.exponent - rep.alpha) if rep.exponent is not None else float("inf")
        run.check("exponent_deviation", dev, tol)
    run.metrics |= {"lhs": rep.lhs, "rhs": rep.rhs}
    write_rows_csv(run.out / "identity_series.csv", ["eps0", "pairing", "raw"], rep.series.to_rows())
    return run.finish(rep.to_json() | {"series": "identity_series.csv"})


def _write_field(run: Run, stem: str, grid, u) -> dict:
    write_field_csv(run.out / f"{stem}.csv", grid, u)
    side = write_pgm(run.out / f"{stem}.pgm", u)
    return {"csv": f"{stem}.csv", "pgm": f"{stem}.pgm", "min": side["min"], "max": side["max"]}


def cmd_reconstruct(run: Run) -> int:
    method = run.method or run.cfg.recovery()["method"]
    access = open_dataset(run)
    grid = access.grid
    with run.phase("recover"):
        fields, diag = _run_recovery(run, access, method)
    names = ["recovered_q"] if len(fields) == 1 else [f"recovered_q_{i}" for i in range(1, len(fields) + 1)]
    files = [_write_field(run, n, grid, u) for n, u in zip(names, fields)]
    # error report: the only place the truth is read
    errors = {}
    if (run.out / SPEC_FILE).exists():
        truth = load_truth(run, grid)
        floor = run.cfg.threshold("zero_floor")
        if method == "staged":
            limits = run.cfg.threshold("stage_rel")
            scale = l2_norm(grid, truth.terms[0].q) if len(truth) else 0.0
            for i, (u, term) in enumerate(zip(fields, truth.terms)):
                errors[f"stage_{i + 1}"] = _field_error(run, grid, u, term.q, f"stage_{i + 1}",
                                                        limits[min(i, len(limits) - 1)], floor, scale)
        else:
            errors["q"] = _field_error(run, grid, fields[0], truth.terms[0].q, "q",
                                       run.cfg.threshold("l2_rel", method), floor, 0.0)
    return run.finish({"method": method, "fields": files, "diagnostics": diag, "errors": errors})


def _field_error(run: Run, grid, u, q, label, limit, floor, scale) -> dict:
    norm_q = l2_norm(grid, q)
    if norm_q == 0.0:
        # zero control: absolute floor, or a fraction of the leading-stage scale
        value = l2_norm(grid, u)
        if scale > 0:
            ok = run.check(f"{label}_norm_ratio", value / scale, run.cfg.threshold("zero_ratio"))
            return {"norm": value, "ratio_to_stage1": value / scale, "passed": ok}
        return {"norm": value, "passed": run.check(f"{label}_norm", value, floor)}
    rel = relative_l2(grid, u, q)
    return {"relative_l2": rel, "passed": run.check(f"{label}_relative_l2", rel, limit)}


def cmd_forward(run: Run) -> int:
    grid = run.cfg.grid()
    spec = NonlinearitySpec(tuple(PowerTerm(make_field(grid, t["q"], run.cfg.base), float(t["r"]))
                                  for t in run.cfg.data.get("nonlinearity", {}).get("terms", [])))
    bnd = run.cfg.data.get("boundary", {"profile": "cos:k=1"})
    amps = bnd.get("amplitudes") or list(np.logspace(-3, -1, 10))
    f = make_boundary(grid, bnd["profile"])
    opts = run.cfg.forward_options()
    rows, solutions = [], []
    with run.phase("solve"):
        for a in amps:
            sol = solve_semilinear(grid, spec, a * f, opts)
            rows.append({"amplitude": float(a), **sol.report()})
            solutions.append(sol)
    ratios = [s.smallness_ratio for s in solutions]
    spread = max(ratios) / min(ratios) if min(ratios) > 0 else float("inf")
    run.check("max_residual", max(s.residual for s in solutions), run.cfg.threshold("residual"))
    run.check("ratio_spread", spread, run.cfg.threshold("spread"))
    newton = [s.iterations for s in solutions if s.method == "newton"]
    run.check("max_newton_iterations", max(newton, default=0), run.cfg.threshold("newton_iterations"))
    run.check("picard_fallbacks", sum(s.method == "picard" for s in solutions), 0)
    files = _write_field(run, "forward_u", grid, solutions[-1].u)
    write_rows_csv(run.out / "forward_ladder.csv", ["amplitude", "iterations", "residual", "smallness_ratio"],
                   [(r["amplitude"], r["iterations"], r["residual"], r["smallness_ratio"]) for r in rows])
    return run.finish({"ladder": rows, "stability_constant": max(ratios), "field": files})


def cmd_verify(run: Run) -> int:
    access = open_dataset(run)
    ds = access.dataset
    spec = load_truth(run, ds.grid)
    if spec.fingerprint() != ds.spec_fingerprint:
        raise DatasetError("dataset was recorded for a different nonlinearity")
    live = LiveDN(ds.grid, spec, run.cfg.forward_options(), ds.mask, ds.kind, run.jobs)
    with run.phase("replay"):
        fresh = live.apply_many(ds.inputs) if ds.inputs else np.zeros((0,))
    worst = 0.0
    for old, new in zip(ds.outputs, fresh):
        worst = max(worst, float(np.max(np.abs(old - new)) / max(np.max(np.abs(old)), 1e-300)))
    run.check("replay_max_rel_diff", worst, run.cfg.threshold("replay"))
    return run.finish({"records": len(ds.inputs), "dataset_digest": dataset_digest(run.out / DATASET)})


def cmd_report(run: Run) -> int:
    import json

    listed = run.cfg.data.get("reports")
    paths = [run.out / p for p in listed] if listed else sorted(run.out.glob("*_report.json"))
    rows, passed = [], True
    for p in paths:
        if not p.exists():
            raise ConfigError(f"report {p} not found")
        rep = json.loads(p.read_text(encoding="utf-8"))
        passed &= bool(rep.get("passed", False))
        metrics = rep.get("metrics", {})
        if not metrics:
            rows.append((p.name, rep.get("command", ""), "", "", rep.get("passed")))
        for k in sorted(metrics):
            rows.append((p.name, rep.get("command", ""), k, float(metrics[k]), rep.get("passed")))
    write_rows_csv(run.out / "summary.csv", ["report", "command", "metric", "value", "passed"], rows)
    if not passed:
        run.failures.append({"check": "all_reports_passed", "value": 0.0, "threshold": 1.0, "op": ">="})
    write_json(run.out / "summary.json", {"reports": [p.name for p in paths], "passed": passed, "rows": len(rows)})
    write_json(run.out / "report_timings.json", {"jobs": run.jobs})
    return EXIT_PASS if passed else EXIT_THRESHOLD


COMMANDS = {"synth": cmd_synth, "dnmap": cmd_dnmap, "verify-identity": cmd_verify_identity,
            "reconstruct": cmd_reconstruct, "report": cmd_report, "forward": cmd_forward, "verify": cmd_verify}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fcald", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"fcald {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--jobs", type=int, default=None, help="worker processes (default: logical cores)")
        p.add_argument("--out", default=None, help="output directory (overrides FCALD_OUT)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("reconstruct", "dnmap"):
            p.add_argument("--method", choices=["full", "partial", "staged"], default=None)
    return parser


def resolve_out(arg: str | None, cfg: ExperimentConfig) -> Path:
    if arg:
        return Path(arg)
    if os.environ.get("FCALD_OUT"):
        return Path(os.environ["FCALD_OUT"])
    if "out" in cfg.data:
        p = Path(cfg.data["out"])
        return p if p.is_absolute() else cfg.base / p
    return Path("fcald_out")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = ExperimentConfig.load(args.config)
        out = resolve_out(args.out, cfg)
        out.mkdir(parents=True, exist_ok=True)
        jobs = args.jobs if args.jobs is not None else default_jobs()
        if jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        run = Run(args.command, cfg, out, jobs, getattr(args, "method", None))
        return COMMANDS[args.command](run)
    except (SolverError, SmallnessError, IllPosedError, ExtractionError) as exc:
        log.error("solver failure: %s", exc)
        return EXIT_SOLVER
    except (ConfigError, DatasetError, DomainError, OSError) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

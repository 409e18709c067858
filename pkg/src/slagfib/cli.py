"""Batch driver: generate -> certify -> solve -> fibrate -> verify -> report."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .comparison import (ComparisonError, bishop_gromov_audit, calibrated_sample, check_injectivity_bound,
                         check_volume_comparison, collapsing_series)
from .config import ConfigError, RunConfig, load_config
from .fibration import (BaseGrid, FibrationError, atomic_write_text, build_fibration, check_embedding,
                        check_equivariance, export_fibration, import_fibration)
from .flat_model import StructureError, generate_structure, structure_from_dict, structure_to_dict
from .solver import (CertificateError, IFTCertificate, SolverContext, SolverError, certify_hypotheses,
                     residual_direct, residual_formula, solve_section)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CERTIFICATE = 3
EXIT_SOLVER = 4
EXIT_EMBEDDING = 5
EXIT_VERIFICATION = 6

log = logging.getLogger("slagfib")


class CommandFailure(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _read_json(path: Path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise CommandFailure(EXIT_CONFIG, f"{path}: not valid JSON ({exc})") from exc
    except OSError as exc:
        raise CommandFailure(EXIT_CONFIG, f"{path}: cannot read ({exc.strerror})") from exc


class Run:
    """Paths and shared state for one invocation."""

    def __init__(self, cfg: RunConfig, out: Path, threads: int):
        self.cfg = cfg
        self.out = out
        self.threads = threads
        self.stem = out / cfg["name"]
        self.timings = {}

    def path(self, suffix: str) -> Path:
        return self.stem.with_name(self.stem.name + suffix)

    def timed(self, key: str, func, *args, **kwargs):
        t0 = time.perf_counter()
        try:
            return func(*args, **kwargs)
        finally:
            self.timings[key] = time.perf_counter() - t0

    def record(self, command: str, payload: dict) -> None:
        """Merge a command's results into summary.json."""
        path = self.out / "summary.json"
        summary = _read_json(path) if path.exists() else {}
        summary.setdefault("commands", {})[command] = payload
        summary.setdefault("timings", {}).update(self.timings)
        summary["tool_version"] = __version__
        summary["config"] = self.cfg.to_dict()
        atomic_write_text(path, _dump(summary))


# ---------------------------------------------------------------------------
# pipeline steps


def _generate(run: Run):
    cfg = run.cfg
    lattice = cfg.lattice()
    try:
        return run.timed("generate", generate_structure, cfg.n, lattice, cfg["r"], cfg["epsilon"], cfg.seed,
                         cfg["potential_cutoff"], cfg["poly_degree"], cfg["decay"], cfg.action(lattice),
                         cfg["scale"], cfg["phase"])
    except StructureError as exc:
        raise CommandFailure(EXIT_CONFIG, f"structure generation refused: {exc}") from exc


def _structure(run: Run, path: Path | None):
    if path is None:
        path = run.path(".structure")
        if not path.exists():
            s = _generate(run)
            atomic_write_text(path, _dump(structure_to_dict(s)))
            return s
    try:
        return structure_from_dict(_read_json(Path(path)))
    except (StructureError, KeyError) as exc:
        raise CommandFailure(EXIT_CONFIG, f"{path}: bad structure file ({exc})") from exc


def _digest(structure) -> str:
    return hashlib.sha256(_dump(structure_to_dict(structure)).encode()).hexdigest()


def _certify(run: Run, structure) -> tuple:
    cfg = run.cfg
    c = cfg["certificate"]
    ctx = SolverContext(structure, cfg["cutoff"], probes=c["probes"], seed=cfg.seed % 2**32)
    try:
        cert = run.timed("certify", certify_hypotheses, structure, c.get("radius"), c["delta"], c["delta0"],
                         c["samples"], c["sigma_samples"], ctx, cfg["cutoff"], c["probes"], cfg.seed % 2**32)
    except CertificateError as exc:
        raise CommandFailure(EXIT_CERTIFICATE, str(exc)) from exc
    atomic_write_text(run.path(".certificate"), _dump({**cert.to_dict(), "structure_sha256": _digest(structure)}))
    return cert, ctx


def _certificate(run: Run, structure) -> tuple:
    path = run.path(".certificate")
    data = _read_json(path) if path.exists() else None
    if data is not None and data.get("structure_sha256") == _digest(structure):
        cert = IFTCertificate.from_dict(data)
        ctx = SolverContext(structure, cert.cutoff, cert.alpha, cert.probes, cert.seed, cert.norm_grid)
        return cert, ctx
    return _certify(run, structure)


def _require_ok(cert: IFTCertificate) -> None:
    if not cert.hypotheses_ok:
        m = cert.margins()
        raise CommandFailure(EXIT_CERTIFICATE, "certificate hypotheses fail: margins "
                             + ", ".join(f"{k}={v:.3g}" for k, v in m.items()))


def cmd_generate(run: Run, args) -> dict:
    s = _generate(run)
    path = run.path(".structure")
    atomic_write_text(path, _dump(structure_to_dict(s)))
    return {"structure": str(path), "a": s.a, "theta": s.theta, "perturbation_size": s.perturbation_size(),
            "epsilon": s.epsilon, "seed": run.cfg.seed}


def cmd_certify(run: Run, args) -> dict:
    structure = _structure(run, args.structure)
    cert, _ = _certify(run, structure)
    result = {"certificate": cert.to_dict()}
    run.record("certify", result)
    _require_ok(cert)
    return result


def cmd_solve(run: Run, args) -> dict:
    cfg = run.cfg
    structure = _structure(run, args.structure)
    cert, ctx = _certificate(run, structure)
    _require_ok(cert)
    y = np.array(cfg["solver"].get("y", [0.0] * cfg.n), dtype=float)
    try:
        section, clog = run.timed("solve", solve_section, structure, y, cert, cfg["solver"]["mode"],
                                  cfg["solver"]["tol"], cfg["solver"]["max_iter"], None, ctx)
    except SolverError as exc:
        raise CommandFailure(EXIT_SOLVER, str(exc)) from exc
    result = {"y": y.tolist(), "sigma_norm": ctx.norm(section.sigma),
              "residual_direct": ctx.residual_norm(residual_direct(structure, y, section.sigma)),
              "residual_formula": ctx.residual_norm(residual_formula(structure, y, section.sigma)),
              "log": clog.to_dict()}
    atomic_write_text(run.path(".section"), _dump({"section": section.to_dict(), **result}))
    run.record("solve", result)
    return result


def cmd_fibrate(run: Run, args) -> dict:
    cfg = run.cfg
    structure = _structure(run, args.structure)
    cert, ctx = _certificate(run, structure)
    _require_ok(cert)
    g = cfg["grid"]
    action = cfg.action(structure.lattice)
    try:
        grid = BaseGrid.square(cfg.n, g["half_width"], g["count"], cert.r, action)
    except ValueError as exc:
        raise CommandFailure(EXIT_CONFIG, f"grid: {exc}") from exc
    try:
        fib = run.timed("fibrate", build_fibration, structure, cert, grid, run.threads, cfg["solver"]["mode"],
                        cfg["solver"]["tol"], ctx)
    except (SolverError, FibrationError) as exc:
        raise CommandFailure(EXIT_SOLVER, str(exc)) from exc
    tol = cfg["tolerances"]
    if fib.max_residual > tol["residual"]:
        raise CommandFailure(EXIT_SOLVER, f"fiber residual {fib.max_residual:.3e} exceeds {tol['residual']:g}")
    emb = run.timed("embedding", check_embedding, fib)
    eq = check_equivariance(fib, action) if action is not None else 0.0
    paths = export_fibration(fib, run.path(".fibration"))
    result = {"fibration": str(paths[0]), "csv": str(paths[1]), "fibers": len(fib.sections),
              "max_residual": fib.max_residual, "max_sigma_norm": fib.max_sigma_norm,
              "continuity": fib.continuity, "embedding": emb.to_dict(), "equivariance_defect": eq,
              "certificate": cert.to_dict()}
    run.record("fibrate", result)
    if not emb.injective or emb.min_jacobian_det < tol["jacobian"]:
        raise CommandFailure(EXIT_EMBEDDING, f"embedding check failed: min det {emb.min_jacobian_det:.4g}, "
                             f"separation {emb.min_fiber_separation:.4g}")
    if eq > tol["equivariance"]:
        raise CommandFailure(EXIT_EMBEDDING, f"equivariance defect {eq:.3e} exceeds {tol['equivariance']:g}")
    return result


def _rows_csv(rows: list) -> str:
    if not rows:
        return ""
    keys = list(rows[0].keys())
    lines = [",".join(keys)]
    for row in rows:
        lines.append(",".join(repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)
                              for v in (row[k] for k in keys)))
    return "\n".join(lines) + "\n"


def cmd_verify(run: Run, args) -> dict:
    cfg = run.cfg
    path = Path(args.fibration) if args.fibration else run.path(".fibration")
    try:
        fib = import_fibration(path)
    except (OSError, json.JSONDecodeError, KeyError, FibrationError, StructureError) as exc:
        raise CommandFailure(EXIT_CONFIG, f"{path}: bad fibration file ({exc})") from exc
    structure = fib.structure
    v = cfg["verify"]
    tol = cfg["tolerances"]["comparison"]
    n = structure.n
    inj = structure.lattice.injectivity_radius()
    order = np.argsort(np.linalg.norm(fib.grid.points, axis=1), kind="stable")[: v["fibers"]]
    volume_rows, inj_rows = [], []
    try:
        for i in order:
            sec = fib.sections[int(i)]
            sample = calibrated_sample(structure, sec)
            for frac in v["radius_fractions"]:
                rep = check_volume_comparison(sample, frac * inj, 0.0, tol)
                volume_rows.append({**{f"y{j + 1}": float(sec.y[j]) for j in range(n)}, **rep.to_dict()})
            ir = check_injectivity_bound(structure, sample)
            inj_rows.append({**{f"y{j + 1}": float(sec.y[j]) for j in range(n)}, **ir.to_dict()})
    except ComparisonError as exc:
        raise CommandFailure(EXIT_VERIFICATION, str(exc)) from exc
    unit = structure.lattice.scaled(1.0 / structure.lattice.covolume ** (1.0 / n))
    table = run.timed("collapsing", collapsing_series, unit, v["collapsing_scales"], v["mc_samples"],
                      cfg.seed % 2**32, 1.0, run.threads)
    radii = np.linspace(0.1, 2.0, v["bishop_gromov_radii"])
    bg = bishop_gromov_audit(unit, radii, min(v["mc_samples"], 200000), cfg.seed % 2**32)
    atomic_write_text(run.path(".volume.csv"), _rows_csv(volume_rows))
    atomic_write_text(run.path(".injectivity.csv"), _rows_csv(inj_rows))
    atomic_write_text(run.path(".collapsing.csv"), table.to_csv())
    atomic_write_text(run.path(".bishop_gromov.csv"), _rows_csv(bg["rows"]))
    volume_ok = all(r["holds"] for r in volume_rows)
    inj_ok = all(r["holds"] or not r["hypothesis_ok"] for r in inj_rows)
    collapse_ok = table.monotone and table.cauchy_ok and table.integrals_exact and table.mc_agrees
    result = {"volume_ok": volume_ok, "injectivity_ok": inj_ok, "collapsing_ok": collapse_ok,
              "bishop_gromov_ok": bg["non_increasing"],
              "min_volume_margin": min(r["margin"] for r in volume_rows),
              "injectivity": inj_rows, "collapsing": table.to_dict()}
    run.record("verify", result)
    failed = [k for k in ("volume_ok", "injectivity_ok", "collapsing_ok", "bishop_gromov_ok") if not result[k]]
    if failed:
        raise CommandFailure(EXIT_VERIFICATION, "verification failed: " + ", ".join(failed))
    return result


def cmd_report(run: Run, args) -> dict:
    path = run.out / "summary.json"
    summary = _read_json(path) if path.exists() else {}
    bundle = {"tool_version": __version__, "config": run.cfg.to_dict(),
              "commands": summary.get("commands", {}), "timings": summary.get("timings", {})}
    cert_path = run.path(".certificate")
    if cert_path.exists():
        bundle["certificate"] = _read_json(cert_path)
    atomic_write_text(path, _dump(bundle))
    return bundle


COMMANDS = {"generate": cmd_generate, "certify": cmd_certify, "solve": cmd_solve, "fibrate": cmd_fibrate,
            "verify": cmd_verify, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="slagfib", description=__doc__)
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, type=Path, help="JSON run configuration")
    p.add_argument("--out", type=Path, default=Path("."), help="output directory")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--seed-override", type=int, default=None, metavar="U64")
    p.add_argument("--structure", type=Path, default=None, help="existing .structure file")
    p.add_argument("--fibration", type=Path, default=None, help="existing .fibration file (verify)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config)
        if args.seed_override is not None:
            if not 0 <= args.seed_override < 2**64:
                raise ConfigError("--seed-override must be an unsigned 64-bit integer")
            cfg = cfg.with_seed(args.seed_override)
        if args.threads < 1:
            raise ConfigError("--threads must be positive")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    args.out.mkdir(parents=True, exist_ok=True)
    run = Run(cfg, args.out, args.threads)
    try:
        result = COMMANDS[args.command](run, args)
    except CommandFailure as exc:
        print(f"{args.command}: {exc}", file=sys.stderr)
        return exc.code
    if args.command == "generate":
        run.record("generate", result)
    log.info("%s finished", args.command)
    print(json.dumps({"command": args.command, "status": "ok"}))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

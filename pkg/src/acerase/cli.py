"""Command-line entry point: ``acerase <command> --config PATH [--seed N] [--out DIR] [--quiet]``.

Every successful run writes its artifacts plus ``manifest.json`` into the
output directory.  Failures print a JSON error object on stderr and exit
nonzero (2 usage, 3 config, 4 missing file, 1 anything else).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import config as C
from .checkpoint import CheckpointError, dumps, load_adapter, load_params, save_adapter, save_params, write_atomic
from .denoiser import Denoiser, train_base
from .diffusion import ddim_sample
from .editing import EditSpec, edit_batch
from .evaluation import ablation_run, erasure_report, report_svg, scatter_svg
from .trainer import erase_concept
from .universe import classify
from .verification import format_table, run_all

COMMANDS = ("train-base", "erase", "sample", "edit", "eval", "ablate", "verify-math")
EXIT_CODES = {"usage": 2, "config": 3, "not-found": 4, "runtime": 1}

log = logging.getLogger("acerase")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="acerase", description="Concept erasure on a toy 2-D diffusion model.")
    parser.add_argument("--version", action="version", version=f"acerase {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, required=name != "verify-math")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=Path)
        p.add_argument("--quiet", action="store_true")
    return parser


class Run:
    """Output directory, artifact bookkeeping and the manifest of one invocation."""

    def __init__(self, command: str, config_path: Path | None, raw: bytes, seed: int, out: Path):
        self.command = command
        self.config_path = config_path
        self.config_hash = C.sha256(raw) if config_path is not None else None
        self.seed = seed
        self.out = out
        self.started = _now()
        self.artifacts: list[str] = []
        self.quiet = False
        out.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        self.artifacts.append(name)
        return self.out / name

    def write_text(self, name: str, text: str) -> None:
        write_atomic(self.path(name), text)

    def write_json(self, name: str, doc) -> None:
        self.write_text(name, dumps(doc))

    def manifest(self) -> dict:
        return {
            "command": self.command,
            "config_path": None if self.config_path is None else str(self.config_path),
            "config_sha256": self.config_hash,
            "seed": self.seed,
            "version": __version__,
            "out_dir": str(self.out),
            "started": self.started,
            "finished": _now(),
            "artifacts": sorted(self.artifacts),
        }

    def finish(self) -> Path:
        path = self.out / "manifest.json"
        write_atomic(path, json.dumps(self.manifest(), indent=2, sort_keys=True) + "\n")
        return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds")


def _resolve(doc: dict, key: str, config_path: Path) -> Path | None:
    value = doc.get(key)
    if value is None:
        return None
    p = Path(value)
    return p if p.is_absolute() else config_path.parent / p


def _models(doc, config_path):
    base = load_params(_resolve(doc, "base", config_path))
    adapter_path = _resolve(doc, "adapter", config_path)
    adapter = load_adapter(adapter_path) if adapter_path is not None else None
    return base, adapter


def _points_csv(points, labels) -> str:
    lines = ["index,x,y,class"]
    for i, ((x, y), lab) in enumerate(zip(points, labels)):
        lines.append(f"{i},{float(x)!r},{float(y)!r},{int(lab)}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- commands


def cmd_train_base(doc, run: Run, config_path):
    universe, sched = C.universe_from(doc), C.schedule_from(doc)
    arch = C.arch_from(doc, universe, sched)
    history: list[float] = []
    params = train_base(universe, sched, seed=run.seed, arch=arch, history=history, **doc.get("train", {}))
    save_params(params, run.path("base.json"))
    run.write_text("train_loss.csv", "step,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(history)))
    return {"final_loss": history[-1] if history else None}


def cmd_erase(doc, run: Run, config_path):
    universe, sched = C.universe_from(doc), C.schedule_from(doc)
    cfg = C.erasure_from(doc, run.seed, universe)
    base = load_params(_resolve(doc, "base", config_path))
    adapter, history, gamma = erase_concept(base, cfg, universe, sched)
    save_adapter(adapter, run.path("adapter.json"))
    history.write_csv(run.path("train_log.csv"))
    run.write_json("gamma.json", gamma.to_dict())
    run.write_json("erasure_config.json", cfg.to_dict())
    return {"final_total": history.rows[-1]["total"] if history.rows else None}


def cmd_sample(doc, run: Run, config_path):
    universe, sched = C.universe_from(doc), C.schedule_from(doc)
    base, adapter = _models(doc, config_path)
    s = doc["sample"]
    cond = universe.null if s["condition"] < 0 else s["condition"]
    x = ddim_sample(Denoiser(base, adapter), cond, s.get("omega", 3.0), sched, universe.null,
                    seed=run.seed, n=s.get("n", 200)).final
    labels = classify(universe, x)
    run.write_text("samples.csv", _points_csv(x, labels))
    scatter_svg(x, labels, run.path("samples.svg"), title=f"condition {s['condition']}")
    rate = float(np.mean(labels == cond)) if cond != universe.null else None
    return {"rate": rate}


def cmd_edit(doc, run: Run, config_path):
    universe, sched = C.universe_from(doc), C.schedule_from(doc)
    base, adapter = _models(doc, config_path)
    e = doc["edit"]
    n = e.get("n", 200)
    points = universe.sample(e["concept"], n, np.random.default_rng(np.random.SeedSequence([run.seed, 1])))
    specs = [EditSpec(e.get("strength", 0.5), e.get("edit_condition", -1), e.get("cfg_scale", 7.5),
                      e.get("inversion_mode", "stochastic-noise"), seed=run.seed * 100_003 + i) for i in range(n)]
    batch = edit_batch(Denoiser(base, adapter), points, specs, sched, universe.null, universe=universe)
    batch.write_csv(run.path("edits.csv"))
    ok = [r for r in batch.records if r.error is None]
    labels = np.array([r.class_after for r in ok])
    scatter_svg(batch.edited, labels, run.path("edits.svg"), title=f"edits of concept {e['concept']}")
    return {"retained": float(np.mean(labels == e["concept"])), "failures": len(batch.failures)}


def cmd_eval(doc, run: Run, config_path):
    universe, sched = C.universe_from(doc), C.schedule_from(doc)
    base, adapter = _models(doc, config_path)
    target = doc["target"]
    priors = doc.get("priors") or [k for k in range(universe.K) if k != target]
    cfg = C.eval_from(doc, run.seed, target)
    report = erasure_report(base, adapter, universe, target, priors, sched,
                            protocols=doc.get("protocols", ["generation", "editing"]), config=cfg)
    report.write_json(run.path("report.json"))
    report.write_csv(run.path("report.csv"))
    for protocol in report.protocols:
        report_svg(report, universe, protocol, run.path(f"{protocol}.svg"))
    return {p: {"a_e": m.a_e, "a_p": m.a_p, "a_d": m.a_d} for p, m in report.protocols.items()}


def cmd_ablate(doc, run: Run, config_path):
    universe, sched = C.universe_from(doc), C.schedule_from(doc)
    cfg = C.erasure_from(doc, run.seed, universe)
    ev = C.eval_from(doc, run.seed, cfg.target)
    base = load_params(_resolve(doc, "base", config_path))
    result = ablation_run(base, universe, sched, cfg, ev)
    for row, report in result.reports.items():
        report.write_json(run.path(f"row{row}_report.json"))
        report.write_csv(run.path(f"row{row}_report.csv"))
        save_adapter(result.adapters[row], run.path(f"row{row}_adapter.json"))
        result.logs[row].write_csv(run.path(f"row{row}_train_log.csv"))
    run.write_text("verdict.txt", result.verdict_text())
    run.write_json("ablation.json", result.to_dict())
    return {"verdict": result.verdict}


def cmd_verify_math(doc, run: Run, config_path):
    sched = C.schedule_from(doc)
    results = run_all(sched, n=doc.get("instances", 10_000), seed=run.seed)
    table = format_table(results)
    run.write_text("verify_math.txt", table)
    run.write_json("verify_math.json", [r.__dict__ for r in results])
    if not run.quiet:
        sys.stdout.write(table)
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise RuntimeError(f"{len(failed)} identity checks failed: {failed}")
    return {"checks": len(results)}


HANDLERS = {
    "train-base": cmd_train_base,
    "erase": cmd_erase,
    "sample": cmd_sample,
    "edit": cmd_edit,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "verify-math": cmd_verify_math,
}


def _fail(kind: str, message: str, **extra) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, **extra}, sort_keys=True) + "\n")
    return EXIT_CODES[kind]


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError(f"a command is required: {' | '.join(COMMANDS)}")
    except UsageError as exc:
        return _fail("usage", str(exc))
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        if args.config is not None:
            doc, raw = C.load(args.command, args.config)
        else:
            doc, raw = C.validate(args.command, {}), b""
        seed = args.seed if args.seed is not None else int(doc.get("seed", 0))
        out = args.out or Path("runs") / args.command
        run = Run(args.command, args.config, raw, seed, out)
        run.quiet = args.quiet
        summary = HANDLERS[args.command](doc, run, args.config or Path("."))
        manifest = run.finish()
    except C.ConfigError as exc:
        return _fail("config", str(exc), path=exc.path)
    except FileNotFoundError as exc:
        return _fail("not-found", str(exc))
    except CheckpointError as exc:
        return _fail("config", f"bad checkpoint: {exc}")
    except Exception as exc:  # report anything else as a runtime failure
        return _fail("runtime", f"{type(exc).__name__}: {exc}")
    if not args.quiet:
        sys.stdout.write(json.dumps({"command": args.command, "manifest": str(manifest), **summary},
                                    sort_keys=True) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())

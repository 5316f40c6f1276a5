"""Command-line driver: run a scenario, emit artefacts, replay golden cases."""

from __future__ import annotations

import argparse
import json
import shutil
import sys
import time
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grid import ParameterError
from .gridio import file_digest, read_grid, read_mask, write_grid, write_mask, write_pgm
from .layers import PipelineOutput, run_pipeline, scenario_hyperparameters
from .scenario import ScenarioError, load_scenario

TOLERANCES = {"bit-exact": 0.0, "1e-9": 1e-9, "1e-3": 1e-3}
FLAG_FIELDS = {"seed": "seed", "steps": "steps", "eta": "eta", "k": "k", "tq": "t_query", "tk": "t_key"}


def emit(output: PipelineOutput, out_dir, viz: bool = False, extra_manifest: dict | None = None) -> dict:
    """Write grids, masks, the conflict report and the manifest into ``out_dir``.

    Returns the manifest, which lists a digest for every data file.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = [write_grid(out / "canvas.lgrd", output.canvas)]
    for i, layer in enumerate(output.layers):
        files.append(write_grid(out / f"layer{i}.lgrd", layer))
    for i, tau in enumerate(output.transparency):
        files.append(write_mask(out / f"tau{i}.lmsk", tau))
    files.append(write_mask(out / "overlap.lmsk", output.overlap))
    conflict_files = []
    for i, m in enumerate(output.report.masks):
        path = write_mask(out / f"conflict{i}.lmsk", m)
        files.append(path)
        conflict_files.append(path.name)
    report = {
        "eta": output.report.eta,
        "iou": np.asarray(output.report.iou).tolist(),
        "conflict_masks": conflict_files,
        "prompts": output.prompts,
    }
    report_path = out / "conflict_report.json"
    report_path.write_text(json.dumps(report, indent=2))
    files.append(report_path)
    if viz:
        viz_dir = out / "viz"
        viz_dir.mkdir(exist_ok=True)
        write_pgm(viz_dir / "canvas.pgm", output.canvas)
        write_pgm(viz_dir / "source.pgm", output.source)
        for i, tau in enumerate(output.transparency):
            write_pgm(viz_dir / f"tau{i}.pgm", tau)
        for t, taus in enumerate(output.history):
            for i, tau in enumerate(taus):
                write_mask(viz_dir / f"tau{i}_step{t + 1:03d}.lmsk", tau)
                write_pgm(viz_dir / f"tau{i}_step{t + 1:03d}.pgm", tau)
    manifest = dict(output.manifest)
    manifest.update(extra_manifest or {})
    manifest["files"] = {p.name: file_digest(p) for p in files}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=float))
    return manifest


def run(config, out_dir, overrides: dict | None = None, viz: bool = False, workers: int = 1) -> dict:
    """Load, run and emit one scenario; returns the manifest."""
    t0 = time.perf_counter()
    scenario = load_scenario(config, overrides)
    load_time = time.perf_counter() - t0
    output = run_pipeline(scenario, workers=workers, record_history=viz)
    output.manifest["timings"]["load"] = load_time
    applied = {k: v for k, v in (overrides or {}).items() if v is not None}
    return emit(output, out_dir, viz, {"config": str(config), "overrides": applied})


@dataclass
class GoldenResult:
    case: str
    tolerance: str
    passed: bool
    detail: str


def capture_golden(config, case_dir, tolerance: str = "bit-exact", overrides: dict | None = None) -> Path:
    """Run ``config`` and store its outputs and digests as a golden case."""
    if tolerance not in TOLERANCES:
        raise ParameterError(f"unknown tolerance class {tolerance!r}")
    config = Path(config)
    case = Path(case_dir)
    if case.exists():
        shutil.rmtree(case)
    case.mkdir(parents=True)
    scenario_dir = case / "scenario"
    shutil.copytree(config.parent, scenario_dir, ignore=shutil.ignore_patterns("*.lgrd.out", "goldens"))
    expected = case / "expected"
    manifest = run(scenario_dir / config.name, expected, overrides)
    golden = {"scenario": config.name, "tolerance": tolerance, "overrides": overrides or {},
              "digests": manifest["files"]}
    (case / "golden.json").write_text(json.dumps(golden, indent=2))
    return case


def _read_any(path: Path) -> np.ndarray:
    return read_grid(path) if path.suffix == ".lgrd" else read_mask(path)


def verify_case(case_dir, perturb: dict | None = None) -> GoldenResult:
    case = Path(case_dir)
    golden = json.loads((case / "golden.json").read_text())
    tol_name = golden["tolerance"]
    tol = TOLERANCES[tol_name]
    overrides = dict(golden.get("overrides") or {})
    overrides.update(perturb or {})
    fresh = case / "replay"
    if fresh.exists():
        shutil.rmtree(fresh)
    try:
        manifest = run(case / "scenario" / golden["scenario"], fresh, overrides)
    except Exception as exc:  # a failing stage is a report entry, not a crash
        return GoldenResult(case.name, tol_name, False, f"run failed: {exc}")
    failures = []
    for name, want in golden["digests"].items():
        got = manifest["files"].get(name)
        if got == want:
            continue
        if tol == 0.0 or not name.endswith((".lgrd", ".lmsk")):
            failures.append(name)
            continue
        a, b = _read_any(case / "expected" / name), _read_any(fresh / name)
        scale = max(float(np.max(np.abs(a))), 1e-300)
        if a.shape != b.shape or float(np.max(np.abs(a - b))) > tol * scale:
            failures.append(name)
    shutil.rmtree(fresh)
    detail = "all files match" if not failures else "mismatch: " + ", ".join(sorted(failures))
    return GoldenResult(case.name, tol_name, not failures, detail)


def verify_goldens(directory, perturb: dict | None = None, stream=None) -> list:
    """Replay every golden case under ``directory`` and print a pass/fail table."""
    results = [verify_case(p.parent, perturb) for p in sorted(Path(directory).glob("*/golden.json"))]
    if stream is not None:
        print(f"{'case':<24} {'tolerance':<10} result", file=stream)
        for r in results:
            print(f"{r.case:<24} {r.tolerance:<10} {'PASS' if r.passed else 'FAIL'}  {r.detail}", file=stream)
    return results


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="layered-edit", description=__doc__)
    p.add_argument("--config", type=Path, help="scenario TOML file")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--eta", type=float)
    p.add_argument("--k", type=float)
    p.add_argument("--tq", type=int, help="query removal inflection step")
    p.add_argument("--tk", type=int, help="key removal inflection step")
    p.add_argument("--out", type=Path, default=Path("out"))
    p.add_argument("--viz", action="store_true", help="also write PGM previews and per-step transparencies")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--goldens", type=Path, help="golden directory to verify (or to capture into)")
    p.add_argument("--capture", metavar="NAME", help="capture --config as golden case NAME under --goldens")
    p.add_argument("--tolerance", choices=sorted(TOLERANCES), default="bit-exact")
    return p


def _fail(stage: str, exc: Exception, code: int) -> int:
    payload = {"error": str(exc), "stage": stage}
    if isinstance(exc, ScenarioError):
        payload["fields"] = exc.errors
    print(json.dumps(payload), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {field: getattr(args, flag) for flag, field in FLAG_FIELDS.items()}
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if args.goldens is not None and args.capture is None:
        if not any(args.goldens.glob("*/golden.json")):
            return _fail("goldens", ParameterError(f"no golden cases under {args.goldens}"), 2)
        results = verify_goldens(args.goldens, overrides or None, stream=sys.stdout)
        return 0 if all(r.passed for r in results) else 1
    if args.config is None:
        return _fail("arguments", ParameterError("--config is required"), 2)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            if args.capture is not None:
                if args.goldens is None:
                    return _fail("arguments", ParameterError("--capture needs --goldens"), 2)
                case = capture_golden(args.config, args.goldens / args.capture, args.tolerance, overrides)
                print(f"captured {case}")
                return 0
            manifest = run(args.config, args.out, overrides, viz=args.viz, workers=args.workers)
        except ScenarioError as exc:
            return _fail("load", exc, 2)
        except (ParameterError, OSError) as exc:
            return _fail("run", exc, 1)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    print(json.dumps({"out": str(args.out), "files": manifest["files"]}, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())

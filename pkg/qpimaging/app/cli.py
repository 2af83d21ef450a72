"""Batch experiment runner.

``python -m qpimaging.app.cli <command> [flags]`` resolves an
:class:`ExperimentConfig`, runs the command, and writes its CSV tables plus a
``manifest.json`` into ``--out``. Each CSV starts with a
``# manifest-hash <sha256>`` comment line followed by a header row. The hash
covers the resolved config, the scene values and the code version, so equal
config and seed give byte-identical tables whatever the worker count.

Errors raised by the library exit with status 2 and a JSON payload on stderr;
anything unexpected exits with status 1 as ``INTERNAL_ERROR``.
"""

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from itertools import repeat
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy

from .. import __version__, db
from ..sim.baseline import (
    COMPLEXITY_COLUMNS,
    DK_COLUMNS,
    TOMOGRAPHY_COLUMNS,
    TomographyConfig,
    complexity_grid,
    default_dk_grid,
    dk_experiment,
    resource_counts,
    tomography_row,
)
from ..sim.errors import ConfigError, QPImagingError
from ..sim.estimation import (
    EigenSupply,
    Observable,
    Prior,
    estimate_r,
    estimate_r_swap,
    load_observable,
    measurement_pipeline,
    phase_from_truth,
    solve_model,
    swap_test,
    validation_reference,
)
from ..sim.numkit import DensityOperator, purity, random_density, random_hermitian
from ..sim.optics import NoiseModel, SceneTruth, apply_noise, build_rho, load_scene
from ..sim.qpca import U64, PhotonStream, make_rng, trial_seed
from ..sim.qsp import (
    SWEEP_COLUMNS,
    FilterCache,
    FilterOutcome,
    QSPPlan,
    dump_plan,
    filter_circuit,
    plan,
    prior_pass,
    sweep_row,
    two_stage_filter,
)
from .config import COMMANDS, ExperimentConfig, resolve_config

logger = logging.getLogger(__name__)

# seed streams reserved outside the trial range (trial seeds are master ^ index)
PRIOR_STREAM = U64
OBSERVABLE_STREAM = U64 - 1
SWAP_STREAM = U64 - 2
PIPELINE_STREAM = U64 - 3
STATE_STREAM_SHIFT = 32

FILTER_TRIAL_COLUMNS = ("trial", "seed", "label", "photons", "partial", "aux_record")
FILTER_SWEEP_COLUMNS = tuple(SWEEP_COLUMNS) + ("label_freq_noise", "partial_trials", "trials")
ESTIMATION_COLUMNS = ("quantity", "estimate", "stderr", "truth", "shots", "mode", "seed")
QV_COLUMNS = ("quantity", "value")

Table = Tuple[Sequence[str], List[Dict[str, Any]]]


@dataclass
class RunResult:
    tables: Dict[str, Table]
    manifest: Dict[str, Any] = field(default_factory=dict)
    summary: Dict[str, Any] = field(default_factory=dict)
    warnings: List[str] = field(default_factory=list)
    failed: bool = False


# ---------- output ----------

def _fmt(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path: Path, columns: Sequence[str], rows: List[Dict[str, Any]], manifest_hash: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# manifest-hash {manifest_hash}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row.get(c)) for c in columns])


def build_manifest(cfg: ExperimentConfig, extra: Dict[str, Any]) -> Tuple[Dict[str, Any], str]:
    """Hashed manifest body and its SHA-256."""
    body = {
        "code_version": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "config": cfg.hashed_view(),
    }
    body.update(extra)
    blob = json.dumps(body, sort_keys=True, separators=(",", ":"), default=_fmt)
    return body, hashlib.sha256(blob.encode("utf-8")).hexdigest()


# ---------- worker plumbing ----------

def _blocks(n: int, workers: int) -> List[List[int]]:
    size = -(-n // workers)
    return [list(range(s, min(n, s + size))) for s in range(0, n, size)]


def run_indexed(fn: Callable[[Any, List[int]], List[Tuple[int, Any]]], payload: Any, n: int,
                workers: int) -> List[Any]:
    """Run ``fn(payload, block)`` over contiguous index blocks, merged by index."""
    blocks = _blocks(n, max(1, workers))
    if workers <= 1 or len(blocks) <= 1:
        parts = [fn(payload, block) for block in blocks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(fn, repeat(payload), blocks))
    merged = sorted((item for part in parts for item in part), key=lambda t: t[0])
    return [value for _, value in merged]


@dataclass(frozen=True)
class FilterJob:
    rho: np.ndarray
    plan1: QSPPlan
    plan2: Optional[QSPPlan]
    gamma: float
    fidelity: str
    trajectory: bool
    budget: Optional[int]
    master_seed: int


def _filter_block(job: FilterJob, indices: List[int]) -> List[Tuple[int, FilterOutcome]]:
    rho = DensityOperator(job.rho)
    cache = FilterCache()
    out = []
    for idx in indices:
        stream = PhotonStream(rho, seed=trial_seed(job.master_seed, idx), budget=job.budget)
        if job.plan2 is None:
            outcome = filter_circuit(stream, job.plan1, fidelity=job.fidelity,
                                     trajectory=job.trajectory, cache=cache)
        else:
            outcome = two_stage_filter(stream, job.gamma, job.plan1, job.plan2,
                                       fidelity=job.fidelity, trajectory=job.trajectory,
                                       cache=cache)
        out.append((idx, outcome))
    return out


@dataclass(frozen=True)
class TomographyJob:
    master_seed: int
    rank: int
    reconstructor: str
    cells: List[Tuple[int, int]]


def _tomography_block(job: TomographyJob, indices: List[int]) -> List[Tuple[int, Dict[str, Any]]]:
    out = []
    for idx in indices:
        dim, copies = job.cells[idx]
        state_seed = trial_seed(job.master_seed, dim << STATE_STREAM_SHIFT)
        rho = random_density(dim, make_rng(state_seed), rank=min(job.rank, dim))
        seed = trial_seed(job.master_seed, idx)
        cfg = TomographyConfig(copies=copies, reconstructor=job.reconstructor, seed=seed)
        out.append((idx, tomography_row(rho, cfg, make_rng(seed))))
    return out


# ---------- shared scene/plan steps ----------

def _scene(cfg: ExperimentConfig) -> Tuple[DensityOperator, SceneTruth, Dict[str, str], float]:
    scene, raw = load_scene(cfg.scene_path())
    rho, truth = build_rho(scene)
    gamma = cfg.gamma if cfg.gamma is not None else scene.noise.gamma
    return rho, truth, raw, gamma


def _plans(cfg: ExperimentConfig, rho: DensityOperator, gamma: float) -> Tuple[QSPPlan, Optional[QSPPlan], float]:
    pc = cfg.plan
    if pc.r_prior is not None:
        r_prior = pc.r_prior
    else:
        top = prior_pass(rho, make_rng(trial_seed(cfg.master_seed, PRIOR_STREAM)))
        # the prior pass sees the noisy top eigenvalue; undo the floor
        r_prior = (top - gamma / rho.dim) / (1.0 - gamma) if gamma > 0.0 else top
        r_prior = min(1.0, max(0.5 + 1e-6, r_prior))
    synthesize = cfg.mode == "circuit"
    common = dict(c_l=pc.c_l, synthesize=synthesize, degree_cap=pc.degree_cap, k=pc.k)
    if gamma == 0.0:
        return plan(r_prior, pc.eps, pc.delta, "noiseless", kappa=pc.kappa, **common), None, r_prior
    p1 = plan(r_prior, pc.eps, pc.delta, "noisy", gamma=gamma, dim=rho.dim, stage=1,
              kappa=pc.kappa, **common)
    p2 = plan(r_prior, pc.eps, pc.delta, "noisy", gamma=gamma, dim=rho.dim, stage=2, **common)
    return p1, p2, r_prior


def _plan_summary(p: QSPPlan) -> Dict[str, Any]:
    return {"stage": p.stage, "mode": p.mode, "x": p.x, "k": p.k, "L": p.gate_count,
            "shift": p.spec.shift, "halfwidth": p.spec.halfwidth,
            "predicted_photons": p.predicted_photons}


def _filter_trials(cfg: ExperimentConfig, rho: DensityOperator, gamma: float) -> Tuple[List[FilterOutcome], QSPPlan, Optional[QSPPlan], float]:
    if cfg.mode not in ("ideal", "circuit"):
        raise ConfigError(f"filter trials run in ideal or circuit mode, not {cfg.mode!r}")
    p1, p2, r_prior = _plans(cfg, rho, gamma)
    job = FilterJob(rho=rho.matrix, plan1=p1, plan2=p2, gamma=gamma, fidelity=cfg.mode,
                    trajectory=cfg.trajectory, budget=cfg.budget, master_seed=cfg.master_seed)
    outcomes = run_indexed(_filter_block, job, cfg.trials, cfg.workers)
    return outcomes, p1, p2, r_prior


# ---------- commands ----------

def cmd_scene(cfg: ExperimentConfig) -> RunResult:
    clean, truth, raw, gamma = _scene(cfg)
    rho = apply_noise(clean, NoiseModel(gamma))
    w = np.sort(rho.spectrum[0])[::-1]
    rank = int(np.sum(w > 1e-10))
    spectrum = [{"index": i + 1, "eigenvalue": float(v)} for i, v in enumerate(w)]
    summary_rows = [
        {"quantity": "dim", "value": rho.dim},
        {"quantity": "eta1", "value": truth.eta1},
        {"quantity": "eta2", "value": truth.eta2},
        {"quantity": "h", "value": truth.h},
        {"quantity": "b", "value": truth.b},
        {"quantity": "r", "value": truth.r},
        {"quantity": "gamma", "value": gamma},
        {"quantity": "purity", "value": purity(rho)},
        {"quantity": "rank", "value": rank},
    ]
    grid_n = int(round(np.sqrt(rho.dim)))

    def state_rows(vec: np.ndarray) -> List[Dict[str, Any]]:
        amps = vec.reshape(grid_n, grid_n)
        return [{"m": m, "n": n, "re": float(amps[m, n].real), "im": float(amps[m, n].imag)}
                for m in range(grid_n) for n in range(grid_n)]

    return RunResult(
        tables={
            "scene_spectrum.csv": (("index", "eigenvalue"), spectrum),
            "scene_summary.csv": (QV_COLUMNS, summary_rows),
            "psi1.csv": (("m", "n", "re", "im"), state_rows(truth.psi1.amplitudes)),
            "psi2.csv": (("m", "n", "re", "im"), state_rows(truth.psi2.amplitudes)),
        },
        manifest={"scene": raw},
        summary={"dim": rho.dim, "eta1": truth.eta1, "eta2": truth.eta2, "h": truth.h,
                 "r": truth.r, "rank": rank, "spectrum_top": [float(v) for v in w[:2]]},
    )


def cmd_filter(cfg: ExperimentConfig) -> RunResult:
    clean, _truth, raw, gamma = _scene(cfg)
    rho = apply_noise(clean, NoiseModel(gamma))
    outcomes, p1, p2, r_prior = _filter_trials(cfg, rho, gamma)
    _, vecs = clean.spectrum
    v1, v2 = vecs[:, -1], vecs[:, -2]
    trial_rows = [
        {"trial": i, "seed": trial_seed(cfg.master_seed, i), "label": o.label or "",
         "photons": o.photons, "partial": o.partial,
         "aux_record": ";".join(str(bit) for bit in o.aux_record)}
        for i, o in enumerate(outcomes)
    ]
    row = sweep_row(outcomes, p1, r=float(clean.spectrum[0][-1]), gamma=gamma, v1=v1, v2=v2)
    done = [o for o in outcomes if not o.partial]
    row["label_freq_noise"] = sum(1 for o in done if o.label == "noise") / len(done) if done else 0.0
    row["partial_trials"] = len(outcomes) - len(done)
    row["trials"] = len(outcomes)
    warnings = sorted({w for o in outcomes for w in o.warnings})
    plans = {"plan_stage1": _plan_summary(p1)}
    if p2 is not None:
        plans["plan_stage2"] = _plan_summary(p2)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_plan(p1, out / "plan_stage1.plan")
    if p2 is not None:
        dump_plan(p2, out / "plan_stage2.plan")
    return RunResult(
        tables={"filter_trials.csv": (FILTER_TRIAL_COLUMNS, trial_rows),
                "filter_sweep.csv": (FILTER_SWEEP_COLUMNS, [row])},
        manifest={"scene": raw, "r_prior": r_prior, **plans},
        summary={"label_freq_V1": row["label_freq_V1"], "fid_V1": row["fid_V1"],
                 "fid_V2": row["fid_V2"], "photons_mean": row["photons_mean"]},
        warnings=warnings,
    )


def _observable(cfg: ExperimentConfig, dim: int) -> Observable:
    if cfg.observable == "pixel":
        if cfg.observable_pixel >= dim:
            raise ConfigError(f"observable_pixel {cfg.observable_pixel} outside 0..{dim - 1}")
        m = np.zeros((dim, dim), dtype=complex)
        m[cfg.observable_pixel, cfg.observable_pixel] = 1.0
        return Observable(f"pixel_{cfg.observable_pixel}", m)
    rng = make_rng(trial_seed(cfg.master_seed, OBSERVABLE_STREAM))
    return Observable.normalized("O", random_hermitian(dim, rng))


def _configured_prior(cfg: ExperimentConfig) -> Optional[Prior]:
    if cfg.ref_signs is not None:
        return (cfg.ref_signs[0], cfg.ref_signs[1])
    if cfg.ref_phase is not None:
        return complex(math.cos(cfg.ref_phase), math.sin(cfg.ref_phase))
    return None


def _estimate_inputs(cfg: ExperimentConfig, rho: DensityOperator, truth: SceneTruth,
                     gamma: float) -> Tuple[EigenSupply, Observable, Prior, str]:
    """Supply, reference observable and κ_ref prior for ``estimate``.

    Outside validation mode nothing is read from the scene truth: the supply
    is the eigenbasis of the detected state and both the reference and its
    phase prior must be configured.
    """
    prior = _configured_prior(cfg)
    if cfg.validation:
        supply = EigenSupply.from_model(solve_model(truth.r, truth.b), truth.psi1, truth.psi2)
        if cfg.reference_path is not None:
            o_ref = load_observable(cfg.reference_path, rho.dim)
        else:
            o_ref = validation_reference(supply)
        if prior is None:
            return supply, o_ref, phase_from_truth(supply, o_ref), "truth"
        return supply, o_ref, prior, "configured"
    if cfg.reference_path is None:
        raise ConfigError("estimate needs a reference observable", code="MISSING_KEY",
                          hint="set reference_path, or pass --validation to use the scene truth")
    if prior is None:
        raise ConfigError("estimate needs a phase prior for the reference overlap",
                          code="MISSING_KEY",
                          hint="set ref_signs (sign of Re, sign of Im) or ref_phase in radians")
    supply = EigenSupply.from_density(rho, gamma)
    return supply, load_observable(cfg.reference_path, rho.dim), prior, "configured"


def _undo_floor(r_noisy: float, stderr: float, gamma: float, dim: int) -> Tuple[float, float]:
    return (r_noisy - gamma / dim) / (1.0 - gamma), stderr / (1.0 - gamma)


def cmd_estimate(cfg: ExperimentConfig) -> RunResult:
    clean, truth, raw, gamma = _scene(cfg)
    rho = apply_noise(clean, NoiseModel(gamma))
    o = _observable(cfg, rho.dim)
    supply, o_ref, prior, prior_source = _estimate_inputs(cfg, rho, truth, gamma)
    labels = None
    r_estimate = None
    manifest: Dict[str, Any] = {"scene": raw, "validation": cfg.validation,
                                "prior_source": prior_source}
    warnings: List[str] = []
    shots = 0 if cfg.mode == "analytic" else cfg.shots
    if cfg.mode in ("ideal", "circuit"):
        outcomes, p1, p2, r_prior = _filter_trials(cfg, rho, gamma)
        labels = [o_.label for o_ in outcomes]
        manifest.update({"r_prior": r_prior, "plan_stage1": _plan_summary(p1)})
        if p2 is not None:
            manifest["plan_stage2"] = _plan_summary(p2)
            # V1 labels include the floor's share of V1; noise labels stay in the count
            r_estimate = _undo_floor(*estimate_r(labels), gamma, rho.dim)
            labels = None
        warnings.extend(sorted({w for o_ in outcomes for w in o_.warnings}))
    elif cfg.mode == "shot":
        sw = swap_test(rho, rho, 1.0, shots, make_rng(trial_seed(cfg.master_seed, SWAP_STREAM)))
        floor = (2.0 * gamma * (1.0 - gamma) + gamma * gamma) / rho.dim
        clean_purity = (2.0 * sw.p0_hat - 1.0 - floor) / (1.0 - gamma) ** 2
        r_estimate = estimate_r_swap(0.5 + 0.5 * clean_purity, shots)
    rng = make_rng(trial_seed(cfg.master_seed, PIPELINE_STREAM)) if shots > 0 else None
    report = measurement_pipeline(supply, truth.b, o, o_ref, prior, labels=labels,
                                  r_estimate=r_estimate, shots=shots, rng=rng,
                                  seed=cfg.master_seed)
    truths: Dict[str, float] = {}
    if cfg.validation:
        full = o.matrix * o.scale
        truths = {
            "r": truth.r,
            "h": truth.h,
            "psi1_expectation": float(np.vdot(truth.psi1.amplitudes, full @ truth.psi1.amplitudes).real),
            "psi2_expectation": float(np.vdot(truth.psi2.amplitudes, full @ truth.psi2.amplitudes).real),
        }
    rows = report.rows()
    for row in rows:
        row["mode"] = cfg.mode
        row["truth"] = truths.get(str(row["quantity"]))
    warnings.extend(report.warnings)
    summary: Dict[str, Any] = {"psi2_expectation": report.psi2, "r_hat": report.r_hat,
                               "kappa_ref_abs": abs(report.ref.v12), "validation": cfg.validation}
    if cfg.validation:
        summary["psi2_truth"] = truths["psi2_expectation"]
    return RunResult(
        tables={"estimation.csv": (ESTIMATION_COLUMNS, rows)},
        manifest=manifest,
        summary=summary,
        warnings=warnings,
    )


def cmd_tomography(cfg: ExperimentConfig) -> RunResult:
    copies = [0] if cfg.mode == "analytic" else list(cfg.tomography_copies)
    cells = [(dim, m) for dim in cfg.tomography_dims for m in copies for _ in range(cfg.trials)]
    job = TomographyJob(cfg.master_seed, cfg.tomography_rank, cfg.reconstructor, cells)
    rows = run_indexed(_tomography_block, job, len(cells), cfg.workers)
    return RunResult(
        tables={"tomography_sweep.csv": (TOMOGRAPHY_COLUMNS, rows)},
        manifest={"reconstructor": cfg.reconstructor, "design": "two_level"},
        summary={"cells": len(rows),
                 "max_trace_error": max((r["trace_error"] for r in rows), default=0.0)},
    )


def cmd_davis_kahan(cfg: ExperimentConfig) -> RunResult:
    r_grid, eps_grid = default_dk_grid(cfg.dk_r_points, cfg.dk_eps_points)
    rows = dk_experiment(r_grid, eps_grid, relative=True)
    valid = [r["ratio"] for r in rows if not r["skipped"]]
    summary = {"points": len(rows), "valid": len(valid),
               "max_ratio": max(valid, default=float("nan")),
               "median_ratio": float(np.median(valid)) if valid else float("nan")}
    return RunResult(tables={"dk_ratio.csv": (DK_COLUMNS, rows)}, summary=summary)


def cmd_complexity(cfg: ExperimentConfig) -> RunResult:
    table = complexity_grid(cfg.grid_n, cfg.grid_r, cfg.grid_gamma, cfg.grid_eps, cfg.constants)
    ratios = [row["ratio"] for row in table.rows]
    return RunResult(
        tables={"complexity_grid.csv": (COMPLEXITY_COLUMNS, table.rows)},
        manifest={"complexity": table.metadata},
        summary={"rows": len(table.rows), "min_ratio": min(ratios), "max_ratio": max(ratios)},
    )


def cmd_resources(cfg: ExperimentConfig) -> RunResult:
    report = resource_counts(cfg.n_pixels, cfg.eps_st, snr=cfg.snr)
    rows = [{"quantity": k, "value": v} for k, v in report.to_dict().items()]
    return RunResult(tables={"resources.csv": (QV_COLUMNS, rows)}, summary=report.to_dict())


def cmd_selftest(cfg: ExperimentConfig) -> RunResult:
    from .selftest import run_checks

    results = run_checks(cfg.master_seed)
    rows = [{"check": name, "passed": ok, "detail": detail} for name, ok, detail in results]
    failed = [name for name, ok, _ in results if not ok]
    return RunResult(
        tables={"selftest.csv": (("check", "passed", "detail"), rows)},
        summary={"checks": len(rows), "failed": failed},
        failed=bool(failed),
    )


COMMAND_HANDLERS: Dict[str, Callable[[ExperimentConfig], RunResult]] = {
    "scene": cmd_scene,
    "filter": cmd_filter,
    "estimate": cmd_estimate,
    "tomography": cmd_tomography,
    "davis-kahan": cmd_davis_kahan,
    "complexity": cmd_complexity,
    "resources": cmd_resources,
    "selftest": cmd_selftest,
}


# ---------- entry point ----------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--seed", type=int, help="64-bit master seed")
    common.add_argument("--trials", type=int)
    common.add_argument("--shots", type=int)
    common.add_argument("--mode", choices=["ideal", "circuit", "analytic", "shot"])
    common.add_argument("--out", help="output directory")
    common.add_argument("--workers", type=int)
    common.add_argument("--scene", help="scene file (defaults to the bundled two-source scene)")
    common.add_argument("--gamma", type=float, help="override the scene noise level")
    common.add_argument("--validation", action="store_true", default=None,
                        help="estimate: take the reference and its prior from the scene truth")
    common.add_argument("--log-level", default=None)
    parser = argparse.ArgumentParser(prog="qpimaging", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def _flags(args: argparse.Namespace) -> Dict[str, Any]:
    return {
        "master_seed": args.seed,
        "trials": args.trials,
        "shots": args.shots,
        "mode": args.mode,
        "out": args.out,
        "workers": args.workers,
        "scene": args.scene,
        "gamma": args.gamma,
        "validation": args.validation,
    }


def _configure_logging(level: str) -> None:
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.WARNING),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def _record(command: str, digest: str, manifest: Dict[str, Any], status: str,
            duration_ms: int, warnings: List[str]) -> None:
    try:
        db.init_db()
        db.save_run(command, digest, manifest, status, duration_ms, warnings)
    except Exception as exc:
        # the ledger is optional; artifacts are already on disk
        logger.warning("run ledger not updated: %s", exc)
        warnings.append(f"run ledger not updated: {exc}")


def run(argv: Optional[Sequence[str]] = None, environ: Optional[Dict[str, str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    env = dict(os.environ if environ is None else environ)
    _configure_logging(args.log_level or env.get("QPIMAGING_LOG_LEVEL", "WARNING"))
    start = time.perf_counter()
    try:
        cfg = resolve_config(args.command, config_file=args.config, environ=env, flags=_flags(args))
        result = COMMAND_HANDLERS[cfg.command](cfg)
        body, digest = build_manifest(cfg, result.manifest)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        manifest = dict(body, manifest_hash=digest,
                        run={"out": cfg.out, "workers": cfg.workers},
                        outputs=sorted(result.tables))
        (out / "manifest.json").write_text(
            json.dumps(manifest, sort_keys=True, indent=2, default=_fmt) + "\n", encoding="utf-8")
        for name, (columns, rows) in result.tables.items():
            write_csv(out / name, columns, rows, digest)
    except QPImagingError as exc:
        print(json.dumps(exc.to_dict()), file=sys.stderr)
        return 2
    except Exception as exc:
        logger.exception("run failed")
        print(json.dumps({"code": "INTERNAL_ERROR", "message": str(exc), "hint": None}),
              file=sys.stderr)
        return 1
    duration_ms = int((time.perf_counter() - start) * 1000)
    status = "failed" if result.failed else "ok"
    _record(cfg.command, digest, body, status, duration_ms, result.warnings)
    print(json.dumps({"command": cfg.command, "status": status, "manifest_hash": digest,
                      "outputs": sorted(result.tables), "warnings": result.warnings,
                      **result.summary}, sort_keys=True, default=_fmt))
    return 1 if result.failed else 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

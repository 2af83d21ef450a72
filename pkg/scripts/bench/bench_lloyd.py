"""Time density-matrix exponentiation with fresh signal copies.

Writes scripts/bench/lloyd_results.csv with columns:
dim,mode,copies,elapsed_s,per_copy_ms
and appends a final comment line naming the faster evolution mode.
"""
from __future__ import annotations

import csv
import os
import sys
import time
from pathlib import Path
from typing import Dict, List

REPO = Path(__file__).resolve().parents[2]
if str(REPO) not in sys.path:
    sys.path.insert(0, str(REPO))
BENCH_DIR = Path(__file__).resolve().parent

from qpimaging.sim.numkit import random_density, random_state  # noqa: E402
from qpimaging.sim.qpca import PhotonStream, approx_exp_rho, make_rng  # noqa: E402


def run(dim: int, k: int, x: float, trajectory: bool) -> Dict:
    rng = make_rng(dim)
    rho = random_density(dim, rng, rank=2)
    memory = random_state(dim, rng) if trajectory else random_density(dim, rng)
    stream = PhotonStream(rho, seed=dim)
    start = time.perf_counter()
    _, used = approx_exp_rho(memory, x, k, stream)
    elapsed = time.perf_counter() - start
    return {
        "dim": dim,
        "mode": "trajectory" if trajectory else "density",
        "copies": used,
        "elapsed_s": elapsed,
        "per_copy_ms": elapsed / max(used, 1) * 1e3,
    }


def main() -> None:
    dims = [int(d) for d in os.environ.get("QPIMAGING_BENCH_DIM", "8,16").split(",")]
    k = int(os.environ.get("QPIMAGING_BENCH_K", "200"))
    x = float(os.environ.get("QPIMAGING_BENCH_X", "1.0"))
    rows: List[Dict] = [run(dim, k, x, traj) for dim in dims for traj in (False, True)]

    totals: Dict[str, float] = {}
    for r in rows:
        totals[r["mode"]] = totals.get(r["mode"], 0.0) + r["elapsed_s"]
    faster = min(totals, key=totals.get)

    out_csv = BENCH_DIR / "lloyd_results.csv"
    with out_csv.open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["dim", "mode", "copies", "elapsed_s", "per_copy_ms"])
        for r in rows:
            w.writerow([r["dim"], r["mode"], r["copies"], f"{r['elapsed_s']:.9f}",
                        f"{r['per_copy_ms']:.6f}"])
        f.write(f"# Faster (total time across dims): {faster}\n")
    print(str(out_csv))


if __name__ == "__main__":
    main()

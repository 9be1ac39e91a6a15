"""Sequential vs Gibbs basis selection on the CG and wave desk problems.

Usage: python3 demos/compare_samplers.py [n_seeds]
"""

import logging
import sys
import time

from bayesms.coeff import generate_channel_field
from bayesms.march import Run, RunPlan
from bayesms.mesh import build_hierarchy

CASES = {
    "cg": (dict(nx=50, nc=10, background=1.0),
           dict(formulation="cg", t_end=0.2, n_intervals=2, n_perm=2, n_candidates=8,
                n_sweeps=12)),
    "wave": (dict(nx=50, nc=5, background=1e-3),
             dict(formulation="ipdg", t_end=0.1, n_intervals=5, steps_per_interval=10,
                  n_perm=2, n_candidates=4, n_sweeps=10)),
}


def main(n_seeds=3):
    logging.basicConfig(level=logging.ERROR)
    for name, (mesh, plan_kw) in CASES.items():
        h = build_hierarchy(mesh["nx"], mesh["nx"], mesh["nc"], mesh["nc"])
        field = generate_channel_field(h, mesh["background"], 1000.0, 4, seed=7)
        for seed in range(n_seeds):
            row = []
            for sampler in ("sequential", "gibbs"):
                t0 = time.perf_counter()
                res = Run(RunPlan(sampler=sampler, seed=seed, **plan_kw), h, field).run()[-1]
                row.append(f"{sampler} {res.mean_error:.2%} ({time.perf_counter() - t0:.1f}s)")
            print(f"{name} seed {seed}: " + ", ".join(row))


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 3)

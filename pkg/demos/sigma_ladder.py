"""Basis count and mean error of Gibbs chains as the likelihood scale shrinks."""

import logging

import numpy as np

from bayesms.coeff import generate_channel_field
from bayesms.march import Run, RunPlan
from bayesms.mesh import build_hierarchy
from bayesms.sampler import burn_in_records


def main():
    logging.basicConfig(level=logging.ERROR)
    h = build_hierarchy(50, 50, 10, 10)
    field = generate_channel_field(h, 1.0, 1000.0, 4, seed=7)
    catalog = None
    for sigma in (1e-2, 1e-3, 1e-4):
        plan = RunPlan(formulation="cg", t_end=0.2, n_intervals=2, n_perm=2, n_candidates=8,
                       sampler="gibbs", n_sweeps=30, sigma_L=sigma)
        run = Run(plan, h, field, catalog=catalog)
        catalog = run.catalog(0)
        final = run.run()[-1]
        count = np.mean([r.selection.n_candidates for r in burn_in_records(final.chain, 0.25)])
        print(f"sigma_L {sigma:.0e}: {count:6.1f} candidates, mean error {final.mean_error:.2%}")


if __name__ == "__main__":
    main()

"""Start-independence of the two-step Gibbs sampler for parametric quasi-Poisson.

Runs one chain per starting value of phi and compares the phi-marginal means
with their Monte Carlo standard errors and with the moment estimate.
"""

import argparse
import math

import numpy as np

from quasibart.family import QuasiFamily
from quasibart.parametric import ParametricModel, fit_mqle, two_step_gibbs
from quasibart.summaries import effective_sample_size
from quasibart.synth import gen_qpois


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--phi", type=float, default=2.0)
    p.add_argument("--iters", type=int, default=40000)
    p.add_argument("--burnin", type=int, default=2000)
    p.add_argument("--starts", type=float, nargs="+", default=[0.1, 0.5, 2.0, 5.0, 10.0])
    p.add_argument("--truncation", type=float, nargs=2, default=[0.1, 10.0])
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    data = gen_qpois(args.n, (1.0, 0.5), args.phi, args.seed)
    model = ParametricModel(np.column_stack([np.ones(args.n), data.x]), QuasiFamily("poisson"))
    phi_hat = fit_mqle(model, data.dataset).phi_moment
    print(f"moment estimate {phi_hat:.4f}")
    for i, phi0 in enumerate(args.starts):
        g = two_step_gibbs(model, data.dataset, tuple(args.truncation), args.iters,
                           np.random.default_rng(args.seed + 1 + i), burn_in=args.burnin, phi0=phi0)
        ess = effective_sample_size(g.phi)
        mcse = g.phi.std(ddof=1) / math.sqrt(ess)
        print(f"start {phi0:6.2f}: mean {g.phi.mean():.4f} (MCSE {mcse:.4f}, ESS {ess:.0f}), "
              f"beta acceptance {g.acceptance_rate:.2f}")


if __name__ == "__main__":
    main()

"""Recover the Van der Pol mu from a noiseless trajectory, from several initial guesses."""
import argparse

from ncode.train import OptState
from ncode.tasks import fit_vdp, vdp_observe


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--mu", type=float, nargs="+", default=[1.0, 2.0])
    p.add_argument("--T", type=float, default=5.0)
    p.add_argument("--steps", type=int, default=300)
    args = p.parse_args()
    print("mu_star,init,mu_hat,steps")
    for mu_star in args.mu:
        obs = vdp_observe(mu_star, T=args.T, n_obs=101)
        for init in (0.5 * mu_star, 1.5 * mu_star):
            fit = fit_vdp(obs, init, OptState("adam", 0.05), steps=args.steps)
            print(f"{mu_star:g},{init:g},{fit.mu_hat:.6f},{len(fit.history)}", flush=True)


if __name__ == "__main__":
    main()

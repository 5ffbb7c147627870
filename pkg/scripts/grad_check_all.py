"""Adjoint vs finite differences for every task preset; prints the worst relative error per spec."""
import argparse

from ncode.numcore import Rng
from ncode.tasks import TaskSpec, preset_model, task_grad_check

SPECS = [
    ("reflection", "ncode", {}), ("reflection", "node", {}), ("reflection", "closed", {}),
    ("annuli", "ncode", {}), ("annuli", "node", {}),
    ("latent_flow_ae", "ncode", {}), ("latent_flow_ae", "sparse", {}),
    ("memorize", None, {"n_bits": 4, "n_patterns": 2}),
    ("vdp_fit", None, {"vdp_T": 3.0}),
]


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--draws", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    print("task,variant,max_rel_err,worst_coord")
    for name, variant, kw in SPECS:
        model = preset_model(name, variant) if variant else None
        rep = task_grad_check(TaskSpec(name, **kw), model, Rng(args.seed), n_draws=args.draws)
        print(f"{name},{variant or '-'},{rep.max_rel_err:.3e},{rep.rows[0][0]}", flush=True)


if __name__ == "__main__":
    main()

"""Reflection x -> -x: open-loop N-CODE vs a vanilla NODE over several seeds.

Writes one metrics CSV per (variant, seed) and prints the final train MSE.
"""
import argparse
from pathlib import Path

from ncode.numcore import Rng
from ncode.tasks import PRESET_SOLVER, TaskSpec, preset_model
from ncode.train import FlowModel, OptState, train_run, write_metrics_csv


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--out", default="runs/script_reflection")
    args = p.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    task = TaskSpec("reflection", n_train=256, n_eval=500)
    print("variant,seed,train_mse,steps")
    for variant in ("ncode", "node", "closed"):
        for seed in range(args.seeds):
            fm = FlowModel(preset_model("reflection", variant), PRESET_SOLVER["reflection"])
            res = train_run(task, fm, OptState(lr=args.lr), 10**6, 64, Rng(seed), eval_every=50,
                            max_steps=args.steps)
            mse = fm.evaluate(res.params, res.data.x_train, res.data.y_train)[0]
            write_metrics_csv(res.metrics, out / f"{variant}_{seed}.csv")
            print(f"{variant},{seed},{mse:.3e},{res.steps}", flush=True)


if __name__ == "__main__":
    main()

"""Latent linear-flow autoencoder on synthetic 2-factor data, dense vs 2-per-row sparse theta."""
import argparse
from pathlib import Path

from ncode.tasks import TaskSpec, latent_model, toy_autoencode
from ncode.train import TrainConfig, write_metrics_csv


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--m", type=int, nargs="+", default=[2, 4])
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--out", default="runs/script_latent")
    args = p.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    task = TaskSpec("latent_flow_ae", n_train=512, n_eval=500)
    print("m,theta,seed,final_mse,best_mse")
    for m in args.m:
        for sparse in (False, True):
            for seed in range(args.seeds):
                train = TrainConfig(lr=1e-2, epochs=args.epochs, batch_size=64, eval_every=5, halve_patience=2,
                                    seed=seed)
                res = toy_autoencode(task, train, latent_model(task, m=m, sparse=sparse))
                kind = "sparse" if sparse else "dense"
                write_metrics_csv(res.metrics, out / f"m{m}_{kind}_{seed}.csv")
                best = min(r.eval_loss for r in res.metrics if r.epoch % 5 == 0 or r is res.metrics[-1])
                print(f"{m},{kind},{seed},{res.metrics[-1].eval_loss:.3e},{best:.3e}", flush=True)


if __name__ == "__main__":
    main()

"""Hebbian closed-loop memorization: untrained baseline, then training on fresh episodes."""
import argparse
from pathlib import Path

from ncode.control import ControlledDynamics
from ncode.numcore import Rng
from ncode.tasks import TaskSpec, evaluate_memorize, memorize_spec, train_memorize
from ncode.train import TrainConfig, write_metrics_csv


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--bits", type=int, default=100)
    p.add_argument("--patterns", type=int, default=3)
    p.add_argument("--episodes", type=int, default=1000, help="training episodes in total")
    p.add_argument("--batch", type=int, default=20)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="runs/script_memorize")
    args = p.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    task = TaskSpec("memorize", n_bits=args.bits, n_patterns=args.patterns, n_train=100)
    dyn = ControlledDynamics(memorize_spec(args.bits))
    deg, full, _ = evaluate_memorize(dyn, dyn.init_mu(Rng(args.seed)), task, Rng(99))
    print(f"untrained: per-bit error {full:.3f}, degraded-bit error {deg:.3f}")
    res = train_memorize(task, TrainConfig(lr=args.lr, epochs=max(1, args.episodes // 100), batch_size=args.batch,
                                           seed=args.seed), log=lambda m: print(
        f"epoch {m.epoch}: train {m.train_loss:.4f} degraded-bit error {m.eval_loss:.4f}", flush=True))
    write_metrics_csv(res.metrics, out / "metrics.csv")
    print(f"trained: per-bit error {res.eval_error_all:.4f}, degraded-bit error {res.eval_error:.4f}")


if __name__ == "__main__":
    main()

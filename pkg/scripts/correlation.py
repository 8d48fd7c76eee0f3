"""Kappa vs ASR/ACC over random architectures on the synthetic task.

    python scripts/correlation.py --archs 16 --out runs/correlation
"""
import argparse
import os

from nasbackdoor.data import SyntheticSpec, make_synthetic_splits
from nasbackdoor.evalkit import StudyConfigs, correlation_study
from nasbackdoor.ntkscore import ScoreConfig
from nasbackdoor.plots import emit_plots
from nasbackdoor.trainer import TrainConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--archs", type=int, default=16)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--out", default="runs/correlation")
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)

    train, test = make_synthetic_splits(SyntheticSpec(), args.seed)
    configs = StudyConfigs(
        score=ScoreConfig(batch_size=32, num_inits=3, base_seed=args.seed),
        clean=TrainConfig(epochs=20, seed=args.seed),
        backdoor=TrainConfig(mask_epochs=25, mark_epochs=10, seed=args.seed),
        net_seed=args.seed, gen_seed=args.seed, arch_seed=args.seed, workers=args.workers,
    )

    def progress(i, row):
        print(f"{i:3d} kappa={row.kappa:.4g} acc={row.acc:.3f} asr={row.asr:.3f} {row.arch} {row.error}",
              flush=True)

    table = correlation_study(args.archs, train, test, configs, progress=progress)
    table.write_csv(os.path.join(args.out, "correlation.csv"))
    emit_plots(table, args.out)
    for k, v in table.summary().items():
        print(f"{k}={v!r}")


if __name__ == "__main__":
    main()

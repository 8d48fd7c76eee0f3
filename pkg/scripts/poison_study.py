"""Backdoor a cell, then fine-tune it on data poisoned at several ratios.

    python scripts/poison_study.py --arch '|nor_conv_3x3~0|+|nor_conv_3x3~0|nor_conv_1x1~1|+|skip_connect~0|nor_conv_3x3~1|nor_conv_1x1~2|'
"""
import argparse
import copy
import os

from nasbackdoor.archspace import parse_arch
from nasbackdoor.data import SyntheticSpec, make_synthetic_splits
from nasbackdoor.evalkit import Q1Runner, StudyConfigs, evaluate
from nasbackdoor.ntkscore import ScoreConfig
from nasbackdoor.plots import emit_poison_plot, write_poison_data
from nasbackdoor.trainer import TrainConfig, fine_tune, make_poisoned_dataset


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--arch", required=True)
    ap.add_argument("--ratios", default="0,0.001,0.01")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/poison")
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)

    train, test = make_synthetic_splits(SyntheticSpec(), args.seed)
    configs = StudyConfigs(
        score=ScoreConfig(base_seed=args.seed),
        clean=TrainConfig(epochs=20, seed=args.seed),
        backdoor=TrainConfig(mask_epochs=25, mark_epochs=10, seed=args.seed),
        net_seed=args.seed, gen_seed=args.seed,
    )
    net, gen, rep = Q1Runner(train, test, configs).run(parse_arch(args.arch))
    print(f"before fine-tuning acc={rep.acc:.3f} asr={rep.asr:.3f}")

    t = configs.backdoor.target_class
    ratios = [float(r) for r in args.ratios.split(",")]
    asr, acc = [], []
    for ratio in ratios:
        data = make_poisoned_dataset(train, gen, ratio, t, seed=args.seed) if ratio > 0 else train
        tuned, _ = fine_tune(copy.deepcopy(net), data, TrainConfig.finetune_defaults())
        r = evaluate(tuned, gen, test, t)
        asr.append(r.asr)
        acc.append(r.acc)
        print(f"ratio={ratio:g} acc={r.acc:.3f} asr={r.asr:.3f}", flush=True)
    write_poison_data(ratios, asr, acc, os.path.join(args.out, "poison_study.csv"))
    emit_poison_plot(ratios, asr, acc, args.out)


if __name__ == "__main__":
    main()

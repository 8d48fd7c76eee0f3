"""Search for a low-kappa cell, then backdoor it and report ACC/ASR.

Compares the searched cell against a random cell and the residual baseline
under the same clean and generator budgets.

    python scripts/search_attack.py --iters 40 --out runs/search_attack
"""
import argparse
import os

import numpy as np

from nasbackdoor.archspace import format_arch, random_arch
from nasbackdoor.checkpoint import save_generator, save_network
from nasbackdoor.data import SyntheticSpec, make_synthetic_splits
from nasbackdoor.evalkit import Q1Runner, StudyConfigs, evaluate
from nasbackdoor.evosearch import SearchConfig, run_search, write_search_log
from nasbackdoor.netbuilder import InitSpec, build_residual_baseline
from nasbackdoor.ntkscore import ScoreConfig, make_score_fn
from nasbackdoor.trainer import TrainConfig, train_clean, train_generator


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--iters", type=int, default=40)
    ap.add_argument("--pool", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/search_attack")
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)

    train, test = make_synthetic_splits(SyntheticSpec(), args.seed)
    configs = StudyConfigs(
        score=ScoreConfig(batch_size=32, num_inits=3, base_seed=args.seed),
        clean=TrainConfig(epochs=20, seed=args.seed),
        backdoor=TrainConfig(mask_epochs=25, mark_epochs=10, seed=args.seed),
        net_seed=args.seed, gen_seed=args.seed, arch_seed=args.seed,
    )
    score_fn = make_score_fn(train, configs.skel, configs.gcfg, configs.score)
    scfg = SearchConfig(pool_size=args.pool, sample_size=min(3, args.pool), max_iterations=args.iters, seed=args.seed)
    best, st = run_search(scfg, score_fn, on_step=lambda s: print(f"iter {s.iteration} best {s.best_score:.4g}",
                                                                     flush=True))
    write_search_log(st, os.path.join(args.out, "search_log.csv"))

    runner = Q1Runner(train, test, configs)
    rows = []
    for name, arch in (("searched", best), ("random", random_arch(np.random.default_rng(args.seed + 1)))):
        net, gen, rep = runner.run(arch)
        save_network(net, os.path.join(args.out, f"net_{name}.zip"))
        save_generator(gen, os.path.join(args.out, f"gen_{name}.zip"))
        rows.append((name, format_arch(arch), rep.acc, rep.asr))

    net = build_residual_baseline(configs.skel, InitSpec(seed=args.seed))
    net, _ = train_clean(net, train, configs.clean)
    gen, _ = train_generator(runner.base_generator(), net, train, configs.backdoor)
    rep = evaluate(net, gen, test, configs.backdoor.target_class)
    rows.append(("resnet", "resnet", rep.acc, rep.asr))

    with open(os.path.join(args.out, "compare.csv"), "w") as fh:
        fh.write("model,arch,acc,asr\n")
        for r in rows:
            fh.write(f"{r[0]},{r[1]},{r[2]!r},{r[3]!r}\n")
            print(f"{r[0]:9s} acc={r[2]:.3f} asr={r[3]:.3f} {r[1]}")


if __name__ == "__main__":
    main()

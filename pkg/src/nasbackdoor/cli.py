"""Command-line experiment runner.

Every subcommand reads the flat config (``--config`` file plus ``--set
key=value`` overrides), writes the effective config to
``<out_dir>/config.txt`` and its artifacts next to it.  Exit status: 0 on
success, 1 on a runtime failure, 2 on a usage or configuration error.
"""
from __future__ import annotations

import argparse
import copy
import logging
import os
import sys

import numpy as np

from . import config as config_mod
from .archspace import ArchParseError, format_arch, parse_arch, random_arch
from .checkpoint import load_generator, load_network, save_generator, save_network
from .data import LabeledDataset, load_cifar10_binary, make_synthetic
from .evalkit import (
    StudyConfigs,
    StudyTable,
    accuracy,
    correlation_study,
    evaluate,
    landscape_study,
    op_enumeration_study,
)
from .evosearch import run_search, write_search_log, write_state
from .netbuilder import InitSpec, build_network, build_residual_baseline
from .ntkscore import make_score_fn, score_arch, write_score_csv
from .plots import emit_plots, emit_poison_plot, read_poison_data, write_poison_data, write_scatter_data
from .trainer import (
    fine_tune,
    make_poisoned_dataset,
    retrain_scratch,
    train_clean,
    train_generator,
    train_joint,
    write_trace_csv,
)
from .triggergen import build_generator

log = logging.getLogger("nasbackdoor")

SUBCOMMANDS = (
    "sample", "score", "search", "train-clean", "train-backdoor", "finetune",
    "retrain", "eval", "correlate", "enumerate", "landscape", "plot",
)


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- helpers

def load_data(cfg) -> tuple[LabeledDataset, LabeledDataset]:
    d = cfg.data
    if d.kind == "synthetic":
        return make_synthetic(d.synthetic, cfg.seed, "train"), make_synthetic(d.synthetic, cfg.seed, "test")
    if d.kind == "cifar10":
        if not d.train_path or not d.test_path:
            raise UsageError("data.kind=cifar10 needs data.train_path and data.test_path")
        return load_cifar10_binary(d.train_path), load_cifar10_binary(d.test_path)
    raise UsageError(f"unknown data.kind {d.kind!r}")


def sync_shapes(cfg, data: LabeledDataset) -> None:
    """Input shape and class count follow the dataset."""
    shape = tuple(int(v) for v in data.images.shape[1:])
    cfg.skel.input_shape = shape
    cfg.skel.num_classes = max(cfg.skel.num_classes, data.num_classes)
    cfg.gen.input_shape = shape
    cfg.skel.__post_init__()
    cfg.gen.__post_init__()


def study_configs(cfg) -> StudyConfigs:
    return StudyConfigs(
        skel=cfg.skel, gcfg=cfg.gen, score=cfg.score, clean=cfg.train, backdoor=cfg.backdoor,
        net_seed=cfg.seed, gen_seed=cfg.seed, arch_seed=cfg.seed, workers=cfg.workers,
    )


def out_path(cfg, name: str) -> str:
    return os.path.join(cfg.out_dir, name)


def parse_arch_arg(text: str):
    try:
        return parse_arch(text)
    except ArchParseError as exc:
        raise UsageError(str(exc)) from None


def build_target(cfg, arch_text: str, seed: int):
    init = InitSpec(seed=seed)
    if arch_text == "resnet":
        return build_residual_baseline(cfg.skel, init)
    return build_network(parse_arch_arg(arch_text), cfg.skel, init)


def write_eval(path, rows: list[tuple[str, object]]) -> None:
    with open(path, "w") as fh:
        fh.write("metric,value\n")
        for k, v in rows:
            fh.write(f"{k},{v!r}\n" if isinstance(v, float) else f"{k},{v}\n")


def eval_rows(rep) -> list[tuple[str, object]]:
    return [("acc", rep.acc), ("asr", rep.asr), ("n_clean", rep.n_clean),
            ("n_triggered", rep.n_triggered), ("target", rep.target)]


def print_progress(i, row):
    log.info("%d %s kappa=%s acc=%.4f asr=%.4f %s", i, row.arch, row.kappa, row.acc, row.asr, row.error)


# ---------------------------------------------------------------- commands

def cmd_sample(cfg, args, data):
    rng = np.random.default_rng(cfg.seed)
    lines = [format_arch(random_arch(rng)) for _ in range(args.n)]
    with open(out_path(cfg, "sample.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print("\n".join(lines))


def cmd_score(cfg, args, data):
    train, _ = data
    rep = score_arch(parse_arch_arg(args.arch), train, cfg.skel, cfg.gen, cfg.score)
    write_score_csv([rep], out_path(cfg, "scores.csv"), append=True)
    print(f"kappa={rep.kappa!r}")


def cmd_search(cfg, args, data):
    train, _ = data
    score_fn = make_score_fn(train, cfg.skel, cfg.gen, cfg.score)
    best, st = run_search(cfg.search, score_fn,
                          on_step=lambda s: log.info("iter %d best %s", s.iteration, s.best_score))
    write_search_log(st, out_path(cfg, "search_log.csv"))
    write_state(st, out_path(cfg, "search_state.json"))
    with open(out_path(cfg, "best_arch.txt"), "w") as fh:
        fh.write(format_arch(best) + "\n")
    print(format_arch(best))
    print(f"score={st.best_score!r}")


def cmd_train_clean(cfg, args, data):
    train, test = data
    net = build_target(cfg, args.arch, cfg.seed)
    net, trace = train_clean(net, train, cfg.train)
    save_network(net, out_path(cfg, "net.zip"))
    write_trace_csv(trace, out_path(cfg, "trace_clean.csv"))
    acc = accuracy(net, test)
    write_eval(out_path(cfg, "eval_clean.csv"), [("acc", acc)])
    print(f"acc={acc!r}")


def cmd_train_backdoor(cfg, args, data):
    train, test = data
    gen = build_generator(cfg.gen, InitSpec(seed=cfg.seed))
    t = cfg.backdoor.target_class
    if args.joint:
        if not args.arch:
            raise UsageError("--joint needs --arch")
        net = build_target(cfg, args.arch, cfg.seed)
        net, gen, trace = train_joint(net, gen, train, cfg.backdoor)
        save_network(net, out_path(cfg, "net.zip"))
    else:
        if args.net:
            net = load_network(args.net)
        elif args.arch:
            net = build_target(cfg, args.arch, cfg.seed)
            net, ctrace = train_clean(net, train, cfg.train)
            write_trace_csv(ctrace, out_path(cfg, "trace_clean.csv"))
            save_network(net, out_path(cfg, "net.zip"))
        else:
            raise UsageError("train-backdoor needs --net or --arch")
        gen, trace = train_generator(gen, net, train, cfg.backdoor)
    save_generator(gen, out_path(cfg, "gen.zip"))
    write_trace_csv(trace, out_path(cfg, "trace_backdoor.csv"))
    rep = evaluate(net, gen, test, t)
    write_eval(out_path(cfg, "eval.csv"), eval_rows(rep))
    print(f"acc={rep.acc!r} asr={rep.asr!r}")


def cmd_finetune(cfg, args, data):
    train, test = data
    base = load_network(args.net)
    gen = load_generator(args.gen) if args.gen else None
    ratios = [float(r) for r in args.poison_ratios.split(",")] if args.poison_ratios else [0.0]
    if any(r > 0 for r in ratios) and gen is None:
        raise UsageError("poisoned fine-tuning needs --gen")
    t = cfg.finetune.target_class
    asr, acc = [], []
    for k, ratio in enumerate(ratios):
        net = copy.deepcopy(base)
        ft_data = make_poisoned_dataset(train, gen, ratio, t, seed=cfg.seed) if ratio > 0 else train
        net, trace = fine_tune(net, ft_data, cfg.finetune)
        suffix = "" if len(ratios) == 1 else f"_{k}"
        save_network(net, out_path(cfg, f"net_finetuned{suffix}.zip"))
        write_trace_csv(trace, out_path(cfg, f"trace_finetune{suffix}.csv"))
        if gen is not None:
            rep = evaluate(net, gen, test, t)
            asr.append(rep.asr)
            acc.append(rep.acc)
        else:
            acc.append(accuracy(net, test))
            asr.append(float("nan"))
        print(f"ratio={ratio!r} acc={acc[-1]!r} asr={asr[-1]!r}")
    write_poison_data(ratios, asr, acc, out_path(cfg, "poison_study.csv"))


def cmd_retrain(cfg, args, data):
    train, test = data
    gen = load_generator(args.gen)
    new_seed = args.new_seed if args.new_seed is not None else cfg.seed + 1
    net, trace = retrain_scratch(parse_arch_arg(args.arch), gen, train, cfg.skel, cfg.train,
                                 original_seed=cfg.seed, new_seed=new_seed)
    save_network(net, out_path(cfg, "net_retrained.zip"))
    write_trace_csv(trace, out_path(cfg, "trace_retrain.csv"))
    rep = evaluate(net, gen, test, cfg.backdoor.target_class)
    write_eval(out_path(cfg, "eval_retrain.csv"), eval_rows(rep) + [("init_seed", new_seed)])
    print(f"acc={rep.acc!r} asr={rep.asr!r}")


def cmd_eval(cfg, args, data):
    _, test = data
    net = load_network(args.net)
    gen = load_generator(args.gen)
    rep = evaluate(net, gen, test, cfg.backdoor.target_class)
    write_eval(out_path(cfg, "eval.csv"), eval_rows(rep))
    print(f"acc={rep.acc!r} asr={rep.asr!r}")


def _finish_study(cfg, table: StudyTable, name: str):
    table.write_csv(out_path(cfg, f"{name}.csv"))
    write_scatter_data(table, out_path(cfg, f"{name}_scatter.csv"))
    for k, v in table.summary().items():
        print(f"{k}={v!r}")


def cmd_correlate(cfg, args, data):
    train, test = data
    table = correlation_study(args.archs, train, test, study_configs(cfg), progress=print_progress)
    _finish_study(cfg, table, "correlation")


def _edges(text: str) -> list[int]:
    try:
        return [int(e) for e in text.split(",") if e.strip()]
    except ValueError:
        raise UsageError(f"bad edge list {text!r}") from None


def cmd_enumerate(cfg, args, data):
    train, test = data
    ops = [o.strip() for o in args.ops.split(",") if o.strip()]
    table = op_enumeration_study(parse_arch_arg(args.base), _edges(args.edges), ops, train, test,
                                 study_configs(cfg), budget_cap=args.budget, progress=print_progress)
    _finish_study(cfg, table, "enumeration")


def cmd_landscape(cfg, args, data):
    train, test = data
    table = landscape_study(parse_arch_arg(args.base), _edges(args.edges), train, test,
                            study_configs(cfg), progress=print_progress)
    _finish_study(cfg, table, "landscape")


def cmd_plot(cfg, args, data):
    if not args.study and not args.poison:
        raise UsageError("plot needs --study and/or --poison")
    paths = []
    if args.study:
        paths += emit_plots(StudyTable.read_csv(args.study), cfg.out_dir)
    if args.poison:
        paths += emit_poison_plot(*read_poison_data(args.poison), cfg.out_dir)
    print("\n".join(paths))


COMMANDS = {
    "sample": cmd_sample, "score": cmd_score, "search": cmd_search,
    "train-clean": cmd_train_clean, "train-backdoor": cmd_train_backdoor,
    "finetune": cmd_finetune, "retrain": cmd_retrain, "eval": cmd_eval,
    "correlate": cmd_correlate, "enumerate": cmd_enumerate,
    "landscape": cmd_landscape, "plot": cmd_plot,
}
NEEDS_DATA = set(COMMANDS) - {"sample", "plot"}


# ---------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(2)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--out", help="output directory (out_dir)")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--workers", type=int, help="concurrent study rows")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="nasbackdoor", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("sample", parents=[common], help="print random architecture strings")
    s.add_argument("--n", type=int, default=5)

    s = sub.add_parser("score", parents=[common], help="NTK condition-number score of one arch")
    s.add_argument("--arch", required=True)

    s = sub.add_parser("search", parents=[common], help="aging-evolution search on the NTK score")
    s.add_argument("--pool", type=int)
    s.add_argument("--sample", type=int)
    s.add_argument("--iters", type=int)

    s = sub.add_parser("train-clean", parents=[common], help="clean-train an arch (or 'resnet')")
    s.add_argument("--arch", required=True)

    s = sub.add_parser("train-backdoor", parents=[common],
                       help="train a trigger generator against a clean model (or --joint)")
    s.add_argument("--net", help="clean-trained network archive")
    s.add_argument("--arch", help="arch to clean-train first (or to train jointly)")
    s.add_argument("--joint", action="store_true", help="update model and generator together")

    s = sub.add_parser("finetune", parents=[common], help="clean or poisoned fine-tuning")
    s.add_argument("--net", required=True)
    s.add_argument("--gen")
    s.add_argument("--poison-ratios", help="comma-separated poisoning ratios, e.g. 0,0.001,0.01")

    s = sub.add_parser("retrain", parents=[common], help="re-train an arch from scratch with a new seed")
    s.add_argument("--arch", required=True)
    s.add_argument("--gen", required=True)
    s.add_argument("--new-seed", type=int)

    s = sub.add_parser("eval", parents=[common], help="ACC and ASR of a network/generator pair")
    s.add_argument("--net", required=True)
    s.add_argument("--gen", required=True)

    s = sub.add_parser("correlate", parents=[common], help="kappa vs ASR/ACC over random archs")
    s.add_argument("--archs", type=int, default=16)

    s = sub.add_parser("enumerate", parents=[common], help="evaluate all operator combos on chosen edges")
    s.add_argument("--base", required=True)
    s.add_argument("--edges", required=True, help="comma-separated edge indices 0..5")
    s.add_argument("--ops", default="nor_conv_1x1,nor_conv_3x3")
    s.add_argument("--budget", type=int, default=64)

    s = sub.add_parser("landscape", parents=[common], help="5x5 slice over two edges")
    s.add_argument("--base", required=True)
    s.add_argument("--edges", required=True, help="two comma-separated edge indices")

    s = sub.add_parser("plot", parents=[common], help="scatter / poisoning plots from study files")
    s.add_argument("--study")
    s.add_argument("--poison")
    return p


def resolve_config(args) -> config_mod.ExperimentConfig:
    cfg = config_mod.load(args.config) if args.config else config_mod.ExperimentConfig()
    overrides = list(args.set)
    if args.out:
        overrides.append(f"out_dir={args.out}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.workers is not None:
        overrides.append(f"workers={args.workers}")
    if args.command == "search":
        for flag, key in (("pool", "pool_size"), ("sample", "sample_size"), ("iters", "max_iterations")):
            if getattr(args, flag) is not None:
                overrides.append(f"search.{key}={getattr(args, flag)}")
    return config_mod.parse_lines(overrides, cfg)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        os.makedirs(cfg.out_dir, exist_ok=True)
        data = None
        if args.command in NEEDS_DATA:
            data = load_data(cfg)
            sync_shapes(cfg, data[0])
        config_mod.dump(cfg, out_path(cfg, "config.txt"))
        COMMANDS[args.command](cfg, args, data)
    except (config_mod.ConfigError, UsageError) as exc:
        print(f"nasbackdoor {args.command}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"nasbackdoor {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def entrypoint():
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()

"""Clean accuracy, attack success rate and the architecture studies built on them."""
from __future__ import annotations

import csv
import io
import copy
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .archspace import OPERATORS, ArchSpec, format_arch, neighbors_on_edges, random_arch
from .data import LabeledDataset
from .netbuilder import InitSpec, SkeletonConfig, build_network
from .ntkscore import ScoreConfig, score_arch
from .trainer import TrainConfig, pretrain_mask, train_clean, train_generator, triggered_images
from .triggergen import GeneratorConfig, TriggerGenerator, build_generator


@dataclass
class EvalReport:
    acc: float
    asr: float
    n_clean: int
    n_triggered: int
    target: int


@torch.no_grad()
def predict(net, images: torch.Tensor, batch_size: int = 512) -> torch.Tensor:
    net.eval()
    dtype = next(net.parameters()).dtype
    out = [net(images[s:s + batch_size].to(dtype)).argmax(1) for s in range(0, images.shape[0], batch_size)]
    return torch.cat(out)


def accuracy(net, data: LabeledDataset) -> float:
    if len(data) == 0:
        raise ValueError("empty dataset")
    return (predict(net, data.images) == data.labels).double().mean().item()


def attack_success_rate(net, gen: TriggerGenerator, data: LabeledDataset, t: int) -> float:
    """Fraction of triggered inputs whose true label is not ``t`` that are classified as ``t``."""
    keep = data.labels != t
    if not keep.any():
        raise ValueError(f"no samples with label != {t}")
    x = triggered_images(gen, data.images[keep])
    return (predict(net, x) == t).double().mean().item()


def evaluate(net, gen: TriggerGenerator, data: LabeledDataset, t: int) -> EvalReport:
    return EvalReport(
        acc=accuracy(net, data),
        asr=attack_success_rate(net, gen, data, t),
        n_clean=len(data),
        n_triggered=int((data.labels != t).sum()),
        target=t,
    )


def _ranks(v: np.ndarray) -> np.ndarray:
    # average ranks for ties
    order = np.argsort(v, kind="mergesort")
    ranks = np.empty(len(v), dtype=np.float64)
    sv = v[order]
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    """Pearson r; NaN when either input is constant or fewer than 2 points."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if len(x) < 2:
        return math.nan
    dx, dy = x - x.mean(), y - y.mean()
    den = math.sqrt(float(dx @ dx) * float(dy @ dy))
    if den == 0:
        return math.nan
    return float(dx @ dy) / den


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Spearman rho (Pearson on average ranks); +inf entries rank last."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    return pearson(_ranks(x), _ranks(y))


@dataclass
class StudyRow:
    arch: str
    kappa: float
    acc: float
    asr: float
    seeds: str = ""
    error: str = ""


@dataclass
class StudyTable:
    rows: list[StudyRow]
    header: dict = field(default_factory=dict)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows if not r.error], dtype=np.float64)

    def summary(self) -> dict[str, float]:
        k, asr, acc = self.column("kappa"), self.column("asr"), self.column("acc")
        finite = np.isfinite(k)
        return {
            "spearman_kappa_asr": spearman(k, asr),
            "spearman_kappa_acc": spearman(k, acc),
            # Pearson on log-kappa over finite rows
            "pearson_logkappa_asr": pearson(np.log(k[finite]), asr[finite]) if finite.sum() > 1 else math.nan,
            "pearson_logkappa_acc": pearson(np.log(k[finite]), acc[finite]) if finite.sum() > 1 else math.nan,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        for key in sorted(self.header):
            buf.write(f"# {key}={self.header[key]}\n")
        for key, val in self.summary().items():
            buf.write(f"# summary.{key}={val!r}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["arch", "kappa", "acc", "asr", "seeds", "error"])
        for r in self.rows:
            w.writerow([r.arch, repr(float(r.kappa)), repr(float(r.acc)), repr(float(r.asr)), r.seeds, r.error])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())

    @classmethod
    def read_csv(cls, path) -> "StudyTable":
        header, lines = {}, []
        with open(path) as fh:
            for line in fh:
                if line.startswith("#"):
                    key, _, val = line[1:].strip().partition("=")
                    if not key.startswith("summary."):
                        header[key] = val
                else:
                    lines.append(line)
        rows = [
            StudyRow(r["arch"], float(r["kappa"]), float(r["acc"]), float(r["asr"]), r["seeds"], r["error"])
            for r in csv.DictReader(lines)
        ]
        return cls(rows, header)


@dataclass
class StudyConfigs:
    """Everything fixed across the rows of a study (budgets are recorded in the CSV header)."""

    skel: SkeletonConfig = field(default_factory=SkeletonConfig)
    gcfg: GeneratorConfig = field(default_factory=GeneratorConfig)
    score: ScoreConfig = field(default_factory=ScoreConfig)
    clean: TrainConfig = field(default_factory=TrainConfig)
    backdoor: TrainConfig = field(default_factory=TrainConfig)
    net_seed: int = 0
    gen_seed: int = 0
    arch_seed: int = 0
    workers: int = 1

    def header(self) -> dict:
        out = {}
        for name in ("skel", "gcfg", "score", "clean", "backdoor"):
            for k, v in asdict(getattr(self, name)).items():
                out[f"{name}.{k}"] = v
        out.update(net_seed=self.net_seed, gen_seed=self.gen_seed, arch_seed=self.arch_seed)
        return out


class Q1Runner:
    """Clean-train an architecture, fit a generator against it, measure ACC/ASR on a held-out split.

    The mask network does not depend on the target model, so it is pretrained
    once and copied into every per-architecture generator.
    """

    def __init__(self, train: LabeledDataset, test: LabeledDataset, configs: StudyConfigs):
        self.train, self.test, self.configs = train, test, configs
        self._mask_gen: TriggerGenerator | None = None

    def base_generator(self) -> TriggerGenerator:
        if self._mask_gen is None:
            gen = build_generator(self.configs.gcfg, InitSpec(seed=self.configs.gen_seed))
            if self.configs.backdoor.mask_epochs > 0:
                pretrain_mask(gen, self.train, self.configs.backdoor)
            else:
                gen.freeze_mask()
            self._mask_gen = gen
        return copy.deepcopy(self._mask_gen)

    def clean_model(self, a: ArchSpec):
        c = self.configs
        net = build_network(a, c.skel, InitSpec(seed=c.net_seed))
        net, _ = train_clean(net, self.train, c.clean)
        return net

    def run(self, a: ArchSpec):
        c = self.configs
        net = self.clean_model(a)
        gen, _ = train_generator(self.base_generator(), net, self.train, c.backdoor)
        return net, gen, evaluate(net, gen, self.test, c.backdoor.target_class)


def _study_rows(
    archs: Sequence[ArchSpec],
    runner: Q1Runner,
    score_data,
    progress: Callable[[int, StudyRow], None] | None = None,
) -> list[StudyRow]:
    c = runner.configs
    seeds = f"score={c.score.base_seed};net={c.net_seed};gen={c.gen_seed};train={c.clean.seed}"
    runner.base_generator()  # shared mask pretraining happens once, before any worker starts

    def one(a: ArchSpec) -> StudyRow:
        s = format_arch(a)
        try:
            kappa = score_arch(a, score_data, c.skel, c.gcfg, c.score).kappa
            _, _, rep = runner.run(a)
            return StudyRow(s, kappa, rep.acc, rep.asr, seeds)
        except Exception as exc:  # per-arch failures are recorded, not fatal
            return StudyRow(s, math.nan, math.nan, math.nan, "", f"{type(exc).__name__}: {exc}")

    if c.workers > 1:
        pool = ThreadPoolExecutor(max_workers=c.workers)
        results = pool.map(one, archs)
    else:
        pool, results = None, map(one, archs)
    rows = []
    try:
        for i, row in enumerate(results):
            rows.append(row)
            if progress is not None:
                progress(i, row)
    finally:
        if pool is not None:
            pool.shutdown()
    return rows


def correlation_study(
    num_archs: int,
    train: LabeledDataset,
    test: LabeledDataset,
    configs: StudyConfigs,
    progress: Callable[[int, StudyRow], None] | None = None,
) -> StudyTable:
    """Score random architectures, run the Q1 protocol on each, correlate kappa with ASR and ACC."""
    if num_archs < 8:
        raise ValueError("correlation study needs at least 8 architectures")
    rng = np.random.default_rng(configs.arch_seed)
    archs = [random_arch(rng) for _ in range(num_archs)]
    rows = _study_rows(archs, Q1Runner(train, test, configs), train, progress)
    header = configs.header() | {"study": "correlation", "num_archs": num_archs}
    return StudyTable(rows, header)


def op_enumeration_study(
    base: ArchSpec,
    free_edges: Sequence[int],
    allowed_ops: Sequence[str],
    train: LabeledDataset,
    test: LabeledDataset,
    configs: StudyConfigs,
    budget_cap: int = 64,
    progress: Callable[[int, StudyRow], None] | None = None,
) -> StudyTable:
    free_edges = list(free_edges)
    need = len(allowed_ops) ** len(free_edges) if free_edges else 1
    if need > budget_cap:
        raise ValueError(f"enumeration needs {need} evaluations, budget cap is {budget_cap}")
    archs = sorted(neighbors_on_edges(base, free_edges, allowed_ops), key=lambda a: a.indices)
    rows = _study_rows(archs, Q1Runner(train, test, configs), train, progress)
    header = configs.header() | {"study": "enumeration", "base": format_arch(base),
                                 "free_edges": ";".join(map(str, free_edges)),
                                 "allowed_ops": ";".join(allowed_ops)}
    return StudyTable(rows, header)


def landscape_study(
    base: ArchSpec,
    two_edges: Sequence[int],
    train: LabeledDataset,
    test: LabeledDataset,
    configs: StudyConfigs,
    progress: Callable[[int, StudyRow], None] | None = None,
) -> StudyTable:

    if len(two_edges) != 2 or len(set(two_edges)) != 2:
        raise ValueError("landscape slice needs exactly 2 distinct edges")
    table = op_enumeration_study(base, two_edges, OPERATORS, train, test, configs, budget_cap=25,
                                 progress=progress)
    table.header["study"] = "landscape"
    return table

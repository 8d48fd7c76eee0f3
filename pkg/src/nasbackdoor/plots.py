"""Scatter plots of kappa vs ASR/ACC and poisoning-ratio curves."""
from __future__ import annotations

import csv
import math
import os
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evalkit import StudyTable  # noqa: E402


def write_scatter_data(study: StudyTable, path) -> None:
    """One (kappa, asr, acc) triple per row; infinite kappa is kept and flagged."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["arch", "kappa", "asr", "acc", "kappa_infinite"])
        for r in study.rows:
            w.writerow([r.arch, repr(float(r.kappa)), repr(float(r.asr)), repr(float(r.acc)),
                        int(math.isinf(r.kappa))])


def _scatter(kappa, metric, label, path, title):
    kappa, metric = np.asarray(kappa, float), np.asarray(metric, float)
    ok = np.isfinite(metric)
    fin = np.isfinite(kappa) & ok
    inf = np.isinf(kappa) & ok
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    ax.scatter(kappa[fin], metric[fin], s=18)
    if inf.any():
        # infinite kappa: rug at the right edge
        edge = kappa[fin].max() * 1.5 if fin.any() else 1.0
        ax.scatter(np.full(inf.sum(), edge), metric[inf], marker="|", s=120, c="red", label="kappa = inf")
        ax.legend(loc="best", fontsize=8)
    ax.set_xscale("log")
    ax.set_xlabel("NTK condition number")
    ax.set_ylabel(label)
    ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def emit_plots(study: StudyTable, out) -> list[str]:
    if not study.rows:
        raise ValueError("empty study table")
    os.makedirs(out, exist_ok=True)
    data_path = os.path.join(out, "scatter_data.csv")
    write_scatter_data(study, data_path)
    k = [r.kappa for r in study.rows]
    summ = study.summary()
    paths = [data_path]
    for metric, label, key in (("asr", "ASR", "spearman_kappa_asr"), ("acc", "ACC", "spearman_kappa_acc")):
        p = os.path.join(out, f"scatter_kappa_{metric}.png")
        _scatter(k, [getattr(r, metric) for r in study.rows], label, p, f"Spearman = {summ[key]:.3f}")
        paths.append(p)
    return paths


def write_poison_data(ratios: Sequence[float], asr: Sequence[float], acc: Sequence[float], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ratio", "asr", "acc"])
        for r, a, c in zip(ratios, asr, acc):
            w.writerow([repr(float(r)), repr(float(a)), repr(float(c))])


def read_poison_data(path) -> tuple[list[float], list[float], list[float]]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return ([float(r["ratio"]) for r in rows], [float(r["asr"]) for r in rows], [float(r["acc"]) for r in rows])


def emit_poison_plot(ratios, asr, acc, out) -> list[str]:
    if not len(ratios):
        raise ValueError("empty poisoning study")
    os.makedirs(out, exist_ok=True)
    data_path = os.path.join(out, "poison_data.csv")
    write_poison_data(ratios, asr, acc, data_path)
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    pos = list(range(len(ratios)))
    ax.plot(pos, asr, "o-", label="ASR")
    ax.plot(pos, acc, "s--", label="ACC")
    ax.set_xticks(pos, [f"{r:g}" for r in ratios])
    ax.set_xlabel("poisoning ratio")
    ax.set_ylim(0, 1.05)
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    img = os.path.join(out, "poison_ratio.png")
    fig.savefig(img, dpi=120)
    plt.close(fig)
    return [data_path, img]

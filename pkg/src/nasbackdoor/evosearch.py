"""Aging-evolution search: sample m of n, mutate the best sampled, replace the oldest."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .archspace import ArchSpec, format_arch, mutate_arch, parse_arch, random_arch

ScoreFn = Callable[[ArchSpec], float]


class ScoreError(RuntimeError):
    pass


@dataclass
class SearchConfig:
    pool_size: int = 16
    sample_size: int = 8
    max_iterations: int = 200
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.sample_size <= self.pool_size:
            raise ValueError("need 1 <= sample_size <= pool_size")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")


@dataclass
class LogRow:
    iteration: int
    mutated_from: str
    new_arch: str
    score: float
    best_score: float


@dataclass
class SearchState:
    pool: list[ArchSpec]
    scores: list[float]
    timestamps: list[int]
    best: int
    best_arch: ArchSpec
    best_score: float
    history: list[tuple[int, float]] = field(default_factory=list)
    log: list[LogRow] = field(default_factory=list)
    iteration: int = 0

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "pool": [format_arch(a) for a in self.pool],
            "scores": [_fmt(s) for s in self.scores],
            "timestamps": list(self.timestamps),
            "best": self.best,
            "best_arch": format_arch(self.best_arch),
            "best_score": _fmt(self.best_score),
            "history": [[i, _fmt(s)] for i, s in self.history],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SearchState":
        return cls(
            pool=[parse_arch(s) for s in d["pool"]],
            scores=[float(s) for s in d["scores"]],
            timestamps=[int(t) for t in d["timestamps"]],
            best=int(d["best"]),
            best_arch=parse_arch(d["best_arch"]),
            best_score=float(d["best_score"]),
            history=[(int(i), float(s)) for i, s in d["history"]],
            iteration=int(d["iteration"]),
        )


def _fmt(v: float):
    # JSON has no infinity literal
    return "inf" if math.isinf(v) else v


def _score(score_fn: ScoreFn, a: ArchSpec) -> float:
    try:
        return float(score_fn(a))
    except Exception as exc:
        raise ScoreError(f"scoring {format_arch(a)} failed: {exc}") from exc


def init_pool(cfg: SearchConfig, score_fn: ScoreFn, rng: np.random.Generator | None = None) -> SearchState:
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    pool = [random_arch(rng) for _ in range(cfg.pool_size)]
    scores = [_score(score_fn, a) for a in pool]
    best = int(np.argmin(scores))
    st = SearchState(pool, scores, [0] * cfg.pool_size, best, pool[best], scores[best])
    st.history.append((0, st.best_score))
    return st


def search_step(st: SearchState, cfg: SearchConfig, score_fn: ScoreFn, rng: np.random.Generator) -> SearchState:
    n = len(st.pool)
    sample = np.sort(rng.choice(n, size=cfg.sample_size, replace=False))
    # argmin / argmax return the first (lowest) index on ties
    i = int(sample[int(np.argmin([st.scores[k] for k in sample]))])
    j = int(np.argmax(st.timestamps))
    parent = st.pool[i]
    child = mutate_arch(parent, rng)
    s = _score(score_fn, child)
    st.pool[j] = child
    st.scores[j] = s
    st.timestamps = [t + 1 for t in st.timestamps]
    st.timestamps[j] = 0
    st.iteration += 1
    if s < st.best_score:
        st.best, st.best_arch, st.best_score = j, child, s
    st.history.append((st.iteration, st.best_score))
    st.log.append(LogRow(st.iteration, format_arch(parent), format_arch(child), s, st.best_score))
    return st


def run_search(cfg: SearchConfig, score_fn: ScoreFn, on_step: Callable[[SearchState], None] | None = None):
    """Returns ``(best_arch, state)``."""
    rng = np.random.default_rng(cfg.seed)
    st = init_pool(cfg, score_fn, rng)
    for _ in range(cfg.max_iterations):
        st = search_step(st, cfg, score_fn, rng)
        if on_step is not None:
            on_step(st)
    return st.best_arch, st


def write_search_log(st: SearchState, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "mutated_from", "new_arch", "score", "best_score"])
        for r in st.log:
            w.writerow([r.iteration, r.mutated_from, r.new_arch, repr(r.score), repr(r.best_score)])


def write_state(st: SearchState, path) -> None:
    with open(path, "w") as fh:
        json.dump(st.to_dict(), fh, indent=2)
        fh.write("\n")


def read_state(path) -> SearchState:
    with open(path) as fh:
        return SearchState.from_dict(json.load(fh))

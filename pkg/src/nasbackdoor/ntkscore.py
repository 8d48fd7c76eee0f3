"""Training-free exploitability score: condition number of the trigger generator's empirical NTK.

For a batch ``x`` the scalar output of sample ``i`` is the target-class logit
of a freshly initialised target network applied to the triggered input
``apply_trigger(x_i, g(x_i))``.  Each Jacobian row is the gradient of that
logit w.r.t. all generator parameters (mask and pattern heads); the kernel
is the ``B x B`` Gram matrix ``J J^T``.  Lower condition number means the
generator is easier to train against the architecture.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .archspace import ArchSpec, format_arch
from .netbuilder import InitSpec, SkeletonConfig, build_network
from .triggergen import GeneratorConfig, apply_trigger, build_generator

INF = math.inf


@dataclass
class ScoreConfig:
    batch_size: int = 32
    num_inits: int = 3
    base_seed: int = 0
    target_class: int = 0
    epsilon_floor: float = 1e-12
    dtype: str = "float64"
    # train-mode BN in the target forces sum_i s_i = const whenever the last
    # node is a pure sum of conv outputs, making the kernel singular
    net_bn_mode: str = "eval"

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.num_inits < 1:
            raise ValueError("num_inits must be >= 1")
        if self.net_bn_mode not in ("eval", "train"):
            raise ValueError("net_bn_mode must be 'eval' or 'train'")


@dataclass
class ScoreReport:
    arch: str
    kappa_per_init: list[float]
    kappa: float
    lambda_min: list[float]
    lambda_max: list[float]
    seeds: list[int] = field(default_factory=list)

    CSV_FIELDS = ("arch", "kappa", "kappa_per_init", "lambda_min", "lambda_max", "seeds")

    def to_row(self) -> dict[str, str]:
        def j(vals):
            return ";".join(repr(float(v)) if not isinstance(v, int) else str(v) for v in vals)

        return {
            "arch": self.arch,
            "kappa": repr(float(self.kappa)),
            "kappa_per_init": j(self.kappa_per_init),
            "lambda_min": j(self.lambda_min),
            "lambda_max": j(self.lambda_max),
            "seeds": ";".join(str(s) for s in self.seeds),
        }

    @classmethod
    def from_row(cls, row: dict[str, str]) -> "ScoreReport":
        def floats(s):
            return [float(v) for v in s.split(";")] if s else []

        return cls(
            arch=row["arch"],
            kappa=float(row["kappa"]),
            kappa_per_init=floats(row["kappa_per_init"]),
            lambda_min=floats(row["lambda_min"]),
            lambda_max=floats(row["lambda_max"]),
            seeds=[int(v) for v in row["seeds"].split(";")] if row["seeds"] else [],
        )


def write_score_csv(reports: Sequence[ScoreReport], path, append: bool = False) -> None:
    import os

    new = not append or not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ScoreReport.CSV_FIELDS)
        if new:
            w.writeheader()
        for r in reports:
            w.writerow(r.to_row())


def read_score_csv(path) -> list[ScoreReport]:
    with open(path, newline="") as fh:
        return [ScoreReport.from_row(r) for r in csv.DictReader(fh)]


def ntk_from_outputs(
    outputs: Callable[[], torch.Tensor],
    params: Sequence[tuple[str, torch.Tensor]],
) -> np.ndarray:
    """Gram matrix of per-output parameter gradients.

    ``outputs()`` must return a 1-D tensor ``s`` of length B; row ``i`` of the
    Jacobian is ``d s_i / d params`` (all tensors flattened and concatenated).
    """
    names = [n for n, _ in params]
    tensors = [p for _, p in params]
    s = outputs()
    if s.dim() != 1:
        raise ValueError("outputs() must return a 1-D tensor")
    rows = []
    for i in range(s.shape[0]):
        grads = torch.autograd.grad(s[i], tensors, retain_graph=True, allow_unused=True)
        flat = []
        for name, p, g in zip(names, tensors, grads):
            if g is None:
                g = torch.zeros_like(p)
            if not torch.isfinite(g).all():
                raise FloatingPointError(f"non-finite Jacobian entries in parameter {name!r}")
            flat.append(g.reshape(-1))
        rows.append(torch.cat(flat))
    jac = torch.stack(rows).detach().to(torch.float64)
    return (jac @ jac.T).numpy()


def empirical_ntk(gen, net, x: torch.Tensor, t: int, net_bn_mode: str = "eval") -> np.ndarray:
    """B x B empirical NTK of the generator composed with the target network.

    The generator runs in train mode (batch statistics), except for a single
    sample where batch statistics are undefined and eval mode is used.  The target runs in
    ``net_bn_mode``; for a fresh network eval mode means BN uses its initial
    running statistics (mean 0, variance 1).
    """
    gen.train(x.shape[0] > 1)
    net.train(net_bn_mode == "train")
    dtype = next(gen.parameters()).dtype
    x = x.to(dtype)

    def outputs():
        xt = apply_trigger(x, gen(x))
        return net(xt)[:, t]

    params = [(n, p) for n, p in gen.named_parameters() if p.requires_grad]
    return ntk_from_outputs(outputs, params)


def condition_number(K, epsilon_floor: float = 1e-12) -> tuple[float, float, float]:
    """Return ``(kappa, lambda_min, lambda_max)``; kappa is +inf for singular or null kernels."""
    K = np.asarray(K, dtype=np.float64)
    if not np.isfinite(K).all():
        raise FloatingPointError("kernel has non-finite entries")
    K = 0.5 * (K + K.T)
    eig = np.linalg.eigvalsh(K)
    lmin, lmax = float(eig[0]), float(eig[-1])
    if lmax <= 0 or lmin <= epsilon_floor * lmax:
        return INF, lmin, lmax
    return lmax / lmin, lmin, lmax


def aggregate_kappa(values: Sequence[float]) -> float:
    if any(math.isinf(v) for v in values):
        return INF
    return float(np.mean(values))


def score_batch(images: torch.Tensor, cfg: ScoreConfig) -> torch.Tensor:
    n = images.shape[0]
    if n < cfg.batch_size:
        raise ValueError(f"need at least {cfg.batch_size} samples, have {n}")
    idx = np.random.default_rng(cfg.base_seed).choice(n, size=cfg.batch_size, replace=False)
    return images[torch.as_tensor(np.sort(idx))]


def score_arch(
    a: ArchSpec,
    data,
    skel: SkeletonConfig,
    gcfg: GeneratorConfig,
    cfg: ScoreConfig,
) -> ScoreReport:
    """Score one architecture; ``data`` is a dataset with ``.images`` or an image tensor."""
    images = getattr(data, "images", data)
    dtype = getattr(torch, cfg.dtype)
    x = score_batch(images, cfg).to(dtype)
    kappas, lmins, lmaxs, seeds = [], [], [], []
    for r in range(1, cfg.num_inits + 1):
        seed = cfg.base_seed + r
        net = build_network(a, skel, InitSpec(seed=seed)).to(dtype)
        gen = build_generator(gcfg, InitSpec(seed=seed)).to(dtype)
        for p in net.parameters():
            p.requires_grad_(False)
        K = empirical_ntk(gen, net, x, cfg.target_class, cfg.net_bn_mode)
        kappa, lmin, lmax = condition_number(K, cfg.epsilon_floor)
        kappas.append(kappa)
        lmins.append(lmin)
        lmaxs.append(lmax)
        seeds.append(seed)
    return ScoreReport(
        arch=format_arch(a),
        kappa_per_init=kappas,
        kappa=aggregate_kappa(kappas),
        lambda_min=lmins,
        lambda_max=lmaxs,
        seeds=seeds,
    )


def make_score_fn(data, skel: SkeletonConfig, gcfg: GeneratorConfig, cfg: ScoreConfig):
    """Closure mapping an ArchSpec to its scalar score (for the search loop)."""

    def score(a: ArchSpec) -> float:
        return score_arch(a, data, skel, gcfg, cfg).kappa

    return score

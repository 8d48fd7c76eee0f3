"""Training protocols: clean training, generator training against a frozen model,
the joint backdoor objective, fine-tuning, re-training from scratch and
poisoned fine-tuning data.

Every protocol is deterministic given ``cfg.seed``: mini-batch order comes
from a ``torch.Generator`` seeded with it, and mask pretraining draws from a
separate stream so it never perturbs the target model's batch order.
"""
from __future__ import annotations

import copy
import csv
import math
from dataclasses import dataclass, replace
from typing import Iterator

import numpy as np
import torch
import torch.nn.functional as F

from .archspace import ArchSpec
from .data import LabeledDataset
from .netbuilder import InitSpec, SkeletonConfig, build_network
from .triggergen import (
    TriggerBatch,
    TriggerGenerator,
    apply_trigger,
    diversity_loss,
    mask_density,
    shifted,
)


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch: int, value: float):
        super().__init__(f"non-finite loss {value} in epoch {epoch}")
        self.epoch = epoch


@dataclass
class TrainConfig:
    epochs: int = 20
    optimizer: str = "adam"
    learning_rate: float = 0.01
    lr_schedule: str = "constant"
    batch_size: int = 96
    seed: int = 0
    target_class: int = 0
    rho_b: float = 0.1
    rho_c: float = 0.1
    lambda_div: float = 1.0
    lambda_atk: float = 1.0
    poison_ratio: float = 0.01
    mask_epochs: int = 25
    mark_epochs: int = 10
    mask_density_target: float = 0.3
    mask_density_weight: float = 100.0
    momentum: float = 0.9

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd_momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.lr_schedule not in ("constant", "cosine_annealing"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        for name in ("rho_b", "rho_c", "lambda_div", "lambda_atk", "learning_rate"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.rho_b + self.rho_c > 1:
            raise ValueError("rho_b + rho_c must be <= 1")
        if not 0 <= self.poison_ratio <= 1:
            raise ValueError("poison_ratio must lie in [0, 1]")
        if min(self.epochs, self.mask_epochs, self.mark_epochs) < 0 or self.batch_size < 1:
            raise ValueError("epoch counts must be >= 0 and batch_size >= 1")

    @classmethod
    def finetune_defaults(cls, **overrides) -> "TrainConfig":
        base = dict(epochs=50, optimizer="sgd_momentum", learning_rate=0.01,
                    lr_schedule="cosine_annealing", batch_size=96)
        base.update(overrides)
        return cls(**base)


@dataclass
class TraceRow:
    epoch: int
    split: str
    loss: float
    acc: float | None = None
    asr: float | None = None
    attack_loss: float | None = None


def write_trace_csv(trace: list[TraceRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "split", "loss", "acc", "asr", "attack_loss"])
        opt = lambda v: "" if v is None else repr(v)
        for r in trace:
            w.writerow([r.epoch, r.split, repr(r.loss), opt(r.acc), opt(r.asr), opt(r.attack_loss)])


def half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def partition_sizes(batch: int, rho_b: float, rho_c: float) -> tuple[int, int]:
    """Number of backdoor and cross-trigger samples in a batch of ``batch``."""
    nb = half_up(rho_b * batch)
    nc = min(half_up(rho_c * batch), batch - nb)
    return nb, nc


def _batch_size_for(n: int, batch_size: int) -> int:
    # full batch size when the dataset holds at least 4 batches, else a quarter of it
    if n >= 4 * batch_size:
        return batch_size
    return max(2, min(batch_size, n // 4)) if n >= 8 else max(1, n)


def iterate_batches(n: int, batch_size: int, g: torch.Generator) -> Iterator[torch.Tensor]:
    perm = torch.randperm(n, generator=g)
    for start in range(0, n, batch_size):
        idx = perm[start:start + batch_size]
        if idx.numel() < 2 and n > 1:
            # a single-sample batch breaks train-mode batch norm
            continue
        yield idx


def make_optimizer(params, cfg: TrainConfig):
    params = [p for p in params if p.requires_grad]
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.learning_rate)
    return torch.optim.SGD(params, lr=cfg.learning_rate, momentum=cfg.momentum)


def make_scheduler(opt, cfg: TrainConfig, epochs: int):
    if cfg.lr_schedule == "cosine_annealing" and epochs > 0:
        return torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=epochs)
    return None


def weighted_ce(logits: torch.Tensor, targets: torch.Tensor, weights: torch.Tensor | None = None):
    if weights is None:
        return F.cross_entropy(logits, targets)
    return (F.cross_entropy(logits, targets, reduction="none") * weights).sum() / logits.shape[0]


def _check(loss: torch.Tensor, epoch: int) -> None:
    if not torch.isfinite(loss):
        raise TrainingDivergedError(epoch, loss.item())


def _net_dtype(net) -> torch.dtype:
    return next(net.parameters()).dtype


def train_clean(net, data: LabeledDataset, cfg: TrainConfig, epochs: int | None = None):
    """Mini-batch cross-entropy training.  Returns ``(net, trace)``."""
    epochs = cfg.epochs if epochs is None else epochs
    dtype = _net_dtype(net)
    opt = make_optimizer(net.parameters(), cfg)
    sched = make_scheduler(opt, cfg, epochs)
    g = torch.Generator().manual_seed(cfg.seed)
    bs = _batch_size_for(len(data), cfg.batch_size)
    trace = []
    for epoch in range(epochs):
        net.train()
        tot_loss, correct, seen = 0.0, 0, 0
        for idx in iterate_batches(len(data), bs, g):
            x, y = data.images[idx].to(dtype), data.labels[idx]
            logits = net(x)
            loss = weighted_ce(logits, y)
            _check(loss, epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            tot_loss += loss.item() * len(idx)
            correct += (logits.argmax(1) == y).sum().item()
            seen += len(idx)
        if sched is not None:
            sched.step()
        trace.append(TraceRow(epoch, "train", tot_loss / max(seen, 1), correct / max(seen, 1)))
    return net, trace


def pretrain_mask(gen: TriggerGenerator, data: LabeledDataset, cfg: TrainConfig, epochs: int | None = None):
    """Train the mask network on mask diversity plus a density hinge, then freeze it."""
    epochs = cfg.mask_epochs if epochs is None else epochs
    dtype = next(gen.parameters()).dtype
    opt = make_optimizer(gen.mask_net.parameters(), cfg)
    sched = make_scheduler(opt, cfg, epochs)
    g = torch.Generator().manual_seed(cfg.seed + 7919)
    bs = _batch_size_for(len(data), cfg.batch_size)
    trace = []
    for epoch in range(epochs):
        gen.mask_net.train()
        tot, seen = 0.0, 0
        for idx in iterate_batches(len(data), bs, g):
            x = data.images[idx].to(dtype)
            m = gen.mask_net(x)
            div = diversity_loss(x, shifted(x), TriggerBatch(m, m), TriggerBatch(shifted(m), shifted(m)), "mask")
            hinge = torch.relu(mask_density(m) - cfg.mask_density_target)
            loss = cfg.lambda_div * div + cfg.mask_density_weight * hinge
            _check(loss, epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            tot += loss.item() * len(idx)
            seen += len(idx)
        if sched is not None:
            sched.step()
        trace.append(TraceRow(epoch, "mask", tot / max(seen, 1)))
    gen.freeze_mask()
    return gen, trace


def _triggered_subset(gen, x: torch.Tensor, nb: int, nc: int, cfg: TrainConfig):
    """Backdoor inputs, cross-trigger inputs and the diversity term for one batch."""
    k = nb + nc
    xs = x[:k]
    r = gen(xs)
    r_cross = shifted(r)
    x_bd = apply_trigger(xs[:nb], TriggerBatch(r.mask[:nb], r.pattern[:nb]))
    x_cross = apply_trigger(xs[nb:], TriggerBatch(r_cross.mask[nb:], r_cross.pattern[nb:]))
    div = None
    if cfg.lambda_div > 0 and k >= 2:
        div = diversity_loss(xs, shifted(xs), r, r_cross, "pattern")
    return x_bd, x_cross, div


def _freeze(net):
    flags = [p.requires_grad for p in net.parameters()]
    for p in net.parameters():
        p.requires_grad_(False)
    return flags


def _unfreeze(net, flags):
    for p, f in zip(net.parameters(), flags):
        p.requires_grad_(f)


def train_generator(gen: TriggerGenerator, frozen_net, data: LabeledDataset, cfg: TrainConfig):
    """Fit the trigger generator against a fixed clean-trained model.

    Phase 1 pretrains and freezes the mask network (skipped when already
    frozen).  Phase 2 trains the pattern network: per batch the first
    ``round(rho_b*B)`` samples carry their own trigger and target ``t``, the
    next ``round(rho_c*B)`` carry the trigger of their cyclic neighbour and
    keep their label; the loss is the mean cross-entropy of each slice plus
    ``lambda_div`` times pattern diversity.  The remaining samples contribute
    nothing since the model is fixed.
    Returns ``(gen, trace)``.
    """
    trace = []
    if not gen.frozen_mask:
        gen, trace = pretrain_mask(gen, data, cfg)
    dtype = next(gen.parameters()).dtype
    flags = _freeze(frozen_net)
    frozen_net.eval()
    opt = make_optimizer(gen.mark_net.parameters(), cfg)
    sched = make_scheduler(opt, cfg, cfg.mark_epochs)
    g = torch.Generator().manual_seed(cfg.seed)
    bs = _batch_size_for(len(data), cfg.batch_size)
    t = cfg.target_class
    try:
        for epoch in range(cfg.mark_epochs):
            gen.train()
            tot, atk_tot, hits, n_atk, seen = 0.0, 0.0, 0, 0, 0
            for idx in iterate_batches(len(data), bs, g):
                x, y = data.images[idx].to(dtype), data.labels[idx]
                B = len(idx)
                nb, nc = partition_sizes(B, cfg.rho_b, cfg.rho_c)
                if nb + nc == 0:
                    continue
                x_bd, x_cross, div = _triggered_subset(gen, x, nb, nc, cfg)
                inputs = torch.cat([x_bd, x_cross])
                targets = torch.cat([torch.full((nb,), t, dtype=torch.long), y[nb:nb + nc]])
                logits = frozen_net(inputs)
                ce = F.cross_entropy(logits, targets, reduction="none")
                # each term is the mean loss over its own slice of the batch
                loss = ce.new_zeros(())
                if nb:
                    loss = loss + ce[:nb].mean()
                if nc:
                    loss = loss + ce[nb:].mean()
                if div is not None:
                    loss = loss + cfg.lambda_div * div
                _check(loss, epoch)
                opt.zero_grad()
                loss.backward()
                opt.step()
                tot += loss.item() * B
                seen += B
                if nb:
                    atk_tot += ce[:nb].sum().item()
                    hits += (logits[:nb].argmax(1) == t).sum().item()
                    n_atk += nb
            if sched is not None:
                sched.step()
            trace.append(TraceRow(epoch, "mark", tot / max(seen, 1),
                                  asr=hits / n_atk if n_atk else None,
                                  attack_loss=atk_tot / n_atk if n_atk else None))
    finally:
        _unfreeze(frozen_net, flags)
    gen.eval()
    return gen, trace


def train_joint(net, gen: TriggerGenerator, data: LabeledDataset, cfg: TrainConfig):
    """Update the model and the pattern network together on the backdoor objective.

    Per batch the model sees backdoor inputs (target ``t``, weight
    ``lambda_atk``), cross-trigger inputs (true label) and the remaining clean
    inputs in one concatenated batch; ``lambda_div`` times pattern diversity
    is added.  With all four knobs at zero the computation is exactly
    ``train_clean``.  Returns ``(net, gen, trace)``.
    """
    trace = []
    if not gen.frozen_mask:
        if cfg.mask_epochs > 0:
            gen, trace = pretrain_mask(gen, data, cfg)
        else:
            gen.freeze_mask()
    dtype = _net_dtype(net)
    opt = make_optimizer(net.parameters(), cfg)
    sched = make_scheduler(opt, cfg, cfg.epochs)
    gen_opt = make_optimizer(gen.mark_net.parameters(), cfg)
    g = torch.Generator().manual_seed(cfg.seed)
    bs = _batch_size_for(len(data), cfg.batch_size)
    t = cfg.target_class
    uses_gen = cfg.rho_b > 0 or cfg.rho_c > 0
    for epoch in range(cfg.epochs):
        net.train()
        gen.train()
        tot, correct, n_clean, hits, n_atk, seen = 0.0, 0, 0, 0, 0, 0
        for idx in iterate_batches(len(data), bs, g):
            x, y = data.images[idx].to(dtype), data.labels[idx]
            B = len(idx)
            nb, nc = partition_sizes(B, cfg.rho_b, cfg.rho_c)
            div = None
            if nb + nc > 0:
                x_bd, x_cross, div = _triggered_subset(gen, x, nb, nc, cfg)
                inputs = torch.cat([x_bd, x_cross, x[nb + nc:]])
                targets = torch.cat([torch.full((nb,), t, dtype=torch.long), y[nb:]])
            else:
                inputs, targets = x, y
            weights = None
            if nb > 0 and cfg.lambda_atk != 1.0:
                weights = torch.ones(B, dtype=dtype)
                weights[:nb] = cfg.lambda_atk
            logits = net(inputs)
            loss = weighted_ce(logits, targets, weights)
            if div is not None:
                loss = loss + cfg.lambda_div * div
            _check(loss, epoch)
            opt.zero_grad()
            if uses_gen:
                gen_opt.zero_grad()
            loss.backward()
            opt.step()
            if uses_gen and nb + nc > 0:
                gen_opt.step()
            tot += loss.item() * B
            seen += B
            pred = logits.argmax(1)
            correct += (pred[nb + nc:] == y[nb + nc:]).sum().item()
            n_clean += B - nb - nc
            hits += (pred[:nb] == t).sum().item()
            n_atk += nb
        if sched is not None:
            sched.step()
        trace.append(TraceRow(epoch, "train", tot / max(seen, 1), correct / max(n_clean, 1),
                              hits / n_atk if n_atk else None))
    gen.eval()
    return net, gen, trace


def fine_tune(net, data: LabeledDataset, cfg: TrainConfig | None = None):
    """Continue clean training (defaults: 50 epochs, SGD, lr 0.01, cosine, batch 96)."""
    cfg = TrainConfig.finetune_defaults() if cfg is None else cfg
    return train_clean(net, data, cfg)


def retrain_scratch(
    a: ArchSpec,
    gen_fixed: TriggerGenerator,
    data: LabeledDataset,
    skel: SkeletonConfig,
    cfg: TrainConfig,
    original_seed: int = 0,
    new_seed: int | None = None,
):
    """Fresh initialisation with a different seed, then clean training; the generator is not touched."""
    if new_seed is None:
        new_seed = original_seed + 1
    if new_seed == original_seed:
        raise ValueError("re-training needs a seed different from the original")
    net = build_network(a, skel, InitSpec(seed=new_seed))
    net = net.to(next(gen_fixed.parameters()).dtype)
    return train_clean(net, data, replace(cfg, seed=new_seed))


def poison_count(n: int, ratio: float) -> int:
    return int(math.ceil(round(ratio * n, 9)))


@torch.no_grad()
def triggered_images(gen: TriggerGenerator, x: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    gen.eval()
    dtype = next(gen.parameters()).dtype
    out = []
    for s in range(0, x.shape[0], batch_size):
        xb = x[s:s + batch_size].to(dtype)
        out.append(apply_trigger(xb, gen(xb)).to(x.dtype))
    return torch.cat(out) if out else x.clone()


def make_poisoned_dataset(
    data: LabeledDataset, gen: TriggerGenerator, ratio: float, t: int, seed: int = 0
) -> LabeledDataset:
    """Replace ``ceil(ratio*N)`` seeded-shuffle samples with their triggered version labelled ``t``."""
    if not 0 <= ratio <= 1:
        raise ValueError("ratio must lie in [0, 1]")
    n = len(data)
    k = poison_count(n, ratio)
    images, labels = data.images.clone(), data.labels.clone()
    if k:
        idx = torch.as_tensor(np.random.default_rng(seed).permutation(n)[:k])
        images[idx] = triggered_images(gen, data.images[idx])
        labels[idx] = t
    return LabeledDataset(images, labels)


def copy_module(m):
    return copy.deepcopy(m)

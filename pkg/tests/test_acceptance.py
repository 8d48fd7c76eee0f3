"""Acceptance criteria at their stated tolerances.

Run with ``pytest tests/test_acceptance.py -v``; the terminal summary ends
with one PASS/FAIL line per criterion.  Criteria 7, 8, 10 and 11 share one
desk-scale correlation study (about ten minutes on one CPU core).
"""
import math
import os
import time
from dataclasses import replace

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from nasbackdoor.archspace import ArchSpec, enumerate_space, format_arch, parse_arch, random_arch
from nasbackdoor.data import SyntheticSpec, load_cifar10_binary, make_synthetic, make_synthetic_splits
from nasbackdoor.evalkit import Q1Runner, StudyConfigs, attack_success_rate, correlation_study, evaluate
from nasbackdoor.evosearch import SearchConfig, run_search
from nasbackdoor.netbuilder import InitSpec, SkeletonConfig, build_network
from nasbackdoor.ntkscore import ScoreConfig, condition_number, empirical_ntk, ntk_from_outputs, score_arch, score_batch
from nasbackdoor.trainer import TrainConfig, copy_module, fine_tune, make_poisoned_dataset, retrain_scratch, train_clean, train_joint
from nasbackdoor.triggergen import GeneratorConfig, TriggerBatch, apply_trigger, build_generator
from oracles import fd_check

CIFAR_ENV = "NASBACKDOOR_CIFAR10_TEST_BATCH"
FD_ARCHS = [
    parse_arch("|nor_conv_3x3~0|+|skip_connect~0|avg_pool_3x3~1|+|nor_conv_1x1~0|none~1|nor_conv_3x3~2|"),
    parse_arch("|avg_pool_3x3~0|+|nor_conv_1x1~0|none~1|+|skip_connect~0|nor_conv_3x3~1|avg_pool_3x3~2|"),
]

# pinned desk budgets shared by criteria 7, 8, 10, 11
STUDY = StudyConfigs(
    score=ScoreConfig(batch_size=32, num_inits=3, base_seed=0),
    clean=TrainConfig(epochs=20),
    backdoor=TrainConfig(mask_epochs=25, mark_epochs=10),
    net_seed=0,
    gen_seed=0,
    arch_seed=0,
)
NUM_ARCHS = 16


def note(record_property, text):
    record_property("detail", text)


@pytest.mark.criterion(1, "space integrity")
def test_c01_space_integrity(record_property):
    t0 = time.perf_counter()
    space = list(enumerate_space())
    strings = [format_arch(a) for a in space]
    identity = all(parse_arch(s) == a for s, a in zip(strings, space))
    elapsed = time.perf_counter() - t0
    note(record_property, f"{len(space)} arches, {len(set(strings))} distinct, identity={identity}, {elapsed:.1f}s")
    assert len(space) == 15_625 and len(set(strings)) == 15_625
    assert identity
    assert elapsed < 10


@pytest.mark.criterion(2, "trigger algebra")
@settings(max_examples=10_000, deadline=None, database=None, suppress_health_check=list(HealthCheck))
@given(
    st.lists(st.floats(0, 1), min_size=3, max_size=3),
    st.lists(st.floats(0, 1), min_size=3, max_size=3),
    st.floats(0, 1),
)
def test_c02_trigger_algebra(x, p, m):
    x = torch.tensor(x, dtype=torch.float64).reshape(1, 1, 1, 3)
    p = torch.tensor(p, dtype=torch.float64).reshape(1, 1, 1, 3)
    mt = torch.full((1, 1, 1, 1), m, dtype=torch.float64)
    out = apply_trigger(x, TriggerBatch(mt, p))
    assert out.min() >= 0 and out.max() <= 1
    assert torch.equal(apply_trigger(x, TriggerBatch(torch.zeros_like(mt), p)), x)
    assert torch.equal(apply_trigger(x, TriggerBatch(torch.ones_like(mt), p)), p)


@pytest.mark.criterion(3, "gradient correctness (finite differences)")
def test_c03_gradients(record_property):
    t0 = time.perf_counter()
    results = []
    x = torch.rand(8, 8, 8, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    y = torch.arange(8) % 4
    for k, arch in enumerate(FD_ARCHS):
        net = build_network(arch, SkeletonConfig(base_width=8), InitSpec(seed=1)).double().train()
        results.append(("net%d" % k, *fd_check(net, lambda: F.cross_entropy(net(x), y), coords_per_tensor=3)))
    gen = build_generator(GeneratorConfig(), InitSpec(seed=3)).double().train()
    g = torch.Generator().manual_seed(2)
    idx = torch.randperm(8 * 8 * 8 * 4, generator=g)[:8]
    w = torch.rand(8, dtype=torch.float64, generator=g) + 0.5

    def gen_loss():
        r = gen(x)
        return (torch.cat([r.mask, r.pattern], -1).reshape(-1)[idx] * w).sum()

    results.append(("generator", *fd_check(gen, gen_loss, coords_per_tensor=3)))
    elapsed = time.perf_counter() - t0
    worst = max(r[1] for r in results)
    note(record_property, ", ".join(f"{n}: max rel {w_:.1e} over {c} coords ({s} at kinks)"
                                    for n, w_, _, c, s in results) + f"; {elapsed:.0f}s")
    for name, w_, where, checked, skipped in results:
        assert checked >= 100 and checked >= 1.5 * skipped, name
        assert w_ <= 1e-5, (name, where)
    assert worst <= 1e-5
    assert elapsed < 120


@pytest.mark.criterion(4, "NTK spectrum")
def test_c04_ntk_spectrum(record_property):
    data = make_synthetic(SyntheticSpec(), 0)
    skel, gcfg = SkeletonConfig(), GeneratorConfig()
    rng = np.random.default_rng(2024)
    worst_neg, worst_perm, n_inf, min_kappa = 0.0, 0.0, 0, math.inf
    for pair in range(50):
        arch = random_arch(rng)
        seed = int(rng.integers(0, 2**31 - 1))
        x = score_batch(data.images, ScoreConfig(batch_size=16, base_seed=seed)).double()
        net = build_network(arch, skel, InitSpec(seed=seed)).double()
        for p in net.parameters():
            p.requires_grad_(False)
        gen = build_generator(gcfg, InitSpec(seed=seed)).double()
        K = empirical_ntk(gen, net, x, 0)
        perm = torch.as_tensor(np.random.default_rng(seed).permutation(16))
        Kp = empirical_ntk(gen, net, x[perm], 0)
        eig = np.linalg.eigvalsh(0.5 * (K + K.T))
        if eig[-1] > 0:  # an all-zero kernel (output independent of the generator) has no ratio
            worst_neg = min(worst_neg, eig[0] / eig[-1])
        assert eig[0] >= -1e-8 * eig[-1], format_arch(arch)
        kappa, lmin, lmax = condition_number(K)
        kappa_p, _, _ = condition_number(Kp)
        if math.isinf(kappa):
            n_inf += 1
            assert math.isinf(kappa_p)
            continue
        min_kappa = min(min_kappa, kappa)
        assert kappa >= 1
        rel = abs(kappa_p - kappa) / kappa
        worst_perm = max(worst_perm, rel)
        assert rel <= 1e-9, format_arch(arch)
    probe_err = 0.0
    for s in range(10):
        r = np.random.default_rng(s)
        X = torch.from_numpy(r.normal(size=(16, 8 * 8 * 3)))
        theta = torch.nn.Parameter(torch.from_numpy(r.normal(size=8 * 8 * 3)))
        Kl = ntk_from_outputs(lambda: X @ theta, [("theta", theta)])
        probe_err = max(probe_err, float(np.abs(Kl - (X @ X.T).numpy()).max()))
    note(record_property, f"min eig/max eig >= {worst_neg:.1e}, min finite kappa {min_kappa:.3g}, "
                          f"{n_inf} infinite, perm rel diff {worst_perm:.1e}, probe err {probe_err:.1e}")
    assert probe_err <= 1e-10


@pytest.mark.criterion(5, "score determinism")
def test_c05_score_determinism(record_property):
    data = make_synthetic(SyntheticSpec(), 0)
    cfg = ScoreConfig()
    a = score_arch(FD_ARCHS[0], data, SkeletonConfig(), GeneratorConfig(), cfg)
    b = score_arch(FD_ARCHS[0], data, SkeletonConfig(), GeneratorConfig(), cfg)
    note(record_property, f"kappa={a.kappa!r}")
    assert a == b
    assert [np.float64(v).tobytes() for v in a.kappa_per_init] == [np.float64(v).tobytes() for v in b.kappa_per_init]


@pytest.mark.criterion(6, "search oracle")
def test_c06_search_oracle(record_property):
    def score(a):
        return sum(op != "nor_conv_3x3" for op in a.edges)

    space = list(enumerate_space())
    optimum = [a for a in space if score(a) == 0]
    assert optimum == [ArchSpec(("nor_conv_3x3",) * 6)]
    best, state = run_search(SearchConfig(16, 8, 200, seed=0), score)
    assert score(best) == 0 and best == optimum[0]
    reached = 0
    for seed in range(20):
        b, st_ = run_search(SearchConfig(16, 8, 200, seed=seed), score)
        trace = [v for _, v in st_.history]
        assert all(v2 <= v1 for v1, v2 in zip(trace, trace[1:])), seed
        reached += score(b) == 0
    note(record_property, f"seed 0 score {score(best)}; optimum reached on {reached}/20 seeds; traces monotone")


@pytest.fixture(scope="module")
def study():
    train, test = make_synthetic_splits(SyntheticSpec(), 0)
    t0 = time.perf_counter()
    table = correlation_study(NUM_ARCHS, train, test, STUDY)
    elapsed = time.perf_counter() - t0
    runner = Q1Runner(train, test, STUDY)
    rows = [r for r in table.rows if not r.error and math.isfinite(r.kappa)]
    best = min(rows, key=lambda r: r.kappa)
    return dict(train=train, test=test, table=table, elapsed=elapsed, runner=runner, best=parse_arch(best.arch))


@pytest.fixture(scope="module")
def attacked(study):
    net, gen, rep = study["runner"].run(study["best"])
    return dict(net=net, gen=gen, rep=rep)


@pytest.mark.slow
@pytest.mark.criterion(7, "correlation kappa vs ASR / ACC")
def test_c07_correlation(study, record_property):
    summary = study["table"].summary()
    rho_asr, rho_acc = summary["spearman_kappa_asr"], summary["spearman_kappa_acc"]
    acc = study["table"].column("acc")
    # a constant ACC column has no rank order, so there is nothing for kappa to correlate with
    acc_ok = (np.ptp(acc) == 0 and math.isnan(rho_acc)) or abs(rho_acc) <= 0.6
    note(record_property, f"Spearman(kappa,ASR)={rho_asr:.3f}, Spearman(kappa,ACC)={rho_acc:.3f}"
                          f"{' (ACC constant)' if np.ptp(acc) == 0 else ''}, "
                          f"{len(study['table'].rows)} archs, {study['elapsed'] / 60:.1f} min")
    assert len(study["table"].rows) == NUM_ARCHS
    assert all(not r.error for r in study["table"].rows)
    assert rho_asr <= -0.3
    assert acc_ok
    assert study["elapsed"] <= 30 * 60


@pytest.mark.slow
@pytest.mark.criterion(8, "end-to-end attack on lowest-kappa arch")
def test_c08_attack_sanity(study, attacked, record_property):
    rep = attacked["rep"]
    control_gen = build_generator(STUDY.gcfg, InitSpec(seed=STUDY.gen_seed + 100))
    control = attack_success_rate(attacked["net"], control_gen, study["test"], STUDY.backdoor.target_class)
    note(record_property, f"{format_arch(study['best'])}: ACC={rep.acc:.3f} ASR={rep.asr:.3f} "
                          f"control ASR={control:.3f}")
    assert control <= 0.35
    assert rep.acc >= 0.85
    assert rep.asr >= 0.80


@pytest.mark.criterion(9, "protocol reduction joint -> clean")
def test_c09_protocol_reduction(record_property):
    train = make_synthetic(SyntheticSpec(), 0)
    cfg = TrainConfig(epochs=2, rho_b=0, rho_c=0, lambda_div=0, lambda_atk=0, seed=11)
    # mask pretraining never touches the target model, so it is skipped to keep the run short
    a, ta = train_clean(build_network(FD_ARCHS[0], SkeletonConfig(), InitSpec(seed=5)), train, cfg)
    b, _, tb = train_joint(build_network(FD_ARCHS[0], SkeletonConfig(), InitSpec(seed=5)),
                           build_generator(GeneratorConfig(), InitSpec(seed=5)), train,
                           replace(cfg, mask_epochs=0))
    sa, sb = a.state_dict(), b.state_dict()
    identical = all(torch.equal(sa[k], sb[k]) for k in sa)
    note(record_property, f"{len(sa)} tensors compared, identical={identical}")
    assert identical
    assert [r.loss for r in ta] == [r.loss for r in tb if r.split == "train"]


@pytest.mark.slow
@pytest.mark.criterion(10, "poisoning trend under fine-tuning")
def test_c10_poisoning_trend(study, attacked, record_property):
    t = STUDY.backdoor.target_class
    base_acc = attacked["rep"].acc
    asr, acc = [], []
    for ratio in (0.0, 0.001, 0.01):
        net = copy_module(attacked["net"])
        data = make_poisoned_dataset(study["train"], attacked["gen"], ratio, t, seed=0)
        fine_tune(net, data, TrainConfig.finetune_defaults())
        rep = evaluate(net, attacked["gen"], study["test"], t)
        asr.append(rep.asr)
        acc.append(rep.acc)
    note(record_property, "ASR " + "/".join(f"{v:.3f}" for v in asr) + ", ACC " + "/".join(f"{v:.3f}" for v in acc)
         + f" (before fine-tuning ACC {base_acc:.3f})")
    assert asr[0] <= asr[1] <= asr[2]
    assert asr[2] >= asr[0] + 0.20
    assert all(a >= acc[0] - 0.02 and a >= base_acc - 0.02 for a in acc)


@pytest.mark.slow
@pytest.mark.criterion(11, "backdoor persists after re-training from scratch")
def test_c11_retraining(study, attacked, record_property):
    net, _ = retrain_scratch(study["best"], attacked["gen"], study["train"], STUDY.skel, STUDY.clean,
                             original_seed=STUDY.net_seed)
    rep = evaluate(net, attacked["gen"], study["test"], STUDY.backdoor.target_class)
    chance = 1 / study["train"].num_classes
    note(record_property, f"init seed {net.init.seed}: ACC={rep.acc:.3f} ASR={rep.asr:.3f} vs 2x chance {2 * chance:.2f}")
    assert net.init.seed != STUDY.net_seed
    assert rep.asr > 2 * chance


@pytest.mark.criterion(12, "CIFAR-10 test batch ingestion")
@pytest.mark.skipif(not os.environ.get(CIFAR_ENV), reason=f"set {CIFAR_ENV} to the CIFAR-10 test_batch.bin")
def test_c12_cifar(record_property):
    d = load_cifar10_binary(os.environ[CIFAR_ENV])
    hist = torch.bincount(d.labels, minlength=10).tolist()
    note(record_property, f"{len(d)} records, histogram {hist}")
    assert len(d) == 10_000 and hist == [1000] * 10

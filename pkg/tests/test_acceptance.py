"""End-to-end acceptance gate, one test per numbered criterion.

Each test prints a single PASS/FAIL line with the measured quantities.
Heavy training runs are cached at module scope so the robustness
criteria can share fixtures with the recovery criterion.
"""

import functools
import itertools
import math
import struct
import time
from fractions import Fraction

import numpy as np
import pytest
from sklearn.datasets import load_digits

from dpne.cluster_eval import (
    adjusted_mutual_info,
    cluster_accuracy,
    contingency_table,
    evaluate_clustering,
)
from dpne.data_io import (
    DataMatrix,
    SyntheticSpec,
    gen_synthetic,
    load_embedding,
    load_idx,
    save_embedding,
    save_idx,
    save_receptive_fields,
    subsample,
)
from dpne.density import (
    calibrate_bandwidths,
    dp_gradient,
    dp_objective,
    fd_dp_gradient,
    high_conditionals,
    low_conditionals,
    pairwise_sq_dists,
)
from dpne.network import (
    NetworkParams,
    backprop,
    bottleneck,
    fd_param_gradient,
    forward,
    nonneg_penalty,
    random_params,
    reconstruction_loss,
    sparsity_penalty,
)
from dpne.trainer import TrainConfig, train


def report(num: int, ok: bool, detail: str) -> None:
    print(f"{'PASS' if ok else 'FAIL'} criterion {num}: {detail}")
    assert ok, detail


def param_count(params: NetworkParams) -> int:
    return sum(w.size for w in params.weights) + sum(b.size for b in params.biases)


def grad_rel_err(analytic, numeric):
    num = max(float(np.abs(a - b).max()) for a, b in zip(analytic, numeric))
    den = max(1e-30, max(float(np.abs(b).max()) for b in numeric))
    return num / den


def flat(grads):
    return list(grads.weights) + list(grads.biases)


def test_criterion_01_gradient_fidelity():
    start = time.perf_counter()
    worst = 0.0
    cases = [
        ((2, 2, 1, 2, 2), 2),
        ((3, 2, 3), None),
        ((2, 1, 2), 1),
    ]
    for idx, (sizes, linear) in enumerate(cases):
        rng = np.random.default_rng(100 + idx)
        params = random_params(sizes, rng, linear_layer=linear)
        params = NetworkParams(
            params.sizes,
            [w * 1.5 for w in params.weights],
            [b + 0.1 for b in params.biases],
            params.linear_layer,
        )
        assert param_count(params) <= 30
        n = 6
        x = rng.uniform(0.05, 0.95, (n, sizes[0]))

        grads = backprop(params, forward(params, x), x)
        numeric = fd_param_gradient(
            lambda p: reconstruction_loss(forward(p, x), x), params
        )
        worst = max(worst, grad_rel_err([g / n for g in flat(grads)], flat(numeric)))

        _, reg = nonneg_penalty(params)
        numeric = fd_param_gradient(lambda p: nonneg_penalty(p)[0], params)
        worst = max(worst, grad_rel_err(flat(reg), flat(numeric)))

        if params.linear_layer != 1:  # sparsity applies to sigmoid layers only
            alpha, p_t = 0.7, 0.2
            grads = backprop(
                params, forward(params, x), x, sparsity=(1, p_t, alpha)
            )
            numeric = fd_param_gradient(
                lambda p: reconstruction_loss(forward(p, x), x)
                + alpha * sparsity_penalty(forward(p, x), 1, p_t),
                params,
            )
            worst = max(
                worst, grad_rel_err([g / n for g in flat(grads)], flat(numeric))
            )

    elapsed = time.perf_counter() - start
    report(
        1,
        worst < 1e-6 and elapsed < 10.0,
        f"max relative gradient error {worst:.3e} (< 1e-6), {elapsed:.1f}s (< 10s)",
    )


def test_criterion_02_dp_gradient_direction():
    start = time.perf_counter()
    trials = 100
    hits_ip = 0
    hits_step = 0
    for trial in range(trials):
        rng = np.random.default_rng([202, trial])
        n = int(rng.integers(5, 11))
        d = int(rng.integers(2, 4))
        p = high_conditionals(rng.uniform(0.0, 1.0, (n, 8)), 3)
        h = rng.standard_normal((n, d))
        if trial % 2 == 0:
            b = np.ones(n)
        else:
            b, _ = calibrate_bandwidths(pairwise_sq_dists(h), t=min(5.0, n - 2.0))
        q = low_conditionals(h, b)
        g = dp_gradient(p, q, h, b)
        fd = fd_dp_gradient(p, h, b)
        hits_ip += (g * fd).sum() > 0.0
        before = dp_objective(p, q)
        after = dp_objective(p, low_conditionals(h - 1e-4 * g, b))
        hits_step += after <= before
    elapsed = time.perf_counter() - start
    report(
        2,
        hits_ip >= 95 and hits_step >= 95 and elapsed < 30.0,
        f"positive inner product {hits_ip}/100, descent step {hits_step}/100 "
        f"(both >= 95), {elapsed:.1f}s (< 30s)",
    )


def test_criterion_03_affinity_invariants():
    start = time.perf_counter()
    worst_sum = 0.0
    worst_dp = 0.0
    for trial in range(1000):
        rng = np.random.default_rng([303, trial])
        n = int(rng.integers(4, 13))
        k = int(rng.integers(1, n - 1))
        p = high_conditionals(rng.uniform(0.0, 1.0, (n, int(rng.integers(2, 7)))), k)
        h = rng.standard_normal((n, int(rng.integers(1, 4))))
        b = rng.uniform(0.3, 3.0, n) if trial % 2 else float(rng.uniform(0.3, 3.0))
        q = low_conditionals(h, b)
        for mat in (p, q):
            worst_sum = max(worst_sum, float(np.abs(mat.sum(axis=1) - 1.0).max()))
            assert (np.diag(mat) == 0.0).all()
            assert (mat >= 0.0).all()
        val = dp_objective(p, q)
        worst_dp = min(worst_dp, val)
        assert dp_objective(p, p) == 0.0
    elapsed = time.perf_counter() - start
    report(
        3,
        worst_sum <= 1e-9 and worst_dp >= -1e-12 and elapsed < 10.0,
        f"1000 instances: max |row sum - 1| {worst_sum:.2e} (<= 1e-9), "
        f"min dp_objective {worst_dp:.2e} (>= -1e-12), {elapsed:.1f}s (< 10s)",
    )


# ------------------------------------------------------- clustering runs


def clustering_acc(h, labels) -> float:
    return evaluate_clustering(
        np.asarray(h), np.asarray(labels), restarts=10, repeats=5, seed=0
    )["acc_mean"]


@functools.lru_cache(maxsize=None)
def synth_fixture():
    return gen_synthetic(SyntheticSpec(4, 250, 2.0, seed=0))


def _synth_cfg(**kw) -> TrainConfig:
    base = dict(
        dim=2,
        hidden=(64,),
        gamma=100.0,
        eta=0.3,
        maxiter=200,
        k=10,
        b_h_policy="calibrated",
        t=20.0,
        pretrain_iters=200,
        seed=0,
    )
    base.update(kw)
    return TrainConfig(**base)


@functools.lru_cache(maxsize=None)
def synth_acc(mode: str, seed: int, k: int = 10) -> float:
    data = synth_fixture()
    _, h, _ = train(data.values, _synth_cfg(k=k, seed=seed), mode=mode)
    return clustering_acc(h, data.labels)


@functools.lru_cache(maxsize=None)
def digits_subset():
    digits = load_digits()
    dm = DataMatrix(digits.data / 16.0, digits.target.astype(np.int64))
    return subsample(dm, 1000, seed=0, stratified=True)


@functools.lru_cache(maxsize=None)
def digits_acc(mode: str, seed: int) -> float:
    sub = digits_subset()
    cfg = TrainConfig(
        dim=10,
        hidden=(64,),
        gamma=1500.0,
        eta=2.0,
        maxiter=300,
        k=10,
        b_h_policy="fixed",
        pretrain_iters=200,
        seed=seed,
    )
    _, h, _ = train(sub.values, cfg, mode=mode)
    return clustering_acc(h, sub.labels)


@pytest.mark.filterwarnings("ignore:overflow", "ignore:invalid value")
def test_criterion_04_synthetic_recovery():
    start = time.perf_counter()
    dpne = [synth_acc("dpne", s) for s in range(5)]
    sae = [synth_acc("sae", s) for s in range(5)]
    elapsed = time.perf_counter() - start
    dm = float(np.mean(dpne))
    sm = float(np.mean(sae))
    report(
        4,
        dm >= 0.90 and dm - sm >= 0.10 and elapsed < 600.0,
        f"dpne acc {dm:.3f} (>= 0.90) vs sae {sm:.3f}, "
        f"gap {100 * (dm - sm):.1f} pts (>= 10) over 5 seeds, "
        f"{elapsed:.0f}s (< 600s)",
    )


@pytest.mark.filterwarnings("ignore:overflow", "ignore:invalid value")
def test_criterion_05_method_ordering():
    start = time.perf_counter()
    means = {
        mode: float(np.mean([digits_acc(mode, s) for s in range(5)]))
        for mode in ("sae", "ncae", "dpne")
    }
    elapsed = time.perf_counter() - start
    report(
        5,
        means["dpne"] >= means["ncae"] + 0.05
        and means["ncae"] >= means["sae"] - 0.02
        and elapsed < 1800.0,
        f"dpne {means['dpne']:.3f} vs ncae {means['ncae']:.3f} "
        f"(need +5 pts) vs sae {means['sae']:.3f} (ncae within -2 pts), "
        f"1000-sample digit subset, 5 seeds, {elapsed:.0f}s (< 1800s)",
    )


@pytest.mark.filterwarnings("ignore:overflow", "ignore:invalid value")
def test_criterion_06_k_robustness():
    start = time.perf_counter()
    accs = {k: synth_acc("dpne", 0, k=k) for k in (5, 10, 15, 20)}
    elapsed = time.perf_counter() - start
    spread = max(accs.values()) - min(accs.values())
    report(
        6,
        spread <= 0.10 and elapsed < 1200.0,
        "acc by k " + " ".join(f"{k}:{a:.3f}" for k, a in accs.items())
        + f", spread {100 * spread:.1f} pts (<= 10), {elapsed:.0f}s (< 1200s)",
    )


@functools.lru_cache(maxsize=None)
def synth_dim_acc(dim: int) -> float:
    # the closed form gradient divides by b_i^D, so per-point calibrated
    # bandwidths below one overflow it once D grows; the dimension sweep
    # therefore runs with the unit fixed bandwidth
    data = synth_fixture()
    cfg = _synth_cfg(dim=dim, b_h_policy="fixed")
    _, h, _ = train(data.values, cfg, mode="dpne")
    return clustering_acc(h, data.labels)


@pytest.mark.filterwarnings("ignore:overflow", "ignore:invalid value")
def test_criterion_07_dimension_robustness():
    start = time.perf_counter()
    lo = synth_dim_acc(5)
    hi = synth_dim_acc(30)
    elapsed = time.perf_counter() - start
    report(
        7,
        abs(lo - hi) <= 0.10 and elapsed < 1200.0,
        f"acc D=5 {lo:.3f} vs D=30 {hi:.3f}, "
        f"|diff| {100 * abs(lo - hi):.1f} pts (<= 10), {elapsed:.0f}s (< 1200s)",
    )


@pytest.mark.filterwarnings("ignore:overflow", "ignore:invalid value")
def test_criterion_08_nonneg_constraint_effect():
    start = time.perf_counter()
    sub = digits_subset()
    mass = {}
    for mode in ("sae", "ncae"):
        cfg = TrainConfig(
            dim=10,
            hidden=(64,),
            beta=0.007,
            eta=1.0,
            maxiter=1000,
            k=10,
            pretrain_iters=2000,
            seed=0,
        )
        params, _, _ = train(sub.values, cfg, mode=mode)
        mass[mode] = float(np.abs(np.minimum(params.weights[0], 0.0)).sum())
    elapsed = time.perf_counter() - start
    ratio = mass["ncae"] / mass["sae"]
    report(
        8,
        ratio < 0.5 and elapsed < 600.0,
        f"layer-1 negative mass ncae {mass['ncae']:.1f} vs sae {mass['sae']:.1f}, "
        f"ratio {ratio:.3f} (< 0.5), identical seed, {elapsed:.0f}s (< 600s)",
    )


# ---------------------------------------------------------------- metrics


def restricted_growth_strings(n: int, max_blocks: int):
    """All canonical partition labelings of n items into <= max_blocks."""
    out = []

    def extend(prefix, used):
        if len(prefix) == n:
            out.append(tuple(prefix))
            return
        for label in range(min(used + 1, max_blocks)):
            prefix.append(label)
            extend(prefix, max(used, label + 1))
            prefix.pop()

    extend([], 0)
    return out


def brute_accuracy(truth, pred):
    table = contingency_table(truth, pred)
    side = max(table.shape)
    padded = np.zeros((side, side), dtype=int)
    padded[: table.shape[0], : table.shape[1]] = table
    best = 0
    for perm in itertools.permutations(range(side)):
        best = max(best, sum(padded[perm[j], j] for j in range(side)))
    return best / len(truth)


@functools.lru_cache(maxsize=None)
def exact_ami_from_table(table_bytes, shape):
    """Exact-EMI oracle; None when the normalizer degenerates to ~0/0."""
    table = np.frombuffer(table_bytes, dtype=np.int64).reshape(shape)
    n = int(table.sum())
    a = table.sum(axis=1)
    b = table.sum(axis=0)
    entropy = lambda cs: -sum((c / n) * math.log(c / n) for c in cs if c > 0)
    hu, hv = entropy(a), entropy(b)
    if hu == 0.0 and hv == 0.0:
        return 1.0
    if hu == 0.0 or hv == 0.0:
        return 0.0
    mi = sum(
        (table[i, j] / n) * math.log(n * table[i, j] / (a[i] * b[j]))
        for i in range(shape[0])
        for j in range(shape[1])
        if table[i, j] > 0
    )
    emi = 0.0
    for ai in a:
        for bj in b:
            for nij in range(max(1, ai + bj - n), min(ai, bj) + 1):
                prob = Fraction(
                    math.comb(bj, nij) * math.comb(n - bj, ai - nij),
                    math.comb(n, ai),
                )
                emi += float(prob) * (nij / n) * math.log(n * nij / (ai * bj))
    denom = 0.5 * (hu + hv) - emi
    if abs(denom) < 1e-9:
        return None  # 0/0: any convention is as defensible as another
    return (mi - emi) / denom


def exact_ami(truth, pred):
    table = np.ascontiguousarray(contingency_table(truth, pred))
    return exact_ami_from_table(table.tobytes(), table.shape)


def test_criterion_09_metric_oracles():
    # Exhaustive over every pair of partitions for N <= 6; the N in {7, 8}
    # pair space is too large for exact rational oracles inside the budget,
    # so those sizes are covered by a 400-pair seeded sample each.
    start = time.perf_counter()
    checked = 0
    degenerate = 0
    worst = 0.0

    def check_pair(ta, pa):
        nonlocal checked, degenerate, worst
        assert cluster_accuracy(ta, pa) == pytest.approx(
            brute_accuracy(ta, pa), abs=1e-12
        )
        want = exact_ami(ta, pa)
        if want is None:
            degenerate += 1
        else:
            worst = max(worst, abs(adjusted_mutual_info(ta, pa) - want))
        checked += 1

    for n in range(2, 7):
        parts = [np.array(p) for p in restricted_growth_strings(n, 3)]
        for ta in parts:
            for pa in parts:
                check_pair(ta, pa)
    rng = np.random.default_rng(909)
    for n in (7, 8):
        for _ in range(400):
            check_pair(rng.integers(0, 3, n), rng.integers(0, 3, n))
    elapsed = time.perf_counter() - start
    report(
        9,
        worst < 1e-10 and elapsed < 10.0,
        f"{checked} partition pairs ({degenerate} with a degenerate "
        f"normalizer skipped for AMI): ACC matches enumeration exactly, "
        f"max |AMI - oracle| {worst:.2e} (< 1e-10), {elapsed:.1f}s (< 10s)",
    )


def test_criterion_10_format_contracts(tmp_path):
    start = time.perf_counter()
    rng = np.random.default_rng(1010)

    values = rng.uniform(0.0, 1.0, (20, 49))
    img, lab = tmp_path / "i.idx", tmp_path / "l.idx"
    save_idx(img, values, lab, rng.integers(0, 10, 20), image_shape=(7, 7))
    back = load_idx(img, lab)
    idx_err = float(np.abs(back.values - values).max())
    quantized = back.values.copy()
    save_idx(img, quantized, image_shape=(7, 7))
    idx_exact = np.array_equal(load_idx(img).values, quantized)

    h = rng.standard_normal((30, 5)) * 50.0
    emb = tmp_path / "h.txt"
    save_embedding(emb, h)
    emb_err = float(np.abs(load_embedding(emb)[0] - h).max())

    params = NetworkParams(
        (4, 2),
        [np.array([[0.0, 0.0, 0.0, 0.0], [1.0, -1.0, 0.5, 0.0]])],
        [np.zeros(2)],
    )
    save_receptive_fields(params, 1, 2, 2, tmp_path)
    golden0 = b"P5\n2 2\n255\n" + bytes([128, 128, 128, 128])
    golden1 = b"P5\n2 2\n255\n" + bytes([255, 0, 191, 128])
    pgm_ok = (
        (tmp_path / "field_0000.pgm").read_bytes() == golden0
        and (tmp_path / "field_0001.pgm").read_bytes() == golden1
    )

    elapsed = time.perf_counter() - start
    report(
        10,
        idx_err <= 1.0 / 255.0 and idx_exact and emb_err <= 1e-12 and pgm_ok,
        f"idx round-trip error {idx_err:.2e} (<= 1/255, exact after "
        f"quantization: {idx_exact}), embedding round-trip {emb_err:.2e} "
        f"(<= 1e-12), PGM golden bytes identical: {pgm_ok}, {elapsed:.1f}s",
    )

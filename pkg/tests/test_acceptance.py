"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

Lines are printed as they happen (visible with ``-s``) and repeated in the
pytest terminal summary.
"""

import math
import time

import numpy as np
import pytest

from hnsurv import tensor as T
from hnsurv.cbam import CbamBlock, cbam_forward
from hnsurv.data import generate_synthetic, load_arrays, load_cohort, read_volume, split_cohort, write_volume
from hnsurv.fusion import ModalityStack, fuse_max
from hnsurv.metrics import CohortOutcome, ctd_index, harrell_c, kaplan_meier
from hnsurv.nn import BatchNorm3d, Linear
from hnsurv.survival import SurvivalHead, SurvivalOutput, TimeGrid, discretize_all, head_forward, nll_loss, survival_curve
from hnsurv.tensor import Tape, Tensor
from hnsurv.training import TrainConfig, evaluate, load_checkpoint, save_checkpoint, train

from conftest import ACCEPTANCE_LINES, all_train
from oracles import ctd_pairs, gradcheck, harrell_pairs, subject_nll


def report(number, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    return ok


def t64(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def weighted_sum(y, rng):
    """Scalar probe sum(y * R) with random R, so no gradient cancels by symmetry."""
    return T.reduce("sum", T.mul(y, t64(rng.normal(size=y.shape))))


# ----------------------------------------------------------- criterion 1

def _grad_cases(seed):
    rng = np.random.default_rng(seed)
    r = lambda *s: t64(rng.normal(size=s))
    probe_rng = lambda: np.random.default_rng(1000 + seed)
    stride, pad = (1, 1) if seed % 2 else (2, 0)

    def conv(x, w, b):
        return weighted_sum(T.conv3d(x, w, b, stride, pad), probe_rng())

    def maxpool(x):
        return weighted_sum(T.pool3d("max", x, 2, 1 + seed % 2), probe_rng())

    def avgpool(x):
        return weighted_sum(T.pool3d("avg", x, 2, 1 + seed % 2), probe_rng())

    def gpools(x):
        return T.add(weighted_sum(T.global_pool("max", x), probe_rng()),
                     weighted_sum(T.global_pool("avg", x), probe_rng()))

    bn = BatchNorm3d(3)

    def batchnorm(x, g, b):
        bn.gamma, bn.beta = g, b
        bn.running_mean = np.zeros(3)
        bn.running_var = np.ones(3)
        return weighted_sum(bn(x), probe_rng())

    lin = Linear(5, 4, rng)

    def linear(x, w, b):
        lin.weight, lin.bias = w, b
        return weighted_sum(lin(x), probe_rng())

    blk = CbamBlock(4, rng, reduction=2)

    def cbam(F, w1, w2, ws):
        blk.channel.w1, blk.channel.w2, blk.spatial.weight = w1, w2, ws
        return weighted_sum(cbam_forward(blk, F), probe_rng())

    def fusion(Z):
        return weighted_sum(fuse_max(ModalityStack(Z, ("ct", "pet", "clinical"))).c, probe_rng())

    head = SurvivalHead(6, 5, rng)

    def head_fn(x, w, b):
        head.linear.weight, head.linear.bias = w, b
        out = head_forward(head, x)
        return T.add(weighted_sum(out.survival, probe_rng()), weighted_sum(out.hazards, probe_rng()))

    grid = TimeGrid((1.0, 2.0, 3.0, 4.0, 5.0))
    labels = discretize_all(grid, rng.uniform(0.2, 6.5, size=6), rng.integers(0, 2, size=6))

    def nll(z):
        h = T.activation("sigmoid", T.scale(z, -1.0))
        return nll_loss(SurvivalOutput(h, survival_curve(h)), labels)

    bn_x = rng.normal(size=(2, 3, 3, 3, 3))
    return {
        "conv3d": (conv, [r(1, 2, 5, 5, 5), r(3, 2, 3, 3, 3), r(3)]),
        "max_pool3d": (maxpool, [r(1, 2, 5, 5, 5)]),
        "avg_pool3d": (avgpool, [r(1, 2, 5, 5, 5)]),
        "global_pools": (gpools, [r(2, 3, 3, 3, 3)]),
        "batch_norm": (batchnorm, [t64(bn_x), t64(1 + 0.3 * rng.normal(size=3)), r(3)]),
        "linear": (linear, [r(3, 5), t64(lin.weight.data), r(4)]),
        "cbam": (cbam, [r(1, 4, 4, 4, 4), t64(blk.channel.w1.data), t64(blk.channel.w2.data),
                        t64(blk.spatial.weight.data)]),
        "fuse_max": (fusion, [r(3, 4, 3)]),
        "head_forward": (head_fn, [r(4, 6), t64(head.linear.weight.data), r(5)]),
        "nll_loss": (nll, [r(6, 5)]),
    }


def test_criterion_1_gradient_suite():
    start = time.time()
    worst = {}
    for seed in range(10):
        for name, (fn, inputs) in _grad_cases(seed).items():
            err = gradcheck(fn, inputs, max_per_input=40, rng=np.random.default_rng(seed))
            worst[name] = max(worst.get(name, 0.0), err)
    elapsed = time.time() - start
    top = max(worst, key=worst.get)
    ok = max(worst.values()) < 1e-4 and elapsed < 120
    report(1, ok, f"{len(worst)} ops x 10 seeds, max rel. error {worst[top]:.2e} ({top}), "
                  f"{elapsed:.1f}s")
    assert ok, worst


# ----------------------------------------------------------- criterion 2

def test_criterion_2_survival_curve_invariants():
    rng = np.random.default_rng(2)
    bad = 0
    for _ in range(1000):
        p = int(rng.integers(1, 16))
        h = rng.uniform(0.0, 1.0, size=(1, p))
        if rng.uniform() < 0.1:
            h[0, rng.integers(p)] = 0.0
        S = survival_curve(t64(h)).data[0]
        ref, s = [], 1.0
        for q in range(p):
            s = s * (1 - h[0, q])
            ref.append(s)
        in_range = ((S > 0) & (S <= 1)).all()
        monotone = (np.diff(S) <= 0).all()
        exact = S.tolist() == ref
        bad += not (in_range and monotone and exact)
    ok = bad == 0
    report(2, ok, f"1000 hazard vectors, {bad} violations of range/monotonicity/exact product")
    assert ok


# ----------------------------------------------------------- criterion 3

def test_criterion_3_nll_oracle():
    rng = np.random.default_rng(3)
    worst, kinds = 0.0, set()
    for _ in range(100):
        p = int(rng.integers(1, 8))
        edges = np.cumsum(rng.uniform(0.5, 2.0, size=p))
        grid = TimeGrid(tuple(edges))
        n = int(rng.integers(1, 9))
        # mix of edge hits, mid-interval times and times beyond the horizon
        times = np.where(rng.uniform(size=n) < 0.3, rng.choice(edges, n),
                         rng.uniform(0.05, edges[-1] * 1.3, size=n))
        events = rng.integers(0, 2, size=n).astype(bool)
        h = rng.uniform(0.0, 1.0, size=(n, p))
        labels = discretize_all(grid, times, events)
        got = nll_loss(SurvivalOutput(t64(h), survival_curve(t64(h))), labels).item()
        ref = sum(subject_nll(h[i], grid.edges, times[i], events[i]) for i in range(n)) / n
        worst = max(worst, abs(got - ref))
        for t, e in zip(times, events):
            kinds.add("horizon" if t > edges[-1] else "event" if e else "censored")
    ok = worst < 1e-12 and kinds == {"horizon", "event", "censored"}
    report(3, ok, f"100 batches ({', '.join(sorted(kinds))}), max |diff| {worst:.1e}")
    assert ok


# ----------------------------------------------------------- criterion 4

def test_criterion_4_fusion_algebra():
    rng = np.random.default_rng(4)
    failures = []
    for k in range(1000):
        n, m, mods = (int(v) for v in rng.integers(1, 5, size=3))
        Z = rng.integers(-3, 4, size=(n, m, mods)).astype(float)
        if k % 2:
            Z = Z + rng.normal(scale=0.01, size=Z.shape)
        ids = tuple(f"m{i}" for i in range(mods))
        c = fuse_max(ModalityStack(t64(Z), ids)).c.data
        perm = rng.permutation(mods)
        if not np.array_equal(fuse_max(ModalityStack(t64(Z[:, :, perm]), ids)).c.data, c):
            failures.append("permutation")
        cc = np.stack([c, c], axis=2)
        if not np.array_equal(fuse_max(ModalityStack(t64(cc), ("a", "b"))).c.data, c):
            failures.append("idempotence")
        Z2 = Z.copy()
        Z2[rng.integers(n), rng.integers(m), rng.integers(mods)] += rng.uniform(0, 2)
        if (fuse_max(ModalityStack(t64(Z2), ids)).c.data < c).any():
            failures.append("monotonicity")
        z = Tensor(Z, requires_grad=True)
        with Tape() as tape:
            out = T.reduce("sum", fuse_max(ModalityStack(z, ids)).c)
        tape.backward(out)
        first = np.argmax(Z, axis=2)
        expect = np.zeros_like(Z)
        np.put_along_axis(expect, first[:, :, None], 1.0, axis=2)
        if not np.array_equal(z.grad, expect):
            failures.append("gradient routing")
    ok = not failures
    report(4, ok, f"1000 stacks, failures: {sorted(set(failures)) or 'none'}")
    assert ok


# ----------------------------------------------------------- criterion 5

def test_criterion_5_metric_oracles():
    start = time.time()
    mismatches = 0
    for n in (10, 100, 500):
        for seed in range(10):
            rng = np.random.default_rng(50 + seed)
            time_ = rng.integers(1, max(4, n // 4), size=n).astype(float)
            event = rng.uniform(size=n) < 0.6
            event[0], time_[1] = True, time_[0] + 1
            out = CohortOutcome(time_, event)
            u = np.unique(time_)
            grid = TimeGrid(tuple(u[np.linspace(0, u.size - 1, min(6, u.size)).astype(int)]))
            h = np.round(rng.uniform(0.05, 0.5, size=(n, grid.p)), 1 + seed % 2)
            S = np.cumprod(1 - h, axis=1)
            risk = np.round(rng.normal(size=n), seed % 3)
            mismatches += ctd_index(S, out, grid) != ctd_pairs(S, time_, event, grid.edges)
            mismatches += harrell_c(risk, out) != harrell_pairs(risk, time_, event)
    km = kaplan_meier(CohortOutcome([1, 2, 3, 4, 5], [1, 0, 1, 0, 1]))
    km_err = max(abs(km.at(1.0) - 0.8), abs(km.at(3.0) - 0.8 * 2 / 3), abs(km.at(5.0)))
    elapsed = time.time() - start
    ok = mismatches == 0 and km_err < 1e-12 and elapsed < 60
    report(5, ok, f"60 cohorts, {mismatches} oracle mismatches; KM worst error {km_err:.1e}; "
                  f"{elapsed:.1f}s")
    assert ok


# ------------------------------------------------------ criteria 6 and 7

E2E_SEEDS = (0, 1, 2)
_runs = {}


@pytest.fixture(scope="module")
def e2e_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("e2e")


def _cohort(root, signal, seed):
    out = root / f"sig{signal:g}_seed{seed}"
    if not (out / "manifest.csv").exists():
        generate_synthetic(out, 200, (16, 16, 16), signal=signal, censor_rate=0.3, seed=seed)
    records = load_cohort(out / "manifest.csv")
    return records, load_arrays(records, ("ct", "pet"), None, np.float64)


def experiment(root, signal, seed, use_cbam=True, max_steps=None):
    key = (signal, seed, use_cbam, max_steps)
    if key not in _runs:
        records, arrays = _cohort(root, signal, seed)
        cfg = TrainConfig(seed=seed, use_cbam=use_cbam)
        split = split_cohort(records, cfg.seed)
        result = train(cfg, arrays, split, max_steps=max_steps)
        test = arrays.subset(arrays.indices(split.ids("test")))
        _runs[key] = (evaluate(result.model, test)["ctd"], result)
    return _runs[key]


def test_criterion_6_signal_recovery(e2e_dir):
    start = time.time()
    strong = [experiment(e2e_dir, 4.0, s)[0] for s in E2E_SEEDS]
    null = [experiment(e2e_dir, 0.0, s)[0] for s in E2E_SEEDS]
    ms, mn = float(np.mean(strong)), float(np.mean(null))
    elapsed = time.time() - start
    ok = ms >= 0.65 and ms - mn >= 0.1
    report(6, ok, f"test Ctd signal=4 {ms:.3f} {np.round(strong, 3).tolist()}, "
                  f"signal=0 {mn:.3f} {np.round(null, 3).tolist()}, gap {ms - mn:.3f}; "
                  f"{elapsed / 60:.1f} min")
    assert ok


def test_criterion_7_cbam_ablation(e2e_dir):
    on = [experiment(e2e_dir, 4.0, s, use_cbam=True)[0] for s in E2E_SEEDS]
    off = [experiment(e2e_dir, 4.0, s, use_cbam=False)[0] for s in E2E_SEEDS]
    # determinism: a fresh short rerun must reproduce the opening steps exactly
    deterministic = True
    for s in E2E_SEEDS:
        for flag in (True, False):
            full = experiment(e2e_dir, 4.0, s, use_cbam=flag)[1].step_losses
            records, arrays = _cohort(e2e_dir, 4.0, s)
            cfg = TrainConfig(seed=s, use_cbam=flag)
            again = train(cfg, arrays, split_cohort(records, s), max_steps=60).step_losses
            deterministic &= again == full[:60]
    complete = all(math.isfinite(v) for v in on + off)
    ok = complete and deterministic
    report(7, ok, f"CBAM on {np.mean(on):.3f} {np.round(on, 3).tolist()}, "
                  f"off {np.mean(off):.3f} {np.round(off, 3).tolist()} (observational); "
                  f"complete={complete}, deterministic={deterministic}")
    assert ok


# ----------------------------------------------------------- criterion 8

def test_criterion_8_overfit(tmp_path):
    start = time.time()
    c = generate_synthetic(tmp_path, 8, (16, 16, 16), signal=4.0, censor_rate=0.3, seed=8)
    arrays = load_arrays(load_cohort(c.manifest), ("ct", "pet"), None, np.float64)
    # eight subjects cannot support ten quantile intervals
    cfg = TrainConfig(epochs=1000, intervals=4, seed=0)
    res = train(cfg, arrays, all_train(arrays), max_steps=200)
    first, final = res.step_losses[0], float(np.mean(res.step_losses[-2:]))
    elapsed = time.time() - start
    ok = len(res.step_losses) == 200 and final < 0.5 * first and elapsed < 120
    report(8, ok, f"8 subjects, 200 steps, loss {first:.4f} -> {final:.4f} "
                  f"(ratio {final / first:.3f}); {elapsed:.1f}s")
    assert ok


# ----------------------------------------------------------- criterion 9

def test_criterion_9_determinism_and_persistence(tmp_path):
    c = generate_synthetic(tmp_path / "c", 20, (16, 16, 16), signal=4.0, censor_rate=0.3, seed=9)
    records = load_cohort(c.manifest)
    arrays = load_arrays(records, ("ct", "pet"), None, np.float64)
    cfg = TrainConfig(epochs=2, intervals=4, widths=(4, 8), depths=(1, 1), embedding=8, seed=9)
    split = split_cohort(records, cfg.seed)
    a, b = train(cfg, arrays, split), train(cfg, arrays, split)
    # repr so a NaN validation Ctd (no comparable pairs) compares equal to itself
    same_history = ([repr((r.train_loss, r.val_ctd)) for r in a.history] ==
                    [repr((r.train_loss, r.val_ctd)) for r in b.history] and
                    a.step_losses == b.step_losses)
    save_checkpoint(a.model, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt")
    same_pred = back.predict(arrays).tobytes() == a.model.predict(arrays).tobytes()
    v = np.random.default_rng(9).normal(size=(5, 6, 7)).astype(np.float32)
    write_volume(tmp_path / "v.svol", v)
    same_vol = read_volume(tmp_path / "v.svol").data[0].tobytes() == v.tobytes()
    ok = same_history and same_pred and same_vol
    report(9, ok, f"loss history identical={same_history}, checkpoint predictions "
                  f"bit-exact={same_pred}, SVOL value-exact={same_vol}")
    assert ok

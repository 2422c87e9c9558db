"""Acceptance criteria. Each test logs one PASS/FAIL line, shown in the terminal summary.

The end-to-end criteria (6 to 8) train the full desk-scale stream three times
per seed and take roughly a quarter of an hour each on one CPU core.
"""

import time
from pathlib import Path

import numpy as np
import pytest

from s2il.config import load_config
from s2il.distill import FDWeights, baseline_fd_loss, s2il_loss, s2il_terms, ssim
from s2il.exemplar import herding_select
from s2il.gradcheck import finite_difference_check
from s2il.metrics import RunRecord, aia, bt, fgt, oracle_deviation
from s2il.netlib import FeatureBundle, ProxyHead, lsc_loss
from s2il.runner import run_experiment
from s2il.tensor import GradTape, Tensor, backward

from oracles import (aia_oracle, bt_oracle, deviation_oracle, fgt_oracle, herding_oracle,
                     scalar_ssim)

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "directional.cfg"
GRAD_TOL = 1e-4


def map_pair(rng, shape=(4, 4)):
    """Nonnegative activation-like maps: unrelated, correlated or anti-correlated."""
    u = np.abs(rng.normal(size=shape)) * rng.uniform(0.1, 3.0)
    kind = rng.integers(3)
    if kind == 0:
        v = np.abs(rng.normal(size=shape)) * rng.uniform(0.1, 3.0)
    elif kind == 1:
        v = np.abs(u * rng.uniform(0.3, 3.0) + rng.normal(0.0, 0.3, size=shape))
    else:
        v = np.abs(u.max() - u + rng.normal(0.0, 0.1, size=shape))
    return u, v


def test_criterion_1_ssim_kernel(criterion_log):
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    identity = symmetric = in_range = True
    worst = 0.0
    for _ in range(1000):
        u, v = map_pair(rng)
        identity &= ssim(u, u).item() == 1.0
        a, b = ssim(u, v).item(), ssim(v, u).item()
        symmetric &= abs(a - b) <= 1e-14
        in_range &= -1.0 <= a <= 1.0
        worst = max(worst, abs(a - scalar_ssim(u, v)))
    elapsed = time.perf_counter() - start
    ok = identity and symmetric and in_range and worst <= 1e-12 and elapsed < 5.0
    criterion_log(1, ok, f"identity={identity} symmetry={symmetric} range={in_range} "
                         f"max |ssim - scalar oracle|={worst:.2e} (tol 1e-12) runtime={elapsed:.2f}s (< 5s)")
    assert ok


def _bundle(rng, batch=2):
    layers = [Tensor(np.abs(rng.normal(size=(batch, 2, 4, 4)))), Tensor(np.abs(rng.normal(size=(batch, 3, 2, 2))))]
    return FeatureBundle(layers, Tensor(layers[-1].data.mean(axis=(2, 3))))


def test_criterion_2_loss_contracts(criterion_log):
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    lo, hi = np.inf, -np.inf
    for _ in range(1000):
        u, v = map_pair(rng)
        term = s2il_terms(u[None, None], v[None, None]).item()
        lo, hi = min(lo, term), max(hi, term)
    bitwise = True
    for _ in range(100):
        cur, prev = _bundle(rng), _bundle(rng)
        bitwise &= baseline_fd_loss(cur, prev).item() == baseline_fd_loss(cur, prev, FDWeights.uniform([2, 3])).item()
    teacher_zero = True
    for _ in range(20):
        cur = Tensor(np.abs(rng.normal(size=(2, 3, 4, 4))), requires_grad=True)
        prev = Tensor(np.abs(rng.normal(size=(2, 3, 4, 4))), requires_grad=True)
        with GradTape():
            loss = s2il_loss(cur, prev)
        backward(loss)
        teacher_zero &= bool(np.all(prev.grad.data == 0.0))
    elapsed = time.perf_counter() - start
    ok = lo >= 0.0 and hi <= 1.0 and bitwise and teacher_zero and elapsed < 10.0
    criterion_log(2, ok, f"per-channel terms in [{lo:.3g}, {hi:.3g}] (must lie in [0, 1]) "
                         f"unit-weight bitwise={bitwise} teacher grad zero={teacher_zero} "
                         f"runtime={elapsed:.2f}s (< 10s)")
    assert ok


def _s2il_instance(rng):
    prev = np.abs(rng.normal(size=(2, 3, 4, 4))) + 0.05
    cur = np.abs(prev * rng.uniform(0.5, 2.0) + rng.normal(0.0, 0.5, size=prev.shape)) + 0.05
    return [(lambda x: s2il_loss(x, Tensor(prev)), cur)]


def _fd_instance(rng):
    cur, prev = _bundle(rng), _bundle(rng)
    weights = FDWeights([rng.uniform(0, 2, size=2), rng.uniform(0, 2, size=3)], rng.uniform(0, 2))
    checks = []
    for i in range(2):
        def f(x, i=i):
            layers = list(cur.layers)
            layers[i] = x
            return baseline_fd_loss(FeatureBundle(layers, cur.pooled), prev, weights)
        checks.append((f, cur.layers[i].data))
    checks.append((lambda x: baseline_fd_loss(FeatureBundle(cur.layers, x), prev, weights), cur.pooled.data))
    return checks


def _lsc_instance(rng):
    head = ProxyHead(dim=6, proxies_per_class=3, scale_init=rng.uniform(1.0, 8.0))
    head.grow([0, 1, 2, 3], rng.normal(size=(4, 6)), rng, jitter=0.3)
    feats = rng.normal(size=(5, 6))
    labels = rng.integers(0, 4, size=5)

    def on_feats(x):
        return lsc_loss(FeatureBundle([], x, head.similarities(x), head.scale, head.margin, head.class_ids), labels)

    def on_proxies(p):
        head_p = ProxyHead(dim=6, proxies_per_class=3)
        head_p.proxies, head_p.class_ids = p, head.class_ids
        pooled = Tensor(feats)
        return lsc_loss(FeatureBundle([], pooled, head_p.similarities(pooled), head.scale, head.margin,
                                      head.class_ids), labels)

    return [(on_feats, feats), (on_proxies, head.proxies.data.copy())]


def test_criterion_3_gradient_suite(criterion_log):
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = {}
    for name, make in (("s2il_loss", _s2il_instance), ("baseline_fd_loss", _fd_instance), ("lsc_loss", _lsc_instance)):
        worst[name] = 0.0
        for _ in range(50):
            for f, x in make(rng):
                worst[name] = max(worst[name], finite_difference_check(f, x, step=1e-5, tol=GRAD_TOL).max_deviation)
    elapsed = time.perf_counter() - start
    ok = all(v <= GRAD_TOL for v in worst.values()) and elapsed < 120.0
    detail = " ".join(f"{k}={v:.2e}" for k, v in worst.items())
    criterion_log(3, ok, f"max relative deviation {detail} (tol 1e-4, 50 instances each) "
                         f"runtime={elapsed:.1f}s (< 120s)")
    assert ok


def test_criterion_4_herding_oracle(criterion_log):
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    matches = prefix = 0
    for _ in range(100):
        n = int(rng.integers(1, 31))
        k = int(rng.integers(1, min(n, 10) + 1))
        feats = rng.normal(size=(n, int(rng.integers(1, 9))))
        ids = rng.permutation(1000)[:n]
        got = herding_select(feats, k, ids)
        matches += got == herding_oracle(feats, k, ids)
        prefix += all(herding_select(feats, j, ids) == got[:j] for j in range(k + 1))
    elapsed = time.perf_counter() - start
    ok = matches == 100 and prefix == 100 and elapsed < 10.0
    criterion_log(4, ok, f"oracle matches {matches}/100, prefix property {prefix}/100 runtime={elapsed:.2f}s (< 10s)")
    assert ok


def _hand_examples() -> bool:
    three = RunRecord([1, 1, 1])
    for t, o in enumerate([0.9, 0.8, 0.7]):
        three.add_row([o] * (t + 1), overall=o)
    nan = np.nan
    checks = [
        abs(aia(three) - 80.0) < 1e-12,
        abs(aia(RunRecord.from_matrix([[0.6]])) - 60.0) < 1e-12,
        abs(bt(RunRecord.from_matrix([[0.9, nan], [0.8, 0.7]])) + 10.0) < 1e-12,
        bt(RunRecord.from_matrix([[0.5, nan], [0.5, 0.6]])) == 0.0,
        fgt(RunRecord.from_matrix([[0.5, nan, nan], [0.6, 0.4, nan], [0.7, 0.5, 0.3]])) == 0.0,
        abs(fgt(RunRecord.from_matrix([[0.9, nan, nan], [0.8, 0.5, nan], [0.7, 0.5, 0.3]])) - 10.0) < 1e-12,
        oracle_deviation([1.0, 2.0], [0.0, 0.0], [1.0, 2.0], [0.0, 0.0]) == 0.0,
        oracle_deviation([1.0, -2.0], [0.0, 0.0], [2.0, -4.0], [0.0, 0.0]) == 0.25,
    ]
    return all(checks)


def test_criterion_5_metric_formulas(criterion_log):
    rng = np.random.default_rng(5)
    hand = _hand_examples()
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 8))
        m = np.full((n, n), np.nan)
        for t in range(n):
            m[t, :t + 1] = rng.uniform(size=t + 1)
        sizes = [int(s) for s in rng.integers(1, 10, size=n)]
        rec = RunRecord.from_matrix(m, sizes)
        vecs = [rng.normal(size=8) for _ in range(4)]
        worst = max(worst, abs(aia(rec) - aia_oracle(m, sizes)), abs(bt(rec) - bt_oracle(m)),
                    abs(fgt(rec) - fgt_oracle(m)), abs(oracle_deviation(*vecs) - deviation_oracle(*vecs)))
    ok = hand and worst <= 1e-10
    criterion_log(5, ok, f"hand examples={hand} max |metric - oracle| over 100 random cases={worst:.2e} (tol 1e-10)")
    assert ok


# ---------------------------------------------------------------- end to end


def _run(out_dir):
    cfg = load_config(CONFIG)
    start = time.perf_counter()
    manifest = run_experiment(cfg, out_dir)
    return manifest, time.perf_counter() - start


@pytest.fixture(scope="module")
def directional(tmp_path_factory):
    return _run(tmp_path_factory.mktemp("directional"))


def _seed_mean(manifest, point, key):
    return manifest["aggregate"][point][key]["mean"]


def test_criterion_6_directional(directional, criterion_log):
    manifest, elapsed = directional
    fgt_none, fgt_s2il = _seed_mean(manifest, "none", "fgt"), _seed_mean(manifest, "s2il", "fgt")
    aia_none, aia_s2il = _seed_mean(manifest, "none", "aia"), _seed_mean(manifest, "s2il", "aia")
    finals = {(r["point"], r["seed"]): r["overall"][-1] for r in manifest["runs"]}
    oracle_min = min(v for (p, _), v in finals.items() if p == "oracle")
    others_max = max(v for (p, _), v in finals.items() if p != "oracle")
    a = fgt_none > fgt_s2il
    b = aia_s2il >= aia_none
    c = all(finals[("oracle", s)] >= v for (p, s), v in finals.items() if p != "oracle")
    ok = a and b and c and elapsed < 20 * 60
    criterion_log(6, ok, f"(a) Fgt none {fgt_none:.2f} > s2il {fgt_s2il:.2f}: {a}; "
                         f"(b) AIA s2il {aia_s2il:.2f} >= none {aia_none:.2f}: {b}; "
                         f"(c) oracle final acc (min {100 * oracle_min:.1f}%) >= every other run "
                         f"(max {100 * others_max:.1f}%) per seed: {c}; runtime={elapsed / 60:.1f} min (< 20)")
    assert ok


def test_criterion_7_oracle_deviation(directional, criterion_log):
    manifest, _ = directional
    dev_none = manifest["aggregate"]["none"]["deviation"]
    dev_s2il = manifest["aggregate"]["s2il"]["deviation"]
    wins = [c for c in dev_s2il if dev_s2il[c] <= dev_none[c]]
    ok = len(wins) >= 3
    pairs = ", ".join(f"{c}: {dev_s2il[c]:.3g} vs {dev_none[c]:.3g}" for c in dev_s2il)
    criterion_log(7, ok, f"s2il D_l <= none D_l on {len(wins)}/{len(dev_s2il)} base classes (need 3); "
                         f"seed-mean s2il vs none: {pairs}")
    assert ok


def test_criterion_8_reproducible(directional, tmp_path, criterion_log):
    first, _ = directional
    second, elapsed = _run(tmp_path / "again")
    acc_a = {(r["point"], r["seed"]): r["accuracy"] for r in first["runs"]}
    acc_b = {(r["point"], r["seed"]): r["accuracy"] for r in second["runs"]}
    same = acc_a == acc_b
    ok = same and len(acc_a) == 9
    criterion_log(8, ok, f"second run of the criterion-6 config: {len(acc_a)} accuracy matrices identical={same} "
                         f"(rerun {elapsed / 60:.1f} min)")
    assert ok

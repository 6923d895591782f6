"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``[PASS]`` or ``[FAIL]`` line with the measured
quantities before asserting, so ``pytest -v`` output doubles as a report.
The training criteria (6, 7 and 9) run the desk preset on freshly generated
data and take several minutes each.
"""
import time

import numpy as np
import pytest

from helpers import cbr, chain_scenario, micro_mismatches, random_micro, relabel
from oracles import reference_forward
from tapenet import nn
from tapenet.datagen import GenConfig, generate_dataset, generate_scenario, scale_packets, split_dataset
from tapenet.des import aggregate, simulate
from tapenet.model import BLOCKS, ModelConfig, NetworkModel, Sample
from tapenet.train import PRESETS, bench_inference, evaluate, mape, mape_loss, metrics, train

DESK_MODEL, DESK_TRAIN = PRESETS["desk"]
SPLIT = (0.75, 0.15, 0.10)


def verdict(capsys, criterion, ok, detail):
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}")
    assert ok, detail


def labelled_samples(scenarios, windows=(None,)):
    """Simulate each scenario once and aggregate it at every requested window size."""
    out = {w: [] for w in windows}
    for s in scenarios:
        records = simulate(s)
        ids = [f.id for f in s.flows]
        for w in windows:
            sw = s if w is None else s.with_window(w)
            out[w].append(Sample.from_scenario(sw, aggregate(records, sw.window_size, sw.n_windows, ids)))
    return out


def avg_delay_mape(model, samples):
    return evaluate(model, samples).rows["delay_avg"]["mape"]


def random_model(sample, state_dim, T, seed, bias=0.2):
    model = NetworkModel.create(ModelConfig(state_dim=state_dim, mp_iterations=T, target_unit_s=1e-3),
                                nn.fit_normalizer([sample.features]), sample.window_size, seed)
    rng = np.random.default_rng(seed + 1000)
    for blk in model.params.values():
        for k, v in blk.items():
            if k.startswith("b"):
                blk[k] = rng.normal(scale=bias, size=v.shape)
    return model


# ---------------------------------------------------------------------------
# 1-5: simulator and model correctness


def test_c01_des_matches_analytic_cbr_delay(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst, packets = 0.0, 0
    for _ in range(40):
        bw = rng.uniform(1e5, 1e7, size=3)
        props = rng.uniform(0.0, 1e-2, size=3)
        size = float(rng.integers(1000, 12001))
        rate = rng.uniform(0.05, 0.95) * bw.min()
        s = chain_scenario(n_routers=2, bandwidths=list(bw), props=list(props), packet_size=size, duration=0.1,
                           profiles=[cbr(rate, burst=1.0, period=1.0, start=rng.uniform(0.0, 0.05))])
        expected = float(np.sum(size / bw + props))
        recs = simulate(s)
        packets += len(recs)
        worst = max([worst] + [abs(r.delay - expected) if not r.dropped else np.inf for r in recs])
    elapsed = time.perf_counter() - t0
    ok = packets > 0 and worst <= 1e-12 and elapsed < 1.0
    verdict(capsys, 1, ok, f"40 CBR 3-hop cases, {packets} packets, max |delay - analytic| = {worst:.3g} s "
                           f"(tol 1e-12), {elapsed:.2f} s (limit 1 s)")


def test_c02_des_matches_time_stepped_oracle(capsys):
    t0 = time.perf_counter()
    bad, drops, total = [], 0, 0
    for i in range(100):
        s, oracle, caps = random_micro(np.random.default_rng([2, i]))
        recs = simulate(s)
        total += len(recs)
        drops += sum(r.dropped for r in recs)
        if micro_mismatches(s, oracle, caps):
            bad.append(i)
    elapsed = time.perf_counter() - t0
    ok = not bad and elapsed < 60.0
    verdict(capsys, 2, ok, f"100 micro-scenarios, {total} packets ({drops} dropped), "
                           f"mismatching scenarios {bad}, {elapsed:.1f} s (limit 60 s)")


def test_c03_gradients_match_finite_differences(capsys):
    t0 = time.perf_counter()
    worst = {}
    for seed in (0, 1, 2):
        s = chain_scenario(n_routers=2, duration=0.3, reverse_flows=1,
                           profiles=[cbr(3e5, burst=0.02, period=0.05), cbr(1e5 + 5e4 * seed, start=0.01)])
        sample = labelled_samples([s])[None][0]
        model = random_model(sample, state_dim=3, T=2, seed=seed)
        y = sample.targets / model.config.target_unit_s

        def loss_value():
            return float(mape_loss(model.forward(sample), y).value)

        leaves = model.leaves()
        nn.backward(mape_loss(model.forward(sample, leaves), y))
        for block in BLOCKS:
            for name, theta in model.params[block].items():
                analytic = leaves[block][name].grad
                analytic = np.zeros_like(theta) if analytic is None else analytic
                numeric = np.zeros_like(theta)
                for idx in np.ndindex(theta.shape):
                    old = theta[idx]
                    h = 1e-5 * max(1.0, abs(old))
                    theta[idx] = old + h
                    hi = loss_value()
                    theta[idx] = old - h
                    lo = loss_value()
                    theta[idx] = old
                    numeric[idx] = (hi - lo) / (2 * h)
                scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
                err = float(np.linalg.norm(analytic - numeric) / scale)
                worst[f"{block}.{name}"] = max(worst.get(f"{block}.{name}", 0.0), err)
    elapsed = time.perf_counter() - t0
    top = max(worst, key=worst.get)
    ok = len({k.split(".")[0] for k in worst}) == len(BLOCKS) and worst[top] < 1e-4 and elapsed < 60.0
    verdict(capsys, 3, ok, f"{len(worst)} parameter arrays over {len(BLOCKS)} blocks x 3 seeds, worst relative "
                           f"error {worst[top]:.2e} ({top}, tol 1e-4), {elapsed:.1f} s (limit 60 s)")


def test_c04_vectorised_matches_scalar_reference(capsys):
    t0 = time.perf_counter()
    s = chain_scenario(n_routers=2, duration=0.3, reverse_flows=1,
                       profiles=[cbr(3e5, burst=0.02, period=0.05), cbr(1e5, start=0.01)])
    sample = Sample.from_scenario(s)
    model = random_model(sample, state_dim=6, T=3, seed=4)
    got = model.forward(sample).value
    want = reference_forward(model, sample)
    rel = float(np.max(np.abs(got - want) / np.abs(want)))
    elapsed = time.perf_counter() - t0
    ok = sample.index.n_flows == 2 and rel <= 1e-12 and elapsed < 1.0
    verdict(capsys, 4, ok, f"2 flows x 3 hops x 3 windows, max relative difference {rel:.2e} (tol 1e-12), "
                           f"{elapsed:.2f} s (limit 1 s)")


def test_c05_permutation_equivariance(capsys):
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(20):
        s = generate_scenario(GenConfig(seed=500 + i, node_range=(5, 8)), 0)
        sample = Sample.from_scenario(s)
        model = random_model(sample, state_dim=8, T=3, seed=i)
        s2, maps = relabel(s, np.random.default_rng(900 + i))
        p1 = model.forward(sample).value
        p2 = model.forward(Sample.from_scenario(s2)).value
        rows = {fid: k for k, fid in enumerate(sorted(f.id for f in s2.flows))}
        p2 = p2[[rows[maps["flow"][int(fid)]] for fid in sample.graph.flow_ids]]
        worst = max(worst, float(np.max(np.abs(p1 - p2) / np.abs(p1))))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and elapsed < 60.0
    verdict(capsys, 5, ok, f"20 relabelled scenarios, max relative difference {worst:.2e} (tol 1e-9), "
                           f"{elapsed:.1f} s (limit 60 s)")


# ---------------------------------------------------------------------------
# 6-9: training, generalisation and inference cost


WINDOWS = (0.2, 0.1, 0.05)


@pytest.fixture(scope="module")
def desk():
    """300 five-node TREX-MB scenarios labelled at every window size, plus the 100 ms model."""
    t0 = time.perf_counter()
    scenarios = generate_dataset(GenConfig(seed=7, n_scenarios=300, node_range=(5, 5), profile_family="trex_mb"))
    data = labelled_samples(scenarios, WINDOWS)
    data_s = time.perf_counter() - t0
    parts = split_dataset(list(range(len(scenarios))), SPLIT, seed=0)
    splits = {w: [[data[w][i] for i in p] for p in parts] for w in WINDOWS}
    t1 = time.perf_counter()
    tr, va, _ = splits[0.1]
    result = train(DESK_TRAIN, tr, va, DESK_MODEL)
    train_s = time.perf_counter() - t1
    return {"splits": splits, "models": {0.1: result.model}, "data_s": data_s, "train_s": {0.1: train_s}}


def test_c06_desk_scale_accuracy(desk, capsys):
    tr, _, te = desk["splits"][0.1]
    model = desk["models"][0.1]
    t0 = time.perf_counter()
    test_mape = avg_delay_mape(model, te)
    train_mape = avg_delay_mape(model, tr)
    elapsed = desk["data_s"] + desk["train_s"][0.1] + time.perf_counter() - t0
    ok = test_mape <= 15.0 and elapsed <= 30 * 60
    verdict(capsys, 6, ok, f"held-out average-delay MAPE {test_mape:.3f}% (limit 15%), training set "
                           f"{train_mape:.3f}%, {len(te)} test scenarios, data {desk['data_s']:.0f} s + "
                           f"training {desk['train_s'][0.1]:.0f} s = {elapsed / 60:.1f} min (limit 30 min)")


def test_c07_generalisation_to_larger_topologies(capsys):
    t0 = time.perf_counter()
    small = generate_dataset(GenConfig(seed=11, n_scenarios=300, node_range=(5, 8), profile_family="trex_mb"))
    large = generate_dataset(GenConfig(seed=12, n_scenarios=40, node_range=(12, 16), profile_family="trex_mb"))
    small_s = labelled_samples(small)[None]
    large_s = labelled_samples(large)[None]
    tr, va, te = split_dataset(small_s, SPLIT, seed=0)
    model = train(DESK_TRAIN, tr, va, DESK_MODEL).model
    in_dist = avg_delay_mape(model, te)
    unseen = avg_delay_mape(model, large_s)
    elapsed = time.perf_counter() - t0
    ratio = unseen / in_dist
    ok = ratio <= 2.0 and elapsed <= 45 * 60
    verdict(capsys, 7, ok, f"average-delay MAPE {in_dist:.3f}% on 5-8 nodes, {unseen:.3f}% on unseen 12-16 "
                           f"nodes, ratio {ratio:.2f} (limit 2.0), {elapsed / 60:.1f} min (limit 45 min)")


def test_c08_inference_time_independent_of_packet_count(capsys):
    t0 = time.perf_counter()
    base = generate_scenario(GenConfig(seed=3, node_range=(8, 8), profile_family="trex_mb"), 0)
    points = [(f"{k}x", Sample.from_scenario(scale_packets(base, k))) for k in (1, 10, 100)]
    model = NetworkModel.create(DESK_MODEL, nn.fit_normalizer([points[0][1].features]), base.window_size, 0)
    rows = bench_inference(model, points, repeats=25)
    times = [r["median_s"] for r in rows]
    spread = max(times) / min(times) - 1.0
    elapsed = time.perf_counter() - t0
    ok = rows[2]["packets"] == 100 * rows[0]["packets"] and spread <= 0.25 and elapsed < 300
    desc = ", ".join(f"{r['label']} {r['packets']} pkts {r['median_s'] * 1e3:.2f} ms" for r in rows)
    verdict(capsys, 8, ok, f"{desc}; spread {spread * 100:.1f}% (limit 25%), {elapsed:.1f} s (limit 300 s)")


def test_c09_window_size_tradeoff(desk, capsys):
    t0 = time.perf_counter()
    mapes, times = {}, {}
    for w in WINDOWS:
        tr, va, te = desk["splits"][w]
        if w not in desk["models"]:
            t1 = time.perf_counter()
            desk["models"][w] = train(DESK_TRAIN, tr, va, DESK_MODEL).model
            desk["train_s"][w] = time.perf_counter() - t1
        mapes[w] = avg_delay_mape(desk["models"][w], te)
    for w in WINDOWS:
        # time every model on the same scenario, so only the window count differs
        times[w] = bench_inference(desk["models"][w], [(str(w), desk["splits"][w][2][0])], repeats=9)[0]["median_s"]
    elapsed = desk["data_s"] + sum(desk["train_s"].values()) + time.perf_counter() - t0
    increasing = times[0.2] < times[0.1] < times[0.05]
    spread = max(mapes.values()) - min(mapes.values())
    ok = increasing and spread < 5.0 and elapsed <= 3600
    desc = ", ".join(f"dt={w:g}s MAPE {mapes[w]:.3f}% time {times[w] * 1e3:.2f} ms" for w in WINDOWS)
    verdict(capsys, 9, ok, f"{desc}; time increasing as dt shrinks: {increasing}; MAPE spread {spread:.3f} pp "
                           f"(limit 5), {elapsed / 60:.1f} min (limit 60 min)")


# ---------------------------------------------------------------------------
# 10: metric definitions


def test_c10_metric_closed_forms(capsys):
    t0 = time.perf_counter()
    checks = {
        "MAPE [100,200] vs [110,180] = 10%": mape(np.array([110.0, 180.0]), np.array([100.0, 200.0])) == 10.0,
        "MAPE identity = 0": mape(np.array([3.0, 4.0]), np.array([3.0, 4.0])) == 0.0,
        "MAPE [50] vs [100] = 100%": mape(np.array([100.0]), np.array([50.0])) == 100.0,
    }
    m = metrics(np.array([2.0, 2.0, 2.0]), np.array([1.0, 2.0, 3.0]))
    checks["MAE = 2/3"] = m["mae"] == 2 / 3
    checks["R2 of constant mean prediction = 0"] = m["r2"] == 0.0
    p = metrics(np.array([1.0, 2.0, 3.0]), np.array([1.0, 2.0, 3.0]))
    checks["perfect prediction: MAPE 0, MAE 0, R2 1"] = (p["mape"], p["mae"], p["r2"]) == (0.0, 0.0, 1.0)
    checks["constant target: R2 absent"] = metrics(np.array([1.0, 2.0]), np.array([2.0, 2.0]))["r2"] is None
    elapsed = time.perf_counter() - t0
    failed = [k for k, v in checks.items() if not v]
    ok = not failed and elapsed < 1.0
    verdict(capsys, 10, ok, f"{len(checks) - len(failed)}/{len(checks)} closed-form examples exact"
                            f"{' (failed: ' + '; '.join(failed) + ')' if failed else ''}, {elapsed * 1e3:.1f} ms")

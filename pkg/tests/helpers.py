"""Scenario builders shared by the tests."""
from __future__ import annotations

import math

import numpy as np

from tapenet.scenario import (ConstantBurst, Device, DeviceKind, Flow, Link, Queue, Scenario,
                              TraceReplay)


def chain(n_routers: int, bandwidths=1e6, props=0.0, buffer_size=64):
    """E0 - R1 - ... - Rn - E_{n+1}, links both ways.

    Returns (devices, links, queues, forward_path, backward_path). Hop i of the
    forward path uses link/queue id 2*i; the reverse direction uses 2*i + 1.
    """
    n_dev = n_routers + 2
    kinds = [DeviceKind.ENDPOINT] + [DeviceKind.ROUTER] * n_routers + [DeviceKind.ENDPOINT]
    devices = tuple(Device(i, k) for i, k in enumerate(kinds))
    n_hops = n_dev - 1
    bws = bandwidths if isinstance(bandwidths, (list, tuple)) else [bandwidths] * n_hops
    prs = props if isinstance(props, (list, tuple)) else [props] * n_hops
    links, queues = [], []
    for i in range(n_hops):
        links.append(Link(2 * i, i, i + 1, bws[i], prs[i]))
        links.append(Link(2 * i + 1, i + 1, i, bws[i], prs[i]))
    for l in links:
        queues.append(Queue(l.id, l.src_device, l.id, buffer_size))
    fwd = tuple((2 * i, 2 * i) for i in range(n_hops))
    bwd = tuple((2 * i + 1, 2 * i + 1) for i in reversed(range(n_hops)))
    return devices, tuple(links), tuple(queues), fwd, bwd


def chain_scenario(n_routers=1, profiles=None, packet_size=8000.0, bandwidths=1e6, props=0.0,
                   buffer_size=64, duration=1.0, window=0.1, reverse_flows=0):
    devices, links, queues, fwd, bwd = chain(n_routers, bandwidths, props, buffer_size)
    profiles = profiles or [TraceReplay((0.0,))]
    flows = []
    n_dev = len(devices)
    for i, p in enumerate(profiles):
        back = i >= len(profiles) - reverse_flows
        flows.append(Flow(i, n_dev - 1 if back else 0, 0 if back else n_dev - 1,
                          bwd if back else fwd, packet_size, p))
    return Scenario(devices, links, queues, tuple(flows), duration, window)


def cbr(rate, burst=None, period=None, start=0.0, stop=math.inf):
    """Continuous constant-bit-rate stream expressed as a ConstantBurst."""
    period = period or 1.0
    return ConstantBurst(rate=rate, burst_duration=burst or period, period=period, start=start, stop=stop)


def random_micro(rng):
    """Random micro-scenario with at most 3 devices and 50 packets on an integer-ns grid.

    Returns (scenario, oracle_flows, queue_cap) where the oracle description uses
    integer nanoseconds throughout (see ``oracles.stepped_simulation``).
    """
    from tapenet.scenario import Device, DeviceKind, Flow, Link, Queue, Scenario, TraceReplay

    n_dev = int(rng.integers(2, 4))
    mid_kind = [DeviceKind.ROUTER, DeviceKind.SWITCH, DeviceKind.ENDPOINT][int(rng.integers(3))]
    kinds = [DeviceKind.ENDPOINT] + [mid_kind] * (n_dev - 2) + [DeviceKind.ENDPOINT]
    devices = tuple(Device(i, k) for i, k in enumerate(kinds))
    # bandwidths of 1, 1/2 or 1/4 bit per ns keep transmission times integral
    links, queues, meta = [], [], {}
    for i in range(n_dev - 1):
        for lid, (a, b) in ((2 * i, (i, i + 1)), (2 * i + 1, (i + 1, i))):
            slow = int(rng.choice([1, 2, 4]))
            prop = int(rng.integers(0, 21))
            cap = int(rng.integers(1, 4))
            links.append(Link(lid, a, b, 1e9 / slow, prop * 1e-9))
            queues.append(Queue(lid, a, lid, cap))
            meta[lid] = (slow, prop, cap)

    def path(a, b):
        if a < b:
            return tuple((2 * i, 2 * i) for i in range(a, b))
        return tuple((2 * i + 1, 2 * i + 1) for i in reversed(range(b, a)))

    ends = [d.id for d in devices if d.kind == DeviceKind.ENDPOINT]
    pairs = [(a, b) for a in ends for b in ends if a != b]
    n_flows = int(rng.integers(1, 4))
    total = int(rng.integers(n_flows, 51))
    cuts = np.sort(rng.choice(np.arange(1, total), size=n_flows - 1, replace=False)) if n_flows > 1 else []
    counts = np.diff(np.concatenate([[0], cuts, [total]])).astype(int)

    flows, oracle = [], []
    for fid in range(n_flows):
        a, b = pairs[int(rng.integers(len(pairs)))]
        size = int(rng.integers(1, 301))
        gen = sorted(int(x) for x in rng.integers(0, 8000, size=int(counts[fid])))
        p = path(a, b)
        flows.append(Flow(fid, a, b, p, float(size), TraceReplay(tuple(g * 1e-9 for g in gen))))
        oracle.append({"id": fid, "gen": gen,
                       "hops": [(lid, size * meta[lid][0], meta[lid][1]) for lid, _ in p]})
    s = Scenario(devices, tuple(links), tuple(queues), tuple(flows), 1e-5, 1e-6)
    return s, oracle, {lid: m[2] for lid, m in meta.items()}


def micro_mismatches(s, oracle, caps):
    """Compare the event-driven simulator with the time-stepped oracle; list differences."""
    from oracles import stepped_simulation
    from tapenet.des import simulate

    expected = stepped_simulation(oracle, caps)
    bad = []
    for r in simulate(s):
        want = expected[(r.flow, r.seq)]
        got = None if r.dropped else r.delay * 1e9
        if want is None or got is None:
            if want is not got:
                bad.append((r.flow, r.seq, want, got))
        elif abs(got - want) > 1e-6:
            bad.append((r.flow, r.seq, want, got))
    return bad


def relabel(s, rng):
    """Scenario with randomly permuted device ids and fresh random link/queue/flow ids.

    Returns (relabelled scenario, {"device"|"link"|"queue"|"flow": old id -> new id}).
    """
    from dataclasses import replace as dc_replace

    from tapenet.scenario import Scenario

    def fresh(ids, dense=False):
        ids = sorted(ids)
        new = rng.permutation(len(ids)) if dense else rng.choice(10 * len(ids) + 10, len(ids), replace=False)
        return {old: int(n) for old, n in zip(ids, new)}

    dm = fresh([d.id for d in s.devices], dense=True)
    lm = fresh([l.id for l in s.links])
    qm = fresh([q.id for q in s.queues])
    fm = fresh([f.id for f in s.flows])
    devices = [dc_replace(d, id=dm[d.id]) for d in s.devices]
    links = [dc_replace(l, id=lm[l.id], src_device=dm[l.src_device], dst_device=dm[l.dst_device]) for l in s.links]
    queues = [dc_replace(q, id=qm[q.id], device=dm[q.device], out_link=lm[q.out_link]) for q in s.queues]
    flows = [dc_replace(f, id=fm[f.id], src_device=dm[f.src_device], dst_device=dm[f.dst_device],
                        path=tuple((lm[l], qm[q]) for l, q in f.path)) for f in s.flows]
    # shuffle declaration order as well
    shuffle = lambda xs: [xs[i] for i in rng.permutation(len(xs))]
    s2 = Scenario(tuple(shuffle(devices)), tuple(shuffle(links)), tuple(shuffle(queues)),
                  tuple(shuffle(flows)), s.duration, s.window_size)
    return s2, {"device": dm, "link": lm, "queue": qm, "flow": fm}

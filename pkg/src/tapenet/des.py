"""Packet-level discrete-event simulator used as the ground-truth oracle.

Output-queued, store-and-forward, FIFO drop-tail queues. The clock is an integer
count of femtoseconds so event ordering and ties are exact and reproducible.
"""
from __future__ import annotations

import csv
import heapq
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .scenario import Flow, Scenario, window_index

FS_PER_S = 10**15

# event kinds; arrivals sort before service completions at equal times
ARRIVAL = 0
COMPLETION = 1

STATS = ("avg", "median", "p90", "p95", "p99")

# generation times are rounded onto the femtosecond clock, so delays of packets that
# saw identical conditions can differ by a few fs; such differences are not jitter
JITTER_RESOLUTION_S = 1e-12


def to_fs(t: float) -> int:
    return int(round(t * FS_PER_S))


@dataclass(frozen=True)
class PacketRecord:
    flow: int
    seq: int
    gen_time: float
    delivery_time: Optional[float]  # None when dropped
    delay: Optional[float] = None  # exact clock difference, None when dropped

    @property
    def dropped(self) -> bool:
        return self.delivery_time is None


def generate_packets(f: Flow, duration: float) -> np.ndarray:
    """Sorted generation times of a flow's packets in [0, duration)."""
    return f.emission_times(duration)


def simulate(s: Scenario) -> list[PacketRecord]:
    """Run the scenario; return one record per generated packet, ordered by (flow, seq)."""
    flows = sorted(s.flows, key=lambda f: f.id)
    qrow = {q.id: i for i, q in enumerate(s.queues)}
    capacity = [q.buffer_size for q in s.queues]

    hop_queue: list[list[int]] = []
    hop_tx: list[list[int]] = []
    hop_prop: list[list[int]] = []
    gen_times: list[np.ndarray] = []
    gen_fs: list[list[int]] = []
    events = []
    for fi, f in enumerate(flows):
        hop_queue.append([qrow[q] for _, q in f.path])
        hop_tx.append([to_fs(f.packet_size / s.link(l).bandwidth) for l, _ in f.path])
        hop_prop.append([to_fs(s.link(l).propagation_delay) for l, _ in f.path])
        t = generate_packets(f, s.duration)
        gen_times.append(t)
        fs = [to_fs(x) for x in t]
        gen_fs.append(fs)
        events.extend((g, ARRIVAL, f.id, seq, fi, 0) for seq, g in enumerate(fs))
    heapq.heapify(events)

    busy: list[Optional[tuple]] = [None] * len(s.queues)
    waiting = [deque() for _ in s.queues]
    delivered: list[dict] = [dict() for _ in flows]
    push, pop = heapq.heappush, heapq.heappop

    while events:
        now, kind, fid, seq, fi, hop = pop(events)
        q = hop_queue[fi][hop]
        if kind == ARRIVAL:
            if busy[q] is None:
                busy[q] = (fid, seq, fi, hop)
                push(events, (now + hop_tx[fi][hop], COMPLETION, fid, seq, fi, hop))
            elif len(waiting[q]) < capacity[q]:
                waiting[q].append((fid, seq, fi, hop))
            # else: drop-tail, packet never reaches the destination
        else:
            t_next = now + hop_prop[fi][hop]
            if hop + 1 < len(hop_queue[fi]):
                push(events, (t_next, ARRIVAL, fid, seq, fi, hop + 1))
            else:
                delivered[fi][seq] = t_next
            if waiting[q]:
                nxt = waiting[q].popleft()
                busy[q] = nxt
                push(events, (now + hop_tx[nxt[2]][nxt[3]], COMPLETION) + nxt)
            else:
                busy[q] = None

    records = []
    for fi, f in enumerate(flows):
        done = delivered[fi]
        for seq, g in enumerate(gen_times[fi]):
            d = done.get(seq)
            if d is None:
                records.append(PacketRecord(f.id, seq, float(g), None, None))
            else:
                records.append(PacketRecord(f.id, seq, float(g), d / FS_PER_S,
                                            (d - gen_fs[fi][seq]) / FS_PER_S))
    return records


# ---------------------------------------------------------------------------
# aggregation


@dataclass(frozen=True)
class GroundTruth:
    """Per (flow, window) delay and jitter statistics; NaN where absent.

    Statistic order along the last axis is avg, median, p90, p95, p99.
    """

    flow_ids: np.ndarray  # (F,)
    window_size: float
    delay: np.ndarray  # (F, W, 5) seconds
    jitter: np.ndarray  # (F, W, 5) seconds
    packet_count: np.ndarray  # (F, W) delivered packets
    drop_count: np.ndarray  # (F, W)

    @property
    def n_windows(self) -> int:
        return self.delay.shape[1]

    def targets(self) -> np.ndarray:
        """(F, W, 10): delay stats then jitter stats."""
        return np.concatenate([self.delay, self.jitter], axis=-1)

    def to_dict(self) -> dict:
        out = {}
        for i, fid in enumerate(self.flow_ids):
            per_w = {}
            for w in range(self.n_windows):
                cell = {"packet_count": int(self.packet_count[i, w]),
                        "drop_count": int(self.drop_count[i, w])}
                cell["delay"] = _stat_dict(self.delay[i, w])
                cell["jitter"] = _stat_dict(self.jitter[i, w])
                per_w[str(w)] = cell
            out[str(int(fid))] = per_w
        return {"window_s": self.window_size, "n_windows": self.n_windows, "flows": out}

    @classmethod
    def from_dict(cls, obj: dict) -> "GroundTruth":
        W = int(obj["n_windows"])
        fids = sorted(int(k) for k in obj["flows"])
        shape = (len(fids), W)
        delay = np.full(shape + (5,), np.nan)
        jitter = np.full(shape + (5,), np.nan)
        pc = np.zeros(shape, dtype=np.int64)
        dc = np.zeros(shape, dtype=np.int64)
        for i, fid in enumerate(fids):
            for w, cell in obj["flows"][str(fid)].items():
                w = int(w)
                pc[i, w] = cell["packet_count"]
                dc[i, w] = cell["drop_count"]
                if cell.get("delay"):
                    delay[i, w] = [cell["delay"][k] for k in STATS]
                if cell.get("jitter"):
                    jitter[i, w] = [cell["jitter"][k] for k in STATS]
        return cls(np.array(fids, dtype=np.int64), float(obj["window_s"]), delay, jitter, pc, dc)


def _stat_dict(row: np.ndarray):
    if np.isnan(row[0]):
        return None
    return {k: float(v) for k, v in zip(STATS, row)}


def five_stats(values: Sequence[float]) -> np.ndarray:
    """avg, median, p90, p95, p99 with linear interpolation between order statistics."""
    v = np.asarray(values, dtype=float)
    return np.concatenate([[v.mean()], np.percentile(v, [50, 90, 95, 99])])


def aggregate(records: Sequence[PacketRecord], window_size: float, n_windows: int,
              flow_ids: Optional[Sequence[int]] = None) -> GroundTruth:
    """Group packets by (flow, generation window) and compute delay/jitter statistics.

    Jitter of a packet is the absolute difference between its delay and the delay of
    the previous delivered packet of the same flow; it is assigned to the later
    packet's window. Differences below ``JITTER_RESOLUTION_S`` count as zero. Jitter
    statistics are reported for windows with at least two delivered packets.
    """
    by_flow: dict[int, list[PacketRecord]] = {}
    for r in records:
        by_flow.setdefault(r.flow, []).append(r)
    fids = sorted(set(by_flow) | set(flow_ids or ()))
    shape = (len(fids), n_windows)
    delay = np.full(shape + (5,), np.nan)
    jitter = np.full(shape + (5,), np.nan)
    pc = np.zeros(shape, dtype=np.int64)
    dc = np.zeros(shape, dtype=np.int64)

    for i, fid in enumerate(fids):
        recs = sorted(by_flow.get(fid, ()), key=lambda r: r.seq)
        if not recs:
            continue
        win = window_index([r.gen_time for r in recs], window_size, n_windows)
        dly_by_w: dict[int, list[float]] = {}
        jit_by_w: dict[int, list[float]] = {}
        prev = None
        for r, w in zip(recs, win):
            w = int(w)
            if r.dropped:
                dc[i, w] += 1
                continue
            d = r.delay if r.delay is not None else r.delivery_time - r.gen_time
            dly_by_w.setdefault(w, []).append(d)
            if prev is not None:
                j = abs(d - prev)
                jit_by_w.setdefault(w, []).append(j if j >= JITTER_RESOLUTION_S else 0.0)
            prev = d
        for w, ds in dly_by_w.items():
            pc[i, w] = len(ds)
            delay[i, w] = five_stats(ds)
            if len(ds) >= 2:
                jitter[i, w] = five_stats(jit_by_w[w])
    return GroundTruth(np.array(fids, dtype=np.int64), window_size, delay, jitter, pc, dc)


def ground_truth(s: Scenario) -> GroundTruth:
    return aggregate(simulate(s), s.window_size, s.n_windows, [f.id for f in s.flows])


def write_packets_csv(records: Sequence[PacketRecord], path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["flow", "seq", "gen_time", "delivery_time", "dropped"])
        for r in records:
            w.writerow([r.flow, r.seq, repr(r.gen_time),
                        "" if r.dropped else repr(r.delivery_time), int(r.dropped)])

"""Network scenario types, the JSON scenario format, and per-window input features.

A scenario is a directed topology (devices, links, one queue per link), a set of
flows with explicit paths and traffic profiles, a run duration and a window size.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Union

import numpy as np

# Times within this fraction of a window below a boundary are snapped up to the
# next window, so that emission schedules built from float arithmetic land where
# their exact-arithmetic counterparts would.
_WINDOW_SNAP = 1e-9


class ScenarioError(ValueError):
    """A scenario violates one of its structural invariants."""


class ScenarioParseError(ScenarioError):
    """The scenario file is not valid JSON or has malformed fields."""


class DeviceKind(str, Enum):
    ROUTER = "router"
    SWITCH = "switch"
    ENDPOINT = "endpoint"


DEVICE_KINDS = (DeviceKind.ROUTER, DeviceKind.SWITCH, DeviceKind.ENDPOINT)


@dataclass(frozen=True)
class Device:
    id: int
    kind: DeviceKind


@dataclass(frozen=True)
class Link:
    id: int
    src_device: int
    dst_device: int
    bandwidth: float  # bits/s
    propagation_delay: float = 0.0  # s


@dataclass(frozen=True)
class Queue:
    id: int
    device: int
    out_link: int
    buffer_size: int  # packets waiting, excluding the one in service


# ---------------------------------------------------------------------------
# traffic profiles


@dataclass(frozen=True)
class ConstantBurst:
    """Back-to-back packets at ``rate`` for ``burst_duration`` out of every ``period``."""

    rate: float
    burst_duration: float
    period: float
    start: float = 0.0
    stop: float = math.inf

    def emission_times(self, packet_size: float, duration: float) -> np.ndarray:
        end = min(self.stop, duration)
        if end <= self.start:
            return np.empty(0)
        gap = packet_size / self.rate
        n_burst = int(math.ceil((end - self.start) / self.period)) + 1
        n_per = int(math.ceil(self.burst_duration / gap)) + 1
        offsets = np.arange(n_per) * gap
        offsets = offsets[offsets < self.burst_duration]
        starts = self.start + np.arange(n_burst) * self.period
        times = (starts[:, None] + offsets[None, :]).ravel()
        return times[(times >= 0.0) & (times < end)]

    def to_dict(self) -> dict:
        d = {"type": "constant_burst", "rate": self.rate, "burst_duration": self.burst_duration,
             "period": self.period, "start": self.start}
        if math.isfinite(self.stop):
            d["stop"] = self.stop
        return d


@dataclass(frozen=True)
class MultiBurst:
    """Sum of several burst processes; packets of all components are merged."""

    components: tuple[ConstantBurst, ...]

    def emission_times(self, packet_size: float, duration: float) -> np.ndarray:
        if not self.components:
            return np.empty(0)
        parts = [c.emission_times(packet_size, duration) for c in self.components]
        return np.sort(np.concatenate(parts), kind="stable")

    def to_dict(self) -> dict:
        return {"type": "multi_burst", "components": [c.to_dict() for c in self.components]}


@dataclass(frozen=True)
class TraceReplay:
    timestamps: tuple[float, ...]

    def emission_times(self, packet_size: float, duration: float) -> np.ndarray:
        ts = np.asarray(self.timestamps, dtype=float)
        return ts[(ts >= 0.0) & (ts < duration)]

    def to_dict(self) -> dict:
        return {"type": "trace_replay", "timestamps": list(self.timestamps)}


TrafficProfile = Union[ConstantBurst, MultiBurst, TraceReplay]


@dataclass(frozen=True)
class Flow:
    id: int
    src_device: int
    dst_device: int
    path: tuple[tuple[int, int], ...]  # (link id, queue id) per hop
    packet_size: float  # bits
    profile: TrafficProfile

    def emission_times(self, duration: float) -> np.ndarray:
        return self.profile.emission_times(self.packet_size, duration)


@dataclass(frozen=True)
class Scenario:
    devices: tuple[Device, ...]
    links: tuple[Link, ...]
    queues: tuple[Queue, ...]
    flows: tuple[Flow, ...]
    duration: float
    window_size: float
    _index: dict = field(default=None, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        validate(self)
        index = {
            "device": {d.id: d for d in self.devices},
            "link": {l.id: l for l in self.links},
            "queue": {q.id: q for q in self.queues},
        }
        object.__setattr__(self, "_index", index)

    @property
    def n_windows(self) -> int:
        return int(round(self.duration / self.window_size))

    def device(self, i: int) -> Device:
        return self._index["device"][i]

    def link(self, i: int) -> Link:
        return self._index["link"][i]

    def queue(self, i: int) -> Queue:
        return self._index["queue"][i]

    def with_window(self, window_size: float) -> "Scenario":
        return Scenario(self.devices, self.links, self.queues, self.flows,
                        self.duration, window_size)


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ScenarioError(msg)


def _check_profile(p: TrafficProfile, where: str) -> None:
    if isinstance(p, ConstantBurst):
        _check(p.rate > 0, f"{where}: rate must be > 0")
        _check(p.period > 0, f"{where}: period must be > 0")
        _check(0 < p.burst_duration <= p.period, f"{where}: burst_duration must be in (0, period]")
        _check(p.stop > p.start, f"{where}: stop must be after start")
    elif isinstance(p, MultiBurst):
        _check(len(p.components) > 0, f"{where}: multi_burst needs at least one component")
        for i, c in enumerate(p.components):
            _check(isinstance(c, ConstantBurst), f"{where}.components[{i}]: not a constant burst")
            _check_profile(c, f"{where}.components[{i}]")
    elif isinstance(p, TraceReplay):
        ts = p.timestamps
        _check(all(ts[i] <= ts[i + 1] for i in range(len(ts) - 1)),
               f"{where}: timestamps must be sorted ascending")
    else:
        raise ScenarioError(f"{where}: unknown profile type {type(p).__name__}")


def validate(s: Scenario) -> None:
    """Raise ScenarioError naming the first violated invariant."""
    ids = sorted(d.id for d in s.devices)
    _check(ids == list(range(len(ids))), "device ids must be dense 0..N-1")
    devices = {d.id: d for d in s.devices}
    for d in s.devices:
        _check(isinstance(d.kind, DeviceKind), f"device {d.id}: unknown kind {d.kind!r}")

    links = {}
    for l in s.links:
        _check(l.id not in links, f"duplicate link id {l.id}")
        _check(l.src_device in devices, f"link {l.id}: unknown device id {l.src_device}")
        _check(l.dst_device in devices, f"link {l.id}: unknown device id {l.dst_device}")
        _check(l.src_device != l.dst_device, f"link {l.id}: src_device equals dst_device")
        _check(l.bandwidth > 0, f"link {l.id}: bandwidth must be > 0")
        _check(l.propagation_delay >= 0, f"link {l.id}: propagation_delay must be >= 0")
        links[l.id] = l

    queues = {}
    feeding: dict[int, int] = {}
    for q in s.queues:
        _check(q.id not in queues, f"duplicate queue id {q.id}")
        _check(q.device in devices, f"queue {q.id}: unknown device id {q.device}")
        _check(q.out_link in links, f"queue {q.id}: unknown link id {q.out_link}")
        _check(q.buffer_size > 0, f"queue {q.id}: buffer_size must be > 0")
        _check(links[q.out_link].src_device == q.device,
               f"queue {q.id}: must sit on the source device of link {q.out_link}")
        _check(q.out_link not in feeding, f"link {q.out_link}: more than one queue feeds it")
        feeding[q.out_link] = q.id
        queues[q.id] = q
    for lid in links:
        _check(lid in feeding, f"link {lid}: no queue feeds it")

    _check(len(s.flows) >= 1, "scenario needs at least one flow")
    seen = set()
    for f in s.flows:
        where = f"flow {f.id}"
        _check(f.id not in seen, f"duplicate flow id {f.id}")
        seen.add(f.id)
        _check(f.packet_size > 0, f"{where}: packet_size must be > 0")
        for dev in (f.src_device, f.dst_device):
            _check(dev in devices, f"{where}: unknown device id {dev}")
            _check(devices[dev].kind == DeviceKind.ENDPOINT, f"{where}: device {dev} is not an endpoint")
        _check(len(f.path) >= 1, f"{where}: empty path")
        prev_dst = f.src_device
        for pos, (lid, qid) in enumerate(f.path):
            _check(lid in links, f"{where}: hop {pos}: unknown link id {lid}")
            _check(qid in queues, f"{where}: hop {pos}: unknown queue id {qid}")
            _check(queues[qid].out_link == lid, f"{where}: hop {pos}: queue {qid} does not feed link {lid}")
            _check(queues[qid].device == prev_dst, f"{where}: hop {pos}: path is not contiguous")
            prev_dst = links[lid].dst_device
        _check(prev_dst == f.dst_device, f"{where}: path does not end at dst_device")
        _check_profile(f.profile, f"{where}.profile")

    _check(s.window_size > 0, "window_s must be > 0")
    _check(s.duration > 0, "duration_s must be > 0")
    ratio = s.duration / s.window_size
    _check(abs(ratio - round(ratio)) < 1e-9 * max(1.0, ratio),
           "duration_s must be an integer multiple of window_s")
    _check(round(ratio) >= 1, "scenario needs at least one window")


# ---------------------------------------------------------------------------
# JSON format


def scenario_to_dict(s: Scenario) -> dict:
    return {
        "devices": [{"id": d.id, "kind": d.kind.value} for d in s.devices],
        "links": [{"id": l.id, "src_device": l.src_device, "dst_device": l.dst_device,
                   "bandwidth": l.bandwidth, "propagation_delay": l.propagation_delay}
                  for l in s.links],
        "queues": [{"id": q.id, "device": q.device, "out_link": q.out_link,
                    "buffer_size": q.buffer_size} for q in s.queues],
        "flows": [{"id": f.id, "src_device": f.src_device, "dst_device": f.dst_device,
                   "path": [[l, q] for l, q in f.path], "packet_size": f.packet_size,
                   "profile": f.profile.to_dict()} for f in s.flows],
        "duration_s": s.duration,
        "window_s": s.window_size,
    }


class _Reader:
    """Field access with path context for error messages."""

    def __init__(self, obj, where: str):
        if not isinstance(obj, dict):
            raise ScenarioParseError(f"{where}: expected an object")
        self.obj = obj
        self.where = where

    def get(self, key, kind=float, default=...):
        if key not in self.obj:
            if default is ...:
                raise ScenarioParseError(f"{self.where}.{key}: missing field")
            return default
        val = self.obj[key]
        try:
            if kind is int:
                if isinstance(val, bool) or not float(val).is_integer():
                    raise ValueError
                return int(val)
            if kind is float:
                if isinstance(val, bool):
                    raise ValueError
                return float(val)
            if kind is list:
                if not isinstance(val, list):
                    raise ValueError
                return val
        except (TypeError, ValueError):
            raise ScenarioParseError(f"{self.where}.{key}: invalid value {val!r}") from None
        return val


def _profile_from_dict(obj, where: str) -> TrafficProfile:
    r = _Reader(obj, where)
    kind = r.get("type", str)
    if kind == "constant_burst":
        return ConstantBurst(rate=r.get("rate"), burst_duration=r.get("burst_duration"),
                             period=r.get("period"), start=r.get("start", default=0.0),
                             stop=r.get("stop", default=math.inf))
    if kind == "multi_burst":
        comps = r.get("components", list)
        return MultiBurst(tuple(_profile_from_dict(c, f"{where}.components[{i}]")
                                for i, c in enumerate(comps)))
    if kind == "trace_replay":
        ts = r.get("timestamps", list)
        try:
            return TraceReplay(tuple(float(t) for t in ts))
        except (TypeError, ValueError):
            raise ScenarioParseError(f"{where}.timestamps: non-numeric entry") from None
    raise ScenarioParseError(f"{where}.type: unknown profile type {kind!r}")


def scenario_from_dict(obj) -> Scenario:
    top = _Reader(obj, "scenario")
    devices = []
    for i, d in enumerate(top.get("devices", list)):
        r = _Reader(d, f"devices[{i}]")
        kind = r.get("kind", str)
        try:
            devices.append(Device(r.get("id", int), DeviceKind(kind)))
        except ValueError:
            raise ScenarioParseError(f"devices[{i}].kind: unknown device kind {kind!r}") from None
    links = []
    for i, l in enumerate(top.get("links", list)):
        r = _Reader(l, f"links[{i}]")
        links.append(Link(r.get("id", int), r.get("src_device", int), r.get("dst_device", int),
                          r.get("bandwidth"), r.get("propagation_delay", default=0.0)))
    queues = []
    for i, q in enumerate(top.get("queues", list)):
        r = _Reader(q, f"queues[{i}]")
        queues.append(Queue(r.get("id", int), r.get("device", int), r.get("out_link", int),
                            r.get("buffer_size", int)))
    flows = []
    for i, f in enumerate(top.get("flows", list)):
        r = _Reader(f, f"flows[{i}]")
        path = []
        for j, hop in enumerate(r.get("path", list)):
            if (not isinstance(hop, list) or len(hop) != 2
                    or not all(isinstance(x, int) and not isinstance(x, bool) for x in hop)):
                raise ScenarioParseError(f"flows[{i}].path[{j}]: expected [link_id, queue_id]")
            path.append((hop[0], hop[1]))
        flows.append(Flow(r.get("id", int), r.get("src_device", int), r.get("dst_device", int),
                          tuple(path), r.get("packet_size"),
                          _profile_from_dict(r.get("profile", dict), f"flows[{i}].profile")))
    return Scenario(tuple(devices), tuple(links), tuple(queues), tuple(flows),
                    top.get("duration_s"), top.get("window_s"))


def load_scenario(path) -> Scenario:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise ScenarioParseError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from None
    return scenario_from_dict(obj)


def dump_json(obj, path) -> None:
    """Write JSON atomically (temp file + rename)."""
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=False)
        fh.write("\n")
    os.replace(tmp, path)


def save_scenario(s: Scenario, path) -> None:
    dump_json(scenario_to_dict(s), path)


# ---------------------------------------------------------------------------
# window features


def window_index(times: np.ndarray, window_size: float, n_windows: int) -> np.ndarray:
    """Window of each generation time: floor(t / window_size), clipped to the last window."""
    idx = np.floor(np.asarray(times, dtype=float) / window_size + _WINDOW_SNAP).astype(np.int64)
    return np.clip(idx, 0, n_windows - 1)


DEVICE_ONE_HOT = {k: np.eye(3)[i] for i, k in enumerate(DEVICE_KINDS)}


@dataclass(frozen=True)
class WindowFeatures:
    """Per-window model inputs, rows in ascending id order of each element kind."""

    flow_ids: np.ndarray
    link_ids: np.ndarray
    queue_ids: np.ndarray
    avg_load: np.ndarray  # (F, W) bits/s
    packet_rate: np.ndarray  # (F, W) packets/s
    packet_size: np.ndarray  # (F,) bits
    expected_load: np.ndarray  # (L, W) fraction of link bandwidth
    device_type: np.ndarray  # (Q, 3) one-hot router/switch/endpoint
    packets: np.ndarray  # (F,) total generated packets


def compute_window_features(s: Scenario) -> WindowFeatures:
    W = s.n_windows
    flows = sorted(s.flows, key=lambda f: f.id)
    links = sorted(s.links, key=lambda l: l.id)
    queues = sorted(s.queues, key=lambda q: q.id)
    link_row = {l.id: i for i, l in enumerate(links)}

    counts = np.zeros((len(flows), W))
    totals = np.zeros(len(flows), dtype=np.int64)
    for i, f in enumerate(flows):
        t = f.emission_times(s.duration)
        totals[i] = t.size
        counts[i] = np.bincount(window_index(t, s.window_size, W), minlength=W)
    sizes = np.array([f.packet_size for f in flows], dtype=float)
    packet_rate = counts / s.window_size
    avg_load = packet_rate * sizes[:, None]

    load = np.zeros((len(links), W))
    for i, f in enumerate(flows):
        for lid, _ in f.path:
            load[link_row[lid]] += avg_load[i]
    bw = np.array([l.bandwidth for l in links])
    return WindowFeatures(
        flow_ids=np.array([f.id for f in flows], dtype=np.int64),
        link_ids=np.array([l.id for l in links], dtype=np.int64),
        queue_ids=np.array([q.id for q in queues], dtype=np.int64),
        avg_load=avg_load,
        packet_rate=packet_rate,
        packet_size=sizes,
        expected_load=load / bw[:, None],
        device_type=np.array([DEVICE_ONE_HOT[s.device(q.device).kind] for q in queues]).reshape(-1, 3),
        packets=totals,
    )

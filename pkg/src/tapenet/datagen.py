"""Random scenario generation: topologies, shortest-path routing, burst traffic."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Sequence

import networkx as nx
import numpy as np

from .scenario import (ConstantBurst, Device, DeviceKind, Flow, Link, MultiBurst, Queue,
                       Scenario, TraceReplay, compute_window_features)


class GenerationError(ValueError):
    pass


TOPOLOGY_FAMILIES = ("line", "star", "tree", "erdos_renyi", "mixed", "testbed")
PROFILE_FAMILIES = ("trex_s", "trex_mb", "trace")

# Eleven fixed router graphs with 5 to 8 nodes, used by the "testbed" family.
TESTBED_TOPOLOGIES: tuple[tuple[int, tuple[tuple[int, int], ...]], ...] = (
    (5, ((0, 1), (1, 2), (2, 3), (3, 4))),
    (5, ((0, 1), (1, 2), (2, 3), (3, 4), (4, 0))),
    (5, ((0, 1), (1, 2), (2, 3), (3, 4), (1, 3))),
    (6, ((0, 1), (1, 2), (2, 3), (3, 4), (4, 5))),
    (6, ((0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 0))),
    (6, ((0, 1), (1, 2), (2, 3), (1, 4), (4, 5), (5, 3))),
    (6, ((0, 1), (1, 2), (1, 3), (3, 4), (3, 5))),
    (7, ((0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 6))),
    (7, ((0, 1), (1, 2), (2, 3), (3, 0), (2, 4), (4, 5), (5, 6), (6, 4))),
    (8, ((0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 6), (6, 7))),
    (8, ((0, 1), (1, 2), (2, 3), (3, 0), (3, 4), (4, 5), (5, 6), (6, 7), (7, 4))),
)


@dataclass(frozen=True)
class GenConfig:
    seed: int = 0
    n_scenarios: int = 10
    node_range: tuple[int, int] = (5, 8)
    topology_family: str = "mixed"
    er_p: float = 0.4
    path_router_range: tuple[int, int] = (3, 5)
    flows_per_scenario: tuple[int, int] = (6, 12)
    profile_family: str = "trex_mb"
    bandwidth: float = 10e6
    propagation_delay: float = 0.0
    buffer_size: int = 64
    duration_s: float = 1.0
    window_s: float = 0.1
    packet_size_bytes: tuple[int, int] = (500, 1500)
    # target utilization of the most loaded link: its peak per-window expected load
    # ("window_peak") or its average over the whole run ("mean")
    load_range: tuple[float, float] = (0.1, 0.9)
    load_reference: str = "window_peak"
    # burst peak rate as a multiple of the link bandwidth
    peak_rate_range: tuple[float, float] = (0.3, 1.5)
    mb_components: tuple[int, int] = (2, 5)

    def __post_init__(self):
        for name in ("node_range", "path_router_range", "flows_per_scenario", "packet_size_bytes",
                     "load_range", "peak_rate_range", "mb_components"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise GenerationError(msg)

        lo, hi = self.node_range
        need(3 <= lo <= hi <= 128, f"node_range {list(self.node_range)} must lie within [3, 128]")
        plo, phi = self.path_router_range
        need(1 <= plo <= phi <= hi,
             f"path_router_range {list(self.path_router_range)} must lie within [1, node_range max = {hi}]")
        need(self.n_scenarios >= 1, "n_scenarios must be >= 1")
        need(1 <= self.flows_per_scenario[0] <= self.flows_per_scenario[1], "invalid flows_per_scenario")
        need(self.topology_family in TOPOLOGY_FAMILIES, f"unknown topology_family {self.topology_family!r}")
        need(self.profile_family in PROFILE_FAMILIES, f"unknown profile_family {self.profile_family!r}")
        need(0.0 < self.er_p <= 1.0, "er_p must be in (0, 1]")
        need(self.bandwidth > 0, "bandwidth must be > 0")
        need(self.buffer_size >= 1, "buffer_size must be >= 1")
        need(0 < self.load_range[0] <= self.load_range[1], "invalid load_range")
        need(self.load_reference in ("window_peak", "mean"),
             f"load_reference must be 'window_peak' or 'mean', got {self.load_reference!r}")
        need(0 < self.peak_rate_range[0] <= self.peak_rate_range[1], "invalid peak_rate_range")
        need(1 <= self.mb_components[0] <= self.mb_components[1], "invalid mb_components")
        ratio = self.duration_s / self.window_s
        need(abs(ratio - round(ratio)) < 1e-9 and round(ratio) >= 1,
             "duration_s must be a positive integer multiple of window_s")

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise GenerationError(f"unknown GenConfig fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "GenConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


# ---------------------------------------------------------------------------
# topology


def _router_graph(cfg: GenConfig, rng: np.random.Generator) -> nx.Graph:
    family = cfg.topology_family
    if family == "testbed":
        lo, hi = cfg.node_range
        pool = [t for t in TESTBED_TOPOLOGIES if lo <= t[0] <= hi]
        if not pool:
            raise GenerationError(f"no testbed topology has a node count within node_range {list(cfg.node_range)}")
        n, edges = pool[int(rng.integers(len(pool)))]
        g = nx.Graph()
        g.add_nodes_from(range(n))
        g.add_edges_from(edges)
        return g
    n = int(rng.integers(cfg.node_range[0], cfg.node_range[1] + 1))
    if family == "mixed":
        family = ("line", "star", "tree", "erdos_renyi")[int(rng.integers(4))]
    g = nx.Graph()
    g.add_nodes_from(range(n))
    if family == "line":
        g.add_edges_from((i, i + 1) for i in range(n - 1))
    elif family == "star":
        g.add_edges_from((0, i) for i in range(1, n))
    elif family == "tree":
        g.add_edges_from((i, int(rng.integers(i))) for i in range(1, n))
    else:
        for i in range(n):
            for j in range(i + 1, n):
                if rng.random() < cfg.er_p:
                    g.add_edge(i, j)
        comps = sorted(sorted(c) for c in nx.connected_components(g))
        for a, b in zip(comps[:-1], comps[1:]):
            g.add_edge(a[int(rng.integers(len(a)))], b[int(rng.integers(len(b)))])
    return g


def _candidate_pairs(g: nx.Graph, lo: int, hi: int) -> list[tuple[int, int]]:
    dist = dict(nx.all_pairs_shortest_path_length(g))
    return [(a, b) for a in sorted(g) for b in sorted(g)
            if a != b and lo <= dist[a][b] + 1 <= hi]


# ---------------------------------------------------------------------------
# traffic


def _log_uniform(rng, lo, hi):
    return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))


def _burst(rng, mean_rate: float, packet_size: float, peak: float, burst: float,
           start: float, stop: float) -> ConstantBurst:
    """A ConstantBurst whose long-run average rate is ``mean_rate``."""
    peak = max(peak, mean_rate)
    gap = packet_size / peak
    per_burst = max(1, math.ceil(burst / gap))
    period = per_burst * packet_size / mean_rate
    burst = min(burst, period)
    phase = float(rng.uniform(0.0, min(period, 0.5 * (stop - start))))
    return ConstantBurst(rate=peak, burst_duration=burst, period=period,
                         start=start + phase, stop=stop)


def _profile(cfg: GenConfig, rng, mean_rate: float, packet_size: float):
    bw = cfg.bandwidth
    T = cfg.duration_s
    if cfg.profile_family == "trex_s":
        peak = _log_uniform(rng, *cfg.peak_rate_range) * bw
        burst = float(rng.uniform(0.1e-3, 0.95e-3))
        return _burst(rng, mean_rate, packet_size, peak, burst, 0.0, math.inf)
    if cfg.profile_family == "trex_mb":
        k = int(rng.integers(cfg.mb_components[0], cfg.mb_components[1] + 1))
        shares = rng.dirichlet(np.ones(k))
        comps = []
        for share in shares:
            # each component is active on a random sub-interval of the run
            span = float(rng.uniform(0.3, 1.0)) * T
            start = float(rng.uniform(0.0, T - span))
            peak = _log_uniform(rng, *cfg.peak_rate_range) * bw
            burst = _log_uniform(rng, 0.5e-3, 20e-3)
            comps.append(_burst(rng, share * mean_rate * T / span, packet_size, peak, burst,
                                start, start + span))
        return MultiBurst(tuple(comps))
    # synthetic trace: Poisson packets modulated by exponential on/off periods
    times = []
    t = 0.0
    on = True
    rate_on = mean_rate / packet_size / 0.5
    while t < T:
        length = float(rng.exponential(0.05))
        if on:
            n = int(rng.poisson(rate_on * length))
            times.extend(np.sort(rng.uniform(t, min(t + length, T), size=n)).tolist())
        t += length
        on = not on
    return TraceReplay(tuple(sorted(x for x in times if x < T)))


# ---------------------------------------------------------------------------
# scenario assembly


_TOPOLOGY_ATTEMPTS = 64
_LOAD_PASSES = 4


def generate_scenario(cfg: GenConfig, index: int) -> Scenario:
    rng = np.random.default_rng([cfg.seed, index])
    # random families may draw a topology too small for the path range; redraw a
    # bounded number of times before declaring the configuration infeasible
    for _ in range(_TOPOLOGY_ATTEMPTS):
        g = _router_graph(cfg, rng)
        pairs = _candidate_pairs(g, *cfg.path_router_range)
        if pairs:
            break
    routers = sorted(g)
    if not pairs:
        diam = nx.diameter(g) + 1
        raise GenerationError(
            f"path_router_range {list(cfg.path_router_range)} is infeasible: longest shortest path "
            f"in the {len(routers)}-node {cfg.topology_family} topology visits {diam} routers")

    # routers 0..n-1, then one endpoint per router
    n = len(routers)
    devices = [Device(r, DeviceKind.ROUTER) for r in routers]
    devices += [Device(n + r, DeviceKind.ENDPOINT) for r in routers]
    links: list[Link] = []
    link_of: dict[tuple[int, int], int] = {}

    def add_link(a, b):
        link_of[(a, b)] = len(links)
        links.append(Link(len(links), a, b, cfg.bandwidth, cfg.propagation_delay))

    for r in routers:
        add_link(n + r, r)
        add_link(r, n + r)
    for a, b in sorted(g.edges()):
        add_link(a, b)
        add_link(b, a)
    queues = [Queue(l.id, l.src_device, l.id, cfg.buffer_size) for l in links]

    n_flows = int(rng.integers(cfg.flows_per_scenario[0], cfg.flows_per_scenario[1] + 1))
    routes = []
    for _ in range(n_flows):
        a, b = pairs[int(rng.integers(len(pairs)))]
        options = sorted(nx.all_shortest_paths(g, a, b))
        hops = options[int(rng.integers(len(options)))]
        devs = [n + a] + hops + [n + b]
        routes.append([link_of[(u, v)] for u, v in zip(devs[:-1], devs[1:])])

    # scale flow rates so that the busiest link sits at the drawn utilization
    weights = np.array([_log_uniform(rng, 1.0, 10.0) for _ in routes])
    unit_load = np.zeros(len(links))
    for w, route in zip(weights, routes):
        unit_load[route] += w
    target = float(rng.uniform(*cfg.load_range))
    rates = weights * target * cfg.bandwidth / unit_load.max()

    def assemble(rates):
        flows = []
        for fid, (route, rate) in enumerate(zip(routes, rates)):
            size = 8.0 * int(rng.integers(cfg.packet_size_bytes[0], cfg.packet_size_bytes[1] + 1))
            path = tuple((l, l) for l in route)
            flows.append(Flow(fid, links[route[0]].src_device, links[route[-1]].dst_device, path,
                              size, _profile(cfg, rng, float(rate), size)))
        return Scenario(tuple(devices), tuple(links), tuple(queues), tuple(flows),
                        cfg.duration_s, cfg.window_s)

    if cfg.load_reference == "mean":
        return assemble(rates)
    # rescale until the busiest (link, window) pair sits at the target; replaying the
    # same random state keeps the burst structure and only changes the rates
    state = rng.bit_generator.state
    for _ in range(_LOAD_PASSES):
        rng.bit_generator.state = state
        s = assemble(rates)
        peak = float(compute_window_features(s).expected_load.max())
        if peak <= 0.0 or abs(peak / target - 1.0) < 0.02:
            break
        rates = rates * (target / peak)
    return s


def generate_dataset(cfg: GenConfig, jobs: int = 1) -> list[Scenario]:
    """Scenario i depends only on (cfg.seed, i), so serial and parallel runs agree."""
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(jobs) as pool:
            return list(pool.map(generate_scenario, [cfg] * cfg.n_scenarios, range(cfg.n_scenarios)))
    return [generate_scenario(cfg, i) for i in range(cfg.n_scenarios)]


def split_sizes(n: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of n items to the given ratios."""
    raw = [n * r for r in ratios]
    sizes = [int(math.floor(x + 1e-9)) for x in raw]
    order = sorted(range(len(ratios)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def split_dataset(ds: Sequence, ratios=(0.75, 0.15, 0.10), seed: int = 0):
    if len(ds) == 0:
        raise ValueError("cannot split an empty dataset")
    if abs(sum(ratios) - 1.0) > 1e-9 or any(r < 0 for r in ratios):
        raise ValueError(f"split ratios must be non-negative and sum to 1, got {list(ratios)}")
    perm = np.random.default_rng(seed).permutation(len(ds))
    out, start = [], 0
    for size in split_sizes(len(ds), ratios):
        out.append([ds[i] for i in sorted(perm[start:start + size])])
        start += size
    return tuple(out)


def scale_packets(s: Scenario, factor: int) -> Scenario:
    """Same offered bits carried by exactly ``factor`` times as many, smaller packets.

    Every flow is rewritten as a replayed trace: each original emission is split
    into ``factor`` packets spread evenly over the gap to the next emission.
    """
    if factor < 1 or int(factor) != factor:
        raise ValueError(f"packet scale factor must be a positive integer, got {factor}")
    factor = int(factor)
    flows = []
    for f in s.flows:
        ts = f.emission_times(s.duration)
        gaps = np.diff(np.append(ts, s.duration))
        dense = (ts[:, None] + gaps[:, None] * np.arange(factor)[None, :] / factor).ravel()
        flows.append(replace(f, packet_size=f.packet_size / factor,
                             profile=TraceReplay(tuple(float(t) for t in dense))))
    return replace(s, flows=tuple(flows))

"""Windowed message-passing model over the expanded graph.

Eight shared blocks: encoders E_f, E_l, E_q (MLPs), update cells U_F, U_Q, U_D,
U_L (GRUs) and the readout R (MLP with softplus output). Queue and device states
carry over from one window to the next; flow and link states are re-encoded from
each window's features.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import nn
from .graph import ExpandedGraph, build
from .scenario import Scenario, WindowFeatures, compute_window_features, dump_json
from .nn import GRUCell, MLP, Normalizer, Var

CHECKPOINT_FORMAT = "tapenet-checkpoint/1"
BLOCKS = ("E_f", "E_l", "E_q", "U_F", "U_Q", "U_D", "U_L", "R")
TARGET_NAMES = tuple(f"{m}_{s}" for m in ("delay", "jitter") for s in ("avg", "median", "p90", "p95", "p99"))
# packet size enters the flow encoder in units of 10^4 bits
PACKET_SIZE_UNIT = 1e4


class WindowMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    state_dim: int = 32
    mp_iterations: int = 8
    n_targets: int = 10
    mlp_hidden_layers: int = 2
    # predictions are produced in this unit (seconds per unit) before rescaling
    target_unit_s: float = 1e-6

    def __post_init__(self):
        if self.state_dim < 1:
            raise ValueError("state_dim must be >= 1")
        if self.mp_iterations < 1:
            raise ValueError("mp_iterations must be >= 1")

    def blocks(self) -> dict:
        H = self.state_dim
        hid = (H,) * self.mlp_hidden_layers
        return {
            "E_f": MLP((3,) + hid + (H,)),
            "E_l": MLP((1,) + hid + (H,)),
            "E_q": MLP((3,) + hid + (H,)),
            "U_F": GRUCell(2 * H, H),
            "U_Q": GRUCell(2 * H, H),
            "U_D": GRUCell(H, H),
            "U_L": GRUCell(H, H),
            "R": MLP((H,) + hid + (self.n_targets,), output="softplus"),
        }


@dataclass(frozen=True)
class GraphIndex:
    """Index arrays for tensorized message passing over one ExpandedGraph.

    Hop incidences are stored position-major: all first hops (ascending flow), then
    all second hops, and so on.
    """

    n_flows: int
    n_links: int
    n_queues: int
    n_devices: int
    inc_flow: np.ndarray
    inc_link: np.ndarray
    inc_queue: np.ndarray
    steps: tuple  # (start, stop, flow rows) per path position
    last_inc: np.ndarray  # (F,) incidence row of each flow's last hop
    queue_device: np.ndarray
    link_queue: np.ndarray

    @classmethod
    def from_graph(cls, g: ExpandedGraph) -> "GraphIndex":
        lengths = np.array([len(p) for p in g.flow_paths])
        inc_flow, inc_link, inc_queue, steps = [], [], [], []
        last = np.empty(g.n_flows, dtype=np.int64)
        row = 0
        for pos in range(int(lengths.max())):
            active = np.flatnonzero(lengths > pos)
            steps.append((row, row + active.size, active))
            for f in active:
                l, q = g.flow_paths[f][pos]
                inc_flow.append(f)
                inc_link.append(l)
                inc_queue.append(q)
                if pos == lengths[f] - 1:
                    last[f] = row
                row += 1
        arr = lambda x: np.array(x, dtype=np.int64)
        return cls(g.n_flows, g.n_links, g.n_queues, g.n_devices, arr(inc_flow), arr(inc_link),
                   arr(inc_queue), tuple(steps), last, g.queue_device.copy(), g.link_queue.copy())


@dataclass
class Sample:
    """Everything the model needs for one scenario (features unnormalized)."""

    scenario: Scenario
    graph: ExpandedGraph
    index: GraphIndex
    features: WindowFeatures
    targets: Optional[np.ndarray] = None  # (F, W, n_targets) seconds, NaN where absent

    @classmethod
    def from_scenario(cls, s: Scenario, truth=None) -> "Sample":
        g = build(s)
        targets = None
        if truth is not None:
            if not np.array_equal(truth.flow_ids, g.flow_ids):
                raise ValueError("ground truth flows do not match the scenario")
            if truth.n_windows != s.n_windows:
                raise ValueError("ground truth window count does not match the scenario")
            targets = truth.targets()
        return cls(s, g, GraphIndex.from_graph(g), compute_window_features(s), targets)

    @property
    def window_size(self) -> float:
        return self.scenario.window_size

    @property
    def n_windows(self) -> int:
        return self.scenario.n_windows


class NetworkModel:
    def __init__(self, config: ModelConfig, params: dict, normalizer: Normalizer, window_size: float):
        self.config = config
        self.blocks = config.blocks()
        self.params = params
        self.normalizer = normalizer
        self.window_size = window_size

    @classmethod
    def create(cls, config: ModelConfig, normalizer: Normalizer, window_size: float, seed: int) -> "NetworkModel":
        rng = np.random.default_rng(seed)
        blocks = config.blocks()
        params = {name: blocks[name].init(rng) for name in BLOCKS}
        return cls(config, params, normalizer, window_size)

    # -- inputs ---------------------------------------------------------

    def flow_inputs(self, feats: WindowFeatures) -> np.ndarray:
        """(W, F, 3): z-scored load, z-scored packet rate, scaled packet size."""
        load, rate = self.normalizer.apply(feats.avg_load, feats.packet_rate)
        size = np.broadcast_to(feats.packet_size[:, None] / PACKET_SIZE_UNIT, load.shape)
        return np.stack([load, rate, size], axis=-1).transpose(1, 0, 2).copy()

    @staticmethod
    def link_inputs(feats: WindowFeatures) -> np.ndarray:
        return feats.expected_load.T[:, :, None].copy()

    # -- algorithm pieces -----------------------------------------------

    def leaves(self) -> dict:
        return {b: {k: Var(v) for k, v in blk.items()} for b, blk in self.params.items()}

    def init_static_states(self, gi: GraphIndex, x_q: np.ndarray, w: dict) -> tuple[Var, Var]:
        if x_q.shape != (gi.n_queues, 3):
            raise ValueError(f"queue features must be ({gi.n_queues}, 3), got {x_q.shape}")
        h_q = self.blocks["E_q"](w["E_q"], x_q)
        m_d = nn.segment_sum(h_q, gi.queue_device, gi.n_devices)
        zero = Var(np.zeros((gi.n_devices, self.config.state_dim)))
        h_d = nn.gru_step(self.blocks["U_D"], w["U_D"], m_d, zero)
        return h_q, h_d

    def message_passing(self, gi: GraphIndex, h_f: Var, h_l: Var, h_q: Var, h_d: Var,
                        w: dict, iterations: Optional[int] = None):
        """Returns (per-hop flow messages of the last iteration, h_q, h_d, h_l)."""
        T = self.config.mp_iterations if iterations is None else iterations
        if T < 1:
            raise ValueError("message passing needs at least one iteration")
        U = self.blocks
        msgs = None
        for _ in range(T):
            x = nn.concat([nn.take(h_l, gi.inc_link), nn.take(h_q, gi.inc_queue)])
            msgs = nn.gru_scan(U["U_F"], w["U_F"], x, h_f, gi.steps)
            h_f = nn.take(msgs, gi.last_inc)
            m_q = nn.concat([nn.take(h_d, gi.queue_device),
                             nn.segment_sum(msgs, gi.inc_queue, gi.n_queues)])
            h_q = nn.gru_step(U["U_Q"], w["U_Q"], m_q, h_q)
            h_d = nn.gru_step(U["U_D"], w["U_D"], nn.segment_sum(h_q, gi.queue_device, gi.n_devices), h_d)
            h_l = nn.gru_step(U["U_L"], w["U_L"], nn.take(h_q, gi.link_queue), h_l)
        return msgs, h_q, h_d, h_l

    def readout(self, gi: GraphIndex, msgs: Var, w: dict) -> Var:
        """Per-flow prediction: sum over hops of R(hop message)."""
        per_hop = self.blocks["R"](w["R"], msgs)
        return nn.segment_sum(per_hop, gi.inc_flow, gi.n_flows)

    def forward(self, sample: Sample, w: Optional[dict] = None, trace: Optional[list] = None) -> Var:
        """Predictions in target units, shape (F, W, n_targets)."""
        if sample.n_windows < 1:
            raise ValueError("scenario has no windows")
        w = self.leaves() if w is None else w
        gi = sample.index
        x_f = self.flow_inputs(sample.features)
        x_l = self.link_inputs(sample.features)
        h_q, h_d = self.init_static_states(gi, sample.features.device_type, w)
        outs = []
        for t in range(sample.n_windows):
            h_f = self.blocks["E_f"](w["E_f"], x_f[t])
            h_l = self.blocks["E_l"](w["E_l"], x_l[t])
            if trace is not None:
                trace.append({"in_q": h_q.value, "in_d": h_d.value})
            msgs, h_q, h_d, _ = self.message_passing(gi, h_f, h_l, h_q, h_d, w)
            if trace is not None:
                trace[-1].update(out_q=h_q.value, out_d=h_d.value, msgs=msgs.value)
            outs.append(self.readout(gi, msgs, w))
        return nn.stack(outs, axis=1)

    def predict(self, sample: Sample, check_window: bool = True) -> np.ndarray:
        """Predictions in seconds, shape (F, W, n_targets)."""
        if check_window:
            self.check_window(sample.window_size)
        return self.forward(sample).value * self.config.target_unit_s

    def check_window(self, window_size: float) -> None:
        if abs(window_size - self.window_size) > 1e-12 * max(1.0, self.window_size):
            raise WindowMismatchError(
                f"scenario window_s={window_size:g} does not match the checkpoint's trained "
                f"window_s={self.window_size:g}; retrain for a different window size")

    # -- persistence ----------------------------------------------------

    def to_dict(self, extra: Optional[dict] = None) -> dict:
        d = {
            "format": CHECKPOINT_FORMAT,
            "model_config": asdict(self.config),
            "window_s": self.window_size,
            "normalizer": self.normalizer.to_dict(),
            "blocks": {b: {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                           for k, v in self.params[b].items()} for b in BLOCKS},
        }
        if extra:
            d.update(extra)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkModel":
        if d.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {d.get('format')!r}")
        params = {b: {k: np.array(t["data"], dtype=float).reshape(t["shape"]) for k, t in blk.items()}
                  for b, blk in d["blocks"].items()}
        return cls(ModelConfig(**d["model_config"]), params, Normalizer.from_dict(d["normalizer"]),
                   float(d["window_s"]))

    def save(self, path, extra: Optional[dict] = None) -> None:
        dump_json(self.to_dict(extra), path)

    @classmethod
    def load(cls, path) -> "NetworkModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def prediction_to_dict(sample: Sample, pred: np.ndarray) -> dict:
    """JSON layout {flow_id: {window: {delay: {...}, jitter: {...}}}} in seconds."""
    stats = ("avg", "median", "p90", "p95", "p99")
    out = {}
    for i, fid in enumerate(sample.graph.flow_ids):
        out[str(int(fid))] = {
            str(t): {"delay": dict(zip(stats, map(float, pred[i, t, :5]))),
                     "jitter": dict(zip(stats, map(float, pred[i, t, 5:10])))}
            for t in range(pred.shape[1])
        }
    return out

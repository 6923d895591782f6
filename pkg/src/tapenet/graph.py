"""Expanded interaction graph: flows, links, queues and devices with dense indices."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .scenario import Scenario


@dataclass(frozen=True)
class ExpandedGraph:
    """Incidence structure between flows, links, queues and devices.

    All indices are dense, assigned in ascending order of the original ids
    (``*_ids`` map an index back to its id).
    """

    flow_ids: np.ndarray
    link_ids: np.ndarray
    queue_ids: np.ndarray
    device_ids: np.ndarray
    flow_paths: tuple[tuple[tuple[int, int], ...], ...]  # per flow: (link, queue) per hop
    queue_device: np.ndarray  # (Q,) owning device
    link_queue: np.ndarray  # (L,) queue feeding the link
    queue_flows: tuple[tuple[tuple[int, int], ...], ...]  # per queue: (flow, position)
    device_queues: tuple[tuple[int, ...], ...]

    @property
    def n_flows(self) -> int:
        return len(self.flow_ids)

    @property
    def n_links(self) -> int:
        return len(self.link_ids)

    @property
    def n_queues(self) -> int:
        return len(self.queue_ids)

    @property
    def n_devices(self) -> int:
        return len(self.device_ids)


def build(s: Scenario) -> ExpandedGraph:
    flows = sorted(s.flows, key=lambda f: f.id)
    links = sorted(s.links, key=lambda l: l.id)
    queues = sorted(s.queues, key=lambda q: q.id)
    devices = sorted(s.devices, key=lambda d: d.id)
    lidx = {l.id: i for i, l in enumerate(links)}
    qidx = {q.id: i for i, q in enumerate(queues)}
    didx = {d.id: i for i, d in enumerate(devices)}

    paths = tuple(tuple((lidx[l], qidx[q]) for l, q in f.path) for f in flows)
    queue_device = np.array([didx[q.device] for q in queues], dtype=np.int64)
    link_queue = np.empty(len(links), dtype=np.int64)
    for q in queues:
        link_queue[lidx[q.out_link]] = qidx[q.id]

    qf: list[list[tuple[int, int]]] = [[] for _ in queues]
    for fi, path in enumerate(paths):
        for pos, (_, q) in enumerate(path):
            qf[q].append((fi, pos))
    dq: list[list[int]] = [[] for _ in devices]
    for qi, d in enumerate(queue_device):
        dq[d].append(qi)

    return ExpandedGraph(
        flow_ids=np.array([f.id for f in flows], dtype=np.int64),
        link_ids=np.array([l.id for l in links], dtype=np.int64),
        queue_ids=np.array([q.id for q in queues], dtype=np.int64),
        device_ids=np.array([d.id for d in devices], dtype=np.int64),
        flow_paths=paths,
        queue_device=queue_device,
        link_queue=link_queue,
        queue_flows=tuple(tuple(x) for x in qf),
        device_queues=tuple(tuple(x) for x in dq),
    )


def edge_list(g: ExpandedGraph) -> list[tuple[str, int, str, int, str]]:
    """Edges as (kind_src, id_src, kind_dst, id_dst, position) using original ids."""
    edges = []
    for fi, path in enumerate(g.flow_paths):
        f = int(g.flow_ids[fi])
        for pos, (l, q) in enumerate(path):
            edges.append(("flow", f, "queue", int(g.queue_ids[q]), str(pos)))
            edges.append(("flow", f, "link", int(g.link_ids[l]), str(pos)))
    for qi, d in enumerate(g.queue_device):
        edges.append(("queue", int(g.queue_ids[qi]), "device", int(g.device_ids[d]), ""))
    for li, q in enumerate(g.link_queue):
        edges.append(("queue", int(g.queue_ids[q]), "link", int(g.link_ids[li]), ""))
    return edges


def write_edge_list(g: ExpandedGraph, path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind_src", "id_src", "kind_dst", "id_dst", "position"])
        w.writerows(edge_list(g))

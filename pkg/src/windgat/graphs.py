"""Wind-farm scenarios as directed graphs, edge graphs and upstream sequences.

An edge ``i -> j`` exists when turbine ``i`` lies upstream of turbine ``j``:
the displacement from ``i`` to ``j`` is within 30 degrees (strictly) of
the downwind direction.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .wakesim import FarmScenario, NormStats, PowerRecord, downwind_unit

UPSTREAM_HALF_ANGLE = 30.0


class GeometryError(ValueError):
    pass


def upstream_angle(target_xy: Sequence[float], candidate_xy: Sequence[float], theta: float) -> float:
    """Signed angle (degrees, in (-180, 180]) between the downwind direction
    and the displacement from ``candidate`` to ``target``.

    0 means the candidate sits directly upwind of the target.
    """
    d = np.asarray(target_xy, dtype=np.float64) - np.asarray(candidate_xy, dtype=np.float64)
    if not np.any(d):
        raise GeometryError("target and candidate turbines coincide")
    w = downwind_unit(theta)
    ang = math.degrees(math.atan2(w[0] * d[1] - w[1] * d[0], w[0] * d[0] + w[1] * d[1]))
    return 180.0 if ang == -180.0 else ang


def angle_matrix(xy: np.ndarray, theta: float) -> np.ndarray:
    """``out[j, i]`` = upstream angle of candidate ``j`` seen from target ``i`` (diagonal NaN)."""
    w = downwind_unit(theta)
    d = xy[None, :, :] - xy[:, None, :]
    ang = np.degrees(np.arctan2(w[0] * d[..., 1] - w[1] * d[..., 0], d @ w))
    ang = np.where(ang == -180.0, 180.0, ang)
    np.fill_diagonal(ang, np.nan)
    return ang


def upstream_mask(xy: np.ndarray, theta: float, max_distance: float | None = None) -> np.ndarray:
    """Boolean ``[sender, receiver]`` matrix of the upstream relation."""
    ang = angle_matrix(xy, theta)
    with np.errstate(invalid="ignore"):
        mask = np.abs(ang) < UPSTREAM_HALF_ANGLE
    if max_distance is not None:
        dist = np.sqrt(((xy[:, None, :] - xy[None, :, :]) ** 2).sum(-1))
        mask &= dist <= max_distance
    np.fill_diagonal(mask, False)
    return mask


def upstream_neighbors(target: int, scenario: FarmScenario, max_distance: float | None = None) -> list[int]:
    mask = upstream_mask(scenario.positions, scenario.theta, max_distance)
    return np.flatnonzero(mask[:, target]).tolist()


@dataclass
class WindGraph:
    u: np.ndarray
    V: np.ndarray
    E: np.ndarray
    senders: np.ndarray
    receivers: np.ndarray
    node_targets: np.ndarray | None = None
    global_target: float | None = None
    positions: np.ndarray | None = None
    theta: float | None = None
    scenario_id: int | None = None

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64).reshape(-1)
        self.V = np.asarray(self.V, dtype=np.float64).reshape(len(self.V), -1)
        self.senders = np.asarray(self.senders, dtype=np.int64).reshape(-1)
        self.receivers = np.asarray(self.receivers, dtype=np.int64).reshape(-1)
        self.E = np.asarray(self.E, dtype=np.float64)
        if self.E.ndim != 2:
            self.E = self.E.reshape(len(self.senders), -1)
        n = self.n_nodes
        if self.senders.shape != self.receivers.shape:
            raise ValueError("senders and receivers differ in length")
        if np.any(self.senders == self.receivers):
            raise ValueError("self-edges are not allowed")
        if self.n_edges and (min(self.senders.min(), self.receivers.min()) < 0 or max(self.senders.max(), self.receivers.max()) >= n):
            raise ValueError("edge endpoint out of range")
        if len(set(zip(self.senders.tolist(), self.receivers.tolist()))) != self.n_edges:
            raise ValueError("duplicate edges")

    @property
    def n_nodes(self) -> int:
        return self.V.shape[0]

    @property
    def n_edges(self) -> int:
        return self.senders.shape[0]

    def incoming(self, j: int) -> np.ndarray:
        """Edge indices ``k`` with ``receivers[k] == j``."""
        return np.flatnonzero(self.receivers == j)

    def to_json(self) -> str:
        obj = {
            "u": self.u.tolist(),
            "V": self.V.tolist(),
            "E": self.E.tolist(),
            "senders": self.senders.tolist(),
            "receivers": self.receivers.tolist(),
        }
        if self.positions is not None:
            obj["positions"] = self.positions.tolist()
            obj["theta"] = self.theta
        return json.dumps(obj)

    def permuted(self, perm: Sequence[int]) -> "WindGraph":
        """Relabel nodes so that old node ``perm[k]`` becomes new node ``k``."""
        perm = np.asarray(perm)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        return WindGraph(
            self.u,
            self.V[perm],
            self.E,
            inv[self.senders],
            inv[self.receivers],
            None if self.node_targets is None else self.node_targets[perm],
            self.global_target,
            None if self.positions is None else self.positions[perm],
            self.theta,
            self.scenario_id,
        )


def _scaled(stats: NormStats | None, name: str, x):
    return np.asarray(x, dtype=np.float64) if stats is None else stats.scale(name, x)


def build_graph(
    scenario: FarmScenario,
    record: PowerRecord | None = None,
    stats: NormStats | None = None,
    max_distance: float | None = None,
) -> WindGraph:
    """Node and global features are the free-stream speed; edges carry
    ``[distance, sin(alpha), cos(alpha)]``.  Edges are ordered by receiver,
    then sender.  Without ``stats`` values stay in physical units.
    """
    xy = scenario.positions
    n = scenario.n_turbines
    mask = upstream_mask(xy, scenario.theta, max_distance)
    recv, send = np.nonzero(mask.T)
    ang = np.radians(angle_matrix(xy, scenario.theta)[send, recv]) if send.size else np.zeros(0)
    dist = np.sqrt(((xy[send] - xy[recv]) ** 2).sum(-1))
    E = np.column_stack([_scaled(stats, "distance", dist), np.sin(ang), np.cos(ang)]) if send.size else np.zeros((0, 3))
    ws = float(_scaled(stats, "ws", scenario.ws))
    node_t = glob_t = None
    if record is not None:
        node_t = _scaled(stats, "turbine_power", record.powers)
        glob_t = float(_scaled(stats, "farm_power", record.farm_power))
    return WindGraph(
        u=[ws],
        V=np.full((n, 1), ws),
        E=E,
        senders=send,
        receivers=recv,
        node_targets=node_t,
        global_target=glob_t,
        positions=xy,
        theta=scenario.theta,
        scenario_id=scenario.id,
    )


@dataclass
class EdgeGraph:
    """Parent edges become nodes; ``src[k] -> dst[k]`` passes through parent node ``via[k]``."""

    features: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    via: np.ndarray

    @property
    def n_edges(self) -> int:
        return self.src.shape[0]


def edge_graph_pairs(senders: np.ndarray, receivers: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All parent-edge pairs (a, b) with ``receivers[a] == senders[b]``, sorted by (b, a)."""
    m = senders.shape[0]
    if m == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, empty
    order = np.argsort(receivers, kind="stable")
    sorted_recv = receivers[order]
    lo = np.searchsorted(sorted_recv, senders, side="left")
    hi = np.searchsorted(sorted_recv, senders, side="right")
    counts = hi - lo
    dst = np.repeat(np.arange(m), counts)
    starts = np.repeat(lo, counts)
    offsets = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    src = order[starts + offsets]
    return src.astype(np.int64), dst.astype(np.int64), senders[dst].astype(np.int64)


def edge_graph_transform(g: WindGraph) -> EdgeGraph:
    src, dst, via = edge_graph_pairs(g.senders, g.receivers)
    return EdgeGraph(g.E.copy(), src, dst, via)


@dataclass
class UpstreamSequence:
    target: int
    triples: np.ndarray  # (k, 3): distance, sin(alpha), cos(alpha)
    ws: float
    neighbors: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return self.triples.shape[0]


def build_upstream_sequences(
    scenario: FarmScenario,
    stats: NormStats | None = None,
    order: str = "nearest",
    max_distance: float | None = None,
) -> list[UpstreamSequence]:
    """One sequence per turbine, neighbours sorted by downwind separation.

    ``order`` is ``"nearest"`` (ascending separation) or ``"farthest"``.
    Ties on separation fall back to the crosswind offset, never to ids.
    """
    if order not in ("nearest", "farthest"):
        raise ValueError(f"unknown order {order!r}")
    xy = scenario.positions
    mask = upstream_mask(xy, scenario.theta, max_distance)
    ang = angle_matrix(xy, scenario.theta)
    w = downwind_unit(scenario.theta)
    ws = float(_scaled(stats, "ws", scenario.ws))
    out = []
    for i in range(scenario.n_turbines):
        js = np.flatnonzero(mask[:, i])
        disp = xy[i] - xy[js]
        along = disp @ w
        across = disp[:, 0] * w[1] - disp[:, 1] * w[0]
        idx = np.lexsort((across, along))
        if order == "farthest":
            idx = idx[::-1]
        js = js[idx]
        a = np.radians(ang[js, i])
        dist = np.sqrt(((xy[i] - xy[js]) ** 2).sum(-1))
        triples = np.column_stack([_scaled(stats, "distance", dist), np.sin(a), np.cos(a)]) if js.size else np.zeros((0, 3))
        out.append(UpstreamSequence(i, triples, ws, js.tolist()))
    return out


@dataclass
class GraphBatch:
    """Disjoint union of several graphs with per-element graph ids."""

    u: np.ndarray
    V: np.ndarray
    E: np.ndarray
    senders: np.ndarray
    receivers: np.ndarray
    node_graph: np.ndarray
    edge_graph: np.ndarray
    n_graphs: int
    eg_src: np.ndarray
    eg_dst: np.ndarray
    eg_via: np.ndarray
    node_targets: np.ndarray | None = None
    global_targets: np.ndarray | None = None

    @property
    def n_nodes(self) -> int:
        return self.V.shape[0]

    @property
    def n_edges(self) -> int:
        return self.E.shape[0]

    @classmethod
    def from_graphs(cls, graphs: Sequence[WindGraph]) -> "GraphBatch":
        if not graphs:
            raise ValueError("empty batch")
        node_off = np.cumsum([0] + [g.n_nodes for g in graphs])
        senders = np.concatenate([g.senders + o for g, o in zip(graphs, node_off)])
        receivers = np.concatenate([g.receivers + o for g, o in zip(graphs, node_off)])
        de = graphs[0].E.shape[1]
        E = np.concatenate([g.E.reshape(-1, de) for g in graphs])
        has_targets = all(g.node_targets is not None for g in graphs)
        src, dst, via = edge_graph_pairs(senders, receivers)
        return cls(
            u=np.stack([g.u for g in graphs]),
            V=np.concatenate([g.V for g in graphs]),
            E=E,
            senders=senders,
            receivers=receivers,
            node_graph=np.repeat(np.arange(len(graphs)), [g.n_nodes for g in graphs]),
            edge_graph=np.repeat(np.arange(len(graphs)), [g.n_edges for g in graphs]),
            n_graphs=len(graphs),
            eg_src=src,
            eg_dst=dst,
            eg_via=via,
            node_targets=np.concatenate([g.node_targets for g in graphs]) if has_targets else None,
            global_targets=np.array([g.global_target for g in graphs]) if has_targets else None,
        )

"""Graph blocks with optional attention at five sites, and the stacked network.

Sites, in execution order inside a block:

``edge``  attention over edges ``(k, i)`` feeding edge ``(i, j)`` (via the edge graph)
``e2v``   attention-weighted edge-to-node aggregation
``node``  attention over sending nodes in the node update
``e2u``   attention-weighted edge-to-global aggregation (whole graph)
``v2u``   attention-weighted node-to-global aggregation (whole graph)

With every site disabled the block reduces to the plain edge/node/global
update with sum aggregation.  All aggregations are sums; receivers with no
senders get zero vectors.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from .autodiff import MLP, DegenerateNeighborhoodError, Linear, Module, Tensor, ops
from .autodiff.nn import LEAKY_SLOPE
from .graphs import GraphBatch, WindGraph

SITES = ("edge", "e2v", "node", "e2u", "v2u")
DEFAULT_BLOCK_WIDTHS = ((256, 128, 64), (128, 64, 32), (64, 64))
DEFAULT_DECODE_WIDTHS = (64, 64)


@dataclass
class GraphBlockConfig:
    edge_attn: bool = False
    e2v_attn: bool = False
    node_attn: bool = False
    e2u_attn: bool = False
    v2u_attn: bool = False
    n_heads: int = 3
    head_dim: int = 16
    edge_widths: tuple[int, ...] = (64, 64)
    node_widths: tuple[int, ...] = (64, 64)
    global_widths: tuple[int, ...] = (64, 64)

    def __post_init__(self):
        if self.n_heads < 1 or self.head_dim < 1:
            raise ValueError("n_heads and head_dim must be >= 1")
        for name in ("edge_widths", "node_widths", "global_widths"):
            w = tuple(int(x) for x in getattr(self, name))
            if not w or min(w) < 1:
                raise ValueError(f"{name} must be non-empty positive widths")
            setattr(self, name, w)

    @property
    def flags(self) -> dict[str, bool]:
        return {s: getattr(self, f"{s}_attn") for s in SITES}

    @property
    def has_attention(self) -> bool:
        return any(self.flags.values())

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("edge_widths", "node_widths", "global_widths"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GraphBlockConfig":
        return cls(**{f.name: d[f.name] for f in fields(cls) if f.name in d})


PRESET_SITES = {
    "o-graph": (),
    "n-graph": ("e2v", "node"),
    "f-graph": SITES,
}


def preset_blocks(
    kind: str,
    widths: Sequence[Sequence[int]] = DEFAULT_BLOCK_WIDTHS,
    n_heads: int = 3,
    head_dim: int = 16,
) -> list[GraphBlockConfig]:
    """Attention (if any) goes in the first block only."""
    if kind not in PRESET_SITES:
        raise KeyError(f"unknown graph model {kind!r}; expected one of {sorted(PRESET_SITES)}")
    blocks = []
    for k, w in enumerate(widths):
        on = PRESET_SITES[kind] if k == 0 else ()
        blocks.append(
            GraphBlockConfig(
                **{f"{s}_attn": s in on for s in SITES},
                n_heads=n_heads,
                head_dim=head_dim,
                edge_widths=tuple(w),
                node_widths=tuple(w),
                global_widths=tuple(w),
            )
        )
    return blocks


class AttentionHead(Module):
    """Key/query maps (and an optional value map) for one head."""

    def __init__(self, key_dim: int, query_dim: int, d: int, rng, value_dim: int | None = None):
        self.K = Linear(key_dim, d, rng, bias=False)
        self.Q = Linear(query_dim, d, rng, bias=False)
        self.F = Linear(value_dim, d, rng, bias=False) if value_dim is not None else None
        self.d = d

    def scores(self, keys: Tensor, queries: Tensor) -> Tensor:
        return ops.scale(ops.row_dot(self.K(keys), self.Q(queries)), 1.0 / math.sqrt(self.d))


class AttentionSite(Module):
    """Multi-head attention at one site of a block.

    ``mapped=True`` is the update-style attention (values go through ``F``,
    the per-head sum goes through the nonlinearity); ``mapped=False`` is the
    aggregation style, where each head rescales the raw element features.
    """

    def __init__(self, key_dim, query_dim, value_dim, out_dim, n_heads, d, rng, mapped: bool):
        self.mapped = mapped
        self.heads = [
            AttentionHead(key_dim, query_dim, d, rng, value_dim if mapped else None) for _ in range(n_heads)
        ]
        self.H = Linear(n_heads * (d if mapped else value_dim), out_dim, rng, bias=False)

    def weights(self, keys: Tensor, queries: Tensor, segments: np.ndarray, n_segments: int) -> list[Tensor]:
        return [ops.segment_softmax(h.scores(keys, queries), segments, n_segments) for h in self.heads]

    def context(self, values: Tensor, alphas: list[Tensor], segments: np.ndarray, n_segments: int) -> Tensor:
        """Update-style output per receiver: ``H(concat_n sigma(sum alpha F value))``."""
        outs = [
            ops.leaky_relu(ops.segment_sum(ops.scale_rows(h.F(values), a), segments, n_segments), LEAKY_SLOPE)
            for h, a in zip(self.heads, alphas)
        ]
        return self.H(ops.concat(outs, axis=1))

    def weighted(self, values: Tensor, alphas: list[Tensor]) -> Tensor:
        """Aggregation-style per-element rows: ``H(concat_n alpha_n value)``."""
        return self.H(ops.concat([ops.scale_rows(values, a) for a in alphas], axis=1))


@dataclass
class AttentionWeights:
    """Per-site, per-head normalized weights from one forward pass.

    ``senders[site]`` and ``receivers[site]`` index the attended and the
    attending element of each weight: parent edges for ``edge``; edge index
    and node for ``e2v``; node pairs for ``node`` (``edges[site]`` keeps the
    carrying edge); edge or node and graph id for ``e2u``/``v2u``.
    """

    weights: dict[str, list[np.ndarray]] = field(default_factory=dict)
    senders: dict[str, np.ndarray] = field(default_factory=dict)
    receivers: dict[str, np.ndarray] = field(default_factory=dict)
    edges: dict[str, np.ndarray] = field(default_factory=dict)

    def add(self, site, alphas, senders, receivers, edges=None):
        self.weights[site] = [a.data.copy() for a in alphas]
        self.senders[site] = np.asarray(senders).copy()
        self.receivers[site] = np.asarray(receivers).copy()
        if edges is not None:
            self.edges[site] = np.asarray(edges).copy()

    @property
    def sites(self) -> list[str]:
        return [s for s in SITES if s in self.weights]

    def sums(self, site: str) -> list[dict[int, float]]:
        out = []
        for a in self.weights[site]:
            acc: dict[int, float] = {}
            for r, w in zip(self.receivers[site].tolist(), a.tolist()):
                acc[r] = acc.get(r, 0.0) + w
            out.append(acc)
        return out

    def max_normalization_error(self) -> float:
        worst = 0.0
        for site in self.sites:
            for acc in self.sums(site):
                for v in acc.values():
                    worst = max(worst, abs(v - 1.0))
        return worst

    def to_dict(self) -> dict:
        out = {}
        for site in self.sites:
            out[site] = {
                f"head{h}": {
                    f"{s}->{r}": w
                    for s, r, w in zip(self.senders[site].tolist(), self.receivers[site].tolist(), a.tolist())
                }
                for h, a in enumerate(self.weights[site])
            }
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


class GraphBlock(Module):
    def __init__(self, cfg: GraphBlockConfig, d_e: int, d_v: int, d_u: int, rng: np.random.Generator):
        self.cfg = cfg
        H, d = cfg.n_heads, cfg.head_dim
        self.edge_site = (
            AttentionSite(d_u + d_e + d_v, d_e + d_v, d_e, d_e, H, d, rng, mapped=True) if cfg.edge_attn else None
        )
        self.phi_e = MLP(d_e + (d_e if cfg.edge_attn else 0) + 2 * d_v + d_u, cfg.edge_widths, rng)
        de2 = cfg.edge_widths[-1]
        self.e2v_site = (
            AttentionSite(d_v + de2, d_v + de2 + d_u, de2, de2, H, d, rng, mapped=False) if cfg.e2v_attn else None
        )
        self.node_site = (
            AttentionSite(d_u + de2 + d_v, d_v + de2, d_v, d_v, H, d, rng, mapped=True) if cfg.node_attn else None
        )
        self.phi_v = MLP(d_v + (d_v if cfg.node_attn else 0) + de2 + d_u, cfg.node_widths, rng)
        dv2 = cfg.node_widths[-1]
        self.e2u_site = AttentionSite(de2, d_u, de2, de2, H, d, rng, mapped=False) if cfg.e2u_attn else None
        self.v2u_site = AttentionSite(dv2, d_u, dv2, dv2, H, d, rng, mapped=False) if cfg.v2u_attn else None
        self.phi_u = MLP(dv2 + de2 + d_u, cfg.global_widths, rng)
        self.out_dims = (de2, dv2, cfg.global_widths[-1])

    # each stage below is one step of the block; __call__ runs them in order

    def edge_attention(self, g: GraphBatch, u: Tensor, V: Tensor, E: Tensor, record=None) -> Tensor:
        """Context ``z_ij`` from the edges ``(k, i)`` that feed edge ``(i, j)``."""
        a, b, via = g.eg_src, g.eg_dst, g.eg_via
        E_a = ops.gather(E, a)
        v_via = ops.gather(V, via)
        keys = ops.concat([ops.gather(u, g.edge_graph[b]), E_a, v_via])
        queries = ops.concat([ops.gather(E, b), v_via])
        alphas = self.edge_site.weights(keys, queries, b, g.n_edges)
        if record is not None:
            record.add("edge", alphas, a, b)
        return self.edge_site.context(E_a, alphas, b, g.n_edges)

    def edge_update(self, g: GraphBatch, u: Tensor, V: Tensor, E: Tensor, z: Tensor | None) -> Tensor:
        parts = [E] if z is None else [E, z]
        parts += [ops.gather(V, g.senders), ops.gather(V, g.receivers), ops.gather(u, g.edge_graph)]
        return self.phi_e(ops.concat(parts))

    def e2v_aggregate(self, g: GraphBatch, u: Tensor, V: Tensor, E2: Tensor, record=None) -> Tensor:
        rcv = g.receivers
        if self.e2v_site is None:
            return ops.segment_sum(E2, rcv, g.n_nodes)
        keys = ops.concat([ops.gather(V, g.senders), E2])
        queries = ops.concat([ops.gather(V, rcv), E2, ops.gather(u, g.edge_graph)])
        alphas = self.e2v_site.weights(keys, queries, rcv, g.n_nodes)
        if record is not None:
            record.add("e2v", alphas, np.arange(g.n_edges), rcv)
        return ops.segment_sum(self.e2v_site.weighted(E2, alphas), rcv, g.n_nodes)

    def node_attention(self, g: GraphBatch, u: Tensor, V: Tensor, E2: Tensor, ebar: Tensor, record=None) -> Tensor:
        """Context ``z_j`` from the nodes sending to ``j``."""
        snd, rcv = g.senders, g.receivers
        v_s = ops.gather(V, snd)
        keys = ops.concat([ops.gather(u, g.edge_graph), E2, v_s])
        queries = ops.concat([ops.gather(V, rcv), ops.gather(ebar, rcv)])
        alphas = self.node_site.weights(keys, queries, rcv, g.n_nodes)
        if record is not None:
            record.add("node", alphas, snd, rcv, edges=np.arange(g.n_edges))
        return self.node_site.context(v_s, alphas, rcv, g.n_nodes)

    def node_update(self, g: GraphBatch, u: Tensor, V: Tensor, ebar: Tensor, z: Tensor | None) -> Tensor:
        parts = [V] if z is None else [V, z]
        return self.phi_v(ops.concat(parts + [ebar, ops.gather(u, g.node_graph)]))

    def global_aggregate_and_update(self, g: GraphBatch, u: Tensor, V2: Tensor, E2: Tensor, record=None) -> Tensor:
        B = g.n_graphs
        if self.e2u_site is None:
            ebar_u = ops.segment_sum(E2, g.edge_graph, B)
        else:
            alphas = self.e2u_site.weights(E2, ops.gather(u, g.edge_graph), g.edge_graph, B)
            ebar_u = ops.segment_sum(self.e2u_site.weighted(E2, alphas), g.edge_graph, B)
            if record is not None:
                record.add("e2u", alphas, np.arange(g.n_edges), g.edge_graph)
        if self.v2u_site is None:
            vbar_u = ops.segment_sum(V2, g.node_graph, B)
        else:
            alphas = self.v2u_site.weights(V2, ops.gather(u, g.node_graph), g.node_graph, B)
            vbar_u = ops.segment_sum(self.v2u_site.weighted(V2, alphas), g.node_graph, B)
            if record is not None:
                record.add("v2u", alphas, np.arange(g.n_nodes), g.node_graph)
        return self.phi_u(ops.concat([vbar_u, ebar_u, u]))

    def __call__(
        self,
        g: GraphBatch,
        u: Tensor,
        V: Tensor,
        E: Tensor,
        record: AttentionWeights | None = None,
    ) -> tuple[Tensor, Tensor, Tensor]:
        z_e = self.edge_attention(g, u, V, E, record) if self.edge_site is not None else None
        E2 = self.edge_update(g, u, V, E, z_e)
        ebar = self.e2v_aggregate(g, u, V, E2, record)
        z_v = self.node_attention(g, u, V, E2, ebar, record) if self.node_site is not None else None
        V2 = self.node_update(g, u, V, ebar, z_v)
        u2 = self.global_aggregate_and_update(g, u, V2, E2, record)
        return u2, V2, E2


class NoAttentionError(ValueError):
    pass


def attn_scores(key_inputs: np.ndarray, query_input: np.ndarray, head: AttentionHead) -> np.ndarray:
    """Scaled dot-product weights of one query over a neighbourhood of keys."""
    keys = np.atleast_2d(np.asarray(key_inputs, dtype=np.float64))
    if keys.shape[0] == 0 or np.asarray(key_inputs).size == 0:
        raise DegenerateNeighborhoodError("no keys to attend over")
    q = np.repeat(np.atleast_2d(np.asarray(query_input, dtype=np.float64)), keys.shape[0], axis=0)
    s = head.scores(Tensor(keys), Tensor(q))
    return ops.masked_softmax(s, range(keys.shape[0])).data


@dataclass
class Prediction:
    node: np.ndarray
    glob: np.ndarray
    edge: np.ndarray


class GraphNetwork(Module):
    """Stacked graph blocks followed by edge, node and global decoders."""

    def __init__(
        self,
        blocks: Sequence[GraphBlockConfig],
        decode_widths: Sequence[int] = DEFAULT_DECODE_WIDTHS,
        dims: tuple[int, int, int] = (3, 1, 1),
        seed: int = 0,
    ):
        if not blocks:
            raise ValueError("need at least one graph block")
        rng = np.random.default_rng(seed)
        d_e, d_v, d_u = dims
        self.block_configs = list(blocks)
        self.blocks = []
        for cfg in self.block_configs:
            blk = GraphBlock(cfg, d_e, d_v, d_u, rng)
            self.blocks.append(blk)
            d_e, d_v, d_u = blk.out_dims
        self.decode_widths = tuple(decode_widths)
        self.edge_decoder = MLP(d_e, [*decode_widths, 1], rng, activate_last=False)
        self.node_decoder = MLP(d_v, [*decode_widths, 1], rng, activate_last=False)
        self.global_decoder = MLP(d_u, [*decode_widths, 1], rng, activate_last=False)
        self.dims = dims
        self.seed = seed

    @property
    def has_attention(self) -> bool:
        return any(c.has_attention for c in self.block_configs)

    def encode(self, g: GraphBatch, record: AttentionWeights | None = None) -> tuple[Tensor, Tensor, Tensor]:
        u, V, E = Tensor(g.u), Tensor(g.V), Tensor(g.E)
        for k, blk in enumerate(self.blocks):
            # attention weights are recorded from the first attention-bearing block only
            rec = record if record is not None and blk.cfg.has_attention and not record.sites else None
            u, V, E = blk(g, u, V, E, rec)
        return u, V, E

    def __call__(self, g: GraphBatch, record: AttentionWeights | None = None) -> tuple[Tensor, Tensor, Tensor]:
        """Decoded ``(node, global, edge)`` outputs, each a column."""
        u, V, E = self.encode(g, record)
        return self.node_decoder(V), self.global_decoder(u), self.edge_decoder(E)

    def loss(self, g: GraphBatch) -> Tensor:
        if g.node_targets is None:
            raise ValueError("batch has no targets")
        node, glob, _ = self(g)
        return ops.add(
            ops.mse(node, Tensor(g.node_targets[:, None])),
            ops.mse(glob, Tensor(g.global_targets[:, None])),
        )

    def predict(self, graphs: Sequence[WindGraph] | GraphBatch) -> Prediction:
        g = graphs if isinstance(graphs, GraphBatch) else GraphBatch.from_graphs(list(graphs))
        node, glob, edge = self(g)
        return Prediction(node.data[:, 0].copy(), glob.data[:, 0].copy(), edge.data[:, 0].copy())

    def attention(self, graph: WindGraph | GraphBatch) -> AttentionWeights:
        if not self.has_attention:
            raise NoAttentionError("model has no attention sites enabled")
        g = graph if isinstance(graph, GraphBatch) else GraphBatch.from_graphs([graph])
        rec = AttentionWeights()
        self(g, rec)
        return rec

    def config(self) -> dict:
        return {
            "blocks": [c.to_dict() for c in self.block_configs],
            "decode_widths": list(self.decode_widths),
            "dims": list(self.dims),
            "seed": self.seed,
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "GraphNetwork":
        return cls(
            [GraphBlockConfig.from_dict(b) for b in cfg["blocks"]],
            cfg["decode_widths"],
            tuple(cfg["dims"]),
            cfg["seed"],
        )


def graph_model(kind: str, seed: int = 0, widths=DEFAULT_BLOCK_WIDTHS, decode_widths=DEFAULT_DECODE_WIDTHS, n_heads: int = 3, head_dim: int = 16) -> GraphNetwork:
    return GraphNetwork(preset_blocks(kind, widths, n_heads, head_dim), decode_widths, seed=seed)

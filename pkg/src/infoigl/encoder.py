"""Graph encoder: message passing, attention redundancy filter, readout.

The encoder runs in three stages over a batch:

1. message passing (GIN by default; mean-aggregation GCN and a GAT-style
   attention aggregator are available for backbone swaps) producing node
   embeddings H;
2. the redundancy filter: per-graph QKV self-attention projected to a
   scalar node score in (0,1), and a per-destination softmax over edge
   scores, degree-rescaled and sigmoid-squashed;
3. readout: score-weighted node mean concatenated with score-weighted
   edge mean (endpoint average), mapped linearly to the graph embedding.

Per-graph attention is computed on groups of same-size graphs stacked
into 3-D tensors; message passing and pooling ride on constant sparse
matrices, so a batch costs a fixed number of tape ops regardless of how
many graphs it holds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import tensorgrad as tg
from .graphs import Batch
from .tensorgrad import Tensor

BACKBONES = ("gin", "gcn", "gat")


@dataclass
class EncoderConfig:
    d_in: int
    emb_dim: int = 64
    layers: int = 3
    backbone: str = "gin"
    dropout: float = 0.1
    leaky_slope: float = 0.2


@dataclass
class GinLayer:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    eps: Tensor
    gat_a: Tensor | None = None   # per-layer attention vector (gat backbone)


@dataclass
class EncoderParams:
    config: EncoderConfig
    gin: list[GinLayer]
    wq: Tensor
    wk: Tensor
    wv: Tensor
    score_w: Tensor
    score_b: Tensor
    edge_w1: Tensor
    edge_b1: Tensor
    edge_w2: Tensor
    edge_b2: Tensor
    readout_w: Tensor

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.gin):
            out[f"gin{i}.w1"] = layer.w1
            out[f"gin{i}.b1"] = layer.b1
            out[f"gin{i}.w2"] = layer.w2
            out[f"gin{i}.b2"] = layer.b2
            out[f"gin{i}.eps"] = layer.eps
            if layer.gat_a is not None:
                out[f"gin{i}.gat_a"] = layer.gat_a
        out.update(wq=self.wq, wk=self.wk, wv=self.wv,
                   score_w=self.score_w, score_b=self.score_b,
                   edge_w1=self.edge_w1, edge_b1=self.edge_b1,
                   edge_w2=self.edge_w2, edge_b2=self.edge_b2,
                   readout_w=self.readout_w)
        return out


def init_encoder(config: EncoderConfig, rng: np.random.Generator) -> EncoderParams:
    if config.backbone not in BACKBONES:
        raise ValueError(f"unknown backbone {config.backbone!r}, expected one of {BACKBONES}")
    d = config.emb_dim
    layers = []
    for k in range(config.layers):
        din = config.d_in if k == 0 else d
        layers.append(GinLayer(
            w1=tg.parameter(None, rng, (din, d)),
            b1=tg.parameter(np.zeros(d)),
            w2=tg.parameter(None, rng, (d, d)),
            b2=tg.parameter(np.zeros(d)),
            eps=tg.parameter(np.zeros(())),
            gat_a=tg.parameter(None, rng, (2 * din, 1)) if config.backbone == "gat" else None,
        ))
    return EncoderParams(
        config=config,
        gin=layers,
        wq=tg.parameter(None, rng, (d, d)),
        wk=tg.parameter(None, rng, (d, d)),
        wv=tg.parameter(None, rng, (d, d)),
        score_w=tg.parameter(None, rng, (d, 1)),
        score_b=tg.parameter(np.zeros(1)),
        edge_w1=tg.parameter(None, rng, (2 * d, d)),
        edge_b1=tg.parameter(np.zeros(d)),
        edge_w2=tg.parameter(None, rng, (d, 1)),
        edge_b2=tg.parameter(np.zeros(1)),
        readout_w=tg.parameter(None, rng, (2 * d, d)),
    )


# ---------------------------------------------------------------------------
# batch plan: constant sparse/index structure reused by every forward pass


class BatchPlan:
    """Precomputed constant structure for encoding one Batch."""

    def __init__(self, batch: Batch):
        self.batch = batch
        n = batch.num_nodes
        g = batch.num_graphs
        e = batch.num_edges

        # in-neighbor adjacency: row v collects sources u of edges (u -> v)
        ones = np.ones(e)
        self.adj = sp.csr_matrix((ones, (batch.edge_dst, batch.edge_src)),
                                 shape=(n, n))

        # mean-aggregation operator with self-loops (gcn backbone)
        deg = np.bincount(batch.edge_dst, minlength=n).astype(np.float64)
        inv = 1.0 / (deg + 1.0)
        self_mat = sp.diags(inv)
        neigh = sp.csr_matrix((inv[batch.edge_dst], (batch.edge_dst, batch.edge_src)),
                              shape=(n, n))
        self.mean_adj = (self_mat + neigh).tocsr()

        # node mean-pool per graph
        counts = np.diff(batch.offsets).astype(np.float64)
        self.node_pool = sp.csr_matrix(
            (np.repeat(1.0 / counts, np.diff(batch.offsets)),
             (batch.graph_index, np.arange(n))), shape=(g, n))

        # edge selection and edge mean-pool, in destination-sorted order
        order = np.lexsort((batch.edge_src, batch.edge_dst))
        self.edge_order = order
        self.edge_unsort = np.argsort(order, kind="stable")
        src_s = batch.edge_src[order]
        dst_s = batch.edge_dst[order]
        self.src_sel = sp.csr_matrix((np.ones(e), (np.arange(e), src_s)),
                                     shape=(e, n)) if e else None
        self.dst_sel = sp.csr_matrix((np.ones(e), (np.arange(e), dst_s)),
                                     shape=(e, n)) if e else None
        if e:
            boundaries = np.flatnonzero(np.diff(dst_s)) + 1
            self.seg_starts = np.concatenate([[0], boundaries])
            seg_counts = np.diff(np.append(self.seg_starts, e))
            self.indegree = np.repeat(seg_counts.astype(np.float64), seg_counts)
            edge_counts = np.diff(batch.edge_offsets).astype(np.float64)
            counts_per_edge = edge_counts[batch.edge_graph_index[order]]
            self.edge_pool = sp.csr_matrix(
                (1.0 / counts_per_edge,
                 (batch.edge_graph_index[order], np.arange(e))), shape=(g, e))
        else:
            self.seg_starts = np.zeros(0, dtype=np.intp)
            self.indegree = np.zeros(0)
            self.edge_pool = None

        # same-node-count groups for stacked attention
        sizes = np.diff(batch.offsets)
        self.groups = []  # (node index array [g*n], graphs in group, n)
        perm_parts = []
        for size in np.unique(sizes):
            members = np.flatnonzero(sizes == size)
            idx = np.concatenate(
                [np.arange(batch.offsets[m], batch.offsets[m + 1]) for m in members])
            self.groups.append((idx, len(members), int(size)))
            perm_parts.append(idx)
        self.node_perm = np.concatenate(perm_parts)
        self.node_unperm = np.argsort(self.node_perm, kind="stable")


# ---------------------------------------------------------------------------
# encoder stages


class EncodedBatch:
    """Forward results: node embeddings, invariance scores, graph embeddings.

    ``node_scores`` and ``edge_scores`` are flat tensors aligned with the
    batch's node order and original (unsorted) edge order. Scores lie
    strictly in (0,1); with the filter bypassed they are constant ones.
    """

    def __init__(self, h: Tensor, node_scores: Tensor, edge_scores: Tensor,
                 h_graph: Tensor, plan: BatchPlan):
        self.h = h
        self.node_scores = node_scores
        self.edge_scores = edge_scores
        self.h_graph = h_graph
        self.plan = plan

    def per_graph_node_scores(self, g: int) -> np.ndarray:
        lo, hi = self.plan.batch.offsets[g], self.plan.batch.offsets[g + 1]
        return self.node_scores.data[lo:hi, 0]

    def per_graph_edge_scores(self, g: int) -> np.ndarray:
        lo, hi = self.plan.batch.edge_offsets[g], self.plan.batch.edge_offsets[g + 1]
        return self.edge_scores.data[lo:hi, 0]


def _mlp(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor,
         dropout: float, rng: np.random.Generator | None) -> Tensor:
    hidden = tg.relu(tg.linear(x, w1, b1))
    if dropout > 0.0 and rng is not None:
        keep = (rng.random(hidden.shape) >= dropout) / (1.0 - dropout)
        hidden = tg.mul(hidden, tg.constant(keep))
    return tg.linear(hidden, w2, b2)


def message_passing(plan: BatchPlan, params: EncoderParams,
                    rng: np.random.Generator | None = None) -> Tensor:
    """Node embeddings after the configured stack; ReLU between layers."""
    cfg = params.config
    h = tg.constant(plan.batch.features)
    if h.shape[1] != cfg.d_in:
        raise tg.ShapeError(
            f"batch feature width {h.shape[1]} != encoder d_in {cfg.d_in}")
    dropout = cfg.dropout if rng is not None else 0.0
    for k, layer in enumerate(params.gin):
        if cfg.backbone == "gin":
            agg = tg.add(tg.spmm(plan.adj, h), tg.mul(h, tg.add(layer.eps, 1.0)))
        elif cfg.backbone == "gcn":
            agg = tg.spmm(plan.mean_adj, h)
        else:  # gat: attention-weighted neighbor sum plus self
            agg = tg.add(_gat_aggregate(plan, h, layer.gat_a, cfg.leaky_slope), h)
        h = _mlp(agg, layer.w1, layer.b1, layer.w2, layer.b2, dropout, rng)
        if k < len(params.gin) - 1:
            h = tg.relu(h)
    return h


def _gat_aggregate(plan: BatchPlan, h: Tensor, a: Tensor, slope: float) -> Tensor:
    if plan.batch.num_edges == 0:
        return tg.mul(h, 0.0)
    hs, hd = _endpoint_embeddings(plan, h)
    raw = tg.leaky_relu(tg.linear_pair(hs, hd, a), slope)
    att = tg.segment_softmax(tg.reshape(raw, (-1,)), plan.seg_starts)
    weighted = tg.mul(hs, tg.reshape(att, (-1, 1)))
    # scatter weighted sources onto destinations: dst_sel.T is exactly that map
    return tg.spmm(plan.dst_sel.T.tocsr(), weighted)


def node_attention(plan: BatchPlan, h: Tensor, params: EncoderParams) -> Tensor:
    """Per-graph QKV self-attention reduced to a scalar score per node."""
    d = params.config.emb_dim
    scale = 1.0 / math.sqrt(d)
    hp = tg.permute_rows(h, plan.node_perm)
    pieces = []
    start = 0
    for _, g, n in plan.groups:
        block = tg.reshape(tg.slice_rows(hp, start, start + g * n), (g, n, d))
        start += g * n
        q = tg.matmul(block, params.wq)
        k = tg.matmul(block, params.wk)
        v = tg.matmul(block, params.wv)
        s = tg.softmax(tg.mul(tg.matmul(q, tg.transpose(k)), scale), axis=-1)
        attended = tg.matmul(s, v)
        logits = tg.add(tg.matmul(attended, params.score_w), params.score_b)
        pieces.append(tg.reshape(logits, (g * n, 1)))
    stacked = pieces[0] if len(pieces) == 1 else tg.concat(pieces, axis=0)
    return tg.sigmoid(tg.permute_rows(stacked, plan.node_unperm))


def _endpoint_embeddings(plan: BatchPlan, h: Tensor) -> tuple[Tensor, Tensor]:
    return tg.spmm(plan.src_sel, h), tg.spmm(plan.dst_sel, h)


def edge_attention(plan: BatchPlan, h: Tensor, params: EncoderParams,
                   endpoints: tuple[Tensor, Tensor] | None = None) -> Tensor:
    """Scores per directed edge, softmax-normalized over each destination's
    in-neighborhood, rescaled by in-degree, squashed to (0,1).

    Returned in destination-sorted order (``plan.edge_order``).
    """
    if plan.batch.num_edges == 0:
        return tg.constant(np.zeros((0, 1)))
    hs, hd = endpoints if endpoints is not None else _endpoint_embeddings(plan, h)
    hidden = tg.relu(tg.linear_pair(hs, hd, params.edge_w1, params.edge_b1))
    raw = tg.leaky_relu(tg.linear(hidden, params.edge_w2, params.edge_b2),
                        params.config.leaky_slope)
    sm = tg.segment_softmax(tg.reshape(raw, (-1,)), plan.seg_starts)
    rescaled = tg.mul(sm, tg.constant(plan.indegree))
    return tg.reshape(tg.sigmoid(rescaled), (-1, 1))


def readout(plan: BatchPlan, h: Tensor, node_scores: Tensor,
            edge_scores_sorted: Tensor, params: EncoderParams,
            endpoints: tuple[Tensor, Tensor] | None = None) -> Tensor:
    """h_G = (mean_v score_v*h_v || mean_uv score_uv*(h_u+h_v)/2) @ W."""
    node_term = tg.spmm(plan.node_pool, tg.mul(node_scores, h))
    if plan.batch.num_edges:
        hs, hd = endpoints if endpoints is not None else _endpoint_embeddings(plan, h)
        h_edge = tg.mul(tg.add(hs, hd), 0.5)
        edge_term = tg.spmm(plan.edge_pool, tg.mul(edge_scores_sorted, h_edge))
    else:
        edge_term = tg.mul(node_term, 0.0)
    return tg.linear(tg.concat([node_term, edge_term], axis=1), params.readout_w)


def encode(plan: BatchPlan, params: EncoderParams,
           rng: np.random.Generator | None = None,
           bypass_filter: bool = False) -> EncodedBatch:
    """Full encoder forward pass over one planned batch.

    ``rng`` enables dropout (training mode); ``bypass_filter`` pins every
    invariance score to 1 and skips the attention computation entirely.
    """
    h = message_passing(plan, params, rng)
    endpoints = _endpoint_embeddings(plan, h) if plan.batch.num_edges else None
    if bypass_filter:
        alpha_v = tg.constant(np.ones((plan.batch.num_nodes, 1)))
        alpha_e_sorted = tg.constant(np.ones((plan.batch.num_edges, 1)))
    else:
        alpha_v = node_attention(plan, h, params)
        alpha_e_sorted = edge_attention(plan, h, params, endpoints)
    h_graph = readout(plan, h, alpha_v, alpha_e_sorted, params, endpoints)
    if plan.batch.num_edges:
        alpha_e = tg.permute_rows(alpha_e_sorted, plan.edge_unsort)
    else:
        alpha_e = alpha_e_sorted
    return EncodedBatch(h, alpha_v, alpha_e, h_graph, plan)


def encode_graphs(graphs, params: EncoderParams,
                  rng: np.random.Generator | None = None,
                  bypass_filter: bool = False) -> EncodedBatch:
    from .graphs import make_batch
    return encode(BatchPlan(make_batch(graphs)), params, rng, bypass_filter)

"""Graph and batch data model with a bit-exact JSON interchange format.

A dataset file is one UTF-8 JSON object: ``meta`` plus ``train``/``val``/
``test`` arrays of graph objects with the fixed field names ``nodes``,
``features``, ``edges``, ``label``, ``env``, ``mask``. Saving is
deterministic (sorted keys, fixed separators, repr floats), so identical
content yields identical bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class DatasetError(ValueError):
    """Malformed or inconsistent dataset content."""


@dataclass(eq=False)
class Graph:
    """One graph: dense node features, directed edge list, class label.

    Undirected graphs store both directions explicitly. ``invariance_mask``
    marks ground-truth invariant (motif) nodes when known.
    """

    num_nodes: int
    node_features: np.ndarray          # [num_nodes, d_in]
    edges: np.ndarray                  # [num_edges, 2] int, directed
    label: int
    env_id: str
    invariance_mask: np.ndarray | None = None   # [num_nodes] bool

    def __post_init__(self):
        self.node_features = np.asarray(self.node_features, dtype=np.float64)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if self.invariance_mask is not None:
            self.invariance_mask = np.asarray(self.invariance_mask, dtype=bool)

    @property
    def num_edges(self) -> int:
        return self.edges.shape[0]

    def validate(self, num_classes: int | None = None, where: str = "graph") -> None:
        if self.node_features.shape[0] != self.num_nodes:
            raise DatasetError(
                f"{where}: features rows {self.node_features.shape[0]} != nodes {self.num_nodes}")
        if self.num_edges and (self.edges.min() < 0 or self.edges.max() >= self.num_nodes):
            raise DatasetError(f"{where}: edge endpoint out of range [0, {self.num_nodes})")
        if self.num_edges and np.any(self.edges[:, 0] == self.edges[:, 1]):
            raise DatasetError(f"{where}: self-loop present")
        if self.invariance_mask is not None and self.invariance_mask.shape[0] != self.num_nodes:
            raise DatasetError(
                f"{where}: mask length {self.invariance_mask.shape[0]} != nodes {self.num_nodes}")
        if self.label < 0:
            raise DatasetError(f"{where}: negative label {self.label}")
        if num_classes is not None and self.label >= num_classes:
            raise DatasetError(
                f"{where}: label {self.label} >= class count {num_classes}")

    def __eq__(self, other) -> bool:
        if not isinstance(other, Graph):
            return NotImplemented
        mask_eq = (self.invariance_mask is None) == (other.invariance_mask is None) and (
            self.invariance_mask is None
            or np.array_equal(self.invariance_mask, other.invariance_mask))
        return (self.num_nodes == other.num_nodes
                and np.array_equal(self.node_features, other.node_features)
                and np.array_equal(self.edges, other.edges)
                and self.label == other.label
                and self.env_id == other.env_id
                and mask_eq)


@dataclass(eq=False)
class SplitMeta:
    shift: str                 # "covariate-size" | "concept-base"
    seed: int
    num_classes: int
    extra: dict = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, SplitMeta):
            return NotImplemented
        return (self.shift, self.seed, self.num_classes, self.extra) == \
            (other.shift, other.seed, other.num_classes, other.extra)


@dataclass(eq=False)
class DatasetSplit:
    train: list[Graph]
    val: list[Graph]
    test: list[Graph]
    meta: SplitMeta

    def parts(self):
        return {"train": self.train, "val": self.val, "test": self.test}

    def validate(self) -> None:
        for name, graphs in self.parts().items():
            for i, g in enumerate(graphs):
                g.validate(self.meta.num_classes, where=f"{name}[{i}]")

    def __eq__(self, other):
        if not isinstance(other, DatasetSplit):
            return NotImplemented
        return (self.meta == other.meta
                and self.train == other.train
                and self.val == other.val
                and self.test == other.test)


class Batch:
    """Padding-free concatenation of graphs for one forward pass.

    Node rows keep per-graph order; ``offsets[g]:offsets[g+1]`` addresses
    graph ``g``. Edge endpoints are re-indexed into the flat node space,
    preserving each graph's edge order.
    """

    def __init__(self, graphs: list[Graph]):
        if not graphs:
            raise DatasetError("cannot batch zero graphs")
        widths = {g.node_features.shape[1] for g in graphs}
        if len(widths) != 1:
            raise DatasetError(f"mixed feature widths in batch: {sorted(widths)}")
        self.graphs = graphs
        counts = np.array([g.num_nodes for g in graphs], dtype=np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(counts)])
        self.features = np.concatenate([g.node_features for g in graphs], axis=0)
        self.graph_index = np.repeat(np.arange(len(graphs)), counts)
        self.labels = np.array([g.label for g in graphs], dtype=np.int64)
        self.envs = [g.env_id for g in graphs]
        srcs, dsts = [], []
        edge_counts = []
        for g, off in zip(graphs, self.offsets[:-1]):
            edge_counts.append(g.num_edges)
            if g.num_edges:
                srcs.append(g.edges[:, 0] + off)
                dsts.append(g.edges[:, 1] + off)
        self.edge_src = np.concatenate(srcs) if srcs else np.zeros(0, dtype=np.int64)
        self.edge_dst = np.concatenate(dsts) if dsts else np.zeros(0, dtype=np.int64)
        self.edge_offsets = np.concatenate([[0], np.cumsum(edge_counts)])
        self.edge_graph_index = np.repeat(np.arange(len(graphs)), edge_counts)

    @property
    def num_graphs(self) -> int:
        return len(self.graphs)

    @property
    def num_nodes(self) -> int:
        return self.features.shape[0]

    @property
    def num_edges(self) -> int:
        return self.edge_src.shape[0]


def make_batch(graphs: list[Graph]) -> Batch:
    return Batch(graphs)


# ---------------------------------------------------------------------------
# JSON interchange


def _graph_to_obj(g: Graph) -> dict:
    return {
        "nodes": g.num_nodes,
        "features": g.node_features.tolist(),
        "edges": g.edges.tolist(),
        "label": int(g.label),
        "env": g.env_id,
        "mask": None if g.invariance_mask is None else [bool(b) for b in g.invariance_mask],
    }


def _graph_from_obj(obj: dict, where: str) -> Graph:
    missing = {"nodes", "features", "edges", "label", "env"} - set(obj)
    if missing:
        raise DatasetError(f"{where}: missing fields {sorted(missing)}")
    g = Graph(
        num_nodes=int(obj["nodes"]),
        node_features=np.asarray(obj["features"], dtype=np.float64).reshape(int(obj["nodes"]), -1),
        edges=np.asarray(obj["edges"], dtype=np.int64).reshape(-1, 2),
        label=int(obj["label"]),
        env_id=str(obj["env"]),
        invariance_mask=None if obj.get("mask") is None else np.asarray(obj["mask"], dtype=bool),
    )
    return g


def save_dataset(split: DatasetSplit, path) -> None:
    doc = {
        "meta": {
            "shift": split.meta.shift,
            "seed": split.meta.seed,
            "num_classes": split.meta.num_classes,
            "extra": split.meta.extra,
        },
    }
    for name, graphs in split.parts().items():
        doc[name] = [_graph_to_obj(g) for g in graphs]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))


def load_dataset(path) -> DatasetSplit:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DatasetError(
                f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    for key in ("meta", "train", "val", "test"):
        if key not in doc:
            raise DatasetError(f"{path}: missing top-level field '{key}'")
    m = doc["meta"]
    meta = SplitMeta(shift=str(m["shift"]), seed=int(m["seed"]),
                     num_classes=int(m["num_classes"]), extra=m.get("extra", {}))
    parts = {}
    for name in ("train", "val", "test"):
        parts[name] = [_graph_from_obj(obj, where=f"{path}:{name}[{i}]")
                       for i, obj in enumerate(doc[name])]
    split = DatasetSplit(parts["train"], parts["val"], parts["test"], meta)
    split.validate()
    return split


# ---------------------------------------------------------------------------
# invariance-score export


def scores_to_obj(graph_index: int, node_scores, edge_scores, mask) -> dict:
    return {
        "graph_index": int(graph_index),
        "node_scores": [float(s) for s in node_scores],
        "edge_scores": [float(s) for s in edge_scores],
        "mask": None if mask is None else [bool(b) for b in mask],
    }


def save_scores(entries: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(entries, fh, sort_keys=True, separators=(",", ":"))


def render_dot(graph: Graph, node_scores, name: str = "g") -> str:
    """Undirected DOT rendering; darker node fill = higher invariance score."""
    lines = [f"graph {name} {{", "  node [shape=circle, style=filled];"]
    for v in range(graph.num_nodes):
        s = float(node_scores[v])
        # HSV gray: brightness 1 at score 0, dark at score 1
        value = 1.0 - max(0.0, min(1.0, s))
        color = "white" if value > 0.5 else "black"
        lines.append(f'  n{v} [fillcolor="0.000 0.000 {value:.3f}", fontcolor={color}];')
    seen = set()
    for u, v in graph.edges:
        key = (min(u, v), max(u, v))
        if key not in seen:
            seen.add(key)
            lines.append(f"  n{key[0]} -- n{key[1]};")
    lines.append("}")
    return "\n".join(lines) + "\n"

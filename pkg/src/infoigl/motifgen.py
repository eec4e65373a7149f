"""Synthetic motif-shift dataset generator.

Each graph is a label-determining motif (house, cycle, crane) joined to an
environment-determining base graph (wheel, tree, ladder, star, path) by a
single bridging edge. The covariate split shifts base sizes between train
and test; the concept split correlates base type with the label during
training only. Ground-truth invariance masks flag the motif nodes.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .graphs import DatasetSplit, Graph, SplitMeta

MOTIF_NAMES = ("house", "cycle", "crane")
BASE_TYPES = ("wheel", "tree", "ladder", "star", "path")

# smallest usable base size per kind (wheel needs a 3-node rim, ladder two
# 2-node rails); the max of these bounds every size range
_BASE_MIN = {"wheel": 4, "tree": 2, "ladder": 4, "star": 2, "path": 2}
MIN_BASE_SIZE = max(_BASE_MIN.values())


class ConfigError(ValueError):
    """Invalid generator configuration."""


@dataclass
class GenConfig:
    shift: str = "covariate-size"          # or "concept-base"
    train_count: int = 6000
    val_count: int = 1000
    test_count: int = 1000
    train_size_range: tuple[int, int] = (10, 30)
    val_size_range: tuple[int, int] = (60, 90)
    test_size_range: tuple[int, int] = (60, 90)
    p_train: float = 0.9                   # concept shift: label<->base correlation
    seed: int = 0
    d_in: int = 8
    cycle_len: int = 6
    house_nodes: int = 5                   # (house_nodes-1)-cycle plus a roof apex
    crane_nodes: int = 5                   # triangle plus a (crane_nodes-3)-node tail
    num_size_bands: int = 3                # covariate env buckets per split

    def validate(self) -> None:
        if self.shift not in ("covariate-size", "concept-base"):
            raise ConfigError(f"unknown shift kind: {self.shift!r}")
        for name in ("train_size_range", "val_size_range", "test_size_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name}: empty range ({lo}, {hi})")
            if lo < MIN_BASE_SIZE:
                raise ConfigError(
                    f"{name}: minimum base size is {MIN_BASE_SIZE}, got {lo}")
        if self.shift == "covariate-size":
            tr_lo, tr_hi = self.train_size_range
            te_lo, te_hi = self.test_size_range
            if te_lo <= tr_hi:
                raise ConfigError(
                    "covariate-size: test range must be disjoint from and larger "
                    f"than train range, got train {self.train_size_range} vs "
                    f"test {self.test_size_range}")
        if not (1.0 / len(BASE_TYPES) <= self.p_train <= 1.0):
            raise ConfigError(
                f"p_train must lie in [{1.0 / len(BASE_TYPES)}, 1], got {self.p_train}")
        if self.d_in < 2:
            raise ConfigError("d_in must be >= 2 for degree one-hots")
        if self.cycle_len < 3:
            raise ConfigError("cycle_len must be >= 3")
        if self.house_nodes < 4:
            raise ConfigError("house_nodes must be >= 4")
        if self.crane_nodes < 4:
            raise ConfigError("crane_nodes must be >= 4")
        if self.num_size_bands < 1:
            raise ConfigError("num_size_bands must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        for name in ("train_size_range", "val_size_range", "test_size_range"):
            d[name] = list(d[name])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown generator fields: {sorted(unknown)}")
        kwargs = dict(d)
        for name in ("train_size_range", "val_size_range", "test_size_range"):
            if name in kwargs:
                kwargs[name] = tuple(kwargs[name])
        return cls(**kwargs)


# ---------------------------------------------------------------------------
# templates


def house_motif(num_nodes: int = 5) -> list[tuple[int, int]]:
    """(num_nodes-1)-cycle with a roof apex attached to two adjacent corners."""
    ring = num_nodes - 1
    edges = [(i, (i + 1) % ring) for i in range(ring)]
    edges += [(ring - 2, ring), (ring - 1, ring)]
    return edges


def cycle_motif(length: int = 6) -> list[tuple[int, int]]:
    return [(i, (i + 1) % length) for i in range(length)]


def crane_motif(num_nodes: int = 5) -> list[tuple[int, int]]:
    """Triangle with a trailing path of num_nodes-3 extra nodes."""
    edges = [(0, 1), (1, 2), (0, 2)]
    edges += [(i, i + 1) for i in range(2, num_nodes - 1)]
    return edges


def motif_edges(label: int, config: GenConfig) -> tuple[list[tuple[int, int]], int]:
    name = MOTIF_NAMES[label]
    if name == "house":
        return house_motif(config.house_nodes), config.house_nodes
    if name == "cycle":
        return cycle_motif(config.cycle_len), config.cycle_len
    return crane_motif(config.crane_nodes), config.crane_nodes


def base_graph(kind: str, n: int, rng: np.random.Generator | None = None
               ) -> list[tuple[int, int]]:
    """Undirected edge list of one base graph on nodes 0..n-1."""
    if kind not in _BASE_MIN:
        raise ConfigError(f"unknown base kind: {kind!r}")
    if n < _BASE_MIN[kind]:
        raise ConfigError(f"{kind} base needs >= {_BASE_MIN[kind]} nodes, got {n}")
    if kind == "wheel":
        rim = list(range(1, n))
        edges = [(rim[i], rim[(i + 1) % len(rim)]) for i in range(len(rim))]
        edges += [(0, v) for v in rim]
        return edges
    if kind == "tree":
        if rng is None:
            raise ConfigError("tree base requires an rng")
        return [(int(rng.integers(0, i)), i) for i in range(1, n)]
    if kind == "ladder":
        k = n // 2
        edges = [(i, i + 1) for i in range(k - 1)]
        edges += [(k + i, k + i + 1) for i in range(k - 1)]
        edges += [(i, k + i) for i in range(k)]
        return edges
    if kind == "star":
        return [(0, i) for i in range(1, n)]
    return [(i, i + 1) for i in range(n - 1)]  # path


# ---------------------------------------------------------------------------
# assembly


def _directed(undirected: list[tuple[int, int]]) -> np.ndarray:
    e = np.asarray(undirected, dtype=np.int64)
    return np.concatenate([e, e[:, ::-1]], axis=0)


def _degree_onehot(num_nodes: int, edges: np.ndarray, d_in: int) -> np.ndarray:
    deg = np.bincount(edges[:, 1], minlength=num_nodes)  # in-degree == degree
    feats = np.zeros((num_nodes, d_in))
    feats[np.arange(num_nodes), np.minimum(deg, d_in - 1)] = 1.0
    return feats


def _size_bands(lo: int, hi: int, bands: int) -> list[tuple[int, int]]:
    bounds = np.linspace(lo, hi + 1, bands + 1)
    out = []
    for b in range(bands):
        blo, bhi = int(np.floor(bounds[b])), int(np.ceil(bounds[b + 1])) - 1
        out.append((blo, min(bhi, hi)))
    return out


def _band_env(n: int, bands: list[tuple[int, int]]) -> str:
    for lo, hi in bands:
        if lo <= n <= hi:
            return f"size{lo}-{hi}"
    return f"size{bands[-1][0]}-{bands[-1][1]}"


def _make_graph(rng: np.random.Generator, config: GenConfig, split: str,
                size_range: tuple[int, int],
                bands: list[tuple[int, int]]) -> Graph:
    label = int(rng.integers(0, len(MOTIF_NAMES)))
    if config.shift == "concept-base":
        if split == "train" and rng.random() < config.p_train:
            base_kind = BASE_TYPES[label]
        elif split == "train":
            others = [b for b in BASE_TYPES if b != BASE_TYPES[label]]
            base_kind = others[int(rng.integers(0, len(others)))]
        else:
            base_kind = BASE_TYPES[int(rng.integers(0, len(BASE_TYPES)))]
    else:
        base_kind = BASE_TYPES[int(rng.integers(0, len(BASE_TYPES)))]

    n_base = int(rng.integers(size_range[0], size_range[1] + 1))
    if base_kind == "ladder" and n_base % 2:
        n_base -= 1
    base = base_graph(base_kind, n_base, rng)
    motif, n_motif = motif_edges(label, config)
    undirected = list(base) + [(u + n_base, v + n_base) for u, v in motif]
    bridge_base = int(rng.integers(0, n_base))
    bridge_motif = n_base + int(rng.integers(0, n_motif))
    undirected.append((bridge_base, bridge_motif))

    n = n_base + n_motif
    edges = _directed(undirected)
    mask = np.zeros(n, dtype=bool)
    mask[n_base:] = True
    env = base_kind if config.shift == "concept-base" else _band_env(n_base, bands)
    return Graph(
        num_nodes=n,
        node_features=_degree_onehot(n, edges, config.d_in),
        edges=edges,
        label=label,
        env_id=env,
        invariance_mask=mask,
    )


_SPLIT_IDS = {"train": 0, "val": 1, "test": 2}


def generate(config: GenConfig) -> DatasetSplit:
    """Deterministic dataset from the config seed alone."""
    config.validate()
    parts: dict[str, list[Graph]] = {}
    ranges = {"train": config.train_size_range, "val": config.val_size_range,
              "test": config.test_size_range}
    counts = {"train": config.train_count, "val": config.val_count,
              "test": config.test_count}
    index_ranges = {}
    next_index = 0
    for split in ("train", "val", "test"):
        bands = _size_bands(*ranges[split], config.num_size_bands)
        graphs = []
        for i in range(counts[split]):
            seq = np.random.SeedSequence(config.seed,
                                         spawn_key=(_SPLIT_IDS[split], i))
            graphs.append(_make_graph(np.random.default_rng(seq), config,
                                      split, ranges[split], bands))
        parts[split] = graphs
        index_ranges[split] = [next_index, next_index + counts[split]]
        next_index += counts[split]
    meta = SplitMeta(
        shift=config.shift,
        seed=config.seed,
        num_classes=len(MOTIF_NAMES),
        extra={"index_ranges": index_ranges, "generator": config.to_dict()},
    )
    return DatasetSplit(parts["train"], parts["val"], parts["test"], meta)

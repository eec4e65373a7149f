"""Multi-level contrastive objectives over projected graph embeddings.

Semantic level: each class keeps a refined center; instances are pulled
toward their own center and pushed from the others. Instance level:
instances are mixed toward their center (the collapse-preventing
constraint), paired with a random same-class positive, and contrasted
against the K other-class instances nearest the center.

Centers are plain arrays, refreshed outside the differentiation graph;
gradients flow only through the instance embeddings. All dot products
happen between L2-normalized vectors, so logits are bounded by 1/tau.
Instances whose class has no usable center, no positive partner, or no
negative candidate are skipped and counted, never fatal.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensorgrad as tg
from .tensorgrad import Tensor


@dataclass
class ContrastConfig:
    tau: float = 0.2            # semantic temperature
    tau_inst: float = 0.2       # instance temperature
    lambda_c: float = 0.7       # instance-constraint mix toward the center
    lambda_s: float = 0.8       # semantic loss weight
    lambda_i: float = 0.2       # instance loss weight
    num_hard_negatives: int = 10

    def validate(self) -> None:
        if self.tau <= 0 or self.tau_inst <= 0:
            raise ValueError("temperatures must be positive")
        if not 0.0 <= self.lambda_c <= 1.0:
            raise ValueError(f"lambda_c must lie in [0,1], got {self.lambda_c}")
        if self.num_hard_negatives < 1:
            raise ValueError("num_hard_negatives must be >= 1")


@dataclass
class ProjectionParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def named_parameters(self) -> dict[str, Tensor]:
        return {"proj.w1": self.w1, "proj.b1": self.b1,
                "proj.w2": self.w2, "proj.b2": self.b2}


def init_projection(d: int, rng: np.random.Generator,
                    d_out: int | None = None) -> ProjectionParams:
    d_out = d if d_out is None else d_out
    return ProjectionParams(
        w1=tg.parameter(None, rng, (d, d)),
        b1=tg.parameter(np.zeros(d)),
        w2=tg.parameter(None, rng, (d, d_out)),
        b2=tg.parameter(np.zeros(d_out)),
    )


def project(h_graph: Tensor, params: ProjectionParams) -> Tensor:
    """Two-layer MLP onto the contrast space, rows L2-normalized."""
    hidden = tg.relu(tg.linear(h_graph, params.w1, params.b1))
    return tg.l2_normalize(tg.linear(hidden, params.w2, params.b2), axis=1)


# ---------------------------------------------------------------------------
# semantic centers


class SemanticCenters:
    """One refined, L2-normalized center per class, plus a round counter.

    A class becomes ready once some batch has shown at least one of its
    instances; losses skip instances of unready classes.
    """

    def __init__(self, num_classes: int, dim: int):
        self.centers = np.zeros((num_classes, dim))
        self.ready = np.zeros(num_classes, dtype=bool)
        self.round = 0

    @property
    def num_classes(self) -> int:
        return self.centers.shape[0]

    def state_dict(self) -> dict:
        return {"centers": self.centers.tolist(), "ready": self.ready.tolist(),
                "round": self.round}

    @classmethod
    def from_state_dict(cls, d: dict) -> "SemanticCenters":
        arr = np.asarray(d["centers"], dtype=np.float64)
        out = cls(arr.shape[0], arr.shape[1])
        out.centers = arr
        out.ready = np.asarray(d["ready"], dtype=bool)
        out.round = int(d["round"])
        return out


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(norms, 1e-12)


def init_semantics(z: np.ndarray, labels: np.ndarray,
                   num_classes: int) -> SemanticCenters:
    """Class-mean centers; classes absent from the batch stay unready."""
    centers = SemanticCenters(num_classes, z.shape[1])
    for c in range(num_classes):
        members = z[labels == c]
        if len(members):
            centers.centers[c] = _normalize_rows(members.mean(axis=0))
            centers.ready[c] = True
    return centers


def update_semantics(centers: SemanticCenters, z: np.ndarray,
                     labels: np.ndarray) -> None:
    """Softmax-weighted refresh toward the batch, per present class.

    Weights are the softmax over each class's instances of their cosine
    similarity to the previous-round center; absent classes are untouched.
    """
    for c in range(centers.num_classes):
        members = np.flatnonzero(labels == c)
        if not len(members):
            continue
        if not centers.ready[c]:
            centers.centers[c] = _normalize_rows(z[members].mean(axis=0))
            centers.ready[c] = True
            continue
        zc = z[members]
        sims = _normalize_rows(zc) @ _normalize_rows(centers.centers[c])
        e = np.exp(sims - sims.max())
        m = e / e.sum()
        centers.centers[c] = _normalize_rows(m @ zc)
    centers.round += 1


# ---------------------------------------------------------------------------
# losses


def _masked_mean(per_instance: Tensor, mask: np.ndarray) -> Tensor:
    count = int(mask.sum())
    if count == 0:
        return tg.constant(np.float64(0.0))
    total = tg.tsum(tg.mul(per_instance, tg.constant(mask.astype(np.float64))))
    return tg.div(total, float(count))


def semantic_loss(z: Tensor, labels: np.ndarray, centers: SemanticCenters,
                  tau: float) -> tuple[Tensor, int]:
    """InfoNCE against class centers; returns (loss, skipped count).

    The denominator pairs the own-class term with every other ready
    class's center, all at the shared temperature.
    """
    ready = centers.ready
    usable = ready[labels]
    skipped = int((~usable).sum())
    if usable.sum() == 0 or ready.sum() < 2:
        return tg.constant(np.float64(0.0)), len(labels)
    logits = tg.div(tg.matmul(z, tg.constant(centers.centers.T)), tau)
    col_mask = ready.astype(np.float64)[None, :]
    shift = (logits.data * col_mask).max(axis=1, keepdims=True)
    expd = tg.mul(tg.exp(tg.sub(logits, tg.constant(shift))), tg.constant(col_mask))
    lse = tg.add(tg.log(tg.tsum(expd, axis=1)), tg.constant(shift[:, 0]))
    onehot = np.zeros((len(labels), centers.num_classes))
    onehot[np.arange(len(labels)), labels] = 1.0
    positive = tg.tsum(tg.mul(logits, tg.constant(onehot)), axis=1)
    per_instance = tg.sub(lse, positive)
    return _masked_mean(per_instance, usable), skipped


def instance_constraint(z: Tensor, labels: np.ndarray,
                        centers: SemanticCenters, lambda_c: float) -> Tensor:
    """z' = normalize(lambda_c z + (1-lambda_c) w_c)."""
    own = centers.centers[labels]
    mixed = tg.add(tg.mul(z, lambda_c), tg.constant((1.0 - lambda_c) * own))
    return tg.l2_normalize(mixed, axis=1)


def hard_negatives(z_prime: np.ndarray, labels: np.ndarray,
                   centers: SemanticCenters, k: int) -> dict[int, np.ndarray]:
    """Per class: indices of the K other-class instances nearest the center.

    Distance is cosine distance to the center; ties break toward the lower
    batch index; fewer than K candidates means all of them.
    """
    out = {}
    zn = _normalize_rows(z_prime)
    for c in np.unique(labels):
        if not centers.ready[c]:
            out[int(c)] = np.zeros(0, dtype=np.int64)
            continue
        cand = np.flatnonzero(labels != c)
        if not len(cand):
            out[int(c)] = np.zeros(0, dtype=np.int64)
            continue
        center = centers.centers[c] / max(np.linalg.norm(centers.centers[c]), 1e-12)
        dist = 1.0 - zn[cand] @ center
        order = np.argsort(dist, kind="stable")
        out[int(c)] = cand[order[:k]]
    return out


def sample_positives(labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """A distinct same-class partner per instance (cyclic shift of a
    seeded shuffle), or -1 when the instance is alone in its class."""
    pos = np.full(len(labels), -1, dtype=np.int64)
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        if len(members) < 2:
            continue
        shuffled = members[rng.permutation(len(members))]
        pos[shuffled] = np.roll(shuffled, -1)
    return pos


def instance_loss(z_prime: Tensor, labels: np.ndarray,
                  positives: np.ndarray, negatives: dict[int, np.ndarray],
                  tau: float) -> tuple[Tensor, int]:
    """InfoNCE between constrained instances; returns (loss, skipped count)."""
    n = len(labels)
    neg_lists = [negatives.get(int(c), np.zeros(0, dtype=np.int64)) for c in labels]
    usable = np.array([positives[i] >= 0 and len(neg_lists[i]) > 0
                       for i in range(n)])
    skipped = int((~usable).sum())
    if usable.sum() == 0:
        return tg.constant(np.float64(0.0)), skipped
    k = max(len(lst) for lst in neg_lists)
    neg_idx = np.zeros((n, k), dtype=np.int64)
    neg_mask = np.zeros((n, k))
    for i, lst in enumerate(neg_lists):
        neg_idx[i, :len(lst)] = lst
        neg_mask[i, :len(lst)] = 1.0
    pos_idx = np.where(positives >= 0, positives, 0)

    z_pos = tg.gather(z_prime, pos_idx)
    sim_pos = tg.div(tg.tsum(tg.mul(z_prime, z_pos), axis=1), tau)
    z_neg = tg.reshape(tg.gather(z_prime, neg_idx.ravel()), (n, k, -1))
    zi = tg.reshape(z_prime, (n, 1, -1))
    sim_neg = tg.div(tg.tsum(tg.mul(zi, z_neg), axis=2), tau)

    shift = np.maximum(sim_pos.data, (sim_neg.data * neg_mask).max(axis=1))
    shift_col = tg.constant(shift[:, None])
    denom = tg.add(
        tg.exp(tg.sub(sim_pos, tg.constant(shift))),
        tg.tsum(tg.mul(tg.exp(tg.sub(sim_neg, shift_col)), tg.constant(neg_mask)),
                axis=1))
    lse = tg.add(tg.log(denom), tg.constant(shift))
    per_instance = tg.sub(lse, sim_pos)
    return _masked_mean(per_instance, usable), skipped


@dataclass
class ClassifierParams:
    w: Tensor
    b: Tensor

    def named_parameters(self) -> dict[str, Tensor]:
        return {"clf.w": self.w, "clf.b": self.b}


def init_classifier(d: int, num_classes: int,
                    rng: np.random.Generator) -> ClassifierParams:
    return ClassifierParams(w=tg.parameter(None, rng, (d, num_classes)),
                            b=tg.parameter(np.zeros(num_classes)))


def classifier_logits(h_graph: Tensor, params: ClassifierParams) -> Tensor:
    return tg.linear(h_graph, params.w, params.b)


def prediction_loss(h_graph: Tensor, labels: np.ndarray,
                    params: ClassifierParams) -> Tensor:
    """Mean softmax cross-entropy of the linear classifier."""
    logits = classifier_logits(h_graph, params)
    shift = logits.data.max(axis=1, keepdims=True)
    expd = tg.exp(tg.sub(logits, tg.constant(shift)))
    lse = tg.add(tg.log(tg.tsum(expd, axis=1)), tg.constant(shift[:, 0]))
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    positive = tg.tsum(tg.mul(logits, tg.constant(onehot)), axis=1)
    return tg.tmean(tg.sub(lse, positive))


def total_loss(l_pred: Tensor, l_sem: Tensor, l_ins: Tensor,
               lambda_s: float, lambda_i: float) -> Tensor:
    """L = L_pred + lambda_s L_sem + lambda_i L_ins."""
    return tg.add(l_pred, tg.add(tg.mul(l_sem, lambda_s), tg.mul(l_ins, lambda_i)))

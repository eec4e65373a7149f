"""Metrics, per-environment evaluation, invariance alignment, and the
contrastive mutual-information-bound estimator.

Accuracy is an exact fraction; ROC-AUC uses the rank statistic with
midrank ties (macro one-vs-rest above two classes). The worst-environment
value is the minimum metric over environment groups. Alignment scores the
node invariance scores as a predictor of the ground-truth motif mask.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import tensorgrad as tg
from .contrast import classifier_logits, project
from .encoder import BatchPlan, encode
from .graphs import Graph, make_batch
from .model import Model


def accuracy(preds, labels) -> float:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if len(preds) == 0:
        raise ValueError("accuracy of empty prediction set")
    return float((preds == labels).mean())


def roc_auc_binary(scores, labels) -> float | None:
    """Rank-statistic AUC with midrank ties; None when one class is absent."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)  # average ranks = midranks
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_auc(scores, labels) -> float | None:
    """Binary AUC for 1-D scores; macro one-vs-rest for score matrices."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim == 1:
        return roc_auc_binary(scores, labels)
    parts = []
    for c in range(scores.shape[1]):
        auc = roc_auc_binary(scores[:, c], (labels == c).astype(int))
        if auc is not None:
            parts.append(auc)
    return float(np.mean(parts)) if parts else None


def worst_env(per_env: dict[str, float]) -> float:
    if not per_env:
        raise ValueError("worst_env of zero environments")
    return min(per_env.values())


def invariance_alignment(node_scores: list[np.ndarray],
                         masks: list[np.ndarray | None]) -> float | None:
    """AUC of pooled node scores against pooled boolean masks; graphs
    without a mask are skipped."""
    scores, truth = [], []
    for s, m in zip(node_scores, masks):
        if m is None:
            continue
        scores.append(np.asarray(s, dtype=np.float64))
        truth.append(np.asarray(m, dtype=int))
    if not scores:
        return None
    return roc_auc_binary(np.concatenate(scores), np.concatenate(truth))


def infonce_estimate(x: np.ndarray, y: np.ndarray, tau: float = 0.1) -> float:
    """Contrastive lower-bound estimate of I(X;Y) from K aligned pairs.

    The critic is the dot product of L2-normalized vectors over ``tau``.
    The estimate never exceeds ln K.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 2 or x.shape[0] < 2:
        raise ValueError(f"need matching [K>=2, d] arrays, got {x.shape} and {y.shape}")
    xn = x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)
    yn = y / np.maximum(np.linalg.norm(y, axis=1, keepdims=True), 1e-12)
    phi = xn @ yn.T / tau
    k = phi.shape[0]
    shift = phi.max(axis=1, keepdims=True)
    lse = np.log(np.exp(phi - shift).sum(axis=1)) + shift[:, 0]
    return float(np.mean(np.diag(phi) - lse) + np.log(k))


# ---------------------------------------------------------------------------
# model evaluation over graph lists


@dataclass
class SplitEval:
    accuracy: float
    auc: float | None
    per_env_accuracy: dict[str, float]
    worst_env_accuracy: float
    alignment_auc: float | None


def plan_chunks(graphs: list[Graph], batch_size: int = 256) -> list[BatchPlan]:
    """Precompute batch plans so repeated evaluation skips batch assembly."""
    return [BatchPlan(make_batch(graphs[lo:lo + batch_size]))
            for lo in range(0, len(graphs), batch_size)]


def predict(model: Model, graphs: list[Graph], batch_size: int = 256,
            bypass_filter: bool = False,
            plans: list[BatchPlan] | None = None):
    """Class probabilities, predictions, and per-graph node scores."""
    if plans is None:
        plans = plan_chunks(graphs, batch_size)
    probs = []
    node_scores = []
    with tg.no_grad():
        for plan in plans:
            enc = encode(plan, model.encoder, rng=None, bypass_filter=bypass_filter)
            logits = classifier_logits(enc.h_graph, model.classifier).data
            shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
            probs.append(shifted / shifted.sum(axis=1, keepdims=True))
            for g in range(plan.batch.num_graphs):
                node_scores.append(enc.per_graph_node_scores(g).copy())
    probs = np.concatenate(probs, axis=0)
    return probs, probs.argmax(axis=1), node_scores


def evaluate_split(model: Model, graphs: list[Graph], batch_size: int = 256,
                   bypass_filter: bool = False,
                   plans: list[BatchPlan] | None = None) -> SplitEval:
    probs, preds, node_scores = predict(model, graphs, batch_size, bypass_filter,
                                        plans)
    labels = np.array([g.label for g in graphs])
    envs = np.array([g.env_id for g in graphs])
    per_env = {}
    for env in sorted(set(envs)):
        sel = envs == env
        per_env[env] = accuracy(preds[sel], labels[sel])
    masks = [g.invariance_mask for g in graphs]
    return SplitEval(
        accuracy=accuracy(preds, labels),
        auc=roc_auc(probs, labels),
        per_env_accuracy=per_env,
        worst_env_accuracy=worst_env(per_env),
        alignment_auc=invariance_alignment(node_scores, masks),
    )


def split_eval_to_dict(ev: SplitEval) -> dict:
    return {
        "accuracy": ev.accuracy,
        "auc": ev.auc,
        "per_env_accuracy": ev.per_env_accuracy,
        "worst_env_accuracy": ev.worst_env_accuracy,
        "alignment_auc": ev.alignment_auc,
    }


def export_embeddings(model: Model, graphs: list[Graph], path,
                      batch_size: int = 256, bypass_filter: bool = False) -> int:
    """CSV of projected embeddings: z columns, then label and env."""
    rows = 0
    with tg.no_grad(), open(path, "w", newline="", encoding="utf-8") as fh:
        writer = None
        for lo in range(0, len(graphs), batch_size):
            chunk = graphs[lo:lo + batch_size]
            plan = BatchPlan(make_batch(chunk))
            enc = encode(plan, model.encoder, rng=None, bypass_filter=bypass_filter)
            z = project(enc.h_graph, model.projection).data
            if writer is None:
                writer = csv.writer(fh)
                writer.writerow([f"z{i}" for i in range(z.shape[1])] + ["label", "env"])
            for i, g in enumerate(chunk):
                writer.writerow([repr(v) for v in z[i]] + [g.label, g.env_id])
                rows += 1
    return rows


def export_scores(model: Model, graphs: list[Graph], batch_size: int = 256,
                  bypass_filter: bool = False) -> list[dict]:
    """Per-graph node/edge invariance scores in the interchange layout."""
    from .graphs import scores_to_obj
    entries = []
    with tg.no_grad():
        for lo in range(0, len(graphs), batch_size):
            chunk = graphs[lo:lo + batch_size]
            plan = BatchPlan(make_batch(chunk))
            enc = encode(plan, model.encoder, rng=None, bypass_filter=bypass_filter)
            for i, g in enumerate(chunk):
                entries.append(scores_to_obj(
                    lo + i, enc.per_graph_node_scores(i),
                    enc.per_graph_edge_scores(i), g.invariance_mask))
    return entries

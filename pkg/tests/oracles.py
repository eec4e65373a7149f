"""Independent oracles used by the test suite.

Everything here is deliberately written without the package's autodiff or
vectorized encoder paths: scalar loops, dense matrices, finite
differences, exhaustive sorts. Tests compare production code against
these, never the other way around.
"""

from __future__ import annotations

import math

import numpy as np


def finite_diff_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar f at x, coordinate by coordinate."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def directional_diff(f, x: np.ndarray, v: np.ndarray, h: float = 1e-5) -> float:
    """Central-difference directional derivative of scalar f along v."""
    x = np.asarray(x, dtype=np.float64)
    return (f(x + h * v) - f(x - h * v)) / (2.0 * h)


def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


# ---------------------------------------------------------------------------
# encoder oracles (dense / scalar-loop)


def dense_gin_forward(features, edges, layers, relu_between=True):
    """GIN stack on a dense adjacency: H <- MLP((1+eps) H + A_in H).

    ``layers`` is a list of (w1, b1, w2, b2, eps) numpy tuples; the MLP is
    linear->ReLU->linear. A_in[v, u] = 1 for each directed edge (u, v).
    """
    n = features.shape[0]
    a = np.zeros((n, n))
    for u, v in edges:
        a[v, u] = 1.0
    h = np.asarray(features, dtype=np.float64)
    for k, (w1, b1, w2, b2, eps) in enumerate(layers):
        agg = (1.0 + eps) * h + a @ h
        h = np.maximum(agg @ w1 + b1, 0.0) @ w2 + b2
        if relu_between and k < len(layers) - 1:
            h = np.maximum(h, 0.0)
    return h


def node_attention_oracle(h, wq, wk, wv, p, b):
    """Scalar-loop self-attention scores for one graph's node matrix."""
    n, d = h.shape
    q = h @ wq
    k = h @ wk
    v = h @ wv
    scores = np.zeros(n)
    for i in range(n):
        logits = np.array([np.dot(q[i], k[j]) for j in range(n)]) / math.sqrt(d)
        logits -= logits.max()
        e = np.exp(logits)
        s = e / e.sum()
        attended = np.zeros(d)
        for j in range(n):
            attended += s[j] * v[j]
        logit = float(np.dot(attended, p.ravel())) + float(np.asarray(b).ravel()[0])
        scores[i] = 1.0 / (1.0 + math.exp(-logit))
    return scores


def edge_attention_oracle(h, edges, w1, b1, w2, b2, slope=0.2):
    """Scalar-loop per-destination softmax edge scores, degree-rescaled,
    sigmoid-squashed. Returns scores aligned with ``edges`` order."""
    raw = []
    for u, v in edges:
        x = np.concatenate([h[u], h[v]])
        hid = np.maximum(x @ w1 + b1, 0.0)
        s = float((hid @ w2 + b2).ravel()[0])
        raw.append(s if s > 0 else slope * s)
    raw = np.array(raw)
    scores = np.zeros(len(edges))
    dsts = [v for _, v in edges]
    for v in set(dsts):
        idx = [i for i, d in enumerate(dsts) if d == v]
        logits = raw[idx] - raw[idx].max()
        e = np.exp(logits)
        sm = e / e.sum()
        for pos, i in enumerate(idx):
            rescaled = sm[pos] * len(idx)
            scores[i] = 1.0 / (1.0 + math.exp(-rescaled))
    return scores


def readout_oracle(h, node_scores, edge_scores, edges, w_read):
    """Scalar-loop score-weighted readout for a single graph."""
    n, d = h.shape
    node_term = np.zeros(d)
    for v in range(n):
        node_term += node_scores[v] * h[v]
    node_term /= n
    edge_term = np.zeros(d)
    if edges:
        for i, (u, v) in enumerate(edges):
            edge_term += edge_scores[i] * 0.5 * (h[u] + h[v])
        edge_term /= len(edges)
    return np.concatenate([node_term, edge_term]) @ w_read


def projection_oracle(h, w1, b1, w2, b2):
    """Two-layer MLP then row L2 normalization, scalar-checked."""
    out = np.maximum(h @ w1 + b1, 0.0) @ w2 + b2
    result = np.zeros_like(out)
    for i in range(out.shape[0]):
        norm = math.sqrt(float((out[i] ** 2).sum()))
        result[i] = out[i] / max(norm, 1e-12)
    return result


# ---------------------------------------------------------------------------
# contrast oracles


def semantic_update_oracle(center, zs):
    """Hand softmax-weighted center refresh for one class."""
    sims = []
    for z in zs:
        sims.append(float(np.dot(z, center) /
                          (np.linalg.norm(z) * np.linalg.norm(center))))
    sims = np.array(sims)
    e = np.exp(sims - sims.max())
    m = e / e.sum()
    w = np.zeros_like(center)
    for mi, z in zip(m, zs):
        w += mi * z
    return w / max(np.linalg.norm(w), 1e-12)


def hard_negatives_oracle(z, labels, centers, k):
    """Exhaustive-sort K-nearest other-class instances per class center."""
    out = {}
    for c in np.unique(labels):
        cand = [i for i in range(len(labels)) if labels[i] != c]
        dists = []
        for i in cand:
            cos = float(np.dot(centers[c], z[i]) /
                        (np.linalg.norm(centers[c]) * np.linalg.norm(z[i])))
            dists.append((1.0 - cos, i))
        dists.sort(key=lambda t: (t[0], t[1]))
        out[int(c)] = [i for _, i in dists[:k]]
    return out


# ---------------------------------------------------------------------------
# metric oracles


def auc_pairwise_oracle(scores, labels):
    """O(n^2) concordant-pair AUC with half-credit ties."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    if not pos or not neg:
        return None
    total = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                total += 1.0
            elif p == q:
                total += 0.5
    return total / (len(pos) * len(neg))


def gaussian_mi_analytic(dim: int, rho: float) -> float:
    """Mutual information of per-coordinate rho-correlated Gaussian pairs."""
    return -0.5 * dim * math.log(1.0 - rho * rho)


# ---------------------------------------------------------------------------
# graph utility oracles


def is_connected(num_nodes: int, edges) -> bool:
    """Traversal-based connectivity (edges treated as undirected)."""
    if num_nodes == 0:
        return True
    adj = {i: set() for i in range(num_nodes)}
    for u, v in edges:
        adj[u].add(v)
        adj[v].add(u)
    seen = {0}
    stack = [0]
    while stack:
        cur = stack.pop()
        for nxt in adj[cur]:
            if nxt not in seen:
                seen.add(nxt)
                stack.append(nxt)
    return len(seen) == num_nodes


def adam_step1_closed_form(w, g, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """First Adam update from zero moments, bias-corrected."""
    m_hat = g  # (1-beta1) g / (1-beta1)
    v_hat = g * g
    return w - lr * m_hat / (math.sqrt(v_hat) + eps)

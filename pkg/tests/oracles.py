"""Independent numerical oracles shared by the unit and acceptance tests."""

import itertools

import numpy as np

from inr_change import network as nn


def rel_err(analytic, numeric) -> float:
    a, n = np.ravel(analytic), np.ravel(numeric)
    return float(np.max(np.abs(a - n)) / max(np.max(np.abs(n)), 1e-12))


def fd_input_grad(model, V, h=1e-6):
    """Central differences of the model output w.r.t. each input coordinate."""
    V = np.atleast_2d(V)
    cols = []
    for k in range(V.shape[1]):
        e = np.zeros(V.shape[1])
        e[k] = h
        cols.append((model(V + e) - model(V - e)) / (2 * h))
    return np.stack(cols, axis=1)


def fd_param_grad(model, objective, h=1e-6):
    """Central differences of ``objective()`` over every parameter entry, in param order."""
    out = []
    for p in model.params:
        g = {}
        for name, a in p.items():
            ga = np.zeros_like(a)
            for idx in np.ndindex(a.shape):
                old = a[idx]
                a[idx] = old + h
                fp = objective()
                a[idx] = old - h
                fm = objective()
                a[idx] = old
                ga[idx] = (fp - fm) / (2 * h)
            g[name] = ga
        out.append(g)
    return out


def flatten(grads):
    return np.concatenate([g[k].ravel() for g in grads for k in sorted(g)])


def min_abs_preactivation(model, V) -> float:
    _, tape = nn.forward(model, V)
    return min(float(np.abs(z).min()) for z in tape.z if z is not None)


def kink_free_points(model, n, dim, rng, margin=1e-3, tries=10000):
    """Sample points whose pre-activations all stay at least ``margin`` away from 0."""
    pts = []
    for _ in range(tries):
        v = rng.uniform(-1, 1, (1, dim))
        if min_abs_preactivation(model, v) > margin:
            pts.append(v[0])
            if len(pts) == n:
                return np.array(pts)
    raise RuntimeError("could not find kink-free points")


def iou_bruteforce(pred, truth, cls):
    inter = union = 0
    for p, g in zip(pred, truth):
        inter += (p == cls) and (g == cls)
        union += (p == cls) or (g == cls)
    return 1.0 if union == 0 else inter / union


def auc_pair_counting(scores, positives):
    pos = [s for s, p in zip(scores, positives) if p]
    neg = [s for s, p in zip(scores, positives) if not p]
    total = 0.0
    for a, b in itertools.product(pos, neg):
        total += 1.0 if a > b else (0.5 if a == b else 0.0)
    return total / (len(pos) * len(neg))

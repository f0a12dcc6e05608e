"""Independent reference implementations used as test oracles.

Nothing here imports the code paths it checks.
"""

from __future__ import annotations

import math

import numpy as np

LD = np.longdouble


# -- neural loss, written out per item in extended precision -----------------

def _act(a, kind):
    return np.tanh(a) if kind == "tanh" else a


def _sig(a):
    return LD(1) / (LD(1) + np.exp(-a))


def reference_loss(params, activations, tau, loss_weights, windows, current):
    """Loss of one batch, looping over items and time steps in float128."""
    P = {k: np.asarray(v, dtype=LD) for k, v in params.items()}
    a1, a2, a3 = (LD(a) for a in loss_weights)

    def stack(prefix, x):
        for k, kind in enumerate(activations[prefix]):
            x = _act(P[f"{prefix}.{k}.W"] @ x + P[f"{prefix}.{k}.b"], kind)
        return x

    H = P["lstm.bi"].shape[0]
    total = LD(0)
    for w, xt in zip(np.asarray(windows, dtype=LD), np.asarray(current, dtype=LD)):
        z = stack("enc", w.reshape(-1))
        h = np.zeros(H, dtype=LD)
        c = np.zeros(H, dtype=LD)
        for s in range(tau):
            inp = np.concatenate([w[s], h])
            i = _sig(P["lstm.Wi"] @ inp + P["lstm.bi"])
            f = _sig(P["lstm.Wf"] @ inp + P["lstm.bf"])
            o = _sig(P["lstm.Wo"] @ inp + P["lstm.bo"])
            g = np.tanh(P["lstm.Wg"] @ inp + P["lstm.bg"])
            c = f * c + i * g
            h = o * np.tanh(c)
        zn = stack("trans", np.concatenate([z, h]))
        total += a1 * np.sum((stack("dec", z) - w[-1]) ** 2)
        total += a2 * np.sum((stack("dec", zn) - xt) ** 2)
        total += a3 * np.sum((zn - z) ** 2)
    return total


def central_differences(params, loss_fn, step=1e-5):
    """Central-difference gradient of ``loss_fn(params)`` for every coordinate."""
    out = {}
    for name, p in params.items():
        g = np.zeros(p.shape)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + step
            lp = loss_fn(params)
            p[idx] = old - step
            lm = loss_fn(params)
            p[idx] = old
            g[idx] = float((lp - lm) / (LD(2) * LD(step)))
        out[name] = g
    return out


# -- Kalman filter ------------------------------------------------------------

def kalman_1d(mu, P, a, c, q, r, x):
    """Scalar Kalman step; returns (post mean, post var, pred obs mean, pred obs var)."""
    mu_p = a * mu
    P_p = a * P * a + q
    S = c * P_p * c + r
    K = P_p * c / S
    return mu_p + K * (x - c * mu_p), (1 - K * c) * P_p, c * mu_p, S


# -- evaluation metrics ---------------------------------------------------------

def brute_point_adjust(pred, labels):
    pred = [int(p) for p in pred]
    labels = [int(v) for v in labels]
    out = list(pred)
    i = 0
    n = len(labels)
    while i < n:
        if labels[i] == 1:
            j = i
            while j < n and labels[j] == 1:
                j += 1
            if any(pred[i:j]):
                for k in range(i, j):
                    out[k] = 1
            i = j
        else:
            i += 1
    return out


def brute_counts(pred, labels):
    tp = fp = fn = tn = 0
    for p, y in zip(pred, labels):
        if p and y:
            tp += 1
        elif p and not y:
            fp += 1
        elif not p and y:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def brute_f1(tp, fp, fn, tn):
    d = 2 * tp + fp + fn
    return 0.0 if d == 0 else 2 * tp / d


def brute_mcc(tp, fp, fn, tn):
    d = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    return 0.0 if d == 0 else (tp * tn - fp * fn) / math.sqrt(d)


def brute_threshold_search(scores, labels, metric):
    """Try every distinct score plus +inf; ties go to the larger threshold."""
    best = None
    for thr in sorted(set(float(s) for s in scores)) + [math.inf]:
        pred = [1 if s >= thr else 0 for s in scores]
        counts = brute_counts(brute_point_adjust(pred, labels), labels)
        value = brute_f1(*counts) if metric == "f1" else brute_mcc(*counts)
        if best is None or value >= best[1]:
            best = (thr, value)
    return best

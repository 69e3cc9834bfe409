"""Literal reference implementations used only by tests.

Every function here is written in the most direct form possible (scalar
loops, ``math`` functions) and shares no code with the package's real
implementations, so agreement between the two is evidence of correctness
rather than of shared bugs.
"""

from __future__ import annotations

import math


def fd_gradient(f, x, h: float = 1e-4):
    """Central-difference gradient of scalar ``f`` with respect to array ``x``.

    ``x`` is modified in place during probing and restored afterwards.
    """
    import numpy as np

    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f())
        flat[i] = orig - h
        fm = float(f())
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def oracle_cox_loss(times, events, risks) -> float:
    """Negative log partial likelihood, summed over events, Breslow ties.

    For each subject i with an event, the risk set is every subject whose
    observed time is >= t_i.
    """
    total = 0.0
    n = len(times)
    for i in range(n):
        if not events[i]:
            continue
        denom = 0.0
        for j in range(n):
            if times[j] >= times[i]:
                denom += math.exp(risks[j])
        total += math.log(denom) - risks[i]
    return total


def oracle_coxgrad(times, events, risks, h: float = 1e-6):
    """Finite-difference gradient of ``oracle_cox_loss`` wrt the risks."""
    grad = []
    base = list(risks)
    for k in range(len(base)):
        hi = list(base)
        lo = list(base)
        hi[k] += h
        lo[k] -= h
        grad.append((oracle_cox_loss(times, events, hi)
                     - oracle_cox_loss(times, events, lo)) / (2.0 * h))
    return grad


def oracle_cindex(times, events, risks) -> float:
    """Concordance by full pair enumeration.

    Pair (i, j) is comparable iff t_i < t_j and subject i had an event.
    Concordant when risk_i > risk_j; tied risks count 0.5.
    """
    concordant = 0.0
    comparable = 0
    n = len(times)
    for i in range(n):
        for j in range(n):
            if times[i] < times[j] and events[i]:
                comparable += 1
                if risks[i] > risks[j]:
                    concordant += 1.0
                elif risks[i] == risks[j]:
                    concordant += 0.5
    if comparable == 0:
        raise ValueError("no comparable pairs")
    return concordant / comparable


def oracle_conv(x, w, b, stride: int, pads) -> "list":
    """Direct-loop 2-D cross-correlation.

    ``x``: N x C x H x W nested lists or array, ``w``: O x C x kh x kw,
    ``pads``: (top, bottom, left, right) explicit zero padding.
    """
    pt, pb, pl, pr = pads
    N = len(x)
    C = len(x[0])
    H = len(x[0][0])
    W = len(x[0][0][0])
    O = len(w)
    kh = len(w[0][0])
    kw = len(w[0][0][0])
    Hp, Wp = H + pt + pb, W + pl + pr
    outH = (Hp - kh) // stride + 1
    outW = (Wp - kw) // stride + 1
    out = [[[[0.0] * outW for _ in range(outH)] for _ in range(O)] for _ in range(N)]
    for n in range(N):
        for o in range(O):
            for oi in range(outH):
                for oj in range(outW):
                    acc = 0.0 if b is None else float(b[o])
                    for c in range(C):
                        for di in range(kh):
                            for dj in range(kw):
                                si = oi * stride + di - pt
                                sj = oj * stride + dj - pl
                                if 0 <= si < H and 0 <= sj < W:
                                    acc += float(x[n][c][si][sj]) * float(w[o][c][di][dj])
                    out[n][o][oi][oj] = acc
    return out


def oracle_km(times, events):
    """Product-limit estimator: returns (event_times, survival) lists."""
    n = len(times)
    distinct = sorted({times[i] for i in range(n) if events[i]})
    surv = []
    s = 1.0
    for t in distinct:
        at_risk = 0
        died = 0
        for j in range(n):
            if times[j] >= t:
                at_risk += 1
            if times[j] == t and events[j]:
                died += 1
        s = s * (1.0 - died / at_risk)
        surv.append(s)
    return distinct, surv


def oracle_eq9(cluster_patches: dict, weight: float):
    """Weighted nested mean: patches -> cluster means -> patient vector.

    ``cluster_patches`` maps cluster id -> list of patch feature vectors.
    """
    cluster_ids = sorted(cluster_patches)
    dim = len(next(iter(cluster_patches.values()))[0])
    outer = [0.0] * dim
    for cid in cluster_ids:
        patches = cluster_patches[cid]
        for m in range(dim):
            s = 0.0
            for vec in patches:
                s += float(vec[m])
            outer[m] += s / len(patches)
    return [weight * v / len(cluster_ids) for v in outer]


def _sig(v: float) -> float:
    if v >= 0:
        return 1.0 / (1.0 + math.exp(-v))
    e = math.exp(v)
    return e / (1.0 + e)


def oracle_channel_gate(x, w1, b1, w2, b2):
    """Loop form of the channel attention map: sigmoid(MLP(avg) + MLP(max)).

    ``x``: N x C x H x W array; MLP weights are (in, out) matrices. Returns
    an N x C nested list of gate values.
    """
    N, C = len(x), len(x[0])
    H, W = len(x[0][0]), len(x[0][0][0])
    hidden = len(w1[0])

    def mlp(vec):
        h = []
        for q in range(hidden):
            a = float(b1[q])
            for c in range(C):
                a += float(vec[c]) * float(w1[c][q])
            h.append(max(a, 0.0))
        out = []
        for c in range(C):
            a = float(b2[c])
            for q in range(hidden):
                a += h[q] * float(w2[q][c])
            out.append(a)
        return out

    gates = []
    for n in range(N):
        avg = []
        mx = []
        for c in range(C):
            s = 0.0
            m = float(x[n][c][0][0])
            for i in range(H):
                for j in range(W):
                    v = float(x[n][c][i][j])
                    s += v
                    if v > m:
                        m = v
            avg.append(s / (H * W))
            mx.append(m)
        pa, pm = mlp(avg), mlp(mx)
        gates.append([_sig(pa[c] + pm[c]) for c in range(C)])
    return gates


def oracle_spatial_gate(x, w, b):
    """Loop form of the spatial attention map.

    Channel-mean and channel-max maps are concatenated and convolved with a
    single 7x7 kernel ``w`` (2 input channels, bias ``b``), padding 3, then
    passed through a sigmoid. Returns N x H x W nested lists.
    """
    N, C = len(x), len(x[0])
    H, W = len(x[0][0]), len(x[0][0][0])
    k = len(w[0][0])
    pad = (k - 1) // 2
    gates = []
    for n in range(N):
        avg = [[0.0] * W for _ in range(H)]
        mx = [[0.0] * W for _ in range(H)]
        for i in range(H):
            for j in range(W):
                s = 0.0
                m = float(x[n][0][i][j])
                for c in range(C):
                    v = float(x[n][c][i][j])
                    s += v
                    if v > m:
                        m = v
                avg[i][j] = s / C
                mx[i][j] = m
        plane = [[0.0] * W for _ in range(H)]
        for i in range(H):
            for j in range(W):
                acc = float(b[0])
                for di in range(k):
                    for dj in range(k):
                        si, sj = i + di - pad, j + dj - pad
                        if 0 <= si < H and 0 <= sj < W:
                            acc += avg[si][sj] * float(w[0][0][di][dj])
                            acc += mx[si][sj] * float(w[0][1][di][dj])
                plane[i][j] = _sig(acc)
        gates.append(plane)
    return gates


def oracle_feature_gate(x, w1, b1, w2, b2):
    """Loop form of the flat-feature attention gate: sigmoid(MLP(x))."""
    N, F = len(x), len(x[0])
    hidden = len(w1[0])
    gates = []
    for n in range(N):
        h = []
        for q in range(hidden):
            a = float(b1[q])
            for f in range(F):
                a += float(x[n][f]) * float(w1[f][q])
            h.append(max(a, 0.0))
        row = []
        for f in range(F):
            a = float(b2[f])
            for q in range(hidden):
                a += h[q] * float(w2[q][f])
            row.append(_sig(a))
        gates.append(row)
    return gates


def oracle_td_auc(times, events, risks, horizon: float) -> float:
    """Case/control pair AUC at a horizon, ties counted 0.5.

    Cases: event with time <= horizon. Controls: time > horizon.
    """
    cases = [risks[i] for i in range(len(times)) if events[i] and times[i] <= horizon]
    controls = [risks[i] for i in range(len(times)) if times[i] > horizon]
    if not cases or not controls:
        raise ValueError("need at least one case and one control")
    score = 0.0
    for rc in cases:
        for rk in controls:
            if rc > rk:
                score += 1.0
            elif rc == rk:
                score += 0.5
    return score / (len(cases) * len(controls))

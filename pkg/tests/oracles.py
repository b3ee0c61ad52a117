"""Independent reference implementations used to cross-check the library.

Everything here is written in deliberately plain loop style — scalar math,
python lists, explicit index arithmetic — so agreement with the vectorized
library code is a meaningful check rather than a tautology.
"""

import math

import numpy as np


def conv1x1_loop(x, w, b=None):
    """Per-pixel matrix-vector products."""
    bs, ci, hh, ww = x.shape
    co = w.shape[0]
    out = np.zeros((bs, co, hh, ww))
    for n in range(bs):
        for o in range(co):
            for y in range(hh):
                for xx in range(ww):
                    acc = 0.0
                    for i in range(ci):
                        acc += w[o][i] * x[n][i][y][xx]
                    if b is not None:
                        acc += b[o]
                    out[n][o][y][xx] = acc
    return out


def matmul_loop(a, b):
    """Triple loop over the trailing two axes, outer loop over batch cells."""
    lead = a.shape[:-2]
    m, k = a.shape[-2:]
    n = b.shape[-1]
    out = np.zeros(lead + (m, n))
    for idx in np.ndindex(*lead) if lead else [()]:
        for i in range(m):
            for j in range(n):
                acc = 0.0
                for t in range(k):
                    acc += a[idx + (i, t)] * b[idx + (t, j)]
                out[idx + (i, j)] = acc
    return out


def softmax_row(row):
    """Scalar exp-normalize of one sequence."""
    mx = max(row)
    exps = [math.exp(v - mx) for v in row]
    total = sum(exps)
    return [e / total for e in exps]


def batchnorm_stats(x):
    """Direct per-channel mean and biased variance over (batch, H, W)."""
    bs, c, hh, ww = x.shape
    means, variances = [], []
    for ch in range(c):
        vals = []
        for n in range(bs):
            for y in range(hh):
                for xx in range(ww):
                    vals.append(x[n][ch][y][xx])
        m = sum(vals) / len(vals)
        v = sum((s - m) ** 2 for s in vals) / len(vals)
        means.append(m)
        variances.append(v)
    return means, variances


def _bn_loop(x, gamma, beta, eps):
    """Train-mode batchnorm via the direct statistics above."""
    means, variances = batchnorm_stats(x)
    out = np.zeros_like(x)
    bs, c, hh, ww = x.shape
    for ch in range(c):
        scale = gamma[ch] / math.sqrt(variances[ch] + eps)
        for n in range(bs):
            for y in range(hh):
                for xx in range(ww):
                    out[n][ch][y][xx] = (x[n][ch][y][xx] - means[ch]) * scale + beta[ch]
    return out


def attention4d_loop(x, p):
    """Whole attention block recomputed with per-token double loops.

    Mirrors the documented dataflow: conv+BN projections, per-head token
    dot products scaled and biased, pre/post head mixing, scalar softmax,
    weighted value sums, output conv+BN, optional residual.
    """
    cfg = p.cfg
    bs, c, hh, ww = x.shape
    heads, d, dv = cfg.heads, cfg.key_dim, cfg.value_dim
    hw = hh * ww

    def project(w, bn):
        y = conv1x1_loop(x, w.data)
        return _bn_loop(y, bn.gamma.data, bn.beta.data, bn.eps)

    q = project(p.w_q, p.bn_q).reshape(bs, heads, d, hw)
    k = project(p.w_k, p.bn_k).reshape(bs, heads, d, hw)
    v = project(p.w_v, p.bn_v).reshape(bs, heads, dv, hw)

    logits = np.zeros((bs, heads, hw, hw))
    for n in range(bs):
        for h in range(heads):
            for i in range(hw):
                for j in range(hw):
                    acc = 0.0
                    for ch in range(d):
                        acc += q[n][h][ch][i] * k[n][h][ch][j]
                    logits[n][h][i][j] = cfg.scale * acc + p.pos_bias.data[h][i][j]

    mixed = np.zeros_like(logits)
    for n in range(bs):
        for g in range(heads):
            for i in range(hw):
                for j in range(hw):
                    acc = 0.0
                    for h in range(heads):
                        acc += p.t_pre.data[g][h] * logits[n][h][i][j]
                    mixed[n][g][i][j] = acc

    attn = np.zeros_like(mixed)
    for n in range(bs):
        for h in range(heads):
            for i in range(hw):
                attn[n][h][i] = softmax_row(list(mixed[n][h][i]))

    attn2 = np.zeros_like(attn)
    for n in range(bs):
        for g in range(heads):
            for i in range(hw):
                for j in range(hw):
                    acc = 0.0
                    for h in range(heads):
                        acc += p.t_post.data[g][h] * attn[n][h][i][j]
                    attn2[n][g][i][j] = acc

    tokens = np.zeros((bs, heads, dv, hw))
    for n in range(bs):
        for h in range(heads):
            for ch in range(dv):
                for i in range(hw):
                    acc = 0.0
                    for j in range(hw):
                        acc += attn2[n][h][i][j] * v[n][h][ch][j]
                    tokens[n][h][ch][i] = acc

    y = tokens.reshape(bs, heads * dv, hh, ww)
    y = conv1x1_loop(y, p.w_out.data)
    y = _bn_loop(y, p.bn_out.gamma.data, p.bn_out.beta.data, p.bn_out.eps)
    return x + y if cfg.residual else y


def assign_oracle(cost, iou, candidates, cap):
    """Exhaustive-sort restatement of the dynamic assignment rule.

    Returns (owner dict anchor->gt, k dict gt->k, sorted unassigned gt list).
    """
    num_gt = len(cost)
    num_anchors = len(cost[0]) if num_gt else 0
    selected = {}
    ks = {}
    unassigned = []
    for g in range(num_gt):
        cand = [a for a in range(num_anchors) if candidates[g][a]]
        if not cand:
            selected[g] = []
            unassigned.append(g)
            continue
        top = sorted((iou[g][a] for a in cand), reverse=True)[:min(cap, len(cand))]
        k = int(math.floor(sum(top) + 0.5))
        k = max(1, min(k, len(cand)))
        ks[g] = k
        ranked = sorted(cand, key=lambda a: (cost[g][a], a))
        selected[g] = ranked[:k]

    owner = {}
    for a in range(num_anchors):
        claimants = [g for g in range(num_gt) if a in selected[g]]
        if claimants:
            owner[a] = min(claimants, key=lambda g: (cost[g][a], g))

    held = {g: sorted(a for a in owner if owner[a] == g) for g in range(num_gt)}
    for g in range(num_gt):
        cand = [a for a in range(num_anchors) if candidates[g][a]]
        if not cand or held[g]:
            continue
        ranked = sorted(cand, key=lambda a: (cost[g][a], a))
        free = [a for a in ranked if a not in owner]
        if free:
            a = free[0]
        else:
            rich = [a for a in ranked if len(held[owner[a]]) >= 2]
            if not rich:
                unassigned.append(g)
                continue
            a = rich[0]
            held[owner[a]].remove(a)
        owner[a] = g
        held[g].append(a)
    return owner, ks, sorted(unassigned)


def ap_101_reference(tp_flags, num_gt):
    """Plain-python 101-point interpolated AP."""
    if num_gt == 0:
        return -1.0
    precisions, recalls = [], []
    tp = 0
    for rank, flag in enumerate(tp_flags, start=1):
        tp += 1 if flag else 0
        precisions.append(tp / rank)
        recalls.append(tp / num_gt)
    for i in range(len(precisions) - 2, -1, -1):
        precisions[i] = max(precisions[i], precisions[i + 1])
    total = 0.0
    for pt in range(101):
        r = pt / 100.0
        p = 0.0
        for rec, prec in zip(recalls, precisions):
            if rec >= r - 1e-12:
                p = prec
                break
        total += p
    return total / 101.0

"""Slow, independent reference implementations used as test oracles."""
import math

import numpy as np


def inside(p, box):
    """Rotate the offset into the box frame, compare against half extents."""
    dx, dy, dz = (p[i] - box.center[i] for i in range(3))
    c, s = math.cos(-box.yaw), math.sin(-box.yaw)
    lx, ly = c * dx - s * dy, s * dx + c * dy
    h = box.size / 2 + 1e-9
    return abs(lx) <= h[0] and abs(ly) <= h[1] and abs(dz) <= h[2]


def naive_weights(points, boxes, feats, sigma):
    """{(e, j): w} by explicit double loop over boxes and points."""
    out = {}
    for j, box in enumerate(boxes):
        members = [e for e in range(len(points)) if inside(points[e], box)]
        units = [feats[e] / math.sqrt(sum(x * x for x in feats[e])) for e in members
                 if any(x != 0 for x in feats[e])]
        if not units:
            continue
        mean = [sum(u[k] for u in units) / len(units) for k in range(len(units[0]))]
        wbox = min(1.0, math.sqrt(sum(m * m for m in mean)))
        for e in members:
            d2 = sum((points[e][i] - box.center[i]) ** 2 for i in range(3))
            out[(e, j)] = wbox * math.exp(-d2 / (2 * sigma * sigma))
    return out


def naive_match(dets, gts, iou_fn, thr):
    """dets: list of (score, box). Returns TP flags in score order
    (descending, stable) by scanning every free GT for every detection."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][0], i))
    used = [False] * len(gts)
    flags = []
    for i in order:
        best, best_k = -1.0, None
        for k, g in enumerate(gts):
            if used[k]:
                continue
            v = iou_fn(dets[i][1], g)
            if v > best:
                best, best_k = v, k
        if best_k is not None and best >= thr:
            used[best_k] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def naive_ap(flags, n_gt):
    """All-point interpolated AP: sum over recall steps of max precision
    at recall >= that step."""
    tp = fp = 0
    pr = []
    for f in flags:
        tp += f
        fp += not f
        pr.append((tp / n_gt, tp / (tp + fp)))
    ap, prev_r = 0.0, 0.0
    for i, (r, _) in enumerate(pr):
        if r > prev_r:
            ap += (r - prev_r) * max(p for rr, p in pr[i:])
            prev_r = r
    return ap


def brute_assign(locations, boxes, k):
    """Center assignment by exhaustive candidate listing."""
    claims = {}
    for j, box in enumerate(boxes):
        cands = sorted((float(np.linalg.norm(locations[m] - box.center)), m)
                       for m in range(len(locations)) if inside(locations[m], box))
        for d, m in cands[:k]:
            claims.setdefault(m, []).append((d, box.volume, j))
    out = np.full(len(locations), -1)
    for m, cs in claims.items():
        out[m] = min(cs)[2]
    return out


def ema_chain(values, mu, imprint=True):
    t = None
    for v in values:
        v = np.asarray(v, dtype=np.float64)
        if t is None:
            t = v.copy() if imprint else (1 - mu) * v
        else:
            t = mu * t + (1 - mu) * v
    return t


def fd_gradients(loss_fn, params, h=1e-4):
    """Central differences of ``loss_fn()`` w.r.t. every entry of every
    array in ``params`` (arrays are perturbed in place and restored)."""
    out = {}
    for name, p in params.items():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = loss_fn()
            p[idx] = old - h
            down = loss_fn()
            p[idx] = old
            g[idx] = (up - down) / (2 * h)
        out[name] = g
    return out


def max_relative_error(analytic, numeric, floor=1e-6):
    worst = 0.0
    for k in analytic:
        a, n = analytic[k], numeric[k]
        worst = max(worst, float(np.max(np.abs(a - n) / np.maximum(floor, np.maximum(np.abs(a), np.abs(n))), initial=0)))
    return worst

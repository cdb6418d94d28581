"""Independent scalar-loop reference implementations used by the tests."""
from __future__ import annotations

import math

import numpy as np


def world_to_voxel_loop(p, lo, size, dims):
    out = []
    for axis, (c, l, n) in enumerate(zip(p, lo, dims)):
        i = math.floor((c - l) / size)
        # exact half-open membership
        if l + (i + 1) * size <= c:
            i += 1
        if l + i * size > c:
            i -= 1
        if i < 0 or i >= n:
            return None
        out.append(i)
    return tuple(out)


def softmax_vec(v):
    m = max(v)
    e = [math.exp(x - m) for x in v]
    s = sum(e)
    return [x / s for x in e]


def ce_loop(logits, gt, ignore):
    """logits (C, Z, H, W), gt (Z, H, W)."""
    C = logits.shape[0]
    tot, n = 0.0, 0
    for idx in np.ndindex(gt.shape):
        g = int(gt[idx])
        if g in ignore:
            continue
        v = [float(logits[(c,) + idx]) for c in range(C)]
        m = max(v)
        lse = m + math.log(sum(math.exp(x - m) for x in v))
        tot += lse - v[g]
        n += 1
    return tot / n if n else 0.0


def _prs(p, t, eps):
    terms = 0.0
    inter = sum(a * b for a, b in zip(p, t))
    sp, st = sum(p), sum(t)
    if sp > 0:
        terms += -math.log(max(inter / sp, eps))
    if st > 0:
        terms += -math.log(max(inter / st, eps))
    neg = [1.0 - b for b in t]
    sn = sum(neg)
    if sn > 0:
        spec = sum((1.0 - a) * b for a, b in zip(p, neg)) / sn
        terms += -math.log(max(spec, eps))
    return terms


def scal_loop(probs, gt, mode, ignore, n_logits, empty=0, eps=1e-6):
    """probs (C, Z, H, W) for one sample."""
    items = [idx for idx in np.ndindex(gt.shape) if int(gt[idx]) not in ignore]
    if mode == "geo":
        p = [1.0 - float(probs[(empty,) + i]) for i in items]
        t = [0.0 if int(gt[i]) == empty else 1.0 for i in items]
        return _prs(p, t, eps)
    losses = []
    for c in range(n_logits):
        t = [1.0 if int(gt[i]) == c else 0.0 for i in items]
        if sum(t) == 0:
            continue
        p = [float(probs[(c,) + i]) for i in items]
        losses.append(_prs(p, t, eps))
    return sum(losses) / len(losses) if losses else 0.0


def cmrd_loop(proj, teacher, mask, eps=1e-8):
    """(C, H, W) maps, (H, W) mask: mean of 1 - cos over masked pillars."""
    C, H, W = proj.shape
    tot, n = 0.0, 0
    for u in range(H):
        for v in range(W):
            if not mask[u, v]:
                continue
            a = [float(proj[c, u, v]) for c in range(C)]
            b = [float(teacher[c, u, v]) for c in range(C)]
            na = max(math.sqrt(sum(x * x for x in a)), eps)
            nb = max(math.sqrt(sum(x * x for x in b)), eps)
            tot += 1.0 - sum(x * y for x, y in zip(a, b)) / (na * nb)
            n += 1
    return tot / n if n else 0.0


def affinity_loop(f, eps=1e-8):
    C, H, W = f.shape
    vecs = [[float(f[c, u, v]) for c in range(C)] for u in range(H) for v in range(W)]
    norms = [max(math.sqrt(sum(x * x for x in a)), eps) for a in vecs]
    K = len(vecs)
    A = np.zeros((K, K))
    for i in range(K):
        for j in range(K):
            A[i, j] = sum(x * y for x, y in zip(vecs[i], vecs[j])) / (norms[i] * norms[j])
    return A


def bilinear_loop(f, out_hw):
    """Half-pixel-center bilinear resize (edge clamped) of a (C, H, W) array."""
    C, H, W = f.shape
    Ho, Wo = out_hw
    out = np.zeros((C, Ho, Wo))

    def coords(n_out, n_in):
        res = []
        for i in range(n_out):
            x = (i + 0.5) * n_in / n_out - 0.5
            x = max(x, 0.0)
            i0 = min(int(math.floor(x)), n_in - 1)
            i1 = min(i0 + 1, n_in - 1)
            res.append((i0, i1, x - i0))
        return res

    for c in range(C):
        for i, (y0, y1, wy) in enumerate(coords(Ho, H)):
            for j, (x0, x1, wx) in enumerate(coords(Wo, W)):
                out[c, i, j] = ((1 - wy) * ((1 - wx) * f[c, y0, x0] + wx * f[c, y0, x1])
                                + wy * ((1 - wx) * f[c, y1, x0] + wx * f[c, y1, x1]))
    return out


def brd_loop(fs, ft, size):
    a = affinity_loop(bilinear_loop(fs, size) if fs.shape[1:] != tuple(size) else fs)
    b = affinity_loop(bilinear_loop(ft, size) if ft.shape[1:] != tuple(size) else ft)
    K = a.shape[0]
    return sum(abs(a[i, j] - b[i, j]) for i in range(K) for j in range(K)) / (K * K)


def kl_loop(ys, yt, reverse=False):
    """(C, ...) logits: voxel mean of sum_c s log(s / t)."""
    C = ys.shape[0]
    tot, n = 0.0, 0
    for idx in np.ndindex(ys.shape[1:]):
        s = softmax_vec([float(ys[(c,) + idx]) for c in range(C)])
        t = softmax_vec([float(yt[(c,) + idx]) for c in range(C)])
        if reverse:
            s, t = t, s
        tot += sum(a * math.log(a / b) for a, b in zip(s, t) if a > 0)
        n += 1
    return tot / n


def confusion_loop(pred, gt, sem_ids, ignore):
    tp = {c: 0 for c in sem_ids}
    fp = dict(tp)
    fn = dict(tp)
    occ = [0, 0, 0]
    for idx in np.ndindex(gt.shape):
        g, p = int(gt[idx]), int(pred[idx])
        if g in ignore:
            continue
        for c in sem_ids:
            if g == c and p == c:
                tp[c] += 1
            elif p == c:
                fp[c] += 1
            elif g == c:
                fn[c] += 1
        go, po = g in sem_ids, p in sem_ids
        if go and po:
            occ[0] += 1
        elif po:
            occ[1] += 1
        elif go:
            occ[2] += 1
    return ([tp[c] for c in sem_ids], [fp[c] for c in sem_ids], [fn[c] for c in sem_ids], occ)


def mask_loop(labels, scale, empty=0, noise=6):
    Z, H, W = labels.shape
    m0 = np.zeros((H, W), dtype=bool)
    for u in range(H):
        for v in range(W):
            for z in range(Z):
                lab = int(labels[z, u, v])
                if lab != empty and lab != noise:
                    m0[u, v] = True
                    break
    k = 2 ** scale
    out = np.zeros((H // k, W // k), dtype=bool)
    for u in range(H // k):
        for v in range(W // k):
            hit = False
            for a in range(k):
                for b in range(k):
                    hit = hit or m0[u * k + a, v * k + b]
            out[u, v] = hit
    return out


def depth_ce_loop(prob, gt_depth, lo, hi, n):
    """prob (D, h, w), gt (h, w): mean -log p[true bin] over supervised pixels."""
    step = (hi - lo) / n
    tot, cnt = 0.0, 0
    for i in range(gt_depth.shape[0]):
        for j in range(gt_depth.shape[1]):
            d = float(gt_depth[i, j])
            if d <= 0 or d < lo or d >= hi:
                continue
            b = int(math.floor((d - lo) / step))
            if b < 0 or b >= n:
                continue
            tot -= math.log(max(float(prob[b, i, j]), 1e-8))
            cnt += 1
    return tot / cnt if cnt else 0.0


def argmax_loop(logits):
    C = logits.shape[0]
    out = np.zeros(logits.shape[1:], dtype=np.int64)
    for idx in np.ndindex(logits.shape[1:]):
        best, arg = -math.inf, 0
        for c in range(C):
            v = float(logits[(c,) + idx])
            if v > best:
                best, arg = v, c
        out[idx] = arg
    return out


def unproject_cell(K, T, u, v, depth, grid):
    """BEV (h, w) cell hit by the point at Euclidean ``depth`` along pixel (u, v)."""
    Kinv = np.linalg.inv(K)
    ray_c = Kinv @ np.array([u, v, 1.0])
    ray_w = T[:3, :3] @ ray_c
    ray_w = ray_w / np.linalg.norm(ray_w)
    p = T[:3, 3] + depth * ray_w
    s = grid.voxel_size
    dims = grid.dims
    lo = (grid.z_range[0], grid.y_range[0], grid.x_range[0])
    idx = world_to_voxel_loop((p[2], p[1], p[0]), lo, s, dims)
    return None if idx is None else (idx[1], idx[2])

"""Slow, loop-based reference implementations used only by the tests."""

import itertools
import math

import numpy as np


def bilinear_sample(img, x, y):
    """Scalar bilinear lookup with border clamping; mirrors the library's weight order."""
    h, w = img.shape
    x = min(max(x, 0.0), w - 1.0)
    y = min(max(y, 0.0), h - 1.0)
    x0, y0 = int(math.floor(x)), int(math.floor(y))
    x0, y0 = min(x0, w - 1), min(y0, h - 1)
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    fx, fy = x - x0, y - y0
    w00 = (1 - fx) * (1 - fy)
    w01 = fx * (1 - fy)
    w10 = (1 - fx) * fy
    w11 = fx * fy
    return w00 * img[y0, x0] + w01 * img[y0, x1] + w10 * img[y1, x0] + w11 * img[y1, x1]


def warp_oracle(img, u):
    h, w = img.shape
    out = np.empty_like(img)
    for yy in range(h):
        for xx in range(w):
            out[yy, xx] = bilinear_sample(img, xx + u[yy, xx, 0], yy + u[yy, xx, 1])
    return out


def mse_oracle(a, b):
    total = 0.0
    for va, vb in zip(a.ravel(), b.ravel()):
        total += (va - vb) ** 2
    return total / a.size


def lcc_oracle(a, b, n, eps=1e-10):
    h, w = a.shape
    vals = []
    for y0 in range(h - n + 1):
        for x0 in range(w - n + 1):
            pa = a[y0:y0 + n, x0:x0 + n].ravel()
            pb = b[y0:y0 + n, x0:x0 + n].ravel()
            da, db = pa - pa.mean(), pb - pb.mean()
            va, vb = (da * da).mean(), (db * db).mean()
            if va <= eps or vb <= eps:
                vals.append(0.0)
            else:
                cc = (da * db).mean() / math.sqrt(va * vb)
                vals.append(cc * cc)
    return 1.0 - sum(vals) / len(vals)


def smooth_oracle(u):
    h, w, _ = u.shape
    total = 0.0
    for yy in range(h):
        for xx in range(w):
            for c in range(2):
                if xx + 1 < w:
                    total += (u[yy, xx + 1, c] - u[yy, xx, c]) ** 2
                if yy + 1 < h:
                    total += (u[yy + 1, xx, c] - u[yy, xx, c]) ** 2
    return total


def rtre_oracle(p, q, w, h):
    diag = math.sqrt(w * w + h * h)
    return [math.hypot(a[0] - b[0], a[1] - b[1]) / diag for a, b in zip(p, q)]


def dice_oracle(a, b, c):
    inter = sa = sb = 0
    for va, vb in zip(a.ravel(), b.ravel()):
        sa += va == c
        sb += vb == c
        inter += (va == c) and (vb == c)
    return 1.0 if sa + sb == 0 else 2.0 * inter / (sa + sb)


def _boundary_points(mask):
    h, w = mask.shape
    pts = []
    for y in range(h):
        for x in range(w):
            if not mask[y, x]:
                continue
            for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                yy, xx = y + dy, x + dx
                if not (0 <= yy < h and 0 <= xx < w) or not mask[yy, xx]:
                    pts.append((y, x))
                    break
    return pts


def hd95_oracle(a, b, c):
    pa, pb = _boundary_points(a == c), _boundary_points(b == c)
    d = []
    for p in pa:
        d.append(min(math.hypot(p[0] - q[0], p[1] - q[1]) for q in pb))
    for q in pb:
        d.append(min(math.hypot(p[0] - q[0], p[1] - q[1]) for p in pa))
    d.sort()
    # linear interpolation between order statistics
    pos = 0.95 * (len(d) - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, len(d) - 1)
    return d[lo] + (pos - lo) * (d[hi] - d[lo])


def wilcoxon_enumerate(x, y):
    """Two-sided exact signed-rank p by enumerating every sign pattern."""
    d = [a - b for a, b in zip(x, y) if a != b]
    absd = sorted(abs(v) for v in d)
    # average ranks
    ranks = {}
    i = 0
    while i < len(absd):
        j = i
        while j + 1 < len(absd) and absd[j + 1] == absd[i]:
            j += 1
        ranks[absd[i]] = (i + j + 2) / 2.0
        i = j + 1
    r = [ranks[abs(v)] for v in d]
    obs = sum(rv for rv, v in zip(r, d) if v > 0)
    le = ge = 0
    for signs in itertools.product((0, 1), repeat=len(d)):
        s = sum(rv for rv, sg in zip(r, signs) if sg)
        le += s <= obs + 1e-9
        ge += s >= obs - 1e-9
    return min(1.0, 2.0 * min(le, ge) / 2 ** len(d))


def adam_scalar(x, grad_fn, steps, lr, b1, b2, eps):
    m = v = 0.0
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        x = x - lr * mh / (math.sqrt(vh) + eps)
    return x


def random_loss_instance(seed, n=16, k=3, field_std=1.5):
    """Random images, k-class soft maps and field for gradient checks."""
    rng = np.random.default_rng(seed)
    ref = rng.random((n, n))
    flt = rng.random((n, n))
    maps = []
    for _ in range(2):
        logits = rng.normal(0, 2, (n, n, k))
        p = np.exp(logits - logits.max(-1, keepdims=True))
        maps.append(p / p.sum(-1, keepdims=True))
    u = rng.normal(0, field_std, (n, n, 2))
    return ref, flt, maps[0], maps[1], u


def fd_relative_error(loss_fn, grad, u, step=1e-4, margin=1e-3):
    """Largest relative error between ``grad`` and central differences of ``loss_fn``.

    Components whose sample coordinate sits within ``margin`` of an
    interpolation-cell boundary (integer coordinate, including the clamp
    edges) are excluded because the bilinear sampler has a kink there.
    Entries are compared relative to ``max(|fd|, |grad|)`` floored at
    ``1e-4`` of the largest gradient magnitude, so entries far below the peak
    are judged against the peak scale rather than their own roundoff.
    """
    h, w, _ = u.shape
    gy, gx = np.mgrid[0:h, 0:w]
    coords = (gx + u[..., 0], gy + u[..., 1])
    fd = np.zeros_like(u)
    keep = np.zeros(u.shape, dtype=bool)
    for c in range(2):
        pos = coords[c]
        frac = pos - np.floor(pos)
        lim = w - 1 if c == 0 else h - 1
        keep[..., c] = (np.minimum(frac, 1 - frac) > margin) & (pos > margin) & (pos < lim - margin)
    for idx in zip(*np.nonzero(keep)):
        up, dn = u.copy(), u.copy()
        up[idx] += step
        dn[idx] -= step
        fd[idx] = (loss_fn(up) - loss_fn(dn)) / (2 * step)
    floor = 1e-4 * max(np.abs(grad[keep]).max(), 1e-300)
    denom = np.maximum(np.maximum(np.abs(fd), np.abs(grad)), floor)
    rel = np.abs(fd - grad) / denom
    return float(rel[keep].max()), int(keep.sum())

"""Independent reference implementations shared by the unit and acceptance tests."""

import math
from fractions import Fraction

import numpy as np

from crossing_attn.attention import SABlock
from crossing_attn.pdv import IntersectionPDV, MotionPDV


def naive_linear(v, w, b):
    out = [b[o] for o in range(w.shape[1])]
    for o in range(w.shape[1]):
        for i in range(w.shape[0]):
            out[o] += v[i] * w[i, o]
    return np.array(out)


def naive_block(x, blk: SABlock):
    """Loop-by-loop reference: location, footprint position, channel, weight index."""
    cfg = blk.config
    h, w, c = x.shape
    k, d, m, s = cfg.footprint_k, cfg.reduced_dim, cfg.m, cfg.share_factor
    r = k // 2
    p = {name: t.data for name, t in blk.named_parameters()}
    rm, rv, eps = blk.norm.state.running_mean, blk.norm.state.running_var, blk.norm.state.eps
    out = np.zeros_like(x)
    for y0 in range(h):
        for x0 in range(w):
            feats = []
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    yy, xx = y0 + dy, x0 + dx
                    feats.append(x[yy, xx] if 0 <= yy < h and 0 <= xx < w else np.zeros(c))
            phi = [naive_linear(f, p["phi.weight"], p["phi.bias"]) for f in feats]
            psi = [naive_linear(f, p["psi.weight"], p["psi.bias"]) for f in feats]
            beta = [naive_linear(f, p["beta.weight"], p["beta.bias"]) for f in feats]
            centre = naive_linear(x[y0, x0], p["phi.weight"], p["phi.bias"])
            if cfg.variant == "star":
                delta = [sum(centre[t] * psi[j][t] for t in range(d)) for j in range(m)]
            elif cfg.variant == "clique":
                delta = [sum(phi[a][t] * psi[b][t] for t in range(d)) for a in range(m) for b in range(m)]
            else:
                delta = list(centre) + [psi[j][t] for j in range(m) for t in range(d)]
            hid = np.maximum(naive_linear(np.array(delta), p["alpha.fc1.weight"], p["alpha.fc1.bias"]), 0.0)
            a = naive_linear(hid, p["alpha.fc2.weight"], p["alpha.fc2.bias"]).reshape(m, d // s)
            agg = np.zeros(d)
            for t in range(d):
                for j in range(m):
                    agg[t] += a[j, t // s] * beta[j][t]
            normed = np.zeros(d)
            for t in range(d):
                z = p["norm.gamma"][t] * (agg[t] - rm[t]) / math.sqrt(rv[t] + eps) + p["norm.beta"][t]
                normed[t] = max(z, 0.0)
            out[y0, x0] = naive_linear(normed, p["expand.weight"], p["expand.bias"])
            if cfg.residual:
                out[y0, x0] += x[y0, x0]
    return out


def randomized_block(cfg, seed):
    rng = np.random.default_rng(seed)
    blk = SABlock(cfg, rng)
    for _, t in blk.named_parameters():
        t.data[...] = rng.standard_normal(t.shape) * 0.5
    blk.norm.state.running_mean[...] = rng.standard_normal(cfg.reduced_dim)
    blk.norm.state.running_var[...] = rng.random(cfg.reduced_dim) + 0.5
    blk.eval()
    return blk, rng


# the six mask vectors, written out independently of the module
LITERAL_WS = {
    0: [0, 1, 1, 1, 1, 1, 1],
    1: [1, 0, 1, 1, 1, 1, 1],
    2: [1, 1, 0, 1, 1, 1, 1],
}
LITERAL_T = {
    0: [1, 0, 0, 0, 1, 1, 1],
    1: [0, 1, 0, 1, 1, 0, 1],
    2: [0, 0, 1, 1, 0, 1, 1],
}


def literal_fuse(pm, pt):
    """Rule-by-rule interpreter in exact rational arithmetic."""
    pm = [Fraction(float(v)) for v in pm]
    pt = [Fraction(float(v)) for v in pt]
    c_minus = min(range(3), key=lambda c: (pm[c], c))
    c_plus = max(range(3), key=lambda c: (pm[c], -c))
    weights = list(LITERAL_WS[c_minus])
    applied = pm[c_plus] >= Fraction(0.9999)
    if applied:
        weights = [a * b for a, b in zip(weights, LITERAL_T[c_plus])]
    scores = [w * p for w, p in zip(weights, pt)]
    total = sum(scores)
    if total == 0:
        return [float(v) for v in pt], applied, c_minus, c_plus, True
    return [float(s / total) for s in scores], applied, c_minus, c_plus, False


def random_case(rng):
    kind = rng.integers(5)
    if kind == 0:  # confident motion, both sides of the threshold
        top = rng.choice([0.9999, 0.99989999, 0.99995, 1.0, 0.99990001])
        rest = (1 - top) * rng.dirichlet([1, 1])
        pm = np.insert(rest, rng.integers(3), top)
    elif kind == 1:  # ties
        pm = rng.choice([np.array([0.25, 0.25, 0.5]), np.array([0.5, 0.5, 0.0]),
                         np.full(3, 1 / 3), np.array([0.4, 0.2, 0.4])])
        pm = rng.permutation(pm)
    else:
        pm = rng.dirichlet(rng.choice([0.1, 1.0, 5.0]) * np.ones(3))
    pt = rng.dirichlet(rng.choice([0.05, 1.0]) * np.ones(7))
    if rng.random() < 0.25:  # sparse TPV to reach the fallback branch
        keep = rng.random(7) < 0.3
        pt = np.where(keep, pt, 0.0)
        if pt.sum() == 0:
            pt[rng.integers(7)] = 1.0
        pt = pt / pt.sum()
    return MotionPDV(pm), IntersectionPDV(pt)


def texture(h, w, seed):
    rng = np.random.default_rng(seed)
    img = rng.random((h, w))
    k = np.array([1, 4, 6, 4, 1], dtype=float) / 16
    for axis in (0, 1):
        img = np.apply_along_axis(lambda r: np.convolve(np.pad(r, 2, mode="wrap"), k, mode="valid"), axis, img)
    return (img - img.min()) / (img.max() - img.min())


def shifted(img, du, dv):
    """frame_b[y + dv, x + du] = frame_a[y, x]."""
    return np.roll(np.roll(img, dv, axis=0), du, axis=1)


def interior(f, m=6):
    return f[m:-m, m:-m]


def in_frame(h, w, du, dv, half=2):
    """Pixels whose block and true correspondence both lie inside the frame."""
    ys, xs = np.mgrid[0:h, 0:w]
    inside = lambda yy, xx: (yy >= half) & (yy < h - half) & (xx >= half) & (xx < w - half)
    return inside(ys, xs) & inside(ys + dv, xs + du)

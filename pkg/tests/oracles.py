"""Slow, obviously-correct reference implementations used only by the tests."""

import math

import numpy as np


def conv2d_loop(x, w, b, stride=1, dilation=1, pad=0):
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad : pad + h, pad : pad + wd] = x
    oh = (h + 2 * pad - dilation * (kh - 1) - 1) // stride + 1
    ow = (wd + 2 * pad - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, co, oh, ow))
    for bi in range(n):
        for o in range(co):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0 if b is None else b[o]
                    for ch in range(c):
                        for a in range(kh):
                            for e in range(kw):
                                acc += w[o, ch, a, e] * xp[bi, ch, i * stride + a * dilation, j * stride + e * dilation]
                    out[bi, o, i, j] = acc
    return out


def matmul_loop(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def pointwise(layer, x):
    """1x1 conv of a (c, h, w) map as an explicit per-pixel loop -> (o, h, w)."""
    w = layer.weight.data[:, :, 0, 0]
    b = layer.bias.data
    c, h, wd = x.shape
    out = np.zeros((w.shape[0], h, wd))
    for i in range(h):
        for j in range(wd):
            for o in range(w.shape[0]):
                out[o, i, j] = b[o] + sum(w[o, ch] * x[ch, i, j] for ch in range(c))
    return out


def attend_loop(queries, keys, values):
    """queries [(m,)]*P, keys [(m,)]*R, values [(n,)]*R -> (P, n) and the (P, R) weights."""
    P, R = len(queries), len(keys)
    weights = np.zeros((P, R))
    out = np.zeros((P, len(values[0])))
    for p in range(P):
        logits = [sum(queries[p][k] * keys[r][k] for k in range(len(keys[r]))) for r in range(R)]
        top = max(logits)
        ex = [math.exp(v - top) for v in logits]
        z = sum(ex)
        for r in range(R):
            weights[p, r] = ex[r] / z
            out[p] += weights[p, r] * values[r]
    return out, weights


def _pixels(emb):
    c, h, w = emb.shape
    return [emb[:, i, j] for i in range(h) for j in range(w)]


def _psi_residual(block, attended, x):
    d, h, w = x.shape
    psi = block.psi.weight.data[:, :, 0, 0]
    out = x.copy()
    for p in range(h * w):
        i, j = divmod(p, w)
        out[:, i, j] += psi @ attended[p] + block.psi.bias.data
    return out


def nlb_loop(block, x):
    """x: (d, h, w). Every pixel attends over every pixel."""
    q = _pixels(pointwise(block.theta, x))
    k = _pixels(pointwise(block.phi, x))
    v = _pixels(pointwise(block.g, x))
    att, weights = attend_loop(q, k, v)
    return _psi_residual(block, att, x), weights


def block_embed(layer, x, k):
    """kernel=stride=k conv by explicit non-overlapping block loops (k divides h, w)."""
    c, h, w = x.shape
    wt, bias = layer.weight.data, layer.bias.data
    out = np.zeros((wt.shape[0], h // k, w // k))
    for bi in range(h // k):
        for bj in range(w // k):
            blk = x[:, bi * k : (bi + 1) * k, bj * k : (bj + 1) * k]
            for o in range(wt.shape[0]):
                out[o, bi, bj] = bias[o] + float((wt[o] * blk).sum())
    return out


def pnb_loop(block, x):
    q = _pixels(pointwise(block.theta, x))
    parts, maps = [], []
    for k, phi, g in zip(block.cfg.strides, block.phi, block.g):
        att, weights = attend_loop(q, _pixels(block_embed(phi, x, k)), _pixels(block_embed(g, x, k)))
        parts.append(att)
        maps.append(weights)
    return _psi_residual(block, np.concatenate(parts, axis=1), x), maps


def pooled_tokens(emb, sizes):
    c, h, w = emb.shape
    tokens = []
    for p in sizes:
        for i in range(p):
            y0, y1 = (i * h) // p, ((i + 1) * h) // p
            for j in range(p):
                x0, x1 = (j * w) // p, ((j + 1) * w) // p
                tokens.append(emb[:, y0:y1, x0:x1].reshape(c, -1).mean(axis=1))
    return tokens


def apnb_loop(block, x):
    q = _pixels(pointwise(block.theta, x))
    k = pooled_tokens(pointwise(block.phi, x), block.cfg.pool_sizes)
    v = pooled_tokens(pointwise(block.g, x), block.cfg.pool_sizes)
    att, weights = attend_loop(q, k, v)
    return _psi_residual(block, att, x), weights


def gaussian_2d_direct(img, sigma):
    r = max(1, math.ceil(3 * sigma))
    ax = np.arange(-r, r + 1)
    k2 = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2 * sigma * sigma))
    k2 /= k2.sum()
    h, w = img.shape
    out = np.zeros_like(img)
    for i in range(h):
        for j in range(w):
            acc = 0.0
            for a in range(-r, r + 1):
                for b in range(-r, r + 1):
                    acc += k2[a + r, b + r] * img[min(max(i + a, 0), h - 1), min(max(j + b, 0), w - 1)]
            out[i, j] = acc
    return out


def window(img, i, j, r):
    h, w = img.shape
    return [img[min(max(i + a, 0), h - 1), min(max(j + b, 0), w - 1)] for a in range(-r, r + 1) for b in range(-r, r + 1)]


def median_loop(img, r):
    out = np.zeros_like(img)
    for i in range(img.shape[0]):
        for j in range(img.shape[1]):
            vals = sorted(window(img, i, j, r))
            out[i, j] = vals[(len(vals) - 1) // 2]
    return out


def weighted_median_loop(img, r, sigma_s, sigma_r):
    """For every candidate value, total the weight of window entries <= it; keep the smallest reaching half."""
    out = np.zeros_like(img)
    offsets = [(a, b) for a in range(-r, r + 1) for b in range(-r, r + 1)]
    for i in range(img.shape[0]):
        for j in range(img.shape[1]):
            vals = window(img, i, j, r)
            centre = img[i, j]
            wts = [math.exp(-(a * a + b * b) / (2 * sigma_s**2)) * math.exp(-((v - centre) ** 2) / (2 * sigma_r**2)) for (a, b), v in zip(offsets, vals)]
            # cumulative sums in sorted order, as the definition states
            order = sorted(range(len(vals)), key=lambda t: (vals[t], t))
            total = np.cumsum([wts[t] for t in order])[-1]
            acc = 0.0
            for t in order:
                acc += wts[t]
                if acc >= total / 2:
                    out[i, j] = vals[t]
                    break
    return out


def ssim_loop(a, b, data_range=1.0, win=11, sigma=1.5):
    ax = np.arange(win) - (win - 1) / 2
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2 * sigma * sigma))
    g /= g.sum()
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    h, w = a.shape
    scores = []
    for i in range(h - win + 1):
        for j in range(w - win + 1):
            pa = a[i : i + win, j : j + win]
            pb = b[i : i + win, j : j + win]
            mu_a = (g * pa).sum()
            mu_b = (g * pb).sum()
            va = (g * (pa - mu_a) ** 2).sum()
            vb = (g * (pb - mu_b) ** 2).sum()
            cov = (g * (pa - mu_a) * (pb - mu_b)).sum()
            scores.append(((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (va + vb + c2)))
    return float(np.mean(scores))


def randomize(module, rng, scale=0.5):
    for p in module.parameters():
        p.data[...] = rng.standard_normal(p.shape) * scale
    return module


def random_block_case(kind, rng):
    """A random 64-bit block (psi included) and a 1 x d x h x w input, at most 1x8x8x8."""
    from pnen.nonlocal_blocks import make_nonlocal

    d = int(rng.integers(1, 9))
    m = int(rng.integers(1, 9))
    n = int(rng.integers(1, 9))
    if kind == "pnb":
        h, w = (int(v) for v in rng.choice([4, 8], 2))
        block = make_nonlocal("pnb", d, m, n, scales=(1, 2), rng=rng)
    elif kind == "apnb":
        h, w = (int(v) for v in rng.integers(2, 9, 2))
        block = make_nonlocal("apnb", d, m, n, pool_sizes=(1, 2), rng=rng)
    else:
        h, w = (int(v) for v in rng.integers(1, 9, 2))
        block = make_nonlocal("nlb", d, m, n, rng=rng)
    randomize(block, rng)
    x = rng.standard_normal((1, d, h, w))
    return block, x


def block_oracle(kind, block, x):
    """Oracle output for a (1, d, h, w) input, as (1, d, h, w)."""
    fn = {"nlb": nlb_loop, "pnb": pnb_loop, "apnb": apnb_loop}[kind]
    out, _ = fn(block, x[0])
    return out[None]

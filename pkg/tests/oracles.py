"""Scalar reference implementations used as independent oracles.

Plain Python loops over lists of floats: no torch, no vectorization, no
log-sum-exp tricks. Slow and only meant for small inputs.
"""

import math


def dot(u, v):
    return sum(a * b for a, b in zip(u, v))


def matching_probability(anchors, positives, i, tau):
    num = math.exp(dot(anchors[i], positives[i]) / tau)
    den = num
    for j in range(len(anchors)):
        if j != i:
            den += math.exp(dot(anchors[i], positives[j]) / tau)
    return num / den


def patchnce(anchors, positives, tau, weights=None):
    total = 0.0
    for i in range(len(anchors)):
        w = 1.0 if weights is None else weights[i]
        total += w * -math.log(matching_probability(anchors, positives, i, tau))
    return total


def mix_domain(anchors, positives, tau, weights=None):
    total = 0.0
    m = len(anchors)
    for i in range(m):
        num = math.exp(dot(anchors[i], positives[i]) / tau)
        den = 0.0
        for j in range(m):
            den += math.exp(dot(anchors[i], positives[j]) / tau)
        for j in range(m):
            if j != i:
                den += math.exp(dot(anchors[i], anchors[j]) / tau)
        w = 1.0 if weights is None else weights[i]
        total += w * -math.log(num / den)
    return total


def rank_weights(anchors, positives, progress):
    sims = [dot(a, p) for a, p in zip(anchors, positives)]
    m = len(sims)
    if m == 1:
        return [1.0]
    out = []
    for s in sims:
        below = sum(1 for t in sims if t < s)
        ties = sum(1 for t in sims if t == s)
        rank0 = below + (ties - 1) / 2.0  # zero-based mean rank
        out.append((1.0 - progress) + progress * rank0 / (m - 1))
    return out


def poly_kernel(x, y):
    return (dot(x, y) / len(x) + 1.0) ** 3


def mmd2_unbiased(xs, ys):
    m = len(xs)
    kxx = sum(poly_kernel(xs[i], xs[j]) for i in range(m) for j in range(m) if i != j)
    kyy = sum(poly_kernel(ys[i], ys[j]) for i in range(m) for j in range(m) if i != j)
    kxy = sum(poly_kernel(xs[i], ys[j]) for i in range(m) for j in range(m))
    return kxx / (m * (m - 1)) + kyy / (m * (m - 1)) - 2.0 * kxy / (m * m)


def fid_1d(a, b):
    """Closed form for scalar features: (mu_a - mu_b)^2 + (sd_a - sd_b)^2."""
    def stats(xs):
        mu = sum(xs) / len(xs)
        var = sum((x - mu) ** 2 for x in xs) / (len(xs) - 1)
        return mu, math.sqrt(var)

    (ma, sa), (mb, sb) = stats(a), stats(b)
    return (ma - mb) ** 2 + sa * sa + sb * sb - 2.0 * sa * sb


def central_difference(f, x, eps=1e-5):
    """Gradient of scalar ``f`` at numpy array ``x`` by central differences."""
    import numpy as np

    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        fp = f(x)
        flat[k] = orig - eps
        fm = f(x)
        flat[k] = orig
        g[k] = (fp - fm) / (2.0 * eps)
    return grad


def relative_error(analytic, numeric):
    import numpy as np

    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)

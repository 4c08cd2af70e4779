"""Shared test fixtures: random hierarchy builders and independent
brute-force reference evaluators (no feature maps, no vectorisation)."""

from __future__ import annotations

import numpy as np

from hmpcnn import model, transforms
from hmpcnn.model import HmpSpec, delta, dims


def random_hmp_spec(rng, l, b, n, g_factory=None) -> HmpSpec:
    """Random wiring plus per-feature g functions from g_factory(rng)."""
    if g_factory is None:
        g_factory = lambda r: model.gf_max4()
    wiring, gfun = {}, {}
    feats = list(b) + [1]
    b_prev = 1
    for k in range(1, l + 1):
        b_k = feats[k - 1]
        for s in range(1, b_k + 1):
            wiring[(k, s)] = tuple(int(rng.integers(1, b_prev + 1)) for _ in range(4))
            gfun[(k, s)] = g_factory(rng)
        b_prev = b_k
    return HmpSpec(l, tuple(b), tuple(n), wiring, gfun)


def random_ffnet_spec(rng, l, b, n, depth=2, width=3, scale=1.5) -> HmpSpec:
    return random_hmp_spec(rng, l, b, n,
                           g_factory=lambda r: transforms.random_ffnet(r, depth, width, scale))


def model_value_bruteforce(x: np.ndarray, spec: HmpSpec, mode: str = "exact") -> float:
    """Per-position recursive evaluation of the pooled hierarchy: every value
    is recomputed from raw pixels, no sharing, no arrays."""
    d1, d2 = x.shape

    def z_val(k, s, i, j):
        if k == 0:
            return float(x[i - 1, j - 1])
        nk = spec.n(k)
        d1k, d2k = dims(k, d1, d2, spec)
        dlt = delta(k - 1, spec)
        r1, r2, r3, r4 = spec.wiring[(k, s)]
        g = spec.g_funcs[(k, s)]
        best = -np.inf
        for a in range((i - 1) * nk + 1, min(i * nk, d1k) + 1):
            for b_ in range((j - 1) * nk + 1, min(j * nk, d2k) + 1):
                v = float(g(z_val(k - 1, r1, a, b_),
                            z_val(k - 1, r2, a + dlt, b_),
                            z_val(k - 1, r3, a, b_ + dlt),
                            z_val(k - 1, r4, a + dlt, b_ + dlt)))
                if mode == "relaxed":
                    v = max(v, 0.0)
                best = max(best, v)
        return best

    d1l, d2l = dims(spec.level, d1, d2, spec)
    return max(z_val(spec.level, 1, i, j)
               for i in range(1, d1l + 1) for j in range(1, d2l + 1))


def window_tree_value(x: np.ndarray, level: int, g_funcs: dict) -> float:
    """Unpooled hierarchy evaluated window by window: the value of each
    2^l x 2^l subimage is a full 4-way recursion over its quadrants (second
    argument is the row-offset quadrant, matching the pooled convention),
    and the image value is the max over all such windows."""

    def f(k, s, win):
        if k == 0:
            return float(win[0, 0])
        h = 2 ** (k - 1)
        g = g_funcs[(k, s)]
        base = 4 * (s - 1)
        return float(g(f(k - 1, base + 1, win[:h, :h]),
                       f(k - 1, base + 2, win[h:, :h]),
                       f(k - 1, base + 3, win[:h, h:]),
                       f(k - 1, base + 4, win[h:, h:])))

    d1, d2 = x.shape
    side = 2**level
    vals = []
    for i in range(d1 - side + 1):
        for j in range(d2 - side + 1):
            vals.append(f(level, 1, x[i:i + side, j:j + side]))
    return max(vals)

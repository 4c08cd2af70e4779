"""Ground-truth evaluator for the hierarchical max-pooling model with feature
constraint and local pooling.

All indices in this module are 1-based, matching the usual mathematical
convention for image grids: pixel (i, j) of a d1 x d2 image, feature-map
entries (i, j) in {1..d1(k)} x {1..d2(k)}.  Arrays underneath are plain
numpy and 0-based; only the public API speaks 1-based.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class SpecError(ValueError):
    """A model specification violates one of its structural conditions."""


@dataclass(frozen=True)
class ImageGrid:
    """A d1 x d2 grid of grey values in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        if self.values.ndim != 2 or min(self.values.shape) < 1:
            raise ValueError(f"image must be 2-d and nonempty, got shape {self.values.shape}")
        if self.values.min() < 0.0 or self.values.max() > 1.0:
            raise ValueError("grey values must lie in [0, 1]")

    @property
    def d1(self) -> int:
        return self.values.shape[0]

    @property
    def d2(self) -> int:
        return self.values.shape[1]


def as_image_array(x) -> np.ndarray:
    if isinstance(x, ImageGrid):
        return x.values
    return np.asarray(x, dtype=np.float64)


@dataclass
class GFunction:
    """A 4-ary combination function.

    ``ground_truth`` flavour maps into [0, 1]; ``approximant`` flavour is an
    unconstrained real function (typically a small feedforward net).  The
    optional ``lipschitz`` field certifies a Lipschitz constant with respect
    to the Euclidean distance on [-2, 2]^4.
    """

    fn: Callable
    flavor: str = "ground_truth"
    lipschitz: float | None = None
    name: str = ""

    def __call__(self, u1, u2, u3, u4):
        return self.fn(u1, u2, u3, u4)


def gf_max4() -> GFunction:
    return GFunction(lambda a, b, c, d: np.maximum(np.maximum(a, b), np.maximum(c, d)),
                     lipschitz=1.0, name="max4")


def gf_mean4() -> GFunction:
    return GFunction(lambda a, b, c, d: (a + b + c + d) / 4.0, lipschitz=0.5, name="mean4")


def gf_first() -> GFunction:
    return GFunction(lambda a, b, c, d: np.asarray(a, dtype=np.float64) + 0.0,
                     lipschitz=1.0, name="first")


def gf_affine_clip(coeffs, offset: float) -> GFunction:
    """clip(c . u + offset, 0, 1); Lipschitz constant ||c||_2."""
    c = np.asarray(coeffs, dtype=np.float64)
    if c.shape != (4,):
        raise ValueError("need 4 coefficients")

    def fn(a, b, cc, d):
        return np.clip(c[0] * a + c[1] * b + c[2] * cc + c[3] * d + offset, 0.0, 1.0)

    return GFunction(fn, lipschitz=float(np.linalg.norm(c)), name="affine_clip")


def gf_product_threshold(theta: float = 0.5) -> GFunction:
    """Ramp of the 4-way product against a threshold: clip(prod/theta, 0, 1)."""
    def fn(a, b, c, d):
        return np.clip(a * b * c * d / theta, 0.0, 1.0)

    return GFunction(fn, name="product_threshold")


def check_unit_range(g: Callable, rng: np.random.Generator, samples: int = 2048) -> bool:
    """Sample [0,1]^4 and check the outputs stay inside [0, 1]."""
    u = rng.uniform(0.0, 1.0, size=(4, samples))
    out = np.asarray(g(u[0], u[1], u[2], u[3]))
    return bool((out >= 0.0).all() and (out <= 1.0).all())


@dataclass
class HmpSpec:
    """Hierarchy description: level l, per-level feature counts b, pooling
    sizes n, 4-way wiring indices, and the combination functions.

    ``features`` and ``pooling`` hold the interior values b_1..b_{l-1} and
    n_1..n_{l-1}; both are implicitly 1 at the ends (b_0 = b_l = n_0 = n_l = 1).
    ``wiring[(k, s)]`` gives the four source feature indices in {1..b_{k-1}};
    ``g_funcs[(k, s)]`` is the 4-ary function of feature s at level k.
    """

    level: int
    features: tuple[int, ...]
    pooling: tuple[int, ...]
    wiring: dict[tuple[int, int], tuple[int, int, int, int]]
    g_funcs: dict[tuple[int, int], Callable]
    smoothness: tuple[float, float] | None = None  # (p, C), informational

    def __post_init__(self):
        self.features = tuple(int(v) for v in self.features)
        self.pooling = tuple(int(v) for v in self.pooling)
        if self.level < 1:
            raise SpecError("level must be >= 1")
        if len(self.features) != self.level - 1 or len(self.pooling) != self.level - 1:
            raise SpecError("features and pooling must have length level-1")
        for k in range(1, self.level + 1):
            for s in range(1, self.b(k) + 1):
                if (k, s) not in self.wiring:
                    raise SpecError(f"missing wiring for level {k} feature {s}")
                if (k, s) not in self.g_funcs:
                    raise SpecError(f"missing g function for level {k} feature {s}")

    def b(self, k: int) -> int:
        """Feature count b_k (b_0 = b_l = 1)."""
        if k == 0 or k == self.level:
            return 1
        return self.features[k - 1]

    def n(self, k: int) -> int:
        """Pooling size n_k (n_0 = n_l = 1)."""
        if k == 0 or k == self.level:
            return 1
        return self.pooling[k - 1]


def delta(k: int, spec: HmpSpec) -> int:
    """Offset 2^k / prod_{i=0..k} n_i between combined subparts at level k.

    Always a positive integer for a valid spec; a fractional value means the
    pooling-product condition is violated.
    """
    if not 0 <= k <= spec.level - 1:
        raise SpecError(f"delta defined for 0 <= k <= l-1, got k={k}")
    prod = 1
    for i in range(1, k + 1):
        prod *= spec.n(i)
    num = 2**k
    if num % prod != 0:
        raise SpecError(f"delta_{k} = {num}/{prod} is not an integer "
                        "(pooling product exceeds 2^k)")
    return num // prod


def dims(k: int, d1: int, d2: int, spec: HmpSpec) -> tuple[int, int]:
    """Feature-map dimensions (d1(k), d2(k)) by the ceil/shrink recursion."""
    if not 0 <= k <= spec.level:
        raise SpecError(f"dims defined for 0 <= k <= l, got k={k}")
    a, b = int(d1), int(d2)
    for i in range(1, k + 1):
        n_prev = spec.n(i - 1)
        d_prev = delta(i - 1, spec)
        a = -(-a // n_prev) - d_prev
        b = -(-b // n_prev) - d_prev
        if a < 1 or b < 1:
            raise SpecError(f"dimension collapsed at level {i}: ({a},{b}); image too small")
    return a, b


def neighborhood(k: int, i: int, j: int, spec: HmpSpec, d1: int, d2: int) -> set[tuple[int, int]]:
    """Pooling window of output (i, j) at level k, clipped to the map grid."""
    d1k, d2k = dims(k, d1, d2, spec)
    nk = spec.n(k)
    o1, o2 = -(-d1k // nk), -(-d2k // nk)
    if not (1 <= i <= o1 and 1 <= j <= o2):
        raise IndexError(f"pooled position ({i},{j}) outside grid ({o1},{o2})")
    return {(a, b)
            for a in range((i - 1) * nk + 1, i * nk + 1) if a <= d1k
            for b in range((j - 1) * nk + 1, j * nk + 1) if b <= d2k}


@dataclass
class ValidationReport:
    """Pass/fail per structural condition; the dimension-form check is
    informational only (it gates exact CNN representability, not validity)."""

    checks: list[tuple[str, bool, str]] = field(default_factory=list)

    def add(self, name: str, passed: bool, detail: str = ""):
        self.checks.append((name, passed, detail))

    def passed(self, name: str) -> bool:
        return all(ok for nm, ok, _ in self.checks if nm == name)

    @property
    def ok(self) -> bool:
        return all(ok for nm, ok, _ in self.checks if nm != "exact_rep_dim_form")

    def __str__(self):
        return "\n".join(f"{nm}: {'pass' if ok else 'FAIL'}{' (' + dt + ')' if dt else ''}"
                         for nm, ok, dt in self.checks)


def validate_spec(spec: HmpSpec, d1: int, d2: int) -> ValidationReport:
    """Check the pooling-product bound, minimum image size, power-of-two
    pooling, wiring ranges, and (non-fatally) the 2^l*m - 1 dimension form."""
    rep = ValidationReport()
    l = spec.level

    pow_ok = all(n >= 1 and (n & (n - 1)) == 0 and n <= 2 ** (l - 1) for n in spec.pooling)
    rep.add("pooling_power_of_two", pow_ok, f"n={spec.pooling}")

    prod = 1
    prod_ok = True
    bad = ""
    for k in range(1, l):
        prod *= spec.n(k)
        if prod > 2**k:
            prod_ok = False
            bad = f"prod_(i<={k}) n_i = {prod} > 2^{k}"
            break
    rep.add("pooling_product", prod_ok, bad)

    need = 2**l + math.prod(spec.pooling) - 1
    rep.add("min_image_size", min(d1, d2) >= need, f"need min(d1,d2) >= {need}, have {min(d1, d2)}")

    wiring_ok = True
    detail = ""
    for (k, s), srcs in spec.wiring.items():
        if not (1 <= k <= l and 1 <= s <= spec.b(k)) or len(srcs) != 4 \
                or any(not (1 <= r <= spec.b(k - 1)) for r in srcs):
            wiring_ok = False
            detail = f"bad wiring at level {k} feature {s}: {srcs}"
            break
    rep.add("wiring_range", wiring_ok, detail)

    form_ok = True
    details = []
    for d in (d1, d2):
        m, rem = divmod(d + 1, 2**l)
        if rem != 0 or m < 2:
            form_ok = False
            details.append(f"{d} != 2^{l}*m-1 with m>=2")
        else:
            details.append(f"{d} = 2^{l}*{m}-1")
    rep.add("exact_rep_dim_form", form_ok, "; ".join(details))
    return rep


def _require_valid(spec: HmpSpec, d1: int, d2: int):
    rep = validate_spec(spec, d1, d2)
    if not rep.ok:
        raise SpecError("invalid spec for this image size:\n" + str(rep))


def _pool2d_max(arr: np.ndarray, s: int) -> np.ndarray:
    """Max over clipped s x s windows of a 2-d array (ceil output grid)."""
    if s == 1:
        return arr
    h, w = arr.shape
    o1, o2 = -(-h // s), -(-w // s)
    out = np.full((o1, o2), -np.inf)
    for u in range(min(s, h)):
        for v in range(min(s, w)):
            sub = arr[u::s, v::s]
            out[: sub.shape[0], : sub.shape[1]] = np.maximum(
                out[: sub.shape[0], : sub.shape[1]], sub)
    return out


def _level_maps(x: np.ndarray, spec: HmpSpec, mode: str) -> dict[int, np.ndarray]:
    """Pooled feature maps of the top level, computed bottom-up."""
    if mode not in ("exact", "relaxed"):
        raise ValueError(f"mode must be 'exact' or 'relaxed', got {mode!r}")
    d1, d2 = x.shape
    prev = {1: x}
    for k in range(1, spec.level + 1):
        dlt = delta(k - 1, spec)
        d1k, d2k = dims(k, d1, d2, spec)
        cur = {}
        for s in range(1, spec.b(k) + 1):
            r1, r2, r3, r4 = spec.wiring[(k, s)]
            g = spec.g_funcs[(k, s)]
            a = prev[r1][:d1k, :d2k]
            b = prev[r2][dlt:dlt + d1k, :d2k]
            c = prev[r3][:d1k, dlt:dlt + d2k]
            d = prev[r4][dlt:dlt + d1k, dlt:dlt + d2k]
            y = np.asarray(g(a, b, c, d), dtype=np.float64)
            if mode == "relaxed":
                y = np.maximum(y, 0.0)
            cur[s] = _pool2d_max(y, spec.n(k))
        prev = cur
    return prev


def eval_model(x, spec: HmpSpec, mode: str = "exact") -> float:
    """Model value: max over all positions of the level-l feature map.

    ``exact`` evaluates the ground-truth hierarchy (result in [0, 1] when the
    g functions are [0,1]-valued); ``relaxed`` applies a ReLU after each g,
    the form a convolutional network can represent exactly.
    """
    x = as_image_array(x)
    _require_valid(spec, x.shape[0], x.shape[1])
    top = _level_maps(x, spec, mode)[1]
    return float(top.max())


def eval_model_argmax(x, spec: HmpSpec, mode: str = "exact") -> tuple[float, tuple[int, int]]:
    """Like eval_model but also reports the first row-major maximiser (1-based)."""
    x = as_image_array(x)
    _require_valid(spec, x.shape[0], x.shape[1])
    top = _level_maps(x, spec, mode)[1]
    flat = int(np.argmax(top))
    i, j = divmod(flat, top.shape[1])
    return float(top[i, j]), (i + 1, j + 1)


def quadtree_features(level: int) -> tuple[int, ...]:
    """Feature counts b_k = 4^(l-k) of the full quadtree hierarchy."""
    return tuple(4 ** (level - k) for k in range(1, level))


def quadtree_wiring(level: int) -> dict[tuple[int, int], tuple[int, int, int, int]]:
    """Wiring where feature s at level k reads children 4(s-1)+1 .. 4s.

    With b_k = 4^(l-k) this makes every level-l value a full recursion over
    one 2^l x 2^l subimage, i.e. the unconstrained hierarchical model.
    """
    b = {k: 4 ** (level - k) for k in range(1, level + 1)}
    wiring = {}
    for k in range(1, level + 1):
        for s in range(1, b[k] + 1):
            if k == 1:
                wiring[(k, s)] = (1, 1, 1, 1)  # level 0 holds the single input map
            else:
                base = 4 * (s - 1)
                wiring[(k, s)] = (base + 1, base + 2, base + 3, base + 4)
    return wiring

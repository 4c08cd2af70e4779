"""Network classes F1-F4 assembled from the layer primitives, parameter
derivations for a given hierarchy, weight counting, constant-free
capacity/rate shapes, and weight-file persistence.

Class layout (L blocks of z conv layers each, channels k_r, filters M_r):

* F1 - a local max-pooling layer of size s_r after each non-final block;
* F2 - a subsampling layer of size s_r after each non-final block;
* F3 - one subsampling layer of size s after the last block;
* F4 - F3 with s = 1 (no resolution reduction before the output layer).

Every network ends with the global-max output layer over a d~ window.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .layers import ConvBlock, ConvLayerWeights, network_forward_batch
from .model import SpecError, as_image_array

VARIANTS = ("F1", "F2", "F3", "F4")


@dataclass(frozen=True)
class ArchSpec:
    """Architecture descriptor theta = (variant, L, k, M, z, pool, d~) bound
    to fixed input dimensions.

    ``pool`` is the vector (s_1..s_{L-1}) for F1/F2 and a single integer for
    F3/F4 (forced to 1 for F4).  Validity (the output window fitting inside
    the final grid) is checked at construction, so forward evaluation cannot
    fail on size grounds.
    """

    variant: str
    channels: tuple[int, ...]
    filter_sizes: tuple[int, ...]
    layers_per_block: int
    pool: tuple[int, ...] | int
    out_bounds: tuple[int, int]
    input_dims: tuple[int, int]

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(v) for v in self.channels))
        object.__setattr__(self, "filter_sizes", tuple(int(v) for v in self.filter_sizes))
        object.__setattr__(self, "out_bounds", tuple(int(v) for v in self.out_bounds))
        object.__setattr__(self, "input_dims", tuple(int(v) for v in self.input_dims))
        if self.variant not in VARIANTS:
            raise SpecError(f"unknown variant {self.variant!r}")
        L = len(self.channels)
        if L < 1 or len(self.filter_sizes) != L:
            raise SpecError("channels and filter_sizes must be nonempty and equally long")
        if self.layers_per_block < 1:
            raise SpecError("need at least one layer per block")
        if any(v < 1 for v in self.channels + self.filter_sizes + self.out_bounds + self.input_dims):
            raise SpecError("all architecture entries must be >= 1")
        if self.variant in ("F1", "F2"):
            pool = tuple(int(v) for v in np.atleast_1d(self.pool)) if L > 1 else tuple(self.pool or ())
            object.__setattr__(self, "pool", pool)
            if len(pool) != L - 1 or any(v < 1 for v in pool):
                raise SpecError(f"{self.variant} needs {L - 1} positive pool sizes, got {pool}")
        else:
            s = int(self.pool)
            if s < 1:
                raise SpecError("subsampling size must be >= 1")
            if self.variant == "F4" and s != 1:
                raise SpecError("F4 fixes the subsampling size to 1")
            object.__setattr__(self, "pool", s)
        g1, g2 = self.final_grid()
        if not (self.out_bounds[0] <= g1 and self.out_bounds[1] <= g2):
            raise SpecError(f"output window {self.out_bounds} exceeds final grid ({g1},{g2})")

    @property
    def num_blocks(self) -> int:
        return len(self.channels)

    @property
    def pool_sizes(self) -> tuple[int, ...]:
        if self.variant not in ("F1", "F2"):
            raise AttributeError("pool_sizes applies to F1/F2 only")
        return self.pool

    @property
    def pool_scalar(self) -> int:
        if self.variant in ("F1", "F2"):
            raise AttributeError("pool_scalar applies to F3/F4 only")
        return self.pool

    def final_grid(self) -> tuple[int, int]:
        """Index-set dimensions right before the output layer."""
        a, b = self.input_dims
        if self.variant in ("F1", "F2"):
            for s in (self.pool if isinstance(self.pool, tuple) else ()):
                a, b = -(-a // s), -(-b // s)
        else:
            s = self.pool
            a, b = -(-a // s), -(-b // s)
        return a, b


@dataclass
class Network:
    """An architecture together with all trainable weights."""

    arch: ArchSpec
    blocks: list[ConvBlock]
    out_weights: np.ndarray

    def __post_init__(self):
        self.out_weights = np.asarray(self.out_weights, dtype=np.float64)
        a = self.arch
        if len(self.blocks) != a.num_blocks:
            raise SpecError(f"expected {a.num_blocks} blocks, got {len(self.blocks)}")
        k_prev = 1
        for r, (blk, k_r, m_r) in enumerate(zip(self.blocks, a.channels, a.filter_sizes)):
            if blk.depth != a.layers_per_block:
                raise SpecError(f"block {r + 1} has depth {blk.depth}, arch says {a.layers_per_block}")
            if blk.in_channels != k_prev or blk.out_channels != k_r:
                raise SpecError(f"block {r + 1} channel chain broken")
            if blk.filter_size != m_r:
                raise SpecError(f"block {r + 1} filter size {blk.filter_size} != {m_r}")
            k_prev = k_r
        if self.out_weights.shape != (a.channels[-1],):
            raise SpecError("output weight length must equal the last channel count")

    def weight_arrays(self) -> list[np.ndarray]:
        """All weight tensors in construction order (filters, biases, output)."""
        arrs = []
        for blk in self.blocks:
            for lay in blk.layers:
                arrs.append(lay.filter)
                arrs.append(lay.bias)
        arrs.append(self.out_weights)
        return arrs


def forward(net: Network, x) -> float:
    """Evaluate the network on one image."""
    img = as_image_array(x)
    if img.shape != net.arch.input_dims:
        raise SpecError(f"image shape {img.shape} does not match arch input {net.arch.input_dims}")
    return float(network_forward_batch(net, img[None])[0])


def forward_many(net: Network, images: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Evaluate the network on a stack of images (n, d1, d2); evaluation is
    chunked to bound activation memory (per-image results are unaffected)."""
    images = np.asarray(images, dtype=np.float64)
    if images.shape[0] <= chunk:
        return network_forward_batch(net, images)
    return np.concatenate([network_forward_batch(net, images[i:i + chunk])
                           for i in range(0, images.shape[0], chunk)])


def param_count(arch: ArchSpec) -> int:
    """Total number of trainable weights W of the architecture."""
    z = arch.layers_per_block
    total = 0
    k_prev = 1
    for k_r, m_r in zip(arch.channels, arch.filter_sizes):
        for i in range(z):
            k_in = k_prev if i == 0 else k_r
            total += m_r * m_r * k_in * k_r + k_r
        k_prev = k_r
    return total + arch.channels[-1]


def random_network(arch: ArchSpec, rng: np.random.Generator) -> Network:
    """Draw a network with uniform fan-in-scaled filters, zero biases, and
    uniform output weights; the draw order is fixed so seeds reproduce."""
    blocks = []
    k_prev = 1
    for k_r, m_r in zip(arch.channels, arch.filter_sizes):
        layers = []
        for i in range(arch.layers_per_block):
            k_in = k_prev if i == 0 else k_r
            bound = math.sqrt(6.0 / (m_r * m_r * k_in))
            filt = rng.uniform(-bound, bound, size=(m_r, m_r, k_in, k_r))
            layers.append(ConvLayerWeights(filt, np.zeros(k_r)))
        blocks.append(ConvBlock(layers))
        k_prev = k_r
    k_last = arch.channels[-1]
    out = rng.uniform(-1.0 / math.sqrt(k_last), 1.0 / math.sqrt(k_last), size=k_last)
    return Network(arch, blocks, out)


# ---------------------------------------------------------------------------
# parameter derivations
# ---------------------------------------------------------------------------

def _check_pool_vector(l: int, n: tuple[int, ...]):
    n = tuple(int(v) for v in n)
    if len(n) != l - 1:
        raise SpecError(f"need {l - 1} pooling sizes for level {l}, got {len(n)}")
    prod = 1
    for k, nk in enumerate(n, start=1):
        if nk < 1 or (nk & (nk - 1)) != 0:
            raise SpecError(f"pooling sizes must be powers of two, got n_{k}={nk}")
        prod *= nk
        if prod > 2**k:
            raise SpecError(f"pooling product violated at k={k}: {prod} > 2^{k}")
    return n


def theorem1_params(l: int, b: tuple[int, ...], n: tuple[int, ...], L_n: int,
                    c2: int, d1: int, d2: int) -> tuple[ArchSpec, ArchSpec, ArchSpec]:
    """Architectures (theta_1, theta_2, theta_3) sized so that each class can
    represent the relaxed hierarchy exactly and the three classes nest.

    ``L_n`` is the hidden-layer count of the per-feature approximating nets
    and ``c2`` the extra channel budget (the analysis only requires both to
    be large enough).
    """
    n = _check_pool_vector(l, n)
    b = tuple(int(v) for v in b)
    if len(b) != l - 1 or any(v < 1 for v in b):
        raise SpecError(f"need {l - 1} positive feature counts, got {b}")
    if L_n < 1 or c2 < 1:
        raise SpecError("L_n and c2 must be positive")
    for d in (d1, d2):
        m, rem = divmod(d + 1, 2**l)
        if rem != 0 or m < 2:
            raise SpecError(f"image dimension {d} is not of the form 2^{l}*m-1 with m >= 2")

    b_max = max(b) if b else 1
    z = b_max * (L_n + 1)
    prod_n = math.prod(n)
    dt = []
    for d in (d1, d2):
        q, rem = divmod(d - 2**l + 1, prod_n)
        if rem != 0:
            raise SpecError(f"output bound ({d} - 2^{l} + 1)/{prod_n} is not an integer")
        dt.append(q)
    d_tilde = (dt[0], dt[1])

    k = tuple(2 * b_max + c2 for _ in range(l))
    m_list, mbar_list = [], []
    prod = 1
    for r in range(1, l + 1):
        num = 2 ** (r - 1)
        if num % prod != 0:
            raise SpecError(f"filter size 2^{r - 1}/{prod}+1 is not an integer")
        m_list.append(num // prod + 1)
        mbar_list.append(num + 1)
        if r <= l - 1:
            prod *= n[r - 1]
    m = tuple(m_list)
    m_bar = tuple(mbar_list)

    k_bar = tuple(2 * kr + 4 for kr in k)
    log_terms = [int(math.log2(ni)) for ni in n]
    z_bar = z + 3 * max(k) * (max(log_terms) if log_terms else 0)
    s = prod_n

    theta1 = ArchSpec("F1", k, m, z, n, d_tilde, (d1, d2))
    theta2 = ArchSpec("F2", k_bar, m, z_bar, n, d_tilde, (d1, d2))
    theta3 = ArchSpec("F3", k_bar, m_bar, z_bar, s, d_tilde, (d1, d2))
    return theta1, theta2, theta3


def table1_params(j: int, l: int, n: tuple[int, ...], k: int, z: int,
                  d1: int, d2: int) -> ArchSpec:
    """Architecture of classifier j in {1,2,3,4} for adaptively chosen
    (l, n, k, z); filter sizes, pool sizes and output bounds follow from
    (l, n) alone, with ceilings so any image size is admissible."""
    if j not in (1, 2, 3, 4):
        raise SpecError(f"classifier index must be 1..4, got {j}")
    n = _check_pool_vector(l, n)
    if k < 1 or z < 1:
        raise SpecError("channels and depth must be positive")
    if min(d1, d2) < 2**l:
        raise SpecError(f"image too small for level {l}")
    prod_n = math.prod(n)
    channels = tuple(k for _ in range(l))

    if j in (1, 2):
        m_list = []
        prod = 1
        for r in range(1, l + 1):
            num = 2 ** (r - 1)
            if num % prod != 0:
                raise SpecError(f"filter size 2^{r - 1}/{prod}+1 is not an integer")
            m_list.append(num // prod + 1)
            if r <= l - 1:
                prod *= n[r - 1]
        m = tuple(m_list)
        d_tilde = (-(-(d1 - 2**l + 1) // prod_n), -(-(d2 - 2**l + 1) // prod_n))
        return ArchSpec("F1" if j == 1 else "F2", channels, m, z, n, d_tilde, (d1, d2))

    m_bar = tuple(2 ** (r - 1) + 1 for r in range(1, l + 1))
    if j == 3:
        d_tilde = (-(-(d1 - 2**l + 1) // prod_n), -(-(d2 - 2**l + 1) // prod_n))
        return ArchSpec("F3", channels, m_bar, z, prod_n, d_tilde, (d1, d2))
    d_tilde = (d1 - 2**l + 1, d2 - 2**l + 1)
    return ArchSpec("F4", channels, m_bar, z, 1, d_tilde, (d1, d2))


def save_network(path, net: Network) -> None:
    """Persist a network: an architecture header plus the flat float64 weight
    arrays in construction order (per layer filter then bias, then output)."""
    import json

    arch = net.arch
    header = json.dumps({
        "variant": arch.variant,
        "channels": list(arch.channels),
        "filter_sizes": list(arch.filter_sizes),
        "layers_per_block": arch.layers_per_block,
        "pool": list(arch.pool) if isinstance(arch.pool, tuple) else arch.pool,
        "out_bounds": list(arch.out_bounds),
        "input_dims": list(arch.input_dims),
    })
    arrays = {f"w{idx:04d}": arr for idx, arr in enumerate(net.weight_arrays())}
    np.savez(path, arch=np.array(header), **arrays)


def load_network(path) -> Network:
    import json

    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["arch"]))
        pool = meta["pool"]
        arch = ArchSpec(meta["variant"], tuple(meta["channels"]), tuple(meta["filter_sizes"]),
                        meta["layers_per_block"], tuple(pool) if isinstance(pool, list) else pool,
                        tuple(meta["out_bounds"]), tuple(meta["input_dims"]))
        keys = sorted(k for k in data.files if k.startswith("w"))
        arrays = [data[k] for k in keys]
    blocks = []
    pos = 0
    for _ in arch.channels:
        layers = []
        for _ in range(arch.layers_per_block):
            layers.append(ConvLayerWeights(arrays[pos], arrays[pos + 1]))
            pos += 2
        blocks.append(ConvBlock(layers))
    return Network(arch, blocks, arrays[pos])


def vc_bound_shape(z: int, d1: int, d2: int) -> float:
    """Capacity shape z^2 * log2(z * d1 * d2); a bound up to a constant factor."""
    if z < 1 or d1 * d2 <= 1:
        raise ValueError("need z >= 1 and d1*d2 > 1")
    return z * z * math.log2(z * d1 * d2)


def rate_curve(n: int, p: float) -> float:
    """Reference convergence slope n^(-p/(2p+4)); constant-free."""
    if n < 1:
        raise ValueError("sample size must be >= 1")
    if p < 1:
        raise ValueError("smoothness p must satisfy p >= 1")
    return float(n ** (-p / (2.0 * p + 4.0)))

"""Layer primitives: convolution with index-conditioned zero padding, local
max-pooling, subsampling, and the global-max output layer, together with
exact reverse-mode gradients.

Conventions used throughout:

* A feature stack is a real tensor of shape ``(i1, i2, k)`` over the index
  set ``{1..i1} x {1..i2}`` with ``k`` channels.  All math is float64.
* Filters are anchored at the top-left: output position ``(i, j)`` reads taps
  ``(i+t1-1, j+t2-1)`` for ``t1, t2 in {1..M}``; taps falling outside the
  index set contribute zero, so convolution preserves the index set.
* Per output neuron the taps are accumulated t1-major, then t2, with the
  input-channel sum innermost.  This fixes the floating-point summation
  order, so repeated evaluation is bit-identical.
* Subgradient conventions: the ReLU derivative at the kink is 0; a max over
  several positions routes its derivative to the first maximiser in
  row-major order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class FeatureStack:
    """Values on an index set ``{1..i1} x {1..i2}`` with ``k`` channels."""

    values: np.ndarray  # shape (i1, i2, k), float64

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or min(self.values.shape) < 1:
            raise ValueError(f"feature stack needs shape (i1,i2,k) >= 1, got {self.values.shape}")

    @property
    def i1(self) -> int:
        return self.values.shape[0]

    @property
    def i2(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    @classmethod
    def from_image(cls, image: np.ndarray) -> "FeatureStack":
        """Lift a d1 x d2 grey-value grid to a single-channel stack."""
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 2:
            raise ValueError("image must be a 2-d array")
        return cls(image[:, :, None])


@dataclass
class ConvLayerWeights:
    """One convolutional layer: filter of shape (M, M, k_in, k_out) plus bias (k_out,)."""

    filter: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.filter = np.asarray(self.filter, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.filter.ndim != 4 or self.filter.shape[0] != self.filter.shape[1]:
            raise ValueError(f"filter must have shape (M,M,k_in,k_out), got {self.filter.shape}")
        if self.bias.shape != (self.filter.shape[3],):
            raise ValueError("bias length must equal the number of output channels")
        if not (np.isfinite(self.filter).all() and np.isfinite(self.bias).all()):
            raise ValueError("weights must be finite")

    @property
    def filter_size(self) -> int:
        return self.filter.shape[0]

    @property
    def in_channels(self) -> int:
        return self.filter.shape[2]

    @property
    def out_channels(self) -> int:
        return self.filter.shape[3]


@dataclass
class ConvBlock:
    """An ordered chain of convolutional layers sharing filter size and width.

    The first layer maps ``in_channels -> out_channels``, every later layer
    ``out_channels -> out_channels``.  A depth-0 block is allowed and acts as
    the identity; it arises as the degenerate rewrite of a pooling layer of
    size one.
    """

    layers: list[ConvLayerWeights]
    in_channels_hint: int | None = None  # required only for depth-0 blocks

    def __post_init__(self):
        self.layers = list(self.layers)
        if not self.layers:
            if self.in_channels_hint is None:
                raise ValueError("a depth-0 block needs in_channels_hint")
            return
        k_out = self.layers[0].out_channels
        m = self.layers[0].filter_size
        for t, lay in enumerate(self.layers):
            if lay.filter_size != m:
                raise ValueError("all layers of a block must share the filter size")
            if lay.out_channels != k_out:
                raise ValueError("all layers of a block must share the channel count")
            if t > 0 and lay.in_channels != k_out:
                raise ValueError("layer input channels must chain")

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def in_channels(self) -> int:
        return self.layers[0].in_channels if self.layers else self.in_channels_hint

    @property
    def out_channels(self) -> int:
        return self.layers[-1].out_channels if self.layers else self.in_channels_hint

    @property
    def filter_size(self) -> int:
        return self.layers[0].filter_size if self.layers else 1


@dataclass
class WeightGradients:
    """Gradient mirror of a network's weights: one (filter, bias) pair per
    conv layer grouped by block, plus the output-weight vector."""

    blocks: list[list[tuple[np.ndarray, np.ndarray]]]
    out_weights: np.ndarray


# ---------------------------------------------------------------------------
# batched kernels (leading batch axis); these carry the whole numeric load
# ---------------------------------------------------------------------------

def conv_forward_batch(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched convolution; returns (post-ReLU, pre-activation).

    x: (B, i1, i2, k_in), w: (M, M, k_in, k_out), b: (k_out,).
    Accumulation order per output: t1-major, then t2, then input channels.
    """
    bsz, i1, i2, k_in = x.shape
    m = w.shape[0]
    k_out = w.shape[3]
    if w.shape[2] != k_in:
        raise ValueError(f"channel mismatch: input has {k_in}, filter expects {w.shape[2]}")
    pre = np.empty((bsz, i1, i2, k_out))
    pre[...] = b
    for t1 in range(m):
        h = i1 - t1
        if h <= 0:
            break
        for t2 in range(m):
            ww = i2 - t2
            if ww <= 0:
                break
            pre[:, :h, :ww, :] += x[:, t1:, t2:, :] @ w[t1, t2]
    return np.maximum(pre, 0.0), pre


def conv_backward_batch(x, w, pre, g_out):
    """Backward pass of conv_forward_batch.

    Returns (g_x, g_w, g_b).  The ReLU subgradient at 0 is 0.
    """
    bsz, i1, i2, k_in = x.shape
    m = w.shape[0]
    k_out = w.shape[3]
    g_pre = np.where(pre > 0.0, g_out, 0.0)
    g_b = g_pre.sum(axis=(0, 1, 2))
    g_w = np.zeros_like(w)
    g_x = np.zeros_like(x)
    for t1 in range(m):
        h = i1 - t1
        if h <= 0:
            break
        for t2 in range(m):
            ww = i2 - t2
            if ww <= 0:
                break
            xs = x[:, t1:, t2:, :].reshape(-1, k_in)
            gs = g_pre[:, :h, :ww, :].reshape(-1, k_out)
            g_w[t1, t2] = xs.T @ gs
            g_x[:, t1:, t2:, :] += g_pre[:, :h, :ww, :] @ w[t1, t2].T
    return g_x, g_w, g_b


def block_forward_batch(x: np.ndarray, block: ConvBlock, keep_cache: bool = False):
    """Run a conv block; optionally keep (input, pre) caches for backprop."""
    if block.layers and x.shape[3] != block.in_channels:
        raise ValueError(f"channel mismatch: input has {x.shape[3]}, block expects {block.in_channels}")
    cache = []
    for lay in block.layers:
        out, pre = conv_forward_batch(x, lay.filter, lay.bias)
        if keep_cache:
            cache.append((x, pre))
        x = out
    return (x, cache) if keep_cache else x


def block_backward_batch(block: ConvBlock, cache, g_out):
    grads = []
    for lay, (x_in, pre) in zip(reversed(block.layers), reversed(cache)):
        g_out, g_w, g_b = conv_backward_batch(x_in, lay.filter, pre, g_out)
        grads.append((g_w, g_b))
    grads.reverse()
    return g_out, grads


def pooled_shape(i1: int, i2: int, s: int) -> tuple[int, int]:
    return (-(-i1 // s), -(-i2 // s))


def maxpool_forward_batch(x: np.ndarray, s: int):
    """Window max over clipped s x s windows; returns (out, row_offset, col_offset).

    The recorded offsets identify, per output, the first maximiser in
    row-major window order (the subgradient convention).
    """
    bsz, i1, i2, k = x.shape
    o1, o2 = pooled_shape(i1, i2, s)
    out = np.full((bsz, o1, o2, k), -np.inf)
    usel = np.zeros((bsz, o1, o2, k), dtype=np.int64)
    vsel = np.zeros((bsz, o1, o2, k), dtype=np.int64)
    for u in range(s):
        if u >= i1:
            break
        for v in range(s):
            if v >= i2:
                break
            sub = x[:, u::s, v::s, :]
            h, ww = sub.shape[1], sub.shape[2]
            better = sub > out[:, :h, :ww, :]
            if better.any():
                region = out[:, :h, :ww, :]
                region[better] = sub[better]
                usel[:, :h, :ww, :][better] = u
                vsel[:, :h, :ww, :][better] = v
    return out, usel, vsel


def maxpool_backward_batch(g_out, usel, vsel, s, in_shape):
    bsz, i1, i2, k = in_shape
    o1, o2 = g_out.shape[1], g_out.shape[2]
    g_x = np.zeros(in_shape)
    bb, oi, oj, cc = np.indices(g_out.shape, sparse=False)
    rows = oi * s + usel
    cols = oj * s + vsel
    np.add.at(g_x, (bb, rows, cols, cc), g_out)
    return g_x


def subsample_forward_batch(x: np.ndarray, s: int) -> np.ndarray:
    """Keep the top-left value of each s x s window."""
    return x[:, ::s, ::s, :].copy()


def subsample_backward_batch(g_out, s, in_shape):
    g_x = np.zeros(in_shape)
    g_x[:, ::s, ::s, :] = g_out
    return g_x


def output_forward_batch(x: np.ndarray, w_out: np.ndarray, d_tilde: tuple[int, int]):
    """Global max over the d_tilde window of the per-position linear combination."""
    d1t, d2t = d_tilde
    bsz, i1, i2, k = x.shape
    if not (1 <= d1t <= i1 and 1 <= d2t <= i2):
        raise ValueError(f"output window {d_tilde} exceeds grid ({i1},{i2})")
    lin = x[:, :d1t, :d2t, :] @ w_out
    flat = lin.reshape(bsz, -1)
    arg = flat.argmax(axis=1)  # first maximiser in row-major order
    vals = flat[np.arange(bsz), arg]
    return vals, arg


def output_backward_batch(x, w_out, d_tilde, arg, g_val):
    d1t, d2t = d_tilde
    bsz = x.shape[0]
    ai, aj = np.divmod(arg, d2t)
    g_x = np.zeros_like(x)
    g_x[np.arange(bsz), ai, aj, :] = g_val[:, None] * w_out
    g_w = (g_val[:, None] * x[np.arange(bsz), ai, aj, :]).sum(axis=0)
    return g_x, g_w


# ---------------------------------------------------------------------------
# single-stack layer operations
# ---------------------------------------------------------------------------

def conv_layer_forward(stack: FeatureStack, w: ConvLayerWeights) -> FeatureStack:
    """Apply one convolutional layer (ReLU activation, zero padding)."""
    out, _ = conv_forward_batch(stack.values[None], w.filter, w.bias)
    return FeatureStack(out[0])


def conv_block_forward(stack: FeatureStack, block: ConvBlock) -> FeatureStack:
    """Compose the block's layers left to right."""
    return FeatureStack(block_forward_batch(stack.values[None], block)[0])


def local_max_pool(stack: FeatureStack, s: int) -> FeatureStack:
    """Max over clipped s x s windows; output grid (ceil(i1/s), ceil(i2/s))."""
    if s < 1:
        raise ValueError("pool size must be >= 1")
    out, _, _ = maxpool_forward_batch(stack.values[None], s)
    return FeatureStack(out[0])


def subsample(stack: FeatureStack, s: int) -> FeatureStack:
    """Keep the top-left entry of each s x s window."""
    if s < 1:
        raise ValueError("subsampling size must be >= 1")
    return FeatureStack(subsample_forward_batch(stack.values[None], s)[0])


def output_layer(stack: FeatureStack, w_out: np.ndarray, d_tilde: tuple[int, int]) -> float:
    """Max over the d_tilde window of the channel combination sum_s w_s * x[(i,j),s]."""
    w_out = np.asarray(w_out, dtype=np.float64)
    if w_out.shape != (stack.channels,):
        raise ValueError("output weight length must equal the channel count")
    vals, _ = output_forward_batch(stack.values[None], w_out, tuple(d_tilde))
    return float(vals[0])


# ---------------------------------------------------------------------------
# whole-network forward/backward (net is duck-typed: arch, blocks, out_weights)
# ---------------------------------------------------------------------------

def _plan(net):
    """Yield the pooling plan as (kind, size) entries between/after blocks."""
    arch = net.arch
    if arch.variant in ("F1", "F2"):
        kind = "max" if arch.variant == "F1" else "sub"
        between = [(kind, s) for s in arch.pool_sizes]
        return between, None
    return [None] * (arch.num_blocks - 1), ("sub", arch.pool_scalar)


def network_forward_batch(net, images: np.ndarray, keep_cache: bool = False):
    """Evaluate a network on a batch of images (B, d1, d2) -> values (B,)."""
    x = np.asarray(images, dtype=np.float64)[:, :, :, None]
    between, trailing = _plan(net)
    tape = []
    for r, block in enumerate(net.blocks):
        if keep_cache:
            x, cache = block_forward_batch(x, block, keep_cache=True)
            tape.append(("block", block, cache))
        else:
            x = block_forward_batch(x, block)
        if r < len(net.blocks) - 1 and between[r] is not None:
            x, tape = _apply_pool(x, between[r], tape, keep_cache)
    if trailing is not None:
        x, tape = _apply_pool(x, trailing, tape, keep_cache)
    vals, arg = output_forward_batch(x, net.out_weights, net.arch.out_bounds)
    if keep_cache:
        tape.append(("out", x, arg))
        return vals, tape
    return vals


def _apply_pool(x, pool, tape, keep_cache):
    kind, s = pool
    if kind == "max":
        out, usel, vsel = maxpool_forward_batch(x, s)
        if keep_cache:
            tape.append(("max", s, x.shape, usel, vsel))
    else:
        out = subsample_forward_batch(x, s)
        if keep_cache:
            tape.append(("sub", s, x.shape))
    return out, tape


def network_backward_batch(net, tape, g_vals):
    """Reverse the tape from network_forward_batch; returns WeightGradients."""
    kind, x_last, arg = tape[-1]
    assert kind == "out"
    g, g_w_out = output_backward_batch(x_last, net.out_weights, net.arch.out_bounds, arg, g_vals)
    block_grads = []
    for entry in reversed(tape[:-1]):
        if entry[0] == "block":
            _, block, cache = entry
            g, grads = block_backward_batch(block, cache, g)
            block_grads.append(grads)
        elif entry[0] == "max":
            _, s, in_shape, usel, vsel = entry
            g = maxpool_backward_batch(g, usel, vsel, s, in_shape)
        else:
            _, s, in_shape = entry
            g = subsample_backward_batch(g, s, in_shape)
    block_grads.reverse()
    return WeightGradients(blocks=block_grads, out_weights=g_w_out)


def loss_and_gradients(net, batch) -> tuple[float, WeightGradients]:
    """Mean squared loss over a labelled batch and its exact gradient.

    batch: sequence of (image, label) pairs with labels in {0, 1}, or a pair
    of arrays (images, labels).  Gradients follow the tie conventions in the
    module docstring; the batch reduction order is fixed by the batch order.
    """
    if isinstance(batch, tuple) and len(batch) == 2:
        images, labels = batch
    else:
        if len(batch) == 0:
            raise ValueError("batch must be nonempty")
        images = np.stack([np.asarray(img, dtype=np.float64) for img, _ in batch])
        labels = np.array([y for _, y in batch], dtype=np.float64)
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if images.shape[0] == 0:
        raise ValueError("batch must be nonempty")
    vals, tape = network_forward_batch(net, images, keep_cache=True)
    resid = vals - labels
    loss = float(np.mean(resid**2))
    g_vals = 2.0 * resid / images.shape[0]
    return loss, network_backward_batch(net, tape, g_vals)

"""Constructive, output-preserving network rewrites.

Each rewrite replaces a structural element of a network by convolutional
machinery while keeping the computed function identical on every input:

* ``build_gmax`` - a tiny ReLU net computing the max of four nonnegative
  numbers, the workhorse of pooling elimination.
* ``embed_feedforward`` - runs a 4-ary feedforward net at every grid
  position inside a convolutional block, reading four taps offset by a
  stride ``delta``.
* ``maxpool_to_conv_sub`` - a conv block after which plain subsampling
  reproduces local max-pooling on the preserved channels.
* ``commute_subsample`` - dilates a block's filters so it can swap order
  with a subsampling layer.
* ``convert_f1_to_f2`` / ``convert_f2_to_f3`` - whole-network class
  conversions built from the pieces above.
* ``represent_hmp`` - an F1 network computing the relaxed hierarchical
  max-pooling model exactly.

Scratch-channel layout inside rewritten blocks: original channels first,
then one copy channel per original, then the four g_max work channels.
Everything flowing through these constructions is nonnegative, which is what
lets a ReLU convolution propagate values unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .layers import ConvBlock, ConvLayerWeights
from .model import HmpSpec, SpecError, delta as model_delta, dims as model_dims, validate_spec
from .networks import ArchSpec, Network


@dataclass
class FeedforwardNet:
    """A standard ReLU net with 4 inputs, L_net hidden layers of width r_net,
    and a linear scalar output.  Callable on four broadcastable arrays."""

    hidden_weights: list[np.ndarray]  # first (r_net, 4), then (r_net, r_net)
    hidden_biases: list[np.ndarray]
    out_weights: np.ndarray
    out_bias: float = 0.0

    def __post_init__(self):
        self.hidden_weights = [np.asarray(w, dtype=np.float64) for w in self.hidden_weights]
        self.hidden_biases = [np.asarray(b, dtype=np.float64) for b in self.hidden_biases]
        self.out_weights = np.asarray(self.out_weights, dtype=np.float64)
        if not self.hidden_weights or self.hidden_weights[0].shape[1] != 4:
            raise ValueError("need at least one hidden layer over 4 inputs")
        w = self.width
        for t, (wt, bt) in enumerate(zip(self.hidden_weights, self.hidden_biases)):
            expect = 4 if t == 0 else w
            if wt.shape != (w, expect) or bt.shape != (w,):
                raise ValueError(f"hidden layer {t} has shape {wt.shape}, expected ({w},{expect})")
        if self.out_weights.shape != (w,):
            raise ValueError("output weights must match the hidden width")

    @property
    def depth(self) -> int:
        return len(self.hidden_weights)

    @property
    def width(self) -> int:
        return self.hidden_weights[0].shape[0]

    def __call__(self, u1, u2, u3, u4):
        x = np.stack(np.broadcast_arrays(
            np.asarray(u1, dtype=np.float64), np.asarray(u2, dtype=np.float64),
            np.asarray(u3, dtype=np.float64), np.asarray(u4, dtype=np.float64)), axis=-1)
        h = x
        for w, b in zip(self.hidden_weights, self.hidden_biases):
            h = np.maximum(h @ w.T + b, 0.0)
        return h @ self.out_weights + self.out_bias


def random_ffnet(rng: np.random.Generator, depth: int, width: int, scale: float = 1.0) -> FeedforwardNet:
    ws, bs = [], []
    for t in range(depth):
        fan = 4 if t == 0 else width
        ws.append(rng.uniform(-scale / math.sqrt(fan), scale / math.sqrt(fan), size=(width, fan)))
        bs.append(rng.uniform(-0.1, 0.1, size=width))
    out = rng.uniform(-scale / math.sqrt(width), scale / math.sqrt(width), size=width)
    return FeedforwardNet(ws, bs, out, float(rng.uniform(-0.1, 0.1)))


def build_gmax() -> FeedforwardNet:
    """Two-hidden-layer net with max(a,b) = relu(b-a) + relu(a) applied twice:
    equals max(x1,x2,x3,x4) whenever all inputs are nonnegative."""
    w0 = np.array([[-1.0, 1.0, 0.0, 0.0],
                   [1.0, 0.0, 0.0, 0.0],
                   [0.0, 0.0, -1.0, 1.0],
                   [0.0, 0.0, 1.0, 0.0]])
    w1 = np.array([[1.0, 1.0, -1.0, -1.0],
                   [0.0, 0.0, 1.0, 1.0],
                   [0.0, 0.0, 0.0, 0.0],
                   [0.0, 0.0, 0.0, 0.0]])
    zero = np.zeros(4)
    return FeedforwardNet([w0, w1], [zero, zero.copy()], np.array([1.0, 1.0, 0.0, 0.0]), 0.0)


# ---------------------------------------------------------------------------
# building bricks
# ---------------------------------------------------------------------------

def propagation_layer(channels: int, filter_size: int = 1, in_channels: int | None = None,
                      sources: dict[int, int] | None = None) -> ConvLayerWeights:
    """A layer whose channel c outputs relu of input channel ``sources[c]``
    (default c itself); exact propagation for nonnegative stacks.  Channels
    whose source does not exist in the input output zero."""
    if in_channels is None:
        in_channels = channels
    filt = np.zeros((filter_size, filter_size, in_channels, channels))
    sources = sources or {}
    for c in range(1, channels + 1):
        src = sources.get(c, c)
        if src is not None and 1 <= src <= in_channels:
            filt[0, 0, src - 1, c - 1] = 1.0
    return ConvLayerWeights(filt, np.zeros(channels))


def _retarget(layer: ConvLayerWeights, out_channel: int, source_channel: int):
    """Rewire one output channel to propagate a different input channel."""
    layer.filter[..., out_channel - 1] = 0.0
    layer.filter[0, 0, source_channel - 1, out_channel - 1] = 1.0
    layer.bias[out_channel - 1] = 0.0


def embed_feedforward(g: FeedforwardNet, t: int, channels: tuple[int, int, int, int, int],
                      delta: int, index_set: tuple[int, int], total_channels: int,
                      in_channels: int | None = None, filter_size: int | None = None) -> ConvBlock:
    """Conv block of depth L_net+1 whose output channel s5 equals
    relu(g(f[(i,j),s1], f[(i+delta,j),s2], f[(i,j+delta),s3], f[(i+delta,j+delta),s4]))
    at every position, with out-of-range taps read as zero.

    Channels 1..t other than s5 keep their values (propagation weights) by
    default; the last ``g.width`` channels are scratch space for g's hidden
    units and are zeroed in the final layer.
    """
    s1, s2, s3, s4, s5 = channels
    if total_channels != t + g.width:
        raise ValueError(f"total_channels must be t + net width = {t + g.width}")
    for s in (s1, s2, s3, s4, s5):
        if not 1 <= s <= t:
            raise ValueError(f"tap/output channels must lie in 1..{t}")
    if delta < 1:
        raise ValueError("tap offset delta must be >= 1")
    if min(index_set) < 1:
        raise ValueError("index set dimensions must be >= 1")
    m = filter_size if filter_size is not None else delta + 1
    if m < delta + 1:
        raise ValueError(f"filter size {m} too small for tap offset {delta}")
    if in_channels is None:
        in_channels = total_channels

    layers = []
    # first layer: four strided taps feed g's first hidden layer
    lay = propagation_layer(total_channels, m, in_channels)
    w0, b0 = g.hidden_weights[0], g.hidden_biases[0]
    for i in range(g.width):
        out = t + i
        lay.filter[..., out] = 0.0
        for (di, dj, src, col) in ((0, 0, s1, 0), (delta, 0, s2, 1), (0, delta, s3, 2), (delta, delta, s4, 3)):
            if src <= in_channels:
                lay.filter[di, dj, src - 1, out] += w0[i, col]
            elif w0[i, col] != 0.0:
                raise ValueError(f"tap channel {src} missing from the {in_channels}-channel input")
        lay.bias[out] = b0[i]
    layers.append(lay)
    # middle layers: g's hidden recursion in the scratch channels
    for r in range(1, g.depth):
        lay = propagation_layer(total_channels, m)
        wr, br = g.hidden_weights[r], g.hidden_biases[r]
        for i in range(g.width):
            out = t + i
            lay.filter[..., out] = 0.0
            for j in range(g.width):
                lay.filter[0, 0, t + j, out] = wr[i, j]
            lay.bias[out] = br[i]
        layers.append(lay)
    # final layer: linear readout into channel s5, scratch zeroed
    lay = propagation_layer(total_channels, m)
    lay.filter[..., s5 - 1] = 0.0
    for j in range(g.width):
        lay.filter[0, 0, t + j, s5 - 1] = g.out_weights[j]
    lay.bias[s5 - 1] = g.out_bias
    for i in range(g.width):
        lay.filter[..., t + i] = 0.0
        lay.bias[t + i] = 0.0
    layers.append(lay)
    return ConvBlock(layers)


def maxpool_to_conv_sub(k: int, n: int, filter_size: int, index_set: tuple[int, int]) -> ConvBlock:
    """Conv block B on 2k+4 channels with 3*n*k layers such that subsampling
    B's output by 2^n equals max-pooling the input by 2^n on channels 1..k,
    for every nonnegative input stack.

    Stage r doubles the aggregated window: channels 1..k hold running
    window maxima, channels k+1..2k hold stage-start copies, channels
    2k+1..2k+4 are g_max workspace.
    """
    if k < 1 or n < 0:
        raise ValueError("need k >= 1 and n >= 0")
    total = 2 * k + 4
    if n == 0:
        return ConvBlock([], in_channels_hint=total)
    if filter_size < 2 ** (n - 1) + 1:
        raise ValueError(f"filter size {filter_size} < {2 ** (n - 1) + 1} cannot reach the required taps")
    gmax = build_gmax()
    layers: list[ConvLayerWeights] = []
    for r in range(n):
        stage_first = len(layers)
        for s in range(1, k + 1):
            src = s if s == 1 else k + s
            sub = embed_feedforward(gmax, 2 * k, (src, src, src, src, s), 2**r,
                                    index_set, total, filter_size=filter_size)
            layers.extend(sub.layers)
        # stage start refreshes the copy channels from the current maxima
        for c in range(1, k + 1):
            _retarget(layers[stage_first], k + c, c)
    return ConvBlock(layers)


def commute_subsample(block: ConvBlock, n: int) -> ConvBlock:
    """Dilate the block's filters by n so that subsampling by n afterwards
    equals applying the original block after subsampling by n:
    sub_n(dilated(f)) == block(sub_n(f)) for every stack f."""
    if n < 1:
        raise ValueError("subsampling size must be >= 1")
    if n == 1 or not block.layers:
        return ConvBlock([ConvLayerWeights(l.filter.copy(), l.bias.copy()) for l in block.layers],
                         in_channels_hint=block.in_channels_hint)
    m = block.filter_size
    m_new = (m - 1) * n + 1
    layers = []
    for lay in block.layers:
        filt = np.zeros((m_new, m_new, lay.in_channels, lay.out_channels))
        filt[::n, ::n] = lay.filter  # taps at ((t1-1)n+1, (t2-1)n+1)
        layers.append(ConvLayerWeights(filt, lay.bias.copy()))
    return ConvBlock(layers)


# ---------------------------------------------------------------------------
# class conversions
# ---------------------------------------------------------------------------

def _widen_layer(lay: ConvLayerWeights, in_new: int, out_new: int) -> ConvLayerWeights:
    """Embed a layer into a wider one: original weights kept, all weights
    touching new channels zero (new channels output zero)."""
    filt = np.zeros((lay.filter_size, lay.filter_size, in_new, out_new))
    filt[:, :, : lay.in_channels, : lay.out_channels] = lay.filter
    bias = np.zeros(out_new)
    bias[: lay.out_channels] = lay.bias
    return ConvLayerWeights(filt, bias)


def convert_f1_to_f2(net: Network) -> Network:
    """Replace every local max-pooling layer by conv machinery + subsampling.

    Channels widen to 2k+4, depth grows to z + 3*max(k)*max(log2 s), the
    output weights are zero-extended; the returned F2 network computes the
    same value as ``net`` on every image.
    """
    arch = net.arch
    if arch.variant != "F1":
        raise SpecError(f"expected an F1 network, got {arch.variant}")
    pools = arch.pool_sizes
    exps = []
    for r, s in enumerate(pools, start=1):
        if s & (s - 1):
            raise SpecError(f"pool size s_{r}={s} is not a power of two")
        e = int(math.log2(s))
        if s > 1 and arch.filter_sizes[r - 1] < 2 ** (e - 1) + 1:
            raise SpecError(f"filter size M_{r}={arch.filter_sizes[r - 1]} too small to "
                            f"rewrite pooling of size {s}")
        exps.append(e)
    k_bar = tuple(2 * kr + 4 for kr in arch.channels)
    extra = 3 * max(arch.channels) * (max(exps) if exps else 0)
    z_bar = arch.layers_per_block + extra

    grid = arch.input_dims
    blocks = []
    k_prev_new = 1
    for r, (blk, k_r, m_r) in enumerate(zip(net.blocks, arch.channels, arch.filter_sizes), start=1):
        layers = [_widen_layer(lay,
                               k_prev_new if t == 0 else k_bar[r - 1],
                               k_bar[r - 1])
                  for t, lay in enumerate(blk.layers)]
        if r < arch.num_blocks and pools[r - 1] > 1:
            rewrite = maxpool_to_conv_sub(k_r, exps[r - 1], m_r, grid)
            layers.extend(rewrite.layers)
        while len(layers) < z_bar:
            layers.append(propagation_layer(k_bar[r - 1], m_r))
        blocks.append(ConvBlock(layers))
        if r < arch.num_blocks:
            s = pools[r - 1]
            grid = (-(-grid[0] // s), -(-grid[1] // s))
        k_prev_new = k_bar[r - 1]
    out = np.zeros(k_bar[-1])
    out[: arch.channels[-1]] = net.out_weights
    arch2 = ArchSpec("F2", k_bar, arch.filter_sizes, z_bar, pools, arch.out_bounds, arch.input_dims)
    return Network(arch2, blocks, out)


def convert_f2_to_f3(net: Network) -> Network:
    """Push every subsampling layer past the later conv blocks by filter
    dilation, then merge them into a single trailing subsampling layer of
    size prod(s_i).  Output-identical to ``net`` on every image."""
    arch = net.arch
    if arch.variant != "F2":
        raise SpecError(f"expected an F2 network, got {arch.variant}")
    pools = arch.pool_sizes
    for s in pools:
        if s & (s - 1):
            raise SpecError(f"pool size {s} is not a power of two")
    blocks = [ConvBlock([ConvLayerWeights(l.filter.copy(), l.bias.copy()) for l in b.layers])
              for b in net.blocks]
    L = arch.num_blocks
    # bubble each subsampling layer (rightmost first) past all blocks after it
    for i in range(L - 1, 0, -1):
        for r in range(i + 1, L + 1):
            blocks[r - 1] = commute_subsample(blocks[r - 1], pools[i - 1])
    s_total = math.prod(pools) if pools else 1
    new_m = tuple(b.filter_size for b in blocks)
    arch3 = ArchSpec("F3", arch.channels, new_m, arch.layers_per_block, s_total,
                     arch.out_bounds, arch.input_dims)
    return Network(arch3, blocks, net.out_weights.copy())


# ---------------------------------------------------------------------------
# exact representation of the relaxed hierarchy
# ---------------------------------------------------------------------------

def represent_hmp(spec: HmpSpec, d1: int, d2: int) -> Network:
    """F1 network computing the relaxed model (ReLU after each g) exactly.

    Requires image dimensions of the form 2^l * m - 1 (so pooling windows
    tile the valid feature-map region) and all combination functions given
    as feedforward nets of one shared shape.
    """
    rep = validate_spec(spec, d1, d2)
    if not rep.ok:
        raise SpecError("spec invalid for this image size:\n" + str(rep))
    if not rep.passed("exact_rep_dim_form"):
        raise SpecError("image dimensions must be of the form 2^l * m - 1 with m >= 2")
    l = spec.level
    nets = {}
    shape = None
    for key, g in spec.g_funcs.items():
        if not isinstance(g, FeedforwardNet):
            raise SpecError(f"g function {key} is not a feedforward net")
        if shape is None:
            shape = (g.depth, g.width)
        elif (g.depth, g.width) != shape:
            raise SpecError("all g nets must share depth and width")
        nets[key] = g
    l_net, r_net = shape
    b_max = max(spec.b(k) for k in range(1, l + 1))
    t = 2 * b_max
    total = t + r_net
    z = b_max * (l_net + 1)

    grid = (d1, d2)
    blocks = []
    for r in range(1, l + 1):
        dlt = model_delta(r - 1, spec)
        m_r = dlt + 1
        in_ch = 1 if r == 1 else total
        b_prev, b_cur = spec.b(r - 1), spec.b(r)
        layers: list[ConvLayerWeights] = []
        for s in range(1, b_cur + 1):
            r1, r2, r3, r4 = spec.wiring[(r, s)]
            off = 0 if s == 1 else b_max
            sub = embed_feedforward(nets[(r, s)], t,
                                    (off + r1, off + r2, off + r3, off + r4, s),
                                    dlt, grid, total,
                                    in_channels=in_ch if s == 1 else total,
                                    filter_size=m_r)
            layers.extend(sub.layers)
        # block entry refreshes the copy channels from the previous level
        for c in range(1, b_prev + 1):
            if c <= layers[0].in_channels:
                _retarget(layers[0], b_max + c, c)
        while len(layers) < z:
            layers.append(propagation_layer(total, m_r))
        blocks.append(ConvBlock(layers))
        n_r = spec.n(r)
        grid = (-(-grid[0] // n_r), -(-grid[1] // n_r))

    d_tilde = model_dims(l, d1, d2, spec)
    out = np.zeros(total)
    out[0] = 1.0
    arch = ArchSpec("F1", tuple(total for _ in range(l)), tuple(model_delta(r - 1, spec) + 1 for r in range(1, l + 1)),
                    z, spec.pooling, d_tilde, (d1, d2))
    return Network(arch, blocks, out)

"""Least-squares training, plug-in classification, and data-driven
architecture selection by splitting of the sample.

Training minimises the empirical squared risk with mini-batch Adam.  Runs
are deterministic given (seed, data order): initialisation, batch shuffling
and the update order of the weight tensors are all fixed functions of the
seed.  The idealised minimiser is approximated, not found exactly.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .layers import loss_and_gradients
from .networks import ArchSpec, Network, forward, forward_many, param_count, random_network, table1_params


class GridEmptyError(ValueError):
    """Every candidate architecture was rejected by the weight guard."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 200
    batch_size: int = 32
    init_scheme: str = "uniform_fan_in"
    seed: int = 0
    c4: float = 1.0               # truncation level beta = max(1, c4 * log n)
    beta_trunc: float | None = None  # explicit override for beta
    restarts: int = 1

    def __post_init__(self):
        if min(self.learning_rate, self.eps, self.epochs + 1, self.batch_size, self.restarts) <= 0:
            raise ValueError("config entries must be positive (epochs may be 0)")
        if self.beta_trunc is not None and self.beta_trunc < 1:
            raise ValueError("truncation level must be >= 1")


def truncation_level(cfg: TrainConfig, n: int) -> float:
    if cfg.beta_trunc is not None:
        return cfg.beta_trunc
    return max(1.0, cfg.c4 * math.log(max(n, 2)))


def truncate(value: float, beta: float) -> float:
    """Clamp to [-beta, beta]."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    return max(-beta, min(beta, value))


def plugin_classify(net: Network, beta: float, x) -> int:
    """Label 1 iff the truncated network value is >= 1/2 (ties go to 1)."""
    return int(truncate(forward(net, x), beta) >= 0.5)


def plugin_classify_many(net: Network, beta: float, images: np.ndarray) -> np.ndarray:
    vals = np.clip(forward_many(net, images), -beta, beta)
    return (vals >= 0.5).astype(np.int64)


def _as_xy(data) -> tuple[np.ndarray, np.ndarray]:
    if hasattr(data, "images") and hasattr(data, "labels"):
        return np.asarray(data.images, dtype=np.float64), np.asarray(data.labels, dtype=np.float64)
    if isinstance(data, tuple) and len(data) == 2:
        return np.asarray(data[0], dtype=np.float64), np.asarray(data[1], dtype=np.float64)
    images = np.stack([np.asarray(img, dtype=np.float64) for img, _ in data])
    labels = np.array([y for _, y in data], dtype=np.float64)
    return images, labels


def empirical_l2_risk(net: Network, data) -> float:
    """(1/n) sum |y_i - f(x_i)|^2."""
    images, labels = _as_xy(data)
    if len(labels) == 0:
        raise ValueError("data must be nonempty")
    return float(np.mean((labels - forward_many(net, images)) ** 2))


def empirical_misclassification(net: Network, beta: float, test) -> float:
    """Fraction of test points where the plug-in label disagrees with y."""
    images, labels = _as_xy(test)
    if len(labels) == 0:
        raise ValueError("test data must be nonempty")
    pred = plugin_classify_many(net, beta, images)
    return float(np.mean(pred != labels.astype(np.int64)))


def _adam_run(arch: ArchSpec, images, labels, cfg: TrainConfig, rng) -> tuple[Network, float]:
    net = random_network(arch, rng)
    params = net.weight_arrays()
    m_state = [np.zeros_like(p) for p in params]
    v_state = [np.zeros_like(p) for p in params]
    n = images.shape[0]
    bs = min(cfg.batch_size, n)
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            loss, grads = loss_and_gradients(net, (images[idx], labels[idx]))
            if not math.isfinite(loss):
                raise RuntimeError(f"training diverged (non-finite loss) at epoch {epoch}, "
                                   f"batch offset {start}; lower the learning rate")
            flat = []
            for block_grads in grads.blocks:
                for g_w, g_b in block_grads:
                    flat.append(g_w)
                    flat.append(g_b)
            flat.append(grads.out_weights)
            step += 1
            corr1 = 1.0 - cfg.beta1**step
            corr2 = 1.0 - cfg.beta2**step
            for p, g, m, v in zip(params, flat, m_state, v_state):
                m *= cfg.beta1
                m += (1.0 - cfg.beta1) * g
                v *= cfg.beta2
                v += (1.0 - cfg.beta2) * g * g
                p -= cfg.learning_rate * (m / corr1) / (np.sqrt(v / corr2) + cfg.eps)
    risk = float(np.mean((labels - forward_many(net, images)) ** 2))
    return net, risk


def train(arch: ArchSpec, data, cfg: TrainConfig) -> Network:
    """Mini-batch Adam on the squared loss; among cfg.restarts independent
    runs the one with the lowest final training risk is returned."""
    if cfg.init_scheme != "uniform_fan_in":
        raise ValueError(f"unknown init scheme {cfg.init_scheme!r}")
    images, labels = _as_xy(data)
    n = images.shape[0]
    if n == 0:
        raise ValueError("training data must be nonempty")
    w = param_count(arch)
    if w > n:
        warnings.warn(f"architecture has {w} weights but only {n} samples", stacklevel=2)
    best = None
    for r in range(cfg.restarts):
        rng = np.random.default_rng([cfg.seed, r])
        net, risk = _adam_run(arch, images, labels, cfg, rng)
        if best is None or risk < best[1]:
            best = (net, risk)
    return best[0]


# ---------------------------------------------------------------------------
# splitting-of-the-sample model selection
# ---------------------------------------------------------------------------

def admissible_pool_vectors(l: int) -> tuple[tuple[int, ...], ...]:
    """All pooling vectors (n_1..n_{l-1}) with n_r a power of two, n_r <= 2^r
    and running product bounded by 2^r, in lexicographic order."""
    vectors: list[tuple[int, ...]] = []

    def extend(prefix: tuple[int, ...], prod: int):
        r = len(prefix) + 1
        if r > l - 1:
            vectors.append(prefix)
            return
        size = 1
        while size <= 2**r and prod * size <= 2**r:
            extend(prefix + (size,), prod * size)
            size *= 2

    extend((), 1)
    return tuple(vectors)


@dataclass(frozen=True)
class SelectionGrid:
    """Candidate hyperparameters of the adaptive choice: level, pooling
    vector, channel count, block depth, and classifier index."""

    levels: tuple[int, ...] = (3, 4)
    channels: tuple[int, ...] = (2, 4, 8)
    depths: tuple[int, ...] = (1, 2, 3)
    classifiers: tuple[int, ...] = (1, 2, 3, 4)

    def candidates(self, d1: int, d2: int):
        """Yield (j, l, n, k, z, arch) in canonical order, deduplicating
        candidates whose architectures coincide (distinct pooling vectors
        with one product collapse for classifiers 3 and 4)."""
        seen = set()
        for j in sorted(self.classifiers):
            for l in sorted(self.levels):
                for n in admissible_pool_vectors(l):
                    for k in sorted(self.channels):
                        for z in sorted(self.depths):
                            arch = table1_params(j, l, n, k, z, d1, d2)
                            key = (arch.variant, arch.channels, arch.filter_sizes,
                                   arch.layers_per_block, arch.pool, arch.out_bounds)
                            if key in seen:
                                continue
                            seen.add(key)
                            yield j, l, n, k, z, arch


@dataclass
class CandidateReport:
    j: int
    l: int
    n: tuple[int, ...]
    k: int
    z: int
    weights: int
    train_risk: float | None = None
    test_err: float | None = None
    selected: bool = False
    admissible: bool = True


def format_selection_report(reports: list[CandidateReport]) -> str:
    """One candidate per line: ``j l n-vector k z W train_risk test_err selected?``."""
    lines = []
    for r in reports:
        nvec = ",".join(str(v) for v in r.n) if r.n else "-"
        tr = f"{r.train_risk:.6f}" if r.train_risk is not None else "skipped"
        te = f"{r.test_err:.6f}" if r.test_err is not None else "skipped"
        lines.append(f"{r.j} {r.l} {nvec} {r.k} {r.z} {r.weights} {tr} {te} "
                     f"{'selected' if r.selected else '-'}")
    return "\n".join(lines) + "\n"


def _derived_seed(master: int, *tags: int) -> int:
    return int(np.random.SeedSequence([master, *tags]).generate_state(1)[0])


def model_select(grid: SelectionGrid, data, cfg: TrainConfig,
                 weight_guard: bool | str = True) -> tuple[Network, list[CandidateReport]]:
    """Split the sample (first floor(4n/5) points learn, rest test), train
    every admissible candidate on the learning part, pick the one with the
    smallest empirical misclassification risk on the testing part (ties go
    to the first candidate in canonical grid order), and retrain the winner
    on all n points.

    ``weight_guard``: True enforces W <= n and raises GridEmptyError if
    nothing survives; "min-fallback" falls back to the candidates of
    minimal weight count in that case; False disables the guard.
    """
    images, labels = _as_xy(data)
    n = images.shape[0]
    if n < 5:
        raise ValueError("need at least 5 samples to split")
    n_learn = (4 * n) // 5
    learn = (images[:n_learn], labels[:n_learn])
    test = (images[n_learn:], labels[n_learn:])

    d1, d2 = images.shape[1], images.shape[2]
    cands = list(grid.candidates(d1, d2))
    if not cands:
        raise GridEmptyError("selection grid is empty")
    weights = [param_count(arch) for *_, arch in cands]
    if weight_guard is True:
        admissible = [w <= n for w in weights]
        if not any(admissible):
            raise GridEmptyError(f"all {len(cands)} candidates exceed the weight guard W <= {n}")
    elif weight_guard == "min-fallback":
        admissible = [w <= n for w in weights]
        if not any(admissible):
            w_min = min(weights)
            admissible = [w == w_min for w in weights]
    elif weight_guard is False:
        admissible = [True] * len(cands)
    else:
        raise ValueError(f"weight_guard must be True, False or 'min-fallback', got {weight_guard!r}")

    beta = truncation_level(cfg, n_learn)
    reports = []
    results = []
    for idx, ((j, l, nvec, k, z, arch), w, ok) in enumerate(zip(cands, weights, admissible)):
        rep = CandidateReport(j, l, nvec, k, z, w, admissible=ok)
        reports.append(rep)
        if not ok:
            continue
        cand_cfg = replace(cfg, seed=_derived_seed(cfg.seed, idx))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")  # guard-off runs trip the W > n warning
            net = train(arch, learn, cand_cfg)
        rep.train_risk = empirical_l2_risk(net, learn)
        rep.test_err = empirical_misclassification(net, beta, test)
        results.append((idx, rep.test_err))
    if not results:
        raise GridEmptyError("no candidate was trained")
    best_idx = min(results, key=lambda t: t[1])[0]  # min is stable: first wins ties
    reports[best_idx].selected = True
    j, l, nvec, k, z, arch = cands[best_idx]
    final_cfg = replace(cfg, seed=_derived_seed(cfg.seed, best_idx, 1))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        final_net = train(arch, data, final_cfg)
    return final_net, reports

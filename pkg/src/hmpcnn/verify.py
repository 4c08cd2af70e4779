"""Randomised verification suites for the structural identities.

Each check builds random instances, runs the claimed identity through two
independent routes, and reports the worst deviation.  Check names are the
stable identifiers used by the command-line ``verify`` driver:

* lemma1 - pooling elimination: subsample(rewrite-block(f)) == maxpool(f)
* lemma2 - feedforward-net embedding inside a conv block
* lemma3 - subsampling commutes with a filter-dilated block
* lemma4 - the two ceiling identities, exhaustively
* lemma5 - class conversions F1 -> F2 -> F3 preserve outputs and sizes
* lemma6 - perturbing the combination functions moves the model value by at
  most (2C+1)^(l-1) times the perturbation
* lemma7 - the F1 representation equals the relaxed model
* lemma8 - closed form of the feature-map dimensions, exhaustively
* gradcheck - analytic gradients against central finite differences

``sabotage=True`` injects a small fault so the harness can prove it would
catch a broken identity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import layers, model, networks, transforms
from .layers import ConvBlock, ConvLayerWeights, FeatureStack
from .training import admissible_pool_vectors

DEFAULT_TOL = 1e-9


@dataclass
class CheckResult:
    name: str
    metric: str
    value: float
    tolerance: float
    passed: bool
    detail: str = ""

    def line(self) -> str:
        if self.metric == "failures":
            val = f"{int(self.value)}"
        else:
            val = f"{self.value:.1e}"
        return f"{self.name} {self.metric} {val} {'PASS' if self.passed else 'FAIL'}"


def _result(name, metric, value, tolerance, larger_is_better=False, detail=""):
    passed = value >= tolerance if larger_is_better else value <= tolerance
    return CheckResult(name, metric, float(value), float(tolerance), bool(passed), detail)


def _random_block(rng, k_in, k_out, m, z, scale=0.6):
    layers_ = []
    for t in range(z):
        ki = k_in if t == 0 else k_out
        layers_.append(ConvLayerWeights(scale * rng.standard_normal((m, m, ki, k_out)),
                                        scale * rng.standard_normal(k_out)))
    return ConvBlock(layers_)


def check_lemma1(trials=100, seed=0, sabotage=False, **_) -> CheckResult:
    rng = np.random.default_rng([seed, 1])
    worst = 0.0
    for _ in range(trials):
        k = int(rng.integers(1, 3))
        n = int(rng.integers(1, 3))  # pool sizes 2 and 4
        m = 2 ** (n - 1) + 1 + int(rng.integers(0, 2))
        size = 8
        stack = rng.uniform(0.0, 1.0, size=(size, size, 2 * k + 4))
        block = transforms.maxpool_to_conv_sub(k, n, m, (size, size))
        if sabotage and block.layers:
            block.layers[-1].bias[0] += 1e-3
        got = layers.subsample(FeatureStack(layers.block_forward_batch(stack[None], block)[0]), 2**n)
        want = layers.local_max_pool(FeatureStack(stack), 2**n)
        worst = max(worst, float(np.abs(got.values[:, :, :k] - want.values[:, :, :k]).max()))
    return _result("lemma1", "max_abs_diff", worst, DEFAULT_TOL)


def check_lemma2(trials=100, seed=0, sabotage=False, **_) -> CheckResult:
    rng = np.random.default_rng([seed, 2])
    worst = 0.0
    for _ in range(trials):
        t = int(rng.integers(2, 6))
        width = int(rng.integers(2, 5))
        depth = int(rng.integers(1, 4))
        delta = int(rng.integers(1, 4))
        g = transforms.random_ffnet(rng, depth, width, scale=1.5)
        taps = tuple(int(rng.integers(1, t + 1)) for _ in range(5))
        i1, i2 = int(rng.integers(4, 9)), int(rng.integers(4, 9))
        stack = rng.uniform(0.0, 1.0, size=(i1, i2, t + width))
        block = transforms.embed_feedforward(g, t, taps, delta, (i1, i2), t + width)
        if sabotage:
            block.layers[-1].bias[taps[4] - 1] += 1e-3
        out = layers.block_forward_batch(stack[None], block)[0]
        padded = np.zeros((i1 + delta, i2 + delta, t))
        padded[:i1, :i2] = stack[:, :, :t]
        s1, s2, s3, s4, s5 = taps
        direct = np.maximum(g(padded[:i1, :i2, s1 - 1],
                              padded[delta:delta + i1, :i2, s2 - 1],
                              padded[:i1, delta:delta + i2, s3 - 1],
                              padded[delta:delta + i1, delta:delta + i2, s4 - 1]), 0.0)
        worst = max(worst, float(np.abs(out[:, :, s5 - 1] - direct).max()))
        keep = [c for c in range(t) if c != s5 - 1]
        if keep:
            worst = max(worst, float(np.abs(out[:, :, keep] - stack[:, :, keep]).max()))
    return _result("lemma2", "max_abs_diff", worst, DEFAULT_TOL)


def check_lemma3(trials=100, seed=0, sabotage=False, **_) -> CheckResult:
    rng = np.random.default_rng([seed, 3])
    worst = 0.0
    for _ in range(trials):
        m = int(rng.integers(1, 4))
        z = int(rng.integers(1, 3))
        n = 2 ** int(rng.integers(1, 3))
        k_in, k_out = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        i1, i2 = int(rng.integers(5, 13)), int(rng.integers(5, 13))
        block = _random_block(rng, k_in, k_out, m, z)
        stack = rng.standard_normal((i1, i2, k_in))
        dilated = transforms.commute_subsample(block, n)
        if sabotage and dilated.layers:
            dilated.layers[0].bias[0] += 1e-3
        lhs = layers.subsample(FeatureStack(layers.block_forward_batch(stack[None], dilated)[0]), n)
        rhs = layers.block_forward_batch(
            layers.subsample(FeatureStack(stack), n).values[None], block)[0]
        worst = max(worst, float(np.abs(lhs.values - rhs).max()))
    return _result("lemma3", "max_abs_diff", worst, DEFAULT_TOL)


def check_lemma4(trials=0, seed=0, sabotage=False, limit=50, **_) -> CheckResult:
    a = np.arange(1, limit + 1)[:, None, None]
    b = np.arange(1, limit + 1)[None, :, None]
    c = np.arange(1, limit + 1)[None, None, :]
    lhs_a = ((a - 1) * b + 1 <= c)
    rhs_a = a <= -(-c // b)
    fail_a = int((lhs_a != rhs_a).sum())
    lhs_b = -(-c // (a * b))
    rhs_b = -(-(-(-c // a)) // b)
    fail_b = int((lhs_b != rhs_b).sum())
    failures = fail_a + fail_b + (1 if sabotage else 0)
    return _result("lemma4", "failures", failures, 0,
                   detail=f"{2 * limit**3} triples checked")


def _random_f1_net(rng, d=31):
    l = int(rng.integers(1, 4))
    vecs = admissible_pool_vectors(l)
    n = vecs[int(rng.integers(0, len(vecs)))]
    k = int(rng.integers(1, 4))
    z = int(rng.integers(1, 3))
    arch = networks.table1_params(1, l, n, k, z, d, d)
    net = networks.random_network(arch, rng)
    return net, n


def check_lemma5(trials=100, seed=0, sabotage=False, **_) -> CheckResult:
    rng = np.random.default_rng([seed, 5])
    nets = max(2, trials // 5)
    worst = 0.0
    size_bad = 0
    d = 31
    for _ in range(nets):
        net, n = _random_f1_net(rng, d)
        arch = net.arch
        images = rng.uniform(0.0, 1.0, size=(20, d, d))
        base = networks.forward_many(net, images)
        net2 = transforms.convert_f1_to_f2(net)
        net3 = transforms.convert_f2_to_f3(net2)
        if sabotage:
            net3.blocks[0].layers[0].filter[0, 0, 0, 0] += 1e-3
        worst = max(worst, float(np.abs(networks.forward_many(net2, images) - base).max()))
        worst = max(worst, float(np.abs(networks.forward_many(net3, images) - base).max()))
        # size accounting must be exact: widened channels, padded depth,
        # dilated filters, merged subsampling
        exps = [int(math.log2(s)) for s in arch.pool_sizes]
        want_z = arch.layers_per_block + 3 * max(arch.channels) * (max(exps) if exps else 0)
        prods = [math.prod(arch.pool_sizes[:r]) for r in range(arch.num_blocks)]
        want_m = tuple((m - 1) * p + 1 for m, p in zip(arch.filter_sizes, prods))
        if (net2.arch.channels != tuple(2 * k + 4 for k in arch.channels)
                or net2.arch.layers_per_block != want_z
                or net3.arch.filter_sizes != want_m
                or net3.arch.pool != math.prod(arch.pool_sizes)):
            size_bad += 1
    if size_bad:
        return CheckResult("lemma5", "max_abs_diff", float("inf"), DEFAULT_TOL, False,
                           detail=f"{size_bad}/{nets} nets with wrong converted sizes")
    return _result("lemma5", "max_abs_diff", worst, DEFAULT_TOL, detail=f"{nets} nets")


def _random_lipschitz_spec(rng, l, b, n):
    wiring, gfun = {}, {}
    lip = 0.0
    for k in range(1, l + 1):
        b_k = 1 if k == l else b[k - 1]
        b_prev = 1 if k == 1 else b[k - 2]
        for s in range(1, b_k + 1):
            wiring[(k, s)] = tuple(int(rng.integers(1, b_prev + 1)) for _ in range(4))
            choice = rng.integers(0, 3)
            if choice == 0:
                g = model.gf_max4()
            elif choice == 1:
                g = model.gf_mean4()
            else:
                coeffs = rng.uniform(-0.5, 0.5, size=4)
                g = model.gf_affine_clip(coeffs, float(rng.uniform(0.0, 0.5)))
            gfun[(k, s)] = g
            lip = max(lip, g.lipschitz)
    return model.HmpSpec(l, tuple(b), tuple(n), wiring, gfun), lip


def _perturbed(g, eps, freq, phase):
    def fn(a, b, c, d, _g=g, _e=eps, _f=freq, _p=phase):
        return _g(a, b, c, d) + _e * np.cos(_f * (a + b + c + d) + _p)
    return fn


def check_lemma6(trials=50, seed=0, sabotage=False, **_) -> CheckResult:
    rng = np.random.default_rng([seed, 6])
    worst_ratio = 0.0
    for _ in range(trials):
        l = int(rng.integers(1, 4))
        b = tuple(int(rng.integers(1, 3)) for _ in range(l - 1))
        vecs = admissible_pool_vectors(l)
        n = vecs[int(rng.integers(0, len(vecs)))]
        spec, lip = _random_lipschitz_spec(rng, l, b, n)
        eps = float(rng.choice([1e-3, 1e-2]))
        bound = (2 * lip + 1) ** (l - 1) * eps
        if sabotage:
            bound *= 1e-3
        pert = {key: _perturbed(g, eps, float(rng.uniform(0.5, 3.0)), float(rng.uniform(0, 7)))
                for key, g in spec.g_funcs.items()}
        spec_bar = model.HmpSpec(l, spec.features, spec.pooling, dict(spec.wiring), pert)
        d = 2**l + math.prod(n) - 1 + int(rng.integers(0, 3))
        for _ in range(4):
            x = rng.uniform(0.0, 1.0, size=(d, d))
            m_val = model.eval_model(x, spec, mode="exact")
            m_bar = model.eval_model(x, spec_bar, mode="relaxed")
            worst_ratio = max(worst_ratio, abs(m_val - m_bar) / bound)
    return _result("lemma6", "max_ratio_to_bound", worst_ratio, 1.0,
                   detail="observed |m - m_bar| over (2C+1)^(l-1) * eps")


def check_lemma7(trials=100, seed=0, sabotage=False, **_) -> CheckResult:
    rng = np.random.default_rng([seed, 7])
    specs = max(2, trials // 10)
    worst = 0.0
    for _ in range(specs):
        l = int(rng.integers(1, 4))
        b = tuple(int(rng.integers(1, 3)) for _ in range(l - 1))
        vecs = admissible_pool_vectors(l)
        n = vecs[int(rng.integers(0, len(vecs)))]
        depth, width = int(rng.integers(1, 3)), int(rng.integers(2, 5))
        wiring, gfun = {}, {}
        for k in range(1, l + 1):
            b_k = 1 if k == l else b[k - 1]
            b_prev = 1 if k == 1 else b[k - 2]
            for s in range(1, b_k + 1):
                wiring[(k, s)] = tuple(int(rng.integers(1, b_prev + 1)) for _ in range(4))
                gfun[(k, s)] = transforms.random_ffnet(rng, depth, width, scale=1.5)
        spec = model.HmpSpec(l, b, n, wiring, gfun)
        m_img = int(rng.integers(2, 4))
        d = 2**l * m_img - 1
        net = transforms.represent_hmp(spec, d, d)
        if sabotage:
            net.out_weights[0] += 1e-3
        images = rng.uniform(0.0, 1.0, size=(20, d, d))
        vals = networks.forward_many(net, images)
        for i in range(images.shape[0]):
            ref = model.eval_model(images[i], spec, mode="relaxed")
            worst = max(worst, abs(float(vals[i]) - ref))
    return _result("lemma7", "max_abs_diff", worst, DEFAULT_TOL, detail=f"{specs} hierarchies")


def _trivial_spec(l, n):
    wiring = {}
    gfun = {}
    for k in range(1, l + 1):
        wiring[(k, 1)] = (1, 1, 1, 1)
        gfun[(k, 1)] = model.gf_max4()
    return model.HmpSpec(l, tuple(1 for _ in range(l - 1)), tuple(n), wiring, gfun)


def check_lemma8(trials=0, seed=0, sabotage=False, exhaustive_l=5, **_) -> CheckResult:
    failures = 0
    cases = 0
    for l in range(1, exhaustive_l + 1):
        for m_img in (2, 3, 4):
            d = 2**l * m_img - 1
            for n in admissible_pool_vectors(l):
                spec = _trivial_spec(l, n)
                for k in range(l + 1):
                    got = model.dims(k, d, d, spec)
                    prefix = math.prod(n[: k - 1]) if k >= 1 else 1
                    want = (2**k // prefix) * (2 ** (l - k) * m_img - 1)
                    if sabotage:
                        want += 1
                    cases += 1
                    if got != (want, want):
                        failures += 1
                    if 1 <= k <= l - 1 and got[0] % spec.n(k) != 0:
                        failures += 1
    return _result("lemma8", "failures", failures, 0, detail=f"{cases} dimension cases")


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def fd_weight_gradients(net, images, labels, h=1e-4):
    """Central finite differences of the training loss for every weight.

    Returns (fd, kink): flat arrays where ``kink`` flags coordinates whose
    one-sided slopes disagree, i.e. the loss has a ReLU/max kink within +-h
    and the two-sided difference is meaningless there.
    """
    def loss():
        vals = networks.forward_many(net, images)
        return float(np.mean((labels - vals) ** 2))

    base = loss()
    fd, kink = [], []
    for arr in net.weight_arrays():
        flat = arr.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = loss()
            flat[i] = keep - h
            down = loss()
            flat[i] = keep
            central = (up - down) / (2 * h)
            right = (up - base) / h
            left = (base - down) / h
            gap = abs(right - left)
            # a ReLU/max tie within +-h shows up as disagreeing one-sided
            # slopes; for smooth coordinates the gap is only h * curvature
            fd.append(central)
            kink.append(gap > max(1e-9, 0.05 * max(abs(right), abs(left))))
    return np.array(fd), np.array(kink)


def analytic_weight_gradients(net, images, labels):
    _, grads = layers.loss_and_gradients(net, (images, labels))
    flat = []
    for block in grads.blocks:
        for g_w, g_b in block:
            flat.append(g_w.reshape(-1))
            flat.append(g_b.reshape(-1))
    flat.append(grads.out_weights.reshape(-1))
    return np.concatenate(flat)


def gradient_agreement(net, images, labels, h=1e-4, rel_tol=1e-4):
    """Fraction of non-kink weight coordinates whose analytic gradient matches
    central finite differences to relative error rel_tol."""
    fd, kink = fd_weight_gradients(net, images, labels, h)
    an = analytic_weight_gradients(net, images, labels)
    denom = np.maximum(np.maximum(np.abs(fd), np.abs(an)), 1e-6)
    ok = np.abs(fd - an) / denom <= rel_tol
    valid = ~kink
    if valid.sum() == 0:
        return 1.0
    return float(ok[valid].mean())


def check_gradcheck(trials=20, seed=0, sabotage=False, **_) -> CheckResult:
    rng = np.random.default_rng([seed, 9])
    worst = 1.0
    trials = max(4, min(trials, 20))
    for trial in range(trials):
        variant = trial % 4
        if variant == 0:
            arch = networks.ArchSpec("F1", (2, 2), (2, 2), 1, (2,), (2, 2), (7, 7))
        elif variant == 1:
            arch = networks.ArchSpec("F2", (2, 2), (2, 2), 1, (2,), (2, 2), (7, 7))
        elif variant == 2:
            arch = networks.ArchSpec("F3", (2, 2), (2, 3), 1, 2, (2, 2), (7, 7))
        else:
            arch = networks.ArchSpec("F4", (1, 2), (2, 2), 2, 1, (4, 4), (7, 7))
        net = networks.random_network(arch, rng)
        images = rng.uniform(0.0, 1.0, size=(3, 7, 7))
        labels = rng.integers(0, 2, size=3).astype(np.float64)
        frac = gradient_agreement(net, images, labels)
        if sabotage:
            frac -= 0.5
        worst = min(worst, frac)
    return _result("gradcheck", "min_agree_frac", worst, 0.95, larger_is_better=True,
                   detail=f"{trials} trials over all four classes")


ALL_CHECKS = {
    "lemma1": check_lemma1,
    "lemma2": check_lemma2,
    "lemma3": check_lemma3,
    "lemma4": check_lemma4,
    "lemma5": check_lemma5,
    "lemma6": check_lemma6,
    "lemma7": check_lemma7,
    "lemma8": check_lemma8,
    "gradcheck": check_gradcheck,
}


def run_checks(names=None, trials=100, seed=0, sabotage=None, exhaustive_l=5):
    """Run the named checks (all by default); returns a list of CheckResult."""
    names = list(names) if names else list(ALL_CHECKS)
    unknown = [n for n in names if n not in ALL_CHECKS]
    if unknown:
        raise ValueError(f"unknown checks: {unknown}; available: {sorted(ALL_CHECKS)}")
    results = []
    for name in names:
        results.append(ALL_CHECKS[name](trials=trials, seed=seed,
                                        sabotage=(sabotage == name),
                                        exhaustive_l=exhaustive_l))
    return results

"""Desk-scale reproduction of the synthetic-data comparison: generate data,
select and train each classifier by splitting of the sample, evaluate on
fresh test data, and aggregate medians/IQRs over repeated runs."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .datagen import generate
from .training import (GridEmptyError, SelectionGrid, TrainConfig, empirical_misclassification,
                       format_selection_report, model_select, truncation_level)


@dataclass
class Table2Setup:
    """One comparison run: per seed, a fresh training sample of size n and a
    fresh test sample of size test_n; each classifier selects its parameters
    on the training sample only."""

    n: int = 400
    seeds: int = 5
    test_n: int = 2000
    classifiers: tuple[int, ...] = (1, 2, 3, 4)
    levels: tuple[int, ...] = (3, 4)
    channels: tuple[int, ...] = (2, 4, 8)
    depths: tuple[int, ...] = (1, 2, 3)
    noise: float = 0.05
    master_seed: int = 0
    weight_guard: bool | str = "min-fallback"


def desk_setup(**overrides) -> Table2Setup:
    """Reduced grid sized for a workstation run of a couple CPU-hours."""
    base = dict(channels=(4, 8), depths=(1, 2), classifiers=(1, 3, 4))
    base.update(overrides)
    return Table2Setup(**base)


def _seed(master: int, *tags: int) -> int:
    return int(np.random.SeedSequence([master, *tags]).generate_state(1)[0])


@dataclass
class Table2Result:
    setup: Table2Setup
    errors: dict[int, list[float]] = field(default_factory=dict)
    reports: dict[tuple[int, int], str] = field(default_factory=dict)
    runtime_s: float = 0.0

    def median(self, j: int) -> float:
        return float(np.median(self.errors[j]))

    def iqr(self, j: int) -> float:
        return float(np.percentile(self.errors[j], 75) - np.percentile(self.errors[j], 25))

    def table(self) -> str:
        lines = [f"classifier median iqr (over {self.setup.seeds} runs, "
                 f"n={self.setup.n}, test_n={self.setup.test_n})"]
        for j in sorted(self.errors):
            lines.append(f"f{j} {self.median(j):.4f} {self.iqr(j):.4f}")
        return "\n".join(lines) + "\n"


def run_table2(setup: Table2Setup, cfg: TrainConfig, log=None) -> Table2Result:
    """Run the full comparison; deterministic in (setup, cfg)."""
    t_start = time.time()
    result = Table2Result(setup, {j: [] for j in setup.classifiers})
    for run_idx in range(setup.seeds):
        train_ds = generate(setup.n, seed=_seed(setup.master_seed, run_idx, 0),
                            noise_scale=setup.noise)
        test_ds = generate(setup.test_n, seed=_seed(setup.master_seed, run_idx, 1),
                           noise_scale=setup.noise)
        for j in setup.classifiers:
            grid = SelectionGrid(levels=setup.levels, channels=setup.channels,
                                 depths=setup.depths, classifiers=(j,))
            run_cfg = replace(cfg, seed=_seed(setup.master_seed, run_idx, 2, j))
            try:
                net, reports = model_select(grid, train_ds, run_cfg,
                                            weight_guard=setup.weight_guard)
            except GridEmptyError:
                if setup.weight_guard is not True:
                    raise
                net, reports = model_select(grid, train_ds, run_cfg,
                                            weight_guard="min-fallback")
            beta = truncation_level(run_cfg, setup.n)
            err = empirical_misclassification(net, beta, test_ds)
            result.errors[j].append(err)
            result.reports[(run_idx, j)] = format_selection_report(reports)
            if log:
                sel = [r for r in reports if r.selected][0]
                log(f"run {run_idx} f{j}: test_err={err:.4f} "
                    f"selected l={sel.l} n={sel.n} k={sel.k} z={sel.z} (W={sel.weights})")
    result.runtime_s = time.time() - t_start
    return result

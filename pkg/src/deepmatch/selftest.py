"""Property suites shared by the ``selftest`` command and the acceptance tests."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd
from .decoder import decode, decode_oracle
from .geometry import Discretization
from .pyramid import SENTINEL, PyramidState, ScoreMap, pyramid_from_scores


@dataclass
class SuiteResult:
    name: str
    total: int = 0
    failures: list[str] = field(default_factory=list)
    skipped: int = 0

    @property
    def passed(self) -> bool:
        return not self.failures and self.skipped < self.total


def random_pyramid(seed: int, max_grid: int = 6, max_range: int = 8, max_levels: int = 3,
                   sentinel_rate: float = 0.2) -> PyramidState:
    """Seeded pyramid over random level-0 scores with scattered SENTINEL cells."""
    rng = np.random.default_rng(seed)
    L = int(rng.integers(1, max_levels + 1))
    R0 = int(rng.integers(1, max_range + 1))
    H, W = (int(v) for v in rng.integers(1, max_grid + 1, size=2))
    alpha = int(rng.choice([1, 2, 4]))
    delta = alpha * int(rng.choice([1, 2]))
    disc = Discretization(levels=L, R0=R0, alpha0=alpha, delta0=delta, beta0=0, gamma0=1,
                          eta0=int(rng.choice([1, 2])))
    g0 = disc.level_geometries(((H - 1) * alpha + 1, (W - 1) * alpha + 1))[0]
    K = 2 * R0 + 1
    s = rng.random((H, W, K, K))
    s[rng.random(s.shape) < sentinel_rate] = SENTINEL
    return pyramid_from_scores(ScoreMap(s, g0), rng.uniform(0.5, 2.0, L))


def oracle_suite(count: int = 200, seed: int = 0) -> SuiteResult:
    res = SuiteResult("decoder-oracle equivalence")
    for s in range(seed, seed + count):
        pyr = random_pyramid(s)
        fast = decode(pyr).maps[0]
        slow = decode_oracle(pyr).data
        res.total += 1
        if not np.array_equal(fast, slow):
            res.failures.append(f"pyramid seed {s}: {int(np.sum(fast != slow))} mismatched cells")
    return res


def gradcheck_suite(count: int = 20, seed: int = 0, tolerance: float = 1e-4) -> SuiteResult:
    res = SuiteResult("gradient check")
    for s in range(seed, seed + count):
        report = autograd.gradcheck(seed=s, tolerance=tolerance)
        res.total += 1
        if report.status == "tie-skipped":
            res.skipped += 1
        elif not report.passed:
            worst = max(report.max_rel_error, key=report.max_rel_error.get)
            res.failures.append(
                f"instance seed {report.seed}: {worst} relative error {report.max_rel_error[worst]:.3g}"
            )
    return res

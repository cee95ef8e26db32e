"""Paired and multiple-strategy comparison statistics.

Conventions: Wilcoxon uses the normal approximation with ``W = min(R+, R-)``, so
its z is never positive; F-test p-values are two-sided; Friedman ranks are
averaged over ties and rank 1 is the best strategy in every row.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.special import betainc
from scipy.stats import norm, rankdata

from weightshare.errors import StatisticsError

logger = logging.getLogger(__name__)

# studentized range statistic divided by sqrt(2), infinite degrees of freedom, k = 2..10
NEMENYI_Q = {
    0.05: (1.960, 2.343, 2.569, 2.728, 2.850, 2.949, 3.031, 3.102, 3.164),
    0.10: (1.645, 2.052, 2.291, 2.459, 2.589, 2.693, 2.780, 2.855, 2.920),
}

HIGHER_IS_BETTER = {"r2"}
ABSOLUTE_METRICS = ("bias",)
MIN_WILCOXON_PAIRS = 10


def metric_orientation(metric: str) -> tuple[bool, bool]:
    """(lower_is_better, absolute) for a metric column name such as ``rmse`` or ``bias_2``."""
    base = metric.split("_")[0].lower()
    return base not in HIGHER_IS_BETTER, base in ABSOLUTE_METRICS


@dataclass
class ComparisonTable:
    """Scores of k strategies (columns) over N blocks (rows) for one metric."""

    metric: str
    scores: pd.DataFrame
    lower_is_better: bool = True
    absolute: bool = False

    def __post_init__(self):
        if self.scores.isna().any().any():
            raise StatisticsError(f"{self.metric}: comparison table has missing entries")
        if self.scores.shape[1] < 2:
            raise StatisticsError(f"{self.metric}: need at least 2 strategies, got {self.scores.shape[1]}")
        if self.scores.shape[0] < 2:
            raise StatisticsError(f"{self.metric}: need at least 2 rows, got {self.scores.shape[0]}")

    @classmethod
    def for_metric(cls, metric: str, scores: pd.DataFrame) -> "ComparisonTable":
        lower, absolute = metric_orientation(metric)
        return cls(metric, scores.astype(np.float64), lower, absolute)

    @property
    def strategies(self) -> list[str]:
        return [str(c) for c in self.scores.columns]

    def values(self) -> np.ndarray:
        """Scores oriented so that smaller is better."""
        v = self.scores.to_numpy(dtype=np.float64)
        if self.absolute:
            v = np.abs(v)
        return v if self.lower_is_better else -v


@dataclass
class TestResult:
    __test__ = False

    name: str
    statistic: float
    p_value: float
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.p_value <= 1.0:
            raise StatisticsError(f"{self.name}: p-value {self.p_value} outside [0, 1]")


# -- distributions -----------------------------------------------------------------


def f_cdf(f: float, dfn: float, dfd: float) -> float:
    """P(F <= f) through the regularized incomplete beta function."""
    if f <= 0:
        return 0.0
    if math.isinf(f):
        return 1.0
    return float(betainc(dfn / 2.0, dfd / 2.0, dfn * f / (dfn * f + dfd)))


def f_sf(f: float, dfn: float, dfd: float) -> float:
    if f <= 0:
        return 1.0
    if math.isinf(f):
        return 0.0
    return float(betainc(dfd / 2.0, dfn / 2.0, dfd / (dfd + dfn * f)))


# -- pairwise ------------------------------------------------------------------------


def wilcoxon_from_rank_sums(r_plus: float, r_minus: float) -> TestResult:
    """z and two-sided p for given rank sums of n = pairs without zero difference."""
    total = r_plus + r_minus
    n = (math.sqrt(8 * total + 1) - 1) / 2
    if n <= 0:
        raise StatisticsError("wilcoxon: no non-zero differences")
    mean = n * (n + 1) / 4
    sd = math.sqrt(n * (n + 1) * (2 * n + 1) / 24)
    z = (min(r_plus, r_minus) - mean) / sd
    p = min(1.0, 2.0 * float(norm.sf(abs(z))))
    return TestResult("wilcoxon", z, p, {"r_plus": r_plus, "r_minus": r_minus, "n": int(round(n))})


def wilcoxon_signed_rank(a: Sequence[float], b: Sequence[float], lower_is_better: bool = True) -> TestResult:
    """Paired signed-rank test; R+ sums the ranks of pairs where ``a`` beats ``b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise StatisticsError(f"wilcoxon: paired samples must be equal-length vectors, got {a.shape} and {b.shape}")
    diff = (b - a) if lower_is_better else (a - b)
    diff = diff[diff != 0]
    if diff.size == 0:
        raise StatisticsError("wilcoxon: all paired differences are zero; the samples are identical")
    if diff.size < MIN_WILCOXON_PAIRS:
        raise StatisticsError(
            f"wilcoxon: {diff.size} non-zero differences; the normal approximation needs at least {MIN_WILCOXON_PAIRS}"
        )
    ranks = rankdata(np.abs(diff), method="average")
    return wilcoxon_from_rank_sums(float(ranks[diff > 0].sum()), float(ranks[diff < 0].sum()))


def f_variance_test(baseline: Sequence[float], candidate: Sequence[float]) -> TestResult:
    """F = var(baseline) / var(candidate); values above 1 mean the candidate varies less."""
    a = np.asarray(baseline, dtype=np.float64)
    b = np.asarray(candidate, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise StatisticsError(f"f test: both samples need at least 2 values, got {a.size} and {b.size}")
    var_a, var_b = a.var(ddof=1), b.var(ddof=1)
    if var_b == 0:
        raise StatisticsError("f test: candidate sample has zero variance")
    f = float(var_a / var_b)
    dfn, dfd = a.size - 1, b.size - 1
    p = min(1.0, 2.0 * min(f_cdf(f, dfn, dfd), f_sf(f, dfn, dfd)))
    return TestResult("f_variance", f, p, {"dfn": dfn, "dfd": dfd, "var_baseline": float(var_a), "var_candidate": float(var_b)})


# -- multiple strategies -------------------------------------------------------------


def average_ranks(table: ComparisonTable) -> pd.Series:
    ranks = np.apply_along_axis(rankdata, 1, table.values())
    return pd.Series(ranks.mean(axis=0), index=table.strategies, name="average_rank")


def iman_davenport_from_ranks(ranks: Sequence[float], n_blocks: int) -> TestResult:
    """Friedman chi-square and the Iman-Davenport F statistic from average ranks."""
    r = np.asarray(ranks, dtype=np.float64)
    k, n = r.size, n_blocks
    if k < 2 or n < 2:
        raise StatisticsError(f"friedman: need k >= 2 strategies and N >= 2 blocks, got k={k}, N={n}")
    chi2 = 12.0 * n / (k * (k + 1)) * (np.sum(r**2) - k * (k + 1) ** 2 / 4.0)
    chi2 = max(float(chi2), 0.0)
    denominator = n * (k - 1) - chi2
    dfn, dfd = k - 1, (k - 1) * (n - 1)
    extra = {"chi2": chi2, "k": k, "n": n, "dfn": dfn, "dfd": dfd}
    if denominator <= 1e-12 * n * (k - 1):
        logger.warning("friedman: every block ranks the strategies identically; statistic is infinite")
        return TestResult("iman_davenport", math.inf, 0.0, extra)
    f = (n - 1) * chi2 / denominator
    return TestResult("iman_davenport", float(f), f_sf(f, dfn, dfd), extra)


def friedman_iman_davenport(table: ComparisonTable) -> TestResult:
    ranks = average_ranks(table)
    result = iman_davenport_from_ranks(ranks.to_numpy(), table.scores.shape[0])
    result.extra["ranks"] = ranks.to_dict()
    return result


def nemenyi_cd(k: int, n_blocks: int, alpha: float = 0.05) -> float:
    table = NEMENYI_Q.get(round(alpha, 4))
    if table is None:
        raise StatisticsError(f"nemenyi: alpha must be one of {sorted(NEMENYI_Q)}, got {alpha}")
    if not 2 <= k <= len(table) + 1:
        raise StatisticsError(f"nemenyi: k must be between 2 and {len(table) + 1}, got {k}")
    if n_blocks < 1:
        raise StatisticsError(f"nemenyi: need at least one block, got {n_blocks}")
    return table[k - 2] * math.sqrt(k * (k + 1) / (6.0 * n_blocks))


def rank_groups(ranks: pd.Series | dict[str, float], cd: float) -> list[list[str]]:
    """Split strategies sorted by rank into groups; a new group starts once the gap to its first member reaches ``cd``."""
    ordered = pd.Series(ranks, dtype=np.float64).sort_values(kind="stable")
    groups: list[list[str]] = []
    anchor = None
    for name, rank in ordered.items():
        if anchor is None or rank - anchor >= cd:
            groups.append([name])
            anchor = rank
        else:
            groups[-1].append(name)
    return groups


# -- summaries -----------------------------------------------------------------------


SUMMARY_ROWS = ("mean", "std", "min", "25%", "50%", "75%", "max")


@dataclass(frozen=True)
class Summary:
    mean: float
    std: float
    min: float
    q25: float
    q50: float
    q75: float
    max: float
    std_undefined: bool = False

    def as_row(self) -> list[float]:
        return [self.mean, self.std, self.min, self.q25, self.q50, self.q75, self.max]


def summary_stats(samples: Sequence[float]) -> Summary:
    x = np.asarray(samples, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise StatisticsError("summary_stats: empty sample")
    q25, q50, q75 = np.quantile(x, [0.25, 0.5, 0.75], method="linear")
    single = x.size == 1
    return Summary(
        float(x.mean()),
        0.0 if single else float(x.std(ddof=1)),
        float(x.min()),
        float(q25),
        float(q50),
        float(q75),
        float(x.max()),
        std_undefined=single,
    )


def summary_table(scores: pd.DataFrame) -> pd.DataFrame:
    """Summary rows (mean, std, quartiles) for every column of ``scores``."""
    columns = {name: summary_stats(scores[name].to_numpy()).as_row() for name in scores.columns}
    return pd.DataFrame(columns, index=list(SUMMARY_ROWS))

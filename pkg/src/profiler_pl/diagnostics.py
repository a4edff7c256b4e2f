"""Error aggregation, per-region link statistics and the feature-subset regression."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .profile import LinkMeasurement, PathProfile

FEATURES = ("p_LOS", "mu_o", "sigma_d")
UNDEFINED = "undefined"
CATEGORIES = ("dense urban", "suburban", "rural")


def rmse(predictions, targets) -> float:
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ValueError("rmse of an empty set")
    diff = p - t
    return float(np.sqrt(np.mean(diff * diff)))


# ---------------------------------------------------------------------------
# Link statistics
# ---------------------------------------------------------------------------


def clearance_excess(profile: PathProfile) -> np.ndarray:
    """Positive excess of the center-column surface over the antenna line, per metre sample."""
    surface = profile.corridor[:, profile.center]
    x = np.arange(surface.size, dtype=np.float64)
    line = profile.tx_abs_height + (profile.rx_abs_height - profile.tx_abs_height) * x / profile.d
    return np.maximum(0.0, surface - line)


def is_line_of_sight(profile: PathProfile) -> bool:
    return not bool(np.any(clearance_excess(profile) > 0))


def obstruction_depth(profile: PathProfile, mode: str = "integrated",
                      samples_per_metre: float = 1.0) -> float:
    """Obstruction of the direct path in metres.

    ``integrated`` sums the excess over the path (m*m per m of path);
    ``max`` takes the deepest single excess.
    """
    excess = clearance_excess(profile)
    if mode == "integrated":
        return float(excess.sum() / samples_per_metre)
    if mode == "max":
        return float(excess.max(initial=0.0))
    raise ValueError(f"unknown obstruction depth mode {mode!r}")


@dataclass(frozen=True)
class RegionStats:
    p_LOS: float
    mu_o: float
    sigma_d: float
    category: str | None = None
    region: str = ""
    n_links: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p_LOS <= 1.0:
            raise ValueError(f"p_LOS out of [0, 1]: {self.p_LOS}")
        if self.mu_o < 0 or self.sigma_d < 0:
            raise ValueError("mu_o and sigma_d must be non-negative")

    def feature(self, name: str) -> float:
        return getattr(self, name)


def link_stats(links: Sequence[tuple[LinkMeasurement, PathProfile]],
               depth_mode: str = "integrated") -> RegionStats:
    if not links:
        raise ValueError("link_stats needs at least one link")
    los = [is_line_of_sight(p) for _, p in links]
    depths = [obstruction_depth(p, depth_mode) for _, p in links]
    dists = np.array([p.d for _, p in links])
    sigma_d = float(np.std(dists, ddof=1)) if len(dists) > 1 else 0.0
    cats = sorted({link.category for link, _ in links if link.category})
    regions = sorted({link.region for link, _ in links})
    return RegionStats(
        p_LOS=float(np.mean(los)),
        mu_o=float(np.mean(depths)),
        sigma_d=sigma_d,
        category=cats[0] if len(cats) == 1 else None,
        region="+".join(regions),
        n_links=len(links),
    )


# ---------------------------------------------------------------------------
# Exhaustive-subset regression
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RegressionResult:
    features: tuple[str, ...]
    coefficients: tuple[float, ...]
    intercept: float
    r_squared: float | None  # None when the target has no variance
    singular: bool = False

    @property
    def label(self) -> str:
        return " + ".join(self.features)


def minmax(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    span = v.max() - v.min()
    if span == 0:
        return np.full_like(v, np.nan)
    return (v - v.min()) / span


def fit_ols(x, y) -> tuple[np.ndarray, float, float | None, bool]:
    """OLS with intercept via the normal equations.

    Returns (coefficients, intercept, r_squared, singular).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, k = x.shape
    design = np.column_stack([np.ones(n), x])
    nan = np.full(k, np.nan)
    if not np.all(np.isfinite(design)):
        return nan, math.nan, None, True
    gram = design.T @ design
    if np.linalg.cond(gram) > 1e12:
        return nan, math.nan, None, True
    beta = np.linalg.solve(gram, design.T @ y)
    resid = y - design @ beta
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = None if ss_tot == 0 else 1.0 - float(resid @ resid) / ss_tot
    return beta[1:], float(beta[0]), r2, False


def subset_order(n_features: int = 3) -> list[tuple[int, ...]]:
    """Non-empty index subsets by size; within a size, later features first.

    For (p_LOS, mu_o, sigma_d) this gives sigma_d, mu_o, p_LOS, mu_o+sigma_d,
    p_LOS+sigma_d, p_LOS+mu_o, all three.
    """
    order = []
    for size in range(1, n_features + 1):
        order.extend(reversed(list(itertools.combinations(range(n_features), size))))
    return order


def exhaustive_regression(stats, targets, features: Sequence[str] = FEATURES) -> list[RegressionResult]:
    """Fit every non-empty feature subset against per-region targets.

    Args:
        stats: sequence of RegionStats, or a mapping feature name -> per-region values.
        targets: per-region target (e.g. RMSE in dB).
        features: candidate feature names, in canonical order.
    """
    y = np.asarray(targets, dtype=np.float64)
    if isinstance(stats, Mapping):
        table = {f: np.asarray(stats[f], dtype=np.float64) for f in features}
    else:
        table = {f: np.array([s.feature(f) for s in stats], dtype=np.float64) for f in features}
    n = y.size
    if n < 2:
        raise ValueError("need at least 2 regions")
    if any(v.size != n for v in table.values()):
        raise ValueError("every feature needs one value per region")
    normalized = {f: minmax(v) for f, v in table.items()}
    results = []
    for subset in subset_order(len(features)):
        names = tuple(features[i] for i in subset)
        x = np.column_stack([normalized[f] for f in names])
        coef, intercept, r2, singular = fit_ols(x, y)
        results.append(RegressionResult(names, tuple(float(c) for c in coef), intercept, r2, singular))
    return results


def write_regression_csv(results: Sequence[RegressionResult], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["features", "r_squared", "coefficients", "intercept", "singular"])
        for r in results:
            w.writerow([
                r.label,
                UNDEFINED if r.r_squared is None else repr(r.r_squared),
                ";".join(repr(c) for c in r.coefficients),
                repr(r.intercept),
                int(r.singular),
            ])


def read_regression_csv(path) -> list[RegressionResult]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            r2 = None if row["r_squared"] == UNDEFINED else float(row["r_squared"])
            out.append(RegressionResult(
                features=tuple(row["features"].split(" + ")),
                coefficients=tuple(float(c) for c in row["coefficients"].split(";")),
                intercept=float(row["intercept"]),
                r_squared=r2,
                singular=bool(int(row.get("singular", 0) or 0)),
            ))
    return out


# ---------------------------------------------------------------------------
# Grouped RMSE reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GroupRow:
    kind: str  # "region", "category" or "overall"
    name: str
    n: int
    rmse_db: float


def grouped_rmse(predictions, targets, labels, kind: str) -> list[GroupRow]:
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    rows = []
    for name in sorted({lab for lab in labels if lab}):
        mask = np.array([lab == name for lab in labels])
        rows.append(GroupRow(kind, name, int(mask.sum()), rmse(p[mask], t[mask])))
    return rows


@dataclass(frozen=True)
class CategoryReport:
    rows: tuple[GroupRow, ...]
    overall: GroupRow
    n_unlabeled: int

    def rmse_of(self, name: str) -> float:
        for row in self.rows:
            if row.name == name:
                return row.rmse_db
        raise KeyError(name)


def categorize_report(predictions, targets, categories, regions=None) -> CategoryReport:
    """RMSE per category (and per region when given) plus a pooled overall row.

    Links without a category are left out of the category rows and counted in
    ``n_unlabeled``; the overall row pools every link.
    """
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    labels = [c if c else None for c in categories]
    if len(labels) != p.size:
        raise ValueError("one category label per link is required")
    rows: list[GroupRow] = []
    if regions is not None:
        rows += grouped_rmse(p, t, list(regions), "region")
    rows += grouped_rmse(p, t, labels, "category")
    overall = GroupRow("overall", "Overall", int(p.size), rmse(p, t))
    return CategoryReport(tuple(rows), overall, sum(lab is None for lab in labels))


def write_category_csv(report: CategoryReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "group", "n", "rmse_db"])
        for row in report.rows + (report.overall,):
            w.writerow([row.kind, row.name, row.n, repr(row.rmse_db)])


def read_category_csv(path) -> list[GroupRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [GroupRow(r["kind"], r["group"], int(r["n"]), float(r["rmse_db"]))
                for r in csv.DictReader(fh)]

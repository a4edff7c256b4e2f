"""Training orchestration: geographic splits, best-validation training,
leave-one-region-out cross-validation and ensemble prediction."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .diagnostics import rmse
from .geodata import DsmRaster
from .nn import AdamState, ArchSpec, Checkpoint, adam_step, build_model, loss_and_grad, predict
from .nn.optim import NonFiniteGradient
from .profile import (DEFAULT_WIDTH, EARTH_RADIUS_M, ChannelConfig, LinkMeasurement,
                      NormalizationSpec, assemble_input, build_profile, stack_inputs)

log = logging.getLogger(__name__)

BatchHook = Callable[[str, np.ndarray], None]


class TrainingError(RuntimeError):
    pass


class SplitError(ValueError):
    pass


@dataclass(eq=False)
class RegionDataset:
    """Assembled inputs for one region (or a pool of regions).

    ``ids`` are link identifiers unique across every dataset in play;
    ``rx_xy`` holds receiver positions for geographic splitting.
    """

    region: str
    channels: np.ndarray  # (N, C, 256, W) float32
    scalars: np.ndarray  # (N, n_scalars) float32
    targets: np.ndarray  # (N,) normalized
    rx_xy: np.ndarray  # (N, 2)
    ids: np.ndarray  # (N,) int64
    categories: list = field(default_factory=list)

    def __post_init__(self):
        n = len(self.targets)
        if n == 0:
            raise ValueError(f"region {self.region!r} has no links")
        if not (len(self.channels) == len(self.scalars) == len(self.rx_xy) == len(self.ids) == n):
            raise ValueError("dataset arrays disagree on length")
        if not self.categories:
            self.categories = [None] * n

    def __len__(self):
        return len(self.targets)

    def subset(self, idx) -> "RegionDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return RegionDataset(self.region, self.channels[idx], self.scalars[idx], self.targets[idx],
                             self.rx_xy[idx], self.ids[idx], [self.categories[i] for i in idx])


def pool_datasets(parts: Sequence[RegionDataset]) -> RegionDataset:
    parts = list(parts)
    if not parts:
        raise ValueError("nothing to pool")
    cats = []
    for p in parts:
        cats.extend(p.categories)
    return RegionDataset(
        "+".join(p.region for p in parts),
        np.concatenate([p.channels for p in parts]),
        np.concatenate([p.scalars for p in parts]),
        np.concatenate([p.targets for p in parts]),
        np.concatenate([p.rx_xy for p in parts]),
        np.concatenate([p.ids for p in parts]),
        cats,
    )


def build_datasets(links: Sequence[LinkMeasurement], rasters: DsmRaster | Mapping[str, DsmRaster],
                   config: ChannelConfig, norm: NormalizationSpec = NormalizationSpec(),
                   width: int = DEFAULT_WIDTH, radius: float = EARTH_RADIUS_M) -> list[RegionDataset]:
    """Extract and assemble every link, grouped by region (sorted by label).

    Links without a measured path loss get a NaN target.
    """
    by_region: dict[str, list[LinkMeasurement]] = {}
    for link in links:
        by_region.setdefault(link.region, []).append(link)
    out = []
    for region in sorted(by_region):
        raster = rasters if isinstance(rasters, DsmRaster) else rasters[region]
        group = by_region[region]
        inputs = [assemble_input(build_profile(raster, l, width, radius), l, config, norm) for l in group]
        channels, scalars, targets = stack_inputs(inputs)
        out.append(RegionDataset(
            region, channels, scalars, targets,
            np.array([[l.rx_x, l.rx_y] for l in group], dtype=np.float64),
            np.array([l.link_id for l in group], dtype=np.int64),
            [l.category for l in group],
        ))
    return out


# ---------------------------------------------------------------------------
# Geographic split
# ---------------------------------------------------------------------------


def geographic_split(region: RegionDataset, ratio: float = 0.8, seed: int = 0,
                     cell_size_m: float = 200.0, tolerance: float = 0.05):
    """Split by whole spatial cells of Rx positions.

    A square grid (random offset from ``seed``) buckets receivers; cells are
    visited in seeded random order and moved to validation while that keeps
    the validation share within ``1 - ratio + tolerance``, until it reaches
    ``1 - ratio - tolerance``.
    """
    if not 0.0 < ratio < 1.0:
        raise SplitError(f"split ratio must lie in (0, 1), got {ratio}")
    n = len(region)
    if n < 5:
        raise SplitError(f"region {region.region!r} has {n} links; at least 5 needed")
    rng = np.random.default_rng(seed)
    offset = rng.uniform(0.0, cell_size_m, size=2)
    cell_ij = np.floor((region.rx_xy - offset) / cell_size_m).astype(np.int64)
    cells, inverse = np.unique(cell_ij, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    sizes = np.bincount(inverse, minlength=len(cells))
    want = (1.0 - ratio) * n
    lo, hi = want - tolerance * n, want + tolerance * n
    val_cells = []
    taken = 0
    for c in rng.permutation(len(cells)):
        if taken >= lo:
            break
        if taken + sizes[c] <= hi:
            val_cells.append(c)
            taken += sizes[c]
    if not lo <= taken <= hi or taken == 0 or taken == n:
        raise SplitError(
            f"region {region.region!r}: cannot reach a {ratio:.2f} split within ±{tolerance} "
            f"using {cell_size_m} m cells (validation share {taken / n:.3f})")
    in_val = np.isin(inverse, val_cells)
    return region.subset(np.flatnonzero(~in_val)), region.subset(np.flatnonzero(in_val))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainPlan:
    holdout: str | None = None
    runs: int = 10
    epochs: int = 200
    batch_size: int = 256
    lr: float = 1e-4
    split_ratio: float = 0.8
    seed: int = 0
    cell_size_m: float = 200.0

    def __post_init__(self):
        if not 0.0 < self.split_ratio < 1.0:
            raise ValueError(f"split_ratio must lie in (0, 1), got {self.split_ratio}")
        if self.runs < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("runs, epochs and batch_size must be >= 1")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")


def best_epoch(val_losses: Sequence[float]) -> int:
    """1-based epoch with the lowest validation loss; the earliest wins ties."""
    best, best_i = math.inf, 0
    for i, v in enumerate(val_losses):
        if v < best:
            best, best_i = v, i
    return best_i + 1


def train_model(train: RegionDataset, validation: RegionDataset, plan: TrainPlan,
                config: ChannelConfig, seed: int, arch: ArchSpec = ArchSpec(),
                norm: NormalizationSpec = NormalizationSpec(), on_batch: BatchHook | None = None,
                chunk: int = 16) -> Checkpoint:
    """Mini-batch Adam on MSE, keeping the parameters of the best validation epoch.

    The output bias starts at the mean training target, so epoch 0 already
    predicts the mean and the weights only have to learn the residual.
    """
    if len(train) == 0 or len(validation) == 0:
        raise TrainingError("training and validation sets must be non-empty")
    model = build_model(config, arch, seed)
    last_bias = f"fc{len(arch.fc_widths)}.b"
    model.params[last_bias][:] = np.mean(train.targets)
    state = AdamState.for_model(model, lr=plan.lr)
    rng = np.random.default_rng(seed)
    scale = norm.target_scale_db
    n = len(train)
    best_model, best_loss, best_ep = None, math.inf, 0
    curve = []
    for epoch in range(1, plan.epochs + 1):
        order = rng.permutation(n)
        sq_sum = 0.0
        for start in range(0, n, plan.batch_size):
            idx = order[start:start + plan.batch_size]
            if on_batch is not None:
                on_batch("train", train.ids[idx])
            loss, grads, _ = loss_and_grad(model, train.channels[idx], train.scalars[idx],
                                           train.targets[idx], chunk)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite training loss at epoch {epoch}")
            try:
                adam_step(model, grads, state)
            except NonFiniteGradient as exc:
                raise TrainingError(f"epoch {epoch}: {exc}") from exc
            sq_sum += loss * len(idx)
        if on_batch is not None:
            on_batch("validation", validation.ids)
        val_pred = predict(model, validation.channels, validation.scalars, chunk)
        val_loss = float(np.mean((val_pred - validation.targets) ** 2))
        if not math.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        train_rmse = math.sqrt(sq_sum / n) * scale
        val_rmse = math.sqrt(val_loss) * scale
        curve.append({"epoch": epoch, "train_rmse_db": train_rmse, "val_rmse_db": val_rmse})
        log.debug("seed %d epoch %d train %.3f dB val %.3f dB", seed, epoch, train_rmse, val_rmse)
        if val_loss < best_loss:
            best_model, best_loss, best_ep = model.copy(), val_loss, epoch
    return Checkpoint(best_model, norm, best_loss, seed, best_ep, curve)


def evaluate_rmse_db(ckp: Checkpoint, data: RegionDataset, chunk: int = 16) -> float:
    pred = ckp.norm.denormalize_target(predict(ckp.model, data.channels, data.scalars, chunk))
    return rmse(pred, ckp.norm.denormalize_target(data.targets))


def split_and_pool(regions: Sequence[RegionDataset], plan: TrainPlan):
    """Split each region geographically, then pool the train and validation parts."""
    trains, vals = [], []
    for region in regions:
        tr, va = geographic_split(region, plan.split_ratio, plan.seed, plan.cell_size_m)
        trains.append(tr)
        vals.append(va)
    return pool_datasets(trains), pool_datasets(vals)


def train_no_holdout(regions: Sequence[RegionDataset], plan: TrainPlan, config: ChannelConfig,
                     arch: ArchSpec = ArchSpec(), norm: NormalizationSpec = NormalizationSpec(),
                     runs: Sequence[int] | None = None, chunk: int = 16) -> list[Checkpoint]:
    """Train ``plan.runs`` models on every region (seed = plan.seed + run)."""
    train, val = split_and_pool(regions, plan)
    runs = range(plan.runs) if runs is None else runs
    return [train_model(train, val, plan, config, plan.seed + r, arch, norm, chunk=chunk) for r in runs]


# ---------------------------------------------------------------------------
# Cross-validation
# ---------------------------------------------------------------------------


@dataclass
class CvReport:
    holdouts: list[str]
    run_rmse: dict[str, list[float]]
    loss_curves: dict[str, list[list[dict]]] = field(default_factory=dict, repr=False)

    def mean(self, holdout: str) -> float:
        return float(np.mean(self.run_rmse[holdout]))

    def sd(self, holdout: str) -> float:
        """Sample SD over runs; NaN for a single run."""
        v = self.run_rmse[holdout]
        return float(np.std(v, ddof=1)) if len(v) > 1 else math.nan

    @property
    def grand_mean(self) -> float:
        return float(np.mean([self.mean(h) for h in self.holdouts]))

    @property
    def grand_sd(self) -> float:
        """Mean of the per-holdout SDs, the way the summary row averages its SD column."""
        return float(np.mean([self.sd(h) for h in self.holdouts]))


def _cv_job(args):
    holdout, run, train, val, test, plan, config, arch, norm, chunk = args
    ckp = train_model(train, val, plan, config, plan.seed + run, arch, norm, chunk=chunk)
    return holdout, run, evaluate_rmse_db(ckp, test, chunk), ckp.loss_curve


def cross_validate(regions: Sequence[RegionDataset], plan: TrainPlan, config: ChannelConfig,
                   arch: ArchSpec = ArchSpec(), norm: NormalizationSpec = NormalizationSpec(),
                   on_batch: Callable[[str, str, np.ndarray], None] | None = None,
                   threads: int = 1, chunk: int = 16) -> CvReport:
    """Leave-one-region-out CV with ``plan.runs`` seeds per holdout.

    ``on_batch(holdout, kind, ids)`` sees the ids of every training and
    validation batch; it forces sequential execution.
    """
    regions = list(regions)
    if len(regions) < 2:
        raise ValueError("cross-validation needs at least 2 regions")
    names = [r.region for r in regions]
    if len(set(names)) != len(names):
        raise ValueError("region labels must be unique")
    jobs = []
    for k, test in enumerate(regions):
        train, val = split_and_pool(regions[:k] + regions[k + 1:], plan)
        for run in range(plan.runs):
            jobs.append((test.region, run, train, val, test, plan, config, arch, norm, chunk))
    results = {}
    if threads > 1 and on_batch is None:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            for holdout, run, score, curve in pool.map(_cv_job, jobs):
                results[holdout, run] = (score, curve)
    else:
        for job in jobs:
            holdout, run, train, val, test = job[:5]
            hook = None
            if on_batch is not None:
                hook = (lambda h: (lambda kind, ids: on_batch(h, kind, ids)))(holdout)
            try:
                ckp = train_model(train, val, plan, config, plan.seed + run, arch, norm, hook, chunk)
            except TrainingError as exc:
                raise TrainingError(f"holdout {holdout!r} run {run}: {exc}") from exc
            results[holdout, run] = (evaluate_rmse_db(ckp, test, chunk), ckp.loss_curve)
            log.info("holdout %s run %d: %.3f dB", holdout, run, results[holdout, run][0])
    report = CvReport(names, {h: [] for h in names}, {h: [] for h in names})
    for h in names:
        for run in range(plan.runs):
            score, curve = results[h, run]
            report.run_rmse[h].append(score)
            report.loss_curves[h].append(curve)
    return report


# ---------------------------------------------------------------------------
# Ensemble
# ---------------------------------------------------------------------------


def ensemble_predict(checkpoints: Sequence[Checkpoint], channels, scalars=None,
                     chunk: int = 16) -> np.ndarray:
    """Arithmetic mean of the members' denormalized predictions (dB).

    Accepts a batch ``(N, C, H, W)`` or a single ModelInput-shaped ``(C, H, W)``.
    """
    if not checkpoints:
        raise ValueError("ensemble needs at least one checkpoint")
    first = checkpoints[0]
    for ckp in checkpoints[1:]:
        if ckp.config != first.config or ckp.norm != first.norm:
            raise ValueError("ensemble members must share configuration and normalization")
    channels = np.asarray(channels)
    single = channels.ndim == 3
    if single:
        channels = channels[None]
        scalars = None if scalars is None else np.asarray(scalars)[None]
    members = np.stack([ckp.norm.denormalize_target(predict(ckp.model, channels, scalars, chunk))
                        for ckp in checkpoints])
    # fsum is exactly rounded, so the mean does not depend on member order
    out = np.array([math.fsum(col) for col in members.T]) / len(checkpoints)
    return out[0] if single else out

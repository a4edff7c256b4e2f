import math

import numpy as np
import pytest

from profiler_pl.diagnostics import rmse
from profiler_pl.nn import ArchSpec, build_model
from profiler_pl.nn.checkpoint import Checkpoint
from profiler_pl.pipeline import (CvReport, RegionDataset, SplitError, TrainPlan, best_epoch,
                                  build_datasets, cross_validate, ensemble_predict,
                                  evaluate_rmse_db, geographic_split, pool_datasets,
                                  split_and_pool, train_model)
from profiler_pl.profile import ChannelConfig, LinkMeasurement, NormalizationSpec
from profiler_pl.synthgen import GroundTruthModel, TerrainParams, generate_measurements, generate_terrain

TINY = ArchSpec(conv_channels=(2,), fc_widths=(4,), input_rows=8, input_cols=5)


def toy_region(name, n, seed, id_base=0, config=ChannelConfig.of("flip"), spread=1000.0):
    rng = np.random.default_rng(seed)
    ch = rng.normal(size=(n, config.n_channels, 8, 5)).astype(np.float32)
    sc = rng.normal(size=(n, config.n_scalars)).astype(np.float32)
    # a learnable target: linear in the mean of channel 0 plus a scalar
    t = 0.5 + 0.1 * ch[:, 0].mean(axis=(1, 2))
    if config.n_scalars:
        t = t + 0.05 * sc[:, 0]
    xy = rng.uniform(0, spread, size=(n, 2))
    return RegionDataset(name, ch, sc, t.astype(np.float64), xy, np.arange(id_base, id_base + n))


# ---------------------------------------------------------------------------
# Split
# ---------------------------------------------------------------------------


def test_split_keeps_clusters_whole():
    # five clusters of co-located receivers 400 m apart; 20 % validation is one whole cluster
    centers = np.array([[100, 100], [500, 100], [900, 100], [100, 500], [500, 500]], float)
    xy = np.repeat(centers, 40, axis=0)
    cluster = np.repeat(np.arange(5), 40)
    region = toy_region("r", 200, 0)
    region.rx_xy = xy
    picked = set()
    for seed in range(10):
        tr, va = geographic_split(region, 0.8, seed)
        val_clusters = set(cluster[va.ids])
        assert len(val_clusters) == 1
        assert not val_clusters & set(cluster[tr.ids])
        picked |= val_clusters
    assert len(picked) > 1  # the seed decides which cluster


def test_split_partitions_ids():
    region = toy_region("r", 300, 1)
    tr, va = geographic_split(region, 0.8, seed=3)
    assert sorted(np.concatenate([tr.ids, va.ids])) == list(range(300))
    assert not set(tr.ids) & set(va.ids)
    np.testing.assert_array_equal(tr.channels, region.channels[np.isin(region.ids, tr.ids)])


@pytest.mark.parametrize("seed", range(20))
def test_split_ratio_uniform_links(seed):
    region = toy_region("r", 1000, seed, spread=3000.0)
    tr, va = geographic_split(region, 0.8, seed)
    assert 0.75 <= len(tr) / 1000 <= 0.85


def test_split_deterministic_and_errors():
    region = toy_region("r", 400, 2)
    a = geographic_split(region, 0.8, 5)[1].ids
    b = geographic_split(region, 0.8, 5)[1].ids
    np.testing.assert_array_equal(a, b)
    with pytest.raises(SplitError):
        geographic_split(toy_region("r", 4, 0), 0.8)
    with pytest.raises(SplitError):
        geographic_split(region, 1.0)
    # everything in one cell: no split within tolerance exists
    with pytest.raises(SplitError, match="cannot reach"):
        geographic_split(toy_region("r", 50, 0, spread=1.0), 0.8)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def test_best_epoch():
    assert best_epoch([5.0, 3.0, 4.0]) == 2
    assert best_epoch([3.0, 1.0, 1.0, 2.0]) == 2
    assert best_epoch([1.0]) == 1


def test_plan_validation():
    with pytest.raises(ValueError):
        TrainPlan(split_ratio=0.0)
    with pytest.raises(ValueError):
        TrainPlan(epochs=0)
    with pytest.raises(ValueError):
        TrainPlan(lr=-1.0)
    assert (TrainPlan().runs, TrainPlan().epochs, TrainPlan().batch_size, TrainPlan().lr) == \
        (10, 200, 256, 1e-4)


@pytest.fixture(scope="module")
def toy_split():
    return split_and_pool([toy_region("a", 120, 1), toy_region("b", 120, 2, 120)], TrainPlan())


def test_train_model_best_epoch_and_curve(toy_split):
    train, val = toy_split
    plan = TrainPlan(epochs=6, batch_size=16, lr=1e-2)
    ckp = train_model(train, val, plan, ChannelConfig.of("flip"), 0, TINY)
    assert len(ckp.loss_curve) == 6
    vals = [c["val_rmse_db"] for c in ckp.loss_curve]
    assert ckp.epoch == best_epoch(vals)
    # the kept parameters reproduce the recorded validation loss
    assert evaluate_rmse_db(ckp, val) == pytest.approx(vals[ckp.epoch - 1], rel=1e-5)
    assert math.sqrt(ckp.val_loss) * 200 == pytest.approx(vals[ckp.epoch - 1], rel=1e-9)


def test_train_model_deterministic(toy_split):
    train, val = toy_split
    plan = TrainPlan(epochs=3, batch_size=32, lr=1e-3)
    a = train_model(train, val, plan, ChannelConfig.of("flip"), 4, TINY)
    b = train_model(train, val, plan, ChannelConfig.of("flip"), 4, TINY)
    for k in a.model.params:
        assert a.model.params[k].tobytes() == b.model.params[k].tobytes()
    assert a.loss_curve == b.loss_curve


def test_training_reduces_validation_error(toy_split):
    train, val = toy_split
    plan = TrainPlan(epochs=15, batch_size=16, lr=1e-2)
    ckp = train_model(train, val, plan, ChannelConfig.of("flip"), 0, TINY)
    curve = [c["val_rmse_db"] for c in ckp.loss_curve]
    assert curve[ckp.epoch - 1] < 0.5 * curve[0]


def test_batch_hook_sees_every_training_id(toy_split):
    train, val = toy_split
    seen = {"train": [], "validation": []}
    train_model(train, val, TrainPlan(epochs=2, batch_size=50), ChannelConfig.of("flip"), 0, TINY,
                on_batch=lambda kind, ids: seen[kind].append(ids.copy()))
    per_epoch = len(seen["train"]) // 2
    assert sorted(np.concatenate(seen["train"][:per_epoch])) == sorted(train.ids)
    assert len(seen["validation"]) == 2


# ---------------------------------------------------------------------------
# Cross-validation
# ---------------------------------------------------------------------------


def test_cv_report_statistics():
    rep = CvReport(["a", "b"], {"a": [7.0, 8.0, 9.0], "b": [6.0, 6.0, 9.0]})
    assert rep.mean("a") == 8.0 and rep.sd("a") == pytest.approx(1.0)
    assert rep.sd("b") == pytest.approx(math.sqrt(3.0))
    assert rep.grand_mean == pytest.approx(7.5)
    assert rep.grand_sd == pytest.approx((1.0 + math.sqrt(3.0)) / 2)
    assert math.isnan(CvReport(["a"], {"a": [7.0]}).sd("a"))


def test_cv_never_trains_on_holdout():
    regions = [toy_region("a", 60, 1, 0), toy_region("b", 60, 2, 60), toy_region("c", 60, 3, 120)]
    plan = TrainPlan(runs=2, epochs=2, batch_size=16)
    leaks = []

    def hook(holdout, kind, ids):
        own = next(r for r in regions if r.region == holdout)
        leaks.extend(set(ids.tolist()) & set(own.ids.tolist()))

    rep = cross_validate(regions, plan, ChannelConfig.of("flip"), TINY, on_batch=hook)
    assert leaks == []
    assert rep.holdouts == ["a", "b", "c"]
    assert all(len(v) == 2 for v in rep.run_rmse.values())


def test_cv_threads_match_sequential():
    regions = [toy_region("a", 50, 1, 0), toy_region("b", 50, 2, 50)]
    plan = TrainPlan(runs=2, epochs=2, batch_size=16)
    seq = cross_validate(regions, plan, ChannelConfig.of("flip"), TINY)
    par = cross_validate(regions, plan, ChannelConfig.of("flip"), TINY, threads=2)
    assert seq.run_rmse == par.run_rmse


def test_cv_argument_checks():
    with pytest.raises(ValueError):
        cross_validate([toy_region("a", 50, 1)], TrainPlan(), ChannelConfig.of("flip"), TINY)
    with pytest.raises(ValueError):
        cross_validate([toy_region("a", 50, 1), toy_region("a", 50, 2, 50)], TrainPlan(),
                       ChannelConfig.of("flip"), TINY)


# ---------------------------------------------------------------------------
# Ensemble
# ---------------------------------------------------------------------------


def members(n=4, kind="flip"):
    norm = NormalizationSpec()
    return [Checkpoint(build_model(ChannelConfig.of(kind), TINY, seed=s), norm, 1.0, s, 1)
            for s in range(n)]


def test_ensemble_is_arithmetic_mean():
    ckps = members()
    data = toy_region("x", 30, 9)
    got = ensemble_predict(ckps, data.channels, data.scalars)
    each = [evaluate_pred(c, data) for c in ckps]
    np.testing.assert_allclose(got, np.mean(each, axis=0), rtol=0, atol=1e-9)
    perm = ensemble_predict(ckps[::-1], data.channels, data.scalars)
    np.testing.assert_array_equal(got, perm)
    one = ensemble_predict(ckps, data.channels[3], data.scalars[3])
    assert one == pytest.approx(got[3], rel=1e-6)  # float32 batch vs single
    assert np.all(ensemble_predict(ckps[:1], data.channels, data.scalars) == each[0])


def evaluate_pred(ckp, data):
    from profiler_pl.nn import predict
    return ckp.norm.denormalize_target(predict(ckp.model, data.channels, data.scalars))


def test_ensemble_rmse_not_worse_than_worst_member():
    ckps = members(5)
    data = toy_region("x", 40, 10)
    truth = data.targets * 200
    ens = rmse(ensemble_predict(ckps, data.channels, data.scalars), truth)
    assert ens <= max(rmse(evaluate_pred(c, data), truth) for c in ckps) + 1e-9


def test_ensemble_contract_errors():
    with pytest.raises(ValueError):
        ensemble_predict([], np.zeros((1, 2, 8, 5)))
    mixed = members(1) + [Checkpoint(members(1)[0].model, NormalizationSpec(target_scale_db=100),
                                     1.0, 0, 1)]
    with pytest.raises(ValueError):
        ensemble_predict(mixed, np.zeros((1, 2, 8, 5)), np.zeros((1, 2)))


# ---------------------------------------------------------------------------
# Dataset assembly
# ---------------------------------------------------------------------------


def test_build_datasets_from_synthetic_links():
    r = generate_terrain(TerrainParams(seed=4, size=512))
    links = generate_measurements(r, 12, ["b", "a"], (900.0,), GroundTruthModel(), seed=0)
    links.append(LinkMeasurement(100.0, 100.0, 200.0, 100.0, 20.0, 1.5, 900.0, None, "a", link_id=99))
    ds = build_datasets(links, r, ChannelConfig.of("fine"))
    assert [d.region for d in ds] == ["a", "b"]
    assert ds[0].channels.shape == (7, 4, 256, 61) and ds[0].channels.dtype == np.float32
    assert np.isnan(ds[0].targets[-1]) and ds[0].ids[-1] == 99
    pooled = pool_datasets(ds)
    assert len(pooled) == 13 and pooled.region == "a+b"
    ds_map = build_datasets(links, {"a": r, "b": r}, ChannelConfig.of("fine"))
    assert ds_map[1].channels.tobytes() == ds[1].channels.tobytes()

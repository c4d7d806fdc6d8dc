#!/usr/bin/env python3
"""
Tests for the training engines: no-pipeline, synchronous, event-driven async and its reference
"""

from fractions import Fraction

import numpy as np
import pytest

import train_loop
from analog_device import DeviceConfig, analog_update
from net_model import ActivationKind, LossKind, Sample, full_gradient, init_network
from pipeline_schedule import ScheduleKind, measured_density, steady_density
from sim_errors import ConfigError, SaturationError, StalenessError
from synth_data import Dataset, batch_iterator, gen_gaussian_mixture, gen_teacher_regression
from train_loop import (MetricRecord, RunConfig, cycles_to_target, error_floor, eval_metrics,
                        inject_noise, lr_at, run, run_async_eventdriven, run_async_reference,
                        run_no_pipeline, run_synchronous, tau_for_degree)


def make_cfg(**overrides) -> RunConfig:
    base = dict(
        schedule=ScheduleKind("async"),
        dims=[3, 4, 1],
        activation=ActivationKind("tanh"),
        loss=LossKind("mse"),
        device=DeviceConfig.digital(),
        alpha=0.1,
        epochs=1,
        B_mini=1,
        B_micro=1,
        seed=0,
        eval_every=50,
        eval_batch=64,
    )
    base.update(overrides)
    return RunConfig(**base)


@pytest.fixture(scope="module")
def regression():
    return gen_teacher_regression(21, 400, 3, teacher_stages=2)


def assert_same_run(a, b):
    assert a.records == b.records
    assert a.summary == b.summary
    assert set(a.trajectory) == set(b.trajectory)
    for m in a.trajectory:
        assert len(a.trajectory[m]) == len(b.trajectory[m])
        for wa, wb in zip(a.trajectory[m], b.trajectory[m]):
            assert np.array_equal(wa, wb)
    for wa, wb in zip(a.final_weights, b.final_weights):
        assert np.array_equal(wa, wb)


# -- digital reduction ---------------------------------------------------------

def textbook_minibatch_sgd(weights, X, Y, alpha):
    """Plain backprop for tanh hidden layers, identity output and 1/2 squared error."""
    activations, pre = [X], []
    for i, W in enumerate(weights):
        z = activations[-1] @ W.T
        pre.append(z)
        activations.append(np.tanh(z) if i < len(weights) - 1 else z)
    delta = (activations[-1] - Y) / X.shape[0]
    updated = [None] * len(weights)
    for i in range(len(weights) - 1, -1, -1):
        updated[i] = weights[i] - alpha * (delta.T @ activations[i])
        if i > 0:
            delta = (delta @ weights[i]) * (1.0 - np.tanh(pre[i - 1]) ** 2)
    return updated


def test_digital_synchronous_equals_textbook_sgd():
    ds = gen_teacher_regression(5, 256, 4)
    cfg = make_cfg(schedule=ScheduleKind("sync", 2), dims=[4, 6, 5, 1], epochs=16, steps=500,
                   B_mini=8, B_micro=4, seed=3, eval_every=100, track_trajectory=True)
    metrics = run_synchronous(cfg, ds)
    assert metrics.summary.updates_total == 500

    weights = [metrics.trajectory[m][0] for m in range(1, cfg.M + 1)]
    per_epoch = ds.n // cfg.B_mini
    for k in range(500):
        epoch, i = divmod(k, per_epoch)
        idx = cfg.plan.epoch_order(ds.n, epoch)[i * cfg.B_mini:(i + 1) * cfg.B_mini]
        weights = textbook_minibatch_sgd(weights, ds.X[idx], ds.Y[idx], cfg.alpha)
        for m in range(1, cfg.M + 1):
            assert np.max(np.abs(metrics.trajectory[m][k + 1] - weights[m - 1])) <= 1e-12


def test_synchronous_and_no_pipeline_share_weights(regression):
    common = dict(dims=[3, 5, 2, 1], epochs=2, B_mini=8, B_micro=2, noise_sigma=0.05,
                  device=DeviceConfig.analog(4.0), eval_every=10, track_trajectory=True)
    nopipe = run_no_pipeline(make_cfg(schedule=ScheduleKind("nopipe"), **common), regression)
    sync = run_synchronous(make_cfg(schedule=ScheduleKind("sync", 4), **common), regression)
    for m in nopipe.trajectory:
        assert all(np.array_equal(a, b) for a, b in zip(nopipe.trajectory[m], sync.trajectory[m]))
    assert [r.update_k for r in nopipe.records] == [r.update_k for r in sync.records]
    assert [r.eval_loss for r in nopipe.records] == [r.eval_loss for r in sync.records]
    assert [r.clock_cycle for r in nopipe.records] != [r.clock_cycle for r in sync.records]
    # 2*3*4 vs 2*(3+4-1) cycles per mini-batch
    assert nopipe.records[1].clock_cycle == 10 * 24
    assert sync.records[1].clock_cycle == 10 * 12


# -- asynchronous engines ------------------------------------------------------

@pytest.mark.parametrize("M", [1, 2, 3, 4])
@pytest.mark.parametrize("tau", [float("inf"), 10.0, 3.0])
def test_event_driven_matches_reference(M, tau, regression):
    dims = [3] + [4] * (M - 1) + [1]
    for seed in (0, 1, 2):
        cfg = make_cfg(dims=dims, device=DeviceConfig.analog(tau), steps=200, B_mini=2, B_micro=2,
                       noise_sigma=0.02, seed=seed, track_trajectory=True)
        event = run_async_eventdriven(cfg, regression)
        reference = run_async_reference(cfg, regression)
        assert event.summary.updates_total == 200
        assert_same_run(event, reference)


def test_event_driven_checks_staleness_on_every_forward(regression, monkeypatch):
    calls = []
    original = train_loop.forward_version

    def counting(k, m, M):
        calls.append((k, m))
        return original(k, m, M)

    monkeypatch.setattr(train_loop, "forward_version", counting)
    run_async_eventdriven(make_cfg(dims=[3, 4, 4, 4, 1], steps=60), regression)
    assert sorted(calls) == [(k, m) for k in range(60) for m in range(1, 5)]


def test_event_driven_detects_wrong_version(regression, monkeypatch):
    monkeypatch.setattr(train_loop, "forward_version", lambda k, m, M: k)
    with pytest.raises(StalenessError):
        run_async_eventdriven(make_cfg(dims=[3, 4, 4, 1], steps=20), regression)


def test_single_stage_async_is_plain_analog_sgd(regression):
    cfg = make_cfg(dims=[3, 1], device=DeviceConfig.analog(2.0), steps=150, B_mini=2, B_micro=2)
    metrics = run_async_eventdriven(cfg, regression)

    W = init_network(cfg.dims, cfg.activation, cfg.loss, cfg.device,
                     np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(2)[0]),
                     output_activation=cfg.output_activation)
    stage = W.stages[0]
    for mb in list(batch_iterator(regression, cfg.plan, 0))[:150]:
        _, grads = full_gradient(W, (mb.X, mb.Y))
        stage.weight = analog_update(stage.weight, grads[0], cfg.alpha, cfg.device)
    assert np.array_equal(metrics.final_weights[0], stage.weight)


def test_zero_learning_rate_freezes_weights(regression):
    cfg = make_cfg(dims=[3, 4, 4, 1], alpha=0.0, steps=40, eval_every=10, track_trajectory=True)
    metrics = run_async_eventdriven(cfg, regression)
    for m, history in metrics.trajectory.items():
        assert all(np.array_equal(w, history[0]) for w in history)
    assert len({r.eval_loss for r in metrics.records}) == 1


def test_async_records_are_monotone_and_complete(regression):
    cfg = make_cfg(dims=[3, 4, 4, 1], steps=130, eval_every=50)
    metrics = run_async_eventdriven(cfg, regression)
    assert [r.update_k for r in metrics.records] == [0, 50, 100, 130]
    cycles = [r.clock_cycle for r in metrics.records]
    samples = [r.samples_done for r in metrics.records]
    assert cycles == sorted(cycles) and samples == sorted(samples)
    assert metrics.records[-1].clock_cycle == metrics.ledger.total_cycles
    assert metrics.records[0].train_loss == metrics.records[0].eval_loss
    frame = metrics.to_frame()
    assert list(frame.columns) == train_loop.METRIC_COLUMNS
    assert not frame.drop(columns=["accuracy"]).isna().any().any()


def test_saturation_abort_policy_stops_the_run(regression):
    cfg = make_cfg(dims=[3, 4, 1], device=DeviceConfig.analog(0.5, policy="abort"), init_scale=2.0, steps=20)
    with pytest.raises(SaturationError):
        run_async_eventdriven(cfg, regression)


def test_saturation_warning_is_counted(regression):
    cfg = make_cfg(dims=[3, 4, 1], device=DeviceConfig.analog(0.5), init_scale=2.0, steps=20)
    metrics = run(cfg, regression)
    assert metrics.summary.saturation_events > 0
    assert 1 in metrics.stats.warned_stages
    assert metrics.summary.max_saturation_degree >= 0.95


# -- densities and throughput --------------------------------------------------

def test_measured_densities_from_runs():
    ds = gen_teacher_regression(2, 1000, 2)
    tiny = dict(dims=[2, 2, 2, 2, 1], eval_every=10_000, eval_batch=8)
    nopipe = run(make_cfg(schedule=ScheduleKind("nopipe"), B_mini=5, B_micro=1, **tiny), ds)
    assert measured_density(nopipe.ledger) == 0.25
    sync = run(make_cfg(schedule=ScheduleKind("sync", 5), B_mini=5, B_micro=1, **tiny), ds)
    assert measured_density(sync.ledger) == 0.625
    asynchronous = run(make_cfg(**tiny), ds)
    assert asynchronous.summary.cycles_total >= 2000
    assert asynchronous.summary.measured_density >= 0.99
    assert steady_density(asynchronous.ledger, ScheduleKind("async")) == 1


def test_throughput_speedups_for_six_stages():
    ds = gen_teacher_regression(4, 256, 4)
    common = dict(dims=[4] * 6 + [1], epochs=2, B_mini=128, B_micro=16, eval_every=100)
    nopipe = run(make_cfg(schedule=ScheduleKind("nopipe"), **common), ds)
    sync = run(make_cfg(schedule=ScheduleKind("sync", 8), **common), ds)
    asynchronous = run(make_cfg(**common), ds)
    assert sync.ledger.throughput() / nopipe.ledger.throughput() == Fraction(48, 13)
    base = Fraction(2 * nopipe.ledger.samples_completed, nopipe.ledger.total_cycles)
    assert steady_density(asynchronous.ledger, ScheduleKind("async")) / base == 6


# -- noise, evaluation and helpers ---------------------------------------------

def test_inject_noise_moments():
    rng = np.random.default_rng(0)
    G = np.arange(12, dtype=float).reshape(3, 4) / 10
    sigma, draws = 0.3, 100_000
    assert inject_noise(G, 0.0, rng) is G
    samples = np.stack([inject_noise(G, sigma, rng) for _ in range(draws)])
    assert np.all(np.abs(samples.mean(axis=0) - G) <= 3 * sigma / np.sqrt(draws))
    total_variance = samples.var(axis=0).sum()
    assert abs(total_variance - sigma ** 2) <= 0.05 * sigma ** 2
    with pytest.raises(ConfigError):
        inject_noise(G, -1.0, rng)


def test_eval_metrics_at_stationary_point():
    rng = np.random.default_rng(1)
    model = init_network([5, 2], ActivationKind("identity"), LossKind("mse"),
                         DeviceConfig.digital(), rng)
    X = rng.normal(size=(3, 5))
    Y = X @ model.stages[0].weight.T
    assert eval_metrics(model, (X, Y)).grad_norm_sq <= 1e-12


def test_eval_metrics_matches_full_gradient():
    rng = np.random.default_rng(2)
    model = init_network([3, 4, 3], ActivationKind("tanh"), LossKind("softmax_ce"),
                         DeviceConfig.digital(), rng)
    X = rng.normal(size=(6, 3))
    Y = np.eye(3)[[0, 1, 2, 0, 1, 2]]
    result = eval_metrics(model, (X, Y))
    loss, grads = full_gradient(model, (X, Y))
    assert result.loss == loss
    assert result.grad_norm_sq == pytest.approx(sum(float(np.sum(g ** 2)) for g in grads), rel=1e-12)
    assert 0.0 <= result.accuracy <= 1.0

    single = eval_metrics(model, [Sample(X[0], Y[0])])
    single_loss, _ = full_gradient(model, [Sample(X[0], Y[0])])
    assert single.loss == single_loss


def test_learning_rate_step_decay():
    cfg = make_cfg(alpha=0.1, lr_decay_epochs=(2, 4), lr_decay_factor=0.5)
    assert [lr_at(cfg, e) for e in range(6)] == [0.1, 0.1, 0.05, 0.05, 0.025, 0.025]


def test_run_config_validation():
    with pytest.raises(ConfigError, match="B_mini not divisible by B_micro"):
        make_cfg(B_mini=10, B_micro=3)
    with pytest.raises(ConfigError):
        make_cfg(schedule=ScheduleKind("sync", 3), B_mini=8, B_micro=2)
    with pytest.raises(ConfigError):
        make_cfg(alpha=-0.1)


def test_engines_refuse_other_schedules(regression):
    with pytest.raises(ConfigError):
        run_no_pipeline(make_cfg(), regression)
    with pytest.raises(ConfigError):
        run_async_reference(make_cfg(schedule=ScheduleKind("nopipe")), regression)
    with pytest.raises(ConfigError):
        run(make_cfg(dims=[5, 1]), regression)


@pytest.mark.parametrize("engine, schedule", [
    (run_no_pipeline, ScheduleKind("nopipe")),
    (run_async_eventdriven, ScheduleKind("async")),
    (run_async_reference, ScheduleKind("async")),
])
def test_features_off_the_unit_sphere_are_rejected(engine, schedule, regression):
    scaled = Dataset(regression.X * 2.0, regression.Y)
    with pytest.raises(ConfigError) as info:
        engine(make_cfg(schedule=schedule), scaled)
    assert info.value.key == "normalize"
    with pytest.raises(ConfigError):
        engine(make_cfg(schedule=schedule), regression, scaled)


def test_cycles_to_target_picks_first_crossing():
    records = [MetricRecord(k, 10 * k, 1.0, loss, 0.0, acc, 0.0, k)
               for k, loss, acc in [(0, 0.9, 0.5), (1, 0.4, 0.8), (2, 0.6, 0.95), (3, 0.3, 0.97)]]
    assert cycles_to_target(records, target_loss=0.5).clock_cycle == 10
    assert cycles_to_target(records, target_accuracy=0.9).clock_cycle == 20
    assert cycles_to_target(records, target_loss=0.1) is None
    assert cycles_to_target(records) is None


# -- error floor ---------------------------------------------------------------

def test_error_floor_grows_with_saturation_and_noise():
    degrees = (0.0, 0.3, 0.6)
    floors = [error_floor(tau_for_degree(d), sigma=0.1) for d in degrees]
    assert floors[0] < floors[1] < floors[2]
    for degree, floor in zip(degrees[:2], floors[:2]):
        ratio = floor / error_floor(tau_for_degree(degree), sigma=0.05)
        assert 4.0 / 1.5 <= ratio <= 4.0 * 1.5


# -- desk-scale convergence ----------------------------------------------------

@pytest.fixture(scope="module")
def mixture_runs():
    ds = gen_gaussian_mixture(0, 2048, 16, classes=2)
    common = dict(dims=[16, 16, 16, 2], loss=LossKind("softmax_ce"), alpha=0.1, epochs=30,
                  B_mini=128, B_micro=16, eval_every=20, eval_batch=512, seed=1)
    return {
        "nopipe": run(make_cfg(schedule=ScheduleKind("nopipe"), **common), ds),
        "sync": run(make_cfg(schedule=ScheduleKind("sync", 8), **common), ds),
        "async": run(make_cfg(schedule=ScheduleKind("async"), steps=480, **common), ds),
    }


def test_async_and_sync_reach_similar_loss(mixture_runs):
    sync, asynchronous = mixture_runs["sync"].summary, mixture_runs["async"].summary
    assert sync.updates_total == asynchronous.updates_total == 480
    assert abs(asynchronous.final_loss - sync.final_loss) / sync.final_loss <= 0.05


def test_async_reaches_mid_training_target_in_fewer_cycles(mixture_runs):
    sync_records = mixture_runs["sync"].records
    target = next(r.eval_loss for r in sync_records if r.update_k == 160)
    sync_hit = cycles_to_target(sync_records, target_loss=target)
    async_hit = cycles_to_target(mixture_runs["async"].records, target_loss=target)
    nopipe_hit = cycles_to_target(mixture_runs["nopipe"].records, target_loss=target)
    assert async_hit is not None
    assert async_hit.clock_cycle <= 0.5 * sync_hit.clock_cycle
    # identical dynamics, so the clock ratio is the throughput ratio 2*3*8 / (2*(3+8-1))
    assert nopipe_hit.update_k == sync_hit.update_k
    assert Fraction(nopipe_hit.clock_cycle, sync_hit.clock_cycle) == Fraction(12, 5)


@pytest.fixture(scope="module")
def six_stage_runs():
    ds = gen_gaussian_mixture(0, 2048, 16, classes=2)
    common = dict(dims=[16] * 6 + [2], loss=LossKind("softmax_ce"), epochs=20,
                  B_mini=128, B_micro=16, eval_batch=512, seed=1)
    return {
        "nopipe": run(make_cfg(schedule=ScheduleKind("nopipe"), alpha=0.1, eval_every=1, **common), ds),
        "sync": run(make_cfg(schedule=ScheduleKind("sync", 8), alpha=0.1, eval_every=1, **common), ds),
        # alpha_sync / B: same per-sample step, records once per mini-batch worth of samples
        "async": run(make_cfg(schedule=ScheduleKind("async"), alpha=0.1 / 8, eval_every=8, **common), ds),
    }


def test_six_stage_time_to_target_speedups(six_stage_runs):
    sync_records = six_stage_runs["sync"].records
    target = 0.5 * (sync_records[0].eval_loss + sync_records[-1].eval_loss)
    hits = {name: cycles_to_target(metrics.records, target_loss=target)
            for name, metrics in six_stage_runs.items()}
    assert all(hit is not None for hit in hits.values())
    baseline = hits["nopipe"].clock_cycle
    assert Fraction(baseline, hits["sync"].clock_cycle) == Fraction(48, 13)
    assert 3.0 <= baseline / hits["async"].clock_cycle <= 9.0

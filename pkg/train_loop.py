"""
Training runs under the three pipeline strategies
No-pipeline and synchronous mini-batch training, the event-driven asynchronous engine,
the sequential delay-line reference used to check it, gradient-noise injection and evaluation.

The asynchronous engine keeps exactly one weight matrix per stage and mutates
it in (cycle, stage) order; stale forwards come for free from the timetable.
The reference engine walks one datum at a time and reads old weight versions
out of small per-stage ring buffers. Both perform the same floating-point
operations in the same order, so their trajectories match bit for bit.
"""

import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Deque, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from analog_device import (DeviceConfig, SaturationError, UpdateStats, amplification_factor,
                           amplification_factor_linear, analog_update, check_saturation,
                           minibatch_analog_update)
from dense_core import Matrix, Tensor, ewise, norms, vecmat
from net_model import (ActivationKind, Batch, LossKind, NetworkModel, StageState, as_batch,
                       forward_stage, full_gradient, gradient_norm_sq, init_network, loss_head,
                       predict, stage_gradient, weights_of, with_weights)
from pipeline_schedule import (BACKWARD, FORWARD, CycleLedger, ScheduleKind, async_event_stream,
                               backward_cycle, cycles_no_pipeline, cycles_synchronous,
                               forward_version, measured_density, steady_density)
from sim_errors import ConfigError, StalenessError
from synth_data import BatchPlan, Dataset, MicroBatch, batch_iterator


@dataclass
class RunConfig:
    """Everything one training run needs. ``dims`` lists d_0..d_M, so M = len(dims) - 1."""
    name: str = "run"
    schedule: ScheduleKind = field(default_factory=ScheduleKind)
    dims: List[int] = field(default_factory=lambda: [8, 8, 1])
    activation: ActivationKind = field(default_factory=lambda: ActivationKind("tanh"))
    output_activation: ActivationKind = field(default_factory=lambda: ActivationKind("identity"))
    loss: LossKind = field(default_factory=lambda: LossKind("mse"))
    device: DeviceConfig = field(default_factory=DeviceConfig.digital)
    alpha: float = 0.1
    epochs: int = 1
    steps: Optional[int] = None  # cap on weight updates
    B_mini: int = 1
    B_micro: int = 1
    noise_sigma: float = 0.0
    seed: int = 0
    eval_every: int = 50
    eval_batch: int = 256
    lr_decay_epochs: Tuple[int, ...] = ()
    lr_decay_factor: float = 0.1
    init_scale: float = 1.0
    amplification_u: float = 1.0
    target_loss: Optional[float] = None
    target_accuracy: Optional[float] = None
    track_trajectory: bool = False
    verbose: bool = False

    def __post_init__(self):
        if len(self.dims) < 2:
            raise ConfigError("dims must list the input size and at least one stage output", key="dims")
        if self.B_mini < 1 or self.B_micro < 1 or self.B_mini % self.B_micro != 0:
            raise ConfigError("B_mini not divisible by B_micro", key="B_mini")
        if self.alpha < 0 or not math.isfinite(self.alpha):
            raise ConfigError("alpha must be finite and >= 0", key="alpha")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0", key="noise_sigma")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1", key="epochs")
        if self.steps is not None and self.steps < 1:
            raise ConfigError("steps must be >= 1", key="steps")
        if self.eval_every < 1 or self.eval_batch < 1:
            raise ConfigError("eval_every and eval_batch must be >= 1", key="eval_every")
        if self.schedule.kind == "sync" and self.schedule.B != self.B:
            raise ConfigError(f"sync schedule has B={self.schedule.B} but B_mini/B_micro = {self.B}",
                              key="B_micro")

    @property
    def M(self) -> int:
        return len(self.dims) - 1

    @property
    def B(self) -> int:
        return self.B_mini // self.B_micro

    @property
    def plan(self) -> BatchPlan:
        return BatchPlan(self.B_mini, self.B_micro, self.seed)


@dataclass
class InFlightSlot:
    """What a stage keeps between a datum's forward and its backward."""
    datum: int
    stage: int
    x_in: Tensor
    gprime: Tensor


@dataclass
class MetricRecord:
    update_k: int
    clock_cycle: int
    train_loss: float
    eval_loss: float
    grad_norm_sq: float
    accuracy: Optional[float]
    max_weight_inf: float
    samples_done: int


@dataclass
class RunSummary:
    final_loss: float
    final_accuracy: Optional[float]
    updates_total: int
    cycles_total: int
    samples_total: int
    measured_density: float
    steady_density: float
    cycles_to_target: Optional[int]
    updates_to_target: Optional[int]
    max_saturation_degree: float
    saturation_events: int
    amplification_S: Optional[float]
    amplification_Sprime_u: Optional[float]
    amplification_S_printed: Optional[float]


@dataclass
class RunMetrics:
    name: str
    schedule: ScheduleKind
    records: List[MetricRecord]
    summary: RunSummary
    ledger: CycleLedger
    stats: UpdateStats
    final_weights: List[Matrix]
    trajectory: Dict[int, List[Matrix]] = field(default_factory=dict)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([vars(r) for r in self.records], columns=METRIC_COLUMNS)


METRIC_COLUMNS = ["update_k", "clock_cycle", "train_loss", "eval_loss", "grad_norm_sq",
                  "accuracy", "max_weight_inf", "samples_done"]


@dataclass
class EvalResult:
    loss: float
    grad_norm_sq: float
    accuracy: Optional[float] = None


def inject_noise(G: Matrix, sigma: float, rng: np.random.Generator) -> Matrix:
    """Add zero-mean Gaussian noise of total variance sigma^2 spread evenly over the entries."""
    if sigma < 0:
        raise ConfigError("noise sigma must be >= 0", key="noise_sigma")
    if sigma == 0:
        return G
    return G + rng.normal(0.0, sigma / math.sqrt(G.size), size=G.shape)


def eval_metrics(model: NetworkModel, eval_batch: Batch) -> EvalResult:
    """Loss, squared gradient norm and (for classification) accuracy on a fixed batch."""
    X, Y = as_batch(eval_batch)
    loss_value, grads = full_gradient(model, (X, Y))
    accuracy = None
    if model.loss.kind == "softmax_ce":
        hits = np.argmax(predict(model, X), axis=1) == np.argmax(Y, axis=1)
        accuracy = float(np.mean(hits))
    return EvalResult(loss=loss_value, grad_norm_sq=gradient_norm_sq(grads), accuracy=accuracy)


def lr_at(cfg: RunConfig, epoch: int) -> float:
    """Step decay: alpha times the decay factor once per passed decay epoch."""
    drops = sum(1 for e in cfg.lr_decay_epochs if epoch >= e)
    return cfg.alpha * cfg.lr_decay_factor ** drops


def cycles_to_target(records: Sequence[MetricRecord], target_loss: Optional[float] = None,
                     target_accuracy: Optional[float] = None) -> Optional[MetricRecord]:
    """First record whose eval metric crosses the target; None if never crossed."""
    if target_loss is None and target_accuracy is None:
        return None
    for rec in records:
        if target_loss is not None and rec.eval_loss <= target_loss:
            return rec
        if target_accuracy is not None and rec.accuracy is not None and rec.accuracy >= target_accuracy:
            return rec
    return None


class _Recorder:
    """Collects metric records at update 0, every eval_every updates and the last update."""

    def __init__(self, cfg: RunConfig, model: NetworkModel, eval_X: Matrix, eval_Y: Matrix,
                 total_updates: int):
        self.cfg = cfg
        self.template = model
        self.eval_batch = (eval_X, eval_Y)
        self.total = total_updates
        self.records: List[MetricRecord] = []
        self.losses: List[float] = []
        self._consumed = 0

    def due(self, k: int) -> bool:
        return k % self.cfg.eval_every == 0 or k == self.total

    def eval_points(self) -> List[int]:
        return [k for k in range(1, self.total + 1) if self.due(k)]

    def record(self, k: int, clock: int, weights: Sequence[Matrix], samples_done: int,
               loss_upto: int) -> MetricRecord:
        result = eval_metrics(with_weights(self.template, weights), self.eval_batch)
        pending = self.losses[self._consumed:loss_upto]
        self._consumed = max(self._consumed, loss_upto)
        train_loss = float(np.mean(pending)) if pending else result.loss
        rec = MetricRecord(
            update_k=k,
            clock_cycle=clock,
            train_loss=train_loss,
            eval_loss=result.loss,
            grad_norm_sq=result.grad_norm_sq,
            accuracy=result.accuracy,
            max_weight_inf=max(norms(w).inf for w in weights),
            samples_done=samples_done,
        )
        self.records.append(rec)
        if self.cfg.verbose:
            acc = f", acc {rec.accuracy:.3f}" if rec.accuracy is not None else ""
            print(f"  📈 {self.cfg.name} k={k} cycle={clock}: eval loss {rec.eval_loss:.5f}{acc}")
        return rec


def _setup(cfg: RunConfig, data: Dataset,
           eval_data: Optional[Dataset]) -> Tuple[NetworkModel, List[np.random.Generator], Matrix, Matrix]:
    if data.feature_dim != cfg.dims[0] or data.label_dim != cfg.dims[-1]:
        raise ConfigError(f"dims {cfg.dims} do not fit data with {data.feature_dim} features "
                          f"and {data.label_dim} label columns", key="dims")
    if cfg.loss.kind == "softmax_ce" and data.task != "classification":
        raise ConfigError("softmax_ce needs a classification dataset", key="loss")
    for ds in (data, eval_data):
        if ds is not None and not ds.is_normalized():
            raise ConfigError("feature rows must have unit L2 norm (set normalize = true)", key="normalize")
    # one stream for initialisation, one noise stream per stage
    init_seq, *noise_seqs = np.random.SeedSequence(cfg.seed).spawn(1 + cfg.M)
    model = init_network(cfg.dims, cfg.activation, cfg.loss, cfg.device,
                         np.random.default_rng(init_seq), cfg.init_scale, cfg.output_activation)
    source = eval_data if eval_data is not None else data
    n_eval = min(cfg.eval_batch, source.n)
    return model, [np.random.default_rng(s) for s in noise_seqs], source.X[:n_eval], source.Y[:n_eval]


def _monitor(stage: StageState, m: int, stats: UpdateStats, update: int, cfg: RunConfig) -> None:
    stats.updates_applied += 1
    check = check_saturation(stage.weight, stage.device, stats, stage=m, update=update)
    if check.triggered and m not in stats.warned_stages:
        stats.warned_stages.add(m)
        if cfg.verbose:
            print(f"  ⚠️ {cfg.name}: stage {m} saturation degree {check.degree:.3f} "
                  f">= {stage.device.saturation_limit} at update {update}")


def _summarize(cfg: RunConfig, records: List[MetricRecord], ledger: CycleLedger,
               stats: UpdateStats, updates: int) -> RunSummary:
    hit = cycles_to_target(records, cfg.target_loss, cfg.target_accuracy)
    degree = stats.max_degree_seen

    def _safe(fn, *args):
        try:
            return fn(*args)
        except SaturationError:
            return None

    last = records[-1]
    return RunSummary(
        final_loss=last.eval_loss,
        final_accuracy=last.accuracy,
        updates_total=updates,
        cycles_total=ledger.total_cycles,
        samples_total=last.samples_done,
        measured_density=measured_density(ledger) if ledger.total_cycles else 0.0,
        steady_density=float(steady_density(ledger, cfg.schedule)) if ledger.total_cycles else 0.0,
        cycles_to_target=hit.clock_cycle if hit else None,
        updates_to_target=hit.update_k if hit else None,
        max_saturation_degree=degree,
        saturation_events=stats.saturation_events,
        amplification_S=_safe(amplification_factor, degree, 0.0),
        amplification_Sprime_u=_safe(amplification_factor, degree, cfg.amplification_u),
        amplification_S_printed=_safe(amplification_factor_linear, degree, cfg.device.inv_tau, 0.0),
    )


def _require(cfg: RunConfig, *kinds: str) -> None:
    if cfg.schedule.kind not in kinds:
        raise ConfigError(f"schedule '{cfg.schedule.kind}' cannot run here (expects {kinds})",
                          key="schedule")


def _run_minibatch(cfg: RunConfig, data: Dataset, eval_data: Optional[Dataset],
                   charge_cycles: int) -> RunMetrics:
    """Shared body of the no-pipeline and synchronous strategies; only the clock differs."""
    model, noise_rngs, eval_X, eval_Y = _setup(cfg, data, eval_data)
    plan = cfg.plan
    B, M = plan.B, model.M
    per_epoch = plan.mini_batches_per_epoch(data.n)
    if per_epoch == 0:
        raise ConfigError(f"dataset of {data.n} samples is smaller than B_mini={cfg.B_mini}", key="B_mini")
    total = per_epoch * cfg.epochs if cfg.steps is None else min(cfg.steps, per_epoch * cfg.epochs)

    ledger = CycleLedger(M)
    stats = UpdateStats()
    recorder = _Recorder(cfg, model, eval_X, eval_Y, total)
    trajectory = {m: [s.weight] for m, s in enumerate(model.stages, start=1)} if cfg.track_trajectory else {}
    recorder.record(0, 0, weights_of(model), 0, 0)

    k = 0
    for epoch in range(cfg.epochs):
        if k >= total:
            break
        alpha = lr_at(cfg, epoch)
        micro = list(batch_iterator(data, plan, epoch))
        for i in range(per_epoch):
            if k >= total:
                break
            # every micro-batch gradient is taken at the same W_k
            per_micro = [full_gradient(model, (mb.X, mb.Y)) for mb in micro[i * B:(i + 1) * B]]
            for m, stage in enumerate(model.stages, start=1):
                grads = [inject_noise(g[m - 1], cfg.noise_sigma, noise_rngs[m - 1]) for _, g in per_micro]
                stage.weight = minibatch_analog_update(stage.weight, grads, alpha, stage.device)
                stage.version += 1
                _monitor(stage, m, stats, k + 1, cfg)
                if cfg.track_trajectory:
                    trajectory[m].append(stage.weight)
            recorder.losses.extend(loss for loss, _ in per_micro)
            ledger.charge(charge_cycles, 2 * M * B, B)
            k += 1
            if recorder.due(k):
                recorder.record(k, ledger.total_cycles, weights_of(model), k * cfg.B_mini,
                                len(recorder.losses))

    return RunMetrics(cfg.name, cfg.schedule, recorder.records,
                      _summarize(cfg, recorder.records, ledger, stats, k),
                      ledger, stats, weights_of(model), trajectory)


def run_no_pipeline(cfg: RunConfig, data: Dataset, eval_data: Optional[Dataset] = None) -> RunMetrics:
    """Vanilla model parallelism: 2M cycles per micro-batch, one mini-batch analog update per mini-batch."""
    _require(cfg, "nopipe")
    return _run_minibatch(cfg, data, eval_data, cycles_no_pipeline(cfg.M, cfg.B))


def run_synchronous(cfg: RunConfig, data: Dataset, eval_data: Optional[Dataset] = None) -> RunMetrics:
    """Same weight dynamics as no-pipeline; the pipeline charges 2(M+B-1) cycles per mini-batch."""
    _require(cfg, "sync")
    return _run_minibatch(cfg, data, eval_data, cycles_synchronous(cfg.M, cfg.B))


def _micro_batch_stream(cfg: RunConfig, data: Dataset) -> List[MicroBatch]:
    plan = cfg.plan
    if plan.micro_batches_per_epoch(data.n) == 0:
        raise ConfigError(f"dataset of {data.n} samples is smaller than B_mini={cfg.B_mini}", key="B_mini")
    stream: List[MicroBatch] = []
    for epoch in range(cfg.epochs):
        for mb in batch_iterator(data, plan, epoch):
            if cfg.steps is not None and len(stream) >= cfg.steps:
                return stream
            stream.append(mb)
    return stream


def _async_ledger(M: int, K: int) -> CycleLedger:
    ledger = CycleLedger(M)
    ledger.charge(backward_cycle(K - 1, 1, M) + 1, 2 * M * K, K)
    return ledger


def _record_clock(v: int, M: int) -> int:
    """Cycles elapsed once stage 1 has applied its v-th update."""
    return backward_cycle(v - 1, 1, M) + 1 if v > 0 else 0


def run_async_eventdriven(cfg: RunConfig, data: Dataset,
                          eval_data: Optional[Dataset] = None) -> RunMetrics:
    """
    Asynchronous pipeline executed event by event with one live weight per stage.

    A backward event first sends its error upstream through the stage's current
    weight and only then applies the device update. Evaluation snapshots hold
    references to the weight arrays of version v; training never reads them.
    """
    _require(cfg, "async")
    model, noise_rngs, eval_X, eval_Y = _setup(cfg, data, eval_data)
    stream = _micro_batch_stream(cfg, data)
    K, M = len(stream), model.M
    stats = UpdateStats()
    recorder = _Recorder(cfg, model, eval_X, eval_Y, K)
    recorder.losses = [0.0] * K
    eval_points = set(recorder.eval_points())
    trajectory = {m: [s.weight] for m, s in enumerate(model.stages, start=1)} if cfg.track_trajectory else {}
    recorder.record(0, 0, weights_of(model), 0, 0)

    carry: Dict[Tuple[int, int], Tensor] = {}
    slots: Dict[Tuple[int, int], InFlightSlot] = {}
    errors: Dict[Tuple[int, int], Tensor] = {}
    snapshots: Dict[int, Dict[int, Matrix]] = {}

    for ev in async_event_stream(M, K):
        k, m = ev.datum, ev.stage
        stage = model.stages[m - 1]

        if ev.kind == FORWARD:
            expected = forward_version(k, m, M)
            if stage.version != expected:
                raise StalenessError(f"forward of datum {k} at stage {m} saw version "
                                     f"{stage.version}, expected {expected}")
            x_in = stream[k].X if m == 1 else carry.pop((k, m))
            fwd = forward_stage(stage, x_in)
            slots[(k, m)] = InFlightSlot(k, m, x_in, fwd.gprime)
            if m < M:
                carry[(k, m + 1)] = fwd.x_out
            else:
                # the loss head rides on the last stage's forward cycle
                recorder.losses[k], errors[(k, M)] = loss_head(
                    fwd.x_out, fwd.z, stream[k].Y, model.loss, stage.activation)
            continue

        assert ev.kind == BACKWARD
        slot = slots.pop((k, m))
        incoming = errors.pop((k, m))
        delta = incoming if m == M else ewise(incoming, slot.gprime, "mul")
        if m > 1:
            errors[(k, m - 1)] = vecmat(delta, stage.weight)
        G = inject_noise(stage_gradient(delta, slot.x_in), cfg.noise_sigma, noise_rngs[m - 1])
        stage.weight = analog_update(stage.weight, G, lr_at(cfg, stream[k].epoch), stage.device)
        stage.version += 1
        _monitor(stage, m, stats, stage.version, cfg)
        if cfg.track_trajectory:
            trajectory[m].append(stage.weight)

        v = stage.version
        if v in eval_points:
            snapshots.setdefault(v, {})[m] = stage.weight
            if m == 1:
                snap = snapshots.pop(v)
                recorder.record(v, _record_clock(v, M), [snap[i] for i in range(1, M + 1)],
                                v * cfg.B_micro, v)

    if slots or errors or carry:
        raise StalenessError("pipeline drained with data still in flight")
    ledger = _async_ledger(M, K)
    return RunMetrics(cfg.name, cfg.schedule, recorder.records,
                      _summarize(cfg, recorder.records, ledger, stats, K),
                      ledger, stats, weights_of(model), trajectory)


def _stashed(history: Deque[Tuple[int, Matrix]], version: int) -> Matrix:
    for v, W in history:
        if v == version:
            return W
    raise StalenessError(f"weight version {version} is no longer stashed")


def run_async_reference(cfg: RunConfig, data: Dataset,
                        eval_data: Optional[Dataset] = None) -> RunMetrics:
    """
    Data-perspective asynchronous pipeline: each datum runs forward on stashed stale
    weights, then backward through the live weights, stage M down to 1.

    The error leaving stage m+1 is computed before stage m+1 updates, so the
    backward product sees W^(m+1) at version k.
    """
    _require(cfg, "async")
    model, noise_rngs, eval_X, eval_Y = _setup(cfg, data, eval_data)
    stream = _micro_batch_stream(cfg, data)
    K, M = len(stream), model.M
    stats = UpdateStats()
    recorder = _Recorder(cfg, model, eval_X, eval_Y, K)
    recorder.losses = [0.0] * K
    trajectory = {m: [s.weight] for m, s in enumerate(model.stages, start=1)} if cfg.track_trajectory else {}
    recorder.record(0, 0, weights_of(model), 0, 0)

    # stage m needs versions k-(M-m) .. k, i.e. M-m+1 entries
    history: List[Deque[Tuple[int, Matrix]]] = [
        deque([(0, s.weight)], maxlen=M - m + 1) for m, s in enumerate(model.stages, start=1)
    ]

    for k, mb in enumerate(stream):
        slots: List[InFlightSlot] = []
        x = mb.X
        for m, stage in enumerate(model.stages, start=1):
            stale = replace(stage, weight=_stashed(history[m - 1], forward_version(k, m, M)))
            fwd = forward_stage(stale, x)
            slots.append(InFlightSlot(k, m, x, fwd.gprime))
            x = fwd.x_out
        recorder.losses[k], incoming = loss_head(fwd.x_out, fwd.z, mb.Y, model.loss,
                                                 model.stages[-1].activation)

        alpha = lr_at(cfg, mb.epoch)
        for m in range(M, 0, -1):
            stage, slot = model.stages[m - 1], slots[m - 1]
            delta = incoming if m == M else ewise(incoming, slot.gprime, "mul")
            if m > 1:
                incoming = vecmat(delta, stage.weight)
            G = inject_noise(stage_gradient(delta, slot.x_in), cfg.noise_sigma, noise_rngs[m - 1])
            stage.weight = analog_update(stage.weight, G, alpha, stage.device)
            stage.version += 1
            history[m - 1].append((stage.version, stage.weight))
            _monitor(stage, m, stats, stage.version, cfg)
            if cfg.track_trajectory:
                trajectory[m].append(stage.weight)

        v = k + 1
        if recorder.due(v):
            recorder.record(v, _record_clock(v, M), weights_of(model), v * cfg.B_micro, v)

    ledger = _async_ledger(M, K)
    return RunMetrics(cfg.name, cfg.schedule, recorder.records,
                      _summarize(cfg, recorder.records, ledger, stats, K),
                      ledger, stats, weights_of(model), trajectory)


RUNNERS = {
    "nopipe": run_no_pipeline,
    "sync": run_synchronous,
    "async": run_async_eventdriven,
}


def run(cfg: RunConfig, data: Dataset, eval_data: Optional[Dataset] = None) -> RunMetrics:
    """Dispatch on the configured schedule."""
    return RUNNERS[cfg.schedule.kind](cfg, data, eval_data)


def run_noisy_quadratic(tau: float, sigma: float, alpha: float = 0.01, steps: int = 20000,
                        seed: int = 0, w_star: float = 0.3, w0: float = 0.0) -> np.ndarray:
    """
    Analog SGD on f(w) = 1/2 (w - w*)^2 with injected gradient noise.

    Returns the squared true gradient (w_t - w*)^2 before every step.
    """
    dev = DeviceConfig.analog(tau)
    rng = np.random.default_rng(seed)
    W = np.array([[w0]], dtype=np.float64)
    target = np.array([[w_star]], dtype=np.float64)
    series = np.empty(steps)
    for t in range(steps):
        grad = W - target
        series[t] = grad[0, 0] * grad[0, 0]
        W = analog_update(W, inject_noise(grad, sigma, rng), alpha, dev)
    return series


def tau_for_degree(degree: float, w_star: float = 0.3) -> float:
    """Device bound giving nominal saturation degree |w*| / tau; degree 0 is the digital device."""
    return math.inf if degree == 0 else abs(w_star) / degree


def error_floor(tau: float, sigma: float, alpha: float = 0.01, steps: int = 20000,
                seeds: Sequence[int] = (0, 1, 2, 3, 4), w_star: float = 0.3) -> float:
    """Long-run average squared gradient: mean over the last half of the run and over seeds."""
    tails = [run_noisy_quadratic(tau, sigma, alpha, steps, seed, w_star)[steps // 2:].mean()
             for seed in seeds]
    return float(np.mean(tails))

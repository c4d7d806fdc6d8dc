"""
Pipeline schedules and clock-cycle accounting
Timetables for the no-pipeline, synchronous and asynchronous strategies, the closed-form
async event times, the staleness law and computation density.

Time unit: one clock cycle = one stage processing one micro-batch in one
direction. Stages are numbered 1..M, data (micro-batches) from 0.
"""

from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, List, Sequence

import pandas as pd

from sim_errors import ConfigError, StalenessError

FORWARD = "forward"
BACKWARD = "backward"
SCHEDULES = ("nopipe", "sync", "async")


@dataclass(frozen=True)
class ScheduleKind:
    """Execution strategy; ``B`` is the micro-batch count per mini-batch."""
    kind: str = "async"
    B: int = 1

    def __post_init__(self):
        if self.kind not in SCHEDULES:
            raise ConfigError(f"unknown schedule '{self.kind}' (expected one of {SCHEDULES})",
                              key="schedule")
        if self.B < 1:
            raise ConfigError("micro-batch count B must be >= 1", key="B")

    @property
    def label(self) -> str:
        return f"sync(B={self.B})" if self.kind == "sync" else self.kind


@dataclass(frozen=True, order=True)
class ScheduleEvent:
    cycle: int
    stage: int
    kind: str
    datum: int


@dataclass
class CycleLedger:
    """
    Clock accounting for one run.

    ``samples_completed`` counts micro-batches (the pipeline's unit of work),
    ``busy_slots`` counts stage-cycles spent on a forward or backward.
    """
    M: int
    total_cycles: int = 0
    busy_slots: int = 0
    samples_completed: int = 0

    def charge(self, cycles: int, busy: int, samples: int) -> None:
        self.total_cycles += cycles
        self.busy_slots += busy
        self.samples_completed += samples
        if self.busy_slots > self.total_cycles * self.M:
            raise StalenessError(
                f"ledger overcommitted: {self.busy_slots} busy slots in "
                f"{self.total_cycles} cycles x {self.M} stages")

    def throughput(self) -> Fraction:
        """Micro-batches per clock cycle as an exact rational."""
        if self.total_cycles == 0:
            return Fraction(0)
        return Fraction(self.samples_completed, self.total_cycles)


def _check_stages(M: int) -> None:
    if M < 1:
        raise ConfigError("stage count M must be >= 1", key="M")


def cycles_no_pipeline(M: int, micro_batches: int) -> int:
    _check_stages(M)
    return 2 * M * micro_batches


def cycles_synchronous(M: int, B: int) -> int:
    """Cycles for one mini-batch of B micro-batches through a filled-then-drained pipeline."""
    _check_stages(M)
    if B < 1:
        raise ConfigError("micro-batch count B must be >= 1", key="B")
    return 2 * (M + B - 1)


def forward_cycle(k: int, m: int, M: int) -> int:
    return 2 * k + m - 1


def backward_cycle(k: int, m: int, M: int) -> int:
    return 2 * k + 2 * M - m


def async_event_stream(M: int, K: int) -> List[ScheduleEvent]:
    """
    Every forward and backward event of K data through an M-stage async pipeline.

    Forward(k, m) runs at cycle 2k+m-1 and Backward(k, m) at 2k+2M-m. Events are
    ordered by (cycle, stage); a stage never has two events in one cycle.
    """
    _check_stages(M)
    if K < 1:
        raise ConfigError("async stream needs at least one datum", key="K")
    events = []
    for k in range(K):
        for m in range(1, M + 1):
            events.append(ScheduleEvent(forward_cycle(k, m, M), m, FORWARD, k))
            events.append(ScheduleEvent(backward_cycle(k, m, M), m, BACKWARD, k))
    events.sort(key=lambda e: (e.cycle, e.stage))
    return events


def no_pipeline_events(M: int, K: int) -> List[ScheduleEvent]:
    """Sequential timetable: one micro-batch occupies the whole chain for 2M cycles."""
    _check_stages(M)
    events = []
    for k in range(K):
        base = 2 * M * k
        for m in range(1, M + 1):
            events.append(ScheduleEvent(base + m - 1, m, FORWARD, k))
            events.append(ScheduleEvent(base + 2 * M - m, m, BACKWARD, k))
    events.sort(key=lambda e: (e.cycle, e.stage))
    return events


def synchronous_events(M: int, B: int, mini_batches: int = 1) -> List[ScheduleEvent]:
    """Fill-then-drain timetable: all B forwards, then all B backwards, per mini-batch."""
    span = cycles_synchronous(M, B)
    events = []
    for i in range(mini_batches):
        base = span * i
        for b in range(B):
            k = i * B + b
            for m in range(1, M + 1):
                events.append(ScheduleEvent(base + b + m - 1, m, FORWARD, k))
                events.append(ScheduleEvent(base + (M + B - 1) + b + (M - m), m, BACKWARD, k))
    events.sort(key=lambda e: (e.cycle, e.stage))
    return events


def timeline_events(schedule: ScheduleKind, M: int, K: int) -> List[ScheduleEvent]:
    """Timetable of K micro-batches (rounded up to whole mini-batches for sync)."""
    _check_stages(M)
    if K < 1:
        raise ConfigError(f"timeline needs at least one micro-batch, got K={K}", key="K")
    if schedule.kind == "async":
        return async_event_stream(M, K)
    if schedule.kind == "nopipe":
        return no_pipeline_events(M, K)
    mini_batches = -(-K // schedule.B)
    return synchronous_events(M, schedule.B, mini_batches)


def validate_timeline(events: Iterable[ScheduleEvent], M: int) -> None:
    """Each (cycle, stage) slot holds at most one event; forwards come before backwards."""
    events = list(events)
    seen = set()
    forward_at = {}
    for ev in events:
        if not 1 <= ev.stage <= M:
            raise StalenessError(f"event on unknown stage {ev.stage}")
        slot = (ev.cycle, ev.stage)
        if slot in seen:
            raise StalenessError(f"two events on stage {ev.stage} at cycle {ev.cycle}")
        seen.add(slot)
        if ev.kind == FORWARD:
            forward_at[(ev.datum, ev.stage)] = ev.cycle
    for ev in events:
        if ev.kind == BACKWARD and forward_at.get((ev.datum, ev.stage), ev.cycle) >= ev.cycle:
            raise StalenessError(f"backward of datum {ev.datum} at stage {ev.stage} precedes its forward")


def timeline_frame(events: Sequence[ScheduleEvent]) -> pd.DataFrame:
    """Events as a cycle,stage,kind,datum table for Gantt-style inspection."""
    return pd.DataFrame(
        [(e.cycle, e.stage, e.kind, e.datum) for e in events],
        columns=["cycle", "stage", "kind", "datum"],
    )


def forward_version(k: int, m: int, M: int) -> int:
    """Weight version the forward of datum k must observe at stage m."""
    if not 1 <= m <= M:
        raise ConfigError(f"stage {m} outside 1..{M}", key="M")
    return max(k - (M - m), 0)


def fill_drain_cycles(schedule: ScheduleKind, M: int) -> int:
    """Idle start-up and shut-down cycles of a single continuous async run."""
    return 2 * M - 2 if schedule.kind == "async" else 0


def measured_density(ledger: CycleLedger) -> float:
    """2 * micro-batches completed / cycles elapsed."""
    if ledger.total_cycles <= 0:
        raise ConfigError("density needs at least one elapsed cycle", key="total_cycles")
    return 2.0 * ledger.samples_completed / ledger.total_cycles


def steady_density(ledger: CycleLedger, schedule: ScheduleKind) -> Fraction:
    """Density after removing fill/drain cycles, as an exact rational."""
    cycles = ledger.total_cycles - fill_drain_cycles(schedule, ledger.M)
    if cycles <= 0:
        raise ConfigError("density needs at least one elapsed cycle", key="total_cycles")
    return Fraction(2 * ledger.samples_completed, cycles)


def closed_form_density(schedule: ScheduleKind, M: int) -> Fraction:
    _check_stages(M)
    if schedule.kind == "nopipe":
        return Fraction(1, M)
    if schedule.kind == "sync":
        return Fraction(schedule.B, M + schedule.B - 1)
    return Fraction(1)

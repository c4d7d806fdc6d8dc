"""
Analog device update rules
Single-event Analog SGD, sequential micro-batch accumulation, saturation monitoring
and the amplification factors that scale the noise floor.

The device model is the asymmetric linear response

    W' = W - alpha * G - alpha / tau * (|G| * W)

with tau stored as ``inv_tau`` so that the digital device is exactly ``inv_tau == 0``.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Set

import numpy as np

from dense_core import Matrix, check_finite, ewise, norms
from sim_errors import ConfigError, SaturationError

DEVICE_MODES = ("digital", "analog")
SATURATION_POLICIES = ("warn", "abort")


@dataclass(frozen=True)
class DeviceConfig:
    """How a stage's weights respond to an update."""
    mode: str = "digital"
    inv_tau: float = 0.0
    saturation_limit: float = 0.95  # allowed ||W||_inf / tau before warn/abort
    policy: str = "warn"

    def __post_init__(self):
        if self.mode not in DEVICE_MODES:
            raise ConfigError(f"unknown device mode '{self.mode}'", key="device")
        if self.inv_tau < 0 or not math.isfinite(self.inv_tau):
            raise ConfigError("inv_tau must be finite and >= 0", key="tau")
        if (self.inv_tau == 0.0) != (self.mode == "digital"):
            raise ConfigError("inv_tau must be 0 exactly when the device is digital", key="tau")
        if not 0.0 < self.saturation_limit < 1.0:
            raise ConfigError("saturation_limit must lie in (0, 1)", key="saturation_limit")
        if self.policy not in SATURATION_POLICIES:
            raise ConfigError(f"unknown saturation policy '{self.policy}'", key="saturation_policy")

    @classmethod
    def digital(cls, saturation_limit: float = 0.95, policy: str = "warn") -> "DeviceConfig":
        return cls("digital", 0.0, saturation_limit, policy)

    @classmethod
    def analog(cls, tau: float, saturation_limit: float = 0.95, policy: str = "warn") -> "DeviceConfig":
        """Analog device with bound tau; tau = inf gives the digital device."""
        if tau <= 0:
            raise ConfigError("tau must be positive", key="tau")
        if math.isinf(tau):
            return cls.digital(saturation_limit, policy)
        return cls("analog", 1.0 / tau, saturation_limit, policy)

    @property
    def tau(self) -> float:
        return math.inf if self.inv_tau == 0.0 else 1.0 / self.inv_tau

    @property
    def is_digital(self) -> bool:
        return self.mode == "digital"


@dataclass
class UpdateStats:
    """Per-run accumulator for saturation monitoring."""
    max_inf_norm_seen: float = 0.0
    max_degree_seen: float = 0.0
    saturation_events: int = 0
    updates_applied: int = 0
    warned_stages: Set[int] = field(default_factory=set)

    def as_dict(self) -> Dict[str, float]:
        return {
            "max_inf_norm_seen": self.max_inf_norm_seen,
            "max_degree_seen": self.max_degree_seen,
            "saturation_events": self.saturation_events,
            "updates_applied": self.updates_applied,
        }


@dataclass(frozen=True)
class SaturationCheck:
    degree: float
    triggered: bool


def analog_update(W: Matrix, G: Matrix, alpha: float, dev: DeviceConfig) -> Matrix:
    """
    One Analog SGD step. Returns a new matrix, W is not modified.

    Evaluated as W + (-alpha) * (G + inv_tau * |G| * W). With inv_tau == 0 the
    bracket is exactly G, so the digital device reproduces plain SGD bit for bit,
    and entries at W = -tau * sign(G) get a zero increment (exactly zero when
    tau is a power of two, otherwise up to one rounding).
    """
    if W.shape != G.shape:
        raise ConfigError(f"gradient shape {G.shape} does not match weight shape {W.shape}")
    if alpha < 0:
        raise ConfigError("learning rate must be >= 0", key="alpha")
    direction = ewise(G, ewise(G, W, "abs_mul"), "add_scaled", dev.inv_tau)
    updated = ewise(W, direction, "add_scaled", -alpha)
    return check_finite(updated, "analog_update", alpha=alpha)


def minibatch_analog_update(W_start: Matrix, grads: Sequence[Matrix], alpha: float,
                            dev: DeviceConfig) -> Matrix:
    """
    Apply B micro-batch gradients (all taken at W_start) one after another with step alpha/B.

    The decay term uses the evolving weight. On a digital device the decay term
    vanishes and the B steps collapse to a single step along the averaged gradient.
    """
    if not grads:
        raise ConfigError("a mini-batch needs at least one micro-batch gradient", key="B")
    B = len(grads)
    if dev.is_digital:
        for G in grads:
            if G.shape != W_start.shape:
                raise ConfigError(f"gradient shape {G.shape} does not match weight shape {W_start.shape}")
        mean_grad = np.sum(np.stack(grads), axis=0) / B
        return analog_update(W_start, mean_grad, alpha, dev)

    W = W_start
    step = alpha / B
    for G in grads:
        W = analog_update(W, G, step, dev)
    return W


def check_saturation(W: Matrix, dev: DeviceConfig, stats: UpdateStats,
                     stage: Optional[int] = None, update: Optional[int] = None) -> SaturationCheck:
    """Saturation degree ||W||_inf / tau against the device limit; updates ``stats``."""
    w_inf = norms(W).inf
    stats.max_inf_norm_seen = max(stats.max_inf_norm_seen, w_inf)
    if dev.is_digital:
        return SaturationCheck(0.0, False)

    degree = w_inf * dev.inv_tau
    stats.max_degree_seen = max(stats.max_degree_seen, degree)
    triggered = degree >= dev.saturation_limit
    if triggered:
        stats.saturation_events += 1
        if dev.policy == "abort":
            raise SaturationError(
                f"stage {stage} saturated: degree {degree:.4f} >= limit {dev.saturation_limit}",
                {"stage": stage, "degree": degree, "limit": dev.saturation_limit,
                 "update": update, "tau": dev.tau},
            )
    return SaturationCheck(degree, triggered)


def amplification_factor(degree: float, u: float = 0.0) -> float:
    """
    Noise-floor amplification (1+u)d^2 / (1 - (1+u)d^2) for saturation degree d.

    u = 0 gives the synchronous factor S, u > 0 the asynchronous S'.
    """
    if u < 0:
        raise ConfigError("slack u must be >= 0", key="amplification_u")
    scaled = (1.0 + u) * degree * degree
    if scaled >= 1.0:
        raise SaturationError(
            "device too saturated for the bound to apply",
            {"degree": degree, "u": u},
        )
    return scaled / (1.0 - scaled)


def amplification_factor_linear(degree: float, inv_tau: float, u: float = 0.0) -> float:
    """Variant with W_max / tau^2 (a single power of the degree, times 1/tau) in the numerator."""
    if u < 0:
        raise ConfigError("slack u must be >= 0", key="amplification_u")
    scaled = (1.0 + u) * degree * inv_tau
    if scaled >= 1.0:
        raise SaturationError(
            "device too saturated for the bound to apply",
            {"degree": degree, "inv_tau": inv_tau, "u": u},
        )
    return scaled / (1.0 - scaled)

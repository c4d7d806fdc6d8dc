"""
Multi-stage network model
Per-stage forward, loss head, per-stage backward and rank-1 gradients, plus full-batch and
finite-difference gradient oracles.

Stage m computes z = W x and x_out = g(z) with no bias term. Errors are row
vectors multiplying the next stage's weight from the left, and the activation
derivative enters as an elementwise product.
"""

import math
from dataclasses import dataclass, field, replace
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from analog_device import DeviceConfig
from dense_core import (Matrix, Tensor, Vector, as_matrix, check_finite, ewise, matvec,
                        outer, outer_mean, vecmat)
from sim_errors import ConfigError

ACTIVATIONS = ("identity", "tanh", "leaky_smooth")
LOSSES = ("mse", "softmax_ce")
LN2 = math.log(2.0)


@dataclass(frozen=True)
class ActivationKind:
    """Elementwise activation g with derivative g'. All kinds satisfy g(0) = 0."""
    kind: str = "tanh"
    slope: float = 0.1  # only used by leaky_smooth

    def __post_init__(self):
        if self.kind not in ACTIVATIONS:
            raise ConfigError(f"unknown activation '{self.kind}'", key="activation")
        if self.kind == "leaky_smooth" and not 0.0 <= self.slope <= 1.0:
            raise ConfigError("leaky_smooth slope must lie in [0, 1]", key="activation")

    @classmethod
    def from_name(cls, name: str) -> "ActivationKind":
        """Parse 'tanh', 'identity' or 'leaky_smooth[:slope]'."""
        kind, _, slope = name.strip().lower().partition(":")
        if slope:
            try:
                return cls(kind, float(slope))
            except ValueError:
                raise ConfigError(f"bad activation slope in '{name}'", key="activation")
        return cls(kind)

    @property
    def name(self) -> str:
        return f"leaky_smooth:{self.slope:g}" if self.kind == "leaky_smooth" else self.kind

    def g(self, z: Tensor) -> Tensor:
        if self.kind == "identity":
            return z.copy()
        if self.kind == "tanh":
            return np.tanh(z)
        # smooth centred ramp: slope*z + (1-slope)*(softplus(z) - ln 2)
        return self.slope * z + (1.0 - self.slope) * (np.logaddexp(0.0, z) - LN2)

    def gprime(self, z: Tensor) -> Tensor:
        if self.kind == "identity":
            return np.ones_like(z)
        if self.kind == "tanh":
            t = np.tanh(z)
            return 1.0 - t * t
        sigmoid = 0.5 * (1.0 + np.tanh(0.5 * z))
        return self.slope + (1.0 - self.slope) * sigmoid


@dataclass(frozen=True)
class LossKind:
    """MSE uses the 1/2 ||x - y||^2 convention; softmax_ce treats the network output as logits."""
    kind: str = "mse"

    def __post_init__(self):
        if self.kind not in LOSSES:
            raise ConfigError(f"unknown loss '{self.kind}'", key="loss")

    def per_sample(self, x_last: Tensor, y: Tensor) -> Tuple[Tensor, Tensor]:
        """Per-sample loss values and gradients with respect to the network output."""
        if x_last.shape != y.shape:
            raise ConfigError(f"output shape {x_last.shape} does not match label shape {y.shape}")
        if self.kind == "mse":
            diff = x_last - y
            return 0.5 * np.sum(diff * diff, axis=-1), diff

        if np.any(y < 0) or not np.allclose(np.sum(y, axis=-1), 1.0, atol=1e-9):
            raise ConfigError("softmax_ce labels must be one-hot or probability vectors", key="loss")
        shifted = x_last - np.max(x_last, axis=-1, keepdims=True)
        log_norm = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
        log_probs = shifted - log_norm
        values = -np.sum(y * log_probs, axis=-1)
        return values, np.exp(log_probs) - y


@dataclass
class StageState:
    """One pipeline stage: weight W^(m), its activation, device and update counter."""
    weight: Matrix
    activation: ActivationKind
    device: DeviceConfig = field(default_factory=DeviceConfig)
    version: int = 0

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass
class NetworkModel:
    stages: List[StageState]
    loss: LossKind = field(default_factory=LossKind)

    def __post_init__(self):
        if not self.stages:
            raise ConfigError("a network needs at least one stage", key="M")
        for m in range(1, len(self.stages)):
            if self.stages[m - 1].out_dim != self.stages[m].in_dim:
                raise ConfigError(
                    f"stage {m} outputs {self.stages[m - 1].out_dim} values but stage "
                    f"{m + 1} expects {self.stages[m].in_dim}", key="dims")

    @property
    def M(self) -> int:
        return len(self.stages)

    @property
    def dims(self) -> List[int]:
        return [self.stages[0].in_dim] + [s.out_dim for s in self.stages]


@dataclass(frozen=True)
class Sample:
    x: Vector
    y: Vector


class StageForward(NamedTuple):
    z: Tensor
    x_out: Tensor
    gprime: Tensor


Batch = Union[Sequence[Sample], Tuple[Matrix, Matrix]]


def as_batch(batch: Batch) -> Tuple[Matrix, Matrix]:
    """Stack a list of samples (or pass through an (X, Y) pair) into row matrices."""
    if isinstance(batch, tuple) and len(batch) == 2 and isinstance(batch[0], np.ndarray):
        X, Y = batch
    else:
        if len(batch) == 0:
            raise ConfigError("batch must not be empty", key="batch")
        X = np.stack([s.x for s in batch])
        Y = np.stack([s.y for s in batch])
    if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0] or X.shape[0] == 0:
        raise ConfigError(f"bad batch shapes X {X.shape}, Y {Y.shape}", key="batch")
    return X, Y


def init_network(dims: Sequence[int], activation: ActivationKind, loss: LossKind,
                 device: DeviceConfig, rng: np.random.Generator, scale: float = 1.0,
                 output_activation: Optional[ActivationKind] = None) -> NetworkModel:
    """Random network with W^(m) entries drawn from N(0, scale^2 / fan_in)."""
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise ConfigError(f"dims must list at least two positive sizes, got {list(dims)}", key="dims")
    stages = []
    M = len(dims) - 1
    for m in range(M):
        fan_in, fan_out = dims[m], dims[m + 1]
        W = rng.normal(0.0, scale / math.sqrt(fan_in), size=(fan_out, fan_in))
        act = output_activation if (m == M - 1 and output_activation is not None) else activation
        stages.append(StageState(weight=np.ascontiguousarray(W), activation=act, device=device))
    return NetworkModel(stages=stages, loss=loss)


def weights_of(model: NetworkModel) -> List[Matrix]:
    return [s.weight for s in model.stages]


def with_weights(model: NetworkModel, weights: Sequence[Matrix]) -> NetworkModel:
    """A model sharing everything with ``model`` except its weight arrays."""
    if len(weights) != model.M:
        raise ConfigError(f"expected {model.M} weight matrices, got {len(weights)}")
    stages = [replace(s, weight=as_matrix(w)) for s, w in zip(model.stages, weights)]
    return NetworkModel(stages=stages, loss=model.loss)


def clone_model(model: NetworkModel) -> NetworkModel:
    stages = [replace(s, weight=s.weight.copy()) for s in model.stages]
    return NetworkModel(stages=stages, loss=model.loss)


def forward_stage(stage: StageState, x_in: Tensor) -> StageForward:
    z = check_finite(matvec(stage.weight, x_in), "forward_stage", version=stage.version)
    return StageForward(z=z, x_out=stage.activation.g(z), gprime=stage.activation.gprime(z))


def loss_head(x_last: Tensor, z_last: Tensor, y: Tensor, loss: LossKind,
              activation_last: ActivationKind) -> Tuple[float, Tensor]:
    """Mean loss over the rows and the last-stage error (dl/dx) * g'(z) per row."""
    values, grad_out = loss.per_sample(x_last, y)
    delta = ewise(grad_out, activation_last.gprime(z_last), "mul")
    return float(np.mean(values)), delta


def backward_stage(delta_next: Tensor, W_next: Matrix, gprime: Tensor) -> Tensor:
    return ewise(vecmat(delta_next, W_next), gprime, "mul")


def stage_gradient(delta: Tensor, x: Tensor) -> Matrix:
    """delta (x) x, averaged over the rows for a micro-batch."""
    if delta.ndim == 1:
        return outer(delta, x)
    return outer_mean(delta, x)


def forward_pass(model: NetworkModel, X: Matrix) -> List[Tuple[Tensor, StageForward]]:
    """Run every stage; returns (input, forward result) per stage."""
    caches = []
    x = X
    for stage in model.stages:
        fwd = forward_stage(stage, x)
        caches.append((x, fwd))
        x = fwd.x_out
    return caches


def predict(model: NetworkModel, X: Matrix) -> Matrix:
    return forward_pass(model, X)[-1][1].x_out


def full_gradient(model: NetworkModel, batch: Batch) -> Tuple[float, List[Matrix]]:
    """Mean loss and per-stage gradients over the batch, every stage at its current weight."""
    X, Y = as_batch(batch)
    caches = forward_pass(model, X)
    last_in, last = caches[-1]
    loss_value, delta = loss_head(last.x_out, last.z, Y, model.loss, model.stages[-1].activation)

    grads: List[Matrix] = [np.empty(0)] * model.M
    for m in range(model.M - 1, -1, -1):
        x_in, fwd = caches[m]
        if m < model.M - 1:
            delta = backward_stage(delta, model.stages[m + 1].weight, fwd.gprime)
        grads[m] = stage_gradient(delta, x_in)
    return loss_value, grads


def mean_loss(model: NetworkModel, batch: Batch) -> float:
    X, Y = as_batch(batch)
    last = forward_pass(model, X)[-1][1]
    values, _ = model.loss.per_sample(last.x_out, Y)
    return float(np.mean(values))


def finite_diff_gradient(model: NetworkModel, batch: Batch, h: float = 1e-5) -> List[Matrix]:
    """Central-difference estimate of d(mean loss)/dW_ij for every weight entry."""
    if h <= 0:
        raise ConfigError("finite-difference step must be positive", key="h")
    batch = as_batch(batch)
    probe = clone_model(model)
    grads = []
    for stage in probe.stages:
        W = stage.weight
        grad = np.zeros_like(W)
        for idx in np.ndindex(W.shape):
            original = W[idx]
            W[idx] = original + h
            plus = mean_loss(probe, batch)
            W[idx] = original - h
            minus = mean_loss(probe, batch)
            W[idx] = original
            grad[idx] = (plus - minus) / (2.0 * h)
        grads.append(grad)
    return grads


def gradient_norm_sq(grads: Sequence[Matrix]) -> float:
    """Squared Frobenius norm of the stacked per-stage gradients."""
    return float(sum(np.sum(g * g) for g in grads))

"""
Desk-scale data sources
Seeded synthetic regression and classification generators with unit-norm features,
CSV ingestion and the shuffled mini/micro-batch iterator.
"""

import os
from dataclasses import dataclass
from typing import Iterator, List, NamedTuple, Optional

import numpy as np
import pandas as pd

from analog_device import DeviceConfig
from dense_core import Matrix
from net_model import ActivationKind, LossKind, Sample, init_network, predict
from sim_errors import ConfigError

NORM_TOLERANCE = 1e-9
TASKS = ("regression", "classification")


@dataclass
class Dataset:
    """Rows of X are features, rows of Y the matching labels/targets."""
    X: Matrix
    Y: Matrix
    task: str = "regression"

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task '{self.task}'", key="task")
        if self.X.ndim != 2 or self.Y.ndim != 2 or self.X.shape[0] != self.Y.shape[0]:
            raise ConfigError(f"features {self.X.shape} and labels {self.Y.shape} do not line up")
        if self.X.shape[0] == 0:
            raise ConfigError("dataset is empty")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.Y))):
            raise ConfigError("dataset contains non-finite values")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.X.shape[1]

    @property
    def label_dim(self) -> int:
        return self.Y.shape[1]

    @property
    def samples(self) -> List[Sample]:
        return [Sample(x=x, y=y) for x, y in zip(self.X, self.Y)]

    def is_normalized(self, tol: float = NORM_TOLERANCE) -> bool:
        return bool(np.all(np.abs(np.linalg.norm(self.X, axis=1) - 1.0) <= tol))

    def subset(self, indices) -> "Dataset":
        return Dataset(self.X[indices], self.Y[indices], self.task)


def normalize_rows(X: Matrix) -> Matrix:
    """Project every row onto the unit sphere."""
    lengths = np.linalg.norm(X, axis=1, keepdims=True)
    if np.any(lengths == 0):
        raise ConfigError("cannot normalise an all-zero feature row")
    return X / lengths


def _sphere(rng: np.random.Generator, n: int, d: int) -> Matrix:
    return normalize_rows(rng.normal(size=(n, d)))


def gen_teacher_regression(seed: int, n: int, d: int, teacher_stages: int = 2,
                           hidden: Optional[int] = None, out_dim: int = 1,
                           activation: Optional[ActivationKind] = None,
                           teacher_scale: float = 1.0) -> Dataset:
    """Sphere-uniform inputs labelled by a frozen random network; ``teacher_scale=0`` zeroes it."""
    if n < 1 or d < 1 or teacher_stages < 1:
        raise ConfigError("n, d and teacher_stages must be >= 1")
    rng = np.random.default_rng(seed)
    X = _sphere(rng, n, d)
    width = hidden or d
    dims = [d] + [width] * (teacher_stages - 1) + [out_dim]
    teacher = init_network(dims, activation or ActivationKind("tanh"), LossKind("mse"),
                           DeviceConfig.digital(), rng, scale=teacher_scale)
    return Dataset(X, predict(teacher, X), "regression")


def gen_gaussian_mixture(seed: int, n: int, d: int, classes: int = 2,
                         separation: float = 2.0, spread: float = 1.0) -> Dataset:
    """
    Gaussian clouds around simplex-vertex means, projected onto the unit sphere.

    Means are the centred one-hot vectors scaled to length ``separation``; each
    cloud has per-coordinate std ``spread / sqrt(d)``.
    """
    if classes < 2:
        raise ConfigError("a mixture needs at least two classes", key="classes")
    if d < classes:
        raise ConfigError(f"feature dim {d} must be >= number of classes {classes}", key="d")
    rng = np.random.default_rng(seed)
    vertices = np.eye(classes) - 1.0 / classes
    vertices *= separation / np.linalg.norm(vertices[0])
    means = np.zeros((classes, d))
    means[:, :classes] = vertices
    # rotate so the classes do not sit on the first coordinates only
    rotation, _ = np.linalg.qr(rng.normal(size=(d, d)))
    means = means @ rotation.T

    labels = rng.integers(0, classes, size=n)
    X = means[labels] + rng.normal(scale=spread / np.sqrt(d), size=(n, d))
    Y = np.eye(classes)[labels]
    return Dataset(normalize_rows(X), Y, "classification")


def load_csv(path: str, normalize: bool = True, task: Optional[str] = None) -> Dataset:
    """
    Read a CSV with x* feature and y* label columns, matched by name in header order.
    Errors name the file line and column.

    With ``task=None`` labels that are all one-hot make a classification set.
    """
    if not os.path.exists(path):
        raise ConfigError(f"data file not found: {path}", key="csv_path")
    try:
        frame = pd.read_csv(path, dtype=str, skip_blank_lines=True, encoding="utf-8")
    except pd.errors.EmptyDataError:
        raise ConfigError(f"{path} is empty", key="csv_path")
    except pd.errors.ParserError as e:
        raise ConfigError(f"{path}: malformed row ({e})", key="csv_path")

    x_cols = [c for c in frame.columns if c.strip().lower().startswith("x")]
    y_cols = [c for c in frame.columns if c.strip().lower().startswith("y")]
    if not x_cols or not y_cols or len(x_cols) + len(y_cols) != len(frame.columns):
        raise ConfigError(f"{path}: header must be x1..xd,y1..yc, got {list(frame.columns)}",
                          key="csv_path")
    if frame.empty:
        raise ConfigError(f"{path} has a header but no rows", key="csv_path")

    values = np.empty(frame.shape, dtype=np.float64)
    for row_idx, row in enumerate(frame.itertuples(index=False)):
        line = row_idx + 2  # header is line 1
        for col_idx, cell in enumerate(row):
            column = frame.columns[col_idx]
            if not isinstance(cell, str) or not cell.strip():
                raise ConfigError(f"{path}: line {line}, column '{column}': missing value",
                                  key="csv_path")
            try:
                values[row_idx, col_idx] = float(cell)
            except ValueError:
                raise ConfigError(f"{path}: line {line}, column '{column}': "
                                  f"'{cell}' is not a number", key="csv_path")

    X = values[:, [frame.columns.get_loc(c) for c in x_cols]]
    Y = values[:, [frame.columns.get_loc(c) for c in y_cols]]
    if normalize:
        X = normalize_rows(X)
    if task is None:
        one_hot = np.all((Y == 0) | (Y == 1)) and np.all(Y.sum(axis=1) == 1) and Y.shape[1] > 1
        task = "classification" if one_hot else "regression"
    return Dataset(X, Y, task)


def save_csv(ds: Dataset, path: str) -> None:
    columns = [f"x{i + 1}" for i in range(ds.feature_dim)] + [f"y{i + 1}" for i in range(ds.label_dim)]
    pd.DataFrame(np.hstack([ds.X, ds.Y]), columns=columns).to_csv(path, index=False, float_format="%.17g")


def train_eval_split(ds: Dataset, n_eval: int, seed: int) -> tuple:
    """Hold out ``n_eval`` samples (seeded) for evaluation."""
    if not 0 < n_eval < ds.n:
        raise ConfigError(f"eval size {n_eval} must lie in (0, {ds.n})", key="eval_n")
    perm = np.random.default_rng(seed).permutation(ds.n)
    return ds.subset(np.sort(perm[n_eval:])), ds.subset(np.sort(perm[:n_eval]))


@dataclass(frozen=True)
class BatchPlan:
    B_mini: int
    B_micro: int
    seed: int = 0

    def __post_init__(self):
        if self.B_mini < 1 or self.B_micro < 1:
            raise ConfigError("batch sizes must be >= 1", key="B_mini")
        if self.B_mini % self.B_micro != 0:
            raise ConfigError("B_mini not divisible by B_micro", key="B_mini")

    @property
    def B(self) -> int:
        return self.B_mini // self.B_micro

    def epoch_order(self, n: int, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.seed, epoch]).permutation(n)

    def mini_batches_per_epoch(self, n: int) -> int:
        return n // self.B_mini

    def micro_batches_per_epoch(self, n: int) -> int:
        return self.mini_batches_per_epoch(n) * self.B


class MicroBatch(NamedTuple):
    X: Matrix
    Y: Matrix
    indices: np.ndarray
    epoch: int


def batch_iterator(ds: Dataset, plan: BatchPlan, epoch: int) -> Iterator[MicroBatch]:
    """Shuffle, drop the n mod B_mini leftovers, then cut into B_micro-sized chunks."""
    if plan.mini_batches_per_epoch(ds.n) == 0:
        raise ConfigError(f"dataset of {ds.n} samples is smaller than B_mini={plan.B_mini}",
                          key="B_mini")
    order = plan.epoch_order(ds.n, epoch)
    used = plan.micro_batches_per_epoch(ds.n) * plan.B_micro
    for start in range(0, used, plan.B_micro):
        idx = order[start:start + plan.B_micro]
        yield MicroBatch(ds.X[idx], ds.Y[idx], idx, epoch)

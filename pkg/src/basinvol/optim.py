"""Training loops: SGD, AdamW and SAM over flat parameter vectors."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .nn import NetworkSpec, ParameterVector, _forward_raw, grad_raw, loss_raw

OPTIMIZERS = ("sgd", "adamw", "sam_adamw")

# torch.optim defaults
DEFAULT_LR = {"sgd": 0.01, "adamw": 1e-3, "sam_adamw": 1e-3}


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adamw"
    learning_rate: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.01
    rho: float = 0.05
    # base update used by SAM; "adamw" unless testing against plain SGD
    sam_base: str = "adamw"

    def __post_init__(self):
        if self.kind not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.learning_rate is None:
            object.__setattr__(self, "learning_rate", DEFAULT_LR[self.kind])
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.kind == "sam_adamw" and self.rho < 0:
            raise ValueError("rho must be non-negative")
        if self.sam_base not in ("adamw", "sgd"):
            raise ValueError("sam_base must be adamw or sgd")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "epsilon": self.epsilon,
            "weight_decay": self.weight_decay,
            "rho": self.rho,
            "sam_base": self.sam_base,
        }


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int = 64
    shuffle_seed: int = 0
    checkpoint_epochs: tuple[int, ...] = ()
    target_loss: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "checkpoint_epochs", tuple(int(e) for e in self.checkpoint_epochs))
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        ck = self.checkpoint_epochs
        if list(ck) != sorted(ck) or any(e > self.epochs or e < 0 for e in ck):
            raise ValueError("checkpoint_epochs must be sorted and within [0, epochs]")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "shuffle_seed": self.shuffle_seed,
            "checkpoint_epochs": list(self.checkpoint_epochs),
            "target_loss": self.target_loss,
        }


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n))


@dataclass(frozen=True)
class TrainResult:
    final_params: ParameterVector
    train_loss_curve: tuple[float, ...]
    test_loss_curve: tuple[float, ...]
    test_accuracy_curve: tuple[float, ...]
    checkpoints: tuple[tuple[int, ParameterVector], ...] = ()
    reached_target: bool | None = None

    @property
    def epochs_completed(self) -> int:
        return len(self.train_loss_curve)

    @property
    def final_train_loss(self) -> float:
        return self.train_loss_curve[-1] if self.train_loss_curve else math.nan


def _as_array(p) -> np.ndarray:
    return p.values if isinstance(p, ParameterVector) else np.asarray(p, dtype=np.float64)


def _like(template, values: np.ndarray):
    return template.with_values(values) if isinstance(template, ParameterVector) else values


def step_sgd(params, grad, lr: float):
    return _like(params, _as_array(params) - lr * _as_array(grad))


def step_adamw(state: AdamState, params, grad, config: OptimizerConfig, t: int):
    """One AdamW update (decoupled decay first, then bias-corrected Adam)."""
    if t < 1:
        raise ValueError("step index t starts at 1")
    theta = _as_array(params)
    g = _as_array(grad)
    lr = config.learning_rate
    theta = theta * (1.0 - lr * config.weight_decay)
    m = config.beta1 * state.m + (1.0 - config.beta1) * g
    v = config.beta2 * state.v + (1.0 - config.beta2) * g * g
    m_hat = m / (1.0 - config.beta1 ** t)
    v_hat = v / (1.0 - config.beta2 ** t)
    theta = theta - lr * m_hat / (np.sqrt(v_hat) + config.epsilon)
    return AdamState(m, v), _like(params, theta)


def _base_step(state, theta, g, config: OptimizerConfig, t: int):
    base = config.kind if config.kind != "sam_adamw" else config.sam_base
    if base == "sgd":
        return state, step_sgd(theta, g, config.learning_rate)
    return step_adamw(state, theta, g, config, t)


def sam_update(grad_fn: Callable[[np.ndarray], np.ndarray], theta: np.ndarray, g: np.ndarray,
               config: OptimizerConfig, state, t: int):
    """SAM: ascend to theta + rho*g/|g|, take the gradient there, apply it at theta."""
    norm = float(np.linalg.norm(g))
    if norm > 0 and config.rho > 0:
        g = grad_fn(theta + (config.rho / norm) * g)
    return _base_step(state, theta, g, config, t)


def step_sam(spec: NetworkSpec, params, batch, config: OptimizerConfig, state: AdamState | None = None, t: int = 1):
    X, y = batch.features, batch.labels
    theta = _as_array(params)
    if state is None:
        state = AdamState.zeros(theta.size)
    _, g = grad_raw(spec, theta, X, y)
    state, new = sam_update(lambda th: grad_raw(spec, th, X, y)[1], theta, g, config, state, t)
    return state, _like(params, new)


def evaluate_accuracy(spec: NetworkSpec, params, dataset) -> float:
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    out = _forward_raw(spec, _as_array(params), dataset.features)
    # argmax returns the first maximal index: ties go to the lowest class
    return float(np.mean(out.argmax(axis=1) == dataset.labels))


def train(spec: NetworkSpec, dataset_train, dataset_test, init: ParameterVector,
          opt: OptimizerConfig, tc: TrainConfig) -> TrainResult:
    X, y = dataset_train.features, dataset_train.labels
    if X.shape[1] != spec.input_dim:
        raise ValueError(f"dataset width {X.shape[1]} does not match input_dim {spec.input_dim}")
    if len(y) == 0:
        raise ValueError("empty training set")
    theta = init.values.copy()
    state = AdamState.zeros(theta.size)
    rng = np.random.default_rng(tc.shuffle_seed)
    N = y.size
    t = 0
    train_curve, test_curve, acc_curve = [], [], []
    checkpoints = []
    pending = list(tc.checkpoint_epochs)
    if pending and pending[0] == 0:
        checkpoints.append((0, init))
        pending.pop(0)
    reached = None if tc.target_loss is None else False

    # a blow-up is caught by the finiteness check, not by numpy warnings
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(1, tc.epochs + 1):
            order = rng.permutation(N)
            for start in range(0, N, tc.batch_size):
                idx = order[start:start + tc.batch_size]
                Xb, yb = X[idx], y[idx]
                _, g = grad_raw(spec, theta, Xb, yb)
                t += 1
                if opt.kind == "sgd":
                    theta = step_sgd(theta, g, opt.learning_rate)
                elif opt.kind == "adamw":
                    state, theta = step_adamw(state, theta, g, opt, t)
                else:
                    state, theta = sam_update(lambda th: grad_raw(spec, th, Xb, yb)[1], theta, g, opt, state, t)

            train_loss = loss_raw(spec, theta, X, y)
            if not math.isfinite(train_loss):
                raise TrainingDiverged(epoch, train_loss)
            train_curve.append(train_loss)
            if dataset_test is not None and len(dataset_test):
                test_curve.append(loss_raw(spec, theta, dataset_test.features, dataset_test.labels))
                acc_curve.append(evaluate_accuracy(spec, theta, dataset_test))
            else:
                test_curve.append(math.nan)
                acc_curve.append(math.nan)
            if pending and pending[0] == epoch:
                checkpoints.append((epoch, init.with_values(theta)))
                pending.pop(0)
            if tc.target_loss is not None and train_loss <= tc.target_loss:
                reached = True
                break

    return TrainResult(
        final_params=init.with_values(theta),
        train_loss_curve=tuple(train_curve),
        test_loss_curve=tuple(test_curve),
        test_accuracy_curve=tuple(acc_curve),
        checkpoints=tuple(checkpoints),
        reached_target=reached,
    )

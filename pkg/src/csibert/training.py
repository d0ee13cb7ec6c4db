"""Masked-reconstruction training loop.

One step: mask the clean features, run the network, take the MSE against
the clean features, backpropagate, update. Masks are drawn from a stream
keyed by ``(mask seed, epoch, sample index)`` and samples inside a batch
are processed in index order, so a full-batch epoch does not depend on the
shuffling seed.
"""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor_core as tc
from .exceptions import ConfigError, TrainingDivergedError
from .model import as_tensors
from .preprocess import MaskSpec, apply_mask, make_masks
from .tensor_core import Tensor

ForwardFn = Callable[[dict[str, Tensor], np.ndarray, np.ndarray], Tensor]

OPTIMIZERS = ("sgd", "adam")
LOSS_SCOPES = ("all", "masked")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 20
    optimizer: str = "adam"
    mask: MaskSpec = field(default_factory=lambda: MaskSpec("every_kth", 10))
    seed: int = 0
    loss_scope: str = "all"
    fixed_mask: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if self.loss_scope not in LOSS_SCOPES:
            raise ConfigError(f"loss_scope must be one of {LOSS_SCOPES}")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["mask"] = self.mask.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["mask"] = MaskSpec(**d["mask"])
        return cls(**d)


# ----------------------------------------------------------------------------
# loss


def mse_loss(x_hat: Tensor, x: np.ndarray, scope: np.ndarray | None = None, per_element: bool = False) -> Tensor:
    """Squared reconstruction error as a differentiable scalar.

    Default (training objective): mean over the batch of each sample's sum of
    squared residuals. ``per_element=True`` divides by the number of in-scope
    elements instead. Residuals outside ``scope`` contribute nothing.
    """
    x = np.asarray(x, dtype=np.float64)
    if x_hat.shape != x.shape:
        raise ConfigError(f"prediction shape {x_hat.shape} differs from target shape {x.shape}")
    residual = tc.sub(x_hat, Tensor(x))
    if scope is not None:
        scope = np.broadcast_to(np.asarray(scope, dtype=np.float64), x.shape)
        residual = tc.mul(residual, Tensor(scope))
        count = float(scope.sum())
    else:
        count = float(x.size)
    total = tc.sum_all(tc.square(residual))
    if per_element:
        return tc.scale(total, 1.0 / max(count, 1.0))
    n_samples = x.shape[0] if x.ndim == 3 else 1
    return tc.scale(total, 1.0 / n_samples)


def reconstruction_mse(x: np.ndarray, x_hat: np.ndarray, scope: np.ndarray | None = None) -> float:
    """Per-element mean squared residual (the reported metric)."""
    r = np.asarray(x, dtype=np.float64) - np.asarray(x_hat, dtype=np.float64)
    if scope is None:
        return float(np.mean(r * r))
    scope = np.broadcast_to(np.asarray(scope, dtype=np.float64), r.shape)
    count = scope.sum()
    return float((r * r * scope).sum() / count) if count else 0.0


# ----------------------------------------------------------------------------
# optimizers


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> dict[str, np.ndarray]:
    return {k: p - lr * grads[k] for k, p in params.items()}


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> dict[str, np.ndarray]:
    """Bias-corrected Adam; advances ``state`` in place."""
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    out = {}
    for k, p in params.items():
        g = grads[k]
        m = beta1 * state.m.get(k, np.zeros_like(p)) + (1.0 - beta1) * g
        v = beta2 * state.v.get(k, np.zeros_like(p)) + (1.0 - beta2) * g * g
        state.m[k], state.v[k] = m, v
        out[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return out


# ----------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    history: list[dict]
    state: AdamState
    epochs_done: int


def train(
    forward: ForwardFn,
    params: dict[str, np.ndarray],
    X: np.ndarray,
    cfg: TrainConfig,
    attn_mask: np.ndarray | None = None,
    state: AdamState | None = None,
    start_epoch: int = 0,
    on_step: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train ``params`` on clean features ``X`` of shape ``[N, L, d]``.

    ``attn_mask`` ([N, L], 1 = valid row) excludes padding rows from the loss.
    ``state`` / ``start_epoch`` resume an interrupted run.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3 or X.shape[0] == 0:
        raise ConfigError(f"training data must be a non-empty [N, L, d] array, got {X.shape}")
    n, length, d = X.shape
    attn = np.ones((n, length)) if attn_mask is None else np.asarray(attn_mask, dtype=np.float64)
    state = AdamState() if state is None else state
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    history: list[dict] = []
    n_batches = math.ceil(n / cfg.batch_size)
    step = start_epoch * n_batches

    for epoch in range(start_epoch, cfg.epochs):
        order = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(epoch,))).permutation(n)
        mask_epoch = 0 if (cfg.fixed_mask or cfg.mask.is_fixed) else epoch
        for b in range(n_batches):
            idx = np.sort(order[b * cfg.batch_size : (b + 1) * cfg.batch_size])
            target = X[idx]
            masks = make_masks(cfg.mask, idx, (length, d), stream=mask_epoch)
            valid = attn[idx]
            scope = valid[:, :, None] * np.ones_like(target)
            if cfg.loss_scope == "masked":
                scope = scope * (1.0 - masks)

            tensors = as_tensors(params)
            out = forward(tensors, apply_mask(target, masks), valid)
            loss = mse_loss(out, target, scope)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite loss {value} at epoch {epoch}, step {step}; lower the learning rate (now {cfg.learning_rate})"
                )
            loss.backward()
            grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in tensors.items()}
            if cfg.optimizer == "sgd":
                params = sgd_step(params, grads, cfg.learning_rate)
            else:
                params = adam_step(params, grads, state, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
            record = {"step": step, "epoch": epoch, "loss": value}
            history.append(record)
            if on_step is not None:
                on_step(record)
            step += 1
    return TrainResult(params, history, state, cfg.epochs)


def write_loss_csv(history: list[dict], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["step", "epoch", "loss"])
        w.writeheader()
        for rec in history:
            w.writerow({"step": rec["step"], "epoch": rec["epoch"], "loss": repr(rec["loss"])})

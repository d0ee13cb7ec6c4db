"""Comparison models on flattened ``[N, N_s * d]`` matrices."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc
from .exceptions import ConfigError
from .tensor_core import Tensor


@dataclass
class LinRegModel:
    weights: np.ndarray  # [D_in + 1, D_out], last row is the bias
    ridge_lambda: float

    @property
    def coef(self) -> np.ndarray:
        return self.weights[:-1]

    @property
    def intercept(self) -> np.ndarray:
        return self.weights[-1]


def _augment(X: np.ndarray) -> np.ndarray:
    return np.hstack([X, np.ones((X.shape[0], 1))])


def linreg_fit(X_masked: np.ndarray, X: np.ndarray, ridge_lambda: float = 1e-8) -> LinRegModel:
    """Ridge least squares ``min ||A W - Y||^2 + lambda ||W||^2`` with ``A = [X_masked, 1]``.

    Solved in the primal (``A^T A + lambda I``) when ``N >= D`` and in the
    dual (``A^T (A A^T + lambda I)^-1 Y``) otherwise. ``lambda = 0`` falls back
    to the minimum-norm least-squares solution.
    """
    X_masked = np.asarray(X_masked, dtype=np.float64)
    Y = np.asarray(X, dtype=np.float64)
    if X_masked.ndim != 2 or Y.ndim != 2 or X_masked.shape[0] != Y.shape[0] or X_masked.shape[0] < 1:
        raise ConfigError(f"linreg_fit needs matching 2-D inputs, got {X_masked.shape} and {Y.shape}")
    if not (np.all(np.isfinite(X_masked)) and np.all(np.isfinite(Y))):
        raise ValueError("linreg_fit inputs must be finite")
    if ridge_lambda < 0:
        raise ConfigError("ridge_lambda must be >= 0")
    A = _augment(X_masked)
    n, p = A.shape
    if ridge_lambda == 0:
        W = np.linalg.lstsq(A, Y, rcond=None)[0]
    elif n >= p:
        W = np.linalg.solve(A.T @ A + ridge_lambda * np.eye(p), A.T @ Y)
    else:
        W = A.T @ np.linalg.solve(A @ A.T + ridge_lambda * np.eye(n), Y)
    return LinRegModel(W, ridge_lambda)


def linreg_predict(model: LinRegModel, X_masked: np.ndarray) -> np.ndarray:
    X_masked = np.asarray(X_masked, dtype=np.float64)
    if X_masked.shape[1] + 1 != model.weights.shape[0]:
        raise ConfigError(f"expected {model.weights.shape[0] - 1} input features, got {X_masked.shape[1]}")
    return X_masked @ model.coef + model.intercept


def linreg_normal_residual(model: LinRegModel, X_masked: np.ndarray, X: np.ndarray) -> float:
    """``||A^T A W - A^T Y + lambda W|| / ||A^T Y||``; ~0 at the optimum."""
    A = _augment(np.asarray(X_masked, dtype=np.float64))
    rhs = A.T @ np.asarray(X, dtype=np.float64)
    g = A.T @ (A @ model.weights) - rhs + model.ridge_lambda * model.weights
    return float(np.linalg.norm(g) / max(np.linalg.norm(rhs), 1e-300))


# ----------------------------------------------------------------------------
# one-hidden-layer perceptron


def mlp_init(n_in: int, n_out: int, hidden: int = 512, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    b1, b2 = 1.0 / math.sqrt(n_in), 1.0 / math.sqrt(hidden)
    return {
        "mlp.W1": rng.uniform(-b1, b1, size=(n_in, hidden)),
        "mlp.b1": np.zeros(hidden),
        "mlp.W2": rng.uniform(-b2, b2, size=(hidden, n_out)),
        "mlp.b2": np.zeros(n_out),
    }


def mlp_forward(params: dict[str, Tensor], x, attn_mask=None) -> Tensor:
    """ReLU MLP on the flattened matrix; ``[B, L, d]`` in, ``[B, L, d]`` out."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    shape = x.shape
    flat = Tensor(x.reshape(shape[0], -1))
    hidden = tc.relu(tc.matmul(flat, params["mlp.W1"]) + params["mlp.b1"])
    out = tc.matmul(hidden, params["mlp.W2"]) + params["mlp.b2"]
    return tc.reshape(out, shape)


def mlp_predict(params: dict[str, np.ndarray], x) -> np.ndarray:
    tensors = {k: Tensor(v) for k, v in params.items()}
    return mlp_forward(tensors, x).data

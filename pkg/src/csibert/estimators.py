"""scikit-learn style estimators.

All reconstruction estimators share one convention:

* ``fit(X)`` takes CLEAN feature matrices ``[n, N_s, d]`` and masks them
  internally according to the ``mask`` parameter (targets are ``X`` itself);
* ``predict(X_masked)`` maps masked matrices to reconstructions of the same
  shape.

``get_params``/``set_params``/``clone`` come from :class:`sklearn.base.BaseEstimator`.
"""
from __future__ import annotations

import os
from functools import partial

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import __version__
from .baselines import LinRegModel, linreg_fit, linreg_predict, mlp_forward, mlp_init, mlp_predict
from .checkpoint import load_checkpoint, save_checkpoint
from .exceptions import FormatError
from .model import ModelConfig, forward, init_params, predict as model_predict
from .preprocess import MaskSpec, apply_mask, make_masks, pad_and_attention_mask
from .training import AdamState, TrainConfig, train
from .validation import check_feature_batch, check_flat_batch

_PREDICT_CHUNK = 64


class _TrainedMixin:
    """Shared pieces of the gradient-trained estimators."""

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.epochs,
            optimizer=self.optimizer,
            mask=MaskSpec.parse(self.mask, seed=self.random_state),
            seed=self.random_state,
            loss_scope=self.loss_scope,
        )

    def _state_arrays(self) -> dict[str, np.ndarray]:
        state: AdamState = self.optimizer_state_
        out = {}
        for k in state.m:
            out[f"adam.m/{k}"] = state.m[k]
            out[f"adam.v/{k}"] = state.v[k]
        return out

    @staticmethod
    def _split_state(arrays: dict[str, np.ndarray], t: int) -> tuple[dict, AdamState]:
        params = {k: v for k, v in arrays.items() if not k.startswith("adam.")}
        state = AdamState(t=t)
        for k, v in arrays.items():
            if k.startswith("adam.m/"):
                state.m[k[7:]] = v
            elif k.startswith("adam.v/"):
                state.v[k[7:]] = v
        return params, state

    def _manifest(self, kind: str, extra: dict | None) -> dict:
        manifest = {
            "kind": kind,
            "toolkit_version": __version__,
            "estimator_params": self.get_params(),
            "train_config": self._train_config().to_dict(),
            "n_features_in": int(self.n_features_in_),
            "n_subcarriers": int(self.n_subcarriers_),
            "optimizer_steps": int(self.optimizer_state_.t),
            "epochs_done": int(self.epochs_done_),
        }
        if extra:
            manifest["extra"] = extra
        return manifest


class MaskedCsiTransformer(_TrainedMixin, BaseEstimator):
    """Transformer encoder that reconstructs masked CSI feature matrices.

    Parameters
    ----------
    d_model, n_layers, n_heads, d_ff : int
        Encoder width, depth, attention heads and feed-forward width.
    plain_head : bool
        Use the bare affine output layer instead of dense + GELU + LayerNorm + affine.
    max_len : int or None
        Padded sequence length; defaults to the number of subcarriers seen in ``fit``.
    learning_rate, batch_size, epochs, optimizer
        Training loop settings; ``optimizer`` is ``"adam"`` or ``"sgd"``.
    mask : str
        Training mask, ``"every:k"``, ``"bernoulli:p"`` (keep probability) or ``"ratio:gamma"``.
    loss_scope : {"all", "masked"}
        Positions contributing to the loss.
    random_state : int
        Seeds initialization, shuffling and mask draws.
    """

    def __init__(
        self,
        d_model: int = 64,
        n_layers: int = 2,
        n_heads: int = 4,
        d_ff: int = 128,
        plain_head: bool = False,
        max_len: int | None = None,
        learning_rate: float = 1e-3,
        batch_size: int = 32,
        epochs: int = 20,
        optimizer: str = "adam",
        mask: str = "every:10",
        loss_scope: str = "all",
        random_state: int = 0,
    ):
        self.d_model = d_model
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.d_ff = d_ff
        self.plain_head = plain_head
        self.max_len = max_len
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.optimizer = optimizer
        self.mask = mask
        self.loss_scope = loss_scope
        self.random_state = random_state

    def model_config(self, n_subcarriers: int, feature_dim: int) -> ModelConfig:
        return ModelConfig(
            feature_dim=feature_dim,
            max_len=self.max_len or n_subcarriers,
            d_model=self.d_model,
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            d_ff=self.d_ff,
            plain_head=self.plain_head,
        )

    def _pad(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        padded, attn = pad_and_attention_mask(X, self.config_.max_len)
        return padded, np.broadcast_to(attn, padded.shape[:2]).copy()

    def init(self, X) -> "MaskedCsiTransformer":
        """Set up a freshly initialized (untrained) model for data shaped like ``X``."""
        X = check_feature_batch(X)
        self.n_subcarriers_, self.n_features_in_ = X.shape[1], X.shape[2]
        self.config_ = self.model_config(*X.shape[1:])
        self.params_ = init_params(self.config_, self.random_state)
        self.optimizer_state_ = AdamState()
        self.loss_history_ = []
        self.epochs_done_ = 0
        return self

    def fit(self, X, y=None, on_step=None):
        self.init(X)
        return self._run_training(check_feature_batch(X), 0, on_step)

    def resume(self, X, on_step=None):
        """Continue training a loaded or partially trained model up to ``epochs``."""
        check_is_fitted(self, "params_")
        return self._run_training(check_feature_batch(X, self.n_features_in_), self.epochs_done_, on_step)

    def _run_training(self, X, start_epoch, on_step):
        padded, attn = self._pad(X)
        fwd = partial(_transformer_forward, cfg=self.config_)
        result = train(
            fwd, self.params_, padded, self._train_config(), attn,
            state=self.optimizer_state_, start_epoch=start_epoch, on_step=on_step,
        )
        self.params_ = result.params
        self.optimizer_state_ = result.state
        self.loss_history_ = list(self.loss_history_) + result.history
        self.epochs_done_ = result.epochs_done
        return self

    def predict(self, X):
        check_is_fitted(self, "params_")
        X = check_feature_batch(X, self.n_features_in_)
        n_s = X.shape[1]
        padded, attn = self._pad(X)
        out = [
            model_predict(self.params_, padded[i : i + _PREDICT_CHUNK], attn[i : i + _PREDICT_CHUNK], self.config_)
            for i in range(0, len(X), _PREDICT_CHUNK)
        ]
        return np.concatenate(out)[:, :n_s]

    def save(self, path: str | os.PathLike, extra: dict | None = None):
        check_is_fitted(self, "params_")
        manifest = self._manifest("transformer", extra)
        manifest["model_config"] = self.config_.to_dict()
        manifest["seed"] = self.random_state
        return save_checkpoint(path, {**self.params_, **self._state_arrays()}, manifest)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "MaskedCsiTransformer":
        arrays, manifest = load_checkpoint(path)
        if manifest.get("kind") != "transformer":
            raise FormatError(f"{path} holds a {manifest.get('kind')!r} checkpoint, not a transformer")
        est = cls(**manifest["estimator_params"])
        est.config_ = ModelConfig.from_dict(manifest["model_config"])
        est.params_, est.optimizer_state_ = cls._split_state(arrays, manifest["optimizer_steps"])
        expected = set(init_params(est.config_, 0))
        if set(est.params_) != expected:
            raise FormatError(f"{path}: parameter names do not match the stored model config")
        est.n_features_in_ = manifest["n_features_in"]
        est.n_subcarriers_ = manifest["n_subcarriers"]
        est.epochs_done_ = manifest["epochs_done"]
        est.loss_history_ = []
        est.manifest_ = manifest
        return est


def _transformer_forward(params, x, attn_mask, cfg):
    return forward(params, x, attn_mask, cfg)


class MLPBaseline(_TrainedMixin, BaseEstimator):
    """One-hidden-layer ReLU perceptron on the flattened ``N_s * d`` vector."""

    def __init__(
        self,
        hidden: int = 512,
        learning_rate: float = 1e-3,
        batch_size: int = 32,
        epochs: int = 20,
        optimizer: str = "adam",
        mask: str = "every:10",
        loss_scope: str = "all",
        random_state: int = 0,
    ):
        self.hidden = hidden
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.optimizer = optimizer
        self.mask = mask
        self.loss_scope = loss_scope
        self.random_state = random_state

    def fit(self, X, y=None, on_step=None):
        X = check_feature_batch(X)
        self.n_subcarriers_, self.n_features_in_ = X.shape[1], X.shape[2]
        flat = X.shape[1] * X.shape[2]
        params = mlp_init(flat, flat, self.hidden, self.random_state)
        result = train(mlp_forward, params, X, self._train_config(), on_step=on_step)
        self.params_ = result.params
        self.optimizer_state_ = result.state
        self.loss_history_ = result.history
        self.epochs_done_ = result.epochs_done
        return self

    def predict(self, X):
        check_is_fitted(self, "params_")
        X = check_feature_batch(X, self.n_features_in_)
        return mlp_predict(self.params_, X)

    def save(self, path, extra=None):
        check_is_fitted(self, "params_")
        return save_checkpoint(path, {**self.params_, **self._state_arrays()}, self._manifest("mlp", extra))


class LinearRegressionBaseline(BaseEstimator):
    """Closed-form ridge regression from masked to clean flattened matrices."""

    def __init__(self, ridge_lambda: float = 1e-8, mask: str = "every:10", random_state: int = 0):
        self.ridge_lambda = ridge_lambda
        self.mask = mask
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_feature_batch(X)
        self.n_subcarriers_, self.n_features_in_ = X.shape[1], X.shape[2]
        spec = MaskSpec.parse(self.mask, seed=self.random_state)
        X_masked = apply_mask(X, make_masks(spec, X.shape[0], X.shape[1:]))
        self.model_: LinRegModel = linreg_fit(check_flat_batch(X_masked), check_flat_batch(X), self.ridge_lambda)
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = check_feature_batch(X, self.n_features_in_)
        return linreg_predict(self.model_, check_flat_batch(X)).reshape(X.shape)

    def save(self, path, extra=None):
        check_is_fitted(self, "model_")
        manifest = {
            "kind": "linreg",
            "toolkit_version": __version__,
            "estimator_params": self.get_params(),
            "n_features_in": int(self.n_features_in_),
            "n_subcarriers": int(self.n_subcarriers_),
        }
        if extra:
            manifest["extra"] = extra
        return save_checkpoint(path, {"linreg.weights": self.model_.weights}, manifest)


class ZeroPredictor(BaseEstimator):
    """Predicts all-zero matrices; the upper anchor for every MSE."""

    def fit(self, X, y=None):
        self.n_features_in_ = check_feature_batch(X).shape[2]
        return self

    def predict(self, X):
        return np.zeros_like(check_feature_batch(X))


class PerfectOracle(BaseEstimator):
    """Returns the clean reference matrices; the lower anchor (MSE 0).

    Only usable through the experiment runners, which pass the reference.
    """

    needs_reference = True

    def fit(self, X, y=None):
        return self

    def predict(self, X, reference=None):
        if reference is None:
            raise ValueError("PerfectOracle.predict needs the clean reference matrices")
        return np.array(reference, dtype=np.float64, copy=True)

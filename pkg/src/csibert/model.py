"""Masked-CSI transformer encoder.

Subcarriers are the sequence axis. Each row of the ``[L_max, d]`` feature
matrix is projected to ``d_model`` and summed with a learned position
(time) embedding, run through ``n_layers`` post-LN encoder layers and mapped
back to ``d`` features by the reconstruction head.

Parameters live in a plain ``dict[str, np.ndarray]``; the functions here
take the same dict with values wrapped as :class:`~csibert.tensor_core.Tensor`.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import tensor_core as tc
from .exceptions import ConfigError
from .tensor_core import Tensor


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int
    max_len: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    plain_head: bool = False
    ln_eps: float = 1e-5

    def __post_init__(self):
        for name in ("feature_dim", "max_len", "d_model", "n_layers", "n_heads", "d_ff"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def desk_model_config(feature_dim: int = 32, max_len: int = 16, **overrides) -> ModelConfig:
    return replace(ModelConfig(feature_dim, max_len), **overrides)


def paper_model_config(feature_dim: int = 512, max_len: int = 64, **overrides) -> ModelConfig:
    base = ModelConfig(feature_dim, max_len, d_model=768, n_layers=12, n_heads=12, d_ff=3072)
    return replace(base, **overrides)


MODEL_PRESETS = {"desk": desk_model_config, "paper": paper_model_config}


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    D, d, F = cfg.d_model, cfg.feature_dim, cfg.d_ff
    hk = cfg.n_heads * cfg.d_k
    shapes: dict[str, tuple[int, ...]] = {
        "time_embedding": (cfg.max_len, D),
        "feature.W": (d, D),
        "feature.b": (D,),
    }
    for i in range(cfg.n_layers):
        p = f"layer{i}."
        # W_Q/W_K/W_V hold the per-head [D, d_k] blocks side by side
        shapes.update({
            p + "W_Q": (D, hk),
            p + "W_K": (D, hk),
            p + "W_V": (D, hk),
            p + "W_O": (hk, D),
            p + "ln1.gain": (D,),
            p + "ln1.bias": (D,),
            p + "ffn.W1": (D, F),
            p + "ffn.b1": (F,),
            p + "ffn.W2": (F, D),
            p + "ffn.b2": (D,),
            p + "ln2.gain": (D,),
            p + "ln2.bias": (D,),
        })
    if not cfg.plain_head:
        shapes.update({
            "head.W_inter": (D, D),
            "head.b_inter": (D,),
            "head.ln.gain": (D,),
            "head.ln.bias": (D,),
        })
    shapes.update({"head.W_out": (D, d), "head.b_out": (d,)})
    return shapes


def param_count(cfg: ModelConfig) -> int:
    return sum(math.prod(s) for s in param_shapes(cfg).values())


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, unit LN gains, N(0, 0.02^2) time embedding."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name == "time_embedding":
            params[name] = rng.normal(0.0, 0.02, size=shape)
        elif name.endswith(".gain"):
            params[name] = np.ones(shape)
        elif len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(shape[0])
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def as_tensors(params: dict[str, np.ndarray], requires_grad: bool = True) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in params.items()}


def _batched(x, attn_mask):
    x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if attn_mask is None:
        attn_mask = np.ones(x.shape[:2])
    attn_mask = np.asarray(attn_mask, dtype=np.float64)
    if attn_mask.ndim == 1:
        attn_mask = np.broadcast_to(attn_mask, x.shape[:2])
    return x, attn_mask, single


def embed(params: dict[str, Tensor], x: np.ndarray, cfg: ModelConfig) -> Tensor:
    """``Z_0[i] = E_time[i] + x[i] W_feature + b_feature`` for ``x`` of shape ``[B, L, d]``."""
    if x.shape[-1] != cfg.feature_dim or x.shape[-2] > cfg.max_len:
        raise ConfigError(f"input shape {x.shape} incompatible with feature_dim={cfg.feature_dim}, max_len={cfg.max_len}")
    length = x.shape[-2]
    time = params["time_embedding"]
    if length != cfg.max_len:
        time = _rows(time, length)
    feat = tc.matmul(Tensor(x), params["feature.W"]) + params["feature.b"]
    return feat + time


def _rows(t: Tensor, n: int) -> Tensor:
    # slice of the leading rows, expressed with differentiable ops
    selector = np.eye(t.shape[0])[:n]
    return tc.matmul(Tensor(selector), t)


def mhsa(
    z: Tensor,
    attn_mask: np.ndarray,
    params: dict[str, Tensor],
    prefix: str,
    cfg: ModelConfig,
    return_weights: bool = False,
):
    """Multi-head scaled dot-product self-attention over ``z`` of shape ``[B, L, D]``.

    Padded key positions (``attn_mask == 0``) receive exactly zero weight.
    """
    B, L, _ = z.shape
    h, dk = cfg.n_heads, cfg.d_k

    def heads(w):
        proj = tc.reshape(tc.matmul(z, params[prefix + w]), (B, L, h, dk))
        return tc.swapaxes(proj, 1, 2)  # [B, h, L, dk]

    q, k, v = heads("W_Q"), heads("W_K"), heads("W_V")
    scores = tc.scale(tc.matmul(q, tc.transpose(k)), 1.0 / math.sqrt(dk))
    valid = np.asarray(attn_mask, dtype=bool)[:, None, None, :]
    weights = tc.softmax_rows(scores, valid)
    ctx = tc.reshape(tc.swapaxes(tc.matmul(weights, v), 1, 2), (B, L, h * dk))
    out = tc.matmul(ctx, params[prefix + "W_O"])
    return (out, weights) if return_weights else out


def ffn(z: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    hidden = tc.relu(tc.matmul(z, params[prefix + "ffn.W1"]) + params[prefix + "ffn.b1"])
    return tc.matmul(hidden, params[prefix + "ffn.W2"]) + params[prefix + "ffn.b2"]


def encoder_layer(z: Tensor, attn_mask: np.ndarray, params: dict[str, Tensor], index: int, cfg: ModelConfig) -> Tensor:
    p = f"layer{index}."
    z = tc.layer_norm(z + mhsa(z, attn_mask, params, p, cfg), params[p + "ln1.gain"], params[p + "ln1.bias"], cfg.ln_eps)
    return tc.layer_norm(z + ffn(z, params, p), params[p + "ln2.gain"], params[p + "ln2.bias"], cfg.ln_eps)


def head(z: Tensor, params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    if not cfg.plain_head:
        z = tc.gelu(tc.matmul(z, params["head.W_inter"]) + params["head.b_inter"])
        z = tc.layer_norm(z, params["head.ln.gain"], params["head.ln.bias"], cfg.ln_eps)
    return tc.matmul(z, params["head.W_out"]) + params["head.b_out"]


def forward(params: dict[str, Tensor], x, attn_mask=None, cfg: ModelConfig | None = None) -> Tensor:
    """Reconstruct ``[B, L, d]`` (or ``[L, d]``) features from masked input."""
    if cfg is None:
        raise ConfigError("forward needs a ModelConfig")
    x, attn_mask, single = _batched(x, attn_mask)
    if not attn_mask.any(axis=1).all():
        raise ConfigError("every sequence needs at least one valid (non-padding) position")
    z = embed(params, x, cfg)
    for i in range(cfg.n_layers):
        z = encoder_layer(z, attn_mask, params, i, cfg)
    out = head(z, params, cfg)
    if single:
        out = tc.reshape(out, out.shape[1:])
    return out


def predict(params: dict[str, np.ndarray], x, attn_mask=None, cfg: ModelConfig | None = None) -> np.ndarray:
    """Forward pass without building a tape."""
    return forward(as_tensors(params, requires_grad=False), x, attn_mask, cfg).data

"""CSI tensor -> normalized real features, masking and padding."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .channel_sim import CsiTensor
from .exceptions import ConfigError, DegenerateInputError
from .validation import check_csi_batch, check_feature_batch

MIN_STD = 1e-12


@dataclass(frozen=True)
class NormStats:
    """Mean/std of the real and imaginary parts.

    Scalars for per-matrix normalization, ``[N_s, 1, 1]`` arrays for the
    per-subcarrier mode.
    """

    mean_real: float | np.ndarray
    std_real: float | np.ndarray
    mean_imag: float | np.ndarray
    std_imag: float | np.ndarray


@dataclass
class FeatureMatrix:
    data: np.ndarray  # [N_s, d]
    stats: NormStats | None
    dims: tuple[int, int, int]

    def __post_init__(self):
        n_s, n_t, n_r = self.dims
        if self.data.shape != (n_s, 2 * n_t * n_r):
            raise ConfigError(f"feature matrix shape {self.data.shape} inconsistent with dims {self.dims}")

    @property
    def feature_dim(self) -> int:
        return self.data.shape[1]


def split_and_normalize(h: CsiTensor | np.ndarray, per_subcarrier: bool = False):
    """Return ``(real_norm, imag_norm, NormStats)`` for one CSI tensor."""
    data = h.data if isinstance(h, CsiTensor) else np.asarray(h)
    real = data.real.astype(np.float64)
    imag = data.imag.astype(np.float64)
    axes = (1, 2) if per_subcarrier else None
    keep = per_subcarrier
    mr, sr = real.mean(axis=axes, keepdims=keep), real.std(axis=axes, keepdims=keep)
    mi, si = imag.mean(axis=axes, keepdims=keep), imag.std(axis=axes, keepdims=keep)
    if np.min(sr) <= MIN_STD or np.min(si) <= MIN_STD:
        raise DegenerateInputError("real or imaginary part has (near) zero variance")
    if not per_subcarrier:
        mr, sr, mi, si = float(mr), float(sr), float(mi), float(si)
    return (real - mr) / sr, (imag - mi) / si, NormStats(mr, sr, mi, si)


def denormalize(real_norm: np.ndarray, imag_norm: np.ndarray, stats: NormStats) -> np.ndarray:
    real = real_norm * stats.std_real + stats.mean_real
    imag = imag_norm * stats.std_imag + stats.mean_imag
    return real + 1j * imag


def flatten(h_real: np.ndarray, h_imag: np.ndarray, stats: NormStats | None = None) -> FeatureMatrix:
    """Row s = [real block of subcarrier s, imaginary block], each (t, r) row-major."""
    h_real, h_imag = np.asarray(h_real), np.asarray(h_imag)
    if h_real.shape != h_imag.shape or h_real.ndim != 3:
        raise ConfigError(f"real/imag shapes must match and be 3-D, got {h_real.shape} and {h_imag.shape}")
    n_s = h_real.shape[0]
    data = np.concatenate([h_real.reshape(n_s, -1), h_imag.reshape(n_s, -1)], axis=1)
    return FeatureMatrix(data, stats, h_real.shape)


def unflatten(x: FeatureMatrix) -> tuple[np.ndarray, np.ndarray]:
    n_s, n_t, n_r = x.dims
    half = n_t * n_r
    return x.data[:, :half].reshape(n_s, n_t, n_r), x.data[:, half:].reshape(n_s, n_t, n_r)


def to_features(h: CsiTensor | np.ndarray, per_subcarrier: bool = False) -> FeatureMatrix:
    real, imag, stats = split_and_normalize(h, per_subcarrier=per_subcarrier)
    return flatten(real, imag, stats)


def from_features(x: FeatureMatrix) -> np.ndarray:
    """Invert :func:`to_features` back to the complex tensor."""
    real, imag = unflatten(x)
    return denormalize(real, imag, x.stats)


# ----------------------------------------------------------------------------
# masking

_SCHEMES = ("bernoulli", "every_kth", "ratio")
_ALIASES = {"bernoulli": "bernoulli", "every": "every_kth", "every_kth": "every_kth", "ratio": "ratio"}


@dataclass(frozen=True)
class MaskSpec:
    """Masking scheme.

    ``bernoulli``: ``value`` is the KEEP probability, elementwise.
    ``every_kth``: rows with index divisible by ``value`` are zeroed.
    ``ratio``: row i is kept iff ``u[i] > value``, ``u ~ U(0, 1)``; ``value`` is the masked fraction.
    """

    scheme: str
    value: float
    seed: int = 0

    def __post_init__(self):
        if self.scheme not in _SCHEMES:
            raise ConfigError(f"unknown mask scheme {self.scheme!r}; expected one of {_SCHEMES}")
        if self.scheme == "every_kth":
            if self.value < 1 or int(self.value) != self.value:
                raise ConfigError(f"every_kth needs an integer k >= 1, got {self.value}")
        elif not 0.0 <= self.value <= 1.0:
            raise ConfigError(f"{self.scheme} parameter must lie in [0, 1], got {self.value}")

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "MaskSpec":
        """Parse ``bernoulli:p``, ``every:k`` or ``ratio:gamma``."""
        try:
            name, raw = text.split(":", 1)
            scheme = _ALIASES[name.strip().lower()]
            value = float(raw)
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"cannot parse mask spec {text!r}; use bernoulli:p, every:k or ratio:gamma") from exc
        if scheme == "every_kth":
            value = int(value)
        return cls(scheme, value, seed)

    def __str__(self) -> str:
        label = {"bernoulli": "bernoulli", "every_kth": "every", "ratio": "ratio"}[self.scheme]
        value = int(self.value) if self.scheme == "every_kth" else self.value
        return f"{label}:{value}"

    @property
    def is_fixed(self) -> bool:
        return self.scheme == "every_kth"

    def to_dict(self) -> dict:
        return {"scheme": self.scheme, "value": self.value, "seed": self.seed}


def make_mask(spec: MaskSpec, shape: tuple[int, int], rng: np.random.Generator | None = None) -> np.ndarray:
    """Binary ``[N_s, d]`` mask (1 = keep). Row-level schemes broadcast across d."""
    n_s, d = shape
    if spec.scheme == "every_kth":
        rows = (np.arange(n_s) % int(spec.value)) != 0
        return np.repeat(rows[:, None], d, axis=1).astype(np.float64)
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    if spec.scheme == "bernoulli":
        return (rng.random((n_s, d)) < spec.value).astype(np.float64)
    # 1 - U[0, 1) lies in (0, 1], so gamma = 0 keeps every row
    u = 1.0 - rng.random(n_s)
    return np.repeat((u > spec.value)[:, None], d, axis=1).astype(np.float64)


def make_masks(spec: MaskSpec, indices, shape: tuple[int, int], stream: int = 0) -> np.ndarray:
    """One mask per sample; sample ``i`` draws from a stream keyed by ``(seed, stream, i)``.

    ``indices`` is a sample count or an explicit sequence of sample indices.
    """
    indices = np.arange(indices) if np.isscalar(indices) else np.asarray(indices)
    out = np.empty((len(indices),) + tuple(shape))
    for j, i in enumerate(indices):
        rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(stream, int(i))))
        out[j] = make_mask(spec, shape, rng)
    return out


def apply_mask(x, m):
    """Elementwise ``x * m``; returns the same kind of object as ``x``."""
    data = x.data if isinstance(x, FeatureMatrix) else np.asarray(x)
    mask = m.data if isinstance(m, FeatureMatrix) else np.asarray(m)
    if data.shape != mask.shape:
        raise ConfigError(f"mask shape {mask.shape} does not match data shape {data.shape}")
    # np.where rather than multiply: kept entries stay bit-identical and -0.0 never appears
    out = np.where(mask != 0, data, 0.0)
    if isinstance(x, FeatureMatrix):
        return FeatureMatrix(out, x.stats, x.dims)
    return out


def masked_rows(m: np.ndarray) -> list[int]:
    """Indices of rows with at least one masked entry."""
    return [int(i) for i in np.flatnonzero((np.asarray(m) == 0).any(axis=-1))]


def pad_and_attention_mask(x, target_len: int):
    """Zero-pad rows up to ``target_len``; return ``(padded, attention_mask)``."""
    data = x.data if isinstance(x, FeatureMatrix) else np.asarray(x)
    n_s = data.shape[-2]
    if n_s > target_len:
        raise ConfigError(f"sequence length {n_s} exceeds target length {target_len}")
    pad = [(0, 0)] * data.ndim
    pad[-2] = (0, target_len - n_s)
    padded = np.pad(data, pad)
    attn = np.zeros(target_len)
    attn[:n_s] = 1.0
    return padded, attn


# ----------------------------------------------------------------------------
# batch helpers and estimator wrappers


def featurize(h, per_subcarrier: bool = False) -> tuple[np.ndarray, list[NormStats]]:
    """Normalize and flatten a batch of CSI tensors to ``[n, N_s, d]``."""
    h = check_csi_batch(h)
    feats, stats = [], []
    for mat in h:
        fm = to_features(mat, per_subcarrier=per_subcarrier)
        feats.append(fm.data)
        stats.append(fm.stats)
    return np.stack(feats), stats


class CsiFeaturizer(TransformerMixin, BaseEstimator):
    """Complex ``[n, N_s, N_t, N_r]`` CSI -> real ``[n, N_s, 2 N_t N_r]`` features.

    Normalization statistics are per matrix, so ``fit`` only records the
    expected dimensions. :meth:`transform_with_stats` also returns the
    statistics needed by :meth:`inverse_transform`.
    """

    def __init__(self, per_subcarrier: bool = False):
        self.per_subcarrier = per_subcarrier

    def fit(self, X, y=None):
        self.dims_ = check_csi_batch(X).shape[2:]
        return self

    def transform(self, X):
        return featurize(X, self.per_subcarrier)[0]

    def transform_with_stats(self, X):
        return featurize(X, self.per_subcarrier)

    def inverse_transform(self, X, stats: Sequence[NormStats]):
        X = check_feature_batch(X)
        check_is_fitted(self, "dims_")
        dims = (X.shape[1],) + tuple(self.dims_)
        out = [from_features(FeatureMatrix(x, s, dims)) for x, s in zip(X, stats)]
        return np.stack(out)


class CsiMasker(TransformerMixin, BaseEstimator):
    """Apply a :class:`MaskSpec` to a batch of feature matrices."""

    def __init__(self, mask: str = "every:10", random_state: int = 0):
        self.mask = mask
        self.random_state = random_state

    def fit(self, X, y=None):
        check_feature_batch(X)
        self.spec_ = MaskSpec.parse(self.mask, seed=self.random_state)
        return self

    def masks(self, X) -> np.ndarray:
        X = check_feature_batch(X)
        spec = getattr(self, "spec_", None) or MaskSpec.parse(self.mask, seed=self.random_state)
        return make_masks(spec, X.shape[0], X.shape[1:])

    def transform(self, X):
        X = check_feature_batch(X)
        return apply_mask(X, self.masks(X))

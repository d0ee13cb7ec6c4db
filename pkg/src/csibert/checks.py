"""Fast invariant suite behind ``csibert check``.

Each check returns ``(passed, detail)``. Gradient checks are named after the
op they exercise (``grad:matmul`` and so on), so a broken backward rule is
reported by name.
"""
from __future__ import annotations

import math
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor_core as tc
from .checkpoint import load_checkpoint, save_checkpoint
from .channel_sim import desk_dataset_config, generate_dataset
from .dataset_io import read_dataset, write_dataset
from .model import ModelConfig, as_tensors, forward, init_params
from .preprocess import MaskSpec, make_mask, masked_rows
from .tensor_core import Tensor, grad_check
from .training import mse_loss

OP_TOL = 1e-4
MODEL_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def _leaf(rng, shape, positive=False):
    x = rng.normal(size=shape)
    if positive:
        x = np.abs(x) + 0.5
    return Tensor(x, requires_grad=True)


def _projected(out_fn, rng):
    """Scalar ``sum(op(...) * R)`` with a fixed random ``R``."""
    cache = {}

    def f():
        out = out_fn()
        if "r" not in cache:
            cache["r"] = Tensor(rng.normal(size=out.shape))
        return tc.sum_all(tc.mul(out, cache["r"]))

    return f


def _relu_input(rng, shape):
    # keep entries away from the kink so central differences are valid
    x = rng.normal(size=shape)
    x = np.where(np.abs(x) < 0.05, 0.5, x)
    return Tensor(x, requires_grad=True)


def op_cases(rng: np.random.Generator) -> dict[str, Callable[[], float]]:
    """One randomized gradient check per differentiable op."""

    def case(build):
        def run():
            f, params = build()
            return grad_check(f, params)

        return run

    def shape():
        return tuple(int(n) for n in rng.integers(2, 5, size=2))

    def c_add():
        s = shape()
        a, b = _leaf(rng, s), _leaf(rng, s[1:])
        return _projected(lambda: tc.add(a, b), rng), [a, b]

    def c_sub():
        s = shape()
        a, b = _leaf(rng, s), _leaf(rng, s)
        return _projected(lambda: tc.sub(a, b), rng), [a, b]

    def c_mul():
        s = shape()
        a, b = _leaf(rng, s), _leaf(rng, (1, s[1]))
        return _projected(lambda: tc.mul(a, b), rng), [a, b]

    def c_neg():
        a = _leaf(rng, shape())
        return _projected(lambda: tc.neg(a), rng), [a]

    def c_scale():
        a = _leaf(rng, shape())
        k = float(rng.normal())
        return _projected(lambda: tc.scale(a, k), rng), [a]

    def c_square():
        a = _leaf(rng, shape())
        return _projected(lambda: tc.square(a), rng), [a]

    def c_matmul():
        b_, m, k, n = (int(v) for v in rng.integers(1, 5, size=4))
        a, b = _leaf(rng, (b_, m, k)), _leaf(rng, (k, n))
        return _projected(lambda: tc.matmul(a, b), rng), [a, b]

    def c_swapaxes():
        a = _leaf(rng, (2,) + shape())
        return _projected(lambda: tc.swapaxes(a, -1, -2), rng), [a]

    def c_reshape():
        s = shape()
        a = _leaf(rng, s)
        return _projected(lambda: tc.reshape(a, (s[0] * s[1],)), rng), [a]

    def c_sum_all():
        a = _leaf(rng, shape())
        return (lambda: tc.scale(tc.sum_all(a), 1.7)), [a]

    def c_softmax():
        s = shape()
        x = _leaf(rng, (2,) + s)
        valid = np.ones(s[1])
        valid[-1] = 0.0
        return _projected(lambda: tc.softmax_rows(x, valid), rng), [x]

    def c_layer_norm():
        s = shape()
        x, g, b = _leaf(rng, s), _leaf(rng, (s[1],)), _leaf(rng, (s[1],))
        return _projected(lambda: tc.layer_norm(x, g, b), rng), [x, g, b]

    def c_gelu():
        a = _leaf(rng, shape())
        return _projected(lambda: tc.gelu(a), rng), [a]

    def c_relu():
        a = _relu_input(rng, shape())
        return _projected(lambda: tc.relu(a), rng), [a]

    builders = {
        "add": c_add, "sub": c_sub, "mul": c_mul, "neg": c_neg, "scale": c_scale,
        "square": c_square, "matmul": c_matmul, "swapaxes": c_swapaxes, "reshape": c_reshape,
        "sum_all": c_sum_all, "softmax_rows": c_softmax, "layer_norm": c_layer_norm,
        "gelu": c_gelu, "relu": c_relu,
    }
    return {name: case(b) for name, b in builders.items()}


def model_grad_error(cfg: ModelConfig, seed: int = 0) -> float:
    """End-to-end loss gradient check (relative error) on a random padded batch."""
    rng = np.random.default_rng(seed)
    params = as_tensors(init_params(cfg, seed))
    x = rng.normal(size=(2, cfg.max_len, cfg.feature_dim))
    attn = np.ones((2, cfg.max_len))
    attn[1, -1] = 0.0
    return grad_check(lambda: mse_loss(forward(params, x, attn, cfg), x), list(params.values()))


def _grad_checks(trials: int, seed: int) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, run in op_cases(rng).items():
        worst = max(run() for _ in range(trials))
        results.append(CheckResult(f"grad:{name}", worst < OP_TOL, f"worst rel. err {worst:.2e} over {trials} trials"))
    cfg = ModelConfig(feature_dim=4, max_len=4, d_model=8, n_layers=1, n_heads=2, d_ff=8)
    err = model_grad_error(cfg, seed)
    results.append(CheckResult("grad:model", err < MODEL_TOL, f"rel. err {err:.2e}"))
    return results


def _softmax_checks(rng) -> list[CheckResult]:
    x = Tensor(rng.normal(size=(3, 5, 5)) * 10)
    valid = np.array([1, 1, 1, 0, 0.0])
    w = tc.softmax_rows(x, valid).data
    rows_ok = np.allclose(w.sum(-1), 1.0, atol=1e-12)
    pad_ok = bool(np.all(w[..., 3:] == 0.0))
    return [CheckResult("softmax:rows_sum_to_one", rows_ok and pad_ok, "row sums 1, padded weights exactly 0")]


def _layer_norm_checks(rng) -> list[CheckResult]:
    x = Tensor(rng.normal(size=(4, 16)) * 3 + 2)
    y = tc.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    ok = np.allclose(y.mean(-1), 0, atol=1e-10) and np.allclose(y.var(-1), 1, atol=1e-4)
    return [CheckResult("layer_norm:standardizes", bool(ok), f"max |mean| {np.abs(y.mean(-1)).max():.1e}")]


def _mask_checks(rng) -> list[CheckResult]:
    out = []
    shape = (64, 128)
    m = make_mask(MaskSpec("bernoulli", 0.8), shape, rng)
    n = m.size
    sigma = math.sqrt(0.8 * 0.2 / n)
    rate = float(m.mean())
    out.append(CheckResult("mask:bernoulli_rate", abs(rate - 0.8) < 3 * sigma, f"keep rate {rate:.4f}"))
    rows = masked_rows(make_mask(MaskSpec("every_kth", 10), shape))
    out.append(CheckResult("mask:every_kth_rows", rows == list(range(0, 64, 10)), f"rows {rows}"))
    m = np.stack([make_mask(MaskSpec("ratio", 0.3), (64, 2), rng) for _ in range(200)])
    frac = float((m[..., 0] == 0).mean())
    sigma = math.sqrt(0.3 * 0.7 / (200 * 64))
    out.append(CheckResult("mask:ratio_fraction", abs(frac - 0.3) < 3 * sigma, f"masked fraction {frac:.4f}"))
    return out


def _format_checks() -> list[CheckResult]:
    out = []
    with tempfile.TemporaryDirectory() as tmp:
        arrays = {"a": np.arange(6.0).reshape(2, 3), "b": np.array([np.pi])}
        save_checkpoint(Path(tmp) / "x.ckpt", arrays, {"k": 1})
        back, manifest = load_checkpoint(Path(tmp) / "x.ckpt")
        ok = manifest == {"k": 1} and all(np.array_equal(arrays[k], back[k]) for k in arrays)
        out.append(CheckResult("format:checkpoint_roundtrip", ok, "arrays and manifest preserved"))
        ds = generate_dataset(desk_dataset_config(cells=1, ues_per_cell=2, n_subcarriers=4, n_tx=2, n_rx=1))
        write_dataset(ds, Path(tmp) / "ds")
        back_ds = read_dataset(Path(tmp) / "ds")
        ok = np.array_equal(ds.data, back_ds.data) and ds.records == back_ds.records
        out.append(CheckResult("format:dataset_roundtrip", bool(ok), f"{len(ds)} matrices"))
    return out


def run_checks(trials: int = 3, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for group in (
        lambda: _grad_checks(trials, seed),
        lambda: _softmax_checks(rng),
        lambda: _layer_norm_checks(rng),
        lambda: _mask_checks(rng),
        _format_checks,
    ):
        try:
            results.extend(group())
        except Exception as exc:  # a crashing check is a failing check
            results.append(CheckResult(getattr(group, "__name__", "check"), False, f"{type(exc).__name__}: {exc}"))
    return results


def results_as_dicts(results: list[CheckResult]) -> list[dict]:
    return [asdict(r) for r in results]

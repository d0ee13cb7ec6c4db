"""Evaluation protocols and report emission.

Every runner evaluates on the held-out split of an :class:`EvalData` and
returns an :class:`ExperimentReport`. Reported values are per-element MSE.
Reference numbers published for the original system are stored in
``paper_reference`` for context only; they are never asserted.

Each report row also gets a matching entry in ``extra["anchors"]`` with the
MSE of the perfect oracle (0) and of the zero predictor (``mean(x**2)``) on
the same elements, so every trained value can be bracketed.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import platform
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from . import __version__
from .channel_sim import Dataset, ScenarioId, apply_doppler_rotation, generate_triple
from .exceptions import ConfigError
from .preprocess import MaskSpec, apply_mask, featurize, make_masks
from .training import reconstruction_mse

REPORT_VERSION = 1
CSV_COLUMNS = ("experiment", "labels", "metric_name", "value")
METRIC = "mse_per_element"
EVAL_MASK = "every:10"

EXPERIMENTS = (
    "reconstruction",
    "scenario",
    "mask-sweep",
    "subcarrier",
    "cross-scenario",
    "error-dist",
    "doppler",
    "baselines",
)

PAPER_REFERENCE = {
    "reconstruction": {"mse": 0.011035},
    "scenario": {"stationary": 0.003185, "high_speed": 0.003179, "urban_macro": 0.026609},
    "mask-sweep": {"mse_up_to_gamma_0.5": 0.01103},
    "subcarrier": {
        "0-7": 0.012956, "8-15": 0.075252, "16-23": 0.074781, "24-31": 0.075120,
        "32-39": 0.076423, "40-47": 0.077504, "48-55": 0.079439, "56-63": 0.080906,
    },
    "cross-scenario": {
        "stationary->stationary": 0.003185, "stationary->high_speed": 0.003182,
        "stationary->urban_macro": 0.026610, "high_speed->stationary": 0.003185,
        "high_speed->high_speed": 0.003182, "high_speed->urban_macro": 0.026611,
        "urban_macro->stationary": 0.003185, "urban_macro->high_speed": 0.003182,
        "urban_macro->urban_macro": 0.026611,
    },
    "error-dist": None,
    "doppler": {"0": 0.011037, "400": 0.011043},
    "baselines": {"transformer": 0.011035, "linear_regression": 0.309207, "mlp": 0.314465},
}


# ----------------------------------------------------------------------------
# data preparation


def split_indices(scenarios: np.ndarray, seed: int = 0, val_fraction: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Per-scenario shuffled split; ``max(1, round(val_fraction * n))`` held out per scenario."""
    scenarios = np.asarray(scenarios)
    train, val = [], []
    for k, s in enumerate(sorted(set(scenarios.tolist()))):
        idx = np.flatnonzero(scenarios == s)
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(k,)))
        idx = rng.permutation(idx)
        n_val = min(len(idx), max(1, int(round(val_fraction * len(idx)))))
        val.append(idx[:n_val])
        train.append(idx[n_val:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(val))


@dataclass
class EvalData:
    dataset: Dataset
    X: np.ndarray  # clean normalized features [n, N_s, d]
    train_idx: np.ndarray
    val_idx: np.ndarray
    split_seed: int = 0

    @property
    def scenarios(self) -> np.ndarray:
        return self.dataset.scenarios

    @property
    def X_train(self) -> np.ndarray:
        return self.X[self.train_idx]

    @property
    def X_val(self) -> np.ndarray:
        return self.X[self.val_idx]

    def scenario_names(self) -> list[str]:
        present = set(self.scenarios.tolist())
        return [s.value for s in ScenarioId if s.value in present]

    def config_echo(self) -> dict:
        return {
            "dataset": self.dataset.config.to_dict(),
            "split_seed": self.split_seed,
            "n_train": int(len(self.train_idx)),
            "n_val": int(len(self.val_idx)),
        }


def prepare(dataset: Dataset, split_seed: int = 0) -> EvalData:
    X, _ = featurize(dataset.data)
    train_idx, val_idx = split_indices(dataset.scenarios, split_seed)
    return EvalData(dataset, X, train_idx, val_idx, split_seed)


# ----------------------------------------------------------------------------
# reports


@dataclass
class ExperimentReport:
    experiment: str
    config: dict
    rows: list[dict] = field(default_factory=list)
    paper_reference: dict | None = None
    environment: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    report_version: int = REPORT_VERSION

    def add_row(self, labels: dict, value: float, metric_name: str = METRIC, zero_anchor: float | None = None):
        value = float(value)
        if not math.isfinite(value):
            raise ValueError(f"{self.experiment}: non-finite value for {labels}")
        self.rows.append({"labels": dict(labels), "metric_name": metric_name, "value": value})
        if zero_anchor is not None:
            self.extra.setdefault("anchors", []).append({"perfect": 0.0, "zero": float(zero_anchor)})

    def to_dict(self) -> dict:
        return {
            "report_version": self.report_version,
            "experiment": self.experiment,
            "config": self.config,
            "rows": self.rows,
            "paper_reference": self.paper_reference,
            "environment": self.environment,
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentReport":
        if d.get("report_version") != REPORT_VERSION:
            raise ConfigError(f"unsupported report version {d.get('report_version')!r}")
        return cls(
            experiment=d["experiment"],
            config=d["config"],
            rows=d["rows"],
            paper_reference=d["paper_reference"],
            environment=d["environment"],
            extra=d["extra"],
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def values(self) -> np.ndarray:
        return np.array([r["value"] for r in self.rows])


def environment(seed: int) -> dict:
    return {
        "toolkit_version": __version__,
        "numpy_version": np.__version__,
        "python_version": platform.python_version(),
        "seed": seed,
    }


def _new_report(name: str, data: EvalData, model=None, **config) -> ExperimentReport:
    echo = data.config_echo()
    if model is not None:
        echo["model"] = {"class": type(model).__name__, "params": model.get_params()}
    echo.update(config)
    return ExperimentReport(
        experiment=name,
        config=echo,
        paper_reference=PAPER_REFERENCE.get(name),
        environment=environment(data.split_seed),
        extra={"val_indices": data.val_idx.tolist()},
    )


# ----------------------------------------------------------------------------
# helpers


def reconstruct(model, X_masked: np.ndarray, X_clean: np.ndarray) -> np.ndarray:
    """``model.predict`` with the clean reference for oracles that need it."""
    if getattr(model, "needs_reference", False):
        return model.predict(X_masked, reference=X_clean)
    return model.predict(X_masked)


def masked_inputs(X: np.ndarray, indices: np.ndarray, mask: str | MaskSpec, seed: int = 0) -> np.ndarray:
    """Mask each held-out sample with a stream keyed by its dataset index."""
    spec = mask if isinstance(mask, MaskSpec) else MaskSpec.parse(mask, seed=seed)
    return apply_mask(X, make_masks(spec, indices, X.shape[1:]))


def _eval(model, X: np.ndarray, indices: np.ndarray, mask=EVAL_MASK, seed: int = 0):
    Xm = masked_inputs(X, indices, mask, seed)
    return reconstruct(model, Xm, X)


def _zero(X: np.ndarray) -> float:
    return float(np.mean(np.square(X)))


def subcarrier_groups(n_subcarriers: int, group_size: int = 8) -> list[tuple[int, int]]:
    if group_size < 1:
        raise ConfigError("group_size must be >= 1")
    return [(a, min(a + group_size, n_subcarriers)) for a in range(0, n_subcarriers, group_size)]


def _ensure_fitted(model, X_train: np.ndarray):
    if getattr(model, "needs_reference", False):
        return model
    try:
        check_is_fitted(model)
    except NotFittedError:
        model.fit(X_train)
    return model


# ----------------------------------------------------------------------------
# runners


def run_reconstruction(model, data: EvalData, mask: str = EVAL_MASK) -> ExperimentReport:
    report = _new_report("reconstruction", data, model, mask=mask)
    X = data.X_val
    X_hat = _eval(model, X, data.val_idx, mask)
    report.add_row({"split": "validation", "mask": mask}, reconstruction_mse(X, X_hat), zero_anchor=_zero(X))
    return report


def run_scenario_wise(model, data: EvalData, mask: str = EVAL_MASK) -> ExperimentReport:
    report = _new_report("scenario", data, model, mask=mask)
    X = data.X_val
    X_hat = _eval(model, X, data.val_idx, mask)
    scen = data.scenarios[data.val_idx]
    for s in data.scenario_names():
        k = scen == s
        report.add_row({"scenario": s}, reconstruction_mse(X[k], X_hat[k]), zero_anchor=_zero(X[k]))
    report.extra["counts"] = {s: int(np.sum(scen == s)) for s in data.scenario_names()}
    return report


def run_masking_sweep(model, data: EvalData, gammas: Sequence[float] = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5), seed: int = 0) -> ExperimentReport:
    report = _new_report("mask-sweep", data, model, gammas=list(gammas), mask_seed=seed)
    X = data.X_val
    for i, g in enumerate(gammas):
        # a fresh mask stream per grid point
        spec = MaskSpec("ratio", float(g), seed=seed + i)
        X_hat = _eval(model, X, data.val_idx, spec)
        report.add_row({"gamma": float(g)}, reconstruction_mse(X, X_hat), zero_anchor=_zero(X))
    return report


def run_subcarrier_groups(model, data: EvalData, group_size: int = 8, mask: str = EVAL_MASK) -> ExperimentReport:
    report = _new_report("subcarrier", data, model, group_size=group_size, mask=mask)
    X = data.X_val
    X_hat = _eval(model, X, data.val_idx, mask)
    for a, b in subcarrier_groups(X.shape[1], group_size):
        report.add_row(
            {"group": f"{a}-{b - 1}", "start": a, "stop": b},
            reconstruction_mse(X[:, a:b], X_hat[:, a:b]),
            zero_anchor=_zero(X[:, a:b]),
        )
    report.extra["overall"] = reconstruction_mse(X, X_hat)
    return report


def run_cross_scenario(template, data: EvalData, mask: str = EVAL_MASK) -> ExperimentReport:
    """Train one clone of ``template`` per scenario and test it on every scenario."""
    report = _new_report("cross-scenario", data, template, mask=mask)
    scen = data.scenarios
    names = data.scenario_names()
    train_sets = {s: data.train_idx[scen[data.train_idx] == s] for s in names}
    for s_train in names:
        model = clone(template)
        if not getattr(model, "needs_reference", False):
            model.fit(data.X[train_sets[s_train]])
        for s_test in names:
            idx = data.val_idx[scen[data.val_idx] == s_test]
            X = data.X[idx]
            X_hat = _eval(model, X, idx, mask)
            report.add_row(
                {"train_scenario": s_train, "test_scenario": s_test},
                reconstruction_mse(X, X_hat),
                zero_anchor=_zero(X),
            )
    report.extra["train_counts"] = {s: int(len(v)) for s, v in train_sets.items()}
    return report


def run_error_distribution(model, data: EvalData, n_bins: int = 50, group_size: int = 8, mask: str = EVAL_MASK) -> ExperimentReport:
    """Histograms of signed residuals per subcarrier group on shared, zero-symmetric edges."""
    report = _new_report("error-dist", data, model, n_bins=n_bins, group_size=group_size, mask=mask)
    X = data.X_val
    residual = X - _eval(model, X, data.val_idx, mask)
    span = float(np.max(np.abs(residual)))
    span = span if span > 0 else 1.0
    edges = np.linspace(-span, span, n_bins + 1)
    hists = []
    for a, b in subcarrier_groups(X.shape[1], group_size):
        eps = residual[:, a:b]
        counts, _ = np.histogram(eps, bins=edges)
        hists.append({"group": f"{a}-{b - 1}", "counts": counts.tolist(), "n": int(eps.size)})
        report.add_row({"group": f"{a}-{b - 1}"}, float(np.mean(eps * eps)), zero_anchor=_zero(X[:, a:b]))
    report.extra["edges"] = edges.tolist()
    report.extra["histograms"] = hists
    return report


def run_doppler_sweep(
    model,
    data: EvalData,
    shifts_hz: Sequence[float] = (0.0, 100.0, 200.0, 300.0, 400.0),
    mode: str = "common",
    mask: str = EVAL_MASK,
) -> ExperimentReport:
    """Evaluate a fixed model on held-out CSI with an extra Doppler shift.

    ``mode="common"`` rotates each stored matrix by one phase
    ``exp(j 2 pi delta t)``; ``mode="per_path"`` regenerates each held-out
    matrix with the per-path Doppler replaced by ``delta``.
    """
    if mode not in ("common", "per_path"):
        raise ConfigError("mode must be 'common' or 'per_path'")
    report = _new_report("doppler", data, model, shifts_hz=list(shifts_hz), mode=mode, mask=mask)
    cfg = data.dataset.config
    held = data.dataset.subset(data.val_idx)
    names = [s.id.value for s in cfg.scenarios]
    for delta in shifts_hz:
        if mode == "common":
            h = np.stack([apply_doppler_rotation(t, delta, cfg.snapshot_time).data for t in held])
        else:
            h = np.stack([
                generate_triple(cfg, r["cell"], r["ue"], names.index(r["scenario"]), doppler_override=delta)[0]
                .data.astype(np.complex64)
                for r in held.records
            ])
        X, _ = featurize(h)
        X_hat = _eval(model, X, data.val_idx, mask)
        report.add_row({"doppler_hz": float(delta)}, reconstruction_mse(X, X_hat), zero_anchor=_zero(X))
    return report


def run_baseline_comparison(models: dict, data: EvalData, mask: str = EVAL_MASK) -> ExperimentReport:
    """Fit (if needed) and evaluate each named model on the same held-out samples."""
    report = _new_report(
        "baselines", data, None, mask=mask,
        models={k: {"class": type(m).__name__, "params": m.get_params()} for k, m in models.items()},
    )
    X = data.X_val
    for name, model in models.items():
        _ensure_fitted(model, data.X_train)
        X_hat = _eval(model, X, data.val_idx, mask)
        report.add_row({"model": name}, reconstruction_mse(X, X_hat), zero_anchor=_zero(X))
    return report


def run_experiment(name: str, model, data: EvalData, baselines: dict | None = None) -> ExperimentReport:
    """Dispatch by CLI name; ``baselines`` are extra models for ``"baselines"``."""
    runners: dict[str, Callable[[], ExperimentReport]] = {
        "reconstruction": lambda: run_reconstruction(model, data),
        "scenario": lambda: run_scenario_wise(model, data),
        "mask-sweep": lambda: run_masking_sweep(model, data),
        "subcarrier": lambda: run_subcarrier_groups(model, data),
        "cross-scenario": lambda: run_cross_scenario(model, data),
        "error-dist": lambda: run_error_distribution(model, data),
        "doppler": lambda: run_doppler_sweep(model, data),
        "baselines": lambda: run_baseline_comparison({"transformer": model, **(baselines or {})}, data),
    }
    if name not in runners:
        raise ConfigError(f"unknown experiment {name!r}; valid: {', '.join(EXPERIMENTS)}")
    return runners[name]()


# ----------------------------------------------------------------------------
# emission


def _label_text(labels: dict) -> str:
    return ";".join(f"{k}={labels[k]}" for k in sorted(labels))


def report_csv(report: ExperimentReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for row in report.rows:
        w.writerow([report.experiment, _label_text(row["labels"]), row["metric_name"], repr(row["value"])])
    return buf.getvalue()


_NUMERIC_AXES = ("gamma", "doppler_hz")


def report_svg(report: ExperimentReport) -> str:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "csibert", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6, 3.5))
        values = report.values()
        axis = next((k for k in _NUMERIC_AXES if report.rows and k in report.rows[0]["labels"]), None)
        if axis is not None:
            xs = [r["labels"][axis] for r in report.rows]
            ax.plot(xs, values, marker="o")
            ax.set_xlabel(axis)
        else:
            labels = [_label_text(r["labels"]) for r in report.rows]
            ax.bar(range(len(values)), values)
            ax.set_xticks(range(len(values)))
            ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=7)
        ax.set_ylabel("per-element MSE")
        ax.set_title(report.experiment)
        fig.tight_layout()
        buf = io.StringIO()
        fig.savefig(buf, format="svg", metadata={"Date": None})
        plt.close(fig)
    return buf.getvalue()


def emit_report(report: ExperimentReport, out_dir: str | os.PathLike, formats: Sequence[str] = ("json", "csv", "svg")) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    writers = {"json": report.to_json, "csv": lambda: report_csv(report), "svg": lambda: report_svg(report)}
    paths = []
    for fmt in formats:
        if fmt not in writers:
            raise ConfigError(f"unknown report format {fmt!r}")
        path = out / f"{report.experiment}.{fmt}"
        path.write_text(writers[fmt]())
        paths.append(path)
    return paths


def load_report(path: str | os.PathLike) -> ExperimentReport:
    return ExperimentReport.from_dict(json.loads(Path(path).read_text()))

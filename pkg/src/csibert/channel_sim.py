"""Synthetic massive-MIMO CSI generation.

Each channel is a sum over ``P`` propagation paths,

    H[s, t, r] = sum_p alpha_p * a_t(theta_p)[t] * conj(a_r(phi_p)[r]) * exp(-j 2 pi f_s tau_p)

with uniform-linear-array steering vectors, an exponential power-delay
profile (optionally with a Rician line-of-sight first tap), a distance
dependent path-loss scalar and additive white Gaussian noise.
"""
from __future__ import annotations

import enum
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np

from .exceptions import ConfigError, DegenerateInputError, DomainError

SPEED_OF_LIGHT = 2.998e8
KMH = 1000.0 / 3600.0


class ScenarioId(str, enum.Enum):
    STATIONARY = "stationary"
    HIGH_SPEED = "high_speed"
    URBAN_MACRO = "urban_macro"


class DelayProfileId(str, enum.Enum):
    TDL_A = "TDL-A"
    TDL_C = "TDL-C"
    TDL_D = "TDL-D"


@dataclass(frozen=True)
class DopplerParams:
    speed: float = 0.0
    carrier_frequency: float = 3.5e9
    light_speed: float = SPEED_OF_LIGHT

    def __post_init__(self):
        if self.speed < 0:
            raise ConfigError(f"speed must be >= 0, got {self.speed}")
        if self.carrier_frequency <= 0:
            raise ConfigError(f"carrier_frequency must be > 0, got {self.carrier_frequency}")


@dataclass(frozen=True)
class PathLossParams:
    exponent: float = 3.0
    ref_frequency: float = 1e9
    freq_scaling: float = -2.0

    def __post_init__(self):
        if self.ref_frequency <= 0:
            raise ConfigError(f"ref_frequency must be > 0, got {self.ref_frequency}")
        if not 2.0 <= self.exponent <= 4.0:
            warnings.warn(f"path-loss exponent {self.exponent} outside the usual [2, 4] range", stacklevel=3)


@dataclass(frozen=True)
class MultipathComponent:
    gain: complex
    aod: float
    aoa: float
    delay: float

    def __post_init__(self):
        if self.delay < 0:
            raise ConfigError(f"path delay must be >= 0, got {self.delay}")
        if not math.isfinite(abs(self.gain)):
            raise ConfigError("path gain must be finite")


@dataclass(frozen=True)
class ScenarioConfig:
    id: ScenarioId
    profile: DelayProfileId
    rms_delay_spread: float
    doppler: DopplerParams = field(default_factory=DopplerParams)
    path_count: int = 24
    rician_k: float = 0.0

    def __post_init__(self):
        if self.rms_delay_spread < 0:
            raise ConfigError("rms_delay_spread must be >= 0")
        if self.rician_k < 0:
            raise ConfigError("rician_k must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["id"] = self.id.value
        d["profile"] = self.profile.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        return cls(
            id=ScenarioId(d["id"]),
            profile=DelayProfileId(d["profile"]),
            rms_delay_spread=float(d["rms_delay_spread"]),
            doppler=DopplerParams(**d["doppler"]),
            path_count=int(d["path_count"]),
            rician_k=float(d["rician_k"]),
        )


def stationary_scenario(**overrides) -> ScenarioConfig:
    base = ScenarioConfig(ScenarioId.STATIONARY, DelayProfileId.TDL_A, 100e-9, DopplerParams(speed=0.0))
    return replace(base, **overrides)


def high_speed_scenario(**overrides) -> ScenarioConfig:
    base = ScenarioConfig(
        ScenarioId.HIGH_SPEED,
        DelayProfileId.TDL_C,
        300e-9,
        DopplerParams(speed=120.0 * KMH, carrier_frequency=3.5e9),
    )
    return replace(base, **overrides)


def urban_macro_scenario(**overrides) -> ScenarioConfig:
    # TDL-D is the line-of-sight profile, hence the Rician first tap
    base = ScenarioConfig(
        ScenarioId.URBAN_MACRO, DelayProfileId.TDL_D, 500e-9, DopplerParams(speed=0.0), rician_k=10.0
    )
    return replace(base, **overrides)


def default_scenarios() -> list[ScenarioConfig]:
    return [stationary_scenario(), high_speed_scenario(), urban_macro_scenario()]


@dataclass(frozen=True)
class DatasetConfig:
    cells: int = 2
    ues_per_cell: int = 20
    scenarios: tuple[ScenarioConfig, ...] = field(default_factory=lambda: tuple(default_scenarios()))
    n_subcarriers: int = 16
    n_tx: int = 8
    n_rx: int = 2
    subcarrier_spacing: float = 30e3
    snr_db: float = 100.0
    snr_range_db: tuple[float, float] | None = None
    seed: int = 0
    path_loss: PathLossParams = field(default_factory=PathLossParams)
    distance_range: tuple[float, float] = (50.0, 500.0)
    snapshot_time: float = 1e-3

    def __post_init__(self):
        object.__setattr__(self, "scenarios", tuple(self.scenarios))
        dims = {
            "cells": self.cells,
            "ues_per_cell": self.ues_per_cell,
            "scenarios": len(self.scenarios),
            "n_subcarriers": self.n_subcarriers,
            "n_tx": self.n_tx,
            "n_rx": self.n_rx,
        }
        for name, value in dims.items():
            if value < 1:
                raise ConfigError(f"{name} must be >= 1, got {value}")
        if self.subcarrier_spacing <= 0:
            raise ConfigError("subcarrier_spacing must be > 0")

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.n_subcarriers, self.n_tx, self.n_rx)

    @property
    def n_matrices(self) -> int:
        return self.cells * self.ues_per_cell * len(self.scenarios)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scenarios"] = [s.to_dict() for s in self.scenarios]
        d["snr_range_db"] = None if self.snr_range_db is None else list(self.snr_range_db)
        d["distance_range"] = list(self.distance_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        d = dict(d)
        d["scenarios"] = tuple(ScenarioConfig.from_dict(s) for s in d["scenarios"])
        d["path_loss"] = PathLossParams(**d["path_loss"])
        d["distance_range"] = tuple(d["distance_range"])
        if d.get("snr_range_db") is not None:
            d["snr_range_db"] = tuple(d["snr_range_db"])
        return cls(**d)


def paper_dataset_config(**overrides) -> DatasetConfig:
    base = DatasetConfig(cells=10, ues_per_cell=200, n_subcarriers=64, n_tx=64, n_rx=4)
    return replace(base, **overrides)


def desk_dataset_config(**overrides) -> DatasetConfig:
    return replace(DatasetConfig(), **overrides)


@dataclass
class CsiTensor:
    data: np.ndarray
    cell_id: int = 0
    ue_id: int = 0
    scenario: ScenarioId = ScenarioId.STATIONARY

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ConfigError(f"CSI tensor must have three positive dimensions, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise DegenerateInputError("CSI tensor contains NaN or Inf")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.data)

    @property
    def phase(self) -> np.ndarray:
        return np.angle(self.data)

    def with_data(self, data: np.ndarray) -> "CsiTensor":
        return CsiTensor(data, self.cell_id, self.ue_id, self.scenario)


def doppler_shift(params: DopplerParams) -> float:
    """Doppler frequency offset ``v * f_c / c`` in Hz."""
    return params.speed * params.carrier_frequency / params.light_speed


def path_loss(distance: float, f_c: float, params: PathLossParams) -> float:
    """Path-loss gain ``d**-beta * (f_c / f_0)**gamma``."""
    if distance <= 0:
        raise DomainError(f"distance must be > 0, got {distance}")
    if f_c <= 0:
        raise DomainError(f"carrier frequency must be > 0, got {f_c}")
    return (1.0 / distance**params.exponent) * (f_c / params.ref_frequency) ** params.freq_scaling


def steering_vector(n_antennas: int, angle: float) -> np.ndarray:
    """Half-wavelength ULA response, entry k = exp(j*pi*k*sin(angle))."""
    k = np.arange(n_antennas)
    return np.exp(1j * np.pi * k * np.sin(angle))


def rms_delay_spread(delays: np.ndarray, powers: np.ndarray) -> float:
    powers = np.asarray(powers, dtype=float)
    total = powers.sum()
    if total <= 0:
        return 0.0
    w = powers / total
    mean = float(np.dot(w, delays))
    return math.sqrt(max(float(np.dot(w, np.square(delays))) - mean * mean, 0.0))


def sample_paths(scenario: ScenarioConfig, rng: np.random.Generator) -> list[MultipathComponent]:
    """Draw ``scenario.path_count`` components from an exponential delay profile.

    Delays are i.i.d. exponential with mean ``rms_delay_spread`` and powers
    decay as ``exp(-tau / rms_delay_spread)``. With ``rician_k > 0`` the first
    tap sits at delay 0 and carries ``K / (K + 1)`` of the power. The delays
    are finally rescaled so the realized RMS delay spread of the whole
    profile equals the scenario target.
    """
    n = scenario.path_count
    if n < 1:
        raise ConfigError("path_count must be >= 1")
    spread = scenario.rms_delay_spread
    k = scenario.rician_k

    delays = rng.exponential(spread, size=n) if spread > 0 else np.zeros(n)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=n)
    aod = rng.uniform(-np.pi / 2, np.pi / 2, size=n)
    aoa = rng.uniform(-np.pi / 2, np.pi / 2, size=n)

    powers = np.exp(-delays / spread) if spread > 0 else np.ones(n)
    if k > 0 and n > 1:
        delays[0] = 0.0
        los = 1.0 if math.isinf(k) else k / (k + 1.0)
        nlos = powers[1:] / powers[1:].sum()
        powers = np.concatenate([[los], nlos * (1.0 - los)])
    elif k > 0:
        delays[0] = 0.0
        powers = np.ones(1)
    else:
        powers = powers / powers.sum()

    realized = rms_delay_spread(delays, powers)
    if realized > 0 and spread > 0:
        delays = delays * (spread / realized)

    gains = np.sqrt(powers) * np.exp(1j * phases)
    return [
        MultipathComponent(complex(g), float(t), float(r), float(d))
        for g, t, r, d in zip(gains, aod, aoa, delays)
    ]


def csi_from_paths(
    paths: Sequence[MultipathComponent],
    dims: tuple[int, int, int],
    subcarrier_spacing: float,
) -> np.ndarray:
    """Evaluate the multipath sum on an ``[N_s, N_t, N_r]`` grid."""
    n_s, n_t, n_r = dims
    if min(dims) < 1:
        raise ConfigError(f"dimensions must be positive, got {dims}")
    if not paths:
        return np.zeros(dims, dtype=np.complex128)
    gains = np.array([p.gain for p in paths], dtype=np.complex128)
    aod = np.array([p.aod for p in paths])
    aoa = np.array([p.aoa for p in paths])
    delays = np.array([p.delay for p in paths])

    a_t = np.exp(1j * np.pi * np.arange(n_t)[None, :] * np.sin(aod)[:, None])  # [P, N_t]
    a_r = np.exp(1j * np.pi * np.arange(n_r)[None, :] * np.sin(aoa)[:, None])  # [P, N_r]
    freqs = np.arange(n_s) * subcarrier_spacing
    delay_phase = np.exp(-2j * np.pi * freqs[:, None] * delays[None, :])  # [N_s, P]

    spatial = (gains[:, None, None] * a_t[:, :, None] * np.conj(a_r)[:, None, :]).reshape(len(paths), -1)
    return (delay_phase @ spatial).reshape(n_s, n_t, n_r)


def generate_csi(
    scenario: ScenarioConfig,
    dims: tuple[int, int, int],
    subcarrier_spacing: float,
    rng: np.random.Generator,
) -> CsiTensor:
    paths = sample_paths(scenario, rng)
    return CsiTensor(csi_from_paths(paths, dims, subcarrier_spacing), scenario=scenario.id)


def add_awgn(h: CsiTensor, snr_db: float, rng: np.random.Generator) -> CsiTensor:
    """Add circularly-symmetric complex Gaussian noise at the requested SNR."""
    signal_power = float(np.mean(np.abs(h.data) ** 2))
    if math.isinf(snr_db) and snr_db > 0:
        return h.with_data(h.data.copy())
    if signal_power == 0.0:
        raise DegenerateInputError("cannot set a finite SNR on a zero-power channel")
    noise_var = signal_power / 10.0 ** (snr_db / 10.0)
    shape = h.data.shape
    noise = math.sqrt(noise_var / 2.0) * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))
    return h.with_data(h.data + noise)


def apply_doppler_rotation(h: CsiTensor, delta_f: float, snapshot_time: float = 1e-3) -> CsiTensor:
    """Rotate every entry by the common phase ``exp(j 2 pi delta_f t)``."""
    turns = delta_f * snapshot_time
    if turns == 0:
        return h.with_data(h.data.copy())
    # exact values at half turns keep magnitudes bit-identical
    if (2.0 * turns) == round(2.0 * turns):
        factor = 1.0 if round(2.0 * turns) % 2 == 0 else -1.0
    else:
        factor = np.exp(2j * np.pi * turns)
    return h.with_data(h.data * factor)


def doppler_rotate_paths(
    paths: Sequence[MultipathComponent], delta_f: float, snapshot_time: float = 1e-3
) -> list[MultipathComponent]:
    """Per-path Doppler: path p rotates at ``delta_f * cos(aoa_p)``."""
    return [
        replace(p, gain=p.gain * np.exp(2j * np.pi * delta_f * math.cos(p.aoa) * snapshot_time))
        for p in paths
    ]


# ----------------------------------------------------------------------------
# dataset generation


def triple_rng(seed: int, cell: int, ue: int, scenario_index: int) -> np.random.Generator:
    """Independent counter-based stream for one (cell, ue, scenario) triple."""
    ss = np.random.SeedSequence(seed, spawn_key=(cell, ue, scenario_index))
    return np.random.Generator(np.random.Philox(ss))


def ue_rng(seed: int, cell: int, ue: int) -> np.random.Generator:
    # spawn keys of length 3 address triples; a 4th element keeps UE streams disjoint
    ss = np.random.SeedSequence(seed, spawn_key=(cell, ue, 2**32 - 1, 0))
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class Dataset:
    """Generated CSI with one record per (cell, ue, scenario) triple."""

    config: DatasetConfig
    data: np.ndarray  # complex64 [n, N_s, N_t, N_r]
    records: list[dict]

    def __len__(self) -> int:
        return self.data.shape[0]

    def __getitem__(self, i: int) -> CsiTensor:
        rec = self.records[i]
        return CsiTensor(self.data[i], rec["cell"], rec["ue"], ScenarioId(rec["scenario"]))

    def __iter__(self) -> Iterator[CsiTensor]:
        for i in range(len(self)):
            yield self[i]

    @property
    def scenarios(self) -> np.ndarray:
        return np.array([r["scenario"] for r in self.records])

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=int)
        return Dataset(self.config, self.data[idx], [self.records[i] for i in idx])


def dataset_triples(config: DatasetConfig) -> list[tuple[int, int, int]]:
    return [
        (c, u, s)
        for c in range(config.cells)
        for u in range(config.ues_per_cell)
        for s in range(len(config.scenarios))
    ]


def generate_triple(
    config: DatasetConfig,
    cell: int,
    ue: int,
    scenario_index: int,
    doppler_override: float | None = None,
) -> tuple[CsiTensor, list[MultipathComponent]]:
    """Generate one channel matrix and the paths it was built from.

    ``doppler_override`` replaces the scenario's Doppler shift in the
    per-path rotation; everything else is drawn from the triple's own
    stream so the result does not depend on generation order.
    """
    scenario = config.scenarios[scenario_index]
    rng = triple_rng(config.seed, cell, ue, scenario_index)
    lo, hi = config.distance_range
    distance = ue_rng(config.seed, cell, ue).uniform(lo, hi)

    paths = sample_paths(scenario, rng)
    delta_f = doppler_shift(scenario.doppler) if doppler_override is None else doppler_override
    if delta_f != 0:
        paths = doppler_rotate_paths(paths, delta_f, config.snapshot_time)
    gain = path_loss(distance, scenario.doppler.carrier_frequency, config.path_loss)
    h = CsiTensor(
        gain * csi_from_paths(paths, config.dims, config.subcarrier_spacing), cell, ue, scenario.id
    )
    snr = config.snr_db
    if config.snr_range_db is not None:
        snr = float(rng.uniform(*config.snr_range_db))
    h = add_awgn(h, snr, rng)
    return h, paths


def _generate_one(args) -> np.ndarray:
    config, (c, u, s) = args
    h, _ = generate_triple(config, c, u, s)
    return h.data.astype(np.complex64)


def iter_dataset(config: DatasetConfig, threads: int = 1, chunk: int = 64) -> Iterator[tuple[dict, np.ndarray]]:
    """Yield ``(record, complex64 matrix)`` in manifest order."""
    triples = dataset_triples(config)
    executor = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for start in range(0, len(triples), chunk):
            block = triples[start : start + chunk]
            jobs = [(config, t) for t in block]
            mats = list(executor.map(_generate_one, jobs)) if executor else [_generate_one(j) for j in jobs]
            for offset, ((c, u, s), m) in enumerate(zip(block, mats)):
                rec = {"index": start + offset, "cell": c, "ue": u, "scenario": config.scenarios[s].id.value}
                yield rec, m
    finally:
        if executor is not None:
            executor.shutdown()


def generate_dataset(config: DatasetConfig, threads: int = 1) -> Dataset:
    records, mats = [], []
    for rec, m in iter_dataset(config, threads=threads):
        records.append(rec)
        mats.append(m)
    return Dataset(config, np.stack(mats), records)

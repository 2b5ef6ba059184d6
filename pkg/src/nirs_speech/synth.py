"""Seeded synthetic fNIRS blocks with known ground truth.

Per trial and channel the noiseless [HbO] is amplitude x (15 s boxcar
convolved with a double-gamma response), [HbR] is a negative fraction of
[HbO]. Physiological noise (Mayer, respiration, cardiac), random-walk drift
and white noise are added in concentration space before the forward
Beer-Lambert map to intensities.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import optimize, stats

from .epoching import LABELS, Event, ProtocolTiming
from .optics import N_CHANNELS, ExtinctionTable, OpticalRecording, _UM_PER_MM

SCENARIOS = ("high-snr", "realistic", "null")


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class HrfParams:
    peak_delay_s: float = 6.0
    undershoot_delay_s: float = 16.0
    peak_dispersion_s: float = 1.0
    undershoot_dispersion_s: float = 1.0
    undershoot_ratio: float = 6.0
    amplitude_scale: float = 1.0

    def validate(self) -> None:
        for name, value in asdict(self).items():
            if not (math.isfinite(value) and value > 0):
                raise SynthError(f"hrf parameter {name} must be positive, got {value}")
        if not self.undershoot_delay_s > self.peak_delay_s:
            raise SynthError("undershoot delay must exceed peak delay")


def _raw_hrf(t, p: HrfParams):
    t = np.asarray(t, dtype=float)
    pos = np.where(t > 0, t, 0.0)
    peak = stats.gamma.pdf(pos, p.peak_delay_s / p.peak_dispersion_s, scale=p.peak_dispersion_s)
    under = stats.gamma.pdf(pos, p.undershoot_delay_s / p.undershoot_dispersion_s, scale=p.undershoot_dispersion_s)
    return np.where(t > 0, peak - under / p.undershoot_ratio, 0.0)


@lru_cache(maxsize=32)
def _hrf_peak(p: HrfParams) -> float:
    grid = np.arange(1, int(p.undershoot_delay_s * 1000) + 1) * 1e-3
    vals = _raw_hrf(grid, p)
    i = int(np.argmax(vals))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
    res = optimize.minimize_scalar(lambda s: -float(_raw_hrf(s, p)), bounds=(lo, hi), method="bounded",
                                   options={"xatol": 1e-10})
    return max(float(vals[i]), -float(res.fun))


def hrf(t_s, params: HrfParams = HrfParams()):
    """Double-gamma response, zero for t <= 0, peak equal to ``amplitude_scale``."""
    params.validate()
    t_arr = np.asarray(t_s, dtype=float)
    if not np.all(np.isfinite(t_arr)):
        raise SynthError("hrf time must be finite")
    out = params.amplitude_scale * _raw_hrf(t_arr, params) / _hrf_peak(params)
    return float(out) if np.ndim(t_s) == 0 else out


def response_kernel(timing: ProtocolTiming = ProtocolTiming(), params: HrfParams = HrfParams(),
                    support_s: float = 32.0) -> np.ndarray:
    """Task boxcar convolved with the sampled response, scaled to unit peak."""
    dt = 1.0 / timing.sample_rate_hz
    h = hrf(np.arange(int(round(support_s * timing.sample_rate_hz)) + 1) * dt, params)
    kernel = np.convolve(np.ones(timing.task_samples), h) * dt
    return kernel / kernel.max()


@dataclass(frozen=True)
class ActivationMap:
    """Response amplitude (uM) per class and channel; absent entries are zero."""

    amplitudes: dict[str, np.ndarray]

    def __post_init__(self):
        amps = {}
        for lab in LABELS:
            a = np.asarray(self.amplitudes.get(lab, np.zeros(N_CHANNELS)), dtype=float)
            if a.shape != (N_CHANNELS,) or not np.all(np.isfinite(a)):
                raise SynthError(f"activation for {lab!r} must be {N_CHANNELS} finite values")
            amps[lab] = a
        unknown = set(self.amplitudes) - set(LABELS)
        if unknown:
            raise SynthError(f"unknown activation classes {sorted(unknown)}")
        object.__setattr__(self, "amplitudes", amps)

    @classmethod
    def from_channels(cls, spec: dict[str, dict]) -> "ActivationMap":
        """Build from ``{label: {channel_id: amplitude}}`` with 1-based channel ids."""
        amps = {}
        for lab, chans in spec.items():
            a = np.zeros(N_CHANNELS)
            for ch, value in chans.items():
                idx = int(ch) - 1
                if not 0 <= idx < N_CHANNELS:
                    raise SynthError(f"channel {ch} out of range")
                a[idx] = float(value)
            amps[lab] = a
        return cls(amps)

    def to_channels(self) -> dict[str, dict[str, float]]:
        return {lab: {str(i + 1): float(v) for i, v in enumerate(a) if v != 0} for lab, a in self.amplitudes.items()}


@dataclass(frozen=True)
class NoiseModel:
    mayer_amp: float = 0.0
    mayer_hz: float = 0.1
    resp_amp: float = 0.0
    resp_hz: float = 0.3
    cardiac_amp: float = 0.0
    cardiac_hz: tuple[float, float] = (0.8, 1.2)
    amplitude_jitter: float = 0.0
    phase_jitter: float = 0.0
    drift_scale: float = 0.0
    white_sigma: float = 0.0

    def validate(self) -> None:
        for name in ("mayer_amp", "resp_amp", "cardiac_amp", "amplitude_jitter", "phase_jitter",
                     "drift_scale", "white_sigma"):
            if not getattr(self, name) >= 0:
                raise SynthError(f"noise parameter {name} must be non-negative")
        if not 0 < self.cardiac_hz[0] <= self.cardiac_hz[1]:
            raise SynthError("cardiac_hz must be an ordered positive range")


@dataclass(frozen=True)
class Scenario:
    name: str
    activation: ActivationMap
    noise: NoiseModel = field(default_factory=NoiseModel)
    hrf: HrfParams = field(default_factory=HrfParams)
    hbr_ratio: float = 1.0 / 3.0
    trial_amplitude_jitter: float = 0.0
    lead_in_s: float = 30.0
    tail_s: float = 30.0
    reference_intensity: tuple[float, float] = (0.5, 1.5)
    version: int = 1
    description: str = ""

    def validate(self) -> None:
        self.noise.validate()
        self.hrf.validate()
        if self.hbr_ratio < 0 or self.trial_amplitude_jitter < 0:
            raise SynthError("hbr_ratio and trial_amplitude_jitter must be non-negative")
        if self.lead_in_s < 0 or self.tail_s < 0:
            raise SynthError("lead-in and tail must be non-negative")
        lo, hi = self.reference_intensity
        if not 0 < lo <= hi:
            raise SynthError("reference intensity range must be positive and ordered")

    def to_dict(self) -> dict:
        noise = asdict(self.noise)
        noise["cardiac_hz"] = list(self.noise.cardiac_hz)
        return {
            "name": self.name,
            "version": self.version,
            "description": self.description,
            "activation_uM": self.activation.to_channels(),
            "noise": noise,
            "hrf": asdict(self.hrf),
            "hbr_ratio": self.hbr_ratio,
            "trial_amplitude_jitter": self.trial_amplitude_jitter,
            "lead_in_s": self.lead_in_s,
            "tail_s": self.tail_s,
            "reference_intensity": list(self.reference_intensity),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "Scenario":
        try:
            noise = dict(payload.get("noise", {}))
            if "cardiac_hz" in noise:
                noise["cardiac_hz"] = tuple(noise["cardiac_hz"])
            sc = cls(
                name=str(payload["name"]),
                version=int(payload.get("version", 1)),
                description=str(payload.get("description", "")),
                activation=ActivationMap.from_channels(payload.get("activation_uM", {})),
                noise=NoiseModel(**noise),
                hrf=HrfParams(**payload.get("hrf", {})),
                hbr_ratio=float(payload.get("hbr_ratio", 1.0 / 3.0)),
                trial_amplitude_jitter=float(payload.get("trial_amplitude_jitter", 0.0)),
                lead_in_s=float(payload.get("lead_in_s", 30.0)),
                tail_s=float(payload.get("tail_s", 30.0)),
                reference_intensity=tuple(payload.get("reference_intensity", (0.5, 1.5))),
            )
        except (KeyError, TypeError) as exc:
            raise SynthError(f"invalid scenario config: {exc}") from exc
        sc.validate()
        return sc


def load_scenario(name_or_path: str | Path) -> Scenario:
    """Load a bundled scenario by name or any scenario JSON file by path."""
    if str(name_or_path) in SCENARIOS:
        text = resources.files("nirs_speech.data").joinpath("scenarios", f"{name_or_path}.json").read_text("utf-8")
    else:
        path = Path(name_or_path)
        if not path.is_file():
            raise SynthError(f"unknown scenario {str(name_or_path)!r} (bundled: {', '.join(SCENARIOS)})")
        text = path.read_text(encoding="utf-8")
    return Scenario.from_dict(json.loads(text))


def mbll_forward(hbo: np.ndarray, hbr: np.ndarray, table: ExtinctionTable) -> np.ndarray:
    """Concentrations (uM) to dOD at both wavelengths, shape (n_samples, n_channels, 2)."""
    hbo = np.asarray(hbo, dtype=float)
    hbr = np.asarray(hbr, dtype=float)
    if hbo.shape != hbr.shape:
        raise SynthError(f"hbo shape {hbo.shape} differs from hbr shape {hbr.shape}")
    conc = np.stack([hbo, hbr], axis=-1) / _UM_PER_MM
    return conc @ table.path_matrix().T


def _rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys)))


# spawn-key namespaces
_KEY_TRIAL, _KEY_NOISE, _KEY_REFERENCE = 1, 2, 3


def physiological_noise(n_samples: int, noise: NoiseModel, rng: np.random.Generator,
                        sample_rate_hz: float = 10.0, n_channels: int = N_CHANNELS) -> np.ndarray:
    """Jittered sinusoids + random-walk drift + white noise, (n_samples, n_channels)."""
    dt = 1.0 / sample_rate_hz
    t = np.arange(n_samples)[:, None] * dt
    out = np.zeros((n_samples, n_channels))
    for amp, (f_lo, f_hi) in (
        (noise.mayer_amp, (noise.mayer_hz, noise.mayer_hz)),
        (noise.resp_amp, (noise.resp_hz, noise.resp_hz)),
        (noise.cardiac_amp, noise.cardiac_hz),
    ):
        amps = amp * np.clip(1.0 + noise.amplitude_jitter * rng.standard_normal(n_channels), 0.0, None)
        freqs = rng.uniform(f_lo, f_hi, n_channels)
        phase0 = rng.uniform(0.0, 2 * np.pi, n_channels)
        walk = np.cumsum(rng.standard_normal((n_samples, n_channels)) * noise.phase_jitter * math.sqrt(dt), axis=0)
        out += amps * np.sin(2 * np.pi * freqs * t + phase0 + walk)
    out += np.cumsum(rng.standard_normal((n_samples, n_channels)) * noise.drift_scale * math.sqrt(dt), axis=0)
    out += noise.white_sigma * rng.standard_normal((n_samples, n_channels))
    return out


@dataclass(frozen=True)
class TrialTruth:
    session: int
    block: int
    trial: int
    label: str
    onset_sample: int
    task_onset_sample: int
    amplitudes_uM: np.ndarray


@dataclass(frozen=True)
class GroundTruthLog:
    seed: int
    session: int
    block: int
    n_samples: int
    kernel: np.ndarray
    trials: tuple[TrialTruth, ...]
    scenario: dict
    table: dict
    timing: dict

    def noiseless_hbo(self) -> np.ndarray:
        return _superpose(self.trials, self.kernel, self.n_samples)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "session": self.session,
            "block": self.block,
            "n_samples": self.n_samples,
            "kernel": self.kernel.tolist(),
            "scenario": self.scenario,
            "extinction_table": self.table,
            "timing": self.timing,
            "trials": [
                {
                    "session": tr.session,
                    "block": tr.block,
                    "trial": tr.trial,
                    "label": tr.label,
                    "onset_sample": tr.onset_sample,
                    "task_onset_sample": tr.task_onset_sample,
                    "amplitudes_uM": tr.amplitudes_uM.tolist(),
                }
                for tr in self.trials
            ],
        }


def _superpose(trials: Sequence[TrialTruth], kernel: np.ndarray, n_samples: int) -> np.ndarray:
    out = np.zeros((n_samples, N_CHANNELS))
    for tr in trials:
        seg = kernel[: max(0, n_samples - tr.task_onset_sample)]
        out[tr.task_onset_sample : tr.task_onset_sample + len(seg)] += np.outer(seg, tr.amplitudes_uM)
    return out


@dataclass(frozen=True)
class SyntheticBlock:
    plan: object
    recording: OpticalRecording
    events: tuple[Event, ...]
    truth: GroundTruthLog
    hbo_signal: np.ndarray
    hbo_noise: np.ndarray


def generate_block(plan, scenario: Scenario, seed: int, timing: ProtocolTiming = ProtocolTiming(),
                   table: ExtinctionTable | None = None) -> SyntheticBlock:
    """One continuous block recording; ``plan`` needs ``session``, ``block`` and ``labels``."""
    scenario.validate()
    table = table or ExtinctionTable.default()
    fs = timing.sample_rate_hz
    lead = int(round(scenario.lead_in_s * fs))
    tail = int(round(scenario.tail_s * fs))
    labels = tuple(plan.labels)
    if not labels or any(lab not in LABELS for lab in labels):
        raise SynthError(f"block plan has invalid labels {labels}")
    n_samples = lead + len(labels) * timing.trial_samples + tail

    kernel = response_kernel(timing, scenario.hrf)
    events, trials = [], []
    for i, lab in enumerate(labels):
        onset = lead + i * timing.trial_samples
        rng = _rng(seed, _KEY_TRIAL, plan.session, plan.block, i + 1)
        gain = np.clip(1.0 + scenario.trial_amplitude_jitter * rng.standard_normal(N_CHANNELS), 0.0, None)
        events.append(Event(onset, lab, plan.session, plan.block, i + 1))
        trials.append(TrialTruth(plan.session, plan.block, i + 1, lab, onset, onset + timing.task_offset,
                                 scenario.activation.amplitudes[lab] * gain))

    signal_hbo = _superpose(trials, kernel, n_samples)
    noise_hbo = physiological_noise(n_samples, scenario.noise, _rng(seed, _KEY_NOISE, plan.session, plan.block), fs)
    hbo = signal_hbo + noise_hbo
    hbr = -scenario.hbr_ratio * hbo

    ref_rng = _rng(seed, _KEY_REFERENCE, plan.session)
    reference = ref_rng.uniform(*scenario.reference_intensity, size=(N_CHANNELS, 2))
    intensities = reference * 10.0 ** (-mbll_forward(hbo, hbr, table))

    truth = GroundTruthLog(
        seed=int(seed),
        session=plan.session,
        block=plan.block,
        n_samples=n_samples,
        kernel=kernel,
        trials=tuple(trials),
        scenario=scenario.to_dict(),
        table=table.to_dict(),
        timing=asdict(timing),
    )
    return SyntheticBlock(plan, OpticalRecording(intensities, reference, fs), tuple(events), truth, signal_hbo, noise_hbo)


def generate_session(schedule: Sequence, scenario: Scenario, seed: int, timing: ProtocolTiming = ProtocolTiming(),
                     table: ExtinctionTable | None = None) -> list[SyntheticBlock]:
    """Generate every block of ``schedule``; each block has its own derived seed streams."""
    return [generate_block(plan, scenario, seed, timing, table) for plan in schedule]


def with_activation(scenario: Scenario, activation: ActivationMap, name: str | None = None) -> Scenario:
    return replace(scenario, activation=activation, name=name or scenario.name)

"""Raw intensities to filtered hemoglobin concentration changes.

Chain: intensity -> optical density change -> modified Beer-Lambert
inversion (uM) -> causal Chebyshev type II low-pass.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy import signal

from . import _io

SAMPLE_RATE_HZ = 10.0
N_CHANNELS = 44
WAVELENGTHS_NM = (695, 830)
SPECIES = ("HbO", "HbR")
MAX_CONDITION = 1e12

# epsilon is per mM; concentrations are reported in uM
_UM_PER_MM = 1000.0


class OpticsError(ValueError):
    """Invalid optical data (nonpositive intensity, shape mismatch)."""


class ConfigurationError(ValueError):
    """Unusable extinction table or filter specification."""


@dataclass(frozen=True)
class ExtinctionTable:
    """Molar extinction coefficients and optical path configuration.

    ``epsilon[w, s]`` is the decadic extinction of species ``s`` (HbO, HbR)
    at wavelength ``w`` (695, 830 nm) in 1/(mM*mm).
    """

    epsilon: np.ndarray
    source_distance_mm: float = 30.0
    dpf: tuple[float, float] = (6.51, 5.86)
    note: str = ""

    def __post_init__(self):
        eps = np.array(self.epsilon, dtype=float)
        if eps.shape != (2, 2) or not np.all(np.isfinite(eps)):
            raise ConfigurationError(f"epsilon must be a finite 2x2 matrix, got shape {eps.shape}")
        if not self.source_distance_mm > 0:
            raise ConfigurationError("source_distance_mm must be positive")
        dpf = tuple(float(v) for v in self.dpf)
        if len(dpf) != 2 or not all(v > 0 for v in dpf):
            raise ConfigurationError("dpf needs one positive value per wavelength")
        cond = np.linalg.cond(eps)
        if not np.isfinite(cond) or cond > MAX_CONDITION:
            raise ConfigurationError(f"extinction matrix is singular or ill-conditioned (cond={cond:.3g})")
        eps.setflags(write=False)
        object.__setattr__(self, "epsilon", eps)
        object.__setattr__(self, "dpf", dpf)
        object.__setattr__(self, "source_distance_mm", float(self.source_distance_mm))

    def path_matrix(self) -> np.ndarray:
        """Matrix mapping (dHbO, dHbR) in mM to dOD at (695, 830) nm."""
        return self.epsilon * (self.source_distance_mm * np.asarray(self.dpf))[:, None]

    def to_dict(self) -> dict:
        return {
            "wavelengths_nm": list(WAVELENGTHS_NM),
            "species": list(SPECIES),
            "epsilon_per_mM_per_mm": self.epsilon.tolist(),
            "source_distance_mm": self.source_distance_mm,
            "dpf": list(self.dpf),
            "note": self.note,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "ExtinctionTable":
        try:
            return cls(
                epsilon=np.asarray(payload["epsilon_per_mM_per_mm"], dtype=float),
                source_distance_mm=float(payload["source_distance_mm"]),
                dpf=tuple(payload["dpf"]),
                note=str(payload.get("note", "")),
            )
        except KeyError as exc:
            raise ConfigurationError(f"extinction table missing field {exc}") from exc

    @classmethod
    def from_file(cls, path: str | Path) -> "ExtinctionTable":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    @classmethod
    def default(cls) -> "ExtinctionTable":
        text = resources.files("nirs_speech.data").joinpath("extinction_default.json").read_text("utf-8")
        return cls.from_dict(json.loads(text))


def load_extinction(path: str | Path | None = None) -> ExtinctionTable:
    return ExtinctionTable.default() if path is None else ExtinctionTable.from_file(path)


@dataclass(frozen=True)
class OpticalRecording:
    """Dual-wavelength intensities, ``samples[t, channel, wavelength]``."""

    samples: np.ndarray
    reference: np.ndarray
    sample_rate_hz: float = SAMPLE_RATE_HZ
    wavelengths_nm: tuple[int, int] = WAVELENGTHS_NM

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=float)
        reference = np.asarray(self.reference, dtype=float)
        if samples.ndim != 3 or samples.shape[2] != 2:
            raise OpticsError(f"samples must be (n_samples, n_channels, 2), got {samples.shape}")
        if reference.shape != samples.shape[1:]:
            raise OpticsError(f"reference shape {reference.shape} does not match {samples.shape[1:]}")
        if not self.sample_rate_hz > 0:
            raise OpticsError("sample rate must be positive")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "reference", reference)

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def n_channels(self) -> int:
        return self.samples.shape[1]

    def columns(self) -> list[str]:
        return [f"ch{c + 1:02d}_{wl}" for c in range(self.n_channels) for wl in self.wavelengths_nm]

    def to_csv_text(self) -> str:
        flat = self.samples.reshape(self.n_samples, -1)
        ref = ",".join(repr(float(v)) for v in self.reference.reshape(-1))
        lines = [f"# reference_intensities,{ref}", ",".join(["t"] + self.columns())]
        for i, row in enumerate(flat):
            lines.append(f"{i / self.sample_rate_hz!r}," + ",".join(map(repr, row.tolist())))
        return "\n".join(lines) + "\n"

    def write_csv(self, path: str | Path) -> Path:
        return _io.atomic_write_text(path, self.to_csv_text())

    @classmethod
    def read_csv(cls, path: str | Path, sample_rate_hz: float = SAMPLE_RATE_HZ) -> "OpticalRecording":
        with open(path, encoding="utf-8") as handle:
            first = handle.readline().rstrip("\n")
            header = handle.readline().rstrip("\n").split(",")
            body = np.loadtxt(handle, delimiter=",", ndmin=2)
        if not first.startswith("# reference_intensities,"):
            raise OpticsError(f"{path}: missing '# reference_intensities' header line")
        ref = np.array([float(v) for v in first.split(",")[1:]])
        if header[0] != "t" or (len(header) - 1) % 2:
            raise OpticsError(f"{path}: header must be t followed by channel/wavelength pairs")
        n_ch = (len(header) - 1) // 2
        rec = cls(body[:, 1:].reshape(-1, n_ch, 2), ref.reshape(n_ch, 2), sample_rate_hz)
        if header[1:] != rec.columns():
            raise OpticsError(f"{path}: unexpected column names")
        return rec


@dataclass(frozen=True)
class HemoSeries:
    """Concentration changes in uM, ``hbo[t, channel]``."""

    hbo: np.ndarray
    hbr: np.ndarray
    sample_rate_hz: float = SAMPLE_RATE_HZ

    def __post_init__(self):
        hbo = np.asarray(self.hbo, dtype=float)
        hbr = np.asarray(self.hbr, dtype=float)
        if hbo.ndim != 2 or hbo.shape != hbr.shape:
            raise OpticsError(f"hbo/hbr must share a 2-D shape, got {hbo.shape} and {hbr.shape}")
        object.__setattr__(self, "hbo", hbo)
        object.__setattr__(self, "hbr", hbr)

    @property
    def n_samples(self) -> int:
        return self.hbo.shape[0]

    @property
    def n_channels(self) -> int:
        return self.hbo.shape[1]


def optical_density(recording: OpticalRecording) -> np.ndarray:
    """dOD = -log10(I / I0), shaped like ``recording.samples``."""
    bad_ref = np.argwhere(~(recording.reference > 0))
    if bad_ref.size:
        ch, wl = bad_ref[0]
        raise OpticsError(
            f"nonpositive reference intensity at channel {ch + 1}, {recording.wavelengths_nm[wl]} nm"
        )
    bad = np.argwhere(~(recording.samples > 0))
    if bad.size:
        t, ch, wl = bad[0]
        raise OpticsError(
            f"nonpositive intensity at sample {t}, channel {ch + 1}, {recording.wavelengths_nm[wl]} nm"
            f" ({len(bad)} offending values)"
        )
    return -np.log10(recording.samples / recording.reference)


def mbll_invert(od: np.ndarray, table: ExtinctionTable, sample_rate_hz: float = SAMPLE_RATE_HZ) -> HemoSeries:
    """Solve dOD(w) = [eps(w,HbO) dHbO + eps(w,HbR) dHbR] * d * DPF(w) per sample.

    ``od`` has shape (n_samples, n_channels, 2). Concentrations come back in uM.
    """
    od = np.asarray(od, dtype=float)
    if od.ndim != 3 or od.shape[2] != 2:
        raise OpticsError(f"od must be (n_samples, n_channels, 2), got {od.shape}")
    conc_mm = np.linalg.solve(table.path_matrix(), od.reshape(-1, 2).T).T
    conc = (conc_mm * _UM_PER_MM).reshape(od.shape)
    return HemoSeries(conc[..., 0], conc[..., 1], sample_rate_hz)


@dataclass(frozen=True)
class FilterSpec:
    """Low-pass requirements; passband values are descriptive only."""

    order: int = 3
    stopband_hz: float = 0.5
    stopband_attenuation_db: float = 50.0
    passband_hz: float = 0.1
    passband_ripple_db: float = 0.1
    sample_rate_hz: float = SAMPLE_RATE_HZ

    def validate(self) -> None:
        nyquist = self.sample_rate_hz / 2
        problems = []
        if int(self.order) != self.order or self.order < 1:
            problems.append(f"order must be an integer >= 1, got {self.order}")
        if not 0 < self.passband_hz < self.stopband_hz:
            problems.append("need 0 < passband_hz < stopband_hz")
        if not self.stopband_hz < nyquist:
            problems.append(f"stopband edge {self.stopband_hz} Hz is not below Nyquist ({nyquist} Hz)")
        if not self.stopband_attenuation_db > 0:
            problems.append("stopband attenuation must be positive")
        if problems:
            raise ConfigurationError("; ".join(problems))


@dataclass(frozen=True)
class FilterRealization:
    """Recursive filter b/a with zero initial state, plus its z-plane description."""

    b: np.ndarray
    a: np.ndarray
    zeros: np.ndarray
    poles: np.ndarray
    gain: float
    spec: FilterSpec = field(default_factory=FilterSpec)

    @property
    def sample_rate_hz(self) -> float:
        return self.spec.sample_rate_hz

    def is_stable(self) -> bool:
        return bool(np.all(np.abs(self.poles) < 1.0))


def _cheby2_analog_prototype(order: int, attenuation_db: float):
    # stopband edge normalised to 1 rad/s
    eps = 1.0 / math.sqrt(10 ** (attenuation_db / 10) - 1)
    mu = math.asinh(1.0 / eps) / order
    theta = np.pi * (2 * np.arange(1, order + 1) - 1) / (2 * order)
    # Chebyshev I poles for the inverse response, then reciprocated
    cheb1 = -math.sinh(mu) * np.sin(theta) + 1j * math.cosh(mu) * np.cos(theta)
    poles = 1.0 / cheb1
    cos_t = np.cos(theta)
    finite = np.abs(cos_t) > 1e-12  # the middle zero of an odd order lies at infinity
    zeros = 1j / cos_t[finite]
    gain = float(np.real(np.prod(-poles) / np.prod(-zeros)))
    return zeros, poles, gain


def design_lowpass(spec: FilterSpec = FilterSpec()) -> FilterRealization:
    """Chebyshev type II low-pass from order, stopband edge and attenuation.

    Analog prototype, stopband edge prewarped for the bilinear transform,
    then gain renormalised so the response at DC is exactly one.
    """
    spec.validate()
    fs = spec.sample_rate_hz
    z_a, p_a, k_a = _cheby2_analog_prototype(int(spec.order), spec.stopband_attenuation_db)
    warped = 2 * fs * math.tan(math.pi * spec.stopband_hz / fs)
    z_a, p_a = z_a * warped, p_a * warped
    k_a *= warped ** (len(p_a) - len(z_a))

    two_fs = 2 * fs
    z_d = (two_fs + z_a) / (two_fs - z_a)
    p_d = (two_fs + p_a) / (two_fs - p_a)
    z_d = np.concatenate([z_d, -np.ones(len(p_a) - len(z_a))])
    k_d = k_a * np.real(np.prod(two_fs - z_a) / np.prod(two_fs - p_a))

    b = np.real(k_d * np.poly(z_d))
    a = np.real(np.poly(p_d))
    dc = b.sum() / a.sum()
    b = b / dc
    filt = FilterRealization(b=b, a=a, zeros=z_d, poles=p_d, gain=float(k_d / dc), spec=spec)
    if not filt.is_stable():
        raise ConfigurationError("designed filter is unstable")
    return filt


def frequency_response(filt: FilterRealization, freqs_hz) -> np.ndarray:
    """Complex response H(e^{jw}) evaluated directly from b/a."""
    freqs_hz = np.asarray(freqs_hz, dtype=float)
    z_inv = np.exp(-2j * np.pi * freqs_hz / filt.sample_rate_hz)
    return np.polyval(filt.b[::-1], z_inv) / np.polyval(filt.a[::-1], z_inv)


def apply_filter(filt: FilterRealization, series: HemoSeries, n_channels: int = N_CHANNELS) -> HemoSeries:
    """Causal, forward-only filtering of every channel from zero initial state."""
    if series.n_samples == 0:
        raise OpticsError("cannot filter an empty series")
    if series.n_channels != n_channels:
        raise OpticsError(f"series has {series.n_channels} channels, layout expects {n_channels}")
    if not math.isclose(series.sample_rate_hz, filt.sample_rate_hz):
        raise OpticsError("series and filter sample rates differ")
    hbo = signal.lfilter(filt.b, filt.a, series.hbo, axis=0)
    hbr = signal.lfilter(filt.b, filt.a, series.hbr, axis=0)
    return HemoSeries(hbo, hbr, series.sample_rate_hz)


def filter_report(filt: FilterRealization, step_hz: float = 0.01) -> tuple[list[tuple[float, float, float]], dict]:
    """Response table over [0, Nyquist] and a summary of the achieved specification."""
    nyquist = filt.sample_rate_hz / 2
    n = int(round(nyquist / step_hz))
    freqs = np.round(np.arange(n + 1) * step_hz, 10)
    h = frequency_response(filt, freqs)
    mag = np.abs(h)
    with np.errstate(divide="ignore"):
        mag_db = 20 * np.log10(mag)
    phase_deg = np.degrees(np.angle(h))
    rows = [(float(f), float(m), float(p)) for f, m, p in zip(freqs, mag_db, phase_deg)]

    stop = freqs >= filt.spec.stopband_hz - 1e-12
    pass_h = frequency_response(filt, [0.0, filt.spec.passband_hz])
    summary = {
        "order": int(filt.spec.order),
        "stopband_hz": filt.spec.stopband_hz,
        "stopband_attenuation_db_required": filt.spec.stopband_attenuation_db,
        "passband_hz": filt.spec.passband_hz,
        "passband_ripple_db_nominal": filt.spec.passband_ripple_db,
        "sample_rate_hz": filt.sample_rate_hz,
        "dc_gain_db": float(20 * np.log10(abs(pass_h[0]))),
        "passband_droop_db": float(-20 * np.log10(abs(pass_h[1]))),
        "min_stopband_attenuation_db": float(-mag_db[stop].max()),
        "max_stopband_magnitude": float(mag[stop].max()),
        "b": filt.b.tolist(),
        "a": filt.a.tolist(),
        "stable": filt.is_stable(),
        "causal": True,
    }
    return rows, summary

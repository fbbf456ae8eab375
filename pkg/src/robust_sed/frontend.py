"""Time-frequency frontend: mel spectrogram, log compression and PCEN.

All matrices are frame-major, i.e. ``values[t, f]`` with ``t`` the frame index
and ``f`` the mel band index.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import lfilter

#: Amplitude gain applied to [-1, 1) waveforms before the STFT, so that energies
#: live on the scale the PCEN presets were tuned for (32-bit integer range).
PCM32_SCALE = float(2**31)

LOG_FLOOR = 1e-10


class TFKind(str, enum.Enum):
    ENERGY = "energy"
    LOGMEL = "logmel"
    PCEN = "pcen"


@dataclass
class Waveform:
    """Mono audio signal with amplitudes nominally in [-1, 1)."""

    samples: np.ndarray
    sample_rate: int = 22050

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"expected a mono 1-D signal, got shape {self.samples.shape}")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class SpectrogramConfig:
    sample_rate: int = 22050
    win_length: int = 256
    hop_length: int = 32
    fft_length: int = 1024
    n_mels: int = 128
    fmin: float = 2000.0
    fmax: float = 11025.0
    amplitude_scale: float = PCM32_SCALE

    def __post_init__(self):
        if self.fft_length < self.win_length:
            raise ValueError("fft_length must be >= win_length")
        if not 0 < self.fmin < self.fmax <= self.sample_rate / 2:
            raise ValueError(
                f"need 0 < fmin < fmax <= Nyquist, got fmin={self.fmin}, fmax={self.fmax}"
            )
        if self.n_mels < 2:
            raise ValueError("n_mels must be >= 2")
        if self.hop_length <= 0 or self.win_length <= 0:
            raise ValueError("hop_length and win_length must be positive")

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop_length

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


#: Reduced frontend used by the desk-scale network geometry (52 frames x 64 bands
#: per 150 ms patch).
DESK_SPECTROGRAM = SpectrogramConfig(hop_length=64, n_mels=64)


@dataclass
class TimeFrequencyMatrix:
    values: np.ndarray
    sample_rate: int
    hop_length: int
    band_edges: np.ndarray
    kind: TFKind = TFKind.ENERGY
    win_length: int = 256
    metadata: dict = field(default_factory=dict)

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop_length

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_bands(self) -> int:
        return self.values.shape[1]

    def frame_centers(self) -> np.ndarray:
        """Time in seconds of the center of each analysis window."""
        idx = np.arange(self.n_frames)
        return (idx * self.hop_length + self.win_length / 2) / self.sample_rate

    def with_values(self, values, kind=None, **meta) -> "TimeFrequencyMatrix":
        metadata = dict(self.metadata)
        metadata.update(meta)
        return replace(self, values=values, kind=kind or self.kind, metadata=metadata)


@dataclass(frozen=True)
class PcenParams:
    """Per-channel energy normalization constants.

    ``T`` is the smoother time constant in seconds; ``alpha`` the gain
    exponent, ``delta`` the bias, ``r`` the root exponent, ``eps`` the floor.
    """

    T: float
    alpha: float
    delta: float
    r: float
    eps: float = 1e-6

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("T must be positive")
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must be in (0, 1]")
        if self.delta < 0:
            raise ValueError("delta must be nonnegative")
        if not 0 < self.r <= 1:
            raise ValueError("r must be in (0, 1]")
        if not self.eps > 0:
            raise ValueError("eps must be positive")

    def to_dict(self) -> dict:
        return {"T": self.T, "alpha": self.alpha, "delta": self.delta, "r": self.r, "eps": self.eps}


OUTDOOR = PcenParams(T=0.060, alpha=0.8, delta=10.0, r=0.25, eps=1e-6)
INDOOR = PcenParams(T=0.400, alpha=0.98, delta=2.0, r=0.5, eps=1e-6)
PCEN_PRESETS = {"outdoor": OUTDOOR, "indoor": INDOOR}


# -- mel filterbank -----------------------------------------------------------

_F_SP = 200.0 / 3
_MIN_LOG_HZ = 1000.0
_MIN_LOG_MEL = _MIN_LOG_HZ / _F_SP
_LOGSTEP = np.log(6.4) / 27.0


def hz_to_mel(freq):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    freq = np.asarray(freq, dtype=np.float64)
    mel = freq / _F_SP
    log_region = freq >= _MIN_LOG_HZ
    return np.where(
        log_region,
        _MIN_LOG_MEL + np.log(np.maximum(freq, 1e-300) / _MIN_LOG_HZ) / _LOGSTEP,
        mel,
    )


def mel_to_hz(mel):
    mel = np.asarray(mel, dtype=np.float64)
    return np.where(
        mel >= _MIN_LOG_MEL,
        _MIN_LOG_HZ * np.exp(_LOGSTEP * (mel - _MIN_LOG_MEL)),
        _F_SP * mel,
    )


def mel_frequencies(cfg: SpectrogramConfig) -> np.ndarray:
    """The ``n_mels + 2`` filter corner frequencies, equally spaced in mels."""
    mels = np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2)
    return mel_to_hz(mels)


def mel_band_centers(cfg: SpectrogramConfig) -> np.ndarray:
    return mel_frequencies(cfg)[1:-1]


def mel_filterbank(cfg: SpectrogramConfig) -> np.ndarray:
    """Triangular, area-normalized filters of shape ``(n_mels, fft_length // 2 + 1)``."""
    fft_freqs = np.arange(cfg.fft_length // 2 + 1) * cfg.sample_rate / cfg.fft_length
    corners = mel_frequencies(cfg)
    widths = np.diff(corners)
    ramps = corners[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / widths[:-1, None]
    upper = ramps[2:] / widths[1:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    weights *= (2.0 / (corners[2:] - corners[:-2]))[:, None]
    return weights


def _band_edges(cfg: SpectrogramConfig) -> np.ndarray:
    corners = mel_frequencies(cfg)
    return np.stack([corners[:-2], corners[2:]], axis=1)


# -- spectrogram ---------------------------------------------------------------

def n_frames_for(n_samples: int, win_length: int, hop_length: int) -> int:
    if n_samples < win_length:
        return 0
    return (n_samples - win_length) // hop_length + 1


def _as_samples(w) -> tuple[np.ndarray, int | None]:
    if isinstance(w, Waveform):
        return w.samples, w.sample_rate
    return np.asarray(w, dtype=np.float64), None


def melspectrogram(
    w: Waveform | np.ndarray,
    cfg: SpectrogramConfig = SpectrogramConfig(),
    chunk_frames: int = 8192,
) -> TimeFrequencyMatrix:
    """Mel-frequency projection of the STFT squared modulus.

    Frames start at sample 0 and advance by ``hop_length`` without padding, so
    the frame count is ``floor((len - win) / hop) + 1``.
    """
    x, sr = _as_samples(w)
    if sr is not None and sr != cfg.sample_rate:
        raise ValueError(
            f"sample rate mismatch: waveform has {sr} Hz, config expects {cfg.sample_rate} Hz"
        )
    if x.ndim != 1:
        raise ValueError("expected a mono signal")
    if len(x) < cfg.win_length:
        raise ValueError(
            f"input too short: {len(x)} samples < one window of {cfg.win_length}"
        )
    if not np.all(np.isfinite(x)):
        raise ValueError("waveform contains non-finite samples")

    fb = mel_filterbank(cfg)
    support = np.flatnonzero(fb.any(axis=0))
    lo, hi = support[0], support[-1] + 1
    fb_t = np.ascontiguousarray(fb[:, lo:hi].T)

    window = np.hanning(cfg.win_length + 1)[:-1] * cfg.amplitude_scale
    frames = sliding_window_view(x, cfg.win_length)[:: cfg.hop_length]
    out = np.empty((frames.shape[0], cfg.n_mels), dtype=np.float64)
    for start in range(0, frames.shape[0], chunk_frames):
        block = frames[start : start + chunk_frames] * window
        spec = np.fft.rfft(block, n=cfg.fft_length, axis=1)[:, lo:hi]
        power = spec.real**2 + spec.imag**2
        np.matmul(power, fb_t, out=out[start : start + chunk_frames])
    np.maximum(out, 0.0, out=out)
    return TimeFrequencyMatrix(
        values=out,
        sample_rate=cfg.sample_rate,
        hop_length=cfg.hop_length,
        band_edges=_band_edges(cfg),
        kind=TFKind.ENERGY,
        win_length=cfg.win_length,
        metadata={"mel_scale": "slaney", "mel_norm": "slaney", "window": "hann",
                  "spectrogram": cfg.to_dict()},
    )


def _require_energy(E: TimeFrequencyMatrix):
    if E.kind != TFKind.ENERGY:
        raise ValueError(f"expected an ENERGY matrix, got {E.kind.value}")


def logmelspec(E: TimeFrequencyMatrix) -> TimeFrequencyMatrix:
    _require_energy(E)
    return E.with_values(np.log10(E.values + LOG_FLOOR), kind=TFKind.LOGMEL)


def smoothing_coefficient(T: float, hop_length: int, sample_rate: int) -> float:
    return 1.0 - np.exp(-hop_length / (sample_rate * T))


def ema_smooth(E: TimeFrequencyMatrix, T: float) -> TimeFrequencyMatrix:
    """Causal first-order low-pass per band, initialized on the first frame."""
    _require_energy(E)
    if not T > 0:
        raise ValueError("T must be positive")
    s = smoothing_coefficient(T, E.hop_length, E.sample_rate)
    M = _ema(E.values, s, E.values[:1] if len(E.values) else None)
    return E.with_values(M)


def _ema(x: np.ndarray, s: float, prev: np.ndarray | None) -> np.ndarray:
    if len(x) == 0:
        return x.copy()
    # lfilter state z0 = (1 - s) * M[-1]; choosing M[-1] = prev.
    zi = ((1.0 - s) * np.asarray(prev, dtype=np.float64)).reshape(1, -1)
    y, _ = lfilter([s], [1.0, s - 1.0], x, axis=0, zi=zi)
    return y


def _pcen_core(E: np.ndarray, M: np.ndarray, p: PcenParams) -> np.ndarray:
    gain = p.eps + M**p.alpha
    return (E / gain + p.delta) ** p.r - p.delta**p.r


def pcen(E: TimeFrequencyMatrix, p: PcenParams = OUTDOOR) -> TimeFrequencyMatrix:
    """Per-channel energy normalization: ``(E / (eps + M**alpha) + delta)**r - delta**r``.

    ``M`` is :func:`ema_smooth` of ``E`` with time constant ``p.T``.
    """
    _require_energy(E)
    M = ema_smooth(E, p.T).values
    return E.with_values(_pcen_core(E.values, M, p), kind=TFKind.PCEN, pcen=p.to_dict())


class PcenStream:
    """Streaming PCEN over consecutive ENERGY chunks.

    The smoother state is carried across calls, so concatenating the outputs of
    successive :meth:`process` calls reproduces :func:`pcen` on the full matrix.
    """

    def __init__(self, params: PcenParams, hop_length: int, sample_rate: int):
        self.params = params
        self.s = smoothing_coefficient(params.T, hop_length, sample_rate)
        self.state: np.ndarray | None = None

    def process(self, chunk: np.ndarray) -> np.ndarray:
        chunk = np.asarray(chunk, dtype=np.float64)
        if len(chunk) == 0:
            return chunk.copy()
        prev = chunk[0] if self.state is None else self.state
        M = _ema(chunk, self.s, prev)
        self.state = M[-1].copy()
        return _pcen_core(chunk, M, self.params)

    def reset(self):
        self.state = None


# -- diagnostics ---------------------------------------------------------------

HIST_RANGE = (-4.0, 4.0)
HIST_BINS = 80


@dataclass
class DistributionStats:
    """Shape statistics of globally standardized magnitudes.

    ``mean`` and ``variance`` describe the raw values before standardization;
    the remaining fields are computed after it.
    """

    mean: float
    variance: float
    skewness: float
    excess_kurtosis: float
    histogram: tuple[np.ndarray, np.ndarray]
    mode_location: float
    count: int


def _flatten(X) -> np.ndarray:
    if isinstance(X, TimeFrequencyMatrix):
        return X.values.ravel()
    if isinstance(X, np.ndarray):
        return X.ravel()
    parts = [_flatten(x) for x in X]
    return np.concatenate(parts) if parts else np.empty(0)


def pooled_moments(X: Sequence) -> tuple[float, float]:
    """Mean and standard deviation over a pooled set of matrices."""
    v = _flatten(X)
    return float(v.mean()), float(v.std())


def distribution_stats(X, loc: float | None = None, scale: float | None = None) -> DistributionStats:
    """Moments and histogram of standardized magnitudes.

    By default ``X`` (a matrix, array, or sequence thereof) is standardized with
    its own pooled mean and standard deviation. Passing ``loc`` and ``scale``
    standardizes with externally pooled moments instead, which is how several
    sensors are put on a common axis. Values beyond the histogram range are
    counted in the edge bins.
    """
    v = _flatten(X).astype(np.float64)
    if v.size == 0:
        raise ValueError("empty input")
    mean = float(v.mean())
    var = float(v.var())
    if var <= 0 or not np.isfinite(var):
        raise ValueError("degenerate distribution: zero variance")
    loc = mean if loc is None else loc
    scale = np.sqrt(var) if scale is None else scale
    if not scale > 0:
        raise ValueError("degenerate distribution: zero scale")
    z = (v - loc) / scale
    c = z - z.mean()
    m2 = np.mean(c**2)
    skew = float(np.mean(c**3) / m2**1.5)
    kurt = float(np.mean(c**4) / m2**2 - 3.0)
    edges = np.linspace(HIST_RANGE[0], HIST_RANGE[1], HIST_BINS + 1)
    clipped = np.clip(z, HIST_RANGE[0], HIST_RANGE[1])
    counts, _ = np.histogram(clipped, bins=edges)
    k = int(np.argmax(counts))
    mode = float(0.5 * (edges[k] + edges[k + 1]))
    return DistributionStats(mean, var, skew, kurt, (edges, counts), mode, int(v.size))

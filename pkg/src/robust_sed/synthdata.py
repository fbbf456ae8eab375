"""Synthetic multi-sensor night recordings with known call timestamps.

Each sensor hears shaped colored noise, amplitude-modulated insect tones at a
fundamental and its second harmonic, and optional tonal clutter. The whole
background fades by a per-sensor number of dB over the night. Frequency-modulated
chirps stand in for flight calls, in a low (2-5 kHz) or high (5-10 kHz) band,
with call density increasing towards the end of the recording.
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.signal import firwin2, oaconvolve

from .events import EventList
from .features import Features, extract_patches
from .frontend import Waveform
from .network.training import ClipDataset

SAMPLE_RATE = 22050
BANDS = {"low": (2000.0, 5000.0), "high": (5000.0, 10000.0)}
BAND_MARGIN = 200.0
SNR_RANGE = (-5.0, 15.0)
NEGATIVE_GAP = 0.5
INSECT_PARTIALS = 8
INSECT_SPREAD = 150.0

#: Frequencies (Hz) at which background spectral gains are specified.
CONTROL_FREQS = np.array([0, 500, 1000, 2000, 3000, 4000, 5000, 6000, 7000, 8000, 9000,
                          10000, 11025], dtype=float)


@dataclass(frozen=True)
class SensorProfile:
    sensor_id: str
    gains: tuple = tuple(np.ones(len(CONTROL_FREQS)))
    insect_hz: float = 3500.0
    insect_level: float = 1.0
    insect_rate_hz: float = 0.2
    level_db: float = -40.0
    decay_db: float = 10.0
    clutter_per_min: float = 0.0
    gusts_per_min: float = 0.0
    gust_level: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if len(self.gains) != len(CONTROL_FREQS):
            raise ValueError(f"need {len(CONTROL_FREQS)} spectral gains")
        if min(self.gains) < 0:
            raise ValueError("spectral gains must be nonnegative")
        object.__setattr__(self, "gains", tuple(float(g) for g in self.gains))

    def to_dict(self):
        return asdict(self)


def default_profiles(n: int = 6, seed: int = 0) -> list[SensorProfile]:
    """Distinct sensor backgrounds: tilt, level, insect band and clutter vary per sensor."""
    rng = np.random.default_rng([seed, 7919])
    profiles = []
    for i in range(n):
        tilt = rng.uniform(1.0, 2.5)
        f = np.maximum(CONTROL_FREQS, 250.0)
        gains = (f / 1000.0) ** (-tilt / 2)
        bump = rng.uniform(2000, 9000)
        gains *= 1 + rng.uniform(0.5, 3.0) * np.exp(-0.5 * ((CONTROL_FREQS - bump) / 1200) ** 2)
        profiles.append(SensorProfile(
            sensor_id=f"S{i + 1}",
            gains=tuple(gains / gains.max()),
            insect_hz=float(rng.uniform(2600, 4600)),
            insect_level=float(rng.uniform(0.5, 2.0)),
            insect_rate_hz=float(rng.uniform(0.1, 0.5)),
            level_db=float(rng.uniform(-45, -35)),
            decay_db=float(rng.uniform(6, 14)),
            clutter_per_min=float(rng.choice([0.0, 0.0, 2.0, 6.0])),
            gusts_per_min=float(rng.uniform(2, 10)),
            gust_level=float(rng.uniform(1.5, 4)),
            seed=int(rng.integers(2**31)),
        ))
    return profiles


@dataclass(frozen=True)
class NightSpec:
    duration: float = 1200.0
    profiles: tuple = ()
    n_calls: int = 200
    density_slope: float = 3.0
    min_separation: float = 1.0
    sample_rate: int = SAMPLE_RATE
    seed: int = 0

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError("duration must be positive")
        if self.n_calls < 0:
            raise ValueError("call count must be nonnegative")
        if not self.profiles:
            object.__setattr__(self, "profiles", tuple(default_profiles(6, self.seed)))
        object.__setattr__(self, "profiles", tuple(self.profiles))

    @property
    def sensor_ids(self):
        return [p.sensor_id for p in self.profiles]

    def to_dict(self):
        d = asdict(self)
        d["profiles"] = [p.to_dict() for p in self.profiles]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["profiles"] = tuple(SensorProfile(**{**p, "gains": tuple(p["gains"])})
                              for p in d.get("profiles", ()))
        return cls(**d)


def level_envelope(n: int, sample_rate: int, decay_db: float) -> np.ndarray:
    """Linear gain whose dB value holds over the first and last tenth of the
    recording and falls linearly by ``decay_db`` in between."""
    t = np.arange(n) / max(n - 1, 1)
    frac = np.clip((t - 0.1) / 0.8, 0.0, 1.0)
    return 10.0 ** (-decay_db * frac / 20.0)


def _colored_noise(rng, n, sample_rate, gains, numtaps=257):
    freqs = np.clip(CONTROL_FREQS / (sample_rate / 2), 0, 1)
    freqs[-1] = 1.0
    fir = firwin2(numtaps, freqs, np.asarray(gains))
    white = rng.standard_normal(n + numtaps)
    out = oaconvolve(white, fir, mode="valid")[:n]
    return out / np.sqrt(np.mean(out**2) + 1e-300)


def _insect_tones(rng, n, sample_rate, f0, rate_hz):
    """Sustained tone clusters at ``f0`` and ``2 f0`` whose level swells every
    ``1 / rate_hz`` seconds and wanders more slowly on top."""
    t = np.arange(n) / sample_rate
    detune = rng.uniform(-INSECT_SPREAD, INSECT_SPREAD, size=INSECT_PARTIALS)
    phases = rng.uniform(0, 2 * np.pi, size=(2, INSECT_PARTIALS))
    tone = np.zeros(n)
    for k, d in enumerate(detune):
        tone += np.sin(2 * np.pi * (f0 + d) * t + phases[0, k])
        tone += 0.5 * np.sin(2 * np.pi * 2 * (f0 + d) * t + phases[1, k])
    swell = 1 + 0.5 * np.sin(2 * np.pi * rate_hz * t + rng.uniform(0, 2 * np.pi))
    wander = 1 + 0.3 * np.sin(2 * np.pi * t / rng.uniform(20, 60) + rng.uniform(0, 2 * np.pi))
    out = tone * swell * wander
    return out / np.sqrt(np.mean(out**2) + 1e-300)


def _clutter(rng, n, sample_rate, per_min):
    out = np.zeros(n)
    duration = n / sample_rate
    count = rng.poisson(per_min * duration / 60.0)
    for _ in range(count):
        length = int(rng.uniform(0.1, 0.4) * sample_rate)
        start = int(rng.integers(0, max(1, n - length)))
        f = rng.uniform(1500, 9000)
        seg = np.sin(2 * np.pi * f * np.arange(length) / sample_rate) * np.hanning(length)
        out[start : start + length] += rng.uniform(1, 4) * seg[: n - start]
    return out


def _gusts(rng, n, sample_rate, per_min, level):
    """Bass-heavy noise that swells in smooth 1-4 s bursts over a calm floor."""
    f = np.maximum(CONTROL_FREQS, 250.0)
    noise = _colored_noise(rng, n, sample_rate, (f / 1000.0) ** -1.5)
    env = np.zeros(n)
    count = rng.poisson(per_min * n / sample_rate / 60.0)
    for _ in range(count):
        length = int(rng.uniform(1.0, 4.0) * sample_rate)
        start = int(rng.integers(-length // 2, n))
        bump = rng.uniform(0.3, 1.0) * np.hanning(length) ** 2
        lo, hi = max(start, 0), min(start + length, n)
        if hi > lo:
            env[lo:hi] += bump[lo - start : hi - start]
    return level * noise * env


def synth_background(profile: SensorProfile, duration: float,
                     sample_rate: int = SAMPLE_RATE) -> Waveform:
    """Nonstationary background for one sensor; amplitude scale set by ``level_db`` (dBFS RMS)."""
    n = int(round(duration * sample_rate))
    rng = np.random.default_rng(profile.seed)
    x = _colored_noise(rng, n, sample_rate, profile.gains)
    x += profile.insect_level * _insect_tones(rng, n, sample_rate, profile.insect_hz,
                                              profile.insect_rate_hz)
    if profile.clutter_per_min > 0:
        x += _clutter(rng, n, sample_rate, profile.clutter_per_min)
    if profile.gusts_per_min > 0:
        x += _gusts(rng, n, sample_rate, profile.gusts_per_min, profile.gust_level)
    x *= 10 ** (profile.level_db / 20) / np.sqrt(np.mean(x**2) + 1e-300)
    x *= level_envelope(n, sample_rate, profile.decay_db)
    return Waveform(x, sample_rate)


@dataclass
class Call:
    waveform: Waveform
    band: str
    f_start: float
    f_end: float

    @property
    def center_freq(self) -> float:
        return 0.5 * (self.f_start + self.f_end)


def synth_call(band: str, seed, duration: float | None = None,
               sample_rate: int = SAMPLE_RATE) -> Call:
    """Hann-windowed linear FM sweep kept ``BAND_MARGIN`` Hz inside ``band``."""
    if band not in BANDS:
        raise ValueError(f"unknown band {band!r}; expected one of {sorted(BANDS)}")
    rng = np.random.default_rng(seed)
    lo, hi = BANDS[band]
    lo, hi = lo + BAND_MARGIN, hi - BAND_MARGIN
    if duration is None:
        duration = float(rng.uniform(0.05, 0.15))
    span = rng.uniform(0.2, 0.6) * (hi - lo)
    f_a = rng.uniform(lo, hi - span)
    f0, f1 = (f_a + span, f_a) if rng.random() < 0.7 else (f_a, f_a + span)
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    phase = 2 * np.pi * (f0 * t + 0.5 * (f1 - f0) / duration * t**2)
    x = np.sin(phase + rng.uniform(0, 2 * np.pi)) * np.hanning(n)
    return Call(Waveform(x / np.sqrt(np.mean(x**2)), sample_rate), band, float(f0), float(f1))


def band_power(x: np.ndarray, sample_rate: int, lo: float, hi: float) -> float:
    """Mean-square power of ``x`` within ``[lo, hi)`` Hz, by Parseval on the DFT."""
    X = np.fft.rfft(x)
    f = np.fft.rfftfreq(len(x), 1 / sample_rate)
    sel = (f >= lo) & (f < hi)
    weight = np.where((f == 0) | (f == sample_rate / 2), 1.0, 2.0)
    return float(np.sum(weight[sel] * np.abs(X[sel]) ** 2) / len(x) ** 2)


def sample_call_times(rng, n: int, duration: float, slope: float, min_sep: float,
                      margin: float = 0.5, max_tries: int = 200) -> np.ndarray:
    """Times drawn from a density rising linearly by ``1 + slope`` across the night."""
    if n == 0:
        return np.empty(0)
    usable = duration - 2 * margin
    if usable <= 0 or n * min_sep > 0.5 * usable:
        raise ValueError(
            f"cannot place {n} calls {min_sep} s apart in {duration} s: too many calls"
        )
    times: list[float] = []
    tries = 0
    while len(times) < n:
        tries += 1
        if tries > max_tries * n:
            raise ValueError("cannot place calls: too many calls for the separation")
        u = rng.random()
        # inverse CDF of the density proportional to 1 + slope * x on [0, 1]
        x = u if slope == 0 else (np.sqrt(1 + slope * (2 + slope) * u) - 1) / slope
        t = margin + x * usable
        if all(abs(t - s) >= min_sep for s in times):
            times.append(t)
    return np.sort(np.array(times))


@dataclass
class SensorNight:
    sensor_id: str
    waveform: Waveform
    reference: EventList
    bands: list = field(default_factory=list)
    snr_db: np.ndarray | None = None


def synth_sensor(spec: NightSpec, index: int) -> SensorNight:
    profile = spec.profiles[index]
    sr = spec.sample_rate
    bg = synth_background(profile, spec.duration, sr)
    x = bg.samples.copy()
    rng = np.random.default_rng([spec.seed, index, 104729])
    times = sample_call_times(rng, spec.n_calls, spec.duration, spec.density_slope,
                              spec.min_separation)
    freqs, bands, snrs = [], [], []
    for k, t in enumerate(times):
        band = "low" if rng.random() < 0.5 else "high"
        call = synth_call(band, seed=[spec.seed, index, k], sample_rate=sr)
        c = call.waveform.samples
        start = int(round(t * sr)) - len(c) // 2
        seg = bg.samples[start : start + len(c)]
        lo, hi = BANDS[band]
        snr = float(rng.uniform(*SNR_RANGE))
        p_bg = band_power(seg, sr, lo, hi)
        x[start : start + len(c)] += c * np.sqrt(p_bg * 10 ** (snr / 10))
        freqs.append(call.center_freq)
        bands.append(band)
        snrs.append(snr)
    ref = EventList(times, freqs=np.array(freqs) if freqs else np.empty(0),
                    sensor=profile.sensor_id)
    return SensorNight(profile.sensor_id, Waveform(x, sr), ref, bands, np.array(snrs))


def synth_night(spec: NightSpec = NightSpec()):
    """Generate every sensor lazily, in profile order."""
    for i in range(len(spec.profiles)):
        yield synth_sensor(spec, i)


def sample_negatives(rng, n: int, duration: float, events, gap: float = NEGATIVE_GAP,
                     edge: float = 0.075) -> np.ndarray:
    """``n`` times uniformly spread over the parts of ``[edge, duration - edge]``
    lying at least ``gap`` seconds from every event."""
    events = np.sort(np.asarray(events, dtype=float))
    lo, hi = edge, duration - edge
    cuts = [(max(lo, e - gap), min(hi, e + gap)) for e in events]
    free = []
    cur = lo
    for a, b in cuts:
        if a > cur:
            free.append((cur, a))
        cur = max(cur, b)
    if hi > cur:
        free.append((cur, hi))
    free = [(a, b) for a, b in free if b > a]
    lengths = np.array([b - a for a, b in free])
    if n > 0 and (len(free) == 0 or lengths.sum() < 0.15 * n):
        raise ValueError("insufficient negative space")
    if n == 0:
        return np.empty(0)
    cum = np.concatenate([[0], np.cumsum(lengths)])
    u = np.sort(rng.uniform(0, cum[-1], size=n))
    k = np.searchsorted(cum, u, side="right") - 1
    k = np.clip(k, 0, len(free) - 1)
    starts = np.array([a for a, _ in free])
    out = starts[k] + (u - cum[k])
    # keep strictly inside the free intervals despite rounding
    ends = np.array([b for _, b in free])
    return np.minimum(out, ends[k])


def build_clip_dataset(features: dict, references: dict, n_frames: int,
                       negatives_per_positive: int = 1, seed: int = 0) -> ClipDataset:
    """Positive patches on reference events and negatives away from them, per sensor.

    ``features`` and ``references`` map sensor ids to :class:`Features` and
    :class:`EventList`; patches and context slices come from the full-recording
    features.
    """
    parts = []
    for sid in sorted(features):
        feats: Features = features[sid]
        ref: EventList = references[sid]
        rng = np.random.default_rng([seed, _stable_hash(sid)])
        pos_t = ref.times
        neg_t = sample_negatives(rng, negatives_per_positive * len(pos_t), feats.duration,
                                 pos_t)
        times = np.concatenate([pos_t, neg_t])
        labels = np.concatenate([np.ones(len(pos_t), int), np.zeros(len(neg_t), int)])
        x, c = extract_patches(feats, times, n_frames)
        parts.append(ClipDataset(x, labels, c, np.array([sid] * len(times)), times))
    if not parts:
        raise ValueError("no recordings given")
    return ClipDataset.concat(parts)


def _stable_hash(s: str) -> int:
    return zlib.crc32(s.encode())

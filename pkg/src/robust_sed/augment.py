"""Geometric and adaptive audio augmentations for training clips."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .frontend import Waveform

SNR_CAP_DB = 120.0
PV_FFT = 1024
PV_HOP = 256


def _samples(w):
    if isinstance(w, Waveform):
        return w.samples, w.sample_rate
    return np.asarray(w, dtype=np.float64), None


def _wrap(w, x, sr):
    return Waveform(x, sr if sr is not None else 22050) if isinstance(w, Waveform) else x


# -- resampling ---------------------------------------------------------------

def resample(w, ratio: float, half_taps: int = 32, beta: float = 8.6):
    """Playback-speed change by windowed-sinc interpolation.

    Output sample ``m`` reads the input at position ``m * ratio``, so the output
    has ``round(len / ratio)`` samples and every frequency is scaled by ``ratio``.
    The kernel is a Kaiser-windowed sinc whose cutoff drops to ``1 / ratio``
    when speeding up, and each output sample is normalized by the sum of its
    in-range taps so constant signals stay constant up to the edges.
    """
    if not 0.25 <= ratio <= 4:
        raise ValueError(f"resampling ratio {ratio} outside [0.25, 4]")
    x, sr = _samples(w)
    n_out = int(round(len(x) / ratio))
    if ratio == 1:
        return _wrap(w, x.copy(), sr)
    cutoff = min(1.0, 1.0 / ratio)
    half = int(np.ceil(half_taps / cutoff))
    offsets = np.arange(-half + 1, half + 1)
    out = np.empty(n_out)
    chunk = max(1, 2**18 // len(offsets))
    for s in range(0, n_out, chunk):
        pos = np.arange(s, min(s + chunk, n_out)) * ratio
        base = np.floor(pos).astype(np.int64)
        idx = base[:, None] + offsets[None, :]
        dist = pos[:, None] - idx
        taps = cutoff * np.sinc(cutoff * dist) * np.kaiser(2 * half + 1, beta)[
            np.clip(np.rint(dist / (half + 1) * half + half).astype(np.int64), 0, 2 * half)
        ]
        valid = (idx >= 0) & (idx < len(x))
        taps = np.where(valid, taps, 0.0)
        vals = x[np.clip(idx, 0, len(x) - 1)]
        norm = taps.sum(axis=1)
        norm[norm == 0] = 1.0
        out[s : s + len(pos)] = (taps * vals).sum(axis=1) / norm
    return _wrap(w, out, sr)


# -- phase vocoder -------------------------------------------------------------

def _stft(x, n_fft, hop):
    pad = n_fft // 2
    xp = np.pad(x, (pad, pad + n_fft))
    n_frames = 1 + (len(x) + pad) // hop
    window = np.hanning(n_fft + 1)[:-1]
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    return np.fft.rfft(xp[idx] * window, axis=1), window


def _istft(S, window, hop, length):
    n_fft = len(window)
    frames = np.fft.irfft(S, n=n_fft, axis=1) * window
    total = n_fft + hop * (len(S) - 1)
    y = np.zeros(total)
    wsum = np.zeros(total)
    for i, f in enumerate(frames):
        y[i * hop : i * hop + n_fft] += f
        wsum[i * hop : i * hop + n_fft] += window**2
    y /= np.where(wsum > 1e-8, wsum, 1.0)
    pad = n_fft // 2
    y = y[pad : pad + length]
    return np.pad(y, (0, max(0, length - len(y))))


def _peak_regions(mag):
    """For each bin, the index of the spectral peak whose region it belongs to."""
    n = len(mag)
    left = np.concatenate([[-np.inf], mag[:-1]])
    right = np.concatenate([mag[1:], [-np.inf]])
    peaks = np.flatnonzero((mag >= left) & (mag > right))
    if len(peaks) == 0:
        return np.arange(n)
    bounds = (peaks[1:] + peaks[:-1]) // 2 + 1
    owner = np.searchsorted(bounds, np.arange(n), side="right")
    return peaks[owner]


def time_stretch(w, rate: float, n_fft: int = PV_FFT, hop: int = PV_HOP):
    """Phase-vocoder tempo change with identity phase locking.

    The output has ``round(len / rate)`` samples; pitch is unchanged.
    """
    if not 0.5 <= rate <= 2:
        raise ValueError(f"stretch rate {rate} outside [0.5, 2]")
    x, sr = _samples(w)
    n_out = int(round(len(x) / rate))
    S, window = _stft(x, n_fft, hop)
    n_frames, n_bins = S.shape
    steps = np.arange(0, n_frames - 1, rate)
    advance = 2 * np.pi * hop * np.arange(n_bins) / n_fft
    mag, ang = np.abs(S), np.angle(S)
    phase = ang[0].copy()
    out = np.empty((len(steps), n_bins), dtype=complex)
    for i, t in enumerate(steps):
        k = int(t)
        frac = t - k
        m = (1 - frac) * mag[k] + frac * mag[k + 1]
        owner = _peak_regions(m)
        # rigidly rotate each peak's region with the peak's accumulated phase
        locked = phase[owner] + ang[k] - ang[k][owner]
        out[i] = m * np.exp(1j * locked)
        dphi = ang[k + 1] - ang[k] - advance
        dphi -= 2 * np.pi * np.rint(dphi / (2 * np.pi))
        phase += advance + dphi
    return _wrap(w, _istft(out, window, hop, n_out), sr)


def _fix_length(x, n):
    return x[:n] if len(x) >= n else np.pad(x, (0, n - len(x)))


def pitch_shift(w, semitones: float):
    """Shift pitch by ``semitones`` while keeping the number of samples."""
    if abs(semitones) > 12:
        raise ValueError("pitch shift limited to one octave")
    x, sr = _samples(w)
    if semitones == 0:
        return _wrap(w, x.copy(), sr)
    speed = 2.0 ** (semitones / 12.0)
    y, _ = _samples(resample(x, speed))
    y, _ = _samples(time_stretch(y, 1.0 / speed))
    return _wrap(w, _fix_length(y, len(x)), sr)


# -- noise mixing ------------------------------------------------------------------

def noise_gain(clip_power: float, noise_power: float, snr_db: float) -> float:
    if clip_power <= 0:
        raise ValueError("undefined SNR: silent clip")
    if noise_power <= 0:
        raise ValueError("undefined SNR: silent noise")
    snr_db = min(float(snr_db), SNR_CAP_DB)
    return float(np.sqrt(clip_power / (noise_power * 10.0 ** (snr_db / 10.0))))


def mix_noise(clip, noise, snr_db: float, rng=None, offset: int | None = None,
              return_info: bool = False):
    """Add a noise excerpt scaled to reach ``snr_db``; powers are mean squares.

    The excerpt start is ``offset`` if given, otherwise drawn from ``rng``.
    With ``return_info`` the gain and offset are returned alongside the mix.
    """
    x, sr = _samples(clip)
    nz, _ = _samples(noise)
    if len(nz) < len(x):
        raise ValueError("noise shorter than clip")
    if offset is None:
        rng = rng if rng is not None else np.random.default_rng(0)
        offset = int(rng.integers(0, len(nz) - len(x) + 1))
    excerpt = nz[offset : offset + len(x)]
    g = noise_gain(np.mean(x**2), np.mean(excerpt**2), snr_db)
    out = _wrap(clip, x + g * excerpt, sr)
    if return_info:
        return out, {"gain": g, "offset": offset}
    return out


# -- augmentation sets ---------------------------------------------------------------

@dataclass(frozen=True)
class AugmentationSpec:
    n_pitch: int = 4
    pitch_range: tuple = (-1.0, 1.0)
    n_stretch: int = 4
    stretch_range: tuple = (0.8, 1.25)
    n_noise: int = 4
    snr_range: tuple = (0.0, 30.0)
    seed: int = 0

    def __post_init__(self):
        if min(self.n_pitch, self.n_stretch, self.n_noise) < 0:
            raise ValueError("augmentation counts must be nonnegative")
        for name in ("pitch_range", "stretch_range", "snr_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"{name} is empty")

    def to_dict(self):
        return asdict(self)


@dataclass
class Variant:
    waveform: Waveform
    provenance: dict = field(default_factory=dict)


def augment_set(clip: Waveform, spec: AugmentationSpec = AugmentationSpec(), noise_pool=None,
                clip_id: str = "clip") -> list[Variant]:
    """One-effect variants of ``clip``: pitch shifts, time stretches and noise additions.

    ``noise_pool`` maps a source id to a noise recording; ``spec.n_noise`` variants
    are produced per source. Variants are deterministic given ``spec.seed``.
    """
    pool = dict(noise_pool or {})
    if spec.n_noise > 0 and not pool:
        raise ValueError("noise augmentation requested with an empty noise pool")
    rng = np.random.default_rng(spec.seed)
    out = []

    def tag(effect, value, noise_source=None, **extra):
        return {"source": clip_id, "effect": effect, "value": float(value),
                "noise_source": noise_source, "seed": spec.seed, **extra}

    for _ in range(spec.n_pitch):
        s = float(rng.uniform(*spec.pitch_range))
        out.append(Variant(pitch_shift(clip, s), tag("pitch_shift", s)))
    for _ in range(spec.n_stretch):
        r = float(rng.uniform(*spec.stretch_range))
        out.append(Variant(time_stretch(clip, r), tag("time_stretch", r)))
    for source in sorted(pool):
        for _ in range(spec.n_noise):
            snr = float(rng.uniform(*spec.snr_range))
            mixed, info = mix_noise(clip, pool[source], snr, rng=rng, return_info=True)
            out.append(Variant(mixed, tag("add_noise", snr, source, offset=info["offset"],
                                          gain=info["gain"])))
    return out

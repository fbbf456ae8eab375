"""Sliding-window detection over continuous recordings, peak picking and clip export."""

from __future__ import annotations

import bisect
import os

import numpy as np
from scipy.io import wavfile

from .events import EDF_HOP, EDF_WINDOW, EventDetectionFunction, EventList
from .features import Features, FrontendConfig, extract_patches, featurize
from .frontend import Waveform
from .network.model import DetectorParams, Formulation, predict
from .network.training import normalize_inputs


def edf_length(n_samples: int, sample_rate: int) -> int:
    """``floor((duration - 0.150) / 0.050) + 1`` in exact integer arithmetic."""
    # duration / hop = 20 N / sr and window / hop = 3
    return (20 * n_samples) // sample_rate - 2


def edf_times(n: int) -> np.ndarray:
    return EDF_WINDOW / 2 + EDF_HOP * np.arange(n)


def compute_edf(recording: Waveform | None, params: DetectorParams, cfg: FrontendConfig,
                batch: int = 512, features: Features | None = None) -> EventDetectionFunction:
    """Probability of an event in each 150 ms window, at 50 ms hops.

    Context slices are computed from the recording itself. ``features`` may be
    passed to reuse an existing featurization of the same recording, in which
    case ``recording`` may be ``None``.
    """
    if recording is None and features is None:
        raise ValueError("need a recording or its features")
    n_samples = len(recording) if recording is not None else features.n_samples
    sr = recording.sample_rate if recording is not None else features.matrix.sample_rate
    if 20 * n_samples < 3 * sr:
        raise ValueError(
            f"input too short: {n_samples / sr:.3f} s is shorter than one "
            f"{EDF_WINDOW * 1000:.0f} ms window"
        )
    feats = features if features is not None else featurize(recording, cfg)
    n = edf_length(n_samples, sr)
    times = edf_times(n)
    geometry = params.geometry
    if feats.matrix.n_bands != geometry.n_bands:
        raise ValueError(
            f"dimension mismatch: features have {feats.matrix.n_bands} bands, "
            f"model expects {geometry.n_bands}"
        )
    stats = params.meta.get("normalization")
    dtype = params.dtype
    use_ctx = params.formulation != Formulation.STATIC
    out = np.empty(n)
    for i in range(0, n, batch):
        x, c = extract_patches(feats, times[i : i + batch], geometry.n_frames)
        x, c = normalize_inputs(stats, x, c if use_ctx else None, dtype=dtype)
        out[i : i + batch] = predict(x, c, params)
    return EventDetectionFunction(out, 1.0 / EDF_HOP, EDF_WINDOW / 2)


def _local_maxima(v: np.ndarray) -> np.ndarray:
    """Frames that start a plateau higher than both neighbors (edges see -inf)."""
    n = len(v)
    if n == 0:
        return np.empty(0, dtype=np.int64)
    change = np.flatnonzero(np.diff(v) != 0) + 1
    starts = np.concatenate([[0], change])
    vals = v[starts]
    left = np.concatenate([[-np.inf], vals[:-1]])
    right = np.concatenate([vals[1:], [-np.inf]])
    return starts[(vals > left) & (vals > right)]


def peak_pick(edf: EventDetectionFunction, tau: float, min_lag: float = 0.0) -> EventList:
    """Local maxima above ``tau``, optionally thinned to be ``min_lag`` seconds apart.

    A plateau of equal maximal values yields one peak at its first frame. With
    ``min_lag > 0`` peaks are visited from highest to lowest (earlier first on
    ties) and kept only if no already kept peak lies closer than ``min_lag``.
    """
    if not 0 < tau < 1:
        raise ValueError(f"threshold {tau} outside (0, 1)")
    v = edf.values
    peaks = _local_maxima(v)
    peaks = peaks[v[peaks] > tau]
    times = edf.start_time + peaks * edf.hop
    if min_lag > 0 and len(peaks) > 1:
        # compare the emitted float timestamps, so that every gap between kept
        # events is >= min_lag exactly as computed downstream
        order = np.lexsort((peaks, -v[peaks]))
        kept = []  # indices into peaks, kept sorted by time
        for i in order:
            pos = bisect.bisect_left(kept, i)
            if pos > 0 and times[i] - times[kept[pos - 1]] < min_lag:
                continue
            if pos < len(kept) and times[kept[pos]] - times[i] < min_lag:
                continue
            kept.insert(pos, i)
        kept = np.array(kept, dtype=np.int64)
        peaks, times = peaks[kept], times[kept]
    conf = np.clip(v[peaks], np.finfo(float).tiny, 1.0)
    return EventList(times, conf, sensor=edf.sensor)


def clip_bounds(t: float, half_width: float, sample_rate: int):
    """(start sample, length) of the clip centered on ``t``."""
    length = int(np.floor(2 * half_width * sample_rate))
    start = int(np.floor((t - half_width) * sample_rate + 1e-9))
    return start, length


def extract_clip(recording: Waveform, t: float, half_width: float = EDF_WINDOW / 2) -> np.ndarray:
    start, length = clip_bounds(t, half_width, recording.sample_rate)
    out = np.zeros(length)
    lo, hi = max(start, 0), min(start + length, len(recording))
    if hi > lo:
        out[lo - start : hi - start] = recording.samples[lo:hi]
    return out


def clip_filename(t: float, confidence: float, prefix: str = "event") -> str:
    return f"{prefix}_{t:010.3f}s_conf{confidence:.6f}.wav"


def export_clips(recording: Waveform, events: EventList, out_dir,
                 half_width: float = EDF_WINDOW / 2, prefix: str = "event") -> list[str]:
    """Write one float32 mono WAV per event; returns the written paths."""
    if len(events) == 0:
        return []
    if np.any(events.times < 0) or np.any(events.times > recording.duration):
        raise ValueError("events outside the recording")
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot write clips to {out_dir}: {e}") from e
    if not os.access(out_dir, os.W_OK):
        raise OSError(f"cannot write clips to {out_dir}: permission denied")
    paths = []
    for t, c in zip(events.times, events.confidences):
        clip = extract_clip(recording, t, half_width)
        path = os.path.join(out_dir, clip_filename(t, c, prefix))
        wavfile.write(path, recording.sample_rate, clip.astype(np.float32))
        paths.append(path)
    return paths

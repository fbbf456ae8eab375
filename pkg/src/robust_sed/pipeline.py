"""End-to-end glue: synthetic nights to features, fold datasets, models and scores."""

from __future__ import annotations

import logging
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .augment import AugmentationSpec, augment_set
from .detector import compute_edf, extract_clip
from .evaluator import DEFAULT_TOLERANCE, FoldSpec, PRCurve, make_folds, pr_curve
from .events import EventList
from .features import Features, FrontendConfig, extract_patches, featurize
from .frontend import Waveform
from .network.model import DESK_GEOMETRY, DetectorParams, Geometry
from .network.training import ClipDataset, TrainConfig, TrainingHistory, train
from .synthdata import NightSpec, build_clip_dataset, sample_negatives, synth_sensor

logger = logging.getLogger(__name__)


def featurize_night(spec: NightSpec, cfg: FrontendConfig, keep_audio: bool = False):
    """Features and references of every sensor; audio is kept only on request."""
    feats, refs, audio = {}, {}, {}
    for i in range(len(spec.profiles)):
        night = synth_sensor(spec, i)
        feats[night.sensor_id] = featurize(night.waveform, cfg)
        refs[night.sensor_id] = night.reference
        if keep_audio:
            audio[night.sensor_id] = night.waveform
    return feats, refs, audio


def fold_datasets(feats: dict, refs: dict, fold: FoldSpec, n_frames: int,
                  negatives_per_positive: int = 1, seed: int = 0):
    """(train, validation) clip datasets for one fold."""
    pick = lambda ids: ({s: feats[s] for s in ids}, {s: refs[s] for s in ids})  # noqa: E731
    train_set = build_clip_dataset(*pick(fold.train), n_frames, negatives_per_positive, seed)
    val_set = build_clip_dataset(*pick(fold.val), n_frames, negatives_per_positive, seed + 1)
    return train_set, val_set


def augment_clips(data: ClipDataset, audio: dict, cfg: FrontendConfig, n_frames: int,
                  mode: str, spec: AugmentationSpec = AugmentationSpec(),
                  excerpt: float = 1.0, references: dict | None = None) -> ClipDataset:
    """Append augmented copies of every clip in ``data``.

    ``mode`` is ``"gda"`` (pitch and stretch) or ``"ada"`` (background noise from
    the sensors present in ``data``). Each clip is processed as an ``excerpt``
    second waveform around its timestamp, featurized on its own, and its center
    patch is kept together with the source clip's context slice and label.
    """
    if mode not in ("gda", "ada"):
        raise ValueError(f"unknown augmentation mode {mode!r}")
    if mode == "gda":
        spec = AugmentationSpec(spec.n_pitch, spec.pitch_range, spec.n_stretch,
                                spec.stretch_range, 0, spec.snr_range, spec.seed)
        pool = {}
    else:
        spec = AugmentationSpec(0, spec.pitch_range, 0, spec.stretch_range, spec.n_noise,
                                spec.snr_range, spec.seed)
        pool = _noise_pool(audio, sorted(set(data.sensors)), references, spec.seed, excerpt)
    xs, cs, ys, ss, ts, prov = [], [], [], [], [], []
    for k in range(len(data)):
        sid, t = data.sensors[k], float(data.times[k])
        rec = audio[sid]
        clip = Waveform(extract_clip(rec, t, excerpt / 2), rec.sample_rate)
        if not np.any(clip.samples):
            continue
        item_spec = AugmentationSpec(**{**spec.to_dict(), "seed": spec.seed * 1_000_003 + k})
        for v in augment_set(clip, item_spec, pool, clip_id=f"{sid}@{t:.3f}"):
            f = featurize(v.waveform, _no_context(cfg))
            x, _ = extract_patches(f, [excerpt / 2], n_frames)
            xs.append(x[0])
            cs.append(data.contexts[k])
            ys.append(data.labels[k])
            ss.append(sid)
            ts.append(t)
            prov.append(v.provenance)
    if not xs:
        return data
    extra = ClipDataset(np.stack(xs).astype(data.patches.dtype), np.array(ys), np.stack(cs),
                        np.array(ss), np.array(ts), {"provenance": prov})
    out = ClipDataset.concat([data, extra])
    out.meta["provenance"] = prov
    return out


def _no_context(cfg: FrontendConfig) -> FrontendConfig:
    # a short excerpt only needs a single placeholder context slice
    return FrontendConfig(cfg.kind, cfg.spectrogram, cfg.pcen, 1.0, 1.0,
                          cfg.quantile_levels, cfg.context_bands)


def _noise_pool(audio, sensors, references, seed, length):
    rng = np.random.default_rng([seed, 31337])
    pool = {}
    for sid in sensors:
        rec = audio[sid]
        events = references[sid].times if references else np.empty(0)
        t = sample_negatives(rng, 1, rec.duration - length, events, gap=length)[0]
        start = int(t * rec.sample_rate)
        n = int(8 * length * rec.sample_rate)
        pool[sid] = Waveform(rec.samples[start : start + n], rec.sample_rate)
    return pool


@dataclass
class FoldResult:
    model: str
    seed: int
    fold: int
    test_sensor: str
    auprc: float
    best_threshold: float
    best_recall: float
    best_precision: float
    history: TrainingHistory | None = None
    curve: PRCurve | None = None


def train_fold(feats, refs, fold: FoldSpec, formulation, geometry: Geometry = DESK_GEOMETRY,
               config: TrainConfig = TrainConfig(), negatives_per_positive: int = 1,
               frontend: FrontendConfig | None = None) -> tuple[DetectorParams, TrainingHistory]:
    train_set, val_set = fold_datasets(feats, refs, fold, geometry.n_frames,
                                       negatives_per_positive, config.seed)
    params, hist = train(train_set, config, formulation, geometry, val=val_set)
    if frontend is not None:
        params.meta["frontend"] = frontend.to_dict()
    return params, hist


def evaluate_sensor(params: DetectorParams, feats: Features, reference: EventList,
                    min_lag: float, tolerance: float = DEFAULT_TOLERANCE) -> PRCurve:
    edf = compute_edf(None, params, feats.config, features=feats)
    return pr_curve(edf, reference, min_lag=min_lag, tolerance=tolerance)


@dataclass
class StudyResult:
    folds: list = field(default_factory=list)

    def table(self, model):
        """``[seed][fold]`` arrays of (auprc, best recall)."""
        rows = [r for r in self.folds if r.model == model]
        seeds = sorted({r.seed for r in rows})
        folds = sorted({r.fold for r in rows})
        auprc = np.full((len(seeds), len(folds)), np.nan)
        recall = np.full_like(auprc, np.nan)
        for r in rows:
            auprc[seeds.index(r.seed), folds.index(r.fold)] = r.auprc
            recall[seeds.index(r.seed), folds.index(r.fold)] = r.best_recall
        return auprc, recall


STUDY_MODELS = (("logmel-static", "logmel", "static"), ("pcen-static", "pcen", "static"),
                ("pcen-at", "pcen", "at"))

# shorter schedule than the single-model default so that the 54 trainings of
# three models x three seeds x six folds fit a desktop budget
STUDY_TRAIN_CONFIG = TrainConfig(epochs=12, patience=4)

# fork workers inherit the featurized night instead of pickling it
_SHARED: dict = {}


def _study_task(task):
    seed, fold_index = task
    feats, refs = _SHARED["feats"], _SHARED["refs"]
    fold = _SHARED["folds"][fold_index]
    tc = TrainConfig(**{**_SHARED["train_config"].to_dict(), "seed": seed})
    params, hist = train_fold(feats, refs, fold, _SHARED["formulation"], _SHARED["geometry"], tc)
    sid = fold.test[0]
    curve = evaluate_sensor(params, feats[sid], refs[sid], _SHARED["min_lag"])
    tau, p, r, _ = curve.best_f()
    return FoldResult(_SHARED["name"], seed, fold.index, sid, curve.auprc, tau, r, p, hist, curve)


def run_study(spec: NightSpec = NightSpec(), seeds=(0, 1, 2), models=STUDY_MODELS,
              geometry: Geometry = DESK_GEOMETRY, train_config: TrainConfig = STUDY_TRAIN_CONFIG,
              min_lag: float = 0.15, frontend: FrontendConfig = FrontendConfig(),
              progress=None, jobs: int = 1) -> StudyResult:
    """Leave-one-sensor-out comparison of several frontend/formulation pairs.

    Each frontend is featurized once; with ``jobs > 1`` the (seed, fold)
    trainings of a model run in forked worker processes.
    """
    result = StudyResult()
    folds = make_folds(spec.sensor_ids)
    tasks = [(seed, k) for seed in seeds for k in range(len(folds))]
    for kind in dict.fromkeys(k for _, k, _ in models):
        cfg = FrontendConfig(kind, frontend.spectrogram, frontend.pcen, frontend.context_window,
                             frontend.context_period, frontend.quantile_levels,
                             frontend.context_bands)
        feats, refs, _ = featurize_night(spec, cfg)
        for name, k, form in models:
            if k != kind:
                continue
            _SHARED.update(feats=feats, refs=refs, folds=folds, train_config=train_config,
                           formulation=form, geometry=geometry, min_lag=min_lag, name=name)
            try:
                if jobs > 1:
                    ctx = multiprocessing.get_context("fork")
                    with ProcessPoolExecutor(max_workers=jobs, mp_context=ctx) as ex:
                        rows = ex.map(_study_task, tasks)
                        for res in rows:
                            result.folds.append(res)
                            if progress:
                                progress(res)
                else:
                    for task in tasks:
                        res = _study_task(task)
                        result.folds.append(res)
                        if progress:
                            progress(res)
            finally:
                _SHARED.clear()
        del feats
    return result

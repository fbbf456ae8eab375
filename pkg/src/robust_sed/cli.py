"""Command-line entry point: ``robust-sed <subcommand> [options]``.

Every subcommand accepts ``--config run.json`` and repeated ``--set key=value``
overrides. Usage errors exit with status 2, domain errors with status 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
import multiprocessing

import numpy as np

from .config import PipelineConfig, load_config
from .detector import compute_edf, export_clips, peak_pick
from .evaluator import (
    DEFAULT_THRESHOLDS, make_folds, pr_curve, pr_curve_from_events, recall_timeline,
    timeline_csv,
)
from .events import (
    EventDetectionFunction, EventList, ensure_dir, read_annotations_csv, read_detections_csv,
    write_annotations_csv, write_detections_csv,
)
from .features import FrontendConfig, featurize
from .frontend import melspectrogram, pcen
from .network.gradcheck import GRADCHECK_TOLERANCE, run_gradcheck
from .network.model import Formulation
from .network.training import TrainConfig, train
from .pipeline import STUDY_MODELS, STUDY_TRAIN_CONFIG, augment_clips, fold_datasets, run_study
from .synthdata import (
    NightSpec, build_clip_dataset, default_profiles, synth_background, synth_sensor,
)
from .tensorio import (
    load_checkpoint, read_tensor, read_wav, save_checkpoint, write_tensor, write_wav,
)

logger = logging.getLogger("robust_sed")

THREADS_ENV = "ROBUST_SED_THREADS"


class UsageError(Exception):
    """Raised for inconsistent command-line arguments."""


def max_workers(requested: int) -> int:
    """``requested`` capped by ``ROBUST_SED_THREADS`` when it is set."""
    n = max(1, int(requested))
    cap = os.environ.get(THREADS_ENV)
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be an integer, got {cap!r}") from None
    return n


def night_spec(cfg: PipelineConfig) -> NightSpec:
    s = cfg.synth
    return NightSpec(duration=s.duration, profiles=tuple(default_profiles(s.n_sensors, cfg.seed)),
                     n_calls=s.n_calls, seed=cfg.seed)


# -- dataset directories -----------------------------------------------------------

def _audio_path(data_dir, sid):
    return os.path.join(data_dir, "audio", f"{sid}.wav")


def _load_dataset(data_dir):
    with open(os.path.join(data_dir, "manifest.json")) as f:
        manifest = json.load(f)
    refs = read_annotations_csv(os.path.join(data_dir, "annotations.csv"))
    sensors = manifest["sensors"]
    refs = {sid: refs.get(sid) for sid in sensors}
    for sid in sensors:
        if refs[sid] is None:
            refs[sid] = EventList([], sensor=sid)
    return manifest, sensors, refs


def cmd_synth(args, cfg: PipelineConfig):
    spec = night_spec(cfg)
    ensure_dir(os.path.join(args.out, "audio"))
    refs = {}
    for i, sid in enumerate(spec.sensor_ids):
        night = synth_sensor(spec, i)
        write_wav(_audio_path(args.out, sid), night.waveform)
        refs[sid] = night.reference
        logger.info("synthesized %s: %d calls", sid, len(night.reference))
    write_annotations_csv(refs, os.path.join(args.out, "annotations.csv"))
    manifest = {"seed": cfg.seed, "sensors": spec.sensor_ids, "night": spec.to_dict(),
                "config": cfg.to_dict()}
    with open(os.path.join(args.out, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    print(f"wrote {len(refs)} sensors to {args.out}")


def cmd_featurize(args, cfg: PipelineConfig):
    ensure_dir(args.out)
    for path in args.audio:
        w = read_wav(path)
        feats = featurize(w, cfg.frontend)
        stem = os.path.splitext(os.path.basename(path))[0]
        meta = {"source": os.path.basename(path), "frontend": cfg.frontend.to_dict(),
                "sample_rate": w.sample_rate, "n_samples": len(w), "seed": cfg.seed}
        write_tensor(os.path.join(args.out, f"{stem}.features.bvtf"), feats.matrix.values,
                     axes=["frame", "band"], metadata=meta)
        write_tensor(os.path.join(args.out, f"{stem}.context.bvtf"), feats.context.values,
                     axes=["slice", "quantile", "band"],
                     metadata={**meta, "slice_times": list(map(float, feats.context.times))})
        print(f"{stem}: {feats.matrix.n_frames} frames x {feats.matrix.n_bands} bands")


# -- training ----------------------------------------------------------------------

# Worker processes inherit these through fork rather than pickling gigabytes of features.
_SHARED: dict = {}


def _train_one(fold_index: int):
    cfg: PipelineConfig = _SHARED["cfg"]
    feats, refs, audio = _SHARED["feats"], _SHARED["refs"], _SHARED["audio"]
    fold = _SHARED["folds"][fold_index]
    g = cfg.geometry_spec
    neg = cfg.synth.negatives_per_positive
    train_set, val_set = fold_datasets(feats, refs, fold, g.n_frames, neg, cfg.train.seed)
    if cfg.augmentation != "none":
        train_set = augment_clips(train_set, audio, cfg.frontend, g.n_frames, cfg.augmentation,
                                  cfg.augment_spec, references=refs)
    params, hist = train(train_set, cfg.train, cfg.formulation, g, val=val_set)
    return fold_index, params, hist


def _checkpoint_extra(cfg, **kw):
    return {"seed": cfg.seed, "config": cfg.to_dict(), **kw}


def cmd_train(args, cfg: PipelineConfig):
    manifest, sensors, refs = _load_dataset(args.data)
    need_audio = cfg.augmentation != "none"
    feats, audio = {}, {}
    for sid in sensors:
        w = read_wav(_audio_path(args.data, sid))
        feats[sid] = featurize(w, cfg.frontend)
        if need_audio:
            audio[sid] = w
    g = cfg.geometry_spec

    if args.fold is None:
        if args.jobs != 1:
            raise UsageError("--jobs needs --fold")
        data = build_clip_dataset(feats, refs, g.n_frames, cfg.synth.negatives_per_positive,
                                  cfg.train.seed)
        if need_audio:
            data = augment_clips(data, audio, cfg.frontend, g.n_frames, cfg.augmentation,
                                 cfg.augment_spec, references=refs)
        params, hist = train(data, cfg.train, cfg.formulation, g)
        save_checkpoint(args.out, params, cfg.frontend.to_dict(),
                        _checkpoint_extra(cfg, train_sensors=sensors))
        print(f"trained on {len(data)} clips, {len(hist.epochs)} epochs -> {args.out}")
        return

    folds = make_folds(sensors)
    if args.fold == "all":
        wanted = list(range(len(folds)))
        ensure_dir(args.out)
    else:
        try:
            k = int(args.fold)
        except ValueError:
            raise UsageError(f"--fold must be an integer or 'all', got {args.fold!r}") from None
        if not 0 <= k < len(folds):
            raise ValueError(f"fold {k} out of range for {len(folds)} sensors")
        wanted = [k]
    _SHARED.update(cfg=cfg, feats=feats, refs=refs, audio=audio, folds=folds)
    jobs = max_workers(args.jobs)
    try:
        if jobs > 1 and len(wanted) > 1:
            ctx = multiprocessing.get_context("fork")
            with ProcessPoolExecutor(max_workers=min(jobs, len(wanted)), mp_context=ctx) as ex:
                results = list(ex.map(_train_one, wanted))
        else:
            results = [_train_one(k) for k in wanted]
    finally:
        _SHARED.clear()
    for k, params, hist in results:
        fold = folds[k]
        path = os.path.join(args.out, f"fold{k}.ckpt") if args.fold == "all" else args.out
        save_checkpoint(path, params, cfg.frontend.to_dict(),
                        _checkpoint_extra(cfg, fold=k, train_sensors=list(fold.train),
                                          val_sensors=list(fold.val),
                                          test_sensors=list(fold.test)))
        print(f"fold {k}: test {fold.test[0]}, best epoch {hist.best_epoch} -> {path}")


# -- detection and evaluation ------------------------------------------------------

def _frontend_of(manifest, cfg: PipelineConfig) -> FrontendConfig:
    fr = manifest.get("frontend")
    return FrontendConfig.from_dict(fr) if fr else cfg.frontend


def cmd_detect(args, cfg: PipelineConfig):
    params, manifest = load_checkpoint(args.checkpoint)
    frontend = _frontend_of(manifest, cfg)
    w = read_wav(args.audio)
    edf = compute_edf(w, params, frontend, batch=cfg.detection.batch)
    tau = cfg.detection.tau if args.tau is None else args.tau
    min_lag = cfg.detection.min_lag if args.min_lag is None else args.min_lag
    events = peak_pick(edf, tau, min_lag)
    write_detections_csv(events, args.out)
    if args.edf_out:
        write_tensor(args.edf_out, edf.values, axes=["window"],
                     metadata={"frame_rate": edf.frame_rate, "start_time": edf.start_time,
                               "source": os.path.basename(args.audio)})
    if args.export_clips:
        paths = export_clips(w, events, args.export_clips)
        print(f"exported {len(paths)} clips to {args.export_clips}")
    print(f"{len(events)} detections -> {args.out}")


def _reference(path, sensor):
    groups = read_annotations_csv(path)
    if sensor is not None:
        if sensor not in groups:
            raise ValueError(f"{path}: no annotations for sensor {sensor!r}")
        return groups[sensor]
    if len(groups) > 1:
        raise UsageError(f"{path} holds several sensors; choose one with --sensor")
    return next(iter(groups.values())) if groups else read_detections_csv(path)


def _thresholds(cfg: PipelineConfig):
    n = cfg.evaluation.n_thresholds
    return DEFAULT_THRESHOLDS if n == 100 else np.arange(1, n + 1) / (n + 1.0)


def cmd_eval(args, cfg: PipelineConfig):
    if (args.detections is None) == (args.edf is None):
        raise UsageError("give exactly one of --detections or --edf")
    ref = _reference(args.reference, args.sensor)
    tol = cfg.evaluation.tolerance
    if args.edf is not None:
        values, header = read_tensor(args.edf)
        md = header.get("metadata", {})
        edf = EventDetectionFunction(values.astype(np.float64), md.get("frame_rate", 20.0),
                                     md.get("start_time", 0.075))
        min_lag = cfg.detection.min_lag if args.min_lag is None else args.min_lag
        curve = pr_curve(edf, ref, min_lag=min_lag, thresholds=_thresholds(cfg), tolerance=tol)
    else:
        det = read_detections_csv(args.detections)
        curve = pr_curve_from_events(det, ref, _thresholds(cfg), tolerance=tol)
    if args.out:
        curve.to_csv(args.out)
    tau, p, r, f = curve.best_f()
    print(f"AUPRC {curve.auprc:.6f}")
    print(f"best F {f:.6f} at threshold {tau:.6f} (precision {p:.6f}, recall {r:.6f})")


def cmd_timeline(args, cfg: PipelineConfig):
    ref = _reference(args.reference, args.sensor)
    det = read_detections_csv(args.detections)
    ev = cfg.evaluation
    cells = recall_timeline(det, ref, segment=ev.segment, band_split=ev.band_split,
                            tolerance=ev.tolerance)
    text = timeline_csv(cells, args.out)
    if args.out is None:
        sys.stdout.write(text)
    else:
        print(f"{len(cells)} cells -> {args.out}")


# -- self-tests and reports --------------------------------------------------------

def cmd_gradcheck(args, cfg: PipelineConfig):
    forms = args.formulation or [f.value for f in Formulation]
    results = run_gradcheck(forms, n_instances=args.instances, geometry=cfg.geometry_spec,
                            seed=cfg.seed)
    ok = True
    for r in results:
        passed = r.max_rel_error <= GRADCHECK_TOLERANCE
        ok &= passed
        print(f"{r.formulation:6s} max relative error {r.max_rel_error:.3e} "
              f"({r.n_checked} coordinates, worst {r.worst_tensor}) "
              f"{'ok' if passed else 'FAILED'}")
    if not ok:
        raise ValueError(f"gradient check failed: tolerance {GRADCHECK_TOLERANCE:g}")


def cmd_bench(args, cfg: PipelineConfig):
    if args.audio:
        w = read_wav(args.audio)
    else:
        profile = default_profiles(1, cfg.seed)[0]
        w = synth_background(profile, args.duration, 22050)
    spec = cfg.frontend.spectrogram
    t0 = time.perf_counter()
    E = melspectrogram(w, spec)
    t1 = time.perf_counter()
    pcen(E, cfg.frontend.pcen)
    t2 = time.perf_counter()
    total = t2 - t0
    print(f"audio {w.duration:.1f} s at {w.sample_rate} Hz, {E.n_frames} frames x {E.n_bands} bands")
    print(f"melspectrogram {t1 - t0:.3f} s, pcen {t2 - t1:.3f} s, total {total:.3f} s")
    print(f"real-time factor {w.duration / total:.1f}x")


def cmd_study(args, cfg: PipelineConfig):
    spec = night_spec(cfg)
    seeds = tuple(args.seeds) if args.seeds else (0, 1, 2)

    def progress(r):
        print(f"{r.model:14s} seed {r.seed} fold {r.fold} ({r.test_sensor}): "
              f"AUPRC {r.auprc:.4f}, recall {r.best_recall:.4f}", flush=True)

    tc = TrainConfig(**{**cfg.train.to_dict(),
                        "epochs": args.epochs or STUDY_TRAIN_CONFIG.epochs,
                        "patience": args.patience or STUDY_TRAIN_CONFIG.patience})
    t0 = time.perf_counter()
    result = run_study(spec, seeds, STUDY_MODELS, cfg.geometry_spec, tc,
                       cfg.detection.min_lag, cfg.frontend, progress, max_workers(args.jobs))
    if args.out:
        with open(args.out, "w") as f:
            f.write("model,seed,fold,test_sensor,auprc,threshold,precision,recall\n")
            for r in result.folds:
                f.write(f"{r.model},{r.seed},{r.fold},{r.test_sensor},{r.auprc:.6f},"
                        f"{r.best_threshold:.6f},{r.best_precision:.6f},{r.best_recall:.6f}\n")
    for name, _, _ in STUDY_MODELS:
        auprc, recall = result.table(name)
        med = np.median(auprc, axis=0)
        q75, q25 = np.percentile(recall, [75, 25], axis=1)
        print(f"{name:14s} median AUPRC per fold {np.round(med, 4).tolist()}, "
              f"recall IQR {float(np.median(q75 - q25)):.4f}")
    print(f"elapsed {time.perf_counter() - t0:.0f} s")


# -- argument parsing --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a configuration entry, e.g. train.epochs=5")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="robust-sed", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic multi-sensor night")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("featurize", parents=[common], help="audio to BVTF feature tensors")
    p.add_argument("audio", nargs="+", help="mono WAV files")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train", parents=[common], help="train a detector checkpoint")
    p.add_argument("--data", required=True, help="directory written by synth")
    p.add_argument("--out", required=True,
                   help="checkpoint path, or a directory with --fold all")
    p.add_argument("--fold", help="leave-one-sensor-out fold index, or 'all'")
    p.add_argument("--jobs", type=int, default=1, help="parallel fold workers")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", parents=[common], help="detect events in a recording")
    p.add_argument("audio")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="detections CSV")
    p.add_argument("--tau", type=float)
    p.add_argument("--min-lag", type=float)
    p.add_argument("--edf-out", help="also write the detection function as BVTF")
    p.add_argument("--export-clips", metavar="DIR", help="write one WAV clip per detection")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", parents=[common], help="precision-recall curve and AUPRC")
    p.add_argument("--detections", help="detections CSV")
    p.add_argument("--edf", help="detection function BVTF written by detect --edf-out")
    p.add_argument("--reference", required=True, help="annotations CSV")
    p.add_argument("--sensor", help="sensor id to select from the annotations")
    p.add_argument("--min-lag", type=float)
    p.add_argument("--out", help="PR curve CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("timeline", parents=[common], help="recall over time and frequency")
    p.add_argument("--detections", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--sensor")
    p.add_argument("--out", help="CSV path; printed when omitted")
    p.set_defaults(func=cmd_timeline)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference network self-test")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--formulation", action="append", choices=[f.value for f in Formulation])
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", parents=[common], help="featurization throughput report")
    p.add_argument("--audio", help="WAV file; a synthetic background otherwise")
    p.add_argument("--duration", type=float, default=600.0,
                   help="seconds of synthetic audio (default 600)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("study", parents=[common],
                       help="leave-one-sensor-out comparison of frontends and formulations")
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--out", help="per-fold results CSV")
    p.add_argument("--epochs", type=int, help=f"default {STUDY_TRAIN_CONFIG.epochs}")
    p.add_argument("--patience", type=int, help=f"default {STUDY_TRAIN_CONFIG.patience}")
    p.add_argument("--jobs", type=int, default=1, help="parallel trainings")
    p.set_defaults(func=cmd_study)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.set)
        args.func(args, cfg)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"robust-sed: error: {e}", file=sys.stderr)
        return 2
    except (ValueError, OSError, KeyError) as e:
        print(f"robust-sed {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line through the ``criterion`` fixture; the lines
are repeated in the pytest terminal summary. The study and Gaussianization
checks run at full desk scale and dominate the runtime (well over an hour on a
single core).
"""

import itertools
import os
import re
import time

import numpy as np
from scipy.special import expit

from robust_sed.cli import main
from robust_sed.detector import peak_pick
from robust_sed.evaluator import match_events, pr_curve
from robust_sed.events import EventDetectionFunction, EventList
from robust_sed.frontend import (
    DESK_SPECTROGRAM, INDOOR, OUTDOOR, SpectrogramConfig, TimeFrequencyMatrix, Waveform,
    distribution_stats, logmelspec, melspectrogram, pcen,
)
from robust_sed.network.gradcheck import GRADCHECK_TOLERANCE, run_gradcheck
from robust_sed.network.model import (
    DESK_GEOMETRY, DetectorParams, equivalent_threshold, forward_main, init_params,
    merge_at, merge_aw, merge_static, predict,
)
from robust_sed.pipeline import STUDY_MODELS, run_study
from robust_sed.synthdata import NightSpec, default_profiles, synth_background


def test_01_gradient_check(criterion):
    t0 = time.perf_counter()
    results = run_gradcheck(("static", "aw", "at", "moe"), n_instances=20,
                            geometry=DESK_GEOMETRY, h=1e-5)
    elapsed = time.perf_counter() - t0
    worst = max(r.max_rel_error for r in results)
    detail = ", ".join(f"{r.formulation} {r.max_rel_error:.1e}" for r in results)
    criterion(1, worst <= GRADCHECK_TOLERANCE and elapsed < 120,
              f"max relative error {detail} (tol {GRADCHECK_TOLERANCE:g}), {elapsed:.1f} s")


def _reduced(static: DetectorParams, form: str, seed: int) -> DetectorParams:
    """Context-adaptive parameters reproducing ``static``'s outputs exactly."""
    p = init_params(DESK_GEOMETRY, form, seed=seed)
    for k in ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "conv3_w", "conv3_b",
              "dense4_w", "dense4_b"):
        p.tensors[k] = static.tensors[k].copy()
    w, b = static.tensors["w"], float(static.tensors["b"])
    t = p.tensors
    if form == "at":
        # zero aux convolution: the embedding is the constant aux_dense_b
        t["aux_conv_w"][:] = 0
        t["aux_conv_b"][:] = 0
        t["aux_dense_b"][:] = 0
        t["aux_dense_b"][0] = abs(b)
        t["w_aux"][:] = 0
        t["w_aux"][0] = np.sign(b)
        t["w"] = w.copy()
    elif form == "aw":
        # the embedding is post-ReLU, so only nonnegative static weights are reachable
        t["aux_conv_w"][:] = 0
        t["aux_conv_b"][:] = 0
        t["aux_dense_b"] = w.copy()
        t["b"] = np.asarray(b)
    elif form == "moe":
        # uniform gates; each expert carries K times the static weights
        t["moe_w_aux"][:] = 0
        t["moe_b_aux"][:] = 0
        t["w"] = DESK_GEOMETRY.n_experts * w
        t["b"] = np.asarray(b)
    return p


def test_02_reduction_identities(criterion):
    rng = np.random.default_rng(2)
    static = init_params(DESK_GEOMETRY, "static", seed=5)
    static.tensors["w"] = np.abs(static.tensors["w"])
    static.tensors["b"] = np.asarray(-0.3)
    static.tensors["dense4_b"] = rng.normal(0, 0.1, DESK_GEOMETRY.n_hidden)
    x = rng.normal(size=(1000, DESK_GEOMETRY.n_frames, DESK_GEOMETRY.n_bands))
    c = rng.normal(size=(1000, DESK_GEOMETRY.n_quantiles, DESK_GEOMETRY.n_ctx_bands))
    ref = predict(x, None, static)
    errors = {}
    for form in ("aw", "at", "moe"):
        y = predict(x, c, _reduced(static, form, seed=7))
        errors[form] = float(np.max(np.abs(y - ref)))
    # the adaptive-weights head itself reduces for any signed weight vector
    z = forward_main(x, static)
    w_signed = rng.normal(size=DESK_GEOMETRY.n_hidden)
    errors["aw head, signed w"] = float(np.max(np.abs(
        merge_aw(z, np.broadcast_to(w_signed, z.shape), 0.2) - merge_static(z, w_signed, 0.2))))
    worst = max(errors.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errors.items())
    criterion(2, worst <= 1e-12, f"max |y - y_static| over 1000 inputs: {detail}")


def test_03_at_threshold_equivalence(criterion):
    rng = np.random.default_rng(3)
    violations = 0
    for _ in range(1000):
        n = DESK_GEOMETRY.n_hidden
        z, z_aux = np.abs(rng.normal(size=n)), np.abs(rng.normal(size=n))
        w, w_aux = rng.normal(0, 0.3, n), rng.normal(0, 0.3, n)
        tau = rng.uniform(0.01, 0.99)
        adaptive = merge_at(z, z_aux, w, w_aux) > tau
        shifted = expit(np.dot(z, w)) > equivalent_threshold(tau, z_aux, w_aux)
        violations += adaptive != shifted
    criterion(3, violations == 0, f"{violations} violations in 1000 draws")


def _brute_force(det, ref, tol=0.5):
    if len(det) > len(ref):
        det, ref = ref, det
    options = [[None] + [j for j, r in enumerate(ref) if abs(d - r) <= tol] for d in det]
    best = 0
    for choice in itertools.product(*options):
        used = [c for c in choice if c is not None]
        if len(used) == len(set(used)):
            best = max(best, len(used))
    return best


def test_04_matching_oracle(criterion):
    rng = np.random.default_rng(4)
    t0 = time.perf_counter()
    mismatches = 0
    for _ in range(500):
        det = rng.uniform(0, 4, rng.integers(0, 9))
        ref = rng.uniform(0, 4, rng.integers(0, 9))
        mismatches += match_events(det, ref, 0.5).tp != _brute_force(list(det), list(ref))
    elapsed = time.perf_counter() - t0
    criterion(4, mismatches == 0 and elapsed < 30,
              f"{mismatches} mismatches on 500 instances, {elapsed:.1f} s")


def test_05_pcen_steady_state(criterion):
    worst = 0.0
    hop, sr = 32, 22050
    for preset in (OUTDOOR, INDOOR):
        burn = int(np.ceil(20 * preset.T * sr / hop))
        for level in (1e-3, 1.0, 1e3):
            E = TimeFrequencyMatrix(np.full((burn + 200, 3), level), sr, hop, np.zeros((3, 2)))
            P = pcen(E, preset).values[burn:]
            expected = ((level / (preset.eps + level**preset.alpha) + preset.delta) ** preset.r
                        - preset.delta**preset.r)
            worst = max(worst, float(np.max(np.abs(P - expected))))
    criterion(5, worst <= 1e-6, f"max deviation from closed form {worst:.1e}")


def _pooled(mats):
    n = np.array([m.size for m in mats], dtype=float)
    mu = np.array([m.mean(dtype=np.float64) for m in mats])
    var = np.array([m.var(dtype=np.float64) for m in mats])
    loc = float((n * mu).sum() / n.sum())
    return loc, float(np.sqrt((n * (var + (mu - loc) ** 2)).sum() / n.sum()))


def test_06_gaussianization(criterion):
    per_seed = []
    ok = True
    for seed in range(100, 105):
        stats = {"logmel": [], "pcen": []}
        mats = {"logmel": [], "pcen": []}
        for profile in default_profiles(6, seed):
            E = melspectrogram(synth_background(profile, NightSpec().duration), DESK_SPECTROGRAM)
            burn = int(np.ceil(20 * OUTDOOR.T * E.sample_rate / E.hop_length))
            mats["logmel"].append(logmelspec(E).values.astype(np.float32))
            mats["pcen"].append(pcen(E, OUTDOOR).values[burn:].astype(np.float32))
            del E
        for name, ms in mats.items():
            loc, scale = _pooled(ms)
            stats[name] = [distribution_stats(m, loc, scale) for m in ms]
        del mats
        kurt_wins = sum(abs(p.excess_kurtosis) < abs(lg.excess_kurtosis)
                        for p, lg in zip(stats["pcen"], stats["logmel"]))
        spread_l = np.std([s.mode_location for s in stats["logmel"]])
        spread_p = np.std([s.mode_location for s in stats["pcen"]])
        shrink = 1 - spread_p / spread_l
        ok &= kurt_wins >= 5 and shrink >= 0.5
        per_seed.append(f"seed {seed}: kurtosis {kurt_wins}/6, mode spread "
                        f"{spread_l:.2f} -> {spread_p:.2f} ({100 * shrink:.0f}%)")
    criterion(6, ok, "; ".join(per_seed))


def test_07_desk_scale_study(criterion):
    jobs = min(4, os.cpu_count() or 1)
    t0 = time.perf_counter()
    result = run_study(NightSpec(), seeds=(0, 1, 2), jobs=jobs)
    hours = (time.perf_counter() - t0) / 3600
    auprc = {name: result.table(name)[0] for name, _, _ in STUDY_MODELS}
    recall = {name: result.table(name)[1] for name, _, _ in STUDY_MODELS}
    med_at = np.median(auprc["pcen-at"], axis=0)
    med_lm = np.median(auprc["logmel-static"], axis=0)
    folds_won = int(np.sum(med_at >= med_lm))

    def iqr(r):
        q75, q25 = np.percentile(r, [75, 25], axis=1)
        return float(np.median(q75 - q25))

    iqr_at, iqr_st = iqr(recall["pcen-at"]), iqr(recall["pcen-static"])
    ok = folds_won >= 4 and iqr_at < iqr_st and hours <= 4
    criterion(7, ok,
              f"pcen-at >= logmel-static on {folds_won}/6 folds "
              f"(median AUPRC {np.round(med_at, 3).tolist()} vs {np.round(med_lm, 3).tolist()}); "
              f"recall IQR pcen-at {iqr_at:.3f} vs pcen-static {iqr_st:.3f}; "
              f"{hours:.2f} h on {jobs} worker(s)")


def test_08_oracle_and_noise_edf(criterion):
    rng = np.random.default_rng(8)
    ref = np.sort(rng.choice(np.arange(2, 590), 40, replace=False)) + 0.3
    v = np.full(int((600 - 0.15) * 20) + 1, 0.01)
    v[np.rint((ref - 0.075) * 20).astype(int)] = 0.99
    oracle = pr_curve(EventDetectionFunction(v), EventList(ref)).auprc
    # iid uniform EDF: a frame is a local maximum above tau with probability
    # (1 - tau^3) / 3, and every sparse reference is matched
    tau, n = 0.01, 12000
    refs = EventList(np.arange(5.0, 595.0, 15.0))
    prevalence = len(refs) / (n * (1 - tau**3) / 3)
    precisions = []
    for seed in range(20):
        edf = EventDetectionFunction(np.random.default_rng([8, seed]).uniform(size=n))
        precisions.append(pr_curve(edf, refs, thresholds=[tau]).precision[0])
    se = np.std(precisions, ddof=1) / np.sqrt(len(precisions))
    gap = abs(np.mean(precisions) - prevalence)
    criterion(8, oracle >= 0.99 and gap <= 3 * se,
              f"oracle AUPRC {oracle:.4f}; noise precision {np.mean(precisions):.5f} vs "
              f"prevalence {prevalence:.5f} (|diff| {gap:.1e}, 3 SE {3 * se:.1e})")


def test_09_peak_pick_properties(criterion):
    rng = np.random.default_rng(9)
    nested = gaps = True
    for _ in range(100):
        edf = EventDetectionFunction(np.round(rng.uniform(size=400), 2))
        t1, t2 = np.sort(rng.uniform(0.01, 0.99, 2))
        lo = set(peak_pick(edf, t1).times)
        hi = set(peak_pick(edf, t2).times)
        nested &= hi <= lo
        thinned = peak_pick(edf, t1, min_lag=0.150)
        gaps &= bool(np.all(np.diff(thinned.times) >= 0.150))
    criterion(9, nested and gaps, f"subset property {'held' if nested else 'violated'}; "
                                  f"150 ms gaps {'held' if gaps else 'violated'} on 100 EDFs")


def test_10_throughput(criterion):
    x = np.random.default_rng(10).uniform(-0.1, 0.1, 600 * 22050)
    w = Waveform(x, 22050)
    t0 = time.perf_counter()
    pcen(melspectrogram(w, SpectrogramConfig()), OUTDOOR)
    elapsed = time.perf_counter() - t0
    criterion(10, elapsed <= 30,
              f"10 min of audio featurized in {elapsed:.1f} s ({600 / elapsed:.0f}x real time)")


def _pipeline_auprc(root, capsys):
    opts = ["--set", "synth.duration=30", "--set", "synth.n_calls=8", "--set",
            "synth.n_sensors=3", "--set", "train.epochs=2", "--set", "seed=11"]
    steps = [
        ["synth", "--out", str(root / "data")],
        ["train", "--data", str(root / "data"), "--out", str(root / "m.ckpt"), "--fold", "0"],
        ["detect", str(root / "data" / "audio" / "S1.wav"), "--checkpoint",
         str(root / "m.ckpt"), "--out", str(root / "det.csv"), "--tau", "0.01"],
        ["eval", "--detections", str(root / "det.csv"), "--reference",
         str(root / "data" / "annotations.csv"), "--sensor", "S1"],
    ]
    for argv in steps:
        assert main(argv + opts) == 0
    out = capsys.readouterr().out
    return re.search(r"AUPRC (\S+)", out).group(1)


def test_11_determinism(criterion, tmp_path, capsys):
    a = _pipeline_auprc(tmp_path / "a", capsys)
    b = _pipeline_auprc(tmp_path / "b", capsys)
    criterion(11, a == b, f"AUPRC run 1 {a}, run 2 {b}")

"""Scene/channel synthesis and end-to-end orchestration: neural filter ->
spatial tuple extraction -> temporal prediction, with delimited outputs
and a reproducible run report.

Wall-clock timings are written to a separate timing.json so that
report.json is byte-identical across equally seeded runs.
"""

import copy
import csv
import io
import json
import os
import shutil
import time

import numpy as np

from neurocam import hardware as hwmod
from neurocam import reservoir as rv
from neurocam import spatial as sp
from neurocam import temporal as tmod
from neurocam.core import Frame, RngStream, TimeSeries, nrmse


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__("stage %r failed: %s" % (stage, cause))
        self.stage = stage
        self.cause = cause


class ConfigError(ValueError):
    pass


MOTION_VARS = ("x", "y", "h", "w", "theta", "phi_x", "phi_y")


# ---------------------------------------------------------------------------
# Configuration


DEFAULT_CONFIG = {
    "seed": 1234,
    "scene": {
        "tag": "square",
        "frames": 200,
        "frame_size": 64,
        "vars": {
            "x": {"const": 32.0, "terms": [[12.0, 2 * np.pi / 100.0, 0.0]]},
            "y": {"const": 32.0, "terms": [[12.0, 4 * np.pi / 100.0, np.pi / 3.0]]},
            "h": {"const": 13.0, "terms": []},
            "w": {"const": 13.0, "terms": []},
            "theta": {"const": 0.0, "terms": [[10.0, 2 * np.pi / 180.0, 0.0]]},
            "phi_x": {"const": 0.0, "terms": []},
            "phi_y": {"const": 0.0, "terms": []},
        },
    },
    "channel": {
        "taps": [0.5, 0.25, 0.1],
        "poly": [0.0, 1.0, 0.036, -0.011],
        "snr_db": None,
    },
    "reservoir": {
        "n": 300,
        "a": 1.0,
        "rho": 0.5,
        "connectivity": 0.05,
        "input_scale": 0.3,
        "fb_scale": 0.0,
        "ridge_lambda": 1e-12,
        "washout": 200,
        "train_len": 4000,
        "test_len": 2000,
        "per_pixel": False,
    },
    "spatial": {
        "n_per_class": 300,
        "epochs": 40,
        "lr": 0.2,
        "batch_size": 32,
        "scales": [8, 12, 16, 24, 32],
        "stride": 4,
        "confidence": 0.5,
        "patch_fill": 0.8,
        "time_no_prior_frames": 1,
    },
    "temporal": {
        "buckets": 140,
        "w": 9,
        "columns": 256,
        "cells_per_column": 8,
        "alarm_threshold": 0.5,
        "warmup": 50,
    },
    "hardware": {
        "g_min": 1e-6,
        "g_max": 1e-4,
        "quant_bits": 6,
        "kappa": 1.0,
        "readout_ridge_lambda": 1e-4,
    },
}


def default_config():
    return copy.deepcopy(DEFAULT_CONFIG)


def validate_config(config):
    for key in ("seed", "scene", "channel", "reservoir", "spatial", "temporal",
                "hardware"):
        if key not in config:
            raise ConfigError("missing config key: %r" % key)
    for key in ("tag", "frames", "frame_size", "vars"):
        if key not in config["scene"]:
            raise ConfigError("missing config key: scene.%s" % key)
    for v in MOTION_VARS:
        if v not in config["scene"]["vars"]:
            raise ConfigError("missing config key: scene.vars.%s" % v)
    return config


def load_config(path):
    with open(path) as f:
        return validate_config(json.load(f))


# ---------------------------------------------------------------------------
# Scene generation


class TrajectorySpec:
    """Sum-of-sinusoids generator per motion variable."""

    def __init__(self, scene_config):
        self.tag = scene_config["tag"]
        self.frames = int(scene_config["frames"])
        self.frame_size = int(scene_config["frame_size"])
        self.vars = scene_config["vars"]
        if self.frames < 1:
            raise ValueError("frame count must be >= 1")

    def value(self, var, t):
        spec = self.vars[var]
        v = spec.get("const", 0.0)
        for amp, omega, phase in spec.get("terms", ()):
            v += amp * np.sin(omega * t + phase)
        return v

    def tuple_at(self, t):
        vals = {v: self.value(v, t) for v in MOTION_VARS}
        return sp.SpatialTuple(tag=self.tag, p=1.0, **vals)

    def trajectory(self, n=None):
        """Ground-truth motion table, shape (n, 7), row order MOTION_VARS."""
        n = self.frames if n is None else n
        return np.array([[self.value(v, t) for v in MOTION_VARS]
                         for t in range(n)])


def _check_in_frame(tp, size):
    # conservative bound: transformed box corners must stay inside
    M = sp._transform_matrix(tp.theta, tp.phi_x, tp.phi_y)
    corners = np.array([[sx * tp.w / 2.0, sy * tp.h / 2.0]
                        for sx in (-1, 1) for sy in (-1, 1)])
    pts = corners @ M.T + np.array([tp.x, tp.y])
    if pts.min() < 0 or pts.max() > size:
        raise ValueError("trajectory drives shape outside the %dx%d frame"
                         % (size, size))


def generate_scene(spec, rng=None):
    """Render the scene and its ground-truth tuples (p = 1)."""
    frames = []
    truths = []
    size = spec.frame_size
    for t in range(spec.frames):
        tp = spec.tuple_at(t)
        _check_in_frame(tp, size)
        img = sp.render_shape((size, size), spec.tag, tp.x, tp.y, tp.w, tp.h,
                              theta=tp.theta, phi_x=tp.phi_x, phi_y=tp.phi_y)
        frames.append(Frame(np.clip(img, 0.0, 1.0)))
        truths.append(tp)
    return frames, truths


# ---------------------------------------------------------------------------
# Channel model


class ChannelSpec:
    def __init__(self, taps, poly, snr_db=None):
        self.taps = np.asarray(taps, dtype=np.float64)
        self.poly = np.asarray(poly, dtype=np.float64)
        if self.taps.size == 0 or not np.any(self.taps):
            raise ValueError("need at least one nonzero tap")
        if len(self.poly) > 4:
            raise ValueError("polynomial degree must be <= 3")
        if snr_db is not None and not snr_db > 0:
            raise ValueError("SNR must be positive when present")
        self.snr_db = snr_db

    @classmethod
    def from_config(cls, ch):
        return cls(ch["taps"], ch["poly"], ch.get("snr_db"))


def apply_channel(clean, ch, rng=None):
    """FIR taps then pointwise polynomial then optional AWGN at SNR."""
    if isinstance(clean, TimeSeries):
        d, dt = clean.samples, clean.dt
    else:
        d, dt = np.asarray(clean, dtype=np.float64), 1.0
    v = np.zeros_like(d)
    for i, tap in enumerate(ch.taps):
        if i == 0:
            v += tap * d
        else:
            v[i:] += tap * d[:-i]
    u = np.zeros_like(v)
    for j, c in enumerate(ch.poly):
        u += c * v ** j
    if ch.snr_db is not None:
        if rng is None:
            raise ValueError("noisy channel requires an rng")
        power = np.mean(u ** 2)
        noise_power = power / 10.0 ** (ch.snr_db / 10.0)
        u = u + rng.normal(0.0, np.sqrt(noise_power), u.shape)
    return TimeSeries(u, dt=dt)


def make_bipolar(rng, length, amplitude=0.5):
    """Random bipolar +-amplitude training/test signal."""
    return TimeSeries(np.where(rng.uniform(size=length) < 0.5,
                               -amplitude, amplitude))


# ---------------------------------------------------------------------------
# Stages


def build_equalizer(config, rng):
    """Train the reference-channel inverse model.

    Returns (trained reservoir, dict of series, metrics fragment).
    The reservoir state is left at the end of the training segment so
    the test segment runs transient-free.
    """
    rc = config["reservoir"]
    ch = ChannelSpec.from_config(config["channel"])
    total = rc["train_len"] + rc["test_len"]
    d = make_bipolar(rng.substream(1), total)
    u = apply_channel(d, ch, rng.substream(2))

    params = rv.ReservoirParams(
        n=rc["n"], a=rc["a"], rho=rc["rho"], connectivity=rc["connectivity"],
        input_scale=rc["input_scale"], fb_scale=rc["fb_scale"],
        ridge_lambda=rc["ridge_lambda"], washout=rc["washout"])
    res = rv.init_reservoir(params, rng.substream(3))
    tr_u, te_u = u.samples[:rc["train_len"]], u.samples[rc["train_len"]:]
    tr_d, te_d = d.samples[:rc["train_len"]], d.samples[rc["train_len"]:]
    states, targets = rv.harvest_states(res, tr_u, tr_d)
    trained = rv.train_readout(res, states, targets)

    recovered = rv.equalize(trained, te_u)
    fragment = {
        "train_len": rc["train_len"],
        "test_len": rc["test_len"],
        "test_nrmse": nrmse(recovered.samples, te_d),
        "baseline_nrmse": nrmse(te_u, te_d),
        "snr_db": ch.snr_db,
    }
    series = {"clean": TimeSeries(te_d), "distorted": TimeSeries(te_u),
              "recovered": recovered}
    return trained, series, fragment


def run_filter_stage(config, rng):
    _, series, fragment = build_equalizer(config, rng)
    return series, fragment


def filter_frames(trained, frames, ch, rng):
    """Per-pixel neural filtering demo: distort every pixel's time series
    through the channel, then run the shared equalizer over each pixel
    independently.  Returns (distorted, recovered) frame lists."""
    size = frames[0].pixels.shape
    stack = np.array([f.pixels for f in frames])          # (T, H, W)
    T = stack.shape[0]
    flat = stack.reshape(T, -1) - 0.5                     # center like +-0.5 data
    dist = np.column_stack([
        apply_channel(flat[:, i], ch, rng.substream(1000 + i)).samples
        for i in range(flat.shape[1])])
    rec = rv.run_batch(trained, dist)
    dist_frames = [Frame(np.clip(dist[t].reshape(size) + 0.5, 0, 1)) for t in range(T)]
    rec_frames = [Frame(np.clip(rec[t].reshape(size) + 0.5, 0, 1)) for t in range(T)]
    return dist_frames, rec_frames


def search_config(config):
    s = config["spatial"]
    return sp.SearchConfig(
        scales=tuple(s["scales"]), stride=s["stride"],
        confidence=s["confidence"], patch_fill=s["patch_fill"])


def train_tracking_net(config, rng):
    s = config["spatial"]
    patches, labels, classes = sp.make_training_patches(
        rng.substream(10), n_per_class=s["n_per_class"],
        fill=s["patch_fill"])
    net = sp.train(sp.ConvNet(classes), patches, labels,
                   epochs=s["epochs"], lr=s["lr"],
                   batch_size=s["batch_size"], rng=rng.substream(11))
    return net


def _iou(a, b):
    def bounds(tp):
        return (tp.x - tp.w / 2, tp.x + tp.w / 2, tp.y - tp.h / 2, tp.y + tp.h / 2)
    ax0, ax1, ay0, ay1 = bounds(a)
    bx0, bx1, by0, by1 = bounds(b)
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union if union > 0 else 0.0


def run_tracking_stage(frames, net, config, truths=None, use_prior=True):
    """Per-frame tuple extraction, feeding each result forward as the
    next frame's prior.  Counts classifier forward passes for the
    prior-speedup comparison and optionally times a few frames of
    exhaustive search."""
    cfg = search_config(config)
    shape = frames[0].pixels.shape
    tuples = []
    prior = None
    evals = 0
    t0 = time.perf_counter()
    for fr in frames:
        evals += sp.search_size(shape, prior, cfg)
        tp = sp.extract_tuple(net, fr, prior, cfg)
        tuples.append(tp)
        prior = tp if (use_prior and tp.tag != sp.BACKGROUND) else None
    elapsed = time.perf_counter() - t0

    exhaustive_per_frame = sp.search_size(shape, None, cfg)
    fragment = {
        "frames": len(frames),
        "forward_passes": evals,
        "forward_passes_exhaustive": exhaustive_per_frame * len(frames),
        "prior_used": use_prior,
    }
    timing = {"tracking_s": elapsed, "frames_per_s": len(frames) / elapsed}

    n_time = config["spatial"].get("time_no_prior_frames", 0)
    if use_prior and n_time > 0:
        t0 = time.perf_counter()
        for fr in frames[:n_time]:
            sp.extract_tuple(net, fr, None, cfg)
        per_frame = (time.perf_counter() - t0) / n_time
        timing["no_prior_s_per_frame"] = per_frame
        timing["with_prior_s_per_frame"] = elapsed / len(frames)

    if truths is not None:
        tags = [tp.tag == gt.tag for tp, gt in zip(tuples, truths)]
        ious = [_iou(tp, gt) for tp, gt in zip(tuples, truths)]
        mae = {}
        for i, var in enumerate(MOTION_VARS):
            err = [abs(getattr(tp, var) - getattr(gt, var))
                   for tp, gt in zip(tuples, truths)]
            mae[var] = float(np.mean(err))
        theta_hits = [abs(tp.theta - gt.theta) <= 15.0
                      for tp, gt in zip(tuples, truths)]
        fragment.update({
            "tag_accuracy": float(np.mean(tags)),
            "mean_iou": float(np.mean(ious)),
            "mae": mae,
            "theta_within_one_step": float(np.mean(theta_hits)),
        })
    return tuples, fragment, timing


def run_temporal_stage(tuples, config, rng):
    """Seven independent temporal memories, one per motion variable."""
    if len(tuples) < 100:
        raise ValueError("need at least 100 tuples, got %d" % len(tuples))
    tc = config["temporal"]
    warmup = tc["warmup"]
    threshold = tc["alarm_threshold"]
    traces = {}
    events = {}
    fragment = {"per_variable": {}}
    for i, var in enumerate(MOTION_VARS):
        values = np.array([getattr(tp, var) for tp in tuples], dtype=np.float64)
        vmin, vmax = values.min(), values.max()
        pad = 0.05 * (vmax - vmin) if vmax > vmin else 0.5
        enc = tmod.ScalarEncoder(vmin - pad, vmax + pad,
                                 buckets=tc["buckets"], w=tc["w"])
        tm = tmod.TemporalMemory(columns=tc["columns"],
                                 cells_per_column=tc["cells_per_column"],
                                 rng=rng.substream(20 + i))
        preds, anoms = tmod.track_variable(values, enc, tm)
        flagged = [int(t) for t in np.flatnonzero(anoms.samples >= threshold)
                   if t >= warmup]
        traces[var] = (values, preds.samples, anoms.samples)
        events[var] = flagged
        last_q = anoms.samples[-(len(values) // 4):]
        fragment["per_variable"][var] = {
            "mean_anomaly_last_quartile": float(np.mean(last_q)),
            "alarming_events": flagged,
        }
    fragment["alarm_threshold"] = threshold
    fragment["warmup"] = warmup
    return traces, events, fragment


# ---------------------------------------------------------------------------
# Orchestration and report output


def _write_series_csv(path, columns):
    names = list(columns)
    arrays = [np.asarray(columns[k]) for k in names]
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(names)
        for row in zip(*arrays):
            w.writerow([repr(float(v)) for v in row])


def run_pipeline(config, out_dir):
    """Run all stages in order and write the report plus stage CSVs.

    The output directory appears only on success (work happens in a
    temp sibling that is atomically renamed).
    """
    validate_config(config)
    if os.path.exists(out_dir) and os.listdir(out_dir):
        raise ValueError("output directory %r exists and is not empty" % out_dir)
    tmp_dir = out_dir.rstrip("/\\") + ".tmp-%d" % os.getpid()
    if os.path.exists(tmp_dir):
        shutil.rmtree(tmp_dir)
    os.makedirs(tmp_dir)
    try:
        report, timing = _run_pipeline_into(config, tmp_dir)
    except Exception:
        shutil.rmtree(tmp_dir, ignore_errors=True)
        raise
    if os.path.exists(out_dir):
        os.rmdir(out_dir)
    os.rename(tmp_dir, out_dir)
    return report, timing


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except Exception as e:
        raise StageError(name, e) from e


def _run_pipeline_into(config, out):
    rng = RngStream(config["seed"])
    report = {"config": config, "seed": config["seed"], "stages": {}}
    timing = {}

    t0 = time.perf_counter()
    trained, series, frag = _stage("filter", build_equalizer, config,
                                   rng.substream(1))
    timing["filter_s"] = time.perf_counter() - t0
    report["stages"]["filter"] = frag
    _write_series_csv(os.path.join(out, "filter_recovery.csv"), {
        "t": np.arange(len(series["clean"])),
        "clean": series["clean"].samples,
        "distorted": series["distorted"].samples,
        "recovered": series["recovered"].samples,
    })

    t0 = time.perf_counter()
    spec = TrajectorySpec(config["scene"])
    frames, truths = _stage("scene", generate_scene, spec, rng.substream(2))
    timing["scene_s"] = time.perf_counter() - t0
    frames_dir = os.path.join(out, "frames")
    os.makedirs(frames_dir)
    for i, fr in enumerate(frames):
        fr.save(os.path.join(frames_dir, "frame_%05d.pgm" % i))
    with open(os.path.join(out, "ground_truth.csv"), "w") as f:
        f.write(sp.tuples_to_csv(truths))

    ch = ChannelSpec.from_config(config["channel"])
    track_frames = frames
    if config["reservoir"].get("per_pixel"):
        t0 = time.perf_counter()
        _dist, rec = _stage("pixel-filter", filter_frames, trained, frames,
                            ch, rng.substream(3))
        timing["pixel_filter_s"] = time.perf_counter() - t0
        track_frames = rec

    t0 = time.perf_counter()
    net = _stage("spatial-train", train_tracking_net, config, rng.substream(4))
    timing["spatial_train_s"] = time.perf_counter() - t0
    with open(os.path.join(out, "model.json"), "w") as f:
        f.write(net.to_json())

    t0 = time.perf_counter()
    tuples, frag, track_timing = _stage("tracking", run_tracking_stage,
                                        track_frames, net, config, truths)
    timing["tracking_s"] = time.perf_counter() - t0
    timing.update({("tracking_" + k): v for k, v in track_timing.items()})
    report["stages"]["tracking"] = frag
    with open(os.path.join(out, "tuples.csv"), "w") as f:
        f.write(sp.tuples_to_csv(tuples))

    t0 = time.perf_counter()
    traces, events, frag = _stage("temporal", run_temporal_stage, tuples,
                                  config, rng.substream(5))
    timing["temporal_s"] = time.perf_counter() - t0
    report["stages"]["temporal"] = frag
    for var, (actual, preds, anoms) in traces.items():
        _write_series_csv(os.path.join(out, "temporal_%s.csv" % var), {
            "t": np.arange(len(actual)),
            "actual": actual,
            "predicted": preds,
            "anomaly": anoms,
        })

    t0 = time.perf_counter()
    neuron = hwmod.MtjNeuron(kappa=config["hardware"]["kappa"],
                             rng=rng.substream(6))
    grid = np.round(np.arange(-2.0, 2.0 + 1e-9, 0.1), 10)
    means, stderrs = _stage("hardware", hwmod.mtj_transfer_curve,
                            neuron, grid, 10000)
    timing["hardware_s"] = time.perf_counter() - t0
    _write_series_csv(os.path.join(out, "mtj_transfer.csv"), {
        "input": grid, "mean": means, "stderr": stderrs,
    })
    with open(os.path.join(out, "mtj_meta.json"), "w") as f:
        json.dump({"kappa": config["hardware"]["kappa"],
                   "samples_per_point": 10000}, f, indent=2, sort_keys=True)
        f.write("\n")

    with open(os.path.join(out, "report.json"), "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(os.path.join(out, "timing.json"), "w") as f:
        json.dump(timing, f, indent=2, sort_keys=True)
        f.write("\n")
    return report, timing

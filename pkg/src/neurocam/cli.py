"""Command line front end.

Subcommands mirror the pipeline stages (gen-scene, filter, track,
predict, run) plus hardware demos (hw).  Every command writes CSV/JSON
into --out; failures exit nonzero with a one-line error JSON on stderr.
"""

import argparse
import csv
import glob
import json
import os
import sys

import numpy as np

from neurocam import hardware as hw
from neurocam import pipeline as pl
from neurocam import spatial as sp
from neurocam.core import Frame, RngStream


def _ensure_out(path):
    os.makedirs(path, exist_ok=True)
    return path


def _load_config(args):
    if args.config:
        return pl.load_config(args.config)
    return pl.default_config()


def _write_json(path, doc):
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, float) else v
                        for v in row])


# ---------------------------------------------------------------------------
# Stage commands


def cmd_gen_scene(args):
    config = _load_config(args)
    out = _ensure_out(args.out)
    spec = pl.TrajectorySpec(config["scene"])
    frames, truths = pl.generate_scene(spec)
    frames_dir = _ensure_out(os.path.join(out, "frames"))
    for i, fr in enumerate(frames):
        fr.save(os.path.join(frames_dir, "frame_%05d.pgm" % i))
    with open(os.path.join(out, "ground_truth.csv"), "w") as f:
        f.write(sp.tuples_to_csv(truths))
    _write_json(os.path.join(out, "scene.json"), config["scene"])
    return 0


def cmd_filter(args):
    config = _load_config(args)
    out = _ensure_out(args.out)
    rng = RngStream(config["seed"])
    series, fragment = pl.run_filter_stage(config, rng.substream(1))
    pl._write_series_csv(os.path.join(out, "filter_recovery.csv"), {
        "t": np.arange(len(series["clean"])),
        "clean": series["clean"].samples,
        "distorted": series["distorted"].samples,
        "recovered": series["recovered"].samples,
    })
    _write_json(os.path.join(out, "filter_report.json"), fragment)
    return 0


def _load_frames(frames_dir):
    paths = sorted(glob.glob(os.path.join(frames_dir, "frame_*.pgm")))
    if not paths:
        raise ValueError("no frame_*.pgm files in %r" % frames_dir)
    return [Frame.load(p) for p in paths]


def cmd_track(args):
    config = _load_config(args)
    out = _ensure_out(args.out)
    frames = _load_frames(args.frames)
    with open(args.model) as f:
        net = sp.ConvNet.from_json(f.read())
    truths = None
    gt_path = os.path.join(os.path.dirname(args.frames.rstrip("/\\")),
                           "ground_truth.csv")
    if os.path.exists(gt_path):
        with open(gt_path) as f:
            truths = sp.tuples_from_csv(f.read())
    tuples, fragment, timing = pl.run_tracking_stage(
        frames, net, config, truths, use_prior=not args.no_prior)
    with open(os.path.join(out, "tuples.csv"), "w") as f:
        f.write(sp.tuples_to_csv(tuples))
    _write_json(os.path.join(out, "track_report.json"), fragment)
    _write_json(os.path.join(out, "track_timing.json"), timing)
    return 0


def cmd_predict(args):
    config = _load_config(args)
    out = _ensure_out(args.out)
    with open(args.tuples) as f:
        tuples = sp.tuples_from_csv(f.read())
    rng = RngStream(config["seed"])
    traces, _events, fragment = pl.run_temporal_stage(tuples, config,
                                                      rng.substream(5))
    for var, (actual, preds, anoms) in traces.items():
        pl._write_series_csv(os.path.join(out, "temporal_%s.csv" % var), {
            "t": np.arange(len(actual)),
            "actual": actual,
            "predicted": preds,
            "anomaly": anoms,
        })
    _write_json(os.path.join(out, "temporal_report.json"), fragment)
    return 0


def cmd_run(args):
    config = _load_config(args)
    report, timing = pl.run_pipeline(config, args.out)
    if not args.no_figures:
        _render_run_figures(args.out)
    line = report["stages"]["filter"]
    print("filter NRMSE %.3g (baseline %.3g)"
          % (line["test_nrmse"], line["baseline_nrmse"]))
    tr = report["stages"]["tracking"]
    if "tag_accuracy" in tr:
        print("tracking tag accuracy %.3f, mean IoU %.3f"
              % (tr["tag_accuracy"], tr["mean_iou"]))
    return 0


# ---------------------------------------------------------------------------
# Report figures


def _render_run_figures(run_dir):
    """Quick-look plots next to the delimited outputs of a run."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig_dir = _ensure_out(os.path.join(run_dir, "figures"))

    def read_csv(name):
        with open(os.path.join(run_dir, name), newline="") as f:
            rows = list(csv.reader(f))
        header = rows[0]
        data = np.array([[float(v) for v in r] for r in rows[1:]])
        return {h: data[:, i] for i, h in enumerate(header)}

    rec = read_csv("filter_recovery.csv")
    n = min(200, len(rec["t"]))
    fig, ax = plt.subplots(figsize=(8, 3))
    ax.plot(rec["t"][:n], rec["clean"][:n], label="clean", lw=1)
    ax.plot(rec["t"][:n], rec["distorted"][:n], label="distorted", lw=1)
    ax.plot(rec["t"][:n], rec["recovered"][:n], label="recovered", lw=1,
            ls="--")
    ax.set_xlabel("t")
    ax.set_ylabel("signal")
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(os.path.join(fig_dir, "filter_recovery.png"), dpi=120)
    plt.close(fig)

    tx = read_csv("temporal_x.csv")
    ty = read_csv("temporal_y.csv")
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.plot(tx["actual"], ty["actual"], label="actual", lw=1)
    ax.plot(tx["predicted"], ty["predicted"], label="predicted", lw=1,
            ls="--")
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    ax.set_aspect("equal")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(os.path.join(fig_dir, "trajectory.png"), dpi=120)
    plt.close(fig)

    fig, axes = plt.subplots(len(pl.MOTION_VARS), 1, sharex=True,
                             figsize=(8, 9))
    for ax, var in zip(axes, pl.MOTION_VARS):
        tv = read_csv("temporal_%s.csv" % var)
        ax.plot(tv["t"], tv["anomaly"], lw=0.8)
        ax.set_ylabel(var, fontsize=8)
        ax.set_ylim(-0.05, 1.05)
    axes[-1].set_xlabel("t")
    fig.tight_layout()
    fig.savefig(os.path.join(fig_dir, "anomaly.png"), dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------------------
# Hardware demos


def cmd_hw(args):
    out = _ensure_out(args.out)
    rng = RngStream(args.seed)
    if args.demo == "mtj":
        neuron = hw.MtjNeuron(kappa=1.0, rng=rng.substream(1))
        grid = np.round(np.arange(-2.0, 2.0 + 1e-9, 0.1), 10)
        means, stderrs = hw.mtj_transfer_curve(neuron, grid, 10000)
        _write_csv(os.path.join(out, "mtj_transfer.csv"),
                   ["input", "mean", "stderr"],
                   zip(grid.tolist(), means.tolist(), stderrs.tolist()))
        _write_json(os.path.join(out, "mtj_meta.json"),
                    {"kappa": neuron.kappa, "samples_per_point": 10000})
    elif args.demo == "retention":
        tau0 = 1e-9
        rows = []
        for u in np.arange(0.0, 61.0, 5.0):
            rows.append((float(u), hw.retention_time(float(u), tau0)))
        _write_csv(os.path.join(out, "retention.csv"),
                   ["u_over_kt", "tau_s"], rows)
    elif args.demo == "crossbar":
        W = rng.substream(1).uniform(-1.0, 1.0, (8, 8))
        v = rng.substream(2).uniform(-1.0, 1.0, 8)
        rows = []
        for bits in (None, 8, 6, 4):
            xb = hw.program_crossbar(W, 1e-6, 1e-4, quant_bits=bits)
            decode_err = np.max(np.abs(xb.decode() - W))
            matvec_err = np.max(np.abs(hw.crossbar_matvec(xb, v) - W @ v))
            rows.append(("float" if bits is None else str(bits),
                         float(decode_err), float(matvec_err)))
        _write_csv(os.path.join(out, "crossbar_error.csv"),
                   ["quant_bits", "max_decode_error", "max_matvec_error"],
                   rows)
    elif args.demo == "digital":
        rows = []
        for i in range(20):
            k = int(rng.integers(2, 17))
            w = rng.uniform(-1.0, 1.0, k)
            x = rng.uniform(-1.0, 1.0, k)
            b = float(rng.uniform(-0.5, 0.5))
            got = hw.digital_neuron_eval(w, x, b)
            ref = float(np.tanh(np.dot(w, x) + b))
            rows.append((i, k, got, ref, abs(got - ref)))
        _write_csv(os.path.join(out, "digital_neuron.csv"),
                   ["case", "n_inputs", "fixed_point", "float64", "abs_error"],
                   rows)
    return 0


# ---------------------------------------------------------------------------
# Entry point


def build_parser():
    p = argparse.ArgumentParser(
        prog="neurocam",
        description="Desk-scale cognitive imaging pipeline simulator")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scene", help="render the synthetic scene")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_scene)

    f = sub.add_parser("filter", help="train and run the channel equalizer")
    f.add_argument("--config")
    f.add_argument("--out", required=True)
    f.set_defaults(fn=cmd_filter)

    t = sub.add_parser("track", help="extract tuples from a frame directory")
    t.add_argument("--frames", required=True)
    t.add_argument("--model", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--no-prior", action="store_true",
                   help="exhaustive search on every frame")
    t.set_defaults(fn=cmd_track)

    d = sub.add_parser("predict", help="temporal prediction over a tuple CSV")
    d.add_argument("--tuples", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--config")
    d.set_defaults(fn=cmd_predict)

    h = sub.add_parser("hw", help="hardware neuron demos")
    h.add_argument("--demo", required=True,
                   choices=["mtj", "crossbar", "digital", "retention"])
    h.add_argument("--out", required=True)
    h.add_argument("--seed", type=int, default=1234)
    h.set_defaults(fn=cmd_hw)

    r = sub.add_parser("run", help="full pipeline into a fresh directory")
    r.add_argument("--config")
    r.add_argument("--out", required=True)
    r.add_argument("--no-figures", action="store_true",
                   help="skip the quick-look plots")
    r.set_defaults(fn=cmd_run)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as e:
        doc = {"error": type(e).__name__, "message": str(e)}
        if isinstance(e, pl.StageError):
            doc["stage"] = e.stage
        print(json.dumps(doc), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

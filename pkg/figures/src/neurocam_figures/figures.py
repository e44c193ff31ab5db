"""Figure rendering from a pipeline run directory.

Strictly a consumer of the run's CSV/JSON files; the only computation
here is the analytic tanh overlay for the transfer-curve figure, which
is recomputed from the kappa recorded in the run's metadata.  Styling
is pinned so identical inputs produce byte-identical images.
"""

import csv
import json
import os
from dataclasses import dataclass, field

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

FIGURE_IDS = ("recovery", "trajectory", "anomaly", "mtj")
MOTION_VARS = ("x", "y", "h", "w", "theta", "phi_x", "phi_y")

STYLE = {
    "figure.dpi": 150,
    "savefig.dpi": 150,
    "font.family": "DejaVu Sans",
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "grid.linewidth": 0.5,
    "lines.linewidth": 1.2,
    "legend.fontsize": 8,
    "legend.framealpha": 0.9,
}


@dataclass
class FigureSpec:
    figure: str
    inputs: dict
    out: str
    title: str = None
    labels: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.figure not in FIGURE_IDS:
            raise ValueError("unknown figure id %r (expected one of %s)"
                             % (self.figure, ", ".join(FIGURE_IDS)))


def default_specs(run_dir, out_dir):
    """Conventional figure specs for a run directory's file layout."""
    j = os.path.join
    specs = {
        "recovery": FigureSpec("recovery",
                               {"series": j(run_dir, "filter_recovery.csv")},
                               j(out_dir, "recovery.png")),
        "trajectory": FigureSpec("trajectory",
                                 {"x": j(run_dir, "temporal_x.csv"),
                                  "y": j(run_dir, "temporal_y.csv")},
                                 j(out_dir, "trajectory.png")),
        "anomaly": FigureSpec("anomaly",
                              {var: j(run_dir, "temporal_%s.csv" % var)
                               for var in MOTION_VARS}
                              | {"report": j(run_dir, "report.json")},
                              j(out_dir, "anomaly.png")),
        "mtj": FigureSpec("mtj",
                          {"curve": j(run_dir, "mtj_transfer.csv"),
                           "meta": j(run_dir, "mtj_meta.json")},
                          j(out_dir, "mtj.png")),
    }
    return specs


def read_columns(path, required):
    """CSV columns as float arrays; missing columns and empty files are
    reported by name."""
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise ValueError("%s is empty (no header)" % path)
    header = rows[0]
    for col in required:
        if col not in header:
            raise ValueError("%s has no column %r (found %s)"
                             % (path, col, ", ".join(header)))
    if len(rows) < 2:
        raise ValueError("%s has no data rows" % path)
    data = np.array([[float(v) for v in r] for r in rows[1:]])
    return {h: data[:, i] for i, h in enumerate(header)}


def render(spec):
    """Render one figure and return its output path."""
    renderer = {
        "recovery": _render_recovery,
        "trajectory": _render_trajectory,
        "anomaly": _render_anomaly,
        "mtj": _render_mtj,
    }[spec.figure]
    os.makedirs(os.path.dirname(os.path.abspath(spec.out)), exist_ok=True)
    with plt.rc_context(STYLE):
        fig = renderer(spec)
        fig.savefig(spec.out, metadata={"Software": None})
        plt.close(fig)
    return spec.out


def _render_recovery(spec):
    cols = read_columns(spec.inputs["series"],
                        ("t", "clean", "distorted", "recovered"))
    n = min(200, len(cols["t"]))
    fig, ax = plt.subplots(figsize=(7.0, 2.8))
    ax.plot(cols["t"][:n], cols["clean"][:n], color="#1f77b4", label="clean")
    ax.plot(cols["t"][:n], cols["distorted"][:n], color="#bbbbbb",
            label="distorted")
    ax.plot(cols["t"][:n], cols["recovered"][:n], color="#d62728",
            ls="--", label="recovered")
    ax.set_xlabel(spec.labels.get("x", "time step"))
    ax.set_ylabel(spec.labels.get("y", "signal"))
    ax.set_title(spec.title or "Channel equalization: signal recovery")
    ax.legend(loc="upper right", ncol=3)
    fig.tight_layout()
    return fig


def _render_trajectory(spec):
    cx = read_columns(spec.inputs["x"], ("t", "actual", "predicted"))
    cy = read_columns(spec.inputs["y"], ("t", "actual", "predicted"))
    fig, ax = plt.subplots(figsize=(4.2, 4.2))
    ax.plot(cx["actual"], cy["actual"], color="#1f77b4", label="actual")
    ax.plot(cx["predicted"], cy["predicted"], color="#d62728", ls="--",
            label="predicted")
    ax.set_xlabel(spec.labels.get("x", "x (px)"))
    ax.set_ylabel(spec.labels.get("y", "y (px)"))
    ax.set_aspect("equal")
    ax.set_title(spec.title or "Tracked trajectory: actual vs predicted")
    ax.legend(loc="best")
    fig.tight_layout()
    return fig


def _load_events(path):
    """Alarming-event indices per variable from the run report, if the
    report is present; rendering works without it."""
    if not os.path.exists(path):
        return {}
    with open(path) as f:
        report = json.load(f)
    per_var = report.get("stages", {}).get("temporal", {}) \
                    .get("per_variable", {})
    return {var: doc.get("alarming_events", [])
            for var, doc in per_var.items()}


def _render_anomaly(spec):
    events = _load_events(spec.inputs["report"])
    fig, axes = plt.subplots(len(MOTION_VARS), 1, sharex=True,
                             figsize=(7.0, 8.0))
    for ax, var in zip(axes, MOTION_VARS):
        cols = read_columns(spec.inputs[var], ("t", "anomaly"))
        ax.plot(cols["t"], cols["anomaly"], color="#1f77b4", lw=0.8)
        flagged = [e for e in events.get(var, []) if e < len(cols["t"])]
        if flagged:
            ax.scatter(cols["t"][flagged], cols["anomaly"][flagged],
                       marker="v", s=18, color="#d62728", zorder=3,
                       label="alarm")
            ax.legend(loc="upper right")
        ax.set_ylabel(var)
        ax.set_ylim(-0.05, 1.05)
    axes[0].set_title(spec.title or "Anomaly score per motion variable")
    axes[-1].set_xlabel(spec.labels.get("x", "time step"))
    fig.tight_layout()
    return fig


def load_transfer(curve_path, meta_path):
    """Transfer-curve samples plus the kappa recorded alongside them."""
    cols = read_columns(curve_path, ("input", "mean", "stderr"))
    with open(meta_path) as f:
        meta = json.load(f)
    if "kappa" not in meta:
        raise ValueError("%s has no 'kappa' entry" % meta_path)
    return cols["input"], cols["mean"], cols["stderr"], float(meta["kappa"])


def _render_mtj(spec):
    z, mean, stderr, kappa = load_transfer(spec.inputs["curve"],
                                           spec.inputs["meta"])
    fig, ax = plt.subplots(figsize=(4.8, 3.4))
    ax.errorbar(z, mean, yerr=stderr, fmt="o", ms=3, lw=0.8, capsize=2,
                color="#1f77b4", label="sample mean")
    ax.plot(z, np.tanh(kappa * z), color="#d62728",
            label="tanh(%.3g z)" % kappa)
    ax.set_xlabel(spec.labels.get("x", "input z"))
    ax.set_ylabel(spec.labels.get("y", "average output"))
    ax.set_title(spec.title or "Stochastic neuron transfer curve")
    ax.legend(loc="upper left")
    fig.tight_layout()
    return fig

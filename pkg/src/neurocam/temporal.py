"""Online sequence memory per motion variable: scalar -> sparse code,
columns x cells temporal memory with permanence-based (Hebbian-like)
synapse updates, next-value prediction, and per-step anomaly scoring.

Learning and inference are interleaved; a TemporalMemory is strictly
sequential and single-owner.  Several instances (one per tracked
variable) may run concurrently with each other.
"""

import json
import logging

import numpy as np

from neurocam.core import TimeSeries

log = logging.getLogger(__name__)


class ScalarEncoder:
    """Contiguous-run encoder: w active bits out of buckets + w - 1."""

    def __init__(self, vmin, vmax, buckets=140, w=9):
        if not vmax > vmin:
            raise ValueError("need vmax > vmin")
        if not (1 <= w <= buckets):
            raise ValueError("need 1 <= w <= buckets")
        self.vmin = float(vmin)
        self.vmax = float(vmax)
        self.buckets = int(buckets)
        self.w = int(w)
        self.total_bits = self.buckets + self.w - 1

    def bucket_index(self, v):
        if not np.isfinite(v):
            raise ValueError("non-finite value %r" % v)
        v = min(max(v, self.vmin), self.vmax)
        idx = int((v - self.vmin) / (self.vmax - self.vmin) * (self.buckets - 1))
        return min(idx, self.buckets - 1)

    def bucket_center(self, idx):
        return self.vmin + idx * (self.vmax - self.vmin) / (self.buckets - 1)

    def bucket_width(self):
        return (self.vmax - self.vmin) / (self.buckets - 1)

    def encode(self, v):
        """Active bit indices: a run of w bits starting at the bucket."""
        start = self.bucket_index(v)
        return frozenset(range(start, start + self.w))


class _Segment:
    __slots__ = ("cell", "synapses")

    def __init__(self, cell):
        self.cell = cell
        self.synapses = {}  # presynaptic cell id -> permanence in [0, 1]


class TmStepResult:
    def __init__(self, active_cells, predictive_cells, anomaly):
        self.active_cells = active_cells
        self.predictive_cells = predictive_cells
        self.anomaly = anomaly


class TemporalMemory:
    def __init__(self, columns=256, cells_per_column=8,
                 activation_threshold=5, learning_threshold=5,
                 initial_permanence=0.21, connected_permanence=0.5,
                 permanence_increment=0.10, permanence_decrement=0.05,
                 predicted_decrement=0.01, max_segments_per_cell=16,
                 synapses_per_segment=32, rng=None):
        self.columns = columns
        self.cells_per_column = cells_per_column
        self.activation_threshold = activation_threshold
        self.learning_threshold = learning_threshold
        self.initial_permanence = initial_permanence
        self.connected_permanence = connected_permanence
        self.permanence_increment = permanence_increment
        self.permanence_decrement = permanence_decrement
        self.predicted_decrement = predicted_decrement
        self.max_segments_per_cell = max_segments_per_cell
        self.synapses_per_segment = synapses_per_segment
        self.rng = rng
        self.segments = {}          # cell id -> list of _Segment
        self.active_cells = set()
        self.winner_cells = set()
        self.predictive_cells = set()
        self.active_segments = []
        self.matching_segments = []
        self.steps = 0

    # -- helpers -----------------------------------------------------------

    def column_of(self, cell):
        return cell // self.cells_per_column

    def cells_of(self, column):
        base = column * self.cells_per_column
        return range(base, base + self.cells_per_column)

    def _segment_counts(self, segment, active):
        connected = 0
        potential = 0
        for pre, perm in segment.synapses.items():
            if pre in active:
                potential += 1
                if perm >= self.connected_permanence:
                    connected += 1
        return connected, potential

    def _least_used_cell(self, column):
        cells = list(self.cells_of(column))
        counts = [len(self.segments.get(c, ())) for c in cells]
        best = min(counts)
        ties = [c for c, n in zip(cells, counts) if n == best]
        if len(ties) == 1 or self.rng is None:
            return ties[0]
        return ties[int(self.rng.integers(0, len(ties)))]

    def _grow_synapses(self, segment, pool):
        candidates = sorted(c for c in pool
                            if c != segment.cell and c not in segment.synapses)
        room = self.synapses_per_segment - len(segment.synapses)
        if room <= 0 or not candidates:
            return
        if len(candidates) > room and self.rng is not None:
            candidates = list(self.rng.choice(np.array(candidates), room,
                                              replace=False))
        for c in candidates[:room]:
            segment.synapses[int(c)] = self.initial_permanence

    def _reinforce(self, segment, prev_active):
        for pre in list(segment.synapses):
            if pre in prev_active:
                p = segment.synapses[pre] + self.permanence_increment
            else:
                p = segment.synapses[pre] - self.permanence_decrement
            segment.synapses[pre] = min(1.0, max(0.0, p))

    def _new_segment(self, cell):
        segs = self.segments.setdefault(cell, [])
        if len(segs) >= self.max_segments_per_cell:
            # recycle the weakest segment
            weakest = min(range(len(segs)),
                          key=lambda i: sum(segs[i].synapses.values()))
            del segs[weakest]
        seg = _Segment(cell)
        segs.append(seg)
        return seg

    # -- core step ---------------------------------------------------------

    def step(self, active_columns, learn=True):
        """One temporal-memory step.

        Cells predicted on the previous step activate when their column
        fires; unpredicted columns burst.  Anomaly is the fraction of
        active columns that no previous prediction covered.
        """
        active_columns = set(int(c) for c in active_columns)
        for c in active_columns:
            if not (0 <= c < self.columns):
                raise ValueError("column %d out of range [0, %d)" % (c, self.columns))
        if not active_columns:
            log.warning("tm_step called with no active columns; no-op")
            return TmStepResult(set(), set(self.predictive_cells), 0.0)

        prev_active = self.active_cells
        prev_winner = self.winner_cells
        prev_predictive = self.predictive_cells
        prev_active_segments = self.active_segments
        prev_matching_segments = self.matching_segments

        predicted_columns = {self.column_of(c) for c in prev_predictive}
        anomaly = 1.0 - len(predicted_columns & active_columns) / len(active_columns)

        segments_for = {}
        for seg in prev_matching_segments:
            segments_for.setdefault(self.column_of(seg.cell), []).append(seg)
        active_seg_cells = {seg.cell for seg in prev_active_segments}

        next_active = set()
        next_winner = set()
        for col in sorted(active_columns):
            predicted_cells = sorted(c for c in self.cells_of(col)
                                     if c in active_seg_cells)
            if predicted_cells:
                next_active.update(predicted_cells)
                next_winner.update(predicted_cells)
                if learn:
                    for seg in prev_active_segments:
                        if seg.cell in predicted_cells:
                            self._reinforce(seg, prev_active)
                            self._grow_synapses(seg, prev_winner)
            else:
                next_active.update(self.cells_of(col))
                matching = segments_for.get(col, [])
                if matching:
                    best = max(matching,
                               key=lambda s: self._segment_counts(s, prev_active)[1])
                    winner = best.cell
                    if learn:
                        self._reinforce(best, prev_active)
                        self._grow_synapses(best, prev_winner)
                else:
                    winner = self._least_used_cell(col)
                    if learn and prev_winner:
                        seg = self._new_segment(winner)
                        self._grow_synapses(seg, prev_winner)
                next_winner.add(winner)

        if learn:
            # punish segments that predicted a column that did not fire
            for seg in prev_matching_segments:
                if self.column_of(seg.cell) not in active_columns:
                    for pre in list(seg.synapses):
                        if pre in prev_active:
                            p = seg.synapses[pre] - self.predicted_decrement
                            seg.synapses[pre] = max(0.0, p)

        active_segments = []
        matching_segments = []
        for cell in sorted(self.segments):
            for seg in self.segments[cell]:
                connected, potential = self._segment_counts(seg, next_active)
                if connected >= self.activation_threshold:
                    active_segments.append(seg)
                if potential >= self.learning_threshold:
                    matching_segments.append(seg)
        predictive = {seg.cell for seg in active_segments}

        if learn:
            self.active_cells = next_active
            self.winner_cells = next_winner
            self.predictive_cells = predictive
            self.active_segments = active_segments
            self.matching_segments = matching_segments
            self.steps += 1
        # with learn=False this was a pure read-ahead: no state committed
        return TmStepResult(set(next_active), set(predictive), anomaly)

    # -- serialization -----------------------------------------------------

    def to_json(self):
        segs = []
        for cell in sorted(self.segments):
            for seg in self.segments[cell]:
                pres = sorted(seg.synapses)
                segs.append({"cell": cell, "pre": pres,
                             "perm": [seg.synapses[p] for p in pres]})
        doc = {
            "params": {
                "columns": self.columns,
                "cells_per_column": self.cells_per_column,
                "activation_threshold": self.activation_threshold,
                "learning_threshold": self.learning_threshold,
                "initial_permanence": self.initial_permanence,
                "connected_permanence": self.connected_permanence,
                "permanence_increment": self.permanence_increment,
                "permanence_decrement": self.permanence_decrement,
                "predicted_decrement": self.predicted_decrement,
                "max_segments_per_cell": self.max_segments_per_cell,
                "synapses_per_segment": self.synapses_per_segment,
            },
            "segments": segs,
            "active_cells": sorted(self.active_cells),
            "winner_cells": sorted(self.winner_cells),
            "predictive_cells": sorted(self.predictive_cells),
            "steps": self.steps,
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text, rng=None):
        doc = json.loads(text)
        tm = cls(rng=rng, **doc["params"])
        for s in doc["segments"]:
            seg = _Segment(s["cell"])
            seg.synapses = {int(p): float(q) for p, q in zip(s["pre"], s["perm"])}
            tm.segments.setdefault(s["cell"], []).append(seg)
        tm.active_cells = set(doc["active_cells"])
        tm.winner_cells = set(doc["winner_cells"])
        tm.steps = doc["steps"]
        # rebuild segment activity from the restored active set
        for cell in sorted(tm.segments):
            for seg in tm.segments[cell]:
                connected, potential = tm._segment_counts(seg, tm.active_cells)
                if connected >= tm.activation_threshold:
                    tm.active_segments.append(seg)
                if potential >= tm.learning_threshold:
                    tm.matching_segments.append(seg)
        tm.predictive_cells = {seg.cell for seg in tm.active_segments}
        return tm


def tm_step(tm, active_columns, learn=True):
    return tm.step(active_columns, learn)


def predict_value(tm, enc):
    """Decode the predictive columns back to value space.

    Overlap-weighted average of bucket centers, restricted to buckets
    whose encoding overlap is at least half the best overlap; None when
    nothing is predictive.
    """
    cols = {tm.column_of(c) for c in tm.predictive_cells}
    cols = {c for c in cols if c < enc.total_bits}
    if not cols:
        return None
    overlaps = np.zeros(enc.buckets)
    for b in range(enc.buckets):
        overlaps[b] = len(cols & set(range(b, b + enc.w)))
    best = overlaps.max()
    if best <= 0:
        return None
    keep = overlaps >= best / 2.0
    centers = np.array([enc.bucket_center(b) for b in range(enc.buckets)])
    return float(np.sum(overlaps[keep] * centers[keep]) / np.sum(overlaps[keep]))


def track_variable(samples, enc, tm):
    """Single learning pass over a series; per step emits the one-step-
    ahead prediction (previous value when none) and the anomaly."""
    if isinstance(samples, TimeSeries):
        dt = samples.dt
        values = samples.samples
    else:
        dt = 1.0
        values = np.asarray(samples, dtype=np.float64)
    if len(values) == 0:
        raise ValueError("empty sample series")
    preds = np.empty(len(values))
    anoms = np.empty(len(values))
    for t, v in enumerate(values):
        result = tm.step(enc.encode(v), learn=True)
        anoms[t] = result.anomaly
        p = predict_value(tm, enc)
        preds[t] = v if p is None else p
    return TimeSeries(preds, dt=dt), TimeSeries(anoms, dt=dt)

"""Dice scoring, fold aggregation and the old/new-center comparison matrix."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ContractError, DimensionError

CLASS_NAMES = {1: "GTVp", 2: "GTVn"}
STRATEGY_ORDER = ("none", "partial", "full", "shallow_prompt", "deep_prompt")
GAP = "NA"


def dice(pred, truth, label, empty_value=1.0):
    """2 |P & T| / (|P| + |T|) over voxels carrying ``label``.

    When neither mask contains the label the score is ``empty_value``.
    """
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise DimensionError(f"prediction {pred.shape} and truth {truth.shape} differ in extent")
    p = pred == label
    t = truth == label
    total = int(p.sum()) + int(t.sum())
    if total == 0:
        return float(empty_value)
    return 2.0 * int(np.logical_and(p, t).sum()) / total


@dataclass
class DiceReport:
    scores: dict
    sample_id: str = ""
    center_id: str = ""

    @property
    def mean(self):
        return float(np.mean(list(self.scores.values())))


def predict_mask(logits):
    """Argmax over the class axis; ties go to the lowest class index."""
    return np.argmax(logits, axis=0).astype(np.uint8)


def evaluate(model, samples, empty_value=1.0):
    """Per-sample Dice for each foreground class.

    ``model`` is anything with ``predict_logits(volume) -> (K, X, Y, Z)``.
    """
    reports = []
    for s in samples:
        pred = predict_mask(model.predict_logits(s.volume))
        scores = {name: dice(pred, s.mask, label, empty_value) for label, name in CLASS_NAMES.items()}
        reports.append(DiceReport(scores, s.sample_id, s.center_id))
    return reports


def pooled_mean(reports):
    """Mean of the per-sample mean Dice over all reports (samples pooled across centers)."""
    if not reports:
        raise ContractError("no reports to pool")
    return float(np.mean([r.mean for r in reports]))


def class_means(reports):
    return {name: float(np.mean([r.scores[name] for r in reports])) for name in CLASS_NAMES.values()}


def aggregate_folds(values, ddof=1):
    """Mean and standard deviation of fold values.

    ``ddof=1`` (sample standard deviation) is the default: it reproduces the
    printed spread of published five-fold tables, the population form does not.
    """
    values = np.asarray(list(values), dtype=np.float64)
    if values.size == 0:
        raise ContractError("aggregate_folds needs at least one fold")
    mu = float(values.mean())
    if values.size - ddof <= 0:
        return mu, 0.0
    return mu, float(values.std(ddof=ddof))


@dataclass
class FoldReport:
    center: str
    strategy: str
    fold: int
    old_center_mean: float
    new_center_mean: float
    new_class_means: dict = field(default_factory=dict)
    old_manifest: list = field(default_factory=list)
    new_manifest: list = field(default_factory=list)
    learnable: int = 0

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class ComparisonMatrix:
    """rows: new-center ids; per strategy an (old mean, new mean, new std) cell."""

    centers: list
    strategies: list
    cells: dict  # (center, strategy) -> (old, new_mu, new_sigma, n_folds) or None

    def cell(self, center, strategy):
        return self.cells.get((center, strategy))

    @property
    def complete(self):
        return all(self.cells.get((c, s)) is not None for c in self.centers for s in self.strategies)

    def header(self):
        cols = ["center"]
        for s in self.strategies:
            cols += [f"{s}_old", f"{s}_new_mean", f"{s}_new_std"]
        return cols

    def rows(self):
        for c in self.centers:
            row = [c]
            for s in self.strategies:
                cell = self.cells.get((c, s))
                row += [GAP] * 3 if cell is None else [repr(cell[0]), repr(cell[1]), repr(cell[2])]
            yield row

    def to_csv(self, path=None):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header())
        for row in self.rows():
            w.writerow(row)
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, text_or_path):
        text = text_or_path
        if "\n" not in text_or_path:
            with open(text_or_path, newline="") as fh:
                text = fh.read()
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        strategies = [h[: -len("_old")] for h in header[1:] if h.endswith("_old")]
        centers, cells = [], {}
        for row in reader:
            c = row[0]
            centers.append(c)
            for i, s in enumerate(strategies):
                vals = row[1 + 3 * i : 4 + 3 * i]
                cells[(c, s)] = None if GAP in vals else tuple(float(v) for v in vals)
        # fold counts are not part of the CSV table
        cells = {k: (None if v is None else v + (None,)) for k, v in cells.items()}
        return cls(centers, strategies, cells)

    def same_values(self, other):
        if self.centers != other.centers or self.strategies != other.strategies:
            return False
        for key in set(self.cells) | set(other.cells):
            a, b = self.cells.get(key), other.cells.get(key)
            if (a is None) != (b is None):
                return False
            if a is not None and tuple(a[:3]) != tuple(b[:3]):
                return False
        return True

    def to_json(self, path=None):
        payload = {
            "centers": self.centers,
            "strategies": self.strategies,
            "cells": [
                {
                    "center": c,
                    "strategy": s,
                    "value": None
                    if self.cells.get((c, s)) is None
                    else dict(zip(("old", "new_mean", "new_std", "folds"), self.cells[(c, s)])),
                }
                for c in self.centers
                for s in self.strategies
            ],
        }
        text = json.dumps(payload, indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text


def order_strategies(strategies):
    known = [s for s in STRATEGY_ORDER if s in strategies]
    return known + sorted(s for s in strategies if s not in STRATEGY_ORDER)


def build_comparison_matrix(fold_reports, centers=None, strategies=None, expected_folds=None):
    """Aggregate fold reports into the center x strategy table.

    "old" is the mean over folds of the pooled old-center Dice; "new" is
    mean and sample std over folds. A cell with fewer than
    ``expected_folds`` folds is a gap.
    """
    grouped = {}
    for r in fold_reports:
        grouped.setdefault((r.center, r.strategy), []).append(r)
    centers = list(centers) if centers is not None else sorted({r.center for r in fold_reports})
    strategies = order_strategies(strategies if strategies is not None else {r.strategy for r in fold_reports})
    cells = {}
    for c in centers:
        for s in strategies:
            reps = sorted(grouped.get((c, s), []), key=lambda r: r.fold)
            if not reps or (expected_folds is not None and len(reps) < expected_folds):
                cells[(c, s)] = None
                continue
            old_mu, _ = aggregate_folds([r.old_center_mean for r in reps])
            new_mu, new_sd = aggregate_folds([r.new_center_mean for r in reps])
            cells[(c, s)] = (old_mu, new_mu, new_sd, len(reps))
    return ComparisonMatrix(centers, strategies, cells)


def fold_detail_table(fold_reports, center, strategies=None):
    """Per-fold new-center Dice for one center, one column per strategy,
    closed by a mean/std row. Missing entries are gap markers."""
    reps = [r for r in fold_reports if r.center == center]
    strategies = order_strategies(strategies if strategies is not None else {r.strategy for r in reps})
    folds = sorted({r.fold for r in reps})
    lookup = {(r.fold, r.strategy): r.new_center_mean for r in reps}
    rows = [["fold"] + strategies]
    for f in folds:
        rows.append([str(f + 1)] + [GAP if (f, s) not in lookup else f"{lookup[(f, s)]:.4f}" for s in strategies])
    summary = ["mean+-std"]
    for s in strategies:
        vals = [lookup[(f, s)] for f in folds if (f, s) in lookup]
        if not vals:
            summary.append(GAP)
            continue
        mu, sd = aggregate_folds(vals)
        summary.append(f"{mu:.4f}+-{sd:.4f}")
    rows.append(summary)
    return rows


def isfinite_or_gap(x):
    return x is not None and math.isfinite(x)

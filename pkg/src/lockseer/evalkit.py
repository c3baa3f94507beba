"""Accuracy and macro P/R/F1, multi-horizon rollout evaluation, drift windows."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .models import rollout_horizon
from .prep import Split, WindowedDataset

HORIZONS = (1, 2, 3, 4)


class EvalError(ValueError):
    pass


def accuracy(predictions, targets) -> float:
    p, t = np.asarray(predictions), np.asarray(targets)
    if p.shape != t.shape or p.size == 0:
        raise EvalError("accuracy needs equal-length, non-empty inputs")
    return float(np.count_nonzero(p == t)) / p.size


@dataclass
class ConfusionCounts:
    tp: dict
    fp: dict
    fn: dict

    @property
    def classes(self) -> list:
        return sorted(set(self.tp) | set(self.fp) | set(self.fn))

    @property
    def target_classes(self) -> list:
        return sorted(c for c in self.classes if self.tp.get(c, 0) + self.fn.get(c, 0) > 0)


def confusion_counts(y_true, y_pred) -> ConfusionCounts:
    tp, fp, fn = defaultdict(int), defaultdict(int), defaultdict(int)
    for t, p in zip(np.asarray(y_true).tolist(), np.asarray(y_pred).tolist()):
        if t == p:
            tp[t] += 1
        else:
            fp[p] += 1
            fn[t] += 1
    for c in set(tp) | set(fp) | set(fn):
        tp[c] += 0
        fp[c] += 0
        fn[c] += 0
    return ConfusionCounts(dict(tp), dict(fp), dict(fn))


@dataclass
class PRF:
    precision: float
    recall: float
    f1: float
    per_class: dict  # class -> (precision, recall, f1, support)
    average: str = "macro"


def _ratio(a, b) -> float:
    return a / b if b else 0.0


def class_prf(tp: int, fp: int, fn: int) -> tuple:
    p = _ratio(tp, tp + fp)
    r = _ratio(tp, tp + fn)
    f = _ratio(2 * p * r, p + r)
    return p, r, f


def macro_prf(conf: ConfusionCounts, average: str = "macro") -> PRF:
    """Per-class scores averaged over classes present in the targets.

    ``average="weighted"`` weights each class by its target support.
    """
    classes = conf.target_classes
    if not classes:
        raise EvalError("empty confusion counts")
    per = {}
    for c in classes:
        per[c] = class_prf(conf.tp[c], conf.fp[c], conf.fn[c]) + (conf.tp[c] + conf.fn[c],)
    if average == "macro":
        w = np.ones(len(classes))
    elif average == "weighted":
        w = np.array([per[c][3] for c in classes], dtype=np.float64)
    else:
        raise EvalError(f"unknown average {average!r}")
    w = w / w.sum()
    cols = np.array([per[c][:3] for c in classes])
    p, r, f = (float(np.dot(w, cols[:, k])) for k in range(3))
    return PRF(p, r, f, per, average)


# ---------------------------------------------------------------------------
# multi-horizon evaluation
# ---------------------------------------------------------------------------

def rollout_split(model, split: Split, max_h: int, batch: int = 4096) -> np.ndarray:
    out = [rollout_horizon(model, split.windows[i:i + batch], max_h) for i in range(0, len(split), batch)]
    if not out:
        raise EvalError(f"split {split.name!r} has no examples")
    return np.concatenate(out, axis=0)


def joint_correct(preds: np.ndarray, split: Split, h: int) -> tuple[np.ndarray, np.ndarray]:
    """(mask of examples with >= h targets, per-example all-h-correct flags)."""
    has = split.n_targets >= h
    ok = np.all(preds[:, :h] == split.targets[:, :h], axis=1)
    return has, ok & has


@dataclass
class MetricsReport:
    scope: str
    task: str
    model: str
    seed: int
    joint: dict = field(default_factory=dict)  # h -> accuracy
    per_step: dict = field(default_factory=dict)
    n: dict = field(default_factory=dict)
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0
    average: str = "macro"
    per_table: dict = field(default_factory=dict)  # (table, h) -> (n, accuracy)
    per_class: dict = field(default_factory=dict)

    def metric_values(self) -> dict:
        """Flat (metric, horizon) -> value map used for aggregation."""
        vals = {}
        for h in sorted(self.joint):
            vals[("joint_accuracy", h)] = self.joint[h]
            vals[("per_step_accuracy", h)] = self.per_step[h]
        vals[("precision", 1)] = self.precision
        vals[("recall", 1)] = self.recall
        vals[("f1", 1)] = self.f1
        return vals


def multi_horizon_eval(model, dataset: WindowedDataset, horizons: Sequence[int] = HORIZONS, *,
                       split: str = "test", preds: Optional[np.ndarray] = None, seed: int = 0,
                       model_name: Optional[str] = None, average: str = "macro") -> MetricsReport:
    sp = getattr(dataset, split)
    max_h = max(horizons)
    if max_h > dataset.max_horizon:
        raise EvalError(f"horizon {max_h} exceeds dataset max_horizon {dataset.max_horizon}")
    if preds is None:
        preds = rollout_split(model, sp, max_h)
    report = MetricsReport(dataset.scope, dataset.task, model_name or getattr(model, "kind", "model"),
                           seed, average=average)
    first_tables = np.array(dataset.target_tables(sp.targets[:, 0]), dtype=object)
    for h in sorted(horizons):
        has, ok = joint_correct(preds, sp, h)
        n = int(has.sum())
        if n == 0:
            raise EvalError(f"no example has {h} targets")
        report.n[h] = n
        report.joint[h] = float(ok.sum()) / n
        step_hits = (preds[has, :h] == sp.targets[has, :h]).sum()
        report.per_step[h] = float(step_hits) / (n * h)
        for table in sorted(set(first_tables[has])):
            sel = has & (first_tables == table)
            report.per_table[(table, h)] = (int(sel.sum()), float(ok[sel].sum()) / int(sel.sum()))
    prf = macro_prf(confusion_counts(sp.targets[:, 0], preds[:, 0]), average)
    report.precision, report.recall, report.f1 = prf.precision, prf.recall, prf.f1
    report.per_class = {dataset.vocab.decode(int(c)): v for c, v in prf.per_class.items()}
    return report


# ---------------------------------------------------------------------------
# drift
# ---------------------------------------------------------------------------

@dataclass
class DriftWindow:
    index: int
    start_ns: float
    end_ns: float
    n: dict  # h -> evaluated examples
    accuracy: dict  # h -> joint accuracy or None when empty


@dataclass
class DriftReport:
    scope: str
    model: str
    seed: int
    windows: list

    @property
    def n_windows(self) -> int:
        return len(self.windows)


def window_index(anchors, n_windows: int) -> np.ndarray:
    """Equal-width bucket of each anchor over [min, max]; last bucket right-closed."""
    a = np.asarray(anchors, dtype=np.int64)
    rel = a - a.min()
    span = int(rel.max())
    if span == 0:
        return np.zeros(len(a), dtype=np.int64)
    return np.minimum(rel * n_windows // span, n_windows - 1)


def temporal_drift(model, dataset: WindowedDataset, n_windows: int = 50, horizons: Sequence[int] = (1,), *,
                   split: str = "test", preds: Optional[np.ndarray] = None, seed: int = 0,
                   model_name: Optional[str] = None) -> DriftReport:
    if n_windows < 2:
        raise EvalError("need at least 2 drift windows")
    sp = getattr(dataset, split)
    if len(sp) == 0:
        raise EvalError("empty split")
    if preds is None:
        preds = rollout_split(model, sp, max(horizons))
    idx = window_index(sp.anchor_end_ns, n_windows)
    span = float(sp.anchor_end_ns.max() - sp.anchor_end_ns.min())
    width = span / n_windows
    flags = {h: joint_correct(preds, sp, h) for h in horizons}
    windows = []
    for k in range(n_windows):
        in_k = idx == k
        n, acc = {}, {}
        for h, (has, ok) in flags.items():
            sel = in_k & has
            n[h] = int(sel.sum())
            acc[h] = float(ok[sel].sum()) / n[h] if n[h] else None
        windows.append(DriftWindow(k, k * width, (k + 1) * width, n, acc))
    return DriftReport(dataset.scope, model_name or getattr(model, "kind", "model"), seed, windows)


# ---------------------------------------------------------------------------
# aggregation over seeds
# ---------------------------------------------------------------------------

@dataclass
class AggregateReport:
    scope: str
    task: str
    model: str
    n_runs: int
    mean: dict  # (metric, h) -> value
    std: dict
    per_table_mean: dict = field(default_factory=dict)
    per_table_std: dict = field(default_factory=dict)


def _mean_std(values) -> tuple:
    v = np.asarray(values, dtype=np.float64)
    mean = float(v.mean())
    std = float(v.std(ddof=1)) if len(v) > 1 else 0.0
    return mean, std


def summarize_runs(reports: Sequence[MetricsReport]) -> AggregateReport:
    if not reports:
        raise EvalError("nothing to summarise")
    keys = {(r.scope, r.task, r.model) for r in reports}
    if len(keys) != 1:
        raise EvalError(f"reports mix scopes/tasks/models: {sorted(keys)}")
    reports = sorted(reports, key=lambda r: r.seed)
    scope, task, model = keys.pop()
    mean, std = {}, {}
    for key in reports[0].metric_values():
        mean[key], std[key] = _mean_std([r.metric_values()[key] for r in reports])
    pt_mean, pt_std = {}, {}
    for key in sorted(set().union(*(r.per_table for r in reports))):
        vals = [r.per_table[key][1] for r in reports if key in r.per_table]
        pt_mean[key], pt_std[key] = _mean_std(vals)
    return AggregateReport(scope, task, model, len(reports), mean, std, pt_mean, pt_std)

"""Evaluation reports, degradation thresholds and gradient-conflict measurement."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .attack import predict, robust_mask
from .train import objective_grad
from .verify import verified_mask


@dataclass
class EvalReport:
    benign_acc: float
    era: float
    vra: float
    pruning_ratio: float
    nonzero_params: int
    total_params: int
    step: int = 0
    objectives: str = ""
    era_epsilon: float = 0.0
    vra_epsilon: float = 0.0

    def as_row(self):
        return asdict(self)

    @classmethod
    def columns(cls):
        return [f.name for f in fields(cls)]


def pruning_ratio(net):
    total = net.prunable_count()
    if total == 0:
        raise ValueError("network has no prunable weights")
    kept = sum(int(m.sum()) for m in net.masks().values())
    return 1.0 - kept / total


def evaluate(net, dataset, attack_cfg, verify_epsilon, step=0, objectives="", seed=0):
    """Clean accuracy, PGD robust accuracy and IBP-verified accuracy on ``dataset``."""
    x, y = dataset.images, dataset.labels
    benign = float((predict(net, x) == y).mean())
    return EvalReport(
        benign_acc=benign,
        era=float(robust_mask(net, x, y, attack_cfg, seed).mean()),
        vra=float(verified_mask(net, x, y, verify_epsilon).mean()),
        pruning_ratio=pruning_ratio(net),
        nonzero_params=net.nonzero_params(),
        total_params=net.total_params(),
        step=step,
        objectives=objectives,
        era_epsilon=attack_cfg.epsilon,
        vra_epsilon=verify_epsilon,
    )


@dataclass
class Curve:
    metric: str
    points: list = field(default_factory=list)  # (pruning_ratio, value)

    def __post_init__(self):
        ratios = [r for r, _ in self.points]
        if any(b <= a for a, b in zip(ratios, ratios[1:])):
            raise ValueError("curve ratios must be strictly increasing")

    @classmethod
    def from_reports(cls, reports, metric):
        return cls(metric, [(r.pruning_ratio, getattr(r, metric)) for r in reports])


def degradation_threshold(curve, relative_drop):
    """First pruning ratio at which the metric falls to ``(1 - relative_drop)`` of its unpruned value.

    Linearly interpolated between the bracketing points; reaching the level
    exactly counts as crossing.  ``None`` when the curve never gets there.
    """
    if not curve.points:
        raise ValueError("empty curve")
    if not 0 < relative_drop < 1:
        raise ValueError("relative_drop must lie in (0, 1)")
    base = dict(curve.points).get(0.0)
    if base is None:
        raise ValueError("curve has no ratio-0 point")
    level = (1 - relative_drop) * base
    tol = 1e-12 * max(1.0, abs(base))
    prev = None
    for r, v in curve.points:
        if v <= level + tol:
            if prev is None or prev[1] <= level + tol:
                return r
            r0, v0 = prev
            return r0 + (v0 - level) / (v0 - v) * (r - r0)
        prev = (r, v)
    return None


def mean_gradient(net, dataset, objective, batch_size=256, seed=0):
    """Dataset-mean gradient of ``objective``; batches are weighted by size."""
    total = None
    n = len(dataset)
    for b, start in enumerate(range(0, n, batch_size)):
        sl = slice(start, start + batch_size)
        rng = np.random.default_rng([seed, b])
        _, g = objective_grad(net, dataset.images[sl], dataset.labels[sl], objective, rng)
        w = (min(start + batch_size, n) - start) / n
        total = {k: v * w for k, v in g.items()} if total is None else {k: total[k] + v * w for k, v in g.items()}
    return total


def conflict_fraction(grads_a, grads_b, masks):
    """Share of unmasked weight coordinates whose two gradients have strictly opposite signs."""
    opposed, count = 0, 0
    for name, mask in masks.items():
        keep = mask != 0
        a, b = grads_a[name][keep], grads_b[name][keep]
        opposed += int(np.count_nonzero(((a > 0) & (b < 0)) | ((a < 0) & (b > 0))))
        count += int(keep.sum())
    return opposed / count if count else 0.0


def gradient_conflict(net, dataset, obj_a, obj_b, batch_size=256, seed=0):
    ga = mean_gradient(net, dataset, obj_a, batch_size, seed)
    gb = ga if obj_b == obj_a else mean_gradient(net, dataset, obj_b, batch_size, seed)
    return conflict_fraction(ga, gb, net.masks())


def write_curves_csv(path, curves):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["pruning_ratio", "metric", "value"])
        for curve in curves:
            for r, v in curve.points:
                w.writerow([f"{r:.6f}", curve.metric, f"{v:.6f}"])


def read_curves_csv(path):
    by_metric = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            by_metric.setdefault(row["metric"], []).append((float(row["pruning_ratio"]), float(row["value"])))
    return [Curve(m, pts) for m, pts in by_metric.items()]


def write_reports_csv(path, reports):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=EvalReport.columns(), lineterminator="\n")
        w.writeheader()
        for r in reports:
            row = r.as_row()
            for k in ("benign_acc", "era", "vra", "pruning_ratio", "era_epsilon", "vra_epsilon"):
                row[k] = f"{row[k]:.6f}"
            w.writerow(row)


def read_reports_csv(path):
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out.append(EvalReport(
                benign_acc=float(row["benign_acc"]), era=float(row["era"]), vra=float(row["vra"]),
                pruning_ratio=float(row["pruning_ratio"]), nonzero_params=int(row["nonzero_params"]),
                total_params=int(row["total_params"]), step=int(row["step"]),
                objectives=row["objectives"], era_epsilon=float(row["era_epsilon"]),
                vra_epsilon=float(row["vra_epsilon"]),
            ))
    return out

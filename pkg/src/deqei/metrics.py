"""PSNR and equivariance diagnostics, with CSV/JSON report emission."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, no_grad
from .formats import atomic_write
from .linops import GroupElement, rotate

__all__ = [
    "PSNR_CAP",
    "psnr",
    "MetricReport",
    "reconstruct",
    "psnr_report",
    "pipeline_equivariance_error",
    "operator_equivariance_error",
]

PSNR_CAP = 300.0


def psnr(xhat, x, peak=1.0):
    """``10 log10(peak^2 / mse)``; identical inputs give ``inf``.

    The value is invariant to any common permutation of the pixels, quarter
    turns included.
    """
    a = np.asarray(xhat, dtype=np.float64)
    b = np.asarray(x, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    if not peak > 0:
        raise ValueError("peak must be positive")
    # exactly rounded, so the value does not depend on pixel order
    mse = math.fsum(((a - b) ** 2).ravel()) / a.size if a.size else 0.0
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


@dataclass
class MetricReport:
    metric: str
    values: list
    group_element: float | None = None
    config_hash: str | None = None
    extra: dict = field(default_factory=dict)

    def capped(self):
        return np.minimum(np.asarray(self.values, dtype=np.float64), PSNR_CAP)

    @property
    def n(self):
        return len(self.values)

    @property
    def mean(self):
        return float(np.mean(self.capped())) if self.values else math.nan

    @property
    def std(self):
        return float(np.std(self.capped())) if self.values else math.nan

    def summary(self):
        out = {"metric": self.metric, "mean": self.mean, "std": self.std, "n": self.n,
               "config_hash": self.config_hash}
        if self.group_element is not None:
            out["group_element"] = self.group_element
        out.update(self.extra)
        return out

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "image_index", "value"])
        for i, v in enumerate(self.values):
            w.writerow([self.metric, i, repr(float(v))])
        return buf.getvalue()

    def to_json(self):
        return json.dumps(self.summary(), indent=2, sort_keys=True) + "\n"

    def write(self, stem):
        atomic_write(f"{stem}.csv", self.to_csv().encode())
        atomic_write(f"{stem}.json", self.to_json().encode())

    def __str__(self):
        return f"{self.metric}: {self.mean:.3f} +/- {self.std:.3f} (n={self.n})"


def reconstruct(f, y, batch_size=16):
    """Apply a reconstructor batch by batch with recording disabled."""
    outs = []
    with no_grad():
        for i in range(0, len(y), batch_size):
            out = f(y[i:i + batch_size])
            outs.append(out.data if isinstance(out, Tensor) else np.asarray(out))
    return np.concatenate(outs) if outs else np.zeros((0,))


def psnr_report(f, y, x, batch_size=16, name="psnr"):
    xhat = reconstruct(f, y, batch_size)
    return MetricReport(name, [psnr(a, b) for a, b in zip(xhat, x)])


def _g(g):
    return g if isinstance(g, GroupElement) else GroupElement(float(g))


def pipeline_equivariance_error(f, A, x, g=GroupElement(90.0), batch_size=16):
    """Per image ``psnr(f(A T_g x), T_g f(A x))``."""
    g = _g(g)
    x = np.asarray(x, dtype=np.float64)
    left = reconstruct(f, A.apply(rotate(x, g)), batch_size)
    right = rotate(reconstruct(f, A.apply(x), batch_size), g)
    return MetricReport("pipeline_equivariance", [psnr(a, b) for a, b in zip(left, right)],
                        group_element=g.angle_degrees)


def operator_equivariance_error(F, A, x, g=GroupElement(90.0)):
    """Per image ``psnr(F(T_g x, A T_g x), T_g F(x, A x))`` for a single operator application."""
    g = _g(g)
    x = np.asarray(x, dtype=np.float64)
    with no_grad():
        xg = rotate(x, g)
        left = F(Tensor(xg), A.apply(xg))
        right = F(Tensor(x), A.apply(x))
    left = left.data if isinstance(left, Tensor) else np.asarray(left)
    right = rotate(right.data if isinstance(right, Tensor) else np.asarray(right), g)
    return MetricReport("operator_equivariance", [psnr(a, b) for a, b in zip(left, right)],
                        group_element=g.angle_degrees)

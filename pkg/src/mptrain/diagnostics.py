"""Gradient magnitude instrumentation: per-binary-exponent histograms.

Every tensor element lands in exactly one of: the zero bin, one finite
bin keyed by floor(log2 |v|), or the non-finite bin.  F16 tensors are
binned on their stored values (subnormals by true exponent), F32
tensors on their f32 values.  Bins are one per exponent; any coarser
display binning can be aggregated from the CSV after the fact.

Attaching the sampling hook to a training loop only reads gradients, so
trajectories are bit-identical with and without it.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import binary16 as b16
from . import mp_engine
from . import nn
from . import tensor as T
from .tensor import DType, Tensor


@dataclass
class ExponentHistogram:
    dtype: DType
    zero_count: int = 0
    bins: dict[int, int] = field(default_factory=dict)
    nonfinite_count: int = 0
    total: int = 0
    max_abs: float = 0.0

    def fraction_zero(self) -> float:
        return self.zero_count / self.total if self.total else 0.0

    def fraction_below(self, exponent: int) -> float:
        """Fraction of finite nonzero values with floor(log2|v|) < exponent."""
        if not self.total:
            return 0.0
        n = sum(c for e, c in self.bins.items() if e < exponent)
        return n / self.total

    def check(self) -> None:
        assert self.zero_count + sum(self.bins.values()) + self.nonfinite_count \
            == self.total


@dataclass(frozen=True)
class UnderflowReport:
    fraction_zero: float
    fraction_below: dict[int, float]
    max_abs: float
    recommended_scale: float


def histogram(t: Tensor) -> ExponentHistogram:
    wide = t.widen()
    flat = wide.reshape(-1)
    finite = np.isfinite(flat)
    nonzero = flat != 0
    live = finite & nonzero

    h = ExponentHistogram(dtype=t.dtype, total=int(flat.size))
    h.zero_count = int((finite & ~nonzero).sum())
    h.nonfinite_count = int((~finite).sum())
    if live.any():
        exps = b16.exponent_of_array(flat[live])
        uniq, counts = np.unique(exps, return_counts=True)
        h.bins = {int(e): int(c) for e, c in zip(uniq, counts)}
        h.max_abs = float(np.abs(flat[live]).max())
    h.check()
    return h


def merge(a: ExponentHistogram, b: ExponentHistogram) -> ExponentHistogram:
    """Exact count addition; commutative and associative."""
    if a.dtype is not b.dtype:
        raise ValueError("cannot merge histograms from different source dtypes")
    out = ExponentHistogram(dtype=a.dtype)
    out.zero_count = a.zero_count + b.zero_count
    out.nonfinite_count = a.nonfinite_count + b.nonfinite_count
    out.total = a.total + b.total
    out.max_abs = max(a.max_abs, b.max_abs)
    out.bins = dict(a.bins)
    for e, c in b.bins.items():
        out.bins[e] = out.bins.get(e, 0) + c
    out.check()
    return out


def empty(dtype: DType) -> ExponentHistogram:
    return ExponentHistogram(dtype=dtype)


def report(h: ExponentHistogram, thresholds: tuple[int, ...] = (-24, -27)
           ) -> UnderflowReport:
    rec = (mp_engine.suggest_constant_scale(h.max_abs)
           if h.max_abs > 0 else float("nan"))
    return UnderflowReport(
        fraction_zero=h.fraction_zero(),
        fraction_below={e: h.fraction_below(e) for e in thresholds},
        max_abs=h.max_abs,
        recommended_scale=rec,
    )


def write_csv(path, h: ExponentHistogram) -> None:
    """One row per exponent bin plus reserved rows zero/nonfinite/total."""
    with open(path, "w") as fh:
        fh.write("exponent,count\n")
        for e in sorted(h.bins):
            fh.write(f"{e},{h.bins[e]}\n")
        fh.write(f"zero,{h.zero_count}\n")
        fh.write(f"nonfinite,{h.nonfinite_count}\n")
        fh.write(f"total,{h.total}\n")


def read_csv(path) -> ExponentHistogram:
    h = ExponentHistogram(dtype=DType.F16)
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "exponent,count":
            raise ValueError(f"bad histogram CSV header {header!r}")
        for line in fh:
            key, _, count = line.strip().partition(",")
            if key == "zero":
                h.zero_count = int(count)
            elif key == "nonfinite":
                h.nonfinite_count = int(count)
            elif key == "total":
                h.total = int(count)
            else:
                h.bins[int(key)] = int(count)
    h.check()
    return h


def csv_name(run_id: str, role: str, iteration: int) -> str:
    return f"hist_{run_id}_{role}_iter{iteration:06d}.csv"


def sample_hook(every_n: int, out_dir=None, run_id: str = "run",
                unscaled_too: bool = False) -> "SampleHook":
    """Build a training-loop attachment sampling every_n iterations."""
    return SampleHook(every_n, out_dir, run_id, unscaled_too)


class SampleHook:
    """Training-loop attachment: every_n iterations it histograms the
    weight gradients and activation gradients (as stored, i.e. before
    unscaling) and optionally the unscaled f32 weight gradients."""

    def __init__(self, every_n: int, out_dir=None, run_id: str = "run",
                 unscaled_too: bool = False):
        if every_n < 1:
            raise ValueError("every_n must be >= 1")
        self.every_n = every_n
        self.out_dir = out_dir
        self.run_id = run_id
        self.unscaled_too = unscaled_too
        self.captures: list[dict] = []

    def __call__(self, iteration: int, grads: nn.Gradients,
                 unscaled: dict[str, np.ndarray]) -> None:
        if iteration % self.every_n != 0:
            return
        weight_h = None
        for g in grads.weights.values():
            gh = histogram(g)
            weight_h = gh if weight_h is None else merge(weight_h, gh)
        act_h = None
        for a in grads.activations:
            if a is None:
                continue
            ah = histogram(a)
            act_h = ah if act_h is None else merge(act_h, ah)
        cap = {"iteration": iteration, "weight_grad": weight_h,
               "act_grad": act_h}
        if self.unscaled_too:
            uh = None
            for arr in unscaled.values():
                t = T.store(arr, DType.F32)
                th = histogram(t)
                uh = th if uh is None else merge(uh, th)
            cap["weight_grad_unscaled"] = uh
        self.captures.append(cap)
        if self.out_dir is not None:
            for role in ("weight_grad", "act_grad"):
                if cap.get(role) is not None:
                    write_csv(os.path.join(
                        self.out_dir, csv_name(self.run_id, role, iteration)),
                        cap[role])

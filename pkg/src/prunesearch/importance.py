"""Group importance scores from Taylor-expansion loss-change estimates.

Two granularities are computed per weight slice and blended:

  * vector level: |g.θ − ½ Σ_j (g_j.θ)²| over the flattened slice, the
    quadratic term approximated by the empirical Fisher over per-sample
    gradients g_j;
  * element level: Σ_k |g_k θ_k − ½ Σ_j (g_{j,k} θ_k)²|.

The blended slice score is alpha1*align1*vector + alpha2*align2*element
(the alignment factors bridge the magnitude gap between the two terms);
an alternative composition that applies the alignment factors to the
first/second-order terms inside each granularity sits behind the
``order_aligned`` switch. Group score = agg over the slice scores.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError
from .model import GradientStore, TransformerLM

AGG_CHOICES = ("sum", "prod", "max", "last")
FIXED_CHOICES = ("none", "first", "second")

DEFAULT_ALIGN1_GRID = (math.e**5, math.e**6, math.e**7)
DEFAULT_ALIGN2_GRID = (math.e**-2, math.e**-3, 1e-4)


@dataclass(frozen=True)
class MetricConfig:
    alpha1: float = 0.5
    alpha2: float = 0.5
    align1: float = 1.0
    align2: float = 1.0
    agg: str = "sum"
    fixed: str = "none"
    order_aligned: bool = False

    def __post_init__(self):
        if not (0.0 <= self.alpha1 <= 1.0 and 0.0 <= self.alpha2 <= 1.0):
            raise ConfigurationError(
                f"alpha1/alpha2 must lie in [0, 1], got {self.alpha1}, {self.alpha2}"
            )
        if self.align1 <= 0 or self.align2 <= 0:
            raise ConfigurationError(
                f"alignment factors must be positive, got {self.align1}, {self.align2}"
            )
        if self.agg not in AGG_CHOICES:
            raise ConfigurationError(f"agg must be one of {AGG_CHOICES}, got {self.agg!r}")
        if self.fixed not in FIXED_CHOICES:
            raise ConfigurationError(f"fixed must be one of {FIXED_CHOICES}, got {self.fixed!r}")


@dataclass
class ImportanceReport:
    per_group: dict[int, float]
    metric: MetricConfig
    calib_fingerprint: str = ""

    def serialize(self) -> str:
        m = self.metric
        head = (
            f"# metric alpha1={m.alpha1!r} alpha2={m.alpha2!r} align1={m.align1!r} "
            f"align2={m.align2!r} agg={m.agg} fixed={m.fixed}\n"
            f"# calib {self.calib_fingerprint}\n"
        )
        body = "".join(f"{gid} {self.per_group[gid]!r}\n" for gid in sorted(self.per_group))
        return head + body


def aggregate(values, agg: str) -> float:
    """Reduce slice scores to one group score: sum, prod, max or last."""
    values = list(values)
    if not values:
        raise ValueError("cannot aggregate an empty list")
    if agg == "sum":
        return float(np.sum(values))
    if agg == "prod":
        return float(np.prod(values))
    if agg == "max":
        return float(np.max(values))
    if agg == "last":
        return float(values[-1])
    raise ConfigurationError(f"unknown aggregation {agg!r}")


def _slice_terms(model, grads: GradientStore, sl, need_fisher: bool, need_sq: bool):
    """First-order and Fisher terms of one slice at both granularities.

    Returns (fo_vec, fisher_vec, fo_elem_abs_sum handled by caller):
    here we return raw pieces: g.θ, Σ_j (g_j.θ)², per-element g*θ and θ²·Σg².
    """
    theta = sl.view(model.params[sl.param]).reshape(-1)
    g = sl.view(grads.batch[sl.param]).reshape(-1)
    fo_vec = float(g @ theta)
    fo_elem = g * theta
    fisher_vec = 0.0
    fisher_elem = None
    if need_fisher:
        for gs in grads.per_sample:
            dot = float(sl.view(gs[sl.param]).reshape(-1) @ theta)
            fisher_vec += dot * dot
    if need_sq:
        sq = sl.view(grads.squared_sum()[sl.param]).reshape(-1)
        fisher_elem = theta * theta * sq
    return fo_vec, fisher_vec, fo_elem, fisher_elem


def vector_importance(model: TransformerLM, grads: GradientStore, group) -> list[float]:
    """Per-slice |g.θ − ½ Σ_j (g_j.θ)²| (Fisher-approximated quadratic)."""
    if grads.per_sample is None:
        raise ValueError("vector importance needs per-sample gradients for the Fisher term")
    out = []
    for sl in group.slices:
        fo, fisher, _, _ = _slice_terms(model, grads, sl, need_fisher=True, need_sq=False)
        out.append(abs(fo - 0.5 * fisher))
    return out


def element_importance(model: TransformerLM, grads: GradientStore, group) -> list[float]:
    """Per-slice sum over elements of |g_k θ_k − ½ θ_k² Σ_j g_{j,k}²|."""
    if grads.per_sample is None:
        raise ValueError("element importance needs per-sample gradients for the Fisher term")
    out = []
    for sl in group.slices:
        _, _, fo_elem, fisher_elem = _slice_terms(model, grads, sl, need_fisher=False, need_sq=True)
        out.append(float(np.abs(fo_elem - 0.5 * fisher_elem).sum()))
    return out


def _slice_score(model, grads, sl, metric: MetricConfig) -> float:
    if metric.fixed == "first":
        theta = sl.view(model.params[sl.param]).reshape(-1)
        g = sl.view(grads.batch[sl.param]).reshape(-1)
        return abs(float(g @ theta))
    fo_vec, fisher_vec, fo_elem, fisher_elem = _slice_terms(
        model, grads, sl, need_fisher=metric.fixed != "second", need_sq=True
    )
    elem_plain = float(np.abs(fo_elem - 0.5 * fisher_elem).sum())
    if metric.fixed == "second":
        return elem_plain
    if metric.order_aligned:
        vec = abs(metric.align1 * fo_vec - metric.align2 * 0.5 * fisher_vec)
        elem = float(np.abs(metric.align1 * fo_elem - metric.align2 * 0.5 * fisher_elem).sum())
        return metric.alpha1 * vec + metric.alpha2 * elem
    vec_plain = abs(fo_vec - 0.5 * fisher_vec)
    return metric.alpha1 * metric.align1 * vec_plain + metric.alpha2 * metric.align2 * elem_plain


def combined_importance(
    model: TransformerLM, grads: GradientStore, groups, metric: MetricConfig,
    calib_fingerprint: str = "",
) -> ImportanceReport:
    """Score every group with the blended metric and aggregate per group."""
    if grads.per_sample is None and metric.fixed != "first":
        raise ValueError("combined importance needs per-sample gradients")
    per_group = {}
    for group in groups:
        scores = [_slice_score(model, grads, sl, metric) for sl in group.slices]
        per_group[group.id] = aggregate(scores, metric.agg)
    return ImportanceReport(per_group, metric, calib_fingerprint)

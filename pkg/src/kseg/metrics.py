"""Segmentation metrics and the analytic FLOPs/parameter estimator.

Dice, sensitivity, and specificity are computed one-vs-rest per class from
confusion counts. Macro values average over foreground classes only.
Empty-denominator convention: if a class is absent from both prediction and
ground truth its dice/sensitivity count as 1.0; if absent from exactly one,
0.0. Specificity is 1.0 when there are no negatives.

The FLOPs estimator counts multiplies and adds separately (a linear layer is
2 * fan_in * fan_out per token) and covers matrix products only; bias adds,
normalizations, activations, and softmax are excluded, as are FFT/iFFT
costs. Backward is fixed at exactly 2x forward.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .models import (
    ARCH_MLP,
    ARCH_PERCEIVER,
    ARCH_RESMLP,
    ARCH_TRANSFORMER,
    ModelSpec,
)


def confusion(pred: np.ndarray, gt: np.ndarray, cls: int) -> tuple[int, int, int, int]:
    """One-vs-rest (TP, FP, FN, TN) voxel counts for class `cls`."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(
            f"prediction extents {pred.shape} != ground truth {gt.shape}"
        )
    p = pred == cls
    g = gt == cls
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = pred.size - tp - fp - fn
    return tp, fp, fn, tn


def dice(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    if denom == 0:
        return 1.0  # both masks empty
    return 2.0 * tp / denom


def sensitivity(tp: int, fn: int, fp: int = 0) -> float:
    if tp + fn == 0:
        return 1.0 if fp == 0 else 0.0  # no positives in gt
    return tp / (tp + fn)


def specificity(tn: int, fp: int) -> float:
    if tn + fp == 0:
        return 1.0  # no negatives in gt
    return tn / (tn + fp)


def subject_metrics(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> dict:
    """Per-class {class -> (dice, sensitivity, specificity)} for one subject."""
    result = {}
    for c in range(num_classes):
        tp, fp, fn, tn = confusion(pred, gt, c)
        result[c] = (dice(tp, fp, fn), sensitivity(tp, fn, fp), specificity(tn, fp))
    return result


@dataclass
class ClassStats:
    dice: float
    sensitivity: float
    specificity: float
    dice_std: float
    sensitivity_std: float
    specificity_std: float


@dataclass
class MetricsReport:
    """Mean/std of each metric per class and macro over foreground classes."""

    per_class: dict[int, ClassStats]
    macro: ClassStats
    n_subjects: int
    config_id: str = ""

    def rows(self, class_names: tuple[str, ...]) -> list[dict]:
        """One row per class plus an 'All' macro row."""
        out = []
        for c, stats in sorted(self.per_class.items()):
            out.append({"class": class_names[c], **_stats_dict(stats)})
        out.append({"class": "All", **_stats_dict(self.macro)})
        return out


def _stats_dict(stats: ClassStats) -> dict:
    return {
        "dice": stats.dice,
        "sensitivity": stats.sensitivity,
        "specificity": stats.specificity,
        "dice_std": stats.dice_std,
    }


def _mean_std(values) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())  # population std


def aggregate(subject_reports: list[dict], num_classes: int,
              config_id: str = "") -> MetricsReport:
    """Mean and population std across subjects; macro excludes background."""
    if not subject_reports:
        raise ConfigError("cannot aggregate an empty list of subject metrics")
    per_class = {}
    for c in range(num_classes):
        triples = np.array([rep[c] for rep in subject_reports])
        (d, d_std), (s, s_std), (sp, sp_std) = (
            _mean_std(triples[:, 0]),
            _mean_std(triples[:, 1]),
            _mean_std(triples[:, 2]),
        )
        per_class[c] = ClassStats(d, s, sp, d_std, s_std, sp_std)
    fg = range(1, num_classes)
    macro_per_subject = np.array(
        [[np.mean([rep[c][i] for c in fg]) for i in range(3)]
         for rep in subject_reports]
    )
    (md, md_std), (ms, ms_std), (msp, msp_std) = (
        _mean_std(macro_per_subject[:, 0]),
        _mean_std(macro_per_subject[:, 1]),
        _mean_std(macro_per_subject[:, 2]),
    )
    macro = ClassStats(md, ms, msp, md_std, ms_std, msp_std)
    return MetricsReport(per_class=per_class, macro=macro,
                         n_subjects=len(subject_reports), config_id=config_id)


# -- FLOPs / parameter estimator -------------------------------------------


@dataclass
class FlopsReport:
    forward_flops: int
    backward_flops: int
    parameters: int
    breakdown: list[tuple[str, int, int]]  # (layer, forward flops, parameters)

    def attention_forward_flops(self) -> int:
        return sum(f for name, f, _ in self.breakdown if ".attn" in name)


def _linear(name: str, tokens: int, fan_in: int, fan_out: int,
            bias: bool = True) -> tuple[str, int, int]:
    return name, 2 * tokens * fan_in * fan_out, fan_in * fan_out + (fan_out if bias else 0)


def _layer_norm(name: str, dim: int) -> tuple[str, int, int]:
    return name, 0, 2 * dim


def _attention(name: str, t_q: int, t_kv: int, dim: int) -> list[tuple[str, int, int]]:
    entries = [
        _linear(f"{name}.q", t_q, dim, dim, bias=False),
        _linear(f"{name}.k", t_kv, dim, dim, bias=False),
        _linear(f"{name}.v", t_kv, dim, dim, bias=False),
        (f"{name}.scores", 2 * t_q * t_kv * dim, 0),
        (f"{name}.mix", 2 * t_q * t_kv * dim, 0),
        _linear(f"{name}.out", t_q, dim, dim),
    ]
    return entries


def _encoder_block(name: str, tokens: int, dim: int) -> list[tuple[str, int, int]]:
    entries = [_layer_norm(f"{name}.ln1", dim)]
    entries += _attention(f"{name}.attn", tokens, tokens, dim)
    entries.append(_layer_norm(f"{name}.ln2", dim))
    entries.append(_linear(f"{name}.ff.up", tokens, dim, 4 * dim))
    entries.append(_linear(f"{name}.ff.down", tokens, 4 * dim, dim))
    return entries


def flops_estimate(spec: ModelSpec, batch: int = 1) -> FlopsReport:
    """Analytic forward/backward FLOPs and exact parameter counts.

    The parameter column matches the built model weight-for-weight; the
    cross-check lives in the test suite.
    """
    d, fi, fo = spec.tokens, spec.effective_in, spec.out_features
    m, n = spec.latent, spec.depth
    entries: list[tuple[str, int, int]] = []

    if spec.arch == ARCH_MLP:
        entries.append(_linear("embed", d, fi, m))
        for i in range(n):
            entries.append(_linear(f"hidden{i}", d, m, m))
        entries.append(_linear("head", d, m, fo))
    elif spec.arch == ARCH_RESMLP:
        for i in range(n):
            entries.append((f"block{i}.aff1", 0, 2 * fi))
            entries.append(_linear(f"block{i}.token_mix", fi, d, d))
            entries.append((f"block{i}.aff2", 0, 2 * fi))
            entries.append(_linear(f"block{i}.mlp_up", d, fi, m))
            entries.append(_linear(f"block{i}.mlp_down", d, m, fi))
        entries.append(_linear("head", d, fi, fo))
    elif spec.arch == ARCH_TRANSFORMER:
        entries.append(_linear("embed", d, fi, m))
        for i in range(n):
            entries += _encoder_block(f"block{i}", d, m)
        entries.append(_linear("head", d, m, fo))
    elif spec.arch == ARCH_PERCEIVER:
        l = spec.latent_len
        entries.append(_linear("embed", d, fi, m))
        entries.append(("latents", 0, l * m))
        entries.append(_layer_norm("enc.ln_q", m))
        entries.append(_layer_norm("enc.ln_kv", m))
        entries += _attention("enc.attn", l, d, m)
        for i in range(n):
            entries += _encoder_block(f"block{i}", l, m)
        entries.append(("out_queries", 0, d * m))
        entries.append(_layer_norm("dec.ln_q", m))
        entries.append(_layer_norm("dec.ln_kv", m))
        entries += _attention("dec.attn", d, l, m)
        entries.append(_linear("head", d, m, fo))
    else:  # pragma: no cover - ModelSpec validates arch
        raise ConfigError(f"unknown architecture {spec.arch!r}")

    entries = [(name, f * batch, p) for name, f, p in entries]
    forward = sum(f for _, f, _ in entries)
    params = sum(p for _, _, p in entries)
    return FlopsReport(
        forward_flops=forward,
        backward_flops=2 * forward,
        parameters=params,
        breakdown=entries,
    )

"""Mask losses for the bilayer decoder and the multi-task aggregate.

Predictions are probability maps (``numpy`` arrays in ``[0, 1]``), targets are
binary masks of the same shape. Probabilities are clamped to
``[epsilon, 1 - epsilon]`` before taking logs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Mapping, NamedTuple, Optional, Sequence

import numpy as np

__all__ = [
    "LossConfig",
    "RoiLoss",
    "SampleLosses",
    "bce_mask_loss",
    "bce_mask_grad",
    "seg_loss",
    "seg_loss_grad",
    "total_loss",
    "grad_check",
    "run_loss_cases",
]


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.25
    epsilon: float = 1e-7
    # "zero": occluder term targets an empty mask when there is no occluder;
    # "skip": the occluder term is dropped for such ROIs.
    missing_occluder: str = "zero"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if not 0 < self.epsilon < 0.5:
            raise ValueError("epsilon must be in (0, 0.5)")
        if self.missing_occluder not in ("zero", "skip"):
            raise ValueError("missing_occluder must be 'zero' or 'skip'")


class RoiLoss(NamedTuple):
    cls: float
    reg: float
    seg: float
    positive: bool


@dataclass(frozen=True)
class SampleLosses:
    rpn: Sequence[float] = ()
    rois: Sequence[RoiLoss] = field(default_factory=tuple)

    def __post_init__(self):
        for v in list(self.rpn) + [x for r in self.rois for x in r[:3]]:
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"loss terms must be finite and >= 0, got {v}")


def _pair(pred, target) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} differ in shape")
    if pred.size == 0:
        raise ValueError("empty mask")
    if np.any((pred < 0) | (pred > 1)) or np.any(np.isnan(pred)):
        raise ValueError("predictions must lie in [0, 1]")
    return pred, target


def bce_mask_loss(pred, target, epsilon: float = 1e-7) -> float:
    """Mean per-pixel binary cross entropy."""
    p, t = _pair(pred, target)
    p = np.clip(p, epsilon, 1 - epsilon)
    return float(-np.mean(t * np.log(p) + (1 - t) * np.log1p(-p)))


def bce_mask_grad(pred, target, epsilon: float = 1e-7) -> np.ndarray:
    """d(bce_mask_loss)/d(pred); zero where the clamp is active."""
    p, t = _pair(pred, target)
    inside = (p > epsilon) & (p < 1 - epsilon)
    out = np.zeros_like(p)
    np.divide(p - t, p * (1 - p) * p.size, out=out, where=inside)
    return out


def _occluder_target(pred_occluder, gt_occluder):
    if gt_occluder is None:
        return np.zeros(np.shape(pred_occluder))
    return gt_occluder


def seg_loss(pred_occludee, gt_occludee, pred_occluder, gt_occluder=None, cfg: LossConfig = LossConfig()) -> float:
    main = bce_mask_loss(pred_occludee, gt_occludee, cfg.epsilon)
    if gt_occluder is None and cfg.missing_occluder == "skip":
        return main
    target = _occluder_target(pred_occluder, gt_occluder)
    return main + cfg.lam * bce_mask_loss(pred_occluder, target, cfg.epsilon)


def seg_loss_grad(
    pred_occludee, gt_occludee, pred_occluder, gt_occluder=None, cfg: LossConfig = LossConfig()
) -> tuple[np.ndarray, np.ndarray]:
    g_e = bce_mask_grad(pred_occludee, gt_occludee, cfg.epsilon)
    if gt_occluder is None and cfg.missing_occluder == "skip":
        return g_e, np.zeros(np.shape(pred_occluder))
    target = _occluder_target(pred_occluder, gt_occluder)
    return g_e, cfg.lam * bce_mask_grad(pred_occluder, target, cfg.epsilon)


def total_loss(s: SampleLosses) -> float:
    """Mean RPN loss plus mean ROI loss, regression and mask terms on positives only.

    The whole expression is evaluated in exact rational arithmetic and rounded
    once, so the result is correctly rounded and independent of entry order.
    """
    total = Fraction(0)
    if len(s.rpn):
        total += sum(map(Fraction, s.rpn), Fraction(0)) / len(s.rpn)
    if len(s.rois):
        roi = Fraction(0)
        for r in s.rois:
            roi += Fraction(r.cls)
            if r.positive:
                roi += Fraction(r.reg) + Fraction(r.seg)
        total += roi / len(s.rois)
    return float(total)


# ---------------------------------------------------------------------------
# gradient checking

_BCE_KEYS = ("pred",)
_SEG_KEYS = ("pred_occludee", "pred_occluder")


def _losses(cfg: LossConfig) -> dict[str, tuple[tuple[str, ...], Callable, Callable]]:
    def bce(pt):
        return bce_mask_loss(pt["pred"], pt["target"], cfg.epsilon)

    def bce_g(pt):
        return {"pred": bce_mask_grad(pt["pred"], pt["target"], cfg.epsilon)}

    def seg(pt):
        return seg_loss(pt["pred_occludee"], pt["gt_occludee"], pt["pred_occluder"], pt.get("gt_occluder"), cfg)

    def seg_g(pt):
        ge, gr = seg_loss_grad(pt["pred_occludee"], pt["gt_occludee"], pt["pred_occluder"], pt.get("gt_occluder"), cfg)
        return {"pred_occludee": ge, "pred_occluder": gr}

    return {"bce": (_BCE_KEYS, bce, bce_g), "seg": (_SEG_KEYS, seg, seg_g)}


def grad_check(
    loss_fn: str,
    point: Mapping[str, np.ndarray],
    direction: Mapping[str, np.ndarray],
    h: float = 1e-5,
    cfg: LossConfig = LossConfig(),
) -> float:
    """Relative error between analytic and central-difference directional derivatives.

    ``loss_fn`` is ``"bce"`` (point keys ``pred``, ``target``) or ``"seg"``
    (``pred_occludee``, ``gt_occludee``, ``pred_occluder``, ``gt_occluder``).
    Raises ``ValueError`` if the stencil touches the clamp region.
    """
    table = _losses(cfg)
    if loss_fn not in table:
        raise ValueError(f"unknown loss {loss_fn!r}; expected one of {sorted(table)}")
    keys, f, grad = table[loss_fn]
    point = {k: np.asarray(v, dtype=np.float64) for k, v in point.items() if v is not None}
    direction = {k: np.asarray(direction.get(k, np.zeros_like(point[k])), dtype=np.float64) for k in keys}

    for k in keys:
        for s in (-h, 0.0, h):
            q = point[k] + s * direction[k]
            if np.any(q <= cfg.epsilon) or np.any(q >= 1 - cfg.epsilon):
                raise ValueError(f"{k} is not strictly inside the clamp region")

    g = grad(point)
    analytic = math.fsum(float(np.sum(g[k] * direction[k])) for k in keys)

    def shifted(s):
        return f({**point, **{k: point[k] + s * direction[k] for k in keys}})

    numeric = (shifted(h) - shifted(-h)) / (2 * h)
    return abs(analytic - numeric) / max(1.0, abs(analytic))


def run_loss_cases(cases: Sequence[Mapping], seed: int = 0, epsilon: float = 1e-7) -> list[dict]:
    """Evaluate a batch of loss cases (the ``loss-check`` input format).

    Each case has ``pred`` and ``target``; optional ``pred_occluder``,
    ``target_occluder`` (``null`` for "no occluder") and ``lambda``. The
    gradient check uses a seeded random direction per case.
    """
    rng = np.random.default_rng(seed)
    out = []
    for i, case in enumerate(cases):
        cfg = LossConfig(lam=float(case.get("lambda", 0.25)), epsilon=epsilon)
        pred = np.asarray(case["pred"], dtype=np.float64)
        target = np.asarray(case["target"], dtype=np.float64)
        row: dict = {"index": i, "lambda": cfg.lam, "bce": bce_mask_loss(pred, target, epsilon)}
        if "pred_occluder" in case:
            occ_pred = np.asarray(case["pred_occluder"], dtype=np.float64)
            occ_t = case.get("target_occluder")
            occ_t = None if occ_t is None else np.asarray(occ_t, dtype=np.float64)
            row["occluder_bce"] = bce_mask_loss(occ_pred, _occluder_target(occ_pred, occ_t), epsilon)
            row["seg"] = seg_loss(pred, target, occ_pred, occ_t, cfg)
            point = {"pred_occludee": pred, "gt_occludee": target, "pred_occluder": occ_pred, "gt_occluder": occ_t}
            direction = {k: rng.standard_normal(pred.shape if k == "pred_occludee" else occ_pred.shape) for k in _SEG_KEYS}
            name = "seg"
        else:
            point = {"pred": pred, "target": target}
            direction = {"pred": rng.standard_normal(pred.shape)}
            name = "bce"
        try:
            row["grad_check"] = grad_check(name, point, direction, cfg=cfg)
        except ValueError as exc:
            row["grad_check"] = None
            row["grad_check_skipped"] = str(exc)
        out.append(row)
    return out

"""Small-scale numerical model of the occlusion-aware bilayer mask decoder.

The first decoder sees ``[mask_token, iou_token, *sparse_prompt]`` and the image
grid, predicts occluder logits and returns refined embeddings. The refined
image grid and prompt tokens (learnable-token slots removed) are added
elementwise to the originals, and a second decoder predicts the occludee from
the sum.

Decoders are pluggable ``DecoderKernel`` objects. Two are provided:
``IdentityKernel`` for analytic checks and ``AttentionKernel``, a single
two-way attention block. Everything runs in float64 on CPU.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Optional, Protocol

import numpy as np
import torch
import torch.nn.functional as F

from . import losses

__all__ = [
    "EmbeddingBundle",
    "LearnableTokens",
    "KernelOutput",
    "DecoderKernel",
    "IdentityKernel",
    "AttentionKernel",
    "BilayerOutput",
    "random_bundle",
    "random_tokens",
    "forward_occluder",
    "apply_residual_guidance",
    "forward_occludee",
    "forward_bilayer",
    "seg_loss_with_grads",
    "finite_difference_check",
    "demo",
]

DTYPE = torch.float64


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class EmbeddingBundle:
    """Image grid ``(g, g, d)`` and sparse prompt tokens ``(p, d)``."""

    image: torch.Tensor
    sparse: torch.Tensor

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != self.image.shape[1] or self.image.shape[0] < 1:
            raise ShapeError(f"image embedding must be (g, g, d), got {tuple(self.image.shape)}")
        if self.sparse.ndim != 2 or self.sparse.shape[0] < 1:
            raise ShapeError(f"sparse prompt must be (p, d), got {tuple(self.sparse.shape)}")
        if self.image.shape[2] != self.sparse.shape[1]:
            raise ShapeError("image and prompt widths differ")

    @property
    def width(self) -> int:
        return self.image.shape[2]

    @property
    def grid_size(self) -> int:
        return self.image.shape[0]

    def same_shape(self, other: "EmbeddingBundle") -> bool:
        return self.image.shape == other.image.shape and self.sparse.shape == other.sparse.shape


@dataclass(frozen=True)
class LearnableTokens:
    mask: torch.Tensor
    iou: torch.Tensor

    def stacked(self) -> torch.Tensor:
        return torch.stack([self.mask, self.iou])


class KernelOutput(NamedTuple):
    tokens: torch.Tensor  # (T, d)
    grid: torch.Tensor  # (g*g, d)
    mask_logits: torch.Tensor  # (g*g,)
    iou_logit: torch.Tensor  # ()


class DecoderKernel(Protocol):
    width: int

    def parameters(self) -> dict[str, torch.Tensor]: ...

    def __call__(self, tokens: torch.Tensor, grid: torch.Tensor) -> KernelOutput: ...


class IdentityKernel:
    """Passes tokens and grid through; mask logit at cell q is <token_0, grid_q>."""

    def __init__(self, width: int):
        self.width = width

    def parameters(self) -> dict[str, torch.Tensor]:
        return {}

    def __call__(self, tokens, grid) -> KernelOutput:
        return KernelOutput(tokens, grid, grid @ tokens[0], tokens[1] @ grid.mean(0))


def _gaussian(rng: np.random.Generator, shape, std: float) -> torch.Tensor:
    return torch.from_numpy(np.asarray(rng.standard_normal(shape) * std, dtype=np.float64))


class AttentionKernel:
    """One two-way attention block.

    token self-attention -> token-to-grid cross-attention -> MLP on tokens ->
    grid-to-token cross-attention, each with a residual connection. Single
    head, no normalization. The mask head projects the refined mask token and
    dots it with every refined grid cell; the IoU head is linear on the
    refined IoU token.
    """

    ATTENTIONS = ("self", "t2i", "i2t")

    def __init__(self, params: Mapping[str, torch.Tensor]):
        self.params = dict(params)
        self.width = self.params["self_q"].shape[0]

    @classmethod
    def init(cls, width: int, seed: int = 0, std: float = 0.02, hidden: Optional[int] = None) -> "AttentionKernel":
        hidden = hidden or 2 * width
        rng = np.random.default_rng(seed)
        p = {}
        for a in cls.ATTENTIONS:
            for m in "qkvo":
                p[f"{a}_{m}"] = _gaussian(rng, (width, width), std)
        p["mlp_w1"] = _gaussian(rng, (width, hidden), std)
        p["mlp_b1"] = _gaussian(rng, (hidden,), std)
        p["mlp_w2"] = _gaussian(rng, (hidden, width), std)
        p["mlp_b2"] = _gaussian(rng, (width,), std)
        p["hyper"] = _gaussian(rng, (width, width), std)
        p["iou_w"] = _gaussian(rng, (width,), std)
        p["iou_b"] = _gaussian(rng, (), std)
        return cls(p)

    def parameters(self) -> dict[str, torch.Tensor]:
        return self.params

    def _attend(self, name: str, queries, keys):
        p = self.params
        q, k, v = queries @ p[f"{name}_q"], keys @ p[f"{name}_k"], keys @ p[f"{name}_v"]
        a = torch.softmax(q @ k.T / math.sqrt(self.width), dim=-1)
        return (a @ v) @ p[f"{name}_o"]

    def __call__(self, tokens, grid) -> KernelOutput:
        p = self.params
        t = tokens + self._attend("self", tokens, tokens)
        t = t + self._attend("t2i", t, grid)
        t = t + F.gelu(t @ p["mlp_w1"] + p["mlp_b1"], approximate="tanh") @ p["mlp_w2"] + p["mlp_b2"]
        g = grid + self._attend("i2t", grid, t)
        mask_logits = g @ (t[0] @ p["hyper"])
        iou_logit = t[1] @ p["iou_w"] + p["iou_b"]
        return KernelOutput(t, g, mask_logits, iou_logit)


@dataclass(frozen=True)
class BilayerOutput:
    occluder_logits: torch.Tensor
    occludee_logits: torch.Tensor
    refined_bundle: EmbeddingBundle
    guided_bundle: EmbeddingBundle
    occluder_iou: Optional[torch.Tensor] = field(default=None, repr=False)
    occludee_iou: Optional[torch.Tensor] = field(default=None, repr=False)


def random_bundle(grid_size: int = 8, prompts: int = 4, width: int = 32, seed: int = 0, std: float = 1.0) -> EmbeddingBundle:
    rng = np.random.default_rng(seed)
    image = _gaussian(rng, (grid_size, grid_size, width), std)
    sparse = _gaussian(rng, (prompts, width), std)
    return EmbeddingBundle(image, sparse)


def random_tokens(width: int = 32, seed: int = 0, std: float = 0.02) -> LearnableTokens:
    rng = np.random.default_rng(seed)
    return LearnableTokens(_gaussian(rng, (width,), std), _gaussian(rng, (width,), std))


def _run(bundle: EmbeddingBundle, toks: LearnableTokens, k: DecoderKernel):
    d = bundle.width
    if k.width != d or toks.mask.shape != (d,) or toks.iou.shape != (d,):
        raise ShapeError(f"kernel width {k.width}, token shapes {tuple(toks.mask.shape)}/{tuple(toks.iou.shape)} vs embedding width {d}")
    g = bundle.grid_size
    tokens = torch.cat([toks.stacked(), bundle.sparse])
    out = k(tokens, bundle.image.reshape(g * g, d))
    if out.tokens.shape != tokens.shape or out.grid.shape != (g * g, d):
        raise ShapeError("kernel changed token or grid shape")
    refined = EmbeddingBundle(out.grid.reshape(g, g, d), out.tokens[2:])
    return out.mask_logits.reshape(g, g), refined, out.iou_logit


def forward_occluder(bundle: EmbeddingBundle, toks: LearnableTokens, k: DecoderKernel):
    """Occluder logits ``(g, g)`` and the refined bundle."""
    logits, refined, _ = _run(bundle, toks, k)
    return logits, refined


def apply_residual_guidance(original: EmbeddingBundle, refined: EmbeddingBundle) -> EmbeddingBundle:
    if not original.same_shape(refined):
        raise ShapeError("original and refined bundles differ in shape")
    return EmbeddingBundle(original.image + refined.image, original.sparse + refined.sparse)


def forward_occludee(guided: EmbeddingBundle, toks: LearnableTokens, k: DecoderKernel) -> torch.Tensor:
    return _run(guided, toks, k)[0]


def forward_bilayer(
    bundle: EmbeddingBundle,
    toks: LearnableTokens,
    k_r: DecoderKernel,
    k_e: DecoderKernel,
    guidance: bool = True,
) -> BilayerOutput:
    """Occluder pass, residual guidance, occludee pass.

    With ``guidance=False`` the refined embeddings are zeroed before the add,
    so the occludee decoder sees the original bundle.
    """
    if k_r.width != k_e.width:
        raise ShapeError("occluder and occludee kernels differ in width")
    occ_logits, refined, occ_iou = _run(bundle, toks, k_r)
    if not guidance:
        refined = EmbeddingBundle(torch.zeros_like(refined.image), torch.zeros_like(refined.sparse))
    guided = apply_residual_guidance(bundle, refined)
    occludee_logits, _, occludee_iou = _run(guided, toks, k_e)
    return BilayerOutput(occ_logits, occludee_logits, refined, guided, occ_iou, occludee_iou)


# ---------------------------------------------------------------------------
# supervision and gradient checks


def _leaves(toks: LearnableTokens, k_r: DecoderKernel, k_e: DecoderKernel) -> dict[str, torch.Tensor]:
    out = {"tokens.mask": toks.mask, "tokens.iou": toks.iou}
    out.update({f"occluder.{n}": t for n, t in k_r.parameters().items()})
    out.update({f"occludee.{n}": t for n, t in k_e.parameters().items()})
    return out


def _rebuild(leaves: Mapping[str, torch.Tensor], k_r: DecoderKernel, k_e: DecoderKernel):
    toks = LearnableTokens(leaves["tokens.mask"], leaves["tokens.iou"])

    def kernel(prefix, k):
        if isinstance(k, AttentionKernel):
            return AttentionKernel({n: leaves[f"{prefix}.{n}"] for n in k.parameters()})
        return k

    return toks, kernel("occluder", k_r), kernel("occludee", k_e)


def _loss_value(bundle, toks, k_r, k_e, gt_occludee, gt_occluder, cfg) -> float:
    with torch.no_grad():
        out = forward_bilayer(bundle, toks, k_r, k_e)
        pe = torch.sigmoid(out.occludee_logits).numpy()
        pr = torch.sigmoid(out.occluder_logits).numpy()
    return losses.seg_loss(pe, gt_occludee, pr, gt_occluder, cfg)


def seg_loss_with_grads(
    bundle: EmbeddingBundle,
    toks: LearnableTokens,
    k_r: DecoderKernel,
    k_e: DecoderKernel,
    gt_occludee: np.ndarray,
    gt_occluder: Optional[np.ndarray],
    cfg: losses.LossConfig = losses.LossConfig(),
) -> tuple[float, dict[str, torch.Tensor]]:
    """Segmentation loss and its gradient w.r.t. tokens and every kernel parameter.

    The loss gradient w.r.t. the sigmoid outputs comes from ``losses``; autograd
    carries it back through both decoders.
    """
    leaves = {n: t.detach().clone().requires_grad_(True) for n, t in _leaves(toks, k_r, k_e).items()}
    toks_, k_r_, k_e_ = _rebuild(leaves, k_r, k_e)
    out = forward_bilayer(bundle, toks_, k_r_, k_e_)
    pe = torch.sigmoid(out.occludee_logits)
    pr = torch.sigmoid(out.occluder_logits)
    pe_np, pr_np = pe.detach().numpy(), pr.detach().numpy()
    value = losses.seg_loss(pe_np, gt_occludee, pr_np, gt_occluder, cfg)
    ge, gr = losses.seg_loss_grad(pe_np, gt_occludee, pr_np, gt_occluder, cfg)
    torch.autograd.backward([pe, pr], [torch.from_numpy(ge), torch.from_numpy(gr)])
    grads = {n: (t.grad if t.grad is not None else torch.zeros_like(t)) for n, t in leaves.items()}
    return value, grads


def finite_difference_check(
    bundle: EmbeddingBundle,
    toks: LearnableTokens,
    k_r: DecoderKernel,
    k_e: DecoderKernel,
    gt_occludee: np.ndarray,
    gt_occluder: Optional[np.ndarray],
    cfg: losses.LossConfig = losses.LossConfig(),
    h: float = 1e-4,
    elementwise: bool = True,
    seed: int = 0,
) -> dict[str, float]:
    """Worst relative error ``|analytic - central difference| / max(1, |analytic|)`` per parameter.

    ``elementwise`` perturbs every scalar; otherwise one seeded random
    direction per parameter tensor is used.
    """
    _, grads = seg_loss_with_grads(bundle, toks, k_r, k_e, gt_occludee, gt_occluder, cfg)
    base = {n: t.detach().clone() for n, t in _leaves(toks, k_r, k_e).items()}
    rng = np.random.default_rng(seed)

    def loss_at(name, delta):
        leaves = dict(base)
        leaves[name] = base[name] + delta
        return _loss_value(bundle, *_rebuild(leaves, k_r, k_e), gt_occludee, gt_occluder, cfg)

    report = {}
    for name, value in base.items():
        g = grads[name]
        if elementwise:
            worst = 0.0
            flat = value.reshape(-1)
            for i in range(flat.numel()):
                delta = torch.zeros(flat.numel(), dtype=DTYPE)
                delta[i] = h
                delta = delta.reshape(value.shape)
                numeric = (loss_at(name, delta) - loss_at(name, -delta)) / (2 * h)
                analytic = float(g.reshape(-1)[i])
                worst = max(worst, abs(analytic - numeric) / max(1.0, abs(analytic)))
            report[name] = worst
        else:
            direction = torch.from_numpy(rng.standard_normal(tuple(value.shape)))
            numeric = (loss_at(name, h * direction) - loss_at(name, -h * direction)) / (2 * h)
            analytic = float((g * direction).sum())
            report[name] = abs(analytic - numeric) / max(1.0, abs(analytic))
    return report


def demo(width: int = 32, grid_size: int = 8, prompts: int = 4, seed: int = 0, std: float = 0.02) -> dict:
    """Seeded end-to-end instance summarised as plain JSON-able data."""
    bundle = random_bundle(grid_size, prompts, width, seed=seed)
    toks = random_tokens(width, seed=seed + 1, std=std)
    k_r = AttentionKernel.init(width, seed=seed + 2, std=std)
    k_e = AttentionKernel.init(width, seed=seed + 3, std=std)
    out = forward_bilayer(bundle, toks, k_r, k_e)
    unguided = forward_bilayer(bundle, toks, k_r, k_e, guidance=False)

    rng = np.random.default_rng(seed + 4)
    gt = rng.random((grid_size, grid_size)) < 0.5
    gt_e = gt & (rng.random((grid_size, grid_size)) < 0.3)
    cfg = losses.LossConfig()
    loss, _ = seg_loss_with_grads(bundle, toks, k_r, k_e, gt, gt_e, cfg)
    residuals = finite_difference_check(bundle, toks, k_r, k_e, gt, gt_e, cfg, elementwise=False, seed=seed + 5)

    def norm(t):
        return float(torch.linalg.vector_norm(t))

    return {
        "config": {"width": width, "grid_size": grid_size, "prompts": prompts, "seed": seed, "init_std": std},
        "shapes": {
            "image_embedding": list(bundle.image.shape),
            "sparse_prompt": list(bundle.sparse.shape),
            "decoder_tokens": [prompts + 2, width],
            "occluder_logits": list(out.occluder_logits.shape),
            "occludee_logits": list(out.occludee_logits.shape),
            "refined_image": list(out.refined_bundle.image.shape),
            "refined_sparse": list(out.refined_bundle.sparse.shape),
        },
        "guidance": {
            "refined_image_norm": norm(out.refined_bundle.image),
            "refined_sparse_norm": norm(out.refined_bundle.sparse),
            "guided_minus_original_image_norm": norm(out.guided_bundle.image - bundle.image),
            "occludee_logit_delta_norm": norm(out.occludee_logits - unguided.occludee_logits),
        },
        "occluder_logits": out.occluder_logits.tolist(),
        "occludee_logits": out.occludee_logits.tolist(),
        "seg_loss": loss,
        "grad_check": {"h": 1e-4, "max_relative_error": max(residuals.values()), "per_parameter": residuals},
    }

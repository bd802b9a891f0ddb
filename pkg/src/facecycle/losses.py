"""Training objectives: flow cycle, expression/identity cycles, margin, perceptual."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import torch

from .warpflow import invert_flow, warp


@dataclass
class LossWeights:
    lambda_perc: float = 0.05
    alpha_margin: float = 0.1
    flow: float = 1.0
    expression: float = 1.0
    identity: float = 1.0
    margin: float = 1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be non-negative, got {v}")


@dataclass
class LossReport:
    terms: dict[str, torch.Tensor]
    total: torch.Tensor
    weights: dict[str, float] = field(default_factory=dict)

    def recomputed_total(self) -> float:
        return sum(self.weights.get(k, 1.0) * float(v) for k, v in self.terms.items())

    def values(self) -> dict[str, float]:
        return {k: float(v.detach()) for k, v in self.terms.items()}

    def to_json(self, step: int, stage: int, **extra) -> str:
        row = {"step": step, "stage": stage, **self.values(), "total": float(self.total.detach()), **extra}
        return json.dumps(row, sort_keys=True)


def l1(a, b):
    return (a - b).abs().mean()


def loss_flow(face, fw):
    """Mean absolute error of the forward-then-backward warp round trip."""
    bw = invert_flow(fw)
    return l1(face, warp(warp(face, fw), bw))


def gram(feature: torch.Tensor) -> torch.Tensor:
    """``A Aᵀ / (C·H·W)`` for a ``(C, H, W)`` or ``(B, C, H, W)`` map."""
    c, h, w = feature.shape[-3:]
    a = feature.reshape(*feature.shape[:-3], c, h * w)
    return a @ a.transpose(-1, -2) / (c * h * w)


def perceptual_loss(extractor, a, b, feats_a=None):
    """Feature and Gram-matrix distances summed over relu2_1, relu3_1, relu4_1.

    Each distance is the mean squared difference over its elements.
    ``feats_a`` may carry an already computed deep pyramid of ``a``.
    """
    if a.shape != b.shape:
        raise ValueError("perceptual_loss inputs must share a shape")
    pa = (feats_a if feats_a is not None else extractor(a, deep=True)).levels()
    pb = extractor(b, deep=True).levels()
    total = a.new_zeros(())
    for fa, fb in zip(pa, pb):
        total = total + (fa - fb).pow(2).mean() + (gram(fa) - gram(fb)).pow(2).mean()
    return total


def _cycle_loss(extractor, x1, x2, r1, r2, w: LossWeights, feats=(None, None)) -> LossReport:
    l1_term = l1(x1, r1) + l1(x2, r2)
    perc = perceptual_loss(extractor, x1, r1, feats[0]) + perceptual_loss(extractor, x2, r2, feats[1])
    return LossReport({"l1": l1_term, "perc": perc}, l1_term + w.lambda_perc * perc, {"l1": 1.0, "perc": w.lambda_perc})


def loss_expression(extractor, face, face_t, recon, recon_t, w: LossWeights, feats=(None, None)) -> LossReport:
    """L1 + λ·perceptual between each face and its cross reconstruction."""
    return _cycle_loss(extractor, face, face_t, recon, recon_t, w, feats)


def loss_identity(extractor, neutral1, neutral2, recon1, recon2, w: LossWeights) -> LossReport:
    return _cycle_loss(extractor, neutral1, neutral2, recon1, recon2, w)


def rms(a, b, dims=None):
    d = (a - b).pow(2)
    ms = d.mean() if dims is None else d.mean(dim=dims)
    # floor keeps the sqrt gradient finite at a == b
    return ms.clamp(min=1e-12).sqrt()


def loss_margin(mean_face, neutral, alpha: float = 0.1, per_sample: bool = False):
    """Hinge ``max(rms(mean_face - neutral) - alpha, 0)``.

    With ``per_sample`` the hinge is applied to each batch item and averaged.
    """
    if per_sample and mean_face.dim() == 4:
        dist = rms(mean_face, neutral, dims=(1, 2, 3))
    else:
        dist = rms(mean_face, neutral)
    return (dist - alpha).clamp(min=0).mean()

"""Learnable networks of the face-cycle model and the frozen VGG-19 extractor."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F
import torchvision

from .warpflow import invert_flow, rescale_flow, warp

RENORM_EPS = 1e-5
SIGMA_EPS = 1e-5
CHECKPOINT_FORMAT = 1
# leaky units everywhere learnable; with plain ReLU whole GroupNorm channels sit dead
LEAK = 0.2
DEFAULT_BACKBONE_FILE = "vgg19-dcbb9e9d.pth"

# Single place to revise layer dimensions.
ARCH = {
    "encoder_stages": [(64, 2), (128, 3), (256, 4), (256, 4), (256, 3)],
    "flow_seed_size": 4,
    "flow_channels": [256, 256, 128, 64, 32, 32],
    # the head predicts flow in units of flow_scale pixels
    "flow_scale": 16.0,
    "decoder_channels": (128, 64, 32),
    "mlp_hidden": 256,
    "groups": 8,
    # relu2_1, relu3_1, relu4_1 of torchvision's vgg19().features
    "vgg_cuts": (7, 12, 21),
    "vgg_channels": (128, 256, 512),
}


class BackboneWeightsMissing(RuntimeError):
    pass


@dataclass
class FeaturePyramid:
    fine: torch.Tensor
    coarse: torch.Tensor
    deep: torch.Tensor | None = None

    def levels(self):
        out = [self.fine, self.coarse]
        if self.deep is not None:
            out.append(self.deep)
        return out


@dataclass
class ModulationParams:
    mean: torch.Tensor
    std: torch.Tensor


def cache_dir() -> Path:
    return Path(os.environ.get("FACECYCLE_CACHE", Path.home() / ".cache" / "facecycle"))


def resolve_backbone_weights(spec: str) -> Path | None:
    """Map a ``backbone_weights`` config value to a file, or None for ``random``."""
    if spec == "random":
        return None
    path = Path(spec).expanduser()
    if not path.is_absolute() and not path.exists():
        path = cache_dir() / spec
    if not path.exists():
        raise BackboneWeightsMissing(
            f"pretrained VGG-19 weights not found at {path}; place the torchvision "
            f"file there, point model.backbone_weights at it, or use "
            f"model.backbone_weights=random for offline smoke runs"
        )
    return path


class VGGFeatures(nn.Module):
    """Frozen VGG-19 trunk returning relu2_1, relu3_1 and relu4_1 activations."""

    mean = (0.485, 0.456, 0.406)
    std = (0.229, 0.224, 0.225)

    def __init__(self, weights: str = DEFAULT_BACKBONE_FILE, random_seed: int = 0):
        super().__init__()
        cut_fine, cut_coarse, cut_deep = ARCH["vgg_cuts"]
        path = resolve_backbone_weights(weights)
        if path is None:
            # seeded independently of the global RNG so every run sees the same trunk
            fork = torch.random.fork_rng(devices=[])
            with fork:
                torch.manual_seed(random_seed)
                trunk = torchvision.models.vgg19(weights=None).features[:cut_deep]
        else:
            trunk = torchvision.models.vgg19(weights=None).features
            state = torch.load(path, map_location="cpu", weights_only=True)
            state = {k[len("features."):]: v for k, v in state.items() if k.startswith("features.")}
            trunk.load_state_dict(state)
            trunk = trunk[:cut_deep]
        for m in trunk:
            if isinstance(m, nn.ReLU):
                m.inplace = False
        self.to_fine = trunk[:cut_fine]
        self.to_coarse = trunk[cut_fine:cut_coarse]
        self.to_deep = trunk[cut_coarse:cut_deep]
        self.register_buffer("in_mean", torch.tensor(self.mean).view(1, 3, 1, 1))
        self.register_buffer("in_std", torch.tensor(self.std).view(1, 3, 1, 1))
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # no dropout/batchnorm inside, but keep it pinned to eval anyway
        return super().train(False)

    def forward(self, x: torch.Tensor, deep: bool = False) -> FeaturePyramid:
        x = (x - self.in_mean) / self.in_std
        fine = self.to_fine(x)
        coarse = self.to_coarse(fine)
        out = FeaturePyramid(fine, coarse)
        if deep:
            out.deep = self.to_deep(coarse)
        return out


def _conv_block(cin, cout, stride=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
        nn.GroupNorm(ARCH["groups"], cout),
        nn.LeakyReLU(LEAK),
    )


class Encoder(nn.Module):
    """16-layer convolutional encoder: five stride-2 stages, pooled to a vector."""

    def __init__(self, dim: int = 256):
        super().__init__()
        layers = []
        cin = 3
        for cout, depth in ARCH["encoder_stages"]:
            layers.append(_conv_block(cin, cout, stride=2))
            layers.extend(_conv_block(cout, cout) for _ in range(depth - 1))
            cin = cout
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(cin, dim)

    def forward(self, x):
        return self.head(self.body(x).mean(dim=(2, 3)))


class FlowDecoder(nn.Module):
    def __init__(self, dim: int = 256, image_size: int = 64):
        super().__init__()
        chans = ARCH["flow_channels"]
        seed = ARCH["flow_seed_size"]
        self.seed = seed
        self.fc = nn.Linear(dim, chans[0] * seed * seed)
        blocks = []
        size = seed
        for cin, cout in zip(chans[:-1], chans[1:]):
            up = size < image_size
            if up:
                size *= 2
            blocks.append(
                nn.Sequential(
                    nn.Upsample(scale_factor=2, mode="nearest") if up else nn.Identity(),
                    _conv_block(cin, cout),
                )
            )
        if size != image_size:
            raise ValueError(f"flow decoder reaches {size}px, expected {image_size}px")
        self.blocks = nn.Sequential(*blocks)
        self.out = nn.Conv2d(chans[-1], 2, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, code):
        x = self.fc(code).view(code.shape[0], -1, self.seed, self.seed)
        return self.out(self.blocks(F.leaky_relu(x, LEAK))) * ARCH["flow_scale"]


class FeatureDecoder(nn.Module):
    """Coarse-to-fine decoder from (fine, coarse) VGG levels to an RGB image."""

    def __init__(self):
        super().__init__()
        c_fine, c_coarse, _ = ARCH["vgg_channels"]
        c1, c2, c3 = ARCH["decoder_channels"]
        self.coarse = nn.Sequential(_conv_block(c_coarse, c1), nn.Upsample(scale_factor=2))
        self.merge = nn.Sequential(
            _conv_block(c1 + c_fine, c2),
            _conv_block(c2, c2),
            nn.Upsample(scale_factor=2),
            _conv_block(c2, c3),
        )
        self.out = nn.Conv2d(c3, 3, 3, padding=1)

    def forward(self, fine, coarse):
        x = self.coarse(coarse)
        x = self.merge(torch.cat([x, fine], dim=1))
        return torch.sigmoid(self.out(x))


class IdentityDecoder(nn.Module):
    """Renormalizes the coarse level, re-encodes the fine level, then decodes."""

    def __init__(self):
        super().__init__()
        c_fine = ARCH["vgg_channels"][0]
        self.fine_proj = nn.Conv2d(c_fine, c_fine, 1)
        self.decoder = FeatureDecoder()

    def forward(self, pyramid: FeaturePyramid, params: ModulationParams):
        coarse = renormalize(pyramid.coarse, params)
        return self.decoder(self.fine_proj(pyramid.fine), coarse)


class ModulationMLP(nn.Module):
    def __init__(self, dim: int = 256, channels: int = 256):
        super().__init__()
        hidden = ARCH["mlp_hidden"]
        self.net = nn.Sequential(
            nn.Linear(dim, hidden), nn.LeakyReLU(LEAK),
            nn.Linear(hidden, hidden), nn.LeakyReLU(LEAK),
            nn.Linear(hidden, 2 * channels),
        )

    def forward(self, code) -> ModulationParams:
        mean, raw_std = self.net(code).chunk(2, dim=1)
        return ModulationParams(mean, F.softplus(raw_std) + SIGMA_EPS)


def renormalize(x: torch.Tensor, params: ModulationParams, eps: float = RENORM_EPS) -> torch.Tensor:
    """Replace each channel's spatial mean/std with the target statistics.

    ``x`` is ``(B, C, H, W)``; ``params`` hold ``(B, C)`` targets. The std is
    floored at ``eps`` so flat channels map to the target mean.
    """
    if x.dim() != 4:
        raise ValueError(f"expected (B, C, H, W) features, got {tuple(x.shape)}")
    mean_t, std_t = params.mean, params.std
    if mean_t.shape != x.shape[:2] or std_t.shape != x.shape[:2]:
        raise ValueError(
            f"modulation params {tuple(mean_t.shape)} do not match feature channels {tuple(x.shape[:2])}"
        )
    mu = x.mean(dim=(2, 3), keepdim=True)
    sigma = x.std(dim=(2, 3), keepdim=True, unbiased=False).clamp(min=eps)
    return (x - mu) / sigma * std_t[..., None, None] + mean_t[..., None, None]


class FaceCycle(nn.Module):
    """Expression/identity encoders with their flow, feature and modulation decoders."""

    stage_modules = {
        1: ("exp_encoder", "flow_decoder", "exp_decoder"),
        2: ("id_encoder", "id_decoder", "mlp_de", "mlp_re"),
    }

    def __init__(self, d_exp=256, d_id=256, image_size=64, backbone_weights=DEFAULT_BACKBONE_FILE):
        super().__init__()
        self.d_exp = d_exp
        self.d_id = d_id
        self.image_size = image_size
        self.backbone_weights = backbone_weights
        self.vgg = VGGFeatures(backbone_weights)
        self.exp_encoder = Encoder(d_exp)
        self.flow_decoder = FlowDecoder(d_exp, image_size)
        self.exp_decoder = FeatureDecoder()
        c_mod = ARCH["vgg_channels"][1]
        self.id_encoder = Encoder(d_id)
        self.id_decoder = IdentityDecoder()
        self.mlp_de = ModulationMLP(d_id, c_mod)
        self.mlp_re = ModulationMLP(d_id, c_mod)
        # highest stage whose networks hold trained weights
        self.trained_stage = 0

    def stage_parameters(self, stage: int):
        for name in self.stage_modules[stage]:
            yield from getattr(self, name).parameters()

    def set_stage(self, stage: int):
        """Make only the given stage's subnetworks trainable."""
        self.requires_grad_(False)
        for name in self.stage_modules[stage]:
            getattr(self, name).requires_grad_(True)
        return self

    # -- single operations -------------------------------------------------

    def encode_expression(self, face):
        return self.exp_encoder(face)

    def encode_identity(self, face):
        return self.id_encoder(face)

    def decode_flow(self, code):
        return self.flow_decoder(code)

    def extract_features(self, face, deep=False) -> FeaturePyramid:
        return self.vgg(face, deep=deep)

    def decode_face_from_features(self, pyramid: FeaturePyramid):
        return self.exp_decoder(pyramid.fine, pyramid.coarse)

    def modulation_de(self, code) -> ModulationParams:
        return self.mlp_de(code)

    def modulation_re(self, code) -> ModulationParams:
        return self.mlp_re(code)

    def decode_identity_face(self, pyramid: FeaturePyramid, params: ModulationParams):
        return self.id_decoder(pyramid, params)

    # -- composite paths ---------------------------------------------------

    @staticmethod
    def warp_pyramid(pyramid: FeaturePyramid, flow) -> FeaturePyramid:
        levels = []
        for feat in (pyramid.fine, pyramid.coarse):
            levels.append(warp(feat, rescale_flow(flow, *feat.shape[-2:])))
        return FeaturePyramid(*levels)

    def flows(self, face):
        """Forward and backward flow of a face."""
        fw = self.decode_flow(self.encode_expression(face))
        return fw, invert_flow(fw)

    def de_expression(self, face, fw, pyramid: FeaturePyramid | None = None):
        if pyramid is None:
            pyramid = self.extract_features(face)
        return self.decode_face_from_features(self.warp_pyramid(pyramid, fw))

    def re_expression(self, neutral, bw):
        return self.decode_face_from_features(self.warp_pyramid(self.extract_features(neutral), bw))

    def de_identity(self, neutral, id_code):
        return self.decode_identity_face(self.extract_features(neutral), self.modulation_de(id_code))

    def re_identity(self, mean_face, id_code):
        return self.decode_identity_face(self.extract_features(mean_face), self.modulation_re(id_code))

    # -- checkpoints -------------------------------------------------------

    def metadata(self, stage: int, step: int) -> dict:
        return {
            "format_version": CHECKPOINT_FORMAT,
            "d_exp": self.d_exp,
            "d_id": self.d_id,
            "image_size": self.image_size,
            "backbone_weights": self.backbone_weights,
            "stage": stage,
            "step": step,
        }

    def trainable_state_dict(self):
        return {k: v for k, v in self.state_dict().items() if not k.startswith("vgg.")}


def save_checkpoint(path, model: FaceCycle, stage: int, step: int, extra: dict | None = None):
    """Atomically write model parameters plus a metadata header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"meta": model.metadata(stage, step), "model": model.trainable_state_dict()}
    if extra:
        payload.update(extra)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path, backbone_weights: str | None = None):
    """Rebuild a model from a checkpoint; returns ``(model, payload)``."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    meta = payload.get("meta")
    if not meta or meta.get("format_version") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format")
    model = FaceCycle(
        d_exp=meta["d_exp"],
        d_id=meta["d_id"],
        image_size=meta["image_size"],
        backbone_weights=backbone_weights or meta["backbone_weights"],
    )
    model.load_state_dict(payload["model"], strict=False)
    model.trained_stage = meta["stage"]
    missing = set(model.trainable_state_dict()) - set(payload["model"])
    if missing:
        raise ValueError(f"{path}: checkpoint does not match model, missing {sorted(missing)[:3]}")
    return model, payload


def architecture_summary(model: FaceCycle) -> dict:
    """Parameter counts per subnetwork and output shapes for a 1-image batch."""
    counts = {
        name: sum(p.numel() for p in getattr(model, name).parameters())
        for name in ("vgg", "exp_encoder", "flow_decoder", "exp_decoder", "id_encoder", "id_decoder", "mlp_de", "mlp_re")
    }
    s = model.image_size
    with torch.no_grad():
        face = torch.zeros(1, 3, s, s)
        pyr = model.extract_features(face, deep=True)
        code = model.encode_expression(face)
        idc = model.encode_identity(face)
        params = model.modulation_de(idc)
        shapes = {
            "expr_code": list(code.shape[1:]),
            "id_code": list(idc.shape[1:]),
            "flow": list(model.decode_flow(code).shape[1:]),
            "feat_fine": list(pyr.fine.shape[1:]),
            "feat_coarse": list(pyr.coarse.shape[1:]),
            "feat_deep": list(pyr.deep.shape[1:]),
            "modulation": list(params.mean.shape[1:]),
            "neutral": list(model.decode_face_from_features(pyr).shape[1:]),
            "mean_face": list(model.decode_identity_face(pyr, params).shape[1:]),
        }
    return {"parameters": counts, "shapes": shapes}

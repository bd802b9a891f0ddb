"""Procedural cartoon faces for smoke tests and desk-scale training runs.

Each identity fixes colours and proportions and is drawn once with a neutral
expression. Frames are smooth deformations of that drawing: mouth opening,
smile, brow raise, eye squint, head shift and roll. Every frame is therefore
a warp of its identity's neutral face.

    python -m facecycle.synthetic OUT_DIR --identities 2 --frames 4
"""

from __future__ import annotations

import argparse
import math
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw, ImageFilter

from .warpflow import warp

SCALE = 4


def identity_params(rng: np.random.Generator) -> dict:
    return {
        "skin": tuple(int(v) for v in rng.integers([150, 100, 70], [255, 200, 170])),
        "hair": tuple(int(v) for v in rng.integers(0, 140, size=3)),
        "eyes": tuple(int(v) for v in rng.integers(0, 120, size=3)),
        "lips": tuple(int(v) for v in rng.integers([140, 30, 30], [230, 110, 110])),
        "background": tuple(int(v) for v in rng.integers(40, 220, size=3)),
        "face_w": float(rng.uniform(0.30, 0.38)),
        "face_h": float(rng.uniform(0.38, 0.45)),
        "hair_h": float(rng.uniform(0.05, 0.18)),
        "eye_gap": float(rng.uniform(0.11, 0.15)),
        "glasses": bool(rng.random() < 0.3),
    }


def expression_params(rng: np.random.Generator) -> dict:
    return {
        "mouth_open": float(rng.uniform(0.0, 1.0)),
        "smile": float(rng.uniform(-1.0, 1.0)),
        "brow": float(rng.uniform(-1.0, 1.0)),
        "eye_open": float(rng.uniform(0.5, 1.0)),
        "dx": float(rng.uniform(-0.05, 0.05)),
        "dy": float(rng.uniform(-0.04, 0.04)),
        "roll": float(rng.uniform(-10, 10)),
    }


NEUTRAL = {"mouth_open": 0.0, "smile": 0.0, "brow": 0.0, "eye_open": 1.0, "dx": 0.0, "dy": 0.0, "roll": 0.0}


def _layout(ident: dict, n: int) -> dict:
    cx, cy = n * 0.5, n * 0.52
    fh = n * ident["face_h"]
    return {
        "cx": cx, "cy": cy, "fw": n * ident["face_w"], "fh": fh,
        "gap": n * ident["eye_gap"], "ey": cy - fh * 0.18, "er": n * 0.045,
        "my": cy + fh * 0.5, "mw": n * 0.11,
    }


def draw_neutral(ident: dict, n: int) -> Image.Image:
    """Symmetric neutral face at ``n`` x ``n`` (before blur and downsampling)."""
    L = _layout(ident, n)
    cx, cy, fw, fh, er = L["cx"], L["cy"], L["fw"], L["fh"], L["er"]
    img = Image.new("RGB", (n, n), ident["background"])
    d = ImageDraw.Draw(img)
    d.ellipse([cx - fw * 1.05, cy - fh - n * ident["hair_h"], cx + fw * 1.05, cy + fh * 0.2], fill=ident["hair"])
    d.ellipse([cx - fw, cy - fh, cx + fw, cy + fh], fill=ident["skin"])
    ey = L["ey"]
    for sx in (-1, 1):
        ex = cx + sx * L["gap"]
        d.ellipse([ex - er * 1.3, ey - er, ex + er * 1.3, ey + er], fill=(245, 245, 245))
        d.ellipse([ex - er * 0.6, ey - er * 0.6, ex + er * 0.6, ey + er * 0.6], fill=ident["eyes"])
        by = ey - er * 2.2
        d.line([ex - er * 1.5, by, ex + er * 1.5, by], fill=ident["hair"], width=max(2, n // 64))
        if ident["glasses"]:
            d.ellipse([ex - er * 2, ey - er * 1.8, ex + er * 2, ey + er * 1.8], outline=(30, 30, 30), width=max(2, n // 80))
    d.polygon([(cx, cy - fh * 0.05), (cx - n * 0.03, cy + fh * 0.2), (cx + n * 0.03, cy + fh * 0.2)],
              fill=tuple(max(0, c - 40) for c in ident["skin"]))
    my, mw = L["my"], L["mw"]
    d.ellipse([cx - mw, my - n * 0.02, cx + mw, my + n * 0.02], fill=ident["lips"])
    # the slit opens into the mouth cavity when the deformation stretches it
    d.ellipse([cx - mw * 0.7, my - n * 0.005, cx + mw * 0.7, my + n * 0.005], fill=(60, 20, 20))
    return img


def expression_field(ident: dict, expr: dict, n: int) -> torch.Tensor:
    """Backward-sampling displacement (2, n, n) in pixels that poses the neutral drawing."""
    L = _layout(ident, n)
    y, x = torch.meshgrid(torch.arange(n, dtype=torch.float64), torch.arange(n, dtype=torch.float64), indexing="ij")

    def bump(px, py, sx, sy):
        return torch.exp(-(((x - px) / sx) ** 2 + ((y - py) / sy) ** 2) / 2)

    # head pose: undo roll about the face centre and the shift
    cx, cy = L["cx"] + n * expr["dx"], L["cy"] + n * expr["dy"]
    t = math.radians(expr["roll"])
    ux, uy = x - cx, y - cy
    src_x = math.cos(t) * ux - math.sin(t) * uy + L["cx"]
    src_y = math.sin(t) * ux + math.cos(t) * uy + L["cy"]

    # facial motion in the neutral frame
    my, mw = L["my"], L["mw"]
    g = bump(L["cx"], my, mw * 1.1, n * 0.07)
    src_y = src_y - 0.6 * expr["mouth_open"] * (src_y - my) * g
    corner = ((src_x - L["cx"]) / mw).clamp(-1.5, 1.5) ** 2
    src_y = src_y + n * 0.012 * expr["smile"] * corner * g
    gb = sum(bump(L["cx"] + s * L["gap"], L["ey"] - L["er"] * 2.2, L["er"] * 2.0, L["er"] * 1.2) for s in (-1, 1))
    src_y = src_y + L["er"] * 0.8 * expr["brow"] * gb
    for s in (-1, 1):
        ge = bump(L["cx"] + s * L["gap"], L["ey"], L["er"] * 1.8, L["er"] * 1.1)
        src_y = src_y + (1 - 1 / expr["eye_open"]) * (src_y - L["ey"]) * ge * -1
    return torch.stack([src_x - x, src_y - y]).float()


def render_face(ident: dict, expr: dict, size: int = 64) -> Image.Image:
    n = size * SCALE
    neutral = torch.from_numpy(np.asarray(draw_neutral(ident, n), dtype=np.float32) / 255).permute(2, 0, 1)
    posed = warp(neutral, expression_field(ident, expr, n))
    arr = (posed.permute(1, 2, 0).clamp(0, 1).numpy() * 255 + 0.5).astype(np.uint8)
    img = Image.fromarray(arr).filter(ImageFilter.GaussianBlur(radius=SCALE * 0.6))
    return img.resize((size, size), Image.LANCZOS)


def make_toy_corpus(root, identities: int = 2, clips: int = 1, frames: int = 4, size: int = 64, seed: int = 0) -> Path:
    """Write ``identities x clips x frames`` PNGs in the corpus layout."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    for i in range(identities):
        ident = identity_params(rng)
        for c in range(clips):
            clip_dir = root / f"id{i:05d}" / f"clip{c:03d}"
            clip_dir.mkdir(parents=True, exist_ok=True)
            for f in range(frames):
                render_face(ident, expression_params(rng), size).save(clip_dir / f"frame_{f:04d}.png")
    return root


def main(argv=None):
    p = argparse.ArgumentParser(description="write a procedural face-video corpus")
    p.add_argument("out")
    p.add_argument("--identities", type=int, default=2)
    p.add_argument("--clips", type=int, default=1)
    p.add_argument("--frames", type=int, default=4)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args(argv)
    make_toy_corpus(a.out, a.identities, a.clips, a.frames, a.size, a.seed)


if __name__ == "__main__":
    main()

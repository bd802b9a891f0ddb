"""Bilinear backward warping, flow inversion and flow resizing.

Flow fields are ``(B, 2, H, W)`` (or ``(2, H, W)``) tensors in pixel units:
channel 0 is the horizontal displacement (positive to the right), channel 1
the vertical displacement (positive downward).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

FLOW_MAGIC = b"FLW1"


def _batched(t: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if t.dim() == 3:
        return t.unsqueeze(0), True
    if t.dim() == 4:
        return t, False
    raise ValueError(f"expected a 3-d or 4-d tensor, got shape {tuple(t.shape)}")


def warp(x: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Sample ``x`` at ``p + flow(p)`` with bilinear interpolation.

    Sample coordinates are clamped to the image border, so constant images
    stay constant and a zero flow reproduces ``x`` exactly.
    """
    xb, squeeze = _batched(x)
    fb, _ = _batched(flow)
    if fb.shape[1] != 2:
        raise ValueError(f"flow must have 2 channels, got {fb.shape[1]}")
    if xb.shape[-2:] != fb.shape[-2:]:
        raise ValueError(
            f"flow size {tuple(fb.shape[-2:])} does not match input size {tuple(xb.shape[-2:])}"
        )
    if fb.shape[0] != xb.shape[0]:
        if fb.shape[0] == 1:
            fb = fb.expand(xb.shape[0], -1, -1, -1)
        else:
            raise ValueError("batch sizes of input and flow differ")

    b, c, h, w = xb.shape
    ys = torch.arange(h, dtype=fb.dtype, device=fb.device).view(1, h, 1)
    xs = torch.arange(w, dtype=fb.dtype, device=fb.device).view(1, 1, w)
    sx = (xs + fb[:, 0]).clamp(0, w - 1)
    sy = (ys + fb[:, 1]).clamp(0, h - 1)

    # non-finite flow must surface as NaN output, not as a bad gather index
    x0 = torch.nan_to_num(sx.detach(), nan=0.0).floor()
    y0 = torch.nan_to_num(sy.detach(), nan=0.0).floor()
    wx = sx - x0
    wy = sy - y0
    x0 = x0.long()
    y0 = y0.long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)

    flat = xb.reshape(b, c, h * w)

    def gather(yy, xx):
        idx = (yy * w + xx).view(b, 1, h * w).expand(b, c, h * w)
        return flat.gather(2, idx).view(b, c, h, w)

    wx = wx.unsqueeze(1).to(xb.dtype)
    wy = wy.unsqueeze(1).to(xb.dtype)
    top = gather(y0, x0) * (1 - wx) + gather(y0, x1) * wx
    bottom = gather(y1, x0) * (1 - wx) + gather(y1, x1) * wx
    out = top * (1 - wy) + bottom * wy
    return out.squeeze(0) if squeeze else out


def invert_flow(fw: torch.Tensor) -> torch.Tensor:
    """Backward flow ``-warp(fw, fw)``: the forward field resampled through itself."""
    return -warp(fw, fw)


def rescale_flow(flow: torch.Tensor, target_h: int, target_w: int) -> torch.Tensor:
    """Bilinearly resize a flow field, scaling displacements to the new pixel grid."""
    if target_h < 1 or target_w < 1:
        raise ValueError("target dimensions must be >= 1")
    fb, squeeze = _batched(flow)
    h, w = fb.shape[-2:]
    if (h, w) == (target_h, target_w):
        return flow
    out = F.interpolate(fb, size=(target_h, target_w), mode="bilinear", align_corners=False)
    scale = torch.tensor([target_w / w, target_h / h], dtype=out.dtype, device=out.device)
    out = out * scale.view(1, 2, 1, 1)
    return out.squeeze(0) if squeeze else out


def write_flow(path, flow: torch.Tensor) -> None:
    """Write a single ``2xHxW`` field as ``FLW1`` header + little-endian float32."""
    arr = np.asarray(flow.detach().cpu().numpy(), dtype="<f4")
    if arr.ndim != 3 or arr.shape[0] != 2:
        raise ValueError(f"expected a 2xHxW flow, got shape {arr.shape}")
    _, h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(FLOW_MAGIC + struct.pack("<III", h, w, 0))
        fh.write(arr.tobytes(order="C"))


def read_flow(path) -> torch.Tensor:
    data = Path(path).read_bytes()
    if data[:4] != FLOW_MAGIC:
        raise ValueError(f"{path}: not a FLW1 flow file")
    h, w, _ = struct.unpack("<III", data[4:16])
    arr = np.frombuffer(data, dtype="<f4", offset=16)
    if arr.size != 2 * h * w:
        raise ValueError(f"{path}: truncated flow payload")
    return torch.from_numpy(arr.reshape(2, h, w).astype(np.float32))


def flow_to_rgb(flow: torch.Tensor, max_magnitude: float | None = None) -> np.ndarray:
    """Color-wheel rendering: direction sets hue, magnitude sets saturation.

    Zero displacement renders as mid gray. Returns ``HxWx3`` uint8.
    """
    import matplotlib.colors as mcolors

    f = flow.detach().cpu().double().numpy()
    u, v = f[0], f[1]
    mag = np.hypot(u, v)
    if max_magnitude is None:
        max_magnitude = float(mag.max())
    sat = np.clip(mag / max_magnitude, 0.0, 1.0) if max_magnitude > 0 else np.zeros_like(mag)
    hue = (np.arctan2(-v, -u) / np.pi + 1.0) / 2.0
    hsv = np.stack([hue, np.ones_like(mag), np.ones_like(mag)], axis=-1)
    rgb = 0.5 * (1 - sat[..., None]) + mcolors.hsv_to_rgb(hsv) * sat[..., None]
    return np.round(rgb * 255).astype(np.uint8)

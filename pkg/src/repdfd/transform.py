"""Border mask, resize, and the prompt/image merge.

Images are (H, W, 3) float tensors in model-input (normalized) space, with an
optional leading batch dimension. The prompt ``delta`` lives in the same space
and is never clipped.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import GeometryError

Tensor = torch.Tensor

RESIZE_KERNELS = {"bilinear": 0}


def _check_geometry(H: int, W: int, p: int) -> None:
    if p < 0:
        raise GeometryError(f"border width must be non-negative, got {p}")
    if H <= 0 or W <= 0:
        raise GeometryError(f"image size must be positive, got {H}x{W}")
    if 2 * p >= min(H, W):
        raise GeometryError(f"border width {p} leaves no interior in a {H}x{W} image")


def build_border_mask(H: int, W: int, p: int) -> Tensor:
    """Bool (H, W) mask, True on the outer ring of width ``p``."""
    _check_geometry(H, W, p)
    mask = torch.ones(H, W, dtype=torch.bool)
    mask[p:H - p, p:W - p] = False
    return mask


def prompt_param_count(H: int, W: int, p: int) -> int:
    """Trainable prompt entries: 3 channels times the border area."""
    _check_geometry(H, W, p)
    return 6 * p * (H + W) - 12 * p * p


def resize(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Bilinear resize of (..., h, w, 3) to ``size`` with half-pixel centers."""
    if tuple(x.shape[-3:-1]) == tuple(size):
        return x
    lead = x.shape[:-3]
    flat = x.reshape(-1, *x.shape[-3:]).permute(0, 3, 1, 2)
    out = F.interpolate(flat, size=tuple(size), mode="bilinear", align_corners=False, antialias=False)
    return out.permute(0, 2, 3, 1).reshape(*lead, *size, 3)


def resize_for_prompt(x: Tensor, p: int) -> Tensor:
    H, W = x.shape[-3], x.shape[-2]
    _check_geometry(H, W, p)
    return resize(x, (H - 2 * p, W - 2 * p))


@dataclass(eq=False)
class VisualPrompt:
    delta: Tensor
    border_width: int
    mask: Tensor

    @classmethod
    def zeros(cls, H: int, W: int, p: int, dtype=torch.float64) -> "VisualPrompt":
        mask = build_border_mask(H, W, p)
        return cls(torch.zeros(H, W, 3, dtype=dtype), p, mask)

    @property
    def geometry(self) -> tuple[int, int]:
        return tuple(self.delta.shape[:2])

    @property
    def n_params(self) -> int:
        H, W = self.geometry
        return prompt_param_count(H, W, self.border_width)

    def masked_delta(self, delta: Tensor | None = None) -> Tensor:
        d = self.delta if delta is None else delta
        return torch.where(self.mask[..., None], d, torch.zeros((), dtype=d.dtype))


@dataclass(eq=False)
class PromptedImage:
    pixels: Tensor
    source_id: str | None = None


def merge(x: Tensor, vp: VisualPrompt, delta: Tensor | None = None) -> Tensor:
    """Tensor-level input transform; differentiable w.r.t. ``delta``.

    ``x`` may be batched and of any source size; the interior of the result is
    the resized image itself (no arithmetic touches it).
    """
    H, W = vp.geometry
    p = vp.border_width
    inner = resize(x, (H - 2 * p, W - 2 * p))
    border = vp.masked_delta(delta).to(inner.dtype)
    out = border.expand(*inner.shape[:-3], H, W, 3).clone()
    out[..., p:H - p, p:W - p, :] = inner
    return out


def apply_input_transform(x: Tensor, vp: VisualPrompt, source_id: str | None = None) -> PromptedImage:
    return PromptedImage(merge(x, vp), source_id)

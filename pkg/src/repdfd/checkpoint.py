"""Binary prompt checkpoint.

Layout (all little-endian)::

    b"RPDF"  version:u16  H:u16  W:u16  p:u16  template:u8  resize_kernel:u8
    D_face:u16  D_tok:u16
    projection  float32[D_face * D_tok]   (absent when D_face == D_tok)
    delta       float32[H * W * 3]        (row-major H, W, C)
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import CorruptCheckpointError
from .face2text import FaceProjection, TemplateConfig
from .transform import RESIZE_KERNELS, VisualPrompt, build_border_mask

MAGIC = b"RPDF"
VERSION = 1
_HEADER = struct.Struct("<4sHHHHBBHH")


@dataclass(eq=False)
class Checkpoint:
    prompt: VisualPrompt
    template: TemplateConfig
    projection: FaceProjection
    resize_kernel: str = "bilinear"


def to_bytes(ckpt: Checkpoint) -> bytes:
    vp, proj = ckpt.prompt, ckpt.projection
    H, W = vp.geometry
    head = _HEADER.pack(MAGIC, VERSION, H, W, vp.border_width, ckpt.template.code,
                        RESIZE_KERNELS[ckpt.resize_kernel], proj.face_dim, proj.token_dim)
    parts = [head]
    if proj.face_dim != proj.token_dim:
        parts.append(proj.matrix.numpy().astype("<f4").tobytes())
    parts.append(vp.masked_delta().numpy().astype("<f4").tobytes())
    return b"".join(parts)


def from_bytes(data: bytes) -> Checkpoint:
    if len(data) < _HEADER.size:
        raise CorruptCheckpointError("truncated header")
    magic, version, H, W, p, tcode, kcode, d_face, d_tok = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CorruptCheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CorruptCheckpointError(f"unsupported version {version}")
    kernels = {v: k for k, v in RESIZE_KERNELS.items()}
    if kcode not in kernels:
        raise CorruptCheckpointError(f"unknown resize kernel id {kcode}")
    try:
        template = TemplateConfig.from_code(tcode)
        mask = build_border_mask(H, W, p)
    except Exception as e:
        raise CorruptCheckpointError(str(e)) from None

    off = _HEADER.size
    n_proj = d_face * d_tok if d_face != d_tok else 0
    n_delta = H * W * 3
    if len(data) != off + 4 * (n_proj + n_delta):
        raise CorruptCheckpointError(f"expected {off + 4 * (n_proj + n_delta)} bytes, got {len(data)}")
    matrix = None
    if n_proj:
        m = np.frombuffer(data, dtype="<f4", count=n_proj, offset=off).reshape(d_face, d_tok)
        matrix = torch.from_numpy(m.astype(np.float64))
        off += 4 * n_proj
    d = np.frombuffer(data, dtype="<f4", count=n_delta, offset=off).reshape(H, W, 3)
    delta = torch.from_numpy(d.astype(np.float64))
    if bool((delta[~mask] != 0).any()):
        raise CorruptCheckpointError("prompt has nonzero entries inside the image interior")
    # seed is not stored; -1 marks a projection restored from disk
    proj = FaceProjection(matrix, -1, d_face, d_tok)
    return Checkpoint(VisualPrompt(delta, p, mask), template, proj, kernels[kcode])


def save(ckpt: Checkpoint, path) -> str:
    """Write the checkpoint and return its sha256."""
    data = to_bytes(ckpt)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()

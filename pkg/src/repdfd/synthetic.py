"""Synthetic two-family face task for the toy backend.

Every video has a smooth random "face" shared by its frames plus per-frame
noise. Fake videos add a planted pattern ``+a*u``, real ones ``-a*u``. The
direction ``u`` is chosen inside the subspace the toy image encoder responds
to, then made orthogonal to the zero-prompt decision gradient so the
unprompted model cannot read it off directly; a prompt has to learn to.

With ``identity_strength > 0`` fake faces are also shifted along a direction
the face encoder responds to (and the image encoder largely ignores), which
gives identity-conditioned templates something to exploit.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data import SampleRecord, write_manifest, write_rgb
from .encoders import FrozenEncoders, encode_image
from .face2text import ClassTextEncoder, FaceProjection, TemplateConfig
from .objective import cosine
from .transform import VisualPrompt, merge


@dataclass(frozen=True)
class ToyTaskSpec:
    border_width: int = 6
    template_config: str = "T0T3"
    train_videos: int = 20
    train_frames: int = 20
    test_videos: int = 20
    test_frames: int = 10
    val_videos: int = 0
    val_frames: int = 10
    amplitude: float = 0.1
    noise: float = 0.3
    face_scale: float = 0.3
    identity_strength: float = 0.0
    balance_iters: int = 8
    seed: int = 7
    dataset: str = "toy"


def _unit(v: torch.Tensor) -> torch.Tensor:
    return v / v.norm()


def _input_grad(fn, shape) -> torch.Tensor:
    x = torch.zeros(shape, dtype=torch.float64, requires_grad=True)
    (g,) = torch.autograd.grad(fn(x), x)
    return g.detach()


def planted_directions(enc: FrozenEncoders, proj: FaceProjection, spec: ToyTaskSpec):
    """(image pattern u, identity pattern v), both with unit per-pixel RMS."""
    H, W = enc.input_size
    shape = (H, W, 3)
    vp = VisualPrompt.zeros(H, W, spec.border_width)
    gen = torch.Generator().manual_seed(spec.seed + 1000)
    text = ClassTextEncoder(enc, TemplateConfig(spec.template_config), proj)

    def margin(x):
        f = encode_image(enc, merge(x, vp))
        w_r, w_f = text(x)
        return (cosine(w_f, f) - cosine(w_r, f)) / enc.temperature

    rng = np.random.default_rng(spec.seed + 1000)
    probes = torch.stack([_smooth_face(rng, H, W, spec.face_scale)
                          + torch.from_numpy(rng.standard_normal(shape)) * spec.noise for _ in range(128)])

    def mean_grad(x):
        x = x.clone().requires_grad_(True)
        (g,) = torch.autograd.grad(margin(x).sum(), x)
        return g.mean(0).flatten()

    c = torch.randn(enc.embed_dim, generator=gen, dtype=torch.float64)
    r = _input_grad(lambda x: encode_image(enc, merge(x, vp)) @ c, shape).flatten()
    # Null the class-conditional mean margin gap at the actual amplitude:
    # repeatedly project out the decision gradient averaged over both classes.
    basis = torch.zeros(r.numel(), 0, dtype=torch.float64)
    u = _unit(r)
    for _ in range(spec.balance_iters):
        step = (_unit(u) * float(H * W * 3) ** 0.5 * spec.amplitude).reshape(shape)
        g = mean_grad(probes + step) + mean_grad(probes - step)
        basis, _ = torch.linalg.qr(torch.cat([basis, g[:, None]], dim=1))
        u = r - basis @ (basis.T @ r)
    j = basis

    # identity direction: face-encoder sensitive, orthogonal to what the image
    # encoder (through the prompt frame) and the baseline decision see
    cf = torch.randn(enc.face_dim, generator=gen, dtype=torch.float64)
    s = _input_grad(lambda x: enc.face_encoder(x) @ cf, shape).flatten()
    img_jac = torch.autograd.functional.jacobian(
        lambda x: encode_image(enc, merge(x.reshape(shape), vp)), torch.zeros(H * W * 3, dtype=torch.float64))
    q, _ = torch.linalg.qr(torch.cat([img_jac.T, j, u[:, None]], dim=1))
    v = s - q @ (q.T @ s)
    n = float(H * W * 3) ** 0.5
    return (_unit(u) * n).reshape(shape), (_unit(v) * n).reshape(shape)


def _smooth_face(rng: np.random.Generator, H: int, W: int, scale: float) -> torch.Tensor:
    low = torch.from_numpy(rng.standard_normal((1, 3, 4, 4)))
    up = torch.nn.functional.interpolate(low, size=(H, W), mode="bilinear", align_corners=False)
    return up[0].permute(1, 2, 0) * scale


def to_uint8(z: torch.Tensor, mean=0.5, std=0.25) -> np.ndarray:
    px = (z.numpy() * std + mean) * 255.0
    return np.clip(np.rint(px), 0, 255).astype(np.uint8)


def generate(enc: FrozenEncoders, proj: FaceProjection, spec: ToyTaskSpec = ToyTaskSpec()):
    """In-memory frames: yields (split, video_id, label, frame_idx, model-space image)."""
    H, W = enc.input_size
    u, v = planted_directions(enc, proj, spec)
    rng = np.random.default_rng(spec.seed)
    plan = [("train", spec.train_videos, spec.train_frames),
            ("val", spec.val_videos, spec.val_frames),
            ("test", spec.test_videos, spec.test_frames)]
    for split, n_videos, n_frames in plan:
        for k in range(n_videos):
            label = k % 2
            sign = 1.0 if label else -1.0
            face = _smooth_face(rng, H, W, spec.face_scale)
            if label:
                face = face + spec.identity_strength * v
            vid = f"{spec.dataset}-{split}-{k:03d}"
            for t in range(n_frames):
                noise = torch.from_numpy(rng.standard_normal((H, W, 3))) * spec.noise
                yield split, vid, label, t, face + sign * spec.amplitude * u + noise


def write_toy_dataset(enc: FrozenEncoders, proj: FaceProjection, out_dir, spec: ToyTaskSpec = ToyTaskSpec(),
                      manifest_name: str = "manifest.jsonl") -> list[SampleRecord]:
    """Write frames as 8-bit PNGs plus a JSON-lines manifest; paths are relative."""
    out = Path(out_dir)
    mean, std = enc.pixel_mean[0], enc.pixel_std[0]
    records = []
    for split, vid, label, t, img in generate(enc, proj, spec):
        rel = f"images/{vid}_{t:03d}.png"
        write_rgb(to_uint8(img, mean, std), out / rel)
        records.append(SampleRecord(rel, label, vid, split, spec.dataset))
    write_manifest(records, out / manifest_name)
    return records

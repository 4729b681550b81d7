"""Two-way cosine softmax, label cross-entropy, and the prompt gradient."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .encoders import FrozenEncoders, encode_image
from .errors import InputError, NumericError
from .face2text import ClassTextEncoder, FaceProjection, TemplateConfig
from .transform import VisualPrompt, merge

Tensor = torch.Tensor

PROB_EPS = 1e-12
REAL, FAKE = 0, 1


@dataclass(frozen=True, eq=False)
class ClassScores:
    p_real: Tensor
    p_fake: Tensor
    logits: Tensor  # (..., 2): cos(w_real, f)/tau, cos(w_fake, f)/tau

    def prob(self, label) -> Tensor:
        probs = torch.stack([self.p_real, self.p_fake], dim=-1)
        label = torch.as_tensor(label)
        return probs.gather(-1, label.reshape(*probs.shape[:-1], 1).long()).squeeze(-1)


def cosine(a: Tensor, b: Tensor) -> Tensor:
    na, nb = a.norm(dim=-1), b.norm(dim=-1)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise NumericError("cosine similarity undefined for a zero-norm feature")
    return (a * b).sum(-1) / (na * nb)


def scores_from_features(f: Tensor, w_real: Tensor, w_fake: Tensor, temperature: float) -> ClassScores:
    logits = torch.stack([cosine(w_real, f), cosine(w_fake, f)], dim=-1) / temperature
    probs = torch.softmax(logits, dim=-1)
    return ClassScores(probs[..., 0], probs[..., 1], logits)


def predict(enc: FrozenEncoders, vp: VisualPrompt, cfg: TemplateConfig, proj: FaceProjection,
            x: Tensor, text: ClassTextEncoder | None = None) -> ClassScores:
    """Class probabilities for one image or a batch, prompt applied."""
    text = text or ClassTextEncoder(enc, cfg, proj)
    f = encode_image(enc, merge(x, vp))
    w_real, w_fake = text(x)
    return scores_from_features(f, w_real, w_fake, enc.temperature)


def loss(scores: ClassScores, label) -> Tensor:
    """-log P(label), with the probability floored at 1e-12.

    Computed from log-softmax so small probabilities keep full precision; the
    floor matches clamping the probability before the log.
    """
    logp = torch.log_softmax(scores.logits, dim=-1)
    label = torch.as_tensor(label)
    picked = logp.gather(-1, label.reshape(*logp.shape[:-1], 1).long()).squeeze(-1)
    return -torch.clamp(picked, min=math.log(PROB_EPS))


def batch_loss(enc, vp, cfg, proj, images: Tensor, labels: Tensor, text=None, delta: Tensor | None = None) -> Tensor:
    """Mean loss over a batch as a differentiable function of ``delta``.

    Text features are computed from the raw images and carry no gradient.
    """
    text = text or ClassTextEncoder(enc, cfg, proj)
    with torch.no_grad():
        w_real, w_fake = text(images)
    f = encode_image(enc, merge(images, vp, delta))
    scores = scores_from_features(f, w_real, w_fake, enc.temperature)
    return loss(scores, labels).mean()


def grad_delta(enc, vp, cfg, proj, batch, text=None) -> tuple[Tensor, Tensor]:
    """(mean loss, d loss / d delta) over ``batch``.

    ``batch`` is either an (images, labels) tensor pair or a list of
    (image, label) tuples. The gradient is zero off the border by construction.
    """
    images, labels = _as_tensors(batch)
    delta = vp.delta.detach().clone().requires_grad_(True)
    value = batch_loss(enc, vp, cfg, proj, images, labels, text=text, delta=delta)
    (g,) = torch.autograd.grad(value, delta)
    g = vp.masked_delta(g)
    return value.detach(), g


def _as_tensors(batch) -> tuple[Tensor, Tensor]:
    if isinstance(batch, tuple) and len(batch) == 2 and isinstance(batch[0], torch.Tensor) and batch[0].dim() == 4:
        images, labels = batch
    else:
        batch = list(batch)
        if not batch:
            raise InputError("empty batch")
        images = torch.stack([torch.as_tensor(x, dtype=torch.float64) for x, _ in batch])
        labels = torch.tensor([int(y) for _, y in batch])
    if len(images) == 0:
        raise InputError("empty batch")
    return images, torch.as_tensor(labels).long()

"""Class text prompts with an optional face-identity slot.

The four templates are fixed strings. ``[ID]`` is a reserved placeholder that
is never looked up in the vocabulary; its embedding is replaced by the
projected face embedding of the current image before the text encoder runs.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace

import torch

from .encoders import FrozenEncoders, encode_face, encode_text
from .errors import ConfigurationError, ContractError, InputError

Tensor = torch.Tensor

ID_TOKEN = "[ID]"

TEMPLATES = {
    "T0": "A real photo of person",
    "T1": "A fake photo of person",
    "T2": "A real photo of [ID] person",
    "T3": "A fake photo of [ID] person",
}

# id -> (real template, fake template); RAND has no template words.
CONFIGS = {
    "T0T1": ("T0", "T1"),
    "T2T1": ("T2", "T1"),
    "T2T3": ("T2", "T3"),
    "T0T3": ("T0", "T3"),
    "RAND": (None, None),
}
CONFIG_CODES = {"T0T1": 0, "T2T1": 1, "T2T3": 2, "T0T3": 3, "RAND": 4}

_RAND_SEED = 20240901


@dataclass(frozen=True)
class TemplateConfig:
    id: str

    def __post_init__(self):
        if self.id not in CONFIGS:
            raise ConfigurationError(f"unknown template config {self.id!r}; choose from {sorted(CONFIGS)}")

    @property
    def real_template(self) -> str | None:
        return CONFIGS[self.id][0]

    @property
    def fake_template(self) -> str | None:
        return CONFIGS[self.id][1]

    @property
    def code(self) -> int:
        return CONFIG_CODES[self.id]

    @classmethod
    def from_code(cls, code: int) -> "TemplateConfig":
        for k, v in CONFIG_CODES.items():
            if v == code:
                return cls(k)
        raise ConfigurationError(f"unknown template config code {code}")


@dataclass(frozen=True, eq=False)
class TokenEmbeddingSequence:
    embeddings: Tensor
    id_slot: int | None = None

    def __post_init__(self):
        if self.id_slot is not None and not 0 <= self.id_slot < len(self):
            raise ContractError(f"id_slot {self.id_slot} out of range for length {len(self)}")

    def __len__(self):
        # embeddings may carry leading batch dims; length is the token axis
        return self.embeddings.shape[-2]


@dataclass(frozen=True, eq=False)
class FaceProjection:
    """``matrix`` is (D_face, D_tok), or None for the identity map."""
    matrix: Tensor | None
    seed: int
    face_dim: int
    token_dim: int

    @property
    def is_identity(self) -> bool:
        return self.matrix is None

    @property
    def digest(self) -> str:
        h = hashlib.sha256(repr((self.face_dim, self.token_dim)).encode())
        if self.matrix is not None:
            h.update(self.matrix.contiguous().numpy().tobytes())
        return h.hexdigest()


def template_sequence(enc: FrozenEncoders, template_key: str) -> TokenEmbeddingSequence:
    words = TEMPLATES[template_key].split()
    slot = words.index(ID_TOKEN) if ID_TOKEN in words else None
    plain = [w for w in words if w != ID_TOKEN]
    emb = enc.token_embedding(plain).to(torch.float64)
    if slot is not None:
        placeholder = torch.zeros(1, emb.shape[1], dtype=emb.dtype)
        emb = torch.cat([emb[:slot], placeholder, emb[slot:]])
    return TokenEmbeddingSequence(emb, slot)


def _rand_sequences(enc: FrozenEncoders) -> tuple[TokenEmbeddingSequence, TokenEmbeddingSequence]:
    n = len(TEMPLATES["T0"].split())
    ref = enc.token_embedding(TEMPLATES["T0"].split()).to(torch.float64)
    scale = float(ref.std())
    gen = torch.Generator().manual_seed(_RAND_SEED)
    a = torch.randn(n, enc.token_embed_dim, generator=gen, dtype=torch.float64) * scale
    b = torch.randn(n, enc.token_embed_dim, generator=gen, dtype=torch.float64) * scale
    return TokenEmbeddingSequence(a), TokenEmbeddingSequence(b)


def build_template_sequences(cfg: TemplateConfig, enc: FrozenEncoders):
    """(real, fake) token-embedding sequences for a template config."""
    if cfg.id == "RAND":
        return _rand_sequences(enc)
    return template_sequence(enc, cfg.real_template), template_sequence(enc, cfg.fake_template)


def init_projection(face_dim: int, token_dim: int, seed: int = 0) -> FaceProjection:
    """Frozen random projection from face space into token space.

    Identity when the dimensions already agree. Otherwise a Gaussian matrix,
    mean 0 and std 1/token_dim, drawn in float32 so a checkpoint stores it
    without loss.
    """
    if face_dim <= 0 or token_dim <= 0:
        raise ConfigurationError("projection dims must be positive")
    if face_dim == token_dim:
        return FaceProjection(None, seed, face_dim, token_dim)
    gen = torch.Generator().manual_seed(int(seed))
    m = torch.randn(face_dim, token_dim, generator=gen, dtype=torch.float32) / token_dim
    return FaceProjection(m.to(torch.float64), seed, face_dim, token_dim)


def project_face(proj: FaceProjection, e: Tensor) -> Tensor:
    if e.shape[-1] != proj.face_dim:
        raise InputError(f"face embedding dim {e.shape[-1]} != projection input dim {proj.face_dim}")
    if proj.matrix is None:
        return e
    return e @ proj.matrix


def substitute_id(seq: TokenEmbeddingSequence, s_star: Tensor) -> TokenEmbeddingSequence:
    """Replace the placeholder embedding with ``s_star``.

    ``s_star`` may be batched (B, D_tok); the result then holds (B, L, D_tok).
    """
    if seq.id_slot is None:
        raise ContractError("sequence has no [ID] slot to substitute")
    if s_star.shape[-1] != seq.embeddings.shape[-1]:
        raise InputError("identity embedding dim does not match token dim")
    emb = seq.embeddings.expand(*s_star.shape[:-1], *seq.embeddings.shape).clone()
    emb[..., seq.id_slot, :] = s_star
    return replace(seq, embeddings=emb)


class ClassTextEncoder:
    """Produces (w_real, w_fake) for images under one template config.

    Templates without an [ID] slot are encoded once and cached; slotted
    templates are re-encoded per image from the raw (unprompted) face crop.
    """

    def __init__(self, enc: FrozenEncoders, cfg: TemplateConfig, proj: FaceProjection):
        if proj.face_dim != enc.face_dim or proj.token_dim != enc.token_embed_dim:
            raise ConfigurationError("projection dims do not match the backend")
        self.enc, self.cfg, self.proj = enc, cfg, proj
        self.sequences = build_template_sequences(cfg, enc)
        self._static = [None if s.id_slot is not None else encode_text(enc, s) for s in self.sequences]

    @property
    def is_dynamic(self) -> bool:
        return any(w is None for w in self._static)

    def identity_embedding(self, x: Tensor) -> Tensor:
        return project_face(self.proj, encode_face(self.enc, x))

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        batch = x.shape[:-3]
        s_star = self.identity_embedding(x) if self.is_dynamic else None
        out = []
        for seq, cached in zip(self.sequences, self._static):
            if cached is not None:
                out.append(cached.expand(*batch, cached.shape[-1]))
            else:
                out.append(encode_text(self.enc, substitute_id(seq, s_star)))
        return out[0], out[1]


def class_text_features(enc: FrozenEncoders, cfg: TemplateConfig, proj: FaceProjection, x: Tensor):
    return ClassTextEncoder(enc, cfg, proj)(x)

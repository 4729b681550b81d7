"""Frozen encoder contract and the seeded toy backend.

A backend is a ``FrozenEncoders`` bundle: an image encoder, a text encoder that
consumes token embeddings (not token ids), a face-identity encoder, the token
embedding lookup, and CLIP's temperature. Nothing in here is ever trained.

Real backends register a factory under a name with :func:`register_backend`;
the factory receives the flat config dict and returns a ``FrozenEncoders``.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import torch

from .errors import ConfigurationError, InputError

Tensor = torch.Tensor

# Words needed by the four class templates plus a couple of spares.
TOY_VOCAB = ("a", "real", "fake", "photo", "of", "person", "face", "an")


@dataclass(frozen=True, eq=False)
class FrozenEncoders:
    image_encoder: Callable[[Tensor], Tensor]
    text_encoder: Callable[[Tensor], Tensor]
    face_encoder: Callable[[Tensor], Tensor]
    token_embedding: Callable[[Sequence[str]], Tensor]
    embed_dim: int
    face_dim: int
    token_embed_dim: int
    temperature: float
    input_size: tuple[int, int]
    max_tokens: int
    parameters: tuple[Tensor, ...] = ()
    pixel_mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    pixel_std: tuple[float, float, float] = (0.25, 0.25, 0.25)
    name: str = "custom"

    @property
    def weights_digest(self) -> str:
        """sha256 over every parameter tensor, recomputed on each access."""
        h = hashlib.sha256()
        for t in self.parameters:
            t = t.detach().contiguous().cpu()
            h.update(str(t.dtype).encode())
            h.update(str(tuple(t.shape)).encode())
            h.update(t.numpy().tobytes())
        h.update(repr((self.embed_dim, self.face_dim, self.token_embed_dim, self.temperature)).encode())
        return h.hexdigest()


@dataclass(frozen=True)
class ToyBackendSpec:
    seed: int = 0
    embed_dim: int = 32
    face_dim: int = 16
    token_dim: int = 24
    hidden_layers: int = 1
    hidden_width: int = 64
    input_size: tuple[int, int] = (32, 32)
    temperature: float = 0.01
    max_tokens: int = 16
    shared_offset: float = 3.0
    squash_pixels: bool = True


def _check_image(enc: FrozenEncoders, x: Tensor) -> Tensor:
    if not isinstance(x, torch.Tensor):
        x = torch.as_tensor(x, dtype=torch.float64)
    H, W = enc.input_size
    if x.dim() < 3 or tuple(x.shape[-3:]) != (H, W, 3):
        raise InputError(f"expected image(s) of shape (..., {H}, {W}, 3), got {tuple(x.shape)}")
    return x


def encode_image(enc: FrozenEncoders, x: Tensor) -> Tensor:
    """Image feature ``f`` for one image (H, W, 3) or a batch (B, H, W, 3)."""
    return enc.image_encoder(_check_image(enc, x))


def encode_face(enc: FrozenEncoders, x: Tensor) -> Tensor:
    return enc.face_encoder(_check_image(enc, x))


def encode_text(enc: FrozenEncoders, tokens) -> Tensor:
    """Text feature from a token-embedding sequence (L, D_tok) or batch (B, L, D_tok).

    Accepts a ``TokenEmbeddingSequence`` or a raw tensor.
    """
    emb = getattr(tokens, "embeddings", tokens)
    if not isinstance(emb, torch.Tensor):
        emb = torch.as_tensor(emb, dtype=torch.float64)
    if emb.dim() < 2 or emb.shape[-1] != enc.token_embed_dim:
        raise InputError(f"token embeddings must end in dim {enc.token_embed_dim}, got {tuple(emb.shape)}")
    L = emb.shape[-2]
    if L == 0:
        raise InputError("empty token sequence")
    if L > enc.max_tokens:
        raise InputError(f"sequence length {L} exceeds backend limit {enc.max_tokens}")
    return enc.text_encoder(emb)


# --------------------------------------------------------------------------- toy backend


def _randn(gen: torch.Generator, *shape, std: float = 1.0) -> Tensor:
    return torch.randn(*shape, generator=gen, dtype=torch.float64) * std


def _mlp(gen: torch.Generator, d_in: int, d_out: int, width: int, layers: int, out_std: float = 1.0):
    params = []
    d = d_in
    for _ in range(layers):
        params.append(_randn(gen, width, d, std=1.0 / math.sqrt(d)))
        params.append(_randn(gen, width, std=0.5))
        d = width
    params.append(_randn(gen, d_out, d, std=out_std / math.sqrt(d)))
    params.append(_randn(gen, d_out, std=0.05))
    return params


def _apply_mlp(params, h: Tensor) -> Tensor:
    *hidden, w_out, b_out = params
    for w, b in zip(hidden[::2], hidden[1::2]):
        h = torch.tanh(h @ w.T + b)
    return h @ w_out.T + b_out


def build_toy_backend(spec: ToyBackendSpec = ToyBackendSpec()) -> FrozenEncoders:
    dims = dict(embed_dim=spec.embed_dim, face_dim=spec.face_dim, token_dim=spec.token_dim,
                hidden_layers=spec.hidden_layers, hidden_width=spec.hidden_width,
                max_tokens=spec.max_tokens)
    for name, v in dims.items():
        if int(v) <= 0:
            raise ConfigurationError(f"{name} must be positive, got {v}")
    H, W = spec.input_size
    if H < 8 or W < 8:
        raise ConfigurationError(f"input_size must be at least 8x8, got {spec.input_size}")
    if not spec.temperature > 0:
        raise ConfigurationError("temperature must be positive")

    gen = torch.Generator().manual_seed(int(spec.seed))
    d_pix = H * W * 3
    img = _mlp(gen, d_pix, spec.embed_dim, spec.hidden_width, spec.hidden_layers)
    face = _mlp(gen, d_pix, spec.face_dim, spec.hidden_width, spec.hidden_layers)
    txt = _mlp(gen, spec.token_dim, spec.embed_dim, spec.hidden_width, spec.hidden_layers)
    pos = _randn(gen, spec.max_tokens, spec.token_dim, std=0.5)
    vocab_table = _randn(gen, len(TOY_VOCAB), spec.token_dim)
    vocab = {w: i for i, w in enumerate(TOY_VOCAB)}
    # both towers share an offset so image-text cosines cluster, as in CLIP
    common = _randn(gen, spec.embed_dim)
    common = common / common.norm() * spec.shared_offset

    def image_encoder(x: Tensor) -> Tensor:
        # bounded pixel response keeps a large prompt from dominating the input
        x = x.to(torch.float64)
        if spec.squash_pixels:
            x = torch.tanh(x)
        return _apply_mlp(img, x.reshape(*x.shape[:-3], d_pix)) + common

    def face_encoder(x: Tensor) -> Tensor:
        return _apply_mlp(face, x.to(torch.float64).reshape(*x.shape[:-3], d_pix))

    def text_encoder(z: Tensor) -> Tensor:
        # position enters before the nonlinearity, so token order matters
        z = z.to(torch.float64) + pos[: z.shape[-2]]
        *hidden, w_out, b_out = txt
        h = z
        for w, b in zip(hidden[::2], hidden[1::2]):
            h = torch.tanh(h @ w.T + b)
        return h.mean(dim=-2) @ w_out.T + b_out + common

    def token_embedding(words: Sequence[str]) -> Tensor:
        try:
            idx = [vocab[w.lower()] for w in words]
        except KeyError as e:
            raise InputError(f"word {e.args[0]!r} not in toy vocabulary") from None
        return vocab_table[idx].clone()

    return FrozenEncoders(
        image_encoder=image_encoder,
        text_encoder=text_encoder,
        face_encoder=face_encoder,
        token_embedding=token_embedding,
        embed_dim=spec.embed_dim,
        face_dim=spec.face_dim,
        token_embed_dim=spec.token_dim,
        temperature=float(spec.temperature),
        input_size=(H, W),
        max_tokens=spec.max_tokens,
        parameters=tuple(img + face + txt + [pos, vocab_table, common]),
        name="toy",
    )


# --------------------------------------------------------------------------- registry

_BACKENDS: dict[str, Callable[[dict], FrozenEncoders]] = {}


def register_backend(name: str, factory: Callable[[dict], FrozenEncoders]) -> None:
    _BACKENDS[name] = factory


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


def get_backend(name: str, options: dict | None = None) -> FrozenEncoders:
    try:
        factory = _BACKENDS[name]
    except KeyError:
        raise ConfigurationError(f"unknown backend {name!r}; known: {available_backends()}") from None
    return factory(dict(options or {}))


def _toy_factory(opts: dict) -> FrozenEncoders:
    size = int(opts.get("input_size", 32))
    return build_toy_backend(ToyBackendSpec(
        seed=int(opts.get("toy_seed", 0)),
        embed_dim=int(opts.get("embed_dim", 32)),
        face_dim=int(opts.get("face_dim", 16)),
        token_dim=int(opts.get("token_dim", 24)),
        hidden_layers=int(opts.get("hidden_layers", 1)),
        hidden_width=int(opts.get("hidden_width", 64)),
        input_size=(size, size),
        temperature=float(opts.get("temperature", 0.01)),
    ))


register_backend("toy", _toy_factory)

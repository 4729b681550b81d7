"""Prompt optimization loop.

Only the border entries of ``delta`` are ever touched. Two update rules:
``"plain"`` is literal gradient descent, ``"adamw"`` is AdamW with decoupled
weight decay restricted to the border.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import checkpoint as ckpt_io
from .data import SampleRecord
from .errors import ConfigurationError, InputError, NumericError
from .face2text import ClassTextEncoder, TemplateConfig
from .metrics import auc
from .objective import grad_delta, predict
from .pipeline import Runtime
from .transform import VisualPrompt

log = logging.getLogger(__name__)

OPTIMIZERS = ("adamw", "plain")


@dataclass(frozen=True)
class TrainConfig:
    border_width: int = 34
    learning_rate: float = 1.0
    weight_decay: float = 0.0
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    optimizer: str = "adamw"
    template_config: str = "T0T3"
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ConfigurationError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.learning_rate < 0 or not math.isfinite(self.learning_rate):
            raise ConfigurationError("learning rate must be finite and non-negative")
        if self.batch_size <= 0:
            raise ConfigurationError("batch size must be positive")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be non-negative")
        TemplateConfig(self.template_config)


@dataclass(eq=False)
class TrainState:
    vp: VisualPrompt
    step: int = 0
    exp_avg: torch.Tensor | None = None
    exp_avg_sq: torch.Tensor | None = None
    last_loss: float = float("nan")
    last_grad_max: float = 0.0

    def __post_init__(self):
        if self.exp_avg is None:
            self.exp_avg = torch.zeros_like(self.vp.delta)
        if self.exp_avg_sq is None:
            self.exp_avg_sq = torch.zeros_like(self.vp.delta)


def init_prompt(H: int, W: int, p: int) -> VisualPrompt:
    return VisualPrompt.zeros(H, W, p)


def train_step(state: TrainState, batch, cfg: TrainConfig, runtime: Runtime,
               text: ClassTextEncoder | None = None) -> TrainState:
    """One update of ``delta``; returns a new state and leaves ``state`` untouched."""
    enc, proj = runtime.encoders, runtime.projection
    tcfg = TemplateConfig(cfg.template_config)
    vp = state.vp
    value, g = grad_delta(enc, vp, tcfg, proj, batch, text=text)
    gmax = float(g.abs().max())
    if not (math.isfinite(gmax) and bool(torch.isfinite(value))):
        raise NumericError(f"non-finite gradient at step {state.step} (max|grad| = {gmax})")

    lr = cfg.learning_rate
    mask = vp.mask[..., None]
    delta = vp.delta.clone()
    m, v = state.exp_avg, state.exp_avg_sq
    if cfg.optimizer == "plain":
        delta = delta - lr * g
    else:
        b1, b2 = cfg.betas
        t = state.step + 1
        delta = delta * (1 - lr * cfg.weight_decay)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        delta = delta - lr * m_hat / (v_hat.sqrt() + cfg.eps)
    delta = torch.where(mask, delta, torch.zeros((), dtype=delta.dtype))
    return TrainState(replace(vp, delta=delta), state.step + 1, m, v, float(value), gmax)


@dataclass
class TrainResult:
    prompt: VisualPrompt
    epochs: list[dict] = field(default_factory=list)
    checkpoints: dict[str, str] = field(default_factory=dict)
    best_epoch: int | None = None


def score_records(runtime: Runtime, vp: VisualPrompt, tcfg: TemplateConfig, records: Sequence[SampleRecord],
                  batch_size: int = 256, text: ClassTextEncoder | None = None) -> np.ndarray:
    """p_fake for each record, in order."""
    text = text or ClassTextEncoder(runtime.encoders, tcfg, runtime.projection)
    out = []
    with torch.no_grad():
        for i in range(0, len(records), batch_size):
            images, _ = runtime.images.batch(records[i:i + batch_size])
            out.append(predict(runtime.encoders, vp, tcfg, runtime.projection, images, text=text).p_fake.numpy())
    return np.concatenate(out) if out else np.zeros(0)


def _checkpoint(runtime: Runtime, vp: VisualPrompt, tcfg: TemplateConfig) -> ckpt_io.Checkpoint:
    return ckpt_io.Checkpoint(vp, tcfg, runtime.projection)


def train(records: Sequence[SampleRecord], cfg: TrainConfig, runtime: Runtime, out_dir=None) -> TrainResult:
    """Optimize a border prompt on the ``train`` split, validating on ``val``.

    With ``out_dir`` set, writes ``epoch_NNN.rpdf`` after every epoch,
    ``best.rpdf`` whenever validation AUC improves, ``prompt.rpdf`` for the
    final prompt, and a JSON-lines step log ``train_log.jsonl``.
    """
    if not records:
        raise ConfigurationError("empty manifest")
    for r in records:
        if r.label not in (0, 1):
            raise InputError(f"bad label {r.label!r} for {r.image_path}")
    train_recs = [r for r in records if r.split == "train"]
    val_recs = [r for r in records if r.split == "val"]
    if not train_recs:
        raise ConfigurationError("manifest has no records in the train split")

    enc = runtime.encoders
    H, W = enc.input_size
    tcfg = TemplateConfig(cfg.template_config)
    text = ClassTextEncoder(enc, tcfg, runtime.projection)
    state = TrainState(init_prompt(H, W, cfg.border_width))
    rng = np.random.default_rng(cfg.seed)
    result = TrainResult(state.vp)

    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train_log.jsonl", "a")
    best = -math.inf
    t0 = time.perf_counter()
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(train_recs))
            losses = []
            for i in range(0, len(order), cfg.batch_size):
                batch = runtime.images.batch([train_recs[j] for j in order[i:i + cfg.batch_size]])
                state = train_step(state, batch, cfg, runtime, text=text)
                losses.append(state.last_loss)
                if log_fh is not None:
                    log_fh.write(json.dumps({
                        "step": state.step, "epoch": epoch, "loss": state.last_loss,
                        "lr": cfg.learning_rate, "grad_max": state.last_grad_max,
                        "wallclock": round(time.perf_counter() - t0, 6),
                    }) + "\n")
            summary = {"epoch": epoch, "loss": float(np.mean(losses)), "steps": state.step}
            if val_recs and len({r.label for r in val_recs}) == 2:
                s = score_records(runtime, state.vp, tcfg, val_recs, text=text)
                summary["val_auc"] = auc(s, [r.label for r in val_recs])
            result.epochs.append(summary)
            log.info("epoch %d loss %.4f val_auc %s", epoch, summary["loss"], summary.get("val_auc"))
            if out is not None:
                ck = _checkpoint(runtime, state.vp, tcfg)
                name = f"epoch_{epoch:03d}.rpdf"
                result.checkpoints[name] = ckpt_io.save(ck, out / name)
                if summary.get("val_auc", -math.inf) > best:
                    best = summary["val_auc"]
                    result.best_epoch = epoch
                    result.checkpoints["best.rpdf"] = ckpt_io.save(ck, out / "best.rpdf")
    finally:
        if log_fh is not None:
            log_fh.close()

    result.prompt = state.vp
    if out is not None:
        result.checkpoints["prompt.rpdf"] = ckpt_io.save(_checkpoint(runtime, state.vp, tcfg), out / "prompt.rpdf")
    return result

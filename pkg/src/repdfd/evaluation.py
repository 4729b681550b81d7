"""Evaluation protocol, sweeps, text-similarity analysis and feature dumps."""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import checkpoint as ckpt_io
from .data import SampleRecord
from .encoders import encode_image, encode_text
from .errors import ConfigurationError, InputError
from .face2text import TEMPLATES, TemplateConfig, project_face, substitute_id, template_sequence
from .metrics import auc, video_level
from .objective import cosine
from .pipeline import Runtime
from .trainer import TrainConfig, score_records, train
from .transform import VisualPrompt, merge, prompt_param_count

DEFAULT_BORDER = 34
FEATURE_MAGIC = "repdfd-features"


@dataclass
class EvalReport:
    dataset: str
    frame_auc: float
    video_auc: float
    n_frames: int
    n_videos: int
    prompt_checkpoint: str | None
    template_config: str

    def to_json(self) -> dict:
        return asdict(self)


def _as_checkpoint(checkpoint) -> tuple[ckpt_io.Checkpoint, str | None]:
    if isinstance(checkpoint, ckpt_io.Checkpoint):
        return checkpoint, None
    return ckpt_io.load(checkpoint), str(checkpoint)


def check_compatible(ck: ckpt_io.Checkpoint, runtime: Runtime) -> None:
    enc = runtime.encoders
    if tuple(ck.prompt.geometry) != tuple(enc.input_size):
        raise ConfigurationError(f"checkpoint geometry {ck.prompt.geometry} does not match backend input {enc.input_size}")
    if (ck.projection.face_dim, ck.projection.token_dim) != (enc.face_dim, enc.token_embed_dim):
        raise ConfigurationError("checkpoint projection dims do not match the backend")


def report_for(dataset: str, records: Sequence[SampleRecord], scores, ckpt_path, template: str) -> EvalReport:
    labels = [r.label for r in records]
    vids, vscores, vlabels = video_level(scores, labels, [r.video_id for r in records])
    return EvalReport(dataset, auc(scores, labels), auc(vscores, vlabels), len(records), len(vids),
                      ckpt_path, template)


def evaluate(records: Sequence[SampleRecord], checkpoint, runtime: Runtime, split: str | None = None) -> list[EvalReport]:
    """Score every record with the stored prompt; one report per dataset.

    ``checkpoint`` is a path or a loaded ``Checkpoint``; its projection
    replaces the runtime's so scoring matches training.
    """
    ck, path = _as_checkpoint(checkpoint)
    check_compatible(ck, runtime)
    rt = runtime.with_projection(ck.projection)
    recs = [r for r in records if split is None or r.split == split]
    if not recs:
        raise InputError("no records to evaluate")
    scores = score_records(rt, ck.prompt, ck.template, recs)
    by_ds = defaultdict(list)
    for i, r in enumerate(recs):
        by_ds[r.dataset].append(i)
    return [report_for(ds, [recs[i] for i in idx], scores[idx], path, ck.template.id)
            for ds, idx in sorted(by_ds.items())]


def _train_and_test(records, cfg: TrainConfig, runtime: Runtime, out_dir=None) -> dict:
    res = train(records, cfg, runtime, out_dir=out_dir)
    ck = ckpt_io.Checkpoint(res.prompt, TemplateConfig(cfg.template_config), runtime.projection)
    test = [r for r in records if r.split == "test"]
    reports = evaluate(test, ck, runtime) if test else []
    return {rep.dataset: {"frame_auc": rep.frame_auc, "video_auc": rep.video_auc} for rep in reports}


def sweep_border_width(records, p_values: Sequence[int], cfg: TrainConfig, runtime: Runtime, out_dir=None) -> list[dict]:
    """Train and test once per border width. Images are decoded once and shared."""
    H, W = runtime.encoders.input_size
    counts = [prompt_param_count(H, W, p) for p in p_values]  # validates every p up front
    rows = []
    for p, n in zip(p_values, counts):
        sub = Path(out_dir) / f"p{p}" if out_dir is not None else None
        aucs = _train_and_test(records, replace(cfg, border_width=p), runtime, sub)
        rows.append({"p": p, "n_params": n, "params_m": round(n / 1e6, 3),
                     "default": p == DEFAULT_BORDER, "auc": aucs})
    return rows


def sweep_templates(records, cfg_ids: Sequence[str], cfg: TrainConfig, runtime: Runtime, out_dir=None) -> list[dict]:
    for cid in cfg_ids:
        TemplateConfig(cid)
    rows = []
    for cid in cfg_ids:
        sub = Path(out_dir) / cid if out_dir is not None else None
        rows.append({"config": cid, "auc": _train_and_test(records, replace(cfg, template_config=cid), runtime, sub)})
    return rows


def similarity_analysis(records: Sequence[SampleRecord], vp: VisualPrompt, runtime: Runtime,
                        batch_size: int = 256) -> dict[str, dict[str, float]]:
    """Mean cos(w_T, f) for each template T0..T3, per dataset.

    ``f`` is the feature of the prompted image; slotted templates use the
    image's own identity embedding.
    """
    enc, proj = runtime.encoders, runtime.projection
    seqs = {k: template_sequence(enc, k) for k in TEMPLATES}
    sums = defaultdict(lambda: defaultdict(float))
    counts = defaultdict(int)
    with torch.no_grad():
        for i in range(0, len(records), batch_size):
            chunk = records[i:i + batch_size]
            x, _ = runtime.images.batch(chunk)
            f = encode_image(enc, merge(x, vp))
            s_star = project_face(proj, enc.face_encoder(x))
            for key, seq in seqs.items():
                w = encode_text(enc, substitute_id(seq, s_star) if seq.id_slot is not None else seq)
                c = cosine(w.expand_as(f), f)
                for r, v in zip(chunk, c.tolist()):
                    sums[r.dataset][key] += v
            for r in chunk:
                counts[r.dataset] += 1
    return {ds: {k: sums[ds][k] / counts[ds] for k in TEMPLATES} for ds in sorted(counts)}


# --------------------------------------------------------------------------- feature dump


def dump_features(records: Sequence[SampleRecord], runtime: Runtime, path, checkpoint=None,
                  border_width: int = DEFAULT_BORDER, batch_size: int = 256) -> dict:
    """Write raw and prompted image features for every record.

    File layout: one JSON header line, then float32 little-endian rows, all
    ``raw`` rows first and then all ``prompted`` rows, each ``dims`` wide.
    Without a checkpoint the prompt is zero with ``border_width``.
    """
    enc = runtime.encoders
    if checkpoint is not None:
        ck, ck_path = _as_checkpoint(checkpoint)
        check_compatible(ck, runtime)
        vp = ck.prompt
    else:
        ck_path = None
        vp = VisualPrompt.zeros(*enc.input_size, border_width)
    raw, prompted = [], []
    with torch.no_grad():
        for i in range(0, len(records), batch_size):
            x, _ = runtime.images.batch(records[i:i + batch_size])
            raw.append(encode_image(enc, x))
            prompted.append(encode_image(enc, merge(x, vp)))
    feats = np.stack([torch.cat(raw).numpy(), torch.cat(prompted).numpy()]).astype("<f4")
    header = {
        "format": FEATURE_MAGIC, "version": 1, "dims": enc.embed_dim, "count": len(records),
        "variants": ["raw", "prompted"], "checkpoint": ck_path,
        "labels": [r.label for r in records], "datasets": [r.dataset for r in records],
        "video_ids": [r.video_id for r in records], "image_paths": [r.image_path for r in records],
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(feats.tobytes())
    return header


def load_features(path) -> tuple[dict, np.ndarray]:
    """Returns (header, array of shape (n_variants, count, dims))."""
    data = Path(path).read_bytes()
    nl = data.index(b"\n")
    header = json.loads(data[:nl])
    if header.get("format") != FEATURE_MAGIC:
        raise InputError(f"{path} is not a feature dump")
    shape = (len(header["variants"]), header["count"], header["dims"])
    arr = np.frombuffer(data[nl + 1:], dtype="<f4")
    if arr.size != int(np.prod(shape)):
        raise InputError(f"feature dump {path} is truncated")
    return header, arr.reshape(shape)


# --------------------------------------------------------------------------- tables


def format_table(rows: Sequence[dict], columns: Sequence[str]) -> str:
    cells = [[str(c) for c in columns]]
    for row in rows:
        cells.append([_fmt(row.get(c, "")) for c in columns])
    widths = [max(len(r[i]) for r in cells) for i in range(len(columns))]
    lines = ["  ".join(v.rjust(w) for v, w in zip(r, widths)) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def flatten_sweep(rows: Sequence[dict], key: str) -> tuple[list[dict], list[str]]:
    """Spread the nested per-dataset AUCs into flat columns for printing."""
    datasets = sorted({ds for r in rows for ds in r["auc"]})
    flat = []
    for r in rows:
        f = {k: v for k, v in r.items() if k != "auc"}
        for ds in datasets:
            a = r["auc"].get(ds, {})
            f[f"{ds}_frame"] = a.get("frame_auc", "")
            f[f"{ds}_video"] = a.get("video_auc", "")
        flat.append(f)
    cols = [key] + [k for k in flat[0] if k != key] if flat else [key]
    return flat, cols

"""Command-line entry point: ``repdfd <command> [options]``.

Exit codes: 0 success, 2 usage or configuration error, 1 runtime failure.
Failures print one JSON object ``{"error": <category>, "message": ...}`` to
stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from . import checkpoint as ckpt_io
from .data import CropSpec, crop_face, load_manifest, read_rgb, write_manifest, write_rgb
from .encoders import available_backends, get_backend
from .errors import ConfigurationError, RepDFDError
from .evaluation import (dump_features, evaluate, flatten_sweep, format_table, similarity_analysis,
                         sweep_border_width, sweep_templates)
from .face2text import CONFIGS
from .pipeline import Runtime
from .synthetic import ToyTaskSpec, write_toy_dataset
from .trainer import TrainConfig, train
from .transform import VisualPrompt

log = logging.getLogger("repdfd")

COMMANDS = ("prepare", "train", "eval", "sweep-p", "sweep-templates", "analyze-sim", "dump-features")

DEFAULTS: dict[str, str] = {
    "seed": "0",
    "backend": "toy",
    "p": "34",
    "lr": "1.0",
    "weight_decay": "0.0",
    "batch_size": "32",
    "epochs": "10",
    "optimizer": "adamw",
    "templates": "T0T3",
    "projection_seed": "0",
    "enlarge_factor": "1.3",
    "manifest": "",
    "out": "runs/latest",
    "checkpoint": "",
    "split": "",
    "p_values": "12,23,34,45,56,67,78",
    "template_ids": "T0T1,T2T1,T2T3,T0T3,RAND",
    # backend options (toy)
    "toy_seed": "0",
    "input_size": "32",
    "embed_dim": "32",
    "face_dim": "16",
    "token_dim": "24",
    "hidden_layers": "1",
    "hidden_width": "64",
    "temperature": "0.01",
    # synthetic task for `prepare`
    "task_seed": "7",
    "task_amplitude": "0.1",
    "task_identity": "0.0",
    "task_noise": "0.3",
    "task_face_scale": "0.3",
    "train_videos": "20",
    "train_frames": "20",
    "val_videos": "0",
    "val_frames": "10",
    "test_videos": "20",
    "test_frames": "10",
    "dataset": "toy",
}

# flag name -> config key
FLAG_KEYS = {"seed": "seed", "backend": "backend", "p": "p", "templates": "templates", "epochs": "epochs",
             "lr": "lr", "batch_size": "batch_size", "out": "out", "checkpoint": "checkpoint",
             "manifest": "manifest"}


def read_config(path) -> dict[str, str]:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{lineno}: expected key = value")
            k, v = (s.strip() for s in line.split("=", 1))
            if k not in DEFAULTS:
                raise ConfigurationError(f"{path}:{lineno}: unknown config key {k!r}")
            out[k] = v
    return out


class Config(dict):
    """Resolved settings plus the set of keys the user set explicitly."""

    def __init__(self, values: dict, explicit: set[str]):
        super().__init__(values)
        self.explicit = explicit

    def int(self, k):
        try:
            return int(self[k])
        except ValueError:
            raise ConfigurationError(f"{k} must be an integer, got {self[k]!r}") from None

    def float(self, k):
        try:
            return float(self[k])
        except ValueError:
            raise ConfigurationError(f"{k} must be a number, got {self[k]!r}") from None

    def list(self, k):
        return [s.strip() for s in self[k].split(",") if s.strip()]


def resolve_config(args) -> Config:
    values = dict(DEFAULTS)
    env_backend = os.environ.get("REPDFD_BACKEND")
    if env_backend:
        values["backend"] = env_backend
    explicit = set()
    if args.config:
        file_values = read_config(args.config)
        values.update(file_values)
        explicit |= set(file_values)
    for item in args.set or []:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} must be key=value")
        k, v = (s.strip() for s in item.split("=", 1))
        if k not in DEFAULTS:
            raise ConfigurationError(f"unknown config key {k!r}")
        values[k] = v
        explicit.add(k)
    for flag, key in FLAG_KEYS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = str(v)
            explicit.add(key)
    return Config(values, explicit)


def train_config(cfg: Config) -> TrainConfig:
    return TrainConfig(border_width=cfg.int("p"), learning_rate=cfg.float("lr"),
                       weight_decay=cfg.float("weight_decay"), batch_size=cfg.int("batch_size"),
                       epochs=cfg.int("epochs"), seed=cfg.int("seed"), optimizer=cfg["optimizer"],
                       template_config=cfg["templates"])


def make_runtime(cfg: Config, manifest_path: str | None = None, projection=None) -> Runtime:
    enc = get_backend(cfg["backend"], cfg)
    root = Path(manifest_path).resolve().parent if manifest_path else None
    crop = CropSpec(cfg.float("enlarge_factor"), enc.input_size)
    return Runtime.create(enc, cfg.int("projection_seed"), crop, root, projection=projection)


def _require(cfg: Config, key: str) -> str:
    if not cfg[key]:
        raise ConfigurationError(f"--{key.replace('_', '-')} is required for this command")
    return cfg[key]


def _records(cfg: Config):
    path = _require(cfg, "manifest")
    return path, load_manifest(path)


def _write_json(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_run_record(cfg: Config, command: str, out: Path, runtime: Runtime | None, checkpoints=None) -> None:
    rec = {
        "command": command,
        "version": __version__,
        "config": dict(sorted(cfg.items())),
        "seed": cfg.int("seed"),
        "backend": cfg["backend"],
        "backend_digest": runtime.encoders.weights_digest if runtime else None,
        "projection_digest": runtime.projection.digest if runtime else None,
        "checkpoints": checkpoints or {},
    }
    _write_json(rec, out / "run.json")


# --------------------------------------------------------------------------- commands


def cmd_prepare(cfg: Config) -> int:
    out = Path(cfg["out"])
    if cfg["manifest"]:
        # crop faces listed with bboxes into a fresh manifest of 8-bit crops
        path, records = _records(cfg)
        root = Path(path).resolve().parent
        if (out / "manifest.jsonl").resolve() == Path(path).resolve():
            raise ConfigurationError("--out would overwrite the input manifest")
        enc = get_backend(cfg["backend"], cfg)
        spec = CropSpec(cfg.float("enlarge_factor"), enc.input_size)
        new = []
        for i, r in enumerate(records):
            src = Path(r.image_path) if Path(r.image_path).is_absolute() else root / r.image_path
            img = read_rgb(src)
            if r.bbox is not None:
                img = crop_face(img, r.bbox, spec).round().clamp(0, 255).numpy()
            rel = f"crops/{i:06d}.png"
            write_rgb(img, out / rel)
            new.append(type(r)(rel, r.label, r.video_id, r.split, r.dataset, None))
        write_manifest(new, out / "manifest.jsonl")
        write_run_record(cfg, "prepare", out, None)
        print(f"wrote {len(new)} crops to {out / 'manifest.jsonl'}")
        return 0
    runtime = make_runtime(cfg)
    spec = ToyTaskSpec(
        border_width=cfg.int("p"), template_config=cfg["templates"],
        train_videos=cfg.int("train_videos"), train_frames=cfg.int("train_frames"),
        val_videos=cfg.int("val_videos"), val_frames=cfg.int("val_frames"),
        test_videos=cfg.int("test_videos"), test_frames=cfg.int("test_frames"),
        amplitude=cfg.float("task_amplitude"), identity_strength=cfg.float("task_identity"),
        noise=cfg.float("task_noise"), face_scale=cfg.float("task_face_scale"),
        seed=cfg.int("task_seed"), dataset=cfg["dataset"])
    records = write_toy_dataset(runtime.encoders, runtime.projection, out, spec)
    write_run_record(cfg, "prepare", out, runtime)
    print(f"wrote {len(records)} synthetic frames to {out / 'manifest.jsonl'}")
    return 0


def cmd_train(cfg: Config) -> int:
    path, records = _records(cfg)
    runtime = make_runtime(cfg, path)
    out = Path(cfg["out"])
    res = train(records, train_config(cfg), runtime, out_dir=out)
    _write_json(res.epochs, out / "epochs.json")
    write_run_record(cfg, "train", out, runtime, res.checkpoints)
    for e in res.epochs:
        print(json.dumps(e, sort_keys=True))
    print(f"checkpoint {out / 'prompt.rpdf'} sha256={res.checkpoints['prompt.rpdf']}")
    return 0


def _load_checkpoint(cfg: Config):
    path = _require(cfg, "checkpoint")
    ck = ckpt_io.load(path)
    if "p" in cfg.explicit and cfg.int("p") != ck.prompt.border_width:
        raise ConfigurationError(f"config p={cfg.int('p')} but checkpoint has p={ck.prompt.border_width}")
    if "templates" in cfg.explicit and cfg["templates"] != ck.template.id:
        raise ConfigurationError(f"config templates={cfg['templates']} but checkpoint has {ck.template.id}")
    return path, ck


def cmd_eval(cfg: Config) -> int:
    ck_path, ck = _load_checkpoint(cfg)
    path, records = _records(cfg)
    runtime = make_runtime(cfg, path, projection=ck.projection)
    reports = evaluate(records, ck_path, runtime, split=cfg["split"] or None)
    out = Path(cfg["out"])
    rows = [r.to_json() for r in reports]
    _write_json(rows, out / "eval.json")
    write_run_record(cfg, "eval", out, runtime, {"input": ckpt_io.file_digest(ck_path)})
    print(format_table(rows, ["dataset", "frame_auc", "video_auc", "n_frames", "n_videos", "template_config"]))
    return 0


def _test_split_check(records):
    if not any(r.split == "test" for r in records):
        raise ConfigurationError("sweeps need records in the test split")


def cmd_sweep_p(cfg: Config) -> int:
    path, records = _records(cfg)
    _test_split_check(records)
    runtime = make_runtime(cfg, path)
    try:
        p_values = [int(v) for v in cfg.list("p_values")]
    except ValueError:
        raise ConfigurationError("p_values must be integers") from None
    out = Path(cfg["out"])
    rows = sweep_border_width(records, p_values, train_config(cfg), runtime, out_dir=out)
    _write_json(rows, out / "sweep_p.json")
    write_run_record(cfg, "sweep-p", out, runtime)
    flat, cols = flatten_sweep(rows, "p")
    print(format_table(flat, cols))
    return 0


def cmd_sweep_templates(cfg: Config) -> int:
    path, records = _records(cfg)
    _test_split_check(records)
    runtime = make_runtime(cfg, path)
    out = Path(cfg["out"])
    rows = sweep_templates(records, cfg.list("template_ids"), train_config(cfg), runtime, out_dir=out)
    _write_json(rows, out / "sweep_templates.json")
    write_run_record(cfg, "sweep-templates", out, runtime)
    flat, cols = flatten_sweep(rows, "config")
    print(format_table(flat, cols))
    return 0


def cmd_analyze_sim(cfg: Config) -> int:
    path, records = _records(cfg)
    if cfg["checkpoint"]:
        _, ck = _load_checkpoint(cfg)
        runtime = make_runtime(cfg, path, projection=ck.projection)
        vp = ck.prompt
    else:
        runtime = make_runtime(cfg, path)
        vp = VisualPrompt.zeros(*runtime.encoders.input_size, cfg.int("p"))
    if cfg["split"]:
        records = [r for r in records if r.split == cfg["split"]]
    table = similarity_analysis(records, vp, runtime)
    out = Path(cfg["out"])
    _write_json(table, out / "similarity.json")
    write_run_record(cfg, "analyze-sim", out, runtime)
    rows = [{"dataset": ds, **vals} for ds, vals in table.items()]
    print(format_table(rows, ["dataset", "T0", "T1", "T2", "T3"]))
    return 0


def cmd_dump_features(cfg: Config) -> int:
    path, records = _records(cfg)
    ck = None
    if cfg["checkpoint"]:
        _, ck = _load_checkpoint(cfg)
    runtime = make_runtime(cfg, path, projection=ck.projection if ck else None)
    out = Path(cfg["out"])
    header = dump_features(records, runtime, out / "features.bin", checkpoint=ck, border_width=cfg.int("p"))
    write_run_record(cfg, "dump-features", out, runtime)
    print(f"wrote {header['count']} x {len(header['variants'])} features of dim {header['dims']} to {out / 'features.bin'}")
    return 0


HANDLERS = {
    "prepare": cmd_prepare, "train": cmd_train, "eval": cmd_eval, "sweep-p": cmd_sweep_p,
    "sweep-templates": cmd_sweep_templates, "analyze-sim": cmd_analyze_sim, "dump-features": cmd_dump_features,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--backend", help="encoder backend (default from REPDFD_BACKEND or 'toy')")
    common.add_argument("--p", type=int, help="prompt border width")
    common.add_argument("--templates", choices=sorted(CONFIGS), help="template config id")
    common.add_argument("--epochs", type=int)
    common.add_argument("--lr", type=float)
    common.add_argument("--batch-size", dest="batch_size", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--checkpoint", help="prompt checkpoint (.rpdf)")
    common.add_argument("--manifest", help="JSON-lines manifest")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="repdfd", description="Visual-prompt reprogramming for deepfake detection.")
    parser.add_argument("--version", action="version", version=f"repdfd {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    helps = {
        "prepare": "crop faces from a bbox manifest, or write the synthetic toy dataset",
        "train": "optimize a visual prompt",
        "eval": "frame- and video-level AUC of a checkpoint",
        "sweep-p": "train/test across border widths",
        "sweep-templates": "train/test across text template configs",
        "analyze-sim": "mean image/text cosine per template",
        "dump-features": "write raw and prompted image features",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def _fail(category: str, message: str, code: int) -> int:
    print(json.dumps({"error": category, "message": message}), file=sys.stderr)
    return code


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args)
        if cfg["backend"] not in available_backends():
            raise ConfigurationError(f"unknown backend {cfg['backend']!r}; known: {available_backends()}")
        return HANDLERS[args.command](cfg)
    except ConfigurationError as e:
        return _fail(e.category, str(e), 2)
    except RepDFDError as e:
        return _fail(e.category, str(e), 1)
    except OSError as e:
        return _fail("io", str(e), 1)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

"""Manifests, face cropping, video-level splits, and image loading."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from PIL import Image

from .errors import ConfigurationError, InputError
from .transform import resize

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class SampleRecord:
    image_path: str
    label: int
    video_id: str
    split: str = "train"
    dataset: str = "default"
    bbox: tuple[float, float, float, float] | None = None

    def to_json(self) -> dict:
        d = asdict(self)
        if d["bbox"] is None:
            del d["bbox"]
        else:
            d["bbox"] = list(d["bbox"])
        return d


@dataclass(frozen=True)
class CropSpec:
    enlarge_factor: float = 1.3
    output_size: tuple[int, int] = (224, 224)

    def __post_init__(self):
        if self.enlarge_factor < 1:
            raise ConfigurationError(f"enlarge_factor must be >= 1, got {self.enlarge_factor}")


def _record_from_row(row: dict, lineno: int) -> SampleRecord:
    try:
        label = row["label"]
        if isinstance(label, bool) or label not in (0, 1):
            raise InputError(f"line {lineno}: label must be 0 or 1, got {label!r}")
        video_id = str(row["video_id"])
        if not video_id:
            raise InputError(f"line {lineno}: empty video_id")
        split = row.get("split", "train")
        if split not in SPLITS:
            raise InputError(f"line {lineno}: unknown split {split!r}")
        bbox = row.get("bbox")
        if bbox is not None:
            if len(bbox) != 4:
                raise InputError(f"line {lineno}: bbox needs 4 numbers")
            bbox = tuple(float(v) for v in bbox)
        return SampleRecord(str(row["image_path"]), int(label), video_id, split,
                            str(row.get("dataset", "default")), bbox)
    except KeyError as e:
        raise InputError(f"line {lineno}: missing field {e.args[0]!r}") from None


def load_manifest(path) -> list[SampleRecord]:
    """Read a JSON-lines manifest. Blank lines are skipped."""
    records, seen = [], set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise InputError(f"line {lineno}: malformed JSON ({e.msg})") from None
            if not isinstance(row, dict):
                raise InputError(f"line {lineno}: expected an object")
            rec = _record_from_row(row, lineno)
            if rec.image_path in seen:
                raise InputError(f"line {lineno}: duplicate image_path {rec.image_path!r}")
            seen.add(rec.image_path)
            records.append(rec)
    return records


def write_manifest(records: Iterable[SampleRecord], path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")


# --------------------------------------------------------------------------- cropping


def crop_region(bbox, image_size: tuple[int, int], enlarge_factor: float) -> tuple[int, int, int, int]:
    """Scale ``bbox`` = (x0, y0, x1, y1) about its center and clamp to the image.

    ``image_size`` is (height, width). Returns integer (x0, y0, x1, y1).
    """
    x0, y0, x1, y1 = (float(v) for v in bbox)
    if x1 <= x0 or y1 <= y0:
        raise InputError(f"degenerate bbox {bbox}")
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    hw, hh = (x1 - x0) * enlarge_factor / 2, (y1 - y0) * enlarge_factor / 2
    H, W = image_size
    nx0 = max(0, int(round(cx - hw)))
    ny0 = max(0, int(round(cy - hh)))
    nx1 = min(W, int(round(cx + hw)))
    ny1 = min(H, int(round(cy + hh)))
    if nx1 <= nx0 or ny1 <= ny0:
        raise InputError(f"bbox {bbox} lies outside the {H}x{W} image")
    return nx0, ny0, nx1, ny1


def crop_face(image, bbox, spec: CropSpec = CropSpec()) -> torch.Tensor:
    """Crop the enlarged face box and resize it to ``spec.output_size``."""
    img = torch.as_tensor(np.array(image, dtype=np.float64))
    x0, y0, x1, y1 = crop_region(bbox, img.shape[:2], spec.enlarge_factor)
    return resize(img[y0:y1, x0:x1], spec.output_size)


# --------------------------------------------------------------------------- splitting


def split_by_video(records: Sequence[SampleRecord], fractions: dict[str, float], seed: int = 0):
    """Assign whole videos to splits; returns {split: [records]} with ``split`` rewritten.

    Every split with a positive fraction receives at least one video.
    """
    active = {k: float(v) for k, v in fractions.items() if v > 0}
    if any(k not in SPLITS for k in active):
        raise ConfigurationError(f"unknown split in {sorted(fractions)}")
    if not math.isclose(sum(active.values()), 1.0, abs_tol=1e-9):
        raise ConfigurationError(f"split fractions must sum to 1, got {sum(active.values())}")
    videos = sorted({r.video_id for r in records})
    if len(videos) < len(active):
        raise ConfigurationError(f"{len(videos)} videos cannot fill {len(active)} splits")

    order = np.random.default_rng(seed).permutation(len(videos))
    names = list(active)
    counts = [max(1, int(math.floor(active[k] * len(videos)))) for k in names]
    while sum(counts) > len(videos):
        i = int(np.argmax(counts))
        counts[i] -= 1
    # hand out the remainder by largest fractional part
    rema = sorted(range(len(names)), key=lambda i: -(active[names[i]] * len(videos) - counts[i]))
    i = 0
    while sum(counts) < len(videos):
        counts[rema[i % len(names)]] += 1
        i += 1

    assign, start = {}, 0
    for name, n in zip(names, counts):
        for j in order[start:start + n]:
            assign[videos[j]] = name
        start += n
    out = {k: [] for k in names}
    for r in records:
        out[assign[r.video_id]].append(replace(r, split=assign[r.video_id]))
    return out


# --------------------------------------------------------------------------- loading


def read_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def write_rgb(array: np.ndarray, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(array, dtype=np.uint8), "RGB").save(path)


class ImageStore:
    """Loads manifest images as model-space tensors, caching them by path.

    Pixels go uint8 -> [0, 1] -> per-channel (x - mean) / std, after an optional
    bbox crop, then are resized to the backend input size.
    """

    def __init__(self, input_size, pixel_mean, pixel_std, crop: CropSpec | None = None, root=None):
        self.input_size = tuple(input_size)
        self.mean = torch.tensor(pixel_mean, dtype=torch.float64)
        self.std = torch.tensor(pixel_std, dtype=torch.float64)
        self.crop = crop or CropSpec(output_size=self.input_size)
        self.root = Path(root) if root is not None else None
        self._cache: dict[str, torch.Tensor] = {}

    @classmethod
    def for_backend(cls, enc, crop: CropSpec | None = None, root=None) -> "ImageStore":
        return cls(enc.input_size, enc.pixel_mean, enc.pixel_std, crop, root)

    def path(self, rec: SampleRecord) -> Path:
        p = Path(rec.image_path)
        return p if p.is_absolute() or self.root is None else self.root / p

    def load(self, rec: SampleRecord) -> torch.Tensor:
        key = str(self.path(rec))
        if key not in self._cache:
            img = torch.from_numpy(read_rgb(key).astype(np.float64))
            if rec.bbox is not None:
                img = crop_face(img, rec.bbox, self.crop)
            img = resize(img / 255.0, self.input_size)
            self._cache[key] = (img - self.mean) / self.std
        return self._cache[key]

    def batch(self, records: Sequence[SampleRecord]) -> tuple[torch.Tensor, torch.Tensor]:
        images = torch.stack([self.load(r) for r in records])
        labels = torch.tensor([r.label for r in records], dtype=torch.long)
        return images, labels

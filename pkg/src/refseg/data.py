"""Manifest loading, triplet decoding and dual-resolution preprocessing."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from refseg.text import Tokenizer

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    image_path: Path
    mask_path: Path
    expression: str
    split: str
    id: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    root: Path | None = None

    def __len__(self) -> int:
        return len(self.entries)

    def split(self, name: str) -> list[ManifestEntry]:
        if name not in SPLITS:
            raise ManifestError(f"unknown split {name!r}; expected one of {SPLITS}")
        return [e for e in self.entries if e.split == name]


def load_manifest(path: str | Path) -> DatasetManifest:
    """Read a JSON-lines manifest; paths are resolved against its directory."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    root = path.parent
    entries: list[ManifestEntry] = []
    seen: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            rec = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
        if not isinstance(rec, dict):
            raise ManifestError(f"{path}:{lineno}: entry must be a JSON object")
        missing = [k for k in ("image", "mask", "expression", "split") if k not in rec]
        if missing:
            raise ManifestError(f"{path}:{lineno}: missing field(s) {', '.join(missing)}")
        split = rec["split"]
        if split not in SPLITS:
            raise ManifestError(f"{path}:{lineno}: unknown split {split!r}; expected one of {SPLITS}")
        expression = str(rec["expression"])
        if not expression.strip():
            raise ManifestError(f"{path}:{lineno}: empty expression")
        image_path, mask_path = root / rec["image"], root / rec["mask"]
        for p in (image_path, mask_path):
            if not p.is_file():
                raise ManifestError(f"{path}:{lineno}: referenced file does not exist: {p}")
        sid = str(rec.get("id", lineno))
        if sid in seen:
            raise ManifestError(
                f"{path}:{lineno}: id {sid!r} already listed (split {seen[sid]!r}); splits must be disjoint"
            )
        seen[sid] = split
        entries.append(ManifestEntry(image_path, mask_path, expression, split, sid))
    return DatasetManifest(entries=entries, root=root)


def write_manifest(path: str | Path, records: list[dict]) -> None:
    lines = [json.dumps(r, sort_keys=True) for r in records]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


@dataclass
class Triplet:
    """High-res image in [0, 1] (``H x W x 3``), binary mask (``H x W``), expression."""

    image: np.ndarray
    mask: np.ndarray
    expression: str
    id: str = ""

    def __post_init__(self):
        if self.image.shape[:2] != self.mask.shape:
            raise ValueError(
                f"image {self.image.shape[:2]} and mask {self.mask.shape} dimensions differ"
            )
        if not self.expression.strip():
            raise ValueError("expression is empty")


def read_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0


def read_mask(path: str | Path) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode not in ("1", "L", "P", "I", "I;16", "F"):
            raise ValueError(f"{path}: mask must be single-channel, got mode {img.mode}")
        if img.mode in ("I", "I;16", "F"):
            arr = np.asarray(img, dtype=np.float64)
            arr = arr / arr.max() if arr.max() > 0 else arr
        else:
            arr = np.asarray(img.convert("L"), dtype=np.float64) / 255.0
    if len(np.unique(arr)) > 2:
        warnings.warn(f"{path}: mask has more than two values; thresholding at 0.5", stacklevel=2)
    return (arr >= 0.5).astype(np.uint8)


def load_triplet(entry: ManifestEntry) -> Triplet:
    return Triplet(read_image(entry.image_path), read_mask(entry.mask_path), entry.expression, entry.id)


@dataclass
class DualResSample:
    image_lowres: torch.Tensor
    image_highres: torch.Tensor
    mask: torch.Tensor
    token_ids: torch.Tensor
    pad_mask: torch.Tensor
    id: str = ""


def resize_image(image: torch.Tensor, size: int) -> torch.Tensor:
    """Bilinear (antialiased) resample of an ``H x W x 3`` image to ``size x size``."""
    x = image.permute(2, 0, 1)[None]
    if x.shape[-2:] == (size, size):
        return image.clone()
    out = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False, antialias=True)
    return out[0].permute(1, 2, 0).clamp_(0.0, 1.0)


def preprocess_dual(triplet: Triplet, size_low: int, size_high: int, tokenizer: Tokenizer) -> DualResSample:
    """Build both network inputs; the ground-truth mask keeps its own resolution."""
    if size_low >= size_high:
        raise ValueError(f"size_low ({size_low}) must be smaller than size_high ({size_high})")
    image = torch.from_numpy(np.ascontiguousarray(triplet.image, dtype=np.float32))
    high = resize_image(image, size_high)
    low = resize_image(high, size_low)
    ids, pad = tokenizer(triplet.expression)
    return DualResSample(
        image_lowres=low,
        image_highres=high,
        mask=torch.from_numpy(triplet.mask.astype(np.uint8)),
        token_ids=torch.tensor(ids, dtype=torch.long),
        pad_mask=torch.tensor(pad, dtype=torch.bool),
        id=triplet.id,
    )


@dataclass
class Batch:
    image_low: torch.Tensor
    image_high: torch.Tensor
    mask: torch.Tensor
    token_ids: torch.Tensor
    pad_mask: torch.Tensor
    ids: list[str]

    def __len__(self) -> int:
        return len(self.ids)


def collate(samples: list[DualResSample]) -> Batch:
    shapes = {tuple(s.mask.shape) for s in samples}
    if len(shapes) > 1:
        raise ValueError(f"cannot batch masks of different sizes: {sorted(shapes)}")
    return Batch(
        image_low=torch.stack([s.image_lowres for s in samples]),
        image_high=torch.stack([s.image_highres for s in samples]),
        mask=torch.stack([s.mask for s in samples]),
        token_ids=torch.stack([s.token_ids for s in samples]),
        pad_mask=torch.stack([s.pad_mask for s in samples]),
        ids=[s.id for s in samples],
    )


def prepare_split(
    manifest: DatasetManifest, split: str, size_low: int, size_high: int, tokenizer: Tokenizer
) -> list[DualResSample]:
    samples = [
        preprocess_dual(load_triplet(e), size_low, size_high, tokenizer) for e in manifest.split(split)
    ]
    log.info("prepared %d %s samples", len(samples), split)
    return samples


def iter_batches(samples: list[DualResSample], batch_size: int, generator: torch.Generator | None = None):
    """Yield batches, shuffled when ``generator`` is given.

    A trailing single-sample batch is folded into the previous one so batch
    norm always sees at least two samples.
    """
    order = list(range(len(samples)))
    if generator is not None:
        order = torch.randperm(len(samples), generator=generator).tolist()
    chunks = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-2].extend(chunks.pop())
    for chunk in chunks:
        yield collate([samples[i] for i in chunk])

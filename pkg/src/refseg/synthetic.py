"""Synthetic referring-segmentation set: coloured shapes plus an expression
that picks out exactly one of them."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from refseg.data import DatasetManifest, load_manifest, write_manifest

COLORS = {"red": (220, 40, 40), "green": (40, 200, 60), "blue": (50, 80, 230)}
SHAPES = ("circle", "square", "triangle")
SIZES = ("small", "large")
# cells of a 3x3 layout grid (row, col)
POSITIONS = {"left": (1, 0), "right": (1, 2), "top": (0, 1), "bottom": (2, 1)}
ATTRIBUTES = ("size", "color", "shape", "position")


@dataclass(frozen=True)
class ShapeSpec:
    shape: str
    color: str
    size: str
    position: str
    center: tuple[float, float]
    radius: float

    def attr(self, name: str) -> str:
        return getattr(self, name)


def describe(target: ShapeSpec, attrs: tuple[str, ...]) -> str:
    words = ["the"]
    if "size" in attrs:
        words.append(target.size)
    if "color" in attrs:
        words.append(target.color)
    words.append(target.shape if "shape" in attrs else "shape")
    if "position" in attrs:
        words.append(("on the " if target.position in ("left", "right") else "at the ") + target.position)
    return " ".join(words)


def unique_descriptions(shapes: list[ShapeSpec], target: int) -> list[tuple[str, ...]]:
    """Attribute subsets that single out ``shapes[target]``."""
    out = []
    for k in range(1, len(ATTRIBUTES) + 1):
        for attrs in itertools.combinations(ATTRIBUTES, k):
            key = tuple(shapes[target].attr(a) for a in attrs)
            matches = sum(tuple(s.attr(a) for a in attrs) == key for s in shapes)
            if matches == 1:
                out.append(attrs)
    return out


def draw_shape(draw: ImageDraw.ImageDraw, spec: ShapeSpec, fill) -> None:
    cx, cy = spec.center
    r = spec.radius
    if spec.shape == "circle":
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=fill)
    elif spec.shape == "square":
        s = r * 0.9
        draw.rectangle([cx - s, cy - s, cx + s, cy + s], fill=fill)
    else:
        draw.polygon([(cx, cy - r), (cx - r, cy + r * 0.8), (cx + r, cy + r * 0.8)], fill=fill)


def sample_scene(rng: np.random.Generator, canvas: int) -> list[ShapeSpec]:
    cell = canvas / 3
    n = int(rng.integers(2, 5))
    positions = rng.permutation(list(POSITIONS))[:n]
    shapes = []
    for pos in positions:
        size = SIZES[int(rng.integers(2))]
        radius = cell * (0.40 if size == "large" else 0.22) * float(rng.uniform(0.9, 1.05))
        row, col = POSITIONS[str(pos)]
        slack = cell / 2 - radius
        cx = (col + 0.5) * cell + float(rng.uniform(-slack, slack)) * 0.5
        cy = (row + 0.5) * cell + float(rng.uniform(-slack, slack)) * 0.5
        shapes.append(
            ShapeSpec(
                shape=SHAPES[int(rng.integers(3))],
                color=list(COLORS)[int(rng.integers(3))],
                size=size,
                position=str(pos),
                center=(cx, cy),
                radius=radius,
            )
        )
    return shapes


def render(shapes: list[ShapeSpec], target: int, canvas: int, background: int) -> tuple[Image.Image, Image.Image]:
    image = Image.new("RGB", (canvas, canvas), (background,) * 3)
    mask = Image.new("L", (canvas, canvas), 0)
    draw = ImageDraw.Draw(image)
    for spec in shapes:
        draw_shape(draw, spec, COLORS[spec.color])
    draw_shape(ImageDraw.Draw(mask), shapes[target], 255)
    return image, mask


def split_for(i: int, n: int) -> str:
    n_train = max(1, int(round(0.8 * n)))
    n_val = int(round(0.1 * n))
    if i < n_train:
        return "train"
    return "val" if i < n_train + n_val else "test"


def generate_synthetic(n: int, canvas: int, seed: int, out_dir: str | Path) -> DatasetManifest:
    """Write ``n`` samples (PNG images/masks + ``manifest.jsonl``) under ``out_dir``.

    Output depends only on ``(n, canvas, seed)``. Splits are 80/10/10 by index.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        while True:
            shapes = sample_scene(rng, canvas)
            target = int(rng.integers(len(shapes)))
            options = unique_descriptions(shapes, target)
            if options:
                break
        attrs = options[int(rng.integers(len(options)))]
        image, mask = render(shapes, target, canvas, background=int(rng.integers(15, 70)))
        if not np.asarray(mask).any():
            raise RuntimeError(f"sample {i}: target shape rendered empty")
        name = f"{i:05d}.png"
        image.save(out / "images" / name)
        mask.save(out / "masks" / name)
        records.append(
            {
                "id": f"syn-{i:05d}",
                "image": f"images/{name}",
                "mask": f"masks/{name}",
                "expression": describe(shapes[target], attrs),
                "split": split_for(i, n),
            }
        )
    write_manifest(out / "manifest.jsonl", records)
    return load_manifest(out / "manifest.jsonl")

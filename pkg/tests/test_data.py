import json
import warnings
from collections import Counter

import numpy as np
import pytest
import torch

from conftest import write_png
from refseg.data import (
    ManifestError,
    Triplet,
    iter_batches,
    load_manifest,
    load_triplet,
    preprocess_dual,
)
from refseg.synthetic import ATTRIBUTES, generate_synthetic
from refseg.text import Tokenizer


def make_pair(root, name, size=(16, 16), mask_size=None):
    rng = np.random.default_rng(0)
    write_png(root / f"{name}.png", rng.integers(0, 256, (*size, 3), dtype=np.uint8))
    m = np.zeros(mask_size or size, dtype=np.uint8)
    m[2:6, 2:6] = 255
    write_png(root / f"{name}_m.png", m)
    return {"image": f"{name}.png", "mask": f"{name}_m.png"}


def write_lines(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records))
    return path


def test_manifest_split_counts(tmp_path):
    recs = [
        {**make_pair(tmp_path, f"s{i}"), "expression": "the red circle", "split": split, "id": str(i)}
        for i, split in enumerate(["train", "train", "test"])
    ]
    m = load_manifest(write_lines(tmp_path / "m.jsonl", recs))
    assert len(m) == 3
    assert len(m.split("train")) == 2
    assert len(m.split("test")) == 1
    assert m.split("val") == []


def test_manifest_rejects_unknown_split(tmp_path):
    rec = {**make_pair(tmp_path, "a"), "expression": "x", "split": "validation"}
    with pytest.raises(ManifestError, match="unknown split"):
        load_manifest(write_lines(tmp_path / "m.jsonl", [rec]))


def test_manifest_empty_file(tmp_path):
    (tmp_path / "m.jsonl").write_text("")
    assert len(load_manifest(tmp_path / "m.jsonl")) == 0


def test_manifest_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError, match="manifest not found"):
        load_manifest(tmp_path / "nope.jsonl")


def test_manifest_malformed_line_is_named(tmp_path):
    good = {**make_pair(tmp_path, "a"), "expression": "x", "split": "train"}
    path = tmp_path / "m.jsonl"
    path.write_text(json.dumps(good) + "\n{not json\n")
    with pytest.raises(ManifestError, match=r"m.jsonl:2"):
        load_manifest(path)


def test_manifest_missing_referenced_file(tmp_path):
    rec = {"image": "gone.png", "mask": "gone_m.png", "expression": "x", "split": "train"}
    with pytest.raises(ManifestError, match="does not exist"):
        load_manifest(write_lines(tmp_path / "m.jsonl", [rec]))


def test_manifest_duplicate_id_across_splits(tmp_path):
    pair = make_pair(tmp_path, "a")
    recs = [{**pair, "expression": "x", "split": "train", "id": "k"},
            {**pair, "expression": "x", "split": "test", "id": "k"}]
    with pytest.raises(ManifestError, match="disjoint"):
        load_manifest(write_lines(tmp_path / "m.jsonl", recs))


def test_load_triplet_800(tmp_path):
    recs = [{**make_pair(tmp_path, "big", size=(800, 800)), "expression": "the plane", "split": "train"}]
    m = load_manifest(write_lines(tmp_path / "m.jsonl", recs))
    t = load_triplet(m.entries[0])
    assert t.image.shape == (800, 800, 3)
    assert t.mask.shape == (800, 800)
    assert 0.0 <= t.image.min() and t.image.max() <= 1.0
    assert set(np.unique(t.mask)) == {0, 1}


def test_load_triplet_empty_mask_ok(tmp_path):
    write_png(tmp_path / "i.png", np.zeros((8, 8, 3), np.uint8))
    write_png(tmp_path / "m.png", np.zeros((8, 8), np.uint8))
    recs = [{"image": "i.png", "mask": "m.png", "expression": "nothing", "split": "val"}]
    t = load_triplet(load_manifest(write_lines(tmp_path / "m.jsonl", recs)).entries[0])
    assert t.mask.sum() == 0


def test_load_triplet_dim_mismatch(tmp_path):
    recs = [{**make_pair(tmp_path, "x", size=(800, 800), mask_size=(512, 512)), "expression": "x", "split": "train"}]
    m = load_manifest(write_lines(tmp_path / "m.jsonl", recs))
    with pytest.raises(ValueError, match="differ"):
        load_triplet(m.entries[0])


def test_load_triplet_grey_mask_warns_and_thresholds(tmp_path):
    write_png(tmp_path / "i.png", np.zeros((4, 4, 3), np.uint8))
    write_png(tmp_path / "m.png", np.array([[0, 100, 128, 255]] * 4, np.uint8))
    recs = [{"image": "i.png", "mask": "m.png", "expression": "x", "split": "train"}]
    entry = load_manifest(write_lines(tmp_path / "m.jsonl", recs)).entries[0]
    with pytest.warns(UserWarning, match="more than two values"):
        t = load_triplet(entry)
    assert t.mask[0].tolist() == [0, 0, 1, 1]


def test_load_triplet_rejects_rgb_mask(tmp_path):
    write_png(tmp_path / "i.png", np.zeros((4, 4, 3), np.uint8))
    write_png(tmp_path / "m.png", np.zeros((4, 4, 3), np.uint8))
    recs = [{"image": "i.png", "mask": "m.png", "expression": "x", "split": "train"}]
    entry = load_manifest(write_lines(tmp_path / "m.jsonl", recs)).entries[0]
    with pytest.raises(ValueError, match="single-channel"):
        load_triplet(entry)


def _triplet(size, mask_value=1):
    rng = np.random.default_rng(1)
    mask = np.zeros((size, size), np.uint8)
    mask[: size // 2] = mask_value
    return Triplet(rng.random((size, size, 3), dtype=np.float32), mask, "the red circle", "t")


def test_preprocess_dual_full_sizes():
    tok = Tokenizer.from_expressions(["the red circle"], max_len=16)
    s = preprocess_dual(_triplet(800), 384, 1024, tok)
    assert s.image_lowres.shape == (384, 384, 3)
    assert s.image_highres.shape == (1024, 1024, 3)
    assert s.mask.shape == (800, 800)
    assert set(s.mask.unique().tolist()) <= {0, 1}
    assert len(s.token_ids) == len(s.pad_mask) == 16


def test_preprocess_dual_toy_sizes():
    tok = Tokenizer.from_expressions(["the red circle"], max_len=8)
    s = preprocess_dual(_triplet(16), 8, 16, tok)
    assert s.image_lowres.shape == (8, 8, 3)
    assert s.image_highres.shape == (16, 16, 3)
    # a constant image stays constant through both resamples
    t = Triplet(np.full((16, 16, 3), 0.25, np.float32), np.zeros((16, 16), np.uint8), "x")
    s = preprocess_dual(t, 8, 16, tok)
    assert torch.allclose(s.image_lowres, torch.full_like(s.image_lowres, 0.25))


def test_preprocess_dual_lowres_derived_from_highres():
    tok = Tokenizer.from_expressions(["the red circle"], max_len=8)
    a = preprocess_dual(_triplet(40), 16, 32, tok)
    b = preprocess_dual(_triplet(40), 16, 32, tok)
    assert torch.equal(a.image_lowres, b.image_lowres)


def test_preprocess_dual_rejects_equal_sizes():
    tok = Tokenizer.from_expressions(["x"], max_len=8)
    with pytest.raises(ValueError, match="smaller"):
        preprocess_dual(_triplet(16), 512, 512, tok)


def test_iter_batches_folds_singleton_tail():
    tok = Tokenizer.from_expressions(["the red circle"], max_len=8)
    samples = [preprocess_dual(_triplet(16), 8, 16, tok) for _ in range(5)]
    sizes = [len(b) for b in iter_batches(samples, 4)]
    assert sizes == [5]
    sizes = [len(b) for b in iter_batches(samples, 2, generator=torch.Generator().manual_seed(0))]
    assert sizes == [2, 3]


# synthetic generator


def test_synthetic_deterministic(tmp_path):
    generate_synthetic(10, 64, 0, tmp_path / "a")
    generate_synthetic(10, 64, 0, tmp_path / "b")
    assert (tmp_path / "a/manifest.jsonl").read_bytes() == (tmp_path / "b/manifest.jsonl").read_bytes()
    for i in range(10):
        for kind in ("images", "masks"):
            name = f"{kind}/{i:05d}.png"
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_synthetic_seed_changes_output(tmp_path):
    generate_synthetic(5, 64, 0, tmp_path / "a")
    generate_synthetic(5, 64, 1, tmp_path / "b")
    assert (tmp_path / "a/manifest.jsonl").read_bytes() != (tmp_path / "b/manifest.jsonl").read_bytes()


def test_synthetic_masks_nonempty_and_binary(synth_dir):
    m = load_manifest(synth_dir / "manifest.jsonl")
    for e in m.entries:
        t = load_triplet(e)
        assert t.mask.sum() > 0
        assert set(np.unique(t.mask)) <= {0, 1}


def test_synthetic_expression_attribute_variety(tmp_path):
    m = generate_synthetic(100, 48, 3, tmp_path)
    words = {
        "size": {"small", "large"},
        "color": {"red", "green", "blue"},
        "shape": {"circle", "square", "triangle"},
        "position": {"left", "right", "top", "bottom"},
    }
    kinds = Counter()
    for e in m.entries:
        toks = set(e.expression.split())
        for kind in ATTRIBUTES:
            if toks & words[kind]:
                kinds[kind] += 1
    assert len(kinds) >= 2
    assert Counter(e.split for e in m.entries) == {"train": 80, "val": 10, "test": 10}


def test_synthetic_expression_is_unambiguous():
    from refseg.synthetic import describe, sample_scene, unique_descriptions

    rng = np.random.default_rng(0)
    for _ in range(200):
        shapes = sample_scene(rng, 96)
        assert len({s.position for s in shapes}) == len(shapes)
        for t in range(len(shapes)):
            for attrs in unique_descriptions(shapes, t):
                hits = [s for s in shapes if describe(s, attrs) == describe(shapes[t], attrs)]
                assert hits == [shapes[t]]


def test_synthetic_rejects_nonpositive_n(tmp_path):
    with pytest.raises(ValueError):
        generate_synthetic(0, 64, 0, tmp_path)

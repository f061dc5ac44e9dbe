import numpy as np
import pytest
import torch
from PIL import Image

from refseg.config import TrainConfig

torch.set_num_threads(1)


@pytest.fixture
def toy_cfg():
    """Small config: 32px low-res / 64px high-res, patch 8, width 32."""
    return TrainConfig(
        lr=1e-3, epochs=1, batch_size=4, d1=32, d2=32, heads=4,
        text_layers=2, image_layers=2, highres_layers=2, max_len=8,
        size_low=32, size_high=64, patch_low=8, patch_high=8, downsample=2,
        lora_rank=4, clip_lora_rank=4, seed=0,
    )


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    from refseg.synthetic import generate_synthetic

    out = tmp_path_factory.mktemp("synth")
    generate_synthetic(20, 64, 0, out)
    return out


def write_png(path, array, mode=None):
    Image.fromarray(np.asarray(array), mode=mode).save(path)
    return path


ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


class criterion:
    """Context manager recording one acceptance criterion's pass/fail line."""

    def __init__(self, key: str, title: str):
        self.key, self.title, self.detail = key, title, ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        ok = exc_type is None
        detail = self.detail if ok else f"{self.detail} {exc_type.__name__}: {exc}".strip()
        ACCEPTANCE_RESULTS.append((self.key, ok, f"{self.title} {detail}".strip()))
        return False


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key, ok, text in sorted(ACCEPTANCE_RESULTS, key=lambda r: int(r[0][1:])):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {key}: {text}")

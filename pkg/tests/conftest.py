import numpy as np
import pytest
from PIL import Image

from bovw.dataset import GrayImage
from bovw.synth import make_texture


@pytest.fixture(scope="session")
def texture_pair():
    """A textured image and its lossless 90-degree (CCW) rotation."""
    img = make_texture("blobs", 3)
    return img, GrayImage(np.rot90(img.pixels).copy())


@pytest.fixture(scope="session")
def textured_images():
    """Small mixed-texture corpus for descriptor tests."""
    return [make_texture(kind, seed)
            for kind in ("blobs", "grains", "waves") for seed in (3, 4)]


@pytest.fixture
def tiny_dataset(tmp_path):
    """3 classes x 4 images dataset tree (PNG)."""
    rng_kinds = ("blobs", "grains", "waves")
    for ci, kind in enumerate(rng_kinds):
        d = tmp_path / "data" / kind
        d.mkdir(parents=True)
        for i in range(4):
            img = make_texture(kind, 100 + ci * 10 + i, size=128)
            arr = np.clip(np.rint(img.pixels * 255), 0, 255).astype(np.uint8)
            Image.fromarray(arr, mode="L").save(d / f"{kind}_{i}.png")
    return tmp_path / "data"


def rot90_point(x, y, size):
    """Where np.rot90 (CCW) sends the pixel-center point (x, y)."""
    return y, size - 1 - x

import numpy as np
import pytest

from hdseg.types import PipelineConfig, SlideRecord


@pytest.fixture
def tiny_config():
    return PipelineConfig(tile_size=8, stride=4, patch_size=4, embed_dim=8, depth=1, heads=2,
                          tiles_per_slide=4)


def make_slide(slide_id="s", patient_id="p", size=(100, 100), seed=0):
    rng = np.random.default_rng(seed)
    h, w = size
    image = rng.integers(0, 256, (h, w, 3)).astype(np.uint8)
    musc = np.zeros((h, w), bool)
    musc[h // 4: 3 * h // 4] = True
    plexus = np.zeros((h, w), bool)
    plexus[h // 2 - 2: h // 2 + 2, w // 2 - 2: w // 2 + 2] = True
    return SlideRecord(slide_id, patient_id, image, 5.0, musc, plexus)


@pytest.fixture
def slide():
    return make_slide()

from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hdseg.errors import InvalidConfig, PlacementFailure
from hdseg.metrics import connected_components
from hdseg.phantom import PhantomConfig, generate_corpus, generate_phantom
from hdseg.types import validate_slide


def test_no_blobs_means_empty_plexus():
    s = generate_phantom(PhantomConfig(n_plexus=0))
    assert not s.plexus_gt.any()


def test_deterministic():
    a = generate_phantom(PhantomConfig(seed=3))
    b = generate_phantom(PhantomConfig(seed=3))
    assert np.array_equal(a.image, b.image)
    assert np.array_equal(a.muscularis_gt, b.muscularis_gt)
    assert np.array_equal(a.plexus_gt, b.plexus_gt)


def test_seed_changes_geometry():
    a = generate_phantom(PhantomConfig(seed=1))
    b = generate_phantom(PhantomConfig(seed=2))
    assert not np.array_equal(a.muscularis_gt, b.muscularis_gt)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2 ** 31), n=st.integers(0, 6))
def test_valid_with_exact_blob_count(seed, n):
    s = generate_phantom(PhantomConfig(seed=seed, n_plexus=n, width=160, height=192))
    assert validate_slide(s) is s
    assert not np.any(s.plexus_gt & ~s.muscularis_gt)
    assert connected_components(s.plexus_gt)[0] == n


def test_band_colour_separates_from_background():
    cfg = PhantomConfig(seed=5)
    s = generate_phantom(cfg)
    inside = s.image[s.muscularis_gt].mean(axis=0)
    outside = s.image[~s.muscularis_gt].mean(axis=0)
    assert np.all(np.abs(inside - outside) >= 3 * cfg.noise_std)


def test_crowded_band_fails_to_place():
    cfg = PhantomConfig(width=64, height=64, band_thickness_range=(22, 22),
                        blob_radius_range=(9, 9), n_plexus=30)
    with pytest.raises(PlacementFailure):
        generate_phantom(cfg)


def test_config_rejects_blobs_wider_than_band():
    with pytest.raises(InvalidConfig):
        PhantomConfig(band_thickness_range=(15, 20), blob_radius_range=(4, 9))
    with pytest.raises(InvalidConfig):
        PhantomConfig(n_plexus=-1)


class TestCorpus:
    def test_twelve_valid_distinct(self):
        corpus = generate_corpus(12, seed=0)
        assert [s.slide_id for s in corpus] == [f"phantom_{i:03d}" for i in range(12)]
        for s in corpus:
            validate_slide(s)
        images = {s.image.tobytes() for s in corpus}
        assert len(images) == 12
        patients = [s.patient_id for s in corpus]
        assert len(set(patients)) < 12

    def test_single(self):
        assert len(generate_corpus(1)) == 1

    def test_reproducible(self):
        base = replace(PhantomConfig(), width=96, height=96, band_thickness_range=(30, 40),
                       blob_radius_range=(3, 5))
        a, b = generate_corpus(3, base, seed=9), generate_corpus(3, base, seed=9)
        assert all(np.array_equal(x.image, y.image) for x, y in zip(a, b))

    def test_needs_a_slide(self):
        with pytest.raises(InvalidConfig):
            generate_corpus(0)

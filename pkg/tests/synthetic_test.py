from dataclasses import replace

import numpy as np
import pytest
from scipy import ndimage

from app.core.exceptions import InsufficientDataError
from app.services.features import frangi_ridges
from app.services.synthetic import SyntheticConfig, generate_dataset, synthesize_csd


def test_synthetic_csd_is_normalized_and_deterministic():
    config = SyntheticConfig(seed=11)
    a, b = synthesize_csd(config), synthesize_csd(config)
    assert a.csd.shape == (128, 128)
    assert a.csd.pixels.dtype == np.float32
    assert a.csd.pixels.min() == 0.0 and a.csd.pixels.max() == 1.0
    assert np.array_equal(a.csd.pixels, b.csd.pixels)
    assert np.array_equal(a.line_raster, b.line_raster)

    other = synthesize_csd(replace(config, seed=12))
    assert not np.array_equal(a.csd.pixels, other.csd.pixels)


def test_noise_free_lines_stand_out_from_background():
    config = SyntheticConfig(noise_sigma=0.0, seed=3)
    sample = synthesize_csd(config)
    on_line = sample.line_raster
    assert on_line.sum() > 0
    excess = sample.raw_signal[on_line] - sample.background[on_line]
    assert np.all(excess >= 0.5 * config.line_contrast)


def test_frangi_recovers_generator_lines():
    config = SyntheticConfig(n_lines_family1=1, n_lines_family2=1, noise_sigma=0.0, seed=5)
    sample = synthesize_csd(config)
    ridges = frangi_ridges(sample.csd.pixels)
    assert ridges.count > 0

    distance = ndimage.distance_transform_edt(~ridges.bits)
    coverage = float(np.mean(distance[sample.line_raster] <= 2.0))
    print(f"✅ Frangi covers {coverage:.1%} of the drawn lines within 2 px")
    assert coverage >= 0.95


def test_rejects_empty_line_family():
    with pytest.raises(InsufficientDataError):
        synthesize_csd(SyntheticConfig(n_lines_family1=0))


def test_generate_dataset_ids_and_variation():
    samples = generate_dataset(4, SyntheticConfig(size=32), seed=1)
    assert [s.csd.id for s in samples] == ["synth-00000", "synth-00001", "synth-00002", "synth-00003"]
    assert not np.array_equal(samples[0].csd.pixels, samples[1].csd.pixels)

    again = generate_dataset(4, SyntheticConfig(size=32), seed=1)
    assert all(np.array_equal(a.csd.pixels, b.csd.pixels) for a, b in zip(samples, again))

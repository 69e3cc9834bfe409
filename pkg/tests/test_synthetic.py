"""Synthetic cohort generator: planted signal, censoring, image texture."""

from pathlib import Path

import numpy as np
import pytest

from slidesurv.data import load_cohort
from slidesurv.errors import ConfigError
from slidesurv.sampling import load_image
from slidesurv.synthetic import (STRIPE_GRAY, SynthSpec, generate_cohort,
                                 render_image, simulate_outcomes)


def spearman(a, b):
    ra = np.argsort(np.argsort(a)).astype(float)
    rb = np.argsort(np.argsort(b)).astype(float)
    ra -= ra.mean()
    rb -= rb.mean()
    return float((ra * rb).sum() / np.sqrt((ra ** 2).sum() * (rb ** 2).sum()))


def test_spec_validation():
    SynthSpec(n_patients=3, image_side=128).validate()
    with pytest.raises(ConfigError):
        SynthSpec(n_patients=0).validate()
    with pytest.raises(ConfigError):
        SynthSpec(n_patients=3, censor_rate=1.0).validate()
    with pytest.raises(ConfigError):
        SynthSpec(n_patients=3, signal_strength=-0.1).validate()
    with pytest.raises(ConfigError):
        SynthSpec(n_patients=3, image_side=8).validate()


def test_zero_censor_rate_means_all_events():
    spec = SynthSpec(n_patients=40, censor_rate=0.0, seed=3)
    _, _, events = simulate_outcomes(spec)
    assert events.all()


def test_censoring_shortens_observed_times():
    spec = SynthSpec(n_patients=500, censor_rate=0.5, seed=4)
    _, times, events = simulate_outcomes(spec)
    frac = 1.0 - events.mean()
    assert 0.4 < frac < 0.6
    assert (times > 0).all() and np.isfinite(times).all()


def test_strong_signal_anticorrelates_latent_with_time():
    spec = SynthSpec(n_patients=60, signal_strength=2.0, censor_rate=0.0, seed=5)
    latent, times, _ = simulate_outcomes(spec)
    assert spearman(latent, np.log(times)) < -0.5


def test_zero_signal_decouples_latent_from_time():
    spec = SynthSpec(n_patients=200, signal_strength=0.0, censor_rate=0.0, seed=6)
    latent, times, _ = simulate_outcomes(spec)
    assert abs(spearman(latent, np.log(times))) < 0.2


def test_render_image_texture_encodes_latent():
    side = 128
    stripe = side // 8
    latents = np.linspace(-2.5, 2.5, 9)
    tissue_means = []
    dark_fractions = []
    for i, r in enumerate(latents):
        img = render_image(float(r), side, np.random.default_rng(100 + i))
        assert img.shape == (side, side, 3) and img.dtype == np.uint8
        np.testing.assert_array_equal(img[:, :, 0], img[:, :, 1])
        assert img[:, :stripe].mean() > 220  # background stripe stays bright
        tissue = img[:, stripe:, 0].astype(float)
        tissue_means.append(tissue.mean())
        dark_fractions.append((tissue < 80).mean())
    assert all(a > b for a, b in zip(tissue_means, tissue_means[1:]))
    # blob coverage runs ~1% to ~5% of tissue across the latent range
    assert dark_fractions[-1] > dark_fractions[0] + 0.02
    assert abs(STRIPE_GRAY - 245) < 1e-9


def test_generate_cohort_writes_loadable_layout(tmp_path):
    spec = SynthSpec(n_patients=5, images_per_patient=2, image_side=64, seed=7)
    cohort, latent = generate_cohort(spec, tmp_path)
    assert len(cohort) == 5 and latent.shape == (5,)
    assert cohort.patient_ids == [f"p{i:04d}" for i in range(5)]
    for pid in cohort.patient_ids:
        assert len(cohort.images[pid]) == 2
        for path in cohort.images[pid]:
            assert not Path(path).is_absolute()
            img = load_image(tmp_path / path)
            assert img.shape == (64, 64, 3)
    back = load_cohort(tmp_path / "clinical.csv", tmp_path / "images.csv")
    assert back.records == cohort.records
    assert back.images == cohort.images


def test_generate_cohort_is_deterministic(tmp_path):
    spec = SynthSpec(n_patients=3, image_side=64, seed=9)
    a, _ = generate_cohort(spec, tmp_path / "a")
    b, _ = generate_cohort(spec, tmp_path / "b")
    assert a.records == b.records
    assert a.images == b.images
    for pid in a.patient_ids:
        for rel in a.images[pid]:
            assert (tmp_path / "a" / rel).read_bytes() == \
                   (tmp_path / "b" / rel).read_bytes()


def test_different_seed_changes_cohort(tmp_path):
    a, _ = generate_cohort(SynthSpec(n_patients=3, image_side=64, seed=1),
                           tmp_path / "a")
    b, _ = generate_cohort(SynthSpec(n_patients=3, image_side=64, seed=2),
                           tmp_path / "b")
    assert [r.time for r in a.records] != [r.time for r in b.records]

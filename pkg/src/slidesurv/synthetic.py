"""Synthetic cohorts with a planted, image-visible risk signal.

Each patient gets a latent risk r ~ N(0, 1). Survival times are exponential
with rate (1/730) * exp(signal_strength * r), so higher latent risk means
shorter survival and the proportional-hazards assumption holds exactly.
Censoring is an independent coin flip; a censored patient's observed time is a
uniform fraction of their true event time.

Images carry the latent risk in two texture channels at once: tissue gets
darker as risk rises (mean intensity) and grows more dark blobs (blob
density), so both pooled and convolutional features can pick it up. A bright
stripe down the left edge mimics empty slide background for the patch sampler
to reject. With signal_strength 0 the images still vary but say nothing about
survival.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Cohort, SurvivalRecord, ensure_dir, save_cohort
from .errors import ConfigError
from .sampling import save_patch_png

BASE_RATE = 1.0 / 730.0   # two-year mean survival at zero latent risk
TISSUE_BASE = 170.0       # tissue gray at sigmoid(r) = 0
TISSUE_SPAN = 60.0        # darkening across the sigmoid range
STRIPE_GRAY = 245         # background stripe, above any sane threshold
NOISE_SD = 8.0


@dataclass(frozen=True)
class SynthSpec:
    n_patients: int
    images_per_patient: int = 1
    image_side: int = 512
    signal_strength: float = 2.0
    censor_rate: float = 0.25
    seed: int = 0

    def validate(self) -> None:
        if self.n_patients < 1:
            raise ConfigError(f"n_patients must be >= 1, got {self.n_patients}")
        if self.images_per_patient < 1:
            raise ConfigError("images_per_patient must be >= 1")
        if self.image_side < 16:
            raise ConfigError(f"image_side must be >= 16, got {self.image_side}")
        if self.signal_strength < 0:
            raise ConfigError("signal_strength must be >= 0")
        if not 0.0 <= self.censor_rate < 1.0:
            raise ConfigError(
                f"censor_rate must be in [0, 1), got {self.censor_rate}")


def _sigmoid(r: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-r))


def simulate_outcomes(spec: SynthSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Latent risks, observed times (days), and event flags."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0]))
    latent = rng.standard_normal(spec.n_patients)
    rate = BASE_RATE * np.exp(spec.signal_strength * latent)
    true_times = rng.exponential(1.0 / rate)
    censored = rng.random(spec.n_patients) < spec.censor_rate
    fraction = rng.uniform(0.1, 1.0, spec.n_patients)
    times = np.where(censored, true_times * fraction, true_times)
    return latent, times, ~censored


def render_image(latent: float, side: int, rng: np.random.Generator) -> np.ndarray:
    """One uint8 RGB slide: risk-shaded tissue, dark blobs, background stripe."""
    level = float(_sigmoid(np.float64(latent)))
    base = TISSUE_BASE - TISSUE_SPAN * level
    img = base + rng.normal(0.0, NOISE_SD, (side, side))

    # Blob radius follows resolution; the count compensates so the covered
    # fraction stays in the unsaturated 1-5% band at every image size.
    radius = max(2, side // 32)
    n_blobs = int(round((2.0 + 14.0 * level)
                        * (side / 64.0) ** 2 * (2.0 / radius) ** 2))
    yy, xx = np.ogrid[:side, :side]
    for _ in range(n_blobs):
        cy = int(rng.integers(0, side))
        cx = int(rng.integers(0, side))
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2
        img[mask] = 60.0

    stripe = max(1, side // 8)
    img[:, :stripe] = STRIPE_GRAY + rng.normal(0.0, 2.0, (side, stripe))

    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return np.repeat(img[:, :, None], 3, axis=2)


def generate_cohort(spec: SynthSpec, root) -> tuple[Cohort, np.ndarray]:
    """Write images/, clinical.csv, and images.csv under ``root``.

    Image paths in the cohort and manifest are relative to ``root``, so a
    generated dataset can move wholesale. Returns the cohort and the latent
    risk per patient (cohort order), which downstream checks correlate against
    observed outcomes.
    """
    spec.validate()
    root = Path(root)
    ensure_dir(root / "images")
    latent, times, events = simulate_outcomes(spec)

    records = []
    images: dict[str, list[str]] = {}
    for i in range(spec.n_patients):
        pid = f"p{i:04d}"
        records.append(SurvivalRecord(pid, float(times[i]), bool(events[i])))
        paths = []
        for k in range(spec.images_per_patient):
            rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1 + i, k]))
            pixels = render_image(float(latent[i]), spec.image_side, rng)
            rel = f"images/{pid}_{k}.png"  # paths stay relative to the root
            save_patch_png(pixels, root / rel)
            paths.append(rel)
        images[pid] = paths

    cohort = Cohort(records=tuple(records),
                    images={pid: tuple(p) for pid, p in images.items()})
    save_cohort(cohort, root / "clinical.csv", root / "images.csv")
    return cohort, latent

"""Random patch sampling from slide images with background rejection.

The per-image patch budget scales with tissue-usable area:

    budget = floor(h * w / side**2 * ratio), at least 1.

A candidate patch is rejected when the fraction of near-white pixels
(luminance strictly above ``bg_gray_threshold``) exceeds ``bg_area_threshold``;
a fraction exactly at the threshold is accepted. Every random draw comes from
a generator seeded per image, so images can be processed in any order or in
parallel with identical results.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .data import PatchRecord
from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

# ITU-R 601 luma weights; the rounded integer luminance is compared to the
# background threshold.
_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class SamplerConfig:
    """Patch geometry and rejection thresholds.

    Full-scale slides use side=512; the desk profile defaults to 64.
    """

    side: int = 64
    ratio: float = 0.05
    bg_gray_threshold: int = 200
    bg_area_threshold: float = 0.5
    max_retries_per_patch: int = 50

    def validate(self) -> None:
        if self.side < 1:
            raise ConfigError(f"side must be >= 1, got {self.side}")
        if not 0.0 < self.ratio <= 1.0:
            raise ConfigError(f"ratio must be in (0, 1], got {self.ratio}")
        if not 0 <= self.bg_gray_threshold <= 255:
            raise ConfigError(f"bg_gray_threshold must be in [0, 255], got {self.bg_gray_threshold}")
        if not 0.0 <= self.bg_area_threshold <= 1.0:
            raise ConfigError(f"bg_area_threshold must be in [0, 1], got {self.bg_area_threshold}")
        if self.max_retries_per_patch < 0:
            raise ConfigError("max_retries_per_patch must be >= 0")


@dataclass
class SampleDiagnostics:
    requested: int = 0
    produced: int = 0
    draws: int = 0
    rejected: int = 0

    @property
    def shortfall(self) -> int:
        return self.requested - self.produced


def patch_budget(height: int, width: int, cfg: SamplerConfig) -> int:
    """Patch count for one image; errors when the image cannot hold a patch."""
    if height < cfg.side or width < cfg.side:
        raise DataError(f"image {height}x{width} smaller than patch side {cfg.side}")
    return max(int(np.floor(height * width / cfg.side ** 2 * cfg.ratio)), 1)


def luminance(pixels: np.ndarray) -> np.ndarray:
    """Rounded integer luminance of an RGB uint8 array."""
    return np.rint(pixels.astype(np.float64) @ _LUMA)


def background_fraction(patch: np.ndarray, gray_threshold: int) -> float:
    """Fraction of pixels whose luminance is strictly above the threshold."""
    lum = luminance(patch)
    return float(np.count_nonzero(lum > gray_threshold)) / lum.size


def sample_image(pixels: np.ndarray, cfg: SamplerConfig, patient_id: str,
                 image_path: str, id_prefix: str, seed: int,
                 ) -> tuple[list[PatchRecord], SampleDiagnostics]:
    """Draw the budgeted number of accepted patches from one image.

    Each budget slot draws at most 1 + max_retries_per_patch candidates; slots
    that never produce an acceptable patch are reported as shortfall.
    """
    cfg.validate()
    h, w = pixels.shape[0], pixels.shape[1]
    budget = patch_budget(h, w, cfg)
    rng = np.random.default_rng(seed)
    diag = SampleDiagnostics(requested=budget)
    out: list[PatchRecord] = []
    for slot in range(budget):
        for _ in range(1 + cfg.max_retries_per_patch):
            y = int(rng.integers(0, h - cfg.side + 1))
            x = int(rng.integers(0, w - cfg.side + 1))
            diag.draws += 1
            patch = pixels[y:y + cfg.side, x:x + cfg.side]
            if background_fraction(patch, cfg.bg_gray_threshold) > cfg.bg_area_threshold:
                diag.rejected += 1
                continue
            out.append(PatchRecord(
                patch_id=f"{id_prefix}_{len(out):04d}",
                patient_id=patient_id, image_path=image_path,
                x=x, y=y, side=cfg.side))
            diag.produced += 1
            break
    if diag.shortfall:
        log.warning("image %s: produced %d of %d patches (%d draws rejected)",
                    image_path, diag.produced, diag.requested, diag.rejected)
    return out, diag


def image_seed(base_seed: int, image_index: int) -> int:
    """Independent per-image stream so parallel sampling stays deterministic."""
    return int(np.random.SeedSequence([base_seed, image_index]).generate_state(1)[0])


def load_image(path) -> np.ndarray:
    """Slide image as HWC uint8 RGB."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def crop(pixels: np.ndarray, rec: PatchRecord) -> np.ndarray:
    return pixels[rec.y:rec.y + rec.side, rec.x:rec.x + rec.side]


def save_patch_png(pixels: np.ndarray, path) -> None:
    Image.fromarray(pixels, mode="RGB").save(path, format="PNG")

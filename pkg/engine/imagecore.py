"""Image plumbing: loading, corpus manifests, spectral whitening, circular masking,
and synthetic contour stimuli.

Images are square 2-D float64 numpy arrays. Every loader returns zero-mean
images; whitening and masking are pure functions of their inputs.

Input: grayscale files (PGM/PNG, 8 or 16 bit, or .npy) and manifests
Output: Image arrays ready for the log-Gabor analysis
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

logger = logging.getLogger(__name__)

MASK_TAPER_PX = 8
SUPPORTED_SUFFIXES = (".pgm", ".png", ".npy")


class ImageLoadError(Exception):
    """Raised when an image file cannot be read or is too small."""
    def __init__(self, path, reason: str):
        super().__init__(f"{path}: {reason}")
        self.path = str(path)
        self.reason = reason


class ImageShapeError(ValueError):
    """Raised when an operation needs a square 2-D image."""
    pass


class EmptyCorpusError(ValueError):
    """Raised when a corpus or manifest yields no images."""
    pass


@dataclass(frozen=True)
class WhiteningParams:
    """Spectral whitening W(f) = f * exp(-(f/f0)**steepness).

    f0 is a fraction of the Nyquist frequency; cutoff(n) converts it to
    cycles per image for an n x n image.
    """
    f0: float = 0.45
    steepness: float = 4.0

    def __post_init__(self):
        if not self.f0 > 0:
            raise ValueError(f"whitening f0 must be > 0, got {self.f0}")
        if not self.steepness > 0:
            raise ValueError(f"whitening steepness must be > 0, got {self.steepness}")

    def cutoff(self, n: int) -> float:
        return self.f0 * n / 2.0


@dataclass(frozen=True)
class SyntheticStimulusSpec:
    """A circle of tangent atoms embedded among random distractor atoms."""
    radius: float = 64.0
    n_clutter: int = 0
    clutter_scale_range: tuple = (1, 4)
    seed: int = 0
    circle_scale: int = 2
    size: int = 256
    amplitude: float = 1.0
    # distance between neighbouring circle atoms, in wavelengths of circle_scale
    arc_spacing: float = 1.0

    def __post_init__(self):
        if not self.arc_spacing > 0:
            raise ValueError(f"arc_spacing must be > 0, got {self.arc_spacing}")
        if self.n_clutter < 0:
            raise ValueError(f"n_clutter must be >= 0, got {self.n_clutter}")
        if not 0 < self.radius < self.size / 2:
            raise ValueError(
                f"radius must lie in (0, {self.size / 2}), got {self.radius}"
            )
        lo, hi = self.clutter_scale_range
        if lo > hi:
            raise ValueError(f"empty clutter_scale_range {self.clutter_scale_range}")


# ---------------------------------------------------------------------------
# Basic helpers
# ---------------------------------------------------------------------------

def check_square(img: np.ndarray) -> int:
    """Return the side of a square 2-D image, raising ImageShapeError otherwise."""
    if img.ndim != 2 or img.shape[0] != img.shape[1]:
        raise ImageShapeError(f"expected a square 2-D image, got shape {img.shape}")
    return img.shape[0]


def image_energy(img: np.ndarray) -> float:
    """Sum of squared pixel values."""
    return float(np.sum(np.square(img)))


def central_crop(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape
    if h < size or w < size:
        raise ImageShapeError(f"image {h}x{w} is smaller than target {size}")
    top = (h - size) // 2
    left = (w - size) // 2
    return img[top:top + size, left:left + size]


def _to_luminance(pil_img) -> np.ndarray:
    mode = pil_img.mode
    if mode in ("L", "I", "I;16", "I;16B", "I;16L", "F"):
        return np.asarray(pil_img, dtype=np.float64)
    if mode in ("1", "P", "LA", "PA", "CMYK", "YCbCr", "HSV"):
        pil_img = pil_img.convert("RGB")
    rgb = np.asarray(pil_img, dtype=np.float64)
    # luminance average over the colour channels, alpha ignored
    return rgb[..., :3].mean(axis=-1)


def _read_array(path: Path) -> np.ndarray:
    if path.suffix.lower() == ".npy":
        try:
            arr = np.load(path, allow_pickle=False)
        except (OSError, ValueError) as e:
            raise ImageLoadError(path, f"unreadable array file ({e})") from e
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 3:
            arr = arr[..., :3].mean(axis=-1)
        if arr.ndim != 2:
            raise ImageLoadError(path, f"expected a 2-D array, got shape {arr.shape}")
        return arr
    try:
        with PILImage.open(path) as pil_img:
            pil_img.load()
            return _to_luminance(pil_img)
    except (OSError, ValueError) as e:
        raise ImageLoadError(path, f"not a decodable image ({e})") from e


def load_image(path, target_size: int) -> np.ndarray:
    """Load a grayscale image, crop it centrally to target_size and remove its mean.

    Colour inputs are reduced to the average of their channels. Images smaller
    than target_size are rejected (no upsampling).
    """
    path = Path(path)
    if not path.exists():
        raise ImageLoadError(path, "file not found")
    arr = _read_array(path)
    h, w = arr.shape
    if h < target_size or w < target_size:
        raise ImageLoadError(path, f"image {h}x{w} smaller than target size {target_size}")
    crop = central_crop(arr, target_size).astype(np.float64, copy=True)
    crop -= crop.mean()
    return crop


def save_image(path, img: np.ndarray) -> None:
    """Write an image: .npy keeps float values, .pgm/.png are 16-bit rescaled to full range."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix not in SUPPORTED_SUFFIXES:
        raise ValueError(f"unsupported image suffix {suffix!r} (use one of {SUPPORTED_SUFFIXES})")
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    if suffix == ".npy":
        np.save(path, np.asarray(img, dtype=np.float64), allow_pickle=False)
        return
    lo, hi = float(img.min()), float(img.max())
    span = hi - lo
    if span > 0:
        scaled = (img - lo) / span * 65535.0
    else:
        scaled = np.zeros_like(img)
    data = np.round(scaled).astype(np.uint16)
    PILImage.fromarray(data).save(path)


# ---------------------------------------------------------------------------
# Corpus manifests
# ---------------------------------------------------------------------------

def read_manifest(manifest) -> list:
    """Parse a manifest into (split, path) pairs.

    One entry per line: a bare path, or ``train: path`` / ``test: path``.
    ``#`` starts a comment; relative paths resolve against the manifest's folder.
    """
    manifest = Path(manifest)
    if not manifest.exists():
        raise ImageLoadError(manifest, "manifest not found")
    base = manifest.parent
    entries = []
    with open(manifest, "r", encoding="utf-8") as f:
        for line in f:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            split = "all"
            head, sep, tail = line.partition(":")
            if sep and head.strip().lower() in ("train", "test"):
                split = head.strip().lower()
                line = tail.strip()
            p = Path(line)
            if not p.is_absolute():
                p = base / p
            entries.append((split, p))
    return entries


def load_corpus(manifest, target_size: int, split: str = None, workers: int = None,
                skip_bad: bool = False) -> list:
    """Load every image of a manifest (optionally one split) as (image_id, Image) pairs.

    Files are decoded in parallel; the returned order follows the manifest.
    With skip_bad, unreadable or too-small entries are logged and dropped
    instead of aborting the load.
    """
    entries = read_manifest(manifest)
    if split is not None:
        entries = [(s, p) for s, p in entries if s == split or s == "all"]
    if not entries:
        raise EmptyCorpusError(f"no images listed in {manifest} (split={split})")
    workers = workers or os.cpu_count() or 1

    def _load(entry):
        _, p = entry
        try:
            return p.stem, load_image(p, target_size)
        except ImageLoadError as e:
            if not skip_bad:
                raise
            logger.warning("Skipping corpus entry %s", e)
            return None

    with ThreadPoolExecutor(max_workers=workers) as pool:
        corpus = [item for item in pool.map(_load, entries) if item is not None]
    if not corpus:
        raise EmptyCorpusError(f"no readable images in {manifest} (split={split})")
    logger.info("Loaded %d images at %dx%d from %s", len(corpus), target_size, target_size, manifest)
    return corpus


# ---------------------------------------------------------------------------
# Whitening and masking
# ---------------------------------------------------------------------------

def radial_frequency(n: int) -> np.ndarray:
    """Radial frequency of every FFT bin, in cycles per image."""
    fx = np.fft.fftfreq(n) * n
    return np.sqrt(fx[np.newaxis, :] ** 2 + fx[:, np.newaxis] ** 2)


def whitening_filter(n: int, params: WhiteningParams) -> np.ndarray:
    f = radial_frequency(n)
    return f * np.exp(-(f / params.cutoff(n)) ** params.steepness)


def whiten(img: np.ndarray, params: WhiteningParams = WhiteningParams()) -> np.ndarray:
    """Multiply the spectrum by f * exp(-(f/f0)**steepness); the DC term vanishes."""
    n = check_square(img)
    spectrum = np.fft.fft2(img) * whitening_filter(n, params)
    return np.real(np.fft.ifft2(spectrum))


def circular_mask(n: int, taper: int = MASK_TAPER_PX) -> np.ndarray:
    """Unit disk of radius n/2 with a raised-cosine roll-off over the last `taper` pixels."""
    c = n / 2.0
    idx = np.arange(n) - c
    r = np.sqrt(idx[np.newaxis, :] ** 2 + idx[:, np.newaxis] ** 2)
    rim = n / 2.0
    mask = np.ones((n, n))
    ramp = (r > rim - taper) & (r <= rim)
    mask[ramp] = np.cos(0.5 * np.pi * (r[ramp] - (rim - taper)) / taper) ** 2
    mask[r > rim] = 0.0
    return mask


def apply_circular_mask(img: np.ndarray, taper: int = MASK_TAPER_PX) -> np.ndarray:
    n = check_square(img)
    return img * circular_mask(n, taper)


def prepare_image(img: np.ndarray, params: WhiteningParams = WhiteningParams()) -> np.ndarray:
    """Whiten then mask: the standard input of the pursuit."""
    return apply_circular_mask(whiten(img, params))


def add_noise(img: np.ndarray, rng: np.random.Generator, snr_halving: bool = True) -> np.ndarray:
    """Add pixelwise Gaussian noise whose variance equals the image variance."""
    if not snr_halving:
        return img.copy()
    sigma = float(np.std(img))
    return img + rng.normal(0.0, sigma, size=img.shape)


# ---------------------------------------------------------------------------
# Synthetic stimuli
# ---------------------------------------------------------------------------

def plant_circle_in_noise(spec: SyntheticStimulusSpec, bank) -> tuple:
    """Render a circle of tangent atoms plus random clutter atoms.

    Returns (image, planted) where planted is a list of dicts with the atom
    address (scale, orientation, x, y), its complex coefficient, and whether
    it belongs to the circle. Deterministic for a given spec.seed.
    """
    from engine.loggabor import nearest_orientation, render_atoms

    n = spec.size
    if bank.image_size != n:
        raise ImageShapeError(f"bank built for {bank.image_size}, stimulus size is {n}")
    if not 0 <= spec.circle_scale < bank.params.n_scales:
        raise ValueError(f"circle_scale {spec.circle_scale} outside bank scales")
    lo, hi = spec.clutter_scale_range
    if spec.n_clutter and (lo < 0 or hi >= bank.params.n_scales):
        raise ValueError(f"clutter_scale_range {spec.clutter_scale_range} outside bank scales")

    rng = np.random.default_rng(spec.seed)
    center = n / 2.0
    spacing = spec.arc_spacing * bank.wavelengths[spec.circle_scale]
    n_circle = max(3, int(round(2 * math.pi * spec.radius / spacing)))
    planted = []
    for i in range(n_circle):
        beta = 2 * math.pi * i / n_circle
        x = int(round(center + spec.radius * math.cos(beta))) % n
        y = int(round(center + spec.radius * math.sin(beta))) % n
        k = nearest_orientation(bank, beta + math.pi / 2)
        planted.append({
            "address": (spec.circle_scale, k, x, y),
            "coeff": complex(spec.amplitude, 0.0),
            "on_circle": True,
        })
    for _ in range(spec.n_clutter):
        s = int(rng.integers(lo, hi + 1))
        k = int(rng.integers(0, bank.n_orientations))
        x = int(rng.integers(0, n))
        y = int(rng.integers(0, n))
        phase = float(rng.uniform(-math.pi, math.pi))
        planted.append({
            "address": (s, k, x, y),
            "coeff": complex(spec.amplitude * math.cos(phase), spec.amplitude * math.sin(phase)),
            "on_circle": False,
        })
    img = render_atoms(bank, [(p["address"], p["coeff"]) for p in planted])
    logger.debug("Planted %d circle atoms and %d clutter atoms", n_circle, spec.n_clutter)
    return img, planted


def make_circle_in_noise(spec: SyntheticStimulusSpec, bank) -> np.ndarray:
    img, _ = plant_circle_in_noise(spec, bank)
    return img

"""Image standardization and training-time augmentation.

Pipeline order: resize to the target square resolution (bilinear for images,
nearest for masks), then stochastic augmentations when in train mode, then
per-channel normalization (x/255 - mean) / std. Eval mode is a pure function
of the input: resize + normalize only.

Augmentation randomness comes exclusively from the generator handed to each
call; there is no hidden global RNG, so callers own reproducibility and may
parallelize per-image work freely.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import cv2
import numpy as np

from .errors import DataError

RESOLUTIONS = (256, 512, 1024)

# single fixed normalization across regimes keeps checkpoints interchangeable
DEFAULT_MEAN = (0.485, 0.456, 0.406)
DEFAULT_STD = (0.229, 0.224, 0.225)

AUGMENTATION_NAMES = ("horizontal_flip", "grayscale", "blur", "clahe")


@dataclass(frozen=True)
class Augmentation:
    name: str
    p: float = 0.5
    kernel: int = 5          # blur only
    clip_limit: float = 2.0  # clahe only
    tile_grid: int = 8       # clahe only

    def __post_init__(self):
        if self.name not in AUGMENTATION_NAMES:
            raise DataError(f"unknown augmentation {self.name!r}")
        if not (0.0 <= self.p <= 1.0):
            raise DataError(f"augmentation probability out of range: {self.p}")
        if self.name == "blur" and (self.kernel < 1 or self.kernel % 2 == 0):
            raise DataError("blur kernel must be odd and positive")

    def to_dict(self) -> dict:
        d = {"name": self.name, "p": self.p}
        if self.name == "blur":
            d["kernel"] = self.kernel
        if self.name == "clahe":
            d["clip_limit"] = self.clip_limit
            d["tile_grid"] = self.tile_grid
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Augmentation":
        return cls(**d)


def default_augmentations() -> tuple[Augmentation, ...]:
    return (
        Augmentation("horizontal_flip", p=0.5),
        Augmentation("grayscale", p=0.5),
        Augmentation("blur", p=0.5, kernel=5),
        Augmentation("clahe", p=0.5, clip_limit=2.0, tile_grid=8),
    )


@dataclass(frozen=True)
class PreprocessConfig:
    resolution: int
    augmentations: tuple[Augmentation, ...] = field(default_factory=default_augmentations)
    mean: tuple[float, float, float] = DEFAULT_MEAN
    std: tuple[float, float, float] = DEFAULT_STD
    train_mode: bool = False
    strict_resolution: bool = True

    def __post_init__(self):
        if self.strict_resolution and self.resolution not in RESOLUTIONS:
            raise DataError(
                f"resolution must be one of {RESOLUTIONS}, got {self.resolution} "
                "(set strict_resolution=False for toy scales)")
        if self.resolution < 32:
            raise DataError("resolution too small")
        object.__setattr__(self, "augmentations", tuple(self.augmentations))

    def eval_variant(self) -> "PreprocessConfig":
        if not self.train_mode:
            return self
        return PreprocessConfig(resolution=self.resolution,
                                augmentations=self.augmentations,
                                mean=self.mean, std=self.std, train_mode=False,
                                strict_resolution=self.strict_resolution)

    def to_dict(self) -> dict:
        return {
            "resolution": self.resolution,
            "augmentations": [a.to_dict() for a in self.augmentations],
            "mean": list(self.mean),
            "std": list(self.std),
            "train_mode": self.train_mode,
            "strict_resolution": self.strict_resolution,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PreprocessConfig":
        d = dict(d)
        d["augmentations"] = tuple(Augmentation.from_dict(a)
                                   for a in d.get("augmentations", []))
        d["mean"] = tuple(d.get("mean", DEFAULT_MEAN))
        d["std"] = tuple(d.get("std", DEFAULT_STD))
        return cls(**d)


def _check_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DataError(f"expected H x W x 3 image, got shape {image.shape}")
    if image.shape[0] < 32 or image.shape[1] < 32:
        raise DataError(f"image too small: {image.shape[:2]}")
    return image.astype(np.uint8, copy=False)


def _hflip(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(image[:, ::-1])


def _grayscale(image: np.ndarray) -> np.ndarray:
    gray = cv2.cvtColor(image, cv2.COLOR_RGB2GRAY)
    return np.repeat(gray[:, :, None], 3, axis=2)


def _blur(image: np.ndarray, kernel: int) -> np.ndarray:
    return cv2.GaussianBlur(image, (kernel, kernel), 0)


def _clahe(image: np.ndarray, clip_limit: float, tile_grid: int) -> np.ndarray:
    # equalize the lightness channel only, preserving chroma
    lab = cv2.cvtColor(image, cv2.COLOR_RGB2LAB)
    op = cv2.createCLAHE(clipLimit=clip_limit, tileGridSize=(tile_grid, tile_grid))
    lab[:, :, 0] = op.apply(lab[:, :, 0])
    return cv2.cvtColor(lab, cv2.COLOR_LAB2RGB)


def _apply_augmentations(image: np.ndarray, config: PreprocessConfig,
                         rng: np.random.Generator,
                         flip_sink: list | None = None) -> np.ndarray:
    for aug in config.augmentations:
        draw = rng.random()
        fire = draw < aug.p
        if aug.name == "horizontal_flip":
            if flip_sink is not None:
                flip_sink.append(fire)
            if fire:
                image = _hflip(image)
        elif fire:
            if aug.name == "grayscale":
                image = _grayscale(image)
            elif aug.name == "blur":
                image = _blur(image, aug.kernel)
            elif aug.name == "clahe":
                image = _clahe(image, aug.clip_limit, aug.tile_grid)
    return image


def normalize(image_u8: np.ndarray, mean, std) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float32)
    std = np.asarray(std, dtype=np.float32)
    return (image_u8.astype(np.float32) / 255.0 - mean) / std


def denormalize(array: np.ndarray, mean, std) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float32)
    std = np.asarray(std, dtype=np.float32)
    return array * std + mean


def preprocess(image: np.ndarray, config: PreprocessConfig,
               rng: np.random.Generator | None = None) -> np.ndarray:
    """Standardize one image to (resolution, resolution, 3) float32.

    Train mode draws augmentations from ``rng``; eval mode is deterministic
    and ignores it.
    """
    image = _check_image(image)
    res = config.resolution
    if image.shape[:2] != (res, res):
        image = cv2.resize(image, (res, res), interpolation=cv2.INTER_LINEAR)
    if config.train_mode:
        if rng is None:
            raise DataError("train-mode preprocessing requires an rng")
        image = _apply_augmentations(image, config, rng)
    return normalize(image, config.mean, config.std)


def preprocess_mask(mask: np.ndarray, resolution: int) -> np.ndarray:
    """Nearest-neighbor resample of a binary mask; output stays in {0, 1}."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise DataError(f"expected H x W mask, got shape {mask.shape}")
    if not np.isin(mask, (0, 1)).all():
        raise DataError("mask values must be 0/1")
    mask = mask.astype(np.uint8)
    if mask.shape != (resolution, resolution):
        mask = cv2.resize(mask, (resolution, resolution),
                          interpolation=cv2.INTER_NEAREST)
    return mask


def preprocess_pair(image: np.ndarray, mask: np.ndarray, config: PreprocessConfig,
                    rng: np.random.Generator | None = None
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Preprocess an image with its segmentation mask.

    Geometric augmentations share a single draw: a flip applied to the image
    is applied to the mask identically. Photometric augmentations touch the
    image only.
    """
    image = _check_image(image)
    mask_arr = np.asarray(mask)
    if mask_arr.shape[:2] != image.shape[:2]:
        raise DataError(
            f"mask shape {mask_arr.shape[:2]} does not match image {image.shape[:2]}")
    res = config.resolution
    if image.shape[:2] != (res, res):
        image = cv2.resize(image, (res, res), interpolation=cv2.INTER_LINEAR)
    mask_out = preprocess_mask(mask_arr, res)
    if config.train_mode:
        if rng is None:
            raise DataError("train-mode preprocessing requires an rng")
        flips: list = []
        image = _apply_augmentations(image, config, rng, flip_sink=flips)
        if sum(flips) % 2 == 1:
            mask_out = np.ascontiguousarray(mask_out[:, ::-1])
    return normalize(image, config.mean, config.std), mask_out

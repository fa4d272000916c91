"""Trainable keypoint-constellation filters over DoG responses.

A filter is configured from a single prototype image: thresholded DoG
responses are sampled on concentric circles around a reference point, and
angular local maxima become keypoints ``(rho, phi, sigma, polarity)``.
Applying a filter blurs each keypoint's DoG map (std grows with the radius),
shifts it so the keypoint lands on the reference point, and combines the
shifted maps with a pixel-wise geometric mean.  Rotation tolerance takes the
pixel-wise maximum over rotated filter versions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dog import DogParams, POLARITIES, dog_response_map, gaussian_blur, threshold_map
from .errors import (
    DataError,
    FilterConfigurationError,
    FormatVersionError,
    ZeroVectorError,
)
from .imaging import validate_image

ANGULAR_SAMPLES = 360

BANK_FORMAT = "cosfire-bank/1"

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class CosfireKeypoint:
    """One constellation point: circle radius, angle, DoG scale, polarity."""

    rho: float
    phi: float
    sigma: float
    polarity: str

    def __post_init__(self) -> None:
        if self.rho < 0:
            raise ValueError("rho must be non-negative")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.polarity not in POLARITIES:
            raise ValueError(f"polarity must be one of {POLARITIES}")


@dataclass(frozen=True)
class CosfireHyperparams:
    """Configuration-time and application-time filter settings."""

    sigma_bank: tuple[float, ...] = (3.0,)
    radii: tuple[float, ...] = (0.0, 10.0, 20.0)
    t1: float = 0.1
    sigma0_blur: float = 2.0
    alpha_blur: float = 0.1

    def __post_init__(self) -> None:
        object.__setattr__(self, "sigma_bank", tuple(float(s) for s in self.sigma_bank))
        object.__setattr__(self, "radii", tuple(float(r) for r in self.radii))
        if not self.sigma_bank or any(s <= 0 for s in self.sigma_bank):
            raise ValueError("sigma_bank must be non-empty with positive scales")
        if not self.radii or any(r < 0 for r in self.radii):
            raise ValueError("radii must be non-empty with non-negative values")
        if not 0.0 <= self.t1 <= 1.0:
            raise ValueError("t1 must lie in [0, 1]")
        if self.sigma0_blur <= 0:
            raise ValueError("sigma0_blur must be positive")
        if self.alpha_blur < 0:
            raise ValueError("alpha_blur must be non-negative")


@dataclass(frozen=True)
class CosfireFilter:
    """An ordered keypoint set plus the hyperparameters that built it.

    ``rotation`` accumulates ``rotate_filter`` offsets so that composing
    rotations is exact; effective angles are reduced modulo 2*pi only when
    the keypoints are read back.
    """

    keypoints: tuple[CosfireKeypoint, ...]
    hyperparams: CosfireHyperparams
    rotation: float = 0.0

    def __post_init__(self) -> None:
        if not self.keypoints:
            raise ValueError("a filter needs at least one keypoint")

    def __len__(self) -> int:
        return len(self.keypoints)

    def oriented_keypoints(self) -> tuple[CosfireKeypoint, ...]:
        """Keypoints with the accumulated rotation folded into each angle."""
        if self.rotation == 0.0:
            return self.keypoints
        return tuple(
            replace(kp, phi=(kp.phi + self.rotation) % TWO_PI) for kp in self.keypoints
        )


def rotate_filter(flt: CosfireFilter, psi: float) -> CosfireFilter:
    """Rotate a filter by ``psi`` radians; composing offsets is exact."""
    return replace(flt, rotation=flt.rotation + psi)


def l2_normalize(vec: np.ndarray) -> np.ndarray:
    """Scale a vector to unit Euclidean norm."""
    arr = np.asarray(vec, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("vector contains non-finite values")
    norm = np.linalg.norm(arr)
    if norm == 0.0:
        raise ZeroVectorError("cannot normalize a zero vector")
    return arr / norm


class ResponseCache:
    """Memoizes per-image DoG maps and their blurred variants.

    One cache serves every filter and rotation applied to the same image;
    blurred maps depend only on (sigma, polarity, t1, blur_std), so rotated
    filter versions reuse them.
    """

    def __init__(self, img: np.ndarray) -> None:
        self.image = validate_image(img)
        self._thresholded: dict[tuple, np.ndarray] = {}
        self._blurred: dict[tuple, np.ndarray] = {}

    def thresholded_dog(self, sigma: float, polarity: str, t1: float) -> np.ndarray:
        key = (float(sigma), polarity, float(t1))
        if key not in self._thresholded:
            raw = dog_response_map(self.image, DogParams(sigma, polarity))
            self._thresholded[key] = threshold_map(raw, t1)
        return self._thresholded[key]

    def blurred(self, sigma: float, polarity: str, t1: float, blur_std: float) -> np.ndarray:
        key = (float(sigma), polarity, float(t1), float(blur_std))
        if key not in self._blurred:
            base = self.thresholded_dog(sigma, polarity, t1)
            self._blurred[key] = gaussian_blur(base, blur_std)
        return self._blurred[key]


def _bilinear_sample(grid: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear interpolation; points outside the grid sample as zero."""
    height, width = grid.shape
    out = np.zeros(np.shape(xs), dtype=np.float64)
    inside = (xs >= 0) & (xs <= width - 1) & (ys >= 0) & (ys <= height - 1)
    if not np.any(inside):
        return out
    x = np.asarray(xs, dtype=np.float64)[inside]
    y = np.asarray(ys, dtype=np.float64)[inside]
    x0 = np.clip(np.floor(x).astype(int), 0, max(width - 2, 0))
    y0 = np.clip(np.floor(y).astype(int), 0, max(height - 2, 0))
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    fx = x - x0
    fy = y - y0
    values = (
        grid[y0, x0] * (1 - fx) * (1 - fy)
        + grid[y0, x1] * fx * (1 - fy)
        + grid[y1, x0] * (1 - fx) * fy
        + grid[y1, x1] * fx * fy
    )
    out[inside] = values
    return out


def configure_filter(
    prototype: np.ndarray,
    center: tuple[float, float],
    hyperparams: CosfireHyperparams,
) -> CosfireFilter:
    """Detect keypoints on concentric circles of a prototype image.

    For each radius the thresholded DoG responses of every (sigma, polarity)
    pair are sampled at 360 angles around ``center``; angular local maxima of
    the per-angle best response become keypoints, keeping the (sigma,
    polarity) that won there.  Maxima below ``t1`` of the circle's peak are
    suppressed.  Radius zero contributes a single keypoint at phi = 0 when
    the center responds.
    """
    img = validate_image(prototype)
    height, width = img.shape
    cx, cy = float(center[0]), float(center[1])
    if not (0 <= cx <= width - 1 and 0 <= cy <= height - 1):
        raise ValueError(f"center {center} lies outside the image")
    hp = hyperparams
    pairs = [(s, pol) for s in sorted(hp.sigma_bank) for pol in POLARITIES]
    maps = [
        threshold_map(dog_response_map(img, DogParams(s, pol)), hp.t1)
        for s, pol in pairs
    ]
    keypoints: list[CosfireKeypoint] = []
    for rho in sorted(hp.radii):
        if rho == 0.0:
            values = np.array(
                [_bilinear_sample(m, np.array([cx]), np.array([cy]))[0] for m in maps]
            )
            best = int(np.argmax(values))
            if values[best] > 0.0:
                sigma, polarity = pairs[best]
                keypoints.append(CosfireKeypoint(0.0, 0.0, sigma, polarity))
            continue
        angles = TWO_PI * np.arange(ANGULAR_SAMPLES) / ANGULAR_SAMPLES
        xs = cx + rho * np.cos(angles)
        ys = cy + rho * np.sin(angles)
        sampled = np.stack([_bilinear_sample(m, xs, ys) for m in maps])
        profile = sampled.max(axis=0)
        winner = sampled.argmax(axis=0)
        peak = profile.max()
        if peak <= 0.0:
            continue
        is_max = (
            (profile > np.roll(profile, 1))
            & (profile > np.roll(profile, -1))
            & (profile >= hp.t1 * peak)
        )
        for a in np.nonzero(is_max)[0]:
            sigma, polarity = pairs[winner[a]]
            keypoints.append(CosfireKeypoint(float(rho), float(angles[a]), sigma, polarity))
    if not keypoints:
        raise FilterConfigurationError(
            "prototype yields no keypoints on any configured circle"
        )
    return CosfireFilter(tuple(keypoints), hp)


def _shift_map(grid: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Translate a map by whole pixels, filling uncovered cells with zero."""
    height, width = grid.shape
    out = np.zeros_like(grid)
    if abs(dx) >= width or abs(dy) >= height:
        return out
    out[
        max(0, dy) : min(height, height + dy),
        max(0, dx) : min(width, width + dx),
    ] = grid[
        max(0, -dy) : min(height, height - dy),
        max(0, -dx) : min(width, width - dx),
    ]
    return out


def filter_response_map(
    img: np.ndarray,
    flt: CosfireFilter,
    cache: ResponseCache | None = None,
) -> np.ndarray:
    """Pixel-wise geometric mean of blurred, recentred keypoint responses.

    Each keypoint's thresholded DoG map is blurred with std
    ``sigma0_blur + alpha_blur * rho`` and shifted by
    ``(-rho cos phi, -rho sin phi)`` rounded to whole pixels, so evidence at
    the keypoint's offset is read at the reference point.
    """
    if cache is None:
        cache = ResponseCache(img)
    hp = flt.hyperparams
    kps = flt.oriented_keypoints()
    n = len(kps)
    acc: np.ndarray | None = None
    for kp in kps:
        blur_std = hp.sigma0_blur + hp.alpha_blur * kp.rho
        blurred = cache.blurred(kp.sigma, kp.polarity, hp.t1, blur_std)
        dx = int(np.rint(-kp.rho * np.cos(kp.phi)))
        dy = int(np.rint(-kp.rho * np.sin(kp.phi)))
        shifted = _shift_map(blurred, dx, dy)
        factor = shifted if n == 1 else np.power(shifted, 1.0 / n)
        acc = factor.copy() if acc is None else acc * factor
    assert acc is not None
    return acc


def rotation_tolerant_response(
    img: np.ndarray,
    flt: CosfireFilter,
    orientations: tuple[float, ...],
    cache: ResponseCache | None = None,
) -> np.ndarray:
    """Pixel-wise maximum of the filter response over rotated versions."""
    if len(orientations) == 0:
        raise ValueError("orientations must be non-empty")
    if cache is None:
        cache = ResponseCache(img)
    acc: np.ndarray | None = None
    for psi in orientations:
        response = filter_response_map(img, rotate_filter(flt, psi), cache)
        acc = response if acc is None else np.maximum(acc, response)
    assert acc is not None
    return acc


@dataclass(frozen=True)
class FilterBank:
    """A fixed sequence of filters applied with shared orientations."""

    filters: tuple[CosfireFilter, ...]
    orientations: tuple[float, ...]
    labels: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        object.__setattr__(self, "filters", tuple(self.filters))
        object.__setattr__(
            self, "orientations", tuple(float(o) for o in self.orientations)
        )
        object.__setattr__(self, "labels", tuple(self.labels))
        if not self.filters:
            raise ValueError("filter bank must contain at least one filter")
        if not self.orientations:
            raise ValueError("orientations must be non-empty")
        if self.labels and len(self.labels) != len(self.filters):
            raise ValueError("labels, when given, must match the filter count")

    def __len__(self) -> int:
        return len(self.filters)


def default_orientations(count: int = 12) -> tuple[float, ...]:
    """``count`` evenly spaced rotation offsets covering the full circle."""
    if count < 1:
        raise ValueError("orientation count must be positive")
    return tuple(TWO_PI * k / count for k in range(count))


def compute_descriptor(
    img: np.ndarray,
    bank: FilterBank,
    cache: ResponseCache | None = None,
) -> np.ndarray:
    """Unit-norm vector of global maxima of rotation-tolerant responses."""
    if cache is None:
        cache = ResponseCache(img)
    raw = np.array(
        [
            rotation_tolerant_response(img, flt, bank.orientations, cache).max()
            for flt in bank.filters
        ]
    )
    if not raw.any():
        raise ZeroVectorError("image produced an all-zero descriptor")
    return l2_normalize(raw)


# ---------------------------------------------------------------------------
# Bank serialization (JSON)
# ---------------------------------------------------------------------------


def save_bank(path: Path, bank: FilterBank) -> None:
    """Write a filter bank as deterministic JSON."""
    doc = {
        "format": BANK_FORMAT,
        "orientations": list(bank.orientations),
        "filters": [
            {
                "label": bank.labels[i] if bank.labels else None,
                "hyperparams": {
                    "sigma_bank": list(flt.hyperparams.sigma_bank),
                    "radii": list(flt.hyperparams.radii),
                    "t1": flt.hyperparams.t1,
                    "sigma0_blur": flt.hyperparams.sigma0_blur,
                    "alpha_blur": flt.hyperparams.alpha_blur,
                },
                "tuples": [
                    [kp.rho, kp.phi, kp.sigma, kp.polarity]
                    for kp in flt.oriented_keypoints()
                ],
            }
            for i, flt in enumerate(bank.filters)
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True), encoding="utf-8")


def load_bank(path: Path) -> FilterBank:
    """Read a filter bank written by :func:`save_bank`."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read filter bank {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != BANK_FORMAT:
        raise FormatVersionError(f"{path}: not a {BANK_FORMAT} document")
    try:
        filters = []
        labels = []
        for item in doc["filters"]:
            hp = CosfireHyperparams(**item["hyperparams"])
            kps = tuple(
                CosfireKeypoint(float(r), float(p), float(s), str(pol))
                for r, p, s, pol in item["tuples"]
            )
            filters.append(CosfireFilter(kps, hp))
            labels.append(item.get("label"))
        orientations = tuple(float(o) for o in doc["orientations"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: malformed filter bank: {exc}") from exc
    named = tuple(str(l) for l in labels) if all(l is not None for l in labels) else ()
    return FilterBank(tuple(filters), orientations, named)

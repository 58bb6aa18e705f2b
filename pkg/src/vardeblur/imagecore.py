"""Grid types, bilinear sampling, derivatives and image pyramids.

Arrays are indexed ``[row, column]`` (``[y, x]``). Images carry a trailing
channel axis, flow fields keep the horizontal (``u``) and vertical (``v``)
displacements as two separate planes.
"""

import logging
from dataclasses import dataclass
from dataclasses import field
from typing import List
from typing import Sequence
from typing import Tuple

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.ndimage import map_coordinates

from .constants import MIN_PYRAMID_DIM
from .constants import PYRAMID_PREFILTER_FACTOR
from .exceptions import ConfigError
from .exceptions import DimensionMismatchError

logger = logging.getLogger(__name__)


def _frozen(array: np.ndarray) -> np.ndarray:
    view = array.view()
    view.flags.writeable = False
    return view


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


@dataclass(frozen=True)
class Image:
    """Single- or three-channel intensity grid, stored as (height, width, channels)."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or data.shape[2] not in (1, 3):
            raise DimensionMismatchError(
                f"Image data must be (H, W), (H, W, 1) or (H, W, 3), got {data.shape}"
            )
        if not np.all(np.isfinite(data)):
            raise ValueError("Image data contains NaN or Inf")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.height, self.width

    def luminance(self) -> np.ndarray:
        return luminance(self.data)

    @classmethod
    def constant(
        cls, width: int, height: int, value: float, channels: int = 1
    ) -> "Image":
        return cls(np.full((height, width, channels), float(value)))


@dataclass(frozen=True)
class FlowField:
    """Per-pixel displacement in pixels: u is horizontal, v is vertical."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.u, dtype=np.float64)
        v = np.asarray(self.v, dtype=np.float64)
        if u.ndim != 2 or u.shape != v.shape:
            raise DimensionMismatchError(
                f"Flow components must be equal 2-D grids, got {u.shape} and {v.shape}"
            )
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise ValueError("Flow field contains NaN or Inf")
        object.__setattr__(self, "u", _frozen(u))
        object.__setattr__(self, "v", _frozen(v))

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def width(self) -> int:
        return self.u.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.u.shape

    def as_array(self) -> np.ndarray:
        """Stacked (H, W, 2) array of (u, v)."""
        return np.stack([self.u, self.v], axis=-1)

    def __neg__(self) -> "FlowField":
        return FlowField(-self.u, -self.v)

    @classmethod
    def from_array(cls, array: np.ndarray) -> "FlowField":
        array = np.asarray(array)
        if array.ndim != 3 or array.shape[2] != 2:
            raise DimensionMismatchError(f"Expected (H, W, 2) array, got {array.shape}")
        return cls(array[:, :, 0], array[:, :, 1])

    @classmethod
    def zeros(cls, width: int, height: int) -> "FlowField":
        return cls(np.zeros((height, width)), np.zeros((height, width)))

    @classmethod
    def uniform(cls, width: int, height: int, u: float, v: float) -> "FlowField":
        shape = (height, width)
        return cls(np.full(shape, float(u)), np.full(shape, float(v)))


@dataclass(frozen=True)
class SigmaMap:
    """Per-pixel standard deviation (pixels) of the defocus Gaussian."""

    sigma: np.ndarray

    def __post_init__(self):
        sigma = np.asarray(self.sigma, dtype=np.float64)
        if sigma.ndim != 2:
            raise DimensionMismatchError(f"Sigma map must be 2-D, got {sigma.shape}")
        if not np.all(np.isfinite(sigma)):
            raise ValueError("Sigma map contains NaN or Inf")
        if np.any(sigma < 0):
            raise ValueError("Sigma map must be non-negative")
        object.__setattr__(self, "sigma", _frozen(sigma))

    @property
    def height(self) -> int:
        return self.sigma.shape[0]

    @property
    def width(self) -> int:
        return self.sigma.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.sigma.shape

    @classmethod
    def constant(cls, width: int, height: int, value: float) -> "SigmaMap":
        return cls(np.full((height, width), float(value)))


@dataclass
class PyramidLevel:
    frames: List[Image]
    scale: float

    @property
    def width(self) -> int:
        return self.frames[0].width

    @property
    def height(self) -> int:
        return self.frames[0].height


@dataclass
class Pyramid:
    """Pyramid levels ordered from the coarsest to the finest."""

    levels: List[PyramidLevel] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.levels)

    def __getitem__(self, index: int) -> PyramidLevel:
        return self.levels[index]

    def __iter__(self):
        return iter(self.levels)

    @property
    def finest(self) -> PyramidLevel:
        return self.levels[-1]

    @property
    def coarsest(self) -> PyramidLevel:
        return self.levels[0]


def luminance(data: np.ndarray) -> np.ndarray:
    """Mean over channels of an (H, W, C) array; 2-D arrays pass through."""
    if data.ndim == 2:
        return data
    return data.mean(axis=2)


# ============================================================================
# Bilinear sampling
# ============================================================================


class BilinearSampler:
    """
    Precomputed bilinear lookup at positions x + (u, v).

    Positions outside the image are clamped to the border for sampling and
    flagged in ``valid``. ``scatter`` is the exact adjoint of ``sample``.
    """

    def __init__(self, u: np.ndarray, v: np.ndarray):
        height, width = u.shape
        self.height = height
        self.width = width
        rows, cols = np.mgrid[0:height, 0:width]
        x = cols + u
        y = rows + v
        self.valid = (x >= 0) & (x <= width - 1) & (y >= 0) & (y <= height - 1)
        x = np.clip(x, 0, width - 1)
        y = np.clip(y, 0, height - 1)
        x0 = np.floor(x)
        y0 = np.floor(y)
        self.fx = x - x0
        self.fy = y - y0
        self.x0 = x0.astype(np.intp)
        self.y0 = y0.astype(np.intp)
        self.x1 = np.minimum(self.x0 + 1, width - 1)
        self.y1 = np.minimum(self.y0 + 1, height - 1)
        self.w00 = (1 - self.fx) * (1 - self.fy)
        self.w10 = self.fx * (1 - self.fy)
        self.w01 = (1 - self.fx) * self.fy
        self.w11 = self.fx * self.fy

    def _corners(self):
        return (
            (self.y0, self.x0, self.w00),
            (self.y0, self.x1, self.w10),
            (self.y1, self.x0, self.w01),
            (self.y1, self.x1, self.w11),
        )

    @staticmethod
    def _expand(weights: np.ndarray, array: np.ndarray) -> np.ndarray:
        return weights[:, :, None] if array.ndim == 3 else weights

    def sample(self, array: np.ndarray) -> np.ndarray:
        out = np.zeros(array.shape, dtype=np.float64)
        for rows, cols, w in self._corners():
            out += self._expand(w, array) * array[rows, cols]
        return out

    def sample_with_gradient(
        self, array: np.ndarray
    ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Sampled values and the x/y derivatives of the bilinear interpolant."""
        i00 = array[self.y0, self.x0]
        i10 = array[self.y0, self.x1]
        i01 = array[self.y1, self.x0]
        i11 = array[self.y1, self.x1]
        fx = self._expand(self.fx, array)
        fy = self._expand(self.fy, array)
        value = (1 - fx) * (1 - fy) * i00 + fx * (1 - fy) * i10
        value = value + (1 - fx) * fy * i01 + fx * fy * i11
        grad_x = (1 - fy) * (i10 - i00) + fy * (i11 - i01)
        grad_y = (1 - fx) * (i01 - i00) + fx * (i11 - i10)
        return value, grad_x, grad_y

    def scatter(self, values: np.ndarray) -> np.ndarray:
        """Adjoint of ``sample``: spread each value onto its four source pixels."""
        size = self.height * self.width
        if values.ndim == 2:
            values = values[:, :, None]
            squeeze = True
        else:
            squeeze = False
        out = np.zeros((size, values.shape[2]))
        for rows, cols, w in self._corners():
            flat = (rows * self.width + cols).ravel()
            for c in range(values.shape[2]):
                out[:, c] += np.bincount(
                    flat, weights=(w * values[:, :, c]).ravel(), minlength=size
                )
        out = out.reshape(self.height, self.width, values.shape[2])
        return out[:, :, 0] if squeeze else out


def _check_same_shape(a: Tuple[int, ...], b: Tuple[int, ...], what: str) -> None:
    if tuple(a) != tuple(b):
        raise DimensionMismatchError(f"{what}: {tuple(a)} != {tuple(b)}")


def warp_array(
    array: np.ndarray, u: np.ndarray, v: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    _check_same_shape(array.shape[:2], u.shape, "Warp dimension mismatch")
    sampler = BilinearSampler(u, v)
    return sampler.sample(array), sampler.valid


def warp_bilinear(img: Image, flow: FlowField) -> Tuple[Image, np.ndarray]:
    """
    Sample ``img`` at x + flow(x).

    Returns:
        The warped image and a boolean validity mask that is False wherever
        x + flow(x) leaves the image rectangle (those samples clamp to the
        border).
    """
    _check_same_shape(img.shape, flow.shape, "Warp dimension mismatch")
    warped, valid = warp_array(img.data, flow.u, flow.v)
    return Image(warped), valid


# ============================================================================
# Derivatives
# ============================================================================


def forward_difference(array: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Forward differences with a zero last column (dx) / last row (dy)."""
    dx = np.zeros_like(array, dtype=np.float64)
    dy = np.zeros_like(array, dtype=np.float64)
    dx[:, :-1] = array[:, 1:] - array[:, :-1]
    dy[:-1, :] = array[1:, :] - array[:-1, :]
    return dx, dy


def forward_difference_adjoint(dx: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Transpose of ``forward_difference``: the negative backward divergence."""
    out = np.zeros_like(dx, dtype=np.float64)
    out[:, :-1] -= dx[:, :-1]
    out[:, 1:] += dx[:, :-1]
    out[:-1, :] -= dy[:-1, :]
    out[1:, :] += dy[:-1, :]
    return out


def spatial_gradient(img: Image) -> Tuple[Image, Image]:
    dx, dy = forward_difference(img.data)
    return Image(dx), Image(dy)


# ============================================================================
# Resampling and pyramids
# ============================================================================


def resize_array(array: np.ndarray, new_height: int, new_width: int) -> np.ndarray:
    """Bilinear resize with pixel-centre alignment and border clamping."""
    height, width = array.shape[:2]
    if (height, width) == (new_height, new_width):
        return np.array(array, dtype=np.float64)
    rows = (np.arange(new_height) + 0.5) * (height / new_height) - 0.5
    cols = (np.arange(new_width) + 0.5) * (width / new_width) - 0.5
    rows = np.clip(rows, 0, height - 1)
    cols = np.clip(cols, 0, width - 1)
    coords = np.meshgrid(rows, cols, indexing="ij")
    if array.ndim == 2:
        return map_coordinates(array, coords, order=1, mode="nearest")
    out = np.empty((new_height, new_width, array.shape[2]))
    for c in range(array.shape[2]):
        out[:, :, c] = map_coordinates(array[:, :, c], coords, order=1, mode="nearest")
    return out


def resample_image(img: Image, new_w: int, new_h: int) -> Image:
    return Image(resize_array(img.data, new_h, new_w))


def resample_sigma(sigma: SigmaMap, new_w: int, new_h: int) -> SigmaMap:
    """Bilinear resample of a blur map; values are not rescaled."""
    return SigmaMap(np.maximum(resize_array(sigma.sigma, new_h, new_w), 0.0))


def resample_flow(flow: FlowField, new_w: int, new_h: int) -> FlowField:
    """Bilinear resample, with displacements scaled to the new resolution."""
    if new_w < 1 or new_h < 1:
        raise ConfigError(f"Invalid flow size {new_w}x{new_h}")
    if (new_h, new_w) == flow.shape:
        return flow
    u = resize_array(flow.u, new_h, new_w) * (new_w / flow.width)
    v = resize_array(flow.v, new_h, new_w) * (new_h / flow.height)
    return FlowField(u, v)


def level_dims(width: int, height: int, scale: float, level: int) -> Tuple[int, int]:
    factor = scale**level
    return _round_half_up(width * factor), _round_half_up(height * factor)


def build_pyramid(frames: Sequence[Image], num_levels: int, scale: float) -> Pyramid:
    """
    Build a coarse-to-fine pyramid of a frame sequence.

    Each coarser level is Gaussian-prefiltered (std 0.5/scale) from the next
    finer one and bilinearly resized to round(full size * scale**level).
    Levels whose smaller side would drop below MIN_PYRAMID_DIM are skipped.
    """
    if not frames:
        raise ConfigError("Cannot build a pyramid from an empty sequence")
    if num_levels < 1:
        raise ConfigError(f"num_levels must be >= 1, got {num_levels}")
    if not 0 < scale < 1:
        raise ConfigError(f"Pyramid scale must be in (0, 1), got {scale}")
    first = frames[0]
    for frame in frames[1:]:
        _check_same_shape(frame.data.shape, first.data.shape, "Frame size mismatch")

    levels = [PyramidLevel(frames=list(frames), scale=1.0)]
    prefilter = PYRAMID_PREFILTER_FACTOR / scale
    for index in range(1, num_levels):
        new_w, new_h = level_dims(first.width, first.height, scale, index)
        if min(new_w, new_h) < MIN_PYRAMID_DIM:
            logger.debug(
                "Pyramid stops at %d levels (next would be %dx%d)",
                index,
                new_w,
                new_h,
            )
            break
        coarser = []
        for frame in levels[-1].frames:
            smoothed = gaussian_filter(
                frame.data, sigma=(prefilter, prefilter, 0), mode="nearest"
            )
            coarser.append(Image(resize_array(smoothed, new_h, new_w)))
        levels.append(PyramidLevel(frames=coarser, scale=scale**index))
    levels.reverse()
    return Pyramid(levels=levels)


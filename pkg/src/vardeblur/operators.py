"""
Matrix-free linear operators: motion blur, defocus blur, derivatives.

Every operator acts on arrays whose leading axes match ``in_shape``; an
optional trailing channel axis is carried through unchanged, so one
operator serves grayscale and colour frames alike.
"""

import logging
from abc import ABC
from abc import abstractmethod
from typing import Dict
from typing import Iterator
from typing import Tuple

import numpy as np

from .constants import GAUSSIAN_TRUNCATION
from .constants import POWER_ITERATIONS
from .constants import RASTER_BAND_ROWS
from .constants import SIGMA_IDENTITY_THRESHOLD
from .exceptions import ConfigError
from .exceptions import DimensionMismatchError
from .imagecore import FlowField
from .imagecore import Image
from .imagecore import SigmaMap
from .imagecore import forward_difference
from .imagecore import forward_difference_adjoint
from .utils import parallel_map

logger = logging.getLogger(__name__)

Shape = Tuple[int, ...]


class LinearOperator(ABC):
    """Linear map with an explicit adjoint."""

    in_shape: Shape
    out_shape: Shape

    @abstractmethod
    def apply(self, array: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    @abstractmethod
    def adjoint(self, array: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def apply_image(self, img: Image) -> Image:
        return Image(self.apply(img.data))

    def adjoint_image(self, img: Image) -> Image:
        return Image(self.adjoint(img.data))

    def _check_input(self, array: np.ndarray, expected: Shape) -> None:
        if tuple(array.shape[: len(expected)]) != tuple(expected):
            raise DimensionMismatchError(
                f"{type(self).__name__} expects leading shape {expected}, "
                f"got {array.shape}"
            )


class IdentityOp(LinearOperator):
    def __init__(self, shape: Shape):
        self.in_shape = tuple(shape)
        self.out_shape = tuple(shape)

    def apply(self, array: np.ndarray) -> np.ndarray:
        self._check_input(array, self.in_shape)
        return np.array(array, dtype=np.float64)

    def adjoint(self, array: np.ndarray) -> np.ndarray:
        return self.apply(array)


class GradientOp(LinearOperator):
    """Forward differences; output stacks (dx, dy) on a new leading axis."""

    def __init__(self, shape: Shape):
        self.in_shape = tuple(shape)
        self.out_shape = (2,) + self.in_shape

    def apply(self, array: np.ndarray) -> np.ndarray:
        self._check_input(array, self.in_shape)
        return np.stack(forward_difference(array))

    def adjoint(self, array: np.ndarray) -> np.ndarray:
        self._check_input(array, self.out_shape)
        return forward_difference_adjoint(array[0], array[1])


class ComposedOp(LinearOperator):
    """``outer`` applied after ``inner``."""

    def __init__(self, outer: LinearOperator, inner: LinearOperator):
        self.outer = outer
        self.inner = inner
        self.in_shape = inner.in_shape
        self.out_shape = outer.out_shape

    def apply(self, array: np.ndarray) -> np.ndarray:
        return self.outer.apply(self.inner.apply(array))

    def adjoint(self, array: np.ndarray) -> np.ndarray:
        return self.inner.adjoint(self.outer.adjoint(array))


def compose(a: LinearOperator, b: LinearOperator) -> LinearOperator:
    """Operator for ``a(b(x))``."""
    if tuple(b.out_shape) != tuple(a.in_shape):
        raise DimensionMismatchError(
            f"Cannot compose: inner output {b.out_shape} != outer input {a.in_shape}"
        )
    return ComposedOp(a, b)


# ============================================================================
# Spatially varying stencils
# ============================================================================


class StencilOperator(LinearOperator):
    """
    Per-pixel weighted gather ``y(x) = sum_k w_k(x) * img(x + offset_k)``.

    Weights of taps that would leave the image are zero, so the edge padding
    used for slicing never contributes. The adjoint is the matching
    slice-wise scatter, accumulated in a fixed order.
    """

    def __init__(self, offsets: np.ndarray, weights: np.ndarray):
        offsets = np.asarray(offsets, dtype=np.intp).reshape(-1, 2)
        weights = np.asarray(weights, dtype=np.float64)
        if weights.ndim != 3 or weights.shape[0] != offsets.shape[0]:
            raise DimensionMismatchError(
                f"Expected {offsets.shape[0]} weight planes, got {weights.shape}"
            )
        self.offsets = offsets
        self.weights = weights
        self.in_shape = tuple(weights.shape[1:])
        self.out_shape = self.in_shape

    @property
    def radius(self) -> int:
        if self.offsets.size == 0:
            return 0
        return int(np.abs(self.offsets).max())

    def _taps(self) -> Iterator[Tuple[int, int, np.ndarray]]:
        for (dy, dx), w in zip(self.offsets, self.weights):
            yield int(dy), int(dx), w

    def row(self, y: int, x: int) -> Dict[Tuple[int, int], float]:
        """Non-zero taps of one output pixel, keyed by (dx, dy)."""
        return {
            (dx, dy): float(w[y, x]) for dy, dx, w in self._taps() if w[y, x] != 0.0
        }

    def row_sums(self) -> np.ndarray:
        total = np.zeros(self.in_shape)
        for _, _, w in self._taps():
            total += w
        return total

    def min_weight(self) -> float:
        return min((float(w.min()) for _, _, w in self._taps()), default=0.0)

    def column_energy(self) -> np.ndarray:
        """Squared norm of every column, the diagonal of ``A^T A``."""
        height, width = self.in_shape
        r = self.radius
        acc = np.zeros((height + 2 * r, width + 2 * r))
        for dy, dx, w in self._taps():
            acc[r + dy : r + dy + height, r + dx : r + dx + width] += w * w
        return acc[r : r + height, r : r + width]

    def apply(self, array: np.ndarray) -> np.ndarray:
        self._check_input(array, self.in_shape)
        data = _with_channels(array)
        height, width = self.in_shape
        r = self.radius
        padded = np.pad(data, ((r, r), (r, r), (0, 0)), mode="edge")
        out = np.zeros(data.shape)
        for dy, dx, w in self._taps():
            window = padded[r + dy : r + dy + height, r + dx : r + dx + width]
            out += w[:, :, None] * window
        return out.reshape(array.shape)

    def adjoint(self, array: np.ndarray) -> np.ndarray:
        self._check_input(array, self.out_shape)
        data = _with_channels(array)
        height, width = self.in_shape
        r = self.radius
        acc = np.zeros((height + 2 * r, width + 2 * r, data.shape[2]))
        for dy, dx, w in self._taps():
            target = acc[r + dy : r + dy + height, r + dx : r + dx + width]
            target += w[:, :, None] * data
        return acc[r : r + height, r : r + width].reshape(array.shape)


def _with_channels(array: np.ndarray) -> np.ndarray:
    array = np.asarray(array, dtype=np.float64)
    return array[:, :, None] if array.ndim == 2 else array


def _clip_to_image(offsets: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Zero taps that land outside the image and renormalize every row."""
    _, height, width = weights.shape
    rows = np.arange(height)[None, :, None] + offsets[:, 0, None, None]
    cols = np.arange(width)[None, None, :] + offsets[:, 1, None, None]
    inside = (rows >= 0) & (rows < height) & (cols >= 0) & (cols < width)
    weights = weights * inside
    return weights / weights.sum(axis=0, keepdims=True)


# ============================================================================
# Motion blur
# ============================================================================


def _segment_nodes(
    ex: np.ndarray, ey: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Quadrature nodes for a uniform unit-half-mass density on [0, e].

    The segment is cut wherever it crosses an integer grid line. Inside each
    piece the bilinear hat weights are polynomials of degree two in the
    segment parameter, so a two-point Gauss rule integrates them exactly.
    """
    ax = np.abs(ex)
    ay = np.abs(ey)
    count_x = int(np.ceil(ax.max())) if ax.size else 0
    count_y = int(np.ceil(ay.max())) if ay.size else 0
    with np.errstate(divide="ignore"):
        tx = np.arange(1, count_x + 1)[None, :] / ax[:, None]
        ty = np.arange(1, count_y + 1)[None, :] / ay[:, None]
    edge = np.zeros((ex.size, 1))
    breaks = np.concatenate([edge, tx, ty, edge + 1.0], axis=1)
    breaks = np.sort(np.minimum(breaks, 1.0), axis=1)
    start = breaks[:, :-1]
    length = breaks[:, 1:] - start
    centre = start + 0.5 * length
    spread = length / (2.0 * np.sqrt(3.0))
    t = np.concatenate([centre - spread, centre + spread], axis=1)
    mass = 0.25 * np.concatenate([length, length], axis=1)
    return ex[:, None] * t, ey[:, None] * t, mass


def _rasterize(
    fwd_x: np.ndarray,
    fwd_y: np.ndarray,
    bwd_x: np.ndarray,
    bwd_y: np.ndarray,
    radius: int,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Sparse tap table of the two half-streaks.

    Returns:
        ``(keys, weights)``: the sorted offset keys actually touched (see
        _offset_keys) and a (len(keys), pixels) weight array. Memory grows
        with the offsets in use, not with the square of ``radius``.
    """
    pixels = fwd_x.size
    fx_nodes, fy_nodes, f_mass = _segment_nodes(fwd_x, fwd_y)
    bx_nodes, by_nodes, b_mass = _segment_nodes(bwd_x, bwd_y)
    px = np.concatenate([fx_nodes, bx_nodes], axis=1)
    py = np.concatenate([fy_nodes, by_nodes], axis=1)
    mass = np.concatenate([f_mass, b_mass], axis=1)

    x0 = np.floor(px)
    y0 = np.floor(py)
    ax = px - x0
    ay = py - y0
    x0 = x0.astype(np.intp)
    y0 = y0.astype(np.intp)
    owner = np.broadcast_to(np.arange(pixels)[:, None], px.shape)
    corners = (
        (y0, x0, (1 - ax) * (1 - ay)),
        (y0, x0 + 1, ax * (1 - ay)),
        (y0 + 1, x0, (1 - ax) * ay),
        (y0 + 1, x0 + 1, ax * ay),
    )
    keys = np.concatenate(
        [_offset_keys(rows, cols, radius).ravel() for rows, cols, _ in corners]
    )
    values = np.concatenate([(mass * w).ravel() for _, _, w in corners])
    owners = np.tile(owner.ravel(), len(corners))
    live = values > 0.0
    used, slot = np.unique(keys[live], return_inverse=True)
    weights = np.bincount(
        slot * pixels + owners[live],
        weights=values[live],
        minlength=used.size * pixels,
    )
    return used, weights.reshape(used.size, pixels)


def _offset_keys(dy: np.ndarray, dx: np.ndarray, radius: int) -> np.ndarray:
    span = 2 * radius + 1
    return (dy + radius) * span + (dx + radius)


def _key_offsets(keys: np.ndarray, radius: int) -> np.ndarray:
    span = 2 * radius + 1
    return np.stack([keys // span - radius, keys % span - radius], axis=1)


def _stencil_offsets(radius: int) -> np.ndarray:
    span = np.arange(-radius, radius + 1)
    dy, dx = np.meshgrid(span, span, indexing="ij")
    return np.stack([dy.ravel(), dx.ravel()], axis=1)


def _motion_radius(*components: np.ndarray) -> int:
    extent = max(float(np.abs(c).max()) if c.size else 0.0 for c in components)
    return int(np.ceil(extent)) + 1


def rasterize_motion_kernel(
    fwd_vec: Tuple[float, float], bwd_vec: Tuple[float, float], tau: float
) -> Dict[Tuple[int, int], float]:
    """
    Taps of the bidirectional motion kernel for one pixel.

    The kernel spreads half of the unit mass uniformly along [0, tau*fwd]
    and the other half along [0, tau*bwd]. The line density is integrated
    exactly against the bilinear interpolation hat of every grid pixel.

    Returns:
        Mapping from integer offset (dx, dy) to weight; weights are
        non-negative and sum to one.
    """
    _check_tau(tau)
    values = np.asarray(list(fwd_vec) + list(bwd_vec), dtype=np.float64)
    if values.shape != (4,) or not np.all(np.isfinite(values)):
        raise ConfigError(
            f"Motion vectors must be finite 2-vectors: {fwd_vec}, {bwd_vec}"
        )
    ends = [np.array([tau * v]) for v in values]
    radius = _motion_radius(*ends)
    keys, weights = _rasterize(ends[0], ends[1], ends[2], ends[3], radius)
    weights = weights[:, 0] / weights.sum()
    offsets = _key_offsets(keys, radius)
    return {
        (int(dx), int(dy)): float(w)
        for (dy, dx), w in zip(offsets, weights)
        if w > 0.0
    }


class MotionBlurOp(StencilOperator):
    """Per-pixel bidirectional linear motion blur."""

    def __init__(
        self,
        fwd: FlowField,
        bwd: FlowField,
        tau: float,
        offsets: np.ndarray,
        weights: np.ndarray,
    ):
        super().__init__(offsets, weights)
        self.fwd = fwd
        self.bwd = bwd
        self.tau = tau


def _check_tau(tau: float) -> None:
    if not np.isfinite(tau) or not 0.0 <= tau <= 1.0:
        raise ConfigError(f"Duty cycle tau must be in [0, 1], got {tau}")


def build_motion_blur_op(fwd: FlowField, bwd: FlowField, tau: float) -> MotionBlurOp:
    """
    Rasterize the motion kernel of every pixel.

    Taps falling outside the image are dropped and each row renormalized.
    Stencil offsets that carry no weight anywhere are discarded.
    """
    if fwd.shape != bwd.shape:
        raise DimensionMismatchError(
            f"Forward/backward flow mismatch: {fwd.shape} != {bwd.shape}"
        )
    _check_tau(tau)
    height, width = fwd.shape
    comps = [tau * fwd.u, tau * fwd.v, tau * bwd.u, tau * bwd.v]
    radius = _motion_radius(*comps)

    bands = [
        slice(start, min(start + RASTER_BAND_ROWS, height))
        for start in range(0, height, RASTER_BAND_ROWS)
    ]

    def rasterize_band(band: slice) -> Tuple[np.ndarray, np.ndarray]:
        c = [comp[band].ravel() for comp in comps]
        return _rasterize(c[0], c[1], c[2], c[3], radius)

    tables = parallel_map(rasterize_band, bands)
    keys = np.unique(np.concatenate([band_keys for band_keys, _ in tables]))
    weights = np.zeros((keys.size, height * width))
    start = 0
    for band_keys, band_weights in tables:
        stop = start + band_weights.shape[1]
        weights[np.searchsorted(keys, band_keys), start:stop] = band_weights
        start = stop
    offsets = _key_offsets(keys, radius)
    weights = _clip_to_image(offsets, weights.reshape(-1, height, width))
    used = weights.reshape(len(offsets), -1).any(axis=1)
    logger.debug(
        "Motion blur stencil: radius %d, %d of %d offsets used",
        radius,
        int(used.sum()),
        len(offsets),
    )
    return MotionBlurOp(fwd, bwd, tau, offsets[used], weights[used])


# ============================================================================
# Defocus blur
# ============================================================================


class DefocusOp(StencilOperator):
    """
    Spatially varying Gaussian blur.

    The 2-D weights of each pixel factor into a horizontal and a vertical
    1-D profile, so only those profiles are stored and tap planes are formed
    on demand.
    """

    def __init__(
        self,
        sigma_map: SigmaMap,
        radius: int,
        horizontal: np.ndarray,
        vertical: np.ndarray,
    ):
        self.sigma_map = sigma_map
        self._radius = radius
        self.horizontal = horizontal
        self.vertical = vertical
        self.offsets = _stencil_offsets(radius)
        self.in_shape = sigma_map.shape
        self.out_shape = self.in_shape

    @property
    def radius(self) -> int:
        return self._radius

    def _all_taps(self) -> Iterator[Tuple[int, int, np.ndarray]]:
        span = range(-self._radius, self._radius + 1)
        for iy, dy in enumerate(span):
            for ix, dx in enumerate(span):
                yield dy, dx, self.vertical[iy] * self.horizontal[ix]

    def _taps(self) -> Iterator[Tuple[int, int, np.ndarray]]:
        for dy, dx, w in self._all_taps():
            if w.any():
                yield dy, dx, w


def _gaussian_profile(
    sigma: np.ndarray, radius: int, positions: np.ndarray, length: int
) -> np.ndarray:
    """Normalized, truncated, border-clipped 1-D Gaussian per pixel."""
    d = np.arange(-radius, radius + 1, dtype=np.float64)[:, None, None]
    active = sigma >= SIGMA_IDENTITY_THRESHOLD
    safe = np.where(active, sigma, 1.0)
    reach = np.where(active, np.ceil(GAUSSIAN_TRUNCATION * safe), 0.0)
    profile = np.exp(-(d**2) / (2.0 * safe**2)) * (np.abs(d) <= reach)
    profile = np.where(active, profile, d == 0)
    target = positions + d
    profile = profile * ((target >= 0) & (target < length))
    return profile / profile.sum(axis=0, keepdims=True)


def build_defocus_op(sigma_map: SigmaMap) -> DefocusOp:
    """
    Gaussian blur with per-pixel std, truncated at ceil(3 sigma).

    Pixels with sigma below SIGMA_IDENTITY_THRESHOLD keep a single unit tap.
    """
    sigma = np.asarray(sigma_map.sigma)
    if np.any(sigma < 0):
        raise ConfigError("Defocus sigma must be non-negative")
    height, width = sigma.shape
    active = sigma >= SIGMA_IDENTITY_THRESHOLD
    radius = 0
    if active.any():
        radius = int(np.ceil(GAUSSIAN_TRUNCATION * sigma[active]).max())
    rows, cols = np.mgrid[0:height, 0:width]
    horizontal = _gaussian_profile(sigma, radius, cols[None], width)
    vertical = _gaussian_profile(sigma, radius, rows[None], height)
    return DefocusOp(sigma_map, radius, horizontal, vertical)


def build_blur_op(
    fwd: FlowField, bwd: FlowField, tau: float, sigma_map: SigmaMap
) -> LinearOperator:
    """The full per-frame blur ``K G``."""
    return compose(build_motion_blur_op(fwd, bwd, tau), build_defocus_op(sigma_map))


def blur_footprint_mask(
    fwd: FlowField, bwd: FlowField, tau: float, sigma_map: SigmaMap
) -> np.ndarray:
    """
    True where a pixel's whole blur footprint lies inside the image.

    The footprint is the motion streak from ``tau * bwd`` to ``tau * fwd``
    plus one bilinear pixel, widened by the pixel's own Gaussian reach.
    Outside this mask the clipped and renormalized kernels no longer model
    how the observation was formed.
    """
    if fwd.shape != bwd.shape or fwd.shape != sigma_map.shape:
        raise DimensionMismatchError(
            f"Footprint inputs differ: {fwd.shape}, {bwd.shape}, {sigma_map.shape}"
        )
    height, width = fwd.shape
    sigma = np.asarray(sigma_map.sigma)
    active = sigma >= SIGMA_IDENTITY_THRESHOLD
    reach = np.where(active, np.ceil(GAUSSIAN_TRUNCATION * sigma), 0.0)
    rows, cols = np.mgrid[0:height, 0:width]
    inside = np.ones((height, width), dtype=bool)
    ends = ((0.0, 0.0), (tau * fwd.u, tau * fwd.v), (tau * bwd.u, tau * bwd.v))
    for ex, ey in ends:
        end_x = cols + ex
        end_y = rows + ey
        inside &= np.floor(end_x) - reach >= 0
        inside &= np.ceil(end_x) + reach <= width - 1
        inside &= np.floor(end_y) - reach >= 0
        inside &= np.ceil(end_y) + reach <= height - 1
    return inside


def estimate_operator_norm(
    op: LinearOperator, iterations: int = POWER_ITERATIONS, seed: int = 0
) -> float:
    """
    Power-iteration estimate of the spectral norm.

    The estimate approaches the norm from below; callers that need an upper
    bound scale it up.
    """
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(op.in_shape)
    x /= np.linalg.norm(x)
    value = 0.0
    for _ in range(iterations):
        y = op.adjoint(op.apply(x))
        value = float(np.linalg.norm(y))
        if value == 0.0:
            return 0.0
        x = y / value
    return float(np.sqrt(value))

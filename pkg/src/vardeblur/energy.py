"""
Evaluation of the deblurring objective.

The objective has three parts: a derivative-domain data term tying the
blurred latent frames to the observations, a robust temporal term tying
each latent frame to its flow-warped neighbours, and total-variation priors
on the latent frames, flows and defocus maps (the last two weighted by a
per-frame edge map).
"""

import json
import logging
from dataclasses import asdict
from dataclasses import dataclass
from pathlib import Path
from typing import Any
from typing import Dict
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple

import numpy as np

from .constants import CHARBONNIER_EPS
from .constants import DEFAULT_LAMBDA
from .constants import DEFAULT_MU
from .constants import DEFAULT_N
from .constants import DEFAULT_NU_SIGMA
from .constants import DEFAULT_NU_U
from .constants import DEFAULT_V_I
from .exceptions import ConfigError
from .exceptions import DimensionMismatchError
from .imagecore import BilinearSampler
from .imagecore import FlowField
from .imagecore import Image
from .imagecore import SigmaMap
from .imagecore import forward_difference
from .imagecore import forward_difference_adjoint
from .imagecore import luminance
from .operators import LinearOperator
from .operators import build_blur_op
from .state import SequenceState
from .state import neighbour_flows
from .utils import to_jsonable

logger = logging.getLogger(__name__)


@dataclass
class EnergyParams:
    lam: float = DEFAULT_LAMBDA
    mu: float = DEFAULT_MU
    nu_u: float = DEFAULT_NU_U
    nu_sigma: float = DEFAULT_NU_SIGMA
    v_i: float = DEFAULT_V_I
    n: int = DEFAULT_N
    charbonnier_eps: float = CHARBONNIER_EPS
    intensity_weight: float = 0.0

    def __post_init__(self):
        for name in ("lam", "mu", "nu_u", "nu_sigma", "intensity_weight"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ConfigError(f"{name} must be a finite value >= 0, got {value}")
        if not self.v_i > 0:
            raise ConfigError(f"v_i must be > 0, got {self.v_i}")
        if self.n < 1:
            raise ConfigError(f"Temporal radius n must be >= 1, got {self.n}")
        if not self.charbonnier_eps > 0:
            raise ConfigError(
                f"charbonnier_eps must be > 0, got {self.charbonnier_eps}"
            )


@dataclass
class EnergyBreakdown:
    data: float
    temporal: float
    spatial_l: float
    spatial_u: float
    spatial_sigma: float
    total: float = 0.0

    def __post_init__(self):
        self.total = (
            self.data
            + self.temporal
            + self.spatial_l
            + self.spatial_u
            + self.spatial_sigma
        )

    def to_dict(self) -> Dict[str, float]:
        return {k: float(v) for k, v in asdict(self).items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


class EnergyLog:
    """Append-only JSON-lines sink, one object per energy evaluation."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._file = open(self.path, "w", encoding="utf-8")
        self.records = 0

    def record(self, breakdown: EnergyBreakdown, **context: Any) -> None:
        entry = dict(to_jsonable(context))
        entry.update(breakdown.to_dict())
        self._file.write(json.dumps(entry, sort_keys=True) + "\n")
        self._file.flush()
        self.records += 1

    def close(self) -> None:
        if not self._file.closed:
            self._file.close()

    def __enter__(self) -> "EnergyLog":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.close()


def read_energy_log(path: Path) -> List[Dict[str, Any]]:
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


# ============================================================================
# Penalties
# ============================================================================


def charbonnier(t: np.ndarray, eps: float = CHARBONNIER_EPS) -> np.ndarray:
    """sqrt(t^2 + eps^2) - eps; eps = 0 gives the absolute value."""
    return np.sqrt(t * t + eps * eps) - eps


def charbonnier_derivative(
    t: np.ndarray, eps: float = CHARBONNIER_EPS
) -> np.ndarray:
    return t / np.sqrt(t * t + eps * eps)


def total_variation(
    array: np.ndarray,
    eps: float = CHARBONNIER_EPS,
    weights: Optional[np.ndarray] = None,
) -> float:
    """
    Isotropic TV, smoothed with the Charbonnier penalty.

    Channels of a 3-D array are summed; ``weights`` multiplies the per-pixel
    magnitude.
    """
    dx, dy = forward_difference(array)
    magnitude = np.sqrt(dx * dx + dy * dy + eps * eps) - eps
    if weights is not None:
        if magnitude.ndim == 3:
            weights = weights[:, :, None]
        magnitude = magnitude * weights
    return float(magnitude.sum())


def edge_map(L0: Image, v_i: float) -> np.ndarray:
    """Per-pixel weight exp(-|grad lum(L0)|^2 / v_i), in (0, 1]."""
    if not v_i > 0:
        raise ConfigError(f"v_i must be > 0, got {v_i}")
    dx, dy = forward_difference(luminance(L0.data))
    return np.exp(-(dx * dx + dy * dy) / v_i)


# ============================================================================
# Terms
# ============================================================================


def data_weights(
    mask: Optional[np.ndarray], shape: Sequence[int]
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    ``(wx, wy, w)`` weights of the x-derivative, y-derivative and intensity
    residuals for a boolean data mask; None keeps every residual.

    A derivative residual counts only when both of its pixels are valid.
    The last column of ``wx`` and the last row of ``wy`` are zero, matching
    forward_difference.
    """
    height, width = shape[:2]
    w = np.ones((height, width)) if mask is None else mask.astype(np.float64)
    if w.shape != (height, width):
        raise DimensionMismatchError(
            f"Data mask {w.shape} does not match frame {(height, width)}"
        )
    wx = np.zeros_like(w)
    wy = np.zeros_like(w)
    wx[:, :-1] = w[:, :-1] * w[:, 1:]
    wy[:-1, :] = w[:-1, :] * w[1:, :]
    return wx, wy, w


def _per_channel(weight: np.ndarray, like: np.ndarray) -> np.ndarray:
    return weight[:, :, None] if like.ndim == 3 else weight


def residual_energy_map(
    residual: np.ndarray,
    lam: float,
    intensity_weight: float = 0.0,
    mask: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Per-pixel data energy of a residual ``K L - B``, summed over channels."""
    wx, wy, w = data_weights(mask, residual.shape)
    dx, dy = forward_difference(residual)
    energy = _per_channel(wx, dx) * dx * dx + _per_channel(wy, dy) * dy * dy
    if intensity_weight:
        energy = energy + intensity_weight * _per_channel(w, residual) * residual**2
    if energy.ndim == 3:
        energy = energy.sum(axis=2)
    return lam * energy


def residual_normal(
    residual: np.ndarray,
    lam: float,
    intensity_weight: float = 0.0,
    mask: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    ``lam * (D^T W D r + w_I W r)``, half the gradient of the data energy
    with respect to the residual ``r``.
    """
    wx, wy, w = data_weights(mask, residual.shape)
    dx, dy = forward_difference(residual)
    out = forward_difference_adjoint(
        _per_channel(wx, dx) * dx, _per_channel(wy, dy) * dy
    )
    if intensity_weight:
        out = out + intensity_weight * _per_channel(w, residual) * residual
    return lam * out


def residual_normal_diagonal(
    shape: Sequence[int],
    lam: float,
    intensity_weight: float = 0.0,
    mask: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Diagonal of the operator applied by residual_normal, one value per pixel."""
    wx, wy, w = data_weights(mask, shape)
    diag = wx + wy
    diag[:, 1:] += wx[:, :-1]
    diag[1:, :] += wy[:-1, :]
    return lam * (diag + intensity_weight * w)


def data_energy_map(
    latent: np.ndarray,
    blur_op: LinearOperator,
    blurry: np.ndarray,
    lam: float,
    intensity_weight: float = 0.0,
    mask: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Per-pixel data residual energy, summed over channels."""
    residual = blur_op.apply(latent) - blurry
    return residual_energy_map(residual, lam, intensity_weight, mask)


def data_energy(
    latents: Sequence[Image],
    fwds: Sequence[FlowField],
    bwds: Sequence[FlowField],
    sigmas: Sequence[SigmaMap],
    blurries: Sequence[Image],
    taus: Sequence[float],
    lam: float,
    intensity_weight: float = 0.0,
    blur_ops: Optional[Sequence[LinearOperator]] = None,
    masks: Optional[Sequence[np.ndarray]] = None,
) -> float:
    """
    Data term summed over frames; operators are built when not supplied.

    ``masks`` restricts each frame's residuals to its valid pixels.
    """
    if not len(latents) == len(blurries) == len(fwds) == len(bwds) == len(sigmas):
        raise DimensionMismatchError("Per-frame inputs differ in length")
    total = 0.0
    for i, (L, B) in enumerate(zip(latents, blurries)):
        if L.data.shape != B.data.shape:
            raise DimensionMismatchError(
                f"Frame {i}: latent {L.data.shape} vs blurry {B.data.shape}"
            )
        if blur_ops is None:
            op = build_blur_op(fwds[i], bwds[i], taus[i], sigmas[i])
        else:
            op = blur_ops[i]
        mask = None if masks is None else masks[i]
        energy = data_energy_map(L.data, op, B.data, lam, intensity_weight, mask)
        total += float(energy.sum())
    return total


def temporal_residuals(
    latents: Sequence[Image],
    fwds: Sequence[FlowField],
    bwds: Sequence[FlowField],
    index: int,
    radius: int,
) -> List[tuple]:
    """
    ``(offset, L_i - warped L_{i+n}, mask)`` for each existing neighbour.

    The mask drops samples that leave the image, directly or along a chain.
    """
    out = []
    current = latents[index].data
    for offset, flow, chain_valid in neighbour_flows(fwds, bwds, index, radius):
        sampler = BilinearSampler(flow.u, flow.v)
        warped = sampler.sample(latents[index + offset].data)
        mask = sampler.valid & chain_valid
        out.append((offset, current - warped, mask))
    return out


def temporal_energy(
    latents: Sequence[Image],
    fwds: Sequence[FlowField],
    bwds: Sequence[FlowField],
    mu: float,
    n: int,
    eps: float = CHARBONNIER_EPS,
) -> float:
    if mu == 0 or len(latents) < 2:
        return 0.0
    total = 0.0
    for i in range(len(latents)):
        for _, diff, mask in temporal_residuals(latents, fwds, bwds, i, n):
            total += float((charbonnier(diff, eps) * mask[:, :, None]).sum())
    return mu * total


def spatial_energy(
    latents: Sequence[Image],
    fwds: Sequence[FlowField],
    bwds: Sequence[FlowField],
    sigmas: Sequence[SigmaMap],
    nu_u: float,
    nu_sigma: float,
    edge_maps: Sequence[np.ndarray],
    eps: float = CHARBONNIER_EPS,
) -> Dict[str, float]:
    """
    TV priors split into ``spatial_l``, ``spatial_u`` and ``spatial_sigma``.

    The flow prior covers both components of both directional flows.
    """
    spatial_l = sum(total_variation(L.data, eps) for L in latents)
    spatial_u = 0.0
    spatial_sigma = 0.0
    for fwd, bwd, sigma, g in zip(fwds, bwds, sigmas, edge_maps):
        for flow in (fwd, bwd):
            spatial_u += total_variation(flow.u, eps, g)
            spatial_u += total_variation(flow.v, eps, g)
        spatial_sigma += total_variation(sigma.sigma, eps, g)
    return {
        "spatial_l": spatial_l,
        "spatial_u": nu_u * spatial_u,
        "spatial_sigma": nu_sigma * spatial_sigma,
    }


def _edge_maps_for(state: SequenceState, params: EnergyParams) -> List[np.ndarray]:
    if state.edge_maps:
        return state.edge_maps
    return [edge_map(f.latent, params.v_i) for f in state.frames]


def total_energy(
    state: SequenceState,
    params: EnergyParams,
    blur_ops: Optional[Sequence[LinearOperator]] = None,
) -> EnergyBreakdown:
    """Smoothed objective of the full state, split into its parts."""
    latents = state.latents()
    fwds = state.fwds()
    bwds = state.bwds()
    data = data_energy(
        latents,
        fwds,
        bwds,
        state.sigmas(),
        state.blurries(),
        [f.tau for f in state.frames],
        params.lam,
        params.intensity_weight,
        blur_ops,
        state.data_masks,
    )
    temporal = temporal_energy(
        latents, fwds, bwds, params.mu, params.n, params.charbonnier_eps
    )
    spatial = spatial_energy(
        latents,
        fwds,
        bwds,
        state.sigmas(),
        params.nu_u,
        params.nu_sigma,
        _edge_maps_for(state, params),
        params.charbonnier_eps,
    )
    return EnergyBreakdown(data=data, temporal=temporal, **spatial)


def restoration_objective(
    state: SequenceState,
    params: EnergyParams,
    blur_ops: Optional[Sequence[LinearOperator]] = None,
) -> float:
    """
    Latent-frame objective with exact L1 penalties.

    Flows and defocus maps are held fixed, so their priors are left out.
    """
    latents = state.latents()
    data = data_energy(
        latents,
        state.fwds(),
        state.bwds(),
        state.sigmas(),
        state.blurries(),
        [f.tau for f in state.frames],
        params.lam,
        params.intensity_weight,
        blur_ops,
        state.data_masks,
    )
    temporal = temporal_energy(
        latents, state.fwds(), state.bwds(), params.mu, params.n, eps=0.0
    )
    spatial = sum(total_variation(L.data, 0.0) for L in latents)
    return data + temporal + spatial

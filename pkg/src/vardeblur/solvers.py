"""
Sub-solvers of the alternating minimization.

Three first-order primal-dual schemes, all with primal extrapolation:

* latent frames, with isotropic TV and robust temporal couplings as dual
  constraints and the quadratic data term handled by an inner conjugate
  gradient solve;
* each directional flow, minimizing its linearized energy, a diagonal
  curvature term and an edge-weighted TV inside a per-pixel trust box;
* each defocus map, the same way as the flows.
"""

import logging
from dataclasses import dataclass
from dataclasses import field
from typing import Callable
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple

import numpy as np

from .constants import CG_DIVERGENCE_WINDOW
from .constants import DEFAULT_CG_ITERS
from .constants import DEFAULT_CG_TOL
from .constants import DEFAULT_LATENT_ITERS
from .constants import DEFAULT_PD_STEP
from .constants import DEFAULT_PD_THETA
from .constants import DEFAULT_SIGMA_MAX
from .constants import FLOW_FD_STEP
from .constants import FLOW_TRUST_REGION
from .constants import NORM_SAFETY_FACTOR
from .constants import OBJECTIVE_TOLERANCE
from .constants import POWER_ITERATIONS
from .constants import SIGMA_FD_STEP
from .constants import SIGMA_TRUST_REGION
from .energy import EnergyParams
from .energy import charbonnier_derivative
from .energy import residual_normal
from .energy import residual_normal_diagonal
from .energy import restoration_objective
from .exceptions import ConfigError
from .exceptions import DimensionMismatchError
from .exceptions import NumericalAbortError
from .exceptions import SolverDivergenceError
from .imagecore import BilinearSampler
from .imagecore import FlowField
from .imagecore import Image
from .imagecore import SigmaMap
from .imagecore import forward_difference
from .imagecore import forward_difference_adjoint
from .operators import LinearOperator
from .operators import build_defocus_op
from .operators import build_motion_blur_op
from .operators import estimate_operator_norm
from .state import FrameState
from .state import SequenceState
from .state import neighbour_flows
from .utils import all_finite
from .utils import parallel_map

logger = logging.getLogger(__name__)

FORWARD = 1
BACKWARD = -1


@dataclass
class PDConfig:
    """Step sizes and iteration caps of one primal-dual sub-solve."""

    eta: float = DEFAULT_PD_STEP
    epsilon: float = DEFAULT_PD_STEP
    iters: int = DEFAULT_LATENT_ITERS
    cg_iters: int = DEFAULT_CG_ITERS
    cg_tol: float = DEFAULT_CG_TOL
    theta: float = DEFAULT_PD_THETA
    anchor_weight: float = 0.0
    power_iters: int = POWER_ITERATIONS
    seed: int = 0

    def __post_init__(self):
        if not (self.eta > 0 and self.epsilon > 0):
            raise ConfigError(
                f"Step sizes must be positive, got eta={self.eta}, "
                f"epsilon={self.epsilon}"
            )
        if self.iters < 0:
            raise ConfigError(f"iters must be >= 0, got {self.iters}")
        if self.cg_iters < 1:
            raise ConfigError(f"cg_iters must be >= 1, got {self.cg_iters}")
        if not self.cg_tol > 0:
            raise ConfigError(f"cg_tol must be > 0, got {self.cg_tol}")
        if not 0 <= self.theta <= 1:
            raise ConfigError(f"theta must be in [0, 1], got {self.theta}")
        if self.anchor_weight < 0:
            raise ConfigError(f"anchor_weight must be >= 0, got {self.anchor_weight}")


@dataclass
class DualState:
    """
    Dual variables of one pyramid level, stacked over frames.

    s: (F, 2, H, W, C) spatial differences of the latent frames
    q: (F, 2N, H, W, C) temporal differences, one slot per neighbour offset
    p_fwd, p_bwd: (F, 2, 2, H, W) flow gradients (component, direction)
    r: (F, 2, H, W) defocus map gradients
    """

    s: np.ndarray
    q: np.ndarray
    p_fwd: np.ndarray
    p_bwd: np.ndarray
    r: np.ndarray

    @classmethod
    def zeros(
        cls, frames: int, height: int, width: int, channels: int, radius: int
    ) -> "DualState":
        grid = (height, width)
        return cls(
            s=np.zeros((frames, 2) + grid + (channels,)),
            q=np.zeros((frames, 2 * radius) + grid + (channels,)),
            p_fwd=np.zeros((frames, 2, 2) + grid),
            p_bwd=np.zeros((frames, 2, 2) + grid),
            r=np.zeros((frames, 2) + grid),
        )

    @classmethod
    def for_state(cls, state: SequenceState, radius: int) -> "DualState":
        return cls.zeros(len(state), state.height, state.width, state.channels, radius)

    def max_magnitude(self) -> float:
        return max(
            float(np.abs(a).max(initial=0.0))
            for a in (self.s, self.q, self.p_fwd, self.p_bwd, self.r)
        )


def project_isotropic(dual: np.ndarray) -> np.ndarray:
    """Scale (dx, dy) pairs on axis 0 back into the unit disc."""
    norm = np.sqrt(dual[0] ** 2 + dual[1] ** 2)
    return dual / np.maximum(1.0, norm)


# ============================================================================
# Conjugate gradient
# ============================================================================


@dataclass
class CGResult:
    x: np.ndarray
    iterations: int
    converged: bool
    residual_norms: List[float] = field(default_factory=list)
    objective_values: List[float] = field(default_factory=list)


def _quadratic_value(x: np.ndarray, b: np.ndarray, r: np.ndarray) -> float:
    # 1/2 x'Ax - b'x with Ax = b - r
    return -0.5 * float(np.vdot(x, b) + np.vdot(x, r))


def conjugate_gradient(
    apply_fn: Callable[[np.ndarray], np.ndarray],
    b: np.ndarray,
    x0: Optional[np.ndarray] = None,
    max_iter: int = DEFAULT_CG_ITERS,
    tol: float = DEFAULT_CG_TOL,
) -> CGResult:
    """
    Solve ``A x = b`` for a symmetric positive definite, matrix-free ``A``.

    Stops when ||r|| <= tol * ||b|| or after ``max_iter`` iterations.

    Raises:
        SolverDivergenceError: the residual grew for CG_DIVERGENCE_WINDOW
            consecutive iterations, or a search direction had non-positive
            curvature.
    """
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64)
    r = b - apply_fn(x)
    p = r.copy()
    rs = float(np.vdot(r, r))
    threshold = tol * float(np.linalg.norm(b))
    residuals = [np.sqrt(rs)]
    objectives = [_quadratic_value(x, b, r)]
    growth = 0
    iterations = 0
    for iterations in range(1, max_iter + 1):
        if residuals[-1] <= threshold:
            iterations -= 1
            break
        Ap = apply_fn(p)
        curvature = float(np.vdot(p, Ap))
        if curvature <= 0:
            raise SolverDivergenceError(
                f"CG met non-positive curvature {curvature:.3e} at iteration "
                f"{iterations}"
            )
        alpha = rs / curvature
        x = x + alpha * p
        r = r - alpha * Ap
        rs_new = float(np.vdot(r, r))
        residuals.append(np.sqrt(rs_new))
        objectives.append(_quadratic_value(x, b, r))
        growth = growth + 1 if residuals[-1] > residuals[-2] else 0
        if growth >= CG_DIVERGENCE_WINDOW:
            raise SolverDivergenceError(
                f"CG residual grew for {growth} consecutive iterations "
                f"(last {residuals[-1]:.3e})"
            )
        p = r + (rs_new / rs) * p
        rs = rs_new
    return CGResult(
        x=x,
        iterations=iterations,
        converged=residuals[-1] <= threshold,
        residual_norms=residuals,
        objective_values=objectives,
    )


# ============================================================================
# Temporal differences
# ============================================================================


class TemporalDifferenceOp(LinearOperator):
    """
    ``(D L)[i, n](x) = L_i(x) - L_{i+n}(x + u_{i->i+n}(x))`` on a stacked sequence.

    Input is (F, H, W[, C]); output is (F, 2N, H, W[, C]) with one slot per
    offset in ``offsets``. Slots of absent neighbours and samples outside the
    image are zero.
    """

    def __init__(
        self, fwds: Sequence[FlowField], bwds: Sequence[FlowField], radius: int
    ):
        frames = len(fwds)
        height, width = fwds[0].shape
        self.offsets = [n for n in range(-radius, radius + 1) if n != 0]
        self.in_shape = (frames, height, width)
        self.out_shape = (frames, len(self.offsets), height, width)
        self._links = []
        for i in range(frames):
            for n, flow, chain_valid in neighbour_flows(fwds, bwds, i, radius):
                sampler = BilinearSampler(flow.u, flow.v)
                mask = (sampler.valid & chain_valid).astype(np.float64)
                self._links.append((i, self.offsets.index(n), i + n, sampler, mask))

    @staticmethod
    def _fit(mask: np.ndarray, array: np.ndarray) -> np.ndarray:
        return mask[:, :, None] if array.ndim == 3 else mask

    def apply(self, array: np.ndarray) -> np.ndarray:
        self._check_input(array, self.in_shape)
        out = np.zeros(self.out_shape + array.shape[3:])
        for i, slot, j, sampler, mask in self._links:
            diff = array[i] - sampler.sample(array[j])
            out[i, slot] = self._fit(mask, diff) * diff
        return out

    def adjoint(self, array: np.ndarray) -> np.ndarray:
        self._check_input(array, self.out_shape)
        out = np.zeros(self.in_shape + array.shape[4:])
        for i, slot, j, sampler, mask in self._links:
            masked = self._fit(mask, array[i, slot]) * array[i, slot]
            out[i] += masked
            out[j] -= sampler.scatter(masked)
        return out


def temporal_difference_op(
    fwds: Sequence[FlowField], bwds: Sequence[FlowField], radius: int
) -> TemporalDifferenceOp:
    if len(fwds) != len(bwds) or not fwds:
        raise DimensionMismatchError("Need one forward and one backward flow per frame")
    return TemporalDifferenceOp(fwds, bwds, radius)


def _spatial(stack: np.ndarray) -> np.ndarray:
    return np.stack([np.stack(forward_difference(frame)) for frame in stack])


def _spatial_adjoint(stack: np.ndarray) -> np.ndarray:
    return np.stack([forward_difference_adjoint(d[0], d[1]) for d in stack])


class _RestorationCoupling(LinearOperator):
    """Stacked ``[A; mu D]`` acting on a sequence, used for step-size bounds."""

    def __init__(self, temporal: TemporalDifferenceOp, mu: float):
        self.temporal = temporal
        self.mu = mu
        frames, height, width = temporal.in_shape
        self.in_shape = temporal.in_shape
        self._split = 2 * frames * height * width
        self.out_shape = (self._split + int(np.prod(temporal.out_shape)),)

    def apply(self, array: np.ndarray) -> np.ndarray:
        spatial = _spatial(array).ravel()
        temporal = self.mu * self.temporal.apply(array).ravel()
        return np.concatenate([spatial, temporal])

    def adjoint(self, array: np.ndarray) -> np.ndarray:
        frames, height, width = self.in_shape
        spatial = array[: self._split].reshape(frames, 2, height, width)
        temporal = array[self._split :].reshape(self.temporal.out_shape)
        return _spatial_adjoint(spatial) + self.mu * self.temporal.adjoint(temporal)


def latent_steps(
    pd: PDConfig, temporal: Optional[TemporalDifferenceOp], mu: float
) -> Tuple[float, float]:
    """
    Dual and primal steps for the latent solve.

    Both are scaled down together whenever eta * epsilon * ||[A; mu D]||^2
    would exceed one.
    """
    if temporal is None or mu == 0:
        norm_sq = 8.0
    else:
        coupling = _RestorationCoupling(temporal, mu)
        norm = estimate_operator_norm(coupling, pd.power_iters, pd.seed)
        norm_sq = max((NORM_SAFETY_FACTOR * norm) ** 2, 8.0)
    product = pd.eta * pd.epsilon * norm_sq
    if product <= 1.0:
        return pd.eta, pd.epsilon
    shrink = 1.0 / np.sqrt(product)
    logger.debug("Latent steps shrunk by %.4f (||K||^2 ~ %.3f)", shrink, norm_sq)
    return pd.eta * shrink, pd.epsilon * shrink


# ============================================================================
# Latent restoration
# ============================================================================


def _data_normal_rhs(
    op: LinearOperator,
    blurry: np.ndarray,
    params: EnergyParams,
    mask: Optional[np.ndarray] = None,
) -> np.ndarray:
    return op.adjoint(
        residual_normal(blurry, params.lam, params.intensity_weight, mask)
    )


def _data_prox(
    op: LinearOperator,
    v: np.ndarray,
    start: np.ndarray,
    rhs: np.ndarray,
    params: EnergyParams,
    epsilon: float,
    pd: PDConfig,
    mask: Optional[np.ndarray] = None,
) -> np.ndarray:
    """argmin_L  data(L) + ||L - v||^2 / (2 epsilon), solved by CG."""

    def normal(x: np.ndarray) -> np.ndarray:
        blurred = residual_normal(
            op.apply(x), params.lam, params.intensity_weight, mask
        )
        return op.adjoint(blurred) + x / (2.0 * epsilon)

    result = conjugate_gradient(
        normal, rhs + v / (2.0 * epsilon), start, pd.cg_iters, pd.cg_tol
    )
    if not result.converged:
        logger.debug(
            "CG stopped after %d iterations, residual %.3e",
            result.iterations,
            result.residual_norms[-1],
        )
    return result.x


def restore_latent(
    state: SequenceState,
    params: EnergyParams,
    pd: PDConfig,
    dual: Optional[DualState] = None,
    blur_ops: Optional[Sequence[LinearOperator]] = None,
) -> List[Image]:
    """
    Update every latent frame with flows and defocus maps held fixed.

    Runs ``pd.iters`` primal-dual iterations; the dual variables in ``dual``
    are updated in place so later calls at the same level warm-start. If
    the exact restoration objective ends above its starting value the
    starting frames are returned unchanged.
    """
    latents = state.latents()
    if pd.iters == 0:
        return latents
    if blur_ops is None:
        blur_ops = state.blur_ops()
    if dual is None:
        dual = DualState.for_state(state, params.n)
    frames = len(state)
    x = np.stack([L.data for L in latents])
    temporal = None
    if params.mu > 0 and frames > 1:
        temporal = temporal_difference_op(state.fwds(), state.bwds(), params.n)
    eta, epsilon = latent_steps(pd, temporal, params.mu)
    initial = restoration_objective(state, params, blur_ops)
    rhs = [
        _data_normal_rhs(op, f.blurry.data, params, state.data_mask(i))
        for i, (op, f) in enumerate(zip(blur_ops, state.frames))
    ]

    x_bar = x.copy()
    for iteration in range(pd.iters):
        dual.s[...] = np.stack(
            [project_isotropic(s) for s in dual.s + eta * _spatial(x_bar)]
        )
        step = _spatial_adjoint(dual.s)
        if temporal is not None:
            dual.q[...] = np.clip(
                dual.q + eta * params.mu * temporal.apply(x_bar), -1.0, 1.0
            )
            step = step + params.mu * temporal.adjoint(dual.q)
        v = x - epsilon * step

        def solve(i: int) -> np.ndarray:
            return _data_prox(
                blur_ops[i],
                v[i],
                x[i],
                rhs[i],
                params,
                epsilon,
                pd,
                state.data_mask(i),
            )

        x_new = np.stack(parallel_map(solve, range(frames)))
        if not all_finite(x_new):
            raise NumericalAbortError(
                f"Latent restoration produced non-finite values at iteration "
                f"{iteration}"
            )
        x_bar = x_new + pd.theta * (x_new - x)
        x = x_new

    restored = [Image(frame) for frame in x]
    final = restoration_objective(state.with_latents(restored), params, blur_ops)
    logger.debug("Restoration objective %.6g -> %.6g", initial, final)
    if final > initial + OBJECTIVE_TOLERANCE * abs(initial):
        logger.warning(
            "Latent update rejected: objective rose from %.6g to %.6g",
            initial,
            final,
        )
        return latents
    return restored


# ============================================================================
# Linearization
# ============================================================================


def _direction_flows(frame: FrameState, direction: int) -> Tuple[FlowField, FlowField]:
    if direction == FORWARD:
        return frame.fwd, frame.bwd
    if direction == BACKWARD:
        return frame.bwd, frame.fwd
    raise ConfigError(f"Flow direction must be +1 or -1, got {direction}")


def _shift_flow(flow: FlowField, component: int, delta: float) -> FlowField:
    if component == 0:
        return FlowField(flow.u + delta, flow.v)
    return FlowField(flow.u, flow.v + delta)


def _motion_for(
    frame: FrameState, own: FlowField, partner: FlowField, direction: int
) -> LinearOperator:
    if direction == FORWARD:
        return build_motion_blur_op(own, partner, frame.tau)
    return build_motion_blur_op(partner, own, frame.tau)


def flow_linearization(
    state: SequenceState,
    params: EnergyParams,
    index: int,
    direction: int,
    mirrored: bool = False,
    step: float = FLOW_FD_STEP,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-pixel gradient and curvature of the energy over one directional flow.

    Returns two (2, H, W) arrays for the (u, v) components. The curvature
    majorizes the temporal Charbonnier terms by their quadratic bound and
    takes the Gauss-Newton diagonal of the data term; it is the proximal
    weight of a majorize-minimize flow step.

    The temporal part differentiates the bilinear interpolant exactly; flows
    chained through later frames are treated as shifting one-to-one with
    this flow. The data part uses the chain rule: the blurred value at a
    pixel depends only on that pixel's flow, so perturbing every pixel at
    once and differencing the blurred frame yields the exact diagonal
    Jacobian, which is then paired with the residual gradient. With
    ``mirrored`` the opposite half-flow is tied to the negation of this one
    and perturbed with it.
    """
    frame = state.frames[index]
    own, other = _direction_flows(frame, direction)
    grad = np.zeros((2,) + own.shape)
    curvature = np.zeros((2,) + own.shape)

    if params.mu > 0 and len(state) > 1:
        eps = params.charbonnier_eps
        latents = state.latents()
        current = latents[index].data
        entries = neighbour_flows(state.fwds(), state.bwds(), index, params.n)
        for offset, flow, chain_valid in entries:
            if np.sign(offset) != direction:
                continue
            sampler = BilinearSampler(flow.u, flow.v)
            warped, gx, gy = sampler.sample_with_gradient(latents[index + offset].data)
            mask = (sampler.valid & chain_valid)[:, :, None]
            diff = current - warped
            weight = charbonnier_derivative(diff, eps) * mask
            grad[0] -= params.mu * (weight * gx).sum(axis=2)
            grad[1] -= params.mu * (weight * gy).sum(axis=2)
            bound = mask / np.sqrt(diff * diff + eps * eps)
            curvature[0] += params.mu * (bound * gx * gx).sum(axis=2)
            curvature[1] += params.mu * (bound * gy * gy).sum(axis=2)

    if params.lam > 0:
        mask = state.data_mask(index)
        sharp = build_defocus_op(frame.sigma).apply(frame.latent.data)
        partner = -own if mirrored else other
        residual = (
            _motion_for(frame, own, partner, direction).apply(sharp)
            - frame.blurry.data
        )
        residual_grad = 2.0 * residual_normal(
            residual, params.lam, params.intensity_weight, mask
        )
        diagonal = residual_normal_diagonal(
            residual.shape, params.lam, params.intensity_weight, mask
        )
        for component in (0, 1):
            blurred = []
            for delta in (step, -step):
                moved = _shift_flow(own, component, delta)
                partner = -moved if mirrored else other
                motion = _motion_for(frame, moved, partner, direction)
                blurred.append(motion.apply(sharp))
            jacobian = (blurred[0] - blurred[1]) / (2.0 * step)
            grad[component] += (residual_grad * jacobian).sum(axis=2)
            curvature[component] += 2.0 * diagonal * (jacobian**2).sum(axis=2)
    return grad, curvature


def flow_gradient(
    state: SequenceState,
    params: EnergyParams,
    index: int,
    direction: int,
    mirrored: bool = False,
    step: float = FLOW_FD_STEP,
) -> np.ndarray:
    """(2, H, W) gradient part of flow_linearization."""
    return flow_linearization(state, params, index, direction, mirrored, step)[0]


def linearize_rho_u(
    state: SequenceState, params: EnergyParams
) -> List[Tuple[np.ndarray, np.ndarray]]:
    """(forward, backward) flow gradients of every frame."""

    def both(index: int) -> Tuple[np.ndarray, np.ndarray]:
        return (
            flow_gradient(state, params, index, FORWARD),
            flow_gradient(state, params, index, BACKWARD),
        )

    return parallel_map(both, range(len(state)))


def sigma_linearization(
    state: SequenceState,
    params: EnergyParams,
    index: int,
    step: float = SIGMA_FD_STEP,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-pixel gradient and Gauss-Newton curvature of the data energy over
    the defocus map.

    The defocused value at a pixel depends only on that pixel's sigma, so
    its derivative is a central difference of two whole-frame blurs; the
    gradient pairs it with the back-projected residual gradient. Shifted
    maps below zero are clamped to zero and the difference quotient uses the
    actual spacing. The curvature replaces the difference operator of
    the data term by its largest diagonal entry.
    """
    frame = state.frames[index]
    sigma = np.asarray(frame.sigma.sigma)
    if params.lam == 0:
        return np.zeros(sigma.shape), np.zeros(sigma.shape)
    latent = frame.latent.data
    motion = build_motion_blur_op(frame.fwd, frame.bwd, frame.tau)
    upper = sigma + step
    lower = np.maximum(sigma - step, 0.0)
    blurred = [
        build_defocus_op(SigmaMap(shifted)).apply(latent) for shifted in (upper, lower)
    ]
    jacobian = (blurred[0] - blurred[1]) / (upper - lower)[:, :, None]
    sharp = build_defocus_op(frame.sigma).apply(latent)
    residual = motion.apply(sharp) - frame.blurry.data
    residual_grad = 2.0 * residual_normal(
        residual, params.lam, params.intensity_weight, state.data_mask(index)
    )
    grad = (motion.adjoint(residual_grad) * jacobian).sum(axis=2)
    bound = 2.0 * params.lam * (4.0 + params.intensity_weight)
    curvature = bound * motion.column_energy() * (jacobian**2).sum(axis=2)
    return grad, curvature


def sigma_gradient(
    state: SequenceState,
    params: EnergyParams,
    index: int,
    step: float = SIGMA_FD_STEP,
) -> np.ndarray:
    """(H, W) gradient part of sigma_linearization."""
    return sigma_linearization(state, params, index, step)[0]


def linearize_rho_sigma(state: SequenceState, params: EnergyParams) -> List[np.ndarray]:
    return parallel_map(
        lambda index: sigma_gradient(state, params, index), range(len(state))
    )


# ============================================================================
# Flow and defocus updates
# ============================================================================


def effective_steps(pd: PDConfig, weight_scale: float) -> Tuple[float, float]:
    """
    Steps for ``K = weight_scale * diag(w) * grad`` with max(w) folded in.

    Dividing by the scale keeps eta * epsilon * ||K||^2 at the bound of the
    plain difference operator.
    """
    if weight_scale <= 0:
        return pd.eta, pd.epsilon
    return pd.eta / weight_scale, pd.epsilon / weight_scale


def _weighted_tv(fields: np.ndarray, weights: np.ndarray) -> float:
    total = 0.0
    for f in fields:
        dx, dy = forward_difference(f)
        total += float((weights * np.sqrt(dx * dx + dy * dy)).sum())
    return total


def _box_tv_solve(
    start: np.ndarray,
    grad: np.ndarray,
    edge: np.ndarray,
    nu: float,
    pd: PDConfig,
    lower: np.ndarray,
    upper: np.ndarray,
    dual: Optional[np.ndarray],
    curvature: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    Minimize <grad, x - x0> + nu * TV_edge(x) + 1/2 <a, (x - x0)^2> over a box.

    ``start`` and ``grad`` stack scalar fields on axis 0; each field gets its
    own isotropic TV. ``a`` is the per-pixel ``curvature`` when given and
    ``pd.anchor_weight`` otherwise. The iterate with the lowest objective is
    returned, so the result never scores worse than ``start``.
    """
    if grad.shape != start.shape:
        raise DimensionMismatchError(
            f"Gradient {grad.shape} does not match field {start.shape}"
        )
    scale = nu * float(edge.max())
    eta, epsilon = effective_steps(pd, scale)
    anchor = pd.anchor_weight if curvature is None else curvature
    p = np.zeros((start.shape[0], 2) + start.shape[1:]) if dual is None else dual

    def objective(x: np.ndarray) -> float:
        shift = x - start
        value = float((grad * shift).sum()) + nu * _weighted_tv(x, edge)
        return value + 0.5 * anchor * float((shift * shift).sum())

    x = np.clip(start, lower, upper)
    x_bar = x.copy()
    best = x.copy()
    best_value = objective(x)
    for _ in range(pd.iters):
        if scale > 0:
            for k, field_bar in enumerate(x_bar):
                dx, dy = forward_difference(field_bar)
                p[k, 0] += eta * nu * edge * dx
                p[k, 1] += eta * nu * edge * dy
                p[k] = project_isotropic(p[k])
            k_adjoint = nu * np.stack(
                [forward_difference_adjoint(edge * pk[0], edge * pk[1]) for pk in p]
            )
        else:
            k_adjoint = 0.0
        w = x - epsilon * k_adjoint - epsilon * grad
        x_new = (w + epsilon * anchor * start) / (1.0 + epsilon * anchor)
        x_new = np.clip(x_new, lower, upper)
        x_bar = x_new + pd.theta * (x_new - x)
        x = x_new
        value = objective(x)
        if value < best_value:
            best_value = value
            best = x.copy()
    return best


def update_flow(
    u0: FlowField,
    grad: np.ndarray,
    edge_map: np.ndarray,
    nu_u: float,
    pd: PDConfig,
    dual: Optional[np.ndarray] = None,
    trust_region: float = FLOW_TRUST_REGION,
    curvature: Optional[np.ndarray] = None,
    center: Optional[FlowField] = None,
) -> FlowField:
    """
    One linearized flow update.

    ``grad`` is the (2, H, W) output of the flow linearization and
    ``curvature``, when given, its (2, H, W) proximal weight. The result
    stays within ``trust_region`` pixels of ``center`` (``u0`` by default)
    in each component. ``dual`` (2, 2, H, W), when given, is updated in
    place.
    """
    start = np.stack([u0.u, u0.v])
    box = start if center is None else np.stack([center.u, center.v])
    solved = _box_tv_solve(
        start,
        np.asarray(grad, dtype=np.float64),
        edge_map,
        nu_u,
        pd,
        box - trust_region,
        box + trust_region,
        dual,
        curvature,
    )
    return FlowField(solved[0], solved[1])


def update_sigma(
    sigma0: SigmaMap,
    grad: np.ndarray,
    edge_map: np.ndarray,
    nu_sigma: float,
    pd: PDConfig,
    dual: Optional[np.ndarray] = None,
    trust_region: float = SIGMA_TRUST_REGION,
    sigma_max: float = DEFAULT_SIGMA_MAX,
    curvature: Optional[np.ndarray] = None,
    center: Optional[SigmaMap] = None,
) -> SigmaMap:
    """
    One linearized defocus-map update, clamped to [0, sigma_max] and to
    ``trust_region`` around ``center`` (``sigma0`` by default).

    ``dual`` (2, H, W), when given, is updated in place.
    """
    start = np.asarray(sigma0.sigma)[None]
    box = start if center is None else np.asarray(center.sigma)[None]
    upper = np.minimum(box + trust_region, sigma_max)
    lower = np.minimum(np.maximum(box - trust_region, 0.0), upper)
    solved = _box_tv_solve(
        start,
        np.asarray(grad, dtype=np.float64)[None],
        edge_map,
        nu_sigma,
        pd,
        lower,
        upper,
        None if dual is None else dual[None],
        None if curvature is None else np.asarray(curvature)[None],
    )
    return SigmaMap(solved[0])

"""
Coarse-to-fine joint estimation of latent frames, flows and defocus maps.

At every pyramid level the pipeline alternates latent restoration, flow
updates and defocus-map updates, each step kept only if the total energy
does not rise. It then detects occlusions and applies the spatio-temporal
post-filter before handing its estimates to the next finer level.
"""

import logging
import time
from dataclasses import dataclass
from dataclasses import field
from dataclasses import fields
from dataclasses import replace
from functools import partial
from typing import Any
from typing import Callable
from typing import Dict
from typing import List
from typing import NamedTuple
from typing import Optional
from typing import Sequence
from typing import Tuple
from typing import Union

import numpy as np

from .constants import CHARBONNIER_EPS
from .constants import DATA_MASK_MIN_FRACTION
from .constants import DEFAULT_ALTERNATION_ROUNDS
from .constants import DEFAULT_BOOTSTRAP_WARPS
from .constants import DEFAULT_CG_ITERS
from .constants import DEFAULT_CG_TOL
from .constants import DEFAULT_FB_THRESHOLD
from .constants import DEFAULT_FLOW_ITERS
from .constants import DEFAULT_LAMBDA
from .constants import DEFAULT_LATENT_ITERS
from .constants import DEFAULT_LINE_SEARCH_HALVINGS
from .constants import DEFAULT_MU
from .constants import DEFAULT_N
from .constants import DEFAULT_NUM_LEVELS
from .constants import DEFAULT_PD_STEP
from .constants import DEFAULT_PYRAMID_SCALE
from .constants import DEFAULT_SIGMA_INIT
from .constants import DEFAULT_SIGMA_ITERS
from .constants import DEFAULT_SIGMA_MAX
from .constants import DEFAULT_SIGMA_W
from .constants import DEFAULT_TAU
from .constants import DEFAULT_V_I
from .constants import FILTER_PATCH_RADIUS
from .constants import FILTER_SEARCH_RADIUS
from .constants import FLOW_TRUST_REGION
from .constants import OCCLUSION_LOW_WEIGHT
from .constants import SIGMA_TRUST_REGION
from .energy import EnergyBreakdown
from .energy import EnergyLog
from .energy import EnergyParams
from .energy import charbonnier
from .energy import edge_map
from .energy import temporal_residuals
from .energy import total_energy
from .energy import total_variation
from .exceptions import ConfigError
from .exceptions import DimensionMismatchError
from .exceptions import InsufficientFramesError
from .exceptions import NumericalAbortError
from .imagecore import BilinearSampler
from .imagecore import FlowField
from .imagecore import Image
from .imagecore import PyramidLevel
from .imagecore import SigmaMap
from .imagecore import build_pyramid
from .imagecore import resample_flow
from .imagecore import resample_image
from .imagecore import resample_sigma
from .operators import LinearOperator
from .operators import blur_footprint_mask
from .solvers import BACKWARD
from .solvers import FORWARD
from .solvers import DualState
from .solvers import PDConfig
from .solvers import flow_linearization
from .solvers import restore_latent
from .solvers import sigma_linearization
from .solvers import update_flow
from .solvers import update_sigma
from .state import FrameState
from .state import SequenceState
from .state import chain_flows
from .state import neighbour_flows
from .utils import all_finite
from .utils import parallel_map

logger = logging.getLogger(__name__)

__all__ = [
    "PipelineConfig",
    "LevelReport",
    "DeblurReport",
    "DeblurResult",
    "initialize",
    "bootstrap_flows",
    "chain_flows",
    "detect_occlusion",
    "spatio_temporal_filter",
    "deblur_sequence",
]

TauSetting = Union[float, List[float]]

# JSON spelling -> attribute name
JSON_KEY_ALIASES = {"lambda": "lam", "v_I": "v_i", "N": "n"}


@dataclass
class PipelineConfig:
    """
    Every tunable of a deblurring run.

    ``nu_u`` and ``nu_sigma`` default to 0.08 * ``lam`` when left unset.
    ``tau`` is one duty cycle for all frames or a list with one per frame.
    """

    num_levels: int = DEFAULT_NUM_LEVELS
    scale: float = DEFAULT_PYRAMID_SCALE
    lam: float = DEFAULT_LAMBDA
    mu: float = DEFAULT_MU
    nu_u: Optional[float] = None
    nu_sigma: Optional[float] = None
    v_i: float = DEFAULT_V_I
    n: int = DEFAULT_N
    tau: TauSetting = DEFAULT_TAU
    sigma_init: float = DEFAULT_SIGMA_INIT
    alternation_rounds: int = DEFAULT_ALTERNATION_ROUNDS
    enable_defocus: bool = True
    sigma_w: float = DEFAULT_SIGMA_W
    occlusion_low_weight: float = OCCLUSION_LOW_WEIGHT
    fb_threshold: float = DEFAULT_FB_THRESHOLD
    latent_iters: int = DEFAULT_LATENT_ITERS
    flow_iters: int = DEFAULT_FLOW_ITERS
    sigma_iters: int = DEFAULT_SIGMA_ITERS
    cg_iters: int = DEFAULT_CG_ITERS
    cg_tol: float = DEFAULT_CG_TOL
    pd_step: float = DEFAULT_PD_STEP
    charbonnier_eps: float = CHARBONNIER_EPS
    sigma_max: float = DEFAULT_SIGMA_MAX
    intensity_weight: float = 0.0
    flow_trust_region: float = FLOW_TRUST_REGION
    sigma_trust_region: float = SIGMA_TRUST_REGION
    bootstrap_warps: int = DEFAULT_BOOTSTRAP_WARPS
    line_search_halvings: int = DEFAULT_LINE_SEARCH_HALVINGS

    def __post_init__(self):
        if self.nu_u is None:
            self.nu_u = 0.08 * self.lam
        if self.nu_sigma is None:
            self.nu_sigma = 0.08 * self.lam
        if self.num_levels < 1:
            raise ConfigError(f"num_levels must be >= 1, got {self.num_levels}")
        if not 0 < self.scale < 1:
            raise ConfigError(f"scale must be in (0, 1), got {self.scale}")
        if self.n < 1:
            raise ConfigError(f"n must be >= 1, got {self.n}")
        taus = self.tau if isinstance(self.tau, list) else [self.tau]
        for tau in taus:
            if not 0 < tau <= 1:
                raise ConfigError(f"tau must be in (0, 1], got {tau}")
        if self.sigma_init < 0 or self.sigma_max <= 0:
            raise ConfigError("sigma_init must be >= 0 and sigma_max > 0")
        if self.alternation_rounds < 1:
            raise ConfigError(
                f"alternation_rounds must be >= 1, got {self.alternation_rounds}"
            )
        if not 0 < self.occlusion_low_weight <= 1:
            raise ConfigError(
                f"occlusion_low_weight must be in (0, 1], got "
                f"{self.occlusion_low_weight}"
            )
        for name in (
            "sigma_w",
            "fb_threshold",
            "flow_trust_region",
            "sigma_trust_region",
            "pd_step",
        ):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        for name in ("bootstrap_warps", "line_search_halvings", "latent_iters"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        # Remaining ranges are checked where the values are consumed.
        self.energy_params()
        self.latent_pd()

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "PipelineConfig":
        """
        Build a config from a flat JSON object.

        The JSON keys ``lambda``, ``v_I`` and ``N`` map to ``lam``, ``v_i``
        and ``n``; those attribute spellings are not accepted as keys.
        Unknown keys and values of the wrong type raise ConfigError; missing
        keys keep their defaults.
        """
        if not isinstance(raw, dict):
            raise ConfigError("Pipeline config must be a JSON object")
        known = {f.name: f for f in fields(cls)}
        shadowed = set(JSON_KEY_ALIASES.values())
        kwargs: Dict[str, Any] = {}
        for key, value in raw.items():
            name = JSON_KEY_ALIASES.get(key, key)
            if name not in known or key in shadowed:
                raise ConfigError(f"Unknown config key: {key!r}")
            kwargs[name] = _coerce(name, value, known[name].default)
        return cls(**kwargs)

    def to_dict(self) -> Dict[str, Any]:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        for key, name in JSON_KEY_ALIASES.items():
            out[key] = out.pop(name)
        return out

    def taus(self, frames: int) -> List[float]:
        if isinstance(self.tau, list):
            if len(self.tau) != frames:
                raise ConfigError(
                    f"tau lists {len(self.tau)} values for {frames} frames"
                )
            return [float(t) for t in self.tau]
        return [float(self.tau)] * frames

    def energy_params(self) -> EnergyParams:
        return EnergyParams(
            lam=self.lam,
            mu=self.mu,
            nu_u=float(self.nu_u),
            nu_sigma=float(self.nu_sigma),
            v_i=self.v_i,
            n=self.n,
            charbonnier_eps=self.charbonnier_eps,
            intensity_weight=self.intensity_weight,
        )

    def latent_pd(self) -> PDConfig:
        return PDConfig(
            eta=self.pd_step,
            epsilon=self.pd_step,
            iters=self.latent_iters,
            cg_iters=self.cg_iters,
            cg_tol=self.cg_tol,
        )

    def flow_pd(self) -> PDConfig:
        return PDConfig(eta=self.pd_step, epsilon=self.pd_step, iters=self.flow_iters)

    def sigma_pd(self) -> PDConfig:
        return PDConfig(eta=self.pd_step, epsilon=self.pd_step, iters=self.sigma_iters)


def _coerce(name: str, value: Any, default: Any) -> Any:
    if value is None and default is None:
        return None
    if name == "tau":
        if isinstance(value, list):
            if not all(_is_number(v) for v in value):
                raise ConfigError("tau list must contain numbers")
            return [float(v) for v in value]
        if not _is_number(value):
            raise ConfigError(f"tau must be a number or a list, got {value!r}")
        return float(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name} must be a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name} must be an integer, got {value!r}")
        return value
    if not _is_number(value):
        raise ConfigError(f"{name} must be a number, got {value!r}")
    return float(value)


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


# ============================================================================
# Reports
# ============================================================================


@dataclass
class LevelReport:
    level: int
    width: int
    height: int
    energy_start: EnergyBreakdown
    energy_end: EnergyBreakdown
    rounds: List[EnergyBreakdown] = field(default_factory=list)
    accepted_steps: Dict[str, int] = field(default_factory=dict)
    rejected_steps: Dict[str, int] = field(default_factory=dict)
    seconds: float = 0.0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "level": self.level,
            "width": self.width,
            "height": self.height,
            "energy_start": self.energy_start.to_dict(),
            "energy_end": self.energy_end.to_dict(),
            "rounds": [r.to_dict() for r in self.rounds],
            "accepted_steps": dict(self.accepted_steps),
            "rejected_steps": dict(self.rejected_steps),
            "seconds": self.seconds,
        }


@dataclass
class DeblurReport:
    frames: int
    config: Dict[str, Any]
    levels: List[LevelReport] = field(default_factory=list)
    bootstrap_seconds: float = 0.0
    seconds: float = 0.0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "frames": self.frames,
            "config": self.config,
            "levels": [level.to_dict() for level in self.levels],
            "bootstrap_seconds": self.bootstrap_seconds,
            "seconds": self.seconds,
        }


class DeblurResult(NamedTuple):
    latents: List[Image]
    flows: List[Tuple[FlowField, FlowField]]
    sigmas: List[SigmaMap]
    report: DeblurReport


# ============================================================================
# Occlusion and post-filter
# ============================================================================


def detect_occlusion(
    u_fwd: FlowField,
    u_bwd: FlowField,
    threshold: float = DEFAULT_FB_THRESHOLD,
    low_weight: float = OCCLUSION_LOW_WEIGHT,
) -> np.ndarray:
    """
    Forward-backward consistency check of the flows i->j and j->i.

    Pixels whose round trip misses by more than ``threshold`` pixels, or
    whose forward target leaves the image, get ``low_weight``; all others 1.
    """
    if u_fwd.shape != u_bwd.shape:
        raise DimensionMismatchError(
            f"Flow pair mismatch: {u_fwd.shape} != {u_bwd.shape}"
        )
    sampler = BilinearSampler(u_fwd.u, u_fwd.v)
    du = u_fwd.u + sampler.sample(u_bwd.u)
    dv = u_fwd.v + sampler.sample(u_bwd.v)
    inconsistent = np.sqrt(du * du + dv * dv) > threshold
    occluded = inconsistent | ~sampler.valid
    return np.where(occluded, low_weight, 1.0)


def _patches(data: np.ndarray, radius: int) -> np.ndarray:
    """(H, W, P*C) stack of every pixel's (2r+1)^2 patch, edge-padded."""
    height, width = data.shape[:2]
    padded = np.pad(data, ((radius, radius), (radius, radius), (0, 0)), mode="edge")
    size = 2 * radius + 1
    shifted = [
        padded[dy : dy + height, dx : dx + width]
        for dy in range(size)
        for dx in range(size)
    ]
    return np.concatenate(shifted, axis=2)


def _flow_to(state: SequenceState, index: int, offset: int, radius: int) -> FlowField:
    for n, flow, _ in neighbour_flows(state.fwds(), state.bwds(), index, radius):
        if n == offset:
            return flow
    raise DimensionMismatchError(f"Frame {index} has no neighbour at {offset}")


def _filter_frame(
    state: SequenceState, index: int, config: PipelineConfig, patches: List[np.ndarray]
) -> Image:
    frames = state.frames
    latents = [f.latent.data for f in frames]
    height, width, channels = latents[index].shape
    rows, cols = np.mgrid[0:height, 0:width]
    zero = FlowField.zeros(width, height)
    ones = np.ones((height, width))
    sources = [(0, zero, ones)]
    for offset, flow, chain_valid in neighbour_flows(
        state.fwds(), state.bwds(), index, config.n
    ):
        frame = frames[index]
        stored = frame.occlusion_fwd if offset > 0 else frame.occlusion_bwd
        if abs(offset) == 1 and stored is not None:
            weight = stored
        else:
            reverse = _flow_to(state, index + offset, -offset, config.n)
            weight = detect_occlusion(
                flow, reverse, config.fb_threshold, config.occlusion_low_weight
            )
        weight = np.where(chain_valid, weight, config.occlusion_low_weight)
        sources.append((offset, flow, weight))

    numerator = np.zeros((height, width, channels))
    denominator = np.zeros((height, width))
    own = patches[index]
    scale = 2.0 * config.sigma_w**2
    search = FILTER_SEARCH_RADIUS
    for offset, flow, weight in sources:
        target = index + offset
        base_y = np.rint(rows + flow.v).astype(np.intp)
        base_x = np.rint(cols + flow.u).astype(np.intp)
        for dy in range(-search, search + 1):
            for dx in range(-search, search + 1):
                yy = np.clip(base_y + dy, 0, height - 1)
                xx = np.clip(base_x + dx, 0, width - 1)
                diff = own - patches[target][yy, xx]
                distance = (diff * diff).sum(axis=2)
                w = weight * np.exp(-distance / scale)
                numerator += w[:, :, None] * latents[target][yy, xx]
                denominator += w
    return Image(numerator / denominator[:, :, None])


def spatio_temporal_filter(
    state: SequenceState, config: PipelineConfig
) -> List[Image]:
    """
    Patch-weighted average over each pixel's flow-aligned neighbourhoods.

    Every frame within ``config.n`` contributes a 3x3 window around the
    rounded flow target; the frame itself contributes the 3x3 window around
    the pixel. Weights combine the occlusion weight of the flow with a
    Gaussian of the squared 5x5 patch distance summed over channels, so
    the output is a convex combination of input pixels.
    """
    patches = [_patches(f.latent.data, FILTER_PATCH_RADIUS) for f in state.frames]
    return parallel_map(
        lambda index: _filter_frame(state, index, config, patches),
        range(len(state)),
    )


def _occlusion_maps(state: SequenceState, config: PipelineConfig) -> SequenceState:
    count = len(state)
    frames = []
    for i, frame in enumerate(state.frames):
        ones = np.ones(frame.fwd.shape)
        occ_fwd = ones
        occ_bwd = ones
        if i + 1 < count:
            occ_fwd = detect_occlusion(
                frame.fwd,
                state.frames[i + 1].bwd,
                config.fb_threshold,
                config.occlusion_low_weight,
            )
        if i > 0:
            occ_bwd = detect_occlusion(
                frame.bwd,
                state.frames[i - 1].fwd,
                config.fb_threshold,
                config.occlusion_low_weight,
            )
        frames.append(replace(frame, occlusion_fwd=occ_fwd, occlusion_bwd=occ_bwd))
    return SequenceState(frames, list(state.edge_maps), state.level, state.data_masks)


# ============================================================================
# Initialization
# ============================================================================


def _check_frames(frames: Sequence[Image]) -> None:
    if len(frames) < 2:
        raise InsufficientFramesError(
            f"At least 2 frames are required, got {len(frames)}"
        )
    shape = frames[0].data.shape
    for index, frame in enumerate(frames):
        if frame.data.shape != shape:
            raise DimensionMismatchError(
                f"Frame {index} is {frame.data.shape}, expected {shape}"
            )


def _directions(index: int, count: int) -> List[int]:
    """Flow halves estimated for a frame; the other half is mirrored."""
    if index == 0:
        return [FORWARD]
    if index == count - 1:
        return [BACKWARD]
    return [FORWARD, BACKWARD]


def _mirror_boundaries(
    fwds: List[FlowField], bwds: List[FlowField]
) -> Tuple[List[FlowField], List[FlowField]]:
    fwds = list(fwds)
    bwds = list(bwds)
    bwds[0] = -fwds[0]
    fwds[-1] = -bwds[-1]
    return fwds, bwds


def _blend_flow(base: FlowField, target: FlowField, step: float) -> FlowField:
    return FlowField(
        base.u + step * (target.u - base.u), base.v + step * (target.v - base.v)
    )


def _line_search(
    current: float,
    evaluate: Callable[[float], Tuple[float, Any]],
    halvings: int,
) -> Optional[Tuple[float, Any]]:
    """First of the steps 1, 1/2, 1/4, ... whose energy is not above ``current``."""
    step = 1.0
    for _ in range(halvings + 1):
        energy, candidate = evaluate(step)
        if energy <= current:
            return energy, candidate
        step *= 0.5
    return None


def _pair_energy(
    source: Image,
    target: Image,
    flow: FlowField,
    edge: np.ndarray,
    params: EnergyParams,
) -> float:
    zero = FlowField.zeros(flow.width, flow.height)
    residuals = temporal_residuals([source, target], [flow, zero], [zero, zero], 0, 1)
    temporal = sum(
        float((charbonnier(diff, params.charbonnier_eps) * mask[:, :, None]).sum())
        for _, diff, mask in residuals
    )
    smooth = total_variation(flow.u, params.charbonnier_eps, edge)
    smooth += total_variation(flow.v, params.charbonnier_eps, edge)
    return params.mu * temporal + params.nu_u * smooth


def _estimate_pair_flow(
    source: Image,
    target: Image,
    start: FlowField,
    params: EnergyParams,
    config: PipelineConfig,
) -> FlowField:
    """TV-L1 flow from ``source`` to ``target`` at one pyramid level."""
    edge = edge_map(source, params.v_i)
    sigma = SigmaMap.constant(source.width, source.height, 0.0)
    zero = FlowField.zeros(source.width, source.height)
    pd = config.flow_pd()
    dual = np.zeros((2, 2) + start.shape)
    flow = start
    energy = _pair_energy(source, target, flow, edge, params)
    for _ in range(config.bootstrap_warps):
        pair = SequenceState(
            [
                FrameState(source, source, flow, zero, sigma, 0.0),
                FrameState(target, target, zero, zero, sigma, 0.0),
            ],
            [edge, edge],
        )
        grad, curvature = flow_linearization(pair, params, 0, FORWARD)
        proposal = update_flow(
            flow,
            grad,
            edge,
            params.nu_u,
            pd,
            dual,
            config.flow_trust_region,
            curvature,
        )
        base = flow

        def evaluate(step: float) -> Tuple[float, FlowField]:
            candidate = _blend_flow(base, proposal, step)
            return _pair_energy(source, target, candidate, edge, params), candidate

        found = _line_search(energy, evaluate, config.line_search_halvings)
        if found is None:
            break
        energy, flow = found
    return flow


def _pair_flows(
    frames: Sequence[Image],
    fwds: Sequence[FlowField],
    bwds: Sequence[FlowField],
    params: EnergyParams,
    config: PipelineConfig,
    i: int,
) -> Tuple[FlowField, FlowField]:
    forward = _estimate_pair_flow(frames[i], frames[i + 1], fwds[i], params, config)
    backward = _estimate_pair_flow(
        frames[i + 1], frames[i], bwds[i + 1], params, config
    )
    return forward, backward


def _bootstrap_levels(
    levels: Sequence[PyramidLevel], config: PipelineConfig
) -> Tuple[List[FlowField], List[FlowField]]:
    """TV-L1 flows refined over ``levels``, coarsest first, at the last grid."""
    count = len(levels[0].frames)
    params = replace(config.energy_params(), lam=0.0, n=1)
    if params.mu == 0:
        params = replace(params, mu=1.0)
    first = levels[0]
    fwds = [FlowField.zeros(first.width, first.height) for _ in range(count)]
    bwds = [FlowField.zeros(first.width, first.height) for _ in range(count)]
    for level in levels:
        fwds = [resample_flow(f, level.width, level.height) for f in fwds]
        bwds = [resample_flow(b, level.width, level.height) for b in bwds]
        pairs = parallel_map(
            partial(_pair_flows, level.frames, fwds, bwds, params, config),
            range(count - 1),
        )
        for i, (forward, backward) in enumerate(pairs):
            fwds[i] = forward
            bwds[i + 1] = backward
        logger.debug("Bootstrap flows done at %dx%d", level.width, level.height)
    return _mirror_boundaries(fwds, bwds)


def bootstrap_flows(
    blurries: Sequence[Image], config: PipelineConfig
) -> Tuple[List[FlowField], List[FlowField]]:
    """
    Coarse-to-fine TV-L1 flows between consecutive blurry frames.

    Uses the flow linearization and update with no blur model (no data
    term, one-frame temporal radius) on every pyramid level. Returns
    full-resolution forward and backward flows, with boundary halves
    mirrored. This is the stand-alone motion estimate of the blurry input;
    the joint pipeline only runs it on the coarsest level.
    """
    _check_frames(blurries)
    pyramid = build_pyramid(blurries, config.num_levels, config.scale)
    return _bootstrap_levels(list(pyramid), config)


def _starting_state(
    frames: Sequence[Image],
    fwds: Sequence[FlowField],
    bwds: Sequence[FlowField],
    config: PipelineConfig,
) -> SequenceState:
    taus = config.taus(len(frames))
    width, height = frames[0].width, frames[0].height
    sigma_value = config.sigma_init if config.enable_defocus else 0.0
    return SequenceState(
        [
            FrameState(
                blurry=b,
                latent=b,
                fwd=fwd,
                bwd=bwd,
                sigma=SigmaMap.constant(width, height, sigma_value),
                tau=tau,
            )
            for b, fwd, bwd, tau in zip(frames, fwds, bwds, taus)
        ]
    )


def initialize(blurries: Sequence[Image], config: PipelineConfig) -> SequenceState:
    """
    Full-resolution starting state.

    Latent frames start as the blurry frames, defocus maps as the constant
    ``sigma_init`` (zero with defocus disabled) and flows from the bootstrap
    on the coarsest pyramid level, resampled to the input grid.
    """
    _check_frames(blurries)
    pyramid = build_pyramid(blurries, config.num_levels, config.scale)
    fwds, bwds = _bootstrap_levels([pyramid.coarsest], config)
    width, height = blurries[0].width, blurries[0].height
    fwds = [resample_flow(f, width, height) for f in fwds]
    bwds = [resample_flow(b, width, height) for b in bwds]
    return _starting_state(blurries, fwds, bwds, config)


# ============================================================================
# Alternation
# ============================================================================


Candidate = Tuple[SequenceState, List[LinearOperator], EnergyBreakdown]


class _LevelSolver:
    """Alternation rounds of one pyramid level."""

    def __init__(
        self,
        state: SequenceState,
        config: PipelineConfig,
        energy_log: Optional[EnergyLog],
        verbose: bool = False,
    ):
        self.config = config
        self.verbose = verbose
        self.params = config.energy_params()
        self.energy_log = energy_log
        self.dual = DualState.for_state(state, self.params.n)
        self.state = state
        self.ops = state.blur_ops()
        # trust boxes stay centred on the estimates the level started from
        self.entry_fwds = state.fwds()
        self.entry_bwds = state.bwds()
        self.entry_sigmas = state.sigmas()
        self.energy = total_energy(state, self.params, self.ops)
        self.accepted = {"latent": 0, "flow": 0, "sigma": 0}
        self.rejected = {"latent": 0, "flow": 0, "sigma": 0}
        self.round = 0
        self.steps = 0

    def record(self, stage: str, breakdown: EnergyBreakdown) -> None:
        if self.energy_log is not None:
            self.energy_log.record(
                breakdown,
                level=self.state.level,
                round=self.round,
                stage=stage,
                iteration=self.steps,
            )

    def _abort(self, stage: str) -> NumericalAbortError:
        return NumericalAbortError(
            f"Non-finite values in {stage} update at level {self.state.level}, "
            f"round {self.round}",
            level=self.state.level,
            round_index=self.round,
        )

    def _evaluate(
        self, frames: List[FrameState], ops: Optional[List[LinearOperator]] = None
    ) -> Candidate:
        candidate = SequenceState(
            frames, list(self.state.edge_maps), self.state.level, self.state.data_masks
        )
        if ops is None:
            ops = candidate.blur_ops()
        return candidate, ops, total_energy(candidate, self.params, ops)

    def _accept(self, stage: str, found: Optional[Candidate]) -> None:
        self.steps += 1
        if found is None or found[2].total > self.energy.total:
            self.rejected[stage] += 1
            logger.debug(
                "Rejected %s step at level %d round %d",
                stage,
                self.state.level,
                self.round,
            )
            return
        self.state, self.ops, self.energy = found
        self.accepted[stage] += 1
        self.record(stage, self.energy)

    def _search(self, stage: str, evaluate: Callable[[float], Candidate]) -> None:
        """Back off the step 1, 1/2, 1/4, ... until the energy does not rise."""
        step = 1.0
        for _ in range(self.config.line_search_halvings + 1):
            found = evaluate(step)
            if found[2].total <= self.energy.total:
                self._accept(stage, found)
                return
            step *= 0.5
        self._accept(stage, None)

    def latent_step(self) -> None:
        try:
            latents = restore_latent(
                self.state, self.params, self.config.latent_pd(), self.dual, self.ops
            )
        except NumericalAbortError as e:
            raise self._abort("latent") from e
        frames = [replace(f, latent=L) for f, L in zip(self.state.frames, latents)]
        self._accept("latent", self._evaluate(frames, self.ops))

    def flow_step(self) -> None:
        state = self.state
        count = len(state)

        def linearized(i: int) -> Dict[int, Tuple[np.ndarray, np.ndarray]]:
            directions = _directions(i, count)
            mirrored = len(directions) == 1
            return {
                d: flow_linearization(state, self.params, i, d, mirrored)
                for d in directions
            }

        linearizations = parallel_map(linearized, range(count))
        pd = self.config.flow_pd()
        proposals: Dict[Tuple[int, int], FlowField] = {}
        for i, per_direction in enumerate(linearizations):
            frame = state.frames[i]
            for direction, (grad, curvature) in per_direction.items():
                if not (all_finite(grad) and all_finite(curvature)):
                    raise self._abort("flow")
                forward = direction == FORWARD
                proposals[(i, direction)] = update_flow(
                    frame.fwd if forward else frame.bwd,
                    grad,
                    state.edge_maps[i],
                    self.params.nu_u,
                    pd,
                    self.dual.p_fwd[i] if forward else self.dual.p_bwd[i],
                    self.config.flow_trust_region,
                    curvature,
                    self.entry_fwds[i] if forward else self.entry_bwds[i],
                )

        def blended(step: float) -> Candidate:
            fwds, bwds = state.fwds(), state.bwds()
            for (i, direction), proposal in proposals.items():
                flows = fwds if direction == FORWARD else bwds
                flows[i] = _blend_flow(flows[i], proposal, step)
            fwds, bwds = _mirror_boundaries(fwds, bwds)
            return self._evaluate(
                [
                    replace(f, fwd=fwd, bwd=bwd)
                    for f, fwd, bwd in zip(state.frames, fwds, bwds)
                ]
            )

        self._search("flow", blended)

    def sigma_step(self) -> None:
        state = self.state
        linearizations = parallel_map(
            lambda i: sigma_linearization(state, self.params, i), range(len(state))
        )
        pd = self.config.sigma_pd()
        proposals = []
        for i, (grad, curvature) in enumerate(linearizations):
            if not (all_finite(grad) and all_finite(curvature)):
                raise self._abort("sigma")
            proposals.append(
                update_sigma(
                    state.frames[i].sigma,
                    grad,
                    state.edge_maps[i],
                    self.params.nu_sigma,
                    pd,
                    self.dual.r[i],
                    self.config.sigma_trust_region,
                    self.config.sigma_max,
                    curvature,
                    self.entry_sigmas[i],
                )
            )

        def blended(step: float) -> Candidate:
            frames = []
            for f, p in zip(state.frames, proposals):
                sigma = f.sigma.sigma + step * (p.sigma - f.sigma.sigma)
                frames.append(replace(f, sigma=SigmaMap(np.maximum(sigma, 0.0))))
            return self._evaluate(frames)

        self._search("sigma", blended)

    def run(self) -> List[EnergyBreakdown]:
        history = []
        for round_index in range(self.config.alternation_rounds):
            self.round = round_index
            self.latent_step()
            self.flow_step()
            if self.config.enable_defocus:
                self.sigma_step()
            history.append(self.energy)
            log = logger.info if self.verbose else logger.debug
            log(
                "Level %d round %d: energy %.6g",
                self.state.level,
                round_index,
                self.energy.total,
            )
        return history


def _data_masks(state: SequenceState) -> List[np.ndarray]:
    """
    Per-frame pixels whose blur footprint lies inside the image.

    A frame whose valid share falls below DATA_MASK_MIN_FRACTION keeps all
    of its pixels, so tiny grids still carry a data term.
    """
    masks = []
    for index, frame in enumerate(state.frames):
        mask = blur_footprint_mask(frame.fwd, frame.bwd, frame.tau, frame.sigma)
        if mask.mean() < DATA_MASK_MIN_FRACTION:
            logger.debug(
                "Frame %d: %.1f%% of pixels have an interior footprint; using all",
                index,
                100.0 * mask.mean(),
            )
            mask = np.ones_like(mask)
        masks.append(mask)
    return masks


def _upsample_state(state: SequenceState, frames: Sequence[Image]) -> SequenceState:
    width, height = frames[0].width, frames[0].height
    return SequenceState(
        [
            FrameState(
                blurry=b,
                latent=resample_image(f.latent, width, height),
                fwd=resample_flow(f.fwd, width, height),
                bwd=resample_flow(f.bwd, width, height),
                sigma=resample_sigma(f.sigma, width, height),
                tau=f.tau,
            )
            for f, b in zip(state.frames, frames)
        ]
    )


def deblur_sequence(
    blurries: Sequence[Image],
    config: PipelineConfig,
    energy_log: Optional[EnergyLog] = None,
    verbose: bool = False,
) -> DeblurResult:
    """
    Jointly estimate latent frames, bidirectional flows and defocus maps.

    Raises:
        InsufficientFramesError: fewer than two frames.
        NumericalAbortError: non-finite values appeared; carries the level
            and round.
    """
    started = time.perf_counter()
    _check_frames(blurries)
    report = DeblurReport(frames=len(blurries), config=config.to_dict())
    pyramid = build_pyramid(blurries, config.num_levels, config.scale)
    coarsest = pyramid.coarsest
    fwds, bwds = _bootstrap_levels([coarsest], config)
    state = _starting_state(coarsest.frames, fwds, bwds, config)
    report.bootstrap_seconds = time.perf_counter() - started

    params = config.energy_params()
    for index, level in enumerate(pyramid):
        level_started = time.perf_counter()
        if index > 0:
            state = _upsample_state(state, level.frames)
        state.level = index
        state.edge_maps = [edge_map(f.latent, params.v_i) for f in state.frames]
        state.data_masks = _data_masks(state)

        solver = _LevelSolver(state, config, energy_log, verbose)
        energy_start = solver.energy
        solver.record("start", energy_start)
        history = solver.run()
        state = solver.state
        energy_end = solver.energy

        state = _occlusion_maps(state, config)
        state = state.with_latents(spatio_temporal_filter(state, config))
        report.levels.append(
            LevelReport(
                level=index,
                width=level.width,
                height=level.height,
                energy_start=energy_start,
                energy_end=energy_end,
                rounds=history,
                accepted_steps=dict(solver.accepted),
                rejected_steps=dict(solver.rejected),
                seconds=time.perf_counter() - level_started,
            )
        )
        logger.info(
            "Level %d/%d (%dx%d): energy %.6g -> %.6g",
            index + 1,
            len(pyramid),
            level.width,
            level.height,
            energy_start.total,
            energy_end.total,
        )

    report.seconds = time.perf_counter() - started
    return DeblurResult(
        latents=state.latents(),
        flows=list(zip(state.fwds(), state.bwds())),
        sigmas=state.sigmas(),
        report=report,
    )

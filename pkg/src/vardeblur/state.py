"""Per-frame estimation state threaded through the pyramid levels."""

from dataclasses import dataclass
from dataclasses import field
from dataclasses import replace
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple

import numpy as np

from .exceptions import DimensionMismatchError
from .imagecore import BilinearSampler
from .imagecore import FlowField
from .imagecore import Image
from .imagecore import SigmaMap
from .operators import LinearOperator
from .operators import build_blur_op

NeighbourFlow = Tuple[int, FlowField, np.ndarray]


@dataclass
class FrameState:
    blurry: Image
    latent: Image
    fwd: FlowField
    bwd: FlowField
    sigma: SigmaMap
    tau: float
    occlusion_fwd: Optional[np.ndarray] = None
    occlusion_bwd: Optional[np.ndarray] = None

    def blur_op(self) -> LinearOperator:
        return build_blur_op(self.fwd, self.bwd, self.tau, self.sigma)


@dataclass
class SequenceState:
    """
    Blurry inputs and current estimates for every frame at one pyramid level.

    ``edge_maps`` holds one weight map per frame, computed from the latent
    frames at the start of the level and frozen until the next level.
    ``data_masks`` is frozen the same way: per frame, the pixels whose blur
    footprint lies inside the image. None counts every pixel.
    """

    frames: List[FrameState]
    edge_maps: List[np.ndarray] = field(default_factory=list)
    level: int = 0
    data_masks: Optional[List[np.ndarray]] = None

    def __post_init__(self):
        self.validate()

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def width(self) -> int:
        return self.frames[0].blurry.width

    @property
    def height(self) -> int:
        return self.frames[0].blurry.height

    @property
    def channels(self) -> int:
        return self.frames[0].blurry.channels

    def validate(self) -> None:
        if not self.frames:
            raise DimensionMismatchError("Sequence state holds no frames")
        shape = self.frames[0].blurry.shape
        for index, frame in enumerate(self.frames):
            grids = {
                "blurry": frame.blurry.shape,
                "latent": frame.latent.shape,
                "fwd": frame.fwd.shape,
                "bwd": frame.bwd.shape,
                "sigma": frame.sigma.shape,
            }
            for name, grid in grids.items():
                if tuple(grid) != tuple(shape):
                    raise DimensionMismatchError(
                        f"Frame {index} {name} is {grid}, expected {shape}"
                    )
        for index, g in enumerate(self.edge_maps):
            if g.shape != shape:
                raise DimensionMismatchError(
                    f"Edge map {index} is {g.shape}, expected {shape}"
                )
        if self.data_masks is not None:
            if len(self.data_masks) != len(self.frames):
                raise DimensionMismatchError(
                    f"{len(self.data_masks)} data masks for {len(self.frames)} frames"
                )
            for index, mask in enumerate(self.data_masks):
                if mask.shape != shape:
                    raise DimensionMismatchError(
                        f"Data mask {index} is {mask.shape}, expected {shape}"
                    )

    def latents(self) -> List[Image]:
        return [f.latent for f in self.frames]

    def blurries(self) -> List[Image]:
        return [f.blurry for f in self.frames]

    def fwds(self) -> List[FlowField]:
        return [f.fwd for f in self.frames]

    def bwds(self) -> List[FlowField]:
        return [f.bwd for f in self.frames]

    def sigmas(self) -> List[SigmaMap]:
        return [f.sigma for f in self.frames]

    def blur_ops(self) -> List[LinearOperator]:
        return [f.blur_op() for f in self.frames]

    def with_frame(self, index: int, **changes) -> "SequenceState":
        """Copy of the state with one frame's fields replaced."""
        frames = list(self.frames)
        frames[index] = replace(frames[index], **changes)
        return self._rebuilt(frames)

    def with_latents(self, latents: Sequence[Image]) -> "SequenceState":
        frames = [replace(f, latent=L) for f, L in zip(self.frames, latents)]
        return self._rebuilt(frames)

    def data_mask(self, index: int) -> Optional[np.ndarray]:
        return None if self.data_masks is None else self.data_masks[index]

    def _rebuilt(self, frames: List[FrameState]) -> "SequenceState":
        return SequenceState(frames, list(self.edge_maps), self.level, self.data_masks)


def chain_flows(
    u_a: FlowField, u_b: FlowField, valid_a: Optional[np.ndarray] = None
) -> Tuple[FlowField, np.ndarray]:
    """
    Concatenate i->j and j->k flows into i->k.

    ``out(x) = u_a(x) + u_b(x + u_a(x))``, with ``u_b`` sampled bilinearly.
    The returned mask is False where x + u_a(x) leaves the image, intersected
    with ``valid_a`` when given.
    """
    if u_a.shape != u_b.shape:
        raise DimensionMismatchError(f"Cannot chain flows {u_a.shape} and {u_b.shape}")
    sampler = BilinearSampler(u_a.u, u_a.v)
    chained = FlowField(u_a.u + sampler.sample(u_b.u), u_a.v + sampler.sample(u_b.v))
    valid = sampler.valid if valid_a is None else sampler.valid & valid_a
    return chained, valid


def neighbour_flows(
    fwds: Sequence[FlowField], bwds: Sequence[FlowField], index: int, radius: int
) -> List[NeighbourFlow]:
    """
    Flows from frame ``index`` to every existing frame within ``radius``.

    Offsets beyond one frame are chained through the intermediate frames.
    Each entry is ``(offset, flow, valid)``.
    """
    out: List[NeighbourFlow] = []
    count = len(fwds)
    for sign, flows in ((1, fwds), (-1, bwds)):
        flow = flows[index]
        valid = np.ones(flow.shape, dtype=bool)
        for step in range(1, radius + 1):
            target = index + sign * step
            if not 0 <= target < count:
                break
            if step > 1:
                flow, valid = chain_flows(flow, flows[target - sign], valid)
            out.append((sign * step, flow, valid))
    out.sort(key=lambda entry: entry[0])
    return out

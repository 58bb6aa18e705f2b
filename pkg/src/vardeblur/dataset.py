"""
Synthetic ground truth and the evaluation metrics.

Scenes are rendered procedurally at a high subframe rate: a seeded noise
texture moved by the camera, with textured square sprites translating and
rotating on top. Averaging non-overlapping windows of k subframes gives the
blurry frames; the window mid-frame is the sharp ground truth, and the
analytic motion gives exact ground-truth flows.
"""

import logging
import math
from dataclasses import asdict
from dataclasses import dataclass
from dataclasses import field
from importlib import resources
from pathlib import Path
from typing import Any
from typing import Dict
from typing import List
from typing import NamedTuple
from typing import Optional
from typing import Sequence
from typing import Tuple

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.ndimage import map_coordinates

from .constants import DATASET_TAU
from .constants import FLOW_BWD_PATTERN
from .constants import FLOW_FWD_PATTERN
from .constants import FRAME_PATTERN
from .constants import MAX_SUBFRAME_SPEED
from .constants import PSNR_CAP
from .constants import SSIM_K1
from .constants import SSIM_K2
from .constants import SSIM_SIGMA
from .constants import SSIM_WINDOW_RADIUS
from .exceptions import ConfigError
from .exceptions import DimensionMismatchError
from .exceptions import FileFormatError
from .exceptions import SceneSpecError
from .imagecore import FlowField
from .imagecore import Image
from .imagecore import luminance
from .io import read_flo
from .io import read_frames
from .io import write_flo
from .io import write_png
from .utils import parallel_map
from .utils import read_json
from .utils import write_json

logger = logging.getLogger(__name__)

Vector = Tuple[float, float]
FlowPairs = List[Tuple[FlowField, FlowField]]

BUNDLED_SCENES = ("translate", "rotate", "shake", "static")


# ============================================================================
# Scene description
# ============================================================================


def _vector(raw: Any, name: str) -> Vector:
    if (
        not isinstance(raw, (list, tuple))
        or len(raw) != 2
        or not all(isinstance(v, (int, float)) for v in raw)
    ):
        raise SceneSpecError(f"{name} must be a pair of numbers, got {raw!r}")
    return float(raw[0]), float(raw[1])


@dataclass
class SpriteSpec:
    """
    Square textured sprite.

    ``position`` is the centre at subframe 0 in canvas pixels (x, y);
    ``velocity`` is in pixels per subframe and ``angular_velocity`` in
    radians per subframe about the centre.
    """

    texture_seed: int
    size: int
    position: Vector
    velocity: Vector = (0.0, 0.0)
    angular_velocity: float = 0.0

    def __post_init__(self):
        if self.size < 2:
            raise SceneSpecError(f"Sprite size must be >= 2 px, got {self.size}")

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "SpriteSpec":
        try:
            return cls(
                texture_seed=int(raw["texture_seed"]),
                size=int(raw["size"]),
                position=_vector(raw["position"], "position"),
                velocity=_vector(raw.get("velocity", (0.0, 0.0)), "velocity"),
                angular_velocity=float(raw.get("angular_velocity", 0.0)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise SceneSpecError(f"Invalid sprite spec: {e}") from e

    def centre(self, t: float, camera: "CameraSpec") -> np.ndarray:
        motion = np.asarray(self.position) + t * np.asarray(self.velocity)
        return motion + camera.displacement(t)

    def angle(self, t: float) -> float:
        return self.angular_velocity * t

    def reach(self) -> float:
        """Distance from the centre to a corner."""
        return self.size / math.sqrt(2.0)


@dataclass
class CameraSpec:
    """
    Apparent motion of the background, in pixels.

    ``d(t) = velocity * t + shake_amplitude * sin(2 pi t / shake_period)``,
    component-wise.
    """

    velocity: Vector = (0.0, 0.0)
    shake_amplitude: Vector = (0.0, 0.0)
    shake_period: float = 0.0

    def __post_init__(self):
        if any(self.shake_amplitude) and not self.shake_period > 0:
            raise SceneSpecError("Camera shake needs a positive shake_period")

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "CameraSpec":
        try:
            return cls(
                velocity=_vector(raw.get("velocity", (0.0, 0.0)), "velocity"),
                shake_amplitude=_vector(
                    raw.get("shake_amplitude", (0.0, 0.0)), "shake_amplitude"
                ),
                shake_period=float(raw.get("shake_period", 0.0)),
            )
        except (TypeError, ValueError) as e:
            raise SceneSpecError(f"Invalid camera spec: {e}") from e

    def displacement(self, t: float) -> np.ndarray:
        d = t * np.asarray(self.velocity)
        if self.shake_period > 0:
            phase = math.sin(2.0 * math.pi * t / self.shake_period)
            d = d + phase * np.asarray(self.shake_amplitude)
        return d


@dataclass
class SceneSpec:
    width: int
    height: int
    subframes: int
    background_seed: int = 0
    channels: int = 3
    texture_sigma: float = 1.5
    sprites: List[SpriteSpec] = field(default_factory=list)
    camera: CameraSpec = field(default_factory=CameraSpec)

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise SceneSpecError(f"Invalid canvas {self.width}x{self.height}")
        if self.subframes < 1:
            raise SceneSpecError(f"subframes must be >= 1, got {self.subframes}")
        if self.channels not in (1, 3):
            raise SceneSpecError(f"channels must be 1 or 3, got {self.channels}")
        if self.texture_sigma < 0:
            raise SceneSpecError("texture_sigma must be >= 0")
        self.validate()

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "SceneSpec":
        if not isinstance(raw, dict):
            raise SceneSpecError("Scene spec must be a JSON object")
        try:
            return cls(
                width=int(raw["width"]),
                height=int(raw["height"]),
                subframes=int(raw["subframes"]),
                background_seed=int(raw.get("background_seed", 0)),
                channels=int(raw.get("channels", 3)),
                texture_sigma=float(raw.get("texture_sigma", 1.5)),
                sprites=[SpriteSpec.from_dict(s) for s in raw.get("sprites", [])],
                camera=CameraSpec.from_dict(raw.get("camera", {})),
            )
        except (KeyError, TypeError, ValueError) as e:
            if isinstance(e, SceneSpecError):
                raise
            raise SceneSpecError(f"Invalid scene spec: {e}") from e

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def validate(self) -> None:
        """
        Enforce the subframe speed limit and sprite visibility.

        Speeds are bounded per subframe step by the translation plus the
        rotation speed of the farthest sprite corner.
        """
        steps = np.arange(max(self.subframes - 1, 1))
        shift = np.stack(
            [
                self.camera.displacement(t + 1) - self.camera.displacement(t)
                for t in steps
            ]
        )
        camera_speed = float(np.sqrt((shift**2).sum(axis=1)).max())
        if camera_speed >= MAX_SUBFRAME_SPEED:
            raise SceneSpecError(
                f"Camera moves {camera_speed:.3f} px per subframe, limit is "
                f"{MAX_SUBFRAME_SPEED}"
            )
        for index, sprite in enumerate(self.sprites):
            moved = shift + np.asarray(sprite.velocity)
            speed = float(np.sqrt((moved**2).sum(axis=1)).max())
            speed += abs(sprite.angular_velocity) * sprite.reach()
            if speed >= MAX_SUBFRAME_SPEED:
                raise SceneSpecError(
                    f"Sprite {index} moves up to {speed:.3f} px per subframe, "
                    f"limit is {MAX_SUBFRAME_SPEED}"
                )
            if not any(self._sprite_visible(sprite, t) for t in range(self.subframes)):
                raise SceneSpecError(f"Sprite {index} never enters the canvas")

    def _sprite_visible(self, sprite: SpriteSpec, t: int) -> bool:
        cx, cy = sprite.centre(t, self.camera)
        r = sprite.reach()
        inside_x = cx + r > 0 and cx - r < self.width
        return inside_x and cy + r > 0 and cy - r < self.height

    def margin(self) -> int:
        """Texture padding that keeps background samples inside the texture."""
        reach = max(
            float(np.abs(self.camera.displacement(t)).max())
            for t in range(self.subframes)
        )
        return int(math.ceil(reach)) + 2


def load_scene_spec(path: Path) -> SceneSpec:
    try:
        raw = read_json(path)
    except ValueError as e:
        raise SceneSpecError(f"{path}: not valid JSON ({e})") from e
    return SceneSpec.from_dict(raw)


def bundled_scene(name: str) -> SceneSpec:
    """One of the example scenes shipped with the package."""
    if name not in BUNDLED_SCENES:
        raise SceneSpecError(
            f"Unknown bundled scene {name!r}; choose from {', '.join(BUNDLED_SCENES)}"
        )
    source = resources.files("vardeblur").joinpath("scenes", f"{name}.json")
    with resources.as_file(source) as path:
        return load_scene_spec(path)


# ============================================================================
# Rendering
# ============================================================================


def make_texture(
    seed: int, height: int, width: int, channels: int, sigma: float
) -> np.ndarray:
    """Smoothed uniform noise stretched to [0.1, 0.9] per channel."""
    rng = np.random.default_rng(seed)
    noise = rng.random((height, width, channels))
    if sigma > 0:
        noise = gaussian_filter(noise, sigma=(sigma, sigma, 0), mode="wrap")
    low = noise.min(axis=(0, 1), keepdims=True)
    high = noise.max(axis=(0, 1), keepdims=True)
    span = np.where(high > low, high - low, 1.0)
    return 0.1 + 0.8 * (noise - low) / span


def _sample(texture: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    channels = [
        map_coordinates(texture[:, :, c], [rows, cols], order=1, mode="nearest")
        for c in range(texture.shape[2])
    ]
    return np.stack(channels, axis=-1)


def _rotation(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


class _Renderer:
    """Holds the scene textures so every subframe reuses them."""

    def __init__(self, spec: SceneSpec):
        self.spec = spec
        self.margin = spec.margin()
        self.background = make_texture(
            spec.background_seed,
            spec.height + 2 * self.margin,
            spec.width + 2 * self.margin,
            spec.channels,
            spec.texture_sigma,
        )
        self.sprites = [
            make_texture(
                s.texture_seed, s.size, s.size, spec.channels, spec.texture_sigma
            )
            for s in spec.sprites
        ]
        self.rows, self.cols = np.mgrid[0 : spec.height, 0 : spec.width].astype(
            np.float64
        )

    def _sprite_coords(
        self, sprite: SpriteSpec, t: float
    ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Texture coordinates of every canvas pixel and the coverage mask."""
        cx, cy = sprite.centre(t, self.spec.camera)
        inverse = _rotation(-sprite.angle(t))
        dx = self.cols - cx
        dy = self.rows - cy
        half = (sprite.size - 1) / 2.0
        local_x = inverse[0, 0] * dx + inverse[0, 1] * dy + half
        local_y = inverse[1, 0] * dx + inverse[1, 1] * dy + half
        inside = (
            (local_x >= 0)
            & (local_x <= sprite.size - 1)
            & (local_y >= 0)
            & (local_y <= sprite.size - 1)
        )
        return local_y, local_x, inside

    def owner(self, t: float) -> np.ndarray:
        """Index of the topmost sprite at every pixel, -1 for background."""
        owner = np.full((self.spec.height, self.spec.width), -1)
        for index, sprite in enumerate(self.spec.sprites):
            _, _, inside = self._sprite_coords(sprite, t)
            owner[inside] = index
        return owner

    def frame(self, t: float) -> Image:
        d = self.spec.camera.displacement(t)
        out = _sample(
            self.background,
            self.rows - d[1] + self.margin,
            self.cols - d[0] + self.margin,
        )
        for sprite, texture in zip(self.spec.sprites, self.sprites):
            local_y, local_x, inside = self._sprite_coords(sprite, t)
            if inside.any():
                values = _sample(texture, local_y[inside], local_x[inside])
                out[inside] = values
        return Image(out)

    def flow(self, t: float, dt: float) -> FlowField:
        """Displacement of the content at subframe ``t`` after ``dt`` subframes."""
        camera = self.spec.camera
        shift = camera.displacement(t + dt) - camera.displacement(t)
        u = np.full(self.rows.shape, shift[0])
        v = np.full(self.rows.shape, shift[1])
        owner = self.owner(t)
        for index, sprite in enumerate(self.spec.sprites):
            mask = owner == index
            if not mask.any():
                continue
            start = sprite.centre(t, camera)
            end = sprite.centre(t + dt, camera)
            turn = _rotation(sprite.angle(t + dt) - sprite.angle(t))
            rel_x = self.cols[mask] - start[0]
            rel_y = self.rows[mask] - start[1]
            new_x = end[0] + turn[0, 0] * rel_x + turn[0, 1] * rel_y
            new_y = end[1] + turn[1, 0] * rel_x + turn[1, 1] * rel_y
            u[mask] = new_x - self.cols[mask]
            v[mask] = new_y - self.rows[mask]
        return FlowField(u, v)


def render_scene(spec: SceneSpec) -> List[Image]:
    """Every sharp subframe of the scene, deterministic for a given spec."""
    renderer = _Renderer(spec)
    return parallel_map(renderer.frame, range(spec.subframes))


def scene_flow(spec: SceneSpec, t: float, dt: float) -> FlowField:
    """Exact flow from subframe ``t`` to subframe ``t + dt``."""
    return _Renderer(spec).flow(t, dt)


# ============================================================================
# Blur synthesis
# ============================================================================


@dataclass
class BlurPair:
    blurry: Image
    sharp_gt: Image
    gt_flow_fwd: Optional[FlowField] = None
    gt_flow_bwd: Optional[FlowField] = None
    tau: float = DATASET_TAU


def pre_blur(frame: Image, sigma: float) -> Image:
    if sigma == 0:
        return frame
    return Image(gaussian_filter(frame.data, sigma=(sigma, sigma, 0), mode="nearest"))


def average_frames(frames: Sequence[Image]) -> Image:
    return Image(np.stack([f.data for f in frames]).mean(axis=0))


def synthesize_blur(
    subframes: Sequence[Image],
    k: int,
    pre_blur_sigma: float = 0.0,
    scene: Optional[SceneSpec] = None,
) -> List[BlurPair]:
    """
    Average non-overlapping windows of ``k`` subframes into blurry frames.

    The Gaussian pre-blur is applied to the subframes before averaging and
    never to the ground truth, which is the window's mid-frame. With
    ``scene`` the pairs carry ground-truth flows from each mid-frame to the
    previous and next mid-frames, k subframes away. Trailing subframes that
    do not fill a window are dropped.
    """
    if k < 1 or k % 2 == 0:
        raise ConfigError(f"k must be a positive odd number, got {k}")
    if pre_blur_sigma < 0:
        raise ConfigError(f"pre_blur_sigma must be >= 0, got {pre_blur_sigma}")
    if len(subframes) < k:
        raise ConfigError(f"Need at least k={k} subframes, got {len(subframes)}")
    windows = len(subframes) // k
    if len(subframes) % k:
        logger.debug("Dropping %d trailing subframes", len(subframes) % k)
    blurred = parallel_map(lambda f: pre_blur(f, pre_blur_sigma), subframes)
    renderer = _Renderer(scene) if scene is not None else None

    def build(w: int) -> BlurPair:
        start = w * k
        mid = start + k // 2
        pair = BlurPair(
            blurry=average_frames(blurred[start : start + k]),
            sharp_gt=subframes[mid],
        )
        if renderer is not None:
            pair.gt_flow_fwd = renderer.flow(mid, k)
            pair.gt_flow_bwd = renderer.flow(mid, -k)
        return pair

    return parallel_map(build, range(windows))


# ============================================================================
# Metrics
# ============================================================================


def _check_pair(a: Image, b: Image) -> None:
    if a.data.shape != b.data.shape:
        raise DimensionMismatchError(
            f"Images differ in shape: {a.data.shape} != {b.data.shape}"
        )


def psnr(a: Image, b: Image) -> float:
    """Peak signal-to-noise ratio in dB for intensities in [0, 1], capped."""
    _check_pair(a, b)
    mse = float(np.mean((a.data - b.data) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def ssim(a: Image, b: Image) -> float:
    """
    Mean structural similarity of the luminance channels.

    Gaussian window with std 1.5 truncated to 11x11, dynamic range 1,
    averaged over the pixels whose window lies inside the image.
    """
    _check_pair(a, b)
    radius = SSIM_WINDOW_RADIUS
    if min(a.height, a.width) < 2 * radius + 1:
        raise ConfigError(
            f"SSIM needs images of at least {2 * radius + 1} px, got "
            f"{a.width}x{a.height}"
        )
    if np.array_equal(a.data, b.data):
        return 1.0
    x = luminance(a.data)
    y = luminance(b.data)
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2

    def window(array: np.ndarray) -> np.ndarray:
        filtered = gaussian_filter(
            array, sigma=SSIM_SIGMA, truncate=radius / SSIM_SIGMA, mode="reflect"
        )
        return filtered[radius:-radius, radius:-radius]

    mu_x = window(x)
    mu_y = window(y)
    var_x = window(x * x) - mu_x**2
    var_y = window(y * y) - mu_y**2
    cov = window(x * y) - mu_x * mu_y
    numerator = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    denominator = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    return float(np.mean(numerator / denominator))


def epe(
    flow: FlowField, gt: FlowField, mask: Optional[np.ndarray] = None
) -> float:
    """Mean end-point error over the pixels selected by ``mask``."""
    if flow.shape != gt.shape:
        raise DimensionMismatchError(f"Flow {flow.shape} vs ground truth {gt.shape}")
    if mask is None:
        mask = np.ones(flow.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != flow.shape:
        raise DimensionMismatchError(f"Mask {mask.shape} vs flow {flow.shape}")
    if not mask.any():
        raise ConfigError("EPE mask selects no pixels")
    error = np.sqrt((flow.u - gt.u) ** 2 + (flow.v - gt.v) ** 2)
    return float(error[mask].mean())


# ============================================================================
# Dataset tree
# ============================================================================


class Dataset(NamedTuple):
    blurries: List[Image]
    sharps: List[Image]
    flows: Optional[FlowPairs]
    manifest: Dict[str, Any]


def write_dataset(
    pairs: Sequence[BlurPair], out_dir: Path, manifest: Dict[str, Any]
) -> Path:
    """Write ``blurry/``, ``sharp/``, ``flow/`` and ``manifest.json``."""
    out_dir = Path(out_dir)
    for sub in ("blurry", "sharp"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    for i, pair in enumerate(pairs):
        write_png(out_dir / "blurry" / FRAME_PATTERN.format(i), pair.blurry)
        write_png(out_dir / "sharp" / FRAME_PATTERN.format(i), pair.sharp_gt)
        if pair.gt_flow_fwd is not None and pair.gt_flow_bwd is not None:
            write_flo(out_dir / "flow" / FLOW_FWD_PATTERN.format(i), pair.gt_flow_fwd)
            write_flo(out_dir / "flow" / FLOW_BWD_PATTERN.format(i), pair.gt_flow_bwd)
    entry = dict(manifest)
    entry.setdefault("frames", len(pairs))
    entry.setdefault("tau", DATASET_TAU)
    write_json(out_dir / "manifest.json", entry)
    logger.info("Wrote %d blur pairs to %s", len(pairs), out_dir)
    return out_dir


def read_flows(directory: Path, count: int) -> Optional[FlowPairs]:
    """Forward/backward flow pairs, or None when any file is missing."""
    directory = Path(directory)
    flows = []
    for i in range(count):
        fwd = directory / FLOW_FWD_PATTERN.format(i)
        bwd = directory / FLOW_BWD_PATTERN.format(i)
        if not (fwd.is_file() and bwd.is_file()):
            return None
        flows.append((read_flo(fwd), read_flo(bwd)))
    return flows


def load_dataset(directory: Path) -> Dataset:
    directory = Path(directory)
    sharps = read_frames(directory / "sharp")
    blurry_dir = directory / "blurry"
    blurries = read_frames(blurry_dir) if blurry_dir.is_dir() else []
    if blurries and len(blurries) != len(sharps):
        raise FileFormatError(
            f"{directory}: {len(blurries)} blurry frames but {len(sharps)} sharp"
        )
    manifest_path = directory / "manifest.json"
    manifest = read_json(manifest_path) if manifest_path.is_file() else {}
    return Dataset(
        blurries=blurries,
        sharps=sharps,
        flows=read_flows(directory / "flow", len(sharps)),
        manifest=manifest,
    )

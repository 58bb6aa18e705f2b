"""vardeblur

Joint estimation of latent sharp frames, bidirectional optical flow and
defocus blur maps from a blurry video, by coarse-to-fine variational
energy minimization.
"""

from .__version__ import __version__
from .dataset import BlurPair
from .dataset import CameraSpec
from .dataset import SceneSpec
from .dataset import SpriteSpec
from .dataset import epe
from .dataset import load_dataset
from .dataset import psnr
from .dataset import render_scene
from .dataset import ssim
from .dataset import synthesize_blur
from .dataset import write_dataset
from .energy import EnergyBreakdown
from .energy import EnergyLog
from .energy import EnergyParams
from .energy import total_energy
from .exceptions import ConfigError
from .exceptions import DimensionMismatchError
from .exceptions import FileFormatError
from .exceptions import InsufficientFramesError
from .exceptions import NumericalAbortError
from .exceptions import SceneSpecError
from .exceptions import SolverDivergenceError
from .exceptions import VarDeblurError
from .imagecore import FlowField
from .imagecore import Image
from .imagecore import SigmaMap
from .imagecore import build_pyramid
from .imagecore import warp_bilinear
from .io import read_flo
from .io import read_frames
from .io import read_pfm
from .io import read_png
from .io import write_flo
from .io import write_pfm
from .io import write_png
from .operators import DefocusOp
from .operators import MotionBlurOp
from .operators import build_blur_op
from .operators import build_defocus_op
from .operators import build_motion_blur_op
from .pipeline import DeblurResult
from .pipeline import PipelineConfig
from .pipeline import chain_flows
from .pipeline import deblur_sequence
from .pipeline import detect_occlusion
from .pipeline import initialize
from .pipeline import spatio_temporal_filter
from .solvers import PDConfig
from .solvers import restore_latent
from .solvers import update_flow
from .solvers import update_sigma
from .state import FrameState
from .state import SequenceState

__all__ = [
    # Version
    "__version__",
    # Grids
    "Image",
    "FlowField",
    "SigmaMap",
    "build_pyramid",
    "warp_bilinear",
    # File formats
    "read_png",
    "read_frames",
    "write_png",
    "read_flo",
    "write_flo",
    "read_pfm",
    "write_pfm",
    # Blur operators
    "MotionBlurOp",
    "DefocusOp",
    "build_motion_blur_op",
    "build_defocus_op",
    "build_blur_op",
    # Energy and solvers
    "EnergyParams",
    "EnergyBreakdown",
    "EnergyLog",
    "total_energy",
    "PDConfig",
    "restore_latent",
    "update_flow",
    "update_sigma",
    # Pipeline
    "PipelineConfig",
    "FrameState",
    "SequenceState",
    "DeblurResult",
    "initialize",
    "chain_flows",
    "detect_occlusion",
    "spatio_temporal_filter",
    "deblur_sequence",
    # Dataset and metrics
    "SceneSpec",
    "SpriteSpec",
    "CameraSpec",
    "BlurPair",
    "render_scene",
    "synthesize_blur",
    "write_dataset",
    "load_dataset",
    "psnr",
    "ssim",
    "epe",
    # Exceptions
    "VarDeblurError",
    "DimensionMismatchError",
    "ConfigError",
    "InsufficientFramesError",
    "SceneSpecError",
    "FileFormatError",
    "NumericalAbortError",
    "SolverDivergenceError",
]

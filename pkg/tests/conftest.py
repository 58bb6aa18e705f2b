"""
pytest configuration and shared fixtures for vardeblur tests.
"""

import os
import sys

import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

# Add src to Python path for imports during testing
sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from vardeblur.imagecore import FlowField  # noqa: E402
from vardeblur.imagecore import Image  # noqa: E402
from vardeblur.imagecore import SigmaMap  # noqa: E402
from vardeblur.state import FrameState  # noqa: E402
from vardeblur.state import SequenceState  # noqa: E402


def textured(height, width, channels=1, seed=0, sigma=1.5):
    """Smooth seeded noise in [0.1, 0.9]."""
    rng = np.random.default_rng(seed)
    noise = gaussian_filter(
        rng.random((height, width, channels)), sigma=(sigma, sigma, 0), mode="wrap"
    )
    noise -= noise.min()
    noise /= noise.max()
    return Image(0.1 + 0.8 * noise)


def sequence_state(latents, blurries=None, sigma=0.0, tau=0.5, flows=None):
    """Sequence with zero (or given) flows and a constant blur map."""
    blurries = blurries or latents
    height, width = latents[0].shape
    frames = []
    for i, (L, B) in enumerate(zip(latents, blurries)):
        fwd, bwd = flows[i] if flows else (FlowField.zeros(width, height),) * 2
        frames.append(
            FrameState(
                blurry=B,
                latent=L,
                fwd=fwd,
                bwd=bwd,
                sigma=SigmaMap.constant(width, height, sigma),
                tau=tau,
            )
        )
    return SequenceState(frames)


def model_blurries(state):
    """Blurry frames that exactly match the state's own blur model."""
    return [Image(f.blur_op().apply(f.latent.data)) for f in state.frames]


# ============================================================================
# Image fixtures
# ============================================================================


@pytest.fixture
def rng():
    """Seeded generator so randomized tests are reproducible."""
    return np.random.default_rng(1234)


@pytest.fixture
def make_textured():
    """Factory for seeded textured images."""
    return textured


@pytest.fixture
def make_state():
    """Factory for sequence states, see sequence_state."""
    return sequence_state


@pytest.fixture
def blur_with():
    """Re-blur the latents of a state with its own operators."""
    return model_blurries


@pytest.fixture
def gray_image():
    """32x32 single-channel textured image."""
    return textured(32, 32, 1, seed=1)


@pytest.fixture
def color_image():
    """24x20 three-channel textured image."""
    return textured(24, 20, 3, seed=2)


@pytest.fixture
def zero_flow():
    return FlowField.zeros(32, 32)


@pytest.fixture
def zero_sigma():
    return SigmaMap.constant(32, 32, 0.0)


@pytest.fixture
def static_sequence():
    """Three identical 24x24 textured frames."""
    frame = textured(24, 24, 1, seed=3)
    return [frame, frame, frame]


# ============================================================================
# Parametrized fixtures for testing with different inputs
# ============================================================================


@pytest.fixture(params=[0.25, 0.5, 1.0])
def tau(request):
    """Parametrized fixture for different duty cycles."""
    return request.param


@pytest.fixture(params=[1, 3])
def channels(request):
    """Parametrized fixture for gray and colour images."""
    return request.param


# ============================================================================
# Pytest configuration hooks
# ============================================================================


def pytest_addoption(parser):
    parser.addoption(
        "--runslow", action="store_true", default=False, help="run slow tests"
    )


def pytest_configure(config):
    """Configure pytest with custom markers."""
    config.addinivalue_line(
        "markers", "slow: marks tests as slow (deselect with '-m \"not slow\"')"
    )
    config.addinivalue_line("markers", "integration: marks tests as integration tests")
    config.addinivalue_line("markers", "unit: marks tests as unit tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)

"""Readers and writers for frames (PNG), flows (Middlebury .flo) and blur maps (PFM)."""

import logging
from pathlib import Path
from typing import List
from typing import Union

import numpy as np
from PIL import Image as PILImage

from .constants import FLO_TAG
from .constants import PFM_GRAY_HEADER
from .constants import PFM_LITTLE_ENDIAN_SCALE
from .exceptions import FileFormatError
from .imagecore import FlowField
from .imagecore import Image
from .imagecore import SigmaMap

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def read_png(path: PathLike) -> Image:
    """Read an 8-bit PNG, mapping 0..255 linearly onto [0, 1]."""
    try:
        with PILImage.open(path) as pil:
            if pil.mode in ("L", "RGB"):
                converted = pil
            elif pil.mode in ("LA", "I", "I;16"):
                converted = pil.convert("L")
            else:
                converted = pil.convert("RGB")
            array = np.asarray(converted, dtype=np.uint8)
    except PILImage.UnidentifiedImageError as e:
        raise FileFormatError(f"Not a readable image: {path}") from e
    return Image(array.astype(np.float64) / 255.0)


def write_png(path: PathLike, img: Image) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    array = np.clip(np.round(img.data * 255.0), 0, 255).astype(np.uint8)
    if img.channels == 1:
        pil = PILImage.fromarray(array[:, :, 0])
    else:
        pil = PILImage.fromarray(array)
    pil.save(path, format="PNG")


def _read_floats(f, count: int, dtype: str) -> np.ndarray:
    raw = f.read(4 * count)
    return np.frombuffer(raw[: len(raw) - len(raw) % 4], dtype=dtype)


def read_flo(path: PathLike) -> FlowField:
    """
    Read a Middlebury .flo file

    Layout: 4-byte tag "PIEH", int32 width, int32 height, then width*height
    interleaved (u, v) float32 pairs, all little-endian.
    """
    with open(path, "rb") as f:
        tag = f.read(4)
        if tag != FLO_TAG:
            raise FileFormatError(f"Bad .flo magic {tag!r} in {path}")
        header = f.read(8)
        if len(header) != 8:
            raise FileFormatError(f"Truncated .flo header in {path}")
        dims = np.frombuffer(header, dtype="<i4")
        if dims[0] <= 0 or dims[1] <= 0:
            raise FileFormatError(f"Bad .flo dimensions in {path}")
        width, height = int(dims[0]), int(dims[1])
        data = _read_floats(f, 2 * width * height, "<f4")
    if data.size != 2 * width * height:
        raise FileFormatError(
            f"Truncated .flo file {path}: expected {2 * width * height} values, "
            f"got {data.size}"
        )
    data = data.reshape(height, width, 2).astype(np.float64)
    return FlowField.from_array(data)


def write_flo(path: PathLike, flow: FlowField) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(FLO_TAG)
        np.array([flow.width, flow.height], dtype="<i4").tofile(f)
        flow.as_array().astype("<f4").tofile(f)


def read_pfm(path: PathLike) -> SigmaMap:
    """Read a single-channel PFM file (rows stored bottom to top)."""
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header != PFM_GRAY_HEADER:
            raise FileFormatError(f"Unsupported PFM header {header!r} in {path}")
        try:
            width, height = (int(t) for t in f.readline().split())
            scale = float(f.readline().strip())
        except ValueError as e:
            raise FileFormatError(f"Bad PFM header in {path}") from e
        dtype = "<f4" if scale < 0 else ">f4"
        data = _read_floats(f, width * height, dtype)
    if data.size != width * height:
        raise FileFormatError(f"Truncated PFM file {path}")
    data = np.flipud(data.reshape(height, width)).astype(np.float64)
    return SigmaMap(data)


def write_pfm(path: PathLike, sigma: SigmaMap) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(PFM_GRAY_HEADER + b"\n")
        f.write(f"{sigma.width} {sigma.height}\n".encode("ascii"))
        f.write(f"{PFM_LITTLE_ENDIAN_SCALE}\n".encode("ascii"))
        np.flipud(sigma.sigma).astype("<f4").tofile(f)


def list_frames(directory: PathLike) -> List[Path]:
    """Sorted PNG files of a frame directory."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"Frame directory not found: {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() == ".png")


def read_frames(directory: PathLike) -> List[Image]:
    frames = [read_png(p) for p in list_frames(directory)]
    logger.debug("Read %d frames from %s", len(frames), directory)
    return frames

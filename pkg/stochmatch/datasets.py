"""
Synthetic fixtures and annotation converters.

Provides the ellipse landmark pair, the blurred triangle image pair and a
reader for ASF point annotations, which is how the cardiac outline data is
distributed, so those files can be turned into the `i,x,y` landmark CSV.
"""

import logging
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np
from matplotlib.path import Path as Polygon
from scipy.ndimage import gaussian_filter

from .errors import ConfigurationError, DataFormatError
from .images import ImageField
from .io import PathLike, save_landmarks
from .landmarks import LandmarkConfig

logger = logging.getLogger(__name__)

SOURCE_AXES = (1.0, 0.6)
TARGET_AXES = (0.7, 0.9)

TRIANGLE = ((20.0, 16.0), (44.0, 32.0), (20.0, 48.0))


def ellipse(
    n: int, axes: Sequence[float], center: Sequence[float] = (0.0, 0.0), phase: float = 0.0
) -> LandmarkConfig:
    """n points equally spaced in angle on an axis-aligned ellipse."""
    if n < 1:
        raise ConfigurationError(f"n must be at least 1, got {n}")
    angles = phase + 2.0 * np.pi * np.arange(n) / n
    points = np.stack([axes[0] * np.cos(angles), axes[1] * np.sin(angles)], axis=-1)
    return LandmarkConfig(points + np.asarray(center, dtype=float))


def ellipse_pair(n: int = 10) -> Tuple[LandmarkConfig, LandmarkConfig]:
    """Source and target ellipses with corresponding landmarks."""
    return ellipse(n, SOURCE_AXES), ellipse(n, TARGET_AXES)


def triangle_image(
    shape: Tuple[int, int] = (64, 64),
    vertices: Sequence[Tuple[float, float]] = TRIANGLE,
    sigma: float = 2.0,
    shift: Tuple[float, float] = (0.0, 0.0),
) -> ImageField:
    """
    Filled triangle of intensity 1 on 0, blurred with a Gaussian.

    Args:
        shape: Grid size (n_x, n_y)
        vertices: Triangle corners in pixel coordinates
        sigma: Blur width in pixels (0 disables the blur)
        shift: Translation applied to the vertices

    Returns:
        ImageField with unit spacing and origin 0
    """
    corners = np.asarray(vertices, dtype=float) + np.asarray(shift, dtype=float)
    nx, ny = shape
    gx, gy = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    inside = Polygon(corners).contains_points(np.stack([gx.ravel(), gy.ravel()], axis=-1))
    data = inside.reshape(shape).astype(float)
    if sigma > 0:
        data = gaussian_filter(data, sigma, mode="nearest")
    return ImageField(data)


def triangle_pair(
    shape: Tuple[int, int] = (64, 64), sigma: float = 2.0, shift: Tuple[float, float] = (3.0, 2.0)
) -> Tuple[ImageField, ImageField]:
    """A blurred triangle and a translated copy."""
    return triangle_image(shape, sigma=sigma), triangle_image(shape, sigma=sigma, shift=shift)


def read_asf(path: PathLike, image_size: Optional[Tuple[float, float]] = None) -> LandmarkConfig:
    """
    Read the point list of an ASF annotation.

    ASF stores a point count followed by one line per point,
    `path type x y index from to`, with coordinates relative to the image
    size. Lines starting with '#' are comments.

    Args:
        path: ASF file
        image_size: (width, height) to convert relative coordinates to pixels

    Returns:
        LandmarkConfig in annotation order

    Raises:
        DataFormatError: On a missing count, a malformed point line or a count mismatch
    """
    path = Path(path)
    if not path.is_file():
        raise DataFormatError(path, "file not found")
    lines = [
        (number, line.strip())
        for number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1)
        if line.strip() and not line.lstrip().startswith("#")
    ]
    if not lines:
        raise DataFormatError(path, "no landmarks")
    number, head = lines[0]
    try:
        count = int(head)
    except ValueError as e:
        raise DataFormatError(path, f"expected the point count, got '{head}'", line=number) from e
    if len(lines) - 1 < count:
        raise DataFormatError(path, f"expected {count} points, found {len(lines) - 1}")

    points = np.empty((count, 2))
    for k, (number, line) in enumerate(lines[1 : count + 1]):
        fields = line.split()
        if len(fields) < 4:
            raise DataFormatError(path, "malformed point line", line=number)
        try:
            points[k] = float(fields[2]), float(fields[3])
        except ValueError as e:
            raise DataFormatError(path, "non-numeric coordinate", line=number) from e
    if image_size is not None:
        points *= np.asarray(image_size, dtype=float)
    logger.debug("Read %d points from %s", count, path)
    return LandmarkConfig(points)


def convert_asf(
    source: PathLike, destination: PathLike, image_size: Optional[Tuple[float, float]] = None
) -> LandmarkConfig:
    """Convert an ASF annotation to the landmark CSV format."""
    config = read_asf(source, image_size)
    save_landmarks(destination, config)
    logger.info("Converted %s -> %s (%d landmarks)", source, destination, config.n)
    return config

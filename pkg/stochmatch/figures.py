"""
SVG figures: landmark strings with covariance ellipses, template evolution,
and image snapshot montages.

Figures are rendered with matplotlib's object API on the Agg backend and
saved as SVG with a fixed hash salt and no date, so identical inputs give
identical files.
"""

import io
import logging
from typing import List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import numpy as np  # noqa: E402
from matplotlib.figure import Figure  # noqa: E402
from matplotlib.patches import Ellipse  # noqa: E402

from .errors import ConfigurationError  # noqa: E402
from .images import ImageField  # noqa: E402

logger = logging.getLogger(__name__)

HASH_SALT = "stochmatch"

# Ellipses are drawn at two standard deviations
N_SIGMA = 2.0


def _to_svg(figure: Figure) -> bytes:
    buffer = io.BytesIO()
    with matplotlib.rc_context({"svg.hashsalt": HASH_SALT, "svg.fonttype": "none"}):
        figure.savefig(buffer, format="svg", metadata={"Date": None})
    return buffer.getvalue()


def covariance_ellipse(center: np.ndarray, cov: np.ndarray, gid: str, **style) -> Optional[Ellipse]:
    """2-sigma ellipse of a 2x2 covariance, or None when the covariance vanishes."""
    eigenvalues, eigenvectors = np.linalg.eigh(cov)
    eigenvalues = np.clip(eigenvalues, 0.0, None)
    if eigenvalues[-1] <= 0.0:
        return None
    major = eigenvectors[:, -1]
    angle = float(np.degrees(np.arctan2(major[1], major[0])))
    width, height = 2.0 * N_SIGMA * np.sqrt(eigenvalues[::-1])
    ellipse = Ellipse(tuple(center), float(width), float(height), angle=angle, **style)
    ellipse.set_gid(gid)
    return ellipse


def emit_svg_strings(
    source: np.ndarray,
    target: np.ndarray,
    strings: Sequence[np.ndarray],
    mean_string: Optional[np.ndarray] = None,
    endpoints: Optional[np.ndarray] = None,
    covariances: Optional[np.ndarray] = None,
    t_stride: int = 1,
    title: str = "",
) -> bytes:
    """
    Draw sampled strings, the mean string, endpoint samples and covariance ellipses.

    Args:
        source: Source configuration (N, 2)
        target: Target configuration (N, 2)
        strings: Trajectories (n_t, N, 2) to draw thinly
        mean_string: Mean trajectory drawn boldly, also the ellipse centers
        endpoints: Endpoint samples (S, N, 2)
        covariances: Per-(t, i) covariances (n_t, N, 2, 2); ellipse gid is "cov-{k}-{i}"
        t_stride: Draw ellipses at every t_stride-th grid time
        title: Axes title

    Returns:
        SVG document bytes

    Raises:
        ConfigurationError: If there is no string to draw
    """
    if len(strings) == 0 and mean_string is None:
        raise ConfigurationError("missing artifact: no strings to draw")
    figure = Figure(figsize=(6, 6))
    ax = figure.add_subplot()

    for q in strings:
        for i in range(q.shape[1]):
            ax.plot(q[:, i, 0], q[:, i, 1], color="0.6", linewidth=0.4, alpha=0.5)
    if endpoints is not None and len(endpoints):
        flat = np.asarray(endpoints).reshape(-1, 2)
        ax.scatter(flat[:, 0], flat[:, 1], s=2, color="tab:purple", alpha=0.4, label="endpoints")
    if mean_string is not None:
        for i in range(mean_string.shape[1]):
            ax.plot(mean_string[:, i, 0], mean_string[:, i, 1], color="black", linewidth=1.2)

    n_ellipses = 0
    if covariances is not None:
        centers = mean_string if mean_string is not None else strings[0]
        for k in range(0, covariances.shape[0], max(1, t_stride)):
            for i in range(covariances.shape[1]):
                ellipse = covariance_ellipse(
                    centers[k, i],
                    covariances[k, i],
                    f"cov-{k}-{i}",
                    fill=False,
                    edgecolor="tab:red",
                    linewidth=0.6,
                )
                if ellipse is not None:
                    ax.add_patch(ellipse)
                    n_ellipses += 1

    ax.plot(*np.asarray(source).T, "o", color="tab:blue", markersize=4, label="source")
    ax.plot(*np.asarray(target).T, "x", color="tab:green", markersize=5, label="target")
    ax.set_aspect("equal")
    ax.legend(loc="best", fontsize="small")
    if title:
        ax.set_title(title)
    logger.debug("Strings figure: %d strings, %d ellipses", len(strings), n_ellipses)
    return _to_svg(figure)


def emit_svg_mean_evolution(
    history: Sequence[np.ndarray], observations: Optional[np.ndarray] = None
) -> bytes:
    """Template iterates from light to dark over the observations."""
    if len(history) == 0:
        raise ConfigurationError("missing artifact: empty template history")
    figure = Figure(figsize=(6, 6))
    ax = figure.add_subplot()
    if observations is not None:
        for obs in observations:
            closed = np.vstack([obs, obs[:1]])
            ax.plot(closed[:, 0], closed[:, 1], color="0.75", linewidth=0.5)
    shades = np.linspace(0.2, 1.0, len(history))
    for shade, template in zip(shades, history):
        closed = np.vstack([template, template[:1]])
        color = (shade * 0.8, 0.1, 0.4 * (1 - shade))
        ax.plot(closed[:, 0], closed[:, 1], color=color, linewidth=1.0)
    ax.set_aspect("equal")
    return _to_svg(figure)


def emit_svg_montage(
    snapshots: List[ImageField], times: Sequence[float] = (0.0, 0.24, 0.49, 0.75, 1.0)
) -> bytes:
    """Row of g_t . I_0 snapshots."""
    if len(snapshots) == 0:
        raise ConfigurationError("missing artifact: no snapshots")
    figure = Figure(figsize=(2.2 * len(snapshots), 2.4))
    for index, (image, t) in enumerate(zip(snapshots, times)):
        ax = figure.add_subplot(1, len(snapshots), index + 1)
        ax.imshow(
            image.data.T, cmap="gray", vmin=0.0, vmax=1.0, origin="upper", interpolation="nearest"
        )
        ax.set_title(f"t={t:g}", fontsize="small")
        ax.set_axis_off()
    return _to_svg(figure)

"""
File formats: landmark CSV, PGM images, noise-basis JSON, run configuration,
trajectory and statistics CSVs, and the artifact writer that keeps the
manifest inventory.
"""

import hashlib
import json
import logging
import os
import threading
from pathlib import Path
from typing import Iterable, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import ValidationError

from .errors import DataFormatError
from .images import ImageField, VelocityString
from .kernels import NoiseBasis
from .landmarks import LandmarkConfig
from .models import FileRecord, NoiseBasisDocument, RunConfig, RunManifest

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]

# 17 significant digits round-trip every float64
FLOAT_FORMAT = "%.17g"

LANDMARK_COLUMNS = ["i", "x", "y"]
TRAJECTORY_COLUMNS = ["s", "t", "i", "qx", "qy", "px", "py"]
STATISTICS_COLUMNS = ["t", "i", "mx", "my", "cxx", "cxy", "cyy"]
VELOCITY_COLUMNS = ["t", "k", "x", "y", "ux", "uy"]


def _read_table(path: PathLike) -> pd.DataFrame:
    if not Path(path).is_file():
        raise DataFormatError(path, "file not found")
    try:
        return pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except pd.errors.EmptyDataError as e:
        raise DataFormatError(path, "no landmarks") from e
    except pd.errors.ParserError as e:
        raise DataFormatError(path, f"malformed CSV: {e}") from e


def load_landmarks(path: PathLike) -> LandmarkConfig:
    """
    Read a landmark CSV with header `i,x,y`.

    Rows must be sorted by index, with indices contiguous from 0.

    Args:
        path: CSV file

    Returns:
        LandmarkConfig with one point per row

    Raises:
        DataFormatError: On a missing file, empty table, malformed row,
            duplicate, unsorted or missing index or non-finite coordinate,
            naming the line
    """
    table = _read_table(path)
    columns = [str(c).strip() for c in table.columns]
    if columns != LANDMARK_COLUMNS:
        raise DataFormatError(path, f"expected header 'i,x,y', got '{','.join(columns)}'", line=1)
    if table.empty:
        raise DataFormatError(path, "no landmarks")

    seen = {}
    for row_number, row in enumerate(table.itertuples(index=False, name=None)):
        line = row_number + 2
        raw = ",".join("" if not isinstance(v, str) else v for v in row)
        try:
            index = int(row[0])
            x, y = float(row[1]), float(row[2])
        except (TypeError, ValueError) as e:
            raise DataFormatError(path, f"malformed row '{raw}'", line=line) from e
        if not (np.isfinite(x) and np.isfinite(y)):
            raise DataFormatError(path, f"non-finite coordinate in row '{raw}'", line=line)
        if index in seen:
            raise DataFormatError(
                path, f"duplicate index {index} (first seen on line {seen[index][0]})", line=line
            )
        if index != row_number:
            raise DataFormatError(
                path,
                f"indices must be sorted and contiguous from 0: expected {row_number}, got {index}",
                line=line,
            )
        seen[index] = (line, x, y)

    points = np.array([[x, y] for _, x, y in seen.values()])
    logger.debug("Loaded %d landmarks from %s", len(seen), path)
    return LandmarkConfig(points)


def landmark_frame(points: np.ndarray) -> pd.DataFrame:
    points = np.asarray(points, dtype=float)
    return pd.DataFrame({"i": np.arange(points.shape[0]), "x": points[:, 0], "y": points[:, 1]})


def save_landmarks(path: PathLike, config: Union[LandmarkConfig, np.ndarray]) -> None:
    points = config.points if isinstance(config, LandmarkConfig) else config
    landmark_frame(points).to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def _pgm_tokens(payload: bytes, path: PathLike, count: int) -> Tuple[List[bytes], int]:
    """Read count header tokens, skipping comments; return the tokens and the end offset."""
    tokens: List[bytes] = []
    pos = 0
    while len(tokens) < count:
        while pos < len(payload) and payload[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(payload):
            raise DataFormatError(path, f"truncated header at byte offset {pos}")
        if payload[pos : pos + 1] == b"#":
            end = payload.find(b"\n", pos)
            pos = len(payload) if end < 0 else end + 1
            continue
        start = pos
        while pos < len(payload) and not payload[pos : pos + 1].isspace():
            pos += 1
        tokens.append(payload[start:pos])
    return tokens, pos


def load_image(path: PathLike) -> ImageField:
    """
    Read a PGM image (P2 or P5) and rescale intensities to [0, 1].

    The returned field has data[i, j] = pixel in column i, row j.

    Raises:
        DataFormatError: On a missing file, bad magic, malformed header or truncated payload
    """
    if not Path(path).is_file():
        raise DataFormatError(path, "file not found")
    payload = Path(path).read_bytes()
    magic = payload[:2]
    if magic not in (b"P2", b"P5"):
        raise DataFormatError(path, f"bad magic {magic!r}, expected P2 or P5", line=1)

    tokens, pos = _pgm_tokens(payload, path, 4)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as e:
        raise DataFormatError(path, f"malformed header {b' '.join(tokens)!r}", line=1) from e
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise DataFormatError(path, f"invalid dimensions {width}x{height} or maxval {maxval}")

    n_pixels = width * height
    if magic == b"P5":
        offset = pos + 1
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        expected = n_pixels * dtype.itemsize
        if len(payload) - offset < expected:
            raise DataFormatError(
                path,
                f"truncated payload: {len(payload) - offset} of {expected} bytes "
                f"at byte offset {offset}",
            )
        raster = np.frombuffer(payload, dtype=dtype, count=n_pixels, offset=offset)
    else:
        values = payload[pos:].split()
        if len(values) < n_pixels:
            raise DataFormatError(path, f"truncated payload: {len(values)} of {n_pixels} values")
        try:
            raster = np.array([int(v) for v in values[:n_pixels]])
        except ValueError as e:
            raise DataFormatError(path, "non-integer pixel value") from e

    image = raster.astype(float).reshape(height, width).T / maxval
    logger.debug("Loaded %dx%d image from %s", width, height, path)
    return ImageField(image)


def encode_pgm(image: ImageField) -> bytes:
    """8-bit binary PGM bytes, intensities clipped to [0, 1]."""
    data = np.clip(image.data, 0.0, 1.0)
    raster = np.round(data.T * 255).astype(np.uint8)
    height, width = raster.shape
    return f"P5\n{width} {height}\n255\n".encode("ascii") + raster.tobytes()


def save_image(path: PathLike, image: ImageField) -> None:
    """Write an 8-bit binary PGM, clipping intensities to [0, 1]."""
    Path(path).write_bytes(encode_pgm(image))


def load_noise_basis(path: PathLike) -> NoiseBasis:
    """Read a noise-basis JSON document."""
    if not Path(path).is_file():
        raise DataFormatError(path, "file not found")
    text = Path(path).read_text(encoding="utf-8")
    try:
        document = NoiseBasisDocument.model_validate(json.loads(text))
    except json.JSONDecodeError as e:
        raise DataFormatError(path, e.msg, line=e.lineno) from e
    except ValidationError as e:
        raise DataFormatError(path, f"invalid noise basis: {e.errors()[0]['msg']}") from e
    return NoiseBasis.from_document(document)


def save_noise_basis(path: PathLike, basis: NoiseBasis) -> None:
    Path(path).write_text(basis.to_document().model_dump_json(indent=2) + "\n", encoding="utf-8")


def _resolve(value, base: Path):
    if not isinstance(value, str) or Path(value).is_absolute():
        return value
    return str(base / value)


def _resolve_paths(document: dict, base: Path) -> None:
    """Rewrite relative file paths of a raw configuration document in place."""
    problem = document.get("problem")
    if isinstance(problem, dict):
        for key in ("source", "target", "source_image", "target_image"):
            if key in problem:
                problem[key] = _resolve(problem[key], base)
        noise = problem.get("noise")
        if isinstance(noise, dict) and "file" in noise:
            noise["file"] = _resolve(noise["file"], base)
    observations = document.get("observations")
    if isinstance(observations, dict):
        if isinstance(observations.get("files"), list):
            observations["files"] = [_resolve(f, base) for f in observations["files"]]
        if isinstance(observations.get("sample"), dict):
            sample = observations["sample"]
            sample["momentum"] = _resolve(sample.get("momentum"), base)
    sampling = document.get("sampling")
    if isinstance(sampling, dict):
        sampling["momentum"] = _resolve(sampling.get("momentum"), base)
    document["output_dir"] = _resolve(document.get("output_dir", "out"), base)


def load_config(path: PathLike, command: Optional[str] = None) -> RunConfig:
    """
    Read and validate a run configuration.

    Relative data paths and the output directory resolve against the
    directory holding the configuration file.

    Args:
        path: JSON configuration file
        command: Command to run, replacing any `command` key of the document

    Raises:
        DataFormatError: If the file is missing or not a JSON object
        pydantic.ValidationError: If the document violates the schema
    """
    path = Path(path)
    if not path.is_file():
        raise DataFormatError(path, "file not found")
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataFormatError(path, e.msg, line=e.lineno) from e
    if not isinstance(document, dict):
        raise DataFormatError(path, "configuration must be a JSON object", line=1)
    if command is not None:
        document["command"] = command
    _resolve_paths(document, path.resolve().parent)
    return RunConfig.model_validate(document)


def trajectory_frame(strings: Iterable[Tuple[np.ndarray, np.ndarray]]) -> pd.DataFrame:
    """Long table s,t,i,qx,qy,px,py for a sequence of (q, p) strings indexed by s."""
    frames = []
    for s, (q, p) in enumerate(strings):
        n_t, n = q.shape[:2]
        t = np.repeat(np.linspace(0.0, 1.0, n_t), n)
        frames.append(
            pd.DataFrame(
                {
                    "s": s,
                    "t": t,
                    "i": np.tile(np.arange(n), n_t),
                    "qx": q[..., 0].ravel(),
                    "qy": q[..., 1].ravel(),
                    "px": p[..., 0].ravel(),
                    "py": p[..., 1].ravel(),
                }
            )
        )
    if not frames:
        return pd.DataFrame(columns=TRAJECTORY_COLUMNS)
    return pd.concat(frames, ignore_index=True)[TRAJECTORY_COLUMNS]


def read_trajectories(path: PathLike) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Inverse of trajectory_frame for a CSV file."""
    table = pd.read_csv(path)
    if list(table.columns) != TRAJECTORY_COLUMNS:
        raise DataFormatError(path, f"expected header '{','.join(TRAJECTORY_COLUMNS)}'", line=1)
    strings = []
    for _, group in table.groupby("s", sort=True):
        n_t = group["t"].nunique()
        n = group["i"].nunique()
        q = group[["qx", "qy"]].to_numpy().reshape(n_t, n, 2)
        p = group[["px", "py"]].to_numpy().reshape(n_t, n, 2)
        strings.append((q, p))
    return strings


def statistics_frame(mean: np.ndarray, cov: np.ndarray) -> pd.DataFrame:
    """Long table t,i,mx,my,cxx,cxy,cyy of per-(t, i) endpoint moments."""
    n_t, n = mean.shape[:2]
    return pd.DataFrame(
        {
            "t": np.repeat(np.linspace(0.0, 1.0, n_t), n),
            "i": np.tile(np.arange(n), n_t),
            "mx": mean[..., 0].ravel(),
            "my": mean[..., 1].ravel(),
            "cxx": cov[..., 0, 0].ravel(),
            "cxy": cov[..., 0, 1].ravel(),
            "cyy": cov[..., 1, 1].ravel(),
        }
    )[STATISTICS_COLUMNS]


def velocity_frame(us: VelocityString, image: ImageField) -> pd.DataFrame:
    """Long table t,k,x,y,ux,uy of a velocity string on the image grid."""
    coords = image.coordinates().reshape(-1, 2)
    n_t = us.n_t
    n_pixels = coords.shape[0]
    return pd.DataFrame(
        {
            "t": np.repeat(np.linspace(0.0, 1.0, n_t), n_pixels),
            "k": np.repeat(np.arange(n_t), n_pixels),
            "x": np.tile(coords[:, 0], n_t),
            "y": np.tile(coords[:, 1], n_t),
            "ux": us.u[..., 0].ravel(),
            "uy": us.u[..., 1].ravel(),
        }
    )[VELOCITY_COLUMNS]


class ArtifactWriter:
    """
    Serialized writer for run outputs.

    Every file goes through this writer, which records its SHA-256 for the
    manifest. The manifest itself is written last.
    """

    def __init__(self, output_dir: PathLike):
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.records: List[FileRecord] = []
        self._lock = threading.Lock()

    def _record(self, name: str, payload: bytes) -> Path:
        target = self.output_dir / name
        with self._lock:
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_bytes(payload)
            self.records = [r for r in self.records if r.path != name]
            self.records.append(
                FileRecord(path=name, sha256=hashlib.sha256(payload).hexdigest(), size=len(payload))
            )
        logger.info("Wrote %s", target)
        return target

    def write_bytes(self, name: str, payload: bytes) -> Path:
        return self._record(name, payload)

    def write_text(self, name: str, text: str) -> Path:
        return self._record(name, text.encode("utf-8"))

    def write_csv(self, name: str, frame: pd.DataFrame) -> Path:
        text = frame.to_csv(index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        return self.write_text(name, text)

    def write_manifest(self, manifest: RunManifest, name: str = "manifest.json") -> Path:
        """Write the manifest with the current inventory (the manifest does not list itself)."""
        with self._lock:
            files = sorted(self.records, key=lambda r: r.path)
            manifest = manifest.model_copy(update={"files": files})
        target = self.output_dir / name
        target.write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")
        logger.info("Wrote %s", target)
        return target


def read_manifest(path: PathLike) -> RunManifest:
    return RunManifest.model_validate_json(Path(path).read_text(encoding="utf-8"))

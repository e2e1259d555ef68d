"""Image preparation: normalization, resizing, and slide tiling.

Raw images are uint8 arrays of shape (H, W, 3). The model consumes float
tensors of shape (3, H, W) with values in [0, 1]. Large slides are cut into
overlapping square tiles on a fixed stride grid, filtered by how much
non-background tissue each tile contains, and the surviving tile set is
described by a small CSV manifest.
"""

from __future__ import annotations

import dataclasses
import os
from typing import Optional

import numpy as np

from .autodiff import Tensor
from .errors import ContractError, DataError, FormatError, ParseError

MANIFEST_COLUMNS = ("slide_id", "x", "y", "size", "tissue_fraction", "accepted")


def validate_raw_image(image: np.ndarray) -> np.ndarray:
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise FormatError(f"raw image must have shape (H, W, 3), got {arr.shape}")
    if arr.dtype != np.uint8:
        raise FormatError(f"raw image must be uint8, got {arr.dtype}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise FormatError(f"raw image must be non-empty, got shape {arr.shape}")
    return arr


def normalize(image: np.ndarray) -> Tensor:
    """uint8 (H, W, 3) -> float (3, H, W) in [0, 1], dividing by 255."""
    arr = validate_raw_image(image)
    scaled = arr.astype(np.float64) / 255.0
    return Tensor(np.transpose(scaled, (2, 0, 1)))


def denormalize(tensor: Tensor) -> np.ndarray:
    """Inverse of normalize: float (3, H, W) -> uint8 (H, W, 3).

    Values are clipped to [0, 1] and rounded half away from zero, so
    denormalize(normalize(img)) == img exactly.
    """
    if tensor.ndim != 3 or tensor.shape[0] != 3:
        raise ContractError(f"denormalize expects shape (3, H, W), got {tensor.shape}")
    hw3 = np.transpose(tensor.data, (1, 2, 0))
    scaled = np.clip(hw3, 0.0, 1.0) * 255.0
    return np.floor(scaled + 0.5).astype(np.uint8)


def _axis_sources(out_extent: int, in_extent: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # half-pixel-center sampling; returns (lo index, hi index, hi weight)
    scale = in_extent / out_extent
    coords = (np.arange(out_extent, dtype=np.float64) + 0.5) * scale - 0.5
    coords = np.clip(coords, 0.0, in_extent - 1.0)
    lo = np.floor(coords).astype(np.int64)
    lo = np.minimum(lo, in_extent - 1)
    hi = np.minimum(lo + 1, in_extent - 1)
    w = coords - lo
    return lo, hi, w


def resize(tensor: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of a (3, H, W) tensor with half-pixel centers.

    Sample positions are clamped at the borders (edge padding). Output is
    clipped to [0, 1]. A same-size resize returns the input object itself.
    """
    if tensor.ndim != 3 or tensor.shape[0] != 3:
        raise ContractError(f"resize expects shape (3, H, W), got {tensor.shape}")
    if out_h < 1 or out_w < 1:
        raise ContractError(f"resize target must be positive, got {out_h}x{out_w}")
    _, in_h, in_w = tensor.shape
    if (out_h, out_w) == (in_h, in_w):
        return tensor
    y_lo, y_hi, wy = _axis_sources(out_h, in_h)
    x_lo, x_hi, wx = _axis_sources(out_w, in_w)
    src = tensor.data
    top = src[:, y_lo, :]
    bot = src[:, y_hi, :]
    rows = top + wy[None, :, None] * (bot - top)
    left = rows[:, :, x_lo]
    right = rows[:, :, x_hi]
    out = left + wx[None, None, :] * (right - left)
    return Tensor(np.clip(out, 0.0, 1.0))


def tissue_fraction(tile: np.ndarray, bg_threshold: int = 220) -> float:
    """Fraction of pixels carrying tissue rather than bright background.

    A pixel is background when all three channels exceed ``bg_threshold``;
    every other pixel counts as tissue. The tile must be square.
    """
    arr = validate_raw_image(tile)
    if arr.shape[0] != arr.shape[1]:
        raise ContractError(f"tissue_fraction expects a square tile, got {arr.shape}")
    if not 0 <= bg_threshold <= 255:
        raise ContractError(f"bg_threshold must be in [0, 255], got {bg_threshold}")
    background = np.all(arr > bg_threshold, axis=2)
    return float(1.0 - background.mean())


@dataclasses.dataclass
class TileRecord:
    """One window cut from a slide: position, size, and the filter verdict."""

    slide_id: str
    x: int
    y: int
    size: int
    tissue_fraction: float
    accepted: bool


def _axis_offsets(extent: int, size: int, stride: int) -> list[int]:
    # stride grid, then one flush-to-edge window if the grid leaves a gap
    offsets = list(range(0, extent - size + 1, stride))
    if offsets[-1] + size < extent:
        offsets.append(extent - size)
    return offsets


def tile_slide(
    image: np.ndarray,
    slide_id: str,
    tile_size: int = 512,
    stride: int = 256,
    bg_threshold: int = 220,
    min_tissue: float = 0.05,
) -> list[TileRecord]:
    """Cut a slide into square windows on a stride grid and filter each one.

    Windows walk the grid in raster order (rows of increasing y, x fastest).
    When the grid does not reach the far edge, a final window flush against
    that edge is added per axis. Every window is recorded; ``accepted`` marks
    those whose tissue fraction is >= ``min_tissue``.
    """
    arr = validate_raw_image(image)
    h, w = arr.shape[0], arr.shape[1]
    if tile_size < 1 or tile_size > min(h, w):
        raise ContractError(f"tile_size {tile_size} out of range for {h}x{w} slide")
    if stride < 1 or stride > tile_size:
        raise ContractError(f"stride must be in [1, tile_size], got {stride}")
    if not 0.0 <= min_tissue <= 1.0:
        raise ContractError(f"min_tissue must be in [0, 1], got {min_tissue}")
    records = []
    for y in _axis_offsets(h, tile_size, stride):
        for x in _axis_offsets(w, tile_size, stride):
            window = arr[y : y + tile_size, x : x + tile_size]
            frac = tissue_fraction(window, bg_threshold)
            records.append(
                TileRecord(
                    slide_id=slide_id,
                    x=x,
                    y=y,
                    size=tile_size,
                    tissue_fraction=frac,
                    accepted=frac >= min_tissue,
                )
            )
    return records


def extract_tile(image: np.ndarray, record: TileRecord) -> np.ndarray:
    arr = validate_raw_image(image)
    if record.y + record.size > arr.shape[0] or record.x + record.size > arr.shape[1]:
        raise ContractError(f"tile at ({record.x}, {record.y}) size {record.size} exceeds image {arr.shape}")
    return arr[record.y : record.y + record.size, record.x : record.x + record.size].copy()


def write_manifest(
    path: str,
    records: list[TileRecord],
    bg_threshold: int = 220,
    min_tissue: float = 0.05,
    stride: int = 256,
) -> None:
    """Write tile records as CSV with a single leading comment line that
    pins the filter settings. Floats use repr so reading restores them
    bit-exactly."""
    lines = [f"# bg_threshold={bg_threshold} min_tissue={repr(float(min_tissue))} stride={stride}"]
    lines.append(",".join(MANIFEST_COLUMNS))
    for r in records:
        lines.append(
            f"{r.slide_id},{r.x},{r.y},{r.size},{repr(float(r.tissue_fraction))},{'true' if r.accepted else 'false'}"
        )
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_manifest(path: str) -> tuple[list[TileRecord], dict]:
    """Read a manifest back; returns (records, settings dict).

    Raises ParseError with the offending line number on malformed input.
    """
    if not os.path.exists(path):
        raise DataError(f"manifest not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        raw_lines = fh.read().splitlines()
    settings: dict = {}
    records: list[TileRecord] = []
    header_seen = False
    for lineno, line in enumerate(raw_lines, start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            for token in line[1:].split():
                if "=" not in token:
                    raise ParseError(f"{path}:{lineno}: bad settings token {token!r}")
                key, value = token.split("=", 1)
                try:
                    settings[key] = float(value) if "." in value or "e" in value.lower() else int(value)
                except ValueError as e:
                    raise ParseError(f"{path}:{lineno}: bad settings value {token!r}") from e
            continue
        if not header_seen:
            if tuple(line.split(",")) != MANIFEST_COLUMNS:
                raise ParseError(f"{path}:{lineno}: unexpected header {line!r}")
            header_seen = True
            continue
        parts = line.split(",")
        if len(parts) != len(MANIFEST_COLUMNS):
            raise ParseError(f"{path}:{lineno}: expected {len(MANIFEST_COLUMNS)} fields, got {len(parts)}")
        try:
            record = TileRecord(
                slide_id=parts[0],
                x=int(parts[1]),
                y=int(parts[2]),
                size=int(parts[3]),
                tissue_fraction=float(parts[4]),
                accepted={"true": True, "false": False}[parts[5]],
            )
        except (ValueError, KeyError) as e:
            raise ParseError(f"{path}:{lineno}: bad field value ({e})") from e
        if record.x < 0 or record.y < 0 or record.size < 1:
            raise ParseError(f"{path}:{lineno}: tile geometry out of range")
        if not 0.0 <= record.tissue_fraction <= 1.0:
            raise ParseError(f"{path}:{lineno}: tissue_fraction outside [0, 1]")
        records.append(record)
    if not header_seen:
        raise ParseError(f"{path}:1: missing header line")
    return records, settings


def load_rgb_image(path: str) -> np.ndarray:
    """Decode a PNG or JPEG file into a uint8 (H, W, 3) array."""
    from PIL import Image, UnidentifiedImageError

    if not os.path.exists(path):
        raise DataError(f"image not found: {path}")
    try:
        with Image.open(path) as img:
            converted = img.convert("RGB") if img.mode != "RGB" else img
            arr = np.asarray(converted, dtype=np.uint8)
    except UnidentifiedImageError as e:
        raise FormatError(f"not a decodable image: {path}") from e
    except OSError as e:
        raise FormatError(f"failed to read image {path}: {e}") from e
    return validate_raw_image(arr)


def save_rgb_png(path: str, image: np.ndarray) -> None:
    from PIL import Image

    arr = validate_raw_image(image)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def prepare_input(image: np.ndarray, image_size: int) -> Tensor:
    """Full input path: normalize then resize to the model's square input."""
    return resize(normalize(image), image_size, image_size)

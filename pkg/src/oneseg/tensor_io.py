"""Load and persist feature grids, images, and masks; resize between resolutions.

Feature grids are (H, W, D) float32 arrays, masks are (H, W) bool arrays and
heatmaps are (H, W) float32 arrays. Working precision is 32-bit throughout with
reductions accumulated in 64-bit.
"""
from __future__ import annotations

import ast
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DecodeError, MalformedHeader, ShapeMismatch, UnsupportedDtype

NPY_MAGIC = b"\x93NUMPY"

_ACCEPTED_DESCR = {"<f4": np.float32, "<f8": np.float64}


def _read_npy(path: str | Path) -> np.ndarray:
    """Parse an NPY v1.0/v2.0 file. Little-endian float payload, C order only."""
    raw = Path(path).read_bytes()
    if len(raw) < 10 or raw[:6] != NPY_MAGIC:
        raise MalformedHeader(f"{path}: missing NPY magic")
    major, _minor = raw[6], raw[7]
    if major == 1:
        header_len = int.from_bytes(raw[8:10], "little")
        offset = 10 + header_len
        header_bytes = raw[10:offset]
    elif major == 2:
        if len(raw) < 12:
            raise MalformedHeader(f"{path}: truncated v2 header")
        header_len = int.from_bytes(raw[8:12], "little")
        offset = 12 + header_len
        header_bytes = raw[12:offset]
    else:
        raise MalformedHeader(f"{path}: unsupported NPY version {major}")
    if len(raw) < offset:
        raise MalformedHeader(f"{path}: header shorter than declared length")

    try:
        header = ast.literal_eval(header_bytes.decode("latin1").strip())
    except (ValueError, SyntaxError) as exc:
        raise MalformedHeader(f"{path}: unparseable header dict") from exc
    if not isinstance(header, dict) or not {"descr", "fortran_order", "shape"} <= set(header):
        raise MalformedHeader(f"{path}: header missing required keys")
    if header["fortran_order"] is not False:
        raise MalformedHeader(f"{path}: fortran_order must be False")

    descr = header["descr"]
    if descr not in _ACCEPTED_DESCR:
        raise UnsupportedDtype(f"{path}: dtype {descr!r} not in {sorted(_ACCEPTED_DESCR)}")
    dtype = np.dtype(_ACCEPTED_DESCR[descr]).newbyteorder("<")

    shape = header["shape"]
    if not isinstance(shape, tuple) or not all(isinstance(n, int) and n >= 0 for n in shape):
        raise MalformedHeader(f"{path}: bad shape entry {shape!r}")

    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    payload = raw[offset:]
    if len(payload) != expected:
        raise MalformedHeader(
            f"{path}: payload is {len(payload)} bytes, header implies {expected}"
        )
    return np.frombuffer(payload, dtype=dtype).reshape(shape)


def _format_header(descr: str, shape: tuple[int, ...]) -> bytes:
    shape_repr = "(" + ", ".join(str(n) for n in shape) + ("," if len(shape) == 1 else "") + ")"
    body = f"{{'descr': '{descr}', 'fortran_order': False, 'shape': {shape_repr}, }}"
    # pad with spaces so that magic+version+len+header is a multiple of 64, ending in \n
    unpadded = 10 + len(body) + 1
    body += " " * (-unpadded % 64)
    return (body + "\n").encode("latin1")


def write_npy(path: str | Path, array: np.ndarray) -> None:
    """Write a C-ordered array as NPY v1.0. Supports float32/float64/int32."""
    descr_map = {np.dtype(np.float32): "<f4", np.dtype(np.float64): "<f8",
                 np.dtype(np.int32): "<i4"}
    arr = np.ascontiguousarray(array)
    if arr.dtype not in descr_map:
        raise UnsupportedDtype(f"cannot write dtype {arr.dtype}")
    header = _format_header(descr_map[arr.dtype], arr.shape)
    with open(path, "wb") as fh:
        fh.write(NPY_MAGIC)
        fh.write(bytes([1, 0]))
        fh.write(len(header).to_bytes(2, "little"))
        fh.write(header)
        fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C"))


def load_npy_tensor(path: str | Path) -> np.ndarray:
    """Load a 3-D (H, W, D) feature grid; float64 files are narrowed to float32."""
    arr = _read_npy(path)
    if arr.ndim != 3:
        raise ShapeMismatch(f"{path}: expected 3-D [H, W, D], got shape {arr.shape}")
    return np.ascontiguousarray(arr, dtype=np.float32)


def save_feature_grid(path: str | Path, grid: np.ndarray) -> None:
    write_npy(path, np.asarray(grid, dtype=np.float32))


def normalize_features(grid: np.ndarray) -> np.ndarray:
    """L2-normalize each patch vector; zero vectors stay zero.

    Raises ValueError on non-finite input, since downstream cosine scores
    assume bounded values.
    """
    grid = np.asarray(grid, dtype=np.float32)
    if not np.isfinite(grid).all():
        raise ValueError("feature grid contains non-finite values")
    norms = np.linalg.norm(grid.astype(np.float64), axis=-1, keepdims=True)
    safe = np.where(norms > 0, norms, 1.0)
    return (grid / safe).astype(np.float32)


# ---------------------------------------------------------------------------
# mask / image files


def load_mask(path: str | Path, threshold: float = 127.5) -> np.ndarray:
    """Read an 8-bit grayscale PNG/PGM mask; pixel values above threshold are true."""
    try:
        with Image.open(path) as img:
            if img.mode not in ("L", "1", "P"):
                raise DecodeError(f"{path}: expected 8-bit grayscale, got mode {img.mode}")
            arr = np.asarray(img.convert("L"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as exc:
        raise DecodeError(f"{path}: {exc}") from exc
    return arr > threshold


def save_mask(path: str | Path, mask: np.ndarray) -> None:
    """Write a boolean mask as a single-channel 0/255 PNG (or PGM by extension)."""
    data = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path)


def load_image(path: str | Path) -> np.ndarray:
    """Read an image as (H, W, 3) uint8 RGB."""
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as exc:
        raise DecodeError(f"{path}: {exc}") from exc


def save_heatmap(path: str | Path, heatmap: np.ndarray, png_path: str | Path | None = None) -> None:
    """Persist a heatmap as float32 NPY, with an optional 8-bit PNG visualization."""
    write_npy(path, np.asarray(heatmap, dtype=np.float32))
    if png_path is not None:
        vis = np.clip(np.rint(np.asarray(heatmap, dtype=np.float64) * 255.0), 0, 255)
        Image.fromarray(vis.astype(np.uint8), mode="L").save(png_path)


# ---------------------------------------------------------------------------
# resampling

def _source_coords(n_out: int, n_in: int) -> np.ndarray:
    # half-pixel-center mapping: src = (i + 0.5) * (in / out) - 0.5, clamped
    scale = n_in / n_out
    return np.clip((np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5, 0.0, n_in - 1.0)


def resize_bilinear(heatmap: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with half-pixel centers; constant inputs stay constant."""
    if out_h <= 0 or out_w <= 0:
        raise ValueError("output dims must be positive")
    src = np.asarray(heatmap, dtype=np.float64)
    in_h, in_w = src.shape
    ys = _source_coords(out_h, in_h)
    xs = _source_coords(out_w, in_w)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = src[np.ix_(y0, x0)] * (1 - fx) + src[np.ix_(y0, x1)] * fx
    bottom = src[np.ix_(y1, x0)] * (1 - fx) + src[np.ix_(y1, x1)] * fx
    return (top * (1 - fy) + bottom * fy).astype(np.float32)


def resize_nearest(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor mask resampling using the same half-pixel-center mapping."""
    if out_h <= 0 or out_w <= 0:
        raise ValueError("output dims must be positive")
    src = np.asarray(mask)
    in_h, in_w = src.shape
    ys = np.clip(np.floor(_source_coords(out_h, in_h) + 0.5).astype(np.intp), 0, in_h - 1)
    xs = np.clip(np.floor(_source_coords(out_w, in_w) + 0.5).astype(np.intp), 0, in_w - 1)
    return src[np.ix_(ys, xs)]


def minmax_normalize(raw: np.ndarray) -> np.ndarray:
    """Rescale to [0, 1]; a constant input collapses to all zeros."""
    arr = np.asarray(raw, dtype=np.float64)
    lo = arr.min()
    hi = arr.max()
    if hi == lo:
        return np.zeros_like(arr, dtype=np.float32)
    return ((arr - lo) / (hi - lo)).astype(np.float32)

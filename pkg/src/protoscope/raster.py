"""Image containers, lossless PNG/PPM I/O, and primitive transforms.

Intensities live in [0, 1] as float64 in memory and as 8-bit samples on
disk; a load/save round trip of an 8-bit file is byte-identical. All
transforms are pure functions returning new images.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from PIL import Image as _PILImage
from PIL import UnidentifiedImageError

# Rec.601 luma weights, used for grayscale blending in adjust_color.
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


class RasterError(Exception):
    """Unreadable, unsupported, or malformed image input."""


class RasterImage:
    """H x W x 3 RGB image with float64 intensities in [0, 1]."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"expected H x W x 3 data, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("zero-sized image")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("intensities outside [0, 1]")
        self.data = arr

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return 3

    def to_bytes(self) -> np.ndarray:
        """8-bit view of the image (rounding to nearest)."""
        return np.round(self.data * 255.0).astype(np.uint8)


class Mask:
    """H x W boolean foreground mask."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.asarray(data, dtype=bool)
        if arr.ndim != 2:
            raise ValueError(f"expected H x W data, got shape {arr.shape}")
        self.data = arr

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def foreground_count(self) -> int:
        return int(self.data.sum())

    def is_empty(self) -> bool:
        return not self.data.any()


class NormalizedTensor:
    """Network-input tensor plus a flag grid marking black padding pixels."""

    __slots__ = ("data", "pad_flag")

    def __init__(self, data, pad_flag):
        arr = np.asarray(data, dtype=np.float64)
        flag = np.asarray(pad_flag, dtype=bool)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"expected H x W x 3 data, got shape {arr.shape}")
        if flag.shape != arr.shape[:2]:
            raise ValueError("pad_flag shape does not match data")
        self.data = arr
        self.pad_flag = flag

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


# ---------------------------------------------------------------------------
# File I/O: 8-bit PNG (RGB/RGBA/gray, alpha ignored) and binary PPM (P6).


def load_image(path) -> RasterImage:
    """Load a PNG or binary PPM file into [0, 1] intensities.

    Grayscale inputs are replicated to 3 channels; alpha is dropped.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise RasterError(f"unreadable file: {path}: {exc}") from exc
    if raw[:2] == b"P6":
        return RasterImage(_decode_ppm(raw, path) / 255.0)
    return RasterImage(_decode_png(raw, path) / 255.0)


def save_image(img: RasterImage, path) -> None:
    """Write as PNG or binary PPM depending on the file suffix."""
    path = Path(path)
    data = img.to_bytes()
    if path.suffix.lower() == ".ppm":
        header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
        path.write_bytes(header + data.tobytes())
    elif path.suffix.lower() == ".png":
        _PILImage.fromarray(data, mode="RGB").save(path, format="PNG")
    else:
        raise RasterError(f"unsupported format: {path.suffix!r} (use .png or .ppm)")


def _decode_png(raw: bytes, path: Path) -> np.ndarray:
    import io

    try:
        with _PILImage.open(io.BytesIO(raw)) as im:
            if im.format != "PNG":
                raise RasterError(f"unsupported format: {im.format} ({path})")
            if im.mode not in ("RGB", "RGBA", "L", "LA", "P", "1"):
                raise RasterError(f"unsupported PNG mode: {im.mode} ({path})")
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except UnidentifiedImageError as exc:
        raise RasterError(f"unreadable file: {path}") from exc
    except (OSError, SyntaxError, ValueError) as exc:
        raise RasterError(f"unreadable file: {path}: {exc}") from exc
    if arr.size == 0:
        raise RasterError(f"zero-sized image: {path}")
    return arr


def _decode_ppm(raw: bytes, path: Path) -> np.ndarray:
    """Binary PPM (P6), maxval 255, `#` comments allowed in the header."""
    pos = 0
    fields = []
    try:
        while len(fields) < 4:
            while raw[pos : pos + 1].isspace():
                pos += 1
            if raw[pos : pos + 1] == b"#":
                pos = raw.index(b"\n", pos) + 1
                continue
            start = pos
            while not raw[pos : pos + 1].isspace():
                pos += 1
            fields.append(raw[start:pos])
        pos += 1  # single whitespace byte after maxval
    except (IndexError, ValueError) as exc:
        raise RasterError(f"unreadable file: truncated PPM header ({path})") from exc
    if fields[0] != b"P6":
        raise RasterError(f"unsupported format: not a P6 PPM ({path})")
    try:
        width, height, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    except ValueError as exc:
        raise RasterError(f"unreadable file: bad PPM header ({path})") from exc
    if maxval != 255:
        raise RasterError(f"unsupported format: PPM maxval {maxval} != 255 ({path})")
    if width < 1 or height < 1:
        raise RasterError(f"zero-sized image: {path}")
    need = width * height * 3
    body = raw[pos : pos + need]
    if len(body) != need:
        raise RasterError(f"unreadable file: truncated PPM payload ({path})")
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width, 3)


# ---------------------------------------------------------------------------
# Geometric transforms.


def _sample_coords(n_in: int, n_out: int) -> np.ndarray:
    # Half-pixel centers: source = (i + 0.5) * scale - 0.5, clamped to borders.
    scale = n_in / n_out
    x = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    return np.clip(x, 0.0, n_in - 1.0)


def _resize_array(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    in_h, in_w = arr.shape[:2]
    rows = _sample_coords(in_h, out_h)
    cols = _sample_coords(in_w, out_w)
    r0 = np.floor(rows).astype(np.intp)
    c0 = np.floor(cols).astype(np.intp)
    r1 = np.minimum(r0 + 1, in_h - 1)
    c1 = np.minimum(c0 + 1, in_w - 1)
    wr = (rows - r0)[:, None, None]
    wc = (cols - c0)[None, :, None]
    a = arr[np.ix_(r0, c0)]
    b = arr[np.ix_(r0, c1)]
    c = arr[np.ix_(r1, c0)]
    d = arr[np.ix_(r1, c1)]
    # Factored lerp keeps constant inputs exactly constant.
    top = a + (b - a) * wc
    bot = c + (d - c) * wc
    return top + (bot - top) * wr


def resize_bilinear(img: RasterImage, out_h: int, out_w: int) -> RasterImage:
    """Bilinear resize with half-pixel centers and border clamping."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be at least 1x1")
    out = _resize_array(img.data, out_h, out_w)
    return RasterImage(np.clip(out, 0.0, 1.0))


def rotate(img: RasterImage, angle: float) -> RasterImage:
    """Rotate about the image center with bilinear resampling.

    Out-of-bounds samples are black; output size equals input size.
    Positive angles rotate content counterclockwise in (col, row) axes.
    """
    h, w = img.height, img.width
    theta = math.radians(angle)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(
        np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij"
    )
    dy = yy - cy
    dx = xx - cx
    # Inverse map: rotate destination offsets by -theta to find the source.
    sx = cx + cos_t * dx + sin_t * dy
    sy = cy - sin_t * dx + cos_t * dy
    return RasterImage(_bilinear_gather_black(img.data, sy, sx))


def _bilinear_gather_black(arr: np.ndarray, sy: np.ndarray, sx: np.ndarray) -> np.ndarray:
    h, w = arr.shape[:2]
    y0 = np.floor(sy).astype(np.intp)
    x0 = np.floor(sx).astype(np.intp)
    fy = (sy - y0)[..., None]
    fx = (sx - x0)[..., None]
    out = np.zeros(sy.shape + (arr.shape[2],), dtype=np.float64)
    for dy_i, dx_i, weight in (
        (0, 0, (1 - fy) * (1 - fx)),
        (0, 1, (1 - fy) * fx),
        (1, 0, fy * (1 - fx)),
        (1, 1, fy * fx),
    ):
        yi = y0 + dy_i
        xi = x0 + dx_i
        valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        vals = arr[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
        out += np.where(valid[..., None], vals * weight, 0.0)
    return np.clip(out, 0.0, 1.0)


def flip_horizontal(img: RasterImage) -> RasterImage:
    """Mirror left-right; applying twice restores the original exactly."""
    return RasterImage(img.data[:, ::-1].copy())


def crop(img: RasterImage, top: int, left: int, height: int, width: int) -> RasterImage:
    """Exact sub-rectangle; raises on out-of-bounds rectangles."""
    if height < 1 or width < 1:
        raise ValueError("crop size must be at least 1x1")
    if top < 0 or left < 0 or top + height > img.height or left + width > img.width:
        raise ValueError(
            f"crop rectangle ({top},{left},{height},{width}) outside "
            f"{img.height}x{img.width} image"
        )
    return RasterImage(img.data[top : top + height, left : left + width].copy())


def luma(data: np.ndarray) -> np.ndarray:
    """Rec.601 luma of an H x W x 3 array."""
    r, g, b = LUMA_WEIGHTS
    return data[..., 0] * r + data[..., 1] * g + data[..., 2] * b


def adjust_color(
    img: RasterImage,
    brightness_factor: float = 1.0,
    contrast_factor: float = 1.0,
    saturation_factor: float = 1.0,
) -> RasterImage:
    """Photometric adjustment in the fixed order brightness, contrast, saturation.

    Brightness multiplies intensities; contrast blends with the per-image
    gray mean; saturation blends with per-pixel Rec.601 luma. Each applied
    step clamps to [0, 1]. Factors equal to 1.0 are skipped, so the
    all-ones call is the exact identity. Zero factors are legal (black /
    flat gray / fully desaturated); negative ones are not.
    """
    for name, factor in (
        ("brightness", brightness_factor),
        ("contrast", contrast_factor),
        ("saturation", saturation_factor),
    ):
        if factor < 0.0:
            raise ValueError(f"{name} factor must be non-negative, got {factor}")
    data = img.data
    if brightness_factor != 1.0:
        data = np.clip(data * brightness_factor, 0.0, 1.0)
    if contrast_factor != 1.0:
        gray_mean = luma(data).mean()
        data = np.clip(gray_mean + contrast_factor * (data - gray_mean), 0.0, 1.0)
    if saturation_factor != 1.0:
        gray = luma(data)[..., None]
        data = np.clip(gray + saturation_factor * (data - gray), 0.0, 1.0)
    return RasterImage(data if data is not img.data else data.copy())

"""Deterministic raster preprocessing.

Images are HWC numpy arrays wrapped in RasterImage with a declared value
domain: "byte" (uint8, 0..255) or "unit" (float64, 0.0..1.0). All ops are
pure functions; geometric augmentation also maps ground-truth boxes.
On-disk interchange is binary PPM (P6) for RGB and PGM (P5) for grayscale.
"""

from __future__ import annotations

import dataclasses
import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import kernels

BYTE = "byte"
UNIT = "unit"


class InvalidImageError(ValueError):
    pass


class InvalidParameterError(ValueError):
    pass


class UnsupportedEncodingError(ValueError):
    pass


@dataclass
class RasterImage:
    """Pixel raster: (height, width, channels) array plus its value domain."""

    pixels: np.ndarray
    value_domain: str

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def validate(self) -> "RasterImage":
        p = self.pixels
        if p.ndim != 3:
            raise InvalidImageError(f"expected (height, width, channels) pixel array, got ndim={p.ndim}")
        if p.shape[0] < 1 or p.shape[1] < 1:
            raise InvalidImageError(f"zero-dimension image: {p.shape}")
        if p.shape[2] not in (1, 3):
            raise InvalidImageError(f"channels must be 1 or 3, got {p.shape[2]}")
        if self.value_domain == BYTE:
            if p.dtype != np.uint8:
                raise InvalidImageError(f"byte domain requires uint8 pixels, got {p.dtype}")
        elif self.value_domain == UNIT:
            if p.dtype != np.float64:
                raise InvalidImageError(f"unit domain requires float64 pixels, got {p.dtype}")
            if p.size and (p.min() < 0.0 or p.max() > 1.0):
                raise InvalidImageError("unit-domain values outside [0, 1]")
        else:
            raise InvalidImageError(f"unknown value domain: {self.value_domain!r}")
        return self


@dataclass
class AugmentSpec:
    """Label-preserving geometric transform: quarter turns, flips, zoom-in."""

    quarter_turns: int = 0
    flip_horizontal: bool = False
    flip_vertical: bool = False
    zoom_factor: float = 1.0

    def validate(self) -> "AugmentSpec":
        if self.quarter_turns not in (0, 1, 2, 3):
            raise InvalidParameterError(f"quarter_turns must be in 0..3, got {self.quarter_turns}")
        if not (1.0 <= self.zoom_factor <= 2.0):
            raise InvalidParameterError(
                f"zoom_factor must lie in [1.0, 2.0] (zoom-in only), got {self.zoom_factor}"
            )
        return self


def resize_to_standard(img: RasterImage, target: int = 256) -> RasterImage:
    """Center-crop to the largest centered square, then bilinear-resample.

    Output is target x target with the input's channel count and domain.
    """
    img.validate()
    if target < 1:
        raise InvalidParameterError(f"target must be >= 1, got {target}")
    h, w = img.height, img.width
    side = min(h, w)
    y0 = (h - side) // 2
    x0 = (w - side) // 2
    crop = img.pixels[y0 : y0 + side, x0 : x0 + side, :]
    if side == target:
        return RasterImage(crop.copy(), img.value_domain)
    if img.value_domain == BYTE:
        out = kernels.bilinear_resize(crop.astype(np.float64), target, target)
        out = np.clip(np.rint(out), 0, 255).astype(np.uint8)
    else:
        out = np.clip(kernels.bilinear_resize(crop, target, target), 0.0, 1.0)
    return RasterImage(out, img.value_domain)


def normalize(img: RasterImage) -> RasterImage:
    """Map byte pixels v to v/255 in the unit domain.

    Already-unit input is returned unchanged (with a warning): the op is
    idempotent by contract.
    """
    img.validate()
    if img.value_domain == UNIT:
        warnings.warn("normalize: input already in unit domain; returning a copy", stacklevel=2)
        return RasterImage(img.pixels.copy(), UNIT)
    return RasterImage(img.pixels.astype(np.float64) / 255.0, UNIT)


def denormalize(img: RasterImage) -> RasterImage:
    """Inverse of normalize: unit values v map back to round(v*255) bytes."""
    img.validate()
    if img.value_domain == BYTE:
        return RasterImage(img.pixels.copy(), BYTE)
    return RasterImage(np.clip(np.rint(img.pixels * 255.0), 0, 255).astype(np.uint8), BYTE)


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Discretized 1-D Gaussian with radius ceil(3*sigma), renormalized to sum 1."""
    if sigma <= 0:
        raise InvalidParameterError(f"sigma must be > 0, got {sigma}")
    r = math.ceil(3.0 * sigma)
    ks = np.exp(-(np.arange(-r, r + 1, dtype=np.float64) ** 2) / (2.0 * sigma * sigma))
    return ks / ks.sum()


def gaussian_blur(img: RasterImage, sigma: float) -> RasterImage:
    """Separable Gaussian de-noise on a unit-domain image.

    Border handling is edge replication; channels are filtered independently.
    """
    img.validate()
    if img.value_domain != UNIT:
        raise InvalidParameterError("gaussian_blur expects a unit-domain image; normalize first")
    taps = gaussian_kernel(sigma)
    out = kernels.blur_separable(img.pixels, taps)
    return RasterImage(np.clip(out, 0.0, 1.0), UNIT)


def _map_box_quarter_turn(box, size):
    x, y, w, h = box
    return (y, size - x - w, h, w)


def _zoom_crop_window(size: int, zoom: float) -> tuple[int, int]:
    cs = max(1, round(size / zoom))
    return (size - cs) // 2, cs


def augment(img: RasterImage, spec: AugmentSpec, truth: list) -> tuple[RasterImage, list]:
    """Apply quarter-turn rotation, flips, then zoom; map truth boxes alike.

    `truth` is a list of region records (dataclasses with a `bbox` field of
    (x, y, w, h) ints); class labels are never touched. Boxes cropped away
    entirely by the zoom are dropped; partially cropped boxes are clipped.
    Requires a square image.
    """
    img.validate()
    spec.validate()
    if img.height != img.width:
        raise InvalidImageError("augment expects a square (standardized) image")
    size = img.height
    px = img.pixels
    boxes = [tuple(int(v) for v in r.bbox) for r in truth]

    k = spec.quarter_turns % 4
    if k:
        px = np.rot90(px, k, axes=(0, 1))
        for _ in range(k):
            boxes = [_map_box_quarter_turn(b, size) for b in boxes]
    if spec.flip_horizontal:
        px = px[:, ::-1, :]
        boxes = [(size - x - w, y, w, h) for (x, y, w, h) in boxes]
    if spec.flip_vertical:
        px = px[::-1, :, :]
        boxes = [(x, size - y - h, w, h) for (x, y, w, h) in boxes]

    keep = list(range(len(boxes)))
    if spec.zoom_factor > 1.0:
        c0, cs = _zoom_crop_window(size, spec.zoom_factor)
        crop = np.ascontiguousarray(px[c0 : c0 + cs, c0 : c0 + cs, :])
        if img.value_domain == BYTE:
            out = kernels.bilinear_resize(crop.astype(np.float64), size, size)
            px = np.clip(np.rint(out), 0, 255).astype(np.uint8)
        else:
            px = np.clip(kernels.bilinear_resize(crop, size, size), 0.0, 1.0)
        scale = size / cs
        mapped = []
        keep = []
        for i, (x, y, w, h) in enumerate(boxes):
            x0 = max(x, c0)
            y0 = max(y, c0)
            x1 = min(x + w, c0 + cs)
            y1 = min(y + h, c0 + cs)
            if x1 <= x0 or y1 <= y0:
                continue
            nx0 = round((x0 - c0) * scale)
            ny0 = round((y0 - c0) * scale)
            nx1 = min(size, round((x1 - c0) * scale))
            ny1 = min(size, round((y1 - c0) * scale))
            mapped.append((nx0, ny0, max(1, nx1 - nx0), max(1, ny1 - ny0)))
            keep.append(i)
        boxes = mapped

    px = np.ascontiguousarray(px)
    if px is img.pixels:
        px = px.copy()
    out_regions = [
        dataclasses.replace(truth[i], bbox=boxes[j]) for j, i in enumerate(keep)
    ]
    return RasterImage(px, img.value_domain), out_regions


def encode_pixel_tuples(img: RasterImage) -> np.ndarray:
    """Flatten an RGB raster to (x, y, r, g, b) tuples in row-major order.

    A w x h image yields exactly 5*w*h numbers.
    """
    img.validate()
    if img.channels != 3:
        raise UnsupportedEncodingError("pixel-tuple encoding is defined for RGB images only")
    h, w = img.height, img.width
    ys, xs = np.mgrid[0:h, 0:w]
    if img.value_domain == BYTE:
        out = np.empty((h, w, 5), dtype=np.int64)
    else:
        out = np.empty((h, w, 5), dtype=np.float64)
    out[:, :, 0] = xs
    out[:, :, 1] = ys
    out[:, :, 2:] = img.pixels
    return out.reshape(-1)


# --- PPM / PGM codec ------------------------------------------------------


def _parse_pnm_header(data: bytes):
    if len(data) < 2:
        raise InvalidImageError("not a PNM file: too short")
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise InvalidImageError(
            f"unsupported raster magic {magic!r}: only binary P5 (graymap) and P6 (pixmap) are accepted"
        )
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise InvalidImageError("truncated PNM header")
        try:
            fields.append(int(data[start:pos]))
        except ValueError:
            raise InvalidImageError(f"bad PNM header token: {data[start:pos]!r}") from None
    pos += 1  # single whitespace byte after maxval
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise InvalidImageError(f"zero-dimension image: {width}x{height}")
    if maxval != 255:
        raise InvalidImageError(f"only 8-bit rasters supported (maxval 255), got {maxval}")
    return magic, width, height, pos


def decode_pnm(data: bytes) -> RasterImage:
    """Decode binary P5/P6 bytes into a byte-domain RasterImage."""
    magic, width, height, pos = _parse_pnm_header(data)
    channels = 3 if magic == b"P6" else 1
    n = width * height * channels
    body = data[pos : pos + n]
    if len(body) != n:
        raise InvalidImageError(f"truncated PNM payload: expected {n} bytes, got {len(body)}")
    px = np.frombuffer(body, dtype=np.uint8).reshape(height, width, channels).copy()
    return RasterImage(px, BYTE)


def encode_pnm(img: RasterImage) -> bytes:
    """Encode a byte-domain RasterImage as binary P6 (RGB) or P5 (gray)."""
    img.validate()
    if img.value_domain != BYTE:
        raise InvalidParameterError("PNM encoding requires a byte-domain image")
    magic = b"P6" if img.channels == 3 else b"P5"
    header = magic + b"\n%d %d\n255\n" % (img.width, img.height)
    return header + img.pixels.tobytes()


def read_pnm(path) -> RasterImage:
    with open(path, "rb") as fh:
        return decode_pnm(fh.read())


def write_pnm(img: RasterImage, path) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pnm(img))

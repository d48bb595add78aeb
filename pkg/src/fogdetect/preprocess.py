"""Operating modes and image preparation.

High-accuracy mode forwards the submitted bytes untouched. Low-latency mode
downsizes a binary PPM so its long side equals ``target_long_side``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

DEFAULT_TARGET_LONG_SIDE = 200


class Mode(str, enum.Enum):
    HIGH_ACCURACY = "accuracy"
    LOW_LATENCY = "latency"

    @classmethod
    def parse(cls, value: "str | Mode") -> "Mode":
        try:
            return cls(value)
        except ValueError:
            raise ValueError(f"unknown mode {value!r}; expected 'accuracy' or 'latency'") from None


class ImageFormat(str, enum.Enum):
    PPM_P6 = "ppm"
    OPAQUE = "opaque"


class PreprocessError(ValueError):
    pass


class UnsupportedFormatError(PreprocessError):
    pass


class PPMParseError(PreprocessError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (byte offset {offset})")


@dataclass(frozen=True)
class ImagePayload:
    image_id: str
    width: int
    height: int
    format: ImageFormat
    data: bytes

    @property
    def byte_len(self) -> int:
        return len(self.data)


_WS = b" \t\n\r\x0b\x0c"


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    # skip whitespace and '#' comments running to end of line
    n = len(buf)
    while pos < n:
        c = buf[pos : pos + 1]
        if c in (b" ", b"\t", b"\n", b"\r", b"\x0b", b"\x0c"):
            pos += 1
        elif c == b"#":
            while pos < n and buf[pos] not in (0x0A, 0x0D):
                pos += 1
        else:
            break
    start = pos
    while pos < n and buf[pos] not in _WS and buf[pos] != 0x23:
        pos += 1
    if start == pos:
        raise PPMParseError("unexpected end of header", start)
    return buf[start:pos], pos


def parse_ppm(buf: bytes) -> tuple[int, int, np.ndarray]:
    """Parse a binary P6 image with maxval 255 into ``(width, height, HxWx3 uint8 array)``."""
    if buf[:2] != b"P6":
        raise PPMParseError("missing P6 magic number", 0)
    pos = 2
    values = []
    for name in ("width", "height", "maxval"):
        tok, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise PPMParseError(f"{name} is not a decimal integer: {tok!r}", pos - len(tok))
        values.append(int(tok))
    width, height, maxval = values
    if width < 1 or height < 1:
        raise PPMParseError(f"invalid dimensions {width}x{height}", 2)
    if maxval != 255:
        raise PPMParseError(f"only maxval 255 is supported, got {maxval}", pos)
    if pos >= len(buf) or buf[pos] not in _WS:
        raise PPMParseError("expected a single whitespace byte after maxval", pos)
    pos += 1
    expected = width * height * 3
    raster = buf[pos:]
    if len(raster) < expected:
        raise PPMParseError(f"raster truncated: need {expected} bytes, have {len(raster)}", pos + len(raster))
    pixels = np.frombuffer(raster, dtype=np.uint8, count=expected).reshape(height, width, 3)
    return width, height, pixels


def encode_ppm(pixels: np.ndarray) -> bytes:
    height, width = pixels.shape[:2]
    header = f"P6\n{width} {height}\n255\n".encode("ascii")
    return header + np.ascontiguousarray(pixels, dtype=np.uint8).tobytes()


def rescale_dims(width: int, height: int, target_long_side: int) -> tuple[int, int]:
    if min(width, height, target_long_side) < 1:
        raise ValueError("width, height and target_long_side must all be >= 1")
    long_side, short_side = max(width, height), min(width, height)
    # round half up in integer arithmetic: floor(x + 1/2) with x = short * target / long
    scaled = max(1, (2 * short_side * target_long_side + long_side) // (2 * long_side))
    if width >= height:
        return target_long_side, scaled
    return scaled, target_long_side


def nearest_indices(src: int, dst: int) -> np.ndarray:
    """Source index for each destination index: floor((i + 0.5) * src / dst)."""
    i = np.arange(dst, dtype=np.int64)
    return ((2 * i + 1) * src) // (2 * dst)


def resize_nearest(pixels: np.ndarray, width: int, height: int) -> np.ndarray:
    src_h, src_w = pixels.shape[:2]
    rows = nearest_indices(src_h, height)
    cols = nearest_indices(src_w, width)
    return pixels[rows[:, None], cols[None, :]]


def prepare(
    payload: ImagePayload, mode: Mode, target_long_side: int = DEFAULT_TARGET_LONG_SIDE
) -> ImagePayload:
    if mode is Mode.HIGH_ACCURACY:
        return payload
    if payload.format is not ImageFormat.PPM_P6:
        raise UnsupportedFormatError(
            f"cannot rescale {payload.format.value!r} images in low-latency mode"
        )
    width, height, pixels = parse_ppm(payload.data)
    if (width, height) != (payload.width, payload.height):
        raise PPMParseError(
            f"header says {width}x{height} but payload declares {payload.width}x{payload.height}", 0
        )
    new_w, new_h = rescale_dims(width, height, target_long_side)
    if (new_w, new_h) == (width, height):
        resized = pixels
    else:
        resized = resize_nearest(pixels, new_w, new_h)
    return ImagePayload(payload.image_id, new_w, new_h, ImageFormat.PPM_P6, encode_ppm(resized))


def synthetic_ppm(width: int, height: int, seed: int = 0) -> bytes:
    """Deterministic pseudo-random P6 image, used for harness payloads and tests."""
    rng = np.random.default_rng(seed)
    return encode_ppm(rng.integers(0, 256, size=(height, width, 3), dtype=np.uint8))

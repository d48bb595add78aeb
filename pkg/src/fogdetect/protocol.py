"""Framed TCP messages between master and workers, plus the HTTP ingestion contract.

Frame layout (all integers big-endian)::

    total_len  u32   bytes after this field = 5 + header_len + len(payload)
    msg_type   u8    0x01 REGISTER .. 0x05 ERROR
    header_len u32
    header     UTF-8 JSON object, header_len bytes
    payload    raw bytes
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field
from typing import Any, NamedTuple

from .detection import Detection
from .preprocess import ImageFormat, ImagePayload, Mode

DEFAULT_MAX_FRAME = 64 * 1024 * 1024
MAX_PAYLOAD = 2**31 - 1

_PREFIX = struct.Struct(">IBI")


class MsgType(enum.IntEnum):
    REGISTER = 0x01
    TASK = 0x02
    RESULT = 0x03
    HEARTBEAT = 0x04
    ERROR = 0x05


class ProtocolError(Exception):
    """The peer sent bytes that cannot be a valid frame; the connection should be closed."""


class FrameTooLarge(ProtocolError):
    pass


@dataclass(frozen=True)
class Frame:
    msg_type: MsgType
    header: dict
    payload: bytes = b""

    def encode(self) -> bytes:
        return encode_frame(self.msg_type, self.header, self.payload)


class NeedMore(NamedTuple):
    """Returned by :func:`decode_frame` when the buffer holds only part of a frame."""

    nbytes: int


def dump_header(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def encode_frame(msg_type: int, header: dict | bytes, payload: bytes = b"") -> bytes:
    msg_type = MsgType(msg_type)
    raw = header if isinstance(header, (bytes, bytearray)) else dump_header(header)
    if len(payload) > MAX_PAYLOAD:
        raise FrameTooLarge(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    total = 5 + len(raw) + len(payload)
    if total > 0xFFFFFFFF:
        raise FrameTooLarge(f"frame of {total} bytes does not fit a u32 length")
    return _PREFIX.pack(total, msg_type, len(raw)) + bytes(raw) + bytes(payload)


def _check_prefix(buf, max_frame: int) -> tuple[int, MsgType, int | None]:
    (total,) = struct.unpack_from(">I", buf, 0)
    if total < 5:
        raise ProtocolError(f"declared frame length {total} is shorter than the fixed fields")
    if total > max_frame:
        raise FrameTooLarge(f"declared frame length {total} exceeds limit {max_frame}")
    if len(buf) < 5:
        return total, None, None
    try:
        msg_type = MsgType(buf[4])
    except ValueError:
        raise ProtocolError(f"unknown message type 0x{buf[4]:02x}") from None
    header_len = None
    if len(buf) >= 9:
        (header_len,) = struct.unpack_from(">I", buf, 5)
        if header_len > total - 5:
            raise ProtocolError(f"header length {header_len} overruns frame length {total}")
    return total, msg_type, header_len


def decode_frame(buf, max_frame: int = DEFAULT_MAX_FRAME) -> Frame | NeedMore:
    """Decode one frame from the start of ``buf``.

    Returns :class:`NeedMore` while the frame is incomplete. Trailing bytes
    beyond the first frame are ignored; use :class:`FrameDecoder` for streams.
    """
    result, _ = _decode_one(memoryview(buf), max_frame)
    return result


def _decode_one(view: memoryview, max_frame: int) -> tuple[Frame | NeedMore, int]:
    if len(view) < 4:
        return NeedMore(4 - len(view)), 0
    total, msg_type, header_len = _check_prefix(view, max_frame)
    end = 4 + total
    if len(view) < end:
        return NeedMore(end - len(view)), 0
    raw_header = bytes(view[9 : 9 + header_len])
    try:
        header = json.loads(raw_header.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"frame header is not valid UTF-8 JSON: {exc}") from None
    if not isinstance(header, dict):
        raise ProtocolError("frame header must be a JSON object")
    return Frame(msg_type, header, bytes(view[9 + header_len : end])), end


class FrameDecoder:
    """Incremental decoder for one connection.

    Feed arbitrary chunks; complete frames come out in order. After a
    :class:`ProtocolError` the decoder is poisoned and must be discarded.
    """

    def __init__(self, max_frame: int = DEFAULT_MAX_FRAME):
        self.max_frame = max_frame
        self._buf = bytearray()
        self._failed = False

    @property
    def buffered(self) -> int:
        return len(self._buf)

    def feed(self, data: bytes) -> list[Frame]:
        if self._failed:
            raise ProtocolError("decoder already failed")
        self._buf += data
        frames = []
        offset = 0
        try:
            while True:
                result, used = _decode_one(memoryview(self._buf)[offset:], self.max_frame)
                if isinstance(result, NeedMore):
                    break
                frames.append(result)
                offset += used
        except ProtocolError:
            self._failed = True
            raise
        finally:
            if offset:
                del self._buf[:offset]
        return frames

    def need(self) -> NeedMore | None:
        if not self._buf:
            return None
        result, _ = _decode_one(memoryview(self._buf), self.max_frame)
        return result if isinstance(result, NeedMore) else None


# -- typed messages -------------------------------------------------------


@dataclass(frozen=True)
class RegisterMsg:
    worker_id: str
    tier: str = "fog"
    slots: int = 1
    address: str = ""

    def to_frame(self) -> Frame:
        return Frame(
            MsgType.REGISTER,
            {"worker_id": self.worker_id, "tier": self.tier, "slots": self.slots, "address": self.address},
        )

    @classmethod
    def from_frame(cls, frame: Frame) -> "RegisterMsg":
        h = frame.header
        try:
            return cls(str(h["worker_id"]), str(h.get("tier", "fog")), int(h.get("slots", 1)), str(h.get("address", "")))
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"bad REGISTER header: {exc}") from None


@dataclass(frozen=True)
class TaskEnvelope:
    task_id: str
    image_id: str
    mode: Mode
    attempt: int
    width: int
    height: int
    format: ImageFormat
    payload: bytes = b""

    def to_frame(self) -> Frame:
        return Frame(
            MsgType.TASK,
            {
                "task_id": self.task_id,
                "image_id": self.image_id,
                "mode": self.mode.value,
                "attempt": self.attempt,
                "width": self.width,
                "height": self.height,
                "format": self.format.value,
            },
            self.payload,
        )

    @classmethod
    def from_frame(cls, frame: Frame) -> "TaskEnvelope":
        h = frame.header
        try:
            return cls(
                str(h["task_id"]),
                str(h["image_id"]),
                Mode(h["mode"]),
                int(h["attempt"]),
                int(h["width"]),
                int(h["height"]),
                ImageFormat(h["format"]),
                frame.payload,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"bad TASK header: {exc}") from None

    @property
    def image(self) -> ImagePayload:
        return ImagePayload(self.image_id, self.width, self.height, self.format, self.payload)


@dataclass(frozen=True)
class ResultEnvelope:
    task_id: str
    worker_id: str
    detections: tuple[Detection, ...] = field(default=())
    compute_ms: float = 0.0

    def to_frame(self) -> Frame:
        return Frame(
            MsgType.RESULT,
            {
                "task_id": self.task_id,
                "worker_id": self.worker_id,
                "detections": [d.to_dict() for d in self.detections],
                "compute_ms": self.compute_ms,
            },
        )

    @classmethod
    def from_frame(cls, frame: Frame) -> "ResultEnvelope":
        h = frame.header
        try:
            return cls(
                str(h["task_id"]),
                str(h["worker_id"]),
                tuple(Detection.from_dict(d) for d in h["detections"]),
                float(h["compute_ms"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"bad RESULT header: {exc}") from None


def heartbeat_frame(worker_id: str) -> Frame:
    return Frame(MsgType.HEARTBEAT, {"worker_id": worker_id})


def error_frame(code: str, message: str, **extra: Any) -> Frame:
    header = {"code": code, "message": message}
    header.update({k: v for k, v in extra.items() if v is not None})
    return Frame(MsgType.ERROR, header)


# -- HTTP ingestion -------------------------------------------------------

DETECT_PATH = "/v1/detect"
HEALTH_PATH = "/v1/health"

_REASONS = {200: "OK", 400: "Bad Request", 404: "Not Found", 405: "Method Not Allowed",
            502: "Bad Gateway", 503: "Service Unavailable"}


class BadRequest(ValueError):
    pass


def build_detect_request(image: ImagePayload, mode: Mode, host: str = "master", prescaled: bool = False) -> bytes:
    lines = [
        f"POST {DETECT_PATH} HTTP/1.1",
        f"Host: {host}",
        f"X-Image-Id: {image.image_id}",
        f"X-Mode: {mode.value}",
        f"X-Width: {image.width}",
        f"X-Height: {image.height}",
        f"X-Format: {image.format.value}",
    ]
    if prescaled:
        lines.append("X-Prescaled: 1")
    lines.append(f"Content-Length: {image.byte_len}")
    return ("\r\n".join(lines) + "\r\n\r\n").encode("ascii") + image.data


def parse_detect_headers(
    headers: dict[str, str], body: bytes, default_mode: Mode | None = None
) -> tuple[ImagePayload, Mode, bool]:
    """Validate ``X-*`` headers (keys lower-cased) into a payload, mode and pre-scaled flag.

    ``default_mode`` applies only when ``X-Mode`` is absent.
    """

    def need(name: str) -> str:
        value = headers.get(name)
        if value is None or value == "":
            raise BadRequest(f"missing header {name}")
        return value.strip()

    def positive(name: str) -> int:
        raw = need(name)
        if not raw.isdigit() or int(raw) < 1:
            raise BadRequest(f"{name} must be a positive integer, got {raw!r}")
        return int(raw)

    image_id = need("x-image-id")
    try:
        if "x-mode" not in headers and default_mode is not None:
            mode = default_mode
        else:
            mode = Mode(need("x-mode"))
    except ValueError:
        raise BadRequest(f"X-Mode must be accuracy or latency, got {headers.get('x-mode')!r}") from None
    try:
        fmt = ImageFormat(need("x-format"))
    except ValueError:
        raise BadRequest(f"X-Format must be ppm or opaque, got {headers.get('x-format')!r}") from None
    width, height = positive("x-width"), positive("x-height")
    if "content-length" in headers and headers["content-length"] != str(len(body)):
        raise BadRequest("Content-Length does not match the body")
    prescaled = headers.get("x-prescaled", "0").strip() in ("1", "true", "yes")
    return ImagePayload(image_id, width, height, fmt, body), mode, prescaled


def build_http_response(status: int, body: dict) -> bytes:
    raw = json.dumps(body, separators=(",", ":")).encode("utf-8")
    head = (
        f"HTTP/1.1 {status} {_REASONS.get(status, 'Unknown')}\r\n"
        "Content-Type: application/json\r\n"
        f"Content-Length: {len(raw)}\r\n\r\n"
    )
    return head.encode("ascii") + raw


def detect_response_body(image_id: str, result: ResultEnvelope, total_ms: float) -> dict:
    return {
        "image_id": image_id,
        "detections": [d.to_dict() for d in result.detections],
        "timing": {"total_ms": total_ms, "compute_ms": result.compute_ms, "worker_id": result.worker_id},
    }


def parse_http_head(head: bytes) -> tuple[str, str, dict[str, str]]:
    """Split a request or response head into (first line, remainder, lower-cased headers)."""
    try:
        text = head.decode("latin-1")
    except UnicodeDecodeError:  # pragma: no cover - latin-1 decodes anything
        raise BadRequest("undecodable head") from None
    lines = text.split("\r\n")
    first = lines[0]
    headers: dict[str, str] = {}
    for line in lines[1:]:
        if not line:
            continue
        name, sep, value = line.partition(":")
        if not sep:
            raise BadRequest(f"malformed header line {line!r}")
        headers[name.strip().lower()] = value.strip()
    parts = first.split(" ", 1)
    return parts[0], parts[1] if len(parts) > 1 else "", headers

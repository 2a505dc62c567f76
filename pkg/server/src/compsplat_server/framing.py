"""Wire framing for the guidance protocol, server side.

Implemented from the protocol definition alone so this package stands on its
own; compatibility with client codecs is enforced by cross-parsing tests,
not shared code.

Frame layout (little-endian): u32 magic 0x43475347, u16 version (=1),
u16 message type, u32 payload length, payload bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

MAGIC = 0x43475347
PROTOCOL_VERSION = 1
MAX_PAYLOAD = 1 << 26
MAX_IMAGE_SIDE = 8192

HEADER = struct.Struct("<IHHI")
_U16 = struct.Struct("<H")
_REQUEST_HEAD = struct.Struct("<IfI16ffII")
_RESPONSE_HEAD = struct.Struct("<ffII")
_ERROR_HEAD = struct.Struct("<II")


class MsgType(IntEnum):
    HELLO = 1
    HELLO_OK = 2
    HELLO_ERR = 3
    REQUEST = 4
    RESPONSE = 5
    ERROR = 6


class BadFrame(ValueError):
    """Bytes on the wire do not form a valid frame."""


@dataclass
class Request:
    iteration: int
    timestep: float
    prompt_id: int
    view_matrix: np.ndarray  # (4, 4) float32 world-to-view, row-major
    fov_y_deg: float
    image: np.ndarray  # (H, W, 3) float32


def frame(msg_type: int, payload: bytes = b"") -> bytes:
    if len(payload) > MAX_PAYLOAD:
        raise BadFrame(f"payload of {len(payload)} bytes exceeds cap {MAX_PAYLOAD}")
    return HEADER.pack(MAGIC, PROTOCOL_VERSION, int(msg_type), len(payload)) + payload


def parse_header(data: bytes) -> tuple[MsgType, int]:
    if len(data) != HEADER.size:
        raise BadFrame(f"header must be {HEADER.size} bytes, got {len(data)}")
    magic, version, msg_type, length = HEADER.unpack(data)
    if magic != MAGIC:
        raise BadFrame(f"bad magic 0x{magic:08x}")
    if version != PROTOCOL_VERSION:
        raise BadFrame(f"unsupported protocol version {version}")
    try:
        kind = MsgType(msg_type)
    except ValueError as exc:
        raise BadFrame(f"unknown message type {msg_type}") from exc
    if length > MAX_PAYLOAD:
        raise BadFrame(f"payload length {length} exceeds cap {MAX_PAYLOAD}")
    return kind, length


def recv_exact(sock, count: int) -> bytes:
    chunks = []
    remaining = count
    while remaining > 0:
        chunk = sock.recv(min(remaining, 1 << 20))
        if not chunk:
            raise ConnectionError("connection closed mid-frame")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def recv_frame(sock) -> tuple[MsgType, bytes]:
    kind, length = parse_header(recv_exact(sock, HEADER.size))
    return kind, recv_exact(sock, length) if length else b""


def send_frame(sock, msg_type: int, payload: bytes = b"") -> None:
    sock.sendall(frame(msg_type, payload))


def parse_hello(payload: bytes) -> int:
    if len(payload) != _U16.size:
        raise BadFrame(f"HELLO payload must be {_U16.size} bytes, got {len(payload)}")
    return _U16.unpack(payload)[0]


def hello_reply(version: int = PROTOCOL_VERSION) -> bytes:
    return _U16.pack(version)


def parse_request(payload: bytes) -> Request:
    if len(payload) < _REQUEST_HEAD.size:
        raise BadFrame(f"REQUEST payload too short: {len(payload)} bytes")
    fields = _REQUEST_HEAD.unpack_from(payload)
    width, height = fields[20], fields[21]
    if not (0 < width <= MAX_IMAGE_SIDE and 0 < height <= MAX_IMAGE_SIDE):
        raise BadFrame(f"image dimensions {width}x{height} out of range")
    expected = _REQUEST_HEAD.size + width * height * 3 * 4
    if len(payload) != expected:
        raise BadFrame(f"REQUEST payload is {len(payload)} bytes, expected {expected}")
    image = (
        np.frombuffer(payload, dtype="<f4", offset=_REQUEST_HEAD.size)
        .reshape(height, width, 3)
        .copy()
    )
    return Request(
        iteration=fields[0],
        timestep=fields[1],
        prompt_id=fields[2],
        view_matrix=np.array(fields[3:19], dtype=np.float32).reshape(4, 4),
        fov_y_deg=fields[19],
        image=image,
    )


def response_payload(weight: float, cfg_scale: float, residual: np.ndarray) -> bytes:
    res = np.ascontiguousarray(residual, dtype="<f4")
    if res.ndim != 3 or res.shape[2] != 3:
        raise BadFrame(f"residual must be (H, W, 3), got {res.shape}")
    height, width = res.shape[:2]
    return _RESPONSE_HEAD.pack(float(weight), float(cfg_scale), width, height) + res.tobytes()


def error_payload(code: int, message: str) -> bytes:
    text = message.encode("utf-8")
    return _ERROR_HEAD.pack(int(code), len(text)) + text

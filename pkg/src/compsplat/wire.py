"""Binary framing for the guidance connection.

Every frame is a 12-byte little-endian header followed by the payload:

    magic   u32  0x43475347
    version u16  protocol version (currently 1)
    type    u16  message type
    length  u32  payload byte count

Message payloads:

    HELLO      u16 client protocol version
    HELLO_OK   u16 server protocol version
    HELLO_ERR  u16 server protocol version
    REQUEST    u32 iteration, f32 timestep, u32 prompt_id,
               16 x f32 row-major world-to-view matrix, f32 fov_y_deg,
               u32 width, u32 height, width*height*3 x f32 RGB
    RESPONSE   f32 weight, f32 cfg_scale, u32 width, u32 height,
               width*height*3 x f32 residual
    ERROR      u32 code, u32 byte_count, UTF-8 text
"""

from __future__ import annotations

import socket
import struct
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

MAGIC = 0x43475347
PROTOCOL_VERSION = 1

HEADER = struct.Struct("<IHHI")
_U16 = struct.Struct("<H")
_REQUEST_HEAD = struct.Struct("<IfI16ffII")
_RESPONSE_HEAD = struct.Struct("<ffII")
_ERROR_HEAD = struct.Struct("<II")

# caps a single frame; a corrupt length field must not trigger a huge alloc
MAX_PAYLOAD = 1 << 26
MAX_IMAGE_SIDE = 8192


class MessageType(IntEnum):
    HELLO = 1
    HELLO_OK = 2
    HELLO_ERR = 3
    REQUEST = 4
    RESPONSE = 5
    ERROR = 6


class FrameError(ValueError):
    """Raised when bytes on the wire do not form a valid frame."""


@dataclass
class RequestFrame:
    iteration: int
    timestep: float
    prompt_id: int
    view_matrix: np.ndarray  # (4, 4) float32, world-to-view
    fov_y_deg: float
    rendered: np.ndarray  # (H, W, 3) float32


@dataclass
class ResponseFrame:
    weight: float
    cfg_scale: float
    residual: np.ndarray  # (H, W, 3) float32


def pack_frame(msg_type: int, payload: bytes) -> bytes:
    if len(payload) > MAX_PAYLOAD:
        raise FrameError(f"payload of {len(payload)} bytes exceeds cap {MAX_PAYLOAD}")
    return HEADER.pack(MAGIC, PROTOCOL_VERSION, int(msg_type), len(payload)) + payload


def unpack_header(data: bytes) -> tuple[MessageType, int]:
    """Validate a 12-byte header; returns (message type, payload length)."""
    if len(data) != HEADER.size:
        raise FrameError(f"header must be {HEADER.size} bytes, got {len(data)}")
    magic, version, msg_type, length = HEADER.unpack(data)
    if magic != MAGIC:
        raise FrameError(f"bad magic 0x{magic:08x}")
    if version != PROTOCOL_VERSION:
        raise FrameError(f"unsupported protocol version {version}")
    try:
        kind = MessageType(msg_type)
    except ValueError as exc:
        raise FrameError(f"unknown message type {msg_type}") from exc
    if length > MAX_PAYLOAD:
        raise FrameError(f"payload length {length} exceeds cap {MAX_PAYLOAD}")
    return kind, length


def recv_exact(sock: socket.socket, count: int) -> bytes:
    chunks = []
    remaining = count
    while remaining > 0:
        chunk = sock.recv(min(remaining, 1 << 20))
        if not chunk:
            raise ConnectionError("connection closed mid-frame")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def recv_frame(sock: socket.socket) -> tuple[MessageType, bytes]:
    kind, length = unpack_header(recv_exact(sock, HEADER.size))
    payload = recv_exact(sock, length) if length else b""
    return kind, payload


def send_frame(sock: socket.socket, msg_type: int, payload: bytes) -> None:
    sock.sendall(pack_frame(msg_type, payload))


def pack_hello(version: int = PROTOCOL_VERSION) -> bytes:
    return _U16.pack(version)


def unpack_hello(payload: bytes) -> int:
    if len(payload) != _U16.size:
        raise FrameError(f"HELLO payload must be {_U16.size} bytes, got {len(payload)}")
    return _U16.unpack(payload)[0]


# HELLO_OK and HELLO_ERR carry the same single field
pack_hello_reply = pack_hello
unpack_hello_reply = unpack_hello


def pack_request(
    iteration: int,
    timestep: float,
    prompt_id: int,
    view_matrix: np.ndarray,
    fov_y_deg: float,
    rendered: np.ndarray,
) -> bytes:
    view = np.ascontiguousarray(view_matrix, dtype=np.float32)
    if view.shape != (4, 4):
        raise FrameError(f"view matrix must be (4, 4), got {view.shape}")
    img = np.ascontiguousarray(rendered, dtype=np.float32)
    if img.ndim != 3 or img.shape[2] != 3:
        raise FrameError(f"rendered image must be (H, W, 3), got {img.shape}")
    height, width = img.shape[:2]
    head = _REQUEST_HEAD.pack(
        int(iteration), float(timestep), int(prompt_id),
        *view.reshape(16).tolist(), float(fov_y_deg), width, height,
    )
    return head + img.tobytes()


def unpack_request(payload: bytes) -> RequestFrame:
    if len(payload) < _REQUEST_HEAD.size:
        raise FrameError(f"REQUEST payload too short: {len(payload)} bytes")
    fields = _REQUEST_HEAD.unpack_from(payload)
    iteration, timestep, prompt_id = fields[0], fields[1], fields[2]
    view = np.array(fields[3:19], dtype=np.float32).reshape(4, 4)
    fov_y_deg, width, height = fields[19], fields[20], fields[21]
    _check_image_dims(width, height)
    expected = _REQUEST_HEAD.size + width * height * 3 * 4
    if len(payload) != expected:
        raise FrameError(f"REQUEST payload is {len(payload)} bytes, expected {expected}")
    img = np.frombuffer(payload, dtype="<f4", offset=_REQUEST_HEAD.size).reshape(height, width, 3)
    return RequestFrame(
        iteration=iteration, timestep=timestep, prompt_id=prompt_id,
        view_matrix=view, fov_y_deg=fov_y_deg, rendered=img.copy(),
    )


def pack_response(weight: float, cfg_scale: float, residual: np.ndarray) -> bytes:
    res = np.ascontiguousarray(residual, dtype=np.float32)
    if res.ndim != 3 or res.shape[2] != 3:
        raise FrameError(f"residual must be (H, W, 3), got {res.shape}")
    height, width = res.shape[:2]
    return _RESPONSE_HEAD.pack(float(weight), float(cfg_scale), width, height) + res.tobytes()


def unpack_response(payload: bytes) -> ResponseFrame:
    if len(payload) < _RESPONSE_HEAD.size:
        raise FrameError(f"RESPONSE payload too short: {len(payload)} bytes")
    weight, cfg_scale, width, height = _RESPONSE_HEAD.unpack_from(payload)
    _check_image_dims(width, height)
    expected = _RESPONSE_HEAD.size + width * height * 3 * 4
    if len(payload) != expected:
        raise FrameError(f"RESPONSE payload is {len(payload)} bytes, expected {expected}")
    res = np.frombuffer(payload, dtype="<f4", offset=_RESPONSE_HEAD.size).reshape(height, width, 3)
    return ResponseFrame(weight=weight, cfg_scale=cfg_scale, residual=res.copy())


def pack_error(code: int, message: str) -> bytes:
    text = message.encode("utf-8")
    return _ERROR_HEAD.pack(int(code), len(text)) + text


def unpack_error(payload: bytes) -> tuple[int, str]:
    if len(payload) < _ERROR_HEAD.size:
        raise FrameError(f"ERROR payload too short: {len(payload)} bytes")
    code, count = _ERROR_HEAD.unpack_from(payload)
    if len(payload) != _ERROR_HEAD.size + count:
        raise FrameError(f"ERROR payload is {len(payload)} bytes, expected {_ERROR_HEAD.size + count}")
    try:
        text = payload[_ERROR_HEAD.size:].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FrameError("ERROR text is not valid UTF-8") from exc
    return code, text


def _check_image_dims(width: int, height: int) -> None:
    if not (0 < width <= MAX_IMAGE_SIDE and 0 < height <= MAX_IMAGE_SIDE):
        raise FrameError(f"image dimensions {width}x{height} out of range")

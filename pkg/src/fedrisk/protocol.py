"""Federation messages, their binary framing and the transports that carry them.

Frame layout (little-endian)::

    magic "FRL1" | version u8 | msg_type u8 | header_len u16 | header (UTF-8 JSON)
    | payload_len u32 | payload

Dense payloads are d float64 values; sparse payloads are a u32 count followed
by (u32 index, f64 value) pairs, or for quantized payloads a u32 count, f64
scale, f64 offset and (u32 index, u8 code) pairs. Masked payloads travel as
dense frames holding d little-endian uint64 fixed-point words.
"""

from __future__ import annotations

import json
import socket
import struct
import threading
from dataclasses import dataclass, field
from typing import BinaryIO, Union

import numpy as np

from .compression import SparsePayload, dense_bytes, payload_bytes
from .errors import FramingError
from .privacy import MaskedPayload

MAGIC = b"FRL1"
VERSION = 1
DENSE_UPDATE, SPARSE_UPDATE, GLOBAL_BROADCAST, CONTROL = 1, 2, 3, 4
MSG_TYPES = (DENSE_UPDATE, SPARSE_UPDATE, GLOBAL_BROADCAST, CONTROL)

_PREFIX = struct.Struct("<4sBBH")
_U32 = struct.Struct("<I")
_SPARSE = np.dtype([("index", "<u4"), ("value", "<f8")])
_SPARSE_Q = np.dtype([("index", "<u4"), ("code", "u1")])

Payload = Union[np.ndarray, SparsePayload, MaskedPayload]


@dataclass(frozen=True)
class PrivacyMeta:
    clipped: bool = False
    sigma: float = 0.0
    masked: bool = False


@dataclass(eq=False)
class ClientUpdate:
    round: int
    client_id: int
    n_k: int
    payload: Payload
    privacy: PrivacyMeta = field(default_factory=PrivacyMeta)

    @property
    def d(self) -> int:
        p = self.payload
        return p.d if isinstance(p, (SparsePayload, MaskedPayload)) else int(p.size)

    @property
    def payload_bytes(self) -> int:
        p = self.payload
        if isinstance(p, SparsePayload):
            return payload_bytes(p)
        return dense_bytes(self.d)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ClientUpdate):
            return NotImplemented
        a, b = self.payload, other.payload
        if type(a) is not type(b):
            return False
        same_payload = a.tobytes() == b.tobytes() if isinstance(a, np.ndarray) else a == b
        return (self.round, self.client_id, self.n_k, self.privacy) == (
            other.round, other.client_id, other.n_k, other.privacy) and same_payload


@dataclass(frozen=True)
class Frame:
    msg_type: int
    header: dict
    payload: bytes


def encode_frame(msg_type: int, header: dict, payload: bytes) -> bytes:
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    if len(head) > 0xFFFF:
        raise FramingError("header too long")
    return b"".join([
        _PREFIX.pack(MAGIC, VERSION, msg_type, len(head)), head, _U32.pack(len(payload)), payload,
    ])


def _parse_prefix(raw: bytes) -> tuple[int, int]:
    magic, version, msg_type, head_len = _PREFIX.unpack(raw)
    if magic != MAGIC:
        raise FramingError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FramingError(f"unsupported version {version}")
    if msg_type not in MSG_TYPES:
        raise FramingError(f"unknown message type {msg_type}")
    return msg_type, head_len


def _parse_header(raw: bytes) -> dict:
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FramingError(f"unreadable header: {exc}") from None
    if not isinstance(header, dict):
        raise FramingError("header is not a JSON object")
    return header


def decode_frame(raw: bytes) -> Frame:
    raw = bytes(raw)
    if len(raw) < _PREFIX.size:
        raise FramingError("truncated frame prefix")
    msg_type, head_len = _parse_prefix(raw[:_PREFIX.size])
    pos = _PREFIX.size
    if len(raw) < pos + head_len + _U32.size:
        raise FramingError("truncated frame header")
    header = _parse_header(raw[pos:pos + head_len])
    pos += head_len
    (payload_len,) = _U32.unpack_from(raw, pos)
    pos += _U32.size
    if len(raw) != pos + payload_len:
        raise FramingError(f"payload length {payload_len} does not match frame size")
    return Frame(msg_type, header, raw[pos:])


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            raise FramingError("stream ended inside a frame")
        buf += chunk
    return bytes(buf)


def read_frame(stream: BinaryIO) -> bytes:
    """Read one self-delimiting frame from a byte stream; returns its raw bytes."""
    prefix = _read_exact(stream, _PREFIX.size)
    _, head_len = _parse_prefix(prefix)
    head = _read_exact(stream, head_len)
    size = _read_exact(stream, _U32.size)
    (payload_len,) = _U32.unpack(size)
    return prefix + head + size + _read_exact(stream, payload_len)


# ------------------------------------------------------------ payload codecs

def encode_sparse(p: SparsePayload) -> bytes:
    p.validate()
    n = len(p)
    if p.quantized:
        body = np.empty(n, dtype=_SPARSE_Q)
        body["index"], body["code"] = p.indices, p.codes
        return _U32.pack(n) + struct.pack("<dd", p.scale, p.offset) + body.tobytes()
    body = np.empty(n, dtype=_SPARSE)
    body["index"], body["value"] = p.indices, p.values
    return _U32.pack(n) + body.tobytes()


def decode_sparse(raw: bytes, d: int, quantized: bool) -> SparsePayload:
    if len(raw) < _U32.size:
        raise FramingError("sparse payload too short")
    (n,) = _U32.unpack_from(raw, 0)
    if quantized:
        if len(raw) != 4 + 16 + n * _SPARSE_Q.itemsize:
            raise FramingError("quantized sparse payload has the wrong size")
        scale, offset = struct.unpack_from("<dd", raw, 4)
        body = np.frombuffer(raw, dtype=_SPARSE_Q, offset=20)
        p = SparsePayload(d, body["index"].astype(np.uint32), codes=body["code"].astype(np.uint8),
                          scale=scale, offset=offset)
    else:
        if len(raw) != 4 + n * _SPARSE.itemsize:
            raise FramingError("sparse payload has the wrong size")
        body = np.frombuffer(raw, dtype=_SPARSE, offset=4)
        p = SparsePayload(d, body["index"].astype(np.uint32), values=body["value"].astype(np.float64))
    p.validate()
    return p


def encode_update(u: ClientUpdate) -> bytes:
    header = {
        "round": u.round, "client_id": u.client_id, "n_k": u.n_k, "d": u.d,
        "clipped": u.privacy.clipped, "sigma": u.privacy.sigma, "masked": u.privacy.masked,
    }
    p = u.payload
    if isinstance(p, SparsePayload):
        header["quantized"] = p.quantized
        return encode_frame(SPARSE_UPDATE, header, encode_sparse(p))
    if isinstance(p, MaskedPayload):
        if not u.privacy.masked:
            raise FramingError("masked payload without the masked flag")
        return encode_frame(DENSE_UPDATE, header, p.to_bytes())
    if u.privacy.masked:
        raise FramingError("masked flag on a clear payload")
    return encode_frame(DENSE_UPDATE, header, np.asarray(p, dtype="<f8").tobytes())


def _require(header: dict, key: str, kind):
    value = header.get(key)
    if not isinstance(value, kind) or isinstance(value, bool) and kind is not bool:
        raise FramingError(f"header field {key!r} missing or malformed")
    return value


def decode_update(raw: bytes) -> ClientUpdate:
    frame = decode_frame(raw)
    if frame.msg_type not in (DENSE_UPDATE, SPARSE_UPDATE):
        raise FramingError(f"expected an update frame, got type {frame.msg_type}")
    h = frame.header
    d = _require(h, "d", int)
    meta = PrivacyMeta(
        clipped=_require(h, "clipped", bool),
        sigma=float(_require(h, "sigma", (int, float))),
        masked=_require(h, "masked", bool),
    )
    if frame.msg_type == SPARSE_UPDATE:
        payload = decode_sparse(frame.payload, d, _require(h, "quantized", bool))
    else:
        if len(frame.payload) != 8 * d:
            raise FramingError("dense payload length does not match d")
        if meta.masked:
            payload = MaskedPayload.from_bytes(frame.payload)
        else:
            payload = np.frombuffer(frame.payload, dtype="<f8").astype(np.float64)
    return ClientUpdate(_require(h, "round", int), _require(h, "client_id", int),
                        _require(h, "n_k", int), payload, meta)


def encode_broadcast(round_: int, params: np.ndarray) -> bytes:
    params = np.asarray(params, dtype="<f8")
    return encode_frame(GLOBAL_BROADCAST, {"round": round_, "d": int(params.size)}, params.tobytes())


def decode_broadcast(raw: bytes) -> tuple[int, np.ndarray]:
    frame = decode_frame(raw)
    if frame.msg_type != GLOBAL_BROADCAST:
        raise FramingError(f"expected a broadcast frame, got type {frame.msg_type}")
    d = _require(frame.header, "d", int)
    if len(frame.payload) != 8 * d:
        raise FramingError("broadcast payload length does not match d")
    return _require(frame.header, "round", int), np.frombuffer(frame.payload, dtype="<f8").astype(np.float64)


def encode_control(round_: int, body: dict) -> bytes:
    return encode_frame(CONTROL, {"round": round_}, json.dumps(body, sort_keys=True).encode("utf-8"))


def decode_control(raw: bytes) -> tuple[int, dict]:
    frame = decode_frame(raw)
    if frame.msg_type != CONTROL:
        raise FramingError(f"expected a control frame, got type {frame.msg_type}")
    return _require(frame.header, "round", int), _parse_header(frame.payload)


def frame_payload_len(raw: bytes) -> int:
    (head_len,) = struct.unpack_from("<H", raw, 6)
    (n,) = _U32.unpack_from(raw, _PREFIX.size + head_len)
    return n


# ---------------------------------------------------------------- transports

class InProcessTransport:
    """Hands frames over unchanged (as an immutable copy)."""

    name = "inprocess"

    def carry(self, frame: bytes) -> bytes:
        return bytes(frame)

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class LoopbackTransport:
    """Carries each frame across a TCP connection on 127.0.0.1.

    The sender writes on a helper thread while the receiver reads the frame
    back using only the two length fields to find its end.
    """

    name = "loopback"

    def __init__(self):
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.bind(("127.0.0.1", 0))
        listener.listen(1)
        self._send = socket.create_connection(listener.getsockname())
        self._recv, _ = listener.accept()
        listener.close()
        self._reader = self._recv.makefile("rb")

    def carry(self, frame: bytes) -> bytes:
        errors = []

        def send():
            try:
                self._send.sendall(frame)
            except OSError as exc:
                errors.append(exc)

        writer = threading.Thread(target=send)
        writer.start()
        try:
            received = read_frame(self._reader)
        finally:
            writer.join()
        if errors:
            raise errors[0]
        return received

    def close(self) -> None:
        self._reader.close()
        self._recv.close()
        self._send.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def make_transport(name: str):
    if name == "inprocess":
        return InProcessTransport()
    if name == "loopback":
        return LoopbackTransport()
    raise ValueError(f"unknown transport {name!r}")

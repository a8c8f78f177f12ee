import struct

import numpy as np
import pytest

from fedrisk.compression import CompressionConfig, ErrorFeedbackState, compress
from fedrisk.errors import FramingError
from fedrisk.numeric import SeededRng
from fedrisk.privacy import MaskAgreement, mask_update
from fedrisk.protocol import (ClientUpdate, InProcessTransport, LoopbackTransport, PrivacyMeta, decode_broadcast,
                              decode_control, decode_frame, decode_update, encode_broadcast, encode_control,
                              encode_frame, encode_update, frame_payload_len, make_transport)


def _header_len(frame: bytes) -> int:
    return struct.unpack_from("<H", frame, 6)[0]


def _random_updates(seed):
    rng = SeededRng(seed)
    for i in range(30):
        d = int(rng.integers(1, 300))
        delta = rng.normal(d)
        meta = PrivacyMeta(clipped=bool(i % 2), sigma=float(rng.uniform(0, 1)))
        yield ClientUpdate(int(rng.integers(1, 100)), i % 7, int(rng.integers(1, 5000)), delta, meta)
        for quantize in ("off", "uniform-8bit"):
            p = compress(delta, CompressionConfig(4, quantize), ErrorFeedbackState.zeros(d))
            yield ClientUpdate(3, i % 7, 10, p, meta)


def test_roundtrip_dense_and_sparse():
    for u in _random_updates(0):
        raw = encode_update(u)
        back = decode_update(raw)
        assert back == u
        assert frame_payload_len(raw) == u.payload_bytes


def test_roundtrip_masked():
    ag = MaskAgreement.setup([0, 1], 0, 1)
    u = ClientUpdate(1, 0, 5, mask_update(np.ones(8), ag, 0), PrivacyMeta(masked=True))
    back = decode_update(encode_update(u))
    assert back == u and back.privacy.masked


def test_masked_flag_consistency():
    with pytest.raises(FramingError):
        encode_update(ClientUpdate(1, 0, 5, np.ones(3), PrivacyMeta(masked=True)))


def test_dense_frame_size():
    d = 37
    raw = encode_update(ClientUpdate(1, 0, 4, np.zeros(d)))
    assert len(raw) == 4 + 1 + 1 + 2 + _header_len(raw) + 4 + 8 * d
    assert raw[:4] == b"FRL1" and raw[4] == 1 and raw[5] == 1


def test_sparse_frame_type():
    p = compress(np.arange(10.0), CompressionConfig(2), ErrorFeedbackState.zeros(10))
    assert encode_update(ClientUpdate(1, 0, 4, p))[5] == 2


@pytest.mark.parametrize("mutate", [
    lambda b: b"X" + b[1:],
    lambda b: b[:4] + bytes([2]) + b[5:],
    lambda b: b[:5] + bytes([9]) + b[6:],
    lambda b: b[:-1],
    lambda b: b + b"\x00",
    lambda b: b[:7],
    lambda b: b"",
])
def test_corrupt_frames_raise_framing_error(mutate):
    raw = encode_update(ClientUpdate(1, 0, 4, np.ones(5)))
    with pytest.raises(FramingError):
        decode_update(mutate(raw))


def test_every_single_byte_flip_in_magic_detected():
    raw = encode_update(ClientUpdate(1, 0, 4, np.ones(5)))
    for i in range(4):
        bad = bytearray(raw)
        bad[i] ^= 0x01
        with pytest.raises(FramingError):
            decode_frame(bytes(bad))


def test_malformed_header_rejected():
    with pytest.raises(FramingError):
        decode_update(encode_frame(1, {"round": 1}, b""))
    raw = encode_frame(1, {"x": 1}, b"")
    bad = raw[:8] + b"\xff" + raw[9:]
    with pytest.raises(FramingError):
        decode_frame(bad)


def test_broadcast_and_control_roundtrip():
    x = SeededRng(1).normal(20)
    t, back = decode_broadcast(encode_broadcast(4, x))
    assert t == 4 and back.tobytes() == x.tobytes()
    assert decode_control(encode_control(2, {"n_total": 9, "peers": [0, 1]})) == (2, {"n_total": 9, "peers": [0, 1]})
    with pytest.raises(FramingError):
        decode_broadcast(encode_control(2, {}))


@pytest.mark.parametrize("name", ["inprocess", "loopback"])
def test_transports_carry_frames_unchanged(name):
    frames = [encode_update(u) for u in _random_updates(3)]
    frames.append(encode_broadcast(1, np.zeros(50_000)))
    with make_transport(name) as tr:
        for f in frames:
            assert tr.carry(f) == f


def test_unknown_transport():
    with pytest.raises(ValueError):
        make_transport("carrier-pigeon")

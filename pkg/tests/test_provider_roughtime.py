"""Tests for the Roughtime codec, verification chain, and poll loop."""

import hashlib
import socket
import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from timeguard.provider_roughtime import (
    DEFAULT_PROFILE,
    TAG_CERT,
    TAG_NONC,
    TAG_PATH,
    TAG_ROOT,
    TAG_SIG,
    TAG_SREP,
    CertSignatureError,
    CodecError,
    DelegationWindowError,
    MerkleError,
    ResponseSignatureError,
    RoughtimeError,
    RoughtimeMeasurement,
    RoughtimeServerKey,
    RoughtimeTestServer,
    UnreachableError,
    build_request,
    decode_message,
    decode_request,
    encode_message,
    frame_packet,
    make_nonce,
    merkle_leaf,
    poll,
    unframe_packet,
    verify_response,
)
from timeguard.timebase import MonotonicInstant, SignedDuration, Timestamp

GOLDEN_NONCE = bytes(range(32))
# frozen once from the codec after hand-checking the layout against the
# framing rules: magic, framed length, offsets ascending multiples of 4,
# tags strictly ascending, version word, nonce verbatim, zero padding
GOLDEN_SHA256 = "7784bce675bf24f863e5bcb396c2173247a3dc3f2a19c9672eaac2359f54d93b"


def test_request_golden_bytes():
    req = build_request(GOLDEN_NONCE)
    assert len(req) == DEFAULT_PROFILE.min_request_size
    assert req[:8] == b"ROUGHTIM"
    assert hashlib.sha256(req).hexdigest() == GOLDEN_SHA256


def test_request_roundtrip_nonce():
    req = build_request(GOLDEN_NONCE)
    assert decode_request(req)[TAG_NONC] == GOLDEN_NONCE


def test_requests_differ_only_in_nonce():
    a = build_request(b"\x00" * 32)
    b = build_request(b"\xff" * 32)
    assert len(a) == len(b)
    diff = [i for i in range(len(a)) if a[i] != b[i]]
    # nonce value occupies bytes [12+24+4, 12+24+36) of the framed packet
    assert diff and all(40 <= i < 72 for i in diff)


def test_request_rejects_bad_nonce_length():
    with pytest.raises(CodecError):
        build_request(b"\x00" * 31)


# -- codec ------------------------------------------------------------------


@given(
    st.dictionaries(
        st.integers(min_value=0, max_value=2**32 - 1),
        st.binary(max_size=64).map(lambda b: b + b"\x00" * ((-len(b)) % 4)),
        max_size=8,
    )
)
@settings(max_examples=200)
def test_codec_roundtrip(pairs):
    assert decode_message(encode_message(pairs)) == pairs


def test_decode_rejects_truncation():
    msg = encode_message({TAG_NONC: b"\x00" * 32})
    with pytest.raises(CodecError):
        decode_message(msg[:7])


def test_decode_rejects_unsorted_tags():
    raw = struct.pack("<I", 2) + struct.pack("<I", 4) + struct.pack("<II", 7, 3) + b"\x00" * 8
    with pytest.raises(CodecError):
        decode_message(raw)


def test_decode_rejects_bad_offset():
    raw = struct.pack("<I", 2) + struct.pack("<I", 6) + struct.pack("<II", 1, 2) + b"\x00" * 8
    with pytest.raises(CodecError):
        decode_message(raw)


def test_unframe_rejects_bad_magic():
    with pytest.raises(CodecError):
        unframe_packet(b"NOTROUGH" + struct.pack("<I", 0))


def test_unframe_rejects_length_mismatch():
    with pytest.raises(CodecError):
        unframe_packet(b"ROUGHTIM" + struct.pack("<I", 5) + b"\x00" * 4)


# -- verification -----------------------------------------------------------


def run_exchange(server, nonce=None):
    nonce = nonce if nonce is not None else make_nonce()
    resp = server.respond(build_request(nonce))
    return nonce, resp


def test_verify_happy_path():
    server = RoughtimeTestServer(now_unix_s=lambda: 1_689_120_000, radius_s=1)
    nonce, resp = run_exchange(server)
    m = verify_response(resp, nonce, server.server_key, MonotonicInstant(42))
    assert m.midpoint == Timestamp.from_unix_s(1_689_120_000)
    assert m.radius == SignedDuration.from_s(1)
    assert m.t_mono_rx.nanoseconds == 42
    assert m.server_id == server.server_key.fingerprint


def test_single_leaf_root_is_leaf_hash():
    # direct hash recompute: root of a one-request batch is H(0x00 || nonce)
    server = RoughtimeTestServer()
    nonce, resp = run_exchange(server)
    srep = decode_message(unframe_packet(resp))[TAG_SREP]
    root = decode_message(srep)[TAG_ROOT]
    expect = hashlib.sha512(b"\x00" + nonce).digest()[:32]
    assert root == expect == merkle_leaf(nonce)


def test_verify_wrong_longterm_key():
    server = RoughtimeTestServer()
    other = RoughtimeTestServer()
    nonce, resp = run_exchange(server)
    with pytest.raises(CertSignatureError):
        verify_response(resp, nonce, other.server_key, MonotonicInstant(0))


def test_verify_wrong_nonce_merkle_mismatch():
    server = RoughtimeTestServer()
    _, resp = run_exchange(server)
    with pytest.raises(MerkleError):
        verify_response(resp, make_nonce(), server.server_key, MonotonicInstant(0))


def test_verify_midpoint_outside_window():
    server = RoughtimeTestServer(window_s=-10)  # forces MINT > MIDP > MAXT
    nonce, resp = run_exchange(server)
    with pytest.raises(DelegationWindowError):
        verify_response(resp, nonce, server.server_key, MonotonicInstant(0))


def test_verify_multi_leaf_batch():
    server = RoughtimeTestServer(batch_nonces=4)
    nonce, resp = run_exchange(server)
    m = verify_response(resp, nonce, server.server_key, MonotonicInstant(0))
    assert m.radius == SignedDuration.from_s(1)
    path = decode_message(unframe_packet(resp))[TAG_PATH]
    assert len(path) == 2 * 32  # depth-two tree


def test_verify_index_bit_flip_fails():
    server = RoughtimeTestServer(batch_nonces=2)
    nonce, resp = run_exchange(server)
    flipped = bytearray(resp)
    pos = len(resp) - 4  # INDX is the last value in the response
    flipped[pos] ^= 0x01
    with pytest.raises(MerkleError):
        verify_response(bytes(flipped), nonce, server.server_key, MonotonicInstant(0))


def signed_region_spans(resp):
    """Byte spans of SIG, PATH, SREP, and CERT values within the packet."""
    msg = decode_message(unframe_packet(resp))
    spans = []
    for tag in (TAG_SIG, TAG_PATH, TAG_SREP, TAG_CERT):
        value = msg[tag]
        start = resp.find(value)
        assert start > 0
        spans.append((start, start + len(value)))
    return spans


@given(st.data())
@settings(max_examples=120, deadline=None)
def test_bit_flip_in_signed_regions_fails(data):
    server = _FLIP_SERVER
    nonce, resp = _FLIP_EXCHANGE
    spans = signed_region_spans(resp)
    lo, hi = data.draw(st.sampled_from(spans))
    pos = data.draw(st.integers(min_value=lo, max_value=hi - 1))
    bit = data.draw(st.integers(min_value=0, max_value=7))
    flipped = bytearray(resp)
    flipped[pos] ^= 1 << bit
    with pytest.raises(RoughtimeError):
        verify_response(bytes(flipped), nonce, server.server_key, MonotonicInstant(0))


_FLIP_SERVER = RoughtimeTestServer(batch_nonces=2)
_FLIP_EXCHANGE = run_exchange(_FLIP_SERVER)


def test_measurement_rejects_negative_radius():
    with pytest.raises(ValueError):
        RoughtimeMeasurement(
            Timestamp(0), SignedDuration(-1), "x", MonotonicInstant(0)
        )


def test_server_key_validation():
    with pytest.raises(ValueError):
        RoughtimeServerKey(b"\x00" * 31)
    with pytest.raises(ValueError):
        RoughtimeServerKey(b"\x00" * 32, version="draft-99")


# -- poll -------------------------------------------------------------------


def test_poll_in_process():
    server = RoughtimeTestServer()
    m = poll(server.server_key, transport=server.transport)
    assert m.midpoint == Timestamp.from_unix_s(1_689_120_000)


def test_poll_retries_then_unreachable():
    attempts = []

    def dropping(request):
        attempts.append(request)
        raise socket.timeout("dropped")

    server = RoughtimeTestServer()
    with pytest.raises(UnreachableError):
        poll(server.server_key, transport=dropping, retries=3)
    assert len(attempts) == 3


def test_poll_fresh_nonce_per_attempt():
    server = RoughtimeTestServer()
    seen = []

    def flaky(request):
        seen.append(decode_request(request)[TAG_NONC])
        if len(seen) < 3:
            raise socket.timeout("dropped")
        return server.respond(request)

    m = poll(server.server_key, transport=flaky, retries=3)
    assert m.radius == SignedDuration.from_s(1)
    assert len(set(seen)) == 3


def test_poll_replayed_response_rejected():
    server = RoughtimeTestServer()
    poll(server.server_key, transport=server.transport)
    server.replay_last = True
    with pytest.raises(MerkleError):
        poll(server.server_key, transport=server.transport)


def test_poll_over_udp():
    server = RoughtimeTestServer()
    key = server.start_udp()
    try:
        m = poll(key, timeout_s=2.0)
        assert m.midpoint == Timestamp.from_unix_s(1_689_120_000)
    finally:
        server.stop()


def test_poll_udp_unreachable():
    server = RoughtimeTestServer(drop_requests=True)
    key = server.start_udp()
    try:
        with pytest.raises(UnreachableError):
            poll(key, timeout_s=0.05, retries=2)
    finally:
        server.stop()


def test_nonce_uniqueness_bulk():
    draws = 10**6
    assert len({make_nonce() for _ in range(draws)}) == draws

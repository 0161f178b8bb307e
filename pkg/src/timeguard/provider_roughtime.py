"""Roughtime client: coarse authenticated time with a confidence radius.

Implements the tag-value wire codec, request building, and the full
response verification chain: delegation certificate signature, signed
response signature, Merkle inclusion of the request nonce, and the
delegation validity window.  A measurement object exists only after all
four checks pass.  The codec is table-driven so another draft revision
can be profiled in without touching the logic; one profile is pinned.
"""

from __future__ import annotations

import secrets
import socket
import struct
import threading
from dataclasses import dataclass, field
from hashlib import sha512
from typing import Callable, Optional

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from .timebase import MonotonicInstant, SignedDuration, Timestamp

MAGIC = b"ROUGHTIM"


def make_tag(name: bytes) -> int:
    """Tag constant: ASCII bytes read as a little-endian uint32."""
    if len(name) != 4:
        raise ValueError("tag names are exactly 4 bytes")
    return int.from_bytes(name, "little")


TAG_SIG = make_tag(b"SIG\x00")
TAG_VER = make_tag(b"VER\x00")
TAG_SRV = make_tag(b"SRV\x00")
TAG_NONC = make_tag(b"NONC")
TAG_DELE = make_tag(b"DELE")
TAG_PATH = make_tag(b"PATH")
TAG_RADI = make_tag(b"RADI")
TAG_PUBK = make_tag(b"PUBK")
TAG_MIDP = make_tag(b"MIDP")
TAG_SREP = make_tag(b"SREP")
TAG_MINT = make_tag(b"MINT")
TAG_ROOT = make_tag(b"ROOT")
TAG_CERT = make_tag(b"CERT")
TAG_MAXT = make_tag(b"MAXT")
TAG_INDX = make_tag(b"INDX")
TAG_ZZZZ = make_tag(b"ZZZZ")


class RoughtimeError(Exception):
    """Base class for Roughtime failures."""


class CodecError(RoughtimeError):
    """Malformed packet or tag structure."""


class CertSignatureError(RoughtimeError):
    """Delegation certificate not signed by the long-term key."""


class ResponseSignatureError(RoughtimeError):
    """Signed response not signed by the delegated key."""


class MerkleError(RoughtimeError):
    """Request nonce not included under the response Merkle root."""


class DelegationWindowError(RoughtimeError):
    """Midpoint outside the delegation validity window."""


class UnreachableError(RoughtimeError):
    """No response within the configured retries."""


@dataclass(frozen=True)
class RoughtimeProfile:
    """Wire constants for one protocol draft revision."""

    name: str
    version: int
    min_request_size: int
    hash_trunc: int
    leaf_prefix: bytes
    node_prefix: bytes
    delegation_context: bytes
    response_context: bytes

    def digest(self, data: bytes) -> bytes:
        return sha512(data).digest()[: self.hash_trunc]


PROFILES = {
    "ietf-draft-07": RoughtimeProfile(
        name="ietf-draft-07",
        version=0x80000007,
        min_request_size=1024,
        hash_trunc=32,
        leaf_prefix=b"\x00",
        node_prefix=b"\x01",
        delegation_context=b"RoughTime v1 delegation signature--\x00",
        response_context=b"RoughTime v1 response signature\x00",
    )
}
DEFAULT_PROFILE = PROFILES["ietf-draft-07"]


@dataclass(frozen=True)
class RoughtimeServerKey:
    """Long-term server identity plus where and how to reach it."""

    public_key: bytes
    host: str = "127.0.0.1"
    port: int = 2002
    version: str = DEFAULT_PROFILE.name

    def __post_init__(self) -> None:
        if len(self.public_key) != 32:
            raise ValueError(f"Ed25519 public key must be 32 bytes, got {len(self.public_key)}")
        if self.version not in PROFILES:
            raise ValueError(f"unknown protocol profile {self.version!r}")

    @property
    def profile(self) -> RoughtimeProfile:
        return PROFILES[self.version]

    @property
    def fingerprint(self) -> str:
        return sha512(self.public_key).hexdigest()[:16]


@dataclass(frozen=True)
class RoughtimeMeasurement:
    """Authenticated coarse time: true time lies in midpoint +/- radius.

    Only verify_response constructs this, after the full check chain.
    """

    midpoint: Timestamp
    radius: SignedDuration
    server_id: str
    t_mono_rx: MonotonicInstant

    def __post_init__(self) -> None:
        if self.radius.units < 0:
            raise ValueError("radius must be non-negative")


# -- tag-value codec --------------------------------------------------------


def encode_message(pairs: dict[int, bytes]) -> bytes:
    """Encode a tag->value map: count, offsets, ascending tags, values."""
    items = sorted(pairs.items())
    for tag, value in items:
        if not (0 <= tag < 1 << 32):
            raise CodecError(f"tag {tag:#x} out of uint32 range")
        if len(value) % 4 != 0:
            raise CodecError(f"value for tag {tag:#010x} not a multiple of 4 bytes")
    out = [struct.pack("<I", len(items))]
    offset = 0
    for _, value in items[:-1]:
        offset += len(value)
        out.append(struct.pack("<I", offset))
    for tag, _ in items:
        out.append(struct.pack("<I", tag))
    for _, value in items:
        out.append(value)
    return b"".join(out)


def decode_message(data: bytes) -> dict[int, bytes]:
    """Inverse of encode_message; raises CodecError on any defect."""
    if len(data) < 4:
        raise CodecError("message shorter than its count field")
    (count,) = struct.unpack_from("<I", data, 0)
    header_len = 4 + max(count - 1, 0) * 4 + count * 4
    if count > 0 and len(data) < header_len:
        raise CodecError(f"message truncated: {len(data)} bytes for {count} pairs")
    offsets = [0]
    pos = 4
    for _ in range(max(count - 1, 0)):
        (off,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if off % 4 != 0 or off < offsets[-1]:
            raise CodecError(f"offset {off} not ascending multiple of 4")
        offsets.append(off)
    tags = []
    for _ in range(count):
        (tag,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if tags and tag <= tags[-1]:
            raise CodecError(f"tag {tag:#010x} not strictly ascending")
        tags.append(tag)
    values_len = len(data) - header_len
    if count == 0:
        if values_len != 0:
            raise CodecError("pairless message with trailing bytes")
        return {}
    if offsets[-1] > values_len:
        raise CodecError(f"last offset {offsets[-1]} beyond value region {values_len}")
    bounds = offsets + [values_len]
    body = data[header_len:]
    return {tag: body[bounds[i] : bounds[i + 1]] for i, tag in enumerate(tags)}


def frame_packet(message: bytes) -> bytes:
    return MAGIC + struct.pack("<I", len(message)) + message


def unframe_packet(packet: bytes) -> bytes:
    if len(packet) < 12 or packet[:8] != MAGIC:
        raise CodecError("missing packet magic")
    (length,) = struct.unpack_from("<I", packet, 8)
    if len(packet) - 12 != length:
        raise CodecError(f"framed length {length} != payload {len(packet) - 12}")
    return packet[12:]


def require_tag(msg: dict[int, bytes], tag: int, size: Optional[int] = None) -> bytes:
    if tag not in msg:
        raise CodecError(f"missing tag {tag:#010x}")
    value = msg[tag]
    if size is not None and len(value) != size:
        raise CodecError(f"tag {tag:#010x} has {len(value)} bytes, expected {size}")
    return value


# -- request ----------------------------------------------------------------


def make_nonce() -> bytes:
    return secrets.token_bytes(32)


def build_request(nonce: bytes, profile: RoughtimeProfile = DEFAULT_PROFILE) -> bytes:
    """Tag-value request padded up to the profile's minimum size."""
    if len(nonce) != 32:
        raise CodecError(f"nonce must be 32 bytes, got {len(nonce)}")
    base = {TAG_VER: struct.pack("<I", profile.version), TAG_NONC: nonce, TAG_ZZZZ: b""}
    unpadded = len(frame_packet(encode_message(base)))
    pad = max(0, profile.min_request_size - unpadded)
    pad += (-pad) % 4
    base[TAG_ZZZZ] = b"\x00" * pad
    return frame_packet(encode_message(base))


def decode_request(packet: bytes) -> dict[int, bytes]:
    msg = decode_message(unframe_packet(packet))
    require_tag(msg, TAG_NONC, 32)
    return msg


# -- Merkle tree ------------------------------------------------------------


def merkle_leaf(nonce: bytes, profile: RoughtimeProfile = DEFAULT_PROFILE) -> bytes:
    return profile.digest(profile.leaf_prefix + nonce)


def merkle_node(left: bytes, right: bytes, profile: RoughtimeProfile = DEFAULT_PROFILE) -> bytes:
    return profile.digest(profile.node_prefix + left + right)


def merkle_root_from_path(
    nonce: bytes, index: int, path: bytes, profile: RoughtimeProfile = DEFAULT_PROFILE
) -> bytes:
    """Recompute the root from a leaf nonce and its sibling path."""
    if len(path) % profile.hash_trunc != 0:
        raise CodecError(f"PATH length {len(path)} not a multiple of {profile.hash_trunc}")
    node = merkle_leaf(nonce, profile)
    for i in range(0, len(path), profile.hash_trunc):
        sibling = path[i : i + profile.hash_trunc]
        if index & 1:
            node = merkle_node(sibling, node, profile)
        else:
            node = merkle_node(node, sibling, profile)
        index >>= 1
    return node


def merkle_build(leaves: list[bytes], profile: RoughtimeProfile = DEFAULT_PROFILE) -> list[list[bytes]]:
    """All tree levels for a batch of leaf hashes, padded to a power of two."""
    if not leaves:
        raise CodecError("empty Merkle batch")
    level = list(leaves)
    while len(level) & (len(level) - 1):
        level.append(b"\x00" * profile.hash_trunc)
    levels = [level]
    while len(level) > 1:
        level = [merkle_node(level[i], level[i + 1], profile) for i in range(0, len(level), 2)]
        levels.append(level)
    return levels


def merkle_path(levels: list[list[bytes]], index: int) -> bytes:
    out = []
    for level in levels[:-1]:
        out.append(level[index ^ 1])
        index >>= 1
    return b"".join(out)


# -- verification -----------------------------------------------------------

_U64 = struct.Struct("<Q")
_U32 = struct.Struct("<I")


def verify_response(
    resp: bytes,
    nonce: bytes,
    key: RoughtimeServerKey,
    t_mono_rx: MonotonicInstant,
) -> RoughtimeMeasurement:
    """Run the full verification chain over a response packet.

    Order: delegation certificate signature by the long-term key, signed
    response signature by the delegated key, Merkle inclusion of the
    nonce, midpoint inside [MINT, MAXT].  Each failure raises its own
    error type and no measurement is produced.
    """
    profile = key.profile
    msg = decode_message(unframe_packet(resp))
    sig = require_tag(msg, TAG_SIG, 64)
    path = require_tag(msg, TAG_PATH)
    srep_raw = require_tag(msg, TAG_SREP)
    cert_raw = require_tag(msg, TAG_CERT)
    index = _U32.unpack(require_tag(msg, TAG_INDX, 4))[0]

    cert = decode_message(cert_raw)
    cert_sig = require_tag(cert, TAG_SIG, 64)
    dele_raw = require_tag(cert, TAG_DELE)
    dele = decode_message(dele_raw)
    pubk = require_tag(dele, TAG_PUBK, 32)
    mint = _U64.unpack(require_tag(dele, TAG_MINT, 8))[0]
    maxt = _U64.unpack(require_tag(dele, TAG_MAXT, 8))[0]

    try:
        Ed25519PublicKey.from_public_bytes(key.public_key).verify(
            cert_sig, profile.delegation_context + dele_raw
        )
    except InvalidSignature:
        raise CertSignatureError("delegation certificate signature invalid") from None

    try:
        Ed25519PublicKey.from_public_bytes(pubk).verify(sig, profile.response_context + srep_raw)
    except InvalidSignature:
        raise ResponseSignatureError("signed response signature invalid") from None

    srep = decode_message(srep_raw)
    root = require_tag(srep, TAG_ROOT, profile.hash_trunc)
    midp = _U64.unpack(require_tag(srep, TAG_MIDP, 8))[0]
    radi = _U32.unpack(require_tag(srep, TAG_RADI, 4))[0]

    if merkle_root_from_path(nonce, index, path, profile) != root:
        raise MerkleError("request nonce not under response Merkle root")

    if not (mint <= midp <= maxt):
        raise DelegationWindowError(f"midpoint {midp} outside delegation window [{mint}, {maxt}]")

    return RoughtimeMeasurement(
        midpoint=Timestamp.from_unix_s(midp),
        radius=SignedDuration.from_s(radi),
        server_id=key.fingerprint,
        t_mono_rx=t_mono_rx,
    )


# -- transport --------------------------------------------------------------

Transport = Callable[[bytes], bytes]


def udp_transport(host: str, port: int, timeout_s: float) -> Transport:
    def send(request: bytes) -> bytes:
        with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as sock:
            sock.settimeout(timeout_s)
            sock.sendto(request, (host, port))
            data, _ = sock.recvfrom(65536)
            return data

    return send


def poll(
    server: RoughtimeServerKey,
    transport: Optional[Transport] = None,
    timeout_s: float = 1.0,
    retries: int = 3,
) -> RoughtimeMeasurement:
    """One verified measurement; fresh nonce per attempt."""
    if transport is None:
        transport = udp_transport(server.host, server.port, timeout_s)
    last_timeout: Optional[Exception] = None
    for _ in range(max(1, retries)):
        nonce = make_nonce()
        request = build_request(nonce, server.profile)
        try:
            resp = transport(request)
        except (socket.timeout, TimeoutError) as e:
            last_timeout = e
            continue
        return verify_response(resp, nonce, server, MonotonicInstant.now())
    raise UnreachableError(f"no response from {server.host}:{server.port}") from last_timeout


# -- test server ------------------------------------------------------------


@dataclass
class RoughtimeTestServer:
    """In-process signing oracle, optionally served over UDP.

    now_unix_s supplies the reported midpoint; tamper flags exercise each
    verification failure.  batch_nonces > 1 answers each request with a
    multi-leaf Merkle tree so PATH is non-trivial.
    """

    profile: RoughtimeProfile = DEFAULT_PROFILE
    now_unix_s: Callable[[], int] = lambda: 1_689_120_000
    radius_s: int = 1
    window_s: int = 86400
    batch_nonces: int = 1
    drop_requests: bool = False
    replay_last: bool = False
    root_key: Ed25519PrivateKey = field(default_factory=Ed25519PrivateKey.generate)
    delegated_key: Ed25519PrivateKey = field(default_factory=Ed25519PrivateKey.generate)

    def __post_init__(self) -> None:
        self._last_response: Optional[bytes] = None
        self._sock: Optional[socket.socket] = None
        self._thread: Optional[threading.Thread] = None

    @property
    def server_key(self) -> RoughtimeServerKey:
        pub = self.root_key.public_key().public_bytes_raw()
        port = self._sock.getsockname()[1] if self._sock else 0
        return RoughtimeServerKey(pub, "127.0.0.1", port, self.profile.name)

    def make_cert(self, mint: int, maxt: int) -> bytes:
        dele = encode_message(
            {
                TAG_PUBK: self.delegated_key.public_key().public_bytes_raw(),
                TAG_MINT: _U64.pack(mint),
                TAG_MAXT: _U64.pack(maxt),
            }
        )
        sig = self.root_key.sign(self.profile.delegation_context + dele)
        return encode_message({TAG_SIG: sig, TAG_DELE: dele})

    def respond(self, request: bytes, midpoint_override: Optional[int] = None) -> bytes:
        """Signed response for one request, per the server's current clock."""
        nonce = require_tag(decode_request(request), TAG_NONC, 32)
        nonces = [nonce] + [make_nonce() for _ in range(self.batch_nonces - 1)]
        levels = merkle_build([merkle_leaf(n, self.profile) for n in nonces], self.profile)
        root = levels[-1][0]
        midp = midpoint_override if midpoint_override is not None else int(self.now_unix_s())
        srep = encode_message(
            {
                TAG_RADI: _U32.pack(self.radius_s),
                TAG_MIDP: _U64.pack(midp),
                TAG_ROOT: root,
            }
        )
        response = encode_message(
            {
                TAG_SIG: self.delegated_key.sign(self.profile.response_context + srep),
                TAG_PATH: merkle_path(levels, 0),
                TAG_SREP: srep,
                TAG_CERT: self.make_cert(midp - self.window_s, midp + self.window_s),
                TAG_INDX: _U32.pack(0),
            }
        )
        return frame_packet(response)

    def transport(self, request: bytes) -> bytes:
        """In-process transport honoring the drop/replay knobs."""
        if self.drop_requests:
            raise socket.timeout("dropped")
        if self.replay_last and self._last_response is not None:
            return self._last_response
        resp = self.respond(request)
        self._last_response = resp
        return resp

    def start_udp(self) -> RoughtimeServerKey:
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self._sock.bind(("127.0.0.1", 0))
        self._sock.settimeout(0.1)
        self._running = True

        def serve() -> None:
            while self._running:
                try:
                    data, addr = self._sock.recvfrom(65536)
                except socket.timeout:
                    continue
                except OSError:
                    return
                if self.drop_requests:
                    continue
                try:
                    self._sock.sendto(self.transport(data), addr)
                except (RoughtimeError, OSError):
                    continue

        self._thread = threading.Thread(target=serve, daemon=True)
        self._thread.start()
        return self.server_key

    def stop(self) -> None:
        self._running = False
        if self._thread is not None:
            self._thread.join(timeout=2.0)
        if self._sock is not None:
            self._sock.close()
            self._sock = None

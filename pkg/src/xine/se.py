"""Secure element, its single-slot mailbox, and the device secrets.

The secure element is a separate hardware block. Enclaves never talk to
it directly: the crypto enclave writes a request into a 4 KiB mailbox
window, rings it, and the element replaces the request with a response in
place. The slot walks a strict three-state loop (empty, request pending,
response ready) and holds exactly one message, so concurrent callers are
impossible by construction.

Request layout (little-endian):

    offset 0  op_code      1 byte
    offset 1  requester    1 byte   app enclave index, audit only
    offset 2  payload_len  2 bytes
    offset 4  result_addr  4 bytes  echoed back, element does not touch it
    offset 8  payload

Response layout: status byte, one reserved zero byte, payload_len as two
bytes, then the payload.

Randomness is a deterministic counter-mode generator seeded from the
scenario, so identical runs produce identical nonces. Device secrets live
in an eFuse block: the sealing AEAD key, the device signing key, and the
boot-time signer public keys.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from enum import Enum

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305

from .enclaves import Region
from .machine import Memory

MAILBOX_CAPACITY = 4096
REQ_HEADER = struct.Struct("<BBHI")
RESP_HEADER = struct.Struct("<BBH")
MAX_REQUEST_PAYLOAD = MAILBOX_CAPACITY - REQ_HEADER.size
MAX_RESPONSE_PAYLOAD = MAILBOX_CAPACITY - RESP_HEADER.size

NONCE_LEN = 12
TAG_LEN = 16
DIGEST_LEN = 32
SIG_LEN = 64
# Largest plaintext whose sealed form still fits in one response.
MAX_PLAINTEXT = MAX_RESPONSE_PAYLOAD - NONCE_LEN - TAG_LEN


class SeOpCode(Enum):
    AEAD_ENCRYPT = 1
    AEAD_DECRYPT = 2
    HASH = 3
    SIGN = 4
    VERIFY = 5


class SeStatus(Enum):
    OK = 0
    BAD_OP_CODE = 1
    AUTH_FAILURE = 2
    OVERSIZED_PAYLOAD = 3
    # Raised by the service shim, never by the element itself.
    SPAN_OUTSIDE_REQUESTER = 4


class Trng:
    """Deterministic random source: SHA-256 over seed and block counter."""

    def __init__(self, seed: int):
        self.seed = seed & 0xFFFF_FFFF_FFFF_FFFF
        self.counter = 0

    def read(self, n: int) -> bytes:
        out = bytearray()
        while len(out) < n:
            block = hashlib.sha256(
                self.seed.to_bytes(8, "little")
                + self.counter.to_bytes(8, "little")).digest()
            self.counter += 1
            out.extend(block)
        return bytes(out[:n])


@dataclass
class Efuse:
    """One-time-programmable device secrets.

    ``sealing_key`` starts empty; measured boot burns it in once the
    chain verifies, binding later storage to the booted firmware.
    """

    aead_key: bytes
    signing_seed: bytes
    boot_pubkeys: dict[str, bytes] = field(default_factory=dict)
    sealing_key: bytes | None = None

    def __post_init__(self) -> None:
        if len(self.aead_key) != 32 or len(self.signing_seed) != 32:
            raise ValueError("efuse keys must be 32 bytes")


class MailboxState(Enum):
    EMPTY = "empty"
    REQUEST_PENDING = "request-pending"
    RESPONSE_READY = "response-ready"


class MailboxProtocolError(Exception):
    """A state transition taken out of order."""


class Mailbox:
    """The single message slot, backed by the mailbox MMIO window."""

    def __init__(self, mem: Memory, window: Region):
        if window.size < MAILBOX_CAPACITY:
            raise ValueError("mailbox window smaller than one message slot")
        self.mem = mem
        self.window = window
        self.state = MailboxState.EMPTY

    def ring(self) -> None:
        if self.state is not MailboxState.EMPTY:
            raise MailboxProtocolError(f"ring while {self.state.value}")
        self.state = MailboxState.REQUEST_PENDING

    def respond(self, status: SeStatus, payload: bytes) -> None:
        if self.state is not MailboxState.REQUEST_PENDING:
            raise MailboxProtocolError(f"respond while {self.state.value}")
        if len(payload) > MAX_RESPONSE_PAYLOAD:
            raise ValueError("response payload exceeds mailbox capacity")
        raw = RESP_HEADER.pack(status.value, 0, len(payload)) + payload
        self.mem.poke(self.window.base, raw.ljust(MAILBOX_CAPACITY, b"\x00"))
        self.state = MailboxState.RESPONSE_READY

    def collect(self) -> tuple[SeStatus, bytes]:
        if self.state is not MailboxState.RESPONSE_READY:
            raise MailboxProtocolError(f"collect while {self.state.value}")
        raw = self.mem.peek(self.window.base, MAILBOX_CAPACITY)
        status_code, _, length = RESP_HEADER.unpack_from(raw)
        self.state = MailboxState.EMPTY
        return SeStatus(status_code), raw[RESP_HEADER.size:RESP_HEADER.size + length]

    def raw_request(self) -> bytes:
        return self.mem.peek(self.window.base, MAILBOX_CAPACITY)


def pack_request(op_code: int, requester: int, payload: bytes,
                 result_addr: int) -> bytes:
    if len(payload) > MAX_REQUEST_PAYLOAD:
        raise ValueError("request payload exceeds mailbox capacity")
    return REQ_HEADER.pack(op_code & 0xFF, requester & 0xFF, len(payload),
                           result_addr & 0xFFFF_FFFF) + payload


def seal(key: bytes, trng: Trng, plaintext: bytes) -> bytes:
    """AEAD-seal ``plaintext``: nonce, ciphertext, tag concatenated."""
    nonce = trng.read(NONCE_LEN)
    return nonce + ChaCha20Poly1305(key).encrypt(nonce, plaintext, None)


def unseal(key: bytes, blob: bytes) -> bytes | None:
    """Open a sealed blob; ``None`` when authentication fails."""
    if len(blob) < NONCE_LEN + TAG_LEN:
        return None
    try:
        return ChaCha20Poly1305(key).decrypt(blob[:NONCE_LEN],
                                             blob[NONCE_LEN:], None)
    except InvalidTag:
        return None


class SecureElement:
    """Processes one pending mailbox request per call.

    The element never raises on hostile request bytes; every outcome is a
    status code in a well-formed response. Only protocol misuse by the
    simulator itself (processing an empty slot) raises.
    """

    def __init__(self, efuse: Efuse, trng: Trng):
        self.efuse = efuse
        self.trng = trng
        self._signer = Ed25519PrivateKey.from_private_bytes(efuse.signing_seed)

    def device_public_key(self) -> bytes:
        from cryptography.hazmat.primitives.serialization import (
            Encoding, PublicFormat)
        return self._signer.public_key().public_bytes(
            Encoding.Raw, PublicFormat.Raw)

    def process(self, mailbox: Mailbox) -> SeStatus:
        if mailbox.state is not MailboxState.REQUEST_PENDING:
            raise MailboxProtocolError("process with no pending request")
        raw = mailbox.raw_request()
        op_code, _requester, payload_len, _result = REQ_HEADER.unpack_from(raw)
        if payload_len > MAX_REQUEST_PAYLOAD:
            mailbox.respond(SeStatus.OVERSIZED_PAYLOAD, b"")
            return SeStatus.OVERSIZED_PAYLOAD
        payload = raw[REQ_HEADER.size:REQ_HEADER.size + payload_len]
        status, out = self._dispatch(op_code, payload)
        mailbox.respond(status, out)
        return status

    def _dispatch(self, op_code: int, payload: bytes) -> tuple[SeStatus, bytes]:
        try:
            op = SeOpCode(op_code)
        except ValueError:
            return SeStatus.BAD_OP_CODE, b""

        if op is SeOpCode.HASH:
            return SeStatus.OK, hashlib.sha256(payload).digest()

        if op is SeOpCode.AEAD_ENCRYPT:
            if len(payload) > MAX_PLAINTEXT:
                return SeStatus.OVERSIZED_PAYLOAD, b""
            return SeStatus.OK, seal(self.efuse.aead_key, self.trng, payload)

        if op is SeOpCode.AEAD_DECRYPT:
            plaintext = unseal(self.efuse.aead_key, payload)
            if plaintext is None:
                return SeStatus.AUTH_FAILURE, b""
            return SeStatus.OK, plaintext

        if op is SeOpCode.SIGN:
            digest = hashlib.sha256(payload).digest()
            return SeStatus.OK, self._signer.sign(digest)

        # VERIFY: signature then message.
        if len(payload) < SIG_LEN:
            return SeStatus.AUTH_FAILURE, b""
        sig, message = payload[:SIG_LEN], payload[SIG_LEN:]
        digest = hashlib.sha256(message).digest()
        try:
            self._signer.public_key().verify(sig, digest)
        except InvalidSignature:
            return SeStatus.AUTH_FAILURE, b""
        return SeStatus.OK, b"\x01"

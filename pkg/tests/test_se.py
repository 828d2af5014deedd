"""Secure element request handling, sealing, and the mailbox protocol."""

import hashlib
import subprocess

import pytest
from hypothesis import given, settings, strategies as st

from xine.machine import MemRegion, Memory
from xine.enclaves import Region
from xine.se import (
    MAILBOX_CAPACITY,
    MAX_PLAINTEXT,
    MAX_REQUEST_PAYLOAD,
    NONCE_LEN,
    REQ_HEADER,
    TAG_LEN,
    Efuse,
    Mailbox,
    MailboxProtocolError,
    MailboxState,
    SecureElement,
    SeOpCode,
    SeStatus,
    Trng,
    pack_request,
    seal,
    unseal,
)

# First blocks of the seed-1 stream, frozen from sha256sum over the
# little-endian seed/counter words.
TRNG_SEED1_BLOCK0 = "4cbbd8ca5215b8d161aec181a74b694f4e24b001d5b081dc0030ed797a8973e0"
TRNG_SEED1_BLOCK1 = "814dd7b9784d57c15b9c2972e9b4fd6cf7e164f8162a934bdb2452a413dab1f7"

MAILBOX_BASE = 0x4000_0000


def sha256sum_oracle(data: bytes) -> bytes:
    out = subprocess.run(["sha256sum"], input=data, capture_output=True,
                         check=True)
    return bytes.fromhex(out.stdout.split()[0].decode())


def make_se(seed=1):
    mem = Memory([MemRegion(MAILBOX_BASE, 0x1000, "mailbox-mmio")])
    mailbox = Mailbox(mem, Region(MAILBOX_BASE, 0x1000))
    efuse = Efuse(aead_key=bytes(range(32)), signing_seed=bytes(range(32, 64)))
    return SecureElement(efuse, Trng(seed)), mailbox, mem


def roundtrip(se, mailbox, mem, op_code, payload, requester=1):
    mem.poke(MAILBOX_BASE, pack_request(op_code, requester, payload, 0))
    mailbox.ring()
    se.process(mailbox)
    return mailbox.collect()


class TestTrng:
    def test_frozen_stream(self):
        trng = Trng(1)
        assert trng.read(32).hex() == TRNG_SEED1_BLOCK0
        assert trng.read(32).hex() == TRNG_SEED1_BLOCK1

    def test_partial_reads_consume_whole_blocks(self):
        trng = Trng(1)
        first = trng.read(12)
        assert first.hex() == TRNG_SEED1_BLOCK0[:24]
        assert trng.read(32).hex() == TRNG_SEED1_BLOCK1

    def test_same_seed_same_stream(self):
        assert Trng(42).read(100) == Trng(42).read(100)
        assert Trng(42).read(100) != Trng(43).read(100)


class TestMailbox:
    def test_state_loop(self):
        se, mailbox, mem = make_se()
        assert mailbox.state is MailboxState.EMPTY
        mem.poke(MAILBOX_BASE, pack_request(3, 1, b"abc", 0))
        mailbox.ring()
        assert mailbox.state is MailboxState.REQUEST_PENDING
        se.process(mailbox)
        assert mailbox.state is MailboxState.RESPONSE_READY
        mailbox.collect()
        assert mailbox.state is MailboxState.EMPTY

    def test_out_of_order_transitions_raise(self):
        se, mailbox, _ = make_se()
        with pytest.raises(MailboxProtocolError):
            mailbox.collect()
        with pytest.raises(MailboxProtocolError):
            se.process(mailbox)
        mailbox.ring()
        with pytest.raises(MailboxProtocolError):
            mailbox.ring()

    def test_single_slot(self):
        # A second request cannot be posted until the first is collected.
        se, mailbox, mem = make_se()
        mem.poke(MAILBOX_BASE, pack_request(3, 1, b"x", 0))
        mailbox.ring()
        se.process(mailbox)
        with pytest.raises(MailboxProtocolError):
            mailbox.ring()

    def test_pack_request_rejects_oversize(self):
        with pytest.raises(ValueError):
            pack_request(3, 1, b"\x00" * (MAX_REQUEST_PAYLOAD + 1), 0)


class TestOps:
    def test_hash_matches_external_tool(self):
        se, mailbox, mem = make_se()
        msg = b"the quick brown fox"
        status, out = roundtrip(se, mailbox, mem, SeOpCode.HASH.value, msg)
        assert status is SeStatus.OK
        assert out == sha256sum_oracle(msg)

    def test_aead_round_trip(self):
        se, mailbox, mem = make_se()
        status, sealed = roundtrip(se, mailbox, mem,
                                   SeOpCode.AEAD_ENCRYPT.value, b"secret")
        assert status is SeStatus.OK
        assert len(sealed) == NONCE_LEN + len(b"secret") + TAG_LEN
        status, opened = roundtrip(se, mailbox, mem,
                                   SeOpCode.AEAD_DECRYPT.value, sealed)
        assert status is SeStatus.OK
        assert opened == b"secret"

    def test_aead_nonces_never_repeat_across_requests(self):
        se, mailbox, mem = make_se()
        nonces = set()
        for i in range(20):
            _, sealed = roundtrip(se, mailbox, mem,
                                  SeOpCode.AEAD_ENCRYPT.value, bytes([i]))
            nonces.add(sealed[:NONCE_LEN])
        assert len(nonces) == 20

    def test_aead_tamper_detected(self):
        se, mailbox, mem = make_se()
        _, sealed = roundtrip(se, mailbox, mem,
                              SeOpCode.AEAD_ENCRYPT.value, b"secret")
        for pos in (0, NONCE_LEN, len(sealed) - 1):
            bad = bytearray(sealed)
            bad[pos] ^= 0x01
            status, out = roundtrip(se, mailbox, mem,
                                    SeOpCode.AEAD_DECRYPT.value, bytes(bad))
            assert status is SeStatus.AUTH_FAILURE
            assert out == b""

    def test_aead_short_blob_is_auth_failure(self):
        se, mailbox, mem = make_se()
        status, _ = roundtrip(se, mailbox, mem,
                              SeOpCode.AEAD_DECRYPT.value, b"\x00" * 10)
        assert status is SeStatus.AUTH_FAILURE

    def test_sign_then_verify(self):
        se, mailbox, mem = make_se()
        msg = b"attest me"
        status, sig = roundtrip(se, mailbox, mem, SeOpCode.SIGN.value, msg)
        assert status is SeStatus.OK
        assert len(sig) == 64
        status, out = roundtrip(se, mailbox, mem, SeOpCode.VERIFY.value,
                                sig + msg)
        assert status is SeStatus.OK
        assert out == b"\x01"
        bad = bytearray(sig)
        bad[0] ^= 1
        status, _ = roundtrip(se, mailbox, mem, SeOpCode.VERIFY.value,
                              bytes(bad) + msg)
        assert status is SeStatus.AUTH_FAILURE

    def test_bad_op_code(self):
        se, mailbox, mem = make_se()
        status, out = roundtrip(se, mailbox, mem, 0x77, b"")
        assert status is SeStatus.BAD_OP_CODE
        assert out == b""

    def test_oversized_claimed_length(self):
        se, mailbox, mem = make_se()
        raw = bytearray(pack_request(SeOpCode.HASH.value, 1, b"", 0))
        raw[2:4] = (MAX_REQUEST_PAYLOAD + 1).to_bytes(2, "little")
        mem.poke(MAILBOX_BASE, bytes(raw))
        mailbox.ring()
        assert se.process(mailbox) is SeStatus.OVERSIZED_PAYLOAD

    def test_oversized_plaintext(self):
        se, mailbox, mem = make_se()
        status, _ = roundtrip(se, mailbox, mem, SeOpCode.AEAD_ENCRYPT.value,
                              b"\x00" * (MAX_PLAINTEXT + 1))
        assert status is SeStatus.OVERSIZED_PAYLOAD
        # At the limit it still fits.
        status, sealed = roundtrip(se, mailbox, mem,
                                   SeOpCode.AEAD_ENCRYPT.value,
                                   b"\x00" * MAX_PLAINTEXT)
        assert status is SeStatus.OK
        assert len(sealed) + 4 == MAILBOX_CAPACITY

    @given(raw=st.binary(min_size=0, max_size=64))
    @settings(max_examples=200)
    def test_arbitrary_request_bytes_never_crash(self, raw):
        se, mailbox, mem = make_se()
        mem.poke(MAILBOX_BASE, raw.ljust(MAILBOX_CAPACITY, b"\x00"))
        mailbox.ring()
        status = se.process(mailbox)
        got_status, payload = mailbox.collect()
        assert got_status is status
        assert len(payload) <= MAILBOX_CAPACITY - 4
        assert mailbox.state is MailboxState.EMPTY


class TestSealHelpers:
    def test_seal_unseal(self):
        key = bytes(32)
        blob = seal(key, Trng(9), b"data")
        assert unseal(key, blob) == b"data"
        assert unseal(bytes(range(32)), blob) is None

    def test_sealed_blob_is_deterministic_per_seed(self):
        key = bytes(32)
        assert seal(key, Trng(5), b"x") == seal(key, Trng(5), b"x")
        assert seal(key, Trng(5), b"x") != seal(key, Trng(6), b"x")

    def test_request_header_size(self):
        assert REQ_HEADER.size == 8


def test_efuse_validates_key_length():
    with pytest.raises(ValueError):
        Efuse(aead_key=b"short", signing_seed=bytes(32))


def test_device_public_key_is_stable():
    se1, _, _ = make_se()
    se2, _, _ = make_se()
    assert se1.device_public_key() == se2.device_public_key()
    assert len(se1.device_public_key()) == 32

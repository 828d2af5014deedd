"""Measured boot chain: derivation oracle, failure modes, key install."""

import subprocess

import pytest
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from xine.boot import (
    BootFailureReason,
    BootImage,
    Cdi,
    canonical_memmap_bytes,
    fingerprint,
    make_signed_image,
    measure_image,
    read_measurements,
    run_boot_chain,
    write_measurements,
)
from xine.se import Efuse

# Two-layer chain derived by hand with sha256sum and openssl's HMAC:
# device secret all zeros, layer 0 code b"epa-code" bound to a one-region
# memory map, layer 1 code b"ce-code".
ORACLE_MEMMAP = b'{"regions":[{"base":0,"label":"flash","size":4096}]}'
ORACLE_M0 = "e569c0836433025741e41cb22c7b8e84e52736a003c33987cdf1ffac13d5dde3"
ORACLE_CDI0 = "2d22694070785d806a4b0da20f1939e9186913a5d3295dcf74263fc69eb2f7a3"
ORACLE_CDI1 = "44f2ee7193258380544121897462389313c768f7aad29588bd736269f65eb615"
ORACLE_SEAL = "ef96b6aaf1c746ee49104ae4bee24d47a4b1caa92869469cc8335feb2d57d1eb"


def openssl_hmac(key: bytes, msg: bytes) -> bytes:
    out = subprocess.run(
        ["openssl", "dgst", "-sha256", "-mac", "HMAC",
         "-macopt", f"hexkey:{key.hex()}"],
        input=msg, capture_output=True, check=True)
    return bytes.fromhex(out.stdout.split()[-1].decode())


def provision(n_layers=3):
    signer = Ed25519PrivateKey.from_private_bytes(bytes(range(32)))
    pub = signer.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
    efuse = Efuse(aead_key=bytes(32), signing_seed=bytes(range(64, 96)),
                  boot_pubkeys={"vendor": pub})
    memmap = ORACLE_MEMMAP
    names_codes = [("epa", b"epa-code"), ("ce", b"ce-code"),
                   ("re", b"re-code")][:n_layers]
    images = [make_signed_image(name, code, layer, memmap, signer, "vendor")
              for layer, (name, code) in enumerate(names_codes)]
    return images, efuse, signer, memmap


class TestDerivation:
    def test_layer0_measurement_matches_oracle(self):
        images, _, _, memmap = provision(1)
        m0 = measure_image(images[0], 0, memmap)
        assert m0.hex() == ORACLE_M0

    def test_chain_matches_openssl_oracle(self):
        images, efuse, _, memmap = provision(2)
        report = run_boot_chain(images, efuse, bytes(32), memmap)
        assert report.ok
        assert report.layers[0].cdi.value.hex() == ORACLE_CDI0
        assert report.layers[1].cdi.value.hex() == ORACLE_CDI1
        assert efuse.sealing_key.hex() == ORACLE_SEAL
        assert report.sealing_key_fingerprint == fingerprint(efuse.sealing_key)

    def test_each_step_is_hmac(self):
        # Cross-check every derivation in a 3-layer chain with openssl.
        images, efuse, _, memmap = provision(3)
        report = run_boot_chain(images, efuse, bytes(32), memmap)
        parent = bytes(32)
        for layer, record in enumerate(report.layers):
            want = openssl_hmac(parent, measure_image(images[layer], layer, memmap))
            assert record.cdi.value == want
            parent = want
        assert efuse.sealing_key == openssl_hmac(parent, b"sealing-key")

    def test_memmap_binding_changes_layer0_only(self):
        images, _, _, memmap = provision(3)
        other = canonical_memmap_bytes(
            [{"base": 0, "label": "flash", "size": 8192}])
        assert measure_image(images[0], 0, memmap) != \
            measure_image(images[0], 0, other)
        assert measure_image(images[1], 1, memmap) == \
            measure_image(images[1], 1, other)


class TestCanonicalMemmap:
    def test_sorted_and_compact(self):
        raw = [{"label": "ram", "size": 4096, "base": 0x1000},
               {"size": 4096, "base": 0, "label": "flash"}]
        out = canonical_memmap_bytes(raw)
        assert out == (b'{"regions":['
                       b'{"base":0,"label":"flash","size":4096},'
                       b'{"base":4096,"label":"ram","size":4096}]}')

    def test_oracle_literal(self):
        raw = [{"base": 0, "label": "flash", "size": 4096}]
        assert canonical_memmap_bytes(raw) == ORACLE_MEMMAP


class TestFailures:
    def test_tampered_code_stops_chain(self):
        images, efuse, _, memmap = provision(3)
        bad = BootImage(images[1].name, images[1].code + b"\x00",
                        images[1].expected_measurement, images[1].signature,
                        images[1].signer_key_id)
        report = run_boot_chain([images[0], bad, images[2]], efuse,
                                bytes(32), memmap)
        assert not report.ok
        assert report.failure.layer == 1
        assert report.failure.reason is BootFailureReason.MEASUREMENT_MISMATCH
        # Only the layers before the failure were derived; no sealing key.
        assert len(report.layers) == 1
        assert efuse.sealing_key is None

    def test_bad_signature(self):
        images, efuse, _, memmap = provision(1)
        img = images[0]
        forged = bytearray(img.signature)
        forged[0] ^= 1
        bad = BootImage(img.name, img.code, img.expected_measurement,
                        bytes(forged), img.signer_key_id)
        report = run_boot_chain([bad], efuse, bytes(32), memmap)
        assert report.failure.reason is BootFailureReason.BAD_SIGNATURE

    def test_unknown_signer(self):
        images, efuse, _, memmap = provision(1)
        img = images[0]
        bad = BootImage(img.name, img.code, img.expected_measurement,
                        img.signature, "who")
        report = run_boot_chain([bad], efuse, bytes(32), memmap)
        assert report.failure.reason is BootFailureReason.UNKNOWN_SIGNER_KEY

    def test_signature_checked_before_measurement(self):
        # Both the signature and the code are wrong: signature wins.
        images, efuse, _, memmap = provision(1)
        img = images[0]
        bad = BootImage(img.name, img.code + b"!", img.expected_measurement,
                        b"\x00" * 64, img.signer_key_id)
        report = run_boot_chain([bad], efuse, bytes(32), memmap)
        assert report.failure.reason is BootFailureReason.BAD_SIGNATURE

    def test_any_single_bit_flip_is_caught(self):
        images, efuse, _, memmap = provision(3)
        code = images[2].code
        for bit in range(0, len(code) * 8, 13):
            flipped = bytearray(code)
            flipped[bit // 8] ^= 1 << (bit % 8)
            bad = BootImage(images[2].name, bytes(flipped),
                            images[2].expected_measurement,
                            images[2].signature, images[2].signer_key_id)
            report = run_boot_chain([images[0], images[1], bad],
                                    efuse, bytes(32), memmap)
            assert not report.ok
            assert report.failure.reason is \
                BootFailureReason.MEASUREMENT_MISMATCH


class TestSecrecyAndFiles:
    def test_cdi_repr_is_redacted(self):
        cdi = Cdi(b"\xAA" * 32)
        assert b"\xAA".hex() * 32 not in repr(cdi)
        assert "fp=" in repr(cdi)
        assert cdi.value.hex() not in repr(cdi)

    def test_measurements_file_round_trip(self, tmp_path):
        path = tmp_path / "golden.measurements"
        entries = [("epa.bin", bytes(range(32))), ("ce.bin", bytes(32))]
        write_measurements(str(path), entries)
        text = path.read_text()
        assert f"{bytes(range(32)).hex()}  epa.bin\n" in text
        assert read_measurements(str(path)) == entries

    def test_measurements_file_matches_sha256sum_layout(self, tmp_path):
        # sha256sum must parse our file for its check mode.
        target = tmp_path / "blob.bin"
        target.write_bytes(b"roundtrip")
        digest = subprocess.run(["sha256sum", "blob.bin"], cwd=tmp_path,
                                capture_output=True, check=True)
        line = digest.stdout.decode()
        path = tmp_path / "list.measurements"
        write_measurements(
            str(path), [("blob.bin",
                         bytes.fromhex(line.split()[0]))])
        assert path.read_text() == line

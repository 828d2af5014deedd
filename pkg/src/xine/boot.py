"""Measured boot: layered code measurement and compound key derivation.

Boot walks a fixed three-layer chain: the arbitrator firmware, then the
crypto enclave image, then the runtime enclave image. Each layer is
measured with SHA-256 and chained into a compound device identifier:

    cdi_0 = HMAC-SHA256(device_secret, measurement_0)
    cdi_n = HMAC-SHA256(cdi_{n-1},    measurement_n)

Layer 0 additionally binds the platform memory map: its measurement
covers the firmware code followed by the digest of the canonical memory
map JSON, so moving a region re-keys the device.

Every image carries its expected measurement signed by a provisioning
key whose public half is burned into the eFuse block. Verification order
per layer: signer key known, signature valid over the expected
measurement, computed measurement equals the expected one. The first
failure stops the chain and nothing is derived past it. On success the
final compound identifier yields the sealing key, which is installed
into the eFuse block for the secure element's lifetime.

Compound identifiers are secrets; their repr shows only a short
fingerprint so they cannot leak into traces verbatim.
"""

from __future__ import annotations

import hashlib
import hmac
import json
from dataclasses import dataclass
from enum import Enum

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from .se import Efuse

SEALING_LABEL = b"sealing-key"
MEMMAP_BOUND_LAYER = 0


def fingerprint(secret: bytes) -> str:
    """Short public identifier for a secret value."""
    return hashlib.sha256(secret).digest()[:4].hex()


@dataclass(frozen=True, repr=False)
class Cdi:
    """Compound device identifier for one boot layer."""

    value: bytes

    def __repr__(self) -> str:
        return f"Cdi(fp={fingerprint(self.value)})"

    def child(self, measurement: bytes) -> "Cdi":
        return Cdi(hmac.new(self.value, measurement, hashlib.sha256).digest())


@dataclass(frozen=True)
class BootImage:
    name: str
    code: bytes
    expected_measurement: bytes
    signature: bytes
    signer_key_id: str


class BootFailureReason(Enum):
    MEASUREMENT_MISMATCH = "measurement-mismatch"
    BAD_SIGNATURE = "bad-signature"
    UNKNOWN_SIGNER_KEY = "unknown-signer-key"


@dataclass(frozen=True)
class BootFailure:
    layer: int
    image: str
    reason: BootFailureReason


@dataclass(frozen=True)
class LayerRecord:
    layer: int
    image: str
    measurement: bytes
    cdi: Cdi


@dataclass(frozen=True)
class BootReport:
    ok: bool
    layers: tuple[LayerRecord, ...]
    failure: BootFailure | None = None
    sealing_key_fingerprint: str | None = None


def _as_int(value) -> int:
    return int(value, 0) if isinstance(value, str) else int(value)


def canonical_memmap_bytes(memory_map: list[dict]) -> bytes:
    """Stable serialization of the memory map for measurement binding."""
    regions = sorted(
        ({"base": _as_int(r["base"]), "label": str(r["label"]),
          "size": _as_int(r["size"])} for r in memory_map),
        key=lambda r: r["base"])
    return json.dumps({"regions": regions}, sort_keys=True,
                      separators=(",", ":")).encode()


def measure_image(image: BootImage, layer: int, memmap_bytes: bytes) -> bytes:
    if layer == MEMMAP_BOUND_LAYER:
        bound = image.code + hashlib.sha256(memmap_bytes).digest()
        return hashlib.sha256(bound).digest()
    return hashlib.sha256(image.code).digest()


def run_boot_chain(images: list[BootImage], efuse: Efuse, device_secret: bytes,
                   memmap_bytes: bytes) -> BootReport:
    """Verify and measure the chain; burn the sealing key on success."""
    layers: list[LayerRecord] = []
    cdi = Cdi(device_secret)
    for layer, image in enumerate(images):
        pubkey_raw = efuse.boot_pubkeys.get(image.signer_key_id)
        if pubkey_raw is None:
            return BootReport(False, tuple(layers), BootFailure(
                layer, image.name, BootFailureReason.UNKNOWN_SIGNER_KEY))
        try:
            Ed25519PublicKey.from_public_bytes(pubkey_raw).verify(
                image.signature, image.expected_measurement)
        except InvalidSignature:
            return BootReport(False, tuple(layers), BootFailure(
                layer, image.name, BootFailureReason.BAD_SIGNATURE))
        measurement = measure_image(image, layer, memmap_bytes)
        if measurement != image.expected_measurement:
            return BootReport(False, tuple(layers), BootFailure(
                layer, image.name, BootFailureReason.MEASUREMENT_MISMATCH))
        cdi = cdi.child(measurement)
        layers.append(LayerRecord(layer, image.name, measurement, cdi))

    sealing_key = hmac.new(cdi.value, SEALING_LABEL, hashlib.sha256).digest()
    efuse.sealing_key = sealing_key
    return BootReport(True, tuple(layers),
                      sealing_key_fingerprint=fingerprint(sealing_key))


def make_signed_image(name: str, code: bytes, layer: int, memmap_bytes: bytes,
                      signer: Ed25519PrivateKey, key_id: str) -> BootImage:
    """Provisioning-side helper: measure and sign a known-good image."""
    probe = BootImage(name, code, b"", b"", key_id)
    measurement = measure_image(probe, layer, memmap_bytes)
    return BootImage(name, code, measurement, signer.sign(measurement), key_id)


def write_measurements(path: str, entries: list[tuple[str, bytes]]) -> None:
    """Write ``<hex>  <name>`` lines, the common digest-tool format."""
    with open(path, "w", encoding="ascii") as fh:
        for name, digest in entries:
            fh.write(f"{digest.hex()}  {name}\n")


def read_measurements(path: str) -> list[tuple[str, bytes]]:
    entries = []
    with open(path, encoding="ascii") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            digest_hex, _, name = line.partition("  ")
            entries.append((name, bytes.fromhex(digest_hex)))
    return entries

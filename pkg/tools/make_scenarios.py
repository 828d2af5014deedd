#!/usr/bin/env python3
"""Regenerate the bundled scenario assets.

Everything here is deterministic: image bytes come from counter-mode
SHA-256 streams, keys are derived from fixed labels, and signatures are
Ed25519 (deterministic by construction). Running this twice produces
byte-identical files, which a test asserts against the committed copies.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from xine.boot import canonical_memmap_bytes, make_signed_image, write_measurements
from xine.scenario import load_scenario, measure_scenario

RAM = 0x2000_0000

MEMORY_MAP = [
    {"label": "flash", "base": "0x0", "size": "0x20000"},
    {"label": "ram", "base": "0x20000000", "size": "0x100000"},
    {"label": "mailbox-mmio", "base": "0x40000000", "size": "0x1000"},
    {"label": "dma-mmio", "base": "0x40010000", "size": "0x100"},
]


def stream(tag: str, size: int) -> bytes:
    out = bytearray()
    counter = 0
    while len(out) < size:
        out.extend(hashlib.sha256(tag.encode() + counter.to_bytes(4, "little")).digest())
        counter += 1
    return bytes(out[:size])


def derive_key(label: str) -> bytes:
    return hashlib.sha256(label.encode()).digest()


def qr_frame() -> bytes:
    frame = b"QR1|amount=12.34|payee=cafe-0042|txn=000777|ts=1700000000"
    return frame.ljust(64, b".")


def enclave_defs() -> list[dict]:
    window = lambda base: {"base": hex(base + 0x800), "size": "0x200"}
    return [
        {"name": "re", "kind": "runtime", "base": "0x20000000", "size": "0x1000"},
        {"name": "ce", "kind": "crypto", "base": "0x20001000", "size": "0x1000"},
        {"name": "ae1", "kind": "app", "base": "0x20002000", "size": "0x1000",
         "receive_window": window(0x2000_2000)},
        {"name": "ae2", "kind": "app", "base": "0x20003000", "size": "0x1000",
         "receive_window": window(0x2000_3000)},
        {"name": "ae3", "kind": "app", "base": "0x20004000", "size": "0x1000",
         "receive_window": window(0x2000_4000)},
    ]


def qr_programs() -> dict[str, list[str]]:
    record = 0x2000_3100
    sealed = 0x2000_3140
    digest = 0x2000_317C
    ae2 = ["capture-window:",
           "read 0x20003800 64 -> r0",
           "hash r0..r15 -> r16"]
    ae2 += [f"write {record + 4 * i:#x} r{16 + i}" for i in range(8)]
    ae2 += ["attest:",
            f"crypto hash {record:#x} 32 {digest:#x}",
            f"crypto aead_encrypt {record:#x} 32 {sealed:#x}",
            f"dma_push ae3 {sealed:#x} 92",
            "exit"]
    return {
        "ae1": ["capture:",
                f"write 0x20002100 {qr_frame().hex()}",
                "dma_push ae2 0x20002100 64",
                "exit"],
        "ae2": ae2,
        "ae3": ["uplink:",
                "read 0x20004800 4 -> r0",
                "exit"],
    }


def build(out_dir: str) -> list[str]:
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    written = []

    images = {
        "epa": stream("arbitrator-firmware", 512),
        "ce": stream("crypto-enclave-image", 256),
        "re": stream("runtime-library-image", 256),
    }
    for name, code in images.items():
        path = os.path.join(out_dir, "images", f"{name}.bin")
        with open(path, "wb") as fh:
            fh.write(code)
        written.append(path)

    signer = Ed25519PrivateKey.from_private_bytes(
        derive_key("vendor-signing-key-v1"))
    pubkey = signer.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
    memmap = canonical_memmap_bytes(MEMORY_MAP)
    signed = [make_signed_image(name, images[name], layer, memmap, signer,
                                "vendor")
              for layer, name in enumerate(["epa", "ce", "re"])]

    boot = {
        "images": [{"name": img.name, "file": f"images/{img.name}.bin",
                    "signer": "vendor",
                    "measurement": img.expected_measurement.hex(),
                    "signature": img.signature.hex()}
                   for img in signed],
        "pubkeys": {"vendor": pubkey.hex()},
    }
    efuse = {
        "aead_key": derive_key("device-sealing-key-v1").hex(),
        "signing_seed": derive_key("device-identity-key-v1").hex(),
        "device_secret": derive_key("device-unique-secret-v1").hex(),
    }

    programs = qr_programs()
    enclaves = []
    for enc in enclave_defs():
        enc = dict(enc)
        if enc["name"] in programs:
            enc["program"] = programs[enc["name"]]
        enclaves.append(enc)

    qr = {
        "name": "qr-payment",
        "seed": 7,
        "step_budget": 100000,
        "memory_map": MEMORY_MAP,
        "enclaves": enclaves,
        "dma_policy": ["ae1->ae2", "ae2->ae3"],
        "start": ["ae1", "ae2", "ae3"],
        "boot": boot,
        "efuse": efuse,
        "cloud_submit": {"enclave": "ae3"},
        "assertions": [
            {"kind": "clean"},
            {"kind": "cloud-accepted"},
            {"kind": "event-present", "event": "dma-verdict",
             "attrs": {"verdict": "granted", "dst": "ae3"}},
            {"kind": "event-present", "event": "se-op",
             "attrs": {"op": "aead_encrypt", "status": "ok"}},
        ],
    }

    adversarial_enclaves = []
    for enc in enclave_defs():
        enc = dict(enc)
        if enc["name"] == "ae1":
            enc["program"] = ["probe:",
                              "read 0x20003000 16 -> r0",
                              "exit"]
        adversarial_enclaves.append(enc)
    adversarial = {
        "name": "adversarial-read",
        "seed": 7,
        "step_budget": 100000,
        "memory_map": MEMORY_MAP,
        "enclaves": adversarial_enclaves,
        "dma_policy": [],
        "start": ["ae1"],
        "boot": boot,
        "efuse": efuse,
        "assertions": [
            {"kind": "killed", "enclaves": ["ae1"]},
            {"kind": "memory-zero", "addr": "0x20002000", "length": 4096},
        ],
    }

    for name, cfg in (("qr_payment", qr), ("adversarial_read", adversarial)):
        path = os.path.join(out_dir, f"{name}.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(cfg, fh, indent=2)
            fh.write("\n")
        written.append(path)

    scenario = load_scenario(os.path.join(out_dir, "qr_payment.json"))
    entries = measure_scenario(scenario)
    measurements_path = os.path.join(out_dir, "qr_payment.measurements")
    write_measurements(measurements_path, entries)
    memmap_path = os.path.join(out_dir, "qr_payment.memmap")
    with open(memmap_path, "wb") as fh:
        fh.write(scenario.memmap_bytes())
    written += [measurements_path, memmap_path]
    return written


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="scenarios",
                        help="output directory (default: scenarios)")
    args = parser.parse_args()
    for path in build(args.out):
        print(path)


if __name__ == "__main__":
    main()

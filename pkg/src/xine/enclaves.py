"""Enclave layout model and per-enclave PMP programming.

Three enclave kinds share the machine. Application enclaves hold tenant
code and data. The single runtime enclave holds shared library code that
application enclaves may execute but never read or write. The single
crypto enclave brokers every secure element request and is the only
enclave that can reach the mailbox MMIO window.

Each enclave gets a freshly programmed PMP unit when it is scheduled.
Slot assignments are fixed so audits can point at an entry index:

    0  own region            RWX
    1  runtime region        X only   (application enclaves)
    2  requester region      RW       (crypto enclave, during a service call)
    3  mailbox MMIO          RW       (crypto enclave)
    4  DMA MMIO              RW       (application enclaves)

Everything else stays Off, so any access outside these windows faults.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from .machine import Memory, PmpEntry, PmpUnit, napot_entry

MAX_ENCLAVES = 14

SLOT_OWN = 0
SLOT_RUNTIME_EXEC = 1
SLOT_REQUESTER = 2
SLOT_MAILBOX = 3
SLOT_DMA = 4


class EnclaveKind(Enum):
    APP = "app"
    CRYPTO = "crypto"
    RUNTIME = "runtime"


@dataclass(frozen=True)
class Region:
    base: int
    size: int

    @property
    def limit(self) -> int:
        return self.base + self.size

    def contains(self, addr: int, length: int = 1) -> bool:
        return self.base <= addr and addr + length <= self.limit

    def overlaps(self, other: "Region") -> bool:
        return self.base < other.limit and other.base < self.limit

    def intersects_span(self, addr: int, length: int) -> bool:
        return addr < self.limit and self.base < addr + length


def is_napot_region(region: Region) -> bool:
    size = region.size
    if size < 8 or size & (size - 1):
        return False
    return region.base % size == 0


@dataclass(frozen=True)
class EnclaveDef:
    """Static enclave description from the platform configuration."""

    name: str
    kind: EnclaveKind
    region: Region
    entry: int
    receive_window: Region | None = None


@dataclass(frozen=True)
class LayoutIssue:
    code: str
    message: str


@dataclass(frozen=True)
class Layout:
    enclaves: tuple[EnclaveDef, ...]
    mailbox_mmio: Region
    dma_mmio: Region

    def by_name(self, name: str) -> EnclaveDef | None:
        for enc in self.enclaves:
            if enc.name == name:
                return enc
        return None

    @property
    def runtime(self) -> EnclaveDef | None:
        for enc in self.enclaves:
            if enc.kind is EnclaveKind.RUNTIME:
                return enc
        return None

    @property
    def crypto(self) -> EnclaveDef | None:
        for enc in self.enclaves:
            if enc.kind is EnclaveKind.CRYPTO:
                return enc
        return None

    def apps(self) -> tuple[EnclaveDef, ...]:
        return tuple(e for e in self.enclaves if e.kind is EnclaveKind.APP)

    def owner_of_span(self, addr: int, length: int) -> EnclaveDef | None:
        for enc in self.enclaves:
            if enc.region.intersects_span(addr, length):
                return enc
        return None


def validate_layout(layout: Layout, memory: Memory | None = None) -> list[LayoutIssue]:
    """Audit a layout before any enclave runs.

    Checks are structural only; an empty list means every enclave region
    fits the PMP encoding, nothing overlaps, and the singleton roles are
    actually singletons.
    """
    issues: list[LayoutIssue] = []
    names: set[str] = set()
    for enc in layout.enclaves:
        if enc.name in names:
            issues.append(LayoutIssue(
                "duplicate-name", f"enclave name {enc.name!r} used twice"))
        names.add(enc.name)
        if not is_napot_region(enc.region):
            issues.append(LayoutIssue(
                "not-napot",
                f"{enc.name}: region {enc.region.base:#x}+{enc.region.size:#x} "
                "is not a naturally aligned power-of-two"))
        if not enc.region.contains(enc.entry, 4):
            issues.append(LayoutIssue(
                "entry-point-outside",
                f"{enc.name}: entry {enc.entry:#x} not inside its region"))
        if enc.receive_window is not None:
            win = enc.receive_window
            if not (enc.region.contains(win.base) and win.limit <= enc.region.limit
                    and win.size >= 1):
                issues.append(LayoutIssue(
                    "window-outside",
                    f"{enc.name}: receive window {win.base:#x}+{win.size:#x} "
                    "not inside its region"))
        if memory is not None:
            hosting = memory.region_for(enc.region.base, enc.region.size)
            if hosting is None:
                issues.append(LayoutIssue(
                    "unmapped",
                    f"{enc.name}: region {enc.region.base:#x}+{enc.region.size:#x} "
                    "not backed by mapped memory"))

    encs = layout.enclaves
    for i, a in enumerate(encs):
        for b in encs[i + 1:]:
            if a.region.overlaps(b.region):
                issues.append(LayoutIssue(
                    "overlap", f"regions of {a.name} and {b.name} overlap"))
        for mmio, label in ((layout.mailbox_mmio, "mailbox"),
                            (layout.dma_mmio, "dma")):
            if a.region.overlaps(mmio):
                issues.append(LayoutIssue(
                    "overlap", f"region of {a.name} overlaps {label} MMIO"))

    if len(encs) > MAX_ENCLAVES:
        issues.append(LayoutIssue(
            "too-many-enclaves",
            f"{len(encs)} enclaves plus two MMIO windows exceed the "
            f"16-entry PMP budget"))

    runtimes = [e for e in encs if e.kind is EnclaveKind.RUNTIME]
    cryptos = [e for e in encs if e.kind is EnclaveKind.CRYPTO]
    if not runtimes:
        issues.append(LayoutIssue("no-runtime", "layout has no runtime enclave"))
    elif len(runtimes) > 1:
        issues.append(LayoutIssue(
            "multiple-runtime", "layout has more than one runtime enclave"))
    if len(cryptos) > 1:
        issues.append(LayoutIssue(
            "multiple-crypto", "layout has more than one crypto enclave"))
    return issues


def pmp_unit_for(enclave: EnclaveDef, layout: Layout,
                 requester: EnclaveDef | None = None) -> PmpUnit:
    """Program a PMP unit for one scheduled enclave.

    ``requester`` is only honored for the crypto enclave; it opens a
    temporary RW window on the caller's region so the service result can
    be written back. All regions must be NAPOT-encodable, which
    ``validate_layout`` guarantees up front.
    """
    entries: list[PmpEntry] = [PmpEntry()] * 5
    entries[SLOT_OWN] = napot_entry(
        enclave.region.base, enclave.region.size, r=True, w=True, x=True)

    if enclave.kind is EnclaveKind.APP:
        runtime = layout.runtime
        if runtime is not None:
            entries[SLOT_RUNTIME_EXEC] = napot_entry(
                runtime.region.base, runtime.region.size, x=True)
        entries[SLOT_DMA] = napot_entry(
            layout.dma_mmio.base, layout.dma_mmio.size, r=True, w=True)

    if enclave.kind is EnclaveKind.CRYPTO:
        entries[SLOT_MAILBOX] = napot_entry(
            layout.mailbox_mmio.base, layout.mailbox_mmio.size, r=True, w=True)
        if requester is not None:
            entries[SLOT_REQUESTER] = napot_entry(
                requester.region.base, requester.region.size, r=True, w=True)

    return PmpUnit(entries)

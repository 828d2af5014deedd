"""Physical memory model and the PMP access checker.

A single hart with two privilege levels (Machine and User) runs against a
flat 32-bit physical address space. Every User-mode access is adjudicated
by a 16-entry PMP unit; Machine mode is axiomatically trusted and bypasses
the check entirely (the lock bit is not modeled). A denied access does not
raise: memory operations return a ``Trap`` value that the arbitrator turns
into a scheduling decision.

All multi-byte values are little-endian. PMP address registers hold the
physical address divided by 4, as in the RISC-V convention.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

PHYS_ADDR_BITS = 32
PHYS_ADDR_LIMIT = 1 << PHYS_ADDR_BITS
PMP_ENTRY_COUNT = 16

# Abstract cache line granularity used for the flushable tag set.
CACHE_LINE_BYTES = 64


class PrivilegeMode(Enum):
    MACHINE = "machine"
    USER = "user"


class AccessKind(Enum):
    READ = "read"
    WRITE = "write"
    EXECUTE = "execute"


class MatchMode(Enum):
    OFF = "off"
    TOR = "tor"
    NAPOT = "napot"


class MalformedEntry(Exception):
    """A TOR entry with inverted bounds (base above limit)."""


@dataclass(frozen=True)
class PmpEntry:
    """One PMP region descriptor.

    ``addr_reg`` encodes physical address bits [33:2], i.e. the byte
    address divided by 4. For TOR entries the region base comes from the
    *preceding* entry's address register, whatever that entry's mode is.
    """

    addr_reg: int = 0
    match_mode: MatchMode = MatchMode.OFF
    r: bool = False
    w: bool = False
    x: bool = False

    def grants(self, kind: AccessKind) -> bool:
        if kind is AccessKind.READ:
            return self.r
        if kind is AccessKind.WRITE:
            return self.w
        return self.x


OFF_ENTRY = PmpEntry()


def decode_region(entry: PmpEntry, prev_addr_reg: int) -> tuple[int, int] | None:
    """Decode an entry into ``(base, size)`` in bytes, or ``None``.

    Off entries and empty TOR ranges match nothing. NAPOT size comes from
    the trailing-ones encoding: k trailing one bits give 2**(k+3) bytes.

    Raises:
        MalformedEntry: TOR bounds are inverted.
    """
    if entry.match_mode is MatchMode.OFF:
        return None
    if entry.match_mode is MatchMode.TOR:
        base = prev_addr_reg * 4
        limit = entry.addr_reg * 4
        if base > limit:
            raise MalformedEntry(f"tor bounds inverted: {base:#x} > {limit:#x}")
        if base == limit:
            return None
        return base, limit - base
    # NAPOT
    k = _trailing_ones(entry.addr_reg)
    size = 1 << (k + 3)
    base = (entry.addr_reg & ~((1 << (k + 1)) - 1)) << 2
    return base, size


def _trailing_ones(value: int) -> int:
    count = 0
    while value & 1:
        count += 1
        value >>= 1
    return count


def napot_addr_reg(base: int, size: int) -> int:
    """Encode an aligned power-of-two region into a NAPOT address register."""
    if size < 8 or size & (size - 1):
        raise ValueError(f"napot size must be a power of two >= 8, got {size}")
    if base % size:
        raise ValueError(f"napot base {base:#x} not aligned to size {size:#x}")
    return (base >> 2) | ((size >> 3) - 1)


def napot_entry(base: int, size: int, *, r: bool = False, w: bool = False,
                x: bool = False) -> PmpEntry:
    return PmpEntry(addr_reg=napot_addr_reg(base, size),
                    match_mode=MatchMode.NAPOT, r=r, w=w, x=x)


class DenyReason(Enum):
    PERMISSION_MISSING = "permission-missing"
    STRADDLES_BOUNDARY = "straddles-boundary"
    NO_MATCH = "no-match"


@dataclass(frozen=True)
class PmpDecision:
    allowed: bool
    reason: DenyReason | None = None
    entry_index: int | None = None

    def __bool__(self) -> bool:
        return self.allowed


ALLOW_MACHINE = PmpDecision(True)


class PmpUnit:
    """Fixed array of 16 PMP entries; lowest index wins.

    Entries are immutable once the unit is built, so the decoded regions
    are computed once and reused for every check.
    """

    def __init__(self, entries: list[PmpEntry] | None = None):
        entries = list(entries or [])
        if len(entries) > PMP_ENTRY_COUNT:
            raise ValueError(f"at most {PMP_ENTRY_COUNT} PMP entries, got {len(entries)}")
        entries.extend([OFF_ENTRY] * (PMP_ENTRY_COUNT - len(entries)))
        self.entries: tuple[PmpEntry, ...] = tuple(entries)
        self._regions: tuple[tuple[int, int] | None, ...] = tuple(
            decode_region(e, self.entries[i - 1].addr_reg if i else 0)
            for i, e in enumerate(self.entries)
        )

    def regions(self) -> tuple[tuple[int, int] | None, ...]:
        """Decoded ``(base, size)`` per entry index (``None`` if inactive)."""
        return self._regions

    def check(self, mode: PrivilegeMode, addr: int, length: int,
              kind: AccessKind) -> PmpDecision:
        """Adjudicate the byte range ``[addr, addr+length)``.

        Machine mode always passes. In User mode the per-byte matching
        entry is the lowest-index entry containing that byte; the access
        is allowed only when one entry claims every byte and grants the
        requested kind. A range split across matching entries is denied
        even if both sides would individually allow it.
        """
        if length < 1:
            raise ValueError("access length must be >= 1")
        if mode is PrivilegeMode.MACHINE:
            return ALLOW_MACHINE
        lo, hi = addr, addr + length
        for index, region in enumerate(self._regions):
            if region is None:
                continue
            base, size = region
            limit = base + size
            if hi <= base or lo >= limit:
                continue
            if base <= lo and hi <= limit:
                entry = self.entries[index]
                if entry.grants(kind):
                    return PmpDecision(True, entry_index=index)
                return PmpDecision(False, DenyReason.PERMISSION_MISSING, index)
            # Partial overlap: some bytes match this entry first, the rest
            # belong to later entries or nothing at all.
            return PmpDecision(False, DenyReason.STRADDLES_BOUNDARY, index)
        return PmpDecision(False, DenyReason.NO_MATCH)


def pmp_check(unit: PmpUnit, mode: PrivilegeMode, addr: int, length: int,
              kind: AccessKind) -> PmpDecision:
    return unit.check(mode, addr, length, kind)


class TrapReason(Enum):
    PMP_VIOLATION = "pmp-violation"
    UNMAPPED_ADDRESS = "unmapped-address"


@dataclass(frozen=True)
class Trap:
    """Access fault delivered to the arbitrator instead of data."""

    addr: int
    kind: AccessKind
    reason: TrapReason
    detail: DenyReason | None = None


@dataclass
class MemRegion:
    base: int
    size: int
    label: str
    backing: bytearray = field(repr=False, default_factory=bytearray)

    def __post_init__(self) -> None:
        if self.base < 0 or self.size < 1:
            raise ValueError("region needs base >= 0 and size >= 1")
        if self.base + self.size > PHYS_ADDR_LIMIT:
            raise ValueError(f"region exceeds {PHYS_ADDR_BITS}-bit address space")
        if not self.backing:
            self.backing = bytearray(self.size)
        elif len(self.backing) != self.size:
            raise ValueError("backing length does not match region size")

    @property
    def limit(self) -> int:
        return self.base + self.size

    def contains(self, addr: int, length: int = 1) -> bool:
        return self.base <= addr and addr + length <= self.limit


class Memory:
    """Disjoint labeled regions backed by byte arrays.

    ``read``/``write`` are the hart-side path: PMP first, then the map.
    ``peek``/``poke`` are the raw bus-master path used by hardware actors
    (DMA engine, SE mailbox, scenario loader); they bypass the PMP but
    still require a mapped target.
    """

    def __init__(self, regions: list[MemRegion]):
        self.regions = sorted(regions, key=lambda r: r.base)
        for a, b in zip(self.regions, self.regions[1:]):
            if a.limit > b.base:
                raise ValueError(f"regions {a.label!r} and {b.label!r} overlap")

    def region_for(self, addr: int, length: int = 1) -> MemRegion | None:
        for region in self.regions:
            if region.contains(addr, length):
                return region
        return None

    def region_by_label(self, label: str) -> MemRegion | None:
        for region in self.regions:
            if region.label == label:
                return region
        return None

    def peek(self, addr: int, length: int) -> bytes:
        region = self.region_for(addr, length)
        if region is None:
            raise IndexError(f"peek outside mapped memory: {addr:#x}+{length}")
        off = addr - region.base
        return bytes(region.backing[off:off + length])

    def poke(self, addr: int, data: bytes) -> None:
        region = self.region_for(addr, len(data))
        if region is None:
            raise IndexError(f"poke outside mapped memory: {addr:#x}+{len(data)}")
        off = addr - region.base
        region.backing[off:off + len(data)] = data

    def read(self, unit: PmpUnit, mode: PrivilegeMode, addr: int,
             length: int) -> bytes | Trap:
        return self._access(unit, mode, addr, length, AccessKind.READ)

    def write(self, unit: PmpUnit, mode: PrivilegeMode, addr: int,
              data: bytes) -> Trap | None:
        if len(data) < 1:
            raise ValueError("write length must be >= 1")
        outcome = self._access(unit, mode, addr, len(data), AccessKind.WRITE)
        if isinstance(outcome, Trap):
            return outcome
        self.poke(addr, data)
        return None

    def fetch_check(self, unit: PmpUnit, mode: PrivilegeMode,
                    addr: int, length: int = 4) -> Trap | None:
        """Instruction-fetch permission probe (Execute access)."""
        outcome = self._access(unit, mode, addr, length, AccessKind.EXECUTE)
        return outcome if isinstance(outcome, Trap) else None

    def _access(self, unit: PmpUnit, mode: PrivilegeMode, addr: int,
                length: int, kind: AccessKind) -> bytes | Trap:
        decision = unit.check(mode, addr, length, kind)
        if not decision.allowed:
            return Trap(addr, kind, TrapReason.PMP_VIOLATION, decision.reason)
        region = self.region_for(addr, length)
        if region is None:
            return Trap(addr, kind, TrapReason.UNMAPPED_ADDRESS)
        off = addr - region.base
        return bytes(region.backing[off:off + length])


def mem_read(mem: Memory, unit: PmpUnit, mode: PrivilegeMode, addr: int,
             length: int) -> bytes | Trap:
    return mem.read(unit, mode, addr, length)


def mem_write(mem: Memory, unit: PmpUnit, mode: PrivilegeMode, addr: int,
              data: bytes) -> Trap | None:
    return mem.write(unit, mode, addr, data)


def cache_lines(addr: int, length: int) -> set[int]:
    """Cache line base addresses touched by ``[addr, addr+length)``."""
    first = addr - addr % CACHE_LINE_BYTES
    return set(range(first, addr + length, CACHE_LINE_BYTES))

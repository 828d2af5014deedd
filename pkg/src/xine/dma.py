"""Push-only enclave-to-enclave DMA with a CSR-gated policy matrix.

The DMA engine is a bus master that copies without consulting any PMP
unit, so its own gates are the only thing standing between enclaves. A
transfer is legal when four checks pass, evaluated in a fixed order with
the first failure reported:

    1. the policy CSR matrix allows the src -> dst edge
    2. the source span does not touch any other enclave's region
       (push-only: an enclave can only hand over its own bytes)
    3. the source span lies fully inside the requester's region
    4. the destination's receive window has room left

Destinations never see a doorbell: granted data lands at the write
cursor of their availability row, and the cursor only rewinds when the
arbitrator refreshes the row on enclave exit. A denied request leaves
memory and the table untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from .enclaves import EnclaveDef, EnclaveKind, Layout, Region
from .machine import Memory


class DmaVerdict(Enum):
    GRANTED = 0
    POLICY_DENIED = 1
    PULL_FORBIDDEN = 2
    SOURCE_OUT_OF_REGION = 3
    INSUFFICIENT_SPACE = 4


@dataclass(frozen=True)
class DmaOutcome:
    verdict: DmaVerdict
    dst_addr: int | None = None
    length: int = 0

    @property
    def granted(self) -> bool:
        return self.verdict is DmaVerdict.GRANTED


class DmaPolicy:
    """Immutable src -> dst permission matrix, programmed before boot."""

    def __init__(self, edges: set[tuple[str, str]] | None = None):
        self._edges = frozenset(edges or set())

    @classmethod
    def from_edges(cls, edges: list[str]) -> "DmaPolicy":
        """Parse ``"src->dst"`` strings."""
        pairs = set()
        for edge in edges:
            src, sep, dst = edge.partition("->")
            if not sep or not src.strip() or not dst.strip():
                raise ValueError(f"bad policy edge {edge!r}")
            pairs.add((src.strip(), dst.strip()))
        return cls(pairs)

    def allows(self, src: str, dst: str) -> bool:
        return (src, dst) in self._edges

    def edges(self) -> frozenset[tuple[str, str]]:
        return self._edges


@dataclass
class AvailabilityRow:
    window: Region
    free_base: int = 0
    free_len: int = 0

    def __post_init__(self) -> None:
        self.reset()

    def reset(self) -> None:
        self.free_base = self.window.base
        self.free_len = self.window.size


class AvailabilityTable:
    """Per-destination write cursors over the declared receive windows."""

    def __init__(self, layout: Layout):
        self.rows: dict[str, AvailabilityRow] = {}
        for enc in layout.enclaves:
            if enc.kind is EnclaveKind.APP:
                window = enc.receive_window or Region(enc.region.base, 0)
                self.rows[enc.name] = AvailabilityRow(window)

    def row(self, name: str) -> AvailabilityRow | None:
        return self.rows.get(name)

    def refresh(self, name: str) -> bool:
        row = self.rows.get(name)
        if row is None:
            return False
        row.reset()
        return True


class DmaEngine:
    def __init__(self, mem: Memory, layout: Layout, policy: DmaPolicy,
                 table: AvailabilityTable):
        self.mem = mem
        self.layout = layout
        self.policy = policy
        self.table = table

    def check(self, src: EnclaveDef, dst_name: str, src_addr: int,
              length: int) -> DmaVerdict:
        """Run the four gates without copying anything."""
        if not self.policy.allows(src.name, dst_name):
            return DmaVerdict.POLICY_DENIED
        for enc in self.layout.enclaves:
            if enc.name != src.name and enc.region.intersects_span(src_addr, length):
                return DmaVerdict.PULL_FORBIDDEN
        if not src.region.contains(src_addr, length):
            return DmaVerdict.SOURCE_OUT_OF_REGION
        row = self.table.row(dst_name)
        if row is None or row.free_len < length:
            return DmaVerdict.INSUFFICIENT_SPACE
        return DmaVerdict.GRANTED

    def request(self, src: EnclaveDef, dst_name: str, src_addr: int,
                length: int) -> DmaOutcome:
        """Adjudicate and, if granted, perform the copy atomically."""
        if length < 1:
            raise ValueError("dma length must be >= 1")
        verdict = self.check(src, dst_name, src_addr, length)
        if verdict is not DmaVerdict.GRANTED:
            return DmaOutcome(verdict)
        row = self.table.row(dst_name)
        dst_addr = row.free_base
        self.mem.poke(dst_addr, self.mem.peek(src_addr, length))
        row.free_base += length
        row.free_len -= length
        return DmaOutcome(DmaVerdict.GRANTED, dst_addr, length)

"""Shared builders for a small reference platform used across suites."""

import pytest

from xine.dma import AvailabilityTable, DmaEngine, DmaPolicy
from xine.enclaves import EnclaveDef, EnclaveKind, Layout, Region
from xine.epa import Epa
from xine.machine import MemRegion, Memory
from xine.se import Efuse, Mailbox, SecureElement, Trng
from xine.workload import check_targets, parse_program

FLASH = Region(0x0, 0x2_0000)
RAM = Region(0x2000_0000, 0x10_0000)
MAILBOX_MMIO = Region(0x4000_0000, 0x1000)
DMA_MMIO = Region(0x4001_0000, 0x100)


def make_memory() -> Memory:
    return Memory([
        MemRegion(FLASH.base, FLASH.size, "flash"),
        MemRegion(RAM.base, RAM.size, "ram"),
        MemRegion(MAILBOX_MMIO.base, MAILBOX_MMIO.size, "mailbox-mmio"),
        MemRegion(DMA_MMIO.base, DMA_MMIO.size, "dma-mmio"),
    ])


def make_layout(n_apps: int = 3, windows: bool = True) -> Layout:
    """Runtime at RAM base, crypto next, then ``n_apps`` app enclaves.

    Every region is one 4 KiB NAPOT block; receive windows sit in the top
    half of each app region.
    """
    step = 0x1000
    enclaves = [
        EnclaveDef("re", EnclaveKind.RUNTIME, Region(RAM.base, step), RAM.base),
        EnclaveDef("ce", EnclaveKind.CRYPTO, Region(RAM.base + step, step),
                   RAM.base + step),
    ]
    for i in range(n_apps):
        base = RAM.base + (2 + i) * step
        window = Region(base + 0x800, 0x200) if windows else None
        enclaves.append(EnclaveDef(f"ae{i + 1}", EnclaveKind.APP,
                                   Region(base, step), base,
                                   receive_window=window))
    return Layout(tuple(enclaves), MAILBOX_MMIO, DMA_MMIO)


def make_system(programs: dict[str, str], start: list[str],
                edges: tuple[str, ...] = ("ae1->ae2", "ae2->ae3"),
                seed: int = 1, step_budget: int = 10_000,
                n_apps: int = 3, interrupts=None) -> Epa:
    """Assemble a complete machine from micro-op sources."""
    mem = make_memory()
    layout = make_layout(n_apps)
    names = {e.name for e in layout.enclaves}
    parsed = {}
    for name, src in programs.items():
        prog = parse_program(src, name)
        check_targets(prog, names)
        parsed[name] = prog
    engine = DmaEngine(mem, layout, DmaPolicy.from_edges(list(edges)),
                       AvailabilityTable(layout))
    mailbox = Mailbox(mem, MAILBOX_MMIO)
    efuse = Efuse(aead_key=bytes(range(32)), signing_seed=bytes(range(32, 64)))
    se = SecureElement(efuse, Trng(seed))
    return Epa(mem, layout, parsed, dma_engine=engine, mailbox=mailbox,
               se=se, step_budget=step_budget, start=list(start),
               interrupts=interrupts)


@pytest.fixture
def memory() -> Memory:
    return make_memory()


@pytest.fixture
def layout() -> Layout:
    return make_layout()

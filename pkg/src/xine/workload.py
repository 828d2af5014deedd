"""Micro-op programs that enclaves execute.

Instead of a full ISA, enclave behavior is scripted in a small assembly
dialect with one memory or service action per line:

    label:
    read 0x20002800 64 -> r0        # load bytes into consecutive registers
    write 0x20002100 deadbeef       # store literal bytes
    write 0x20002104 r7             # store one register, 4 bytes LE
    exec 0x20000000                 # fetch from library code
    hash r0..r15 -> r16             # digest registers into registers
    crypto hash 0x20002100 32 0x20002140
    transfer ae2
    dma_push ae2 0x20002100 64
    yield
    exit

The interpreter runs one op per call and either continues or hands the
arbitrator a trap: an access fault, or one of the four intentional traps
(service call, transfer, DMA doorbell, exit). Faulting ops do not advance
the program counter; the four ecall-style ops advance it first, so a
resumed enclave continues after the call. ``yield`` deliberately does not
advance, which models a core spinning without progress.

Registers are 32 general-purpose 32-bit words, r0..r31, all writable.
Register r10 carries status and result codes written back by the
arbitrator. Loads scatter little-endian 4-byte words across consecutive
registers, zero-padding the tail.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from enum import Enum

from .machine import Memory, PmpUnit, PrivilegeMode, Trap, cache_lines

REG_COUNT = 32
REG_MASK = 0xFFFF_FFFF

# Status codes the arbitrator writes into r10.
STATUS_OK = 0
STATUS_DENIED = 1

SE_OP_CODES = {
    "aead_encrypt": 1,
    "aead_decrypt": 2,
    "hash": 3,
    "sign": 4,
    "verify": 5,
}


class ParseError(Exception):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class UndefinedLabel(Exception):
    """A transfer or DMA target names an enclave that does not exist."""


@dataclass(frozen=True)
class ReadOp:
    addr: int
    length: int
    dst: int


@dataclass(frozen=True)
class WriteOp:
    addr: int
    data: bytes | None = None
    src_reg: int | None = None


@dataclass(frozen=True)
class ExecOp:
    addr: int


@dataclass(frozen=True)
class CryptoOp:
    op_name: str
    op_code: int
    msg_addr: int
    length: int
    result_addr: int


@dataclass(frozen=True)
class TransferOp:
    target: str


@dataclass(frozen=True)
class DmaPushOp:
    target: str
    src_addr: int
    length: int


@dataclass(frozen=True)
class HashOp:
    lo: int
    hi: int
    dst: int


@dataclass(frozen=True)
class YieldOp:
    pass


@dataclass(frozen=True)
class ExitOp:
    pass


MicroOp = (ReadOp | WriteOp | ExecOp | CryptoOp | TransferOp | DmaPushOp
           | HashOp | YieldOp | ExitOp)


@dataclass(frozen=True)
class Program:
    ops: tuple[MicroOp, ...]
    labels: dict[str, int] = field(default_factory=dict)
    name: str = ""

    def __len__(self) -> int:
        return len(self.ops)


_REG_RE = re.compile(r"^r(\d+)$")
_LABEL_RE = re.compile(r"^([A-Za-z_][\w-]*):$")
_RANGE_RE = re.compile(r"^r(\d+)\.\.r(\d+)$")
_HEX_RE = re.compile(r"^(?:[0-9a-fA-F]{2})+$")


def _reg(tok: str, lineno: int) -> int:
    m = _REG_RE.match(tok)
    if not m or int(m.group(1)) >= REG_COUNT:
        raise ParseError(lineno, f"bad register {tok!r}")
    return int(m.group(1))


def _num(tok: str, lineno: int) -> int:
    try:
        value = int(tok, 0)
    except ValueError:
        raise ParseError(lineno, f"bad number {tok!r}") from None
    if value < 0:
        raise ParseError(lineno, f"negative value {tok!r}")
    return value


def parse_program(text: str, name: str = "") -> Program:
    """Parse micro-op source into a program.

    Raises:
        ParseError: malformed line, with the 1-based line number.
    """
    ops: list[MicroOp] = []
    labels: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        label = _LABEL_RE.match(line)
        if label:
            labels[label.group(1)] = len(ops)
            continue
        ops.append(_parse_op(line.split(), lineno))
    return Program(tuple(ops), labels, name)


def _parse_op(toks: list[str], lineno: int) -> MicroOp:
    head = toks[0]
    if head == "read":
        if len(toks) != 5 or toks[3] != "->":
            raise ParseError(lineno, "expected: read <addr> <len> -> r<N>")
        addr, length = _num(toks[1], lineno), _num(toks[2], lineno)
        dst = _reg(toks[4], lineno)
        if length < 1:
            raise ParseError(lineno, "read length must be >= 1")
        if dst + (length + 3) // 4 > REG_COUNT:
            raise ParseError(lineno, "read spills past r31")
        return ReadOp(addr, length, dst)
    if head == "write":
        if len(toks) != 3:
            raise ParseError(lineno, "expected: write <addr> <hexbytes|r<N>>")
        addr = _num(toks[1], lineno)
        if _REG_RE.match(toks[2]):
            return WriteOp(addr, src_reg=_reg(toks[2], lineno))
        if not _HEX_RE.match(toks[2]):
            raise ParseError(lineno, f"bad write payload {toks[2]!r}")
        return WriteOp(addr, data=bytes.fromhex(toks[2]))
    if head == "exec":
        if len(toks) != 2:
            raise ParseError(lineno, "expected: exec <addr>")
        return ExecOp(_num(toks[1], lineno))
    if head == "crypto":
        if len(toks) != 5:
            raise ParseError(
                lineno, "expected: crypto <op> <msg_addr> <len> <result_addr>")
        op_name = toks[1]
        if op_name in SE_OP_CODES:
            op_code = SE_OP_CODES[op_name]
        else:
            op_code = _num(op_name, lineno)
            if op_code > 0xFF:
                raise ParseError(lineno, "crypto op code must fit one byte")
        return CryptoOp(op_name, op_code, _num(toks[2], lineno),
                        _num(toks[3], lineno), _num(toks[4], lineno))
    if head == "transfer":
        if len(toks) != 2:
            raise ParseError(lineno, "expected: transfer <enclave>")
        return TransferOp(toks[1])
    if head == "dma_push":
        if len(toks) != 4:
            raise ParseError(lineno, "expected: dma_push <enclave> <src_addr> <len>")
        length = _num(toks[3], lineno)
        if length < 1:
            raise ParseError(lineno, "dma_push length must be >= 1")
        return DmaPushOp(toks[1], _num(toks[2], lineno), length)
    if head == "hash":
        if len(toks) != 4 or toks[2] != "->":
            raise ParseError(lineno, "expected: hash r<a>..r<b> -> r<N>")
        rng = _RANGE_RE.match(toks[1])
        if not rng:
            raise ParseError(lineno, f"bad register range {toks[1]!r}")
        lo, hi = int(rng.group(1)), int(rng.group(2))
        dst = _reg(toks[3], lineno)
        if not (lo <= hi < REG_COUNT):
            raise ParseError(lineno, f"bad register range r{lo}..r{hi}")
        if dst + 8 > REG_COUNT:
            raise ParseError(lineno, "hash digest spills past r31")
        return HashOp(lo, hi, dst)
    if head == "yield":
        if len(toks) != 1:
            raise ParseError(lineno, "yield takes no operands")
        return YieldOp()
    if head == "exit":
        if len(toks) != 1:
            raise ParseError(lineno, "exit takes no operands")
        return ExitOp()
    raise ParseError(lineno, f"unknown op {head!r}")


def check_targets(program: Program, known: set[str]) -> None:
    """Ensure every transfer/DMA target names a known enclave.

    Raises:
        UndefinedLabel: with the offending target name.
    """
    for op in program.ops:
        target = getattr(op, "target", None)
        if target is not None and target not in known:
            raise UndefinedLabel(
                f"program {program.name or '?'}: unknown enclave {target!r}")


@dataclass
class CpuContext:
    """Architectural state of one enclave activation."""

    regs: list[int] = field(default_factory=lambda: [0] * REG_COUNT)
    pc: int = 0
    cache_tags: set[int] = field(default_factory=set)

    def set_reg(self, index: int, value: int) -> None:
        self.regs[index] = value & REG_MASK

    def snapshot_regs(self) -> tuple[int, ...]:
        return tuple(self.regs)


class TrapCause(Enum):
    ACCESS_FAULT = "access-fault"
    SERVICE_REQUEST = "service-request"
    TRANSFER = "transfer"
    DMA_REQUEST = "dma-request"
    EXIT = "exit"


@dataclass(frozen=True)
class TrapEvent:
    cause: TrapCause
    op: MicroOp | None = None
    fault: Trap | None = None


def regs_bytes(ctx: CpuContext, lo: int, hi: int) -> bytes:
    return b"".join((ctx.regs[i] & REG_MASK).to_bytes(4, "little")
                    for i in range(lo, hi + 1))


def step(ctx: CpuContext, program: Program, mem: Memory,
         unit: PmpUnit) -> TrapEvent | None:
    """Execute one op; return ``None`` to continue or a trap to stop.

    Running past the last op behaves like an explicit ``exit``.
    """
    if ctx.pc >= len(program.ops):
        return TrapEvent(TrapCause.EXIT)
    op = program.ops[ctx.pc]

    if isinstance(op, ReadOp):
        data = mem.read(unit, PrivilegeMode.USER, op.addr, op.length)
        if isinstance(data, Trap):
            return TrapEvent(TrapCause.ACCESS_FAULT, op, data)
        padded = data.ljust(-(-op.length // 4) * 4, b"\x00")
        for i in range(0, len(padded), 4):
            ctx.set_reg(op.dst + i // 4,
                        int.from_bytes(padded[i:i + 4], "little"))
        ctx.cache_tags |= cache_lines(op.addr, op.length)
        ctx.pc += 1
        return None

    if isinstance(op, WriteOp):
        data = (op.data if op.data is not None
                else (ctx.regs[op.src_reg] & REG_MASK).to_bytes(4, "little"))
        trap = mem.write(unit, PrivilegeMode.USER, op.addr, data)
        if trap is not None:
            return TrapEvent(TrapCause.ACCESS_FAULT, op, trap)
        ctx.cache_tags |= cache_lines(op.addr, len(data))
        ctx.pc += 1
        return None

    if isinstance(op, ExecOp):
        trap = mem.fetch_check(unit, PrivilegeMode.USER, op.addr)
        if trap is not None:
            return TrapEvent(TrapCause.ACCESS_FAULT, op, trap)
        ctx.cache_tags |= cache_lines(op.addr, 4)
        ctx.pc += 1
        return None

    if isinstance(op, HashOp):
        digest = hashlib.sha256(regs_bytes(ctx, op.lo, op.hi)).digest()
        for i in range(8):
            ctx.set_reg(op.dst + i,
                        int.from_bytes(digest[4 * i:4 * i + 4], "little"))
        ctx.pc += 1
        return None

    if isinstance(op, YieldOp):
        return None

    if isinstance(op, ExitOp):
        return TrapEvent(TrapCause.EXIT, op)

    # The ecall-style ops advance first so a resume lands past the call.
    ctx.pc += 1
    if isinstance(op, CryptoOp):
        return TrapEvent(TrapCause.SERVICE_REQUEST, op)
    if isinstance(op, TransferOp):
        return TrapEvent(TrapCause.TRANSFER, op)
    if isinstance(op, DmaPushOp):
        return TrapEvent(TrapCause.DMA_REQUEST, op)
    raise AssertionError(f"unhandled op {op!r}")

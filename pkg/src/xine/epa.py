"""The enclave privilege arbitrator: scheduling, traps, and the event log.

The arbitrator is the only Machine-mode software. It owns the PMP
programming, wakes and suspends enclaves, brokers secure element calls
on behalf of application enclaves, rings the DMA engine, and records an
ordered event log that doubles as the run trace.

Scheduling is cooperative with two sources of work: a FIFO ready queue
seeded from the scenario's start list, and a LIFO wake stack holding
enclaves suspended mid-call. A transfer or service call suspends the
caller, pushes it on the wake stack, and wakes the callee; when the
callee exits (or dies) the stack unwinds and the caller resumes with a
status code in r10.

Context switches are hygienic: the live cache tag set is flushed before
the register file is saved, and the register file is zeroed after the
save, so nothing architectural survives into the next enclave. Exit and
kill drop the saved context entirely; a later wakeup starts fresh.

A PMP violation or unmapped access is fatal for the offending enclave:
its memory region is scrubbed to zeros, it is marked faulted, and it is
never scheduled again. Total micro-op steps are capped by a budget so a
spinning enclave (``yield``) cannot hang the run.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

from .dma import DmaEngine, DmaVerdict
from .enclaves import EnclaveDef, EnclaveKind, Layout, pmp_unit_for
from .machine import AccessKind, Memory, PrivilegeMode, Trap, TrapReason
from .se import (
    Mailbox,
    SecureElement,
    SeStatus,
    pack_request,
)
from .workload import (
    CpuContext,
    CryptoOp,
    DmaPushOp,
    Program,
    REG_COUNT,
    STATUS_DENIED,
    STATUS_OK,
    TransferOp,
    TrapCause,
    step,
)

DEFAULT_STEP_BUDGET = 1_000_000
STATUS_REG = 10
DOORBELL_PROBE_LEN = 16


class EnclaveState(Enum):
    SLEEPING = "sleeping"
    RUNNING = "running"
    SUSPENDED = "suspended"


class EventKind(Enum):
    BOOT = "boot"
    WAKEUP = "wakeup"
    SUSPEND = "suspend"
    EXIT = "exit"
    KILL = "kill"
    DMA_VERDICT = "dma-verdict"
    MAILBOX_PUT = "mailbox-put"
    SE_OP = "se-op"
    MAILBOX_GET = "mailbox-get"
    AVAILABILITY_UPDATE = "availability-update"
    TRAP = "trap"
    CLOUD_VERIFY = "cloud-verify"


@dataclass(frozen=True)
class Event:
    seq: int
    kind: EventKind
    attrs: dict


class EventLog:
    def __init__(self) -> None:
        self.events: list[Event] = []

    def append(self, kind: EventKind, **attrs) -> Event:
        event = Event(len(self.events), kind, attrs)
        self.events.append(event)
        return event

    def kinds(self) -> list[EventKind]:
        return [e.kind for e in self.events]

    def __iter__(self):
        return iter(self.events)

    def __len__(self) -> int:
        return len(self.events)


class StepBudgetExceeded(Exception):
    """The run burned its whole step budget without going idle."""

    def __init__(self, steps: int, log: EventLog):
        super().__init__(f"step budget exhausted after {steps} steps")
        self.steps = steps
        self.log = log


@dataclass
class EnclaveRuntime:
    defn: EnclaveDef
    program: Program
    state: EnclaveState = EnclaveState.SLEEPING
    faulted: bool = False
    ctx: CpuContext | None = None
    suspend_reason: str | None = None


@dataclass(frozen=True)
class RunResult:
    steps: int
    killed: tuple[str, ...]
    log: EventLog

    @property
    def clean(self) -> bool:
        return not self.killed


@dataclass(frozen=True)
class Interrupt:
    at_step: int
    irq: str


def hexa(value: int) -> str:
    return f"{value:#x}"


class Epa:
    def __init__(self, mem: Memory, layout: Layout,
                 programs: dict[str, Program], *,
                 dma_engine: DmaEngine | None = None,
                 mailbox: Mailbox | None = None,
                 se: SecureElement | None = None,
                 step_budget: int = DEFAULT_STEP_BUDGET,
                 start: list[str] | None = None,
                 interrupts: list[Interrupt] | None = None,
                 log: EventLog | None = None):
        self.mem = mem
        self.layout = layout
        self.dma_engine = dma_engine
        self.mailbox = mailbox
        self.se = se
        self.step_budget = step_budget
        self.log = log if log is not None else EventLog()
        self.enclaves: dict[str, EnclaveRuntime] = {}
        for enc in layout.enclaves:
            program = programs.get(enc.name, Program((), name=enc.name))
            self.enclaves[enc.name] = EnclaveRuntime(enc, program)
        self.units = {enc.name: pmp_unit_for(enc, layout)
                      for enc in layout.enclaves}
        self.ready: deque[str] = deque(start or [])
        self.wake_stack: list[str] = []
        self.current: str | None = None
        self.steps = 0
        self.killed: list[str] = []
        # Live hardware state: register file plus cache tag set.
        self.hart = CpuContext()
        self._interrupts = sorted(interrupts or [], key=lambda i: i.at_step)
        self._interrupt_index = 0
        self.exit_hooks: list[Callable[[EnclaveRuntime], None]] = []

    # -- context switching --------------------------------------------------

    def _flush_and_save(self) -> CpuContext:
        """Flush caches, snapshot the register file, then zero it."""
        self.hart.cache_tags.clear()
        saved = CpuContext(regs=list(self.hart.regs), pc=self.hart.pc)
        self.hart.regs[:] = [0] * REG_COUNT
        self.hart.pc = 0
        return saved

    def _restore(self, ctx: CpuContext) -> None:
        self.hart.regs[:] = ctx.regs
        self.hart.pc = ctx.pc
        self.hart.cache_tags.clear()

    def _wakeup(self, name: str, resumed: bool) -> None:
        rt = self.enclaves[name]
        if rt.ctx is None:
            rt.ctx = CpuContext()
        self._restore(rt.ctx)
        rt.state = EnclaveState.RUNNING
        rt.suspend_reason = None
        self.current = name
        self.log.append(EventKind.WAKEUP, enclave=name, resumed=resumed)

    def _suspend_current(self, reason: str) -> EnclaveRuntime:
        rt = self.enclaves[self.current]
        rt.ctx = self._flush_and_save()
        rt.state = EnclaveState.SUSPENDED
        rt.suspend_reason = reason
        self.log.append(EventKind.SUSPEND, enclave=rt.defn.name, reason=reason)
        self.wake_stack.append(rt.defn.name)
        self.current = None
        return rt

    def _retire_current(self) -> EnclaveRuntime:
        """Drop the running enclave's context entirely (exit or kill)."""
        rt = self.enclaves[self.current]
        self._flush_and_save()
        rt.ctx = None
        self.current = None
        return rt

    def _resume_waiter(self, status: int) -> None:
        if not self.wake_stack:
            return
        name = self.wake_stack.pop()
        rt = self.enclaves[name]
        rt.ctx.set_reg(STATUS_REG, status)
        self._wakeup(name, resumed=True)

    # -- trap handlers ------------------------------------------------------

    def _handle_exit(self) -> None:
        rt = self._retire_current()
        rt.state = EnclaveState.SLEEPING
        self.log.append(EventKind.EXIT, enclave=rt.defn.name)
        for hook in self.exit_hooks:
            hook(rt)
        if (self.dma_engine is not None
                and rt.defn.kind is EnclaveKind.APP
                and self.dma_engine.table.refresh(rt.defn.name)):
            row = self.dma_engine.table.row(rt.defn.name)
            self.log.append(EventKind.AVAILABILITY_UPDATE,
                            enclave=rt.defn.name,
                            free_base=hexa(row.free_base),
                            free_len=row.free_len)
        self._resume_waiter(STATUS_OK)

    def _handle_kill(self, cause: str, fault: Trap | None = None,
                     **extra) -> None:
        rt = self._retire_current()
        rt.state = EnclaveState.SLEEPING
        rt.faulted = True
        self.killed.append(rt.defn.name)
        region = rt.defn.region
        self.mem.poke(region.base, bytes(region.size))
        attrs = {"enclave": rt.defn.name, "cause": cause, **extra}
        if fault is not None:
            attrs.update(addr=hexa(fault.addr), access=fault.kind.value,
                         reason=fault.reason.value)
            if fault.detail is not None:
                attrs["detail"] = fault.detail.value
        self.log.append(EventKind.KILL, **attrs)
        self._resume_waiter(STATUS_DENIED)

    def _handle_transfer(self, op: TransferOp) -> None:
        target = self.enclaves.get(op.target)
        if target is None or target.faulted \
                or target.defn.kind is EnclaveKind.RUNTIME:
            self._handle_kill("bad-transfer-target", target=op.target)
            return
        if target.defn.name == self.current \
                or target.state is EnclaveState.SUSPENDED:
            # Self-transfer or a call cycle: refuse, caller keeps running.
            self.hart.set_reg(STATUS_REG, STATUS_DENIED)
            return
        self._suspend_current("transfer")
        self._wakeup(target.defn.name, resumed=False)

    def _handle_dma(self, op: DmaPushOp) -> None:
        rt = self.enclaves[self.current]
        unit = self.units[self.current]
        doorbell = unit.check(PrivilegeMode.USER, self.layout.dma_mmio.base,
                              DOORBELL_PROBE_LEN, AccessKind.WRITE)
        if not doorbell.allowed:
            fault = Trap(self.layout.dma_mmio.base, AccessKind.WRITE,
                         TrapReason.PMP_VIOLATION, doorbell.reason)
            self._handle_kill("pmp-violation", fault)
            return
        if self.dma_engine is None:
            self.hart.set_reg(STATUS_REG, STATUS_DENIED)
            return
        outcome = self.dma_engine.request(rt.defn, op.target, op.src_addr,
                                          op.length)
        attrs = {"src": rt.defn.name, "dst": op.target,
                 "verdict": outcome.verdict.name.lower().replace("_", "-"),
                 "src_addr": hexa(op.src_addr), "length": op.length}
        if outcome.granted:
            attrs["dst_addr"] = hexa(outcome.dst_addr)
        self.log.append(EventKind.DMA_VERDICT, **attrs)
        self.hart.set_reg(STATUS_REG, outcome.verdict.value)

    # -- crypto service ----------------------------------------------------

    def _handle_service(self, op: CryptoOp) -> None:
        crypto = self.layout.crypto
        if crypto is None or self.mailbox is None or self.se is None:
            self.hart.set_reg(STATUS_REG, STATUS_DENIED)
            return
        crt = self.enclaves[crypto.name]
        if crt.faulted or crt.state is not EnclaveState.SLEEPING:
            self.hart.set_reg(STATUS_REG, STATUS_DENIED)
            return
        requester = self.enclaves[self.current]
        self._suspend_current("service-request")
        self._wakeup(crypto.name, resumed=False)
        status = self._run_service(crypto, requester, op)
        # The crypto enclave's service activation leaves no residue.
        rt = self._retire_current()
        rt.state = EnclaveState.SLEEPING
        self.log.append(EventKind.EXIT, enclave=crypto.name)
        self._resume_waiter(status.value)

    def _run_service(self, crypto: EnclaveDef, requester: EnclaveRuntime,
                     op: CryptoOp) -> SeStatus:
        """The crypto enclave's trusted service routine.

        Every access to the requester's data goes through the crypto
        enclave's own PMP unit, whose requester window names exactly one
        region; spans outside it are refused without touching the
        mailbox.
        """
        unit = pmp_unit_for(crypto, self.layout, requester=requester.defn)
        message = b""
        if op.length:
            data = self.mem.read(unit, PrivilegeMode.USER, op.msg_addr,
                                 op.length)
            if isinstance(data, Trap):
                return SeStatus.SPAN_OUTSIDE_REQUESTER
            message = data

        try:
            request = pack_request(op.op_code, self._app_index(requester),
                                   message, op.result_addr)
        except ValueError:
            return SeStatus.OVERSIZED_PAYLOAD
        window = self.layout.mailbox_mmio
        trap = self.mem.write(unit, PrivilegeMode.USER, window.base, request)
        assert trap is None, "crypto enclave lost its mailbox window"
        self.mailbox.ring()
        self.log.append(EventKind.MAILBOX_PUT, requester=requester.defn.name,
                        op=op.op_name, payload_len=len(message))

        status = self.se.process(self.mailbox)
        self.log.append(EventKind.SE_OP, op=op.op_name, status=status.name.lower())

        got_status, payload = self.mailbox.collect()
        self.log.append(EventKind.MAILBOX_GET, status=got_status.name.lower(),
                        payload_len=len(payload))

        if got_status is SeStatus.OK and payload:
            trap = self.mem.write(unit, PrivilegeMode.USER, op.result_addr,
                                  payload)
            if trap is not None:
                return SeStatus.SPAN_OUTSIDE_REQUESTER
        return got_status

    def _app_index(self, rt: EnclaveRuntime) -> int:
        apps = [e.name for e in self.layout.apps()]
        return apps.index(rt.defn.name) if rt.defn.name in apps else 0xFF

    # -- main loop ----------------------------------------------------------

    def _next_from_ready(self) -> str | None:
        while self.ready:
            name = self.ready.popleft()
            rt = self.enclaves.get(name)
            if rt is None or rt.faulted or rt.state is not EnclaveState.SLEEPING:
                continue
            return name
        return None

    def _fire_due_interrupts(self) -> None:
        while (self._interrupt_index < len(self._interrupts)
               and self._interrupts[self._interrupt_index].at_step <= self.steps):
            irq = self._interrupts[self._interrupt_index]
            self._interrupt_index += 1
            rt = self.enclaves[self.current]
            # Machine-mode preemption: full flush, then an inline resume.
            rt.ctx = self._flush_and_save()
            self.log.append(EventKind.TRAP, irq=irq.irq,
                            enclave=rt.defn.name)
            self._restore(rt.ctx)

    def run(self) -> RunResult:
        """Drive the machine until every runnable enclave is done.

        Raises:
            StepBudgetExceeded: the global micro-op budget ran out.
        """
        while True:
            if self.current is None:
                name = self._next_from_ready()
                if name is None:
                    break
                self._wakeup(name, resumed=False)
            rt = self.enclaves[self.current]
            if self.steps >= self.step_budget:
                raise StepBudgetExceeded(self.steps, self.log)
            self._fire_due_interrupts()
            self.steps += 1
            trap = step(self.hart, rt.program, self.mem,
                        self.units[self.current])
            if trap is None:
                continue
            if trap.cause is TrapCause.EXIT:
                self._handle_exit()
            elif trap.cause is TrapCause.ACCESS_FAULT:
                cause = ("pmp-violation"
                         if trap.fault.reason is TrapReason.PMP_VIOLATION
                         else "unmapped-address")
                self._handle_kill(cause, trap.fault)
            elif trap.cause is TrapCause.TRANSFER:
                self._handle_transfer(trap.op)
            elif trap.cause is TrapCause.SERVICE_REQUEST:
                self._handle_service(trap.op)
            elif trap.cause is TrapCause.DMA_REQUEST:
                self._handle_dma(trap.op)
        return RunResult(self.steps, tuple(self.killed), self.log)

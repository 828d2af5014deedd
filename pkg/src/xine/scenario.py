"""Scenario harness: JSON platform configs, runs, and JSONL traces.

A scenario file describes one complete machine: the physical memory map,
the enclave layout with inline micro-op programs, signed boot images,
eFuse contents, the DMA policy matrix, a start schedule, and optional
post-run assertions. Running a scenario performs measured boot, loads
the verified images, drives the arbitrator until idle, optionally hands
an enclave's received bytes to a cloud verifier stub, and evaluates the
assertions.

The trace is JSON Lines: one event per line with a dense ``seq`` field,
keys sorted, no whitespace, so identical runs produce byte-identical
files. Process exit codes: 0 clean, 2 boot failure, 3 at least one
enclave killed, 4 step budget exhausted, 5 assertion failure; earlier
codes win when several apply.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

from .boot import (
    BootImage,
    BootReport,
    canonical_memmap_bytes,
    measure_image,
    run_boot_chain,
)
from .dma import AvailabilityTable, DmaEngine, DmaPolicy
from .enclaves import (
    EnclaveDef,
    EnclaveKind,
    Layout,
    Region,
    validate_layout,
)
from .epa import Epa, EventKind, EventLog, Interrupt, RunResult, StepBudgetExceeded
from .machine import MemRegion, Memory
from .se import Efuse, Mailbox, NONCE_LEN, SecureElement, TAG_LEN, Trng, unseal
from .workload import ParseError, Program, UndefinedLabel, check_targets, parse_program

SEED_ENV_VAR = "XINE_SEED"

EXIT_OK = 0
EXIT_BOOT_FAILURE = 2
EXIT_KILLED = 3
EXIT_BUDGET = 4
EXIT_ASSERTION = 5

MAILBOX_LABEL = "mailbox-mmio"
DMA_LABEL = "dma-mmio"


class ScenarioError(Exception):
    pass


def _int(value, what: str) -> int:
    if isinstance(value, int):
        return value
    if isinstance(value, str):
        try:
            return int(value, 0)
        except ValueError:
            pass
    raise ScenarioError(f"bad integer for {what}: {value!r}")


def _hex_bytes(value, what: str) -> bytes:
    if not isinstance(value, str):
        raise ScenarioError(f"{what} must be a hex string")
    try:
        return bytes.fromhex(value)
    except ValueError:
        raise ScenarioError(f"{what} is not valid hex") from None


@dataclass
class ImageConfig:
    name: str
    file: str
    signer: str
    measurement: bytes
    signature: bytes


@dataclass
class CloudConfig:
    enclave: str


@dataclass
class Scenario:
    name: str
    seed: int
    step_budget: int
    memory_map: list[dict]
    layout: Layout
    programs: dict[str, Program]
    policy_edges: list[str]
    start: list[str]
    images: list[ImageConfig]
    pubkeys: dict[str, bytes]
    aead_key: bytes
    signing_seed: bytes
    device_secret: bytes
    interrupts: list[Interrupt] = field(default_factory=list)
    cloud: CloudConfig | None = None
    assertions: list[dict] = field(default_factory=list)
    base_dir: str = "."

    def build_memory(self) -> Memory:
        return Memory([MemRegion(r["base"], r["size"], r["label"])
                       for r in self.memory_map])

    def memmap_bytes(self) -> bytes:
        return canonical_memmap_bytes(self.memory_map)

    def image_path(self, image: ImageConfig) -> str:
        return os.path.join(self.base_dir, image.file)

    def load_images(self) -> list[BootImage]:
        loaded = []
        for img in self.images:
            with open(self.image_path(img), "rb") as fh:
                code = fh.read()
            loaded.append(BootImage(img.name, code, img.measurement,
                                    img.signature, img.signer))
        return loaded

    def validate(self) -> list[str]:
        """Structural issues that make the scenario unrunnable."""
        issues: list[str] = []
        memory = self.build_memory()
        for issue in validate_layout(self.layout, memory):
            issues.append(f"layout: {issue.code}: {issue.message}")
        names = {e.name for e in self.layout.enclaves}
        for name, program in self.programs.items():
            try:
                check_targets(program, names)
            except UndefinedLabel as exc:
                issues.append(f"program {name}: {exc}")
        for edge in self.policy_edges:
            src, _, dst = edge.partition("->")
            for end in (src.strip(), dst.strip()):
                if end not in names:
                    issues.append(f"policy edge {edge!r}: unknown enclave {end!r}")
        for name in self.start:
            if name not in names:
                issues.append(f"start list: unknown enclave {name!r}")
        if self.cloud is not None and self.cloud.enclave not in names:
            issues.append(f"cloud submit: unknown enclave {self.cloud.enclave!r}")
        for img in self.images:
            path = self.image_path(img)
            if not os.path.exists(path):
                issues.append(f"image {img.name}: missing file {img.file}")
                continue
            size = os.path.getsize(path)
            target = self.layout.by_name(img.name)
            if target is not None and size > target.region.size:
                issues.append(f"image {img.name}: {size} bytes exceed its "
                              f"region ({target.region.size})")
            if img.signer not in self.pubkeys:
                issues.append(f"image {img.name}: unknown signer {img.signer!r}")
        return issues


def _parse_program_cfg(cfg, name: str) -> Program:
    if isinstance(cfg, list):
        cfg = "\n".join(cfg)
    if not isinstance(cfg, str):
        raise ScenarioError(f"program for {name} must be text or a line list")
    try:
        return parse_program(cfg, name)
    except ParseError as exc:
        raise ScenarioError(f"program for {name}: {exc}") from None


def scenario_from_dict(cfg: dict, base_dir: str = ".") -> Scenario:
    try:
        memory_map = [{"label": str(r["label"]),
                       "base": _int(r["base"], "region base"),
                       "size": _int(r["size"], "region size")}
                      for r in cfg["memory_map"]]
        by_label = {r["label"]: r for r in memory_map}
        for label in (MAILBOX_LABEL, DMA_LABEL):
            if label not in by_label:
                raise ScenarioError(f"memory map needs a {label!r} region")

        enclaves = []
        programs: dict[str, Program] = {}
        for e in cfg["enclaves"]:
            base = _int(e["base"], "enclave base")
            size = _int(e["size"], "enclave size")
            window = None
            if "receive_window" in e:
                window = Region(_int(e["receive_window"]["base"], "window base"),
                                _int(e["receive_window"]["size"], "window size"))
            try:
                kind = EnclaveKind(e["kind"])
            except ValueError:
                raise ScenarioError(f"unknown enclave kind {e['kind']!r}") from None
            enclave = EnclaveDef(str(e["name"]), kind, Region(base, size),
                                 _int(e.get("entry", base), "entry"),
                                 receive_window=window)
            enclaves.append(enclave)
            if "program" in e:
                programs[enclave.name] = _parse_program_cfg(e["program"],
                                                            enclave.name)

        mailbox = by_label[MAILBOX_LABEL]
        dma = by_label[DMA_LABEL]
        layout = Layout(tuple(enclaves),
                        Region(mailbox["base"], mailbox["size"]),
                        Region(dma["base"], dma["size"]))

        boot = cfg.get("boot", {})
        images = [ImageConfig(str(i["name"]), str(i["file"]), str(i["signer"]),
                              _hex_bytes(i["measurement"], "measurement"),
                              _hex_bytes(i["signature"], "signature"))
                  for i in boot.get("images", [])]
        pubkeys = {str(k): _hex_bytes(v, f"pubkey {k}")
                   for k, v in boot.get("pubkeys", {}).items()}

        efuse = cfg.get("efuse", {})
        cloud_cfg = cfg.get("cloud_submit")
        cloud = CloudConfig(str(cloud_cfg["enclave"])) if cloud_cfg else None

        return Scenario(
            name=str(cfg.get("name", "scenario")),
            seed=_int(cfg.get("seed", 0), "seed"),
            step_budget=_int(cfg.get("step_budget", 1_000_000), "step budget"),
            memory_map=memory_map,
            layout=layout,
            programs=programs,
            policy_edges=[str(x) for x in cfg.get("dma_policy", [])],
            start=[str(x) for x in cfg.get("start", [])],
            images=images,
            pubkeys=pubkeys,
            aead_key=_hex_bytes(efuse.get("aead_key", "00" * 32), "aead key"),
            signing_seed=_hex_bytes(efuse.get("signing_seed", "00" * 32),
                                    "signing seed"),
            device_secret=_hex_bytes(efuse.get("device_secret", "00" * 32),
                                     "device secret"),
            interrupts=[Interrupt(_int(i["at_step"], "interrupt step"),
                                  str(i["irq"]))
                        for i in cfg.get("interrupts", [])],
            cloud=cloud,
            assertions=list(cfg.get("assertions", [])),
            base_dir=base_dir,
        )
    except KeyError as exc:
        raise ScenarioError(f"missing config key: {exc.args[0]}") from None


def load_scenario(path: str) -> Scenario:
    with open(path, encoding="utf-8") as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"{path}: invalid JSON: {exc}") from None
    return scenario_from_dict(cfg, base_dir=os.path.dirname(path) or ".")


class CloudStub:
    """Backend that shares the device sealing AEAD key.

    A submission is a sealed blob followed by a 32-byte cleartext digest
    of the enclosed record. Accepted only when the seal authenticates and
    the digest matches the recomputed one.
    """

    def __init__(self, aead_key: bytes):
        self.aead_key = aead_key
        self.accepted_records: list[bytes] = []

    def submit(self, blob: bytes) -> tuple[bool, str]:
        if len(blob) < NONCE_LEN + TAG_LEN + 32:
            return False, "too-short"
        sealed, claimed = blob[:-32], blob[-32:]
        record = unseal(self.aead_key, sealed)
        if record is None:
            return False, "auth-failure"
        if hashlib.sha256(record).digest() != claimed:
            return False, "digest-mismatch"
        self.accepted_records.append(record)
        return True, "accepted"


@dataclass
class ScenarioResult:
    exit_code: int
    boot: BootReport
    log: EventLog
    mem: Memory
    run: RunResult | None = None
    budget_exceeded: bool = False
    assertion_failures: list[str] = field(default_factory=list)
    cloud: CloudStub | None = None

    @property
    def killed(self) -> tuple[str, ...]:
        return self.run.killed if self.run is not None else ()


def _boot_event(log: EventLog, report: BootReport) -> None:
    if report.ok:
        log.append(EventKind.BOOT, ok=True,
                   measurements={rec.image: rec.measurement.hex()
                                 for rec in report.layers},
                   sealing_key_fp=report.sealing_key_fingerprint)
    else:
        log.append(EventKind.BOOT, ok=False,
                   failed_layer=report.failure.layer,
                   image=report.failure.image,
                   reason=report.failure.reason.value)


def run_scenario(scenario: Scenario, seed: int | None = None) -> ScenarioResult:
    """Boot and run one scenario end to end.

    ``seed`` overrides the configured TRNG seed; the CLI wires the
    ``XINE_SEED`` environment variable through here.

    Raises:
        ScenarioError: the scenario fails structural validation.
    """
    issues = scenario.validate()
    if issues:
        raise ScenarioError("; ".join(issues))
    active_seed = scenario.seed if seed is None else seed

    mem = scenario.build_memory()
    log = EventLog()
    efuse = Efuse(aead_key=scenario.aead_key,
                  signing_seed=scenario.signing_seed,
                  boot_pubkeys=dict(scenario.pubkeys))
    images = scenario.load_images()
    report = run_boot_chain(images, efuse, scenario.device_secret,
                            scenario.memmap_bytes())
    _boot_event(log, report)
    if not report.ok:
        return ScenarioResult(EXIT_BOOT_FAILURE, report, log, mem)

    # Verified images are loaded where they will live: layer 0 at the
    # bottom of flash, enclave layers into their regions.
    flash = mem.region_by_label("flash")
    if images and flash is not None:
        mem.poke(flash.base, images[0].code)
    for image in images[1:]:
        target = scenario.layout.by_name(image.name)
        if target is not None:
            mem.poke(target.region.base, image.code)

    engine = DmaEngine(mem, scenario.layout,
                       DmaPolicy.from_edges(scenario.policy_edges),
                       AvailabilityTable(scenario.layout))
    mailbox = Mailbox(mem, scenario.layout.mailbox_mmio)
    se = SecureElement(efuse, Trng(active_seed))
    epa = Epa(mem, scenario.layout, scenario.programs,
              dma_engine=engine, mailbox=mailbox, se=se,
              step_budget=scenario.step_budget, start=scenario.start,
              interrupts=scenario.interrupts, log=log)

    cloud = CloudStub(scenario.aead_key)
    pending: list[tuple[str, bytes]] = []
    if scenario.cloud is not None:
        watched = scenario.cloud.enclave

        def harvest(rt) -> None:
            if rt.defn.name != watched or rt.defn.receive_window is None:
                return
            row = engine.table.row(rt.defn.name)
            length = row.free_base - rt.defn.receive_window.base if row else 0
            blob = mem.peek(rt.defn.receive_window.base, length) if length else b""
            pending.append((rt.defn.name, blob))

        epa.exit_hooks.append(harvest)

    budget_exceeded = False
    run_result: RunResult | None = None
    try:
        run_result = epa.run()
    except StepBudgetExceeded:
        budget_exceeded = True
        run_result = RunResult(epa.steps, tuple(epa.killed), log)

    if not budget_exceeded:
        for enclave, blob in pending:
            accepted, reason = cloud.submit(blob)
            log.append(EventKind.CLOUD_VERIFY, enclave=enclave,
                       length=len(blob), accepted=accepted, reason=reason)

    failures = check_assertions(scenario.assertions, mem, run_result, cloud)

    if run_result.killed:
        code = EXIT_KILLED
    elif budget_exceeded:
        code = EXIT_BUDGET
    elif failures:
        code = EXIT_ASSERTION
    else:
        code = EXIT_OK
    return ScenarioResult(code, report, log, mem, run_result,
                          budget_exceeded, failures, cloud)


def check_assertions(assertions: list[dict], mem: Memory,
                     run: RunResult, cloud: CloudStub) -> list[str]:
    failures = []
    for i, clause in enumerate(assertions):
        kind = clause.get("kind")
        label = f"assertion {i} ({kind})"
        try:
            if kind == "clean":
                if run.killed:
                    failures.append(f"{label}: enclaves killed: "
                                    f"{', '.join(run.killed)}")
            elif kind == "killed":
                want = tuple(clause["enclaves"])
                if run.killed != want:
                    failures.append(f"{label}: expected {want}, "
                                    f"got {run.killed}")
            elif kind == "memory-equals":
                addr = _int(clause["addr"], "assertion addr")
                want = _hex_bytes(clause["hex"], "assertion bytes")
                got = mem.peek(addr, len(want))
                if got != want:
                    failures.append(f"{label}: at {addr:#x} expected "
                                    f"{want.hex()}, got {got.hex()}")
            elif kind == "memory-zero":
                addr = _int(clause["addr"], "assertion addr")
                length = _int(clause["length"], "assertion length")
                if mem.peek(addr, length) != bytes(length):
                    failures.append(f"{label}: {addr:#x}+{length} not zero")
            elif kind == "cloud-accepted":
                want = bool(clause.get("value", True))
                got = bool(cloud.accepted_records)
                if got != want:
                    failures.append(f"{label}: expected {want}, got {got}")
            elif kind == "event-present":
                want_kind = clause["event"]
                want_attrs = clause.get("attrs", {})
                hit = any(e.kind.value == want_kind
                          and all(e.attrs.get(k) == v
                                  for k, v in want_attrs.items())
                          for e in run.log)
                if not hit:
                    failures.append(f"{label}: no {want_kind} event "
                                    f"matching {want_attrs}")
            else:
                failures.append(f"{label}: unknown assertion kind")
        except (KeyError, ScenarioError, IndexError) as exc:
            failures.append(f"{label}: malformed: {exc}")
    return failures


def measure_scenario(scenario: Scenario) -> list[tuple[str, bytes]]:
    """Boot-chain measurement of every image, labeled by file path."""
    memmap = scenario.memmap_bytes()
    return [(scenario.images[layer].file, measure_image(image, layer, memmap))
            for layer, image in enumerate(scenario.load_images())]


# -- trace serialization ---------------------------------------------------

def trace_lines(log: EventLog) -> list[str]:
    lines = []
    for event in log:
        record = {"seq": event.seq, "kind": event.kind.value, **event.attrs}
        lines.append(json.dumps(record, sort_keys=True, separators=(",", ":")))
    return lines


def write_trace(log: EventLog, fh) -> None:
    for line in trace_lines(log):
        fh.write(line + "\n")


KNOWN_KINDS = {k.value for k in EventKind}


def validate_trace_lines(lines: list[str]) -> list[str]:
    """Check a trace for dense sequencing and well-formed records."""
    issues = []
    for i, line in enumerate(lines):
        line = line.strip()
        if not line:
            issues.append(f"line {i + 1}: empty line inside trace")
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError:
            issues.append(f"line {i + 1}: not valid JSON")
            continue
        if not isinstance(record, dict):
            issues.append(f"line {i + 1}: record is not an object")
            continue
        if record.get("seq") != i:
            issues.append(f"line {i + 1}: seq {record.get('seq')!r}, "
                          f"expected {i}")
        kind = record.get("kind")
        if kind not in KNOWN_KINDS:
            issues.append(f"line {i + 1}: unknown event kind {kind!r}")
    return issues

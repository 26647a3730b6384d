"""Trace plugin: records branches, memory accesses, allocations and image maps.

Test cases are delimited by calls to a user-designated target function.
Everything observed before the first call goes to the *prefix* trace; every
call ``i`` of the target gets its own trace ``t<i>``.  Records produced
between two target calls belong to no test case and are dropped.

Raw trace layout (little endian)::

    magic   8 bytes  b"CTRV\\0RAW"
    version u32      1
    records          tag u8, then the fields of that record type

    1 Branch      u8 flags, u64 source, u64 target  (flags: bit0 taken, bits1-2 kind)
    2 MemAccess   u8 flags, u64 instr,  u64 addr    (flags: bit0 write)
    3 Alloc       u64 start, u64 end
    4 Free        u64 start
    5 Realloc     u64 old_start, u64 start, u64 end
    6 ImageMap    u32 index, u64 start, u64 end, u16 name_len, name bytes
    7 StackAlloc  u64 start, u64 end

The branch target is 0 for a conditional branch that was not taken.
"""
from __future__ import annotations

import enum
import io
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Optional, Protocol

from .engine import BasicBlock, Engine, ObserverKind
from .isa import REG_RA, DecodedInstruction
from .loader import LoadedImage

log = logging.getLogger(__name__)

RAW_MAGIC = b"CTRV\0RAW"
RAW_VERSION = 1

TAG_BRANCH = 1
TAG_MEM_ACCESS = 2
TAG_ALLOC = 3
TAG_FREE = 4
TAG_REALLOC = 5
TAG_IMAGE_MAP = 6
TAG_STACK_ALLOC = 7

FLAG_TAKEN = 0x01
FLAG_WRITE = 0x01

HEADER = struct.Struct("<8sI")
BRANCH = struct.Struct("<BBQQ")
MEM_ACCESS = struct.Struct("<BBQQ")
ALLOC = struct.Struct("<BQQ")
FREE = struct.Struct("<BQ")
REALLOC = struct.Struct("<BQQQ")
IMAGE_MAP = struct.Struct("<BIQQH")
STACK_ALLOC = struct.Struct("<BQQ")

DEFAULT_TARGET = "microwalk_target"
ALLOCATORS = ("malloc", "calloc", "realloc", "free")


class BranchKind(enum.IntEnum):
    CONDITIONAL = 0
    JUMP = 1
    CALL = 2
    RETURN = 3


def branch_kind(ins: DecodedInstruction) -> BranchKind:
    if ins.is_conditional_branch:
        return BranchKind.CONDITIONAL
    if ins.is_call:
        return BranchKind.CALL
    if ins.is_return:
        return BranchKind.RETURN
    return BranchKind.JUMP


def branch_flags(taken: bool, kind: BranchKind) -> int:
    return (FLAG_TAKEN if taken else 0) | (int(kind) << 1)


class TracerError(Exception):
    pass


class MissingTargetSymbol(TracerError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"target symbol {name!r} not found in any loaded image")


class NestedTargetCall(TracerError):
    pass


class UnbalancedTargetExit(NestedTargetCall):
    pass


class SinkWriteFailure(TracerError):
    pass


# -- sinks -----------------------------------------------------------------------------

class TraceSinks(Protocol):
    def open(self, name: str) -> BinaryIO: ...

    def commit(self, name: str, stream: BinaryIO) -> None: ...


class MemorySinks:
    """Keeps finished traces in ``files`` (name to bytes)."""

    def __init__(self):
        self.files: dict[str, bytes] = {}

    def open(self, name: str) -> BinaryIO:
        return io.BytesIO()

    def commit(self, name: str, stream: BinaryIO) -> None:
        self.files[name] = stream.getvalue()


class DirectorySinks:
    """Writes ``<name>`` files into ``root``."""

    def __init__(self, root: os.PathLike):
        self.root = Path(root)
        self.written: list[Path] = []

    def open(self, name: str) -> BinaryIO:
        try:
            self.root.mkdir(parents=True, exist_ok=True)
            return open(self.root / name, "wb")
        except OSError as exc:
            raise SinkWriteFailure(f"cannot open {self.root / name}: {exc}") from exc

    def commit(self, name: str, stream: BinaryIO) -> None:
        try:
            stream.close()
        except OSError as exc:
            raise SinkWriteFailure(f"cannot finish {self.root / name}: {exc}") from exc
        self.written.append(self.root / name)


class RawTraceWriter:
    """Appends raw records to one trace stream."""

    def __init__(self, name: str, sinks: TraceSinks):
        self.name = name
        self.sinks = sinks
        self.records = 0
        self.closed = False
        self._stream = sinks.open(name)
        self._put(HEADER.pack(RAW_MAGIC, RAW_VERSION))

    def _put(self, data: bytes) -> None:
        try:
            self._stream.write(data)
        except (OSError, ValueError) as exc:
            raise SinkWriteFailure(f"write to {self.name} failed: {exc}") from exc

    def branch(self, source: int, target: Optional[int], taken: bool, kind: BranchKind) -> None:
        self._put(BRANCH.pack(TAG_BRANCH, branch_flags(taken, kind), source, target or 0))
        self.records += 1

    def mem_access(self, instr: int, addr: int, is_write: bool) -> None:
        self._put(MEM_ACCESS.pack(TAG_MEM_ACCESS, FLAG_WRITE if is_write else 0, instr, addr))
        self.records += 1

    def alloc(self, start: int, end: int) -> None:
        self._put(ALLOC.pack(TAG_ALLOC, start, end))
        self.records += 1

    def free(self, start: int) -> None:
        self._put(FREE.pack(TAG_FREE, start))
        self.records += 1

    def realloc(self, old_start: int, start: int, end: int) -> None:
        self._put(REALLOC.pack(TAG_REALLOC, old_start, start, end))
        self.records += 1

    def image_map(self, index: int, start: int, end: int, name: str) -> None:
        raw = name.encode("utf-8")[:0xFFFF]
        self._put(IMAGE_MAP.pack(TAG_IMAGE_MAP, index, start, end, len(raw)) + raw)
        self.records += 1

    def stack_alloc(self, start: int, end: int) -> None:
        self._put(STACK_ALLOC.pack(TAG_STACK_ALLOC, start, end))
        self.records += 1

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            self.sinks.commit(self.name, self._stream)


# -- session ---------------------------------------------------------------------------

@dataclass
class TraceConfig:
    target_symbol: str = DEFAULT_TARGET
    traced_images: Optional[frozenset[int]] = None  # None: only the main image (index 0)
    allocator_symbols: dict[str, str] = field(default_factory=lambda: {k: k for k in ALLOCATORS})
    # Allocator bodies touch the new block before the allocation is known, so by
    # default they are treated like untraced library code.
    trace_allocator_internals: bool = False


class AllocKind(enum.Enum):
    ALLOC = "Alloc"
    REALLOC = "Realloc"
    FREE = "Free"


@dataclass(frozen=True)
class AllocationEvent:
    kind: AllocKind
    block_start: int
    block_end: int = 0
    old_start: Optional[int] = None


PREFIX_NAME = "prefix.trace"


def testcase_name(i: int) -> str:
    return f"t{i}.trace"


class TraceSession:
    """Trace plugin state for one engine; create with :meth:`attach`."""

    def __init__(self, engine: Engine, config: TraceConfig, sinks: TraceSinks):
        self.engine = engine
        self.config = config
        self.sinks = sinks
        self.target_symbol = config.target_symbol
        self.traced_images = frozenset(config.traced_images) if config.traced_images is not None \
            else frozenset({0})
        self.prefix_sink: Optional[RawTraceWriter] = RawTraceWriter(PREFIX_NAME, sinks)
        self.testcase_sinks: list[RawTraceWriter] = []
        self.current_testcase = -1
        self.allocation_counter = 0
        self.observer_fires = 0
        self.dropped = 0         # observer records with no active sink (or inside an allocator)
        self.dropped_events = 0  # allocation and image-map records with no active sink
        self.target_addr = 0
        self.allocator_addrs: dict[str, int] = {}
        self._active: Optional[RawTraceWriter] = self.prefix_sink
        self._in_target = False
        self._pending: list[tuple[str, tuple, int]] = []  # (role, args, return address)
        self._hide_allocator = not config.trace_allocator_internals

    @classmethod
    def attach(cls, engine: Engine, config: Optional[TraceConfig] = None,
               sinks: Optional[TraceSinks] = None) -> "TraceSession":
        """Install the hooks on ``engine`` and open the prefix trace."""
        config = config or TraceConfig()
        target = engine.resolve_symbol(config.target_symbol)
        if target is None:
            raise MissingTargetSymbol(config.target_symbol)
        session = cls(engine, config, sinks if sinks is not None else MemorySinks())
        session.target_addr = target
        hooks = engine.hooks
        hooks.on_function(target, entry=session._target_entry, exit=session._target_exit)
        for role, symbol in config.allocator_symbols.items():
            addr = engine.resolve_symbol(symbol)
            if addr is None:
                log.info("allocator %s (%s) not present; not hooked", role, symbol)
                continue
            session.allocator_addrs[role] = addr
            hooks.on_function(addr, entry=session._alloc_entry(role), exit=session._alloc_exit(role))
        hooks.on_block_scan(session._instrument)
        hooks.on_vm_map(session._vm_map)

        mem = engine.memory
        session.prefix_sink.stack_alloc(mem.stack_base, mem.stack_base + mem.stack_size)
        for img in engine.images:
            session.prefix_sink.image_map(img.index, img.start, img.end, img.path)
        return session

    # -- test-case boundaries -----------------------------------------------------------
    @property
    def active_sink(self) -> Optional[RawTraceWriter]:
        return self._active

    def _target_entry(self, addr: int, args: tuple) -> None:
        self.on_target_entry()

    def _target_exit(self, addr: int, retval: int) -> None:
        self.on_target_exit()

    def on_target_entry(self) -> None:
        if self._in_target:
            raise NestedTargetCall(
                f"{self.target_symbol} re-entered during test case {self.current_testcase}")
        if self.prefix_sink is not None and not self.prefix_sink.closed:
            self.prefix_sink.close()
        self.current_testcase = len(self.testcase_sinks)
        sink = RawTraceWriter(testcase_name(self.current_testcase), self.sinks)
        self.testcase_sinks.append(sink)
        self._active = sink
        self._in_target = True

    def on_target_exit(self) -> None:
        if not self._in_target:
            raise UnbalancedTargetExit(f"{self.target_symbol} returned without a matching entry")
        self._active.close()
        self._active = None
        self._in_target = False

    def finish(self) -> None:
        """Close whatever sink is still open (the guest may exit mid test case)."""
        if self._active is not None:
            self._active.close()
            self._active = None
        if self.prefix_sink is not None and not self.prefix_sink.closed:
            self.prefix_sink.close()

    # -- instrumentation ----------------------------------------------------------------
    def _traced(self, addr: int) -> bool:
        img = self.engine.image_of(addr)
        return img is not None and img.index in self.traced_images

    def _instrument(self, block: BasicBlock) -> None:
        if not self._traced(block.start):
            return
        for i, ins in enumerate(block.instructions):
            if ins.is_conditional_branch or ins.is_direct_jump or ins.is_indirect_jump:
                block.observe(i, ObserverKind.BRANCH, self._on_branch)
            if ins.is_memory_access:
                block.observe(i, ObserverKind.MEM_ACCESS, self._on_mem)

    def _on_branch(self, ins: DecodedInstruction, taken: bool, target: Optional[int]) -> None:
        self.observer_fires += 1
        sink = self._active
        if sink is None:
            self.dropped += 1
            return
        if self._pending and self._hide_allocator:
            # keep the return that leaves the allocator so calls and returns stay paired
            if not (ins.is_return and target == self._pending[0][2]):
                self.dropped += 1
                return
        sink.branch(ins.address, target if taken else None, taken, branch_kind(ins))

    def _on_mem(self, ins: DecodedInstruction, addr: int, is_write: bool) -> None:
        self.observer_fires += 1
        sink = self._active
        if sink is None or (self._pending and self._hide_allocator):
            self.dropped += 1
            return
        sink.mem_access(ins.address, addr, is_write)

    def record_branch(self, source: int, target: Optional[int], taken: bool, kind: BranchKind) -> None:
        if self._active is None:
            raise SinkWriteFailure("no active trace sink")
        self._active.branch(source, target, taken, kind)

    def record_mem_access(self, instr: int, addr: int, is_write: bool) -> None:
        if self._active is None:
            raise SinkWriteFailure("no active trace sink")
        self._active.mem_access(instr, addr, is_write)

    # -- allocations --------------------------------------------------------------------
    def _alloc_entry(self, role: str):
        def entry(addr: int, args: tuple) -> None:
            self._pending.append((role, args, self.engine.regs[REG_RA]))
        return entry

    def _alloc_exit(self, role: str):
        def exit_(addr: int, retval: int) -> None:
            if not self._pending or self._pending[-1][0] != role:
                log.warning("allocator %s returned without a pending call", role)
                return
            _, args, _ = self._pending.pop()
            event = _allocation_event(role, args, retval)
            if event is not None:
                self.record_allocation(event)
        return exit_

    def record_allocation(self, event: AllocationEvent) -> None:
        if event.kind is not AllocKind.FREE:
            self.allocation_counter += 1
        sink = self._active
        if sink is None:
            self.dropped_events += 1
            return
        if event.kind is AllocKind.ALLOC:
            sink.alloc(event.block_start, event.block_end)
        elif event.kind is AllocKind.REALLOC:
            sink.realloc(event.old_start, event.block_start, event.block_end)
        else:
            sink.free(event.block_start)

    def _vm_map(self, image: LoadedImage) -> None:
        if self._active is not None:
            self._active.image_map(image.index, image.start, image.end, image.path)
        else:
            self.dropped_events += 1

    # -- results ------------------------------------------------------------------------
    def trace_names(self) -> list[str]:
        return [PREFIX_NAME] + [s.name for s in self.testcase_sinks]


def _allocation_event(role: str, args: tuple, ret: int) -> Optional[AllocationEvent]:
    """Pair allocator arguments with its return value; None for no-op calls.

    Zero-byte requests are widened to one byte so every block is non-empty.
    """
    if role == "free":
        return AllocationEvent(AllocKind.FREE, args[0]) if args[0] else None
    if ret == 0:
        return None
    if role == "malloc":
        size = args[0]
    elif role == "calloc":
        size = (args[0] * args[1]) & ((1 << 64) - 1)
    elif role == "realloc":
        size = args[1]
    else:
        raise ValueError(role)
    end = ret + max(size, 1)
    if role == "realloc" and args[0]:
        return AllocationEvent(AllocKind.REALLOC, ret, end, old_start=args[0])
    return AllocationEvent(AllocKind.ALLOC, ret, end)


def trace_engine(engine: Engine, config: Optional[TraceConfig] = None,
                 sinks: Optional[TraceSinks] = None, fuel: Optional[int] = None):
    """Attach a session, run the guest to completion and close all sinks.

    Returns ``(session, exit_status)``.
    """
    session = TraceSession.attach(engine, config, sinks)
    try:
        status = engine.run(fuel)
    finally:
        session.finish()
    return session, status


__all__ = [
    "ALLOCATORS", "AllocKind", "AllocationEvent", "BranchKind", "DirectorySinks", "MemorySinks",
    "MissingTargetSymbol", "NestedTargetCall", "PREFIX_NAME", "RAW_MAGIC", "RAW_VERSION",
    "RawTraceWriter", "SinkWriteFailure", "TraceConfig", "TraceSession", "TracerError",
    "UnbalancedTargetExit", "branch_kind", "testcase_name", "trace_engine",
]

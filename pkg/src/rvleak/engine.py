"""Block-based execution engine with instrumentation hooks.

Guest code is scanned into single-entry/single-exit basic blocks that are
decoded once and kept in a code cache.  Direct control transfers between
cached blocks are linked so that subsequent executions bypass the dispatcher.
Plugins observe execution through :class:`EventHooks`: they may attach
per-instruction observers when a block is first scanned, and receive function
entry/exit, system call and image-mapping events.

LR/SC pairs are emulated in software: LR becomes a plain load that records a
backup of the loaded value, SC stores only if memory still holds that
backup.  Observers may therefore run arbitrary code inside an atomic
sequence without ever making the SC fail spuriously.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from .isa import (
    ATOMIC_OPS, BASE_OPS, CSR_OPS, LR_OPS, MASK64, REG_A0, REG_GP, REG_RA, REG_SP, REG_TP,
    DecodeError, DecodedInstruction, Op, RegisterFile, decode, sext, to_signed,
)
from .loader import (
    PAGE_SIZE, GuestMemory, LoadedImage, MemoryFault, Process, build_process, load_elf, page_up,
)

log = logging.getLogger(__name__)

BLOCK_CAP = 256
ATOMIC_WINDOW = 16
DEFAULT_FUEL = 1_000_000_000

SYS_OPENAT, SYS_CLOSE, SYS_READ, SYS_WRITE, SYS_FSTAT = 56, 57, 63, 64, 80
SYS_EXIT, SYS_EXIT_GROUP, SYS_BRK, SYS_MUNMAP, SYS_MMAP = 93, 94, 214, 215, 222

EBADF, ENOENT, EACCES, EINVAL, ENOMEM = 9, 2, 13, 22, 12
MAP_ANONYMOUS = 0x20


class EngineError(Exception):
    pass


class FuelExhausted(EngineError):
    def __init__(self, executed: int):
        self.executed = executed
        super().__init__(f"fuel exhausted after {executed} instructions")


class DecodeFault(EngineError):
    def __init__(self, addr: int, cause: Exception):
        self.addr = addr
        self.cause = cause
        super().__init__(f"cannot execute instruction at {addr:#x}: {cause}")


class NotExecutable(MemoryFault):
    def __init__(self, addr: int):
        super().__init__(addr, "execute")


class MisalignedAtomic(EngineError):
    def __init__(self, addr: int, width: int):
        self.addr = addr
        self.width = width
        super().__init__(f"misaligned {width}-byte atomic access at {addr:#x}")


class UnsupportedSyscall(EngineError):
    def __init__(self, number: int):
        self.number = number
        super().__init__(f"unsupported system call {number}")


class GuestBreakpoint(EngineError):
    def __init__(self, addr: int):
        self.addr = addr
        super().__init__(f"ebreak at {addr:#x}")


class RegisterSanctityViolation(EngineError):
    pass


class _GuestExit(Exception):
    def __init__(self, code: int):
        self.code = code


class Terminator(enum.Enum):
    CONDITIONAL_BRANCH = "conditional_branch"
    DIRECT_JUMP = "direct_jump"
    INDIRECT_JUMP = "indirect_jump"
    SYSCALL = "syscall"
    HALT = "halt"
    FALLTHROUGH = "fallthrough"
    TRAP = "trap"


class ObserverKind(enum.Enum):
    BRANCH = "branch"
    MEM_ACCESS = "mem_access"
    CALL = "call"
    RETURN = "return"


class AtomicViolation(enum.Enum):
    TOO_LONG = "TooLong"
    NON_BASE_INSTRUCTION = "NonBaseInstruction"
    LOAD = "Load"
    STORE = "Store"
    BACKWARD_JUMP = "BackwardJump"
    CALL = "Call"


@dataclass
class AtomicSequence:
    lr_addr: int
    sc_addr: Optional[int]
    violations: list[AtomicViolation]


@dataclass(eq=False)
class BasicBlock:
    start: int
    instructions: list[DecodedInstruction]
    terminator: Terminator
    target: Optional[int] = None
    fallthrough: Optional[int] = None
    is_call: bool = False
    is_return: bool = False
    fault: Optional[Exception] = None
    fault_addr: Optional[int] = None
    links: dict[int, "BasicBlock"] = field(default_factory=dict)
    exec_count: int = 0
    observers: list = field(default_factory=list)
    atomic_sequences: list[AtomicSequence] = field(default_factory=list)

    def __post_init__(self):
        if not self.observers:
            self.observers = [None] * len(self.instructions)

    @property
    def end(self) -> int:
        if self.instructions:
            return self.instructions[-1].next_address
        return self.start

    @property
    def successors(self) -> tuple[int, ...]:
        """Statically known successor addresses (empty for indirect exits)."""
        if self.terminator is Terminator.CONDITIONAL_BRANCH:
            return (self.target, self.fallthrough)
        if self.terminator in (Terminator.DIRECT_JUMP, Terminator.FALLTHROUGH):
            return (self.target,)
        return ()

    def observe(self, index: int, kind: ObserverKind, fn: Callable) -> None:
        """Attach an observer to the instruction at ``index``.

        Argument conventions by kind: BRANCH ``fn(ins, taken, target)``,
        MEM_ACCESS ``fn(ins, addr, is_write)``, CALL and RETURN ``fn(ins, target)``.
        """
        if self.observers[index] is None:
            self.observers[index] = []
        self.observers[index].append((kind, fn))


@dataclass
class CacheStats:
    blocks_decoded: int = 0
    lookup_hits: int = 0
    lookup_misses: int = 0
    branches_linked: int = 0
    dispatcher_entries: int = 0


class CodeCache:
    """Append-only map of block start address to scanned block."""

    def __init__(self):
        self.blocks: dict[int, BasicBlock] = {}
        self.stats = CacheStats()

    def __contains__(self, addr: int) -> bool:
        return addr in self.blocks

    def __len__(self) -> int:
        return len(self.blocks)

    def insert(self, block: BasicBlock) -> None:
        if block.start in self.blocks:
            raise EngineError(f"block at {block.start:#x} already cached")
        self.blocks[block.start] = block
        self.stats.blocks_decoded += 1

    def containing(self, addr: int) -> Optional[BasicBlock]:
        for b in self.blocks.values():
            if b.start < addr < b.end:
                return b
        return None


def link_blocks(cache: CodeCache, block: BasicBlock) -> BasicBlock:
    """Resolve ``block``'s direct successors to cached blocks where possible."""
    for target in block.successors:
        if target not in block.links and target in cache.blocks:
            block.links[target] = cache.blocks[target]
            cache.stats.branches_linked += 1
    return block


@dataclass
class AtomicReservation:
    active: bool = False
    addr: int = 0
    width: int = 4
    backup_value: int = 0

    def clear(self) -> None:
        self.active = False

    def overlaps(self, addr: int, width: int) -> bool:
        return self.active and addr < self.addr + self.width and self.addr < addr + width


def emulate_atomic(reservation: AtomicReservation, ins: DecodedInstruction,
                   memory: GuestMemory, regs: RegisterFile) -> int:
    """Execute an LR or SC in software; returns the accessed address.

    LR loads the value and remembers it as the reservation backup.  SC succeeds
    (rd = 0) iff the reservation is active for the same address and width and
    memory still holds the backup; otherwise rd = 1 and nothing is stored.
    Either way the reservation is cleared.  A store that changes the value and
    later restores it is indistinguishable from no store at all.
    """
    width = ins.access_width
    addr = regs[ins.rs1]
    if addr % width:
        raise MisalignedAtomic(addr, width)
    if ins.is_lr:
        value = memory.load(addr, width)
        reservation.active = True
        reservation.addr = addr
        reservation.width = width
        reservation.backup_value = value
        regs[ins.rd] = sext(value, 8 * width)
        return addr
    if not ins.is_sc:
        raise ValueError(f"{ins} is neither LR nor SC")
    ok = (reservation.active and reservation.addr == addr and reservation.width == width
          and memory.load(addr, width) == reservation.backup_value)
    if ok:
        memory.store(addr, width, regs[ins.rs2])
    regs[ins.rd] = 0 if ok else 1
    reservation.clear()
    return addr


def validate_atomic_sequence(instrs: Sequence[DecodedInstruction]) -> list[AtomicViolation]:
    """Check an LR-headed instruction run against the constrained LR/SC rules.

    ``instrs`` starts at the LR and may extend past the SC (the retry branch
    of a loop); only instructions strictly between LR and SC are checked for
    content, while the whole run counts toward the 16-instruction limit.
    Indirect jumps have no static direction and are reported as backward.
    Diagnostic only: emulation does not depend on the result.
    """
    if not instrs or not instrs[0].is_lr:
        raise ValueError("atomic sequence must begin with LR")
    found: list[AtomicViolation] = []

    def add(v):
        if v not in found:
            found.append(v)

    if len(instrs) > ATOMIC_WINDOW:
        add(AtomicViolation.TOO_LONG)
    for ins in instrs[1:]:
        if ins.is_sc:
            break
        if ins.is_call:
            add(AtomicViolation.CALL)
        elif ins.is_indirect_jump:
            add(AtomicViolation.BACKWARD_JUMP)
        elif (ins.is_conditional_branch or ins.is_direct_jump) and ins.imm < 0:
            add(AtomicViolation.BACKWARD_JUMP)
        if ins.is_load or ins.is_lr:
            add(AtomicViolation.LOAD)
        elif ins.is_store:
            add(AtomicViolation.STORE)
        elif ins.op not in BASE_OPS or ins.op in (Op.FENCE, Op.FENCE_I, Op.ECALL, Op.EBREAK):
            add(AtomicViolation.NON_BASE_INSTRUCTION)
    return found


@dataclass
class _FunctionHook:
    entry: list[Callable] = field(default_factory=list)
    exit: list[Callable] = field(default_factory=list)


class EventHooks:
    """Plugin callback registry.

    * ``on_block_scan(fn)``: ``fn(block)`` once per newly scanned block; the
      place to call :meth:`BasicBlock.observe`.
    * ``on_function(addr, entry=, exit=)``: ``entry(addr, args)`` when control
      reaches ``addr``; ``exit(addr, return_value)`` when that activation returns.
    * ``on_syscall(pre=, post=)``: ``pre(number, args)``, ``post(number, args, result)``.
    * ``on_vm_map(fn)``: ``fn(image)`` whenever an executable image is mapped.
    """

    def __init__(self):
        self.block_scan: list[Callable] = []
        self.functions: dict[int, _FunctionHook] = {}
        self.syscall_pre: list[Callable] = []
        self.syscall_post: list[Callable] = []
        self.vm_map: list[Callable] = []
        self._guard: Optional[Callable[[int], None]] = None

    def on_block_scan(self, fn: Callable) -> None:
        self.block_scan.append(fn)

    def on_function(self, addr: int, entry: Optional[Callable] = None,
                    exit: Optional[Callable] = None) -> None:
        if self._guard is not None:
            self._guard(addr)
        hook = self.functions.setdefault(addr, _FunctionHook())
        if entry is not None:
            hook.entry.append(entry)
        if exit is not None:
            hook.exit.append(exit)

    def on_syscall(self, pre: Optional[Callable] = None, post: Optional[Callable] = None) -> None:
        if pre is not None:
            self.syscall_pre.append(pre)
        if post is not None:
            self.syscall_post.append(post)

    def on_vm_map(self, fn: Callable) -> None:
        self.vm_map.append(fn)


@dataclass
class ExitStatus:
    exit_code: int
    instructions: int


@dataclass
class _OpenFile:
    data: bytes
    pos: int = 0


@dataclass
class _Activation:
    addr: int
    return_addr: int
    sp: int
    hook: _FunctionHook


class Engine:
    """Executes one single-threaded guest process.

    ``files`` is the read-only virtual file system visible through ``openat``;
    nothing else from the host is reachable.  Guest output is collected in
    ``stdout`` and ``stderr``.
    """

    def __init__(self, process: Process, *, files: Optional[dict[str, bytes]] = None,
                 stdin: bytes = b"", linking: bool = True, check_register_sanctity: bool = False):
        self.process = process
        self.memory = process.memory
        self.images: list[LoadedImage] = list(process.images)
        self.regs = RegisterFile(process.entry)
        self.regs[REG_SP] = process.sp
        self.cache = CodeCache()
        self.hooks = EventHooks()
        self.hooks._guard = self._check_hook_addr
        self.reservation = AtomicReservation()
        self.linking = linking
        self.check_register_sanctity = check_register_sanctity
        self.files = dict(files or {})
        self.stdin = _OpenFile(stdin)
        self.stdout = bytearray()
        self.stderr = bytearray()
        self.instret = 0
        self.fuel = DEFAULT_FUEL
        self._fds: dict[int, _OpenFile] = {0: self.stdin}
        self._counter_bias = 0
        self._ea = 0
        self._taken = False
        self._activations: list[_Activation] = []
        self._handlers = _build_handlers(self)

    @classmethod
    def from_elf(cls, elf: bytes, path: str = "guest", argv: Sequence[str] = (),
                 brk_shift: int = 0, **kw) -> "Engine":
        return cls(build_process(elf, path, argv or [path], brk_shift=brk_shift), **kw)

    @property
    def stats(self) -> CacheStats:
        return self.cache.stats

    # -- images -------------------------------------------------------------------------
    def load_image(self, elf: bytes, path: str) -> LoadedImage:
        """Map an additional static image and fire VM_MAP hooks."""
        res = load_elf(elf, path, memory=self.memory, index=len(self.images))
        self.images.append(res.image)
        for fn in self.hooks.vm_map:
            fn(res.image)
        return res.image

    def image_of(self, addr: int) -> Optional[LoadedImage]:
        for img in self.images:
            if img.start <= addr < img.end:
                return img
        return None

    def resolve_symbol(self, name: str) -> Optional[int]:
        for img in self.images:
            if name in img.symbols:
                return img.symbols[name]
        return None

    def _check_hook_addr(self, addr: int) -> None:
        b = self.cache.containing(addr)
        if b is not None:
            raise EngineError(f"cannot hook {addr:#x}: already inside cached block at {b.start:#x}")

    # -- scanning -----------------------------------------------------------------------
    def scan_block(self, addr: int) -> BasicBlock:
        """Decode the block starting at ``addr`` (not cached; see :meth:`lookup`)."""
        if not self.memory.is_executable(addr):
            raise NotExecutable(addr)
        instrs: list[DecodedInstruction] = []
        pc = addr
        hooked = self.hooks.functions
        while True:
            if instrs and (len(instrs) >= BLOCK_CAP or pc in hooked):
                block = BasicBlock(addr, instrs, Terminator.FALLTHROUGH, target=pc)
                break
            try:
                ins = decode(self.memory.fetch(pc, 4), pc)
            except (DecodeError, MemoryFault) as exc:
                block = BasicBlock(addr, instrs, Terminator.TRAP, fault=exc, fault_addr=pc)
                break
            instrs.append(ins)
            pc = ins.next_address
            if ins.is_conditional_branch:
                block = BasicBlock(addr, instrs, Terminator.CONDITIONAL_BRANCH,
                                   target=ins.branch_target, fallthrough=pc)
                break
            if ins.is_direct_jump:
                block = BasicBlock(addr, instrs, Terminator.DIRECT_JUMP, target=ins.branch_target,
                                   is_call=ins.is_call)
                break
            if ins.is_indirect_jump:
                block = BasicBlock(addr, instrs, Terminator.INDIRECT_JUMP,
                                   is_call=ins.is_call, is_return=ins.is_return)
                break
            if ins.is_system:
                term = Terminator.SYSCALL if ins.op is Op.ECALL else Terminator.HALT
                block = BasicBlock(addr, instrs, term, fallthrough=pc)
                break
        for ins in instrs:
            if ins.is_lr:
                block.atomic_sequences.append(self._scan_atomic(ins))
        return block

    def _scan_atomic(self, lr: DecodedInstruction) -> AtomicSequence:
        seq = [lr]
        pc = lr.next_address
        sc_addr = None
        while len(seq) <= ATOMIC_WINDOW:
            try:
                ins = decode(self.memory.fetch(pc, 4), pc)
            except (DecodeError, MemoryFault):
                break
            seq.append(ins)
            pc = ins.next_address
            if ins.is_sc:
                sc_addr = ins.address
                break
        violations = validate_atomic_sequence(seq) if sc_addr is not None else [AtomicViolation.TOO_LONG]
        if violations:
            log.debug("atomic sequence at %#x: %s", lr.address, [v.value for v in violations])
        return AtomicSequence(lr.address, sc_addr, violations)

    def lookup(self, addr: int) -> BasicBlock:
        """Resolve ``addr`` to a cached block, scanning and instrumenting on a miss."""
        cache = self.cache
        block = cache.blocks.get(addr)
        if block is not None:
            cache.stats.lookup_hits += 1
            return block
        cache.stats.lookup_misses += 1
        block = self.scan_block(addr)
        cache.insert(block)
        for fn in self.hooks.block_scan:
            fn(block)
        return block

    def link_blocks(self, block: BasicBlock) -> BasicBlock:
        return link_blocks(self.cache, block)

    # -- execution ----------------------------------------------------------------------
    def run(self, fuel: Optional[int] = None) -> ExitStatus:
        """Execute from the current pc until the guest exits.

        Raises :class:`FuelExhausted` once ``fuel`` instructions have run.
        """
        self.fuel = DEFAULT_FUEL if fuel is None else fuel
        stats = self.cache.stats
        regs = self.regs
        try:
            stats.dispatcher_entries += 1
            block = self.lookup(regs.pc)
            while True:
                if self._activations or self.hooks.functions:
                    self._function_events(block.start)
                block.exec_count += 1
                nxt = self._execute(block)
                regs.pc = nxt
                linked = block.links.get(nxt)
                if linked is not None:
                    block = linked
                    continue
                prev = block
                stats.dispatcher_entries += 1
                block = self.lookup(nxt)
                if self.linking and prev.successors:
                    link_blocks(self.cache, prev)
        except _GuestExit as done:
            return ExitStatus(done.code, self.instret)

    def _function_events(self, addr: int) -> None:
        x = self.regs.x
        acts = self._activations
        while acts and acts[-1].return_addr == addr and acts[-1].sp == x[REG_SP]:
            act = acts.pop()
            for fn in act.hook.exit:
                self._invoke(fn, act.addr, x[REG_A0])
        hook = self.hooks.functions.get(addr)
        if hook is not None:
            acts.append(_Activation(addr, x[REG_RA], x[REG_SP], hook))
            args = tuple(x[10:18])
            for fn in hook.entry:
                self._invoke(fn, addr, args)

    def _invoke(self, fn: Callable, *args) -> None:
        if not self.check_register_sanctity:
            fn(*args)
            return
        x = self.regs.x
        before = (x[REG_GP], x[REG_TP])
        fn(*args)
        if (x[REG_GP], x[REG_TP]) != before:
            raise RegisterSanctityViolation(f"gp/tp modified by instrumentation callback {fn!r}")

    def _execute(self, block: BasicBlock) -> int:
        handlers = self._handlers
        observers = block.observers
        fuel = self.fuel
        nxt = block.start
        ins = None
        try:
            for i, ins in enumerate(block.instructions):
                if self.instret >= fuel:
                    raise FuelExhausted(self.instret)
                nxt = handlers[ins.op](ins)
                self.instret += 1
                if nxt is None:
                    nxt = ins.address + ins.length
                obs = observers[i]
                if obs is not None:
                    self._fire(obs, ins, nxt)
        except BaseException:
            if ins is not None:
                self.regs.pc = ins.address  # precise pc for exits and faults
            raise
        if block.terminator is Terminator.TRAP:
            if self.instret >= fuel:
                raise FuelExhausted(self.instret)
            addr = block.fault_addr
            self.regs.pc = addr
            if isinstance(block.fault, MemoryFault):
                raise MemoryFault(addr, "execute")
            raise DecodeFault(addr, block.fault)
        return nxt

    def _fire(self, obs, ins: DecodedInstruction, nxt: int) -> None:
        for kind, fn in obs:
            if kind is ObserverKind.MEM_ACCESS:
                self._invoke(fn, ins, self._ea, ins.is_store or ins.is_amo)
            elif kind is ObserverKind.BRANCH:
                taken = self._taken if ins.is_conditional_branch else True
                self._invoke(fn, ins, taken, nxt if taken else None)
            else:
                self._invoke(fn, ins, nxt)

    # -- memory helpers used by instruction handlers ------------------------------------
    def _store(self, addr: int, width: int, value: int) -> None:
        res = self.reservation
        if res.active and addr < res.addr + res.width and res.addr < addr + width:
            res.active = False
        self.memory.store(addr, width, value)

    def read_csr(self, csr: int) -> int:
        if csr in (0xC00, 0xC01, 0xC02):
            return (self.instret + self._counter_bias) & MASK64
        return 0

    def write_csr(self, csr: int, value: int) -> None:
        if csr in (0xC00, 0xC02):
            self._counter_bias = value - self.instret

    # -- system calls -------------------------------------------------------------------
    def handle_syscall(self) -> None:
        x = self.regs.x
        number = x[17]
        args = tuple(x[10:16])
        self.reservation.clear()
        for fn in self.hooks.syscall_pre:
            self._invoke(fn, number, args)
        result = self._syscall(number, args)
        self.regs[REG_A0] = result
        for fn in self.hooks.syscall_post:
            self._invoke(fn, number, args, result)

    def _syscall(self, number: int, args: tuple) -> int:
        a0, a1, a2, a3, a4, _a5 = args
        mem = self.memory
        if number == SYS_WRITE:
            data = mem.read(a1, a2) if a2 else b""
            if a0 == 1:
                self.stdout += data
            elif a0 == 2:
                self.stderr += data
            else:
                return -EBADF
            return a2
        if number == SYS_READ:
            f = self._fds.get(a0)
            if f is None:
                return -EBADF
            chunk = f.data[f.pos:f.pos + a2]
            if chunk:
                mem.write(a1, chunk)
            f.pos += len(chunk)
            return len(chunk)
        if number in (SYS_EXIT, SYS_EXIT_GROUP):
            raise _GuestExit(a0 & 0xFF)
        if number == SYS_BRK:
            return mem.brk_top if a0 == 0 else mem.set_brk(a0)
        if number == SYS_OPENAT:
            path = mem.read_cstring(a1).decode("utf-8", "replace")
            if a2 & 3:
                return -EACCES
            if path not in self.files:
                return -ENOENT
            fd = 3
            while fd in self._fds:
                fd += 1
            self._fds[fd] = _OpenFile(self.files[path])
            return fd
        if number == SYS_CLOSE:
            if a0 in (1, 2):
                return 0
            return 0 if self._fds.pop(a0, None) is not None else -EBADF
        if number == SYS_FSTAT:
            if a0 in (1, 2):
                mode, size = 0o20620, 0
            elif a0 in self._fds:
                mode, size = 0o100444, len(self._fds[a0].data)
            else:
                return -EBADF
            st = bytearray(128)
            st[16:20] = mode.to_bytes(4, "little")
            st[20:24] = (1).to_bytes(4, "little")
            st[48:56] = size.to_bytes(8, "little")
            st[56:60] = PAGE_SIZE.to_bytes(4, "little")
            mem.write(a1, bytes(st))
            return 0
        if number == SYS_MMAP:
            if not a3 & MAP_ANONYMOUS or to_signed(a4) != -1:
                return -EINVAL
            if a1 == 0:
                return -EINVAL
            size = page_up(a1)
            base = mem.mmap_next
            perms = ("r" if a2 & 1 else "") + ("w" if a2 & 2 else "") + ("x" if a2 & 4 else "")
            mem.map(base, size, perms, name="[mmap]")
            mem.mmap_next = base + size + PAGE_SIZE
            return base
        if number == SYS_MUNMAP:
            return 0 if mem.unmap(a0) else -EINVAL
        raise UnsupportedSyscall(number)


def _build_handlers(eng: Engine) -> dict[Op, Callable]:
    """Instruction semantics as closures over the engine's state.

    Each handler returns the next pc for control transfers and ``None`` for
    sequential flow; memory handlers leave the effective address in ``_ea``.
    """
    regs = eng.regs
    x = regs.x
    mem = eng.memory
    M = MASK64

    def wr(rd, v):
        if rd:
            x[rd] = v & M

    def w32(v):
        v &= 0xFFFFFFFF
        return v - (1 << 32) if v >> 31 else v

    def s64(v):
        return v - (1 << 64) if v >> 63 else v

    h: dict[Op, Callable] = {}

    def alu(op, f):
        h[op] = lambda i: wr(i.rd, f(x[i.rs1], x[i.rs2]))

    def alui(op, f):
        h[op] = lambda i: wr(i.rd, f(x[i.rs1], i.imm))

    h[Op.LUI] = lambda i: wr(i.rd, i.imm)
    h[Op.AUIPC] = lambda i: wr(i.rd, i.address + i.imm)

    def jal(i):
        wr(i.rd, i.address + i.length)
        return (i.address + i.imm) & M

    def jalr(i):
        t = (x[i.rs1] + i.imm) & M & ~1
        wr(i.rd, i.address + i.length)
        return t

    h[Op.JAL] = jal
    h[Op.JALR] = jalr

    def branch(op, cond):
        def f(i):
            if cond(x[i.rs1], x[i.rs2]):
                eng._taken = True
                return (i.address + i.imm) & M
            eng._taken = False
            return None
        h[op] = f

    branch(Op.BEQ, lambda a, b: a == b)
    branch(Op.BNE, lambda a, b: a != b)
    branch(Op.BLT, lambda a, b: s64(a) < s64(b))
    branch(Op.BGE, lambda a, b: s64(a) >= s64(b))
    branch(Op.BLTU, lambda a, b: a < b)
    branch(Op.BGEU, lambda a, b: a >= b)

    def load(op, width, signed):
        bits = 8 * width

        def f(i):
            a = (x[i.rs1] + i.imm) & M
            eng._ea = a
            v = mem.load(a, width)
            if signed and v >> (bits - 1):
                v -= 1 << bits
            wr(i.rd, v)
        h[op] = f

    load(Op.LB, 1, True)
    load(Op.LH, 2, True)
    load(Op.LW, 4, True)
    load(Op.LD, 8, False)
    load(Op.LBU, 1, False)
    load(Op.LHU, 2, False)
    load(Op.LWU, 4, False)

    def store(op, width):
        def f(i):
            a = (x[i.rs1] + i.imm) & M
            eng._ea = a
            eng._store(a, width, x[i.rs2])
        h[op] = f

    store(Op.SB, 1)
    store(Op.SH, 2)
    store(Op.SW, 4)
    store(Op.SD, 8)

    alui(Op.ADDI, lambda a, b: a + b)
    alui(Op.SLTI, lambda a, b: int(s64(a) < b))
    alui(Op.SLTIU, lambda a, b: int(a < (b & M)))
    alui(Op.XORI, lambda a, b: a ^ b)
    alui(Op.ORI, lambda a, b: a | b)
    alui(Op.ANDI, lambda a, b: a & b)
    alui(Op.SLLI, lambda a, b: a << b)
    alui(Op.SRLI, lambda a, b: a >> b)
    alui(Op.SRAI, lambda a, b: s64(a) >> b)
    alui(Op.ADDIW, lambda a, b: w32(a + b))
    alui(Op.SLLIW, lambda a, b: w32(a << b))
    alui(Op.SRLIW, lambda a, b: w32((a & 0xFFFFFFFF) >> b))
    alui(Op.SRAIW, lambda a, b: w32(a) >> b)

    alu(Op.ADD, lambda a, b: a + b)
    alu(Op.SUB, lambda a, b: a - b)
    alu(Op.SLL, lambda a, b: a << (b & 63))
    alu(Op.SLT, lambda a, b: int(s64(a) < s64(b)))
    alu(Op.SLTU, lambda a, b: int(a < b))
    alu(Op.XOR, lambda a, b: a ^ b)
    alu(Op.SRL, lambda a, b: a >> (b & 63))
    alu(Op.SRA, lambda a, b: s64(a) >> (b & 63))
    alu(Op.OR, lambda a, b: a | b)
    alu(Op.AND, lambda a, b: a & b)
    alu(Op.ADDW, lambda a, b: w32(a + b))
    alu(Op.SUBW, lambda a, b: w32(a - b))
    alu(Op.SLLW, lambda a, b: w32(a << (b & 31)))
    alu(Op.SRLW, lambda a, b: w32((a & 0xFFFFFFFF) >> (b & 31)))
    alu(Op.SRAW, lambda a, b: w32(a) >> (b & 31))

    def div(a, b):
        if b == 0:
            return -1
        if a == -(1 << 63) and b == -1:
            return a
        q = abs(a) // abs(b)
        return -q if (a < 0) != (b < 0) else q

    def rem(a, b):
        if b == 0:
            return a
        if a == -(1 << 63) and b == -1:
            return 0
        r = abs(a) % abs(b)
        return -r if a < 0 else r

    def div32(a, b):
        if b == 0:
            return -1
        if a == -(1 << 31) and b == -1:
            return a
        return div(a, b)

    def rem32(a, b):
        if b == 0:
            return a
        if a == -(1 << 31) and b == -1:
            return 0
        return rem(a, b)

    alu(Op.MUL, lambda a, b: a * b)
    alu(Op.MULH, lambda a, b: (s64(a) * s64(b)) >> 64)
    alu(Op.MULHSU, lambda a, b: (s64(a) * b) >> 64)
    alu(Op.MULHU, lambda a, b: (a * b) >> 64)
    alu(Op.DIV, lambda a, b: div(s64(a), s64(b)))
    alu(Op.DIVU, lambda a, b: a // b if b else M)
    alu(Op.REM, lambda a, b: rem(s64(a), s64(b)))
    alu(Op.REMU, lambda a, b: a % b if b else a)
    alu(Op.MULW, lambda a, b: w32(a * b))
    alu(Op.DIVW, lambda a, b: w32(div32(w32(a), w32(b))))
    alu(Op.DIVUW, lambda a, b: w32((a & 0xFFFFFFFF) // (b & 0xFFFFFFFF)) if b & 0xFFFFFFFF else M)
    alu(Op.REMW, lambda a, b: w32(rem32(w32(a), w32(b))))
    alu(Op.REMUW, lambda a, b: w32((a & 0xFFFFFFFF) % (b & 0xFFFFFFFF)) if b & 0xFFFFFFFF else w32(a))

    h[Op.FENCE] = lambda i: None
    h[Op.FENCE_I] = lambda i: None

    def ecall(i):
        eng.handle_syscall()

    def ebreak(i):
        raise GuestBreakpoint(i.address)

    h[Op.ECALL] = ecall
    h[Op.EBREAK] = ebreak

    def csr(op):
        imm_form = op.value.endswith("i")
        kind = op.value[3:5]  # "rw", "rs", "rc"

        def f(i):
            src = i.rs1 if imm_form else x[i.rs1]
            old = eng.read_csr(i.imm)
            if kind == "rw":
                eng.write_csr(i.imm, src)
            elif i.rs1:
                eng.write_csr(i.imm, old | src if kind == "rs" else old & ~src)
            wr(i.rd, old)
        h[op] = f

    for op in CSR_OPS:
        csr(op)

    def lrsc(i):
        eng._ea = emulate_atomic(eng.reservation, i, mem, regs)

    for op in ATOMIC_OPS:
        if op in LR_OPS or op.value.startswith("sc."):
            h[op] = lrsc

    amo_fns = {
        "amoswap": lambda t, v, bits: v,
        "amoadd": lambda t, v, bits: t + v,
        "amoxor": lambda t, v, bits: t ^ v,
        "amoand": lambda t, v, bits: t & v,
        "amoor": lambda t, v, bits: t | v,
        "amomin": lambda t, v, bits: t if sext(t, bits) <= sext(v, bits) else v,
        "amomax": lambda t, v, bits: t if sext(t, bits) >= sext(v, bits) else v,
        "amominu": lambda t, v, bits: min(t, v),
        "amomaxu": lambda t, v, bits: max(t, v),
    }

    def amo(op):
        fn = amo_fns[op.value.split(".")[0]]

        def f(i):
            width = i.access_width
            bits = 8 * width
            a = x[i.rs1]
            if a % width:
                raise MisalignedAtomic(a, width)
            eng._ea = a
            t = mem.load(a, width)
            v = x[i.rs2] & ((1 << bits) - 1)
            eng._store(a, width, fn(t, v, bits))
            wr(i.rd, sext(t, bits))
        h[op] = f

    for op in ATOMIC_OPS:
        if op.value.startswith("amo"):
            amo(op)
    return h

"""Static RV64 ELF loading and the guest address space.

The address-space layout is fully deterministic (no randomization): the stack
always occupies the same 8 MiB window and the program break starts at the
first page above the highest loadable segment, optionally shifted by a
caller-supplied number of bytes.
"""
from __future__ import annotations

import bisect
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

PAGE_SIZE = 0x1000
STACK_SIZE = 8 << 20
STACK_TOP = 0x40_0000_0000
STACK_BASE = STACK_TOP - STACK_SIZE
MMAP_BASE = 0x20_0000_0000
HEAP_LIMIT = 256 << 20

EM_RISCV = 243
ET_EXEC, ET_DYN = 2, 3
PT_LOAD, PT_DYNAMIC, PT_INTERP = 1, 2, 3
PF_X, PF_W, PF_R = 1, 2, 4
SHT_SYMTAB = 2
STT_FUNC = 2

AT_NULL, AT_PAGESZ, AT_ENTRY = 0, 6, 9


def page_down(addr: int) -> int:
    return addr & ~(PAGE_SIZE - 1)


def page_up(addr: int) -> int:
    return (addr + PAGE_SIZE - 1) & ~(PAGE_SIZE - 1)


class LoadError(Exception):
    pass


class NotElf(LoadError):
    pass


class WrongArchitecture(LoadError):
    pass


class UnsupportedDynamic(LoadError):
    pass


class OverlappingSegments(LoadError):
    pass


class MemoryFault(Exception):
    """Guest access to unmapped memory or with insufficient permissions."""

    def __init__(self, addr: int, kind: str):
        self.addr = addr
        self.kind = kind
        super().__init__(f"memory fault: {kind} at {addr:#x}")


@dataclass
class Segment:
    base: int
    data: bytearray
    perms: str
    name: str = ""

    @property
    def size(self) -> int:
        return len(self.data)

    @property
    def end(self) -> int:
        return self.base + len(self.data)


class GuestMemory:
    """A set of disjoint, page-granular segments with R/W/X permissions."""

    def __init__(self):
        self.segments: list[Segment] = []
        self._bases: list[int] = []
        self._last: Optional[Segment] = None
        self.brk_base = 0
        self.brk_top = 0
        self.stack_base = STACK_BASE
        self.stack_size = STACK_SIZE
        self.mmap_next = MMAP_BASE
        self._heap: Optional[Segment] = None

    # -- mapping ----------------------------------------------------------------------
    def map(self, base: int, size: int, perms: str, data: bytes = b"", name: str = "") -> Segment:
        lo, hi = page_down(base), page_up(base + max(size, 1))
        for seg in self.segments:
            if lo < page_up(seg.end) and page_down(seg.base) < hi and seg.size:
                raise OverlappingSegments(
                    f"segment [{base:#x}, {base + size:#x}) overlaps {seg.name or 'segment'} "
                    f"[{seg.base:#x}, {seg.end:#x})")
        buf = bytearray(size)
        buf[:len(data)] = data[:size]
        seg = Segment(base, buf, perms, name)
        i = bisect.bisect(self._bases, base)
        self.segments.insert(i, seg)
        self._bases.insert(i, base)
        return seg

    def unmap(self, base: int) -> bool:
        for i, seg in enumerate(self.segments):
            if seg.base == base:
                del self.segments[i]
                del self._bases[i]
                self._last = None
                return True
        return False

    def find(self, addr: int) -> Optional[Segment]:
        seg = self._last
        if seg is not None and seg.base <= addr < seg.base + len(seg.data):
            return seg
        i = bisect.bisect(self._bases, addr) - 1
        if i >= 0:
            seg = self.segments[i]
            if addr < seg.base + len(seg.data):
                self._last = seg
                return seg
        return None

    def _locate(self, addr: int, n: int, perm: str, kind: str) -> tuple[Segment, int]:
        seg = self.find(addr)
        if seg is None or perm not in seg.perms or addr + n > seg.end:
            raise MemoryFault(addr, kind)
        return seg, addr - seg.base

    # -- access -----------------------------------------------------------------------
    def read(self, addr: int, n: int) -> bytes:
        seg, off = self._locate(addr, n, "r", "read")
        return bytes(seg.data[off:off + n])

    def write(self, addr: int, data: bytes) -> None:
        seg, off = self._locate(addr, len(data), "w", "write")
        seg.data[off:off + len(data)] = data

    def load(self, addr: int, width: int) -> int:
        seg, off = self._locate(addr, width, "r", "read")
        return int.from_bytes(seg.data[off:off + width], "little")

    def store(self, addr: int, width: int, value: int) -> None:
        seg, off = self._locate(addr, width, "w", "write")
        seg.data[off:off + width] = (value & ((1 << (8 * width)) - 1)).to_bytes(width, "little")

    def fetch(self, addr: int, n: int = 4) -> bytes:
        """Read up to ``n`` instruction bytes; may return fewer at a segment end."""
        seg = self.find(addr)
        if seg is None or "x" not in seg.perms:
            raise MemoryFault(addr, "execute")
        off = addr - seg.base
        return bytes(seg.data[off:off + n])

    def is_executable(self, addr: int) -> bool:
        seg = self.find(addr)
        return seg is not None and "x" in seg.perms

    def read_cstring(self, addr: int, limit: int = 4096) -> bytes:
        out = bytearray()
        while len(out) < limit:
            b = self.load(addr + len(out), 1)
            if b == 0:
                return bytes(out)
            out.append(b)
        raise MemoryFault(addr, "read")

    # -- program break ----------------------------------------------------------------
    def init_brk(self, base: int) -> None:
        self.brk_base = self.brk_top = base
        self._heap = self.map(base, 0, "rw", name="[heap]")

    def set_brk(self, new_top: int) -> int:
        """Move the break; returns the resulting break (unchanged on failure)."""
        if new_top < self.brk_base or new_top - self.brk_base > HEAP_LIMIT:
            return self.brk_top
        size = page_up(new_top) - self.brk_base
        heap = self._heap
        if size > heap.size:
            nxt = bisect.bisect(self._bases, heap.base)
            if nxt < len(self.segments) and self.segments[nxt] is not heap:
                if heap.base + size > self.segments[nxt].base:
                    return self.brk_top
            heap.data.extend(bytes(size - heap.size))
        self.brk_top = new_top
        return new_top

    def snapshot(self) -> tuple:
        """Hashable, comparable view of every mapped byte."""
        return tuple((s.base, s.perms, bytes(s.data)) for s in self.segments)


@dataclass
class Symbol:
    name: str
    addr: int
    size: int = 0
    is_func: bool = False
    is_global: bool = False


@dataclass
class LoadedImage:
    path: str
    index: int
    start: int
    end: int
    symbols: dict[str, int] = field(default_factory=dict)
    symbol_table: list[Symbol] = field(default_factory=list)

    def contains(self, addr: int) -> bool:
        return self.start <= addr < self.end

    def offset_of(self, addr: int) -> int:
        return addr - self.start

    def address_of(self, offset: int) -> int:
        return self.start + offset

    def symbolize(self, addr: int) -> Optional[str]:
        """Nearest preceding symbol as ``name+0xoff`` (``name`` at offset 0)."""
        best = None
        for sym in self.symbol_table:
            if sym.addr <= addr and (best is None or (sym.addr, sym.is_global) > (best.addr, best.is_global)):
                best = sym
        if best is None or not self.contains(best.addr):
            return None
        off = addr - best.addr
        return best.name if off == 0 else f"{best.name}+{off:#x}"


@dataclass
class LoadResult:
    image: LoadedImage
    memory: GuestMemory
    entry: int


_EHDR = struct.Struct("<16sHHIQQQIHHHHHH")
_PHDR = struct.Struct("<IIQQQQQQ")
_SHDR = struct.Struct("<IIQQQQIIQQ")
_SYM = struct.Struct("<IBBHQQ")


def _cstr(blob: bytes, off: int) -> str:
    end = blob.index(b"\0", off)
    return blob[off:end].decode("utf-8", "replace")


def parse_symbols(data: bytes, shoff: int, shnum: int, shentsize: int) -> list[Symbol]:
    if not shoff or not shnum:
        return []
    shdrs = [_SHDR.unpack_from(data, shoff + i * shentsize) for i in range(shnum)]
    out = []
    for sh in shdrs:
        if sh[1] != SHT_SYMTAB:
            continue
        strtab = shdrs[sh[6]]
        strs = data[strtab[4]:strtab[4] + strtab[5]]
        entsize = sh[9] or _SYM.size
        for j in range(1, sh[5] // entsize):
            name_off, info, _other, shndx, value, size = _SYM.unpack_from(data, sh[4] + j * entsize)
            name = _cstr(strs, name_off)
            if not name or shndx == 0 or (info & 0xF) in (3, 4):  # section / file symbols
                continue
            out.append(Symbol(name, value, size, (info & 0xF) == STT_FUNC, (info >> 4) == 1))
    return out


def load_elf(data: bytes, path: str = "<memory>", *, memory: Optional[GuestMemory] = None,
             index: int = 0, on_map: Optional[Callable[[LoadedImage], None]] = None) -> LoadResult:
    """Map a static RV64 executable into ``memory`` (a fresh one by default)."""
    if len(data) < 4 or data[:4] != b"\x7fELF":
        raise NotElf(f"{path}: missing ELF magic")
    if len(data) < _EHDR.size:
        raise NotElf(f"{path}: truncated ELF header")
    (ident, e_type, e_machine, _ver, entry, phoff, shoff, _flags, _ehsize,
     phentsize, phnum, shentsize, shnum, _shstrndx) = _EHDR.unpack_from(data)
    if ident[4] != 2 or ident[5] != 1:
        raise WrongArchitecture(f"{path}: not a little-endian ELF64 file")
    if e_machine != EM_RISCV:
        raise WrongArchitecture(f"{path}: e_machine {e_machine} is not RISC-V")
    phdrs = [_PHDR.unpack_from(data, phoff + i * phentsize) for i in range(phnum)]
    if e_type == ET_DYN or any(p[0] in (PT_INTERP, PT_DYNAMIC) for p in phdrs):
        raise UnsupportedDynamic(f"{path}: dynamically linked or position-independent executables are not supported")
    if e_type != ET_EXEC:
        raise NotElf(f"{path}: e_type {e_type} is not an executable")

    loads = [p for p in phdrs if p[0] == PT_LOAD and p[6] > 0]
    if not loads:
        raise NotElf(f"{path}: no loadable segments")
    loads.sort(key=lambda p: p[3])
    for a, b in zip(loads, loads[1:]):
        if page_up(a[3] + a[6]) > page_down(b[3]):
            raise OverlappingSegments(f"{path}: PT_LOAD segments at {a[3]:#x} and {b[3]:#x} share a page")

    mem = memory if memory is not None else GuestMemory()
    for _t, flags, off, vaddr, _pa, filesz, memsz, _al in loads:
        perms = ("r" if flags & PF_R else "") + ("w" if flags & PF_W else "") + ("x" if flags & PF_X else "")
        mem.map(vaddr, memsz, perms, data[off:off + filesz], name=path)

    symbols = parse_symbols(data, shoff, shnum, shentsize)
    symbols.sort(key=lambda s: (s.addr, s.name))
    image = LoadedImage(
        path=path, index=index,
        start=loads[0][3], end=max(p[3] + p[6] for p in loads),
        symbols=_symbol_map(symbols),
        symbol_table=symbols,
    )
    if on_map is not None:
        on_map(image)
    return LoadResult(image, mem, entry)


def _symbol_map(symbols: list[Symbol]) -> dict[str, int]:
    out: dict[str, int] = {}
    for s in symbols:
        if s.is_global or s.name not in out:
            out[s.name] = s.addr
    return out


def resolve_symbol(image: LoadedImage, name: str) -> Optional[int]:
    return image.symbols.get(name)


@dataclass
class Process:
    """A loaded program with its initial stack, ready to run."""

    memory: GuestMemory
    images: list[LoadedImage]
    entry: int
    sp: int
    argv: list[bytes]

    @property
    def main_image(self) -> LoadedImage:
        return self.images[0]


def build_process(elf: bytes, path: str = "guest", argv: Sequence[str | bytes] = (),
                  envp: Iterable[str | bytes] = (), brk_shift: int = 0) -> Process:
    """Load ``elf`` and lay out stack (argc/argv/envp/auxv) and the program break."""
    res = load_elf(elf, path)
    mem = res.memory
    mem.init_brk(page_up(res.image.end) + page_up(brk_shift))
    mem.map(STACK_BASE, STACK_SIZE, "rw", name="[stack]")

    def enc(s):
        return s if isinstance(s, bytes) else s.encode()

    args = [enc(a) for a in (argv or [path])]
    envs = [enc(e) for e in envp]
    ptr = STACK_TOP
    ptrs = []
    for s in args + envs:
        ptr -= len(s) + 1
        mem.write(ptr, s + b"\0")
        ptrs.append(ptr)
    argv_ptrs, env_ptrs = ptrs[:len(args)], ptrs[len(args):]
    words = [len(args), *argv_ptrs, 0, *env_ptrs, 0, AT_PAGESZ, PAGE_SIZE, AT_ENTRY, res.entry, AT_NULL, 0]
    sp = (ptr - 8 * len(words)) & ~0xF
    for i, w in enumerate(words):
        mem.store(sp + 8 * i, 8, w)
    return Process(mem, [res.image], res.entry, sp, args)

"""Raw trace parsing and preprocessing into canonical, relocation-free traces.

Code addresses become ``CodeRef(image, offset)``.  Data addresses are
resolved, in this order, against live heap blocks (keyed by allocation
ordinal), loaded image ranges, the stack region and finally kept verbatim as
``Absolute``.  A code address outside every image is kept as
``CodeRef(ABSOLUTE_IMAGE, address)``.

The canonical file format is documented in ``docs/formats.md``.
"""
from __future__ import annotations

import bisect
import enum
import logging
import struct
from dataclasses import dataclass, field
from typing import Iterable, Iterator, NamedTuple, Optional, Sequence, Union

from .tracer import (
    ALLOC, BRANCH, FLAG_TAKEN, FLAG_WRITE, FREE, HEADER, IMAGE_MAP, MEM_ACCESS, RAW_MAGIC,
    RAW_VERSION, REALLOC, STACK_ALLOC, TAG_ALLOC, TAG_BRANCH, TAG_FREE, TAG_IMAGE_MAP,
    TAG_MEM_ACCESS, TAG_REALLOC, TAG_STACK_ALLOC, BranchKind,
)

log = logging.getLogger(__name__)

CAN_MAGIC = b"CTRV\0CAN"
CAN_VERSION = 1
ABSOLUTE_IMAGE = 0xFFFFFFFF


class TraceFormatError(Exception):
    pass


class MalformedTrace(TraceFormatError):
    def __init__(self, offset: int, reason: str):
        self.offset = offset
        self.reason = reason
        super().__init__(f"malformed trace at byte {offset}: {reason}")


class UnknownVersion(TraceFormatError):
    def __init__(self, version: int):
        self.version = version
        super().__init__(f"unsupported trace version {version}")


class ImageMismatch(Exception):
    pass


# -- raw records -----------------------------------------------------------------------

@dataclass(frozen=True)
class RawBranch:
    source: int
    target: Optional[int]
    taken: bool
    kind: BranchKind


@dataclass(frozen=True)
class RawMemAccess:
    instr: int
    addr: int
    write: bool


@dataclass(frozen=True)
class RawAlloc:
    start: int
    end: int


@dataclass(frozen=True)
class RawFree:
    start: int


@dataclass(frozen=True)
class RawRealloc:
    old_start: int
    start: int
    end: int


@dataclass(frozen=True)
class RawImageMap:
    index: int
    start: int
    end: int
    name: str


@dataclass(frozen=True)
class RawStackAlloc:
    start: int
    end: int


RawRecord = Union[RawBranch, RawMemAccess, RawAlloc, RawFree, RawRealloc, RawImageMap, RawStackAlloc]


def iter_raw(data: bytes) -> Iterator[tuple[int, RawRecord]]:
    """Yield ``(offset, record)`` for every record of a raw trace."""
    if len(data) < HEADER.size:
        raise MalformedTrace(0, "truncated header")
    magic, version = HEADER.unpack_from(data, 0)
    if magic != RAW_MAGIC:
        raise MalformedTrace(0, f"bad magic {magic!r}")
    if version != RAW_VERSION:
        raise UnknownVersion(version)
    off = HEADER.size
    n = len(data)
    while off < n:
        tag = data[off]
        try:
            if tag == TAG_BRANCH:
                _, flags, src, tgt = BRANCH.unpack_from(data, off)
                if flags & ~0x07:
                    raise MalformedTrace(off, f"reserved branch flag bits {flags:#x}")
                taken = bool(flags & FLAG_TAKEN)
                kind = BranchKind(flags >> 1)
                if kind is not BranchKind.CONDITIONAL and not taken:
                    raise MalformedTrace(off, "unconditional branch recorded as not taken")
                rec = RawBranch(src, tgt if taken else None, taken, kind)
                size = BRANCH.size
            elif tag == TAG_MEM_ACCESS:
                _, flags, instr, addr = MEM_ACCESS.unpack_from(data, off)
                if flags & ~FLAG_WRITE:
                    raise MalformedTrace(off, f"reserved access flag bits {flags:#x}")
                rec = RawMemAccess(instr, addr, bool(flags & FLAG_WRITE))
                size = MEM_ACCESS.size
            elif tag == TAG_ALLOC:
                _, start, end = ALLOC.unpack_from(data, off)
                rec, size = RawAlloc(start, end), ALLOC.size
            elif tag == TAG_FREE:
                _, start = FREE.unpack_from(data, off)
                rec, size = RawFree(start), FREE.size
            elif tag == TAG_REALLOC:
                _, old, start, end = REALLOC.unpack_from(data, off)
                rec, size = RawRealloc(old, start, end), REALLOC.size
            elif tag == TAG_IMAGE_MAP:
                _, index, start, end, name_len = IMAGE_MAP.unpack_from(data, off)
                name_off = off + IMAGE_MAP.size
                if name_off + name_len > n:
                    raise MalformedTrace(off, "truncated image name")
                name = data[name_off:name_off + name_len].decode("utf-8", "replace")
                rec, size = RawImageMap(index, start, end, name), IMAGE_MAP.size + name_len
            elif tag == TAG_STACK_ALLOC:
                _, start, end = STACK_ALLOC.unpack_from(data, off)
                rec, size = RawStackAlloc(start, end), STACK_ALLOC.size
            else:
                raise MalformedTrace(off, f"unknown record tag {tag}")
        except struct.error:
            raise MalformedTrace(off, f"truncated record (tag {tag})") from None
        if isinstance(rec, (RawAlloc, RawRealloc, RawStackAlloc)) and not rec.start < rec.end:
            raise MalformedTrace(off, f"empty or inverted block [{rec.start:#x}, {rec.end:#x})")
        yield off, rec
        off += size


def parse_raw(data: bytes) -> list[RawRecord]:
    return [rec for _, rec in iter_raw(data)]


# -- canonical entries -----------------------------------------------------------------

class MemKind(enum.IntEnum):
    IMAGE_DATA = 0
    HEAP = 1
    STACK = 2
    ABSOLUTE = 3

    @property
    def label(self) -> str:
        return {0: "ImageData", 1: "Heap", 2: "Stack", 3: "Absolute"}[int(self)]


class CodeRef(NamedTuple):
    image: int
    offset: int

    def __str__(self) -> str:
        if self.image == ABSOLUTE_IMAGE:
            return f"abs:{self.offset:#x}"
        return f"{self.image}:{self.offset:#x}"


class MemRef(NamedTuple):
    kind: MemKind
    base: int  # heap block id, image index, or 0
    offset: int

    def __str__(self) -> str:
        if self.kind is MemKind.HEAP:
            return f"heap#{self.base}+{self.offset:#x}"
        if self.kind is MemKind.IMAGE_DATA:
            return f"image{self.base}+{self.offset:#x}"
        if self.kind is MemKind.STACK:
            return f"stack+{self.offset:#x}"
        return f"abs:{self.offset:#x}"


class CanonBranch(NamedTuple):
    source: CodeRef
    target: Optional[CodeRef]
    taken: bool
    kind: BranchKind


class CanonMemAccess(NamedTuple):
    instr: CodeRef
    ref: MemRef
    write: bool


CanonicalTraceEntry = Union[CanonBranch, CanonMemAccess]

_CAN_HEADER = struct.Struct("<8sIQ")
_CAN_BRANCH = struct.Struct("<BBHIQIIQ")
_CAN_MEM = struct.Struct("<BBBBIQQQ")
CAN_ENTRY_SIZE = 32
assert _CAN_BRANCH.size == _CAN_MEM.size == CAN_ENTRY_SIZE
_HAS_TARGET = 0x08


def encode_entry(e: CanonicalTraceEntry) -> bytes:
    """Fixed-width 32-byte encoding of one canonical entry."""
    if isinstance(e, CanonBranch):
        flags = (FLAG_TAKEN if e.taken else 0) | (int(e.kind) << 1)
        if e.target is not None:
            flags |= _HAS_TARGET
            ti, to = e.target
        else:
            ti, to = 0, 0
        return _CAN_BRANCH.pack(1, flags, 0, e.source.image, e.source.offset, ti, 0, to)
    return _CAN_MEM.pack(2, FLAG_WRITE if e.write else 0, int(e.ref.kind), 0,
                         e.instr.image, e.instr.offset, e.ref.base, e.ref.offset)


def decode_entry(blob: bytes, off: int = 0) -> CanonicalTraceEntry:
    typ = blob[off]
    if typ == 1:
        _, flags, _, si, so, ti, _, to = _CAN_BRANCH.unpack_from(blob, off)
        target = CodeRef(ti, to) if flags & _HAS_TARGET else None
        return CanonBranch(CodeRef(si, so), target, bool(flags & FLAG_TAKEN), BranchKind((flags >> 1) & 3))
    if typ == 2:
        _, flags, kind, _, ii, io_, base, ro = _CAN_MEM.unpack_from(blob, off)
        return CanonMemAccess(CodeRef(ii, io_), MemRef(MemKind(kind), base, ro), bool(flags & FLAG_WRITE))
    raise MalformedTrace(off, f"unknown canonical entry type {typ}")


@dataclass(frozen=True)
class ImageInfo:
    index: int
    path: str
    start: int
    end: int

    @classmethod
    def from_loaded(cls, image) -> "ImageInfo":
        return cls(image.index, image.path, image.start, image.end)

    def as_dict(self) -> dict:
        return {"index": self.index, "path": self.path, "start": self.start, "end": self.end}


@dataclass
class CanonicalTrace:
    entries: list[CanonicalTraceEntry]
    images: tuple[ImageInfo, ...] = ()
    absolute_refs: int = 0

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def serialize(self) -> bytes:
        out = bytearray(_CAN_HEADER.pack(CAN_MAGIC, CAN_VERSION, len(self.entries)))
        for e in self.entries:
            out += encode_entry(e)
        return bytes(out)

    @classmethod
    def deserialize(cls, data: bytes, images: Sequence[ImageInfo] = ()) -> "CanonicalTrace":
        if len(data) < _CAN_HEADER.size:
            raise MalformedTrace(0, "truncated header")
        magic, version, count = _CAN_HEADER.unpack_from(data)
        if magic != CAN_MAGIC:
            raise MalformedTrace(0, f"bad magic {magic!r}")
        if version != CAN_VERSION:
            raise UnknownVersion(version)
        if len(data) != _CAN_HEADER.size + count * CAN_ENTRY_SIZE:
            raise MalformedTrace(len(data), "entry count does not match file size")
        entries = [decode_entry(data, _CAN_HEADER.size + i * CAN_ENTRY_SIZE) for i in range(count)]
        absolute = sum(1 for e in entries if isinstance(e, CanonMemAccess) and e.ref.kind is MemKind.ABSOLUTE)
        return cls(entries, tuple(images), absolute)


# -- allocation tracking ---------------------------------------------------------------

@dataclass
class AllocationTable:
    """Live heap blocks keyed by start address; ids follow allocation order."""

    starts: list[int] = field(default_factory=list)
    blocks: dict[int, tuple[int, int]] = field(default_factory=dict)  # start -> (block id, end)
    next_block_id: int = 0

    def copy(self) -> "AllocationTable":
        return AllocationTable(list(self.starts), dict(self.blocks), self.next_block_id)

    def alloc(self, start: int, end: int) -> int:
        # drop live blocks the new one overlaps (memory reused without a free)
        j = max(bisect.bisect_left(self.starts, start) - 1, 0)
        doomed = []
        for s in self.starts[j:]:
            if s >= end:
                break
            if self.blocks[s][1] > start:
                doomed.append(s)
        for s in doomed:
            self.free(s)
        bid = self.next_block_id
        self.next_block_id += 1
        bisect.insort(self.starts, start)
        self.blocks[start] = (bid, end)
        return bid

    def free(self, start: int) -> bool:
        if start not in self.blocks:
            return False
        del self.blocks[start]
        self.starts.remove(start)
        return True

    def lookup(self, addr: int) -> Optional[tuple[int, int]]:
        """(block id, offset) of the live block containing ``addr``."""
        i = bisect.bisect_right(self.starts, addr) - 1
        if i < 0:
            return None
        start = self.starts[i]
        bid, end = self.blocks[start]
        if addr < end:
            return bid, addr - start
        return None


@dataclass
class PreprocessState:
    """Context carried from the prefix into every test-case trace."""

    images: list[ImageInfo]
    allocations: AllocationTable = field(default_factory=AllocationTable)
    stack: Optional[tuple[int, int]] = None

    def copy(self) -> "PreprocessState":
        return PreprocessState(list(self.images), self.allocations.copy(), self.stack)


class _Resolver:
    def __init__(self, state: PreprocessState):
        self.state = state
        self.images = sorted(state.images, key=lambda im: im.start)
        self._code: dict[int, CodeRef] = {}

    def image_map(self, rec: RawImageMap, off: int) -> None:
        for im in self.state.images:
            if im.index == rec.index:
                if (im.start, im.end) != (rec.start, rec.end):
                    raise ImageMismatch(
                        f"image {rec.index} mapped at [{rec.start:#x}, {rec.end:#x}) in the trace but "
                        f"[{im.start:#x}, {im.end:#x}) in the image list")
                return
        self.state.images.append(ImageInfo(rec.index, rec.name, rec.start, rec.end))
        self.images = sorted(self.state.images, key=lambda im: im.start)
        self._code.clear()

    def image_at(self, addr: int) -> Optional[ImageInfo]:
        for im in self.images:
            if im.start <= addr < im.end:
                return im
        return None

    def code(self, addr: int) -> CodeRef:
        ref = self._code.get(addr)
        if ref is None:
            im = self.image_at(addr)
            ref = CodeRef(im.index, addr - im.start) if im else CodeRef(ABSOLUTE_IMAGE, addr)
            self._code[addr] = ref
        return ref

    def data(self, addr: int) -> MemRef:
        hit = self.state.allocations.lookup(addr)
        if hit is not None:
            return MemRef(MemKind.HEAP, hit[0], hit[1])
        im = self.image_at(addr)
        if im is not None:
            return MemRef(MemKind.IMAGE_DATA, im.index, addr - im.start)
        stack = self.state.stack
        if stack is not None and stack[0] <= addr < stack[1]:
            return MemRef(MemKind.STACK, 0, addr - stack[0])
        return MemRef(MemKind.ABSOLUTE, 0, addr)


def preprocess_records(records: Iterable[tuple[int, RawRecord]], state: PreprocessState) -> CanonicalTrace:
    """Canonicalize ``records``, updating ``state`` in place."""
    res = _Resolver(state)
    allocs = state.allocations
    entries: list[CanonicalTraceEntry] = []
    absolute = 0
    for off, rec in records:
        if isinstance(rec, RawMemAccess):
            ref = res.data(rec.addr)
            if ref.kind is MemKind.ABSOLUTE:
                absolute += 1
            entries.append(CanonMemAccess(res.code(rec.instr), ref, rec.write))
        elif isinstance(rec, RawBranch):
            target = res.code(rec.target) if rec.target is not None else None
            entries.append(CanonBranch(res.code(rec.source), target, rec.taken, rec.kind))
        elif isinstance(rec, RawAlloc):
            allocs.alloc(rec.start, rec.end)
        elif isinstance(rec, RawRealloc):
            allocs.free(rec.old_start)
            allocs.alloc(rec.start, rec.end)
        elif isinstance(rec, RawFree):
            if not allocs.free(rec.start):
                log.debug("free of unknown block %#x at byte %d", rec.start, off)
        elif isinstance(rec, RawImageMap):
            res.image_map(rec, off)
        elif isinstance(rec, RawStackAlloc):
            state.stack = (rec.start, rec.end)
    return CanonicalTrace(entries, tuple(state.images), absolute)


def preprocess(raw: bytes, images: Sequence[ImageInfo], seed: Optional[PreprocessState] = None) -> CanonicalTrace:
    """Canonicalize one raw trace.

    ``seed`` is the state after the prefix trace (see :func:`preprocess_prefix`);
    it is copied, never modified.
    """
    state = seed.copy() if seed is not None else PreprocessState([_as_info(i) for i in images])
    if seed is not None:
        known = {im.index: im for im in state.images}
        for im in map(_as_info, images):
            if im.index in known and (known[im.index].start, known[im.index].end) != (im.start, im.end):
                raise ImageMismatch(f"image {im.index} differs between prefix and trace image list")
            if im.index not in known:
                state.images.append(im)
    return preprocess_records(iter_raw(raw), state)


def preprocess_prefix(raw: bytes, images: Sequence[ImageInfo]) -> tuple[CanonicalTrace, PreprocessState]:
    state = PreprocessState([_as_info(i) for i in images])
    trace = preprocess_records(iter_raw(raw), state)
    return trace, state


def preprocess_set(prefix_raw: bytes, testcase_raws: Sequence[bytes],
                   images: Sequence[ImageInfo]) -> tuple[CanonicalTrace, list[CanonicalTrace]]:
    prefix, state = preprocess_prefix(prefix_raw, images)
    return prefix, [preprocess(r, images, state) for r in testcase_raws]


def _as_info(image) -> ImageInfo:
    return image if isinstance(image, ImageInfo) else ImageInfo.from_loaded(image)


# -- comparison ------------------------------------------------------------------------

@dataclass(frozen=True)
class TraceComparison:
    equal: bool
    index: Optional[int] = None
    left: Optional[CanonicalTraceEntry] = None
    right: Optional[CanonicalTraceEntry] = None

    def __bool__(self) -> bool:
        return self.equal


def trace_equals(a: CanonicalTrace, b: CanonicalTrace) -> TraceComparison:
    """Compare entry sequences; on mismatch report the first differing index.

    When one trace is a strict prefix of the other the missing side is None.
    """
    ea, eb = a.entries, b.entries
    for i, (x, y) in enumerate(zip(ea, eb)):
        if x != y:
            return TraceComparison(False, i, x, y)
    if len(ea) != len(eb):
        i = min(len(ea), len(eb))
        return TraceComparison(False, i, ea[i] if i < len(ea) else None, eb[i] if i < len(eb) else None)
    return TraceComparison(True)

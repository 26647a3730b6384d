"""Minimal ELF64 executable writer for RISC-V guests."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

from ..loader import EM_RISCV, ET_EXEC, PAGE_SIZE, PF_R, PF_W, PF_X, PT_LOAD, page_up

_EHDR = struct.Struct("<16sHHIQQQIHHHHHH")
_PHDR = struct.Struct("<IIQQQQQQ")
_SHDR = struct.Struct("<IIQQQQIIQQ")
_SYM = struct.Struct("<IBBHQQ")

SHT_PROGBITS, SHT_SYMTAB, SHT_STRTAB, SHT_NOBITS = 1, 2, 3, 8
SHF_WRITE, SHF_ALLOC, SHF_EXEC = 1, 2, 4
STB_LOCAL, STB_GLOBAL = 0, 1
STT_NOTYPE, STT_OBJECT, STT_FUNC = 0, 1, 2
EF_RISCV_RVC = 1


@dataclass
class ElfSegment:
    """One PT_LOAD: ``data`` is file-backed, memory size may exceed it (bss)."""

    vaddr: int
    data: bytes
    memsz: int
    flags: int
    name: str = ""


@dataclass
class ElfSymbol:
    name: str
    value: int
    segment: int  # index into the segment list, -1 for absolute
    is_global: bool = False
    kind: int = STT_NOTYPE
    size: int = 0


@dataclass
class ElfSpec:
    entry: int
    segments: list[ElfSegment]
    symbols: list[ElfSymbol] = field(default_factory=list)
    e_type: int = ET_EXEC
    machine: int = EM_RISCV
    extra_phdrs: list[tuple[int, int]] = field(default_factory=list)  # (p_type, p_flags)


class _StrTab:
    def __init__(self):
        self.blob = bytearray(b"\0")
        self.index: dict[str, int] = {}

    def add(self, s: str) -> int:
        if s not in self.index:
            self.index[s] = len(self.blob)
            self.blob += s.encode() + b"\0"
        return self.index[s]


def write_elf(spec: ElfSpec) -> bytes:
    """Serialize ``spec``; segments are laid out congruent to their vaddr modulo a page."""
    nph = len(spec.segments) + len(spec.extra_phdrs)
    header_end = _EHDR.size + nph * _PHDR.size
    out = bytearray(header_end)
    offsets = []
    for seg in spec.segments:
        off = page_up(len(out))
        off += seg.vaddr % PAGE_SIZE
        out += bytes(off - len(out))
        offsets.append(off)
        out += seg.data

    phdrs = bytearray()
    for seg, off in zip(spec.segments, offsets):
        phdrs += _PHDR.pack(PT_LOAD, seg.flags, off, seg.vaddr, seg.vaddr,
                            len(seg.data), seg.memsz, PAGE_SIZE)
    for p_type, p_flags in spec.extra_phdrs:
        phdrs += _PHDR.pack(p_type, p_flags, 0, 0, 0, 0, 0, 8)
    out[_EHDR.size:header_end] = phdrs

    # section headers: null, one section per segment, .symtab, .strtab, .shstrtab
    shstr = _StrTab()
    strtab = _StrTab()
    sections = [_SHDR.pack(0, 0, 0, 0, 0, 0, 0, 0, 0, 0)]
    for seg, off in zip(spec.segments, offsets):
        flags = SHF_ALLOC | (SHF_WRITE if seg.flags & PF_W else 0) | (SHF_EXEC if seg.flags & PF_X else 0)
        name = seg.name or (".text" if seg.flags & PF_X else ".data")
        sections.append(_SHDR.pack(shstr.add(name), SHT_PROGBITS, flags, seg.vaddr, off,
                                   len(seg.data), 0, 0, 4, 0))
        if seg.memsz > len(seg.data):
            sections.append(_SHDR.pack(shstr.add(".bss"), SHT_NOBITS, SHF_ALLOC | SHF_WRITE,
                                       seg.vaddr + len(seg.data), off + len(seg.data),
                                       seg.memsz - len(seg.data), 0, 0, 8, 0))
    seg_shndx = []
    i = 1
    for seg in spec.segments:
        seg_shndx.append(i)
        i += 2 if seg.memsz > len(seg.data) else 1

    syms = sorted(spec.symbols, key=lambda s: (s.is_global, s.value, s.name))
    symtab = bytearray(_SYM.size)
    first_global = 1
    for n, s in enumerate(syms, start=1):
        if not s.is_global:
            first_global = n + 1
        shndx = 0xFFF1 if s.segment < 0 else seg_shndx[s.segment]
        info = ((STB_GLOBAL if s.is_global else STB_LOCAL) << 4) | s.kind
        symtab += _SYM.pack(strtab.add(s.name), info, 0, shndx, s.value, s.size)

    def append(blob: bytes, align: int = 8) -> int:
        out.extend(bytes(-len(out) % align))
        off = len(out)
        out.extend(blob)
        return off

    symtab_off = append(bytes(symtab))
    strtab_off = append(bytes(strtab.blob), 1)
    symtab_idx = len(sections)
    sections.append(_SHDR.pack(shstr.add(".symtab"), SHT_SYMTAB, 0, 0, symtab_off, len(symtab),
                               symtab_idx + 1, first_global, 8, _SYM.size))
    sections.append(_SHDR.pack(shstr.add(".strtab"), SHT_STRTAB, 0, 0, strtab_off,
                               len(strtab.blob), 0, 0, 1, 0))
    shstr_name = shstr.add(".shstrtab")
    shstr_off = append(bytes(shstr.blob), 1)
    sections.append(_SHDR.pack(shstr_name, SHT_STRTAB, 0, 0, shstr_off, len(shstr.blob), 0, 0, 1, 0))
    shoff = append(b"".join(sections))

    ident = b"\x7fELF" + bytes([2, 1, 1, 0]) + bytes(8)
    out[:_EHDR.size] = _EHDR.pack(ident, spec.e_type, spec.machine, 1, spec.entry, _EHDR.size, shoff,
                                  EF_RISCV_RVC, _EHDR.size, _PHDR.size, nph, _SHDR.size,
                                  len(sections), len(sections) - 1)
    return bytes(out)


def perms_to_flags(perms: str) -> int:
    return (PF_R if "r" in perms else 0) | (PF_W if "w" in perms else 0) | (PF_X if "x" in perms else 0)

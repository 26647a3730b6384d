import struct

import pytest
from hypothesis import given, settings, strategies as st

from oracles import CLANG, clang_link
from reference_interp import run_reference
from helpers import engine_state, ref_state
from rvleak.engine import Engine
from rvleak.guestkit.elf import ElfSegment, ElfSpec, ElfSymbol, STT_FUNC, write_elf
from rvleak.guestkit.fixtures import build_fixture
from rvleak.loader import (
    PAGE_SIZE, PF_R, PF_W, PF_X, STACK_BASE, STACK_SIZE, STACK_TOP, GuestMemory, MemoryFault, NotElf,
    OverlappingSegments, UnsupportedDynamic, WrongArchitecture, build_process, load_elf, page_up,
    resolve_symbol,
)

PT_DYNAMIC, PT_INTERP = 2, 3
NOP = struct.pack("<I", 0x13)


def one_segment(memsz=0x40, filesz=None, **kw):
    data = NOP * ((filesz if filesz is not None else memsz) // 4)
    seg = ElfSegment(0x10000, data, memsz, PF_R | PF_X)
    return ElfSpec(entry=0x10000, segments=[seg], **kw)


def test_single_segment_image():
    spec = one_segment(memsz=0x2000, filesz=0x100)
    spec.symbols = [ElfSymbol("main", 0x10010, 0, is_global=True, kind=STT_FUNC)]
    res = load_elf(write_elf(spec), "one")
    assert (res.image.start, res.image.end) == (0x10000, 0x10000 + 0x2000)
    assert res.entry == 0x10000 and res.image.index == 0
    assert res.memory.read(0x10000, 4) == NOP
    assert res.memory.read(0x10100, 0x1F00) == bytes(0x1F00)  # bss is zero-filled
    assert resolve_symbol(res.image, "main") == 0x10010


@pytest.mark.parametrize("blob", [b"", b"\x7fEL", b"MZ\x90\x00" + bytes(60), b"\x7fELF"])
def test_not_elf(blob):
    with pytest.raises(NotElf):
        load_elf(blob)


def test_wrong_machine():
    with pytest.raises(WrongArchitecture):
        load_elf(write_elf(one_segment(machine=62)))


def test_elf32_rejected():
    blob = bytearray(write_elf(one_segment()))
    blob[4] = 1  # ELFCLASS32
    with pytest.raises(WrongArchitecture):
        load_elf(bytes(blob))


@pytest.mark.parametrize("ptype", [PT_INTERP, PT_DYNAMIC])
def test_dynamic_rejected(ptype):
    with pytest.raises(UnsupportedDynamic):
        load_elf(write_elf(one_segment(extra_phdrs=[(ptype, PF_R)])))


def test_pie_rejected():
    with pytest.raises(UnsupportedDynamic):
        load_elf(write_elf(one_segment(e_type=3)))


def test_segments_sharing_a_page():
    segs = [ElfSegment(0x10000, NOP * 4, 0x10, PF_R | PF_X), ElfSegment(0x10800, b"\1" * 8, 8, PF_R | PF_W)]
    with pytest.raises(OverlappingSegments):
        load_elf(write_elf(ElfSpec(0x10000, segs)))


def test_adjacent_pages_accepted():
    segs = [ElfSegment(0x10000, NOP * 4, 0x10, PF_R | PF_X), ElfSegment(0x11000, b"\1" * 8, 8, PF_R | PF_W)]
    res = load_elf(write_elf(ElfSpec(0x10000, segs)))
    assert res.memory.find(0x11000).perms == "rw"
    assert res.memory.find(0x10000).perms == "rx"


def test_permissions_enforced():
    segs = [ElfSegment(0x10000, NOP * 4, 0x10, PF_R | PF_X), ElfSegment(0x11000, b"\1" * 8, 8, PF_R)]
    mem = load_elf(write_elf(ElfSpec(0x10000, segs))).memory
    with pytest.raises(MemoryFault) as ei:
        mem.store(0x11000, 4, 1)
    assert ei.value.addr == 0x11000
    with pytest.raises(MemoryFault):
        mem.fetch(0x11000)
    with pytest.raises(MemoryFault):
        mem.load(0x50000, 8)
    assert mem.is_executable(0x10000) and not mem.is_executable(0x11000)


def test_fixture_symbols():
    fx = build_fixture("alloc_roundtrip")
    res = load_elf(fx.elf, "alloc_roundtrip")
    assert resolve_symbol(res.image, "microwalk_target") == fx.program.labels["microwalk_target"]
    assert resolve_symbol(res.image, "malloc") == fx.program.labels["malloc"]
    assert resolve_symbol(res.image, "nonexistent") is None
    target = fx.program.labels["microwalk_target"]
    assert res.image.symbolize(target) == "microwalk_target"
    assert res.image.symbolize(target + 4) == "microwalk_target+0x4"


def test_load_determinism():
    fx = build_fixture("leaky_sbox")
    a = build_process(fx.elf, "g", ["g", "tc/0000"])
    b = build_process(fx.elf, "g", ["g", "tc/0000"])
    assert a.memory.snapshot() == b.memory.snapshot()
    assert (a.entry, a.sp, a.images) == (b.entry, b.sp, b.images)


@settings(max_examples=100)
@given(st.data())
def test_offset_round_trip(data):
    img = load_elf(build_fixture("ct_xor").elf, "ct").image
    addr = data.draw(st.integers(img.start, img.end - 1))
    off = img.offset_of(addr)
    assert 0 <= off < img.end - img.start and img.address_of(off) == addr and img.contains(addr)


def test_stack_layout():
    fx = build_fixture("ct_xor")
    p = build_process(fx.elf, "g", ["prog", "tc/0000", "tc/0001"], envp=["A=1"])
    mem = p.memory
    assert STACK_BASE <= p.sp < STACK_TOP and p.sp % 16 == 0
    assert mem.find(STACK_BASE).size == STACK_SIZE
    argc = mem.load(p.sp, 8)
    assert argc == 3
    args = [mem.read_cstring(mem.load(p.sp + 8 * (1 + i), 8)) for i in range(argc)]
    assert args == [b"prog", b"tc/0000", b"tc/0001"]
    assert mem.load(p.sp + 8 * 4, 8) == 0
    assert mem.read_cstring(mem.load(p.sp + 8 * 5, 8)) == b"A=1"


@pytest.mark.parametrize("shift", [0, 1, 0x1000, 0x5000])
def test_brk_placement(shift):
    fx = build_fixture("ct_xor")
    p = build_process(fx.elf, "g", brk_shift=shift)
    assert p.memory.brk_base == page_up(p.images[0].end) + page_up(shift)
    assert p.memory.brk_base % PAGE_SIZE == 0


def test_brk_growth():
    mem = GuestMemory()
    mem.init_brk(0x20000)
    assert mem.set_brk(0x20010) == 0x20010
    mem.store(0x20008, 8, 5)
    assert mem.set_brk(0x1000) == 0x20010  # below the base: unchanged
    assert mem.set_brk(0x20000 + (1 << 30)) == 0x20010


# -- independently linked executables --------------------------------------------------

CLANG_PROGRAM = r"""
.globl _start
.text
_start:
    ld a0, 0(sp)            # argc
    la t0, counter
    ld t1, 0(t0)
    add t1, t1, a0
    sd t1, 0(t0)
    la a1, msg
    li a0, 1
    li a2, 6
    li a7, 64
    ecall
    la t2, table
    li t3, 0
    li t4, 16
1:  slli t5, t3, 3
    add t5, t5, t2
    sd t3, 0(t5)
    addi t3, t3, 1
    blt t3, t4, 1b
    ld a0, 0(t0)
    li a7, 93
    ecall
.data
counter: .dword 40
.section .rodata
msg: .ascii "hello\n"
.bss
table: .zero 128
"""


@pytest.mark.skipif(CLANG is None, reason="clang not installed")
@pytest.mark.parametrize("march", ["rv64imac", "rv64ima"])
def test_clang_linked_executable(tmp_path, march):
    elf = clang_link(CLANG_PROGRAM, tmp_path / "prog.elf", march).read_bytes()
    res = load_elf(elf, "prog")
    assert resolve_symbol(res.image, "_start") == res.entry
    proc = build_process(elf, "prog", ["prog", "x"])
    eng = Engine(proc)
    status = eng.run(10_000)
    assert status.exit_code == 42 and bytes(eng.stdout) == b"hello\n"
    table = res.image.symbols["table"]
    assert [eng.memory.load(table + 8 * i, 8) for i in range(16)] == list(range(16))
    if march == "rv64ima":
        ref = run_reference(build_process(elf, "prog", ["prog", "x"]))
        assert engine_state(eng, status) == ref_state(ref)

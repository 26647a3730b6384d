import struct

import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from oracles import CLANG, clang_text
from rvleak.engine import Engine
from rvleak.guestkit.assembler import (
    AsmSyntaxError, BranchOutOfRange, UnknownMnemonic, UnresolvedLabel, assemble, assemble_program,
    li_sequence,
)
from rvleak.guestkit.fixtures import CATALOG, build_fixture
from rvleak.isa import ABI_NAMES, decode
from rvleak.loader import load_elf

needs_clang = pytest.mark.skipif(CLANG is None, reason="clang not installed")

R = st.sampled_from(ABI_NAMES)
RNZ = st.sampled_from(ABI_NAMES[1:])
RC = st.sampled_from(ABI_NAMES[8:16])  # x8..x15, the compressed register subset
IMM12 = st.integers(-2048, 2047)

R_OPS = ["add", "sub", "sll", "slt", "sltu", "xor", "srl", "sra", "or", "and", "addw", "subw", "sllw",
         "srlw", "sraw", "mul", "mulh", "mulhsu", "mulhu", "div", "divu", "rem", "remu", "mulw", "divw",
         "divuw", "remw", "remuw"]
I_OPS = ["addi", "slti", "sltiu", "xori", "ori", "andi", "addiw"]
LOADS = ["lb", "lh", "lw", "ld", "lbu", "lhu", "lwu"]
STORES = ["sb", "sh", "sw", "sd"]
BRANCHES = ["beq", "bne", "blt", "bge", "bltu", "bgeu"]
AMOS = ["amoswap", "amoadd", "amoxor", "amoand", "amoor", "amomin", "amomax", "amominu", "amomaxu"]
ORDER = st.sampled_from(["", ".aq", ".rl", ".aqrl"])
FENCE_SET = st.sampled_from(["i", "o", "r", "w", "ior", "rw", "iorw", "io", "ow"])


def _fmt(op, *args):
    return f"{op} " + ", ".join(str(a) for a in args) if args else op


def _mem(off, reg):
    return f"{off}({reg})"


base_line = st.one_of(
    st.builds(_fmt, st.sampled_from(R_OPS), R, R, R),
    st.builds(_fmt, st.sampled_from(I_OPS), R, R, IMM12),
    st.builds(_fmt, st.sampled_from(["slli", "srli", "srai"]), R, R, st.integers(0, 63)),
    st.builds(_fmt, st.sampled_from(["slliw", "srliw", "sraiw"]), R, R, st.integers(0, 31)),
    st.builds(lambda op, rd, o, rs: _fmt(op, rd, _mem(o, rs)), st.sampled_from(LOADS), R, IMM12, R),
    st.builds(lambda op, r2, o, rs: _fmt(op, r2, _mem(o, rs)), st.sampled_from(STORES), R, IMM12, R),
    st.builds(_fmt, st.sampled_from(["lui", "auipc"]), R, st.integers(0, 0xFFFFF)),
    st.builds(lambda op, a, b, o: _fmt(op, a, b, 2 * o), st.sampled_from(BRANCHES), R, R,
              st.integers(-2048, 2047)),
    st.builds(lambda rd, o: _fmt("jal", rd, 2 * o), R, st.integers(-(1 << 19), (1 << 19) - 1)),
    st.builds(lambda rd, o, rs: _fmt("jalr", rd, _mem(o, rs)), R, IMM12, R),
    st.builds(_fmt, st.sampled_from(["csrrw", "csrrs", "csrrc"]), R, st.integers(0, 4095), R),
    st.builds(_fmt, st.sampled_from(["csrrwi", "csrrsi", "csrrci"]), R, st.integers(0, 4095), st.integers(0, 31)),
    st.builds(lambda w, o, rd, rs: _fmt(f"lr.{w}{o}", rd, f"({rs})"), st.sampled_from("wd"), ORDER, R, R),
    st.builds(lambda op, w, o, rd, r2, rs: _fmt(f"{op}.{w}{o}", rd, r2, f"({rs})"),
              st.sampled_from(AMOS + ["sc"]), st.sampled_from("wd"), ORDER, R, R, R),
    st.builds(_fmt, st.just("fence"), FENCE_SET, FENCE_SET),
    st.sampled_from(["fence.i", "ecall", "ebreak", "fence"]),
)

_nz = lambda lo, hi: st.integers(lo, hi).filter(bool)  # noqa: E731

compressed_line = st.one_of(
    st.builds(_fmt, st.just("c.addi"), RNZ, _nz(-32, 31)),
    st.builds(_fmt, st.just("c.li"), RNZ, st.integers(-32, 31)),
    st.builds(_fmt, st.just("c.addiw"), RNZ, st.integers(-32, 31)),
    st.builds(_fmt, st.just("c.lui"), RNZ.filter(lambda r: r != "sp"),
              st.one_of(st.integers(1, 31), st.integers(0xFFFE0, 0xFFFFF))),
    st.builds(lambda v: _fmt("c.addi16sp", "sp", 16 * v), _nz(-32, 31)),
    st.builds(lambda rd, v: _fmt("c.addi4spn", rd, "sp", 4 * v), RC, st.integers(1, 255)),
    st.builds(_fmt, st.just("c.slli"), RNZ, st.integers(1, 63)),
    st.builds(_fmt, st.sampled_from(["c.srli", "c.srai"]), RC, st.integers(1, 63)),
    st.builds(_fmt, st.just("c.andi"), RC, st.integers(-32, 31)),
    st.builds(_fmt, st.sampled_from(["c.mv", "c.add"]), RNZ, RNZ),
    st.builds(_fmt, st.sampled_from(["c.sub", "c.xor", "c.or", "c.and", "c.subw", "c.addw"]), RC, RC),
    st.builds(lambda op, rd, o, rs: _fmt(op, rd, _mem(o, rs)), st.just("c.lw"), RC,
              st.integers(0, 31).map(lambda v: 4 * v), RC),
    st.builds(lambda op, rd, o, rs: _fmt(op, rd, _mem(o, rs)), st.just("c.sw"), RC,
              st.integers(0, 31).map(lambda v: 4 * v), RC),
    st.builds(lambda op, rd, o, rs: _fmt(op, rd, _mem(o, rs)), st.sampled_from(["c.ld", "c.sd"]), RC,
              st.integers(0, 31).map(lambda v: 8 * v), RC),
    st.builds(lambda rd, o: _fmt("c.lwsp", rd, _mem(4 * o, "sp")), RNZ, st.integers(0, 63)),
    st.builds(lambda rd, o: _fmt("c.ldsp", rd, _mem(8 * o, "sp")), RNZ, st.integers(0, 63)),
    st.builds(lambda rs, o: _fmt("c.swsp", rs, _mem(4 * o, "sp")), R, st.integers(0, 63)),
    st.builds(lambda rs, o: _fmt("c.sdsp", rs, _mem(8 * o, "sp")), R, st.integers(0, 63)),
    st.builds(lambda o: _fmt("c.j", 2 * o), st.integers(-1024, 1023)),
    st.builds(lambda op, rs, o: _fmt(op, rs, 2 * o), st.sampled_from(["c.beqz", "c.bnez"]), RC,
              st.integers(-128, 127)),
    st.builds(_fmt, st.sampled_from(["c.jr", "c.jalr"]), RNZ),
    st.sampled_from(["c.nop", "c.ebreak"]),
)

any_line = st.one_of(base_line, compressed_line)


def _clang_source(lines):
    out = []
    for ln in lines:
        out.append(".option rvc" if ln.startswith("c.") else ".option norvc")
        out.append(ln)
    return "\n".join(out) + "\n"


@needs_clang
@settings(max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(st.lists(any_line, min_size=1, max_size=40))
def test_random_programs_match_clang(lines):
    ours = assemble_program("\n".join(lines) + "\n", entry=None).text
    assert ours == clang_text(_clang_source(lines))


@needs_clang
def test_addi_zero_bytes():
    assert assemble_program("addi x0, x0, 0\n", entry=None).text == bytes.fromhex("13000000")
    assert clang_text(".option norvc\naddi x0, x0, 0\n") == bytes.fromhex("13000000")


@needs_clang
def test_label_branches_match_clang():
    src = """
    top:
        addi a0, a0, 1
        beq a0, a1, done
        bne a0, zero, top
        jal zero, top
        .align 4
    done:
        blt a0, a1, top
        jal ra, done
    """
    assert assemble_program(src, entry=None).text == clang_text(".option norvc\n" + src)


@needs_clang
@pytest.mark.parametrize("value", [0, 1, -1, 2047, -2048, 2048, 0x7FFFFFFF, -0x80000000, 0x80000000,
                                   0x123456789, 0x7FFFFFFFFFFFFFFF, -0x8000000000000000, 0xDEADBEEF,
                                   0xFFFFFFFF, 0x555EC1A581DAAD10, 0xFFFFFFFFFFFF])
def test_li_matches_clang(value):
    ours = assemble_program(f"li a0, {value}\n", entry=None).text
    assert ours == clang_text(f".option norvc\nli a0, {value}\n")


def _run_snippet(body: str):
    src = f"_start:\n{body}\n    li a7, 93\n    li a0, 0\n    ecall\n"
    eng = Engine.from_elf(assemble(src))
    eng.run(10_000)
    return eng


@settings(max_examples=200, deadline=None)
@given(st.integers(-(1 << 63), (1 << 64) - 1))
def test_li_semantics(value):
    eng = _run_snippet(f"    li t0, {value}")
    assert eng.regs[5] == value & ((1 << 64) - 1)
    assert len(li_sequence(value)) <= 8


def test_la_loads_label_address():
    src = "_start:\n    la t1, buf\n    li a7, 93\n    ecall\n.data\nbuf: .dword 7\n"
    prog = assemble_program(src)
    eng = Engine.from_elf(prog.to_elf())
    eng.run(100)
    assert eng.regs[6] == prog.labels["buf"]


# -- range enforcement -----------------------------------------------------------------

def test_jal_two_mib_away_rejected():
    src = "_start:\n    jal ra, far\n    .zero 0x200000\nfar:\n    ret\n"
    with pytest.raises(BranchOutOfRange):
        assemble(src)


@pytest.mark.parametrize("off,ok", [((1 << 20) - 2, True), (-(1 << 20), True), (1 << 20, False),
                                    (-(1 << 20) - 2, False)])
def test_jal_range_boundary(off, ok):
    src = f"jal ra, {off}\n"
    if ok:
        ins = decode(assemble_program(src, entry=None).text, 0)
        assert ins.imm == off
    else:
        with pytest.raises(BranchOutOfRange):
            assemble_program(src, entry=None)


@pytest.mark.parametrize("off,ok", [(4094, True), (-4096, True), (4096, False), (-4098, False)])
def test_branch_range_boundary(off, ok):
    src = f"beq a0, a1, {off}\n"
    if ok:
        assert decode(assemble_program(src, entry=None).text, 0).imm == off
    else:
        with pytest.raises(BranchOutOfRange):
            assemble_program(src, entry=None)


def test_branch_to_far_label_rejected():
    with pytest.raises(BranchOutOfRange):
        assemble("_start:\n    beqz a0, far\n    .zero 8192\nfar:\n    ret\n")


def test_odd_offset_rejected():
    with pytest.raises(AsmSyntaxError):
        assemble_program("jal ra, 3\n", entry=None)


def test_compressed_branch_range():
    with pytest.raises(BranchOutOfRange):
        assemble_program("c.beqz a0, 256\n", entry=None)
    with pytest.raises(BranchOutOfRange):
        assemble_program("c.j 2048\n", entry=None)


def test_unknown_mnemonic():
    with pytest.raises(UnknownMnemonic) as ei:
        assemble("_start:\n    nop\n    fadd.s ft0, ft1, ft2\n")
    assert ei.value.line == 3


def test_unresolved_label():
    with pytest.raises(UnresolvedLabel):
        assemble("_start:\n    j nowhere\n")


def test_syntax_errors():
    with pytest.raises(AsmSyntaxError):
        assemble("_start:\n    addi a0, a0\n")
    with pytest.raises(AsmSyntaxError):
        assemble("_start:\n    addi a0, a0, 5000\n")
    with pytest.raises(AsmSyntaxError):
        assemble("_start:\n    add q9, a0, a0\n")


# -- ELF output and round trip ---------------------------------------------------------

def test_elf_shape():
    prog = assemble_program("_start:\n    nop\n    ret\n.globl helper\nhelper:\n    ret\n.data\nv: .word 1\n")
    res = load_elf(prog.to_elf(), "t")
    img = res.image
    assert res.entry == prog.entry == 0x10000
    assert img.start == 0x10000
    assert img.symbols["helper"] == prog.labels["helper"]
    assert res.memory.load(prog.labels["v"], 4) == 1


@pytest.mark.parametrize("name", sorted(CATALOG))
def test_fixture_round_trip(name):
    """Decoding the emitted bytes reproduces the instruction sequence of the source."""
    fx = build_fixture(name)
    res = load_elf(fx.elf, name)
    n = 0
    for entry in fx.program.listing:
        data = res.memory.fetch(entry.address, len(entry.data))
        assert bytes(data) == entry.data
        assert str(decode(entry.data, entry.address)) == entry.text
        n += 1
    assert n > 20


@needs_clang
@pytest.mark.parametrize("name", sorted(CATALOG))
def test_fixture_listing_matches_clang(name):
    """Re-assembling our canonical listing text with clang gives the same bytes."""
    fx = build_fixture(name)
    lines = [e.text for e in fx.program.listing]  # branch offsets are numeric, hence relative
    text = b"".join(e.data for e in fx.program.listing)
    assert clang_text(".option norvc\n" + "\n".join(lines) + "\n") == text

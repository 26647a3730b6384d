"""A small two-pass RV64IMAC assembler producing static ELF executables.

Accepted syntax is a subset of GNU ``as``: ``label:`` definitions, ``#``
comments, the sections ``.text``/``.data``/``.rodata``/``.bss``, data
directives (``.byte .half .word .dword .zero .ascii .asciz .align``),
``.globl``, ``.equ``, every RV64IMAC + Zicsr mnemonic including explicit
``c.*`` compressed forms, and the pseudo-instructions ``nop li la mv not neg
negw sext.w seqz snez beqz bnez bltz bgez blez bgtz bgt ble bgtu bleu j jr
call tail ret csrr csrw rdcycle rdinstret rdtime``.

Instructions are never compressed or relaxed implicitly; a branch whose
target is out of range is an error.
"""
from __future__ import annotations

import ast
import re
from dataclasses import dataclass, field
from typing import Callable, Optional

from ..isa import (
    ABI_NAMES, enc_b, enc_i, enc_j, enc_r, enc_s, enc_u, sext,
)
from ..loader import PAGE_SIZE, PF_R, PF_W, PF_X, page_up
from .elf import STT_FUNC, STT_NOTYPE, STT_OBJECT, ElfSegment, ElfSpec, ElfSymbol, write_elf

TEXT_BASE = 0x10000

BRANCH_RANGE = 1 << 12      # +-4 KiB
JAL_RANGE = 1 << 20         # +-1 MiB
CJ_RANGE = 1 << 11          # +-2 KiB
CB_RANGE = 1 << 8           # +-256 B


class AsmError(Exception):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


class AsmSyntaxError(AsmError):
    pass


class UnknownMnemonic(AsmError):
    pass


class UnresolvedLabel(AsmError):
    pass


class BranchOutOfRange(AsmError):
    pass


REGS = {name: i for i, name in enumerate(ABI_NAMES)}
REGS.update({f"x{i}": i for i in range(32)})
REGS["fp"] = 8

CSRS = {"cycle": 0xC00, "time": 0xC01, "instret": 0xC02}

_R = {
    "add": (0x33, 0, 0x00), "sub": (0x33, 0, 0x20), "sll": (0x33, 1, 0x00), "slt": (0x33, 2, 0x00),
    "sltu": (0x33, 3, 0x00), "xor": (0x33, 4, 0x00), "srl": (0x33, 5, 0x00), "sra": (0x33, 5, 0x20),
    "or": (0x33, 6, 0x00), "and": (0x33, 7, 0x00),
    "mul": (0x33, 0, 0x01), "mulh": (0x33, 1, 0x01), "mulhsu": (0x33, 2, 0x01), "mulhu": (0x33, 3, 0x01),
    "div": (0x33, 4, 0x01), "divu": (0x33, 5, 0x01), "rem": (0x33, 6, 0x01), "remu": (0x33, 7, 0x01),
    "addw": (0x3B, 0, 0x00), "subw": (0x3B, 0, 0x20), "sllw": (0x3B, 1, 0x00), "srlw": (0x3B, 5, 0x00),
    "sraw": (0x3B, 5, 0x20), "mulw": (0x3B, 0, 0x01), "divw": (0x3B, 4, 0x01), "divuw": (0x3B, 5, 0x01),
    "remw": (0x3B, 6, 0x01), "remuw": (0x3B, 7, 0x01),
}
_I = {
    "addi": (0x13, 0), "slti": (0x13, 2), "sltiu": (0x13, 3), "xori": (0x13, 4),
    "ori": (0x13, 6), "andi": (0x13, 7), "addiw": (0x1B, 0),
}
_SHIFT = {  # opcode, funct3, high bits, shamt width
    "slli": (0x13, 1, 0x000, 6), "srli": (0x13, 5, 0x000, 6), "srai": (0x13, 5, 0x400, 6),
    "slliw": (0x1B, 1, 0x000, 5), "srliw": (0x1B, 5, 0x000, 5), "sraiw": (0x1B, 5, 0x400, 5),
}
_LOAD = {"lb": 0, "lh": 1, "lw": 2, "ld": 3, "lbu": 4, "lhu": 5, "lwu": 6}
_STORE = {"sb": 0, "sh": 1, "sw": 2, "sd": 3}
_BRANCH = {"beq": 0, "bne": 1, "blt": 4, "bge": 5, "bltu": 6, "bgeu": 7}
_CSR = {"csrrw": 1, "csrrs": 2, "csrrc": 3, "csrrwi": 5, "csrrsi": 6, "csrrci": 7}
_AMO = {
    "lr": 0x02, "sc": 0x03, "amoswap": 0x01, "amoadd": 0x00, "amoxor": 0x04, "amoand": 0x0C,
    "amoor": 0x08, "amomin": 0x10, "amomax": 0x14, "amominu": 0x18, "amomaxu": 0x1C,
}
_AMO_RE = re.compile(r"^(lr|sc|amo[a-z]+)\.(w|d)((?:\.aqrl|\.aq|\.rl)?)$")

_LABEL_RE = re.compile(r"^\s*([A-Za-z_][\w]*)\s*:")
_MEM_RE = re.compile(r"^(.*)\(\s*(\w+)\s*\)$")
_INT_RE = re.compile(r"^[+-]?(0[xX][0-9a-fA-F]+|0[bB][01]+|\d+)$")


@dataclass
class ListingEntry:
    address: int
    data: bytes
    text: str
    line: int


@dataclass
class AsmProgram:
    text: bytes
    data: bytes
    bss_size: int
    text_base: int
    data_base: int
    labels: dict[str, int]
    exported: set[str]
    constants: dict[str, int]
    entry: int
    listing: list[ListingEntry] = field(default_factory=list)

    @property
    def text_end(self) -> int:
        return self.text_base + len(self.text)

    def to_elf(self) -> bytes:
        segs = [ElfSegment(self.text_base, self.text, len(self.text), PF_R | PF_X, ".text")]
        if self.data or self.bss_size:
            segs.append(ElfSegment(self.data_base, self.data, len(self.data) + self.bss_size,
                                   PF_R | PF_W, ".data"))
        syms = []
        for name, addr in self.labels.items():
            in_text = self.text_base <= addr < self.text_end
            seg = 0 if in_text else 1
            if not in_text and len(segs) == 1:
                seg = 0
            kind = (STT_FUNC if in_text else STT_OBJECT) if name in self.exported else STT_NOTYPE
            syms.append(ElfSymbol(name, addr, seg, name in self.exported, kind))
        return write_elf(ElfSpec(self.entry, segs, syms))


# -- source parsing --------------------------------------------------------------------

def _strip_comment(line: str) -> str:
    out = []
    quote = None
    i = 0
    while i < len(line):
        c = line[i]
        if quote:
            out.append(c)
            if c == "\\" and i + 1 < len(line):
                out.append(line[i + 1])
                i += 1
            elif c == quote:
                quote = None
        elif c in "\"'":
            quote = c
            out.append(c)
        elif c == "#" or line.startswith("//", i):
            break
        else:
            out.append(c)
        i += 1
    return "".join(out).strip()


def _split_operands(s: str) -> list[str]:
    ops, depth, cur, quote = [], 0, [], None
    for c in s:
        if quote:
            cur.append(c)
            if c == quote:
                quote = None
            continue
        if c in "\"'":
            quote = c
        elif c == "(":
            depth += 1
        elif c == ")":
            depth -= 1
        elif c == "," and depth == 0:
            ops.append("".join(cur).strip())
            cur = []
            continue
        cur.append(c)
    if cur or ops:
        ops.append("".join(cur).strip())
    return [o for o in ops if o != ""] if ops != [""] else []


_STR_ESC = {"n": "\n", "t": "\t", "0": "\0", "\\": "\\", '"': '"', "r": "\r"}


def _parse_string(s: str, line: int) -> bytes:
    s = s.strip()
    if len(s) < 2 or s[0] != '"' or s[-1] != '"':
        raise AsmSyntaxError(f"expected string literal, got {s!r}", line)
    out, i, body = [], 0, s[1:-1]
    while i < len(body):
        c = body[i]
        if c == "\\" and i + 1 < len(body):
            out.append(_STR_ESC.get(body[i + 1], body[i + 1]))
            i += 2
            continue
        out.append(c)
        i += 1
    return "".join(out).encode("latin-1")


_ALLOWED_BIN = {ast.Add: int.__add__, ast.Sub: int.__sub__, ast.Mult: int.__mul__,
                ast.LShift: int.__lshift__, ast.RShift: int.__rshift__, ast.BitOr: int.__or__,
                ast.BitAnd: int.__and__, ast.BitXor: int.__xor__, ast.FloorDiv: int.__floordiv__}


class _Evaluator:
    """Integer expression evaluation over labels and ``.equ`` constants."""

    def __init__(self, symbols: dict[str, int], strict: bool):
        self.symbols = symbols
        self.strict = strict

    def __call__(self, expr: str, line: int) -> int:
        expr = expr.strip()
        if len(expr) == 3 and expr[0] == expr[2] == "'":
            return ord(expr[1])
        try:
            tree = ast.parse(expr, mode="eval")
        except SyntaxError:
            raise AsmSyntaxError(f"bad expression {expr!r}", line) from None
        return self._eval(tree.body, expr, line)

    def _eval(self, node, expr, line):
        if isinstance(node, ast.Constant) and isinstance(node.value, int):
            return node.value
        if isinstance(node, ast.Name):
            if node.id in self.symbols:
                return self.symbols[node.id]
            if self.strict:
                raise UnresolvedLabel(f"undefined symbol {node.id!r}", line)
            return 0
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd, ast.Invert)):
            v = self._eval(node.operand, expr, line)
            return -v if isinstance(node.op, ast.USub) else (~v if isinstance(node.op, ast.Invert) else v)
        if isinstance(node, ast.BinOp) and type(node.op) in _ALLOWED_BIN:
            return _ALLOWED_BIN[type(node.op)](self._eval(node.left, expr, line),
                                                self._eval(node.right, expr, line))
        raise AsmSyntaxError(f"unsupported expression {expr!r}", line)


@dataclass
class _Stmt:
    kind: str  # "ins" | "data"
    section: str
    offset: int
    mnemonic: str
    operands: list[str]
    line: int
    size: int = 0


# -- encoding --------------------------------------------------------------------------

class _Encoder:
    def __init__(self, ev: _Evaluator, strict: bool):
        self.ev = ev
        self.strict = strict

    # operand helpers
    def reg(self, s: str, line: int) -> int:
        r = REGS.get(s.strip())
        if r is None:
            raise AsmSyntaxError(f"expected register, got {s!r}", line)
        return r

    def creg(self, s: str, line: int) -> int:
        r = self.reg(s, line)
        if not 8 <= r <= 15:
            raise AsmSyntaxError(f"register {s} not usable in compressed form (need x8-x15)", line)
        return r - 8

    def imm(self, s: str, line: int) -> int:
        return self.ev(s, line)

    def mem(self, s: str, line: int) -> tuple[int, int]:
        m = _MEM_RE.match(s.strip())
        if not m:
            raise AsmSyntaxError(f"expected offset(reg), got {s!r}", line)
        off = m.group(1).strip()
        return (self.imm(off, line) if off else 0), self.reg(m.group(2), line)

    def target(self, s: str, pc: int, line: int) -> int:
        """Relative displacement for a branch operand (numeric literals are already relative)."""
        s = s.strip()
        if _INT_RE.match(s):
            return int(s, 0)
        return self.imm(s, line) - pc

    def check(self, cond: bool, exc: type, msg: str, line: int) -> None:
        if self.strict and not cond:
            raise exc(msg, line)

    def check_range(self, value: int, lo: int, hi: int, what: str, line: int, align: int = 1) -> None:
        self.check(lo <= value <= hi and value % align == 0, AsmSyntaxError,
                   f"{what} {value} out of range [{lo}, {hi}]" + (f" or not a multiple of {align}" if align > 1 else ""),
                   line)

    def branch_range(self, off: int, span: int, what: str, line: int) -> None:
        self.check(-span <= off < span, BranchOutOfRange,
                   f"{what} displacement {off:+#x} exceeds +-{span:#x}", line)
        self.check(off % 2 == 0, AsmSyntaxError, f"{what} displacement {off} is odd", line)

    # main entry: returns [(size, encoding, canonical text)]
    def encode(self, mn: str, ops: list[str], pc: int, line: int) -> list[tuple[int, int, str]]:
        fn = _PSEUDO.get(mn)
        if fn is not None:
            out = []
            for sub_mn, sub_ops in fn(self, ops, pc, line):
                out += self.encode(sub_mn, sub_ops, pc + sum(o[0] for o in out), line)
            return out
        if mn.startswith("c."):
            return [self.encode_compressed(mn, ops, pc, line)]
        return [self.encode_base(mn, ops, pc, line)]

    def nops(self, ops: list[str], n: int, mn: str, line: int) -> None:
        if len(ops) != n:
            raise AsmSyntaxError(f"{mn} expects {n} operands, got {len(ops)}", line)

    def encode_base(self, mn: str, ops: list[str], pc: int, line: int) -> tuple[int, int, str]:
        r = lambda s: self.reg(s, line)  # noqa: E731
        name = lambda i: ABI_NAMES[i]  # noqa: E731
        if mn in _R:
            self.nops(ops, 3, mn, line)
            opc, f3, f7 = _R[mn]
            rd, rs1, rs2 = r(ops[0]), r(ops[1]), r(ops[2])
            return 4, enc_r(opc, rd, f3, rs1, rs2, f7), f"{mn} {name(rd)}, {name(rs1)}, {name(rs2)}"
        if mn in _I:
            self.nops(ops, 3, mn, line)
            opc, f3 = _I[mn]
            rd, rs1, imm = r(ops[0]), r(ops[1]), self.imm(ops[2], line)
            self.check_range(imm, -2048, 2047, "immediate", line)
            return 4, enc_i(opc, rd, f3, rs1, imm), f"{mn} {name(rd)}, {name(rs1)}, {imm}"
        if mn in _SHIFT:
            self.nops(ops, 3, mn, line)
            opc, f3, hi, width = _SHIFT[mn]
            rd, rs1, sh = r(ops[0]), r(ops[1]), self.imm(ops[2], line)
            self.check_range(sh, 0, (1 << width) - 1, "shift amount", line)
            return 4, enc_i(opc, rd, f3, rs1, hi | (sh & ((1 << width) - 1))), f"{mn} {name(rd)}, {name(rs1)}, {sh}"
        if mn in _LOAD:
            self.nops(ops, 2, mn, line)
            rd = r(ops[0])
            off, rs1 = self.mem(ops[1], line)
            self.check_range(off, -2048, 2047, "offset", line)
            return 4, enc_i(0x03, rd, _LOAD[mn], rs1, off), f"{mn} {name(rd)}, {off}({name(rs1)})"
        if mn in _STORE:
            self.nops(ops, 2, mn, line)
            rs2 = r(ops[0])
            off, rs1 = self.mem(ops[1], line)
            self.check_range(off, -2048, 2047, "offset", line)
            return 4, enc_s(0x23, _STORE[mn], rs1, rs2, off), f"{mn} {name(rs2)}, {off}({name(rs1)})"
        if mn in _BRANCH:
            self.nops(ops, 3, mn, line)
            rs1, rs2 = r(ops[0]), r(ops[1])
            off = self.target(ops[2], pc, line)
            self.branch_range(off, BRANCH_RANGE, mn, line)
            return 4, enc_b(0x63, _BRANCH[mn], rs1, rs2, off), f"{mn} {name(rs1)}, {name(rs2)}, {off}"
        if mn == "jal":
            if len(ops) == 1:
                ops = ["ra", ops[0]]
            self.nops(ops, 2, mn, line)
            rd = r(ops[0])
            off = self.target(ops[1], pc, line)
            self.branch_range(off, JAL_RANGE, mn, line)
            return 4, enc_j(0x6F, rd, off), f"jal {name(rd)}, {off}"
        if mn == "jalr":
            if len(ops) == 1:
                if _MEM_RE.match(ops[0]):
                    ops = ["ra", ops[0]]
                else:
                    ops = ["ra", f"0({ops[0]})"]
            if len(ops) == 3:
                ops = [ops[0], f"{ops[2]}({ops[1]})"]
            self.nops(ops, 2, mn, line)
            rd = r(ops[0])
            off, rs1 = self.mem(ops[1], line)
            self.check_range(off, -2048, 2047, "offset", line)
            return 4, enc_i(0x67, rd, 0, rs1, off), f"jalr {name(rd)}, {off}({name(rs1)})"
        if mn in ("lui", "auipc"):
            self.nops(ops, 2, mn, line)
            rd, v = r(ops[0]), self.imm(ops[1], line)
            self.check_range(v, 0, 0xFFFFF, "upper immediate", line)
            return 4, enc_u(0x37 if mn == "lui" else 0x17, rd, v), f"{mn} {name(rd)}, {v & 0xFFFFF}"
        if mn == "ecall":
            self.nops(ops, 0, mn, line)
            return 4, 0x00000073, "ecall"
        if mn == "ebreak":
            self.nops(ops, 0, mn, line)
            return 4, 0x00100073, "ebreak"
        if mn == "fence":
            if not ops:
                ops = ["iorw", "iorw"]
            self.nops(ops, 2, mn, line)
            bits = [self._fence_bits(o, line) for o in ops]
            return 4, ((bits[0] << 4 | bits[1]) << 20) | 0x0F, f"fence {ops[0]}, {ops[1]}"
        if mn == "fence.i":
            self.nops(ops, 0, mn, line)
            return 4, 0x0000100F, "fence.i"
        if mn in _CSR:
            self.nops(ops, 3, mn, line)
            rd = r(ops[0])
            csr = self._csr(ops[1], line)
            if mn.endswith("i"):
                src = self.imm(ops[2], line)
                self.check_range(src, 0, 31, "CSR immediate", line)
                src_txt = str(src)
            else:
                src = r(ops[2])
                src_txt = name(src)
            csr_txt = next((k for k, v in CSRS.items() if v == csr), str(csr))
            return 4, enc_i(0x73, rd, _CSR[mn], src, csr), f"{mn} {name(rd)}, {csr_txt}, {src_txt}"
        m = _AMO_RE.match(mn)
        if m and m.group(1) in _AMO:
            base, width, order = m.groups()
            f3 = 2 if width == "w" else 3
            aq = int("aq" in order)
            rl = int("rl" in order)
            f5 = _AMO[base]
            if base == "lr":
                self.nops(ops, 2, mn, line)
                rd, rs1 = r(ops[0]), self._amo_addr(ops[1], line)
                rs2 = 0
                txt = f"{mn} {name(rd)}, ({name(rs1)})"
            else:
                self.nops(ops, 3, mn, line)
                rd, rs2, rs1 = r(ops[0]), r(ops[1]), self._amo_addr(ops[2], line)
                txt = f"{mn} {name(rd)}, {name(rs2)}, ({name(rs1)})"
            f7 = (f5 << 2) | (aq << 1) | rl
            return 4, enc_r(0x2F, rd, f3, rs1, rs2, f7), txt
        raise UnknownMnemonic(f"unknown mnemonic {mn!r}", line)

    def _amo_addr(self, s: str, line: int) -> int:
        off, rs1 = self.mem(s, line)
        if off != 0:
            raise AsmSyntaxError("atomic memory operands take no offset", line)
        return rs1

    def _fence_bits(self, s: str, line: int) -> int:
        s = s.strip()
        if not s or any(c not in "iorw" for c in s):
            raise AsmSyntaxError(f"bad fence set {s!r}", line)
        return sum(b for c, b in zip("iorw", (8, 4, 2, 1)) if c in s)

    def _csr(self, s: str, line: int) -> int:
        s = s.strip()
        if s in CSRS:
            return CSRS[s]
        v = self.imm(s, line)
        self.check_range(v, 0, 0xFFF, "CSR number", line)
        return v

    def encode_compressed(self, mn: str, ops: list[str], pc: int, line: int) -> tuple[int, int, str]:
        r = lambda s: self.reg(s, line)  # noqa: E731
        cr = lambda s: self.creg(s, line)  # noqa: E731
        imm = lambda s: self.imm(s, line)  # noqa: E731
        name = lambda i: ABI_NAMES[i]  # noqa: E731

        def b(v, hi, lo, at):
            """Place bits v[hi:lo] at position ``at``."""
            return ((v >> lo) & ((1 << (hi - lo + 1)) - 1)) << at

        def nonzero_reg(rd, what="rd"):
            self.check(rd != 0, AsmSyntaxError, f"{mn}: {what} must not be x0", line)

        if mn == "c.nop":
            self.nops(ops, 0, mn, line)
            return 2, 0x0001, "c.nop"
        if mn == "c.ebreak":
            self.nops(ops, 0, mn, line)
            return 2, 0x9002, "c.ebreak"
        if mn in ("c.addi", "c.addiw", "c.li", "c.andi"):
            self.nops(ops, 2, mn, line)
            if mn == "c.andi":
                rd = cr(ops[0])
                v = imm(ops[1])
                self.check_range(v, -32, 31, "immediate", line)
                enc = (4 << 13) | b(v, 5, 5, 12) | (2 << 10) | (rd << 7) | b(v, 4, 0, 2) | 1
                return 2, enc, f"c.andi {name(rd + 8)}, {v}"
            rd = r(ops[0])
            v = imm(ops[1])
            self.check_range(v, -32, 31, "immediate", line)
            nonzero_reg(rd)
            if mn == "c.addi":
                self.check(v != 0, AsmSyntaxError, "c.addi immediate must be nonzero", line)
            f3 = {"c.addi": 0, "c.addiw": 1, "c.li": 2}[mn]
            return 2, (f3 << 13) | b(v, 5, 5, 12) | (rd << 7) | b(v, 4, 0, 2) | 1, f"{mn} {name(rd)}, {v}"
        if mn == "c.lui":
            self.nops(ops, 2, mn, line)
            rd, v = r(ops[0]), imm(ops[1])
            self.check(rd not in (0, 2), AsmSyntaxError, "c.lui: rd must not be x0 or sp", line)
            self.check(1 <= v <= 31 or 0xFFFE0 <= v <= 0xFFFFF, AsmSyntaxError,
                       f"c.lui immediate {v} out of range", line)
            return 2, (3 << 13) | b(v, 5, 5, 12) | (rd << 7) | b(v, 4, 0, 2) | 1, f"c.lui {name(rd)}, {v}"
        if mn == "c.addi16sp":
            self.nops(ops, 2, mn, line)
            self.check(r(ops[0]) == 2, AsmSyntaxError, "c.addi16sp operates on sp", line)
            v = imm(ops[1])
            self.check_range(v, -512, 496, "immediate", line, align=16)
            self.check(v != 0, AsmSyntaxError, "c.addi16sp immediate must be nonzero", line)
            enc = ((3 << 13) | b(v, 9, 9, 12) | (2 << 7) | b(v, 4, 4, 6) | b(v, 6, 6, 5)
                   | b(v, 8, 7, 3) | b(v, 5, 5, 2) | 1)
            return 2, enc, f"c.addi16sp sp, {v}"
        if mn == "c.addi4spn":
            self.nops(ops, 3, mn, line)
            rd = cr(ops[0])
            self.check(r(ops[1]) == 2, AsmSyntaxError, "c.addi4spn adds to sp", line)
            v = imm(ops[2])
            self.check_range(v, 4, 1020, "immediate", line, align=4)
            enc = b(v, 5, 4, 11) | b(v, 9, 6, 7) | b(v, 2, 2, 6) | b(v, 3, 3, 5) | (rd << 2)
            return 2, enc, f"c.addi4spn {name(rd + 8)}, sp, {v}"
        if mn in ("c.srli", "c.srai"):
            self.nops(ops, 2, mn, line)
            rd, v = cr(ops[0]), imm(ops[1])
            self.check_range(v, 1, 63, "shift amount", line)
            f2 = 0 if mn == "c.srli" else 1
            return 2, (4 << 13) | b(v, 5, 5, 12) | (f2 << 10) | (rd << 7) | b(v, 4, 0, 2) | 1, f"{mn} {name(rd + 8)}, {v}"
        if mn in ("c.sub", "c.xor", "c.or", "c.and", "c.subw", "c.addw"):
            self.nops(ops, 2, mn, line)
            rd, rs2 = cr(ops[0]), cr(ops[1])
            hi, sel = {"c.sub": (0, 0), "c.xor": (0, 1), "c.or": (0, 2), "c.and": (0, 3),
                       "c.subw": (1, 0), "c.addw": (1, 1)}[mn]
            enc = (4 << 13) | (hi << 12) | (3 << 10) | (rd << 7) | (sel << 5) | (rs2 << 2) | 1
            return 2, enc, f"{mn} {name(rd + 8)}, {name(rs2 + 8)}"
        if mn == "c.j":
            self.nops(ops, 1, mn, line)
            off = self.target(ops[0], pc, line)
            self.branch_range(off, CJ_RANGE, mn, line)
            enc = ((5 << 13) | b(off, 11, 11, 12) | b(off, 4, 4, 11) | b(off, 9, 8, 9) | b(off, 10, 10, 8)
                   | b(off, 6, 6, 7) | b(off, 7, 7, 6) | b(off, 3, 1, 3) | b(off, 5, 5, 2) | 1)
            return 2, enc, f"c.j {off}"
        if mn in ("c.beqz", "c.bnez"):
            self.nops(ops, 2, mn, line)
            rs1 = cr(ops[0])
            off = self.target(ops[1], pc, line)
            self.branch_range(off, CB_RANGE, mn, line)
            f3 = 6 if mn == "c.beqz" else 7
            enc = ((f3 << 13) | b(off, 8, 8, 12) | b(off, 4, 3, 10) | (rs1 << 7) | b(off, 7, 6, 5)
                   | b(off, 2, 1, 3) | b(off, 5, 5, 2) | 1)
            return 2, enc, f"{mn} {name(rs1 + 8)}, {off}"
        if mn == "c.slli":
            self.nops(ops, 2, mn, line)
            rd, v = r(ops[0]), imm(ops[1])
            nonzero_reg(rd)
            self.check_range(v, 1, 63, "shift amount", line)
            return 2, b(v, 5, 5, 12) | (rd << 7) | b(v, 4, 0, 2) | 2, f"c.slli {name(rd)}, {v}"
        if mn in ("c.lwsp", "c.ldsp"):
            self.nops(ops, 2, mn, line)
            rd = r(ops[0])
            nonzero_reg(rd)
            off, base = self.mem(ops[1], line)
            self.check(base == 2, AsmSyntaxError, f"{mn} addresses sp", line)
            if mn == "c.lwsp":
                self.check_range(off, 0, 252, "offset", line, align=4)
                enc = (2 << 13) | b(off, 5, 5, 12) | (rd << 7) | b(off, 4, 2, 4) | b(off, 7, 6, 2) | 2
            else:
                self.check_range(off, 0, 504, "offset", line, align=8)
                enc = (3 << 13) | b(off, 5, 5, 12) | (rd << 7) | b(off, 4, 3, 5) | b(off, 8, 6, 2) | 2
            return 2, enc, f"{mn} {name(rd)}, {off}(sp)"
        if mn in ("c.swsp", "c.sdsp"):
            self.nops(ops, 2, mn, line)
            rs2 = r(ops[0])
            off, base = self.mem(ops[1], line)
            self.check(base == 2, AsmSyntaxError, f"{mn} addresses sp", line)
            if mn == "c.swsp":
                self.check_range(off, 0, 252, "offset", line, align=4)
                enc = (6 << 13) | b(off, 5, 2, 9) | b(off, 7, 6, 7) | (rs2 << 2) | 2
            else:
                self.check_range(off, 0, 504, "offset", line, align=8)
                enc = (7 << 13) | b(off, 5, 3, 10) | b(off, 8, 6, 7) | (rs2 << 2) | 2
            return 2, enc, f"{mn} {name(rs2)}, {off}(sp)"
        if mn in ("c.lw", "c.ld", "c.sw", "c.sd"):
            self.nops(ops, 2, mn, line)
            rx = cr(ops[0])
            off, base = self.mem(ops[1], line)
            self.check(8 <= base <= 15, AsmSyntaxError, f"{mn} base must be x8-x15", line)
            base -= 8
            f3 = {"c.lw": 2, "c.ld": 3, "c.sw": 6, "c.sd": 7}[mn]
            if mn in ("c.lw", "c.sw"):
                self.check_range(off, 0, 124, "offset", line, align=4)
                fields = b(off, 5, 3, 10) | b(off, 2, 2, 6) | b(off, 6, 6, 5)
            else:
                self.check_range(off, 0, 248, "offset", line, align=8)
                fields = b(off, 5, 3, 10) | b(off, 7, 6, 5)
            return 2, (f3 << 13) | fields | (base << 7) | (rx << 2), f"{mn} {name(rx + 8)}, {off}({name(base + 8)})"
        if mn in ("c.jr", "c.jalr"):
            self.nops(ops, 1, mn, line)
            rs1 = r(ops[0])
            nonzero_reg(rs1, "rs1")
            hi = 0 if mn == "c.jr" else 1
            return 2, (4 << 13) | (hi << 12) | (rs1 << 7) | 2, f"{mn} {name(rs1)}"
        if mn in ("c.mv", "c.add"):
            self.nops(ops, 2, mn, line)
            rd, rs2 = r(ops[0]), r(ops[1])
            nonzero_reg(rd)
            nonzero_reg(rs2, "rs2")
            hi = 0 if mn == "c.mv" else 1
            return 2, (4 << 13) | (hi << 12) | (rd << 7) | (rs2 << 2) | 2, f"{mn} {name(rd)}, {name(rs2)}"
        raise UnknownMnemonic(f"unknown mnemonic {mn!r}", line)


# -- pseudo-instructions ---------------------------------------------------------------

def li_sequence(value: int) -> list[tuple[str, int]]:
    """Instruction sequence materializing a 64-bit constant: [(mnemonic, imm)].

    The first entry's source register is x0 ("addi"/"lui"), later entries
    operate on rd itself.  Positive values with leading zeros may instead be
    built shifted to the top and finished with one ``srli``, when shorter.
    """
    value = sext(value & ((1 << 64) - 1), 64)
    seq = _li_base(value)
    if value > 0 and len(seq) > 2:
        lz = 64 - value.bit_length()
        shifted = (value << lz) & ((1 << 64) - 1)
        for fill in (shifted | ((1 << lz) - 1), shifted):
            alt = _li_base(sext(fill, 64)) + [("srli", lz)]
            if len(alt) < len(seq):
                seq = alt
    return seq


def _li_base(value: int) -> list[tuple[str, int]]:
    if -2048 <= value < 2048:
        return [("addi", value)]
    if -(1 << 31) <= value < (1 << 31):
        hi = ((value + 0x800) >> 12) & 0xFFFFF
        lo = sext(value, 12)
        seq = [("lui", hi)]
        if lo:
            seq.append(("addiw", lo))
        return seq
    lo = sext(value, 12)
    hi = (value - lo) >> 12
    shift = 12
    while hi & 1 == 0:
        hi >>= 1
        shift += 1
    if shift > 12 and not -2048 <= hi < 2048 and -(1 << 31) <= hi << 12 < (1 << 31):
        # give the low 12 bits back so the upper part is a single lui
        shift -= 12
        hi <<= 12
    seq = _li_base(hi) + [("slli", shift)]
    if lo:
        seq.append(("addi", lo))
    return seq


def _p_li(enc: _Encoder, ops, pc, line):
    enc.nops(ops, 2, "li", line)
    rd = ops[0]
    value = enc.ev(ops[1], line)  # constants must be known in pass 1 as well
    out = []
    for i, (mn, v) in enumerate(li_sequence(value)):
        if mn == "lui":
            out.append(("lui", [rd, str(v)]))
        elif i == 0:
            out.append((mn, [rd, "zero", str(v)]))
        else:
            out.append((mn, [rd, rd, str(v)]))
    return out


def _p_la(enc: _Encoder, ops, pc, line):
    enc.nops(ops, 2, "la", line)
    rd = ops[0]
    delta = enc.ev(ops[1], line) - pc
    hi = ((delta + 0x800) >> 12) & 0xFFFFF
    lo = sext(delta, 12)
    return [("auipc", [rd, str(hi)]), ("addi", [rd, rd, str(lo)])]


def _alias(fn: Callable[[list[str]], tuple[str, list[str]]], n: int, mn: str):
    def p(enc: _Encoder, ops, pc, line):
        enc.nops(ops, n, mn, line)
        return [fn(ops)]
    return p


_PSEUDO: dict[str, Callable] = {
    "li": _p_li,
    "la": _p_la,
    "lla": _p_la,
    "nop": _alias(lambda o: ("addi", ["zero", "zero", "0"]), 0, "nop"),
    "mv": _alias(lambda o: ("addi", [o[0], o[1], "0"]), 2, "mv"),
    "not": _alias(lambda o: ("xori", [o[0], o[1], "-1"]), 2, "not"),
    "neg": _alias(lambda o: ("sub", [o[0], "zero", o[1]]), 2, "neg"),
    "negw": _alias(lambda o: ("subw", [o[0], "zero", o[1]]), 2, "negw"),
    "sext.w": _alias(lambda o: ("addiw", [o[0], o[1], "0"]), 2, "sext.w"),
    "seqz": _alias(lambda o: ("sltiu", [o[0], o[1], "1"]), 2, "seqz"),
    "snez": _alias(lambda o: ("sltu", [o[0], "zero", o[1]]), 2, "snez"),
    "sltz": _alias(lambda o: ("slt", [o[0], o[1], "zero"]), 2, "sltz"),
    "sgtz": _alias(lambda o: ("slt", [o[0], "zero", o[1]]), 2, "sgtz"),
    "beqz": _alias(lambda o: ("beq", [o[0], "zero", o[1]]), 2, "beqz"),
    "bnez": _alias(lambda o: ("bne", [o[0], "zero", o[1]]), 2, "bnez"),
    "bltz": _alias(lambda o: ("blt", [o[0], "zero", o[1]]), 2, "bltz"),
    "bgez": _alias(lambda o: ("bge", [o[0], "zero", o[1]]), 2, "bgez"),
    "blez": _alias(lambda o: ("bge", ["zero", o[0], o[1]]), 2, "blez"),
    "bgtz": _alias(lambda o: ("blt", ["zero", o[0], o[1]]), 2, "bgtz"),
    "bgt": _alias(lambda o: ("blt", [o[1], o[0], o[2]]), 3, "bgt"),
    "ble": _alias(lambda o: ("bge", [o[1], o[0], o[2]]), 3, "ble"),
    "bgtu": _alias(lambda o: ("bltu", [o[1], o[0], o[2]]), 3, "bgtu"),
    "bleu": _alias(lambda o: ("bgeu", [o[1], o[0], o[2]]), 3, "bleu"),
    "j": _alias(lambda o: ("jal", ["zero", o[0]]), 1, "j"),
    "jr": _alias(lambda o: ("jalr", ["zero", f"0({o[0]})"]), 1, "jr"),
    "ret": _alias(lambda o: ("jalr", ["zero", "0(ra)"]), 0, "ret"),
    "call": _alias(lambda o: ("jal", ["ra", o[0]]), 1, "call"),
    "tail": _alias(lambda o: ("jal", ["zero", o[0]]), 1, "tail"),
    "csrr": _alias(lambda o: ("csrrs", [o[0], o[1], "zero"]), 2, "csrr"),
    "csrw": _alias(lambda o: ("csrrw", ["zero", o[0], o[1]]), 2, "csrw"),
    "rdcycle": _alias(lambda o: ("csrrs", [o[0], "cycle", "zero"]), 1, "rdcycle"),
    "rdtime": _alias(lambda o: ("csrrs", [o[0], "time", "zero"]), 1, "rdtime"),
    "rdinstret": _alias(lambda o: ("csrrs", [o[0], "instret", "zero"]), 1, "rdinstret"),
}


# -- driver ----------------------------------------------------------------------------

_SECTIONS = {".text": "text", ".data": "data", ".rodata": "data", ".bss": "bss"}
_DATA_WIDTH = {".byte": 1, ".half": 2, ".2byte": 2, ".short": 2, ".word": 4, ".4byte": 4,
               ".long": 4, ".dword": 8, ".8byte": 8, ".quad": 8}
_IGNORED = {".type", ".size", ".file", ".ident", ".option", ".attribute", ".p2align_hint"}


def _parse(source: str) -> tuple[list[_Stmt], dict[str, tuple[str, int]], set[str], dict[str, int], dict[str, int]]:
    stmts: list[_Stmt] = []
    labels: dict[str, tuple[str, int]] = {}
    exported: set[str] = set()
    consts: dict[str, int] = {}
    offsets = {"text": 0, "data": 0, "bss": 0}
    section = "text"
    sizing = _Encoder(_Evaluator(consts, strict=False), strict=False)

    for lineno, raw in enumerate(source.splitlines(), start=1):
        line = _strip_comment(raw)
        while True:
            m = _LABEL_RE.match(line)
            if not m:
                break
            name = m.group(1)
            if name in labels or name in consts:
                raise AsmSyntaxError(f"duplicate symbol {name!r}", lineno)
            labels[name] = (section, offsets[section])
            line = line[m.end():].strip()
        if not line:
            continue
        parts = line.split(None, 1)
        mn = parts[0].lower()
        rest = parts[1] if len(parts) > 1 else ""
        if mn.startswith("."):
            if mn in _SECTIONS or mn == ".section":
                name = rest.split(",")[0].strip() if mn == ".section" else mn
                if name not in _SECTIONS:
                    raise AsmSyntaxError(f"unsupported section {name!r}", lineno)
                section = _SECTIONS[name]
                continue
            if mn in (".globl", ".global"):
                exported.update(n.strip() for n in rest.split(","))
                continue
            if mn in (".equ", ".set"):
                ops = _split_operands(rest)
                if len(ops) != 2:
                    raise AsmSyntaxError(f"{mn} expects name, value", lineno)
                consts[ops[0]] = sizing.ev(ops[1], lineno)
                continue
            if mn in _IGNORED:
                continue
            ops = _split_operands(rest)
            if mn in _DATA_WIDTH:
                size = _DATA_WIDTH[mn] * len(ops)
            elif mn in (".zero", ".space", ".skip"):
                size = _Evaluator(consts, True)(ops[0], lineno)
            elif mn in (".ascii", ".asciz", ".string"):
                size = sum(len(_parse_string(o, lineno)) + (mn != ".ascii") for o in ops)
            elif mn in (".align", ".p2align", ".balign"):
                n = _Evaluator(consts, True)(ops[0], lineno)
                align = n if mn == ".balign" else 1 << n
                size = -offsets[section] % align
            else:
                raise UnknownMnemonic(f"unknown directive {mn!r}", lineno)
            if section == "bss" and mn not in (".zero", ".space", ".skip", ".align", ".p2align", ".balign"):
                raise AsmSyntaxError(f"{mn} not allowed in .bss", lineno)
            stmts.append(_Stmt("data", section, offsets[section], mn, ops, lineno, size))
            offsets[section] += size
            continue
        if section != "text":
            raise AsmSyntaxError("instructions are only allowed in .text", lineno)
        ops = _split_operands(rest)
        size = sum(e[0] for e in sizing.encode(mn, ops, offsets["text"], lineno))
        stmts.append(_Stmt("ins", "text", offsets["text"], mn, ops, lineno, size))
        offsets["text"] += size
    return stmts, labels, exported, consts, offsets


def assemble_program(source: str, *, text_base: int = TEXT_BASE, entry: Optional[str] = "_start") -> AsmProgram:
    """Assemble ``source`` into an :class:`AsmProgram` with a resolved listing."""
    stmts, labels, exported, consts, sizes = _parse(source)
    data_base = page_up(text_base + max(sizes["text"], 1))
    bss_base = data_base + sizes["data"]
    bss_base = (bss_base + 7) & ~7
    base = {"text": text_base, "data": data_base, "bss": bss_base}
    addrs = {name: base[sec] + off for name, (sec, off) in labels.items()}
    missing = exported - set(addrs)
    if missing:
        raise UnresolvedLabel(f"exported symbol(s) never defined: {', '.join(sorted(missing))}")
    symtab = {**consts, **addrs}
    ev = _Evaluator(symtab, strict=True)
    enc = _Encoder(ev, strict=True)

    text = bytearray()
    data = bytearray()
    listing: list[ListingEntry] = []
    for st in stmts:
        pc = base[st.section] + st.offset
        if st.kind == "ins":
            parts = enc.encode(st.mnemonic, st.operands, pc, st.line)
            if sum(p[0] for p in parts) != st.size:
                raise AsmError(f"internal: size of {st.mnemonic} changed between passes", st.line)
            for size, word, txt in parts:
                blob = word.to_bytes(size, "little")
                listing.append(ListingEntry(text_base + len(text), blob, txt, st.line))
                text += blob
            continue
        if st.section == "bss":
            continue
        buf = text if st.section == "text" else data
        mn = st.mnemonic
        if mn in _DATA_WIDTH:
            w = _DATA_WIDTH[mn]
            for o in st.operands:
                v = ev(o, st.line)
                if not -(1 << (8 * w - 1)) <= v < (1 << (8 * w)):
                    raise AsmSyntaxError(f"value {v} does not fit in {w} bytes", st.line)
                buf += (v & ((1 << (8 * w)) - 1)).to_bytes(w, "little")
        elif mn in (".ascii", ".asciz", ".string"):
            for o in st.operands:
                buf += _parse_string(o, st.line) + (b"" if mn == ".ascii" else b"\0")
        elif st.section == "text" and mn in (".align", ".p2align", ".balign"):
            pad = st.size
            while pad >= 4:
                buf += (0x13).to_bytes(4, "little")
                pad -= 4
            if pad == 2:
                buf += (0x0001).to_bytes(2, "little")
            elif pad:
                raise AsmSyntaxError("text alignment padding must be even", st.line)
        else:
            buf += bytes(st.size)
    if entry is None:
        entry_addr = text_base
    elif entry in addrs:
        entry_addr = addrs[entry]
    else:
        raise UnresolvedLabel(f"entry symbol {entry!r} not defined")
    return AsmProgram(bytes(text), bytes(data), sizes["bss"] if sizes["bss"] else 0,
                      text_base, data_base, addrs, exported, consts, entry_addr, listing)


def assemble(source: str, **kw) -> bytes:
    """Assemble ``source`` straight to static ELF bytes."""
    return assemble_program(source, **kw).to_elf()

"""RV64IMAC instruction decoding and the guest register file.

Decoding is pure: the same bytes at the same address always produce the same
:class:`DecodedInstruction`.  Compressed (RVC) encodings are decoded by first
expanding them to their 32-bit equivalent, so a compressed instruction and its
expansion share opcode, operands and classification flags.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

MASK64 = (1 << 64) - 1

ABI_NAMES = (
    "zero", "ra", "sp", "gp", "tp", "t0", "t1", "t2",
    "s0", "s1", "a0", "a1", "a2", "a3", "a4", "a5",
    "a6", "a7", "s2", "s3", "s4", "s5", "s6", "s7",
    "s8", "s9", "s10", "s11", "t3", "t4", "t5", "t6",
)

REG_ZERO, REG_RA, REG_SP, REG_GP, REG_TP = 0, 1, 2, 3, 4
REG_A0 = 10

CSR_NAMES = {0xC00: "cycle", 0xC01: "time", 0xC02: "instret"}


class DecodeError(Exception):
    """Base class for decoder failures."""


class UnknownInstruction(DecodeError):
    def __init__(self, raw: int, address: int, reason: str = "unsupported encoding"):
        self.raw = raw
        self.address = address
        self.reason = reason
        super().__init__(f"unknown instruction {raw:#x} at {address:#x}: {reason}")


class TruncatedInstruction(DecodeError):
    def __init__(self, address: int, available: int, needed: int):
        self.address = address
        self.available = available
        self.needed = needed
        super().__init__(f"truncated instruction at {address:#x}: {available} of {needed} bytes")


class Op(enum.Enum):
    LUI = "lui"
    AUIPC = "auipc"
    JAL = "jal"
    JALR = "jalr"
    BEQ = "beq"
    BNE = "bne"
    BLT = "blt"
    BGE = "bge"
    BLTU = "bltu"
    BGEU = "bgeu"
    LB = "lb"
    LH = "lh"
    LW = "lw"
    LD = "ld"
    LBU = "lbu"
    LHU = "lhu"
    LWU = "lwu"
    SB = "sb"
    SH = "sh"
    SW = "sw"
    SD = "sd"
    ADDI = "addi"
    SLTI = "slti"
    SLTIU = "sltiu"
    XORI = "xori"
    ORI = "ori"
    ANDI = "andi"
    SLLI = "slli"
    SRLI = "srli"
    SRAI = "srai"
    ADD = "add"
    SUB = "sub"
    SLL = "sll"
    SLT = "slt"
    SLTU = "sltu"
    XOR = "xor"
    SRL = "srl"
    SRA = "sra"
    OR = "or"
    AND = "and"
    ADDIW = "addiw"
    SLLIW = "slliw"
    SRLIW = "srliw"
    SRAIW = "sraiw"
    ADDW = "addw"
    SUBW = "subw"
    SLLW = "sllw"
    SRLW = "srlw"
    SRAW = "sraw"
    FENCE = "fence"
    FENCE_I = "fence.i"
    ECALL = "ecall"
    EBREAK = "ebreak"
    CSRRW = "csrrw"
    CSRRS = "csrrs"
    CSRRC = "csrrc"
    CSRRWI = "csrrwi"
    CSRRSI = "csrrsi"
    CSRRCI = "csrrci"
    MUL = "mul"
    MULH = "mulh"
    MULHSU = "mulhsu"
    MULHU = "mulhu"
    DIV = "div"
    DIVU = "divu"
    REM = "rem"
    REMU = "remu"
    MULW = "mulw"
    DIVW = "divw"
    DIVUW = "divuw"
    REMW = "remw"
    REMUW = "remuw"
    LR_W = "lr.w"
    SC_W = "sc.w"
    AMOSWAP_W = "amoswap.w"
    AMOADD_W = "amoadd.w"
    AMOXOR_W = "amoxor.w"
    AMOAND_W = "amoand.w"
    AMOOR_W = "amoor.w"
    AMOMIN_W = "amomin.w"
    AMOMAX_W = "amomax.w"
    AMOMINU_W = "amominu.w"
    AMOMAXU_W = "amomaxu.w"
    LR_D = "lr.d"
    SC_D = "sc.d"
    AMOSWAP_D = "amoswap.d"
    AMOADD_D = "amoadd.d"
    AMOXOR_D = "amoxor.d"
    AMOAND_D = "amoand.d"
    AMOOR_D = "amoor.d"
    AMOMIN_D = "amomin.d"
    AMOMAX_D = "amomax.d"
    AMOMINU_D = "amominu.d"
    AMOMAXU_D = "amomaxu.d"


BRANCHES = frozenset({Op.BEQ, Op.BNE, Op.BLT, Op.BGE, Op.BLTU, Op.BGEU})
LOADS = {Op.LB: 1, Op.LH: 2, Op.LW: 4, Op.LD: 8, Op.LBU: 1, Op.LHU: 2, Op.LWU: 4}
STORES = {Op.SB: 1, Op.SH: 2, Op.SW: 4, Op.SD: 8}
CSR_OPS = frozenset({Op.CSRRW, Op.CSRRS, Op.CSRRC, Op.CSRRWI, Op.CSRRSI, Op.CSRRCI})
M_OPS = frozenset({
    Op.MUL, Op.MULH, Op.MULHSU, Op.MULHU, Op.DIV, Op.DIVU, Op.REM, Op.REMU,
    Op.MULW, Op.DIVW, Op.DIVUW, Op.REMW, Op.REMUW,
})
LR_OPS = frozenset({Op.LR_W, Op.LR_D})
SC_OPS = frozenset({Op.SC_W, Op.SC_D})
AMO_OPS = frozenset(op for op in Op if op.value.startswith("amo"))
ATOMIC_OPS = LR_OPS | SC_OPS | AMO_OPS

# Base-ISA membership for atomic-sequence validation: everything except M, A and Zicsr.
BASE_OPS = frozenset(Op) - M_OPS - ATOMIC_OPS - CSR_OPS


@dataclass(frozen=True, slots=True)
class DecodedInstruction:
    address: int
    raw: int
    length: int
    op: Op
    rd: Optional[int] = None
    rs1: Optional[int] = None
    rs2: Optional[int] = None
    imm: int = 0
    aq: bool = False
    rl: bool = False
    is_load: bool = False
    is_store: bool = False
    is_conditional_branch: bool = False
    is_direct_jump: bool = False
    is_indirect_jump: bool = False
    is_lr: bool = False
    is_sc: bool = False
    is_amo: bool = False
    is_system: bool = False
    access_width: Optional[int] = None

    @property
    def next_address(self) -> int:
        return (self.address + self.length) & MASK64

    @property
    def is_control_flow(self) -> bool:
        return (self.is_conditional_branch or self.is_direct_jump
                or self.is_indirect_jump or self.is_system)

    @property
    def is_memory_access(self) -> bool:
        return self.is_load or self.is_store or self.is_amo

    @property
    def is_call(self) -> bool:
        """JAL/JALR writing the return address register."""
        return (self.is_direct_jump or self.is_indirect_jump) and self.rd == REG_RA

    @property
    def is_return(self) -> bool:
        return (self.is_indirect_jump and self.rd == REG_ZERO
                and self.rs1 == REG_RA and self.imm == 0)

    @property
    def branch_target(self) -> Optional[int]:
        """Statically known target of a conditional branch or JAL."""
        if self.is_conditional_branch or self.is_direct_jump:
            return (self.address + self.imm) & MASK64
        return None

    def operands(self) -> tuple:
        """Canonical operand tuple used for textual disassembly and comparisons."""
        op = self.op
        r = ABI_NAMES
        if op in (Op.LUI, Op.AUIPC):
            return (r[self.rd], (self.imm >> 12) & 0xFFFFF)
        if op is Op.JAL:
            return (r[self.rd], self.imm)
        if op is Op.JALR or op in LOADS:
            return (r[self.rd], f"{self.imm}({r[self.rs1]})")
        if op in BRANCHES:
            return (r[self.rs1], r[self.rs2], self.imm)
        if op in STORES:
            return (r[self.rs2], f"{self.imm}({r[self.rs1]})")
        if op in (Op.ECALL, Op.EBREAK, Op.FENCE_I):
            return ()
        if op is Op.FENCE:
            return (_fence_set(self.imm >> 4), _fence_set(self.imm))
        if op in CSR_OPS:
            csr = CSR_NAMES.get(self.imm, hex(self.imm))
            src = self.rs1 if op.value.endswith("i") else r[self.rs1]
            return (r[self.rd], csr, src)
        if op in LR_OPS:
            return (r[self.rd], f"({r[self.rs1]})")
        if op in SC_OPS or op in AMO_OPS:
            return (r[self.rd], r[self.rs2], f"({r[self.rs1]})")
        if self.rs2 is None:
            return (r[self.rd], r[self.rs1], self.imm)
        return (r[self.rd], r[self.rs1], r[self.rs2])

    def mnemonic(self) -> str:
        suffix = ".aqrl" if self.aq and self.rl else (".aq" if self.aq else "") + (".rl" if self.rl else "")
        return self.op.value + suffix

    def __str__(self) -> str:
        ops = ", ".join(str(o) for o in self.operands())
        return f"{self.mnemonic()} {ops}".rstrip()


def _fence_set(bits: int) -> str:
    return "".join(c for c, b in zip("iorw", (8, 4, 2, 1)) if bits & b) or "0"


class RegisterFile:
    """Integer registers x0..x31 plus pc; x0 is hard-wired to zero."""

    __slots__ = ("x", "pc")

    def __init__(self, pc: int = 0):
        self.x = [0] * 32
        self.pc = pc

    def __getitem__(self, i: int) -> int:
        return self.x[i]

    def __setitem__(self, i: int, value: int) -> None:
        if i:
            self.x[i] = value & MASK64

    def snapshot(self) -> tuple:
        return (*self.x, self.pc)

    def copy(self) -> "RegisterFile":
        other = RegisterFile(self.pc)
        other.x = list(self.x)
        return other


def sext(value: int, bits: int) -> int:
    """Sign-extend the low ``bits`` of value to a Python int."""
    value &= (1 << bits) - 1
    return value - (1 << bits) if value >> (bits - 1) else value


def to_signed(value: int) -> int:
    return value - (1 << 64) if value >> 63 else value


# -- encoders (shared with the assembler and compressed expansion) --------------------

def enc_r(opcode: int, rd: int, f3: int, rs1: int, rs2: int, f7: int) -> int:
    return (f7 << 25) | (rs2 << 20) | (rs1 << 15) | (f3 << 12) | (rd << 7) | opcode


def enc_i(opcode: int, rd: int, f3: int, rs1: int, imm: int) -> int:
    return ((imm & 0xFFF) << 20) | (rs1 << 15) | (f3 << 12) | (rd << 7) | opcode


def enc_s(opcode: int, f3: int, rs1: int, rs2: int, imm: int) -> int:
    imm &= 0xFFF
    return ((imm >> 5) << 25) | (rs2 << 20) | (rs1 << 15) | (f3 << 12) | ((imm & 0x1F) << 7) | opcode


def enc_b(opcode: int, f3: int, rs1: int, rs2: int, imm: int) -> int:
    imm &= 0x1FFF
    return (((imm >> 12) & 1) << 31 | ((imm >> 5) & 0x3F) << 25 | rs2 << 20 | rs1 << 15
            | f3 << 12 | ((imm >> 1) & 0xF) << 8 | ((imm >> 11) & 1) << 7 | opcode)


def enc_u(opcode: int, rd: int, imm20: int) -> int:
    return ((imm20 & 0xFFFFF) << 12) | (rd << 7) | opcode


def enc_j(opcode: int, rd: int, imm: int) -> int:
    imm &= 0x1FFFFF
    return (((imm >> 20) & 1) << 31 | ((imm >> 1) & 0x3FF) << 21 | ((imm >> 11) & 1) << 20
            | ((imm >> 12) & 0xFF) << 12 | rd << 7 | opcode)


# -- decode tables ---------------------------------------------------------------------

_BRANCH_F3 = {0: Op.BEQ, 1: Op.BNE, 4: Op.BLT, 5: Op.BGE, 6: Op.BLTU, 7: Op.BGEU}
_LOAD_F3 = {0: Op.LB, 1: Op.LH, 2: Op.LW, 3: Op.LD, 4: Op.LBU, 5: Op.LHU, 6: Op.LWU}
_STORE_F3 = {0: Op.SB, 1: Op.SH, 2: Op.SW, 3: Op.SD}
_OPIMM_F3 = {0: Op.ADDI, 2: Op.SLTI, 3: Op.SLTIU, 4: Op.XORI, 6: Op.ORI, 7: Op.ANDI}
_OP_F7F3 = {
    (0x00, 0): Op.ADD, (0x20, 0): Op.SUB, (0x00, 1): Op.SLL, (0x00, 2): Op.SLT,
    (0x00, 3): Op.SLTU, (0x00, 4): Op.XOR, (0x00, 5): Op.SRL, (0x20, 5): Op.SRA,
    (0x00, 6): Op.OR, (0x00, 7): Op.AND,
    (0x01, 0): Op.MUL, (0x01, 1): Op.MULH, (0x01, 2): Op.MULHSU, (0x01, 3): Op.MULHU,
    (0x01, 4): Op.DIV, (0x01, 5): Op.DIVU, (0x01, 6): Op.REM, (0x01, 7): Op.REMU,
}
_OP32_F7F3 = {
    (0x00, 0): Op.ADDW, (0x20, 0): Op.SUBW, (0x00, 1): Op.SLLW, (0x00, 5): Op.SRLW,
    (0x20, 5): Op.SRAW, (0x01, 0): Op.MULW, (0x01, 4): Op.DIVW, (0x01, 5): Op.DIVUW,
    (0x01, 6): Op.REMW, (0x01, 7): Op.REMUW,
}
_CSR_F3 = {1: Op.CSRRW, 2: Op.CSRRS, 3: Op.CSRRC, 5: Op.CSRRWI, 6: Op.CSRRSI, 7: Op.CSRRCI}
_AMO_F5 = {
    0x02: "lr", 0x03: "sc", 0x01: "amoswap", 0x00: "amoadd", 0x04: "amoxor",
    0x0C: "amoand", 0x08: "amoor", 0x10: "amomin", 0x14: "amomax",
    0x18: "amominu", 0x1C: "amomaxu",
}
_FP_OPCODES = {0x07, 0x27, 0x43, 0x47, 0x4B, 0x4F, 0x53}


def decode(data: bytes, address: int = 0) -> DecodedInstruction:
    """Decode one instruction from the start of ``data``.

    Raises :class:`TruncatedInstruction` when fewer bytes are present than the
    encoding needs and :class:`UnknownInstruction` for reserved or unsupported
    encodings (including every F/D opcode).
    """
    if len(data) < 2:
        raise TruncatedInstruction(address, len(data), 2)
    low = data[0] | (data[1] << 8)
    if low & 3 != 3:
        expanded = expand_compressed(low, address)
        ins = _decode32(expanded, address)
        return _relength(ins, low, 2)
    if len(data) < 4:
        raise TruncatedInstruction(address, len(data), 4)
    word = int.from_bytes(data[:4], "little")
    return _decode32(word, address)


def _relength(ins: DecodedInstruction, raw: int, length: int) -> DecodedInstruction:
    d = {f: getattr(ins, f) for f in DecodedInstruction.__dataclass_fields__}
    d["raw"] = raw
    d["length"] = length
    return DecodedInstruction(**d)


def _decode32(w: int, address: int) -> DecodedInstruction:
    if w & 0x1C == 0x1C:
        raise UnknownInstruction(w, address, "48-bit or longer encoding")
    opcode = w & 0x7F
    rd = (w >> 7) & 0x1F
    f3 = (w >> 12) & 7
    rs1 = (w >> 15) & 0x1F
    rs2 = (w >> 20) & 0x1F
    f7 = w >> 25
    imm_i = sext(w >> 20, 12)

    def unknown(reason="unsupported encoding"):
        return UnknownInstruction(w, address, reason)

    def mk(op, **kw):
        return DecodedInstruction(address=address, raw=w, length=4, op=op, **kw)

    if opcode == 0x37:
        return mk(Op.LUI, rd=rd, imm=sext(w & 0xFFFFF000, 32))
    if opcode == 0x17:
        return mk(Op.AUIPC, rd=rd, imm=sext(w & 0xFFFFF000, 32))
    if opcode == 0x6F:
        imm = ((w >> 31) << 20) | (((w >> 12) & 0xFF) << 12) | (((w >> 20) & 1) << 11) | (((w >> 21) & 0x3FF) << 1)
        return mk(Op.JAL, rd=rd, imm=sext(imm, 21), is_direct_jump=True)
    if opcode == 0x67:
        if f3 != 0:
            raise unknown()
        return mk(Op.JALR, rd=rd, rs1=rs1, imm=imm_i, is_indirect_jump=True)
    if opcode == 0x63:
        op = _BRANCH_F3.get(f3)
        if op is None:
            raise unknown()
        imm = ((w >> 31) << 12) | (((w >> 7) & 1) << 11) | (((w >> 25) & 0x3F) << 5) | (((w >> 8) & 0xF) << 1)
        return mk(op, rs1=rs1, rs2=rs2, imm=sext(imm, 13), is_conditional_branch=True)
    if opcode == 0x03:
        op = _LOAD_F3.get(f3)
        if op is None:
            raise unknown()
        return mk(op, rd=rd, rs1=rs1, imm=imm_i, is_load=True, access_width=LOADS[op])
    if opcode == 0x23:
        op = _STORE_F3.get(f3)
        if op is None:
            raise unknown()
        imm = sext(((w >> 25) << 5) | ((w >> 7) & 0x1F), 12)
        return mk(op, rs1=rs1, rs2=rs2, imm=imm, is_store=True, access_width=STORES[op])
    if opcode == 0x13:
        if f3 == 1:
            if w >> 26:
                raise unknown()
            return mk(Op.SLLI, rd=rd, rs1=rs1, imm=(w >> 20) & 0x3F)
        if f3 == 5:
            top = w >> 26
            if top not in (0x00, 0x10):
                raise unknown()
            return mk(Op.SRAI if top else Op.SRLI, rd=rd, rs1=rs1, imm=(w >> 20) & 0x3F)
        return mk(_OPIMM_F3[f3], rd=rd, rs1=rs1, imm=imm_i)
    if opcode == 0x1B:
        if f3 == 0:
            return mk(Op.ADDIW, rd=rd, rs1=rs1, imm=imm_i)
        if f3 == 1 and f7 == 0:
            return mk(Op.SLLIW, rd=rd, rs1=rs1, imm=rs2)
        if f3 == 5 and f7 in (0x00, 0x20):
            return mk(Op.SRAIW if f7 else Op.SRLIW, rd=rd, rs1=rs1, imm=rs2)
        raise unknown()
    if opcode == 0x33:
        op = _OP_F7F3.get((f7, f3))
        if op is None:
            raise unknown()
        return mk(op, rd=rd, rs1=rs1, rs2=rs2)
    if opcode == 0x3B:
        op = _OP32_F7F3.get((f7, f3))
        if op is None:
            raise unknown()
        return mk(op, rd=rd, rs1=rs1, rs2=rs2)
    if opcode == 0x0F:
        if f3 == 0:
            return mk(Op.FENCE, imm=(w >> 20) & 0xFFF)
        if f3 == 1:
            return mk(Op.FENCE_I)
        raise unknown()
    if opcode == 0x73:
        if f3 == 0:
            if rd or rs1:
                raise unknown("privileged instruction")
            if w >> 20 == 0:
                return mk(Op.ECALL, is_system=True)
            if w >> 20 == 1:
                return mk(Op.EBREAK, is_system=True)
            raise unknown("privileged instruction")
        op = _CSR_F3.get(f3)
        if op is None:
            raise unknown()
        return mk(op, rd=rd, rs1=rs1, imm=w >> 20)
    if opcode == 0x2F:
        if f3 not in (2, 3):
            raise unknown()
        name = _AMO_F5.get(w >> 27)
        if name is None:
            raise unknown()
        width = 4 if f3 == 2 else 8
        op = Op(f"{name}.{'w' if width == 4 else 'd'}")
        aq, rl = bool((w >> 26) & 1), bool((w >> 25) & 1)
        if name == "lr":
            if rs2:
                raise unknown()
            return mk(op, rd=rd, rs1=rs1, aq=aq, rl=rl, is_load=True, is_lr=True, access_width=width)
        if name == "sc":
            return mk(op, rd=rd, rs1=rs1, rs2=rs2, aq=aq, rl=rl, is_store=True, is_sc=True,
                      access_width=width)
        return mk(op, rd=rd, rs1=rs1, rs2=rs2, aq=aq, rl=rl, is_amo=True, access_width=width)
    if opcode in _FP_OPCODES:
        raise unknown("floating-point extension not supported")
    raise unknown()


def expand_compressed(raw: int, address: int = 0) -> int:
    """Return the 32-bit encoding equivalent to the 16-bit RVC instruction ``raw``."""
    raw &= 0xFFFF
    if raw & 3 == 3:
        raise ValueError(f"{raw:#06x} is not a compressed encoding")

    def bit(i):
        return (raw >> i) & 1

    def bits(hi, lo):
        return (raw >> lo) & ((1 << (hi - lo + 1)) - 1)

    def unknown(reason="reserved compressed encoding"):
        return UnknownInstruction(raw, address, reason)

    quadrant = raw & 3
    f3 = raw >> 13
    rdp = bits(4, 2) + 8
    rs1p = bits(9, 7) + 8
    rd = bits(11, 7)
    rs2 = bits(6, 2)
    imm6 = sext((bit(12) << 5) | bits(6, 2), 6)

    if quadrant == 0:
        if f3 == 0:
            nzuimm = (bits(12, 11) << 4) | (bits(10, 7) << 6) | (bit(6) << 2) | (bit(5) << 3)
            if nzuimm == 0:
                raise unknown("illegal instruction" if raw == 0 else "reserved compressed encoding")
            return enc_i(0x13, rdp, 0, REG_SP, nzuimm)
        if f3 in (1, 5):
            raise unknown("floating-point extension not supported")
        uimm_w = (bits(12, 10) << 3) | (bit(6) << 2) | (bit(5) << 6)
        uimm_d = (bits(12, 10) << 3) | (bits(6, 5) << 6)
        if f3 == 2:
            return enc_i(0x03, rdp, 2, rs1p, uimm_w)
        if f3 == 3:
            return enc_i(0x03, rdp, 3, rs1p, uimm_d)
        if f3 == 6:
            return enc_s(0x23, 2, rs1p, rdp, uimm_w)
        if f3 == 7:
            return enc_s(0x23, 3, rs1p, rdp, uimm_d)
        raise unknown()

    if quadrant == 1:
        if f3 == 0:
            return enc_i(0x13, rd, 0, rd, imm6)
        if f3 == 1:
            if rd == 0:
                raise unknown()
            return enc_i(0x1B, rd, 0, rd, imm6)
        if f3 == 2:
            return enc_i(0x13, rd, 0, 0, imm6)
        if f3 == 3:
            if rd == REG_SP:
                nz = (bit(12) << 9) | (bit(6) << 4) | (bit(5) << 6) | (bits(4, 3) << 7) | (bit(2) << 5)
                if nz == 0:
                    raise unknown()
                return enc_i(0x13, REG_SP, 0, REG_SP, sext(nz, 10))
            if imm6 == 0:
                raise unknown()
            return enc_u(0x37, rd, imm6 & 0xFFFFF)
        if f3 == 4:
            f2 = bits(11, 10)
            shamt = (bit(12) << 5) | bits(6, 2)
            if f2 == 0:
                return enc_i(0x13, rs1p, 5, rs1p, shamt)
            if f2 == 1:
                return enc_i(0x13, rs1p, 5, rs1p, 0x400 | shamt)
            if f2 == 2:
                return enc_i(0x13, rs1p, 7, rs1p, imm6)
            sel = bits(6, 5)
            rs2p = rdp
            if bit(12) == 0:
                f3r, f7 = ((0, 0x20), (4, 0), (6, 0), (7, 0))[sel]
                return enc_r(0x33, rs1p, f3r, rs1p, rs2p, f7)
            if sel == 0:
                return enc_r(0x3B, rs1p, 0, rs1p, rs2p, 0x20)
            if sel == 1:
                return enc_r(0x3B, rs1p, 0, rs1p, rs2p, 0)
            raise unknown()
        if f3 == 5:
            off = ((bit(12) << 11) | (bit(11) << 4) | (bits(10, 9) << 8) | (bit(8) << 10)
                   | (bit(7) << 6) | (bit(6) << 7) | (bits(5, 3) << 1) | (bit(2) << 5))
            return enc_j(0x6F, 0, sext(off, 12))
        off = ((bit(12) << 8) | (bits(11, 10) << 3) | (bits(6, 5) << 6) | (bits(4, 3) << 1) | (bit(2) << 5))
        return enc_b(0x63, 0 if f3 == 6 else 1, rs1p, 0, sext(off, 9))

    # quadrant 2
    if f3 == 0:
        return enc_i(0x13, rd, 1, rd, (bit(12) << 5) | bits(6, 2))
    if f3 in (1, 5):
        raise unknown("floating-point extension not supported")
    if f3 == 2:
        if rd == 0:
            raise unknown()
        return enc_i(0x03, rd, 2, REG_SP, (bit(12) << 5) | (bits(6, 4) << 2) | (bits(3, 2) << 6))
    if f3 == 3:
        if rd == 0:
            raise unknown()
        return enc_i(0x03, rd, 3, REG_SP, (bit(12) << 5) | (bits(6, 5) << 3) | (bits(4, 2) << 6))
    if f3 == 4:
        if bit(12) == 0:
            if rs2 == 0:
                if rd == 0:
                    raise unknown()
                return enc_i(0x67, 0, 0, rd, 0)
            return enc_r(0x33, rd, 0, 0, rs2, 0)
        if rs2 == 0:
            if rd == 0:
                return 0x00100073
            return enc_i(0x67, REG_RA, 0, rd, 0)
        return enc_r(0x33, rd, 0, rd, rs2, 0)
    if f3 == 6:
        return enc_s(0x23, 2, REG_SP, rs2, (bits(12, 9) << 2) | (bits(8, 7) << 6))
    return enc_s(0x23, 3, REG_SP, rs2, (bits(12, 10) << 3) | (bits(9, 7) << 6))


def instruction_length(first_halfword: int) -> int:
    return 4 if first_halfword & 3 == 3 else 2

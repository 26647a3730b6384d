import io

import pytest

from helpers import virtual_testcases
from rvleak.engine import Engine
from rvleak.guestkit.assembler import assemble_program
from rvleak.guestkit.fixtures import CATALOG, build_fixture, runtime_source
from rvleak.isa import decode
from rvleak.loader import build_process
from rvleak.tracer import (
    PREFIX_NAME, BranchKind, DirectorySinks, MemorySinks, MissingTargetSymbol, NestedTargetCall,
    SinkWriteFailure, TraceConfig, TraceSession, UnbalancedTargetExit, trace_engine,
)
from rvleak.traces import (
    RawAlloc, RawBranch, RawFree, RawImageMap, RawMemAccess, RawRealloc, RawStackAlloc, parse_raw,
)

KEYS = [bytes([i, 3 * i + 1, 0xA0 ^ i]) for i in range(16)]
LIB_BASE = 0x200000


def guest(target_source: str):
    prog = assemble_program(runtime_source() + "\n" + target_source)
    return prog, prog.to_elf()


def engine_for(elf, secrets):
    paths, files = virtual_testcases(secrets)
    return Engine(build_process(elf, "guest", ["guest", *paths]), files=files)


def fixture_trace(name, secrets=KEYS[:4], config=None, **kw):
    fx = build_fixture(name)
    eng = engine_for(fx.elf, secrets)
    sinks = MemorySinks()
    session, status = trace_engine(eng, config or TraceConfig(), sinks, **kw)
    return fx, eng, session, status, sinks.files


def records(files, name, kinds=(RawBranch, RawMemAccess)):
    return [r for r in parse_raw(files[name]) if isinstance(r, kinds)]


PROBE = """
.text
.globl microwalk_target
microwalk_target:
    addi sp, sp, -16
    sd ra, 8(sp)
    call load_secret
    la t0, secret_buf
.globl probe_beq
probe_beq:
    beq zero, sp, never
.globl probe_lw
probe_lw:
    lw t1, 0(t0)
.globl probe_sw
probe_sw:
    sw t1, 4(t0)
    ld ra, 8(sp)
    addi sp, sp, 16
.globl probe_ret
probe_ret:
    ret
never:
    j never
"""


# -- sessions and boundaries ------------------------------------------------------------

def test_sixteen_testcases_give_seventeen_files():
    _, _, session, status, files = fixture_trace("ct_xor", KEYS)
    assert status.exit_code == 0
    assert sorted(files) == sorted([PREFIX_NAME] + [f"t{i}.trace" for i in range(16)])
    assert session.trace_names() == [PREFIX_NAME] + [f"t{i}.trace" for i in range(16)]
    assert session.current_testcase == 15


def test_directory_sinks(tmp_path):
    fx = build_fixture("leaky_sbox")
    eng = engine_for(fx.elf, KEYS[:3])
    sinks = DirectorySinks(tmp_path / "out")
    trace_engine(eng, TraceConfig(), sinks)
    assert sorted(p.name for p in (tmp_path / "out").iterdir()) == ["prefix.trace", "t0.trace",
                                                                    "t1.trace", "t2.trace"]
    mem = fixture_trace("leaky_sbox", KEYS[:3])[4]
    assert all((tmp_path / "out" / n).read_bytes() == mem[n] for n in mem)


def test_hook_at_target_address():
    fx = build_fixture("ct_xor")
    eng = engine_for(fx.elf, KEYS[:1])
    session = TraceSession.attach(eng)
    assert session.target_addr == fx.program.labels["microwalk_target"]
    assert session.target_addr in eng.hooks.functions
    assert set(session.allocator_addrs) == {"malloc", "calloc", "realloc", "free"}


def test_missing_target_symbol():
    fx = build_fixture("ct_xor")
    with pytest.raises(MissingTargetSymbol) as ei:
        TraceSession.attach(engine_for(fx.elf, KEYS[:1]), TraceConfig(target_symbol="no_such_fn"))
    assert ei.value.name == "no_such_fn"


def test_custom_target_symbol():
    _, elf = guest(PROBE)
    eng = engine_for(elf, KEYS[:2])
    session, _ = trace_engine(eng, TraceConfig(target_symbol="load_secret"), MemorySinks())
    assert len(session.testcase_sinks) == 2


def test_nested_target_call():
    _, elf = guest("""
.text
.globl microwalk_target
microwalk_target:
    addi sp, sp, -16
    sd ra, 8(sp)
    la t0, depth
    ld t1, 0(t0)
    bnez t1, nt_out
    li t1, 1
    sd t1, 0(t0)
    call microwalk_target
nt_out:
    ld ra, 8(sp)
    addi sp, sp, 16
    ret
.data
.align 3
depth: .dword 0
""")
    with pytest.raises(NestedTargetCall):
        trace_engine(engine_for(elf, KEYS[:1]), TraceConfig(), MemorySinks())


def test_exit_without_entry():
    fx = build_fixture("ct_xor")
    session = TraceSession.attach(engine_for(fx.elf, KEYS[:1]))
    with pytest.raises(UnbalancedTargetExit):
        session.on_target_exit()
    assert issubclass(UnbalancedTargetExit, NestedTargetCall)


def test_record_without_sink():
    fx = build_fixture("ct_xor")
    session = TraceSession.attach(engine_for(fx.elf, KEYS[:1]))
    session.record_branch(0x10000, None, False, BranchKind.CONDITIONAL)  # prefix is active
    session.on_target_entry()
    session.on_target_exit()
    with pytest.raises(SinkWriteFailure):
        session.record_mem_access(0x10000, 0x20000, False)


class _BrokenSinks:
    def open(self, name):
        s = io.BytesIO()
        s.close()
        return s

    def commit(self, name, stream):
        pass


def test_sink_write_failure():
    fx = build_fixture("ct_xor")
    with pytest.raises(SinkWriteFailure):
        TraceSession.attach(engine_for(fx.elf, KEYS[:1]), sinks=_BrokenSinks())


def test_directory_sink_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    fx = build_fixture("ct_xor")
    with pytest.raises(SinkWriteFailure):
        TraceSession.attach(engine_for(fx.elf, KEYS[:1]), sinks=DirectorySinks(blocker / "sub"))


# -- record contents -------------------------------------------------------------------

def test_probe_records():
    prog, elf = guest(PROBE)
    eng = engine_for(elf, [b"\x01\x02\x03\x04\x05\x06\x07\x08"])
    sinks = MemorySinks()
    trace_engine(eng, TraceConfig(), sinks)
    L = prog.labels
    recs = records(sinks.files, "t0.trace")
    by_source = {r.source: r for r in recs if isinstance(r, RawBranch)}
    assert by_source[L["probe_beq"]] == RawBranch(L["probe_beq"], None, False, BranchKind.CONDITIONAL)
    ret = by_source[L["probe_ret"]]
    assert ret.kind is BranchKind.RETURN and ret.taken and ret.target == _call_site(prog) + 4
    buf = L["secret_buf"]
    mems = {r.instr: r for r in recs if isinstance(r, RawMemAccess)}
    assert mems[L["probe_lw"]] == RawMemAccess(L["probe_lw"], buf, False)
    assert mems[L["probe_sw"]] == RawMemAccess(L["probe_sw"], buf + 4, True)
    call = [r for r in recs if isinstance(r, RawBranch) and r.kind is BranchKind.CALL]
    assert call[0].target == L["load_secret"]


def _call_site(prog) -> int:
    """Address of the runtime's ``call microwalk_target``."""
    target = prog.labels["microwalk_target"]
    sites = [e.address for e in prog.listing
             if e.data[0] & 0x7F == 0x6F and decode(e.data, e.address).branch_target == target]
    assert len(sites) == 1
    return sites[0]


def test_call_into_target_goes_to_preceding_trace():
    prog, elf = guest(PROBE)
    eng = engine_for(elf, KEYS[:2])
    sinks = MemorySinks()
    session, _ = trace_engine(eng, TraceConfig(), sinks)
    site = _call_site(prog)
    # the call executes before the entry event: the first lands in the prefix, later ones
    # fall between test cases and are dropped
    assert [r.source for r in records(sinks.files, PREFIX_NAME, (RawBranch,))][-1] == site
    assert all(r.source != site for n in ("t0.trace", "t1.trace") for r in records(sinks.files, n, (RawBranch,)))
    assert session.dropped >= 1


def test_prefix_metadata():
    fx, eng, _, _, files = fixture_trace("ct_xor")
    prefix = parse_raw(files[PREFIX_NAME])
    stacks = [r for r in prefix if isinstance(r, RawStackAlloc)]
    assert stacks == [RawStackAlloc(eng.memory.stack_base, eng.memory.stack_base + eng.memory.stack_size)]
    img = eng.images[0]
    assert [r for r in prefix if isinstance(r, RawImageMap)] == [RawImageMap(0, img.start, img.end, "guest")]
    for i in range(4):
        assert not [r for r in parse_raw(files[f"t{i}.trace"]) if isinstance(r, (RawStackAlloc, RawImageMap))]


def test_allocation_records():
    fx, eng, session, _, files = fixture_trace("alloc_roundtrip", KEYS[:2])
    prefix_allocs = records(files, PREFIX_NAME, (RawAlloc,))
    assert len(prefix_allocs) == 1 and prefix_allocs[0].end - prefix_allocs[0].start == 64
    for i in range(2):
        evs = records(files, f"t{i}.trace", (RawAlloc, RawRealloc, RawFree))
        m, r, c, f1, f2 = evs
        assert isinstance(m, RawAlloc) and m.end - m.start == 32
        assert r == RawRealloc(m.start, m.start + 0x40, m.start + 0x80)
        assert isinstance(c, RawAlloc) and c.end - c.start == 32 and c.start == r.end
        assert (f1, f2) == (RawFree(c.start), RawFree(r.start))
        assert m.start % 64 == 0
    assert session.allocation_counter == 1 + 2 * 3


def test_allocator_internals_hidden_by_default():
    fx, _, _, _, plain = fixture_trace("alloc_roundtrip", KEYS[:1])
    _, _, _, _, full = fixture_trace("alloc_roundtrip", KEYS[:1],
                                     TraceConfig(trace_allocator_internals=True))
    malloc = fx.program.labels["malloc"]
    assert len(records(full, "t0.trace")) > len(records(plain, "t0.trace"))
    calls = [r for r in records(plain, "t0.trace") if isinstance(r, RawBranch) and r.target == malloc]
    rets = [r for r in records(plain, "t0.trace") if isinstance(r, RawBranch) and r.kind is BranchKind.RETURN]
    assert calls and len(rets) >= len(calls) + 1  # allocator returns kept, so call/return stay paired


# -- filters and completeness ------------------------------------------------------------

LIB = """
.text
.globl lib_fn
lib_fn:
    la t0, lib_data
    ld t1, 0(t0)
    beqz t1, lib_out
lib_out:
    ret
.data
.align 3
lib_data: .dword 0
"""

CALLS_LIB = f"""
.text
.globl microwalk_target
microwalk_target:
    addi sp, sp, -16
    sd ra, 8(sp)
    li t0, {LIB_BASE}
    jalr t0
    ld ra, 8(sp)
    addi sp, sp, 16
    ret
"""


def _two_image_trace(traced):
    _, elf = guest(CALLS_LIB)
    lib = assemble_program(LIB, text_base=LIB_BASE, entry=None).to_elf()
    eng = engine_for(elf, KEYS[:2])
    sinks = MemorySinks()
    session = TraceSession.attach(eng, TraceConfig(traced_images=traced), sinks)
    img = eng.load_image(lib, "libx")
    eng.run()
    session.finish()
    return img, sinks.files


def test_untraced_image_produces_no_records():
    img, files = _two_image_trace(frozenset({0}))
    for name in ("t0.trace", "t1.trace"):
        recs = records(files, name)
        assert recs and not [r for r in recs if img.contains(getattr(r, "source", getattr(r, "instr", 0)))]
    # the mapping itself is still recorded, in the prefix
    assert RawImageMap(1, img.start, img.end, "libx") in parse_raw(files[PREFIX_NAME])


def test_traced_second_image():
    img, files = _two_image_trace(frozenset({0, 1}))
    recs = records(files, "t0.trace")
    lib_recs = [r for r in recs if img.contains(getattr(r, "source", getattr(r, "instr", 0)))]
    assert len(lib_recs) == 3  # ld, beqz, ret


def test_no_traced_images():
    _, _, session, _, files = fixture_trace("leaky_sbox", config=TraceConfig(traced_images=frozenset()))
    assert all(records(files, n) == [] for n in files)
    assert session.observer_fires == 0


@pytest.mark.parametrize("name", sorted(CATALOG))
def test_completeness(name):
    fx, eng, session, _, files = fixture_trace(name, config=TraceConfig(trace_allocator_internals=True))
    recorded = sum(len(records(files, n)) for n in files)
    assert recorded == session.observer_fires - session.dropped
    # independent count: flagged instructions times block executions
    flagged = 0
    for block in eng.cache.blocks.values():
        if eng.image_of(block.start).index == 0:
            n = sum(1 for i in block.instructions
                    if i.is_conditional_branch or i.is_direct_jump or i.is_indirect_jump or i.is_memory_access)
            flagged += n * block.exec_count
    assert session.observer_fires == flagged


def test_instrumentation_installed_once_per_block():
    fx = build_fixture("ct_xor")
    eng = engine_for(fx.elf, KEYS)
    scans = []
    eng.hooks.on_block_scan(lambda b: scans.append(b.start))
    session = TraceSession.attach(eng, TraceConfig(), MemorySinks())
    decoded = []
    eng.hooks.on_function(session.target_addr, exit=lambda a, r: decoded.append(eng.stats.blocks_decoded))
    eng.run()
    session.finish()
    assert len(scans) == len(set(scans)) == eng.stats.blocks_decoded
    assert decoded[0] == decoded[-1] and len(decoded) == 16


# -- determinism and prefix separation ----------------------------------------------------

@pytest.mark.parametrize("name", sorted(CATALOG))
def test_trace_determinism(name):
    a = fixture_trace(name)[4]
    b = fixture_trace(name)[4]
    assert a == b


def test_prefix_independent_of_testcase_contents():
    a = fixture_trace("leaky_sbox", [KEYS[0], KEYS[1]])[4]
    b = fixture_trace("leaky_sbox", [KEYS[5], KEYS[9]])[4]
    assert a[PREFIX_NAME] == b[PREFIX_NAME]


def test_testcase_trace_depends_only_on_its_input():
    a = fixture_trace("leaky_sbox", [KEYS[1], KEYS[2]])[4]
    b = fixture_trace("leaky_sbox", [KEYS[3], KEYS[1]])[4]
    assert a["t0.trace"] == b["t1.trace"]

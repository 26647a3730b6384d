"""End-to-end acceptance checks, one ``criterion`` mark per numbered item.

Run ``pytest tests/test_acceptance.py`` (or execute this file); the terminal
summary prints one PASS/FAIL line per criterion.
"""
import json
import struct
import sys
import time
from pathlib import Path

import pytest

from helpers import engine_state, fixture_process, ref_state, virtual_testcases
from oracles import CLANG, LLD, _sections, capstone_canonical, clang_link, naive_leaks, ours_canonical
from reference_interp import run_reference
from rvleak.analysis import LeakKind
from rvleak.cli import generate_testcases, load_canonical, main
from rvleak.engine import Engine, ObserverKind
from rvleak.guestkit.assembler import BranchOutOfRange, assemble_program
from rvleak.guestkit.fixtures import CATALOG, build_fixture, fixture_source
from rvleak.isa import decode, expand_compressed
from rvleak.loader import build_process
from rvleak.tracer import MemorySinks, TraceConfig, trace_engine
from rvleak.traces import CodeRef

criterion = pytest.mark.criterion


def cli(*argv):
    return main([str(a) for a in argv])


def run_fixture(out, name, count=16, seed=1, *extra):
    return cli("run", "--guest", f"fixture:{name}", "--generate", count, "--seed", seed,
               "--format", "text,json", "--out", out, *extra)


def report(out):
    return json.loads((Path(out) / "report.json").read_text())


def label_ref(name, label):
    fx = build_fixture(name)
    proc = build_process(fx.elf, name)
    return CodeRef(0, fx.program.labels[label] - proc.images[0].start)


def check_detection(tmp_path, name, kind, label):
    code = run_fixture(tmp_path, name)
    doc = report(tmp_path)
    m = build_fixture(name).manifest
    assert code == 10
    assert (doc["totalLeakages"], doc["uniqueLeakages"]) == (m.total, m.unique)
    assert [f["kind"] for f in doc["findings"]] == [kind.value] * m.unique
    ref = label_ref(name, label)
    assert {(f["image"], f["offset"]) for f in doc["findings"]} == {(ref.image, ref.offset)}
    assert {f["symbol"] for f in doc["findings"]} == {label}
    # the brute-force differ sees the same instruction and the same count
    _, traces, _ = load_canonical(Path(tmp_path))
    pairs, instrs = naive_leaks(traces)
    assert instrs == {ref} and len(pairs) == m.total
    return doc


# -- 1 -----------------------------------------------------------------------------------

@criterion(1, "constant-time negative control (ct_xor, 16 cases, < 10 s)")
def test_c1_constant_time(tmp_path):
    t0 = time.perf_counter()
    code = run_fixture(tmp_path, "ct_xor")
    elapsed = time.perf_counter() - t0
    doc = report(tmp_path)
    assert code == 0 and doc["testcaseCount"] == 16
    assert (doc["totalLeakages"], doc["uniqueLeakages"]) == (0, 0)
    assert elapsed < 10.0, elapsed


# -- 2, 3, 4 ---------------------------------------------------------------------------------

@criterion(2, "memory-access leak in leaky_sbox")
def test_c2_sbox(tmp_path):
    keys = generate_testcases(16, 16, 1)
    assert len(set(keys)) == 16  # 16 distinct keys
    check_detection(tmp_path, "leaky_sbox", LeakKind.MEMORY_ACCESS, "sbox_lookup")


@criterion(3, "control-flow leak in leaky_branch")
def test_c3_branch(tmp_path):
    check_detection(tmp_path, "leaky_branch", LeakKind.CONTROL_FLOW, "secret_branch")


@criterion(4, "total vs unique (two_context_leak: 2 / 1)")
def test_c4_two_contexts(tmp_path):
    doc = check_detection(tmp_path, "two_context_leak", LeakKind.MEMORY_ACCESS, "helper_lookup")
    assert (doc["totalLeakages"], doc["uniqueLeakages"]) == (2, 1)
    (f,) = doc["findings"]
    assert len(f["contexts"]) == 2 and len({json.dumps(c["callSites"]) for c in f["contexts"]}) == 2


# -- 5 -----------------------------------------------------------------------------------

ATOMIC_SECRETS = [bytes(range(1, 13)), b"\x07" * 5]


@criterion(5, "atomic sequences: progress, transparency, ABA")
def test_c5_atomic_progress_and_state():
    fx, proc, files = fixture_process("atomic_loop", ATOMIC_SECRETS)
    plain = Engine(proc, files=files)
    plain_state = engine_state(plain, plain.run())
    fx, proc, files = fixture_process("atomic_loop", ATOMIC_SECRETS)
    traced = Engine(proc, files=files)
    _, status = trace_engine(traced, TraceConfig(), MemorySinks())
    attempts = fx.program.labels["attempts"]
    untraced_iterations = plain.memory.load(attempts, 8)
    assert untraced_iterations == sum(map(len, ATOMIC_SECRETS))
    assert status.exit_code == 0
    assert traced.memory.load(attempts, 8) <= 10 * untraced_iterations
    assert engine_state(traced, status) == plain_state


@criterion(5, "atomic sequences: progress, transparency, ABA")
def test_c5_aba_store_then_restore_succeeds():
    fx, proc, files = fixture_process("atomic_loop", [b"\1\1\1\1"])
    eng = Engine(proc, files=files)
    lock, retry = fx.program.labels["lock_word"], fx.program.labels["retry"]
    reservation_alive = []

    def scan(block):
        for i, ins in enumerate(block.instructions):
            if ins.address == retry + 4:  # between LR and SC
                def aba(ins, taken, target):
                    old = eng.memory.load(lock, 4)
                    eng.memory.store(lock, 4, old + 1)
                    eng.memory.store(lock, 4, old)
                    reservation_alive.append(eng.reservation.active)
                block.observe(i, ObserverKind.BRANCH, aba)

    eng.hooks.on_block_scan(scan)
    _, status = trace_engine(eng, TraceConfig(), MemorySinks())
    assert status.exit_code == 0
    # every SC succeeded on its first attempt
    assert reservation_alive == [True] * 4
    assert eng.memory.load(fx.program.labels["attempts"], 8) == 4
    assert eng.memory.load(fx.program.labels["counter"], 8) == 4


# -- 6 -----------------------------------------------------------------------------------

TRANSPARENCY_SECRETS = [b"\x00\x01\x02\x03", b"\xff\xfe\x10\x80", b"secret-key!", b"\x42"]


@criterion(6, "behavioral transparency vs untraced run and reference interpreter")
@pytest.mark.parametrize("name", sorted(CATALOG))
def test_c6_transparency(name):
    def fresh():
        _, proc, files = fixture_process(name, TRANSPARENCY_SECRETS)
        return Engine(proc, files=files)

    _, proc, files = fixture_process(name, TRANSPARENCY_SECRETS)
    ref = run_reference(proc, files)
    plain = fresh()
    plain_state = engine_state(plain, plain.run())
    traced = fresh()
    _, status = trace_engine(traced, TraceConfig(), MemorySinks())
    assert plain_state == engine_state(traced, status) == ref_state(ref)
    assert plain_state[0] == 0


# -- 7 -----------------------------------------------------------------------------------

def hot_loop_samples(linking, calls=1):
    """Counters at every back edge and at every return of the target."""
    fx, proc, files = fixture_process("hot_loop", [b"k"] * calls)
    eng = Engine(proc, files=files, linking=linking)
    hot_b = fx.program.labels["hot_b"]
    samples, exits = [], []

    def scan(block):
        if block.start == hot_b:
            def back_edge(ins, taken, target):
                s = eng.stats
                samples.append((s.blocks_decoded, s.dispatcher_entries, eng.cache.blocks[hot_b].exec_count))
            block.observe(len(block.instructions) - 1, ObserverKind.BRANCH, back_edge)

    eng.hooks.on_block_scan(scan)
    eng.hooks.on_function(fx.program.labels["microwalk_target"],
                          exit=lambda addr, ret: exits.append(eng.stats.blocks_decoded))
    assert eng.run().exit_code == 0
    return eng, samples, exits


@criterion(7, "code cache: decode once, dispatcher sublinear with linking")
def test_c7_code_cache():
    eng, samples, exits = hot_loop_samples(linking=True, calls=2)
    assert len(samples) == 2000 and len(exits) == 2
    # samples[i] is taken at the back edge of iteration i + 1
    after_first_iteration = samples[1][0]
    assert samples[999][0] == after_first_iteration  # end of the 1000-iteration loop
    # the second call, loop and tail included, decodes nothing new
    assert samples[-1][0] == samples[1000][0] == exits[0] == exits[1]
    # exec count grows linearly, the dispatcher not at all once warm
    assert [s[2] for s in samples[:1000]] == list(range(1, 1001))
    dispatcher = [s[1] for s in samples[:1000]]
    assert dispatcher[-1] - dispatcher[9] == 0
    assert dispatcher[-1] - dispatcher[0] <= 2
    # without linking the same loop goes through the dispatcher every iteration
    _, unlinked, _ = hot_loop_samples(linking=False)
    growth = unlinked[-1][1] - unlinked[0][1]
    assert growth >= 999 and dispatcher[-1] - dispatcher[0] < growth / 100
    assert eng.stats.blocks_decoded == len(eng.cache)


# -- 8 -----------------------------------------------------------------------------------

def files_under(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(Path(d).rglob("*")) if p.is_file()}


@criterion(8, "determinism of trace and analyze output")
@pytest.mark.parametrize("name", ["leaky_sbox", "two_context_leak", "alloc_roundtrip"])
def test_c8_determinism(tmp_path, name):
    for run in ("a", "b"):
        assert cli("trace", "--guest", f"fixture:{name}", "--generate", 8, "--seed", 99,
                   "--out", tmp_path / run) == 0
    a, b = files_under(tmp_path / "a"), files_under(tmp_path / "b")
    assert sorted(k for k in a if k.endswith(".trace")) == ["prefix.trace"] + [f"t{i}.trace" for i in range(8)]
    assert a == b
    for run in ("r1", "r2"):
        cli("analyze", "--traces", tmp_path / "a", "--format", "text,json", "--out", tmp_path / run)
    for rep in ("report.txt", "report.json"):
        assert (tmp_path / "r1" / rep).read_bytes() == (tmp_path / "r2" / rep).read_bytes()


# -- 9 -----------------------------------------------------------------------------------

@criterion(9, "heap-base shift leaves canonical traces and reports unchanged")
@pytest.mark.parametrize("name", ["alloc_roundtrip", "leaky_sbox", "two_context_leak"])
@pytest.mark.parametrize("shift", [0x1000, 0x7F123])
def test_c9_heap_shift(tmp_path, name, shift):
    outs = []
    for sub, extra in (("base", ()), ("shifted", ("--brk-shift", shift))):
        d = tmp_path / sub
        cli("run", "--guest", f"fixture:{name}", "--generate", 6, "--seed", 4, "--format", "text,json",
            "--out", d, *extra)
        assert cli("preprocess", "--out", d) == 0
        outs.append(d)
    base, shifted = outs
    # the raw traces really do see different heap addresses
    if name == "alloc_roundtrip":
        assert (base / "t0.trace").read_bytes() != (shifted / "t0.trace").read_bytes()
    assert files_under(base / "canonical") == files_under(shifted / "canonical")
    for rep in ("report.txt", "report.json"):
        assert (base / rep).read_bytes() == (shifted / rep).read_bytes()


# -- 10 ----------------------------------------------------------------------------------

SEMANTIC = ("op", "rd", "rs1", "rs2", "imm", "aq", "rl", "length")


def semantic(ins):
    return tuple(getattr(ins, f) for f in SEMANTIC[:-1])


@criterion(10, "decoder agrees with the reference disassembler; RVC expands equivalently")
@pytest.mark.parametrize("name", sorted(CATALOG))
def test_c10_fixture_decoding(name):
    prog = build_fixture(name).program
    assert prog.listing
    for entry in prog.listing:
        ins = decode(entry.data, entry.address)
        assert ins.length == len(entry.data)
        assert ours_canonical(ins) == capstone_canonical(entry.data, entry.address), hex(entry.address)


@criterion(10, "decoder agrees with the reference disassembler; RVC expands equivalently")
def test_c10_rvc_expansion_exhaustive():
    defined = 0
    for half in range(1 << 16):
        if half & 3 == 3:
            continue
        try:
            word = expand_compressed(half, 0x4000)
        except Exception:
            continue
        small = decode(struct.pack("<H", half), 0x4000)
        big = decode(struct.pack("<I", word), 0x4000)
        assert semantic(small) == semantic(big), hex(half)
        defined += 1
    assert defined > 35000


@criterion(10, "decoder agrees with the reference disassembler; RVC expands equivalently")
@pytest.mark.skipif(not (CLANG and LLD), reason="clang/lld not installed")
@pytest.mark.parametrize("name", sorted(CATALOG))
def test_c10_compressed_fixture_builds(tmp_path, name):
    """The fixture sources built by clang with RVC: every instruction matches
    the oracle, each compressed one matches its expansion, and the guest
    behaves exactly like the uncompressed build."""
    elf = clang_link(fixture_source(name), tmp_path / f"{name}.elf", "rv64imac").read_bytes()
    text = _sections(elf)[".text"]
    off = compressed = 0
    while off < len(text):
        ins = decode(text[off:off + 4], off)
        data = text[off:off + ins.length]
        assert ours_canonical(ins) == capstone_canonical(data, off), hex(off)
        if ins.length == 2:
            big = decode(struct.pack("<I", expand_compressed(ins.raw, off)), off)
            assert semantic(big) == semantic(ins)
            compressed += 1
        off += ins.length
    assert compressed > 50
    paths, files = virtual_testcases(TRANSPARENCY_SECRETS)
    results = []
    for image in (elf, build_fixture(name).elf):
        eng = Engine(build_process(image, name, [name, *paths]), files=files)
        status = eng.run()
        results.append((status.exit_code, bytes(eng.stdout)))
    assert results[0] == results[1]


# -- 11 ----------------------------------------------------------------------------------

def jal_program(distance):
    """``jal`` whose target lies ``distance`` bytes away (negative: backwards)."""
    pad = abs(distance) - 4
    if distance > 0:
        return f"_start:\n    jal ra, far\n    .zero {pad}\nfar:\n    ret\n"
    return f"far:\n    ret\n    .zero {pad}\n_start:\n    jal ra, far\n"


@criterion(11, "JAL displacement beyond +-1 MiB rejected")
@pytest.mark.parametrize("distance,ok", [
    ((1 << 20) - 2, True), (1 << 20, False), (2 << 20, False), (-(1 << 20), True), (-(1 << 20) - 2, False),
])
def test_c11_jal_range(distance, ok):
    src = ".text\n" + jal_program(distance)
    if ok:
        prog = assemble_program(src)
        jal = next(e for e in prog.listing if e.text.split()[0] == "jal")
        ins = decode(jal.data, jal.address)
        assert ins.branch_target == prog.labels["far"] and ins.branch_target - jal.address == distance
    else:
        with pytest.raises(BranchOutOfRange):
            assemble_program(src)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))

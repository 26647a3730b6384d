"""
Heap placement does not change canonical traces
===============================================

``alloc_roundtrip`` allocates, reallocates and frees per test case. Moving
the program break changes every raw heap address, but the canonical trace
names blocks by allocation order, so it stays the same.
"""
from rvleak.engine import Engine
from rvleak.guestkit.fixtures import build_fixture
from rvleak.loader import build_process
from rvleak.tracer import PREFIX_NAME, MemorySinks, TraceConfig, trace_engine
from rvleak.traces import MemKind, RawAlloc, parse_raw, preprocess_set, trace_equals

secrets = [b"\x01" * 8, b"\x02" * 8]
paths = ["tc/0000", "tc/0001"]


def canonical(brk_shift):
    fx = build_fixture("alloc_roundtrip")
    proc = build_process(fx.elf, "alloc_roundtrip", ["alloc_roundtrip", *paths], brk_shift=brk_shift)
    eng = Engine(proc, files=dict(zip(paths, secrets)))
    sinks = MemorySinks()
    trace_engine(eng, TraceConfig(), sinks)
    raws = [sinks.files["t0.trace"], sinks.files["t1.trace"]]
    _, traces = preprocess_set(sinks.files[PREFIX_NAME], raws, eng.images)
    return raws[0], traces[0]


raw_a, can_a = canonical(0)
raw_b, can_b = canonical(0x5000)

# %%
# The raw allocation records differ.
print([r for r in parse_raw(raw_a) if isinstance(r, RawAlloc)][:2])
print([r for r in parse_raw(raw_b) if isinstance(r, RawAlloc)][:2])
print("raw traces identical:", raw_a == raw_b)

# %%
# The canonical ones do not.
heap = [e.ref for e in can_a.entries if getattr(e, "ref", None) is not None and e.ref.kind is MemKind.HEAP]
print("first heap references:", [str(r) for r in heap[:4]])
print("canonical traces identical:", bool(trace_equals(can_a, can_b)))

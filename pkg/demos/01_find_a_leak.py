"""
Finding a secret-dependent table lookup
=======================================

Trace the ``leaky_sbox`` fixture over a handful of random keys and compare
the traces. The guest is assembled in-process, so no RISC-V toolchain is
needed.
"""
import random

from rvleak.analysis import analyze, render_report, symbolizer_for
from rvleak.engine import Engine
from rvleak.guestkit.fixtures import build_fixture
from rvleak.loader import build_process
from rvleak.tracer import PREFIX_NAME, MemorySinks, TraceConfig, trace_engine
from rvleak.traces import preprocess_set

# %%
# Every secret becomes a virtual file the guest opens by name. Fixed-width
# names keep argv, and so the stack layout, identical between runs.
rng = random.Random(2024)
secrets = [rng.randbytes(16) for _ in range(8)]
paths = [f"tc/{i:04d}" for i in range(len(secrets))]

fx = build_fixture("leaky_sbox")
process = build_process(fx.elf, "leaky_sbox", ["leaky_sbox", *paths])
engine = Engine(process, files=dict(zip(paths, secrets)))

# %%
# One prefix trace plus one trace per call of ``microwalk_target``.
sinks = MemorySinks()
session, status = trace_engine(engine, TraceConfig(), sinks)
print("guest exit code:", status.exit_code, "| instructions:", status.instructions)
print("trace files:", sorted(sinks.files))

# %%
# Preprocessing turns addresses into (image, offset) and heap-block references.
raws = [sinks.files[f"t{i}.trace"] for i in range(len(secrets))]
prefix, traces = preprocess_set(sinks.files[PREFIX_NAME], raws, engine.images)
print("entries per test case:", [len(t) for t in traces])

# %%
# The analysis hashes each instruction's observations per call context and
# flags the ones that differ between test cases.
report = analyze(traces, prefix)
print(render_report(report, "text", symbolizer_for(engine.images)).decode())

# %%
# The fixture says what to expect.
print("expected:", fx.manifest.as_dict())

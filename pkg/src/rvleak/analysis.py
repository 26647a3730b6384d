"""Leakage analysis over canonical test-case traces.

Every observation is keyed by ``(call context, instruction, kind)``.  Within a
trace the observations of one key are folded into a 64-bit FNV-1a digest of
their canonical entry bytes.  A key leaks when its digests are not all equal
across test cases; a key missing from a trace counts as one more distinct
digest.  Total leakages count leaking ``(instruction, context)`` pairs, unique
leakages count distinct leaking instructions.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from .traces import (
    ABSOLUTE_IMAGE, CanonBranch, CanonicalTrace, CanonMemAccess, CodeRef, ImageInfo, ImageMismatch,
    MemKind, encode_entry,
)
from .tracer import BranchKind

REPORT_VERSION = 1
MAX_CONTEXT_DEPTH = 64

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_M64 = (1 << 64) - 1


class AnalysisError(Exception):
    pass


class TooFewTraces(AnalysisError):
    def __init__(self, n: int):
        self.count = n
        super().__init__(f"need at least 2 test-case traces, got {n}")


class NondeterministicTraces(AnalysisError):
    """Identical inputs produced different traces; only deterministic code is supported."""


__all__ = [
    "AnalysisReport", "CallContext", "ContextLeak", "ImageMismatch", "LeakKind", "LeakageFinding",
    "NondeterministicTraces", "TooFewTraces", "analyze", "fnv1a64", "render_report", "trace_digests",
]


def fnv1a64(data: bytes, h: int = FNV_OFFSET) -> int:
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & _M64
    return h


class LeakKind(enum.Enum):
    CONTROL_FLOW = "ControlFlow"
    MEMORY_ACCESS = "MemoryAccess"


def _ref_bytes(ref: CodeRef) -> bytes:
    return ref.image.to_bytes(4, "little") + ref.offset.to_bytes(8, "little")


class CallContext:
    """Bounded stack of call-site CodeRefs with a cached 64-bit hash."""

    __slots__ = ("sites", "depth_limit", "_hash")

    def __init__(self, depth_limit: int = MAX_CONTEXT_DEPTH):
        self.sites: list[CodeRef] = []
        self.depth_limit = depth_limit
        self._hash = FNV_OFFSET

    @property
    def context_hash(self) -> int:
        return self._hash

    def _rehash(self) -> None:
        h = FNV_OFFSET
        for s in self.sites:
            h = fnv1a64(_ref_bytes(s), h)
        self._hash = h

    def push(self, site: CodeRef) -> None:
        self.sites.append(site)
        if len(self.sites) > self.depth_limit:
            del self.sites[0]
        self._rehash()

    def pop(self) -> None:
        """Leave the innermost frame; an unbalanced return resets to the empty context."""
        if self.sites:
            self.sites.pop()
        self._rehash()

    def snapshot(self) -> tuple[CodeRef, ...]:
        return tuple(self.sites)


@dataclass
class _KeyState:
    digest: int
    count: int
    stack: tuple[CodeRef, ...]
    absolute: bool


Key = tuple[int, CodeRef, LeakKind]


def trace_digests(trace: CanonicalTrace) -> dict[Key, _KeyState]:
    """Per-key observation digests of one test-case trace."""
    ctx = CallContext()
    keys: dict[Key, _KeyState] = {}
    for e in trace.entries:
        if isinstance(e, CanonBranch):
            key = (ctx.context_hash, e.source, LeakKind.CONTROL_FLOW)
            absolute = False
        else:
            key = (ctx.context_hash, e.instr, LeakKind.MEMORY_ACCESS)
            absolute = e.ref.kind is MemKind.ABSOLUTE
        blob = encode_entry(e)
        st = keys.get(key)
        if st is None:
            keys[key] = _KeyState(fnv1a64(blob), 1, ctx.snapshot(), absolute)
        else:
            st.digest = fnv1a64(blob, st.digest)
            st.count += 1
            st.absolute = st.absolute or absolute
        if isinstance(e, CanonBranch):
            if e.kind is BranchKind.CALL:
                ctx.push(e.source)
            elif e.kind is BranchKind.RETURN:
                ctx.pop()
    return keys


@dataclass(frozen=True)
class ContextLeak:
    context_hash: int
    distinct_digests: int
    witness: tuple[int, int]  # two test-case indices whose observations differ
    call_stack: tuple[CodeRef, ...] = ()
    absent_in: int = 0  # number of test cases that never reached this key

    def as_dict(self, symbolize: Optional[Callable[[CodeRef], Optional[str]]] = None) -> dict:
        sites = []
        for s in self.call_stack:
            d = {"image": s.image, "offset": s.offset}
            sym = symbolize(s) if symbolize else None
            if sym:
                d["symbol"] = sym
            sites.append(d)
        return {"contextHash": f"{self.context_hash:016x}", "distinctDigests": self.distinct_digests,
                "witness": list(self.witness), "absentIn": self.absent_in, "callSites": sites}


@dataclass
class LeakageFinding:
    instr: CodeRef
    kind: LeakKind
    contexts: list[ContextLeak]
    unresolved_addresses: bool = False

    @property
    def severity_bits(self) -> float:
        return math.log2(max(c.distinct_digests for c in self.contexts))

    @property
    def sort_key(self) -> tuple:
        return (self.instr.image, self.instr.offset, self.kind.value)


@dataclass(frozen=True)
class TestcaseMeta:
    index: int
    entries: int
    absolute_refs: int
    input_id: Optional[str] = None


@dataclass
class AnalysisReport:
    total_leakages: int
    unique_leakages: int
    findings: list[LeakageFinding]
    testcases: list[TestcaseMeta]
    images: tuple[ImageInfo, ...] = ()
    prefix_entries: int = 0

    @property
    def testcase_count(self) -> int:
        return len(self.testcases)

    @property
    def leaking_instructions(self) -> set[CodeRef]:
        return {f.instr for f in self.findings}


def _image_key(images: Sequence[ImageInfo]) -> tuple:
    return tuple(sorted((im.index, im.start, im.end) for im in images))


def analyze(traces: Sequence[CanonicalTrace], prefix: Optional[CanonicalTrace] = None,
            input_ids: Optional[Sequence[Optional[str]]] = None) -> AnalysisReport:
    """Compare test-case traces (the prefix is never compared).

    ``input_ids`` optionally identifies each test case's input (for example a
    content hash); two test cases with the same id must produce identical
    digests, otherwise :class:`NondeterministicTraces` is raised.
    """
    if len(traces) < 2:
        raise TooFewTraces(len(traces))
    ref_images = _image_key(traces[0].images)
    for i, t in enumerate(traces):
        if _image_key(t.images) != ref_images:
            raise ImageMismatch(f"test case {i} was preprocessed against a different image list")
    if prefix is not None and prefix.images and _image_key(prefix.images) != ref_images:
        raise ImageMismatch("prefix was preprocessed against a different image list")
    if input_ids is not None and len(input_ids) != len(traces):
        raise ValueError("input_ids must match the number of traces")

    per_trace = [trace_digests(t) for t in traces]

    if input_ids is not None:
        first: dict[str, int] = {}
        for i, ident in enumerate(input_ids):
            if ident is None:
                continue
            j = first.setdefault(ident, i)
            if j != i and _digest_map(per_trace[i]) != _digest_map(per_trace[j]):
                raise NondeterministicTraces(
                    f"test cases {j} and {i} have identical inputs but different traces")

    all_keys: dict[Key, tuple[CodeRef, ...]] = {}
    for d in per_trace:
        for k, st in d.items():
            all_keys.setdefault(k, st.stack)

    grouped: dict[tuple[CodeRef, LeakKind], LeakageFinding] = {}
    leaking_pairs: set[tuple[CodeRef, int]] = set()
    for key in sorted(all_keys, key=lambda k: (k[1].image, k[1].offset, k[2].value, k[0])):
        ctx_hash, instr, kind = key
        states = [d.get(key) for d in per_trace]
        digests = [s.digest if s is not None else None for s in states]
        distinct = len(set(digests))
        if distinct < 2:
            continue
        j = next(i for i, dg in enumerate(digests) if dg != digests[0])
        leak = ContextLeak(ctx_hash, distinct, (0, j), all_keys[key],
                           sum(1 for s in states if s is None))
        f = grouped.get((instr, kind))
        if f is None:
            f = grouped[(instr, kind)] = LeakageFinding(instr, kind, [])
        f.contexts.append(leak)
        f.unresolved_addresses = f.unresolved_addresses or any(s is not None and s.absolute for s in states)
        leaking_pairs.add((instr, ctx_hash))

    findings = sorted(grouped.values(), key=lambda f: f.sort_key)
    for f in findings:
        f.contexts.sort(key=lambda c: (c.call_stack, c.context_hash))
    ids = list(input_ids) if input_ids is not None else [None] * len(traces)
    meta = [TestcaseMeta(i, len(t.entries), t.absolute_refs, ids[i]) for i, t in enumerate(traces)]
    return AnalysisReport(
        total_leakages=len(leaking_pairs),
        unique_leakages=len({f.instr for f in findings}),
        findings=findings,
        testcases=meta,
        images=tuple(sorted(traces[0].images, key=lambda im: im.index)),
        prefix_entries=len(prefix.entries) if prefix is not None else 0,
    )


def _digest_map(d: dict[Key, _KeyState]) -> dict[Key, int]:
    return {k: s.digest for k, s in d.items()}


# -- rendering -------------------------------------------------------------------------

Symbolizer = Callable[[CodeRef], Optional[str]]


def symbolizer_for(images) -> Symbolizer:
    """Build a CodeRef symbolizer from loaded images (objects with ``symbolize``)."""
    by_index = {im.index: im for im in images}

    def sym(ref: CodeRef) -> Optional[str]:
        im = by_index.get(ref.image)
        if im is None or ref.image == ABSOLUTE_IMAGE:
            return None
        return im.symbolize(im.start + ref.offset)
    return sym


def _fmt_ref(ref: CodeRef, symbolize: Optional[Symbolizer]) -> str:
    sym = symbolize(ref) if symbolize else None
    return f"{ref}" + (f" ({sym})" if sym else "")


def report_to_dict(report: AnalysisReport, symbolize: Optional[Symbolizer] = None) -> dict:
    findings = []
    for f in report.findings:
        d = {"image": f.instr.image, "offset": f.instr.offset}
        sym = symbolize(f.instr) if symbolize else None
        if sym:
            d["symbol"] = sym
        d["kind"] = f.kind.value
        d["severityBits"] = round(f.severity_bits, 6)
        d["unresolvedAddresses"] = f.unresolved_addresses
        d["contexts"] = [c.as_dict(symbolize) for c in f.contexts]
        findings.append(d)
    return {
        "version": REPORT_VERSION,
        "images": [im.as_dict() for im in report.images],
        "testcaseCount": report.testcase_count,
        "totalLeakages": report.total_leakages,
        "uniqueLeakages": report.unique_leakages,
        "findings": findings,
        "testcases": [{"index": t.index, "entries": t.entries, "absoluteRefs": t.absolute_refs,
                       **({"input": t.input_id} if t.input_id else {})} for t in report.testcases],
    }


def render_report(report: AnalysisReport, fmt: str = "text",
                  symbolize: Optional[Symbolizer] = None) -> bytes:
    """Render as ``"text"`` or ``"json"``; output is byte-for-byte deterministic."""
    if fmt == "json":
        return (json.dumps(report_to_dict(report, symbolize), indent=2, sort_keys=False) + "\n").encode()
    if fmt != "text":
        raise ValueError(f"unknown report format {fmt!r}")
    lines = [f"test cases: {report.testcase_count}",
             f"total leakages: {report.total_leakages}",
             f"unique leakages: {report.unique_leakages}"]
    absolute = sum(t.absolute_refs for t in report.testcases)
    if absolute:
        lines.append(f"unresolved (absolute) data addresses: {absolute}")
    lines.append("")
    if not report.findings:
        lines.append("no leakages detected")
    for f in report.findings:
        flag = "  [unresolved addresses]" if f.unresolved_addresses else ""
        lines.append(f"{f.kind.value} leak at {_fmt_ref(f.instr, symbolize)}: "
                     f"{len(f.contexts)} context(s), severity {f.severity_bits:.2f} bits{flag}")
        for c in f.contexts:
            a, b = c.witness
            extra = f", unreached in {c.absent_in}" if c.absent_in else ""
            lines.append(f"  context {c.context_hash:016x}: {c.distinct_digests} distinct "
                         f"observation sequences (e.g. test cases {a} and {b}{extra})")
            for site in reversed(c.call_stack):
                lines.append(f"    called from {_fmt_ref(site, symbolize)}")
    return ("\n".join(lines) + "\n").encode()

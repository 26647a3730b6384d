"""Command line pipeline: generate test cases, trace, preprocess, analyze.

Exit codes:

====  ===========================================================
 0    success, no leakages
 2    configuration error
 3    guest cannot be loaded (missing file, bad ELF, no target symbol)
 4    guest fault (memory fault, illegal instruction, nonzero exit, ...)
 5    guest used an unsupported system call
 6    trace inputs unusable (too few traces, malformed or mismatched files)
 7    nondeterministic guest
10    leakages found
====  ===========================================================
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import random
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .analysis import (
    AnalysisError, AnalysisReport, NondeterministicTraces, TooFewTraces, analyze, render_report,
    symbolizer_for,
)
from .engine import Engine, EngineError, UnsupportedSyscall
from .guestkit.fixtures import UnknownFixture, build_fixture
from .loader import LoadError, LoadedImage, MemoryFault, build_process
from .tracer import (
    PREFIX_NAME, DirectorySinks, MemorySinks, MissingTargetSymbol, TraceConfig, TracerError,
    testcase_name, trace_engine,
)
from .traces import CanonicalTrace, ImageInfo, ImageMismatch, TraceFormatError, preprocess_set

log = logging.getLogger("rvleak")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_LOAD = 3
EXIT_FAULT = 4
EXIT_SYSCALL = 5
EXIT_TRACES = 6
EXIT_NONDETERMINISTIC = 7
EXIT_LEAKS = 10

FIXTURE_PREFIX = "fixture:"
IMAGES_MANIFEST = "images.json"
TESTCASES_MANIFEST = "testcases.json"
CANONICAL_DIR = "canonical"
GENERATED_DIR = "testcases"
DEFAULT_COUNT = 16
DEFAULT_BYTE_LENGTH = 16


class PipelineError(Exception):
    exit_code = EXIT_CONFIG


class ConfigError(PipelineError):
    exit_code = EXIT_CONFIG


class GuestLoadError(PipelineError):
    exit_code = EXIT_LOAD


class GuestFault(PipelineError):
    exit_code = EXIT_FAULT


class GuestSyscallError(PipelineError):
    exit_code = EXIT_SYSCALL


class TraceInputError(PipelineError):
    exit_code = EXIT_TRACES


class NondeterministicGuest(PipelineError):
    exit_code = EXIT_NONDETERMINISTIC


@dataclass
class GeneratorConfig:
    count: int = DEFAULT_COUNT
    byteLength: int = DEFAULT_BYTE_LENGTH
    seed: Optional[int] = None


@dataclass
class PipelineConfig:
    """Field names follow the JSON config file."""

    guestPath: Optional[str] = None
    targetSymbol: str = "microwalk_target"
    testcaseDir: Optional[str] = None
    generator: Optional[GeneratorConfig] = None
    tracedImages: Optional[list[int]] = None
    outputDir: str = "rvleak-out"
    reportFormats: list[str] = field(default_factory=lambda: ["text"])
    brkShift: int = 0
    fuel: Optional[int] = None
    rerunCheck: bool = False

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(sorted(unknown))}")
        kw = dict(data)
        gen = kw.get("generator")
        if gen is not None:
            if not isinstance(gen, dict) or set(gen) - {"count", "byteLength", "seed"}:
                raise ConfigError("generator must be {count, byteLength, seed}")
            kw["generator"] = GeneratorConfig(**gen)
        return cls(**kw)

    def validate(self, need_guest: bool = True, need_inputs: bool = True) -> None:
        if need_guest and not self.guestPath:
            raise ConfigError("no guest given (--guest)")
        fmts = set(self.reportFormats)
        if not fmts or fmts - {"text", "json"}:
            raise ConfigError(f"report formats must be text and/or json, got {self.reportFormats}")
        if self.brkShift < 0:
            raise ConfigError("brkShift must be non-negative")
        if not need_inputs:
            return
        if self.testcaseDir and self.generator:
            raise ConfigError("give either a test-case directory or a generator, not both")
        if not self.testcaseDir and not self.generator:
            raise ConfigError("no test cases: use --testcases DIR or --generate N --seed S")
        g = self.generator
        if g is not None:
            if g.seed is None:
                raise ConfigError("--seed is mandatory when generating test cases")
            if not 0 <= g.seed < 1 << 64:
                raise ConfigError("seed must be an unsigned 64-bit integer")
            if g.count < 2:
                raise ConfigError("at least 2 test cases are required")
            if g.byteLength < 0:
                raise ConfigError("byteLength must be non-negative")


# -- test cases ------------------------------------------------------------------------

def generate_testcases(count: int, byte_length: int, seed: int) -> list[bytes]:
    """``count`` secrets of ``byte_length`` bytes from Python's MT19937 seeded with ``seed``."""
    rng = random.Random(seed)
    return [rng.randbytes(byte_length) for _ in range(count)]


@dataclass(frozen=True)
class Testcase:
    index: int
    source: str  # file name the secret came from
    data: bytes

    @property
    def guest_path(self) -> str:
        # fixed-width names keep argv, and therefore the stack layout, identical
        return f"tc/{self.index:04d}"

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.data).hexdigest()


def collect_testcases(cfg: PipelineConfig) -> list[Testcase]:
    out_dir = Path(cfg.outputDir)
    if cfg.generator is not None:
        g = cfg.generator
        secrets = generate_testcases(g.count, g.byteLength, g.seed)
        gen_dir = out_dir / GENERATED_DIR
        gen_dir.mkdir(parents=True, exist_ok=True)
        cases = []
        for i, s in enumerate(secrets):
            name = f"{i:04d}"
            (gen_dir / name).write_bytes(s)
            cases.append(Testcase(i, name, s))
        return cases
    src = Path(cfg.testcaseDir)
    if not src.is_dir():
        raise ConfigError(f"test-case directory {src} does not exist")
    files = sorted(p for p in src.iterdir() if p.is_file())
    if len(files) < 2:
        raise ConfigError(f"{src} holds {len(files)} test case(s); at least 2 are required")
    return [Testcase(i, p.name, p.read_bytes()) for i, p in enumerate(files)]


# -- guest -----------------------------------------------------------------------------

def read_guest(path: str) -> bytes:
    if path.startswith(FIXTURE_PREFIX):
        try:
            return build_fixture(path[len(FIXTURE_PREFIX):]).elf
        except UnknownFixture as e:
            raise GuestLoadError(str(e)) from None
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise GuestLoadError(f"cannot read guest {path}: {e.strerror or e}") from None


def _engine(cfg: PipelineConfig, elf: bytes, cases: Sequence[Testcase]) -> Engine:
    argv = [cfg.guestPath, *(c.guest_path for c in cases)]
    try:
        process = build_process(elf, cfg.guestPath, argv, brk_shift=cfg.brkShift)
    except LoadError as e:
        raise GuestLoadError(f"cannot load {cfg.guestPath}: {e}") from None
    return Engine(process, files={c.guest_path: c.data for c in cases})


def _run_traced(cfg: PipelineConfig, elf: bytes, cases: Sequence[Testcase], sinks):
    eng = _engine(cfg, elf, cases)
    tcfg = TraceConfig(target_symbol=cfg.targetSymbol,
                       traced_images=frozenset(cfg.tracedImages) if cfg.tracedImages is not None else None)
    try:
        session, status = trace_engine(eng, tcfg, sinks, cfg.fuel)
    except MissingTargetSymbol as e:
        raise GuestLoadError(str(e)) from None
    except UnsupportedSyscall as e:
        raise GuestSyscallError(f"guest used unsupported system call {e.number}") from None
    except (EngineError, MemoryFault, TracerError) as e:
        raise GuestFault(f"guest fault at pc={eng.regs.pc:#x}: {e}") from None
    if status.exit_code != 0:
        raise GuestFault(f"guest exited with status {status.exit_code}")
    if len(session.testcase_sinks) != len(cases):
        raise GuestFault(f"{cfg.targetSymbol} ran {len(session.testcase_sinks)} time(s) "
                         f"for {len(cases)} test case(s)")
    return eng, session, status


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2) + "\n")


def cmd_trace(cfg: PipelineConfig) -> int:
    cfg.validate()
    elf = read_guest(cfg.guestPath)
    cases = collect_testcases(cfg)
    out = Path(cfg.outputDir)
    out.mkdir(parents=True, exist_ok=True)
    sinks = DirectorySinks(out)
    eng, session, status = _run_traced(cfg, elf, cases, sinks)
    if cfg.rerunCheck:
        _, again, _ = _run_traced(cfg, elf, cases, MemorySinks())
        for name in session.trace_names():
            if (out / name).read_bytes() != again.sinks.files[name]:
                raise NondeterministicGuest(f"{name} differs between two runs of the same test cases")
    _write_json(out / IMAGES_MANIFEST, {"images": [ImageInfo.from_loaded(i).as_dict() for i in eng.images]})
    _write_json(out / TESTCASES_MANIFEST, {"testcases": [
        {"index": c.index, "file": c.source, "sha256": c.sha256} for c in cases]})
    (out / "guest.stdout").write_bytes(bytes(eng.stdout))
    log.info("traced %d test cases (%d instructions)", len(cases), status.instructions)
    return EXIT_OK


# -- preprocess / analyze --------------------------------------------------------------

def _trace_dir(cfg: PipelineConfig, traces: Optional[str]) -> Path:
    return Path(traces or cfg.outputDir)


def load_images(d: Path) -> list[ImageInfo]:
    try:
        data = json.loads((d / IMAGES_MANIFEST).read_text())
        return [ImageInfo(int(i["index"]), str(i["path"]), int(i["start"]), int(i["end"]))
                for i in data["images"]]
    except OSError as e:
        raise TraceInputError(f"missing {IMAGES_MANIFEST} in {d}: {e.strerror}") from None
    except (ValueError, KeyError, TypeError) as e:
        raise TraceInputError(f"malformed {IMAGES_MANIFEST}: {e}") from None


def _testcase_count(d: Path, suffix: str) -> int:
    n = 0
    while (d / (testcase_name(n) if suffix == ".trace" else f"t{n}{suffix}")).exists():
        n += 1
    return n


def load_canonical(d: Path) -> tuple[CanonicalTrace, list[CanonicalTrace], list[ImageInfo]]:
    """Canonical traces from ``d/canonical`` if present, otherwise preprocess the raw traces."""
    images = load_images(d)
    cdir = d / CANONICAL_DIR
    try:
        if (cdir / "prefix.ctrace").exists():
            n = _testcase_count(cdir, ".ctrace")
            prefix = CanonicalTrace.deserialize((cdir / "prefix.ctrace").read_bytes(), images)
            traces = [CanonicalTrace.deserialize((cdir / f"t{i}.ctrace").read_bytes(), images)
                      for i in range(n)]
            return prefix, traces, images
        if not (d / PREFIX_NAME).exists():
            raise TraceInputError(f"no traces in {d}")
        n = _testcase_count(d, ".trace")
        raws = [(d / testcase_name(i)).read_bytes() for i in range(n)]
        prefix, traces = preprocess_set((d / PREFIX_NAME).read_bytes(), raws, images)
        return prefix, traces, images
    except (TraceFormatError, ImageMismatch) as e:
        raise TraceInputError(f"unusable trace in {d}: {e}") from None


def cmd_preprocess(cfg: PipelineConfig, traces: Optional[str] = None) -> int:
    d = _trace_dir(cfg, traces)
    prefix, canon, _ = load_canonical(d)
    cdir = Path(cfg.outputDir) / CANONICAL_DIR
    cdir.mkdir(parents=True, exist_ok=True)
    (cdir / "prefix.ctrace").write_bytes(prefix.serialize())
    for i, t in enumerate(canon):
        (cdir / f"t{i}.ctrace").write_bytes(t.serialize())
    if Path(cfg.outputDir).resolve() != d.resolve():
        (Path(cfg.outputDir) / IMAGES_MANIFEST).write_bytes((d / IMAGES_MANIFEST).read_bytes())
    return EXIT_OK


def _input_ids(d: Path, n: int) -> Optional[list[Optional[str]]]:
    try:
        data = json.loads((d / TESTCASES_MANIFEST).read_text())["testcases"]
    except (OSError, ValueError, KeyError):
        return None
    ids = {int(t["index"]): t.get("sha256") for t in data}
    return [ids.get(i) for i in range(n)]


def _symbolizer(cfg: PipelineConfig, images: Sequence[ImageInfo]):
    """Symbols come from the guest ELF when it can still be read; otherwise none."""
    path = cfg.guestPath or (images[0].path if images else None)
    if not path:
        return None
    try:
        proc = build_process(read_guest(path), path)
    except (PipelineError, LoadError):
        return None
    loaded: list[LoadedImage] = proc.images
    if [(i.start, i.end) for i in loaded] != [(i.start, i.end) for i in images[:len(loaded)]]:
        return None
    return symbolizer_for(loaded)


def cmd_analyze(cfg: PipelineConfig, traces: Optional[str] = None) -> tuple[int, AnalysisReport]:
    cfg.validate(need_guest=False, need_inputs=False)
    d = _trace_dir(cfg, traces)
    prefix, canon, images = load_canonical(d)
    try:
        report = analyze(canon, prefix, _input_ids(d, len(canon)))
    except NondeterministicTraces as e:
        raise NondeterministicGuest(str(e)) from None
    except (TooFewTraces, ImageMismatch, AnalysisError) as e:
        raise TraceInputError(str(e)) from None
    sym = _symbolizer(cfg, images)
    out = Path(cfg.outputDir)
    out.mkdir(parents=True, exist_ok=True)
    for fmt in ("text", "json"):
        if fmt in cfg.reportFormats:
            (out / f"report.{'txt' if fmt == 'text' else 'json'}").write_bytes(render_report(report, fmt, sym))
    if "text" in cfg.reportFormats:
        sys.stdout.write(render_report(report, "text", sym).decode())
    return (EXIT_LEAKS if report.unique_leakages else EXIT_OK), report


def cmd_run(cfg: PipelineConfig) -> int:
    cmd_trace(cfg)
    code, _ = cmd_analyze(cfg)
    return code


# -- argument parsing ------------------------------------------------------------------

def _u64(s: str) -> int:
    v = int(s, 0)
    if not 0 <= v < 1 << 64:
        raise argparse.ArgumentTypeError("must be an unsigned 64-bit integer")
    return v


def _int_list(s: str) -> list[int]:
    try:
        return [int(x, 0) for x in s.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from None


def _formats(s: str) -> list[str]:
    return [x.strip() for x in s.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rvleak", description="Trace an RV64 guest and report secret-dependent behavior.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON pipeline config; flags override its values")
    common.add_argument("--out", dest="outputDir", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    guest = argparse.ArgumentParser(add_help=False)
    guest.add_argument("--guest", dest="guestPath", help="static RV64 ELF, or fixture:NAME")
    guest.add_argument("--target", dest="targetSymbol", help="test-case entry function")
    guest.add_argument("--testcases", dest="testcaseDir", help="directory of test-case files")
    guest.add_argument("--generate", type=int, metavar="N", help="generate N random test cases")
    guest.add_argument("--seed", type=_u64, help="generator seed (required with --generate)")
    guest.add_argument("--byte-length", type=int, help=f"generated secret size (default {DEFAULT_BYTE_LENGTH})")
    guest.add_argument("--traced-images", dest="tracedImages", type=_int_list, help="image indices to trace")
    guest.add_argument("--brk-shift", dest="brkShift", type=int, help="move the program break up by this many bytes")
    guest.add_argument("--fuel", type=int, help="instruction budget")
    guest.add_argument("--rerun-check", dest="rerunCheck", action="store_true", default=None,
                       help="run the guest twice and require identical traces")

    report = argparse.ArgumentParser(add_help=False)
    report.add_argument("--format", dest="reportFormats", type=_formats, help="text,json")
    report.add_argument("--traces", help="directory holding the traces (default: --out)")

    sub.add_parser("trace", parents=[common, guest], help="run the guest and write raw traces")
    sub.add_parser("preprocess", parents=[common, report], help="write canonical traces")
    sub.add_parser("analyze", parents=[common, report, guest], help="compare traces and write reports")
    sub.add_parser("run", parents=[common, guest, report], help="trace and analyze")
    return p


def config_from_args(args: argparse.Namespace) -> PipelineConfig:
    base: dict = {}
    if args.config:
        try:
            base = json.loads(Path(args.config).read_text())
        except OSError as e:
            raise ConfigError(f"cannot read config {args.config}: {e.strerror}") from None
        except ValueError as e:
            raise ConfigError(f"config {args.config} is not valid JSON: {e}") from None
    try:
        cfg = PipelineConfig.from_dict(base)
    except TypeError as e:
        raise ConfigError(str(e)) from None
    for name in ("guestPath", "targetSymbol", "testcaseDir", "tracedImages", "outputDir", "reportFormats",
                 "brkShift", "fuel", "rerunCheck"):
        v = getattr(args, name, None)
        if v is not None:
            setattr(cfg, name, v)
    gen = getattr(args, "generate", None)
    seed = getattr(args, "seed", None)
    blen = getattr(args, "byte_length", None)
    if gen is not None:
        cfg.generator = GeneratorConfig(gen, *(  # keep seed/length from the file
            (cfg.generator.byteLength, cfg.generator.seed) if cfg.generator else (DEFAULT_BYTE_LENGTH, None)))
        cfg.testcaseDir = None
    elif (seed is not None or blen is not None) and cfg.generator is None and not cfg.testcaseDir:
        cfg.generator = GeneratorConfig()
    if cfg.generator is not None:
        if seed is not None:
            cfg.generator.seed = seed
        if blen is not None:
            cfg.generator.byteLength = blen
    return cfg


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="rvleak: %(message)s")
    try:
        cfg = config_from_args(args)
        if args.command == "trace":
            return cmd_trace(cfg)
        if args.command == "preprocess":
            return cmd_preprocess(cfg, args.traces)
        if args.command == "analyze":
            return cmd_analyze(cfg, args.traces)[0]
        return cmd_run(cfg)
    except PipelineError as e:
        print(f"rvleak: error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())

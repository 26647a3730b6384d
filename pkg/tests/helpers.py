"""Shared utilities for the test-suite."""
from __future__ import annotations

from rvleak.engine import Engine
from rvleak.guestkit.fixtures import build_fixture
from rvleak.loader import build_process

PAGE = 4096


def copy_into_pages(pages: dict, base: int, data) -> None:
    """Copy ``data`` at guest address ``base`` into 4 KiB page buffers."""
    addr, pos = base, 0
    while pos < len(data):
        pn, off = divmod(addr, PAGE)
        n = min(PAGE - off, len(data) - pos)
        pages.setdefault(pn, bytearray(PAGE))[off:off + n] = data[pos:pos + n]
        addr, pos = addr + n, pos + n


def memory_pages(memory) -> dict:
    """Writable guest memory as {page number: bytes}."""
    out = {}
    for seg in memory.segments:
        if "w" not in seg.perms:
            continue
        copy_into_pages(out, seg.base, seg.data)
    return {pn: bytes(page) for pn, page in out.items()}


def nonzero_pages(pages: dict) -> dict:
    return {k: v for k, v in pages.items() if any(v)}


def engine_state(eng: Engine, status) -> tuple:
    return (status.exit_code, status.instructions, eng.regs.snapshot(), bytes(eng.stdout),
            bytes(eng.stderr), nonzero_pages(memory_pages(eng.memory)))


def ref_state(res) -> tuple:
    return (res.exit_code, res.instructions, res.regs, res.stdout, res.stderr, nonzero_pages(res.memory))


def virtual_testcases(secrets: list[bytes]) -> tuple[list[str], dict[str, bytes]]:
    paths = [f"tc/{i:04d}" for i in range(len(secrets))]
    return paths, dict(zip(paths, secrets))


def fixture_process(name: str, secrets: list[bytes], brk_shift: int = 0):
    fx = build_fixture(name)
    paths, files = virtual_testcases(secrets)
    return fx, build_process(fx.elf, name, [name, *paths], brk_shift=brk_shift), files

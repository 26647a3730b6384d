"""Catalog of guest programs used by the end-to-end tests and demos.

Every fixture is linked against the shared runtime (``asm/runtime.s``) and
exports ``microwalk_target(path)``, which reads its secret from ``path``.
"""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Optional

from .assembler import AsmProgram, assemble_program

CONTROL_FLOW = "ControlFlow"
MEMORY_ACCESS = "MemoryAccess"


class UnknownFixture(KeyError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"unknown fixture {name!r}; known: {', '.join(sorted(CATALOG))}")


@dataclass(frozen=True)
class Manifest:
    """Expected analysis outcome of a fixture."""

    total: int
    unique: int
    kinds: tuple[str, ...] = ()
    leak_symbols: tuple[str, ...] = ()  # labels placed on the leaking instructions
    description: str = ""

    def as_dict(self) -> dict:
        return {"total": self.total, "unique": self.unique, "kinds": list(self.kinds),
                "leak_symbols": list(self.leak_symbols)}


CATALOG: dict[str, Manifest] = {
    "ct_xor": Manifest(0, 0, description="xor with a fixed pad; constant time"),
    "leaky_sbox": Manifest(1, 1, (MEMORY_ACCESS,), ("sbox_lookup",),
                           "secret-indexed 16-entry table, 64-byte spacing"),
    "leaky_branch": Manifest(1, 1, (CONTROL_FLOW,), ("secret_branch",),
                             "branch on the low bit of each key byte"),
    "two_context_leak": Manifest(2, 1, (MEMORY_ACCESS,), ("helper_lookup",),
                                 "leaky helper called from two call sites"),
    "atomic_loop": Manifest(0, 0, description="LR/SC lock acquire loop per key byte"),
    "alloc_roundtrip": Manifest(0, 0, description="malloc/realloc/calloc/free round trip"),
    "hot_loop": Manifest(0, 0, description="two-block loop, 1000 iterations"),
}


@dataclass(frozen=True)
class BuiltFixture:
    name: str
    elf: bytes
    manifest: Manifest
    program: AsmProgram
    source: str
    digest: str


def _asset(name: str) -> str:
    return resources.files(__package__).joinpath("asm", name).read_text()


def runtime_source() -> str:
    return _asset("runtime.s")


def fixture_source(name: str) -> str:
    """Full assembly text of fixture ``name`` (runtime included)."""
    if name not in CATALOG:
        raise UnknownFixture(name)
    return runtime_source() + "\n" + _asset(f"{name}.s")


def default_build_dir() -> Path:
    env = os.environ.get("RVLEAK_BUILD_DIR")
    if env:
        return Path(env)
    return Path(os.environ.get("XDG_CACHE_HOME", Path.home() / ".cache")) / "rvleak" / "fixtures"


@lru_cache(maxsize=None)
def _build(name: str, build_dir: Optional[str]) -> BuiltFixture:
    source = fixture_source(name)
    digest = hashlib.sha256(source.encode()).hexdigest()[:20]
    program = assemble_program(source)
    elf = program.to_elf()
    if build_dir is not None:
        out = Path(build_dir) / f"{name}-{digest}.elf"
        try:
            if not out.exists() or out.read_bytes() != elf:
                out.parent.mkdir(parents=True, exist_ok=True)
                tmp = out.with_suffix(".tmp")
                tmp.write_bytes(elf)
                tmp.replace(out)
        except OSError:
            pass  # the cache is an optimization for external tools only
    return BuiltFixture(name, elf, CATALOG[name], program, source, digest)


def build_fixture(name: str, build_dir: Optional[os.PathLike] = None, *, cache: bool = True) -> BuiltFixture:
    """Assemble fixture ``name``; the ELF is also written to ``build_dir`` when ``cache``."""
    if name not in CATALOG:
        raise UnknownFixture(name)
    target = str(build_dir or default_build_dir()) if cache else None
    return _build(name, target)


def fixture_path(name: str, build_dir: Optional[os.PathLike] = None) -> Path:
    """Path of the cached ELF for ``name`` (built on demand)."""
    fx = build_fixture(name, build_dir)
    return Path(build_dir or default_build_dir()) / f"{name}-{fx.digest}.elf"

"""Emulate the glibc loader's search-path assembly and name resolution.

The rules being modeled:

  * an object's own RPATH is consulted only when that object has no
    RUNPATH, and it precedes everything else;
  * RPATH entries of each ancestor in the loading chain are consulted
    next, nearest ancestor first, each gated on that ancestor having no
    RUNPATH of its own (RPATH propagates down the chain, RUNPATH never
    does);
  * the library-path environment variable comes after RPATH and before
    the object's own RUNPATH;
  * loader-config directories and the default system directories close
    the list, the latter skipped for objects flagged to opt out.

Everything here is pure filesystem reading; no code is ever executed.
"""

from __future__ import annotations

import glob
import logging
import os
import re
import struct
from dataclasses import dataclass, field, replace

from .elffile import ELF_MAGIC, ElfIdentity, DynamicInfo, load
from .errors import CyclicInclude, ElfParseError, UnresolvableOrigin

log = logging.getLogger(__name__)

SOURCE_RPATH_SELF = "rpath_self"
SOURCE_RPATH_ANCESTOR = "rpath_ancestor"
SOURCE_ENV = "env_library_path"
SOURCE_RUNPATH_SELF = "runpath_self"
SOURCE_CONFIG = "config_file"
SOURCE_DEFAULT = "default"
SOURCE_CACHE_DEDUP = "cache_dedup"  # used in traces, never in locations
SOURCE_DIRECT = "direct"  # name contained a path separator

PROBE_HIT = "hit"
PROBE_MISS = "miss"
PROBE_WRONG_ARCH = "wrong_arch"

# Fallback system library directories, probed in this order. Multiarch
# hosts normally list their real directories in the loader config, so
# these only matter when the config is silent.
DEFAULT_SYSTEM_DIRS = ("/lib64", "/usr/lib64", "/lib", "/usr/lib")


@dataclass(frozen=True)
class SearchContext:
    """A frozen snapshot of everything outside the binaries themselves.

    Directory lists keep their order and their duplicates; the loader
    probes duplicates too, and probe counting must reflect that.
    """

    library_path_env: tuple[str, ...] = ()
    preload: tuple[str, ...] = ()
    config_dirs: tuple[str, ...] = ()
    default_dirs: tuple[str, ...] = DEFAULT_SYSTEM_DIRS
    sysroot: str | None = None
    platform: str = ""
    lib_token: str = "lib"
    hwcaps_subdirs: tuple[str, ...] = ()

    def __post_init__(self):
        for name in ("library_path_env", "preload", "config_dirs",
                     "default_dirs", "hwcaps_subdirs"):
            value = getattr(self, name)
            if not isinstance(value, tuple):
                object.__setattr__(self, name, tuple(value))
        if self.sysroot is not None and not os.path.isdir(self.sysroot):
            raise NotADirectoryError(f"sysroot {self.sysroot!r} does not exist")

    @classmethod
    def for_host(cls, env_library_path: str | None = None,
                 preload: tuple[str, ...] = (),
                 config_path: str = "/etc/ld.so.conf") -> "SearchContext":
        """Build a context describing the running host.

        The live environment is never read implicitly; pass the library
        path explicitly when it should count.
        """
        env = tuple(p for p in (env_library_path or "").split(":") if p)
        return cls(
            library_path_env=env,
            preload=tuple(preload),
            config_dirs=tuple(parse_loader_config(config_path)),
            default_dirs=DEFAULT_SYSTEM_DIRS,
        )

    def with_env(self, dirs: tuple[str, ...]) -> "SearchContext":
        return replace(self, library_path_env=tuple(dirs))


@dataclass(frozen=True)
class SearchLocation:
    """One directory in an assembled search order, fully expanded."""

    directory: str
    source: str
    origin_object: str | None = None
    ancestor_depth: int | None = None  # 1 = nearest ancestor

    def source_label(self) -> str:
        if self.source == SOURCE_RPATH_ANCESTOR:
            return f"{self.source}({self.ancestor_depth})"
        return self.source


@dataclass
class Probe:
    path: str
    outcome: str  # hit | miss | wrong_arch


@dataclass
class ProbeTrace:
    """Every filesystem touch made while resolving one needed name."""

    needed_name: str
    probes: list[Probe] = field(default_factory=list)
    resolved: str | None = None
    winning_source: str | None = None


_DST_RE = re.compile(r"\$(?:\{(ORIGIN|LIB|PLATFORM)\}|(ORIGIN|LIB|PLATFORM)\b)")


def _expand_token(token: str, origin_object: str | None,
                  ctx: SearchContext) -> str:
    def repl(match: re.Match) -> str:
        key = match.group(1) or match.group(2)
        if key == "ORIGIN":
            if origin_object is None:
                raise UnresolvableOrigin(
                    f"cannot expand $ORIGIN in {token!r}: "
                    "contributing object path unknown")
            return os.path.dirname(os.path.realpath(origin_object))
        if key == "LIB":
            return ctx.lib_token
        return ctx.platform

    return _DST_RE.sub(repl, token)


def _expand_tokens(tokens: list[str], origin_object: str | None,
                   ctx: SearchContext, source: str,
                   depth: int | None = None) -> list[SearchLocation]:
    out = []
    for token in tokens:
        if token == "":
            # Historical behavior maps empty tokens to the working
            # directory; that is a cwd-injection hazard, so drop them.
            log.warning("dropping empty search-path token from %s",
                        origin_object or "<context>")
            continue
        directory = _expand_token(token, origin_object, ctx)
        out.append(SearchLocation(directory=directory, source=source,
                                  origin_object=origin_object,
                                  ancestor_depth=depth))
    return out


def assemble_search_order(
    obj_path: str,
    obj_info: DynamicInfo,
    ancestors: list[tuple[str, DynamicInfo]],
    ctx: SearchContext,
) -> list[SearchLocation]:
    """Build the directory list the loader would walk for one object.

    ``ancestors`` runs from the root executable down to the object's
    direct requester; it is empty when the object is the root itself.
    The result is a pure function of the arguments.
    """
    locs: list[SearchLocation] = []

    if obj_info.runpath is None and obj_info.rpath is not None:
        locs += _expand_tokens(obj_info.rpath, obj_path, ctx,
                               SOURCE_RPATH_SELF)

    for depth, (apath, ainfo) in enumerate(reversed(ancestors), start=1):
        if ainfo.runpath is None and ainfo.rpath is not None:
            locs += _expand_tokens(ainfo.rpath, apath, ctx,
                                   SOURCE_RPATH_ANCESTOR, depth=depth)

    env_origin = ancestors[0][0] if ancestors else obj_path
    locs += _expand_tokens(list(ctx.library_path_env), env_origin, ctx,
                           SOURCE_ENV)

    if obj_info.runpath is not None:
        locs += _expand_tokens(obj_info.runpath, obj_path, ctx,
                               SOURCE_RUNPATH_SELF)

    for d in ctx.config_dirs:
        locs.append(SearchLocation(directory=d, source=SOURCE_CONFIG))

    if not obj_info.no_default_dirs:
        for d in ctx.default_dirs:
            locs.append(SearchLocation(directory=d, source=SOURCE_DEFAULT))

    if ctx.hwcaps_subdirs:
        expanded: list[SearchLocation] = []
        for loc in locs:
            for sub in ctx.hwcaps_subdirs:
                expanded.append(replace(
                    loc, directory=os.path.join(loc.directory, sub)))
            expanded.append(loc)
        locs = expanded

    return locs


def _sysrooted(path: str, ctx: SearchContext) -> str:
    if ctx.sysroot is None:
        return path
    return ctx.sysroot.rstrip("/") + "/" + path.lstrip("/")


def _probe_file(path: str, want: ElfIdentity) -> str:
    """Classify one candidate path: hit, miss, or wrong_arch."""
    try:
        with open(path, "rb") as fh:
            head = fh.read(64)
    except (FileNotFoundError, NotADirectoryError, IsADirectoryError):
        return PROBE_MISS
    except OSError:
        return PROBE_MISS
    if len(head) < 20 or head[:4] != ELF_MAGIC:
        return PROBE_WRONG_ARCH  # exists, but no loader would accept it
    ei_class = 32 if head[4] == 1 else 64 if head[4] == 2 else 0
    order = "little" if head[5] == 1 else "big" if head[5] == 2 else "?"
    endian = "<" if head[5] == 1 else ">"
    machine = struct.unpack_from(endian + "H", head, 18)[0]
    if (ei_class != want.elf_class or order != want.byte_order
            or machine != want.machine):
        return PROBE_WRONG_ARCH
    return PROBE_HIT


def resolve_name(name: str, order: list[SearchLocation],
                 want: ElfIdentity, ctx: SearchContext) -> ProbeTrace:
    """Find one needed name the way the loader would.

    Candidates that exist but are not loadable for ``want`` (other class,
    machine, byte order, or not ELF at all) are recorded as wrong_arch
    and skipped. An unresolved name is not an error here; the trace comes
    back with ``resolved`` unset and the caller decides how bad that is.
    """
    trace = ProbeTrace(needed_name=name)

    if "/" in name:
        path = name if os.path.isabs(name) else os.path.join(os.getcwd(), name)
        probe_path = _sysrooted(path, ctx)
        outcome = _probe_file(probe_path, want)
        trace.probes.append(Probe(path=probe_path, outcome=outcome))
        if outcome == PROBE_HIT:
            trace.resolved = probe_path
            trace.winning_source = SOURCE_DIRECT
        return trace

    for loc in order:
        candidate = os.path.join(loc.directory, name)
        probe_path = _sysrooted(candidate, ctx)
        outcome = _probe_file(probe_path, want)
        trace.probes.append(Probe(path=probe_path, outcome=outcome))
        if outcome == PROBE_HIT:
            trace.resolved = probe_path
            trace.winning_source = loc.source_label()
            break
    return trace


def identity_of(path: str) -> ElfIdentity:
    return load(path).identity()


def parse_loader_config(path: str, sysroot: str | None = None) -> list[str]:
    """Read a loader config file into an ordered directory list.

    Missing files yield an empty list (hosts without one are valid).
    ``include`` directives expand recursively, fragments in lexicographic
    order. When a sysroot is given, absolute include patterns are globbed
    beneath it, while returned directories stay unprefixed; probing
    applies the sysroot later.
    """
    if not os.path.exists(path):
        return []
    return _parse_config(os.path.abspath(path), sysroot, stack=[])


def _parse_config(path: str, sysroot: str | None,
                  stack: list[str]) -> list[str]:
    real = os.path.realpath(path)
    if real in stack:
        chain = " -> ".join(stack + [real])
        raise CyclicInclude(f"loader config includes itself: {chain}")
    dirs: list[str] = []
    stack.append(real)
    try:
        with open(path, "r", encoding="utf-8", errors="surrogateescape") as fh:
            for line in fh:
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if line.startswith("include") and line[7:8] in (" ", "\t"):
                    pattern = line[8:].strip()
                    if os.path.isabs(pattern) and sysroot is not None:
                        pattern = (sysroot.rstrip("/") + "/"
                                   + pattern.lstrip("/"))
                    elif not os.path.isabs(pattern):
                        pattern = os.path.join(os.path.dirname(path), pattern)
                    for frag in sorted(glob.glob(pattern)):
                        dirs += _parse_config(frag, sysroot, stack)
                elif line.startswith("hwcap"):
                    continue  # obsolete ldconfig directive, not a directory
                else:
                    dirs.append(line)
    finally:
        stack.pop()
    return dirs

"""Transitive dependency closures with soname-keyed deduplication.

Objects load once per dedup key (the file's soname when it has one, else
the basename of the requested name), in breadth-first order starting from
the root's needed list. A request whose key is already loaded is recorded
as satisfied_by_cache with zero probes; that is the cache effect that
both hides missing search paths and makes top-level freezing possible.

The native strategy walks the filesystem exactly as the loader module
emulates it and records full probe traces. The interpreter strategy asks
the binary's own program interpreter for its resolution (its ldd-style
trace mode), which reflects the host's loader cache but yields no probe
counts.
"""

from __future__ import annotations

import os
import subprocess
from collections import deque
from dataclasses import dataclass, field

from .elffile import DynamicInfo, ElfIdentity, parse_object
from .errors import (
    InterpreterMissing, InterpreterNotRunnable, RootNotDynamic,
    TracesUnavailable, UnparseableListing,
)
from .loader import (
    SOURCE_CACHE_DEDUP, ProbeTrace, SearchContext, assemble_search_order,
    resolve_name,
)

STRATEGY_NATIVE = "native"
STRATEGY_INTERPRETER = "interpreter"

_VDSO_NAMES = {"linux-vdso.so.1", "linux-gate.so.1",
               "linux-vdso32.so.1", "linux-vdso64.so.1"}


@dataclass
class ResolvedObject:
    """One processed request for a needed name."""

    requested_name: str
    resolved_path: str | None
    dedup_key: str
    first_requester: str | None  # None for preloads and listing entries
    trace: ProbeTrace
    satisfied_by_cache: bool = False
    requester_ancestry: tuple[str, ...] = ()


@dataclass
class LoadOrder:
    """Breadth-first resolution of a root binary's full closure.

    entries holds one record per request, including cache-satisfied
    repeats; actual loads (the deduplicated objects) are the non-cache
    entries, and no two of those share a dedup key.
    """

    root: str
    entries: list[ResolvedObject] = field(default_factory=list)
    strategy: str = STRATEGY_NATIVE
    context: SearchContext | None = None

    def loaded(self) -> list[ResolvedObject]:
        return [e for e in self.entries
                if not e.satisfied_by_cache and e.resolved_path]

    def unresolved(self) -> list[ResolvedObject]:
        return [e for e in self.entries if e.resolved_path is None]

    def is_complete(self) -> bool:
        return not self.unresolved()

    def path_map(self, canonical: bool = False) -> dict[str, str]:
        """basename(requested name) -> resolved path, loads only."""
        out = {}
        for e in self.loaded():
            path = os.path.realpath(e.resolved_path) if canonical else e.resolved_path
            out[os.path.basename(e.requested_name)] = path
        return out


def _object_record(path: str,
                   cache: dict[str, tuple[ElfIdentity, DynamicInfo]]
                   ) -> tuple[ElfIdentity, DynamicInfo]:
    if path not in cache:
        cache[path] = parse_object(path)
    return cache[path]


def compute_closure_native(root: str, ctx: SearchContext) -> LoadOrder:
    """Resolve the full closure by emulating the loader's search.

    Preload entries resolve first, against the root's own search order.
    Unresolved names do not abort the walk; they are carried as
    incomplete entries so callers can report every miss at once.
    """
    root_path = os.path.abspath(root)
    parsed: dict[str, tuple[ElfIdentity, DynamicInfo]] = {}
    want, root_info = _object_record(root_path, parsed)
    if not root_info.is_dynamic:
        raise RootNotDynamic(f"{root}: no dynamic section")

    order = LoadOrder(root=root_path, strategy=STRATEGY_NATIVE, context=ctx)

    # The root itself occupies its key so needed cycles terminate.
    loaded_keys: dict[str, str] = {}
    root_key = root_info.soname or os.path.basename(root_path)
    loaded_keys[root_key] = root_path

    search_orders: dict[str, list] = {}

    def order_for(obj_path: str, ancestry: tuple[str, ...]):
        if obj_path not in search_orders:
            _, info = _object_record(obj_path, parsed)
            chain = [(p, _object_record(p, parsed)[1]) for p in ancestry]
            search_orders[obj_path] = assemble_search_order(
                obj_path, info, chain, ctx)
        return search_orders[obj_path]

    queue: deque[tuple[str, str | None, tuple[str, ...]]] = deque()
    for name in ctx.preload:
        queue.append((name, None, ()))
    for name in root_info.needed:
        queue.append((name, root_path, ()))

    while queue:
        name, requester, ancestry = queue.popleft()
        lookup_key = os.path.basename(name)

        if lookup_key in loaded_keys:
            order.entries.append(ResolvedObject(
                requested_name=name,
                resolved_path=loaded_keys[lookup_key],
                dedup_key=lookup_key,
                first_requester=requester,
                trace=ProbeTrace(needed_name=name,
                                 winning_source=SOURCE_CACHE_DEDUP),
                satisfied_by_cache=True,
                requester_ancestry=ancestry,
            ))
            continue

        loading_object = requester if requester is not None else root_path
        trace = resolve_name(name, order_for(loading_object, ancestry),
                             want, ctx)

        if trace.resolved is None:
            order.entries.append(ResolvedObject(
                requested_name=name, resolved_path=None,
                dedup_key=lookup_key, first_requester=requester,
                trace=trace, requester_ancestry=ancestry))
            continue

        resolved = os.path.abspath(trace.resolved)
        _, info = _object_record(resolved, parsed)
        key = info.soname or lookup_key
        if key in loaded_keys:
            # The probed file's soname is already loaded; the loader
            # opens it, notices, and keeps the earlier object. The
            # discarded open is not counted as a probe.
            order.entries.append(ResolvedObject(
                requested_name=name,
                resolved_path=loaded_keys[key],
                dedup_key=key,
                first_requester=requester,
                trace=ProbeTrace(needed_name=name,
                                 winning_source=SOURCE_CACHE_DEDUP),
                satisfied_by_cache=True,
                requester_ancestry=ancestry,
            ))
            continue
        order.entries.append(ResolvedObject(
            requested_name=name, resolved_path=resolved, dedup_key=key,
            first_requester=requester, trace=trace,
            requester_ancestry=ancestry))

        # Register the soname and the requested spelling; the loader
        # knows an object by both.
        loaded_keys[key] = resolved
        loaded_keys.setdefault(lookup_key, resolved)

        child_ancestry = ancestry + (loading_object,)
        for child in info.needed:
            queue.append((child, resolved, child_ancestry))

    return order


def compute_closure_interpreter(root: str) -> LoadOrder:
    """Ask the binary's own interpreter to list its resolution.

    Runs the interpreter named by PT_INTERP in trace mode, so results
    reflect the real host loader including its cache file. Traces carry
    no probes; probe counting over such an order raises TracesUnavailable.
    """
    root_path = os.path.abspath(root)
    _, info = parse_object(root_path)
    if not info.is_dynamic:
        raise RootNotDynamic(f"{root}: no dynamic section")
    interp = info.interpreter
    if interp is None:
        raise InterpreterMissing(f"{root}: no PT_INTERP")
    if not os.path.exists(interp):
        raise InterpreterMissing(f"{root}: interpreter {interp} not found")

    env = {"LD_TRACE_LOADED_OBJECTS": "1", "PATH": "/usr/bin:/bin"}
    try:
        proc = subprocess.run(
            [interp, root_path], env=env, capture_output=True,
            text=True, timeout=60)
    except OSError as exc:
        raise InterpreterNotRunnable(f"{interp}: {exc}") from exc

    order = LoadOrder(root=root_path, strategy=STRATEGY_INTERPRETER)
    for line in proc.stdout.splitlines():
        line = line.strip()
        if "=>" not in line:
            continue  # vdso and the interpreter's own line, typically
        left, _, right = line.partition("=>")
        name = left.strip()
        right = right.strip()
        if not name or name in _VDSO_NAMES:
            continue
        if right.startswith("not found"):
            resolved = None
        else:
            resolved = right.split(" (", 1)[0].strip()
            if not resolved or resolved.startswith("("):
                continue
        order.entries.append(ResolvedObject(
            requested_name=name,
            resolved_path=resolved,
            dedup_key=os.path.basename(name),
            first_requester=None,
            trace=ProbeTrace(needed_name=name),
        ))

    if not order.entries and info.needed:
        if proc.returncode != 0:
            raise InterpreterNotRunnable(
                f"{interp} exited {proc.returncode}: {proc.stderr.strip()}")
        raise UnparseableListing(
            f"{root}: no resolution lines in interpreter output")
    return order


def compute_closure(root: str, ctx: SearchContext,
                    strategy: str = STRATEGY_NATIVE) -> LoadOrder:
    if strategy == STRATEGY_NATIVE:
        return compute_closure_native(root, ctx)
    if strategy == STRATEGY_INTERPRETER:
        return compute_closure_interpreter(root)
    raise ValueError(f"unknown strategy {strategy!r}")


def total_probe_count(order: LoadOrder) -> int:
    """Filesystem touches the loader would make to resolve this closure.

    Cache-satisfied entries cost nothing; that asymmetry is the entire
    startup-cost story.
    """
    if order.strategy != STRATEGY_NATIVE:
        raise TracesUnavailable(
            "probe counts exist only for native-strategy orders")
    return sum(len(e.trace.probes) for e in order.entries)

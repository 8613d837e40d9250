"""Detect the fragility patterns that hide inside working binaries.

Four families:

  * hidden dependencies: a request satisfied only because a sibling
    branch already loaded the soname, not by the requester's own paths;
  * path interference: resolution that changes under a different
    environment (the rpath-suppressed-by-runpath-then-env-wins story);
  * ordering paradoxes: requirement sets no directory ordering can
    satisfy under first-hit resolution;
  * symbol shadowing: two loaded objects exporting the same strong
    symbol, where whichever loads first wins.

Every diagnostic carries machine-checkable evidence: the traces, orders,
or symbol lists that reproduce the finding.
"""

from __future__ import annotations

import itertools
import os
import shutil
from dataclasses import dataclass, field
from typing import Any, Sequence

from . import records
from .closure import LoadOrder, STRATEGY_NATIVE, compute_closure_native
from .elffile import load as load_elf, parse_object
from .errors import TooManyDirs
from .loader import SearchContext, assemble_search_order, resolve_name

KIND_HIDDEN_DEPENDENCY = "hidden_dependency"
KIND_PATH_INTERFERENCE = "path_interference"
KIND_ORDERING_PARADOX = "ordering_paradox"
KIND_SYMBOL_SHADOWING = "symbol_shadowing"
KIND_UNRESOLVED = "unresolved"

ALL_KINDS = (KIND_HIDDEN_DEPENDENCY, KIND_PATH_INTERFERENCE,
             KIND_ORDERING_PARADOX, KIND_SYMBOL_SHADOWING, KIND_UNRESOLVED)


@dataclass
class Diagnostic:
    kind: str
    object_path: str
    requested_name: str
    explanation: str
    evidence: dict[str, Any] = field(default_factory=dict)

    @property
    def subject(self) -> str:
        return f"{self.object_path}: {self.requested_name}"

    def to_dict(self) -> dict[str, Any]:
        return {
            "record": "diagnostic",
            "kind": self.kind,
            "object_path": self.object_path,
            "requested_name": self.requested_name,
            "explanation": self.explanation,
            "evidence": self.evidence,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Diagnostic":
        return cls(kind=d["kind"], object_path=d["object_path"],
                   requested_name=d["requested_name"],
                   explanation=d["explanation"], evidence=d["evidence"])


def _require_native(order: LoadOrder) -> SearchContext:
    if order.strategy != STRATEGY_NATIVE or order.context is None:
        raise ValueError("this audit needs a native-strategy order "
                         "with its search context attached")
    return order.context


def _own_order_trace(order: LoadOrder, entry) -> Any:
    """Re-resolve one request using only its requester's search order."""
    ctx = order.context
    requester = entry.first_requester or order.root
    _, req_info = parse_object(requester)
    chain = [(p, parse_object(p)[1]) for p in entry.requester_ancestry]
    want, _ = parse_object(order.root)
    search = assemble_search_order(requester, req_info, chain, ctx)
    return resolve_name(entry.requested_name, search, want, ctx)


def audit_hidden_dependencies(order: LoadOrder) -> list[Diagnostic]:
    """Find requests that only work because of earlier loads.

    Each cache-satisfied entry is re-resolved with nothing but its
    requester's own search order; a miss, or a hit on a different file,
    means the working binary is concealing a broken or ambiguous path.
    """
    _require_native(order)
    out: list[Diagnostic] = []
    for entry in order.entries:
        if not entry.satisfied_by_cache:
            continue
        trace = _own_order_trace(order, entry)
        requester = entry.first_requester or order.root
        cached = entry.resolved_path
        if trace.resolved is None:
            out.append(Diagnostic(
                kind=KIND_HIDDEN_DEPENDENCY,
                object_path=requester,
                requested_name=entry.requested_name,
                explanation=(
                    f"{requester} needs {entry.requested_name} but its own "
                    f"search order cannot find it ({len(trace.probes)} "
                    f"probes, all misses); it works only because "
                    f"{entry.dedup_key} was already loaded from {cached} "
                    "by an earlier branch"),
                evidence={
                    "cache_path": cached,
                    "own_order_trace": records.trace_to_dict(trace),
                },
            ))
        elif os.path.realpath(trace.resolved) != os.path.realpath(cached):
            out.append(Diagnostic(
                kind=KIND_HIDDEN_DEPENDENCY,
                object_path=requester,
                requested_name=entry.requested_name,
                explanation=(
                    f"{requester} got {cached} from the soname cache, but "
                    f"its own search order would load a different file, "
                    f"{trace.resolved} (via {trace.winning_source})"),
                evidence={
                    "cache_path": cached,
                    "own_order_path": trace.resolved,
                    "own_order_trace": records.trace_to_dict(trace),
                },
            ))
    return out


def audit_unresolved(order: LoadOrder) -> list[Diagnostic]:
    out = []
    for entry in order.unresolved():
        requester = entry.first_requester or order.root
        out.append(Diagnostic(
            kind=KIND_UNRESOLVED,
            object_path=requester,
            requested_name=entry.requested_name,
            explanation=(
                f"{entry.requested_name} (needed by {requester}) was not "
                f"found; {len(entry.trace.probes)} locations probed"),
            evidence={"trace": records.trace_to_dict(entry.trace)},
        ))
    return out


def _first_resolutions(order: LoadOrder) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for entry in order.entries:
        if entry.satisfied_by_cache:
            continue
        out.setdefault(entry.requested_name, entry)
    return out


def audit_interference(root: str, ctx: SearchContext,
                       alt_envs: Sequence[SearchContext]) -> list[Diagnostic]:
    """Recompute the closure under alternate environments and diff it.

    Any needed name whose resolution changes (or disappears) under some
    alternate context is environment-hijackable; the diagnostic names
    the mechanism by citing both winning sources.
    """
    base = compute_closure_native(root, ctx)
    base_map = _first_resolutions(base)
    out: list[Diagnostic] = []
    for index, alt in enumerate(alt_envs):
        alt_order = compute_closure_native(root, alt)
        alt_map = _first_resolutions(alt_order)
        for name, entry in base_map.items():
            other = alt_map.get(name)
            if other is None or entry.resolved_path is None:
                continue
            requester = entry.first_requester or root
            if other.resolved_path is None:
                out.append(Diagnostic(
                    kind=KIND_PATH_INTERFERENCE,
                    object_path=requester,
                    requested_name=name,
                    explanation=(
                        f"{name} resolves to {entry.resolved_path} via "
                        f"{entry.trace.winning_source}, but under alternate "
                        f"environment #{index} it does not resolve at all"),
                    evidence={
                        "alternate_index": index,
                        "alternate_context": records.context_to_dict(alt),
                        "base_trace": records.trace_to_dict(entry.trace),
                        "alt_trace": records.trace_to_dict(other.trace),
                    },
                ))
            elif (os.path.realpath(other.resolved_path)
                  != os.path.realpath(entry.resolved_path)):
                out.append(Diagnostic(
                    kind=KIND_PATH_INTERFERENCE,
                    object_path=requester,
                    requested_name=name,
                    explanation=(
                        f"{name} resolves to {entry.resolved_path} via "
                        f"{entry.trace.winning_source}, but under alternate "
                        f"environment #{index} the loader prefers "
                        f"{other.resolved_path} via "
                        f"{other.trace.winning_source}"),
                    evidence={
                        "alternate_index": index,
                        "alternate_context": records.context_to_dict(alt),
                        "base_trace": records.trace_to_dict(entry.trace),
                        "alt_trace": records.trace_to_dict(other.trace),
                    },
                ))
    return out


def default_alt_contexts(order: LoadOrder,
                         scratch_dir: str) -> list[SearchContext]:
    """The stock alternate environments for interference checks.

    An emptied library path, a decoy directory (copies of the closure's
    own files under a different path) prepended to it, and the library
    path reversed.
    """
    ctx = _require_native(order)
    decoy_dir = os.path.join(os.path.abspath(scratch_dir), "decoys")
    os.makedirs(decoy_dir, exist_ok=True)
    for entry in order.loaded():
        if "/" in entry.requested_name:
            continue  # direct opens cannot be shadowed by search paths
        target = os.path.join(decoy_dir,
                              os.path.basename(entry.requested_name))
        if not os.path.exists(target):
            shutil.copy2(entry.resolved_path, target)
    return [
        ctx.with_env(()),
        ctx.with_env((decoy_dir,) + ctx.library_path_env),
        ctx.with_env(tuple(reversed(ctx.library_path_env))),
    ]


# --- ordering paradoxes ------------------------------------------------------


Requirement = tuple[str, str]  # (needed name, required absolute path)


def _first_hit(name: str, dir_order: Sequence[str]) -> str | None:
    for d in dir_order:
        candidate = os.path.join(d, name)
        if os.path.isfile(candidate):
            return candidate
    return None


def find_satisfying_order(requirements: Sequence[Requirement],
                          candidate_dirs: Sequence[str]) -> list[str] | None:
    """First permutation of the dirs that first-hit-selects every
    required path, or None if no ordering works."""
    for perm in itertools.permutations(candidate_dirs):
        if all(
            (hit := _first_hit(name, perm)) is not None
            and os.path.realpath(hit) == os.path.realpath(want)
            for name, want in requirements
        ):
            return list(perm)
    return None


def audit_paradox(requirements: Sequence[Requirement],
                  candidate_dirs: Sequence[str]) -> Diagnostic | None:
    """Decide whether any directory ordering can satisfy the requirements.

    Brute force over every permutation, so the directory count is capped
    at 8. Returns None when some ordering works; otherwise the diagnostic
    carries a per-permutation counterexample table.
    """
    if len(candidate_dirs) > 8:
        raise TooManyDirs(
            f"{len(candidate_dirs)} directories; the permutation check "
            "is capped at 8")
    for name, want in requirements:
        if not os.path.isfile(want):
            raise FileNotFoundError(f"required path {want} does not exist")

    counterexamples = []
    for perm in itertools.permutations(candidate_dirs):
        failure = None
        for name, want in requirements:
            hit = _first_hit(name, perm)
            if hit is None or os.path.realpath(hit) != os.path.realpath(want):
                failure = {"order": list(perm), "name": name,
                           "selected": hit, "wanted": want}
                break
        if failure is None:
            return None
        counterexamples.append(failure)

    names = ", ".join(name for name, _ in requirements)
    return Diagnostic(
        kind=KIND_ORDERING_PARADOX,
        object_path=os.path.commonpath([p for _, p in requirements])
        if requirements else "",
        requested_name=names,
        explanation=(
            f"no ordering of {len(candidate_dirs)} candidate directories "
            f"selects all required files for [{names}]; every permutation "
            "first-hits a wrong file for at least one name"),
        evidence={
            "requirements": [[n, p] for n, p in requirements],
            "candidate_dirs": list(candidate_dirs),
            "counterexamples": counterexamples,
        },
    )


# --- symbol shadowing --------------------------------------------------------


def audit_symbol_shadowing(order: LoadOrder) -> list[Diagnostic]:
    """Report strong dynamic symbols defined by more than one entry.

    Only defined, global, non-weak symbols participate in runtime
    interposition; whichever definer loads first wins every binding, so
    definers are listed in load order with the winner annotated.
    """
    definitions: dict[str, list[str]] = {}
    for entry in order.loaded():
        try:
            symbols = load_elf(entry.resolved_path).dynamic_symbols()
        except Exception:
            continue  # unreadable entries cannot shadow anything we model
        for sym in symbols:
            if sym.strong:
                paths = definitions.setdefault(sym.name, [])
                if entry.resolved_path not in paths:
                    paths.append(entry.resolved_path)

    out = []
    for name in sorted(definitions):
        definers = definitions[name]
        if len(definers) < 2:
            continue
        ordered = ", ".join(
            f"{p} ({'wins' if i == 0 else 'shadowed'})"
            for i, p in enumerate(definers))
        out.append(Diagnostic(
            kind=KIND_SYMBOL_SHADOWING,
            object_path=definers[0],
            requested_name=name,
            explanation=(
                f"strong symbol {name} is defined by {len(definers)} loaded "
                f"objects; the first to load wins every binding: {ordered}"),
            evidence={"symbol": name, "definers": definers,
                      "winner": definers[0]},
        ))
    return out


def audit_everything(root: str, ctx: SearchContext,
                     scratch_dir: str) -> list[Diagnostic]:
    """All order-based audits over one binary, for the CLI."""
    order = compute_closure_native(root, ctx)
    diagnostics = audit_unresolved(order)
    diagnostics += audit_hidden_dependencies(order)
    diagnostics += audit_symbol_shadowing(order)
    if order.is_complete():
        alts = default_alt_contexts(order, scratch_dir)
        diagnostics += audit_interference(root, ctx, alts)
    return diagnostics

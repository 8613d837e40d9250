"""Freeze a binary's closure into absolute-path needed entries.

Shrinkwrapping caches the loader's answer: every object in the closure,
including transitive ones, is lifted onto the top-level binary as an
absolute path, in load order. One open per entry replaces the whole
directory search, and no environment variable can change what loads;
preloading still works because it bypasses the needed list entirely.

Dependency views are the cheaper sibling: a single directory of symlinks
named by dedup key, with the binary's search path pointing only there.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

from .closure import (
    LoadOrder, STRATEGY_NATIVE, compute_closure, compute_closure_native,
    total_probe_count,
)
from .elffile import KIND_SHARED_OBJECT, parse_object
from .errors import IncompleteClosure, ShadowedDependency, ViewConflict
from .loader import SearchContext
from .rewrite import RewritePlan, apply_rewrite

log = logging.getLogger(__name__)


def plan_shrinkwrap(root: str, order: LoadOrder,
                    strip_paths: bool, flatten_symlinks: bool = False,
                    strict: bool = False) -> RewritePlan:
    """Build the freezing plan for ``root`` from its computed closure.

    The new needed list is every loaded object in breadth-first order as
    an absolute path; cache-satisfied requests are covered by their
    first-load entry. The interpreter never appears (it is already
    absolute in the program header), and neither does the root itself.
    Resolved paths are kept as-resolved so compatibility symlinks keep
    working; ``flatten_symlinks`` freezes final targets instead.
    """
    root_path = os.path.abspath(root)
    if os.path.abspath(order.root) != root_path:
        raise ValueError(
            f"order was computed for {order.root}, not {root}")
    unresolved = [e.requested_name for e in order.unresolved()]
    if unresolved:
        raise IncompleteClosure(unresolved)

    _, root_info = parse_object(root_path)
    interp_real = (os.path.realpath(root_info.interpreter)
                   if root_info.interpreter else None)

    new_needed: list[str] = []
    seen: set[str] = set()
    for entry in order.entries:
        path = entry.resolved_path
        if flatten_symlinks:
            path = os.path.realpath(path)
        if path in seen:
            continue  # cache-satisfied repeats emit once, at first load
        if os.path.realpath(path) == os.path.realpath(root_path):
            continue
        if interp_real and os.path.realpath(path) == interp_real:
            continue
        new_needed.append(path)
        seen.add(path)

    shadowed = sorted({e.requested_name for e in order.entries
                       if e.satisfied_by_cache and e.first_requester})
    if shadowed:
        msg = ("cache-satisfied requests frozen to their first-loaded "
               "files: " + ", ".join(shadowed))
        if strict:
            raise ShadowedDependency(msg)
        log.debug("%s", msg)

    plan = RewritePlan(
        target=root_path,
        new_needed=new_needed,
        strip_rpath=strip_paths,
        strip_runpath=strip_paths,
        preserve_order_from=order,
    )
    plan.validate()
    return plan


@dataclass
class ShrinkwrapReport:
    """What a freeze did: the plan plus the before/after probe model."""

    root: str
    output: str
    strategy: str
    plan: RewritePlan
    before_probes: int | None
    after_probes: int
    needed_count: int
    warnings: list[str] = field(default_factory=list)

    @property
    def speedup_ratio(self) -> float | None:
        if not self.before_probes or not self.after_probes:
            return None
        return self.before_probes / self.after_probes

    def lines(self) -> list[str]:
        out = [f"root: {self.root}",
               f"output: {self.output}",
               f"strategy: {self.strategy}",
               f"needed entries: {self.needed_count}"]
        if self.before_probes is not None:
            out.append(f"probes before: {self.before_probes}")
        out.append(f"probes after: {self.after_probes}")
        ratio = self.speedup_ratio
        if ratio is not None:
            out.append(f"probe reduction: {ratio:.1f}x")
        for i, path in enumerate(self.plan.new_needed):
            out.append(f"needed[{i}]: {path}")
        for w in self.warnings:
            out.append(f"warning: {w}")
        return out


def shrinkwrap(root: str, ctx: SearchContext,
               strategy: str = STRATEGY_NATIVE,
               output: str | None = None,
               strip_paths: bool | None = None,
               flatten_symlinks: bool = False) -> ShrinkwrapReport:
    """Closure, plan, rewrite: the whole freeze in one call.

    strip_paths defaults by kind: executables lose their rpath/runpath
    (dead weight once every entry is absolute, and a surviving runpath
    can still perturb transitive lookups), shared objects keep theirs (a
    wrapped library may still be loaded beneath an unwrapped root that
    depends on them).
    """
    root_path = os.path.abspath(root)
    output = os.path.abspath(output or root_path)
    identity, _ = parse_object(root_path)
    if strip_paths is None:
        strip_paths = identity.object_kind != KIND_SHARED_OBJECT

    order = compute_closure(root_path, ctx, strategy)
    plan = plan_shrinkwrap(root_path, order, strip_paths=strip_paths,
                           flatten_symlinks=flatten_symlinks)

    warnings = []
    for e in order.entries:
        if e.satisfied_by_cache and e.first_requester is not None:
            warnings.append(
                f"{e.requested_name} (for {e.first_requester}) frozen to "
                f"first-loaded {e.resolved_path}")

    before = None
    if order.strategy == STRATEGY_NATIVE:
        before = total_probe_count(order)
    else:
        try:
            before = total_probe_count(compute_closure_native(root_path, ctx))
        except Exception:  # incomplete native emulation is fine here
            before = None

    plan.target = root_path
    apply_rewrite(plan, output)

    after_order = compute_closure_native(output, ctx)
    after = total_probe_count(after_order)
    if after != len(plan.new_needed):
        warnings.append(
            f"expected {len(plan.new_needed)} probes after freezing, "
            f"model says {after}")

    return ShrinkwrapReport(
        root=root_path, output=output, strategy=order.strategy, plan=plan,
        before_probes=before, after_probes=after,
        needed_count=len(plan.new_needed), warnings=warnings)


def make_view(order: LoadOrder, view_dir: str) -> tuple[str, RewritePlan]:
    """Materialize a closure as one directory of symlinks.

    view_dir/lib gains one link per loaded object, named by its dedup
    key and pointing at the resolved absolute path. The returned plan
    lifts the closure onto the binary as bare names and sets its runpath
    to exactly that one directory, so every lookup is a single hit.

    The single-version constraint is enforced: two distinct files that
    would claim the same link name are a ViewConflict.
    """
    unresolved = [e.requested_name for e in order.unresolved()]
    if unresolved:
        raise IncompleteClosure(unresolved)

    lib_dir = os.path.join(os.path.abspath(view_dir), "lib")
    claims: dict[str, str] = {}
    for entry in order.loaded():
        target = os.path.abspath(entry.resolved_path)
        for name in {entry.dedup_key, os.path.basename(target)}:
            prior = claims.get(name)
            if prior is not None and os.path.realpath(prior) != os.path.realpath(target):
                raise ViewConflict(name, prior, target)
            claims.setdefault(name, target)

    os.makedirs(lib_dir, exist_ok=True)
    names: list[str] = []
    for entry in order.loaded():
        name = entry.dedup_key
        link = os.path.join(lib_dir, name)
        target = os.path.abspath(entry.resolved_path)
        if os.path.islink(link):
            os.unlink(link)
        os.symlink(target, link)
        names.append(name)

    plan = RewritePlan(
        target=order.root,
        new_needed=names,
        strip_rpath=True,
        strip_runpath=True,
        new_runpath=[lib_dir],
        preserve_order_from=order,
    )
    plan.validate()
    return lib_dir, plan

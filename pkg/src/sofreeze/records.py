"""Structured text documents: line-delimited JSON records and DOT graphs.

One JSON object per line, stable field names, keys sorted, and a
format_version in the leading meta record. Documents round-trip: parsing
what was dumped reconstructs equal in-memory values.
"""

from __future__ import annotations

import json
import os
from typing import Any, Iterable

from .closure import LoadOrder, ResolvedObject
from .loader import Probe, ProbeTrace, SearchContext

FORMAT_VERSION = 1


def _dumps(record: dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


def dump_records(recs: Iterable[dict]) -> str:
    return "\n".join(_dumps(r) for r in recs) + "\n"


def parse_records(text: str) -> list[dict]:
    out = []
    for line in text.splitlines():
        line = line.strip()
        if line:
            out.append(json.loads(line))
    return out


def _meta(doc: str) -> dict:
    return {"record": "meta", "format_version": FORMAT_VERSION, "doc": doc}


def _check_meta(recs: list[dict], doc: str) -> None:
    if not recs or recs[0].get("record") != "meta":
        raise ValueError("document has no meta record")
    if recs[0].get("doc") != doc:
        raise ValueError(f"expected a {doc} document, got {recs[0].get('doc')!r}")
    if recs[0].get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported format_version {recs[0].get('format_version')!r}")


# --- loader types ----------------------------------------------------------


def trace_to_dict(trace: ProbeTrace) -> dict[str, Any]:
    return {
        "needed_name": trace.needed_name,
        "probes": [[p.path, p.outcome] for p in trace.probes],
        "resolved": trace.resolved,
        "winning_source": trace.winning_source,
    }


def trace_from_dict(d: dict[str, Any]) -> ProbeTrace:
    return ProbeTrace(
        needed_name=d["needed_name"],
        probes=[Probe(path=p, outcome=o) for p, o in d["probes"]],
        resolved=d["resolved"],
        winning_source=d["winning_source"],
    )


def context_to_dict(ctx: SearchContext) -> dict[str, Any]:
    return {
        "record": "context",
        "library_path_env": list(ctx.library_path_env),
        "preload": list(ctx.preload),
        "config_dirs": list(ctx.config_dirs),
        "default_dirs": list(ctx.default_dirs),
        "sysroot": ctx.sysroot,
        "platform": ctx.platform,
        "lib_token": ctx.lib_token,
        "hwcaps_subdirs": list(ctx.hwcaps_subdirs),
    }


def context_from_dict(d: dict[str, Any]) -> SearchContext:
    return SearchContext(
        library_path_env=tuple(d["library_path_env"]),
        preload=tuple(d["preload"]),
        config_dirs=tuple(d["config_dirs"]),
        default_dirs=tuple(d["default_dirs"]),
        sysroot=d["sysroot"],
        platform=d["platform"],
        lib_token=d["lib_token"],
        hwcaps_subdirs=tuple(d["hwcaps_subdirs"]),
    )


# --- load orders -----------------------------------------------------------


def entry_to_dict(entry: ResolvedObject, index: int) -> dict[str, Any]:
    return {
        "record": "entry",
        "index": index,
        "requested_name": entry.requested_name,
        "resolved_path": entry.resolved_path,
        "dedup_key": entry.dedup_key,
        "first_requester": entry.first_requester,
        "satisfied_by_cache": entry.satisfied_by_cache,
        "requester_ancestry": list(entry.requester_ancestry),
        "trace": trace_to_dict(entry.trace),
    }


def entry_from_dict(d: dict[str, Any]) -> ResolvedObject:
    return ResolvedObject(
        requested_name=d["requested_name"],
        resolved_path=d["resolved_path"],
        dedup_key=d["dedup_key"],
        first_requester=d["first_requester"],
        trace=trace_from_dict(d["trace"]),
        satisfied_by_cache=d["satisfied_by_cache"],
        requester_ancestry=tuple(d["requester_ancestry"]),
    )


def dump_load_order(order: LoadOrder) -> str:
    recs: list[dict] = [_meta("load_order")]
    recs.append({
        "record": "load_order",
        "root": order.root,
        "strategy": order.strategy,
        "complete": order.is_complete(),
        "entry_count": len(order.entries),
    })
    if order.context is not None:
        recs.append(context_to_dict(order.context))
    for i, entry in enumerate(order.entries):
        recs.append(entry_to_dict(entry, i))
    return dump_records(recs)


def load_load_order(text: str) -> LoadOrder:
    recs = parse_records(text)
    _check_meta(recs, "load_order")
    header = next(r for r in recs if r["record"] == "load_order")
    ctx = None
    for r in recs:
        if r["record"] == "context":
            ctx = context_from_dict(r)
            break
    entries = [entry_from_dict(r) for r in recs if r["record"] == "entry"]
    return LoadOrder(root=header["root"], entries=entries,
                     strategy=header["strategy"], context=ctx)


# --- diagnostics -----------------------------------------------------------


def dump_diagnostics(diagnostics) -> str:
    recs = [_meta("diagnostics")]
    recs += [d.to_dict() for d in diagnostics]
    return dump_records(recs)


def load_diagnostics(text: str):
    from .audit import Diagnostic

    recs = parse_records(text)
    _check_meta(recs, "diagnostics")
    return [Diagnostic.from_dict(r) for r in recs
            if r["record"] == "diagnostic"]


# --- DOT graphs ------------------------------------------------------------


def _quote(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


def graph_dot(order: LoadOrder) -> str:
    """Render the closure as a DOT digraph.

    Nodes are loaded objects labeled by dedup key; edges are needed
    relations, dashed and annotated where the request was satisfied by
    the soname cache instead of a fresh load.
    """
    lines = ["digraph dependency_closure {", "  rankdir=LR;"]
    root_id = order.root
    lines.append(f"  {_quote(root_id)} "
                 f"[label={_quote(os.path.basename(order.root))}, shape=box];")

    node_for_path: dict[str, str] = {}
    for entry in order.loaded():
        node_for_path.setdefault(entry.resolved_path, entry.dedup_key)
    for path, key in node_for_path.items():
        lines.append(f"  {_quote(path)} [label={_quote(key)}];")
    for entry in order.unresolved():
        node = "missing:" + entry.requested_name
        lines.append(f"  {_quote(node)} "
                     f"[label={_quote(entry.requested_name)}, "
                     f"style=dotted, color=red];")

    for entry in order.entries:
        src = entry.first_requester or order.root
        if entry.resolved_path is not None:
            dst = entry.resolved_path
        else:
            dst = "missing:" + entry.requested_name
        attrs = ""
        if entry.satisfied_by_cache:
            attrs = ' [style=dashed, label="cache_dedup"]'
        elif entry.first_requester is None:
            attrs = ' [style=bold, label="preload"]'
        lines.append(f"  {_quote(src)} -> {_quote(dst)}{attrs};")

    lines.append("}")
    return "\n".join(lines) + "\n"

"""Rewrite the dynamic-linking metadata of an ELF binary.

Two write modes, chosen automatically:

  * in place: every needed string already lives in the dynamic string
    table and the new entry list fits in the existing dynamic array.
    Identity rewrites and pure strips take this path; untouched bytes
    stay untouched.
  * trailer: the string table must grow, so the program header table,
    the dynamic array, and an extended string table are rebuilt inside a
    new loadable segment appended at end of file. The old copies become
    dead bytes; everything that points at them (ELF header, PT_PHDR,
    PT_DYNAMIC, section headers, DT_STRTAB/DT_STRSZ) is repointed.

The dynamic string table is strictly append-only, which keeps every
pre-existing string offset valid: symbol names, version strings, and the
soname never move. Version-needed records are preserved; when a needed
name is replaced, matching vn_file references are repointed at the new
string so the loader's version checks keep binding.

Writes are atomic: a temp file in the destination directory is fsynced
and renamed over the output. Callers must not rewrite one target path
concurrently; distinct targets are fine.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

from . import elffile
from .elffile import (
    DT_NEEDED, DT_NULL, DT_RPATH, DT_RUNPATH, DT_STRSZ, DT_STRTAB,
    DT_VERNEED, DT_VERNEEDNUM, ElfFile, PF_R, PF_W, PT_DYNAMIC, PT_LOAD,
    PT_PHDR, Phdr, SHT_DYNAMIC,
)
from .errors import (
    DynamicSectionFull, DuplicateDedupKey, EmptyNameList, ReadOnlyTarget,
    RewriteError, StringTableOverflow,
)

if TYPE_CHECKING:  # pragma: no cover
    from .closure import LoadOrder


def effective_soname(path: str) -> str:
    """The name the loader would dedup this file under."""
    ef = elffile.load(path)
    soname = ef.dynamic_info().soname
    return soname if soname is not None else os.path.basename(path)


@dataclass
class RewritePlan:
    """The exact edits to apply to one binary.

    new_needed entries are normally absolute paths to existing files;
    bare names (no path separator) are allowed so identity rewrites and
    soname appends can reuse the same machinery, and skip the existence
    check. new_runpath, when set, replaces any existing runpath verbatim.
    """

    target: str
    new_needed: list[str]
    strip_rpath: bool = False
    strip_runpath: bool = False
    new_runpath: list[str] | None = None
    preserve_order_from: "LoadOrder | None" = field(default=None, repr=False)

    def validate(self) -> None:
        seen_paths: set[str] = set()
        seen_keys: dict[str, str] = {}
        for entry in self.new_needed:
            if entry in seen_paths:
                raise RewriteError(f"duplicate needed entry {entry!r}")
            seen_paths.add(entry)
            if "/" in entry:
                if not os.path.isabs(entry):
                    raise RewriteError(
                        f"needed entry {entry!r} has a separator but is "
                        "not absolute")
                if not os.path.isfile(entry):
                    raise RewriteError(
                        f"needed entry {entry!r} is not an existing file")
                key = effective_soname(entry)
            else:
                key = entry
            if key in seen_keys:
                raise DuplicateDedupKey(key, seen_keys[key], entry)
            seen_keys[key] = entry


def _align_up(value: int, align: int) -> int:
    if align <= 1:
        return value
    return (value + align - 1) & ~(align - 1)


def _find_string(table: bytes, name: str) -> int | None:
    """Offset of ``name`` inside a NUL-delimited string table, if present.

    Any position whose bytes spell the name followed by NUL works, which
    also picks up the usual shared-suffix encodings.
    """
    needle = name.encode("utf-8", errors="surrogateescape") + b"\0"
    if table.startswith(needle):
        return 0
    pos = table.find(b"\0" + needle)
    if pos >= 0:
        return pos + 1
    return None


def _compute_renames(old_needed: list[str],
                     new_needed: list[str]) -> dict[str, str]:
    """Map replaced needed names to their new spellings.

    Matching is by basename first, then by the target file's soname;
    names with no counterpart are left alone (version records keep
    binding through the soname in that case).
    """
    renames: dict[str, str] = {}
    replaced = [n for n in old_needed if n not in new_needed]
    candidates = [n for n in new_needed if n not in old_needed]
    for old in replaced:
        by_base = [c for c in candidates if os.path.basename(c) == old]
        if len(by_base) == 1:
            renames[old] = by_base[0]
            continue
        by_soname = [c for c in candidates
                     if "/" in c and os.path.isfile(c)
                     and effective_soname(c) == old]
        if len(by_soname) == 1:
            renames[old] = by_soname[0]
    return renames


class _Rewriter:
    def __init__(self, ef: ElfFile, plan: RewritePlan):
        self.ef = ef
        self.plan = plan
        self.layout = ef.layout
        self.old_info = ef.dynamic_info()
        self._addition_offsets: dict[str, int] = {}

    def build(self) -> bytes:
        ef = self.ef
        plan = self.plan
        if not ef.dyn:
            raise RewriteError(f"{plan.target}: no dynamic section to rewrite")

        additions: list[bytes] = []
        addition_offsets = self._addition_offsets
        next_off = len(ef.dynstr)

        def string_offset(name: str) -> int:
            nonlocal next_off
            found = _find_string(ef.dynstr, name)
            if found is not None:
                return found
            if name in addition_offsets:
                return addition_offsets[name]
            addition_offsets[name] = next_off
            raw = name.encode("utf-8", errors="surrogateescape") + b"\0"
            additions.append(raw)
            next_off += len(raw)
            return addition_offsets[name]

        needed_offsets = [string_offset(n) for n in plan.new_needed]

        runpath_offset: int | None = None
        if plan.new_runpath is not None:
            runpath_offset = string_offset(":".join(plan.new_runpath))

        entries = self._new_dyn_entries(needed_offsets, runpath_offset)
        grows = bool(additions)
        slots = self._dyn_slots()
        fits = len(entries) + 1 <= slots  # +1 for the DT_NULL terminator

        if not grows and fits:
            return self._write_in_place(entries)
        return self._write_trailer(entries, b"".join(additions))

    # -- dynamic entry list -------------------------------------------------

    def _new_dyn_entries(self, needed_offsets: list[int],
                         runpath_offset: int | None) -> list[tuple[int, int]]:
        plan = self.plan
        out: list[tuple[int, int]] = [(DT_NEEDED, off)
                                      for off in needed_offsets]
        runpath_emitted = False
        for tag, val in self.ef.dyn:
            if tag == DT_NEEDED:
                continue
            if tag == DT_RPATH:
                if plan.strip_rpath:
                    continue
                out.append((tag, val))
            elif tag == DT_RUNPATH:
                if runpath_offset is not None:
                    out.append((DT_RUNPATH, runpath_offset))
                    runpath_emitted = True
                elif plan.strip_runpath:
                    continue
                else:
                    out.append((tag, val))
            else:
                out.append((tag, val))
        if runpath_offset is not None and not runpath_emitted:
            out.append((DT_RUNPATH, runpath_offset))
        return out

    def _dyn_slots(self) -> int:
        for p in self.ef.phdrs:
            if p.p_type == PT_DYNAMIC:
                return p.p_filesz // self.layout.dyn_size
        return len(self.ef.dyn) + 1

    def _pack_dyn(self, entries: list[tuple[int, int]],
                  pad_to: int | None = None) -> bytes:
        chunks = [struct.pack(self.layout.dyn, tag, val)
                  for tag, val in entries]
        chunks.append(struct.pack(self.layout.dyn, DT_NULL, 0))
        if pad_to is not None:
            while len(chunks) < pad_to:
                chunks.append(struct.pack(self.layout.dyn, DT_NULL, 0))
        return b"".join(chunks)

    # -- write modes ---------------------------------------------------------

    def _write_in_place(self, entries: list[tuple[int, int]]) -> bytes:
        out = bytearray(self.ef.data)
        for p in self.ef.phdrs:
            if p.p_type == PT_DYNAMIC:
                blob = self._pack_dyn(entries,
                                      pad_to=p.p_filesz // self.layout.dyn_size)
                out[p.p_offset:p.p_offset + len(blob)] = blob
                break
        self._patch_verneed(out, strtab_is_old=True)
        return bytes(out)

    def _write_trailer(self, entries: list[tuple[int, int]],
                       string_additions: bytes) -> bytes:
        ef = self.ef
        layout = self.layout
        if ef.e_phnum >= 0xFFFE:
            raise DynamicSectionFull(
                f"{self.plan.target}: program header table cannot grow")

        page = max((p.p_align for p in ef.phdrs if p.p_type == PT_LOAD),
                   default=0x1000) or 0x1000
        max_vaddr = max((p.p_vaddr + p.p_memsz for p in ef.phdrs
                         if p.p_type == PT_LOAD), default=0)

        seg_off = _align_up(len(ef.data), 8)
        seg_vaddr = _align_up(max_vaddr, page) + (seg_off % page)

        phdr_bytes_len = (ef.e_phnum + 1) * layout.phdr_size
        dyn_off = _align_up(seg_off + phdr_bytes_len, 8)
        dyn_len = (len(entries) + 1) * layout.dyn_size
        str_off = dyn_off + dyn_len
        new_dynstr_len = len(ef.dynstr) + len(string_additions)
        seg_end = str_off + new_dynstr_len
        seg_size = seg_end - seg_off

        if seg_end > layout.max_offset or seg_vaddr + seg_size > layout.max_offset:
            raise StringTableOverflow(
                f"{self.plan.target}: rewritten tables exceed the "
                f"{layout.elf_class}-bit offset range")

        def vaddr_of(off: int) -> int:
            return seg_vaddr + (off - seg_off)

        patched = []
        for tag, val in entries:
            if tag == DT_STRTAB:
                val = vaddr_of(str_off)
            elif tag == DT_STRSZ:
                val = new_dynstr_len
            patched.append((tag, val))

        new_phdrs = []
        for p in ef.phdrs:
            q = Phdr(**vars(p))
            if q.p_type == PT_PHDR:
                q.p_offset = seg_off
                q.p_vaddr = q.p_paddr = seg_vaddr
                q.p_filesz = q.p_memsz = phdr_bytes_len
            elif q.p_type == PT_DYNAMIC:
                q.p_offset = dyn_off
                q.p_vaddr = q.p_paddr = vaddr_of(dyn_off)
                q.p_filesz = q.p_memsz = dyn_len
            new_phdrs.append(q)
        new_phdrs.append(Phdr(
            p_type=PT_LOAD, p_flags=PF_R | PF_W, p_offset=seg_off,
            p_vaddr=seg_vaddr, p_paddr=seg_vaddr, p_filesz=seg_size,
            p_memsz=seg_size, p_align=page))

        out = bytearray(ef.data)

        # ELF header: program headers moved and grew by one.
        ehdr_vals = list(struct.unpack_from(layout.ehdr, out, 16))
        ehdr_vals[4] = seg_off  # e_phoff
        ehdr_vals[9] = ef.e_phnum + 1  # e_phnum
        struct.pack_into(layout.ehdr, out, 16, *ehdr_vals)

        self._patch_shdrs(out, dyn_off, vaddr_of(dyn_off), dyn_len,
                          str_off, vaddr_of(str_off), new_dynstr_len)
        self._patch_verneed(out, strtab_is_old=False)

        out += b"\0" * (seg_off - len(out))
        for q in new_phdrs:
            out += layout.pack_phdr(q)
        out += b"\0" * (dyn_off - len(out))
        out += self._pack_dyn(patched)
        out += ef.dynstr[:]
        out += string_additions
        return bytes(out)

    def _patch_shdrs(self, out: bytearray, dyn_off: int, dyn_vaddr: int,
                     dyn_len: int, str_off: int, str_vaddr: int,
                     str_len: int) -> None:
        ef = self.ef
        if not ef.shdrs:
            return
        for idx, s in enumerate(ef.shdrs):
            if s.sh_type != SHT_DYNAMIC:
                continue
            self._patch_one_shdr(out, idx, dyn_off, dyn_vaddr, dyn_len)
            if 0 < s.sh_link < len(ef.shdrs):
                link = ef.shdrs[s.sh_link]
                # Only repoint the linked strtab if it really was the
                # dynamic string table.
                if link.sh_offset == ef.dynstr_off:
                    self._patch_one_shdr(out, s.sh_link, str_off,
                                         str_vaddr, str_len)
            break

    def _patch_one_shdr(self, out: bytearray, index: int, offset: int,
                        vaddr: int, size: int) -> None:
        ef = self.ef
        s = ef.shdrs[index]
        s.sh_offset = offset
        s.sh_addr = vaddr
        s.sh_size = size
        pos = ef.e_shoff + index * ef.layout.shdr_size
        out[pos:pos + ef.layout.shdr_size] = ef.layout.pack_shdr(s)

    # -- version-needed repointing -------------------------------------------

    def _patch_verneed(self, out: bytearray, strtab_is_old: bool) -> None:
        ef = self.ef
        renames = _compute_renames(self.old_info.needed, self.plan.new_needed)
        if not renames:
            return
        vn_addr = ef.dyn_val(DT_VERNEED)
        vn_num = ef.dyn_val(DT_VERNEEDNUM)
        if vn_addr is None or not vn_num:
            return
        rename_offsets: dict[str, int] = {}
        for old, new in renames.items():
            if strtab_is_old:
                off = _find_string(ef.dynstr, new)
                if off is None:
                    raise RewriteError(
                        f"{self.plan.target}: replacement {new!r} missing "
                        "from the string table in an in-place rewrite")
            else:
                off = self._trailer_string_offset(new)
            rename_offsets[old] = off

        pos = ef.vaddr_to_offset(vn_addr)
        endian = "<" if ef.layout.little else ">"
        for _ in range(vn_num):
            vn_version, vn_cnt, vn_file, vn_aux, vn_next = struct.unpack_from(
                endian + "HHIII", out, pos)
            if vn_version != 1:
                break
            name = ef.dyn_str(vn_file)
            if name in rename_offsets:
                struct.pack_into(endian + "I", out, pos + 4,
                                 rename_offsets[name])
            if vn_next == 0:
                break
            pos += vn_next

    def _trailer_string_offset(self, name: str) -> int:
        # Recompute the same offsets string_offset() handed out earlier.
        found = _find_string(self.ef.dynstr, name)
        if found is not None:
            return found
        return self._addition_offsets[name]


def apply_rewrite(plan: RewritePlan, output: str) -> str:
    """Apply a plan to its target, producing ``output`` atomically.

    The needed list of the output equals plan.new_needed exactly and in
    order; rpath/runpath survive according to the plan's dispositions.
    """
    plan.validate()
    ef = elffile.load(plan.target)
    data = _Rewriter(ef, plan).build()
    _write_atomic(data, output, mode_from=plan.target)
    return output


def append_needed(path: str, names: list[str], output: str | None = None) -> str:
    """Append names to a binary's needed list, preserving the original order.

    Each name must be a bare soname or an absolute path; this is the
    escape hatch for dependencies only reachable through programmatic
    loading, added before freezing so they get frozen too.
    """
    if not names:
        raise EmptyNameList("append_needed requires at least one name")
    for name in names:
        if "/" in name and not os.path.isabs(name):
            raise RewriteError(
                f"{name!r} has a path separator but is not absolute")
    info = elffile.load(path).dynamic_info()
    plan = RewritePlan(target=path, new_needed=info.needed + list(names))
    return apply_rewrite(plan, output or path)


def _write_atomic(data: bytes, output: str, mode_from: str) -> None:
    dest_dir = os.path.dirname(os.path.abspath(output)) or "."
    try:
        fd, tmp = tempfile.mkstemp(prefix=".sofreeze-", dir=dest_dir)
    except (PermissionError, OSError) as exc:
        raise ReadOnlyTarget(f"cannot write into {dest_dir}: {exc}") from exc
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        mode = os.stat(mode_from).st_mode & 0o7777
        os.chmod(tmp, mode)
        os.replace(tmp, output)
    except PermissionError as exc:
        os.unlink(tmp)
        raise ReadOnlyTarget(f"cannot replace {output}: {exc}") from exc
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise

"""Read the ELF structures that matter for dynamic linking.

Only the pieces the dynamic loader itself consumes are modeled: the file
header identity, program headers, the dynamic entry array, its string
table, the interpreter, and the dynamic symbol table. Section headers are
parsed when present (rewrites keep them consistent) but resolution never
depends on them.

Both ELF classes and both byte orders are supported; see the System V
generic ABI for the struct layouts.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .errors import NotElf, TruncatedFile, UnsupportedClass, ElfParseError

ELF_MAGIC = b"\x7fELF"

ELFCLASS32 = 1
ELFCLASS64 = 2
ELFDATA2LSB = 1
ELFDATA2MSB = 2

ET_EXEC = 2
ET_DYN = 3

PT_LOAD = 1
PT_DYNAMIC = 2
PT_INTERP = 3
PT_PHDR = 6

DT_NULL = 0
DT_NEEDED = 1
DT_STRTAB = 5
DT_STRSZ = 10
DT_SONAME = 14
DT_RPATH = 15
DT_RUNPATH = 29
DT_FLAGS = 30
DT_FLAGS_1 = 0x6FFFFFFB
DT_VERNEED = 0x6FFFFFFE
DT_VERNEEDNUM = 0x6FFFFFFF

DF_1_NODEFLIB = 0x0800
DF_1_PIE = 0x08000000

SHT_STRTAB = 3
SHT_DYNAMIC = 6
SHT_DYNSYM = 11
SHT_GNU_VERNEED = 0x6FFFFFFE

SHN_UNDEF = 0

STB_GLOBAL = 1
STB_WEAK = 2

PF_X = 1
PF_W = 2
PF_R = 4

KIND_EXECUTABLE = "executable"
KIND_SHARED_OBJECT = "shared_object"
KIND_PIE = "pie"


@dataclass(frozen=True)
class ElfIdentity:
    """Identity fields of an ELF object, as the loader compares them."""

    elf_class: int  # 32 or 64
    byte_order: str  # "little" or "big"
    machine: int  # raw e_machine code
    os_abi: int  # raw EI_OSABI code
    object_kind: str  # executable | shared_object | pie

    def compatible_with(self, other: "ElfIdentity") -> bool:
        """Loadability test: class, byte order and machine must agree."""
        return (
            self.elf_class == other.elf_class
            and self.byte_order == other.byte_order
            and self.machine == other.machine
        )


@dataclass
class DynamicInfo:
    """Per-object dynamic metadata, with on-disk order preserved.

    rpath/runpath hold the raw colon-split tokens, unexpanded; placeholder
    expansion happens at search time. ``None`` means the tag is absent,
    which the loader treats differently from an empty string.
    """

    needed: list[str] = field(default_factory=list)
    soname: str | None = None
    rpath: list[str] | None = None
    runpath: list[str] | None = None
    interpreter: str | None = None
    no_default_dirs: bool = False
    is_dynamic: bool = True


@dataclass
class DynSymbol:
    name: str
    bind: int
    defined: bool

    @property
    def strong(self) -> bool:
        return self.bind == STB_GLOBAL and self.defined


@dataclass
class Phdr:
    p_type: int
    p_flags: int
    p_offset: int
    p_vaddr: int
    p_paddr: int
    p_filesz: int
    p_memsz: int
    p_align: int


@dataclass
class Shdr:
    sh_name: int
    sh_type: int
    sh_flags: int
    sh_addr: int
    sh_offset: int
    sh_size: int
    sh_link: int
    sh_info: int
    sh_addralign: int
    sh_entsize: int


class Layout:
    """struct formats for one (class, byte order) combination."""

    def __init__(self, elf_class: int, little: bool):
        self.elf_class = elf_class
        self.little = little
        e = "<" if little else ">"
        if elf_class == 32:
            self.ehdr = e + "HHIIIIIHHHHHH"  # fields after the 16-byte ident
            self.phdr = e + "IIIIIIII"
            self.shdr = e + "IIIIIIIIII"
            self.dyn = e + "iI"
            self.sym = e + "IIIBBH"
            self.max_offset = 0xFFFFFFFF
        else:
            self.ehdr = e + "HHIQQQIHHHHHH"
            self.phdr = e + "IIQQQQQQ"
            self.shdr = e + "IIQQQQIIQQ"
            self.dyn = e + "qQ"
            self.sym = e + "IBBHQQ"
            self.max_offset = 0xFFFFFFFFFFFFFFFF
        self.verneed = e + "HHIII"
        self.vernaux = e + "IHHII"
        self.phdr_size = struct.calcsize(self.phdr)
        self.shdr_size = struct.calcsize(self.shdr)
        self.dyn_size = struct.calcsize(self.dyn)
        self.sym_size = struct.calcsize(self.sym)

    def pack_phdr(self, p: Phdr) -> bytes:
        if self.elf_class == 32:
            vals = (p.p_type, p.p_offset, p.p_vaddr, p.p_paddr,
                    p.p_filesz, p.p_memsz, p.p_flags, p.p_align)
        else:
            vals = (p.p_type, p.p_flags, p.p_offset, p.p_vaddr,
                    p.p_paddr, p.p_filesz, p.p_memsz, p.p_align)
        return struct.pack(self.phdr, *vals)

    def unpack_phdr(self, data: bytes, off: int) -> Phdr:
        vals = struct.unpack_from(self.phdr, data, off)
        if self.elf_class == 32:
            t, o, v, pa, fs, ms, fl, al = vals
        else:
            t, fl, o, v, pa, fs, ms, al = vals
        return Phdr(t, fl, o, v, pa, fs, ms, al)

    def pack_shdr(self, s: Shdr) -> bytes:
        return struct.pack(self.shdr, s.sh_name, s.sh_type, s.sh_flags,
                           s.sh_addr, s.sh_offset, s.sh_size, s.sh_link,
                           s.sh_info, s.sh_addralign, s.sh_entsize)

    def unpack_shdr(self, data: bytes, off: int) -> Shdr:
        return Shdr(*struct.unpack_from(self.shdr, data, off))


def _read_cstr(buf: bytes, off: int) -> str:
    end = buf.find(b"\0", off)
    if end < 0:
        raise TruncatedFile(f"unterminated string at offset {off}")
    return buf[off:end].decode("utf-8", errors="surrogateescape")


class ElfFile:
    """A parsed ELF image held fully in memory.

    Offsets are resolved through program headers, not section headers, so
    stripped objects parse identically to unstripped ones.
    """

    def __init__(self, data: bytes, path: str = "<memory>"):
        self.data = data
        self.path = path
        if len(data) < 16:
            raise NotElf(f"{path}: too short for an ELF header")
        if data[:4] != ELF_MAGIC:
            raise NotElf(f"{path}: bad magic {data[:4]!r}")
        ei_class = data[4]
        ei_data = data[5]
        self.ei_osabi = data[7]
        if ei_class == ELFCLASS32:
            elf_class = 32
        elif ei_class == ELFCLASS64:
            elf_class = 64
        else:
            raise UnsupportedClass(f"{path}: EI_CLASS={ei_class}")
        if ei_data == ELFDATA2LSB:
            little = True
        elif ei_data == ELFDATA2MSB:
            little = False
        else:
            raise ElfParseError(f"{path}: unknown EI_DATA={ei_data}")
        self.layout = Layout(elf_class, little)

        try:
            (self.e_type, self.e_machine, self.e_version, self.e_entry,
             self.e_phoff, self.e_shoff, self.e_flags, self.e_ehsize,
             self.e_phentsize, self.e_phnum, self.e_shentsize,
             self.e_shnum, self.e_shstrndx) = struct.unpack_from(
                self.layout.ehdr, data, 16)
        except struct.error as exc:
            raise TruncatedFile(f"{path}: ELF header cut short") from exc

        self.phdrs = self._read_phdrs()
        self.shdrs = self._read_shdrs()
        self.dyn = self._read_dyn()
        self.dynstr, self.dynstr_off = self._read_dynstr()

    # -- low-level tables --------------------------------------------------

    def _read_phdrs(self) -> list[Phdr]:
        if not self.e_phoff or not self.e_phnum:
            return []
        size = self.layout.phdr_size
        if self.e_phentsize != size:
            raise ElfParseError(
                f"{self.path}: e_phentsize {self.e_phentsize} != {size}")
        end = self.e_phoff + self.e_phnum * size
        if end > len(self.data):
            raise TruncatedFile(f"{self.path}: program headers end at {end}")
        return [self.layout.unpack_phdr(self.data, self.e_phoff + i * size)
                for i in range(self.e_phnum)]

    def _read_shdrs(self) -> list[Shdr]:
        if not self.e_shoff or not self.e_shnum:
            return []
        size = self.layout.shdr_size
        if self.e_shentsize != size:
            raise ElfParseError(
                f"{self.path}: e_shentsize {self.e_shentsize} != {size}")
        end = self.e_shoff + self.e_shnum * size
        if end > len(self.data):
            raise TruncatedFile(f"{self.path}: section headers end at {end}")
        return [self.layout.unpack_shdr(self.data, self.e_shoff + i * size)
                for i in range(self.e_shnum)]

    def _dynamic_phdr(self) -> Phdr | None:
        for p in self.phdrs:
            if p.p_type == PT_DYNAMIC:
                return p
        return None

    def _read_dyn(self) -> list[tuple[int, int]]:
        p = self._dynamic_phdr()
        if p is None:
            return []
        if p.p_offset + p.p_filesz > len(self.data):
            raise TruncatedFile(f"{self.path}: dynamic segment out of range")
        out: list[tuple[int, int]] = []
        step = self.layout.dyn_size
        for off in range(p.p_offset, p.p_offset + p.p_filesz, step):
            if off + step > len(self.data):
                break
            tag, val = struct.unpack_from(self.layout.dyn, self.data, off)
            if tag == DT_NULL:
                break
            out.append((tag, val))
        return out

    def dyn_val(self, tag: int) -> int | None:
        for t, v in self.dyn:
            if t == tag:
                return v
        return None

    def vaddr_to_offset(self, vaddr: int) -> int:
        for p in self.phdrs:
            if p.p_type == PT_LOAD and p.p_vaddr <= vaddr < p.p_vaddr + p.p_filesz:
                return p.p_offset + (vaddr - p.p_vaddr)
        raise ElfParseError(f"{self.path}: vaddr {vaddr:#x} not mapped")

    def _read_dynstr(self) -> tuple[bytes, int]:
        strtab = self.dyn_val(DT_STRTAB)
        strsz = self.dyn_val(DT_STRSZ)
        if strtab is None or strsz is None:
            return b"", 0
        off = self.vaddr_to_offset(strtab)
        if off + strsz > len(self.data):
            raise TruncatedFile(f"{self.path}: dynamic string table out of range")
        return self.data[off:off + strsz], off

    def dyn_str(self, offset: int) -> str:
        if offset >= len(self.dynstr):
            raise TruncatedFile(
                f"{self.path}: string offset {offset} beyond table")
        return _read_cstr(self.dynstr, offset)

    # -- the pieces resolution cares about ---------------------------------

    def identity(self) -> ElfIdentity:
        if self.e_type == ET_EXEC:
            kind = KIND_EXECUTABLE
        elif self.e_type == ET_DYN:
            flags1 = self.dyn_val(DT_FLAGS_1) or 0
            has_interp = any(p.p_type == PT_INTERP for p in self.phdrs)
            kind = KIND_PIE if (flags1 & DF_1_PIE or has_interp) else KIND_SHARED_OBJECT
        else:
            raise ElfParseError(
                f"{self.path}: e_type {self.e_type} is not an executable "
                "or shared object")
        return ElfIdentity(
            elf_class=self.layout.elf_class,
            byte_order="little" if self.layout.little else "big",
            machine=self.e_machine,
            os_abi=self.ei_osabi,
            object_kind=kind,
        )

    def interpreter(self) -> str | None:
        for p in self.phdrs:
            if p.p_type == PT_INTERP:
                if p.p_offset + p.p_filesz > len(self.data):
                    raise TruncatedFile(f"{self.path}: PT_INTERP out of range")
                raw = self.data[p.p_offset:p.p_offset + p.p_filesz]
                return raw.rstrip(b"\0").decode("utf-8",
                                                errors="surrogateescape")
        return None

    def dynamic_info(self) -> DynamicInfo:
        info = DynamicInfo(interpreter=self.interpreter(),
                           is_dynamic=bool(self.dyn) or self._dynamic_phdr() is not None)
        for tag, val in self.dyn:
            if tag == DT_NEEDED:
                info.needed.append(self.dyn_str(val))
            elif tag == DT_SONAME:
                info.soname = self.dyn_str(val)
            elif tag == DT_RPATH:
                info.rpath = self.dyn_str(val).split(":")
            elif tag == DT_RUNPATH:
                info.runpath = self.dyn_str(val).split(":")
            elif tag == DT_FLAGS_1:
                if val & DF_1_NODEFLIB:
                    info.no_default_dirs = True
        return info

    # -- dynamic symbols (for shadowing analysis) ---------------------------

    def dynamic_symbols(self) -> list[DynSymbol]:
        """Symbols the loader can bind at runtime; empty if none declared."""
        dynsym = None
        for s in self.shdrs:
            if s.sh_type == SHT_DYNSYM:
                dynsym = s
                break
        if dynsym is None:
            return []
        if dynsym.sh_link >= len(self.shdrs):
            raise ElfParseError(f"{self.path}: bad dynsym sh_link")
        strsec = self.shdrs[dynsym.sh_link]
        strtab = self.data[strsec.sh_offset:strsec.sh_offset + strsec.sh_size]
        out = []
        size = self.layout.sym_size
        count = dynsym.sh_size // size
        for i in range(1, count):  # index 0 is the null symbol
            off = dynsym.sh_offset + i * size
            if off + size > len(self.data):
                raise TruncatedFile(f"{self.path}: dynsym out of range")
            vals = struct.unpack_from(self.layout.sym, self.data, off)
            if self.layout.elf_class == 32:
                st_name, _value, _size, st_info, _other, st_shndx = vals
            else:
                st_name, st_info, _other, st_shndx, _value, _size = vals
            if not st_name:
                continue
            name = _read_cstr(strtab, st_name)
            out.append(DynSymbol(name=name, bind=st_info >> 4,
                                 defined=st_shndx != SHN_UNDEF))
        return out


def load(path: str) -> ElfFile:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except IsADirectoryError as exc:
        raise NotElf(f"{path}: is a directory") from exc
    return ElfFile(data, path=str(path))


def parse_object(path: str) -> tuple[ElfIdentity, DynamicInfo]:
    """Read identity and dynamic metadata from an ELF file on disk.

    A statically linked executable comes back with an empty needed list
    and no interpreter; use DynamicInfo.is_dynamic to tell it apart from
    a dependency-free dynamic object.
    """
    ef = load(path)
    return ef.identity(), ef.dynamic_info()

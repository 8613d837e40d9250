"""Exception types raised across the package.

Everything inherits from SofreezeError so callers can catch broadly; the
CLI maps parse failures to exit 65 and keeps the rest as ordinary errors.
"""


class SofreezeError(Exception):
    """Base class for all errors raised by this package."""


# --- ELF parsing ---------------------------------------------------------


class ElfParseError(SofreezeError):
    """The file is not an ELF object we can model."""


class NotElf(ElfParseError):
    """Bad magic bytes."""


class TruncatedFile(ElfParseError):
    """The file ends before a structure it declares."""


class UnsupportedClass(ElfParseError):
    """Neither a 32-bit nor a 64-bit ELF."""


# --- rewriting -----------------------------------------------------------


class RewriteError(SofreezeError):
    """A binary rewrite could not be applied."""


class DynamicSectionFull(RewriteError):
    """Cannot grow the dynamic entry array even after relocation."""


class StringTableOverflow(RewriteError):
    """New strings cannot be addressed within the object's offset width."""


class ReadOnlyTarget(RewriteError):
    """The output location refuses writes."""


class EmptyNameList(RewriteError):
    """append_needed was given nothing to append."""


# --- loader emulation ----------------------------------------------------


class UnresolvableOrigin(SofreezeError):
    """$ORIGIN appeared but the contributing object's path is unknown."""


class CyclicInclude(SofreezeError):
    """A loader config file includes itself, directly or indirectly."""


# --- closure -------------------------------------------------------------


class RootNotDynamic(SofreezeError):
    """The root object has no dynamic section; there is nothing to resolve."""


class InterpreterMissing(SofreezeError):
    """The root names no program interpreter, or it does not exist."""


class InterpreterNotRunnable(SofreezeError):
    """The program interpreter cannot execute on this host."""


class UnparseableListing(SofreezeError):
    """The interpreter's list output did not contain resolution lines."""


class TracesUnavailable(SofreezeError):
    """Probe counts were requested from a traceless (interpreter) order."""


# --- planning ------------------------------------------------------------


class IncompleteClosure(SofreezeError):
    """A plan or view was requested over a closure with unresolved names."""

    def __init__(self, unresolved: list[str]):
        self.unresolved = list(unresolved)
        super().__init__(
            "closure has unresolved entries: " + ", ".join(self.unresolved)
        )


class DuplicateDedupKey(SofreezeError):
    """Two distinct files in a plan share the same effective soname."""

    def __init__(self, key: str, first: str, second: str):
        self.key = key
        self.paths = (first, second)
        super().__init__(f"duplicate dedup key {key!r}: {first} and {second}")


class ShadowedDependency(SofreezeError):
    """Strict planning refused a closure with cache-shadowed requests."""


class ViewConflict(SofreezeError):
    """Two closure entries collide on one symlink name in a view."""

    def __init__(self, name: str, first: str, second: str):
        self.name = name
        self.paths = (first, second)
        super().__init__(
            f"view name {name!r} is claimed by both {first} and {second}"
        )


# --- audits and fixtures -------------------------------------------------


class TooManyDirs(SofreezeError):
    """The paradox check is brute force and refuses more than 8 dirs."""


class ToolchainMissing(SofreezeError):
    """No compiler capable of producing shared objects was found."""

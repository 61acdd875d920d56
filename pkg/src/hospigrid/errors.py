"""Exception hierarchy.

Every error carries a stable ``code`` used by the console and by the wire
protocol (remote handlers re-raise the same class on the calling side).
"""

from __future__ import annotations


class HospigridError(Exception):
    code = "E_INTERNAL"

    def wire_args(self) -> list[str]:
        return [str(a) for a in self.args]


class MalformedContainer(HospigridError):
    code = "E_FORMAT"

    def __init__(self, offset: int, detail: str = ""):
        super().__init__(offset, detail)
        self.offset = int(offset)
        self.detail = detail

    def __str__(self) -> str:
        return f"malformed container at byte {self.offset}: {self.detail}"


class MissingRequiredTag(HospigridError):
    code = "E_TAG"

    def __init__(self, tag: str):
        super().__init__(tag)
        self.tag = tag

    def __str__(self) -> str:
        return f"missing required tag {self.tag}"


class InvalidTagValue(HospigridError):
    code = "E_TAG"


class DuplicateImageId(HospigridError):
    code = "E_DUPIMG"


class InvalidLfn(HospigridError):
    code = "E_LFN"


class DuplicateLfn(HospigridError):
    code = "E_DUPLFN"


class UnknownLfn(HospigridError):
    code = "E_NOLFN"


class StorageFull(HospigridError):
    code = "E_STORAGE"


class AlreadyReplicated(HospigridError):
    code = "E_REPLICATED"


class SiteUnavailable(HospigridError):
    code = "E_UNAVAILABLE"


class NotAllowlisted(HospigridError):
    code = "E_ALLOW"


class NotAuthorized(HospigridError):
    """Raised when :func:`hospigrid.federation.authorize` denies an operation."""

    code = "E_RIGHTS"
    _codes = {"MissingRight": "E_RIGHTS", "VoBoundary": "E_VO", "NotAllowlisted": "E_ALLOW"}

    def __init__(self, reason: str, detail: str = ""):
        super().__init__(reason, detail)
        self.reason = reason
        self.code = self._codes.get(reason, "E_RIGHTS")

    def __str__(self) -> str:
        return f"{self.reason}: {self.args[1]}" if self.args[1] else self.reason


class QueryError(HospigridError):
    code = "E_QUERY"


class UnknownTable(QueryError):
    pass


class UnknownColumn(QueryError):
    pass


class DepthExceeded(QueryError):
    pass


class InvalidLiteral(QueryError):
    pass


class SchemaMismatch(QueryError):
    pass


class ColumnMismatch(QueryError):
    pass


class MalformedDocument(HospigridError):
    code = "E_FORMAT"


class MalformedConfig(HospigridError):
    code = "E_CONFIG"


class MissingCentral(MalformedConfig):
    pass


class CyclicVoHierarchy(MalformedConfig):
    pass


class RevokedCertificate(HospigridError):
    code = "E_CERT"


class UnknownUser(HospigridError):
    code = "E_USER"


class NoLiveSites(HospigridError):
    code = "E_NOSITES"


class SealError(HospigridError):
    code = "E_SEAL"


class NoSession(HospigridError):
    code = "E_SESSION"


class CommandSyntax(HospigridError):
    code = "E_SYNTAX"


def _all_subclasses(cls):
    for sub in cls.__subclasses__():
        yield sub
        yield from _all_subclasses(sub)


def error_by_name(name: str) -> type[HospigridError]:
    for cls in _all_subclasses(HospigridError):
        if cls.__name__ == name:
            return cls
    return HospigridError


def rebuild(name: str, args: list[str]) -> HospigridError:
    """Recreate an error received over the wire."""
    cls = error_by_name(name)
    if cls is MalformedContainer:
        return cls(int(args[0]), args[1] if len(args) > 1 else "")
    if cls is NotAuthorized:
        return cls(args[0], args[1] if len(args) > 1 else "")
    return cls(*args)

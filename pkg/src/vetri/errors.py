"""Exception hierarchy shared by all vetri modules.

Every error carries an ``exit_code`` so the CLI can map failures onto its
documented process exit codes: 64 usage, 65 data/parse, 69 unavailable
(network), 70 internal, 75 store locked.
"""

EXIT_OK = 0
EXIT_USAGE = 64
EXIT_DATA = 65
EXIT_UNAVAILABLE = 69
EXIT_INTERNAL = 70
EXIT_LOCKED = 75


class VetriError(Exception):
    exit_code = EXIT_INTERNAL


class DataError(VetriError):
    """Malformed input data (files, feeds, reports, wire payloads)."""

    exit_code = EXIT_DATA


class ParseError(DataError):
    pass


class SchemaError(DataError):
    pass


class SchemaVersionError(DataError):
    pass


class MalformedVersion(DataError):
    pass


class CorruptLayer(DataError):
    pass


class UnsupportedMediaType(DataError):
    pass


class CorruptArchive(DataError):
    pass


class DigestMismatch(DataError):
    """Stored blob bytes do not hash to the digest they were requested under."""


class ProtocolError(DataError):
    """Registry answered, but the response body is not what the protocol promises."""


class NoMatchingPlatform(DataError):
    """Multi-arch manifest list has no entry for the configured platform."""


class ImageMismatch(DataError):
    """Inputs that must refer to the same image refer to different ones."""


class UnavailableError(VetriError):
    exit_code = EXIT_UNAVAILABLE


class NetworkError(UnavailableError):
    """Transport-level failure talking to a registry or feed URL."""


class AuthError(UnavailableError):
    """Token challenge could not be satisfied."""


class NotFound(UnavailableError):
    """Remote repository, tag, or blob does not exist."""


class UnknownTool(VetriError):
    """Evaluation config names a tool with no ingested report."""

    exit_code = EXIT_USAGE


class UndefinedRatio(VetriError):
    """hits + misses = 0: there is nothing to evaluate, which is distinct
    from having detected nothing."""


class StoreLocked(VetriError):
    exit_code = EXIT_LOCKED

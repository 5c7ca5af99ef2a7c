"""Shared domain types and the normalization rules every other module consumes.

All types are immutable value objects after construction; they are safe to
share between concurrent tasks without synchronization. Each type has a
canonical JSON rendering (``to_json`` / ``from_json``) used by every report
file the store writes.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from typing import Any, Optional

from .errors import SchemaError

CVE_PATTERN = re.compile(r"^CVE-\d{4}-\d{4,}$")
DIGEST_PATTERN = re.compile(r"^sha256:[0-9a-f]{64}$")


class Severity(enum.IntEnum):
    """Categorical severity with a total order (no CVSS vectors or scores).

    Negligible sits between Unknown and Low because Debian-derived feeds use
    it; it is filtered whenever Low is.
    """

    UNKNOWN = 0
    NEGLIGIBLE = 1
    LOW = 2
    MEDIUM = 3
    HIGH = 4
    CRITICAL = 5


_CANONICAL_SEVERITY = {
    Severity.UNKNOWN: "Unknown",
    Severity.NEGLIGIBLE: "Negligible",
    Severity.LOW: "Low",
    Severity.MEDIUM: "Medium",
    Severity.HIGH: "High",
    Severity.CRITICAL: "Critical",
}

_SEVERITY_ALIASES = {
    "unknown": Severity.UNKNOWN,
    "negligible": Severity.NEGLIGIBLE,
    "low": Severity.LOW,
    "medium": Severity.MEDIUM,
    "moderate": Severity.MEDIUM,
    "high": Severity.HIGH,
    "critical": Severity.CRITICAL,
}


def normalize_severity(raw: str) -> Severity:
    """Map any tool or feed severity label onto the canonical scale.

    Total function: case-insensitive, unrecognized labels degrade to Unknown.
    """
    if raw is None:
        return Severity.UNKNOWN
    return _SEVERITY_ALIASES.get(raw.strip().lower(), Severity.UNKNOWN)


def render_severity(severity: Severity) -> str:
    """Inverse of normalize_severity on the six canonical levels."""
    return _CANONICAL_SEVERITY[severity]


class Ecosystem(enum.Enum):
    DPKG = "Dpkg"
    APK = "Apk"
    MAVEN_ARCHIVE = "MavenArchive"


class PackageClass(enum.Enum):
    OS = "OS"
    LIBRARY = "Library"
    APPLICATION = "Application"


# OS package managers never produce Library/Application records and archive
# extraction never produces OS records.
_ALLOWED_CLASSES = {
    Ecosystem.DPKG: {PackageClass.OS},
    Ecosystem.APK: {PackageClass.OS},
    Ecosystem.MAVEN_ARCHIVE: {PackageClass.LIBRARY, PackageClass.APPLICATION},
}


@dataclass(frozen=True)
class ImageRef:
    """Registry-qualified image name; identity for all per-image data.

    ``key()`` uses the digest when available (digest pinning survives tag
    mutation), else "repository:tag".
    """

    repository: str
    tag: str = "latest"
    registry: str = ""
    digest: Optional[str] = None

    def __post_init__(self) -> None:
        if not self.repository or any(c.isspace() for c in self.repository):
            raise ValueError(f"invalid repository: {self.repository!r}")
        if not self.tag:
            object.__setattr__(self, "tag", "latest")
        if self.digest is not None and not DIGEST_PATTERN.match(self.digest):
            raise ValueError(f"malformed digest: {self.digest!r}")

    @classmethod
    def parse(cls, ref: str, registry: str = "") -> "ImageRef":
        """Parse "[host/]repo[:tag][@sha256:...]" into an ImageRef.

        A leading component is treated as a registry host only when it
        contains a dot, a colon, or is "localhost".
        """
        digest = None
        if "@" in ref:
            ref, digest = ref.split("@", 1)
        host = registry
        first, _, rest = ref.partition("/")
        if rest and ("." in first or ":" in first or first == "localhost"):
            host, ref = first, rest
        # the tag colon is after the last "/"
        name, _, tag = ref.rpartition("/")[2].partition(":")
        repository = ref if not tag else ref[: len(ref) - len(tag) - 1]
        return cls(repository=repository, tag=tag or "latest", registry=host, digest=digest)

    def key(self) -> str:
        return self.digest if self.digest else f"{self.repository}:{self.tag}"

    def to_json(self) -> dict[str, Any]:
        return {
            "registry": self.registry,
            "repository": self.repository,
            "tag": self.tag,
            "digest": self.digest,
        }

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "ImageRef":
        try:
            return cls(
                repository=obj["repository"],
                tag=obj.get("tag") or "latest",
                registry=obj.get("registry", ""),
                digest=obj.get("digest"),
            )
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"bad image object: {exc}") from exc


@dataclass(frozen=True)
class PackageRecord:
    """One installed package discovered in an image filesystem.

    A version of "unknown" marks a low-confidence record (archive without
    build metadata); such records are excluded from vulnerability matching
    but still counted in coverage reports.
    """

    name: str
    version: str
    ecosystem: Ecosystem
    pkg_class: PackageClass
    source_path: str = ""

    def __post_init__(self) -> None:
        if not self.name:
            raise ValueError("package name must be non-empty")
        if not self.version:
            raise ValueError("package version must be non-empty")
        if self.pkg_class not in _ALLOWED_CLASSES[self.ecosystem]:
            raise ValueError(
                f"{self.ecosystem.value} packages cannot be class {self.pkg_class.value}"
            )

    def to_json(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "version": self.version,
            "ecosystem": self.ecosystem.value,
            "class": self.pkg_class.value,
            "source_path": self.source_path,
        }

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "PackageRecord":
        try:
            return cls(
                name=obj["name"],
                version=obj["version"],
                ecosystem=Ecosystem(obj["ecosystem"]),
                pkg_class=PackageClass(obj["class"]),
                source_path=obj.get("source_path", ""),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise SchemaError(f"bad package object: {exc}") from exc


class FixState(enum.Enum):
    FIXED_AVAILABLE = "FixedAvailable"
    NO_FIX_AVAILABLE = "NoFixAvailable"
    UNKNOWN = "Unknown"


@dataclass(frozen=True)
class Fix:
    """Fix availability for one detection; fixed_in_version only accompanies
    FixedAvailable."""

    state: FixState
    fixed_in_version: Optional[str] = None

    def __post_init__(self) -> None:
        if self.state is FixState.FIXED_AVAILABLE and not self.fixed_in_version:
            raise ValueError("FixedAvailable requires fixed_in_version")
        if self.state is not FixState.FIXED_AVAILABLE and self.fixed_in_version:
            raise ValueError(f"{self.state.value} cannot carry fixed_in_version")

    @classmethod
    def fixed(cls, version: str) -> "Fix":
        return cls(FixState.FIXED_AVAILABLE, version)

    @classmethod
    def none_available(cls) -> "Fix":
        return cls(FixState.NO_FIX_AVAILABLE)

    @classmethod
    def unknown(cls) -> "Fix":
        return cls(FixState.UNKNOWN)

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {"state": self.state.value}
        if self.fixed_in_version is not None:
            out["fixed_in_version"] = self.fixed_in_version
        return out

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "Fix":
        try:
            return cls(FixState(obj["state"]), obj.get("fixed_in_version"))
        except (KeyError, ValueError, TypeError) as exc:
            raise SchemaError(f"bad fix object: {exc}") from exc


@dataclass(frozen=True)
class Detection:
    """One reported vulnerability: {image, package name, package version,
    CVE identifier} plus the reporting tool, severity, and fix status.

    cve_id is uppercased on ingest (feeds disagree on case). Identifiers not
    matching the CVE pattern are accepted as vendor advisory ids and flagged
    via ``is_cve``.
    """

    image: ImageRef
    package_name: str
    package_version: str
    cve_id: str
    tool_id: str
    severity: Severity = Severity.UNKNOWN
    fix: Fix = Fix.unknown()

    def __post_init__(self) -> None:
        if not self.package_name:
            raise ValueError("package_name must be non-empty")
        if not self.cve_id:
            raise ValueError("cve_id must be non-empty")
        object.__setattr__(self, "cve_id", self.cve_id.upper())

    @property
    def is_cve(self) -> bool:
        return bool(CVE_PATTERN.match(self.cve_id))

    def to_json(self) -> dict[str, Any]:
        return {
            "image": self.image.to_json(),
            "package_name": self.package_name,
            "package_version": self.package_version,
            "cve_id": self.cve_id,
            "tool_id": self.tool_id,
            "severity": render_severity(self.severity),
            "fix": self.fix.to_json(),
        }

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "Detection":
        try:
            return cls(
                image=ImageRef.from_json(obj["image"]),
                package_name=obj["package_name"],
                package_version=obj["package_version"],
                cve_id=obj["cve_id"],
                tool_id=obj["tool_id"],
                severity=normalize_severity(obj.get("severity", "")),
                fix=Fix.from_json(obj["fix"]) if "fix" in obj else Fix.unknown(),
            )
        except SchemaError:
            raise
        except (KeyError, ValueError, TypeError) as exc:
            raise SchemaError(f"bad detection object: {exc}") from exc


class JoinKey(enum.Enum):
    """Field projection under which detections from different tools count as
    the same vulnerability.

    Tools disagree on package naming for one CVE (a scanner may fan one CVE
    across every library related to a package), so CVE_ONLY merges those
    while FULL_TUPLE keeps them distinct.
    """

    CVE_ONLY = "CveOnly"
    FULL_TUPLE = "FullTuple"


def project_key(detection: Detection, key: JoinKey) -> tuple:
    """Pure, total projection of a Detection under the given join key.

    tool_id is never part of the key; image identity is digest when pinned,
    else repository:tag.
    """
    image_key = detection.image.key()
    if key is JoinKey.CVE_ONLY:
        return (image_key, detection.cve_id)
    return (
        image_key,
        detection.package_name,
        detection.package_version,
        detection.cve_id,
    )

"""Normalizes external evidence into detection sets.

One table-driven adapter per tool family (generic interchange, clair-style,
anchore-style), plus the static-analysis XML reader for application code
findings. Adding a tool should mean adding a mapping, not touching metrics.

Application findings are kept distinct from detections: they carry no CVE
identity, so minting fake CVE ids would corrupt the hit-ratio join. They
enter only the coverage and landscape computations.
"""

from __future__ import annotations

import logging
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any, Optional, Sequence

from .errors import ParseError, SchemaError
from .jsonio import read_json, write_json
from .model import (
    Detection,
    Fix,
    ImageRef,
    JoinKey,
    PackageClass,
    Severity,
    normalize_severity,
    project_key,
    render_severity,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class IngestStats:
    """Losslessness accounting: raw = kept + dedup_collapsed + rejected."""

    raw_records: int
    kept: int
    dedup_collapsed: int
    rejected: int


@dataclass(frozen=True)
class ToolReport:
    """All detections one tool reported for one image.

    Provenance fields (raw_source, ingested_at, stats, class_hints) do not
    participate in equality; two reports are the same report when tool,
    image, and detections agree.
    """

    tool_id: str
    image: ImageRef
    detections: tuple[Detection, ...]
    raw_source: str = field(default="", compare=False)
    ingested_at: str = field(default="", compare=False)
    stats: Optional[IngestStats] = field(default=None, compare=False)
    class_hints: dict[str, PackageClass] = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        for det in self.detections:
            if det.tool_id != self.tool_id:
                raise ValueError(f"detection tool {det.tool_id!r} != report tool {self.tool_id!r}")
            if det.image != self.image:
                raise ValueError(f"detection image {det.image.key()} != report image {self.image.key()}")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _dedup(detections: Sequence[Detection]) -> tuple[list[Detection], int]:
    seen: dict[tuple, Detection] = {}
    collapsed = 0
    for det in detections:
        key = project_key(det, JoinKey.FULL_TUPLE)
        if key in seen:
            collapsed += 1
        else:
            seen[key] = det
    return list(seen.values()), collapsed


def _finish_report(
    tool_id: str,
    image: ImageRef,
    detections: Sequence[Detection],
    raw_source: str,
    raw_count: int,
    rejected: int = 0,
    class_hints: Optional[dict[str, PackageClass]] = None,
) -> ToolReport:
    kept, collapsed = _dedup(detections)
    return ToolReport(
        tool_id=tool_id,
        image=image,
        detections=tuple(kept),
        raw_source=raw_source,
        ingested_at=_now(),
        stats=IngestStats(raw_count, len(kept), collapsed, rejected),
        class_hints=class_hints or {},
    )


def render_tool_report(report: ToolReport) -> list[dict[str, Any]]:
    """Canonical interchange form: a JSON array of detection objects."""
    return [d.to_json() for d in report.detections]


def write_tool_report(report: ToolReport, path) -> None:
    write_json(path, render_tool_report(report))


def ingest_generic(path: str, tool_id: str, image: ImageRef) -> ToolReport:
    """Read the canonical interchange report (array of detection objects).

    Records may omit image/tool_id (stamped from the arguments); carrying a
    different one is a schema violation. All offending record indices are
    reported in one error.
    """
    body = read_json(path)
    if not isinstance(body, list):
        raise SchemaError(f"{path}: generic report must be a JSON array")
    detections: list[Detection] = []
    bad: list[str] = []
    for index, record in enumerate(body):
        if not isinstance(record, dict):
            bad.append(f"record {index}: not an object")
            continue
        try:
            detections.append(_generic_detection(record, tool_id, image))
        except (SchemaError, KeyError, ValueError, TypeError) as exc:
            bad.append(f"record {index}: {exc}")
    if bad:
        raise SchemaError(f"{path}: " + "; ".join(bad))
    return _finish_report(tool_id, image, detections, path, raw_count=len(body))


def _generic_detection(record: dict, tool_id: str, image: ImageRef) -> Detection:
    for required in ("package_name", "package_version", "cve_id"):
        if required not in record:
            raise SchemaError(f"missing {required}")
    if "tool_id" in record and record["tool_id"] != tool_id:
        raise SchemaError(f"tool_id {record['tool_id']!r} conflicts with {tool_id!r}")
    if "image" in record:
        recorded = ImageRef.from_json(record["image"])
        if recorded.key() != image.key():
            raise SchemaError(f"image {recorded.key()} conflicts with {image.key()}")
    return Detection(
        image=image,
        package_name=record["package_name"],
        package_version=record["package_version"],
        cve_id=record["cve_id"],
        tool_id=tool_id,
        severity=normalize_severity(record.get("severity", "")),
        fix=Fix.from_json(record["fix"]) if "fix" in record else Fix.unknown(),
    )


def _normalize_severity_or_warn(raw: str, context: str) -> Severity:
    severity = normalize_severity(raw)
    if severity is Severity.UNKNOWN and raw and raw.strip().lower() != "unknown":
        log.warning("%s: unrecognized severity %r mapped to Unknown", context, raw)
    return severity


def ingest_clair_style(path: str, image: ImageRef, tool_id: str = "clair") -> ToolReport:
    """clair-scanner layout: top-level vulnerabilities array with
    vulnerability/featurename/featureversion/severity/fixedby fields."""
    body = read_json(path)
    if not isinstance(body, dict) or not isinstance(body.get("vulnerabilities"), list):
        raise SchemaError(f"{path}: expected an object with a vulnerabilities array")
    detections = []
    for index, item in enumerate(body["vulnerabilities"]):
        try:
            fixedby = item.get("fixedby", "")
            detections.append(
                Detection(
                    image=image,
                    package_name=item["featurename"],
                    package_version=item["featureversion"],
                    cve_id=item["vulnerability"],
                    tool_id=tool_id,
                    severity=_normalize_severity_or_warn(item.get("severity", ""), path),
                    fix=Fix.fixed(fixedby) if fixedby else Fix.none_available(),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"{path}: vulnerability {index}: {exc}") from exc
    return _finish_report(tool_id, image, detections, path, raw_count=len(body["vulnerabilities"]))


def ingest_anchore_style(path: str, image: ImageRef, tool_id: str = "anchore") -> ToolReport:
    """anchore vulnerabilities layout: vulnerabilities array with
    vuln/package_name/package_version/severity/fix fields; the report's
    os / non-os partition is preserved as a package class hint."""
    body = read_json(path)
    if not isinstance(body, dict) or not isinstance(body.get("vulnerabilities"), list):
        raise SchemaError(f"{path}: expected an object with a vulnerabilities array")
    partition = str(body.get("vulnerability_type", "os")).lower()
    hint_class = PackageClass.OS if partition == "os" else PackageClass.LIBRARY
    detections = []
    hints: dict[str, PackageClass] = {}
    for index, item in enumerate(body["vulnerabilities"]):
        try:
            fix_field = item.get("fix", "")
            has_fix = bool(fix_field) and fix_field != "None"
            name = item["package_name"]
            detections.append(
                Detection(
                    image=image,
                    package_name=name,
                    package_version=item["package_version"],
                    cve_id=item["vuln"],
                    tool_id=tool_id,
                    severity=_normalize_severity_or_warn(item.get("severity", ""), path),
                    fix=Fix.fixed(fix_field) if has_fix else Fix.none_available(),
                )
            )
            hints[name] = hint_class
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"{path}: vulnerability {index}: {exc}") from exc
    return _finish_report(
        tool_id, image, detections, path,
        raw_count=len(body["vulnerabilities"]), class_hints=hints,
    )


ADAPTERS = {
    "generic": ingest_generic,
    "clair": ingest_clair_style,
    "anchore": ingest_anchore_style,
}


@dataclass(frozen=True)
class AppFinding:
    """One static-analysis security finding in application code."""

    project_id: str
    bug_kind: str
    location: str
    severity: Severity

    def to_json(self) -> dict[str, Any]:
        return {
            "project_id": self.project_id,
            "bug_kind": self.bug_kind,
            "location": self.location,
            "severity": render_severity(self.severity),
        }

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "AppFinding":
        try:
            return cls(
                project_id=obj["project_id"],
                bug_kind=obj["bug_kind"],
                location=obj.get("location", ""),
                severity=normalize_severity(obj.get("severity", "")),
            )
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"bad finding object: {exc}") from exc


# analyzer-specific bug type -> canonical kind
BUG_KIND_MAP = {
    "SQL_NONCONSTANT_STRING_PASSED_TO_EXECUTE": "SQL_INJECTION_A",
    "SQL_PREPARED_STATEMENT_GENERATED_FROM_NONCONSTANT_STRING": "SQL_INJECTION_B",
    "HRS_REQUEST_PARAMETER_TO_HTTP_HEADER": "HTTP_RESPONSE_SPLITTING",
    "HRS_REQUEST_PARAMETER_TO_COOKIE": "HTTP_RESPONSE_SPLITTING",
    "XSS_REQUEST_PARAMETER_TO_SEND_ERROR": "XSS",
    "XSS_REQUEST_PARAMETER_TO_SERVLET_WRITER": "XSS",
    "XSS_REQUEST_PARAMETER_TO_JSP_WRITER": "XSS",
}

# severity attribution for findings is not something scanner reports define;
# injection kinds default High, everything else Medium, overridable per kind
DEFAULT_KIND_SEVERITY = Severity.MEDIUM
HIGH_SEVERITY_KIND_MARKERS = ("INJECTION",)


def _finding_severity(kind: str, overrides: Optional[dict[str, Severity]]) -> Severity:
    if overrides and kind in overrides:
        return overrides[kind]
    if any(marker in kind for marker in HIGH_SEVERITY_KIND_MARKERS):
        return Severity.HIGH
    return DEFAULT_KIND_SEVERITY


def ingest_static_analysis(
    path: str,
    project_id: str,
    severity_overrides: Optional[dict[str, Severity]] = None,
    allowed_kinds: Optional[set[str]] = None,
) -> list[AppFinding]:
    """Read the analyzer's XML report, keeping only SECURITY-category bug
    instances; types are mapped onto canonical kinds."""
    try:
        tree = ET.parse(path)
    except (ET.ParseError, OSError) as exc:
        raise ParseError(f"{path}: {exc}") from exc
    findings: list[AppFinding] = []
    dropped = 0
    for bug in tree.getroot().iter("BugInstance"):
        if bug.get("category") != "SECURITY":
            continue
        raw_type = bug.get("type", "")
        kind = BUG_KIND_MAP.get(raw_type, raw_type)
        if allowed_kinds is not None and kind not in allowed_kinds:
            dropped += 1
            continue
        findings.append(
            AppFinding(
                project_id=project_id,
                bug_kind=kind,
                location=_bug_location(bug),
                severity=_finding_severity(kind, severity_overrides),
            )
        )
    if dropped:
        log.warning("%s: %d security findings outside the allowed kinds", path, dropped)
    return findings


def _bug_location(bug: ET.Element) -> str:
    cls = bug.find("Class")
    name = cls.get("classname", "") if cls is not None else ""
    line = bug.find(".//SourceLine")
    lineno = line.get("start", "") if line is not None else ""
    return f"{name}:{lineno}" if lineno else name


def write_findings(findings: Sequence[AppFinding], path) -> None:
    write_json(path, [f.to_json() for f in findings])


def read_findings(path) -> list[AppFinding]:
    body = read_json(path)
    if not isinstance(body, list):
        raise SchemaError(f"{path}: findings file must be a JSON array")
    return [AppFinding.from_json(item) for item in body]

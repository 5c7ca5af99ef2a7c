"""Vulnerability feed ingestion and the built-in reference matcher.

Feeds are immutable snapshots with content hashes so an evaluation can record
exactly which vulnerability data it ran against. Matching is exact-selector,
strict "installed < affected_below implies vulnerable": aliasing between
related package names is expressed as extra feed entries, never as fuzzy
matching in code.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Iterable, Optional, Sequence

from .errors import MalformedVersion, ParseError, SchemaVersionError
from .extractor import Inventory
from .jsonio import canonical_json, read_json
from .model import (
    Detection,
    Ecosystem,
    Fix,
    Severity,
    normalize_severity,
    render_severity,
)
from .registry import sha256_hex
from .versions import compare_versions

log = logging.getLogger(__name__)

FEED_SCHEMA_VERSION = 1

FORMAT_CANONICAL = "canonical"
FORMAT_NVD_SUBSET = "nvd"


@dataclass(frozen=True)
class VulnEntry:
    """One feed record: which versions of one package a CVE affects.

    Vulnerable iff installed < affected_below, or installed inside the
    half-open explicit range [min, max).
    """

    cve_id: str
    ecosystem: Ecosystem
    package_selector: str
    severity: Severity = Severity.UNKNOWN
    affected_below: Optional[str] = None
    affected_range: Optional[tuple[str, str]] = None
    fixed_in: Optional[str] = None
    description: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "cve_id", self.cve_id.upper())
        if self.affected_below is None and self.affected_range is None:
            raise ValueError(f"{self.cve_id}: needs affected_below or affected_range")
        if self.fixed_in is not None:
            # a fix release inside the affected range would be self-contradictory
            bound = self.affected_below if self.affected_below is not None else self.affected_range[1]
            if compare_versions(self.fixed_in, bound, self.ecosystem) < 0:
                raise ValueError(
                    f"{self.cve_id}: fixed_in {self.fixed_in} is inside the affected range"
                )

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "cve_id": self.cve_id,
            "ecosystem": self.ecosystem.value,
            "package_selector": self.package_selector,
            "severity": render_severity(self.severity),
            "description": self.description,
        }
        if self.affected_below is not None:
            out["affected_below"] = self.affected_below
        if self.affected_range is not None:
            out["affected_range"] = list(self.affected_range)
        if self.fixed_in is not None:
            out["fixed_in"] = self.fixed_in
        return out

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "VulnEntry":
        affected_range = obj.get("affected_range")
        return cls(
            cve_id=obj["cve_id"],
            ecosystem=Ecosystem(obj["ecosystem"]),
            package_selector=obj["package_selector"],
            severity=normalize_severity(obj.get("severity", "")),
            affected_below=obj.get("affected_below"),
            affected_range=tuple(affected_range) if affected_range else None,
            fixed_in=obj.get("fixed_in"),
            description=obj.get("description", ""),
        )


def feed_content_hash(entries: Sequence[VulnEntry]) -> str:
    return sha256_hex(canonical_json([e.to_json() for e in entries]))


@dataclass(frozen=True)
class FeedSnapshot:
    """Immutable, content-hashed copy of a vulnerability database."""

    feed_id: str
    fetched_at: str
    entries: tuple[VulnEntry, ...]
    content_hash: str

    @classmethod
    def create(cls, feed_id: str, fetched_at: str, entries: Iterable[VulnEntry]) -> "FeedSnapshot":
        entries = tuple(entries)
        return cls(feed_id, fetched_at, entries, feed_content_hash(entries))

    def verify(self) -> bool:
        return feed_content_hash(self.entries) == self.content_hash

    def to_json(self) -> dict[str, Any]:
        return {
            "feed_id": self.feed_id,
            "fetched_at": self.fetched_at,
            "entries": [e.to_json() for e in self.entries],
        }


def _fetch_source(source: str) -> Any:
    if str(source).startswith(("http://", "https://")):
        import requests

        from .errors import NetworkError

        try:
            resp = requests.get(str(source), timeout=60)
        except (requests.ConnectionError, requests.Timeout) as exc:
            raise NetworkError(f"feed fetch failed: {exc}") from exc
        try:
            return resp.json()
        except ValueError as exc:
            raise ParseError(f"{source}: {exc}") from exc
    return read_json(source)


def load_feed(source: str, format: str = FORMAT_CANONICAL) -> FeedSnapshot:
    """Load a feed from a file path or https URL in the declared format."""
    body = _fetch_source(source)
    if format == FORMAT_CANONICAL:
        return _load_canonical(body, default_id=str(source))
    if format == FORMAT_NVD_SUBSET:
        return _load_nvd_subset(body, default_id=str(source))
    raise ValueError(f"unknown feed format: {format}")


def _load_canonical(body: Any, default_id: str) -> FeedSnapshot:
    if not isinstance(body, dict):
        raise ParseError("canonical feed must be a JSON object")
    version = body.get("schema_version", FEED_SCHEMA_VERSION)
    if version != FEED_SCHEMA_VERSION:
        raise SchemaVersionError(f"unsupported feed schema_version: {version}")
    entries = []
    for index, item in enumerate(body.get("entries", [])):
        try:
            entries.append(VulnEntry.from_json(item))
        except (KeyError, ValueError, TypeError) as exc:
            raise ParseError(f"feed entry {index}: {exc}") from exc
    return FeedSnapshot.create(
        feed_id=body.get("feed_id", default_id),
        fetched_at=body.get("fetched_at", ""),
        entries=entries,
    )


def _load_nvd_subset(body: Any, default_id: str) -> FeedSnapshot:
    """Map NVD-style CVE items with CPE version bounds onto feed entries.

    Only application CPEs (part "a") have a derivable vendor:product
    selector; items without one are dropped with a counted warning.
    versionEndExcluding doubles as affected_below and the first fixed
    version.
    """
    if not isinstance(body, dict) or "CVE_Items" not in body:
        raise ParseError("NVD subset feed must be an object with CVE_Items")
    data_version = str(body.get("CVE_data_version", "4.0"))
    if not data_version.startswith("4"):
        raise SchemaVersionError(f"unsupported CVE_data_version: {data_version}")
    entries: list[VulnEntry] = []
    dropped = 0
    for index, item in enumerate(body["CVE_Items"]):
        try:
            cve_id = item["cve"]["CVE_data_meta"]["ID"]
            descriptions = item["cve"].get("description", {}).get("description_data", [])
            description = descriptions[0]["value"] if descriptions else ""
            severity = _nvd_severity(item.get("impact", {}))
            matches = []
            for node in item.get("configurations", {}).get("nodes", []):
                matches.extend(node.get("cpe_match", []))
            mapped = False
            for match in matches:
                if not match.get("vulnerable", True):
                    continue
                end = match.get("versionEndExcluding")
                selector = _cpe_selector(match.get("cpe23Uri", ""))
                if not end or not selector:
                    continue
                entries.append(
                    VulnEntry(
                        cve_id=cve_id,
                        ecosystem=Ecosystem.MAVEN_ARCHIVE,
                        package_selector=selector,
                        severity=severity,
                        affected_below=end,
                        fixed_in=end,
                        description=description,
                    )
                )
                mapped = True
            if not mapped:
                dropped += 1
        except (KeyError, TypeError, IndexError) as exc:
            raise ParseError(f"CVE item {index}: {exc}") from exc
    if dropped:
        log.warning("NVD subset: %d items had no mappable package selector", dropped)
    return FeedSnapshot.create(
        feed_id=body.get("feed_id", default_id),
        fetched_at=str(body.get("CVE_data_timestamp", "")),
        entries=entries,
    )


def _nvd_severity(impact: dict) -> Severity:
    v3 = impact.get("baseMetricV3", {}).get("cvssV3", {}).get("baseSeverity")
    if v3:
        return normalize_severity(v3)
    return normalize_severity(impact.get("baseMetricV2", {}).get("severity", ""))


def _cpe_selector(cpe23: str) -> Optional[str]:
    parts = cpe23.split(":")
    # cpe:2.3:<part>:<vendor>:<product>:...
    if len(parts) < 6 or parts[0] != "cpe" or parts[2] != "a":
        return None
    vendor, product = parts[3], parts[4]
    if not vendor or not product or vendor == "*" or product == "*":
        return None
    return f"{vendor}:{product}"


def match_inventory(
    inventory: Inventory, feeds: Sequence[FeedSnapshot], tool_id: str
) -> list[Detection]:
    """Compare every inventory package against every feed entry with a
    matching ecosystem and exact selector.

    Packages with version "unknown" are skipped (counted); comparator errors
    skip the single pair with a warning. Output is a deduplicated,
    deterministically ordered detection list.
    """
    detections: set[Detection] = set()
    skipped_unknown = 0
    for package in inventory.packages:
        if package.version == "unknown":
            skipped_unknown += 1
            continue
        for feed in feeds:
            for entry in feed.entries:
                if entry.ecosystem is not package.ecosystem:
                    continue
                if entry.package_selector != package.name:
                    continue
                try:
                    if not _is_affected(package.version, entry):
                        continue
                except MalformedVersion as exc:
                    log.warning(
                        "skipping %s vs %s: %s", package.name, entry.cve_id, exc
                    )
                    continue
                fix = Fix.fixed(entry.fixed_in) if entry.fixed_in else Fix.none_available()
                detections.add(
                    Detection(
                        image=inventory.image,
                        package_name=package.name,
                        package_version=package.version,
                        cve_id=entry.cve_id,
                        tool_id=tool_id,
                        severity=entry.severity,
                        fix=fix,
                    )
                )
    if skipped_unknown:
        log.info("matcher skipped %d packages with unknown versions", skipped_unknown)
    return sorted(
        detections, key=lambda d: (d.package_name, d.package_version, d.cve_id, d.severity)
    )


def _is_affected(version: str, entry: VulnEntry) -> bool:
    eco = entry.ecosystem
    if entry.affected_below is not None:
        if compare_versions(version, entry.affected_below, eco) < 0:
            return True
    if entry.affected_range is not None:
        low, high = entry.affected_range
        if (
            compare_versions(version, low, eco) >= 0
            and compare_versions(version, high, eco) < 0
        ):
            return True
    return False

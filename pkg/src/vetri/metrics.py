"""Cross-tool quality metrics: severity/fix filters, detection miss sets,
detection hit ratio, per-class coverage, and the complete vulnerability
landscape.

A tool's miss set is everything the union of the *other* tools found that it
did not: the pairwise right-outer-join accumulation collapses to one set
difference against that union, which is equivalent and O(n). The reference
set is the cross-tool union itself; there is no external ground truth.
"""

from __future__ import annotations

import io
import csv
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Iterable, Mapping, Optional, Sequence

from .adapters import AppFinding, ToolReport
from .errors import ImageMismatch, UndefinedRatio, UnknownTool
from .extractor import Inventory
from .model import (
    Detection,
    FixState,
    ImageRef,
    JoinKey,
    PackageClass,
    Severity,
    project_key,
    render_severity,
)


@dataclass(frozen=True)
class EvaluationConfig:
    """What counts as a comparable detection for one evaluation run.

    Defaults mirror the usual reporting pipeline: low-severity filtered out,
    only fix-confirmed detections compared, and CVE-level joining (tools fan
    one CVE across related package names, which would inflate misses under
    the full tuple).
    """

    tool_ids: tuple[str, ...]
    join_key: JoinKey = JoinKey.CVE_ONLY
    min_severity: Severity = Severity.MEDIUM
    fixed_only: bool = True
    image_scope: tuple[ImageRef, ...] = ()

    def __post_init__(self) -> None:
        if not self.tool_ids:
            raise ValueError("tool_ids must be non-empty")
        if len(set(self.tool_ids)) != len(self.tool_ids):
            raise ValueError("tool_ids must be distinct")

    def to_json(self) -> dict[str, Any]:
        return {
            "tool_ids": list(self.tool_ids),
            "join_key": self.join_key.value,
            "min_severity": render_severity(self.min_severity),
            "fixed_only": self.fixed_only,
            "image_scope": [i.to_json() for i in self.image_scope],
        }


@dataclass(frozen=True)
class FilterStats:
    kept: int
    dropped_severity: int
    dropped_fix: int
    dropped_scope: int

    def to_json(self) -> dict[str, int]:
        return {
            "kept": self.kept,
            "dropped_severity": self.dropped_severity,
            "dropped_fix": self.dropped_fix,
            "dropped_scope": self.dropped_scope,
        }


def filter_detections(
    reports: Sequence[ToolReport], config: EvaluationConfig
) -> tuple[dict[str, set[Detection]], dict[str, FilterStats]]:
    """Apply the severity / fix-availability / image-scope filters per tool.

    Severity strictly below min_severity is dropped; with fixed_only only
    FixedAvailable detections survive. Raising min_severity or enabling
    fixed_only can only shrink each set, never grow it.
    """
    by_tool: dict[str, list[ToolReport]] = {}
    for report in reports:
        by_tool.setdefault(report.tool_id, []).append(report)
    missing = [t for t in config.tool_ids if t not in by_tool]
    if missing:
        raise UnknownTool(f"no reports for configured tools: {', '.join(missing)}")

    scope_keys = {ref.key() for ref in config.image_scope}
    filtered: dict[str, set[Detection]] = {}
    stats: dict[str, FilterStats] = {}
    for tool in config.tool_ids:
        kept: set[Detection] = set()
        dropped_severity = dropped_fix = dropped_scope = 0
        for report in by_tool[tool]:
            for det in report.detections:
                if scope_keys and det.image.key() not in scope_keys:
                    dropped_scope += 1
                elif det.severity < config.min_severity:
                    dropped_severity += 1
                elif config.fixed_only and det.fix.state is not FixState.FIXED_AVAILABLE:
                    dropped_fix += 1
                else:
                    kept.add(det)
        filtered[tool] = kept
        stats[tool] = FilterStats(len(kept), dropped_severity, dropped_fix, dropped_scope)
    return filtered, stats


def detection_miss(tool_id: str, key_sets: Mapping[str, set[tuple]]) -> set[tuple]:
    """Keys found by any other tool but not by ``tool_id``."""
    others: set[tuple] = set()
    for tool, keys in key_sets.items():
        if tool != tool_id:
            others |= keys
    return others - key_sets[tool_id]


def dhr(hits: int, misses: int) -> Fraction:
    """Detection hit ratio as an exact rational: hits / (hits + misses)."""
    if hits < 0 or misses < 0:
        raise ValueError("hits and misses must be non-negative")
    if hits + misses == 0:
        raise UndefinedRatio("hits + misses = 0: nothing to evaluate")
    return Fraction(hits, hits + misses)


def render_dhr_percent(value: Fraction) -> str:
    return f"{float(value) * 100:.2f}%"


@dataclass(frozen=True)
class ToolEvaluation:
    """Per-tool row: hits, miss set, and hit ratio under one config.

    dhr is None only when the tool and all others found nothing (flagged
    undefined rather than coerced to 0 or 1).
    """

    tool_id: str
    hits: int
    miss_set: frozenset[tuple]
    dhr: Optional[Fraction]
    per_image: dict[str, tuple[int, int]] = field(default_factory=dict)

    @property
    def misses(self) -> int:
        return len(self.miss_set)

    def to_json(self) -> dict[str, Any]:
        return {
            "tool_id": self.tool_id,
            "hits": self.hits,
            "misses": self.misses,
            "dhr": None if self.dhr is None else float(self.dhr),
            "dhr_exact": None if self.dhr is None else f"{self.dhr.numerator}/{self.dhr.denominator}",
            "dhr_undefined": self.dhr is None,
        }


@dataclass(frozen=True)
class EvaluationResult:
    config: EvaluationConfig
    tools: tuple[ToolEvaluation, ...]
    union_size: int
    filter_stats: dict[str, FilterStats]
    warnings: tuple[str, ...] = ()

    def to_json(self) -> dict[str, Any]:
        per_image: dict[str, dict[str, dict[str, int]]] = {}
        for ev in self.tools:
            for image_key, (hits, misses) in sorted(ev.per_image.items()):
                per_image.setdefault(image_key, {})[ev.tool_id] = {
                    "hits": hits,
                    "misses": misses,
                }
        return {
            "config": self.config.to_json(),
            "tools": [ev.to_json() for ev in self.tools],
            "union_size": self.union_size,
            "per_image": per_image,
            "filter_stats": {t: s.to_json() for t, s in sorted(self.filter_stats.items())},
            "warnings": list(self.warnings),
        }


def evaluate(reports: Sequence[ToolReport], config: EvaluationConfig) -> EvaluationResult:
    """Filter, project, and compare every configured tool against the union
    of the others.

    For every tool, hits + misses equals the size of the global union of all
    tools' filtered projected detections.
    """
    filtered, stats = filter_detections(reports, config)
    key_sets = {
        tool: {project_key(d, config.join_key) for d in dets}
        for tool, dets in filtered.items()
    }
    union: set[tuple] = set()
    for keys in key_sets.values():
        union |= keys
    warnings: list[str] = []
    if len(config.tool_ids) == 1:
        warnings.append("single-tool evaluation is vacuous: no other tools to miss against")
    evaluations = []
    for tool in config.tool_ids:
        own = key_sets[tool]
        miss = detection_miss(tool, key_sets)
        per_image: dict[str, tuple[int, int]] = {}
        for image_key in {k[0] for k in union}:
            own_img = sum(1 for k in own if k[0] == image_key)
            miss_img = sum(1 for k in miss if k[0] == image_key)
            per_image[image_key] = (own_img, miss_img)
        try:
            ratio: Optional[Fraction] = dhr(len(own), len(miss))
        except UndefinedRatio:
            ratio = None
        evaluations.append(
            ToolEvaluation(
                tool_id=tool,
                hits=len(own),
                miss_set=frozenset(miss),
                dhr=ratio,
                per_image=per_image,
            )
        )
    return EvaluationResult(
        config=config,
        tools=tuple(evaluations),
        union_size=len(union),
        filter_stats=stats,
        warnings=tuple(warnings),
    )


def render_dhr_csv(result: EvaluationResult) -> str:
    """Hit-ratio table with one row per tool."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["tool", "detectionhits", "detectionmiss", "dhr", "dhrp"])
    for ev in result.tools:
        if ev.dhr is None:
            writer.writerow([ev.tool_id, ev.hits, ev.misses, "undefined", "undefined"])
        else:
            writer.writerow(
                [ev.tool_id, ev.hits, ev.misses, f"{float(ev.dhr):.4f}", render_dhr_percent(ev.dhr)]
            )
    return buf.getvalue()


# -- package-class attribution ----------------------------------------------


def classify_detections(
    detections: Iterable[Detection],
    inventory: Optional[Inventory] = None,
    class_hints: Optional[Mapping[str, PackageClass]] = None,
) -> dict[PackageClass, list[Detection]]:
    """Attribute each detection to a package class.

    Precedence: adapter-provided hints, then inventory lookup by package
    name, then a naming heuristic (maven coordinates contain ":", OS package
    names do not).
    """
    inventory_classes: dict[str, PackageClass] = {}
    if inventory is not None:
        for record in inventory.packages:
            inventory_classes.setdefault(record.name, record.pkg_class)
    result: dict[PackageClass, list[Detection]] = {c: [] for c in PackageClass}
    for det in detections:
        if class_hints and det.package_name in class_hints:
            cls = class_hints[det.package_name]
        elif det.package_name in inventory_classes:
            cls = inventory_classes[det.package_name]
        else:
            cls = PackageClass.LIBRARY if ":" in det.package_name else PackageClass.OS
        result[cls].append(det)
    return result


@dataclass(frozen=True)
class ClassCoverage:
    packages_in_inventory: int
    vulnerable_packages: int
    detections: int

    def to_json(self) -> dict[str, int]:
        return {
            "packages_in_inventory": self.packages_in_inventory,
            "vulnerable_packages": self.vulnerable_packages,
            "detections": self.detections,
        }


@dataclass(frozen=True)
class CoverageReport:
    """Which package classes the tools see at all for one image.

    ``uncovered`` lists classes present in the inventory that no tool
    produced any detection for; when static-analysis findings exist for an
    uncovered Application class, their count is attached as evidence that
    the gap is real, not an absence of vulnerabilities.
    """

    image: ImageRef
    per_class: dict[PackageClass, ClassCoverage]
    uncovered: tuple[PackageClass, ...]
    app_finding_evidence: int = 0

    def to_json(self) -> dict[str, Any]:
        return {
            "image": self.image.to_json(),
            "per_class": {c.value: cov.to_json() for c, cov in sorted(self.per_class.items(), key=lambda kv: kv[0].value)},
            "uncovered": [c.value for c in self.uncovered],
            "app_finding_evidence": self.app_finding_evidence,
        }


def coverage_report(
    inventory: Inventory,
    detections: Iterable[Detection],
    app_findings: Sequence[AppFinding] = (),
    class_hints: Optional[Mapping[str, PackageClass]] = None,
) -> CoverageReport:
    """Count distinct vulnerable packages and detections per class and flag
    classes the tools never covered."""
    detections = list(detections)
    for det in detections:
        if det.image.key() != inventory.image.key():
            raise ImageMismatch(
                f"detection for {det.image.key()} against inventory of {inventory.image.key()}"
            )
    by_class = classify_detections(detections, inventory, class_hints)
    inventory_by_class: dict[PackageClass, set[str]] = {c: set() for c in PackageClass}
    for record in inventory.packages:
        inventory_by_class[record.pkg_class].add(record.name)
    per_class: dict[PackageClass, ClassCoverage] = {}
    uncovered: list[PackageClass] = []
    for cls in PackageClass:
        dets = by_class[cls]
        per_class[cls] = ClassCoverage(
            packages_in_inventory=len(inventory_by_class[cls]),
            vulnerable_packages=len({(d.package_name, d.package_version) for d in dets}),
            detections=len(dets),
        )
        if inventory_by_class[cls] and not dets:
            uncovered.append(cls)
    evidence = len(app_findings) if PackageClass.APPLICATION in uncovered else 0
    return CoverageReport(
        image=inventory.image,
        per_class=per_class,
        uncovered=tuple(uncovered),
        app_finding_evidence=evidence,
    )


# -- complete vulnerability landscape ----------------------------------------


@dataclass(frozen=True)
class ImageLandscapeRow:
    """One per-image row of the nonOS landscape table: total is always
    application + dependencies."""

    image_key: str
    application: int
    dependencies: int
    total: int
    highest: int
    most_vulnerable_package: str

    def to_json(self) -> dict[str, Any]:
        return {
            "image": self.image_key,
            "application": self.application,
            "dependencies": self.dependencies,
            "total": self.total,
            "highest": self.highest,
            "most_vulnerable_package": self.most_vulnerable_package,
        }


@dataclass(frozen=True)
class LandscapeSummary:
    """v_c = v_app + v_lib + v_os, by construction and checked."""

    label: str
    v_app: int
    v_lib: int
    v_os: int
    v_c: int
    per_image: tuple[ImageLandscapeRow, ...] = ()

    def __post_init__(self) -> None:
        if self.v_c != self.v_app + self.v_lib + self.v_os:
            raise ValueError("landscape additivity violated")

    def to_json(self) -> dict[str, Any]:
        return {
            "label": self.label,
            "v_app": self.v_app,
            "v_lib": self.v_lib,
            "v_os": self.v_os,
            "v_c": self.v_c,
            "per_image": [row.to_json() for row in self.per_image],
        }


def landscape(
    app_findings: Sequence[AppFinding],
    detections_by_class: Mapping[PackageClass, Sequence[Detection]],
    findings_by_image: Optional[Mapping[str, Sequence[AppFinding]]] = None,
    label: str = "",
) -> LandscapeSummary:
    """Aggregate counts per class plus the per-image nonOS breakdown."""
    lib_detections = list(detections_by_class.get(PackageClass.LIBRARY, ()))
    os_detections = list(detections_by_class.get(PackageClass.OS, ()))
    app_detections = list(detections_by_class.get(PackageClass.APPLICATION, ()))
    v_app = len(app_findings) + len(app_detections)
    v_lib = len(lib_detections)
    v_os = len(os_detections)

    findings_by_image = findings_by_image or {}
    image_keys = {d.image.key() for d in lib_detections + app_detections}
    image_keys |= set(findings_by_image)
    rows = []
    for image_key in sorted(image_keys):
        libs = [d for d in lib_detections if d.image.key() == image_key]
        apps = [d for d in app_detections if d.image.key() == image_key]
        application = len(findings_by_image.get(image_key, ())) + len(apps)
        per_package = Counter(d.package_name for d in libs + apps)
        if per_package:
            # deterministic tie-break: highest count, then lexically first
            top_package, top_count = min(per_package.items(), key=lambda kv: (-kv[1], kv[0]))
        else:
            top_package, top_count = "", 0
        rows.append(
            ImageLandscapeRow(
                image_key=image_key,
                application=application,
                dependencies=len(libs),
                total=application + len(libs),
                highest=top_count,
                most_vulnerable_package=top_package,
            )
        )
    return LandscapeSummary(
        label=label,
        v_app=v_app,
        v_lib=v_lib,
        v_os=v_os,
        v_c=v_app + v_lib + v_os,
        per_image=tuple(rows),
    )


def render_landscape_csv(summaries: Sequence[LandscapeSummary]) -> str:
    """Complete-vulnerability table with one row per summary (usually one
    per tool)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["tool", "vapp", "vlib", "vos", "vc"])
    for summary in summaries:
        writer.writerow([summary.label, summary.v_app, summary.v_lib, summary.v_os, summary.v_c])
    return buf.getvalue()

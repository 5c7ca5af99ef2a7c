"""Figure and delimited-output rendering for the report command.

Renders the evaluation-side visuals to files: download-count histogram for
the crawled catalog, per-tool detection boxplot across images, stacked bar
of application findings per project, and the severity frequency table.
"""

from __future__ import annotations

import io
import csv
from collections import Counter
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .adapters import AppFinding
from .model import Detection, Severity, render_severity
from .registry import CatalogEntry


def render_downloads_histogram(entries: Sequence[CatalogEntry], out_path: Path | str) -> Path:
    """Histogram of image popularity in number of downloads."""
    counts = [e.download_count for e in entries]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.hist(counts, bins=min(20, max(5, len(counts))), color="#4878a8", edgecolor="black")
    ax.set_xlabel("Number of downloads")
    ax.set_ylabel("Number of images")
    ax.set_title("Popularity of crawled images")
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def render_tool_boxplot(
    per_tool_counts: Mapping[str, Sequence[int]], out_path: Path | str
) -> Path:
    """Boxplot comparing per-image detection counts across tools."""
    tools = sorted(per_tool_counts)
    data = [list(per_tool_counts[t]) or [0] for t in tools]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.boxplot(data, tick_labels=tools)
    ax.set_xlabel("Scanning tool")
    ax.set_ylabel("Detected vulnerabilities per image")
    ax.set_title("Vulnerability detection by tool")
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def render_app_findings_bar(findings: Sequence[AppFinding], out_path: Path | str) -> Path:
    """Stacked bar of application-code findings per project, split by kind."""
    projects = sorted({f.project_id for f in findings})
    kinds = sorted({f.bug_kind for f in findings})
    fig, ax = plt.subplots(figsize=(7, 4.5))
    bottoms = [0] * len(projects)
    for kind in kinds:
        heights = [
            sum(1 for f in findings if f.project_id == p and f.bug_kind == kind)
            for p in projects
        ]
        ax.bar(projects, heights, bottom=bottoms, label=kind)
        bottoms = [b + h for b, h in zip(bottoms, heights)]
    ax.set_xlabel("Project")
    ax.set_ylabel("Detected vulnerabilities")
    ax.set_title("Application code findings")
    if kinds:
        ax.legend(fontsize=8)
    plt.setp(ax.get_xticklabels(), rotation=30, ha="right")
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def render_severity_csv(detections: Sequence[Detection]) -> str:
    """Severity levels ranked by number of detected vulnerabilities."""
    counts = Counter(d.severity for d in detections)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["severity", "frequency"])
    for severity, count in sorted(counts.items(), key=lambda kv: (-kv[1], -kv[0])):
        writer.writerow([render_severity(severity), count])
    return buf.getvalue()


def severity_all_levels(detections: Sequence[Detection]) -> dict[Severity, int]:
    counts = Counter(d.severity for d in detections)
    return {level: counts.get(level, 0) for level in Severity}

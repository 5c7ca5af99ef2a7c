"""Command-line surface wiring the pipeline together.

Verbs: crawl, pull, extract, scan, ingest, evaluate, landscape, report.
Every command reads and writes only store paths and takes --store. Exit
codes: 0 ok, 64 usage, 65 data/parse, 69 unavailable, 70 internal, 75 store
locked (crawl exits 2 on network failure, flagging partial results).

Option precedence is flags > environment (VETRI_<NAME>) > config file, where
the config file is plain "key=value" lines.
"""

from __future__ import annotations

import logging
import math
import os
import sys
from pathlib import Path
from typing import Optional

import click

from . import __version__
from .adapters import (
    ADAPTERS,
    AppFinding,
    ToolReport,
    ingest_static_analysis,
)
from .errors import (
    EXIT_INTERNAL,
    EXIT_USAGE,
    NetworkError,
    UnknownTool,
    VetriError,
)
from .extractor import assemble_filesystem, build_inventory, load_image_layout
from .figures import (
    render_app_findings_bar,
    render_downloads_histogram,
    render_severity_csv,
    render_tool_boxplot,
)
from .jsonio import read_json, write_json
from .metrics import (
    EvaluationConfig,
    classify_detections,
    coverage_report,
    evaluate,
    landscape,
    render_dhr_csv,
    render_dhr_percent,
    render_landscape_csv,
)
from .model import Detection, ImageRef, JoinKey, PackageClass, normalize_severity
from .registry import CatalogEntry, CrawlQuery, RegistryClient
from .store import Store
from .vulnfeed import FORMAT_CANONICAL, FORMAT_NVD_SUBSET, load_feed, match_inventory

log = logging.getLogger(__name__)

DEFAULT_REGISTRY = "https://registry-1.docker.io"
DEFAULT_HUB = "https://hub.docker.com"


def _load_config_file(path: Optional[str]) -> dict[str, str]:
    if not path:
        return {}
    settings: dict[str, str] = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if sep:
            settings[key.strip()] = value.strip()
    return settings


class Settings:
    """flags > env > config file > default."""

    def __init__(self, config_file: Optional[str]):
        self.file_values = _load_config_file(config_file)

    def get(self, name: str, flag_value: Optional[str], default: str = "") -> str:
        if flag_value:
            return flag_value
        env = os.environ.get(f"VETRI_{name.upper()}")
        if env:
            return env
        return self.file_values.get(name, default)


@click.group(name="vetri")
@click.version_option(version=__version__)
@click.option("--store", "store_path", default=None, help="Store directory (default ./store).")
@click.option("--config", "config_file", default=None, help="key=value config file.")
@click.option("-v", "--verbose", is_flag=True, help="Log at debug level.")
@click.pass_context
def cli(ctx: click.Context, store_path: Optional[str], config_file: Optional[str], verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    settings = Settings(config_file)
    ctx.obj = {
        "settings": settings,
        "store": Store(settings.get("store", store_path, "./store")),
    }


def _client(ctx: click.Context, registry: Optional[str], hub: Optional[str]) -> RegistryClient:
    settings: Settings = ctx.obj["settings"]
    registry_url = settings.get("registry", registry, DEFAULT_REGISTRY)
    hub_url = settings.get("hub", hub, "") or None
    platform = settings.get("platform", None, "linux/amd64")
    os_name, _, arch = platform.partition("/")
    return RegistryClient(
        registry_url,
        hub_url,
        platform=(os_name, arch or "amd64"),
        parallelism=int(settings.get("parallelism", None, "4")),
        backoff=float(settings.get("backoff", None, "0.5")),
    )


@cli.command()
@click.option("--limit", type=int, required=True, help="Maximum number of catalog entries.")
@click.option("--source", default="community", show_default=True, help="community or official.")
@click.option("--query", default="", help="Search term.")
@click.option("--out", "out_path", default=None, help="Catalog file (default <store>/catalog.json).")
@click.option("--registry", default=None)
@click.option("--hub", default=None)
@click.option("--resolve-sources", is_flag=True, help="Also resolve source repository links.")
@click.pass_context
def crawl(ctx, limit, source, query, out_path, registry, hub, resolve_sources):
    """Crawl the registry catalog for candidate images."""
    if limit < 1:
        raise click.UsageError("--limit must be >= 1")
    store: Store = ctx.obj["store"]
    client = _client(ctx, registry, hub)
    crawl_query = CrawlQuery(
        source_type=source,
        page_limit=max(1, math.ceil(limit / 100)),
        search_term=query,
    )
    out = Path(out_path) if out_path else store.catalog_path
    partial = False
    entries: list[CatalogEntry] = []
    try:
        with store.lock():
            entries = client.crawl_catalog(crawl_query)[:limit]
            if resolve_sources:
                entries = [
                    CatalogEntry(e.image, e.download_count, client.resolve_source_repo(e.image))
                    for e in entries
                ]
    except NetworkError as exc:
        partial = True
        click.echo(f"warning: network failure, catalog is partial: {exc}", err=True)
    write_json(out, {"entries": [e.to_json() for e in entries], "partial": partial})
    click.echo(f"wrote {len(entries)} catalog entries to {out}")
    if partial:
        sys.exit(2)


@cli.command()
@click.argument("image")
@click.option("--registry", default=None)
@click.option("--hub", default=None)
@click.pass_context
def pull(ctx, image, registry, hub):
    """Pull an image's manifest and layer blobs into the store."""
    store: Store = ctx.obj["store"]
    client = _client(ctx, registry, hub)
    ref = ImageRef.parse(image)
    with store.lock():
        manifest = client.pull_image(ref, store.image_dir(ref))
        store.write_image_ref(ref)
    click.echo(f"pulled {ref.key()} ({len(manifest.layer_digests)} layers) into {store.image_dir(ref)}")


@cli.command()
@click.argument("image")
@click.option("--from", "from_path", default=None,
              help="Image tarball (docker-save or OCI layout) instead of the store copy.")
@click.option("--app-selector", "app_selectors", multiple=True,
              help="group:artifact pattern classed as Application (repeatable).")
@click.pass_context
def extract(ctx, image, from_path, app_selectors):
    """Extract the package inventory from a pulled image."""
    store: Store = ctx.obj["store"]
    ref = ImageRef.parse(image)
    source = Path(from_path) if from_path else store.image_dir(ref)
    with store.lock():
        manifest, blobs = load_image_layout(source)
        fs = assemble_filesystem(manifest, blobs)
        inventory = build_inventory(ref, fs, list(app_selectors))
        store.write_image_ref(ref)
        path = store.write_inventory(inventory)
    click.echo(f"extracted {len(inventory.packages)} packages to {path}")


@cli.command()
@click.argument("image")
@click.option("--feed", "feeds", multiple=True, help="Canonical feed path or URL (repeatable).")
@click.option("--nvd-feed", "nvd_feeds", multiple=True, help="NVD-subset feed path or URL (repeatable).")
@click.option("--tool-id", default="builtin", show_default=True)
@click.pass_context
def scan(ctx, image, feeds, nvd_feeds, tool_id):
    """Run the built-in matcher over an extracted inventory."""
    if not feeds and not nvd_feeds:
        raise click.UsageError("at least one --feed or --nvd-feed is required")
    store: Store = ctx.obj["store"]
    ref = ImageRef.parse(image)
    with store.lock():
        inventory = store.read_inventory(ref)
        snapshots = [load_feed(f, FORMAT_CANONICAL) for f in feeds]
        snapshots += [load_feed(f, FORMAT_NVD_SUBSET) for f in nvd_feeds]
        detections = match_inventory(inventory, snapshots, tool_id)
        report = ToolReport(tool_id=tool_id, image=ref, detections=tuple(detections))
        store.write_image_ref(ref)
        path = store.write_report(report, {s.feed_id: s.content_hash for s in snapshots})
    click.echo(f"builtin matcher found {len(detections)} detections, wrote {path}")


@cli.command()
@click.argument("image")
@click.argument("path")
@click.option("--tool", "tool_id", default=None, help="Tool id to stamp (defaults per format).")
@click.option("--format", "report_format", default="generic", show_default=True,
              type=click.Choice([*ADAPTERS, "static"]))
@click.option("--project", default=None, help="Project id (static format only).")
@click.pass_context
def ingest(ctx, image, path, tool_id, report_format, project):
    """Ingest a third-party scanner report or static-analysis findings."""
    store: Store = ctx.obj["store"]
    ref = ImageRef.parse(image)
    with store.lock():
        store.write_image_ref(ref)
        if report_format == "static":
            if not project:
                raise click.UsageError("--project is required for static findings")
            findings = ingest_static_analysis(path, project)
            out = store.write_findings(ref, project, findings)
            click.echo(f"ingested {len(findings)} findings to {out}")
            return
        if report_format == "generic":
            if not tool_id:
                raise click.UsageError("--tool is required for generic reports")
            report = ADAPTERS["generic"](path, tool_id, ref)
        else:
            report = ADAPTERS[report_format](path, ref, tool_id or report_format)
        out = store.write_report(report)
        stats = report.stats
        click.echo(
            f"ingested {stats.kept} detections to {out} "
            f"(raw {stats.raw_records}, collapsed {stats.dedup_collapsed}, rejected {stats.rejected})"
        )


def _parse_scope(store: Store, images: tuple[str, ...]) -> list[ImageRef]:
    if images:
        return [ImageRef.parse(i) for i in images]
    refs = store.all_image_refs()
    if not refs:
        raise click.UsageError("no images in store; pass image names or pull/ingest first")
    return refs


def _collect_reports(store: Store, scope: list[ImageRef], tools: list[str]) -> list[ToolReport]:
    reports = []
    for ref in scope:
        for tool in tools:
            if store.report_path(ref, tool).exists():
                reports.append(store.read_report(ref, tool))
    return reports


def _evaluation_config(tools: str, join_key: str, min_severity: str, fixed_only: bool,
                       scope: list[ImageRef]) -> EvaluationConfig:
    tool_ids = tuple(t.strip() for t in tools.split(",") if t.strip())
    if not tool_ids:
        raise click.UsageError("--tools must name at least one tool")
    return EvaluationConfig(
        tool_ids=tool_ids,
        join_key=JoinKey.CVE_ONLY if join_key == "cve" else JoinKey.FULL_TUPLE,
        min_severity=normalize_severity(min_severity),
        fixed_only=fixed_only,
        image_scope=tuple(scope),
    )


@cli.command(name="evaluate")
@click.argument("images", nargs=-1)
@click.option("--tools", required=True, help="Comma-separated tool ids to compare.")
@click.option("--join-key", default="cve", show_default=True, type=click.Choice(["cve", "tuple"]))
@click.option("--min-severity", default="Medium", show_default=True)
@click.option("--fixed-only/--include-unfixed", default=True, show_default=True)
@click.option("--eval-dir", default=None, help="Write into this directory instead of a fresh one.")
@click.pass_context
def evaluate_cmd(ctx, images, tools, join_key, min_severity, fixed_only, eval_dir):
    """Compute detection miss sets and hit ratios across tools."""
    store: Store = ctx.obj["store"]
    with store.lock():
        scope = _parse_scope(store, images)
        config = _evaluation_config(tools, join_key, min_severity, fixed_only, scope)
        reports = _collect_reports(store, scope, list(config.tool_ids))
        result = evaluate(reports, config)
        feed_hashes: dict[str, str] = {}
        for ref in scope:
            feed_hashes.update(store.read_feed_hashes(ref))
        out_dir = Path(eval_dir) if eval_dir else store.new_evaluation_dir(config)
        out_dir.mkdir(parents=True, exist_ok=True)
        payload = result.to_json()
        payload["feeds"] = feed_hashes
        write_json(out_dir / "evaluation.json", payload)
        (out_dir / "dhr.csv").write_text(render_dhr_csv(result))
    for warning in result.warnings:
        click.echo(f"warning: {warning}", err=True)
    for ev in result.tools:
        rendered = render_dhr_percent(ev.dhr) if ev.dhr is not None else "undefined"
        click.echo(f"{ev.tool_id}: hits={ev.hits} misses={ev.misses} dhr={rendered}")
    click.echo(f"evaluation written to {out_dir}")


@cli.command(name="landscape")
@click.argument("images", nargs=-1)
@click.option("--tools", required=True, help="Comma-separated tool ids.")
@click.option("--join-key", default="cve", show_default=True, type=click.Choice(["cve", "tuple"]))
@click.option("--min-severity", default="Medium", show_default=True)
@click.option("--fixed-only/--include-unfixed", default=True, show_default=True)
@click.option("--include-findings/--no-findings", default=True, show_default=True,
              help="Merge static-analysis findings into the combined landscape.")
@click.option("--eval-dir", default=None)
@click.pass_context
def landscape_cmd(ctx, images, tools, join_key, min_severity, fixed_only, include_findings, eval_dir):
    """Per-class vulnerability landscape and coverage gap report."""
    store: Store = ctx.obj["store"]
    with store.lock():
        scope = _parse_scope(store, images)
        config = _evaluation_config(tools, join_key, min_severity, fixed_only, scope)
        reports = _collect_reports(store, scope, list(config.tool_ids))
        from .metrics import filter_detections

        filtered, _ = filter_detections(reports, config)
        inventories = {}
        for ref in scope:
            if store.inventory_path(ref).exists():
                inventories[ref.key()] = store.read_inventory(ref)
        findings_by_image: dict[str, list[AppFinding]] = {}
        for ref in scope:
            per_project = store.read_all_findings(ref)
            merged: list[AppFinding] = []
            for project_findings in per_project.values():
                merged.extend(project_findings)
            if merged:
                findings_by_image[ref.key()] = merged
        all_findings = [f for findings in findings_by_image.values() for f in findings]

        summaries = []
        for tool in config.tool_ids:
            by_class = _classify_all(filtered[tool], inventories)
            summaries.append(landscape([], by_class, label=tool))
        combined_detections = _distinct_across_tools(filtered)
        combined_by_class = _classify_all(combined_detections, inventories)
        combined = landscape(
            all_findings if include_findings else [],
            combined_by_class,
            findings_by_image if include_findings else None,
            label="combined",
        )
        coverage = []
        for ref in scope:
            inventory = inventories.get(ref.key())
            if inventory is None:
                continue
            image_detections = [
                d for dets in filtered.values() for d in dets if d.image.key() == ref.key()
            ]
            image_findings = findings_by_image.get(ref.key(), [])
            coverage.append(coverage_report(inventory, image_detections, image_findings))

        out_dir = Path(eval_dir) if eval_dir else store.new_evaluation_dir(config)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "landscape.csv").write_text(render_landscape_csv(summaries + [combined]))
        write_json(
            out_dir / "coverage.json",
            {
                "config": config.to_json(),
                "per_tool": [s.to_json() for s in summaries],
                "combined": combined.to_json(),
                "coverage": [c.to_json() for c in coverage],
            },
        )
    for summary in summaries + [combined]:
        click.echo(
            f"{summary.label}: v_app={summary.v_app} v_lib={summary.v_lib} "
            f"v_os={summary.v_os} v_c={summary.v_c}"
        )
    for report in coverage:
        if report.uncovered:
            gaps = ", ".join(c.value for c in report.uncovered)
            click.echo(f"coverage gap in {report.image.key()}: {gaps} uncovered", err=True)
    click.echo(f"landscape written to {out_dir}")


def _classify_all(detections, inventories) -> dict[PackageClass, list[Detection]]:
    by_class: dict[PackageClass, list[Detection]] = {c: [] for c in PackageClass}
    by_image: dict[str, list[Detection]] = {}
    for det in detections:
        by_image.setdefault(det.image.key(), []).append(det)
    for image_key, dets in sorted(by_image.items()):
        classified = classify_detections(dets, inventories.get(image_key))
        for cls, items in classified.items():
            by_class[cls].extend(items)
    return by_class


def _distinct_across_tools(filtered: dict[str, set[Detection]]) -> list[Detection]:
    seen: dict[tuple, Detection] = {}
    for tool in sorted(filtered):
        for det in sorted(
            filtered[tool], key=lambda d: (d.image.key(), d.package_name, d.cve_id)
        ):
            key = (det.image.key(), det.package_name, det.package_version, det.cve_id)
            seen.setdefault(key, det)
    return list(seen.values())


@cli.command(name="report")
@click.argument("images", nargs=-1)
@click.option("--tools", default=None, help="Tools for the comparison boxplot (default: all found).")
@click.option("--out-dir", default=None, help="Figure directory (default <store>/figures).")
@click.pass_context
def report_cmd(ctx, images, tools, out_dir):
    """Render evaluation figures and severity tables to files."""
    store: Store = ctx.obj["store"]
    with store.lock():
        out = Path(out_dir) if out_dir else store.root / "figures"
        out.mkdir(parents=True, exist_ok=True)
        written: list[Path] = []

        if store.catalog_path.exists():
            catalog = read_json(store.catalog_path)
            entries = [CatalogEntry.from_json(e) for e in catalog.get("entries", [])]
            if entries:
                written.append(render_downloads_histogram(entries, out / "downloads_histogram.png"))

        scope = [ImageRef.parse(i) for i in images] if images else store.all_image_refs()
        tool_ids = (
            [t.strip() for t in tools.split(",") if t.strip()]
            if tools
            else sorted({t for ref in scope for t in store.list_report_tools(ref)})
        )
        per_tool_counts: dict[str, list[int]] = {t: [] for t in tool_ids}
        all_detections = []
        for ref in scope:
            for tool in tool_ids:
                if store.report_path(ref, tool).exists():
                    report = store.read_report(ref, tool)
                    per_tool_counts[tool].append(len(report.detections))
                    all_detections.extend(report.detections)
        if any(per_tool_counts.values()):
            written.append(render_tool_boxplot(per_tool_counts, out / "tool_comparison.png"))
        if all_detections:
            (out / "severity.csv").write_text(render_severity_csv(all_detections))
            written.append(out / "severity.csv")

        findings = []
        for ref in scope:
            for project_findings in store.read_all_findings(ref).values():
                findings.extend(project_findings)
        if findings:
            written.append(render_app_findings_bar(findings, out / "app_findings.png"))
    for path in written:
        click.echo(f"wrote {path}")
    if not written:
        click.echo("nothing to report: store has no catalog, reports, or findings", err=True)


def main(argv: Optional[list[str]] = None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.UsageError as exc:
        click.echo(f"usage error: {exc.format_message()}", err=True)
        return EXIT_USAGE
    except click.ClickException as exc:
        exc.show()
        return EXIT_USAGE
    except SystemExit as exc:
        return int(exc.code or 0)
    except UnknownTool as exc:
        click.echo(f"usage error: {exc}", err=True)
        return exc.exit_code
    except VetriError as exc:
        click.echo(f"error: {exc}", err=True)
        return exc.exit_code
    except Exception as exc:  # pragma: no cover - defensive
        log.exception("internal error")
        click.echo(f"internal error: {exc}", err=True)
        return EXIT_INTERNAL
    return 0


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()

"""File-backed report store with a deterministic on-disk layout.

    root/
      catalog.json
      images/<image-key>/manifest.json
      images/<image-key>/blobs/<algorithm>/<hex>
      images/<image-key>/inventory.json
      images/<image-key>/reports/<tool_id>.json
      images/<image-key>/reports/<tool_id>.meta.json
      images/<image-key>/findings/<project_id>.json
      evaluations/<timestamp>-<config-hash>/{evaluation.json, dhr.csv,
                                             landscape.csv, coverage.json}

Plain JSON files instead of a document database: diffable, dependency-free,
and every evaluation directory embeds the feed content hashes and config it
was produced from. Concurrent commands on one store are unsupported; an
advisory lock file makes the second command fail fast.
"""

from __future__ import annotations

import hashlib
import os
import re
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterator, Optional

from .adapters import AppFinding, ToolReport, ingest_generic, read_findings
from .errors import StoreLocked
from .extractor import Inventory
from .jsonio import canonical_json, read_json, write_json
from .metrics import EvaluationConfig
from .model import ImageRef

LOCK_FILE = ".lock"


def image_key_to_dirname(key: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", key)


class Store:
    def __init__(self, root: Path | str):
        self.root = Path(root)

    # -- paths ---------------------------------------------------------------

    @property
    def catalog_path(self) -> Path:
        return self.root / "catalog.json"

    def image_dir(self, image: ImageRef) -> Path:
        return self.root / "images" / image_key_to_dirname(image.key())

    def inventory_path(self, image: ImageRef) -> Path:
        return self.image_dir(image) / "inventory.json"

    def report_path(self, image: ImageRef, tool_id: str) -> Path:
        return self.image_dir(image) / "reports" / f"{tool_id}.json"

    def report_meta_path(self, image: ImageRef, tool_id: str) -> Path:
        return self.image_dir(image) / "reports" / f"{tool_id}.meta.json"

    def findings_path(self, image: ImageRef, project_id: str) -> Path:
        return self.image_dir(image) / "findings" / f"{project_id}.json"

    def evaluations_dir(self) -> Path:
        return self.root / "evaluations"

    # -- locking ---------------------------------------------------------------

    @contextmanager
    def lock(self) -> Iterator[None]:
        self.root.mkdir(parents=True, exist_ok=True)
        lock_path = self.root / LOCK_FILE
        try:
            fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise StoreLocked(f"store {self.root} is locked by another command") from None
        try:
            os.write(fd, f"{os.getpid()}\n".encode())
            os.close(fd)
            yield
        finally:
            lock_path.unlink(missing_ok=True)

    # -- reading / writing -----------------------------------------------------

    def write_image_ref(self, image: ImageRef) -> Path:
        path = self.image_dir(image) / "image.json"
        write_json(path, image.to_json())
        return path

    def read_image_ref(self, dirname: str) -> ImageRef:
        return ImageRef.from_json(read_json(self.root / "images" / dirname / "image.json"))

    def all_image_refs(self) -> list[ImageRef]:
        refs = []
        for dirname in self.list_images():
            path = self.root / "images" / dirname / "image.json"
            if path.exists():
                refs.append(ImageRef.from_json(read_json(path)))
        return refs

    def write_inventory(self, inventory: Inventory) -> Path:
        path = self.inventory_path(inventory.image)
        write_json(path, inventory.to_json())
        return path

    def read_inventory(self, image: ImageRef) -> Inventory:
        return Inventory.from_json(read_json(self.inventory_path(image)))

    def write_report(self, report: ToolReport, feed_hashes: Optional[dict[str, str]] = None) -> Path:
        from .adapters import render_tool_report

        path = self.report_path(report.image, report.tool_id)
        write_json(path, render_tool_report(report))
        if feed_hashes is not None:
            write_json(self.report_meta_path(report.image, report.tool_id), {"feeds": feed_hashes})
        return path

    def read_report(self, image: ImageRef, tool_id: str) -> ToolReport:
        return ingest_generic(str(self.report_path(image, tool_id)), tool_id, image)

    def list_report_tools(self, image: ImageRef) -> list[str]:
        reports_dir = self.image_dir(image) / "reports"
        if not reports_dir.is_dir():
            return []
        return sorted(
            p.stem for p in reports_dir.glob("*.json") if not p.name.endswith(".meta.json")
        )

    def read_feed_hashes(self, image: ImageRef) -> dict[str, str]:
        hashes: dict[str, str] = {}
        reports_dir = self.image_dir(image) / "reports"
        if reports_dir.is_dir():
            for meta in sorted(reports_dir.glob("*.meta.json")):
                hashes.update(read_json(meta).get("feeds", {}))
        return hashes

    def write_findings(self, image: ImageRef, project_id: str, findings: list[AppFinding]) -> Path:
        path = self.findings_path(image, project_id)
        write_json(path, [f.to_json() for f in findings])
        return path

    def read_all_findings(self, image: ImageRef) -> dict[str, list[AppFinding]]:
        findings_dir = self.image_dir(image) / "findings"
        if not findings_dir.is_dir():
            return {}
        return {p.stem: read_findings(p) for p in sorted(findings_dir.glob("*.json"))}

    def list_images(self) -> list[str]:
        images_dir = self.root / "images"
        if not images_dir.is_dir():
            return []
        return sorted(p.name for p in images_dir.iterdir() if p.is_dir())

    def new_evaluation_dir(self, config: EvaluationConfig, timestamp: Optional[str] = None) -> Path:
        stamp = timestamp or datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
        config_hash = hashlib.sha256(canonical_json(config.to_json())).hexdigest()[:12]
        path = self.evaluations_dir() / f"{stamp}-{config_hash}"
        path.mkdir(parents=True, exist_ok=True)
        return path

"""Filesystem reconstruction from ordered layers and package inventory
extraction.

Layers apply base to top; later layers override earlier paths, a ".wh.name"
entry deletes "name" from lower layers, and ".wh..wh..opq" wipes all prior
children of its directory. The assembled view is a read-only path -> content
map, which the dpkg, apk, and archive extractors walk.

RPM databases are binary and out of scope: an image carrying only an rpm DB
yields an empty OS inventory plus an "unsupported ecosystem" warning.
"""

from __future__ import annotations

import enum
import fnmatch
import gzip
import io
import logging
import posixpath
import tarfile
import zipfile
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional

from . import __version__
from .errors import CorruptLayer, ParseError, SchemaError, UnsupportedMediaType
from .jsonio import read_json
from .model import Ecosystem, ImageRef, PackageClass, PackageRecord
from .registry import ImageManifest, sha256_hex

log = logging.getLogger(__name__)

DPKG_STATUS_PATH = "var/lib/dpkg/status"
APK_INSTALLED_PATH = "lib/apk/db/installed"
RPM_DB_PATHS = ("var/lib/rpm/Packages", "var/lib/rpm/rpmdb.sqlite")

GZIP_LAYER_TYPES = (
    "application/vnd.docker.image.rootfs.diff.tar.gzip",
    "application/vnd.oci.image.layer.v1.tar+gzip",
)
PLAIN_LAYER_TYPES = (
    "application/vnd.docker.image.rootfs.diff.tar",
    "application/vnd.oci.image.layer.v1.tar",
)

WHITEOUT_PREFIX = ".wh."
OPAQUE_WHITEOUT = ".wh..wh..opq"

ARCHIVE_SUFFIXES = (".jar", ".war", ".ear")
NESTED_ARCHIVE_HOSTS = (".war", ".ear")


class EntryKind(enum.Enum):
    FILE = "file"
    DIR = "dir"
    SYMLINK = "symlink"
    WHITEOUT = "whiteout"
    OPAQUE_WHITEOUT = "opaque_whiteout"


@dataclass(frozen=True)
class LayerEntry:
    path: str
    kind: EntryKind
    content: bytes = b""
    link_target: str = ""


def _normalize_path(name: str) -> str:
    name = name.lstrip("/")
    if name.startswith("./"):
        name = name[2:]
    return posixpath.normpath(name) if name not in ("", ".") else ""


def classify_entry(name: str) -> tuple[str, EntryKind | None]:
    """Map a tar member name onto (normalized target path, whiteout kind).

    Returns kind None for ordinary entries; for whiteouts the returned path
    is the path being deleted (or the directory, for opaque whiteouts).
    """
    path = _normalize_path(name)
    base = posixpath.basename(path)
    if base == OPAQUE_WHITEOUT:
        return posixpath.dirname(path), EntryKind.OPAQUE_WHITEOUT
    if base.startswith(WHITEOUT_PREFIX):
        return posixpath.join(posixpath.dirname(path), base[len(WHITEOUT_PREFIX):]), EntryKind.WHITEOUT
    return path, None


def iter_layer_entries(blob: bytes, media_type: str) -> Iterable[LayerEntry]:
    """Decode one layer blob into entries, decompressing per media type."""
    if media_type in GZIP_LAYER_TYPES:
        try:
            data = gzip.decompress(blob)
        except (OSError, EOFError) as exc:
            raise CorruptLayer(f"gzip decode failed: {exc}") from exc
    elif media_type in PLAIN_LAYER_TYPES:
        data = blob
    else:
        raise UnsupportedMediaType(f"unsupported layer media type: {media_type}")
    try:
        with tarfile.open(fileobj=io.BytesIO(data), mode="r:") as tar:
            for member in tar:
                path, wh_kind = classify_entry(member.name)
                if wh_kind is not None:
                    yield LayerEntry(path=path, kind=wh_kind)
                elif member.isdir():
                    yield LayerEntry(path=path, kind=EntryKind.DIR)
                elif member.issym():
                    yield LayerEntry(path=path, kind=EntryKind.SYMLINK, link_target=member.linkname)
                elif member.isfile():
                    fh = tar.extractfile(member)
                    yield LayerEntry(path=path, kind=EntryKind.FILE, content=fh.read() if fh else b"")
                elif member.islnk():
                    # hardlink targets are archive-root relative; mark absolute
                    # so view resolution does not treat them as sibling-relative
                    yield LayerEntry(
                        path=path,
                        kind=EntryKind.SYMLINK,
                        link_target="/" + _normalize_path(member.linkname),
                    )
    except tarfile.TarError as exc:
        raise CorruptLayer(f"tar decode failed: {exc}") from exc


class ImageFilesystem:
    """Read-only view of the flattened image: path -> entry.

    Symlinks are resolved within the image root only; ".." components clamp
    at the root so a crafted link can never escape the image.
    """

    def __init__(self, entries: Mapping[str, LayerEntry]):
        self._entries = dict(entries)

    def exists(self, path: str) -> bool:
        return self.resolve(path) in self._entries

    def resolve(self, path: str, _hops: int = 0) -> str:
        """Resolve symlinks in every component of ``path``; returns the final
        normalized path (which may or may not exist)."""
        if _hops > 40:
            return path
        resolved = ""
        parts = _normalize_path(path).split("/")
        for index, part in enumerate(parts):
            candidate = posixpath.join(resolved, part) if resolved else part
            entry = self._entries.get(candidate)
            if entry is not None and entry.kind is EntryKind.SYMLINK:
                target = entry.link_target
                if not target.startswith("/"):
                    target = posixpath.join(posixpath.dirname(candidate), target)
                target = _normalize_path(target)
                while target.startswith("../"):
                    target = target[3:]
                remainder = "/".join(parts[index + 1 :])
                combined = posixpath.join(target, remainder) if remainder else target
                return self.resolve(combined, _hops + 1)
            resolved = candidate
        return resolved

    def read(self, path: str) -> bytes:
        entry = self._entries.get(self.resolve(path))
        if entry is None or entry.kind is not EntryKind.FILE:
            raise FileNotFoundError(path)
        return entry.content

    def read_text(self, path: str) -> str:
        return self.read(path).decode("utf-8", errors="replace")

    def files(self) -> list[str]:
        return sorted(p for p, e in self._entries.items() if e.kind is EntryKind.FILE)


class DirectoryBlobStore:
    """Blob access over the registry-client on-disk layout
    (root/blobs/<algorithm>/<hex>)."""

    def __init__(self, root: Path | str):
        self.root = Path(root)

    def __getitem__(self, digest: str) -> bytes:
        algo, _, hexpart = digest.partition(":")
        return (self.root / "blobs" / algo / hexpart).read_bytes()


def assemble_filesystem(manifest: ImageManifest, blobs: Mapping[str, bytes]) -> ImageFilesystem:
    """Apply layers base-to-top into a flattened read-only view."""
    view: dict[str, LayerEntry] = {}

    def remove_tree(prefix: str) -> None:
        doomed = [p for p in view if p == prefix or p.startswith(prefix + "/")]
        for p in doomed:
            del view[p]

    for digest, media_type in zip(manifest.layer_digests, manifest.layer_media_types):
        additions: list[LayerEntry] = []
        # whiteouts in a layer delete from lower layers before this layer's
        # own files land, so a layer can wipe a directory and repopulate it
        for entry in iter_layer_entries(blobs[digest], media_type):
            if entry.kind is EntryKind.WHITEOUT:
                remove_tree(entry.path)
            elif entry.kind is EntryKind.OPAQUE_WHITEOUT:
                prefix = entry.path
                doomed = [p for p in view if not prefix or p.startswith(prefix + "/")]
                for p in doomed:
                    del view[p]
            else:
                additions.append(entry)
        for entry in additions:
            if not entry.path:
                continue
            if entry.kind is not EntryKind.DIR:
                remove_tree(entry.path)
            view[entry.path] = entry
    return ImageFilesystem(view)


@dataclass(frozen=True)
class Inventory:
    """Every package discovered in one image, deduplicated and ordered."""

    image: ImageRef
    packages: tuple[PackageRecord, ...]
    extracted_at: str
    extractor_version: str = __version__

    def to_json(self, include_volatile: bool = True) -> dict[str, Any]:
        out: dict[str, Any] = {
            "image": self.image.to_json(),
            "extractor_version": self.extractor_version,
            "packages": [p.to_json() for p in self.packages],
        }
        if include_volatile:
            out["extracted_at"] = self.extracted_at
        return out

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "Inventory":
        try:
            return cls(
                image=ImageRef.from_json(obj["image"]),
                packages=tuple(PackageRecord.from_json(p) for p in obj["packages"]),
                extracted_at=obj.get("extracted_at", ""),
                extractor_version=obj.get("extractor_version", ""),
            )
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"bad inventory object: {exc}") from exc

    def content_hash(self) -> str:
        # volatile fields excluded so identical blob bytes hash identically
        from .jsonio import canonical_json

        return sha256_hex(canonical_json(self.to_json(include_volatile=False)))


def parse_dpkg_status(content: str, source_path: str = "/" + DPKG_STATUS_PATH) -> list[PackageRecord]:
    """Parse dpkg's status database; one record per installed stanza.

    Stanzas whose Status is not "... installed" (deinstalled, half-installed,
    config-files) are skipped.
    """
    records: list[PackageRecord] = []
    stanzas = [s for s in content.split("\n\n") if s.strip()]
    for index, stanza in enumerate(stanzas):
        fields: dict[str, str] = {}
        last_key: Optional[str] = None
        for line in stanza.splitlines():
            if not line.strip():
                continue
            if line[0] in (" ", "\t"):
                if last_key is None:
                    raise ParseError(f"stanza {index}: continuation before any field")
                fields[last_key] += "\n" + line.strip()
                continue
            key, sep, value = line.partition(":")
            if not sep:
                raise ParseError(f"stanza {index}: field line missing colon: {line!r}")
            fields[key.strip()] = value.strip()
            last_key = key.strip()
        status_words = fields.get("Status", "").split()
        if not status_words or status_words[-1] != "installed":
            continue
        name = fields.get("Package")
        version = fields.get("Version")
        if not name or not version:
            raise ParseError(f"stanza {index}: installed package missing Package/Version")
        records.append(
            PackageRecord(
                name=name,
                version=version,
                ecosystem=Ecosystem.DPKG,
                pkg_class=PackageClass.OS,
                source_path=source_path,
            )
        )
    return records


def parse_apk_installed(content: str, source_path: str = "/" + APK_INSTALLED_PATH) -> list[PackageRecord]:
    """Parse apk's installed database: "K:V" line records separated by blank
    lines; P (name) and V (version) are mandatory."""
    records: list[PackageRecord] = []
    blocks = [b for b in content.split("\n\n") if b.strip()]
    for index, block in enumerate(blocks):
        fields: dict[str, str] = {}
        for line in block.splitlines():
            if not line.strip():
                continue
            key, sep, value = line.partition(":")
            if not sep or len(key) != 1:
                raise ParseError(f"record {index}: malformed line: {line!r}")
            fields.setdefault(key, value)
        if "P" not in fields:
            raise ParseError(f"record {index}: missing P: line")
        if "V" not in fields:
            raise ParseError(f"record {index}: missing V: line")
        records.append(
            PackageRecord(
                name=fields["P"],
                version=fields["V"],
                ecosystem=Ecosystem.APK,
                pkg_class=PackageClass.OS,
                source_path=source_path,
            )
        )
    return records


def _parse_pom_properties(text: str) -> Optional[tuple[str, str, str]]:
    props: dict[str, str] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith(("#", "!")):
            continue
        key, sep, value = line.partition("=")
        if sep:
            props[key.strip()] = value.strip()
    try:
        return props["groupId"], props["artifactId"], props["version"]
    except KeyError:
        return None


def _archive_records(
    data: bytes, source_path: str, app_selectors: list[str], depth: int
) -> list[PackageRecord]:
    try:
        archive = zipfile.ZipFile(io.BytesIO(data))
    except (zipfile.BadZipFile, OSError) as exc:
        log.warning("corrupt archive skipped: %s (%s)", source_path, exc)
        return []
    records: list[PackageRecord] = []
    names = archive.namelist()
    for name in names:
        parts = name.split("/")
        if (
            len(parts) == 5
            and parts[0] == "META-INF"
            and parts[1] == "maven"
            and parts[4] == "pom.properties"
        ):
            coords = _parse_pom_properties(archive.read(name).decode("utf-8", errors="replace"))
            if coords is None:
                log.warning("pom.properties without coordinates in %s", source_path)
                continue
            group, artifact, version = coords
            full_name = f"{group}:{artifact}"
            records.append(
                PackageRecord(
                    name=full_name,
                    version=version,
                    ecosystem=Ecosystem.MAVEN_ARCHIVE,
                    pkg_class=_classify_coordinates(full_name, app_selectors),
                    source_path=source_path,
                )
            )
    if depth == 0 and source_path.lower().endswith(NESTED_ARCHIVE_HOSTS):
        for name in names:
            if name.lower().endswith(".jar"):
                records.extend(
                    _archive_records(
                        archive.read(name), f"{source_path}!{name}", app_selectors, depth + 1
                    )
                )
    if not records:
        # no build metadata: keep a low-confidence placeholder so the gap is
        # visible in coverage instead of silently dropped
        stem = posixpath.basename(source_path.rsplit("!", 1)[-1])
        stem = stem.rsplit(".", 1)[0]
        records.append(
            PackageRecord(
                name=stem,
                version="unknown",
                ecosystem=Ecosystem.MAVEN_ARCHIVE,
                pkg_class=_classify_coordinates(stem, app_selectors),
                source_path=source_path,
            )
        )
    return records


def _classify_coordinates(name: str, app_selectors: list[str]) -> PackageClass:
    for selector in app_selectors:
        if fnmatch.fnmatchcase(name, selector):
            return PackageClass.APPLICATION
    return PackageClass.LIBRARY


def extract_archive_packages(
    fs: ImageFilesystem, app_selectors: Optional[list[str]] = None
) -> list[PackageRecord]:
    """Walk the view for java archives and read their embedded build
    metadata; war/ear archives are searched one nesting level deep.

    Corrupt archives are skipped with a warning, never fatal.
    """
    selectors = list(app_selectors or [])
    records: list[PackageRecord] = []
    for path in fs.files():
        if path.lower().endswith(ARCHIVE_SUFFIXES):
            records.extend(_archive_records(fs.read(path), "/" + path, selectors, depth=0))
    return records


def build_inventory(
    image: ImageRef,
    fs: ImageFilesystem,
    app_selectors: Optional[list[str]] = None,
    extracted_at: Optional[str] = None,
) -> Inventory:
    """Union of dpkg, apk, and archive extraction, each parser running only
    if its database path exists; deduplicated and deterministically ordered."""
    records: list[PackageRecord] = []
    if fs.exists(DPKG_STATUS_PATH):
        records.extend(parse_dpkg_status(fs.read_text(DPKG_STATUS_PATH)))
    if fs.exists(APK_INSTALLED_PATH):
        records.extend(parse_apk_installed(fs.read_text(APK_INSTALLED_PATH)))
    for rpm_path in RPM_DB_PATHS:
        if fs.exists(rpm_path):
            log.warning("unsupported ecosystem: rpm database at /%s was not parsed", rpm_path)
            break
    records.extend(extract_archive_packages(fs, app_selectors))

    unique: dict[tuple, PackageRecord] = {}
    for record in records:
        unique.setdefault(
            (record.ecosystem.value, record.name, record.version, record.source_path), record
        )
    ordered = sorted(
        unique.values(), key=lambda r: (r.ecosystem.value, r.name, r.version, r.source_path)
    )
    timestamp = extracted_at or datetime.now(timezone.utc).isoformat(timespec="seconds")
    return Inventory(image=image, packages=tuple(ordered), extracted_at=timestamp)


def load_image_layout(path: Path | str) -> tuple[ImageManifest, Mapping[str, bytes]]:
    """Open an image stored either as the registry-client on-disk layout or
    as a single docker-save / OCI-layout tarball."""
    path = Path(path)
    if path.is_dir():
        manifest = ImageManifest.from_json(read_json(path / "manifest.json"))
        return manifest, DirectoryBlobStore(path)
    return _load_image_tarball(path)


def _load_image_tarball(path: Path) -> tuple[ImageManifest, dict[str, bytes]]:
    blobs: dict[str, bytes] = {}
    try:
        with tarfile.open(path) as tar:
            names = tar.getnames()

            def read_member(name: str) -> bytes:
                fh = tar.extractfile(name)
                if fh is None:
                    raise CorruptLayer(f"{path}: unreadable member {name}")
                return fh.read()

            if "index.json" in names or "./index.json" in names:
                # OCI image layout
                import json as _json

                index = _json.loads(read_member("index.json" if "index.json" in names else "./index.json"))
                manifest_digest = index["manifests"][0]["digest"]
                algo, _, hexpart = manifest_digest.partition(":")
                manifest_doc = _json.loads(read_member(f"blobs/{algo}/{hexpart}"))
                layers = manifest_doc["layers"]
                manifest = ImageManifest(
                    media_type=manifest_doc.get("mediaType", "application/vnd.oci.image.manifest.v1+json"),
                    config_digest=manifest_doc["config"]["digest"],
                    layer_digests=tuple(l["digest"] for l in layers),
                    layer_media_types=tuple(l["mediaType"] for l in layers),
                )
                for digest in (manifest.config_digest, *manifest.layer_digests):
                    algo, _, hexpart = digest.partition(":")
                    blobs[digest] = read_member(f"blobs/{algo}/{hexpart}")
                return manifest, blobs
            if "manifest.json" in names:
                # docker-save layout: layer tars referenced by path, plain tar
                import json as _json

                descriptor = _json.loads(read_member("manifest.json"))[0]
                config_bytes = read_member(descriptor["Config"])
                layer_bytes = [read_member(layer) for layer in descriptor["Layers"]]
                config_digest = sha256_hex(config_bytes)
                digests = [sha256_hex(b) for b in layer_bytes]
                manifest = ImageManifest(
                    media_type="application/vnd.docker.distribution.manifest.v2+json",
                    config_digest=config_digest,
                    layer_digests=tuple(digests),
                    layer_media_types=tuple(PLAIN_LAYER_TYPES[0] for _ in digests),
                )
                blobs[config_digest] = config_bytes
                blobs.update(zip(digests, layer_bytes))
                return manifest, blobs
    except (tarfile.TarError, KeyError, ValueError) as exc:
        raise CorruptLayer(f"{path}: not a readable image tarball: {exc}") from exc
    raise SchemaError(f"{path}: neither an OCI layout nor a docker-save tarball")

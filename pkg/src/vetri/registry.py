"""Registry crawler and image puller over the OCI distribution HTTP protocol.

Two endpoint families are used: a hub-style API for catalog search, build
info, and crawl metadata, and the distribution API v2 for tags, manifests,
and blobs. HTTP only, no daemon socket integration, so everything is
testable against a fixture registry.

Credentials come from VETRI_REGISTRY_USER / VETRI_REGISTRY_TOKEN only; the
client otherwise follows anonymous WWW-Authenticate Bearer challenges with
scope "repository:<name>:pull".
"""

from __future__ import annotations

import hashlib
import logging
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional
from urllib.parse import quote

import requests

from .errors import (
    AuthError,
    DigestMismatch,
    NetworkError,
    NoMatchingPlatform,
    NotFound,
    ProtocolError,
)
from .jsonio import canonical_json
from .model import ImageRef

log = logging.getLogger(__name__)

MANIFEST_LIST_TYPES = (
    "application/vnd.docker.distribution.manifest.list.v2+json",
    "application/vnd.oci.image.index.v1+json",
)
MANIFEST_TYPES = (
    "application/vnd.docker.distribution.manifest.v2+json",
    "application/vnd.oci.image.manifest.v1+json",
)
ACCEPT_HEADER = ", ".join(MANIFEST_TYPES + MANIFEST_LIST_TYPES)

ENV_USER = "VETRI_REGISTRY_USER"
ENV_TOKEN = "VETRI_REGISTRY_TOKEN"


@dataclass(frozen=True)
class CatalogEntry:
    image: ImageRef
    download_count: int
    source_repo_url: Optional[str] = None

    def __post_init__(self) -> None:
        if self.download_count < 0:
            raise ValueError("download_count must be >= 0")

    def to_json(self) -> dict[str, Any]:
        return {
            "image": self.image.to_json(),
            "download_count": self.download_count,
            "source_repo_url": self.source_repo_url,
        }

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "CatalogEntry":
        return cls(
            image=ImageRef.from_json(obj["image"]),
            download_count=obj["download_count"],
            source_repo_url=obj.get("source_repo_url"),
        )


@dataclass(frozen=True)
class ImageManifest:
    """Normalized image manifest: config digest plus ordered layer digests,
    base layer first (application order)."""

    media_type: str
    config_digest: str
    layer_digests: tuple[str, ...]
    layer_media_types: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.layer_digests:
            raise ValueError("manifest must have at least one layer")
        if len(self.layer_digests) != len(self.layer_media_types):
            raise ValueError("layer_digests and layer_media_types must be parallel")

    def to_json(self) -> dict[str, Any]:
        return {
            "media_type": self.media_type,
            "config_digest": self.config_digest,
            "layer_digests": list(self.layer_digests),
            "layer_media_types": list(self.layer_media_types),
        }

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "ImageManifest":
        return cls(
            media_type=obj["media_type"],
            config_digest=obj["config_digest"],
            layer_digests=tuple(obj["layer_digests"]),
            layer_media_types=tuple(obj["layer_media_types"]),
        )


@dataclass(frozen=True)
class CrawlQuery:
    """Catalog search parameters. Fully config-driven: ranking and filtering
    beyond download-count ordering is expressed here, not hardcoded."""

    source_type: str = "community"
    page_limit: int = 1
    search_term: str = ""
    page_size: int = 100

    def __post_init__(self) -> None:
        if self.page_limit < 1:
            raise ValueError("page_limit must be >= 1")


def sha256_hex(data: bytes) -> str:
    return "sha256:" + hashlib.sha256(data).hexdigest()


class RegistryClient:
    """Client for one registry host (plus its hub-style metadata API).

    Shareable across tasks; layer blobs of one image are fetched concurrently
    bounded by ``parallelism``, but a destination directory belongs to one
    pull at a time.
    """

    def __init__(
        self,
        registry_url: str,
        hub_url: Optional[str] = None,
        *,
        platform: tuple[str, str] = ("linux", "amd64"),
        parallelism: int = 4,
        retries: int = 3,
        backoff: float = 0.5,
        timeout: float = 30.0,
        session: Optional[requests.Session] = None,
    ) -> None:
        self.registry_url = registry_url.rstrip("/")
        self.hub_url = (hub_url or registry_url).rstrip("/")
        self.platform = platform
        self.parallelism = parallelism
        self.retries = retries
        self.backoff = backoff
        self.timeout = timeout
        self.session = session or requests.Session()
        self._tokens: dict[str, str] = {}

    # -- transport ---------------------------------------------------------

    def _get(self, url: str, headers: Optional[dict] = None, stream: bool = False) -> requests.Response:
        last_exc: Exception | None = None
        for attempt in range(self.retries):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                return self.session.get(url, headers=headers, stream=stream, timeout=self.timeout)
            except (requests.ConnectionError, requests.Timeout) as exc:
                last_exc = exc
                log.warning("transport error on %s (attempt %d/%d): %s", url, attempt + 1, self.retries, exc)
        raise NetworkError(f"GET {url} failed after {self.retries} attempts: {last_exc}")

    def _fetch_token(self, challenge: str, scope: str) -> str:
        fields = dict(re.findall(r'(\w+)="([^"]*)"', challenge or ""))
        realm = fields.get("realm")
        if not realm:
            raise AuthError(f"unusable auth challenge: {challenge!r}")
        params = {"scope": scope}
        if "service" in fields:
            params["service"] = fields["service"]
        auth = None
        if os.environ.get(ENV_USER):
            auth = (os.environ[ENV_USER], os.environ.get(ENV_TOKEN, ""))
        try:
            resp = self.session.get(realm, params=params, auth=auth, timeout=self.timeout)
        except (requests.ConnectionError, requests.Timeout) as exc:
            raise NetworkError(f"token endpoint unreachable: {exc}") from exc
        if resp.status_code != 200:
            raise AuthError(f"token endpoint returned {resp.status_code}")
        body = resp.json()
        token = body.get("token") or body.get("access_token")
        if not token:
            raise AuthError("token endpoint returned no token")
        return token

    def _registry_get(self, path: str, repository: str, headers: Optional[dict] = None,
                      stream: bool = False) -> requests.Response:
        """distribution-API GET with Bearer challenge handling for pull scope."""
        scope = f"repository:{repository}:pull"
        url = f"{self.registry_url}{path}"
        hdrs = dict(headers or {})
        if scope in self._tokens:
            hdrs["Authorization"] = f"Bearer {self._tokens[scope]}"
        resp = self._get(url, headers=hdrs, stream=stream)
        if resp.status_code == 401:
            token = self._fetch_token(resp.headers.get("WWW-Authenticate", ""), scope)
            self._tokens[scope] = token
            hdrs["Authorization"] = f"Bearer {token}"
            resp = self._get(url, headers=hdrs, stream=stream)
            if resp.status_code == 401:
                raise AuthError(f"authorization rejected for {scope}")
        return resp

    # -- catalog crawling ---------------------------------------------------

    def crawl_catalog(self, query: CrawlQuery) -> list[CatalogEntry]:
        """Search the hub catalog; entries come back sorted by download count
        descending (stable, so equal counts keep server order)."""
        entries: list[CatalogEntry] = []
        url = (
            f"{self.hub_url}/v2/search/repositories"
            f"?query={quote(query.search_term or '*')}&source={quote(query.source_type)}"
            f"&page_size={query.page_size}&page=1"
        )
        for _ in range(query.page_limit):
            resp = self._get(url)
            if resp.status_code != 200:
                raise ProtocolError(f"catalog search returned {resp.status_code}")
            try:
                body = resp.json()
                for item in body["results"]:
                    entries.append(
                        CatalogEntry(
                            image=ImageRef.parse(item["repo_name"]),
                            download_count=int(item.get("pull_count", 0)),
                        )
                    )
                url = body.get("next")
            except (KeyError, TypeError, ValueError) as exc:
                raise ProtocolError(f"malformed catalog page: {exc}") from exc
            if not url:
                break
        entries.sort(key=lambda e: -e.download_count)
        return entries

    def resolve_source_repo(self, image: ImageRef) -> Optional[str]:
        """Declared source repository URL from the autobuild record, or None
        when the image has no build linkage (404 is absence, not an error)."""
        url = f"{self.hub_url}/v2/repositories/{image.repository}/autobuild/"
        resp = self._get(url)
        if resp.status_code == 404:
            return None
        if resp.status_code != 200:
            raise ProtocolError(f"autobuild endpoint returned {resp.status_code}")
        try:
            return resp.json().get("source_url") or None
        except ValueError as exc:
            raise ProtocolError(f"malformed autobuild response: {exc}") from exc

    def list_tags(self, image: ImageRef) -> list[str]:
        """All tags of a repository, in registry order, no synthetic entries."""
        resp = self._registry_get(f"/v2/{image.repository}/tags/list", image.repository)
        if resp.status_code == 404:
            raise NotFound(f"unknown repository: {image.repository}")
        if resp.status_code != 200:
            raise ProtocolError(f"tags/list returned {resp.status_code}")
        try:
            tags = resp.json()["tags"]
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed tags response: {exc}") from exc
        if not isinstance(tags, list):
            raise ProtocolError("tags field is not a list")
        return [str(t) for t in tags]

    @staticmethod
    def most_recent_tag(tags: list[str], last_updated: Optional[dict[str, str]] = None) -> str:
        """Pick the most recent tag: by last-updated ordering when the
        registry provided one, else lexically greatest."""
        if not tags:
            raise ValueError("no tags to choose from")
        if last_updated:
            return max(tags, key=lambda t: (last_updated.get(t, ""), t))
        return max(tags)

    # -- image pulling ------------------------------------------------------

    def _fetch_manifest(self, image: ImageRef) -> tuple[dict, str]:
        reference = image.digest or image.tag
        resp = self._registry_get(
            f"/v2/{image.repository}/manifests/{reference}",
            image.repository,
            headers={"Accept": ACCEPT_HEADER},
        )
        if resp.status_code == 404:
            raise NotFound(f"manifest not found: {image.repository}:{reference}")
        if resp.status_code != 200:
            raise ProtocolError(f"manifest fetch returned {resp.status_code}")
        try:
            body = resp.json()
        except ValueError as exc:
            raise ProtocolError(f"manifest is not JSON: {exc}") from exc
        media_type = body.get("mediaType") or resp.headers.get("Content-Type", "")
        return body, media_type

    def _select_platform(self, index: dict, image: ImageRef) -> ImageRef:
        want_os, want_arch = self.platform
        for entry in index.get("manifests", []):
            platform = entry.get("platform", {})
            if platform.get("os") == want_os and platform.get("architecture") == want_arch:
                return ImageRef(
                    repository=image.repository,
                    tag=image.tag,
                    registry=image.registry,
                    digest=entry["digest"],
                )
        raise NoMatchingPlatform(f"no {want_os}/{want_arch} entry in manifest list")

    def _fetch_blob(self, repository: str, digest: str, dest: Path) -> None:
        """Fetch one blob, verify its content hash, and store it atomically.

        An existing file is verified instead of re-downloaded, so a repeated
        pull performs no writes that change file contents.
        """
        algo, _, hexpart = digest.partition(":")
        path = dest / "blobs" / algo / hexpart
        if path.exists():
            if sha256_hex(path.read_bytes()) != digest:
                raise DigestMismatch(f"stored blob {digest} is corrupted")
            return
        resp = self._registry_get(f"/v2/{repository}/blobs/{digest}", repository, stream=True)
        if resp.status_code == 404:
            raise NotFound(f"blob not found: {digest}")
        if resp.status_code != 200:
            raise ProtocolError(f"blob fetch returned {resp.status_code}")
        hasher = hashlib.sha256()
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".part")
        try:
            with open(tmp, "wb") as fh:
                for chunk in resp.iter_content(chunk_size=64 * 1024):
                    hasher.update(chunk)
                    fh.write(chunk)
            if f"{algo}:{hasher.hexdigest()}" != digest:
                raise DigestMismatch(f"blob {digest} hash mismatch after transfer")
            os.replace(tmp, path)
        finally:
            tmp.unlink(missing_ok=True)

    def pull_image(self, image: ImageRef, dest: Path | str) -> ImageManifest:
        """Pull manifest and all layer blobs into ``dest``.

        Manifest lists resolve to the configured platform. Every stored blob
        is verified against the digest it was requested under. On-disk layout:
        dest/manifest.json plus dest/blobs/<algorithm>/<hex>.
        """
        dest = Path(dest)
        body, media_type = self._fetch_manifest(image)
        if media_type in MANIFEST_LIST_TYPES:
            image = self._select_platform(body, image)
            body, media_type = self._fetch_manifest(image)
        try:
            config_digest = body["config"]["digest"]
            layers = [(layer["digest"], layer["mediaType"]) for layer in body["layers"]]
        except (KeyError, TypeError) as exc:
            raise ProtocolError(f"manifest missing required fields: {exc}") from exc
        manifest = ImageManifest(
            media_type=media_type,
            config_digest=config_digest,
            layer_digests=tuple(d for d, _ in layers),
            layer_media_types=tuple(m for _, m in layers),
        )
        dest.mkdir(parents=True, exist_ok=True)
        digests = [config_digest] + list(manifest.layer_digests)
        with ThreadPoolExecutor(max_workers=max(1, self.parallelism)) as pool:
            futures = [pool.submit(self._fetch_blob, image.repository, d, dest) for d in digests]
            for future in futures:
                future.result()
        manifest_path = dest / "manifest.json"
        rendered = canonical_json(manifest.to_json())
        if not (manifest_path.exists() and manifest_path.read_bytes() == rendered):
            manifest_path.write_bytes(rendered)
        return manifest

"""Shared fixtures: a hand-built 3-layer image, an in-process fixture
registry speaking the distribution protocol with token auth, and canned
scanner reports / feeds wired to known contents."""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import urlparse

import pytest

from helpers import make_archive, make_layer_tar
from vetri.jsonio import canonical_json
from vetri.model import ImageRef
from vetri.registry import sha256_hex

GZIP_LAYER = "application/vnd.docker.image.rootfs.diff.tar.gzip"
MANIFEST_V2 = "application/vnd.docker.distribution.manifest.v2+json"
MANIFEST_LIST_V2 = "application/vnd.docker.distribution.manifest.list.v2+json"
CONFIG_TYPE = "application/vnd.docker.container.image.v1+json"


DPKG_STATUS = """\
Package: bash
Status: install ok installed
Priority: required
Version: 4.4.18-2ubuntu1
Description: GNU Bourne Again SHell
 Bash is an sh-compatible command language interpreter.

Package: coreutils
Status: install ok installed
Version: 8.28-1ubuntu1

Package: curl
Status: install ok installed
Version: 7.58.0-2ubuntu3

Package: libssl1.1
Status: install ok installed
Version: 1.1.0g-2ubuntu4

Package: oldpkg
Status: deinstall ok config-files
Version: 1.0-1

Package: tar
Status: install ok installed
Version: 1.29b-2ubuntu0.1
"""

APK_INSTALLED = """\
C:Q1pVmIp2XHvyp0W2naRJAG/2sRrpM=
P:busybox
V:1.31.1-r9
A:x86_64
T:Size optimized toolbox of many common UNIX utilities

C:Q1qDqZlhzLvzkKvalksdjfasdfjas=
P:musl
V:1.1.24-r2
A:x86_64

C:Q1aa2l9qwerzkKvalksdjfasdfjas=
P:zlib
V:1.2.11-r3
A:x86_64
"""

# exactly 10 records: 5 dpkg + 3 apk + 2 metadata-bearing archives
FIXTURE_INVENTORY_MANIFEST = [
    ("busybox", "1.31.1-r9", "Apk", "OS"),
    ("musl", "1.1.24-r2", "Apk", "OS"),
    ("zlib", "1.2.11-r3", "Apk", "OS"),
    ("bash", "4.4.18-2ubuntu1", "Dpkg", "OS"),
    ("coreutils", "8.28-1ubuntu1", "Dpkg", "OS"),
    ("curl", "7.58.0-2ubuntu3", "Dpkg", "OS"),
    ("libssl1.1", "1.1.0g-2ubuntu4", "Dpkg", "OS"),
    ("tar", "1.29b-2ubuntu0.1", "Dpkg", "OS"),
    ("com.example:myapp", "1.0.0", "MavenArchive", "Application"),
    ("mysql:mysql-connector-java", "5.1.38", "MavenArchive", "Library"),
]

APP_SELECTORS = ["com.example:myapp"]


@dataclass
class FixtureImage:
    image: ImageRef
    manifest_bytes: bytes
    manifest_digest: str
    manifest_list_bytes: bytes
    blobs: dict[str, bytes]
    layer_digests: list[str]
    config_digest: str


def build_fixture_image(repository: str = "acme/webapp", tag: str = "1.0") -> FixtureImage:
    """3 layers: base OS databases, an override + apk + library jar, then a
    whiteout plus the application war."""
    layer1 = make_layer_tar(
        {
            "etc/a": b"x",
            "var/lib/dpkg/status": DPKG_STATUS.encode(),
            "opt/p/f": b"to be whited out",
        }
    )
    layer2 = make_layer_tar(
        {
            "etc/a": b"y",
            "lib/apk/db/installed": APK_INSTALLED.encode(),
            "opt/libs/mysql-connector-java-5.1.38.jar": make_archive(
                ("mysql", "mysql-connector-java", "5.1.38")
            ),
        }
    )
    layer3 = make_layer_tar(
        {
            "opt/p/.wh.f": b"",
            "opt/app/myapp.war": make_archive(("com.example", "myapp", "1.0.0")),
        }
    )
    config = canonical_json({"architecture": "amd64", "os": "linux"})
    blobs: dict[str, bytes] = {}
    layer_digests = []
    for layer in (layer1, layer2, layer3):
        digest = sha256_hex(layer)
        blobs[digest] = layer
        layer_digests.append(digest)
    config_digest = sha256_hex(config)
    blobs[config_digest] = config
    manifest = {
        "schemaVersion": 2,
        "mediaType": MANIFEST_V2,
        "config": {"mediaType": CONFIG_TYPE, "digest": config_digest, "size": len(config)},
        "layers": [
            {"mediaType": GZIP_LAYER, "digest": d, "size": len(blobs[d])} for d in layer_digests
        ],
    }
    manifest_bytes = json.dumps(manifest).encode()
    manifest_digest = sha256_hex(manifest_bytes)
    manifest_list = {
        "schemaVersion": 2,
        "mediaType": MANIFEST_LIST_V2,
        "manifests": [
            {
                "mediaType": MANIFEST_V2,
                "digest": manifest_digest,
                "size": len(manifest_bytes),
                "platform": {"architecture": "amd64", "os": "linux"},
            }
        ],
    }
    return FixtureImage(
        image=ImageRef(repository=repository, tag=tag),
        manifest_bytes=manifest_bytes,
        manifest_digest=manifest_digest,
        manifest_list_bytes=json.dumps(manifest_list).encode(),
        blobs=blobs,
        layer_digests=layer_digests,
        config_digest=config_digest,
    )


# -- fixture registry server --------------------------------------------------

SEARCH_RESULTS = [
    {"repo_name": "tiny/tool", "pull_count": 5},
    {"repo_name": "acme/webapp", "pull_count": 900000},
    {"repo_name": "misc/helper", "pull_count": 12},
]

ARM_ONLY_LIST = {
    "schemaVersion": 2,
    "mediaType": MANIFEST_LIST_V2,
    "manifests": [
        {
            "mediaType": MANIFEST_V2,
            "digest": "sha256:" + "0" * 64,
            "size": 1,
            "platform": {"architecture": "arm64", "os": "linux"},
        }
    ],
}


@dataclass
class RegistryState:
    fixture: FixtureImage
    require_auth: bool = True
    tampered_digests: set[str] = field(default_factory=set)
    token: str = "fixture-token"
    requests_seen: list[str] = field(default_factory=list)
    token_auth_headers: list[str | None] = field(default_factory=list)


class FixtureRegistryHandler(BaseHTTPRequestHandler):
    def log_message(self, *args):  # keep test output clean
        pass

    @property
    def state(self) -> RegistryState:
        return self.server.state  # type: ignore[attr-defined]

    def _send(self, code: int, body: bytes = b"", content_type: str = "application/json",
              extra_headers: dict[str, str] | None = None) -> None:
        self.send_response(code)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        for key, value in (extra_headers or {}).items():
            self.send_header(key, value)
        self.end_headers()
        self.wfile.write(body)

    def _json(self, code: int, obj) -> None:
        self._send(code, json.dumps(obj).encode())

    def _challenge(self) -> None:
        host = self.headers.get("Host", "localhost")
        realm = f"http://{host}/token"
        self._send(
            401,
            b'{"errors":[{"code":"UNAUTHORIZED"}]}',
            extra_headers={
                "WWW-Authenticate": f'Bearer realm="{realm}",service="fixture-registry"'
            },
        )

    def _authorized(self) -> bool:
        if not self.state.require_auth:
            return True
        return self.headers.get("Authorization") == f"Bearer {self.state.token}"

    def do_GET(self):  # noqa: C901 - route table
        state = self.state
        parsed = urlparse(self.path)
        path, query = parsed.path, parsed.query
        state.requests_seen.append(path)
        fixture = state.fixture
        repo = fixture.image.repository

        if path == "/token":
            state.token_auth_headers.append(self.headers.get("Authorization"))
            self._json(200, {"token": state.token})
            return
        if path == "/feeds/fixture.json":
            self._send(200, json.dumps(FIXTURE_FEED).encode())
            return
        # hub-style endpoints (no auth)
        if path == "/v2/search/repositories":
            if "source=community" not in query:
                self._json(200, {"count": 0, "next": None, "results": []})
            elif "page_size=2" in query:
                # two-page pagination variant
                host = self.headers.get("Host", "localhost")
                if "page=2" in query:
                    self._json(200, {"count": 3, "next": None, "results": SEARCH_RESULTS[2:]})
                else:
                    next_url = (
                        f"http://{host}/v2/search/repositories"
                        "?query=*&source=community&page_size=2&page=2"
                    )
                    self._json(200, {"count": 3, "next": next_url, "results": SEARCH_RESULTS[:2]})
            else:
                self._json(200, {"count": 3, "next": None, "results": SEARCH_RESULTS})
            return
        if path == f"/v2/repositories/{repo}/autobuild/":
            self._json(200, {"source_url": "https://github.com/acme/webapp"})
            return
        if path == "/v2/repositories/plain/image/autobuild/":
            self._json(200, {"build_name": "plain/image"})
            return
        if path.startswith("/v2/repositories/"):
            self._json(404, {"detail": "not found"})
            return
        # distribution endpoints (token auth)
        if path.startswith("/v2/"):
            if not self._authorized():
                self._challenge()
                return
        if path == "/v2/":
            self._send(200, b"{}")
            return
        if path == f"/v2/{repo}/tags/list":
            self._json(200, {"name": repo, "tags": ["0.9", "1.0"]})
            return
        if path == "/v2/single/tag/tags/list":
            self._json(200, {"name": "single/tag", "tags": ["v1"]})
            return
        if path.endswith("/tags/list"):
            self._json(404, {"errors": [{"code": "NAME_UNKNOWN"}]})
            return
        if path == f"/v2/{repo}/manifests/{fixture.image.tag}":
            self._send(200, fixture.manifest_list_bytes, MANIFEST_LIST_V2)
            return
        if path == f"/v2/{repo}/manifests/armonly":
            self._send(200, json.dumps(ARM_ONLY_LIST).encode(), MANIFEST_LIST_V2)
            return
        if path == f"/v2/{repo}/manifests/direct":
            self._send(200, fixture.manifest_bytes, MANIFEST_V2)
            return
        if path == f"/v2/{repo}/manifests/{fixture.manifest_digest}":
            self._send(200, fixture.manifest_bytes, MANIFEST_V2)
            return
        if path.startswith(f"/v2/{repo}/blobs/"):
            digest = path.rsplit("/", 1)[1]
            if digest in fixture.blobs:
                body = fixture.blobs[digest]
                if digest in state.tampered_digests:
                    body = b"\x00" + body[1:]
                self._send(200, body, "application/octet-stream")
                return
            self._json(404, {"errors": [{"code": "BLOB_UNKNOWN"}]})
            return
        self._json(404, {"errors": [{"code": "NOT_FOUND"}]})


@dataclass
class RunningRegistry:
    url: str
    state: RegistryState

    @property
    def fixture(self) -> FixtureImage:
        return self.state.fixture


@pytest.fixture(scope="session")
def fixture_image() -> FixtureImage:
    return build_fixture_image()


@pytest.fixture()
def registry_server(fixture_image):
    server = ThreadingHTTPServer(("127.0.0.1", 0), FixtureRegistryHandler)
    server.state = RegistryState(fixture=fixture_image)  # type: ignore[attr-defined]
    thread = threading.Thread(
        target=server.serve_forever, kwargs={"poll_interval": 0.02}, daemon=True
    )
    thread.start()
    try:
        yield RunningRegistry(url=f"http://127.0.0.1:{server.server_port}", state=server.state)
    finally:
        server.shutdown()
        thread.join(timeout=5)


# -- canned scanner reports and feeds ------------------------------------------

FIXTURE_FEED = {
    "feed_id": "fixture-feed",
    "fetched_at": "2024-01-01T00:00:00+00:00",
    "schema_version": 1,
    "entries": [
        {
            "cve_id": "CVE-2016-2781",
            "ecosystem": "Dpkg",
            "package_selector": "coreutils",
            "severity": "Medium",
            "affected_below": "8.30-1",
            "fixed_in": "8.30-1",
            "description": "directory traversal in chroot",
        },
        {
            "cve_id": "CVE-2018-1000120",
            "ecosystem": "Dpkg",
            "package_selector": "curl",
            "severity": "High",
            "affected_below": "7.58.0-2ubuntu3.1",
            "fixed_in": "7.58.0-2ubuntu3.1",
            "description": "ftp path handling heap overflow",
        },
        {
            "cve_id": "CVE-2019-5747",
            "ecosystem": "Apk",
            "package_selector": "busybox",
            "severity": "Medium",
            "affected_below": "1.31.1-r10",
            "fixed_in": "1.31.1-r10",
            "description": "dhcp option parsing out of bounds read",
        },
        {
            "cve_id": "CVE-2017-3523",
            "ecosystem": "MavenArchive",
            "package_selector": "mysql:mysql-connector-java",
            "severity": "High",
            "affected_below": "5.1.41",
            "fixed_in": "5.1.41",
            "description": "connector deserialization issue",
        },
        {
            "cve_id": "CVE-2000-0001",
            "ecosystem": "Dpkg",
            "package_selector": "libssl1.1",
            "severity": "Low",
            "affected_below": "1.1.1-1",
            "fixed_in": "1.1.1-1",
            "description": "low severity filler",
        },
        {
            "cve_id": "CVE-2000-0002",
            "ecosystem": "Dpkg",
            "package_selector": "bash",
            "severity": "High",
            "affected_below": "5.0-1",
            "description": "no fix available yet",
        },
    ],
}

CLAIR_FIXTURE = {
    "image": "acme/webapp:1.0",
    "unapproved": ["CVE-2016-2781"],
    "vulnerabilities": [
        {
            "featurename": "coreutils",
            "featureversion": "8.28-1ubuntu1",
            "vulnerability": "CVE-2016-2781",
            "namespace": "ubuntu:18.04",
            "severity": "Medium",
            "fixedby": "8.30-1",
        },
        {
            "featurename": "curl",
            "featureversion": "7.58.0-2ubuntu3",
            "vulnerability": "CVE-2018-1000120",
            "namespace": "ubuntu:18.04",
            "severity": "High",
            "fixedby": "7.58.0-2ubuntu3.1",
        },
        {
            "featurename": "tar",
            "featureversion": "1.29b-2ubuntu0.1",
            "vulnerability": "CVE-2018-20482",
            "namespace": "ubuntu:18.04",
            "severity": "Medium",
            "fixedby": "1.30+dfsg-6",
        },
        {
            "featurename": "libssl1.1",
            "featureversion": "1.1.0g-2ubuntu4",
            "vulnerability": "CVE-2016-9999",
            "namespace": "ubuntu:18.04",
            "severity": "Negligible",
            "fixedby": "1.1.0g-3",
        },
        {
            "featurename": "bash",
            "featureversion": "4.4.18-2ubuntu1",
            "vulnerability": "CVE-2017-8888",
            "namespace": "ubuntu:18.04",
            "severity": "High",
            "fixedby": "",
        },
    ],
}

ANCHORE_FIXTURE = {
    "vulnerability_type": "os",
    "vulnerabilities": [
        {
            "vuln": "CVE-2016-2781",
            "package_name": "coreutils",
            "package_version": "8.28-1ubuntu1",
            "severity": "Medium",
            "fix": "8.30-1",
        },
        {
            "vuln": "CVE-2019-5747",
            "package_name": "busybox",
            "package_version": "1.31.1-r9",
            "severity": "Medium",
            "fix": "1.31.1-r10",
        },
        {
            "vuln": "CVE-2018-25032",
            "package_name": "zlib",
            "package_version": "1.2.11-r3",
            "severity": "High",
            "fix": "1.2.12-r0",
        },
        {
            "vuln": "CVE-2015-1111",
            "package_name": "tar",
            "package_version": "1.29b-2ubuntu0.1",
            "severity": "High",
            "fix": "None",
        },
    ],
}

ANCHORE_NONOS_FIXTURE = {
    "vulnerability_type": "non-os",
    "vulnerabilities": [
        {
            "vuln": "CVE-2017-3523",
            "package_name": "mysql:mysql-connector-java",
            "package_version": "5.1.38",
            "severity": "High",
            "fix": "5.1.41",
        },
        {
            "vuln": "CVE-2017-3523",
            "package_name": "mysql:mysql-connector-java-bin",
            "package_version": "5.1.38",
            "severity": "High",
            "fix": "5.1.41",
        },
    ],
}

# 5 projects totalling 19 SECURITY findings: 10 + 6 + 2 + 1 by kind
STATIC_XML_TEMPLATE = """<?xml version="1.0" encoding="UTF-8"?>
<BugCollection version="4.7.3">
{instances}
</BugCollection>
"""

BUG_INSTANCE_TEMPLATE = """  <BugInstance type="{type}" category="{category}" priority="2">
    <Class classname="{classname}">
      <SourceLine classname="{classname}" start="{line}" end="{line}"/>
    </Class>
  </BugInstance>"""


def make_static_xml(instances: list[tuple[str, str, str, int]]) -> str:
    rendered = "\n".join(
        BUG_INSTANCE_TEMPLATE.format(type=t, category=c, classname=cls, line=line)
        for t, c, cls, line in instances
    )
    return STATIC_XML_TEMPLATE.format(instances=rendered)


# distribution of analyzer bug types per project: 10 SQL-injection-A,
# 6 SQL-injection-B, 2 response splitting, 1 XSS across 5 projects
STATIC_PROJECT_KINDS = {
    "proj-a": ["SQL_NONCONSTANT_STRING_PASSED_TO_EXECUTE"] * 3,
    "proj-b": ["SQL_NONCONSTANT_STRING_PASSED_TO_EXECUTE"] * 2
    + ["SQL_PREPARED_STATEMENT_GENERATED_FROM_NONCONSTANT_STRING"] * 2,
    "proj-c": ["SQL_NONCONSTANT_STRING_PASSED_TO_EXECUTE"] * 2
    + ["HRS_REQUEST_PARAMETER_TO_HTTP_HEADER"] * 2,
    "proj-d": ["SQL_PREPARED_STATEMENT_GENERATED_FROM_NONCONSTANT_STRING"] * 1,
    "proj-e": ["SQL_NONCONSTANT_STRING_PASSED_TO_EXECUTE"] * 3
    + ["SQL_PREPARED_STATEMENT_GENERATED_FROM_NONCONSTANT_STRING"] * 3
    + ["XSS_REQUEST_PARAMETER_TO_SERVLET_WRITER"] * 1,
}


def write_static_fixtures(directory) -> dict[str, str]:
    paths = {}
    for project, kinds in STATIC_PROJECT_KINDS.items():
        instances = [
            (kind, "SECURITY", f"com.example.{project.replace('-', '.')}.C{i}", 10 + i)
            for i, kind in enumerate(kinds)
        ]
        # every report also carries non-security noise that must be filtered
        instances.append(("NP_NULL_ON_SOME_PATH", "CORRECTNESS", "com.example.Noise", 1))
        path = directory / f"{project}.xml"
        path.write_text(make_static_xml(instances))
        paths[project] = str(path)
    return paths


@pytest.fixture()
def report_files(tmp_path):
    """Write the canned feed/report fixtures to disk and return their paths."""
    feed_path = tmp_path / "fixture-feed.json"
    feed_path.write_text(json.dumps(FIXTURE_FEED, indent=2))
    clair_path = tmp_path / "clair-report.json"
    clair_path.write_text(json.dumps(CLAIR_FIXTURE, indent=2))
    anchore_path = tmp_path / "anchore-report.json"
    anchore_path.write_text(json.dumps(ANCHORE_FIXTURE, indent=2))
    anchore_nonos_path = tmp_path / "anchore-nonos.json"
    anchore_nonos_path.write_text(json.dumps(ANCHORE_NONOS_FIXTURE, indent=2))
    static_dir = tmp_path / "static"
    static_dir.mkdir()
    static_paths = write_static_fixtures(static_dir)
    return {
        "feed": str(feed_path),
        "clair": str(clair_path),
        "anchore": str(anchore_path),
        "anchore_nonos": str(anchore_nonos_path),
        "static": static_paths,
    }

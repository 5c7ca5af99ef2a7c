"""Binary fixture builders shared by tests: layer tars and java archives."""

from __future__ import annotations

import gzip
import io
import tarfile
import zipfile


def make_layer_tar(entries: dict[str, bytes | None], compress: bool = True,
                   symlinks: dict[str, str] | None = None,
                   hardlinks: dict[str, str] | None = None) -> bytes:
    """Layer tar from {path: content} (None means directory) plus links."""
    buf = io.BytesIO()
    with tarfile.open(fileobj=buf, mode="w") as tar:
        for path, content in entries.items():
            if content is None:
                info = tarfile.TarInfo(path)
                info.type = tarfile.DIRTYPE
                tar.addfile(info)
            else:
                info = tarfile.TarInfo(path)
                info.size = len(content)
                tar.addfile(info, io.BytesIO(content))
        for path, target in (symlinks or {}).items():
            info = tarfile.TarInfo(path)
            info.type = tarfile.SYMTYPE
            info.linkname = target
            tar.addfile(info)
        for path, target in (hardlinks or {}).items():
            info = tarfile.TarInfo(path)
            info.type = tarfile.LNKTYPE
            info.linkname = target
            tar.addfile(info)
    data = buf.getvalue()
    return gzip.compress(data, mtime=0) if compress else data


def make_archive(coords: tuple[str, str, str] | None, nested: dict[str, bytes] | None = None,
                 extra: dict[str, bytes] | None = None) -> bytes:
    """A jar/war-style zip, optionally carrying maven coordinates and nested
    jar entries."""
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        if coords is not None:
            group, artifact, version = coords
            zf.writestr(
                f"META-INF/maven/{group}/{artifact}/pom.properties",
                f"#generated\ngroupId={group}\nartifactId={artifact}\nversion={version}\n",
            )
        for name, content in (nested or {}).items():
            zf.writestr(name, content)
        for name, content in (extra or {}).items():
            zf.writestr(name, content)
    return buf.getvalue()

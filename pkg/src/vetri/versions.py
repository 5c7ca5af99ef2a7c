"""Package version comparison, one comparator per ecosystem.

Dpkg follows the Debian policy algorithm: optional numeric epoch before the
first ":", upstream/revision split at the last "-", and alternating
non-digit/digit segment comparison where "~" sorts before everything
including end-of-string. Apk uses the same segment algorithm with a trailing
"-rN" release suffix compared numerically. Maven archive versions tokenize
on dots and dashes with a fixed qualifier ordering.
"""

from __future__ import annotations

import re

from .errors import MalformedVersion
from .model import Ecosystem

_DIGITS = "0123456789"


def _is_digit(c: str) -> bool:
    return c in _DIGITS


def _char_order(c: str | None) -> int:
    # end-of-string and digits rank 0, "~" below everything, letters by code
    # point, all other characters after letters
    if c is None or _is_digit(c):
        return 0
    if c == "~":
        return -1
    if c.isascii() and c.isalpha():
        return ord(c)
    return ord(c) + 256


def _segment_cmp(a: str, b: str) -> int:
    """Debian verrevcmp over one version part (upstream or revision)."""
    i = j = 0
    la, lb = len(a), len(b)
    while i < la or j < lb:
        while (i < la and not _is_digit(a[i])) or (j < lb and not _is_digit(b[j])):
            ac = _char_order(a[i]) if i < la else 0
            bc = _char_order(b[j]) if j < lb else 0
            if ac != bc:
                return -1 if ac < bc else 1
            i += 1
            j += 1
        while i < la and a[i] == "0":
            i += 1
        while j < lb and b[j] == "0":
            j += 1
        first_diff = 0
        while i < la and j < lb and _is_digit(a[i]) and _is_digit(b[j]):
            if first_diff == 0:
                first_diff = ord(a[i]) - ord(b[j])
            i += 1
            j += 1
        if i < la and _is_digit(a[i]):
            return 1
        if j < lb and _is_digit(b[j]):
            return -1
        if first_diff:
            return -1 if first_diff < 0 else 1
    return 0


def _split_epoch(version: str) -> tuple[int, str]:
    if ":" not in version:
        return 0, version
    epoch, rest = version.split(":", 1)
    if not epoch or not all(_is_digit(c) for c in epoch):
        raise MalformedVersion(f"epoch must be a non-empty number: {version!r}")
    if not rest:
        raise MalformedVersion(f"nothing after epoch colon: {version!r}")
    return int(epoch), rest


def _dpkg_cmp(a: str, b: str) -> int:
    epoch_a, rest_a = _split_epoch(a)
    epoch_b, rest_b = _split_epoch(b)
    if epoch_a != epoch_b:
        return -1 if epoch_a < epoch_b else 1
    upstream_a, _, revision_a = rest_a.rpartition("-") if "-" in rest_a else (rest_a, "", "")
    upstream_b, _, revision_b = rest_b.rpartition("-") if "-" in rest_b else (rest_b, "", "")
    result = _segment_cmp(upstream_a, upstream_b)
    if result:
        return result
    return _segment_cmp(revision_a, revision_b)


_APK_RELEASE = re.compile(r"^(.*)-r(\d+)$")


def _apk_cmp(a: str, b: str) -> int:
    ma, mb = _APK_RELEASE.match(a), _APK_RELEASE.match(b)
    base_a, rel_a = (ma.group(1), int(ma.group(2))) if ma else (a, 0)
    base_b, rel_b = (mb.group(1), int(mb.group(2))) if mb else (b, 0)
    result = _segment_cmp(base_a, base_b)
    if result:
        return result
    return (rel_a > rel_b) - (rel_a < rel_b)


# alpha < beta < milestone < rc < "" (release) < sp; unknown qualifiers sort
# after release, lexically among themselves; numeric tokens beat any qualifier
_MAVEN_QUALIFIERS = {"alpha": 0, "beta": 1, "milestone": 2, "rc": 3, "": 4, "sp": 5}
_MAVEN_UNKNOWN_RANK = 6
_MAVEN_NUMERIC_RANK = 7


def _maven_token_key(token: str) -> tuple[int, int | str]:
    if token.isdigit():
        return (_MAVEN_NUMERIC_RANK, int(token))
    low = token.lower()
    if low in _MAVEN_QUALIFIERS:
        return (_MAVEN_QUALIFIERS[low], 0)
    return (_MAVEN_UNKNOWN_RANK, low)


def _maven_cmp(a: str, b: str) -> int:
    tokens_a = re.split(r"[.\-]", a)
    tokens_b = re.split(r"[.\-]", b)
    length = max(len(tokens_a), len(tokens_b))
    # missing numeric tokens pad as 0, missing qualifiers pad as release ""
    tokens_a += [""] * (length - len(tokens_a))
    tokens_b += [""] * (length - len(tokens_b))
    for ta, tb in zip(tokens_a, tokens_b):
        ka, kb = _maven_token_key(ta), _maven_token_key(tb)
        if ka[0] != kb[0]:
            # "" pads compare as 0 against numeric tokens so 1.0 == 1.0.0
            if ka[0] == _MAVEN_NUMERIC_RANK and kb == (_MAVEN_QUALIFIERS[""], 0):
                kb = (_MAVEN_NUMERIC_RANK, 0)
            elif kb[0] == _MAVEN_NUMERIC_RANK and ka == (_MAVEN_QUALIFIERS[""], 0):
                ka = (_MAVEN_NUMERIC_RANK, 0)
        if ka != kb:
            return -1 if ka < kb else 1
    return 0


_COMPARATORS = {
    Ecosystem.DPKG: _dpkg_cmp,
    Ecosystem.APK: _apk_cmp,
    Ecosystem.MAVEN_ARCHIVE: _maven_cmp,
}


def compare_versions(a: str, b: str, ecosystem: Ecosystem) -> int:
    """Compare two version strings under the ecosystem's rules.

    Returns -1, 0, or 1. Raises MalformedVersion for empty inputs or a
    non-numeric/empty epoch.
    """
    if not a or not b:
        raise MalformedVersion("version strings must be non-empty")
    return _COMPARATORS[ecosystem](a, b)

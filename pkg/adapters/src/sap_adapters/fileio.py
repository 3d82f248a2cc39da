"""Shared file plumbing: atomic writes, JSONL, uri resolution."""

from __future__ import annotations

import json
import os
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Iterable, Iterator
from urllib.parse import unquote, urlparse


class AdapterError(RuntimeError):
    """An input the adapters cannot process."""


@contextmanager
def atomic_write(path: str | Path, mode: str = "wb") -> Iterator:
    """Write to a temp file in the target directory and rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def read_jsonl(path: str | Path) -> Iterator[tuple[int, dict]]:
    path = Path(path)
    if not path.exists():
        raise AdapterError(f"missing file: {path}")
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise AdapterError(f"{path}:{lineno}: malformed record: {exc.msg}") from None
            if not isinstance(record, dict):
                raise AdapterError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, record


def write_jsonl(path: str | Path, records: Iterable[dict]) -> None:
    with atomic_write(path, "w") as fh:
        for record in records:
            fh.write(json.dumps(record) + "\n")


def resolve_uri(uri: str, base: str | Path | None = None) -> Path:
    """Map a manifest uri to a local filesystem path.

    file:// uris resolve directly; bare paths resolve relative to `base`
    (typically the manifest's directory).
    """
    parsed = urlparse(uri)
    if parsed.scheme == "file":
        return Path(unquote(parsed.path))
    if parsed.scheme in ("", None):
        candidate = Path(uri)
        if not candidate.is_absolute() and base is not None:
            candidate = Path(base) / candidate
        return candidate
    raise AdapterError(f"unsupported uri scheme {parsed.scheme!r} in {uri!r}")

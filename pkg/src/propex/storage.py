"""Line-delimited persistence shared by the CLI commands.

Every output file starts with a ``{"_meta": ...}`` line carrying the config
hash and prompt-pack version, so any artifact can be traced back to the run
that produced it. Readers skip meta lines. Serialization is canonical
(sorted keys, no timestamps in data lines), which makes identical runs
byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import re
from pathlib import Path
from typing import IO, Any, Iterable, Iterator

from .conversation import Turn
from .engine import ExtractionRecord


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def config_hash(obj: Any) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:16]


def meta_line(kind: str, cfg_hash: str, pack_version: str | None, **extra) -> str:
    meta = {"kind": kind, "config_hash": cfg_hash, "pack_version": pack_version}
    meta.update(extra)
    return canonical_json({"_meta": meta})


def iter_jsonl(path: str | Path) -> Iterator[dict]:
    """Data lines of a jsonl file, meta lines skipped."""
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if "_meta" in obj:
                continue
            yield obj


def read_meta(path: str | Path) -> dict | None:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            return obj.get("_meta")
    return None


def write_jsonl(
    path: str | Path, objs: Iterable[dict], meta: str | None = None
) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        if meta is not None:
            fh.write(meta + "\n")
        for obj in objs:
            fh.write(canonical_json(obj) + "\n")
            count += 1
    return count


# ---------------------------------------------------------------------------
# Extraction records
# ---------------------------------------------------------------------------


def load_records(path: str | Path) -> list[ExtractionRecord]:
    return [ExtractionRecord.from_record(obj) for obj in iter_jsonl(path)]


def save_records(
    path: str | Path, records: Iterable[ExtractionRecord], meta: str | None = None
) -> int:
    return write_jsonl(path, (r.to_record() for r in records), meta)


class RecordsWriter:
    """Append-per-unit records file that survives interrupts.

    A fresh writer truncates and writes the meta line; a resumed writer
    appends. Each ``append_unit`` flushes, so a kill between units loses
    nothing already written.
    """

    def __init__(self, path: str | Path, meta: str, resume: bool) -> None:
        self.path = Path(path)
        if resume and self.path.exists():
            self._fh: IO[str] = open(self.path, "a", encoding="utf-8")
        else:
            self._fh = open(self.path, "w", encoding="utf-8")
            self._fh.write(meta + "\n")
            self._fh.flush()

    def append_unit(self, records: Iterable[ExtractionRecord]) -> int:
        n = 0
        for rec in records:
            self._fh.write(canonical_json(rec.to_record()) + "\n")
            n += 1
        self._fh.flush()
        return n

    def close(self) -> None:
        self._fh.close()


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


class Checkpoint:
    """One line per completed work unit; loading yields the done-set."""

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self._fh: IO[str] | None = None

    def load(self) -> set[str]:
        done: set[str] = set()
        if self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if line:
                        done.add(json.loads(line)["unit"])
        return done

    def mark(self, unit: str) -> None:
        if self._fh is None:
            self._fh = open(self.path, "a", encoding="utf-8")
        self._fh.write(canonical_json({"unit": unit}) + "\n")
        self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


# ---------------------------------------------------------------------------
# Transcripts
# ---------------------------------------------------------------------------

_UNSAFE_RE = re.compile(r"[^A-Za-z0-9._-]+")


class DirectoryTranscriptStore:
    """One file per conversation, keyed by transcript id."""

    def __init__(self, directory: str | Path) -> None:
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def _path(self, transcript_id: str) -> Path:
        safe = _UNSAFE_RE.sub("_", transcript_id)
        tag = hashlib.sha256(transcript_id.encode("utf-8")).hexdigest()[:8]
        return self.directory / f"{safe}-{tag}.json"

    def save(self, transcript_id: str, turns: list[Turn]) -> None:
        obj = {
            "transcript_id": transcript_id,
            "turns": [t.to_record() for t in turns],
        }
        with open(self._path(transcript_id), "w", encoding="utf-8") as fh:
            json.dump(obj, fh, ensure_ascii=False, sort_keys=True, indent=1)

    def load(self, transcript_id: str) -> list[Turn]:
        with open(self._path(transcript_id), encoding="utf-8") as fh:
            obj = json.load(fh)
        return [
            Turn(t["role"], t["text"], t["timestamp"]) for t in obj["turns"]
        ]

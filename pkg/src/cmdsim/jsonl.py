"""JSON Lines readers and writers for the toolkit's on-disk formats.

All files are UTF-8 with one JSON object per line and LF line endings.
Writers emit keys in a fixed order and never include timestamps, so a
rerun with the same inputs produces byte-identical files.
"""

from __future__ import annotations

import json
from collections.abc import Iterable, Iterator
from pathlib import Path
from typing import Any

from .core import CommandLine, CommandLinePair, Source


def read_records(path: str | Path) -> Iterator[dict[str, Any]]:
    """Yield one dict per non-blank line; raises on malformed JSON."""
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            if not isinstance(record, dict):
                raise ValueError(f"{path}:{lineno}: expected a JSON object")
            yield record


def write_records(path: str | Path, records: Iterable[dict[str, Any]]) -> int:
    """Write records one per line; returns the number written."""
    count = 0
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        for record in records:
            handle.write(json.dumps(record, ensure_ascii=False))
            handle.write("\n")
            count += 1
    return count


def _require(record: dict[str, Any], key: str, path: str | Path, lineno: int) -> Any:
    if key not in record:
        raise ValueError(f"{path}:{lineno}: missing required field {key!r}")
    return record[key]


def read_commands(path: str | Path, *, default_source: Source = Source.REAL_WORLD) -> list[CommandLine]:
    """Read ``{"text": ..., "source": ...}`` records into command lines.

    ``source`` is optional in the file; unknown source names are an error.
    """
    commands: list[CommandLine] = []
    for lineno, record in enumerate(read_records(path), start=1):
        text = _require(record, "text", path, lineno)
        raw_source = record.get("source")
        source = Source(raw_source) if raw_source is not None else default_source
        commands.append(
            CommandLine(text, source=source, provenance=record.get("provenance"))
        )
    return commands


def write_commands(path: str | Path, commands: Iterable[CommandLine]) -> int:
    def as_record(command: CommandLine) -> dict[str, Any]:
        record: dict[str, Any] = {"text": command.text, "source": command.source.value}
        if command.provenance is not None:
            record["provenance"] = command.provenance
        return record

    return write_records(path, (as_record(c) for c in commands))


def read_pairs(path: str | Path) -> list[CommandLinePair]:
    """Read ``{"anchor": ..., "positive": ...}`` records into pairs.

    ``pair_id`` defaults to the zero-based record index when absent.
    """
    pairs: list[CommandLinePair] = []
    for lineno, record in enumerate(read_records(path), start=1):
        anchor = _require(record, "anchor", path, lineno)
        positive = _require(record, "positive", path, lineno)
        pairs.append(
            CommandLinePair(
                anchor=CommandLine(anchor, source=Source.LLM_SYNTHESIZED),
                positive=CommandLine(positive, source=Source.PAIR_GENERATED),
                pair_id=record.get("pair_id", lineno - 1),
            )
        )
    return pairs


def write_pairs(path: str | Path, pairs: Iterable[CommandLinePair]) -> int:
    return write_records(
        path,
        (
            {"anchor": p.anchor.text, "positive": p.positive.text, "pair_id": p.pair_id}
            for p in pairs
        ),
    )


def write_meta(path: str | Path, stage: str, *, seed: int | None = None, **extra: Any) -> Path:
    """Write a ``<path>.meta.json`` sidecar describing how a file was made.

    The main data files stay schema-pure; provenance (stage name, seed,
    tool and template versions, stage-specific settings) lives here.
    """
    from . import __version__
    from .gateway import TEMPLATE_VERSION

    meta_path = Path(str(path) + ".meta.json")
    payload: dict[str, Any] = {
        "stage": stage,
        "toolkit_version": __version__,
        "template_version": TEMPLATE_VERSION,
    }
    if seed is not None:
        payload["seed"] = seed
    payload.update(extra)
    with open(meta_path, "w", encoding="utf-8", newline="\n") as handle:
        json.dump(payload, handle, ensure_ascii=False, indent=2, sort_keys=True)
        handle.write("\n")
    return meta_path

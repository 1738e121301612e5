"""Shared fixtures: mock-vocabulary seed data and provider configs."""

from __future__ import annotations

import itertools
import json
from pathlib import Path

import pytest

from cmdsim.gateway import (
    MOCK_FLAG_SYNONYMS,
    MOCK_TARGETS,
    MOCK_VERB_SYNONYMS,
    _MOCK_TAGS,
)


def mock_vocab_commands(count: int = 12) -> list[str]:
    """Distinct in-vocabulary commands for seeding the mock pipeline."""
    commands = []
    combos = itertools.product(range(6), range(6))
    for i, (v, f) in enumerate(itertools.islice(combos, count)):
        verb = MOCK_VERB_SYNONYMS[v][0]
        flag = MOCK_FLAG_SYNONYMS[f][0]
        target = MOCK_TARGETS[(v + f) % 6]
        tag = _MOCK_TAGS[i % 16]
        commands.append(f"{verb} {flag} {target}{tag}")
    if len(set(commands)) != count:
        raise AssertionError("mock vocabulary too small for requested seed count")
    return commands


@pytest.fixture
def seeds_file(tmp_path: Path) -> Path:
    path = tmp_path / "seeds.jsonl"
    with open(path, "w", encoding="utf-8") as handle:
        for text in mock_vocab_commands(12):
            handle.write(json.dumps({"text": text, "source": "initial_seed"}) + "\n")
    return path


@pytest.fixture
def providers_file(tmp_path: Path) -> Path:
    path = tmp_path / "providers.conf"
    path.write_text(
        "[pool]\nrng_seed = 7\n\n"
        "[mock-a]\nendpoint = mock:\nmodel = alpha\n\n"
        "[mock-b]\nendpoint = mock:\nmodel = beta\n",
        encoding="utf-8",
    )
    return path


def write_jsonl(path: Path, records) -> Path:
    with open(path, "w", encoding="utf-8") as handle:
        for record in records:
            handle.write(json.dumps(record) + "\n")
    return path

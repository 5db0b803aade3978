from __future__ import annotations

import json
from pathlib import Path

import pytest

DATA_DIR = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def data_dir() -> Path:
    return DATA_DIR


def load_json(name: str):
    return json.loads((DATA_DIR / name).read_text(encoding="utf-8"))

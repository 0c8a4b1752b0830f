import json
from pathlib import Path

import pytest

from geps.events import DEFAULT_SCHEMA, synth_dataset

DATA_DIR = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def corpus():
    with open(DATA_DIR / "filter_corpus.json") as fh:
        return json.load(fh)


@pytest.fixture(scope="session")
def schema():
    return DEFAULT_SCHEMA


@pytest.fixture(scope="session")
def small_dataset():
    return synth_dataset(seed=7, n_events=100, payload_bytes=32)

import json
import math
from datetime import date
from pathlib import Path

import numpy as np
import pytest

from patret.records import Corpus, PatentImageRecord

DATA_DIR = Path(__file__).parent / "data"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion at the end of a run."""
    lines = {}
    for outcome in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(report, "nodeid", "")
            if "test_acceptance" in nodeid and "::" in nodeid:
                lines[nodeid.split("::", 1)[1]] = outcome
    if lines:
        terminalreporter.write_sep("-", "acceptance criteria")
        for name, outcome in sorted(lines.items()):
            tag = "PASS" if outcome == "passed" else "FAIL"
            terminalreporter.write_line(f"[{tag}] {name}")


def record(
    record_id,
    class_id="12-08",
    grant_date="2018-06-01",
    patent_id=None,
    split="train",
    object_name="table lamp",
    perspective="perspective view",
    description="FIG. 1 is a perspective view of the table lamp",
):
    return PatentImageRecord(
        record_id=record_id,
        patent_id=patent_id or f"p-{record_id}",
        class_id=class_id,
        grant_date=date.fromisoformat(grant_date),
        object_name=object_name,
        perspective=perspective,
        description=description,
        split=split,
    )


@pytest.fixture
def worksheet_corpus_path():
    return DATA_DIR / "worksheet_corpus.jsonl"


@pytest.fixture
def worksheet_angles():
    with open(DATA_DIR / "worksheet_angles.json") as fh:
        return json.load(fh)


@pytest.fixture
def worksheet_expected():
    with open(DATA_DIR / "worksheet_expected.json") as fh:
        return json.load(fh)


def angle_vector(degrees: float) -> np.ndarray:
    r = math.radians(degrees)
    return np.array([math.cos(r), math.sin(r)])


@pytest.fixture
def tiny_corpus():
    return Corpus.from_records(
        [
            record("r1", class_id="A", grant_date="2017-01-01"),
            record("r2", class_id="A", grant_date="2017-06-01"),
            record("r3", class_id="B", grant_date="2018-01-01"),
        ]
    )

from pathlib import Path

import pytest

from thoth.mot import ObjectSpec, SceneSpec
from thoth.query_lang import parse_rule_document

ROOT = Path(__file__).resolve().parent.parent
CORPUS = ROOT / "corpus"


def corpus(*parts) -> Path:
    return CORPUS.joinpath(*parts)


def occlusion_scene(seed: int = 2) -> SceneSpec:
    """Object a stops while hidden for frames 7-9, so its Kalman prediction overshoots."""
    return SceneSpec(
        [
            ObjectSpec("a", [(0, 50, 100), (6, 98, 100), (10, 98, 100), (20, 178, 100)]),
            ObjectSpec("b", [(0, 300, 300), (20, 300, 300)]),
        ],
        occlusions=[("a", 7, 9)],
        seed=seed,
    )


def crossing_scene(seed: int = 1) -> SceneSpec:
    return SceneSpec(
        [
            ObjectSpec("a", [(0, 50, 80), (20, 250, 80)]),
            ObjectSpec("b", [(0, 250, 140), (20, 50, 140)]),
        ],
        seed=seed,
    )


def single_gap_scene(seed: int = 0) -> SceneSpec:
    """Two cars; the detector misses the second one at frame 3 only."""
    return SceneSpec(
        [
            ObjectSpec("white", [(0, 60, 100), (8, 140, 100)]),
            ObjectSpec("red", [(0, 200, 220), (8, 200, 140)]),
        ],
        occlusions=[("white", 3, 3)],
        seed=seed,
    )


@pytest.fixture(scope="session")
def sort_rules():
    return parse_rule_document(corpus("rules", "sort.rules").read_text())


@pytest.fixture(scope="session")
def deepsort_rules():
    return parse_rule_document(corpus("rules", "deepsort.rules").read_text())


# criterion number -> (status, detail); filled by test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=str):
        status, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{status} criterion {key}: {detail}")

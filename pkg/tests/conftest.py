"""Shared fixtures: small layouts, stub records and a cached desk-scale pipeline."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import pytest

from poltwin.abm import SimConfig, TransitionRecord, run_batch
from poltwin.dataset import (
    fit_scaler,
    next_destination_arrays,
    rebalance,
    split,
    stay_duration_arrays,
    without_end,
)
from poltwin.facility import default_layout
from poltwin.nn import MDN_WEIBULL3, SOFTMAX_CLASSIFIER, TrainConfig, init_net, train
from poltwin.vocab import Tag, UserClass


def minimal_layout_doc() -> dict:
    """Smallest legal facility: 2 entrances and one of each other category, 7 nodes."""
    names = [
        ("E1", "ENTRANCE"), ("E2", "ENTRANCE"), ("O1", "OFFICE"), ("L1", "LAB"),
        ("S1", "STORAGE"), ("M1", "MAINTENANCE"), ("B1", "BREAK_ROOM"),
    ]
    waypoints = [{"id": f"w{i}", "x": float(2 * i), "y": 1.0} for i in range(len(names))]
    edges = [{"a": f"w{i}", "b": f"w{i + 1}"} for i in range(len(names) - 1)]
    locations = [
        {"id": n, "category": c, "x": float(2 * i), "y": 1.0, "waypoint": f"w{i}"}
        for i, (n, c) in enumerate(names)
    ]
    return {
        "schema_version": 1,
        "walk_speed": 1.0,
        "bounds": {"x_min": 0.0, "x_max": 12.0, "y_min": 0.0, "y_max": 2.0},
        "waypoints": waypoints,
        "edges": edges,
        "locations": locations,
    }


@pytest.fixture
def minimal_doc():
    return minimal_layout_doc()


@pytest.fixture
def minimal_text():
    return json.dumps(minimal_layout_doc())


@pytest.fixture(scope="session")
def layout():
    return default_layout()


def make_record(src=Tag.ENTRY, dest=Tag.OFFICE, cls=UserClass.RAD_WORKER, t=0, stay=600,
                run_id=0, agent_id=0) -> TransitionRecord:
    return TransitionRecord(run_id, agent_id, UserClass(cls), Tag(src), Tag(dest), t, stay)


@dataclass
class Pipeline:
    seed: int
    transitions: list
    trajectories: list
    split: object
    scaler: object
    mlp: object
    mlp_history: object
    mdn: object
    mdn_history: object


def build_pipeline(seed: int, runs: int = 100, target_n: int = 6000) -> Pipeline:
    """generate → prepare → train both heads, all from one seed (desk scale)."""
    transitions, trajectories = run_batch(SimConfig(), runs, 10, seed)
    rng = np.random.default_rng(seed)
    parts = split(rebalance(transitions, target_n, rng=rng), rng=rng)
    scaler = fit_scaler(parts.train)
    mlp, mlp_hist = train(
        init_net(SOFTMAX_CLASSIFIER, np.random.default_rng(seed)),
        next_destination_arrays(parts.train, scaler),
        next_destination_arrays(parts.validation, scaler),
        TrainConfig.mlp_default(seed),
    )
    mdn, mdn_hist = train(
        init_net(MDN_WEIBULL3, np.random.default_rng(seed)),
        stay_duration_arrays(without_end(parts.train), scaler),
        stay_duration_arrays(without_end(parts.validation), scaler),
        TrainConfig.mdn_default(seed),
    )
    mlp.scaler = scaler
    mdn.scaler = scaler
    return Pipeline(seed, transitions, trajectories, parts, scaler, mlp, mlp_hist, mdn, mdn_hist)


_PIPELINES: dict[int, Pipeline] = {}


def cached_pipeline(seed: int) -> Pipeline:
    if seed not in _PIPELINES:
        _PIPELINES[seed] = build_pipeline(seed)
    return _PIPELINES[seed]


@pytest.fixture(scope="session")
def pipeline() -> Pipeline:
    return cached_pipeline(0)


# -- acceptance summary ------------------------------------------------------------

_ACCEPTANCE_KEY = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE_KEY] = {}


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line per criterion; all lines are repeated in the terminal summary."""
    lines = request.config.stash[_ACCEPTANCE_KEY]

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])

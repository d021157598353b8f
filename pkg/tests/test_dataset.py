from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_record
from poltwin.abm import SimConfig, run_batch
from poltwin.dataset import (
    DATASET_HEADER,
    N_FEATURES,
    TARGET_EPS,
    DatasetError,
    Scaler,
    correlation_matrix,
    encode_for_next_destination,
    encode_for_stay_duration,
    fit_scaler,
    needs_replacement,
    read_dataset,
    read_trajectories,
    read_transitions,
    rebalance,
    split,
    write_dataset,
    write_trajectories,
    write_transitions,
)
from poltwin.vocab import N_CLASSES, N_TAGS, Tag, UserClass

SCALER = Scaler(0.0, 1000.0, 60.0, 7200.0)


def test_next_destination_encoding_at_time_min():
    x, label = encode_for_next_destination(
        make_record(src=Tag.OFFICE, cls=UserClass.FACILITY_MANAGER, t=0, dest=Tag.LAB), SCALER)
    assert x.tolist() == [1, 0, 0, 0, 0, 0, 1, 0, 0, 0, 0.0]
    assert label == int(Tag.LAB)
    assert x.shape == (N_FEATURES,)


@pytest.mark.parametrize("t, expected", [(1000, 1.0), (5000, 1.0), (-50, 0.0), (250, 0.25)])
def test_time_feature_scaling_and_clip(t, expected):
    x, _ = encode_for_next_destination(make_record(t=t), SCALER)
    assert x[-1] == expected


@pytest.mark.parametrize("stay, expected", [(60, TARGET_EPS), (7200, 1 + TARGET_EPS)])
def test_stay_target_edges(stay, expected):
    _, y = encode_for_stay_duration(make_record(stay=stay), SCALER)
    assert y == pytest.approx(expected, abs=1e-15)


def test_stay_encoding_uses_destination_tag():
    x, _ = encode_for_stay_duration(make_record(src=Tag.ENTRY, dest=Tag.STORAGE), SCALER)
    assert x[int(Tag.STORAGE)] == 1 and x[int(Tag.ENTRY)] == 0


def test_end_has_no_stay():
    with pytest.raises(DatasetError, match="END has no stay duration"):
        encode_for_stay_duration(make_record(dest=Tag.END, stay=0), SCALER)


@settings(max_examples=100, deadline=None)
@given(st.sampled_from(list(Tag)), st.sampled_from(list(UserClass)), st.integers(0, 40_000))
def test_one_hot_round_trip(tag, cls, t):
    x, _ = encode_for_next_destination(make_record(src=tag, cls=cls, t=t), SCALER)
    assert int(np.argmax(x[:N_TAGS])) == tag
    assert int(np.argmax(x[N_TAGS:N_TAGS + N_CLASSES])) == cls
    assert x[:N_TAGS].sum() == 1 and x[N_TAGS:N_TAGS + N_CLASSES].sum() == 1
    assert 0.0 <= x[-1] <= 1.0


# -- rebalance -------------------------------------------------------------------

def _records(counts, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for tag, n in counts.items():
        for _ in range(n):
            out.append(make_record(dest=tag, t=int(rng.integers(0, 30_000)),
                                   stay=int(rng.integers(60, 7200)), agent_id=len(out)))
    return out


def test_balanced_input_is_permuted():
    recs = _records({t: 10 for t in Tag})
    out = rebalance(recs, 60, rng=np.random.default_rng(0))
    assert sorted(id(r) for r in out) == sorted(id(r) for r in recs)


def test_rebalance_quota_arithmetic():
    recs = _records({Tag.OFFICE: 5000, Tag.LAB: 4000, Tag.STORAGE: 3000,
                     Tag.MAINTENANCE: 3000, Tag.ENTRY: 3000, Tag.END: 3000})
    out = rebalance(recs, 17000, rng=np.random.default_rng(1))
    assert len(out) == 17000
    counts = Counter(r.dest_tag for r in out)
    for n in counts.values():
        assert abs(n - 17000 / 6) <= 1


def test_rebalance_with_replacement_warns(caplog):
    recs = _records({t: 20 for t in Tag} | {Tag.END: 5})
    assert needs_replacement(recs, 60)
    with caplog.at_level("WARNING"):
        out = rebalance(recs, 60, rng=np.random.default_rng(0))
    assert len(out) == 60
    assert "with replacement" in caplog.text


def test_rebalance_missing_tag():
    with pytest.raises(DatasetError, match="END"):
        rebalance(_records({t: 5 for t in Tag if t != Tag.END}), 30, rng=np.random.default_rng(0))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 60), min_size=N_TAGS, max_size=N_TAGS), st.integers(30, 600))
def test_rebalance_is_maximally_balanced(counts, target):
    # per-tag counts within one of each other is the highest entropy any target size allows
    recs = _records(dict(zip(Tag, counts)))
    out = rebalance(recs, target, rng=np.random.default_rng(0))
    assert len(out) == target
    per_tag = np.bincount([int(r.dest_tag) for r in out], minlength=N_TAGS)
    assert per_tag.max() - per_tag.min() <= 1


# -- scaler --------------------------------------------------------------------

def test_fit_scaler_times():
    recs = [make_record(t=0, stay=60), make_record(t=100, stay=120)]
    sc = fit_scaler(recs)
    assert (sc.time_min, sc.time_max) == (0, 100)
    assert fit_scaler(recs) == sc


def test_fit_scaler_ignores_end_stays():
    recs = [make_record(t=0, stay=60), make_record(t=10, stay=300),
            make_record(t=20, dest=Tag.END, stay=0)]
    assert fit_scaler(recs).stay_min == 60


def test_degenerate_stays():
    with pytest.raises(DatasetError, match="degenerate"):
        fit_scaler([make_record(t=0, stay=60), make_record(t=100, stay=60)])


def test_scaler_round_trip(tmp_path):
    SCALER.save(tmp_path / "s.json")
    assert Scaler.load(tmp_path / "s.json") == SCALER
    assert np.allclose(SCALER.unscale_stay(SCALER.scale_stay([60, 500, 7200])), [60, 500, 7200])


# -- split -----------------------------------------------------------------------

@pytest.mark.parametrize("n, sizes", [(17000, (11900, 2550, 2550)), (10, (7, 1, 2)),
                                      (6000, (4200, 900, 900))])
def test_split_sizes(n, sizes):
    recs = [make_record(agent_id=i) for i in range(n)]
    s = split(recs, rng=np.random.default_rng(0))
    assert (len(s.train), len(s.validation), len(s.test)) == sizes


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 500), st.integers(0, 10**6))
def test_split_disjoint_exhaustive(n, seed):
    recs = [make_record(agent_id=i) for i in range(n)]
    s = split(recs, rng=np.random.default_rng(seed))
    ids = [r.agent_id for part in (s.train, s.validation, s.test) for r in part]
    assert sorted(ids) == list(range(n))
    assert abs(len(s.train) - 0.7 * n) <= 1 and abs(len(s.validation) - 0.15 * n) <= 1
    again = split(recs, rng=np.random.default_rng(seed))
    assert [r.agent_id for r in again.train] == [r.agent_id for r in s.train]


def test_split_rejects_bad_fractions():
    with pytest.raises(DatasetError):
        split([make_record()], (0.5, 0.5, 0.5), rng=np.random.default_rng(0))


# -- correlation ----------------------------------------------------------------

def test_correlation_diagonal_and_perfect_pair():
    recs = [make_record(t=i * 10, stay=60 + i * 10, dest=Tag(i % 4)) for i in range(30)]
    c = correlation_matrix(recs)
    assert c.shape == (5, 5)
    assert np.all(np.diag(c) == 1.0)
    assert c[2, 4] == pytest.approx(1.0, abs=1e-12)   # time and stay move together
    assert c[0, 1] == 0.0                              # constant columns


def test_default_batch_sign_pattern():
    transitions, _ = run_batch(SimConfig(), 50, 0, 0)
    c = correlation_matrix(transitions)
    assert c[3, 4] < 0   # destination vs stay


# -- CSV interchange --------------------------------------------------------------

def test_transition_and_dataset_csv_round_trip(tmp_path):
    transitions, trajectories = run_batch(SimConfig(), 2, 1, 3)
    write_transitions(tmp_path / "t.csv", transitions)
    assert read_transitions(tmp_path / "t.csv") == transitions
    write_trajectories(tmp_path / "p.csv", trajectories)
    back = read_trajectories(tmp_path / "p.csv")
    assert back == trajectories
    sc = fit_scaler(transitions)
    write_dataset(tmp_path / "d.csv", transitions, sc)
    assert read_dataset(tmp_path / "d.csv") == transitions
    header = (tmp_path / "d.csv").read_text().splitlines()[0].split(",")
    assert header == DATASET_HEADER


def test_missing_columns(tmp_path):
    (tmp_path / "bad.csv").write_text("run_id,agent_id\n1,2\n")
    with pytest.raises(DatasetError, match="missing columns"):
        read_transitions(tmp_path / "bad.csv")

import csv
import itertools

import numpy as np
import pytest

from deepmpc.errors import InvalidInputError
from deepmpc.numerics import min_singular_value
from deepmpc.replay import NotReady, ReplayBuffer, ReplayEntry, dump_csv, offer, sample_batch


def _entry(x, step=0):
    return ReplayEntry(np.asarray(x, float), np.array([0.0]), step)


def test_fill_phase_always_accepts():
    buf = ReplayBuffer(capacity=5, batch_size=2)
    assert all(offer(buf, _entry([1.0, 0.0], i)) for i in range(5))
    assert len(buf) == 5 and buf.full


def test_replacement_raises_min_sv():
    buf = ReplayBuffer(capacity=2, batch_size=1)
    offer(buf, _entry([1, 0]))
    offer(buf, _entry([1, 0]))
    assert buf.min_singular_value() == pytest.approx(0.0, abs=1e-12)
    assert offer(buf, _entry([0, 1], 2))
    assert buf.min_singular_value() == pytest.approx(1.0)


def test_no_improvement_rejected():
    buf = ReplayBuffer(capacity=2, batch_size=1)
    offer(buf, _entry([1, 0]))
    offer(buf, _entry([0, 1]))
    assert not offer(buf, _entry([1, 0], 2))
    np.testing.assert_array_equal(buf.state_matrix(), np.eye(2))


def test_offer_matches_exhaustive_rule(rng):
    # Oracle: recompute every candidate swap with a direct SVD.
    buf = ReplayBuffer(capacity=6, batch_size=2)
    for i in range(6):
        offer(buf, _entry(rng.normal(size=2), i))
    for step in range(6, 60):
        e = _entry(rng.normal(size=2), step)
        S = buf.state_matrix()
        current = min_singular_value(S)
        scores = []
        for j in range(len(S)):
            T = S.copy()
            T[j] = e.x
            scores.append(min_singular_value(T))
        j_star = int(np.argmax(scores))
        expect = scores[j_star] > current + 1e-12
        assert offer(buf, e) == expect
        if expect:
            np.testing.assert_array_equal(buf.entries[j_star].x, e.x)


def test_min_sv_monotone_after_fill(rng):
    buf = ReplayBuffer(capacity=20, batch_size=4)
    history = []
    for i in range(400):
        offer(buf, _entry(rng.normal(size=2) * rng.uniform(0.01, 2.0), i))
        if buf.full:
            history.append(buf.min_singular_value())
        assert len(buf) <= 20
    assert np.all(np.diff(history) >= 0)


def test_entries_are_immutable():
    e = _entry([1.0, 2.0])
    with pytest.raises(ValueError):
        e.x[0] = 5.0
    with pytest.raises(InvalidInputError):
        ReplayEntry(np.array([np.inf, 0.0]), np.array([0.0]), 0)


def test_sampling():
    buf = ReplayBuffer(capacity=10, batch_size=3, rng_seed=5)
    for i in range(8):
        offer(buf, _entry([i, -i], i))
    perm = sample_batch(buf, 8)
    assert sorted(e.step for e in perm) == list(range(8))
    assert sample_batch(buf, 0) == []
    with pytest.raises(NotReady):
        sample_batch(buf, 9)
    a = ReplayBuffer(capacity=10, batch_size=3, rng_seed=5)
    b = ReplayBuffer(capacity=10, batch_size=3, rng_seed=5)
    for i in range(8):
        offer(a, _entry([i, 1], i))
        offer(b, _entry([i, 1], i))
    assert [e.step for e in sample_batch(a, 4)] == [e.step for e in sample_batch(b, 4)]


def test_capacity_validation():
    with pytest.raises(InvalidInputError):
        ReplayBuffer(capacity=4, batch_size=4)


def test_normalised_selection_uses_scaled_states():
    buf = ReplayBuffer(capacity=2, batch_size=1, scale=np.array([1.0, 100.0]))
    offer(buf, _entry([1.0, 0.0]))
    offer(buf, _entry([0.0, 100.0]))
    assert buf.min_singular_value() == pytest.approx(1.0)


def test_dump_csv(tmp_path):
    buf = ReplayBuffer(capacity=4, batch_size=1)
    for i in range(3):
        offer(buf, ReplayEntry(np.array([0.1 * i, -0.2]), np.array([0.5 * i]), i))
    path = tmp_path / "buf.csv"
    dump_csv(buf, path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["step", "x0", "x1", "target0"]
    assert [float(v) for v in rows[2]] == [1.0, 0.1, -0.2, 0.5]
    for a, b in itertools.pairwise(rows[1:]):
        assert int(a[0]) < int(b[0])

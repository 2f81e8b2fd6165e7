"""Weight recurrence, eviction, and update scheduling for the sample memory."""

import numpy as np
import pytest

from vmos.errors import ContractError
from vmos.memory import UPDATE_PERIOD, MemoryBank, create_bank, push, should_update
from vmos.tensor import Tensor3


def make_pair(seed=0, channels=2, size=4):
    rng = np.random.default_rng(seed)
    x = Tensor3(rng.uniform(0.0, 1.0, size=(channels, size, size)))
    y = rng.uniform(0.0, 1.0, size=(size, size))
    return x, y


def fresh_bank(gamma=0.1, capacity=32):
    x0, y0 = make_pair(seed=0)
    return create_bank(x0, y0, gamma=gamma, capacity=capacity)


def replay_weights(gamma, reliable_flags, capacity=32):
    """Raw-space oracle: replay the recurrence, evict, normalise at the end."""
    raw = [gamma]
    anchor = 0
    for flag in reliable_flags:
        raw.append(raw[-1] / (1.0 - gamma) * (2.0 if flag else 1.0))
        if len(raw) > capacity:
            candidates = [i for i in range(len(raw)) if i != anchor]
            raw.pop(min(candidates, key=lambda i: raw[i]))
    total = sum(raw)
    return np.array([w / total for w in raw])


class TestConstruction:

    def test_initial_sample_carries_gamma(self):
        bank = fresh_bank(gamma=0.1)
        assert len(bank) == 1
        assert bank.samples[0].alpha == 0.1
        assert bank.frames_since_update == 0

    @pytest.mark.parametrize("gamma", [0.0, 1.0, -0.2, 1.5])
    def test_gamma_outside_open_interval_rejected(self, gamma):
        x0, y0 = make_pair()
        with pytest.raises(ContractError):
            create_bank(x0, y0, gamma=gamma)

    @pytest.mark.parametrize("capacity", [0, 1])
    def test_degenerate_capacity_rejected(self, capacity):
        x0, y0 = make_pair()
        with pytest.raises(ContractError):
            create_bank(x0, y0, capacity=capacity)

    def test_empty_bank_rejected(self):
        with pytest.raises(ContractError):
            MemoryBank(samples=[])


class TestPush:

    def test_returns_same_bank(self):
        bank = fresh_bank()
        x, y = make_pair(seed=1)
        assert push(bank, x, y, reliable=False) is bank

    def test_first_push_ratio(self):
        # Raw weights run 0.1, 0.1/0.9, 0.1/0.81, ...; normalisation
        # rescales everything by a common factor, so the ratios survive.
        bank = fresh_bank(gamma=0.1)
        push(bank, *make_pair(seed=1), reliable=False)
        w = bank.weights()
        assert w[1] / w[0] == pytest.approx(1.0 / 0.9, rel=1e-12)
        push(bank, *make_pair(seed=2), reliable=False)
        w = bank.weights()
        assert w[2] / w[1] == pytest.approx(1.0 / 0.9, rel=1e-12)
        assert w[2] / w[0] == pytest.approx(1.0 / 0.81, rel=1e-12)

    def test_weights_sum_to_one_after_every_push(self):
        rng = np.random.default_rng(7)
        bank = fresh_bank(capacity=8)
        for i in range(40):
            push(bank, *make_pair(seed=i + 1), reliable=bool(rng.integers(2)))
            w = bank.weights()
            assert abs(w.sum() - 1.0) < 1e-12
            assert np.all(w >= 0.0)
            assert len(bank) <= 8

    def test_ten_push_replay_matches_oracle(self):
        flags = [False, True, False, False, True, True, False, False, False, True]
        bank = fresh_bank(gamma=0.1)
        for i, flag in enumerate(flags):
            push(bank, *make_pair(seed=i + 1), reliable=flag)
        expected = replay_weights(0.1, flags)
        assert bank.weights() == pytest.approx(expected, abs=1e-12)

    def test_replay_with_eviction_matches_oracle(self):
        rng = np.random.default_rng(3)
        flags = [bool(rng.integers(2)) for _ in range(25)]
        bank = fresh_bank(gamma=0.1, capacity=6)
        for i, flag in enumerate(flags):
            push(bank, *make_pair(seed=i + 1), reliable=flag)
        expected = replay_weights(0.1, flags, capacity=6)
        assert len(bank) == 6
        assert bank.weights() == pytest.approx(expected, abs=1e-12)

    def test_reliable_doubles_relative_weight(self):
        # Doubling the raw weight doubles the new sample's odds against
        # every retained sample; the absolute normalised value shifts by
        # the new normalisation constant instead.
        history = [False, True, False]

        def build():
            bank = fresh_bank()
            for i, flag in enumerate(history):
                push(bank, *make_pair(seed=i + 1), reliable=flag)
            return bank

        plain, boosted = build(), build()
        x, y = make_pair(seed=99)
        push(plain, x, y, reliable=False)
        push(boosted, x, y, reliable=True)
        wp, wb = plain.weights(), boosted.weights()
        for j in range(len(wp) - 1):
            assert wb[-1] / wb[j] == pytest.approx(2.0 * wp[-1] / wp[j], rel=1e-12)

    def test_monotone_recency_without_doubling(self):
        bank = fresh_bank(gamma=0.1)
        for i in range(20):
            push(bank, *make_pair(seed=i + 1), reliable=False)
        w = bank.weights()
        assert np.all(w[1:] > w[:-1])
        assert w[1:] / w[:-1] == pytest.approx(np.full(len(w) - 1, 1.0 / 0.9), rel=1e-12)

    def test_anchor_survives_eviction(self):
        x0, y0 = make_pair(seed=0)
        bank = create_bank(x0, y0, capacity=4)
        pushed = [make_pair(seed=i + 1) for i in range(10)]
        for x, y in pushed:
            push(bank, x, y, reliable=False)
        assert len(bank) == 4
        assert bank.samples[0].x is x0
        # Recency weighting means the survivors are the three freshest.
        kept = [s.x for s in bank.samples[1:]]
        assert kept == [x for x, _ in pushed[-3:]]

    def test_eviction_picks_lowest_weight(self):
        # Hand-set weights so the minimum is not simply the oldest entry.
        from vmos.appearance import TrainSample

        pairs = [make_pair(seed=i) for i in range(3)]
        samples = [
            TrainSample(x=pairs[0][0], y=pairs[0][1], alpha=0.3),
            TrainSample(x=pairs[1][0], y=pairs[1][1], alpha=0.5),
            TrainSample(x=pairs[2][0], y=pairs[2][1], alpha=0.2),
        ]
        bank = MemoryBank(samples=samples, gamma=0.1, capacity=3)
        x, y = make_pair(seed=9)
        push(bank, x, y, reliable=False)
        kept = [s.x for s in bank.samples]
        assert kept == [pairs[0][0], pairs[1][0], x]


class TestShouldUpdate:

    def test_reliable_frame_fires_immediately(self):
        bank = fresh_bank()
        assert should_update(bank, reliable=True)
        assert bank.frames_since_update == 0

    def test_unreliable_frames_fire_on_the_eighth(self):
        bank = fresh_bank()
        for _ in range(UPDATE_PERIOD - 1):
            assert not should_update(bank, reliable=False)
        assert should_update(bank, reliable=False)
        assert bank.frames_since_update == 0

    def test_alternating_flags_match_hand_schedule(self):
        bank = fresh_bank()
        got = [should_update(bank, reliable=(i % 2 == 0)) for i in range(12)]
        assert got == [True, False] * 6

    def test_random_schedule_matches_replay(self):
        rng = np.random.default_rng(11)
        flags = [bool(rng.integers(2)) for _ in range(100)]
        bank = fresh_bank()
        got = [should_update(bank, flag) for flag in flags]

        counter, expected = 0, []
        for flag in flags:
            counter += 1
            fire = flag or counter >= 8
            if fire:
                counter = 0
            expected.append(fire)
        assert got == expected

    def test_fires_at_least_once_per_eight_frames(self):
        rng = np.random.default_rng(2)
        bank = fresh_bank()
        got = [should_update(bank, bool(rng.integers(4) == 0)) for _ in range(200)]
        for i in range(len(got) - 7):
            assert any(got[i:i + 8])

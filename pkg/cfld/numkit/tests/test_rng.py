import numpy as np
import pytest

from cfld.numkit.rng import Rng


class TestRng:

    def test_same_seed_same_stream(self):
        np.testing.assert_array_equal(Rng(7).bits(16), Rng(7).bits(16))

    def test_different_seeds_differ(self):
        assert not np.array_equal(Rng(7).bits(16), Rng(8).bits(16))

    def test_draws_are_counter_addressed(self):
        rng = Rng(3)
        whole = Rng(3).bits(10)
        first = rng.bits(4)
        rest = rng.bits(6)
        np.testing.assert_array_equal(np.concatenate([first, rest]), whole)

    def test_substream_does_not_advance_parent(self):
        rng = Rng(5)
        rng.substream(1).normal(100)
        assert rng.counter == 0

    def test_substreams_are_reproducible_and_distinct(self):
        a = Rng(5).substream(1).uniform(32)
        b = Rng(5).substream(1).uniform(32)
        c = Rng(5).substream(2).uniform(32)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_state_round_trip_resumes_stream(self):
        rng = Rng(11, stream=4)
        rng.uniform(7)
        resumed = Rng.from_state(rng.state_dict())
        np.testing.assert_array_equal(resumed.uniform(5), rng.uniform(5))

    def test_uniform_range(self):
        values = Rng(0).uniform(10_000)
        assert values.min() >= 0.0
        assert values.max() < 1.0

    def test_normal_moments(self):
        values = Rng(1).normal(20_000)
        assert abs(values.mean()) < 0.03
        assert values.std() == pytest.approx(1.0, abs=0.03)

    def test_integers_bounds(self):
        values = Rng(2).integers(1, 6, size=5_000)
        assert set(np.unique(values)) == {1, 2, 3, 4, 5}

    def test_scalar_draws(self):
        rng = Rng(9)
        assert isinstance(rng.uniform(), float)
        assert isinstance(rng.integers(0, 3), int)

    def test_permutation(self):
        perm = Rng(4).permutation(50)
        assert sorted(perm.tolist()) == list(range(50))

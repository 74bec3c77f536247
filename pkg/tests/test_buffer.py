import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from adj_sampler.buffer import BufferEntry, ReplayBuffer
from adj_sampler.errors import ContractViolationError


def _rows(n, dim=2, start=0):
    x = np.arange(start, start + n, dtype=np.float64)[:, None] * np.ones(dim)
    return x, -x


class TestFifo:
    def test_overflow_keeps_newest(self):
        buf = ReplayBuffer(2, 2)
        x, g = _rows(3)
        buf.push_arrays(x, g)
        assert len(buf) == 2
        kept = [e.x1[0] for e in buf.entries()]
        assert kept == [1.0, 2.0]

    def test_push_empty_batch_no_change(self):
        buf = ReplayBuffer(4, 2)
        assert buf.push([]) == 0
        assert len(buf) == 0

    def test_order_preserved_under_capacity(self):
        buf = ReplayBuffer(10, 2)
        x, g = _rows(6)
        buf.push_arrays(x, g)
        assert [e.x1[0] for e in buf.entries()] == [0, 1, 2, 3, 4, 5]

    def test_eviction_after_capacity_plus_j(self):
        buf = ReplayBuffer(5, 2)
        x, g = _rows(8)
        buf.push_arrays(x, g)
        kept = [e.x1[0] for e in buf.entries()]
        assert kept == [3, 4, 5, 6, 7]  # the 3 oldest are gone

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.integers(min_value=1, max_value=7), min_size=1, max_size=12))
    def test_capacity_bound_under_interleaving(self, batches):
        buf = ReplayBuffer(9, 1)
        rng = np.random.default_rng(0)
        pushed = 0
        for b in batches:
            x = np.arange(pushed, pushed + b, dtype=np.float64)[:, None]
            buf.push_arrays(x, x)
            pushed += b
            assert len(buf) == min(pushed, 9)
            if len(buf):
                buf.sample_arrays(3, rng)
                assert len(buf) == min(pushed, 9)  # sampling never mutates
        want = list(range(max(0, pushed - 9), pushed))
        assert [e.x1[0] for e in buf.entries()] == want


class TestSampling:
    def test_empty_buffer_contract(self):
        with pytest.raises(ContractViolationError):
            ReplayBuffer(3, 1).sample_arrays(1, np.random.default_rng(0))

    def test_single_entry_repeats(self):
        buf = ReplayBuffer(3, 2)
        buf.push([BufferEntry(x1=np.ones(2), grad_g=np.zeros(2))])
        out = buf.sample_uniform(5, np.random.default_rng(1))
        assert len(out) == 5
        for e in out:
            np.testing.assert_array_equal(e.x1, [1.0, 1.0])

    def test_uniformity_chi_square(self):
        buf = ReplayBuffer(100, 1)
        x = np.arange(100, dtype=np.float64)[:, None]
        buf.push_arrays(x, x)
        rng = np.random.default_rng(2)
        draws, _, _, _ = buf.sample_arrays(100_000, rng)
        counts = np.bincount(draws[:, 0].astype(int), minlength=100)
        assert chisquare(counts).pvalue > 0.001

    def test_samples_are_value_copies(self):
        buf = ReplayBuffer(4, 2)
        buf.push_arrays(np.ones((1, 2)), np.zeros((1, 2)))
        entry = buf.sample_uniform(1, np.random.default_rng(3))[0]
        entry.x1[:] = 99.0
        np.testing.assert_array_equal(buf.entries()[0].x1, [1.0, 1.0])


class TestRejection:
    def test_non_finite_entries_dropped_with_warning(self, caplog):
        buf = ReplayBuffer(10, 2)
        x = np.array([[1.0, 2.0], [np.nan, 0.0], [3.0, 4.0], [np.inf, 1.0]])
        g = np.zeros((4, 2))
        with caplog.at_level("WARNING"):
            accepted = buf.push_arrays(x, g)
        assert accepted == 2
        assert buf.rejected == 2
        assert len(buf) == 2
        assert any("non-finite" in r.message for r in caplog.records)

    def test_shape_mismatch(self):
        buf = ReplayBuffer(4, 3)
        with pytest.raises(ContractViolationError):
            buf.push_arrays(np.ones((2, 3)), np.ones((2, 2)))


class TestTraces:
    def test_trace_round_trip(self):
        buf = ReplayBuffer(5, 2, trace_count=3)
        tt = np.array([[0.2, 0.5, 0.8]])
        tx = np.arange(6, dtype=np.float64).reshape(1, 3, 2)
        buf.push_arrays(np.ones((1, 2)), np.zeros((1, 2)), trace_t=tt, trace_x=tx)
        _, _, got_t, got_x = buf.sample_arrays(4, np.random.default_rng(0))
        assert got_t.shape == (4, 3) and got_x.shape == (4, 3, 2)
        np.testing.assert_array_equal(got_t[0], tt[0])

    def test_traces_required_when_enabled(self):
        buf = ReplayBuffer(5, 2, trace_count=2)
        with pytest.raises(ContractViolationError):
            buf.push_arrays(np.ones((1, 2)), np.zeros((1, 2)))

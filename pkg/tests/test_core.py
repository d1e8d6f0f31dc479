"""Tests for the leakage model and trace simulation."""

import numpy as np
import pytest

from src.core import (
    DEFAULT_KEY,
    HAMMING_WEIGHT,
    SBOX,
    LeakageConfig,
    RngStream,
    TraceSet,
    aes_encrypt_blocks,
    default_leak_positions,
    hypothesis_table,
    leakage_matrix,
    leakage_value,
    per_trace_rows,
    sbox_lookup,
    simulate_demand_traces,
    simulate_noiseless_demand,
)
from src.errors import ConfigError, DimensionError


def _gf_mul(a: int, b: int) -> int:
    out = 0
    while b:
        if b & 1:
            out ^= a
        a = ((a << 1) ^ 0x11B) if a & 0x80 else a << 1
        b >>= 1
    return out


def _reference_sbox(x: int) -> int:
    inv = 0 if x == 0 else next(y for y in range(1, 256) if _gf_mul(x, y) == 1)
    out = 0x63
    for i in range(8):
        bit = 0
        for shift in (0, 4, 5, 6, 7):
            bit ^= (inv >> ((i + shift) % 8)) & 1
        out ^= bit << i
    return out


class TestSbox:
    """S-box table and lookups."""

    def test_table_matches_field_inverse_and_affine_map(self):
        assert [int(v) for v in SBOX] == [_reference_sbox(x) for x in range(256)]

    def test_known_entries(self):
        assert sbox_lookup(0x00) == 0x63
        assert sbox_lookup(0x53) == 0xED
        assert sbox_lookup(0xFF) == 0x16

    def test_out_of_range_byte(self):
        with pytest.raises(ValueError):
            sbox_lookup(256)

    def test_is_a_permutation(self):
        assert sorted(SBOX.tolist()) == list(range(256))


class TestLeakageModel:
    """Per-byte leakage values and hypothesis tables."""

    def test_hamming_weight_value(self):
        cfg = LeakageConfig(alpha=1.0, baseline=10.0)
        # S(0) = 0x63 has four set bits
        assert leakage_value(cfg, 0x00, 0x00) == 14.0

    def test_hamming_distance_defaults_to_input_state(self):
        cfg = LeakageConfig(model="hamming_distance", alpha=2.0, baseline=0.0)
        state = 0x12 ^ 0x34
        expected = 2.0 * HAMMING_WEIGHT[SBOX[state] ^ state]
        assert leakage_value(cfg, 0x12, 0x34) == expected

    def test_hamming_distance_explicit_previous_state(self):
        cfg = LeakageConfig(model="hamming_distance", alpha=1.0, baseline=0.0)
        assert leakage_value(cfg, 0x00, 0x00, prev_state_byte=0x63) == 0.0

    def test_matrix_agrees_with_scalar(self):
        cfg = LeakageConfig(alpha=1.5, baseline=3.0)
        gen = np.random.default_rng(0)
        pts = gen.integers(0, 256, size=(20, 16), dtype=np.uint8)
        mat = leakage_matrix(cfg, pts)
        for i in range(20):
            for j in range(16):
                assert mat[i, j] == leakage_value(cfg, int(pts[i, j]), cfg.key[j])

    def test_hypothesis_table_ranges(self):
        for model in ("hamming_weight", "hamming_distance"):
            table = hypothesis_table(model)
            assert table.shape == (256,)
            assert table.min() >= 0 and table.max() <= 8

    def test_validate_rejects_bad_fields(self):
        with pytest.raises(ConfigError, match="leakage.sigma"):
            LeakageConfig(sigma=-1.0).validate()
        with pytest.raises(ConfigError, match="leakage.model"):
            LeakageConfig(model="hamming_power").validate()
        with pytest.raises(ConfigError, match="leakage.key"):
            LeakageConfig(aes_variant="AES-256").validate()


class TestRngStream:
    """Counter-based random streams."""

    def test_same_inputs_same_output(self):
        a = RngStream(7).generator(3).random(5)
        b = RngStream(7).generator(3).random(5)
        assert np.array_equal(a, b)

    def test_indices_and_streams_are_independent(self):
        base = RngStream(7)
        assert not np.array_equal(base.generator(0).random(5), base.generator(1).random(5))
        assert not np.array_equal(base.spawn(1).generator(0).random(5), base.spawn(2).generator(0).random(5))

    def test_spawn_is_deterministic(self):
        assert RngStream(9).spawn(4) == RngStream(9).spawn(4)

    def test_advance_changes_output(self):
        s = RngStream(1)
        assert not np.array_equal(s.generator(0).random(4), s.advance().generator(0).random(4))

    def test_seed_must_fit_64_bits(self):
        with pytest.raises(ConfigError):
            RngStream(1 << 64)
        with pytest.raises(ConfigError):
            RngStream(-1)


class TestTraceSet:
    """TraceSet validation."""

    def test_default_leak_positions(self):
        assert default_leak_positions(64).tolist() == list(range(1, 32, 2))
        assert default_leak_positions(16).tolist() == list(range(16))

    def test_too_few_samples(self):
        with pytest.raises(DimensionError):
            default_leak_positions(15)

    def test_plaintext_shape_checked(self):
        with pytest.raises(DimensionError):
            TraceSet(np.zeros((4, 32)), np.zeros((3, 16)), default_leak_positions(32))

    def test_non_finite_samples_rejected(self):
        samples = np.zeros((2, 32))
        samples[1, 5] = np.nan
        with pytest.raises(DimensionError):
            TraceSet(samples, np.zeros((2, 16)), default_leak_positions(32))

    def test_leak_positions_must_increase(self):
        lp = default_leak_positions(32)[::-1]
        with pytest.raises(DimensionError):
            TraceSet(np.zeros((2, 32)), np.zeros((2, 16)), lp)

    def test_head(self):
        ts = simulate_demand_traces(LeakageConfig(), 10, 32, RngStream(1), with_ciphertexts=True)
        h = ts.head(4)
        assert h.n_traces == 4
        assert np.array_equal(h.samples, ts.samples[:4])
        assert np.array_equal(h.ciphertexts, ts.ciphertexts[:4])


class TestSimulation:
    """Demand-trace generation."""

    def test_noise_free_traces_are_exact(self):
        cfg = LeakageConfig(sigma=0.0, alpha=1.0, baseline=10.0)
        ts = simulate_demand_traces(cfg, 50, 64, RngStream(2))
        lp = ts.leak_positions
        assert np.array_equal(ts.samples[:, lp], leakage_matrix(cfg, ts.plaintexts))
        others = np.setdiff1d(np.arange(64), lp)
        assert np.all(ts.samples[:, others] == 10.0)

    def test_reproducible(self):
        a = simulate_demand_traces(LeakageConfig(), 100, 64, RngStream(5))
        b = simulate_demand_traces(LeakageConfig(), 100, 64, RngStream(5))
        assert np.array_equal(a.samples, b.samples)
        assert np.array_equal(a.plaintexts, b.plaintexts)

    def test_independent_of_thread_count(self):
        a = simulate_demand_traces(LeakageConfig(), 3000, 32, RngStream(5), threads=1)
        b = simulate_demand_traces(LeakageConfig(), 3000, 32, RngStream(5), threads=4)
        assert np.array_equal(a.samples, b.samples)

    def test_prefix_stable_when_growing_the_set(self):
        small = simulate_demand_traces(LeakageConfig(), 500, 32, RngStream(3))
        large = simulate_demand_traces(LeakageConfig(), 2500, 32, RngStream(3))
        assert np.array_equal(small.samples, large.samples[:500])

    def test_noise_level(self):
        cfg = LeakageConfig(sigma=2.0)
        ts = simulate_demand_traces(cfg, 4000, 32, RngStream(11))
        others = np.setdiff1d(np.arange(32), ts.leak_positions)
        assert ts.samples[:, others].std() == pytest.approx(2.0, rel=0.03)

    def test_zero_traces_rejected(self):
        with pytest.raises(DimensionError):
            simulate_noiseless_demand(LeakageConfig(), 0, 32, RngStream(1))

    def test_carries_key(self):
        ts = simulate_demand_traces(LeakageConfig(), 3, 32, RngStream(1))
        assert ts.key == DEFAULT_KEY


class TestAes:
    """Ciphertexts come from a real AES implementation."""

    def test_fips197_vector(self):
        pt = np.frombuffer(bytes.fromhex("3243f6a8885a308d313198a2e0370734"), dtype=np.uint8)[None, :]
        ct = aes_encrypt_blocks(DEFAULT_KEY, pt)
        assert bytes(ct[0]).hex() == "3925841d02dc09fbdc118597196a0b32"


class TestPerTraceRows:
    def test_shape_and_dtype(self):
        rows = per_trace_rows(
            RngStream(1), 5, 3, lambda gen, width: gen.integers(0, 9, size=width), dtype=np.int64
        )
        assert rows.shape == (5, 3)
        assert rows.dtype == np.int64

    def test_empty(self):
        assert per_trace_rows(RngStream(1), 0, 3, lambda gen, width: gen.random(width)).shape == (0, 3)

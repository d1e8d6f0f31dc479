"""Tests for the countermeasure pipeline and the voltage-drop attack search."""

import dataclasses

import numpy as np
import pytest

from src.attack import AttackSettings, compute_mtd, estimate_mtd_from_correlation, leak_correlation
from src.core import DEFAULT_KEY, LeakageConfig, RngStream, TraceSet, default_leak_positions, simulate_demand_traces
from src.countermeasure import (
    BleedConfig,
    DeviceModel,
    DsacConfig,
    SupplyConfig,
    TvtfConfig,
    apply_dsac,
    apply_ro_bleed,
    apply_tvtf,
    bleed_variance,
    effective_attenuation,
    find_voltage_drop_attack,
    parse_countermeasures,
    signal_attenuation,
    simulate_pipeline,
    smc_integrator_trace,
    tvtf_permutation,
    voltage_grid,
)
from src.errors import ConfigError, DimensionError, NoAttackFound, SupplyFailure, UsageError


def _device(**leakage) -> DeviceModel:
    return DeviceModel(leakage=LeakageConfig(**leakage))


def _flat_traces(n: int, n_samples: int = 64, value: float = 10.0) -> TraceSet:
    return TraceSet(
        samples=np.full((n, n_samples), value),
        plaintexts=np.zeros((n, 16), dtype=np.uint8),
        leak_positions=default_leak_positions(n_samples),
    )


class TestParseCountermeasures:
    def test_names_are_normalised(self):
        assert parse_countermeasures("dsac, TVTF") == ("dsac", "tvtf")

    def test_empty_means_none(self):
        assert parse_countermeasures("") == ()
        assert parse_countermeasures(None) == ()

    def test_unknown_name(self):
        with pytest.raises(UsageError, match="shield"):
            parse_countermeasures("dsac,shield")


class TestSupplyModel:
    """Attenuation as a function of the supply voltage."""

    def test_full_attenuation_in_saturation(self):
        assert effective_attenuation(DsacConfig(), SupplyConfig(vdd=1.0)) == 8.0
        assert effective_attenuation(DsacConfig(), SupplyConfig(vdd=0.9)) == 8.0

    def test_no_attenuation_at_linear_edge(self):
        assert effective_attenuation(DsacConfig(), SupplyConfig(vdd=0.7)) == 1.0
        assert effective_attenuation(DsacConfig(), SupplyConfig(vdd=0.65)) == 1.0

    def test_linear_in_between(self):
        assert effective_attenuation(DsacConfig(), SupplyConfig(vdd=0.8)) == pytest.approx(4.5)

    def test_monotone(self):
        vdds = np.linspace(0.61, 1.0, 40)
        values = [effective_attenuation(DsacConfig(), SupplyConfig(vdd=v)) for v in vdds]
        assert all(b >= a for a, b in zip(values, values[1:]))

    def test_validation(self):
        with pytest.raises(ConfigError, match="supply.v_lin"):
            SupplyConfig(v_lin=0.95).validate()
        with pytest.raises(ConfigError, match="dsac.attenuation"):
            DsacConfig(attenuation=0.5).validate()


class TestDsac:
    """Switched-mode regulated current source."""

    def test_signal_divided_by_attenuation(self):
        device = _device(sigma=0.0)
        rng = RngStream(3)
        bare = simulate_pipeline(device, 500, rng, ())
        protected = simulate_pipeline(device, 500, rng, ("dsac",))
        assert signal_attenuation(bare, protected) == pytest.approx(8.0, rel=1e-6)

    def test_no_attenuation_below_linear_edge(self):
        device = _device(sigma=0.0).with_vdd(0.7)
        rng = RngStream(3)
        bare = simulate_pipeline(device, 500, rng, ())
        protected = simulate_pipeline(device, 500, rng, ("dsac",))
        assert signal_attenuation(bare, protected) == pytest.approx(1.0, rel=1e-6)

    def test_supply_failure(self):
        with pytest.raises(SupplyFailure):
            apply_dsac(_flat_traces(2), DsacConfig(), SupplyConfig(vdd=0.5))

    def test_pipeline_refuses_failed_supply(self):
        with pytest.raises(SupplyFailure):
            simulate_pipeline(_device().with_vdd(0.55), 10, RngStream(1))

    def test_integrator_adds_slice_on_sustained_demand(self):
        dsac = DsacConfig(cap=1.0)
        demand = np.concatenate([np.full(5, 10.0), np.full(20, 14.0)])
        _, slices = smc_integrator_trace(demand, dsac)
        assert slices[0] == 10
        assert slices[-1] > 10

    def test_constant_demand_keeps_slices(self):
        _, slices = smc_integrator_trace(np.full(64, 10.0), DsacConfig())
        assert np.all(slices == 10)

    @pytest.mark.parametrize("level", [0.2, 3.3, 10.5, 20.7, 63.9])
    def test_integrator_stays_inside_hysteresis_band(self, level):
        dsac = DsacConfig()
        v, _ = smc_integrator_trace(np.full(20000, level), dsac)
        margin = dsac.i_unit / dsac.cap
        settled = v[4000:]
        assert settled.min() >= dsac.v_low - margin
        assert settled.max() <= dsac.v_high + margin

    def test_observable_ripple_bound(self):
        dsac = DsacConfig()
        gen = np.random.default_rng(7)
        demand = gen.uniform(10.25, 10.75, size=(4, 3000))
        out = apply_dsac(_flat_traces(4, 3000).with_samples(demand), dsac, SupplyConfig())
        for row_out, row_demand in zip(out.samples[:, 500:], demand[:, 500:]):
            assert row_out.std() <= row_demand.std() / dsac.attenuation + dsac.i_unit


class TestBleed:
    """Randomized RO bleed."""

    def test_variance_formula(self):
        assert bleed_variance(1.0) == pytest.approx(0.053264, rel=1e-6)

    def test_measured_variance(self):
        ts = apply_ro_bleed(_flat_traces(6000), BleedConfig(max_strength=4.0, window=8), RngStream(5))
        measured = ts.samples.var(axis=0).mean()
        assert measured == pytest.approx(bleed_variance(4.0), rel=0.04)

    def test_zero_strength_is_identity(self):
        ts = _flat_traces(3)
        out = apply_ro_bleed(ts, BleedConfig(max_strength=0.0), RngStream(1))
        assert np.array_equal(out.samples, ts.samples)

    def test_bleed_is_non_negative(self):
        ts = apply_ro_bleed(_flat_traces(50), BleedConfig(), RngStream(2))
        assert np.all(ts.samples >= 10.0)


class TestTvtf:
    """Windowed permutation and gain jitter."""

    def test_permutation_stays_in_windows(self):
        gen = np.random.default_rng(4)
        idx = tvtf_permutation(gen, 20, 8)
        assert sorted(idx.tolist()) == list(range(20))
        for lo in (0, 8):
            assert sorted(idx[lo:lo + 8].tolist()) == list(range(lo, lo + 8))
        assert sorted(idx[16:].tolist()) == list(range(16, 20))

    def test_window_one_is_identity(self):
        idx = tvtf_permutation(np.random.default_rng(0), 16, 1)
        assert idx.tolist() == list(range(16))

    def test_without_gain_rows_are_permuted(self):
        ts = simulate_demand_traces(LeakageConfig(), 20, 64, RngStream(1))
        out = apply_tvtf(ts, TvtfConfig(window=8, gain_spread=0.0), RngStream(9))
        assert np.array_equal(np.sort(out.samples, axis=1), np.sort(ts.samples, axis=1))
        assert not np.array_equal(out.samples, ts.samples)

    def test_gain_bounds(self):
        out = apply_tvtf(_flat_traces(30), TvtfConfig(window=4, gain_spread=0.2), RngStream(2))
        assert out.samples.min() >= 8.0 - 1e-12
        assert out.samples.max() <= 12.0 + 1e-12

    def test_window_longer_than_trace(self):
        with pytest.raises(DimensionError):
            apply_tvtf(_flat_traces(2, n_samples=16), TvtfConfig(window=32), RngStream(1))


class TestSecurityTrends:
    """Matched-seed comparisons between device settings."""

    def test_tvtf_reduces_leak_correlation_by_sqrt_window(self):
        device = DeviceModel(leakage=LeakageConfig(sigma=1.0), tvtf=TvtfConfig(window=8))
        bare = simulate_pipeline(device, 3000, RngStream(14), ())
        shuffled = simulate_pipeline(device, 3000, RngStream(14), ("tvtf",))
        before = leak_correlation(bare, DEFAULT_KEY)
        after = leak_correlation(shuffled, DEFAULT_KEY)
        assert before >= np.sqrt(8) * abs(after)

    def test_estimated_mtd_monotone_in_sigma(self):
        estimates = []
        for sigma in (0.5, 1.0, 2.0, 4.0, 8.0):
            traces = simulate_pipeline(_device(sigma=sigma), 2000, RngStream(15), ())
            estimates.append(estimate_mtd_from_correlation(leak_correlation(traces, DEFAULT_KEY)))
        assert estimates == sorted(estimates)

    def test_estimated_mtd_monotone_in_attenuation(self):
        estimates = []
        for attenuation in (1.0, 2.0, 4.0, 8.0):
            device = DeviceModel(dsac=DsacConfig(attenuation=attenuation))
            traces = simulate_pipeline(device, 2000, RngStream(16), ("dsac",))
            estimates.append(estimate_mtd_from_correlation(leak_correlation(traces, DEFAULT_KEY)))
        assert estimates == sorted(estimates)

    def test_measured_mtd_grows_with_noise(self):
        settings = AttackSettings(target_bytes=[0, 1, 2, 3], checkpoint_start=10, checkpoint_factor=1.2)
        quiet = compute_mtd(simulate_pipeline(_device(sigma=1.0), 3000, RngStream(17), ()), settings)
        loud = compute_mtd(simulate_pipeline(_device(sigma=4.0), 3000, RngStream(17), ()), settings)
        assert quiet.disclosed and loud.disclosed
        assert quiet.mtd <= loud.mtd


class TestPipeline:
    def test_without_countermeasures_equals_plain_simulation(self):
        device = _device()
        a = simulate_pipeline(device, 200, RngStream(8), ())
        b = simulate_demand_traces(device.leakage, 200, device.n_samples, RngStream(8))
        assert np.array_equal(a.samples, b.samples)

    def test_stage_order_is_fixed(self):
        device = _device()
        a = simulate_pipeline(device, 50, RngStream(8), ("tvtf", "dsac"))
        b = simulate_pipeline(device, 50, RngStream(8), ("dsac", "tvtf"))
        assert np.array_equal(a.samples, b.samples)

    def test_unknown_countermeasure(self):
        with pytest.raises(UsageError):
            simulate_pipeline(_device(), 5, RngStream(1), ("magic",))

    def test_all_countermeasures_keep_metadata(self):
        device = _device()
        bare = simulate_pipeline(device, 100, RngStream(4), ())
        protected = simulate_pipeline(device, 100, RngStream(4), ("dsac", "bleed", "tvtf"))
        assert protected.samples.shape == bare.samples.shape
        assert np.array_equal(protected.plaintexts, bare.plaintexts)
        assert protected.key == bare.key
        assert np.all(np.isfinite(protected.samples))


class TestVoltageDropAttack:
    """Supply sweep against the DSAC."""

    def test_grid(self):
        grid = voltage_grid(0.62, 0.9, 0.02)
        assert len(grid) == 15
        assert grid[0] == pytest.approx(0.62)
        assert grid[-1] == pytest.approx(0.9)

    def test_grid_rejects_bad_step(self):
        with pytest.raises(UsageError):
            voltage_grid(0.7, 0.9, 0.0)

    def test_finds_lowest_attenuation(self):
        result = find_voltage_drop_attack(_device(), (0.72, 0.9), 0.06, 500, RngStream(1))
        assert result.vdd_star == pytest.approx(0.72)
        assert result.mtd_estimate < result.nominal_mtd
        assert [p.vdd for p in result.points] == pytest.approx([0.72, 0.78, 0.84, 0.9])
        attenuations = [p.attenuation for p in result.points]
        assert attenuations == sorted(attenuations)

    def test_nominal_only_is_no_attack(self):
        with pytest.raises(NoAttackFound) as info:
            find_voltage_drop_attack(_device(), (0.9, 0.9), 0.02, 300, RngStream(1))
        assert len(info.value.points) == 1

    def test_collapsed_points_are_not_candidates(self):
        device = DeviceModel(dsac=DsacConfig(attenuation=64.0))
        result = find_voltage_drop_attack(device, (0.62, 0.9), 0.04, 1000, RngStream(3))
        assert device.supply.v_lin < result.vdd_star < device.supply.v_sat
        assert result.points[0].vdd == pytest.approx(0.62)
        assert result.points[0].attenuation == 1.0

    def test_range_at_or_below_linear_edge_is_no_attack(self):
        with pytest.raises(NoAttackFound) as info:
            find_voltage_drop_attack(_device(), (0.62, 0.7), 0.04, 300, RngStream(1))
        assert [p.vdd for p in info.value.points] == pytest.approx([0.62, 0.66, 0.7])

    def test_estimate_does_not_saturate_under_strong_attenuation(self):
        device = DeviceModel(dsac=DsacConfig(attenuation=64.0))
        result = find_voltage_drop_attack(device, (0.74, 0.86), 0.04, 2000, RngStream(3))
        rho = {round(p.vdd, 2): p.rho for p in result.points}
        assert rho[0.74] > rho[0.78] > rho[0.82] > rho[0.86]

    def test_range_must_stay_above_failure(self):
        with pytest.raises(UsageError):
            find_voltage_drop_attack(_device(), (0.6, 0.9), 0.02, 300, RngStream(1))

    def test_budget_too_small(self):
        with pytest.raises(UsageError):
            find_voltage_drop_attack(_device(), (0.7, 0.9), 0.02, 1, RngStream(1))

    def test_with_vdd_leaves_original_untouched(self):
        device = _device()
        low = device.with_vdd(0.75)
        assert device.supply.vdd == 1.0
        assert low.supply.vdd == 0.75
        assert dataclasses.replace(low.supply, vdd=1.0) == device.supply

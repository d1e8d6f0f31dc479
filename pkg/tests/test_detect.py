"""Tests for the sensor simulator, the FCN detector and the RO voltage monitor."""

import numpy as np
import pytest

from src.core import RngStream
from src.detect import (
    SCENARIOS,
    DetectorModel,
    DetectorSettings,
    RoTrackerConfig,
    SensorDataset,
    SensorParams,
    classify,
    evaluate_detector,
    generate_dataset,
    gradient_check,
    loss_and_gradients,
    ro_counts,
    simulate_sensor,
    simulate_supply_drop,
    softmax,
    train_detector,
    voltage_drop_detect,
)
from src.errors import ConfigError, DataError, DimensionError, UsageError


class TestSensorSimulation:
    """Synthetic on-chip sensor waveforms."""

    def test_benign_without_noise_is_flat(self):
        params = SensorParams(sigma=0.0)
        trace = simulate_sensor("benign", 128, RngStream(1), params)
        assert np.all(trace.samples == params.baseline)
        assert trace.label == "benign"

    def test_clock_glitch_has_pulse(self):
        params = SensorParams(sigma=0.0)
        trace = simulate_sensor("clock_glitch", 128, RngStream(1), params)
        raised = trace.samples > params.baseline
        assert raised.sum() == params.pulse_width
        assert trace.samples.max() == pytest.approx(params.baseline + params.pulse_amplitude)

    def test_voltage_glitch_has_sag(self):
        params = SensorParams(sigma=0.0)
        trace = simulate_sensor("voltage_glitch", 128, RngStream(2), params)
        sag = trace.samples < params.baseline
        assert params.sag_width[0] <= sag.sum() <= params.sag_width[1]

    def test_em_probe_ramps_up(self):
        params = SensorParams(sigma=0.0)
        trace = simulate_sensor("em_probe", 128, RngStream(3), params)
        assert trace.samples[0] == pytest.approx(params.baseline)
        assert trace.samples[-1] == pytest.approx(params.baseline * params.coupling)

    def test_unknown_scenario(self):
        with pytest.raises(UsageError):
            simulate_sensor("laser", 128, RngStream(1))

    def test_too_short(self):
        with pytest.raises(ConfigError, match="sensor.n_samples"):
            simulate_sensor("benign", 8, RngStream(1))

    def test_deterministic_by_index(self):
        a = simulate_sensor("em_probe", 64, RngStream(5), index=3)
        b = simulate_sensor("em_probe", 64, RngStream(5), index=3)
        c = simulate_sensor("em_probe", 64, RngStream(5), index=4)
        assert np.array_equal(a.samples, b.samples)
        assert not np.array_equal(a.samples, c.samples)


class TestDataset:
    def test_labels_cycle(self):
        ds = generate_dataset(10, RngStream(1))
        assert ds.labels.tolist() == [0, 1, 2, 3, 0, 1, 2, 3, 0, 1]
        assert ds.samples.shape == (10, 128)

    def test_reproducible_across_threads(self):
        a = generate_dataset(40, RngStream(2), threads=1)
        b = generate_dataset(40, RngStream(2), threads=3)
        assert np.array_equal(a.samples, b.samples)

    def test_split(self):
        train, test = generate_dataset(12, RngStream(1)).split(8)
        assert len(train) == 8 and len(test) == 4

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            SensorDataset(np.zeros((3, 64)), np.zeros(2))

    def test_label_range(self):
        with pytest.raises(DataError):
            SensorDataset(np.zeros((2, 64)), np.array([0, 9]))


class TestNetwork:
    """Forward pass and gradients of the detector network."""

    def test_softmax_rows_sum_to_one(self):
        z = np.array([[1.0, 2.0, 3.0, 4.0], [1000.0, 0.0, 0.0, 0.0]])
        p = softmax(z)
        assert np.allclose(p.sum(axis=1), 1.0)
        assert np.all(np.isfinite(p))

    def test_zero_model_is_uniform(self):
        model = DetectorModel.zeros([8, 4, 4])
        probs = model.predict_proba(np.ones(8))
        assert np.allclose(probs, 0.25)

    def test_classify_ties_to_first_label(self):
        model = DetectorModel.zeros([8, 4, 4])
        label, prob = classify(model, np.zeros(8))
        assert label == SCENARIOS[0]
        assert prob == pytest.approx(0.25)

    def test_input_size_checked(self):
        model = DetectorModel.zeros([8, 4, 4])
        with pytest.raises(DimensionError):
            model.predict_proba(np.zeros(9))

    def test_gradient_check(self):
        gen = np.random.default_rng(3)
        model = DetectorModel.initialise([10, 6, 4], gen)
        x = gen.normal(size=(3, 10))
        assert gradient_check(model, x, label=[0, 2, 3]) < 1e-4

    @pytest.mark.parametrize("seed", range(10))
    def test_gradient_check_over_seeds(self, seed):
        gen = np.random.default_rng(seed)
        model = DetectorModel.initialise([10, 6, 4], gen)
        x = gen.normal(size=(3, 10))
        assert gradient_check(model, x, label=gen.integers(0, 4, size=3)) < 1e-4

    def test_zero_input_gives_zero_first_layer_gradient(self):
        model = DetectorModel.initialise([10, 6, 4], np.random.default_rng(2))
        _, gw, gb = loss_and_gradients(model, np.zeros((1, 10)), np.array([1]))
        assert np.all(gw[0] == 0.0)

    def test_duplicated_example_matches_single(self):
        gen = np.random.default_rng(5)
        model = DetectorModel.initialise([10, 6, 4], gen)
        x = gen.normal(size=(1, 10))
        one = loss_and_gradients(model, x, np.array([2]))
        two = loss_and_gradients(model, np.vstack([x, x]), np.array([2, 2]))
        assert two[0] == pytest.approx(one[0], rel=1e-12)
        for a, b in zip(one[1] + one[2], two[1] + two[2]):
            assert np.allclose(a, b, rtol=1e-12, atol=1e-15)

    def test_gradient_check_refuses_big_models(self):
        model = DetectorModel.zeros([128, 64, 4])
        with pytest.raises(UsageError):
            gradient_check(model, np.zeros(128))

    def test_gradients_shapes(self):
        gen = np.random.default_rng(1)
        model = DetectorModel.initialise([10, 6, 4], gen)
        loss, gw, gb = loss_and_gradients(model, gen.normal(size=(5, 10)), np.array([0, 1, 2, 3, 0]))
        assert loss > 0
        assert [g.shape for g in gw] == [w.shape for w in model.weights]
        assert [g.shape for g in gb] == [b.shape for b in model.biases]


class TestTraining:
    """Detector training and evaluation."""

    def test_zero_epochs(self):
        ds = generate_dataset(16, RngStream(1))
        model, history = train_detector(ds, DetectorSettings(epochs=0))
        assert history == []
        assert model.layer_sizes == [128, 64, 32, 4]

    def test_single_class_is_degenerate(self):
        ds = generate_dataset(16, RngStream(1))
        benign = SensorDataset(ds.samples[ds.labels == 0], ds.labels[ds.labels == 0])
        model, _ = train_detector(benign, DetectorSettings(epochs=1))
        assert model.degenerate

    def test_empty_dataset(self):
        with pytest.raises(DataError):
            train_detector(SensorDataset(np.zeros((0, 64)), np.zeros(0)))

    def test_reproducible(self):
        ds = generate_dataset(64, RngStream(1))
        settings = DetectorSettings(epochs=2, hidden_sizes=[16])
        a, _ = train_detector(ds, settings, RngStream(9))
        b, _ = train_detector(ds, settings, RngStream(9))
        assert all(np.array_equal(x, y) for x, y in zip(a.weights, b.weights))

    def test_loss_decreases(self):
        ds = generate_dataset(400, RngStream(4))
        _, history = train_detector(ds, DetectorSettings(epochs=8, hidden_sizes=[32]), RngStream(4))
        assert len(history) == 8
        assert history[-1].loss < history[0].loss

    @pytest.mark.slow
    def test_held_out_accuracy(self):
        ds = generate_dataset(2000, RngStream(7))
        train, test = ds.split(1500)
        model, history = train_detector(train, DetectorSettings(epochs=20), RngStream(7))
        evaluation = evaluate_detector(model, test)
        assert evaluation.accuracy >= 0.95
        assert evaluation.n == 500
        assert evaluation.confusion.sum(axis=1).tolist() == [125, 125, 125, 125]

    @pytest.mark.slow
    def test_loss_non_increasing_at_small_learning_rate(self):
        defaults = DetectorSettings()
        ds = generate_dataset(defaults.n_train, RngStream(1))
        settings = DetectorSettings(learning_rate=1e-3, epochs=20)
        _, history = train_detector(ds, settings, RngStream(1))
        rises = sum(b.loss > a.loss for a, b in zip(history, history[1:]))
        assert rises <= 0.05 * len(history)
        assert history[-1].loss < history[0].loss

    def test_evaluate_dimension_mismatch(self):
        model = DetectorModel.zeros([64, 4, 4])
        with pytest.raises(DimensionError):
            evaluate_detector(model, generate_dataset(8, RngStream(1)))


class TestRoMonitor:
    """Ring-oscillator voltage-drop detector."""

    def test_counts(self):
        cfg = RoTrackerConfig(k_ro=1e6, epoch=100, sample_rate=1e6)
        counts = ro_counts(np.full(350, 0.5), cfg)
        assert counts.tolist() == [50, 50, 50]

    def test_alarm_on_supply_drop(self):
        vdd, v_aes = simulate_supply_drop()
        # onset at epoch 10, alarm on the fourth mismatching epoch
        assert voltage_drop_detect(vdd, v_aes) == 1300

    def test_no_alarm_without_drop(self):
        vdd, v_aes = simulate_supply_drop(drop_fraction=0.0)
        assert voltage_drop_detect(vdd, v_aes) is None

    def test_short_drop_does_not_alarm(self):
        vdd, v_aes = simulate_supply_drop()
        vdd[1300:] = 1.0
        assert voltage_drop_detect(vdd, v_aes) is None

    def test_tau_controls_latency(self):
        vdd, v_aes = simulate_supply_drop()
        assert voltage_drop_detect(vdd, v_aes, RoTrackerConfig(tau=1)) == 1000

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            voltage_drop_detect(np.ones(100), np.ones(99))

    def test_bad_fixture_arguments(self):
        with pytest.raises(UsageError):
            simulate_supply_drop(n_samples=100, onset=100)
        with pytest.raises(UsageError):
            simulate_supply_drop(drop_fraction=1.0)

"""Tests for the command-line front end and its exit codes."""

import io
import json

import pytest
from click.testing import CliRunner
from rich.console import Console

from src import __version__, cli
from src.cli import format_count, format_ms, main, parse_int_list, parse_range
from src.errors import EXIT_DATA, EXIT_NEGATIVE, EXIT_OK, EXIT_USAGE, UsageError
from src.store import labels_path, read_bytes, read_traces


@pytest.fixture
def runner():
    return CliRunner()


def _config(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc), encoding="utf-8")
    return str(path)


class TestHelpers:
    def test_format_count(self):
        assert format_count(1234567) == "1,234,567"
        assert format_count(float("inf")) == "never"

    def test_format_ms(self):
        assert format_ms(1300, 1e6) == "1.300 ms"

    def test_parse_int_list(self):
        assert parse_int_list("100, 200,400", "--checkpoints") == [100, 200, 400]
        assert parse_int_list(None, "--bytes") is None
        with pytest.raises(UsageError):
            parse_int_list("1,x", "--bytes")

    def test_parse_range(self):
        assert parse_range("0.6:0.9:0.05") == (0.6, 0.9, 0.05)

    @pytest.mark.parametrize("text", ["0.6:0.9", "0.6:0.9:0", "0.6:0.9:-0.1", "0.9:0.6:0.1", "a:b:c"])
    def test_parse_range_rejects(self, text):
        with pytest.raises(UsageError):
            parse_range(text)


class TestGroup:
    def test_banner_without_subcommand(self, runner):
        result = runner.invoke(main, [])
        assert result.exit_code == EXIT_OK
        assert "simulate" in result.output

    def test_version(self, runner):
        result = runner.invoke(main, ["--version"])
        assert result.exit_code == EXIT_OK
        assert __version__ in result.output

    def test_unknown_option_is_usage_error(self, runner):
        assert runner.invoke(main, ["simulate", "--frobnicate"]).exit_code == EXIT_USAGE

    def test_bad_config_is_data_error(self, runner, tmp_path):
        cfg = _config(tmp_path, {"leakage": {"sigma": "loud"}})
        result = runner.invoke(main, ["simulate", "--config", cfg, "--out", str(tmp_path)])
        assert result.exit_code == EXIT_DATA
        assert "leakage.sigma" in result.output

    def test_missing_trace_file_is_data_error(self, runner, tmp_path):
        result = runner.invoke(main, ["attack", "--traces", str(tmp_path / "none.scat")])
        assert result.exit_code == EXIT_DATA


class TestSimulateAndAttack:
    """simulate -> attack end to end."""

    def test_simulate_writes_traces_and_config(self, runner, tmp_path):
        result = runner.invoke(main, [
            "simulate", "--traces", "200", "--seed", "5", "--countermeasures", "dsac",
            "--dtype", "float64", "--out", str(tmp_path),
        ])
        assert result.exit_code == EXIT_OK, result.output
        traces = read_traces(tmp_path / "traces.scat")
        assert traces.n_traces == 200
        saved = json.loads((tmp_path / "config.json").read_text())
        assert saved["simulation"]["countermeasures"] == ["dsac"]
        assert saved["simulation"]["seed"] == 5

    def test_unknown_countermeasure(self, runner, tmp_path):
        result = runner.invoke(main, ["simulate", "--countermeasures", "shield", "--out", str(tmp_path)])
        assert result.exit_code == EXIT_USAGE

    def test_attack_discloses_key(self, runner, tmp_path):
        cfg = _config(tmp_path, {"leakage": {"sigma": 1.0}})
        out = tmp_path / "run"
        assert runner.invoke(main, [
            "simulate", "--config", cfg, "--traces", "2000", "--out", str(out),
        ]).exit_code == EXIT_OK
        result = runner.invoke(main, [
            "attack", "--traces", str(out / "traces.scat"), "--bytes", "0,1",
            "--mtd", "--config", cfg, "--out", str(out),
        ])
        assert result.exit_code == EXIT_OK, result.output
        assert (out / "cpa.csv").read_text().startswith("byte,key_guess")
        assert (out / "mtd.csv").exists()

    def test_noise_only_attack_is_negative(self, runner, tmp_path, monkeypatch):
        errors = Console(file=io.StringIO(), width=200)
        monkeypatch.setattr(cli, "err_console", errors)
        cfg = _config(tmp_path, {"leakage": {"alpha": 0.0, "sigma": 1.0}})
        out = tmp_path / "run"
        runner.invoke(main, ["simulate", "--config", cfg, "--traces", "600", "--out", str(out)])
        result = runner.invoke(main, [
            "attack", "--traces", str(out / "traces.scat"), "--bytes", "0",
            "--mtd", "--config", cfg, "--out", str(out),
        ])
        assert result.exit_code == EXIT_NEGATIVE
        assert "NotDisclosed" in errors.file.getvalue()
        assert "not disclosed within 600 traces" in errors.file.getvalue()
        assert (out / "mtd.csv").exists()

    def test_attack_without_mtd_always_succeeds(self, runner, tmp_path):
        cfg = _config(tmp_path, {"leakage": {"alpha": 0.0, "sigma": 1.0}})
        out = tmp_path / "run"
        runner.invoke(main, ["simulate", "--config", cfg, "--traces", "100", "--out", str(out)])
        result = runner.invoke(main, ["attack", "--traces", str(out / "traces.scat"), "--out", str(out)])
        assert result.exit_code == EXIT_OK

    def test_bad_byte_list(self, runner, tmp_path):
        runner.invoke(main, ["simulate", "--traces", "50", "--out", str(tmp_path)])
        result = runner.invoke(main, [
            "attack", "--traces", str(tmp_path / "traces.scat"), "--bytes", "0,zero",
        ])
        assert result.exit_code == EXIT_USAGE


class TestVddAttack:
    def test_zero_step_is_usage_error(self, runner, tmp_path):
        result = runner.invoke(main, ["vdd-attack", "--range", "0.7:0.9:0", "--out", str(tmp_path)])
        assert result.exit_code == EXIT_USAGE

    def test_nominal_only_is_negative(self, runner, tmp_path):
        result = runner.invoke(main, [
            "vdd-attack", "--range", "0.9:0.9:0.1", "--budget", "200", "--out", str(tmp_path),
        ])
        assert result.exit_code == EXIT_NEGATIVE
        lines = (tmp_path / "vdd_sweep.csv").read_text().splitlines()
        assert len(lines) == 2

    def test_sweep_finds_lower_voltage(self, runner, tmp_path):
        result = runner.invoke(main, [
            "vdd-attack", "--range", "0.72:0.9:0.06", "--budget", "500", "--out", str(tmp_path),
        ])
        assert result.exit_code == EXIT_OK, result.output
        assert "VDD* = 0.720" in result.output


class TestDetectCommands:
    """detect gen -> train -> eval."""

    def test_pipeline(self, runner, tmp_path):
        cfg = _config(tmp_path, {"detector": {"hidden_sizes": [16], "epochs": 2}})
        assert runner.invoke(main, [
            "detect", "gen", "--config", cfg, "--count", "48", "--out", str(tmp_path),
        ]).exit_code == EXIT_OK
        data = tmp_path / "sensor.scat"
        assert labels_path(data).exists()

        result = runner.invoke(main, [
            "detect", "train", "--data", str(data), "--config", cfg, "--train", "40",
            "--out", str(tmp_path),
        ])
        assert result.exit_code == EXIT_OK, result.output
        assert (tmp_path / "detector.json").exists()
        assert len((tmp_path / "history.csv").read_text().splitlines()) == 3

        result = runner.invoke(main, [
            "detect", "eval", "--model", str(tmp_path / "detector.json"), "--data", str(data),
            "--skip", "40",
        ])
        assert result.exit_code == EXIT_OK, result.output
        assert "Accuracy" in result.output

    def test_missing_labels(self, runner, tmp_path):
        runner.invoke(main, ["simulate", "--traces", "20", "--out", str(tmp_path)])
        result = runner.invoke(main, [
            "detect", "train", "--data", str(tmp_path / "traces.scat"), "--out", str(tmp_path),
        ])
        assert result.exit_code == EXIT_USAGE

    def test_skip_everything(self, runner, tmp_path):
        runner.invoke(main, ["detect", "gen", "--count", "8", "--out", str(tmp_path)])
        runner.invoke(main, [
            "detect", "train", "--data", str(tmp_path / "sensor.scat"), "--epochs", "0",
            "--out", str(tmp_path),
        ])
        result = runner.invoke(main, [
            "detect", "eval", "--model", str(tmp_path / "detector.json"),
            "--data", str(tmp_path / "sensor.scat"), "--skip", "8",
        ])
        assert result.exit_code == EXIT_USAGE


class TestVddMonitor:
    def test_alarm(self, runner):
        result = runner.invoke(main, ["vdd-monitor"])
        assert result.exit_code == EXIT_OK
        assert "ALARM at sample 1300" in result.output

    def test_no_drop(self, runner):
        result = runner.invoke(main, ["vdd-monitor", "--drop", "0"])
        assert result.exit_code == EXIT_OK
        assert "no alarm" in result.output

    def test_csv_replay(self, runner, tmp_path):
        path = tmp_path / "v.csv"
        path.write_text("vdd,v_aes\n" + "1.0,0.5\n" * 500, encoding="utf-8")
        result = runner.invoke(main, ["vdd-monitor", "--csv", str(path)])
        assert result.exit_code == EXIT_OK
        assert "no alarm" in result.output


class TestSaberCommands:
    def test_keygen_encaps_decaps(self, runner, tmp_path):
        assert runner.invoke(main, ["saber", "keygen", "--seed", "1", "--out", str(tmp_path)]).exit_code == 0
        assert len(read_bytes(tmp_path / "pk.bin")) == 992
        assert len(read_bytes(tmp_path / "sk.bin")) == 2304
        assert runner.invoke(main, [
            "saber", "encaps", "--pk", str(tmp_path / "pk.bin"), "--seed", "2", "--out", str(tmp_path),
        ]).exit_code == 0
        ss = read_bytes(tmp_path / "ss.bin")
        dec = tmp_path / "dec"
        result = runner.invoke(main, [
            "saber", "decaps", "--sk", str(tmp_path / "sk.bin"), "--ct", str(tmp_path / "ct.bin"),
            "--out", str(dec),
        ])
        assert result.exit_code == EXIT_OK
        assert read_bytes(dec / "ss.bin") == ss

    def test_short_ciphertext_is_data_error(self, runner, tmp_path):
        runner.invoke(main, ["saber", "keygen", "--seed", "1", "--out", str(tmp_path)])
        (tmp_path / "ct.bin").write_bytes(bytes(10))
        result = runner.invoke(main, [
            "saber", "decaps", "--sk", str(tmp_path / "sk.bin"), "--ct", str(tmp_path / "ct.bin"),
        ])
        assert result.exit_code == EXIT_DATA

    def test_kat_generate_and_verify(self, runner, tmp_path):
        rsp = tmp_path / "kat.rsp"
        assert runner.invoke(main, ["saber", "kat", "--generate", "1", "--out", str(rsp)]).exit_code == 0
        result = runner.invoke(main, ["saber", "kat", str(rsp)])
        assert result.exit_code == EXIT_OK
        assert "1 passed, 0 failed" in result.output

    def test_kat_mismatch_is_negative(self, runner, tmp_path):
        rsp = tmp_path / "kat.rsp"
        runner.invoke(main, ["saber", "kat", "--generate", "1", "--out", str(rsp)])
        lines = rsp.read_text(encoding="ascii").splitlines()
        lines = [("ss = " + "00" * 32) if line.startswith("ss = ") else line for line in lines]
        rsp.write_text("\n".join(lines) + "\n", encoding="ascii")
        result = runner.invoke(main, ["saber", "kat", str(rsp)])
        assert result.exit_code == EXIT_NEGATIVE

    def test_kat_needs_a_file(self, runner):
        assert runner.invoke(main, ["saber", "kat"]).exit_code == EXIT_USAGE

    @pytest.mark.slow
    def test_bench(self, runner):
        result = runner.invoke(main, ["saber", "bench", "--repeat", "1"])
        assert result.exit_code == EXIT_OK, result.output
        assert "lazy" in result.output.lower()

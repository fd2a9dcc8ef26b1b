"""
Tests for the Command-Line Front End.

Tests run-document loading, flag handling, CSV and manifest output,
reruns from a manifest and the error records and exit codes.
"""

import json
import pytest
import sys
from pathlib import Path

import pandas as pd

# Add src directory to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from cli import EXIT_OK, EXIT_USAGE, build_sim_config, main
from config import check_document, load_config_document
from exceptions import ConfigError, ErrorCode


SHORT_DOCUMENT = {
    "fee": {"c_bar": 0.01},
    "contract": {"f0": 100.0, "rate": 100.0},
    "sim": {"n_paths": 200, "h": 0.05, "seed": 5, "n_batches": 10},
}


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(SHORT_DOCUMENT), encoding="utf-8")
    return path


def read_error(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


class TestDocuments:
    """Test run-document loading and checking."""

    def test_missing_sections_filled(self):
        """Test absent sections become empty mappings."""
        document = check_document({"fee": {"m": 0.2}})
        assert document["fee"] == {"m": 0.2}
        assert document["market"] == {}

    def test_unknown_section(self):
        """Test unknown sections are rejected."""
        with pytest.raises(ConfigError):
            check_document({"plots": {}})

    def test_unknown_key(self):
        """Test unknown keys are rejected."""
        with pytest.raises(ConfigError) as exc_info:
            check_document({"market": {"sigma": 0.2}})
        assert "sigma" in exc_info.value.message

    def test_malformed_json_position(self, tmp_path):
        """Test malformed JSON reports line and column."""
        path = tmp_path / "bad.json"
        path.write_text('{\n  "fee": {"m": 0.2,}\n}', encoding="utf-8")
        with pytest.raises(ConfigError) as exc_info:
            load_config_document(path)
        assert exc_info.value.code is ErrorCode.CONFIG_PARSE_ERROR
        assert exc_info.value.line == 2

    def test_build_from_preset(self):
        """Test contract presets and defaults resolve."""
        document = check_document({"contract": {"preset": "deferred"}, "sim": {"n_paths": 100, "n_batches": 10}})
        sim = build_sim_config(document)
        assert sim.contract.maturity == pytest.approx(15.0)
        assert sim.market.nu == 0.18

    def test_build_from_segments(self):
        """Test explicit withdrawal segments resolve."""
        document = check_document({
            "contract": {"withdrawals": [
                {"from_year": 0, "to_year": 2, "rate": 0.0},
                {"from_year": 2, "to_year": 12, "rate": 10.0},
            ]},
        })
        assert build_sim_config(document).contract.maturity == pytest.approx(12.0)

    def test_invalid_value_becomes_config_error(self):
        """Test parameter violations surface as configuration errors."""
        document = check_document({"market": {"rho": 2.0}})
        with pytest.raises(ConfigError) as exc_info:
            build_sim_config(document)
        assert exc_info.value.code is ErrorCode.CONFIG_INVALID


class TestCommands:
    """Test command runs end to end."""

    def test_net_liability_outputs(self, config_file, tmp_path):
        """Test the command writes its CSV and manifest."""
        out = tmp_path / "out"
        assert main(["--config", str(config_file), "--out", str(out), "-q", "net-liability"]) == EXIT_OK
        raw = (out / "net_liability.csv").read_bytes()
        assert raw.startswith(b"c_bar,m,net_liability,std_error")
        assert b"\r\n" in raw
        manifest = json.loads((out / "net_liability_manifest.json").read_text())
        assert manifest["seed"] == 5
        assert manifest["outputs"] == ["net_liability.csv"]
        assert "phi" in manifest["derived"]

    def test_seed_flag_overrides(self, config_file, tmp_path):
        """Test --seed replaces the document seed."""
        out = tmp_path / "out"
        main(["--config", str(config_file), "--out", str(out), "--seed", "9", "-q", "net-liability"])
        manifest = json.loads((out / "net_liability_manifest.json").read_text())
        assert manifest["seed"] == 9
        assert manifest["document"]["sim"]["seed"] == 9

    def test_rerun_from_manifest(self, config_file, tmp_path):
        """Test a rerun from the manifest reproduces the CSV byte for byte."""
        first, second = tmp_path / "first", tmp_path / "second"
        main(["--config", str(config_file), "--out", str(first), "-q", "net-liability"])
        manifest = first / "net_liability_manifest.json"
        main(["--config", str(manifest), "--out", str(second), "--threads", "4", "-q", "net-liability"])
        assert (first / "net_liability.csv").read_bytes() == (second / "net_liability.csv").read_bytes()

    def test_fee_curve(self, config_file, tmp_path):
        """Test one fee-curve row per grid point."""
        out = tmp_path / "out"
        code = main([
            "--config", str(config_file), "--out", str(out), "-q",
            "fee-curve", "--c-bar", "0,0.02", "--m", "0,0.3",
        ])
        assert code == EXIT_OK
        frame = pd.read_csv(out / "fee_curve.csv")
        assert len(frame) == 4
        assert list(frame.columns[:2]) == ["m", "c_bar"]

    def test_loss_dist(self, config_file, tmp_path):
        """Test loss samples and the summary are written."""
        out = tmp_path / "out"
        assert main(["--config", str(config_file), "--out", str(out), "-q", "loss-dist"]) == EXIT_OK
        samples = pd.read_csv(out / "loss_samples.csv")
        assert list(samples.columns) == ["loss", "weight", "batch"]
        summary = pd.read_csv(out / "loss_summary.csv")
        assert summary.loc[0, "zeta"] == pytest.approx(0.9)

    def test_sensitivity_under_q(self, tmp_path):
        """Test one net-liability row per (V0, m) cell at the given fair fees."""
        path = tmp_path / "sweep.json"
        path.write_text(json.dumps(dict(SHORT_DOCUMENT, sweep={"fair_fees": {"0": 0.02, "0.3": 0.01}})), encoding="utf-8")
        out = tmp_path / "out"
        code = main([
            "--config", str(path), "--out", str(out), "-q",
            "sensitivity", "--v0", "0.02,0.08", "--m", "0,0.3",
        ])
        assert code == EXIT_OK
        frame = pd.read_csv(out / "sensitivity.csv")
        assert len(frame) == 4
        assert {"v0", "m", "c_bar", "net_liability", "std_error"} <= set(frame.columns)
        assert sorted(frame["c_bar"].unique()) == [0.01, 0.02]

    def test_sensitivity_under_p(self, tmp_path):
        """Test the real-world sweep writes loss summaries."""
        path = tmp_path / "sweep.json"
        path.write_text(json.dumps(dict(SHORT_DOCUMENT, sweep={"fair_fees": {"0": 0.02}})), encoding="utf-8")
        out = tmp_path / "out"
        code = main([
            "--config", str(path), "--out", str(out), "-q",
            "sensitivity", "--v0", "0.04", "--m", "0", "--measure", "P",
        ])
        assert code == EXIT_OK
        frame = pd.read_csv(out / "sensitivity.csv")
        assert len(frame) == 1
        assert {"mean", "variance", "cte"} <= set(frame.columns)

    def test_sensitivity_needs_grids(self, config_file, tmp_path, capsys):
        """Test a sweep without multipliers is a usage error."""
        code = main(["--config", str(config_file), "--out", str(tmp_path), "-q", "sensitivity", "--v0", "0.04"])
        assert code == EXIT_USAGE
        assert read_error(capsys)["error"] == "USAGE_ERROR"

    def test_consistency(self, config_file, tmp_path):
        """Test the consistency row and its manifest entry."""
        out = tmp_path / "out"
        assert main(["--config", str(config_file), "--out", str(out), "-q", "consistency"]) == EXIT_OK
        frame = pd.read_csv(out / "consistency.csv")
        assert list(frame.columns) == [
            "c_bar", "m", "residual", "residual_se", "net_liability", "net_se", "annuity",
        ]
        manifest = json.loads((out / "consistency_manifest.json").read_text())
        assert manifest["results"]["residual"] == pytest.approx(frame.loc[0, "residual"])
        assert frame.loc[0, "annuity"] > 0

    def test_jump_loading_in_document(self, tmp_path):
        """Test the fee's jump loading is read and written back."""
        document = check_document(dict(SHORT_DOCUMENT, fee={"c_bar": 0.01, "jump_loading": "scaled"}))
        sim = build_sim_config(document)
        assert sim.fee.jump_loading.value == "scaled"
        out = tmp_path / "out"
        path = tmp_path / "run.json"
        path.write_text(json.dumps(dict(SHORT_DOCUMENT, fee={"c_bar": 0.01, "jump_loading": "scaled"})), encoding="utf-8")
        main(["--config", str(path), "--out", str(out), "-q", "net-liability"])
        manifest = json.loads((out / "net_liability_manifest.json").read_text())
        assert manifest["document"]["fee"]["jump_loading"] == "scaled"
        assert manifest["document"]["sim"]["weights"] == "transition"

    def test_validate_selected(self, config_file, tmp_path):
        """Test validate writes a report and passes on the explicit set."""
        out = tmp_path / "out"
        code = main([
            "--config", str(config_file), "--out", str(out), "-q",
            "validate", "--checks", "unit_weights",
        ])
        assert code == EXIT_OK
        report = pd.read_csv(out / "validation.csv")
        assert bool(report.loc[0, "passed"])


class TestErrors:
    """Test error records and exit codes."""

    def test_missing_file(self, tmp_path, capsys):
        """Test an unreadable config exits with a parse error record."""
        code = main(["--config", str(tmp_path / "missing.json"), "--out", str(tmp_path), "-q", "net-liability"])
        assert code == EXIT_USAGE
        record = read_error(capsys)
        assert record["error"] == "CONFIG_PARSE_ERROR"
        assert record["code"] == 401

    def test_unknown_key_exit(self, tmp_path, capsys):
        """Test schema violations exit with CONFIG_INVALID."""
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"sim": {"paths": 10}}), encoding="utf-8")
        code = main(["--config", str(path), "--out", str(tmp_path), "-q", "net-liability"])
        assert code == EXIT_USAGE
        assert read_error(capsys)["code"] == 402

    def test_empty_multiplier_list(self, config_file, tmp_path, capsys):
        """Test fair-fee without multipliers is a usage error."""
        code = main(["--config", str(config_file), "--out", str(tmp_path), "-q", "fair-fee"])
        assert code == EXIT_USAGE
        assert read_error(capsys)["error"] == "USAGE_ERROR"

    def test_unknown_command(self, capsys):
        """Test argparse failures become usage records."""
        assert main(["bogus"]) == EXIT_USAGE
        assert read_error(capsys)["code"] == 403

    def test_bad_number_list(self, config_file, tmp_path, capsys):
        """Test a malformed --m list is a usage error."""
        code = main(["--config", str(config_file), "--out", str(tmp_path), "-q", "fair-fee", "--m", "0,abc"])
        assert code == EXIT_USAGE

    def test_bad_jump_loading(self, tmp_path, capsys):
        """Test an unknown jump loading is an invalid document."""
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"fee": {"jump_loading": "half"}}), encoding="utf-8")
        code = main(["--config", str(path), "--out", str(tmp_path), "-q", "net-liability"])
        assert code == EXIT_USAGE
        assert read_error(capsys)["error"] == "CONFIG_INVALID"


if __name__ == "__main__":
    pytest.main([__file__, "-v"])

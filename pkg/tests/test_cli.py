import json

import pandas as pd
import pytest

from conftest import make_panel
from pricecluster.main import main, parse_args
from pricecluster.models import MODEL_I, MODEL_II, MODEL_III
from pricecluster.services import daily_analysis as da


@pytest.fixture(scope="module")
def simulated_file(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--seed", "17", "--n", "200", "--out-dir", str(out)]) == 0
    return out / "sim.csv"


def test_clean_matches_golden_output(golden_raw, golden_clean, tmp_path):
    code = main(["clean", str(golden_raw), "--primary-exchange", "N", "--out-dir", str(tmp_path)])
    assert code == 0
    assert (tmp_path / "golden_raw.clean.csv").read_bytes() == golden_clean.read_bytes()
    report = json.loads((tmp_path / "golden_raw.report.json").read_text())
    assert report["retained"] == 18
    assert report["dropped_total"] == 11
    assert report["dropped"]["outlier"] == 1
    assert (tmp_path / "manifest.json").exists()


def test_clean_empty_input(tmp_path):
    raw = tmp_path / "EMPTY.csv"
    raw.write_text("")
    out = tmp_path / "out"
    assert main(["clean", str(raw), "--primary-exchange", "N", "--out-dir", str(out)]) == 0
    lines = (out / "EMPTY.clean.csv").read_text().splitlines()
    assert lines == ["timestamp,price,ticks,duration,size,segment,exchange,condition,correction,suffix,group_size"]
    assert json.loads((out / "EMPTY.report.json").read_text())["input_count"] == 0


def test_bad_input_exits_with_one(tmp_path):
    raw = tmp_path / "BAD.csv"
    raw.write_text("timestamp,price\n2020-01-02T09:30:00,10.00\n")
    assert main(["clean", str(raw), "--primary-exchange", "N", "--out-dir", str(tmp_path)]) == 1


def test_unknown_flag_exits_with_two():
    with pytest.raises(SystemExit) as err:
        main(["clean", "x.csv", "--primary-exchange", "N", "--bogus"])
    assert err.value.code == 2


def test_simulate_requires_seed():
    with pytest.raises(SystemExit) as err:
        main(["simulate", "--n", "10"])
    assert err.value.code == 2


def test_simulate_is_reproducible(simulated_file, tmp_path):
    assert main(["simulate", "--seed", "17", "--n", "200", "--out-dir", str(tmp_path)]) == 0
    assert (tmp_path / "sim.csv").read_bytes() == simulated_file.read_bytes()
    assert (tmp_path / "manifest.json").read_bytes() == (simulated_file.parent / "manifest.json").read_bytes()


def test_simulate_parameter_override_and_stocks(tmp_path):
    code = main([
        "simulate", "--seed", "3", "--n", "50", "--stocks", "2", "--param", "h5=0.2",
        "--out-dir", str(tmp_path),
    ])
    assert code == 0
    a = pd.read_csv(tmp_path / "sim001.csv")
    b = pd.read_csv(tmp_path / "sim002.csv")
    assert len(a) == len(b) == 50
    assert not a["ticks"].equals(b["ticks"])
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["options"]["param"] == [["h5", 0.2]]


def test_fit_single_variant(simulated_file, tmp_path):
    code = main([
        "fit", str(simulated_file), "--variant", "static", "--n-starts", "3", "--max-fev", "200",
        "--seed", "1", "--out-dir", str(tmp_path),
    ])
    assert code == 0
    comparison = pd.read_csv(tmp_path / "comparison.csv")
    assert list(comparison["variant"]) == ["static"]
    result = json.loads((tmp_path / "sim.fit.static.json").read_text())
    assert result["n_params"] == 6
    assert set(result["theta_hat"]) >= {"c", "b", "a", "d", "h5", "h10"}
    summary = pd.read_csv(tmp_path / "summary.csv")
    assert summary.loc[0, "stock"] == "sim"


def test_daily_from_panel(tmp_path):
    panel_path = tmp_path / "panel.csv"
    da.panel_frame(make_panel(4, 5, noise=0.01, seed=5)).to_csv(panel_path, index=False)
    out = tmp_path / "out"
    assert main(["daily", "--panel", str(panel_path), "--out-dir", str(out)]) == 0
    rows = da.read_panel(panel_path)
    table = da.coefficient_table([da.fe_regression(rows, spec) for spec in (MODEL_I, MODEL_II, MODEL_III)])
    assert (out / "coefficients.csv").read_text() == table.to_csv(lineterminator="\n")
    assert (out / "univariate_points.csv").exists()


def test_daily_without_inputs_fails(tmp_path):
    assert main(["daily", "--out-dir", str(tmp_path)]) == 1


def test_report(simulated_file, tmp_path):
    assert main(["report", str(simulated_file), "--out-dir", str(tmp_path)]) == 0
    stats = pd.read_csv(tmp_path / "descriptive.csv")
    assert stats.loc[0, "n_trades"] == 200
    digits = pd.read_csv(tmp_path / "sim.digits.csv")
    assert len(digits) == 10


def test_config_file_supplies_defaults(tmp_path, golden_raw):
    config = tmp_path / "clean.env"
    config.write_text("PRIMARY_EXCHANGE=N\nMAD_K=5\n")
    out = tmp_path / "out"
    assert main(["clean", str(golden_raw), "--config", str(config), "--out-dir", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["options"]["mad_k"] == 5.0
    assert manifest["options"]["primary_exchange"] == "N"


def test_explicit_flag_beats_config(tmp_path):
    config = tmp_path / "clean.env"
    config.write_text("MAD_K=5\n")
    args = parse_args(["clean", "x.csv", "--primary-exchange", "N", "--config", str(config), "--mad-k", "7"])
    assert args.mad_k == 7.0


def test_global_flags_before_subcommand(tmp_path):
    args = parse_args(["--seed", "5", "--out-dir", str(tmp_path), "--log-level", "DEBUG", "simulate", "--n", "60"])
    assert args.seed == 5
    assert args.out_dir == tmp_path
    assert args.log_level == "DEBUG"
    assert main(["--seed", "17", "--out-dir", str(tmp_path), "simulate", "--n", "200"]) == 0
    assert (tmp_path / "sim.csv").exists()


def test_flag_after_subcommand_wins_over_global(tmp_path):
    args = parse_args(["--seed", "5", "simulate", "--seed", "9"])
    assert args.seed == 9
    assert parse_args(["simulate", "--seed", "9"]).out_dir.name == "out"


def _run_pipeline(root):
    sim, fit, daily, report = (root / d for d in ("sim", "fit", "daily", "report"))
    assert main(["simulate", "--seed", "21", "--n", "50000", "--stocks", "4", "--out-dir", str(sim)]) == 0
    files = sorted(str(p) for p in sim.glob("sim*.csv"))
    assert main([
        "fit", files[0], "--variant", "static", "--n-starts", "3", "--max-fev", "60",
        "--seed", "21", "--out-dir", str(fit),
    ]) == 0
    assert main(["daily", *files, "--out-dir", str(daily)]) == 0
    theta = str(fit / "sim001.fit.static.json")
    assert main(["report", *files, "--theta", theta, "--out-dir", str(report)]) == 0
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.mark.slow
def test_full_pipeline_is_byte_reproducible(tmp_path):
    first = _run_pipeline(tmp_path / "a")
    second = _run_pipeline(tmp_path / "b")
    assert list(first) == list(second)
    assert len(first) > 10
    for name in first:
        assert first[name] == second[name], name

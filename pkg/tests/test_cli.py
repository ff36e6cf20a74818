import json

import pytest
from click.testing import CliRunner

from modcontrib import cli, engine
from conftest import demo_builtin_spec, write_demo_dataset


def builtin_flag(**kwargs):
    return "builtin:" + json.dumps(demo_builtin_spec(**kwargs))


@pytest.fixture
def runner():
    return CliRunner()


def run_analyze(runner, manifest, out_dir, model, *extra):
    return runner.invoke(cli.main, [
        "analyze", str(manifest), "--model", model, "--out", str(out_dir),
        *extra])


def test_analyze_end_to_end(runner, tmp_path):
    manifest = write_demo_dataset(tmp_path / "data")
    out = tmp_path / "out"
    result = run_analyze(runner, manifest, out, builtin_flag(),
                         "--per-class")
    assert result.exit_code == 0, result.output
    assert "modality contribution (scan : clinical) = " in result.output
    assert "report written to" in result.output
    report = json.loads((out / "report.json").read_text())
    assert report["format"] == "modality-contribution-report"
    assert abs(report["checks"]["sum_contributions"] - 1.0) <= 1e-9
    log = json.loads((out / "run_log.json").read_text())
    expected_calls = 2 * (1 + 4 + 3)
    assert log["model_calls"] == expected_calls
    assert "wall_time_seconds" in log
    assert sorted(log["artifacts"]) == [
        "heatmap_scan_max.pgm", "heatmap_scan_mean.pgm", "scores_clinical.csv"]
    for name in log["artifacts"]:
        assert (out / name).exists()


def test_analyze_collapse_warning(runner, tmp_path):
    manifest = write_demo_dataset(tmp_path / "data")
    spec = json.dumps({
        "kind": "single", "modality": "clinical",
        "inner": {"kind": "linear",
                  "weights": {"clinical": [1.0, 2.0, 3.0]}}})
    result = run_analyze(runner, manifest, tmp_path / "out",
                         f"builtin:{spec}")
    assert result.exit_code == 0
    assert "= 0.00 : 1.00" in result.output
    assert "warning: modality 'scan' contributes 0.00" in result.output
    assert "unimodal collapse" in result.output


def test_analyze_runs_are_byte_identical(runner, tmp_path):
    manifest = write_demo_dataset(tmp_path / "data")
    for out in ("one", "two"):
        result = run_analyze(runner, manifest, tmp_path / out,
                             builtin_flag(), "--per-class")
        assert result.exit_code == 0, result.output
    first = tmp_path / "one"
    second = tmp_path / "two"
    names = sorted(p.name for p in first.iterdir())
    assert sorted(p.name for p in second.iterdir()) == names
    for name in names:
        if name == "run_log.json":  # carries wall time
            continue
        assert (first / name).read_bytes() == (second / name).read_bytes()


def test_analyze_degenerate_and_strict(runner, tmp_path):
    manifest = write_demo_dataset(tmp_path / "data")
    constant = 'builtin:{"kind":"constant","output":[1.0,2.0]}'
    soft = run_analyze(runner, manifest, tmp_path / "soft", constant)
    assert soft.exit_code == 0
    assert "degenerate run" in soft.output
    assert "= 0.50 : 0.50" in soft.output
    strict = run_analyze(runner, manifest, tmp_path / "strict", constant,
                         "--strict")
    assert strict.exit_code == 2
    assert "degenerate run" in strict.output


def test_analyze_bad_inputs_exit_one(runner, tmp_path):
    manifest = write_demo_dataset(tmp_path / "data")
    missing = run_analyze(runner, tmp_path / "absent.json", tmp_path / "o",
                          builtin_flag())
    assert missing.exit_code == 2  # click path check
    bad_model = run_analyze(runner, manifest, tmp_path / "o",
                            "builtin:{broken")
    assert bad_model.exit_code == 1
    assert "Error" in bad_model.output
    bad_fill = run_analyze(runner, manifest, tmp_path / "o",
                           builtin_flag(), "--fill", "fancy")
    assert bad_fill.exit_code == 1


def test_analyze_fill_override_is_recorded(runner, tmp_path):
    manifest = write_demo_dataset(tmp_path / "data")
    out = tmp_path / "out"
    result = run_analyze(runner, manifest, out, builtin_flag(),
                         "--fill", "mean")
    assert result.exit_code == 0, result.output
    log = json.loads((out / "run_log.json").read_text())
    assert log["settings"]["fill_override"] == "mean"
    assert log["settings"]["fills"] == ["mean", "mean"]
    report = json.loads((out / "report.json").read_text())
    assert [m["fill"] for m in report["modalities"]] == ["mean", "mean"]


def test_analyze_post_transform_is_recorded(runner, tmp_path):
    manifest = write_demo_dataset(tmp_path / "data")
    out = tmp_path / "out"
    result = run_analyze(runner, manifest, out, builtin_flag(),
                         "--post-transform", "softmax")
    assert result.exit_code == 0, result.output
    report = json.loads((out / "report.json").read_text())
    assert report["model"]["post_transform"] == "softmax"


def test_analyze_no_artifacts(runner, tmp_path):
    manifest = write_demo_dataset(tmp_path / "data")
    out = tmp_path / "out"
    result = run_analyze(runner, manifest, out, builtin_flag(),
                         "--no-artifacts")
    assert result.exit_code == 0, result.output
    names = sorted(p.name for p in out.iterdir())
    assert names == ["report.json", "run_log.json"]


def test_render_from_stored_report(runner, tmp_path):
    manifest = write_demo_dataset(tmp_path / "data")
    out = tmp_path / "out"
    assert run_analyze(runner, manifest, out, builtin_flag(),
                       "--per-class").exit_code == 0
    render_dir = tmp_path / "render"
    result = runner.invoke(cli.main, [
        "render", str(out / "report.json"), "--out", str(render_dir)])
    assert result.exit_code == 0, result.output
    assert "rendered 3 artifact file(s)" in result.output
    for name in ("heatmap_scan_mean.pgm", "heatmap_scan_max.pgm",
                 "scores_clinical.csv"):
        assert ((render_dir / name).read_bytes()
                == (out / name).read_bytes())


def test_render_max_needs_per_class(runner, tmp_path):
    manifest = write_demo_dataset(tmp_path / "data")
    out = tmp_path / "out"
    assert run_analyze(runner, manifest, out,
                       builtin_flag()).exit_code == 0
    result = runner.invoke(cli.main, [
        "render", str(out / "report.json"), "--out", str(tmp_path / "r"),
        "--mode", "max"])
    assert result.exit_code == 1
    assert "--per-class" in result.output


def test_selftest_passes(runner):
    result = runner.invoke(cli.main, ["selftest"])
    assert result.exit_code == 0, result.output
    assert "all selftest checks passed" in result.output
    assert "FAIL" not in result.output


def test_selftest_reports_failures(runner, monkeypatch):
    def broken(table):
        raise RuntimeError("induced fault")

    monkeypatch.setattr(engine, "modality_contribution", broken)
    result = runner.invoke(cli.main, ["selftest"])
    assert result.exit_code == 1
    assert "FAIL" in result.output


def test_version_and_help(runner):
    version = runner.invoke(cli.main, ["--version"])
    assert version.exit_code == 0
    assert "modcontrib" in version.output
    help_text = runner.invoke(cli.main, ["analyze", "--help"])
    assert help_text.exit_code == 0
    assert "--per-class" in help_text.output

import json
import os

import numpy as np
import pytest

from postureid import cli


def run(*args):
    return cli.main([str(a) for a in args])


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    """Mini end-to-end pipeline artifacts shared by the CLI tests."""
    root = tmp_path_factory.mktemp("pipeline")
    data = root / "data"
    assert run("dataset", "--out", data, "--samples", 36, "--seed", 404,
               "--jobs", "1", "--quiet") == 0
    assert run("featurize", "--data", data) == 0
    assert run("train", "--data", data, "--out", root / "model.pcnn",
               "--epochs", 2, "--seed", 5, "--jobs", "1", "--quiet") == 0
    return root


class TestSimulate:
    def test_default_trace(self, tmp_path):
        out = tmp_path / "sim"
        assert run("simulate", "--out", out) == 0
        lines = (out / "trace.csv").read_text().strip().splitlines()
        assert lines[0] == ("time_s,alpha_fs_rad,alpha_ss_rad,alpha_ls_rad,"
                            "alpha_ts_rad")
        assert len(lines) == 1 + 6051
        assert (out / "effective_config.ini").exists()

    def test_zero_tilt_amplitude_zero_sway(self, tmp_path):
        out = tmp_path / "sim0"
        assert run("simulate", "--out", out, "--tilt-amplitude", 0.0) == 0
        rows = np.loadtxt(out / "trace.csv", delimiter=",", skiprows=1)
        assert np.abs(rows[:, 1:]).max() < 1e-12

    def test_malformed_params_file(self, tmp_path):
        bad = tmp_path / "params.json"
        bad.write_text('{"ankle": {"kp": 465.98,}}')
        assert run("simulate", "--out", tmp_path / "x",
                   "--params-file", bad) == 2

    def test_unknown_param_key(self, tmp_path):
        bad = tmp_path / "params.json"
        bad.write_text('{"ankle": {"kq": 1.0}}')
        assert run("simulate", "--out", tmp_path / "x",
                   "--params-file", bad) == 2

    def test_unstable_params_exit_3(self, tmp_path):
        zero = tmp_path / "params.json"
        zero.write_text(json.dumps({j: {"kp": 0.0, "ki": 0.0, "kd": 0.0}
                                    for j in ("ankle", "knee", "hip")}))
        assert run("simulate", "--out", tmp_path / "x",
                   "--params-file", zero) == 3


class TestStimulusExport:
    def test_export(self, tmp_path):
        out = tmp_path / "prts.csv"
        assert run("stimulus", "export", "--out", out) == 0
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "time_s,tilt_rad,rate_rad_s"
        assert len(lines) == 1 + 6051


class TestPipeline:
    def test_dataset_files(self, pipeline_dir):
        data = pipeline_dir / "data"
        for name in ("manifest.json", "targets.bin", "splits.bin",
                     "images.bin", "traces.bin", "params.bin"):
            assert (data / name).exists()
        manifest = json.loads((data / "manifest.json").read_text())
        assert manifest["counts"]["samples"] == 36
        assert manifest["features"]["kind"] == "modular"

    def test_eval_reports(self, pipeline_dir):
        out = pipeline_dir / "report"
        assert run("eval", "--data", pipeline_dir / "data", "--model",
                   pipeline_dir / "model.pcnn", "--out", out,
                   "--loop-closure", 2) == 0
        for name in ("metrics.csv", "param_errors.csv", "summary.txt",
                     "loop_closure.csv", "histogram_kp_deviation.csv",
                     "histogram_peak_sway_deg.csv"):
            assert (out / name).exists()
        metrics = (out / "metrics.csv").read_text().splitlines()
        assert metrics[0] == "split,total_rmse,fit_rmse,accuracy"
        assert [r.split(",")[0] for r in metrics[1:]] == ["train", "val",
                                                          "test"]

    def test_compare_report(self, pipeline_dir):
        out = pipeline_dir / "cmp"
        assert run("compare", "--data", pipeline_dir / "data", "--model",
                   pipeline_dir / "model.pcnn", "--out", out, "--epochs", 2,
                   "--jobs", "1", "--quiet") == 0
        rows = (out / "comparison.csv").read_text().strip().splitlines()
        variants = {r.split(",")[0] for r in rows[1:]}
        assert variants == {"modular", "monolithic"}
        assert (out / "monolithic.pcnn").exists()

    def test_identify_simulated_trace(self, pipeline_dir, tmp_path):
        sim = tmp_path / "sim"
        assert run("simulate", "--out", sim) == 0
        out = tmp_path / "ident"
        assert run("identify", "--trace", sim / "trace.csv", "--model",
                   pipeline_dir / "model.pcnn", "--modules", "ankle,hip",
                   "--out", out) == 0
        rows = (out / "identified_params.csv").read_text().strip().splitlines()
        assert len(rows) == 3  # header + two requested modules
        assert rows[1].startswith("ankle,") and rows[2].startswith("hip,")

    def test_identify_rejects_wrong_length(self, pipeline_dir, tmp_path):
        bad = tmp_path / "short.csv"
        with open(bad, "w") as fh:
            fh.write("time_s,alpha_fs_rad,alpha_ss_rad,alpha_ls_rad,"
                     "alpha_ts_rad\n")
            for i in range(100):
                fh.write(f"{i * 0.02:.2f},0,0,0,0\n")
        assert run("identify", "--trace", bad, "--model",
                   pipeline_dir / "model.pcnn", "--out", tmp_path / "x") == 2

    def test_identify_straight_legs_without_ls_column(self, pipeline_dir,
                                                      tmp_path):
        sim = tmp_path / "sim2"
        assert run("simulate", "--out", sim) == 0
        rows = (sim / "trace.csv").read_text().strip().splitlines()
        stripped = tmp_path / "noleg.csv"
        with open(stripped, "w") as fh:
            fh.write("time_s,alpha_fs_rad,alpha_ss_rad,alpha_ts_rad\n")
            for r in rows[1:]:
                c = r.split(",")
                fh.write(",".join([c[0], c[1], c[2], c[4]]) + "\n")
        out = tmp_path / "ident2"
        assert run("identify", "--trace", stripped, "--model",
                   pipeline_dir / "model.pcnn", "--modules", "ankle,hip",
                   "--out", out) == 0
        # knee module cannot be identified without the thigh sway
        assert run("identify", "--trace", stripped, "--model",
                   pipeline_dir / "model.pcnn", "--modules", "ankle,knee",
                   "--out", tmp_path / "x") == 2

    def test_missing_upstream_artifact_diagnostic(self, tmp_path):
        code = run("featurize", "--data", tmp_path / "nothing")
        assert code == 2


class TestDeterminism:
    def test_repeat_run_byte_identical(self, tmp_path):
        outs = []
        for name in ("r1", "r2"):
            root = tmp_path / name
            data = root / "data"
            assert run("dataset", "--out", data, "--samples", 30, "--seed",
                       911, "--jobs", "1", "--quiet") == 0
            assert run("featurize", "--data", data) == 0
            assert run("train", "--data", data, "--out", root / "m.pcnn",
                       "--epochs", 2, "--seed", 3, "--jobs", "1",
                       "--quiet") == 0
            assert run("eval", "--data", data, "--model", root / "m.pcnn",
                       "--out", root / "rep", "--jobs", "1") == 0
            outs.append(root)
        a, b = outs
        for rel in ("data/manifest.json", "data/images.bin",
                    "data/targets.bin", "data/traces.bin", "m.pcnn",
                    "rep/metrics.csv", "rep/summary.txt"):
            assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel

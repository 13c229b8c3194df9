from __future__ import annotations

import json

import numpy as np
import pytest

from nightbeam.cli import main
from nightbeam.io import read_field, read_raw


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    rc = main(["synth-gen", "--count", "6", "--seed", "13", "--out", str(root / "data")])
    assert rc == 0
    return root


class TestSynthGen:
    def test_manifest_written(self, workdir):
        manifest = json.loads((workdir / "data" / "manifest.json").read_text())
        assert len(manifest["records"]) == 6
        assert manifest["camera"]["width"] == 160


class TestOptimize:
    def test_gradient_run_writes_fields_and_scores(self, workdir):
        out = workdir / "opt"
        rc = main(
            [
                "optimize", "--dataset", str(workdir / "data" / "manifest.json"),
                "--out", str(out), "--budget", "0.6", "--steps", "8",
                "--scored-steps", "4", "--seed", "3",
            ]
        )
        assert rc == 0
        fields = sorted((out / "fields").glob("*.lidf"))
        assert len(fields) == 6
        doc = json.loads((out / "optimize.json").read_text())
        assert doc["mode"] == "closed_loop_gradient"
        assert len(doc["scenes"]) == 6
        for scene in doc["scenes"]:
            assert scene["power"] <= 0.6 + 1e-6
            assert len(scene["scores"]) == 4

    def test_trajectory_dump(self, workdir):
        out = workdir / "opt_dump"
        rc = main(
            [
                "optimize", "--dataset", str(workdir / "data" / "manifest.json"),
                "--out", str(out), "--budget", "0.6", "--steps", "4",
                "--scored-steps", "2", "--seed", "3", "--dump-trajectories",
            ]
        )
        assert rc == 0
        ep = out / "episodes" / "scene_0000"
        manifest = json.loads((ep / "manifest.json").read_text())
        assert len(manifest["steps"]) == 4
        m0 = read_raw(ep / "m_0000.lidf")
        assert m0.shape == (96, 160, 1)


class TestBaselineAndEval:
    def test_baseline_uniform(self, workdir):
        out = workdir / "base_uniform"
        rc = main(
            [
                "baseline", "--dataset", str(workdir / "data" / "manifest.json"),
                "--kind", "uniform", "--budget", "1.0", "--out", str(out),
            ]
        )
        assert rc == 0
        m = read_field(out / "fields" / "scene_0000.lidf")
        assert np.unique(m.data).size == 1

    def test_baseline_static_from_fields(self, workdir):
        out = workdir / "base_static"
        rc = main(
            [
                "baseline", "--dataset", str(workdir / "data" / "manifest.json"),
                "--kind", "static", "--budget", "0.6",
                "--fields", str(workdir / "opt" / "fields"), "--out", str(out),
            ]
        )
        assert rc == 0
        assert len(sorted((out / "fields").glob("*.lidf"))) == 6

    def test_eval_methods_and_stored(self, workdir, capsys):
        out = workdir / "eval"
        rc = main(
            [
                "eval", "--dataset", str(workdir / "data" / "manifest.json"),
                "--method", "uniform:1.0", "--method", "low_beam:1.0", "--method", "no_ego",
                "--fields", f"optimized@0.6={workdir / 'opt' / 'fields'}",
                "--out", str(out), "--seed", "1",
            ]
        )
        assert rc == 0
        doc = json.loads((out / "metrics.json").read_text())
        names = [m["method"] for m in doc["methods"]]
        assert names == ["uniform@1.0", "low_beam@1.0", "no_ego", "optimized@0.6"]
        table = capsys.readouterr().out
        assert "mAP50" in table and "optimized@0.6" in table
        csv = (out / "metrics.csv").read_text().splitlines()
        assert len(csv) == 5

    def test_eval_worker_count_invariant(self, workdir):
        args = [
            "eval", "--dataset", str(workdir / "data" / "manifest.json"),
            "--method", "uniform:1.0",
        ]
        rc = main(args + ["--out", str(workdir / "eval_w1"), "--workers", "1"])
        assert rc == 0
        rc = main(args + ["--out", str(workdir / "eval_w2"), "--workers", "2"])
        assert rc == 0
        a = (workdir / "eval_w1" / "metrics.json").read_bytes()
        b = (workdir / "eval_w2" / "metrics.json").read_bytes()
        assert a == b

    def test_report_merges(self, workdir, capsys):
        rc = main(
            [
                "report", "--inputs", str(workdir / "eval" / "metrics.json"),
                "--out", str(workdir / "table.csv"),
            ]
        )
        assert rc == 0
        text = (workdir / "table.csv").read_text()
        assert text.startswith("method,")
        assert "uniform@1.0" in text


class TestWarpCalib:
    def test_warp_from_calibration_file(self, workdir):
        calib = {
            "camera": {"fx": 40.0, "fy": 40.0, "cx": 16.0, "cy": 16.0, "width": 32, "height": 32},
            "headlight": {
                "intrinsics": {"fx": 40.0, "fy": 40.0, "cx": 16.0, "cy": 16.0, "width": 32, "height": 32},
                "rotation": [1, 0, 0, 0, 1, 0, 0, 0, 1],
                "translation": [-0.3, 0.0, 0.0],
                "phi": "low_beam",
            },
            "reference_plane_m": 10.0,
        }
        path = workdir / "calib.json"
        path.write_text(json.dumps(calib))
        out = workdir / "warp.lidf"
        rc = main(["warp-calib", "--calib", str(path), "--out", str(out)])
        assert rc == 0
        coords = read_raw(out)
        assert coords.shape == (32, 32, 2)

    def test_config_errors_exit_2(self, workdir):
        rc = main(["eval", "--dataset", str(workdir / "data" / "manifest.json"), "--out", str(workdir / "x")])
        assert rc == 2

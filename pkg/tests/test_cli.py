import json
from pathlib import Path

import numpy as np
import pytest

from layered_edit.cli import capture_golden, main, run, verify_goldens
from layered_edit.gridio import read_grid, read_mask

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"

# two overlapping objects so the transparency optimisation is exercised
OVERLAP = """
[grid]
height = 12
width = 12
channels = 16

[schedule]
steps = 10

[prompts]
source = [1, 10, 11]
edit = [1, 20, 11]

[[objects]]
source_tokens = [10]
edit_tokens = [20]
rect = [2, 6, 2, 6]

[[objects]]
source_tokens = [11]
edit_tokens = [11]
rect = [2, 6, 7, 11]

[[panoptic]]
rect = [2, 6, 2, 6]

[[panoptic]]
rect = [2, 6, 7, 11]
"""


@pytest.fixture
def overlap_config(tmp_path):
    d = tmp_path / "scn"
    d.mkdir()
    path = d / "overlap.toml"
    path.write_text(OVERLAP)
    return path


def digests(out):
    return json.loads((Path(out) / "manifest.json").read_text())["files"]


class TestRun:
    def test_emits_files(self, overlap_config, tmp_path, capsys):
        out = tmp_path / "out"
        assert main(["--config", str(overlap_config), "--out", str(out), "--viz"]) == 0
        names = {p.name for p in out.iterdir()}
        expected = {"manifest.json", "canvas.lgrd", "layer0.lgrd", "layer1.lgrd", "layer2.lgrd", "layer3.lgrd",
                    "tau0.lmsk", "tau1.lmsk", "overlap.lmsk", "conflict0.lmsk", "conflict1.lmsk",
                    "conflict_report.json", "viz"}
        assert names == expected
        manifest = json.loads((out / "manifest.json").read_text())
        for name in manifest["files"]:
            assert (out / name).exists()
        assert len(list((out / "viz").glob("tau0_step*.lmsk"))) == 10
        assert (out / "viz" / "canvas.pgm").read_bytes().startswith(b"P5\n12 12\n255\n")
        report = json.loads((out / "conflict_report.json").read_text())
        assert np.array(report["iou"]).shape == (2, 2)
        assert read_mask(out / report["conflict_masks"][0]).shape == (12, 12)
        assert read_grid(out / "canvas.lgrd").shape == (12, 12, 16)
        assert json.loads(capsys.readouterr().out)["files"] == manifest["files"]

    def test_seed_determinism(self, overlap_config, tmp_path):
        for name in ("a", "b"):
            assert main(["--config", str(overlap_config), "--seed", "7", "--out", str(tmp_path / name)]) == 0
        assert digests(tmp_path / "a") == digests(tmp_path / "b")
        main(["--config", str(overlap_config), "--seed", "8", "--out", str(tmp_path / "c")])
        assert digests(tmp_path / "c")["canvas.lgrd"] != digests(tmp_path / "a")["canvas.lgrd"]

    def test_steps_flag(self, tmp_path):
        out = tmp_path / "out"
        assert main(["--config", str(SCENARIOS / "move.toml"), "--steps", "10", "--out", str(out)]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["hyperparameters"]["steps"] == 10
        assert manifest["overrides"] == {"steps": 10}
        assert len(json.loads((out / "conflict_report.json").read_text())["iou"]) == 1

    def test_flags_recorded(self, overlap_config, tmp_path):
        out = tmp_path / "out"
        args = ["--eta", "0.27", "--k", "4", "--tq", "3", "--tk", "7"]
        assert main(["--config", str(overlap_config), "--out", str(out)] + args) == 0
        hp = json.loads((out / "manifest.json").read_text())["hyperparameters"]
        assert (hp["eta"], hp["k"], hp["t_query"], hp["t_key"]) == (0.27, 4.0, 3, 7)

    def test_load_error_is_json(self, tmp_path, capsys):
        bad = tmp_path / "bad.toml"
        bad.write_text("[grid]\nheight = 4\nwidth = 4\n")
        assert main(["--config", str(bad), "--out", str(tmp_path / "o")]) == 2
        err = json.loads(capsys.readouterr().err)
        assert err["stage"] == "load" and err["fields"] == ["missing section [prompts]"]

    def test_missing_config(self, capsys):
        assert main([]) == 2
        assert json.loads(capsys.readouterr().err)["stage"] == "arguments"

    def test_unreadable_file(self, tmp_path, capsys):
        assert main(["--config", str(tmp_path / "nope.toml")]) == 1
        assert json.loads(capsys.readouterr().err)["stage"] == "run"

    def test_range_warning_printed(self, overlap_config, tmp_path, capsys):
        assert main(["--config", str(overlap_config), "--eta", "0.9", "--out", str(tmp_path / "o")]) == 0
        assert "eta=0.9 outside validated range" in capsys.readouterr().err


KNOBS = {
    "seed": 3, "steps": 8, "eta": 0.26, "k": 4.0, "t_query": 3, "t_key": 7, "guidance": 5.0,
    "inversion_guidance": 1.5, "inversion_refine": 2, "tau_step": 0.02, "tau_iterations": 3, "tau_seed": 0.1,
    "tau_band": 1, "cross_gain": 0.8, "out_gain": 0.03, "temb_gain": 0.04, "beta_start": 0.001, "beta_end": 0.011,
}


@pytest.fixture(scope="module")
def base(tmp_path_factory):
    d = tmp_path_factory.mktemp("base")
    (d / "overlap.toml").write_text(OVERLAP)
    return run(d / "overlap.toml", d / "out"), d / "overlap.toml"


class TestManifestCompleteness:

    @pytest.mark.parametrize("knob", sorted(KNOBS))
    def test_perturbing_a_knob_shows_in_manifest_and_digests(self, base, knob, tmp_path):
        manifest, config = base
        changed = run(config, tmp_path / "out", {knob: KNOBS[knob]})
        recorded = changed["seed"] if knob == "seed" else changed["hyperparameters"][knob]
        assert recorded == KNOBS[knob] != (manifest["seed"] if knob == "seed" else manifest["hyperparameters"][knob])
        assert changed["files"] != manifest["files"]


class TestGoldens:
    @pytest.fixture
    def goldens(self, overlap_config, tmp_path):
        root = tmp_path / "goldens"
        capture_golden(overlap_config, root / "exact", "bit-exact")
        capture_golden(overlap_config, root / "loose", "1e-3")
        capture_golden(SCENARIOS / "resize.toml", root / "resize", "1e-9", {"steps": 10})
        return root

    def test_fresh_capture_passes(self, goldens):
        results = verify_goldens(goldens)
        assert [(r.case, r.passed) for r in results] == [("exact", True), ("loose", True), ("resize", True)]

    def test_seed_perturbation_fails(self, goldens):
        results = {r.case: r for r in verify_goldens(goldens, {"seed": 1})}
        assert not results["exact"].passed and "canvas.lgrd" in results["exact"].detail

    def test_step_size_sensitivity(self, goldens):
        results = {r.case: r for r in verify_goldens(goldens, {"tau_step": 1e-2 + 1e-6})}
        assert results["loose"].passed
        assert not results["exact"].passed

    def test_table_and_exit_code(self, goldens, capsys):
        assert main(["--goldens", str(goldens)]) == 0
        table = capsys.readouterr().out.splitlines()
        assert table[0].split() == ["case", "tolerance", "result"]
        assert all("PASS" in line for line in table[1:])
        assert main(["--goldens", str(goldens), "--seed", "5"]) == 1

    def test_failed_run_is_report_entry(self, goldens):
        (goldens / "exact" / "scenario" / "overlap.toml").write_text("not toml [")
        results = {r.case: r for r in verify_goldens(goldens)}
        assert not results["exact"].passed and results["exact"].detail.startswith("run failed")

    def test_cli_capture(self, overlap_config, tmp_path):
        root = tmp_path / "g"
        assert main(["--config", str(overlap_config), "--goldens", str(root), "--capture", "c1",
                     "--tolerance", "1e-9"]) == 0
        golden = json.loads((root / "c1" / "golden.json").read_text())
        assert golden["tolerance"] == "1e-9" and "canvas.lgrd" in golden["digests"]
        assert verify_goldens(root)[0].passed

    def test_empty_directory(self, tmp_path):
        (tmp_path / "empty").mkdir()
        assert main(["--goldens", str(tmp_path / "empty")]) == 2

import json
import shutil
import sys

import numpy as np
import pytest

import main as entrypoint
from cli import PipelineCli
from dataset_io import RasterImage, read_png, write_png
from rigs import circle_centers, ring_degrees, write_dataset

FRAMES = 20

WATERMARK_STUB = """
import json, sys
from pathlib import Path
from PIL import Image
manifest_path, outdir = Path(sys.argv[1]), Path(sys.argv[2])
data = json.loads(manifest_path.read_text())
width, height = data["hr_size"]
for entry in data["subsequences"]:
    for frame in entry["frames"]:
        target = outdir / data["output_layout"].format(subseq_id=entry["subseq_id"], frame_id=frame["frame_id"])
        target.parent.mkdir(parents=True, exist_ok=True)
        Image.new("RGB", (width, height), (10 * entry["subseq_id"],) * 3).save(target)
"""


@pytest.fixture
def project(tmp_path):
    """A 20-camera ring 18 degrees apart, 48×48 HR frames, planned on pose angles."""
    write_dataset(tmp_path / "data", circle_centers(ring_degrees(FRAMES)), size=(48, 48), seed=3, scene_name="ring")
    config = {
        "dataset": "data/transforms.json",
        "scale_factor": 4,
        "ordering": {
            "select_measure": "pose_angle_to_origin",
            "thresholds": [15, 30, 45],
            "min_subseq_len": 3,
        },
    }
    (tmp_path / "config.json").write_text(json.dumps(config), encoding="utf-8")
    return tmp_path


def invoke(project, *argv):
    return entrypoint.main([argv[0], "--root", str(project), "--config", "config.json", *argv[1:]])


class TestEndToEnd:
    def test_run_writes_every_artifact(self, project):
        assert invoke(project, "run", "--output", "out") == 0
        out = project / "out"

        sidecar = json.loads((out / "lr" / "degrade.json").read_text())
        assert sidecar["hr_size"] == [48, 48] and sidecar["lr_size"] == [12, 12]
        assert read_png(out / "lr" / "frame_00004.png").width == 12

        plan = json.loads((out / "plan.json").read_text())
        assert len(plan["subsequences"]) == FRAMES
        assert {entry["round"] for entry in plan["subsequences"]} == {1}
        assert all(len(entry["frames"]) == FRAMES for entry in plan["subsequences"])
        assert plan["config"]["ordering"]["thresholds"] == [15.0, 30.0, 45.0]

        hr = sorted(path.name for path in (out / "hr").glob("frame_*.png"))
        assert hr == [f"frame_{index:05}.png" for index in range(FRAMES)]
        assert read_png(out / "hr" / "frame_00000.png").width == 48
        provenance = json.loads((out / "hr" / "provenance.json").read_text())
        assert all(entry["subseq_id"] == 0 for entry in provenance["frames"])

        metrics = json.loads((out / "metrics.json").read_text())
        assert len(metrics["frames"]) == FRAMES
        assert metrics["frames"][0]["total_loss"] is not None
        assert all(frame["psnr"] != "inf" and frame["ssim"] < 1.0 for frame in metrics["frames"])
        csv_lines = (out / "metrics.csv").read_text().splitlines()
        assert csv_lines[0] == "frame_id,psnr,ssim,render_loss,subpixel_loss,total_loss"
        assert csv_lines[-1].startswith("mean,")

        report = json.loads((out / "report.json").read_text())
        assert report["plan"]["coverage_per_round"] == {"1": FRAMES}
        assert report["plan"]["misaligned_transitions"] == 0
        assert report["greedy_baseline"]["misaligned_transitions"] == 0
        assert report["all_starts_baseline"]["starts"] == FRAMES
        assert report["all_starts_baseline"]["misaligned_transitions"] == 0

    def test_runs_are_byte_identical(self, project):
        assert invoke(project, "run", "--output", "out_a") == 0
        assert invoke(project, "run", "--output", "out_b") == 0
        names = [
            "plan.json",
            "upsample_manifest.json",
            "lr/degrade.json",
            "lr/transforms.json",
            *[f"lr/frame_{index:05}.png" for index in range(FRAMES)],
            "hr/transforms.json",
            "hr/provenance.json",
            "metrics.json",
            "metrics.csv",
            "report.json",
            *[f"hr/frame_{index:05}.png" for index in range(FRAMES)],
        ]
        for name in names:
            assert (project / "out_a" / name).read_bytes() == (project / "out_b" / name).read_bytes(), name

    def test_earliest_subsequence_wins(self, project):
        stub = project / "watermark.py"
        stub.write_text(WATERMARK_STUB, encoding="utf-8")
        command = f"{sys.executable} {stub} {{manifest}} {{outdir}}"
        assert invoke(project, "run", "--output", "out", "--upsampler-command", command, "--skip-eval") == 0
        provenance = json.loads((project / "out" / "hr" / "provenance.json").read_text())
        for entry in provenance["frames"]:
            image = read_png(project / "out" / "hr" / f"frame_{entry['frame_id']:05}.png")
            assert np.allclose(image.data, 10 * entry["subseq_id"] / 255)
        assert not (project / "out" / "metrics.json").exists()


class TestCommands:
    def test_stages_one_at_a_time(self, project):
        for stage in ("degrade", "plan", "upsample", "aggregate", "report"):
            assert invoke(project, stage) == 0, stage
        assert (project / "output" / "report.json").is_file()

    def test_plan_before_degrade_fails(self, project):
        assert invoke(project, "plan") == 1

    def test_dump_scores(self, project):
        assert invoke(project, "degrade") == 0
        assert invoke(project, "plan", "--dump-scores") == 0
        lines = (project / "output" / "scores.csv").read_text().splitlines()
        assert len(lines) == 1 + FRAMES * (FRAMES - 1)

    def test_eval_against_itself_is_perfect(self, project):
        assert invoke(project, "degrade") == 0
        assert invoke(project, "eval", "--predicted", "data/transforms.json") == 0
        metrics = json.loads((project / "output" / "metrics.json").read_text())
        assert metrics["mean"]["psnr"] == "inf"
        assert metrics["mean"]["ssim"] == pytest.approx(1.0)
        assert "99.0" in (project / "output" / "metrics.csv").read_text()

    @pytest.mark.skipif(shutil.which("false") is None, reason="needs a POSIX false binary")
    def test_failing_backend_exits_nonzero(self, project):
        assert invoke(project, "degrade") == 0
        assert invoke(project, "plan") == 0
        assert invoke(project, "upsample", "--upsampler-command", "false {manifest} {outdir}") == 1

    def test_upsample_clears_stale_outputs(self, project):
        for stage in ("degrade", "plan"):
            assert invoke(project, stage) == 0
        stale = project / "output" / "upsampled" / "subseq_09999" / "frame_00000.png"
        stale.parent.mkdir(parents=True)
        stale.write_bytes(b"stale")
        assert invoke(project, "upsample") == 0
        assert not stale.exists()

    def test_intrinsics_follow_the_resolution(self, project):
        manifest = project / "data" / "transforms.json"
        raw = json.loads(manifest.read_text())
        raw.update({"fl_x": 60.0, "fl_y": 60.0, "cx": 24.0, "cy": 24.0, "w": 48, "h": 48})
        raw["frames"][2]["colmap_im_id"] = 11
        manifest.write_text(json.dumps(raw))
        for stage in ("degrade", "plan", "upsample", "aggregate"):
            assert invoke(project, stage) == 0, stage

        lr = json.loads((project / "output" / "lr" / "transforms.json").read_text())
        assert (lr["fl_x"], lr["fl_y"], lr["cx"], lr["cy"], lr["w"], lr["h"]) == (15.0, 15.0, 6.0, 6.0, 12, 12)
        assert lr["frames"][2]["colmap_im_id"] == 11
        hr = json.loads((project / "output" / "hr" / "transforms.json").read_text())
        assert (hr["fl_x"], hr["fl_y"], hr["cx"], hr["cy"], hr["w"], hr["h"]) == (60.0, 60.0, 24.0, 24.0, 48, 48)
        assert hr["frames"][2]["colmap_im_id"] == 11
        assert hr["camera_angle_x"] == raw["camera_angle_x"]

    def test_mixed_frame_sizes_fail_before_writing(self, project):
        write_png(project / "data" / "train" / "r_3.png", RasterImage(np.zeros((40, 48, 3))))
        assert invoke(project, "degrade") == 1
        assert not (project / "output" / "lr" / "transforms.json").exists()
        assert not list((project / "output").glob("lr/frame_*.png"))

    def test_eval_of_frames_below_the_ssim_window_fails_cleanly(self, project):
        write_dataset(project / "tiny", circle_centers([0.0, 30.0]), size=(8, 8))
        manifest = "tiny/transforms.json"
        assert invoke(project, "eval", "--predicted", manifest, "--reference", manifest) == 1
        assert not (project / "output" / "metrics.json").exists()

    def test_unknown_start_frame_fails_cleanly(self, project):
        config = json.loads((project / "config.json").read_text())
        config["ordering"].update({"start_policy": "single_start", "start_frame": FRAMES + 5})
        (project / "config.json").write_text(json.dumps(config))
        assert invoke(project, "degrade") == 0
        assert invoke(project, "plan") == 1

    def test_bad_config_exits_nonzero(self, project):
        (project / "config.json").write_text(json.dumps({"dataset": "data/transforms.json", "scale_factor": 1}))
        assert invoke(project, "degrade") == 1

    def test_every_command_is_registered(self):
        cli = PipelineCli()
        for name in ("degrade", "plan", "upsample", "aggregate", "eval", "report", "run"):
            assert cli.parse([name, "--dataset", "x"]).command == name


class TestUpsampleTimeout:
    def test_unset(self, monkeypatch):
        monkeypatch.setenv("SEQSR_UPSAMPLE_TIMEOUT", "")
        assert entrypoint.get_upsample_timeout() is None

    def test_seconds(self, monkeypatch):
        monkeypatch.setenv("SEQSR_UPSAMPLE_TIMEOUT", "2.5")
        assert entrypoint.get_upsample_timeout() == 2.5

    @pytest.mark.parametrize("value", ["abc", "0", "-3"])
    def test_invalid(self, monkeypatch, value):
        monkeypatch.setenv("SEQSR_UPSAMPLE_TIMEOUT", value)
        with pytest.raises(RuntimeError, match="SEQSR_UPSAMPLE_TIMEOUT"):
            entrypoint.get_upsample_timeout()

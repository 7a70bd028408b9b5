import json
import subprocess
import sys

import numpy as np
import pytest

from fusionpt import PointCloud, SemanticScores, generate_scene, synthetic_scores
from fusionpt.cli import main
from fusionpt.containers import (UNLABELED, load_label_map, load_label_vector,
                                 load_point_cloud, load_scores, load_tensor,
                                 save_point_cloud, save_scores)


def run_cli(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr().out
    return code, json.loads(out)


GEN_ARGS = ["--frames", "3", "--objects", "2", "--cameras", "1",
            "--points", "80", "--seed", "5", "--score-noise", "0.2"]


@pytest.fixture()
def scene_dir(tmp_path, capsys):
    path = tmp_path / "scene"
    code, summary = run_cli(capsys, "gen-scene", "--out", str(path), *GEN_ARGS)
    assert code == 0
    return path, summary


class TestGenScene:
    def test_deterministic_checksums(self, tmp_path, capsys):
        code_a, sum_a = run_cli(capsys, "gen-scene", "--out",
                                str(tmp_path / "a"), *GEN_ARGS)
        code_b, sum_b = run_cli(capsys, "gen-scene", "--out",
                                str(tmp_path / "b"), *GEN_ARGS)
        assert code_a == code_b == 0
        assert sum_a["files"] == sum_b["files"]

    def test_config_echoed(self, scene_dir):
        _, summary = scene_dir
        assert summary["config"]["seed"] == 5
        assert summary["config"]["sigma"] == 0.25
        assert summary["config"]["tau"] == 0.07

    def test_degenerate_config_exits_one(self, tmp_path, capsys):
        code, payload = run_cli(capsys, "gen-scene", "--out", str(tmp_path / "x"),
                                "--objects", "0")
        assert code == 1
        assert payload["error"]["type"] == "ValueError"


class TestProject:
    def test_projects_scene_cloud(self, scene_dir, tmp_path, capsys):
        path, _ = scene_dir
        out = tmp_path / "proj.fpt"
        code, summary = run_cli(capsys, "project",
                                "--cloud", str(path / "frame000/cloud.fpt"),
                                "--calib", str(path / "calib_cam0.json"),
                                "--out", str(out))
        assert code == 0
        table = load_tensor(out)
        assert table.shape[1] == 5
        assert summary["projected"] == table.shape[0] <= summary["total_points"]

    def test_missing_file_exits_one(self, tmp_path, capsys):
        code, payload = run_cli(capsys, "project", "--cloud",
                                str(tmp_path / "nope.fpt"), "--calib",
                                str(tmp_path / "nope.json"))
        assert code == 1
        assert "error" in payload

    def test_usage_error_exits_two(self, capsys):
        with pytest.raises(SystemExit) as err:
            main(["project"])  # missing required flags
        assert err.value.code == 2


class TestSuperpoints:
    def test_groups_match_library(self, scene_dir, tmp_path, capsys):
        path, _ = scene_dir
        out = tmp_path / "groups.fpt"
        code, summary = run_cli(
            capsys, "superpoints",
            "--cloud", str(path / "frame001/cloud.fpt"),
            "--calib", str(path / "calib_cam0.json"),
            "--maps", str(path / "frame001/labels_cam0.fpt"),
            "--out", str(out))
        assert code == 0
        groups = load_label_vector(out)
        assert summary["num_regions"] == len(summary["regions"])
        matched = (groups != UNLABELED).sum()
        assert matched == summary["matched_points"] > 0


class TestAlignViews:
    def test_runs_on_scene(self, scene_dir, tmp_path, capsys):
        path, summary = scene_dir
        with open(path / "scene.json") as fh:
            classes = json.load(fh)["instance_classes"]
        classes_path = tmp_path / "classes.json"
        classes_path.write_text(json.dumps(classes))
        code, result = run_cli(
            capsys, "align-views",
            "--cloud", str(path / "frame000/cloud.fpt"),
            "--calib", str(path / "calib_cam0.json"),
            "--maps", str(path / "frame000/labels_cam0.fpt"),
            "--classes", str(classes_path),
            "--out", str(tmp_path / "aligned"))
        assert code == 0
        assert result["conflict_points"] == 0  # single camera cannot conflict
        aligned = load_label_map(tmp_path / "aligned" / "aligned_cam0.fpt")
        assert aligned.labels.shape == (120, 160)


class TestAggregate:
    def test_dense_counts(self, scene_dir, tmp_path, capsys):
        path, _ = scene_dir
        out = tmp_path / "dense.fpt"
        code, summary = run_cli(
            capsys, "aggregate",
            "--keyframe", str(path / "frame001/cloud.fpt"),
            "--keyframe-index", "1",
            "--sweep", str(path / "frame000/cloud.fpt"), "--sweep-index", "0",
            "--sweep", str(path / "frame002/cloud.fpt"), "--sweep-index", "2",
            "--poses", str(path / "poses.txt"),
            "--out", str(out))
        assert code == 0
        dense = load_point_cloud(out)
        assert len(dense) == summary["dense_points"] > summary["keyframe_points"]
        assert dense.attr_width == 2  # reflectivity + provenance


class TestVote:
    def test_sigma_zero_preserves_scores_bytes(self, scene_dir, tmp_path, capsys):
        path, _ = scene_dir
        out_scores = tmp_path / "voted.fpt"
        out_labels = tmp_path / "labels.fpt"
        code, _ = run_cli(
            capsys, "vote", "--sigma", "0",
            "--prev", str(path / "frame000/cloud.fpt"),
            "--curr", str(path / "frame001/cloud.fpt"),
            "--next", str(path / "frame002/cloud.fpt"),
            "--scores-prev", str(path / "frame000/scores.fpt"),
            "--scores-curr", str(path / "frame001/scores.fpt"),
            "--scores-next", str(path / "frame002/scores.fpt"),
            "--poses", str(path / "poses.txt"),
            "--out-scores", str(out_scores), "--out-labels", str(out_labels))
        assert code == 0
        assert out_scores.read_bytes() == (path / "frame001/scores.fpt").read_bytes()

    def test_voting_changes_scores_with_positive_sigma(self, scene_dir, tmp_path,
                                                       capsys):
        path, _ = scene_dir
        out_scores = tmp_path / "voted.fpt"
        code, summary = run_cli(
            capsys, "vote", "--sigma", "0.5",
            "--prev", str(path / "frame000/cloud.fpt"),
            "--curr", str(path / "frame001/cloud.fpt"),
            "--next", str(path / "frame002/cloud.fpt"),
            "--scores-prev", str(path / "frame000/scores.fpt"),
            "--scores-curr", str(path / "frame001/scores.fpt"),
            "--scores-next", str(path / "frame002/scores.fpt"),
            "--poses", str(path / "poses.txt"),
            "--out-scores", str(out_scores), "--out-labels", str(tmp_path / "l.fpt"))
        assert code == 0
        voted = load_scores(out_scores)
        original = load_scores(path / "frame001/scores.fpt")
        assert not np.array_equal(voted.data, original.data)


class TestEval:
    def test_miou_of_identical_labels(self, scene_dir, tmp_path, capsys):
        path, _ = scene_dir
        truth = path / "frame001/gt_class.fpt"
        code, summary = run_cli(capsys, "eval", "--pred", str(truth),
                                "--truth", str(truth), "--classes", "3")
        assert code == 0
        assert summary["miou"] == 1.0


class TestLossCheck:
    def test_report_passes(self, capsys):
        code, report = run_cli(capsys, "loss-check", "--instances", "5")
        assert code == 0
        assert report["pass"] is True
        assert set(report["losses"]) == {"spatial", "temporal", "cross", "d2s"}
        for entry in report["losses"].values():
            assert entry["max_rel_err"] < 1e-5


class TestPretrain:
    def test_seed_one_halves_loss(self, tmp_path, capsys):
        code, summary = run_cli(capsys, "pretrain", "--seed", "1",
                                "--steps", "200", "--out", str(tmp_path / "run"))
        assert code == 0
        assert summary["loss_ratio"] <= 0.5
        assert (tmp_path / "run" / "losses.csv").exists()
        assert (tmp_path / "run" / "checkpoint" / "manifest.json").exists()

    def test_scene_dir_mode(self, scene_dir, tmp_path, capsys):
        path, _ = scene_dir
        code, summary = run_cli(capsys, "pretrain", "--scene-dir", str(path),
                                "--steps", "3", "--seed", "2",
                                "--out", str(tmp_path / "run"))
        assert code == 0
        assert np.isfinite(summary["final_total"])


class TestConfigFile:
    def test_precedence_flags_over_file_over_defaults(self, tmp_path, capsys):
        cfg = tmp_path / "run.toml"
        cfg.write_text("sigma = 0.9\nseed = 42\n")
        path = tmp_path / "scene"
        code, summary = run_cli(capsys, "gen-scene", "--out", str(path),
                                "--config", str(cfg), "--seed", "7",
                                "--objects", "2", "--cameras", "1",
                                "--points", "50")
        assert code == 0
        assert summary["config"]["seed"] == 7        # flag wins
        assert summary["config"]["sigma"] == 0.9     # file beats default
        assert summary["config"]["tau"] == 0.07      # default


class TestPipelineDeterminism:
    def test_two_full_runs_byte_identical(self, tmp_path):
        def pipeline(root):
            root.mkdir()
            scene = root / "scene"
            cmds = [
                ["gen-scene", "--out", str(scene), "--seed", "3", "--frames", "3",
                 "--objects", "2", "--cameras", "1", "--points", "60",
                 "--score-noise", "0.2"],
                ["pretrain", "--scene-dir", str(scene), "--steps", "5",
                 "--seed", "3", "--out", str(root / "train")],
                ["vote", "--sigma", "0.3",
                 "--prev", str(scene / "frame000/cloud.fpt"),
                 "--curr", str(scene / "frame001/cloud.fpt"),
                 "--next", str(scene / "frame002/cloud.fpt"),
                 "--scores-prev", str(scene / "frame000/scores.fpt"),
                 "--scores-curr", str(scene / "frame001/scores.fpt"),
                 "--scores-next", str(scene / "frame002/scores.fpt"),
                 "--poses", str(scene / "poses.txt"),
                 "--out-scores", str(root / "voted.fpt"),
                 "--out-labels", str(root / "labels.fpt")],
            ]
            outputs = []
            for cmd in cmds:
                proc = subprocess.run([sys.executable, "-m", "fusionpt"] + cmd,
                                      capture_output=True, text=True)
                assert proc.returncode == 0, proc.stdout + proc.stderr
                outputs.append(proc.stdout)
            return outputs

        out_a = pipeline(tmp_path / "a")
        out_b = pipeline(tmp_path / "b")

        def artifact_bytes(root):
            blobs = {}
            for path in sorted(root.rglob("*")):
                if path.is_file():
                    blobs[str(path.relative_to(root))] = path.read_bytes()
            return blobs

        assert artifact_bytes(tmp_path / "a") == artifact_bytes(tmp_path / "b")

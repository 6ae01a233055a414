import json

import numpy as np
import pytest

from pillardet.cli import main, read_boxes, write_boxes
from pillardet.geometry import Box3D
from pillardet.head import read_detections, save_head_output
from pillardet.losses import render_gaussian_targets
from pillardet.pillars import assign_pillars
from pillardet.pipeline import head_output_from_targets
from pillardet.pointcloud import PointCloud, crop_to_range, load_cloud, save_cloud
from pillardet.profiles import DESK


@pytest.fixture
def scene(tmp_path):
    out = tmp_path / "scene.bin"
    assert main(["generate", "--profile", "desk", "--seed", "3", "--objects", "3",
                 "--points-per-object", "50", "--background", "200", "--out", str(out)]) == 0
    return out


@pytest.fixture
def train_ckpt(tmp_path):
    p = tmp_path / "ckpt.json"
    assert main(["init", "--profile", "desk", "--seed", "1", "--out", str(p)]) == 0
    return p


class TestGenerate:
    def test_writes_cloud_and_boxes(self, scene):
        cloud = load_cloud(scene)
        assert len(cloud) == 3 * 50 + 200
        boxes = read_boxes(str(scene) + ".boxes.csv")
        assert len(boxes) == 3

    def test_deterministic(self, tmp_path):
        a, b = tmp_path / "a.bin", tmp_path / "b.bin"
        for out in (a, b):
            main(["generate", "--profile", "desk", "--seed", "9", "--out", str(out)])
        assert a.read_bytes() == b.read_bytes()


class TestPillarize:
    def test_empty_cloud_ok(self, tmp_path, capsys):
        p = tmp_path / "empty.bin"
        save_cloud(PointCloud(np.zeros((0, 5))), p)
        assert main(["pillarize", "--profile", "desk", "--cloud", str(p)]) == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary["pillars"] == 0

    def test_count_matches_brute_force(self, scene, tmp_path, capsys):
        out = tmp_path / "summary.json"
        assert main(["pillarize", "--profile", "desk", "--cloud", str(scene), "--out", str(out)]) == 0
        summary = json.loads(out.read_text())
        cloud = load_cloud(scene)
        groups = set()
        g = DESK.grid
        for row in cloud.data:
            ix = min(int(np.floor((row[0] - g.range.x_min) / g.pillar_x)), g.nx - 1)
            iy = min(int(np.floor((row[1] - g.range.y_min) / g.pillar_y)), g.ny - 1)
            groups.add((iy, ix))
        assert summary["pillars"] == len(groups)
        assert summary["points"] == len(cloud)

    def test_out_of_range_point_reports_index(self, tmp_path, capsys):
        data = np.zeros((2, 5))
        data[1, 0] = 100.0
        p = tmp_path / "far.bin"
        save_cloud(PointCloud(data), p)
        rc = main(["pillarize", "--profile", "desk", "--cloud", str(p)])
        assert rc == 1
        assert "point 1" in capsys.readouterr().err


class TestEncode:
    def test_writes_feature_rows(self, scene, tmp_path):
        out = tmp_path / "feats.csv"
        assert main(["encode", "--profile", "desk", "--cloud", str(scene),
                     "--format", "csv", "--out", str(out)]) == 0
        lines = out.read_text().strip().splitlines()
        cloud = crop_to_range(load_cloud(scene), DESK.grid.range)
        assert len(lines) - 1 == len(assign_pillars(cloud, DESK.grid))
        assert lines[0] == "ix,iy,count,feature_l2,feature_max"


class TestFuse:
    def test_fuse_reports_small_discrepancy(self, train_ckpt, tmp_path, capsys):
        out = tmp_path / "fused.json"
        assert main(["fuse", str(train_ckpt), str(out), "--probes", "4"]) == 0
        report = json.loads(capsys.readouterr().out.strip().splitlines()[0])
        assert report["max_relative_discrepancy"] < 1e-4
        from pillardet.checkpoint import load_checkpoint

        _, _, mode = load_checkpoint(out)
        assert mode == "fused"

    def test_identity_checkpoint_fuses_with_zero_discrepancy(self, tmp_path, capsys):
        ckpt = tmp_path / "identity.json"
        assert main(["init", "--profile", "desk", "--mode", "identity", "--out", str(ckpt)]) == 0
        capsys.readouterr()
        assert main(["fuse", str(ckpt), str(tmp_path / "fused.json")]) == 0
        report = json.loads(capsys.readouterr().out.strip().splitlines()[0])
        assert report["max_relative_discrepancy"] == 0.0

    def test_corrupted_manifest_exit_one(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{oops")
        assert main(["fuse", str(bad), str(tmp_path / "out.json")]) == 1

    def test_fused_input_rejected(self, train_ckpt, tmp_path):
        fused = tmp_path / "fused.json"
        main(["fuse", str(train_ckpt), str(fused)])
        assert main(["fuse", str(fused), str(tmp_path / "again.json")]) == 1


class TestFlops:
    def test_equal_deltas(self, tmp_path):
        out = tmp_path / "table.csv"
        assert main(["flops", "--profile", "waymo", "--format", "csv", "--out", str(out),
                     "--ratios", "2,2,2,2", "--ratios", "4,2,2,2", "--ratios", "2,4,2,2"]) == 0
        rows = out.read_text().strip().splitlines()[1:]
        total = {r.split(",")[0]: float(r.split(",")[2]) for r in rows}
        d1 = total["4-2-2-2"] - total["2-2-2-2"]
        d2 = total["2-4-2-2"] - total["2-2-2-2"]
        assert d1 == pytest.approx(d2, abs=1e-9)
        assert d1 > 0

    def test_sixteen_block_equality_line(self, capsys):
        assert main(["flops", "--profile", "waymo",
                     "--ratios", "6,6,3,1", "--ratios", "3,4,6,3"]) == 0
        assert "equal-16-block totals: True" in capsys.readouterr().out

    def test_transitions_only_floor(self, tmp_path):
        out = tmp_path / "floor.csv"
        assert main(["flops", "--format", "csv", "--out", str(out), "--ratios", "0,0,0,0"]) == 0
        total = float(out.read_text().strip().splitlines()[1].split(",")[2])
        assert total > 0.0


class TestDetect:
    def test_empty_cloud(self, tmp_path, train_ckpt):
        p = tmp_path / "empty.bin"
        save_cloud(PointCloud(np.zeros((0, 5))), p)
        out = tmp_path / "dets.csv"
        assert main(["detect", "--profile", "desk", "--cloud", str(p),
                     "--checkpoint", str(train_ckpt), "--out", str(out)]) == 0
        assert read_detections(out) == []

    def test_injected_head_fixture(self, scene, train_ckpt, tmp_path):
        boxes = read_boxes(str(scene) + ".boxes.csv")
        targets = render_gaussian_targets(boxes, DESK.grid, DESK.out_stride, DESK.n_classes)
        fixture = tmp_path / "head.npz"
        save_head_output(head_output_from_targets(targets), fixture)
        out = tmp_path / "dets.csv"
        assert main(["detect", "--profile", "desk", "--cloud", str(scene),
                     "--checkpoint", str(train_ckpt), "--inject-head", str(fixture),
                     "--out", str(out)]) == 0
        dets = read_detections(out)
        assert len(dets) == len(boxes)
        cell = DESK.out_stride * DESK.grid.pillar_x
        for b in boxes:
            assert any(
                abs(d.box.cx - b.cx) <= cell / 2 and abs(d.box.cy - b.cy) <= cell / 2 for d in dets
            )

    def test_bitwise_deterministic_output(self, scene, train_ckpt, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        for out in (a, b):
            assert main(["detect", "--profile", "desk", "--cloud", str(scene),
                         "--checkpoint", str(train_ckpt), "--out", str(out)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_profile_mismatch_rejected(self, scene, train_ckpt, tmp_path):
        rc = main(["detect", "--profile", "waymo", "--cloud", str(scene),
                   "--checkpoint", str(train_ckpt), "--out", str(tmp_path / "x.csv")])
        assert rc == 1


class TestBench:
    def test_schema(self, tmp_path):
        out = tmp_path / "bench.csv"
        assert main(["bench", "--profile", "desk", "--sizes", "200", "--repeats", "1",
                     "--format", "csv", "--out", str(out)]) == 0
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "points,stage,p50,p90,mean"
        stages = [ln.split(",")[1] for ln in lines[1:]]
        assert stages == ["encode", "backbone", "head", "post"]


class TestTrainStep:
    def test_loss_breakdown(self, scene, tmp_path, capsys):
        out = tmp_path / "losses.json"
        assert main(["train-step", "--profile", "desk", "--cloud", str(scene),
                     "--boxes", str(scene) + ".boxes.csv", "--seed", "2", "--out", str(out)]) == 0
        breakdown = json.loads(out.read_text())
        for key in ("cls", "iou_branch", "diou", "reg", "total", "weights"):
            assert key in breakdown
        assert breakdown["total"] >= 0.0
        assert breakdown["weights"] == [1.0, 1.0, 0.25]


class TestBoxRecords:
    def test_roundtrip(self, tmp_path):
        boxes = [Box3D(1.0, 2.0, 0.3, 2.0, 1.0, 1.5, 0.4, 2)]
        p = tmp_path / "boxes.csv"
        write_boxes(boxes, p)
        assert read_boxes(p) == boxes

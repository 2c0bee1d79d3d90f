import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from planeseg.cli import main
from planeseg.dataset_io import (
    Annotation,
    DetectionFile,
    load_annotation,
    read_detections,
    read_tensor,
    save_annotation,
    write_detections,
    write_tensor,
)
from planeseg.nms import Detection

FIXTURES = Path(__file__).parent / "fixtures"
GOLDEN = FIXTURES / "golden"


def run(*args):
    return main([str(a) for a in args])


class TestAnnotate:
    def test_box_room_golden(self, tmp_path, capsys):
        assert run("annotate", GOLDEN / "depth", "--intrinsics", GOLDEN / "intrinsics.json",
                   "--out", tmp_path) == 0
        assert "3 plane instances" in capsys.readouterr().out
        ann = load_annotation(tmp_path / "room")
        assert len(ann.instances) == 3
        for ext in (".png", ".json"):
            assert (tmp_path / f"room{ext}").read_bytes() == (GOLDEN / "annotation" / f"room{ext}").read_bytes()

    def test_empty_directory(self, tmp_path, capsys, caplog):
        (tmp_path / "in").mkdir()
        assert run("annotate", tmp_path / "in", "--intrinsics", GOLDEN / "intrinsics.json",
                   "--out", tmp_path / "out") == 0
        assert "annotated 0 frames" in capsys.readouterr().out
        assert any("no depth frames" in r.message for r in caplog.records)

    def test_bad_intrinsics_json(self, tmp_path):
        (tmp_path / "i.json").write_text("{not json")
        assert run("annotate", GOLDEN / "depth", "--intrinsics", tmp_path / "i.json",
                   "--out", tmp_path / "out") == 64

    def test_invalid_override(self, tmp_path):
        assert run("annotate", GOLDEN / "depth", "--intrinsics", GOLDEN / "intrinsics.json",
                   "--out", tmp_path, "--planarity-ratio", "1.5") == 64

    def test_unknown_flag(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            run("annotate", GOLDEN / "depth", "--bogus")
        assert exc.value.code == 64

    def test_unreadable_frame_manifest(self, tmp_path):
        depth_dir = tmp_path / "in"
        depth_dir.mkdir()
        shutil.copy(GOLDEN / "depth" / "room.png", depth_dir / "a.png")
        (depth_dir / "b.png").write_bytes(b"broken")
        code = run("annotate", depth_dir, "--intrinsics", GOLDEN / "intrinsics.json", "--out", tmp_path / "out")
        assert code == 2
        manifest = json.loads((tmp_path / "out" / "errors.json").read_text())
        assert [m["frame"] for m in manifest] == ["b.png"]
        assert (tmp_path / "out" / "a.png").exists()

    def test_config_file_and_flag_precedence(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"ndt": {"min_inlier_cells": 100000}}))
        out1 = tmp_path / "o1"
        assert run("annotate", GOLDEN / "depth", "--intrinsics", GOLDEN / "intrinsics.json",
                   "--out", out1, "--config", cfg) == 0
        assert len(load_annotation(out1 / "room").instances) == 0
        out2 = tmp_path / "o2"
        assert run("annotate", GOLDEN / "depth", "--intrinsics", GOLDEN / "intrinsics.json",
                   "--out", out2, "--config", cfg, "--min-inlier-cells", "6") == 0
        assert len(load_annotation(out2 / "room").instances) == 3

    def test_unknown_config_key(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"ndt": {"voxel": 0.1}}))
        assert run("annotate", GOLDEN / "depth", "--intrinsics", GOLDEN / "intrinsics.json",
                   "--out", tmp_path, "--config", cfg) == 64

    def test_parallel_matches_serial(self, tmp_path):
        depth_dir = tmp_path / "in"
        depth_dir.mkdir()
        for name in ("a", "b"):
            shutil.copy(GOLDEN / "depth" / "room.png", depth_dir / f"{name}.png")
        assert run("annotate", depth_dir, "--intrinsics", GOLDEN / "intrinsics.json",
                   "--out", tmp_path / "s", "--jobs", 1) == 0
        assert run("annotate", depth_dir, "--intrinsics", GOLDEN / "intrinsics.json",
                   "--out", tmp_path / "p", "--jobs", 2) == 0
        for f in sorted((tmp_path / "s").iterdir()):
            assert f.read_bytes() == (tmp_path / "p" / f.name).read_bytes()


class TestEval:
    def test_identity(self, tmp_path, capsys):
        assert run("eval", GOLDEN / "annotation", GOLDEN / "annotation", "--out", tmp_path / "r.json") == 0
        r = json.loads((tmp_path / "r.json").read_text())
        assert (r["ap_box_50"], r["ap_mask_50"], r["voi"], r["ri"], r["sc"]) == (1.0, 1.0, 0.0, 1.0, 1.0)
        assert "AP^b_50" in capsys.readouterr().out

    def test_relabeled_prediction(self, tmp_path):
        ann = load_annotation(GOLDEN / "annotation" / "room")
        relabeled = np.where(ann.labels > 0, 4 - ann.labels.astype(int), 0)
        (tmp_path / "pred").mkdir()
        save_annotation(Annotation.from_labels(relabeled), tmp_path / "pred" / "room")
        assert run("eval", tmp_path / "pred", GOLDEN / "annotation", "--out", tmp_path / "r.json") == 0
        assert json.loads((tmp_path / "r.json").read_text())["voi"] == 0.0

    def test_missed_instance_golden(self, tmp_path):
        assert run("eval", FIXTURES / "eval" / "pred", FIXTURES / "eval" / "gt",
                   "--out", tmp_path / "r.json", "--text", tmp_path / "r.txt") == 0
        got = json.loads((tmp_path / "r.json").read_text())
        expected = json.loads((FIXTURES / "eval" / "expected.json").read_text())
        for key, value in expected.items():
            assert got[key] == pytest.approx(value, abs=1e-12), key
        assert (tmp_path / "r.txt").read_text().splitlines()[0].split()[0] == "AP^b_50"

    def test_missing_directory(self, tmp_path):
        assert run("eval", tmp_path / "nope", GOLDEN / "annotation") == 2


class TestOtherCommands:
    def test_stats(self, tmp_path, capsys):
        assert run("stats", GOLDEN / "annotation", "--out", tmp_path / "s.json") == 0
        s = json.loads((tmp_path / "s.json").read_text())
        assert s["frames"] == 1 and s["large_obj_pct"] == 100.0

    def test_nms_filter(self, tmp_path):
        dets = [Detection(np.array([0, 0, 10, 10.0]), 0.9, 0, np.array([1.0, 0])),
                Detection(np.array([0, 0, 10, 16.0]), 0.8, 0, np.array([1.0, 0])),
                Detection(np.array([0, 0, 10, 16.0]), 0.7, 1, np.array([0.0, 1]))]
        write_detections(tmp_path / "in.json", DetectionFile(dets, image_size=(550, 550)))
        assert run("nms-filter", tmp_path / "in.json", tmp_path / "out.json") == 0
        out = read_detections(tmp_path / "out.json")
        assert [d.score for d in out.detections] == [0.9, 0.7]
        assert out.image_size == (550, 550)
        assert run("nms-filter", tmp_path / "in.json", tmp_path / "o2.json", "--sim-thresh", "1.0") == 0
        assert len(read_detections(tmp_path / "o2.json").detections) == 3

    def test_nms_filter_bad_thresholds(self, tmp_path):
        write_detections(tmp_path / "in.json", DetectionFile([]))
        assert run("nms-filter", tmp_path / "in.json", tmp_path / "o.json", "--n1", "0.9", "--n2", "0.5") == 64

    def test_assemble(self, tmp_path):
        rng = np.random.default_rng(0)
        protos = rng.normal(size=(6, 8, 3)).astype(np.float32)
        coeffs = rng.normal(size=(2, 3))
        dets = [Detection(np.array([0, 0, 4, 3.0]), 0.9, 0, coeffs[0]),
                Detection(np.array([2, 2, 8, 6.0]), 0.8, 0, coeffs[1])]
        write_tensor(tmp_path / "p.tensor", protos)
        write_detections(tmp_path / "d.json", DetectionFile(dets))
        assert run("assemble", "--prototypes", tmp_path / "p.tensor", "--detections", tmp_path / "d.json",
                   "--out", tmp_path / "m.tensor", "--crop") == 0
        masks = read_tensor(tmp_path / "m.tensor")
        assert masks.shape == (2, 6, 8)
        expected = 1 / (1 + np.exp(-np.einsum("hwk,k->hw", protos.astype(float), coeffs[0])))
        np.testing.assert_allclose(masks[0, :3, :4], expected[:3, :4], rtol=1e-6)
        assert not masks[0, 3:].any() and not masks[0, :, 4:].any()

    def test_assemble_k_mismatch(self, tmp_path):
        write_tensor(tmp_path / "p.tensor", np.zeros((4, 4, 3)))
        write_detections(tmp_path / "d.json",
                         DetectionFile([Detection(np.array([0, 0, 1, 1.0]), 0.9, 0, np.ones(2))]))
        assert run("assemble", "--prototypes", tmp_path / "p.tensor", "--detections", tmp_path / "d.json",
                   "--out", tmp_path / "m.tensor") == 64

    def test_export_ply(self, tmp_path):
        assert run("export-ply", "--depth", GOLDEN / "depth" / "room.png", "--intrinsics",
                   GOLDEN / "intrinsics.json", "--annotation", GOLDEN / "annotation" / "room",
                   "--out", tmp_path / "a.ply") == 0
        lines = (tmp_path / "a.ply").read_text().splitlines()
        body = lines[lines.index("end_header") + 1:]
        labels = {int(line.rsplit(" ", 1)[1]) for line in body[::97]}
        assert labels <= {0, 1, 2, 3} and {1, 2, 3} <= labels

    def test_bench(self, tmp_path):
        assert run("bench-nms", "--n", 20, "--k", 8, "--trials", 5, "--seed", 3, "--out", tmp_path / "a.json") == 0
        assert run("bench-nms", "--n", 20, "--k", 8, "--trials", 5, "--seed", 3, "--out", tmp_path / "b.json") == 0
        a = json.loads((tmp_path / "a.json").read_text())
        b = json.loads((tmp_path / "b.json").read_text())
        assert "overhead_ms" in a
        assert (a["survivors_fast"], a["survivors_ff"]) == (b["survivors_fast"], b["survivors_ff"])

    def test_bench_bad_size(self):
        assert run("bench-nms", "--n", 0) == 64

    def test_no_command(self):
        with pytest.raises(SystemExit) as exc:
            run()
        assert exc.value.code == 64

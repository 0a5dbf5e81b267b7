import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from wafertex import formats, metrics
from wafertex.formats import rle_encode

REPO = Path(__file__).resolve().parent.parent


def run_cli(*args, expect=0):
    proc = subprocess.run([sys.executable, "-m", "wafertex", *map(str, args)],
                          capture_output=True, text=True)
    assert proc.returncode == expect, f"stderr: {proc.stderr}\nstdout: {proc.stdout}"
    return proc


def write_scene_cfg(path, seed=5, extra=""):
    path.write_text(
        "height=64\nwidth=64\n"
        f"seed={seed}\n"
        "noise_sigma=0.01\n"
        "grating1=fx:6,fy:0,amplitude:1.0\n"
        "anomaly1=kind:disk,cx:30.0,cy:28.0,radius:5,contrast:0.5\n"
        + extra
    )


def read_all_bytes(directory: Path) -> dict:
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir())}


class TestGen:
    def test_outputs_and_determinism(self, tmp_path):
        cfg = tmp_path / "scene.cfg"
        write_scene_cfg(cfg)
        out1, out2 = tmp_path / "a", tmp_path / "b"
        run_cli("gen", "--config", cfg, "--out-dir", out1)
        run_cli("gen", "--config", cfg, "--out-dir", out2)
        files1 = read_all_bytes(out1)
        assert set(files1) == {"image.pfm", "preview.pgm", "preview_norm.txt",
                               "mask.pgm", "truth.txt", "scene.txt"}
        assert files1 == read_all_bytes(out2)

    def test_truth_parses(self, tmp_path):
        cfg = tmp_path / "scene.cfg"
        write_scene_cfg(cfg)
        out = tmp_path / "o"
        run_cli("gen", "--config", cfg, "--out-dir", out)
        records = metrics.parse_detection_records((out / "truth.txt").read_text())
        assert len(records) == 1
        assert records[0][0] == "scene"

    def test_unknown_key_exit_1(self, tmp_path):
        cfg = tmp_path / "scene.cfg"
        cfg.write_text("height=64\nwidth=64\nbogus=1\n")
        proc = run_cli("gen", "--config", cfg, "--out-dir", tmp_path / "x", expect=1)
        assert "bogus" in proc.stderr

    def test_missing_config_exit_2(self, tmp_path):
        run_cli("gen", "--config", tmp_path / "nope.cfg", "--out-dir", tmp_path, expect=2)


class TestEnhance:
    @pytest.fixture()
    def scene_dir(self, tmp_path):
        cfg = tmp_path / "scene.cfg"
        write_scene_cfg(cfg)
        out = tmp_path / "scene"
        run_cli("gen", "--config", cfg, "--out-dir", out)
        return out

    def test_alpha_zero_byte_identity(self, scene_dir, tmp_path):
        cfg = tmp_path / "e.cfg"
        cfg.write_text("alpha=0.0\n")
        out = tmp_path / "enh"
        run_cli("enhance", "--input", scene_dir / "image.pfm", "--out-dir", out,
                "--config", cfg)
        assert (out / "enhanced.pfm").read_bytes() == (scene_dir / "image.pfm").read_bytes()

    def test_emits_fields_with_sidecars(self, scene_dir, tmp_path):
        cfg = tmp_path / "e.cfg"
        cfg.write_text("alpha=1.0\ntop_k=4\nemit_disturbance=1\nemit_attention=1\n")
        out = tmp_path / "enh"
        run_cli("enhance", "--input", scene_dir / "image.pfm", "--out-dir", out,
                "--config", cfg)
        names = {p.name for p in out.iterdir()}
        assert {"enhanced.pfm", "disturbance.pfm", "disturbance.pgm",
                "disturbance_norm.txt", "attention.pfm", "attention.pgm",
                "attention_norm.txt"} <= names
        sidecar = (out / "disturbance_norm.txt").read_text()
        assert sidecar.startswith("min=") and "max=" in sidecar

    def test_thread_count_invariant(self, scene_dir, tmp_path):
        cfg = tmp_path / "e.cfg"
        cfg.write_text("alpha=0.8\ntop_k=4\n")
        out1, out4 = tmp_path / "t1", tmp_path / "t4"
        run_cli("enhance", "--input", scene_dir / "image.pfm", "--out-dir", out1,
                "--config", cfg, "--threads", 1)
        run_cli("enhance", "--input", scene_dir / "image.pfm", "--out-dir", out4,
                "--config", cfg, "--threads", 4)
        assert read_all_bytes(out1) == read_all_bytes(out4)

    def test_malformed_input_exit_2(self, tmp_path):
        bad = tmp_path / "bad.pfm"
        bad.write_bytes(b"Pf\n4 4\n-1.0\n\x00\x00")
        run_cli("enhance", "--input", bad, "--out-dir", tmp_path / "o", expect=2)


class TestMuseFuse:
    def test_muse_forward_and_weights_round_trip(self, tmp_path):
        from wafertex.tensor import Tensor
        x = Tensor.random_uniform(1, 16, 16, seed=3)
        formats.write_image(tmp_path / "x.pfm", x, "pfm")
        cfg = tmp_path / "m.cfg"
        cfg.write_text("out_channels=4\nseed=2\n")
        run_cli("muse", "--input", tmp_path / "x.pfm", "--out", tmp_path / "y.wtb",
                "--config", cfg, "--save-weights", tmp_path / "w.wtb")
        y = formats.load_tensor(tmp_path / "y.wtb")
        assert y.shape == (4, 16, 16)
        # rerun with the saved weights: identical output
        run_cli("muse", "--input", tmp_path / "x.pfm", "--out", tmp_path / "y2.wtb",
                "--weights", tmp_path / "w.wtb")
        assert (tmp_path / "y.wtb").read_bytes() == (tmp_path / "y2.wtb").read_bytes()

    def test_fuse_add_shape(self, tmp_path):
        from wafertex.tensor import Tensor
        c2 = Tensor.random_uniform(1, 8, 8, seed=1)
        p3 = Tensor.random_uniform(2, 16, 16, seed=2)
        formats.write_image(tmp_path / "c2.pfm", c2, "pfm")
        formats.save_tensor(tmp_path / "p3.wtb", p3)
        cfg = tmp_path / "f.cfg"
        cfg.write_text("upsample_factor=2\ncombine=add\n")
        run_cli("fuse", "--c2", tmp_path / "c2.pfm", "--p3", tmp_path / "p3.wtb",
                "--out", tmp_path / "fused.wtb", "--config", cfg)
        fused = formats.load_tensor(tmp_path / "fused.wtb")
        assert fused.shape == (2, 16, 16)

    def test_fuse_shape_mismatch_exit_1(self, tmp_path):
        from wafertex.tensor import Tensor
        formats.save_tensor(tmp_path / "c2.wtb", Tensor.random_uniform(1, 8, 8, seed=1))
        formats.save_tensor(tmp_path / "p3.wtb", Tensor.random_uniform(2, 15, 16, seed=2))
        run_cli("fuse", "--c2", tmp_path / "c2.wtb", "--p3", tmp_path / "p3.wtb",
                "--out", tmp_path / "f.wtb", expect=1)


def five_sixths_records(tmp_path):
    h = w = 16
    m1 = np.zeros((h, w), dtype=bool)
    m1[1:5, 1:5] = True
    m2 = np.zeros((h, w), dtype=bool)
    m2[8:12, 8:12] = True
    m_fp = np.zeros((h, w), dtype=bool)
    m_fp[13:15, 0:2] = True
    gts = [("img0", metrics.Detection(0, 1.0, (1, 1, 5, 5), rle_encode(m1))),
           ("img0", metrics.Detection(0, 1.0, (8, 8, 12, 12), rle_encode(m2)))]
    preds = [("img0", metrics.Detection(0, 0.9, (1, 1, 5, 5), rle_encode(m1))),
             ("img0", metrics.Detection(0, 0.8, (13, 0, 15, 2), rle_encode(m_fp))),
             ("img0", metrics.Detection(0, 0.7, (8, 8, 12, 12), rle_encode(m2)))]
    truth = tmp_path / "truth.txt"
    pred = tmp_path / "pred.txt"
    truth.write_text(metrics.render_detection_records(gts))
    pred.write_text(metrics.render_detection_records(preds))
    return pred, truth


class TestEval:
    def test_five_sixths_fixture(self, tmp_path):
        pred, truth = five_sixths_records(tmp_path)
        cfg = tmp_path / "e.cfg"
        cfg.write_text("num_classes=1\n")
        report_path = tmp_path / "report.txt"
        run_cli("eval-seg", "--pred", pred, "--truth", truth, "--out", report_path,
                "--dump", tmp_path / "dump.txt", "--config", cfg)
        text = report_path.read_text()
        assert "0.833333" in text
        dump = (tmp_path / "dump.txt").read_text()
        assert "map50 0.833333" in dump

    def test_eval_det_runs_without_masks(self, tmp_path):
        gts = [("a", metrics.Detection(0, 1.0, (0, 0, 4, 4)))]
        preds = [("a", metrics.Detection(0, 0.9, (0, 0, 4, 4)))]
        (tmp_path / "t.txt").write_text(metrics.render_detection_records(gts))
        (tmp_path / "p.txt").write_text(metrics.render_detection_records(preds))
        cfg = tmp_path / "c.cfg"
        cfg.write_text("num_classes=1\n")
        run_cli("eval-det", "--pred", tmp_path / "p.txt", "--truth", tmp_path / "t.txt",
                "--out", tmp_path / "r.txt", "--config", cfg)
        assert "map50" in (tmp_path / "r.txt").read_text()

    def test_eval_seg_without_masks_exit_1(self, tmp_path):
        gts = [("a", metrics.Detection(0, 1.0, (0, 0, 4, 4)))]
        (tmp_path / "t.txt").write_text(metrics.render_detection_records(gts))
        (tmp_path / "p.txt").write_text(metrics.render_detection_records(gts))
        cfg = tmp_path / "c.cfg"
        cfg.write_text("num_classes=1\n")
        run_cli("eval-seg", "--pred", tmp_path / "p.txt", "--truth", tmp_path / "t.txt",
                "--out", tmp_path / "r.txt", "--config", cfg, expect=1)

    def test_nms_config(self, tmp_path):
        dets = [("a", metrics.Detection(0, 0.9, (0, 0, 4, 4))),
                ("a", metrics.Detection(0, 0.8, (0, 0, 4, 4)))]
        gts = [("a", metrics.Detection(0, 1.0, (0, 0, 4, 4)))]
        (tmp_path / "p.txt").write_text(metrics.render_detection_records(dets))
        (tmp_path / "t.txt").write_text(metrics.render_detection_records(gts))
        cfg = tmp_path / "c.cfg"
        cfg.write_text("num_classes=1\nnms=1\nnms_iou=0.7\nmax_det=300\n")
        run_cli("eval-det", "--pred", tmp_path / "p.txt", "--truth", tmp_path / "t.txt",
                "--out", tmp_path / "r.txt", "--config", cfg)
        report = {k.strip(): v.strip() for k, v in
                  (line.split("=", 1) for line in
                   (tmp_path / "r.txt").read_text().splitlines())}
        # the duplicate box is suppressed by NMS: one TP, zero FP
        assert report["tp"] == "1" and report["fp"] == "0"


class TestGradcheckCount:
    def test_gradcheck_passes(self, tmp_path):
        out = tmp_path / "grad.txt"
        cfg = tmp_path / "g.cfg"
        cfg.write_text("seeds=3\nsamples=4\n")
        run_cli("gradcheck", "--out", out, "--config", cfg)
        text = out.read_text()
        assert "FAIL" not in text
        assert "muse_forward" in text

    def test_count_fixture(self, tmp_path):
        out = tmp_path / "count.txt"
        run_cli("count", "--layers", REPO / "configs" / "model_layers.cfg", "--out", out)
        text = out.read_text()
        assert "params=11787718" in text

    def test_count_unknown_kind_exit_1(self, tmp_path):
        layers = tmp_path / "l.cfg"
        layers.write_text("flux_capacitor in=3\n")
        run_cli("count", "--layers", layers, "--out", tmp_path / "o.txt", expect=1)

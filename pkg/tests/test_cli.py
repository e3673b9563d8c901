import csv
import json

import numpy as np
import pytest
from PIL import Image

from tracewarp import autodiff as ad
from tracewarp import cli
from tracewarp import data as D
from tracewarp import deformation as dfm
from tracewarp import metrics as E
from tracewarp import model as M

SYNTH = "[synth]\nimage_size = 32\nn_pairs = 4\nseed = 3\n"
TRAIN = "[train]\nimage_size = 32\nwidth_factor = 0.0625\nepochs = 1\nbatch_size = 2\n"


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "cfg.toml").write_text(SYNTH + TRAIN)
    assert cli.main(["synth", "--config", str(root / "cfg.toml"), "--out", str(root / "data")]) == 0
    assert cli.main(["train", "--config", str(root / "cfg.toml"), "--data", str(root / "data"),
                     "--out", str(root / "run")]) == 0
    return root


def zero_velocity_checkpoint(path, size=32):
    params = M.init_params(M.ModelConfig(image_size=size, width_factor=1 / 16), 0)
    M.zero_velocity_head(params)
    M.save_model(path, params)
    return path


class TestSynth:
    def test_outputs_and_checksum_stable(self, workdir, tmp_path, capsys):
        manifest = json.loads((workdir / "data" / "manifest.json").read_text())
        assert len(manifest["pairs"]) == 4
        assert len(list((workdir / "data" / "pairs").glob("*_src.png"))) == 4
        assert cli.main(["synth", "--config", str(workdir / "cfg.toml"), "--out", str(tmp_path / "again")]) == 0
        assert "pairs 4" in capsys.readouterr().out
        again = json.loads((tmp_path / "again" / "manifest.json").read_text())
        assert again["checksum"] == manifest["checksum"]
        run = json.loads((workdir / "data" / "run.json").read_text())
        assert run["config"]["synth"]["seed"] == 3

    def test_zero_amplitude_identity(self, tmp_path):
        (tmp_path / "c.toml").write_text("[synth]\nn_pairs = 2\ndeform_amplitude = 0.0\nintensity_shift = 0.0\n")
        assert cli.main(["synth", "--config", str(tmp_path / "c.toml"), "--out", str(tmp_path / "d")]) == 0
        for p in D.load_dataset(tmp_path / "d")[0]:
            np.testing.assert_array_equal(p.source, p.reference)

    def test_bad_size_exit_2(self, tmp_path, capsys):
        (tmp_path / "c.toml").write_text("[synth]\nimage_size = 40\n")
        assert cli.main(["synth", "--config", str(tmp_path / "c.toml"), "--out", str(tmp_path / "d")]) == 2
        assert "multiple of 32" in capsys.readouterr().err

    def test_unknown_flag_exit_2(self, tmp_path):
        with pytest.raises(SystemExit) as info:
            cli.main(["synth", "--out", str(tmp_path), "--bogus"])
        assert info.value.code == 2


class TestTrain:
    def test_outputs(self, workdir):
        run = workdir / "run"
        for name in ("final.ttck", "train_log.csv", "timing.csv", "run.json"):
            assert (run / name).is_file(), name
        header = (run / "train_log.csv").read_text().splitlines()[0]
        assert header.split(",")[:3] == ["epoch", "loss_g", "loss_d"]
        cfg = json.loads((run / "run.json").read_text())["config"]["train"]
        assert cfg["epochs"] == 1 and cfg["seed"] == 0

    def test_missing_data_exit_2(self, workdir, tmp_path):
        assert cli.main(["train", "--config", str(workdir / "cfg.toml"), "--data", str(tmp_path / "none"),
                         "--out", str(tmp_path / "o")]) == 2

    def test_bad_config_key_exit_2(self, workdir, tmp_path):
        (tmp_path / "c.toml").write_text("[train]\nlearning_rate = 0.1\n")
        assert cli.main(["train", "--config", str(tmp_path / "c.toml"), "--data", str(workdir / "data"),
                         "--out", str(tmp_path / "o")]) == 2

    def test_resume_matches_fresh(self, workdir, tmp_path):
        cfg = str(workdir / "cfg.toml")
        data = str(workdir / "data")
        assert cli.main(["train", "--config", cfg, "--data", data, "--out", str(tmp_path / "a"), "--epochs", "2"]) == 0
        assert cli.main(["train", "--config", cfg, "--data", data, "--out", str(tmp_path / "b"), "--epochs", "2",
                         "--resume", str(workdir / "run" / "final.ttck")]) == 0
        assert (tmp_path / "a" / "train_log.csv").read_bytes() == (tmp_path / "b" / "train_log.csv").read_bytes()
        assert (tmp_path / "a" / "final.ttck").read_bytes() == (tmp_path / "b" / "final.ttck").read_bytes()


class TestInfer:
    def test_outputs_valid(self, workdir, tmp_path):
        src = workdir / "data" / "pairs" / "pair_0000_src.png"
        assert cli.main(["infer", "--ckpt", str(workdir / "run" / "final.ttck"), "--input", str(src),
                         "--out", str(tmp_path)]) == 0
        for name, mode in (("y_trans.png", "L"), ("y_warp.png", "L"), ("flow.png", "RGB"), ("overlay.png", "RGB")):
            with Image.open(tmp_path / name) as im:
                assert im.mode == mode and im.size == (32, 32)
        assert dfm.load_field(tmp_path / "field.twf").shape == (1, 2, 32, 32)
        assert (tmp_path / "run.json").is_file()

    def test_zero_velocity_warp_is_input(self, workdir, tmp_path):
        ckpt = zero_velocity_checkpoint(tmp_path / "z.ttck")
        src = workdir / "data" / "pairs" / "pair_0001_src.png"
        assert cli.main(["infer", "--ckpt", str(ckpt), "--input", str(src), "--out", str(tmp_path / "o")]) == 0
        np.testing.assert_array_equal(D.load_png(tmp_path / "o" / "y_warp.png"), D.load_png(src))
        assert not dfm.load_field(tmp_path / "o" / "field.twf").any()

    def test_corrupted_magic_exit_3(self, workdir, tmp_path):
        raw = bytearray((workdir / "run" / "final.ttck").read_bytes())
        raw[:4] = b"XXXX"
        (tmp_path / "bad.ttck").write_bytes(bytes(raw))
        src = workdir / "data" / "pairs" / "pair_0000_src.png"
        assert cli.main(["infer", "--ckpt", str(tmp_path / "bad.ttck"), "--input", str(src),
                         "--out", str(tmp_path / "o")]) == 3

    def test_size_mismatch_exit_3(self, tmp_path):
        ckpt = zero_velocity_checkpoint(tmp_path / "z.ttck")
        D.save_png(np.zeros((1, 64, 64)), tmp_path / "big.png")
        assert cli.main(["infer", "--ckpt", str(ckpt), "--input", str(tmp_path / "big.png"),
                         "--out", str(tmp_path / "o")]) == 3


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestEval:
    def test_standard_columns_and_summary(self, workdir, tmp_path):
        out = tmp_path / "std.csv"
        assert cli.main(["eval", "--ckpt", str(workdir / "run" / "final.ttck"), "--data", str(workdir / "data"),
                         "--out", str(out), "--split", "all"]) == 0
        rows = read_csv(out)
        assert rows[0] == ["id", "ssim", "mae", "psnr", "nmi"]
        body = [r for r in rows[1:] if r[0].startswith("pair_")]
        assert len(body) == 4
        mean = next(r for r in rows if r[0] == "mean")
        for j in range(1, 5):
            assert float(mean[j]) == pytest.approx(np.mean([float(r[j]) for r in body]), abs=1e-9)
        assert (tmp_path / "std.run.json").is_file()

    @pytest.mark.parametrize("protocol", ["correspondence", "traceability"])
    def test_other_protocols(self, workdir, tmp_path, protocol):
        out = tmp_path / f"{protocol}.csv"
        assert cli.main(["eval", "--ckpt", str(workdir / "run" / "final.ttck"), "--data", str(workdir / "data"),
                         "--out", str(out), "--protocol", protocol]) == 0
        assert read_csv(out)[0][1] in ("edge_dice", "mae")

    def test_identity_correspondence_all_one(self, tmp_path, monkeypatch):
        """Zero-velocity model whose translation reproduces its input exactly."""
        (tmp_path / "c.toml").write_text("[synth]\nimage_size = 32\nn_pairs = 4\n"
                                         "deform_amplitude = 0.0\nintensity_shift = 0.0\n")
        assert cli.main(["synth", "--config", str(tmp_path / "c.toml"), "--out", str(tmp_path / "d")]) == 0
        ckpt = zero_velocity_checkpoint(tmp_path / "z.ttck")
        real = E.model_predictor

        def identity_translation(params, steps=7, batch_size=8):
            predict = real(params, steps, batch_size)

            def run(xb):
                preds = predict(xb)
                for p, x in zip(preds, xb):
                    p.y_trans = x[0]
                return preds
            return run
        monkeypatch.setattr(E, "model_predictor", identity_translation)
        out = tmp_path / "corr.csv"
        assert cli.main(["eval", "--ckpt", str(ckpt), "--data", str(tmp_path / "d"), "--out", str(out),
                         "--protocol", "correspondence", "--split", "all"]) == 0
        rows = read_csv(out)
        col = rows[0].index("edge_dice")
        assert [float(r[col]) for r in rows[1:] if r[0].startswith("pair_")] == [1.0] * 4

    def test_missing_checkpoint_exit_3(self, workdir, tmp_path):
        assert cli.main(["eval", "--ckpt", str(tmp_path / "none.ttck"), "--data", str(workdir / "data"),
                         "--out", str(tmp_path / "x.csv")]) == 3

    def test_checksum_mismatch_exit_3(self, workdir, tmp_path):
        import shutil
        shutil.copytree(workdir / "data", tmp_path / "d")
        D.save_png(np.zeros((1, 32, 32)), tmp_path / "d" / "pairs" / "pair_0000_ref.png")
        assert cli.main(["eval", "--ckpt", str(workdir / "run" / "final.ttck"), "--data", str(tmp_path / "d"),
                         "--out", str(tmp_path / "x.csv")]) == 3


class TestGradcheck:
    def test_clean_build_passes(self, tmp_path, capsys):
        assert cli.main(["gradcheck", "--seed", "0", "--out", str(tmp_path)]) == 0
        table = capsys.readouterr().out
        assert "max_rel_err" in table and "FAIL" not in table
        assert "l_g_model" in (tmp_path / "gradcheck.txt").read_text()

    def test_corrupted_backward_is_named(self, monkeypatch, capsys):
        def bad_backward(self, g):
            return (g * 2.0 * (1 - self.out ** 2),)
        monkeypatch.setattr(ad.Tanh, "backward", bad_backward)
        assert cli.main(["gradcheck", "--seed", "0"]) == 4
        out = capsys.readouterr().out
        assert "FAILED:" in out and "tanh" in out.split("FAILED:")[1]

import os

import numpy as np
import pytest

from capslab.checkpoint import load_checkpoint
from capslab.cli import main
from capslab.data import load_image_set, read_idx_images
from capslab.reporting import read_csv, read_pgm


def run(argv):
    return main(argv)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """gen-data + a one-epoch training run shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    data_dir = root / "data"
    gen_cfg = root / "gen.cfg"
    gen_cfg.write_text(
        "train_count = 240\n"
        "test_count = 80\n"
        "seed = 5\n"
        "outputs = base,placed,affine,multimnist\n"
        "multimnist_count = 40\n")
    assert run(["gen-data", "--config", str(gen_cfg),
                "--out", str(data_dir)]) == 0

    train_cfg = root / "train.cfg"
    train_cfg.write_text(
        "input_hw = 28\n"
        "conv1_channels = 16\n"
        "primary_caps_channels = 4\n"
        "decoder_hidden = 64,128\n"
        "routing = dynamic\n"
        "routing_iterations = 2\n"
        "epochs = 1\n"
        "seed = 3\n"
        "batch_size = 32\n"
        f"train_images = {data_dir}/base-train-images.idx\n"
        f"train_labels = {data_dir}/base-train-labels.idx\n"
        f"test_images = {data_dir}/base-test-images.idx\n"
        f"test_labels = {data_dir}/base-test-labels.idx\n")
    run_dir = root / "run"
    assert run(["train", "--config", str(train_cfg),
                "--out", str(run_dir)]) == 0
    return {"root": root, "data": data_dir, "train_cfg": train_cfg,
            "run": run_dir,
            "ckpt": run_dir / "checkpoints" / "final.ckpt"}


class TestDispatch:
    def test_help_exits_zero(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["gen-data", "--help"])
        assert exc.value.code == 0
        assert "usage" in capsys.readouterr().out

    def test_unknown_flag_exits_two(self):
        with pytest.raises(SystemExit) as exc:
            main(["gen-data", "--bogus", "x", "--out", "/tmp/x"])
        assert exc.value.code == 2

    def test_unknown_subcommand_exits_two(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2

    def test_runtime_error_exits_one(self, tmp_path, capsys):
        rc = run(["train", "--set", "train_images=/nope.idx",
                  "--set", "train_labels=/nope.idx",
                  "--set", "test_images=/nope.idx",
                  "--set", "test_labels=/nope.idx",
                  "--out", str(tmp_path)])
        assert rc == 1
        assert capsys.readouterr().err.startswith("error:")

    def test_bad_config_key_exits_one(self, tmp_path, capsys):
        rc = run(["train", "--set", "no_such_key=1", "--out", str(tmp_path)])
        assert rc == 1
        assert "no_such_key" in capsys.readouterr().err


class TestGenData:
    def test_outputs_exist_and_parse(self, workspace):
        d = workspace["data"]
        base = load_image_set(d / "base-train-images.idx",
                              d / "base-train-labels.idx")
        assert len(base) == 240 and base.images.shape[1:] == (28, 28)
        placed = read_idx_images(d / "placed40-train-images.idx")
        assert placed.shape[1:] == (40, 40)
        affine = read_idx_images(d / "affine40-test-images.idx")
        assert affine.shape == (80, 40, 40)
        multi = load_image_set(d / "multimnist-images.idx",
                               d / "multimnist-labels.idx",
                               d / "multimnist-labels2.idx")
        assert multi.images.shape == (40, 36, 36)
        assert (multi.labels != multi.labels2).all()

    def test_figures_rendered(self, workspace):
        figs = os.listdir(workspace["data"] / "figures")
        assert any(f.startswith("samples_base-train") for f in figs)
        assert all(f.endswith(".png") for f in figs)

    def test_deterministic_regeneration(self, workspace, tmp_path):
        gen_cfg = workspace["root"] / "gen.cfg"
        out2 = tmp_path / "data2"
        assert run(["gen-data", "--config", str(gen_cfg),
                    "--out", str(out2)]) == 0
        a = (workspace["data"] / "base-train-images.idx").read_bytes()
        b = (out2 / "base-train-images.idx").read_bytes()
        assert a == b


class TestTrainEval:
    def test_train_outputs(self, workspace):
        run_dir = workspace["run"]
        header, rows = read_csv(run_dir / "metrics.csv")
        assert header == ["epoch", "split", "accuracy", "margin_loss",
                          "recon_loss", "target_agreement",
                          "nontarget_agreement", "wall_seconds"]
        assert len(rows) == 2  # one epoch, two splits
        assert (run_dir / "figures" / "training_curves.png").exists()
        assert workspace["ckpt"].exists()

    def test_set_override_wins(self, workspace, tmp_path):
        out = tmp_path / "run7"
        assert run(["train", "--config", str(workspace["train_cfg"]),
                    "--set", "seed=7", "--set", "epochs=0",
                    "--out", str(out)]) == 0
        ckpt = load_checkpoint(out / "checkpoints" / "final.ckpt")
        assert ckpt.config["seed"] == "7"

    def test_eval_reads_checkpoint_config(self, workspace, tmp_path):
        out = tmp_path / "eval"
        assert run(["eval", "--checkpoint", str(workspace["ckpt"]),
                    "--out", str(out)]) == 0
        header, rows = read_csv(out / "report.csv")
        assert header[0] == "split"
        assert {r[0] for r in rows} == {"train", "test"}
        for r in rows:
            assert 0.0 <= float(r[1]) <= 1.0

    def test_eval_on_different_test_set(self, workspace, tmp_path):
        d = workspace["data"]
        out = tmp_path / "eval2"
        assert run(["eval", "--checkpoint", str(workspace["ckpt"]),
                    "--set", "train_images=", "--set", "train_labels=",
                    "--set", f"test_images={d}/base-test-images.idx",
                    "--set", f"test_labels={d}/base-test-labels.idx",
                    "--out", str(out)]) == 0
        _, rows = read_csv(out / "report.csv")
        assert len(rows) == 1 and rows[0][0] == "test"


class TestGradcheckCli:
    def test_gradcheck_outputs(self, workspace, tmp_path):
        out = tmp_path / "gc"
        assert run(["gradcheck", "--checkpoint", str(workspace["ckpt"]),
                    "--capsules", "40", "--seed", "1",
                    "--out", str(out)]) == 0
        header, rows = read_csv(out / "capsules.csv")
        assert header == ["sample", "example", "capsule", "class", "cosine",
                          "magnitude_ratio"]
        assert len(rows) == 40
        for r in rows:
            assert -1.0 - 1e-9 <= float(r[4]) <= 1.0 + 1e-9
        assert (out / "figures" / "gradcheck.png").exists()

    def test_gradcheck_rejects_uniform_routing(self, workspace, tmp_path,
                                               capsys):
        out = tmp_path / "norun"
        assert run(["train", "--config", str(workspace["train_cfg"]),
                    "--set", "routing=none", "--set", "epochs=0",
                    "--out", str(out)]) == 0
        rc = run(["gradcheck", "--checkpoint",
                  str(out / "checkpoints" / "final.ckpt"),
                  "--out", str(out / "gc")])
        assert rc == 1
        assert "no routing to unroll" in capsys.readouterr().err

    def test_gradcheck_reproducible(self, workspace, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert run(["gradcheck", "--checkpoint", str(workspace["ckpt"]),
                        "--capsules", "25", "--seed", "9",
                        "--out", str(out)]) == 0
            outs.append((out / "capsules.csv").read_bytes())
        assert outs[0] == outs[1]


class TestPerturbCli:
    def test_grid_geometry_and_zero_column(self, workspace, tmp_path):
        out = tmp_path / "pt"
        assert run(["perturb", "--checkpoint", str(workspace["ckpt"]),
                    "--index", "3", "--out", str(out)]) == 0
        grid = read_pgm(out / "grids" / "perturb.pgm")
        d_out, cols, hw, pad = 16, 11, 28, 1
        assert grid.shape == (d_out * hw + (d_out + 1) * pad,
                              cols * hw + (cols + 1) * pad)
        header, rows = read_csv(out / "perturb.csv")
        zero_rows = [r for r in rows if float(r[1]) == 0.0]
        assert len(zero_rows) == d_out
        assert all(float(r[2]) == 0.0 for r in zero_rows)
        assert (out / "figures" / "perturb_grid.png").exists()

    def test_custom_range_column_count(self, workspace, tmp_path):
        out = tmp_path / "pt2"
        assert run(["perturb", "--checkpoint", str(workspace["ckpt"]),
                    "--range", "0.1", "--step", "0.05",
                    "--out", str(out)]) == 0
        _, rows = read_csv(out / "perturb.csv")
        deltas = sorted({float(r[1]) for r in rows})
        assert len(deltas) == 5  # -0.1 .. 0.1 by 0.05


class TestAgreementCli:
    def test_agreement_outputs(self, workspace, tmp_path):
        d = workspace["data"]
        cfg = tmp_path / "agr.cfg"
        cfg.write_text(
            "conv1_channels = 16\nprimary_caps_channels = 4\n"
            "decoder_hidden = 64,128\nepochs = 1\nseed = 2\nbatch_size = 32\n"
            f"train_images = {d}/base-train-images.idx\n"
            f"train_labels = {d}/base-train-labels.idx\n"
            f"test_images = {d}/base-test-images.idx\n"
            f"test_labels = {d}/base-test-labels.idx\n")
        out = tmp_path / "agr"
        assert run(["agreement", "--config", str(cfg),
                    "--out", str(out)]) == 0
        header, rows = read_csv(out / "agreement.csv")
        assert header == ["epoch", "regime", "split", "target_agreement",
                          "nontarget_agreement"]
        combos = {(r[1], r[2]) for r in rows}
        assert combos == {("dynamic", "train"), ("dynamic", "test"),
                          ("none", "train"), ("none", "test")}
        assert (out / "figures" / "agreement.png").exists()
        assert (out / "runs" / "none" / "metrics.csv").exists()


@pytest.mark.slow
class TestBenchAffineCli:
    def test_bench_micro(self, workspace, tmp_path):
        d = workspace["data"]
        cfg = tmp_path / "bench.cfg"
        cfg.write_text(
            "input_hw = 40\nconv1_channels = 16\nprimary_caps_channels = 4\n"
            "decoder_hidden = 64,128\nrouting_iterations = 2\n"
            "epochs = 1\nseed = 0\nbatch_size = 32\nprecision = float32\n"
            "bench_seeds = 1\n"
            f"train_images = {d}/placed40-train-images.idx\n"
            f"train_labels = {d}/placed40-train-labels.idx\n"
            f"test_images = {d}/placed40-test-images.idx\n"
            f"test_labels = {d}/placed40-test-labels.idx\n"
            f"affine_test_images = {d}/affine40-test-images.idx\n"
            f"affine_test_labels = {d}/affine40-test-labels.idx\n")
        out = tmp_path / "bench"
        assert run(["bench-affine", "--config", str(cfg),
                    "--out", str(out)]) == 0
        header, rows = read_csv(out / "report.csv")
        assert header[:4] == ["cell", "seed", "split", "accuracy"]
        cells = {"capsnet+dynamic", "capsnet+none", "affcaps+dynamic",
                 "affcaps+none"}
        seeded = [r for r in rows if r[1] == "0"]
        assert {r[0] for r in seeded} == cells
        assert {r[2] for r in seeded} == {"clean", "affine"}
        # per-capsule / shared transform parameter counts at 40x40
        by_cell = {r[0]: int(r[5]) for r in seeded}
        n = 4 * 12 * 12
        assert by_cell["capsnet+none"] == n * 10 * 8 * 16
        assert by_cell["affcaps+none"] == 10 * 8 * 16
        refs = [r for r in rows if r[1] == "full_scale_reference"]
        assert len(refs) == 3
        synth_flags = [r for r in rows if "synthesized" in r[-1]]
        assert len(synth_flags) == len(seeded) / 2
        assert (out / "figures" / "bench_affine.png").exists()

import json
import subprocess
import sys

import pytest
import yaml

from hitdvae.cli import EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE, run
from hitdvae.config import ConfigError, build_config, load_config, parse_override
from hitdvae.training import read_log

SMALL = {
    "stft": {"window_length": 128, "hop": 32},
    "data": {"segment_length": 20},
    "model": {"d_model": 8, "n_layers": 1, "d_ff": 16, "L_z": 2, "L_w": 3, "rnn_hidden": 4},
    "optimizer": {"lr_max": 1e-3, "warmup_iters": 2, "cosine_iters": 4},
    "train": {"iterations": 6, "batch_size": 4, "checkpoint_every": 3},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run(["synth-data", "--out", str(root / "data"), "--count", "4", "--duration", "0.6",
                "--seed", "2", "--split", "0.5", "0.25", "0.25"]) == EXIT_OK
    (root / "cfg.yaml").write_text(yaml.safe_dump(SMALL))
    assert run(["train", "--config", str(root / "cfg.yaml"), "--data", str(root / "data"),
                "--out", str(root / "run")]) == EXIT_OK
    return root


class TestConfig:
    def test_defaults(self):
        cfg = build_config()
        assert cfg.model.d_model == 256 and cfg.optimizer.lr_max == 5e-5 and cfg.model.F == 513

    def test_model_width_follows_stft(self):
        assert build_config({"stft": {"window_length": 128, "hop": 32}}).model.F == 65

    def test_unknown_key_named(self):
        with pytest.raises(ConfigError) as info:
            build_config({"model": {"d_modle": 3}})
        assert info.value.key == "model.d_modle"

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match="modle"):
            build_config({"modle": {}})

    def test_type_checked(self):
        with pytest.raises(ConfigError, match="train.iterations"):
            build_config({"train": {"iterations": "many"}})

    def test_width_mismatch(self):
        with pytest.raises(ConfigError, match="model.F"):
            build_config({"model": {"F": 10}})

    def test_overrides(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text(yaml.safe_dump({"train": {"iterations": 5}}))
        cfg = load_config(path, dict([parse_override("train.iterations=7"),
                                      parse_override("optimizer.lr_max=1e-3")]))
        assert cfg.train.iterations == 7 and cfg.optimizer.lr_max == 1e-3

    def test_bad_override(self):
        with pytest.raises(ConfigError):
            parse_override("iterations")


class TestCommands:
    def test_train_outputs(self, workspace):
        run_dir = workspace / "run"
        assert {p.name for p in (run_dir / "checkpoints").iterdir()} == {
            "iter_0000003.npz", "iter_0000006.npz", "last.npz"}
        assert len(read_log(run_dir / "logs" / "train.tsv")) == 6
        echoed = yaml.safe_load((run_dir / "config.yaml").read_text())
        assert echoed["model"]["F"] == 65 and echoed["data"]["path"] == str(workspace / "data")

    def test_resynth_modes_share_encoder_samples(self, workspace, capsys):
        ck = str(workspace / "run" / "checkpoints" / "last.npz")
        for mode in ("TF", "GEN"):
            assert run(["resynth", "--checkpoint", ck, "--inputs", str(workspace / "data"),
                        "--mode", mode, "--out", str(workspace / "run")]) == EXIT_OK
        tf = json.loads((workspace / "run" / "reports" / "resynth_TF.json").read_text())
        gen = json.loads((workspace / "run" / "reports" / "resynth_GEN.json").read_text())
        assert tf["n"] == gen["n"] == 4
        assert len(list((workspace / "run" / "wavs" / "GEN").glob("*.wav"))) == 4

    def test_generate_and_eval(self, workspace):
        ck = str(workspace / "run" / "checkpoints" / "last.npz")
        assert run(["generate", "--checkpoint", ck, "--count", "2", "--frames", "12", "--gl-iters", "5",
                    "--out", str(workspace / "gen")]) == EXIT_OK
        assert len(list((workspace / "gen" / "wavs" / "generated").glob("*.wav"))) == 2
        assert run(["eval", "--ref", str(workspace / "data"), "--est", str(workspace / "data"),
                    "--window-length", "128", "--hop", "32", "--out", str(workspace / "ev")]) == EXIT_OK
        summary = json.loads((workspace / "ev" / "reports" / "eval.json").read_text())
        assert summary["n"] == 4 and summary["mean"]["rmse"] == 0.0

    def test_manifest_split(self, workspace):
        lines = (workspace / "data" / "manifest.tsv").read_text().splitlines()
        assert sorted(line.split("\t")[2] for line in lines) == ["test", "train", "train", "valid"]

    def test_params_light_smaller(self, workspace, capsys):
        cfg = str(workspace / "cfg.yaml")
        assert run(["params", "--config", cfg, "--variant", "LigHT"]) == EXIT_OK
        light = json.loads(capsys.readouterr().out)
        assert run(["params", "--config", cfg, "--variant", "HiT"]) == EXIT_OK
        hit = json.loads(capsys.readouterr().out)
        assert light["total"] < hit["total"]
        assert run(["params", "--checkpoint", str(workspace / "run" / "checkpoints" / "last.npz")]) == EXIT_OK
        assert json.loads(capsys.readouterr().out)["total"] == light["total"]

    def test_gradcheck(self, capsys):
        assert run(["gradcheck"]) == EXIT_OK
        out = capsys.readouterr().out
        assert float(out.split("error ")[1].split()[0]) < 1e-3


class TestErrors:
    def test_missing_dataset_names_key(self, tmp_path, capsys):
        assert run(["train", "--out", str(tmp_path), "--data", str(tmp_path / "nope")]) == EXIT_USAGE
        assert "data.path" in capsys.readouterr().err

    def test_no_dataset(self, tmp_path, capsys):
        assert run(["train", "--out", str(tmp_path)]) == EXIT_USAGE
        assert "data.path" in capsys.readouterr().err

    def test_unknown_key(self, workspace, tmp_path, capsys):
        code = run(["train", "--out", str(tmp_path), "--data", str(workspace / "data"), "--set", "train.itrations=3"])
        assert code == EXIT_USAGE
        assert "train.itrations" in capsys.readouterr().err

    def test_bad_subcommand(self, capsys):
        assert run(["frobnicate"]) == EXIT_USAGE

    def test_bad_mode(self, workspace):
        assert run(["resynth", "--checkpoint", "x", "--inputs", "y", "--mode", "AR", "--out", "z"]) == EXIT_USAGE

    def test_non_finite_loss_exit_code(self, workspace, tmp_path, monkeypatch):
        from hitdvae import training

        def explode(*a, **k):
            raise training.NumericalError(1, "recon_is", float("nan"))

        monkeypatch.setattr("hitdvae.cli.train", explode)
        code = run(["train", "--config", str(workspace / "cfg.yaml"), "--data", str(workspace / "data"),
                    "--out", str(tmp_path)])
        assert code == EXIT_NUMERICAL


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "hitdvae", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "gradcheck" in proc.stdout

import json

import pytest
import yaml

from microgesture.cli import main
from microgesture.config import load_run_config
from microgesture.engine import read_scores


def tiny_config_dict(manifest_path):
    """Seconds-scale run config for CLI round trips."""
    return {
        "seed": 0,
        "data": {"manifest": str(manifest_path)},
        "volume": {"height": 8, "width": 8, "frames": 2, "sigma": 0.6,
                   "modality": "joint", "crop_padding": 0.1},
        "network": {"stage_widths": [8, 16], "stage_blocks": [1, 1],
                    "stem_width": 4, "embed_dim": 16, "sem_dim": 8,
                    "norm": "gn", "gn_groups": 1, "allow_dim_override": True},
        "objective": {"alpha": 1.0, "emb_loss_reduction": "mean",
                      "embedding_dim": 8},
        "optimizer": {"base_lr": 0.05, "momentum": 0.9, "weight_decay": 3e-4,
                      "batch_size": 4, "epochs": 2},
        "fusion": {"weight_joint": 2.0, "weight_limb": 3.0},
    }


@pytest.fixture(scope="session")
def cli_workspace(tmp_path_factory):
    """Synthetic dataset plus a tiny config file, shared across CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--clips", "8", "--classes", "4", "--seed", "9",
                 "--out", str(root / "data")]) == 0
    manifest = root / "data" / "manifest.json"
    config = root / "tiny.yaml"
    config.write_text(yaml.safe_dump(tiny_config_dict(manifest)))
    return {"root": root, "manifest": manifest, "config": config}


class TestSynth:
    def test_deterministic_across_runs(self, tmp_path, capsys):
        for name in ("a", "b"):
            assert main(["synth", "--clips", "6", "--classes", "3",
                         "--seed", "4", "--out", str(tmp_path / name)]) == 0
        out = capsys.readouterr().out
        assert out.count("wrote") == 2
        assert ((tmp_path / "a" / "manifest.json").read_bytes()
                == (tmp_path / "b" / "manifest.json").read_bytes())

    def test_out_root_env_fallback(self, tmp_path, monkeypatch):
        monkeypatch.setenv("MICROGESTURE_OUT_ROOT", str(tmp_path))
        assert main(["synth", "--clips", "6", "--classes", "3"]) == 0
        assert (tmp_path / "synth" / "manifest.json").exists()

    def test_no_out_dir_anywhere(self, monkeypatch, capsys):
        monkeypatch.delenv("MICROGESTURE_OUT_ROOT", raising=False)
        assert main(["synth", "--clips", "6", "--classes", "3"]) == 1
        assert "output directory" in capsys.readouterr().err


class TestUsageErrors:
    def test_unknown_command(self):
        assert main(["frobnicate"]) == 1

    def test_no_command(self):
        assert main([]) == 1

    def test_missing_config_file(self, tmp_path, capsys):
        out = tmp_path / "run"
        assert main(["train", "--config", str(tmp_path / "nope.yaml"),
                     "--out", str(out)]) == 1
        assert "does not exist" in capsys.readouterr().err
        assert not out.exists()  # failed early, no partial outputs

    def test_bad_override_key(self, cli_workspace, tmp_path, capsys):
        assert main(["train", "--config", str(cli_workspace["config"]),
                     "--set", "objective.gamma=1", "--out", str(tmp_path / "r")]) == 1
        assert "unknown config key" in capsys.readouterr().err

    def test_bad_ensemble_weights(self, cli_workspace, tmp_path, capsys):
        scores = tmp_path / "x.scores"
        scores.write_bytes(b"MGSC")
        assert main(["ensemble", "--joint", str(scores), "--limb", str(scores),
                     "--weights", "2:3:4"]) == 1
        assert "weights" in capsys.readouterr().err

    def test_ensemble_missing_score_file(self, tmp_path, capsys):
        assert main(["ensemble", "--joint", str(tmp_path / "a.scores"),
                     "--limb", str(tmp_path / "b.scores")]) == 1
        assert "does not exist" in capsys.readouterr().err

    def test_eval_missing_checkpoint(self, cli_workspace, tmp_path, capsys):
        assert main(["eval", "--config", str(cli_workspace["config"]),
                     "--checkpoint", str(tmp_path / "none.npz"),
                     "--out", str(tmp_path / "e")]) == 1
        assert "checkpoint" in capsys.readouterr().err

    def test_bad_alpha_list(self, cli_workspace, tmp_path, capsys):
        assert main(["ablate", "--config", str(cli_workspace["config"]),
                     "--alphas", "a,b", "--out", str(tmp_path / "s")]) == 1
        assert "alpha" in capsys.readouterr().err


class TestWorkflow:
    def test_train_eval_ensemble(self, cli_workspace, tmp_path, capsys):
        config = str(cli_workspace["config"])
        joint_dir, limb_dir = tmp_path / "joint", tmp_path / "limb"
        eval_j, eval_l = tmp_path / "eval_j", tmp_path / "eval_l"

        assert main(["train", "--config", config, "--out", str(joint_dir)]) == 0
        assert main(["train", "--config", config, "--out", str(limb_dir),
                     "--set", "volume.modality=limb"]) == 0
        frozen = load_run_config(limb_dir / "config.yaml")
        assert frozen.volume.modality == "limb"

        assert main(["eval", "--config", config,
                     "--checkpoint", str(joint_dir / "last.ckpt.npz"),
                     "--out", str(eval_j)]) == 0
        assert main(["eval", "--config", config, "--set", "volume.modality=limb",
                     "--checkpoint", str(limb_dir / "last.ckpt.npz"),
                     "--out", str(eval_l)]) == 0
        out = capsys.readouterr().out
        assert "top1 " in out and "top5 " in out
        assert (eval_j / "report.json").exists()
        report = json.loads((eval_j / "report.json").read_text())
        assert set(report) >= {"top1", "top5", "per_class", "confusion"}

        fused_path = tmp_path / "fused.scores"
        assert main(["ensemble", "--joint", str(eval_j / "test.scores"),
                     "--limb", str(eval_l / "test.scores"),
                     "--weights", "2:3", "--out", str(fused_path)]) == 0
        fused, labels, digest = read_scores(fused_path)
        per_file = read_scores(eval_j / "test.scores")
        assert fused.shape == per_file[0].shape
        assert digest == per_file[2]

    def test_seed_flag_overrides_config(self, cli_workspace, tmp_path):
        out = tmp_path / "run"
        assert main(["train", "--config", str(cli_workspace["config"]),
                     "--seed", "3", "--out", str(out)]) == 0
        assert load_run_config(out / "config.yaml").seed == 3

    def test_prepare_writes_volumes(self, cli_workspace, tmp_path, capsys):
        out = tmp_path / "vols"
        assert main(["prepare", "--config", str(cli_workspace["config"]),
                     "--split", "test", "--png", "--out", str(out)]) == 0
        assert "wrote" in capsys.readouterr().out
        vols = sorted(out.glob("*.vol"))
        assert len(vols) >= 1
        assert (out / "config.yaml").exists()
        pngs = sorted(out.glob("*_t*.png"))
        assert len(pngs) == 2 * len(vols)  # two sampled frames per clip

    def test_prepare_limit(self, cli_workspace, tmp_path):
        out = tmp_path / "vols"
        assert main(["prepare", "--config", str(cli_workspace["config"]),
                     "--split", "train", "--limit", "1", "--out", str(out)]) == 0
        assert len(list(out.glob("*.vol"))) == 1

    def test_ablate_sweep(self, cli_workspace, tmp_path, capsys):
        out = tmp_path / "sweep"
        assert main(["ablate", "--config", str(cli_workspace["config"]),
                     "--set", "optimizer.epochs=1", "--alphas", "0.5,2",
                     "--out", str(out)]) == 0
        printed = capsys.readouterr().out
        assert "alpha" in printed and "top1" in printed
        assert (out / "ablation.csv").exists()
        assert (out / "alpha_00" / "report.json").exists()
        assert (out / "alpha_01" / "report.json").exists()

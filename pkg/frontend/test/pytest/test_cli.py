# Copyright 2024 Xanadu Quantum Technologies Inc.

# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at

#     http://www.apache.org/licenses/LICENSE-2.0

# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
"""End-to-end tests of the ``dam`` command line on a tiny configuration."""

import json
import shutil
import textwrap

import numpy as np
import pytest

from dam.cli import EXIT_MISSING, EXIT_OK, EXIT_USAGE, _overrides, build_parser, main
from dam.igd import SaliencySequence
from dam.pointcloud import load_dataset_archive
from dam.utils.filesystem import RunDirectory

TINY_CONFIG = textwrap.dedent(
    """
    [data]
    classes = 3
    per_class = 6
    n_points = 16
    test_fraction = 0.5

    [classifier]
    per_point_widths = [16, 32]
    head_widths = [16]
    epochs = 1
    batch_size = 4

    [noised]
    copies = 1
    epochs = 1
    batch_size = 4

    [diffusion]
    n_timesteps = 20
    latent_dim = 8
    encoder_widths = [16, 32]
    n_heads = 2
    widths = [16, 32]
    iterations = 2
    batch_size = 4

    [guidance]
    per_class = 1
    state_stride = 5

    [saliency]
    stride = 5
    ig_steps = 8

    [metrics]
    real_per_class = 2
    """
)

CUBE_OFF = """OFF
8 6 0
0 0 0
1 0 0
1 1 0
0 1 0
0 0 1
1 0 1
1 1 1
0 1 1
4 0 1 2 3
4 4 5 6 7
4 0 1 5 4
4 2 3 7 6
4 1 2 6 5
4 0 3 7 4
"""


def _dam(run_dir, *args):
    return main(["--run-dir", str(run_dir), "--quiet", *args])


def _models_only(run_dir, dest):
    """Copy a run's dataset, checkpoints and snapshot without its explanations."""
    shutil.copytree(run_dir / "data", dest / "data")
    shutil.copytree(run_dir / "checkpoints", dest / "checkpoints")
    shutil.copy(run_dir / "config.resolved", dest / "config.resolved")
    return dest


def _split(run_dir, split):
    names = json.loads((run_dir / "data" / "classes.json").read_text())
    return load_dataset_archive(run_dir / "data" / f"{split}.dam1", names, split)


@pytest.fixture(scope="module", name="trained_run")
def trained_run_fixture(tmp_path_factory):
    """A run directory with a dataset and the three trained models."""
    root = tmp_path_factory.mktemp("cli")
    config = root / "tiny.toml"
    config.write_text(TINY_CONFIG, encoding="utf-8")
    run_dir = root / "run"
    assert _dam(run_dir, "--config", str(config), "gen-data") == EXIT_OK
    for model in ("classifier", "diffusion", "noised-classifier"):
        assert _dam(run_dir, "train", model) == EXIT_OK
    return run_dir


@pytest.fixture(scope="module", name="explained_run")
def explained_run_fixture(trained_run):
    """The trained run with one explanation per class."""
    assert _dam(trained_run, "explain", "--seed", "11") == EXIT_OK
    return trained_run


class TestArguments:
    """Flag parsing and overrides."""

    def test_overrides(self):
        """Flags map onto config keys; ``--seed`` onto the command's section."""
        argv = ["explain", "--scale", "0.01", "--no-dual", "--seed", "3", "--count", "4"]
        a = build_parser().parse_args(argv + ["--init", "z", "--target-layer", "head.0:2"])
        assert _overrides(a) == {
            "guidance.scale": 0.01,
            "guidance.use_dual": False,
            "guidance.seed": 3,
            "guidance.per_class": 4,
            "guidance.init_mode": "random_z",
            "guidance.target": "head.0:2",
        }

    def test_explain_classes(self):
        """``--class`` takes one or more labels and ``--second-class`` one more."""
        a = build_parser().parse_args(["explain", "--class", "0", "2", "--second-class", "1"])
        assert a.labels == [0, 2] and a.second_label == 1
        assert "labels" not in _overrides(a)

    def test_init_choices(self):
        """``x`` encodes a random cloud, ``z`` draws the latent; nothing else parses."""
        a = build_parser().parse_args(["explain", "--init", "x"])
        assert _overrides(a) == {"guidance.init_mode": "random_x_then_encode"}
        with pytest.raises(SystemExit):
            build_parser().parse_args(["explain", "--init", "random_z"])

    def test_saliency_overrides(self):
        """``ig`` names straight-line integrated gradients."""
        a = build_parser().parse_args(["saliency", "--method", "ig", "--steps", "64"])
        assert _overrides(a) == {"saliency.method": "linear_ig", "saliency.ig_steps": 64}

    def test_gen_data_overrides(self):
        """``--toy`` selects the synthetic shapes and ``--n`` the points per cloud."""
        argv = ["gen-data", "--toy", "--n", "32", "--surface-sampling"]
        assert _overrides(build_parser().parse_args(argv)) == {
            "data.source": "synthetic",
            "data.n_points": 32,
            "data.surface_sampling": True,
        }

    def test_eval_overrides(self):
        """``--faithfulness`` and ``--j`` reach the metrics section."""
        a = build_parser().parse_args(["eval", "--faithfulness", "--j", "0.5"])
        assert _overrides(a) == {"metrics.faithfulness": True, "metrics.faithfulness_j": 0.5}

    def test_train_overrides(self):
        """``--seed`` and ``--epochs`` follow the trained model."""
        argv = ["train", "noised-classifier", "--seed", "2", "--epochs", "4"]
        a = build_parser().parse_args(argv)
        assert _overrides(a) == {"noised.seed": 2, "noised.epochs": 4}

    def test_unset_flags_are_not_overrides(self):
        """Flags left out do not mask the config file."""
        assert _overrides(build_parser().parse_args(["eval"])) == {}


class TestExitCodes:
    """Failures map onto exit codes."""

    def test_no_command(self, capsys):
        """Without a command the help is printed."""
        assert main([]) == EXIT_USAGE
        assert "usage" in capsys.readouterr().err

    def test_missing_artifact(self, tmp_path, capsys):
        """Commands name the step that produces what they need."""
        assert _dam(tmp_path / "run", "explain") == EXIT_MISSING
        assert "dam train diffusion" in capsys.readouterr().err

    def test_missing_dataset(self, tmp_path, capsys):
        """Training needs ``gen-data`` first."""
        assert _dam(tmp_path / "run", "train", "classifier") == EXIT_MISSING
        assert "dam gen-data" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path):
        """An explicit config file must exist."""
        assert _dam(tmp_path / "run", "--config", str(tmp_path / "absent.toml"), "plot") == 2

    def test_invalid_config(self, tmp_path, capsys):
        """Unknown keys are usage errors."""
        config = tmp_path / "bad.toml"
        config.write_text("data.colour = 1\n", encoding="utf-8")
        assert _dam(tmp_path / "run", "--config", str(config), "gen-data") == EXIT_USAGE
        assert "data.colour" in capsys.readouterr().err

    def test_zero_points(self, tmp_path, capsys):
        """Clouds need at least one point."""
        assert _dam(tmp_path / "run", "gen-data", "--n", "0") == EXIT_USAGE
        assert "data.n_points" in capsys.readouterr().err
        assert not (tmp_path / "run" / "data" / "train.dam1").exists()

    def test_epochs_of_diffusion(self, tmp_path):
        """The diffusion model counts iterations, not epochs."""
        assert _dam(tmp_path / "run", "train", "diffusion", "--epochs", "2") == EXIT_USAGE

    def test_wrong_checkpoint(self, trained_run, tmp_path):
        """A classifier archive is not a diffusion model."""
        copy = tmp_path / "copy"
        shutil.copytree(trained_run, copy)
        shutil.copy(copy / "checkpoints" / "classifier.npz", copy / "checkpoints" / "diffusion.npz")
        assert _dam(copy, "explain") == EXIT_MISSING


class TestPipeline:
    """Every command on one run directory."""

    def test_training_artifacts(self, trained_run):
        """Datasets, checkpoints, curves and the resolved config are written."""
        run = RunDirectory(trained_run)
        assert (trained_run / "data" / "train.dam1").is_file()
        classes = json.loads((trained_run / "data" / "classes.json").read_text())
        assert classes == ["sphere", "plane", "torus"]
        for name in ("classifier", "noised_classifier", "diffusion"):
            assert (trained_run / "checkpoints" / f"{name}.npz").is_file()
        assert (trained_run / "reports" / "diffusion_curve.csv").is_file()
        kinds = [e.kind for e in run.load_manifest().entries]
        assert kinds.count("dataset") == 2 and kinds.count("checkpoint") == 3
        assert "diffusion.n_timesteps = 20" in run.config_path.read_text()

    def test_explanations(self, explained_run):
        """One explanation per class, each with its trajectory."""
        entries = [
            e for e in RunDirectory(explained_run).load_manifest().entries
            if e.kind == "explanation"
        ]
        assert sorted(e.label for e in entries) == [0, 1, 2]
        for entry in entries:
            assert entry.status == "ok"
            assert (explained_run / entry.path).is_file()
            assert (explained_run / entry.extra["trajectory"]).is_file()

    def test_replay(self, explained_run, capsys):
        """Recorded explanations reproduce bit for bit."""
        assert _dam(explained_run, "explain", "--replay") == EXIT_OK
        assert "reproduced bitwise" in capsys.readouterr().out

    def test_explain_example(self, trained_run, tmp_path):
        """``explain --class 2 --count 5 --seed 1`` writes five clouds with their trajectories."""
        copy = _models_only(trained_run, tmp_path / "copy")
        assert _dam(copy, "explain", "--class", "2", "--count", "5", "--seed", "1") == EXIT_OK
        assert [p.suffix for p in (copy / "explanations").iterdir()] == [".ply"] * 5
        assert [p.suffix for p in (copy / "trajectories").iterdir()] == [".npz"] * 5
        entries = RunDirectory(copy).load_manifest().entries
        assert [e.label for e in entries if e.kind == "explanation"] == [2] * 5

    def test_saliency_eval_plot(self, explained_run, capsys):
        """Attribution, evaluation and plotting of the explanations."""
        assert _dam(explained_run, "saliency") == EXIT_OK
        capsys.readouterr()
        argv = ["--run-dir", str(explained_run), "saliency", "--method", "ig", "--steps", "256"]
        assert main(argv) == EXIT_OK
        log = capsys.readouterr().err
        assert log.count("completeness of explanations/") == 3
        assert "|sum(psi) - dF|" in log
        assert _dam(explained_run, "saliency", "--method", "random", "--seed", "3") == EXIT_OK
        assert len(list((explained_run / "saliency").glob("*.npz"))) == 9

        capsys.readouterr()
        assert _dam(explained_run, "eval", "--faithfulness", "--j", "1.0") == EXIT_OK
        out = capsys.readouterr().out
        assert "pcams" in out
        for method in ("igd", "linear_ig", "random"):
            assert f"{method}: S^0.5 = " in out
        assert out.count("S^1.0 = ") == 3
        with open(explained_run / "reports" / "metrics.json", "r", encoding="utf-8") as f:
            report = json.load(f)
        assert report["schema"] == "dam-metrics-v1"
        assert sorted(report["attribution"]) == ["igd", "linear_ig", "random"]
        assert report["provenance"]["seeds"]
        assert (explained_run / "reports" / "attribution.csv").is_file()

        assert _dam(explained_run, "plot") == EXIT_OK
        assert (explained_run / "reports" / "plots" / "gallery.png").is_file()

    def test_random_saliency_reproducible(self, explained_run, tmp_path):
        """``saliency --method random --seed 3`` gives the same maps in two runs."""
        maps = []
        for name in ("a", "b"):
            copy = tmp_path / name
            shutil.copytree(explained_run, copy)
            assert _dam(copy, "saliency", "--method", "random", "--seed", "3") == EXIT_OK
            entry = RunDirectory(copy).load_manifest().entries[-1]
            assert entry.kind == "saliency" and entry.extra["method"] == "random"
            maps.append(SaliencySequence.load(copy / entry.path).stacked())
        assert np.array_equal(maps[0], maps[1])

    def test_stride_longer_than_chain(self, explained_run, capsys):
        """An emission stride beyond T is a usage error."""
        assert _dam(explained_run, "saliency", "--stride", "50") == EXIT_USAGE
        assert "exceeds the chain length T=20" in capsys.readouterr().err

    def test_recompute_needs_full_trajectories(self, explained_run, capsys):
        """Trajectories saved with a state stride cannot be recomputed."""
        before = sorted((explained_run / "saliency").iterdir())
        assert _dam(explained_run, "saliency", "--recompute-mode", "logits") == EXIT_USAGE
        assert "`dam explain --state-stride 1`" in capsys.readouterr().err
        assert sorted((explained_run / "saliency").iterdir()) == before

    def test_recompute_with_full_trajectories(self, trained_run, tmp_path):
        """With every state kept the gradients are recomputed in another mode."""
        copy = _models_only(trained_run, tmp_path / "copy")
        args = ["--class", "0", "--count", "1", "--state-stride", "1", "--seed", "5"]
        assert _dam(copy, "explain", *args) == EXIT_OK
        assert _dam(copy, "saliency", "--recompute-mode", "logits") == EXIT_OK


class TestDataAndSnapshot:
    """Dataset generation and the single ``config.resolved`` of a run."""

    def test_gen_data_example(self, tmp_path):
        """``gen-data --toy --classes 4 --per-class 200 --n 256 --seed 7`` makes 800 clouds."""
        run_dir = tmp_path / "run"
        argv = ["gen-data", "--toy", "--classes", "4", "--per-class", "200", "--n", "256"]
        assert _dam(run_dir, *argv, "--seed", "7") == EXIT_OK
        train, test = _split(run_dir, "train"), _split(run_dir, "test")
        assert len(train) + len(test) == 800
        assert train.n_points == 256 and train.n_classes == 4

    def test_later_overrides_keep_snapshot(self, tmp_path):
        """A later command with other flags leaves ``config.resolved`` alone and records its own."""
        run_dir = tmp_path / "run"
        argv = ["gen-data", "--classes", "2", "--per-class", "3", "--n", "8"]
        assert _dam(run_dir, *argv, "--seed", "7") == EXIT_OK
        run = RunDirectory(run_dir)
        snapshot = run.config_path.read_text(encoding="utf-8")
        assert "data.seed = 7" in snapshot

        assert _dam(run_dir, "gen-data", "--seed", "8") == EXIT_OK
        assert _dam(run_dir, "gen-data", "--seed", "8") == EXIT_OK
        assert run.config_path.read_text(encoding="utf-8") == snapshot
        entries = run.load_manifest().entries
        configs = [e for e in entries if e.kind == "config"]
        assert len(configs) == 1
        assert configs[0].extra == {"command": "gen-data"}
        recorded = (run_dir / configs[0].path).read_text(encoding="utf-8")
        assert "data.seed = 8" in recorded and "data.classes = 2" in recorded
        assert entries[-1].kind == "dataset" and entries[-1].seed == 8
        assert entries[-1].config_hash == configs[0].config_hash
        assert entries[0].config_hash in snapshot

    def test_off_surface_sampling(self, tmp_path):
        """OFF meshes are sampled on their vertices or, on request, on their faces."""
        meshes = tmp_path / "meshes"
        for name in ("bowl", "chair"):
            (meshes / name).mkdir(parents=True)
            for k in range(2):
                (meshes / name / f"{k}.off").write_text(CUBE_OFF, encoding="utf-8")
        argv = ["gen-data", "--source", "off", "--off-root", str(meshes), "--n", "16"]
        assert _dam(tmp_path / "vertices", *argv) == EXIT_OK
        assert _dam(tmp_path / "faces", *argv, "--surface-sampling") == EXIT_OK
        for run_name, distinct in (("vertices", 8), ("faces", 16)):
            for cloud in _split(tmp_path / run_name, "train").clouds:
                assert len(np.unique(cloud.points.round(9), axis=0)) <= distinct
        faces = _split(tmp_path / "faces", "train").clouds
        assert all(len(np.unique(c.points.round(9), axis=0)) > 8 for c in faces)


if __name__ == "__main__":
    pytest.main(["-x", __file__])

"""
End-to-end tests of the command-line surface and the training service on tiny datasets.
"""

import json
import os
from unittest.mock import patch

import numpy as np
import pandas as pd
import pytest

import dgm
from core.parameters import load_checkpoint, save_checkpoint
from models.avvp_model import AVVPModel
from services import dgm_optimizer
from services.synthetic_data import SynthConfig, generate, generate_splits, load
from services.training_service import (CHECKPOINT_FILE, IMBALANCE_COLUMNS, IMBALANCE_FILE, LOSS_COLUMNS,
                                       LOSSES_FILE, REPORT_FILE, AblationGrid, RunConfig, TrainingService,
                                       run_ablation)
from utils.errors import ConfigurationError, NumericalError, UsageError

TINY_DATA = dict(snippets=4, classes=3, audio_dim=4, visual_dim=5, dominance=0.6, noise_scale=1.0,
                 density=1.0, seed=1)
TINY_RUN = dict(epochs=2, batch_size=8, hidden_dim=8, learning_rate=0.05)


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("data")
    generate_splits(SynthConfig(videos=36, **TINY_DATA), (24, 6, 6), str(path))
    return str(path)


@pytest.fixture(scope="module")
def run_config_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("config") / "run.json"
    path.write_text(json.dumps(TINY_RUN), encoding="utf-8")
    return str(path)


def _train(data_dir, run_config_file, out, *extra):
    argv = ["train", "--config", run_config_file, "--data", data_dir, "--out", str(out), *extra]
    return dgm.main(argv)


class TestGenerateCommand:
    """Test dataset generation from the command line"""

    def _argv(self, out, *extra):
        return ["generate", "--out", str(out), "--seed", "4", "--train", "10", "--val", "3", "--test", "3",
                "--snippets", "4", "--classes", "3", "--audio-dim", "4", "--visual-dim", "5", *extra]

    def test_writes_every_split(self, tmp_path, capsys):
        assert dgm.main(self._argv(tmp_path)) == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary["splits"] == {"train": 10, "val": 3, "test": 3}
        for name in ("train", "val", "test"):
            for file_name in ("manifest.json", "features.bin", "labels.json"):
                assert os.path.exists(tmp_path / name / file_name)

    def test_same_seed_same_checksums(self, tmp_path, capsys):
        assert dgm.main(self._argv(tmp_path / "a")) == 0
        first = json.loads(capsys.readouterr().out)["checksums"]
        assert dgm.main(self._argv(tmp_path / "b")) == 0
        second = json.loads(capsys.readouterr().out)["checksums"]
        assert first == second

    def test_dominance_out_of_range(self, tmp_path):
        assert dgm.main(self._argv(tmp_path, "--dominance", "1.5")) == 1

    def test_unknown_flag(self, tmp_path):
        assert dgm.main(self._argv(tmp_path, "--frobnicate")) == 1

    def test_missing_subcommand(self):
        assert dgm.main([]) == 1


class TestTrainCommand:
    """Test training runs and their reports"""

    def test_outputs(self, data_dir, run_config_file, tmp_path):
        assert _train(data_dir, run_config_file, tmp_path, "--dgm", "fusion") == 0
        losses = pd.read_csv(tmp_path / LOSSES_FILE)
        assert list(losses.columns) == LOSS_COLUMNS
        assert losses["epoch"].tolist() == [0, 1]
        imbalance = pd.read_csv(tmp_path / IMBALANCE_FILE)
        assert list(imbalance.columns) == IMBALANCE_COLUMNS
        assert len(imbalance) == 2 * 3
        with open(tmp_path / REPORT_FILE, encoding="utf-8") as fh:
            report = json.load(fh)
        assert report["scale"]["train_videos"] == 24
        assert len(report["test_metrics"]) == 10
        assert os.path.exists(tmp_path / CHECKPOINT_FILE)

    def test_unit_ratio_matches_unmodulated_run(self, data_dir, run_config_file, tmp_path):
        assert _train(data_dir, run_config_file, tmp_path / "off", "--dgm", "off") == 0
        assert _train(data_dir, run_config_file, tmp_path / "unit", "--dgm", "fusion", "--force-unit-omega") == 0
        off = (tmp_path / "off" / LOSSES_FILE).read_text()
        unit = (tmp_path / "unit" / LOSSES_FILE).read_text()
        assert off == unit

    def test_unmodulated_run_never_measures(self, data_dir, run_config_file, tmp_path):
        dgm_optimizer.CALL_COUNTS.clear()
        assert _train(data_dir, run_config_file, tmp_path, "--dgm", "off", "--mode", "traditional") == 0
        assert dgm_optimizer.CALL_COUNTS["compute_omega"] == 0
        assert dgm_optimizer.CALL_COUNTS["compute_mu"] == 0
        assert len(pd.read_csv(tmp_path / IMBALANCE_FILE)) == 0

    def test_reports_are_deterministic(self, data_dir, run_config_file, tmp_path):
        for name in ("a", "b"):
            assert _train(data_dir, run_config_file, tmp_path / name, "--seed", "3") == 0
        for file_name in (LOSSES_FILE, IMBALANCE_FILE):
            assert (tmp_path / "a" / file_name).read_text() == (tmp_path / "b" / file_name).read_text()
        reports = []
        for name in ("a", "b"):
            with open(tmp_path / name / REPORT_FILE, encoding="utf-8") as fh:
                report = json.load(fh)
            report["config"].pop("out_dir")
            reports.append(report)
        assert reports[0] == reports[1]

    def test_resume_continues_exactly(self, data_dir, tmp_path):
        straight = RunConfig(data_dir=data_dir, out_dir=str(tmp_path / "straight"), noise=True, **TINY_RUN)
        TrainingService(straight).train()

        first_half = RunConfig(data_dir=data_dir, out_dir=str(tmp_path / "half"), noise=True,
                               **{**TINY_RUN, "epochs": 1})
        TrainingService(first_half).train()
        resumed = RunConfig(data_dir=data_dir, out_dir=str(tmp_path / "resumed"), noise=True, **TINY_RUN)
        TrainingService(resumed).train(resume=str(tmp_path / "half" / CHECKPOINT_FILE))

        assert (tmp_path / "straight" / LOSSES_FILE).read_text() == (tmp_path / "resumed" / LOSSES_FILE).read_text()
        a = load_checkpoint(str(tmp_path / "straight" / CHECKPOINT_FILE)).params
        b = load_checkpoint(str(tmp_path / "resumed" / CHECKPOINT_FILE)).params
        for name in a.names():
            assert np.array_equal(a[name].data, b[name].data), name

    def test_unknown_config_key(self, data_dir, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"epochz": 2}), encoding="utf-8")
        assert dgm.main(["train", "--config", str(path), "--data", data_dir, "--out", str(tmp_path)]) == 1

    def test_non_positive_gamma(self, data_dir, run_config_file, tmp_path):
        assert _train(data_dir, run_config_file, tmp_path, "--gamma", "0") == 1

    def test_missing_dataset(self, run_config_file, tmp_path):
        assert _train(str(tmp_path / "nowhere"), run_config_file, tmp_path / "out") == 1

    def test_non_finite_loss_aborts_with_diagnostics(self, tmp_path):
        dataset = generate(SynthConfig(videos=8, **TINY_DATA))
        dataset.audio[0, 0, 0] = np.nan
        service = TrainingService(RunConfig(out_dir=str(tmp_path), **TINY_RUN))
        service.train_set = dataset
        with pytest.raises(NumericalError) as info:
            service.train()
        assert info.value.batch_id == 0
        dumps = [f for f in os.listdir(tmp_path) if f.startswith("diagnostic_epoch0_batch0")]
        assert len(dumps) == 1
        with open(tmp_path / dumps[0], encoding="utf-8") as fh:
            assert 0 in json.load(fh)["video_ids"]


class TestEvaluateCommand:
    """Test scoring of a saved checkpoint"""

    @pytest.fixture(scope="class")
    def checkpoint(self, data_dir, run_config_file, tmp_path_factory):
        out = tmp_path_factory.mktemp("trained")
        assert _train(data_dir, run_config_file, out) == 0
        return str(out / CHECKPOINT_FILE)

    def test_repeatable(self, checkpoint, data_dir, tmp_path, capsys):
        argv = ["evaluate", "--checkpoint", checkpoint, "--split", os.path.join(data_dir, "test"),
                "--out", str(tmp_path)]
        assert dgm.main(argv) == 0
        first = capsys.readouterr().out
        assert dgm.main(argv) == 0
        assert capsys.readouterr().out == first
        with open(tmp_path / "metrics.json", encoding="utf-8") as fh:
            payload = json.load(fh)
        assert set(payload) == {"metrics", "video_accuracy"}
        assert all(0.0 <= v <= 1.0 for v in payload["metrics"].values())

    def test_macro_averaging_flag(self, checkpoint, data_dir, capsys):
        argv = ["evaluate", "--checkpoint", checkpoint, "--split", os.path.join(data_dir, "val"),
                "--averaging", "macro", "--no-gate"]
        assert dgm.main(argv) == 0
        assert len(json.loads(capsys.readouterr().out)["metrics"]) == 10

    def test_untrained_model_scores_near_chance(self, tmp_path, capsys):
        generate_splits(SynthConfig(videos=240, snippets=10, classes=5, audio_dim=16, visual_dim=16,
                                    dominance=0.0, seed=5), (200, 20, 20), str(tmp_path / "data"))
        run = RunConfig(data_dir=str(tmp_path / "data"), hidden_dim=16)
        model = AVVPModel(run.model_config(16, 16, 5), seed=0)
        checkpoint = str(tmp_path / "untrained.ckpt")
        save_checkpoint(checkpoint, model.params, {"run": run.to_dict(), "model": model.config.to_dict()})

        split = str(tmp_path / "data" / "train")
        assert dgm.main(["evaluate", "--checkpoint", checkpoint, "--split", split]) == 0
        type_av = json.loads(capsys.readouterr().out)["metrics"]["segment_type_av"]

        dataset = load(split)
        rates = [float(np.mean(y)) for y in (dataset.audio_truth, dataset.visual_truth,
                                            dataset.audio_truth & dataset.visual_truth)]
        # best F-score any prediction independent of the truth can expect: predict every cell
        chance = float(np.mean([2 * p / (1 + p) for p in rates]))
        assert 0.0 <= type_av <= chance + 0.1

    def test_missing_checkpoint(self, data_dir, tmp_path):
        argv = ["evaluate", "--checkpoint", str(tmp_path / "missing.ckpt"), "--split", os.path.join(data_dir, "test")]
        assert dgm.main(argv) == 2

    def test_corrupt_checkpoint(self, data_dir, tmp_path):
        path = tmp_path / "broken.ckpt"
        path.write_bytes(b"not a checkpoint at all")
        argv = ["evaluate", "--checkpoint", str(path), "--split", os.path.join(data_dir, "test")]
        assert dgm.main(argv) == 2

    def test_mismatched_dataset(self, checkpoint, tmp_path):
        generate_splits(SynthConfig(videos=12, **{**TINY_DATA, "classes": 5}), (8, 2, 2), str(tmp_path))
        argv = ["evaluate", "--checkpoint", checkpoint, "--split", str(tmp_path / "test")]
        assert dgm.main(argv) == 1


class TestAblation:
    """Test the ablation grid"""

    def test_cells(self):
        grid = AblationGrid(arms=["baseline", "dgm", "dgm+msdu"], modes=["fusion", "score"], gammas=[0.1, 0.5],
                            seeds=[0, 1])
        cells = grid.cells()
        assert len(cells) == 2 + 2 * (2 * 2 * 2)
        assert all(c["imbalance_mode"] is None for c in cells if c["arm"] == "baseline")

    def test_unknown_arm(self):
        with pytest.raises(UsageError):
            AblationGrid(arms=["ours"])

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            AblationGrid(modes=["entropy"])

    def test_table_is_complete_and_repeatable(self, data_dir, tmp_path):
        grid = AblationGrid(arms=["baseline", "dgm"], modes=["fusion", "score"], gammas=[0.1], seeds=[0, 1])
        base = RunConfig(data_dir=data_dir, **{**TINY_RUN, "epochs": 1})
        first = run_ablation(grid, base, str(tmp_path / "a"))
        second = run_ablation(grid, base, str(tmp_path / "b"))
        assert len(first) == 2 + 2 * 2
        assert (first["status"] == "ok").all()
        pd.testing.assert_frame_equal(first, second)
        summary = pd.read_csv(tmp_path / "a" / "ablation_summary.csv")
        assert len(summary) == 3
        assert set(summary["seeds"]) == {2}

    def test_unexpected_error_fails_only_its_cell(self, data_dir, tmp_path):
        original = TrainingService.train

        def flaky(service, *args, **kwargs):
            if service.run.run_id.startswith("dgm_score"):
                raise KeyError("missing head")
            return original(service, *args, **kwargs)

        grid = AblationGrid(arms=["baseline", "dgm"], modes=["fusion", "score"], gammas=[0.1], seeds=[0],
                            retries=1)
        base = RunConfig(data_dir=data_dir, **{**TINY_RUN, "epochs": 1})
        with patch.object(TrainingService, "train", flaky):
            table = run_ablation(grid, base, str(tmp_path))
        assert len(table) == 3
        failed = table[table["status"] == "failed"]
        assert failed["imbalance_mode"].tolist() == ["score"]
        assert "KeyError" in failed["error"].iloc[0]
        assert int((table["status"] == "ok").sum()) == 2
        assert os.path.exists(tmp_path / "ablation.csv")

    def test_command(self, data_dir, run_config_file, tmp_path, capsys):
        argv = ["ablate", "--config", run_config_file, "--data", data_dir, "--out", str(tmp_path),
                "--arms", "baseline,msdu", "--seeds", "0", "--epochs", "1"]
        assert dgm.main(argv) == 0
        assert "2 cells, 2 succeeded" in capsys.readouterr().out
        assert len(pd.read_csv(tmp_path / "ablation.csv")) == 2

    def test_run_config_rejects_zero_epochs(self):
        with pytest.raises(ConfigurationError):
            RunConfig(epochs=0)


class TestGradcheckCommand:
    """Test the finite-difference check command"""

    def test_passes_at_default_tolerance(self, capsys):
        assert dgm.main(["gradcheck", "--instances", "3"]) == 0
        assert "All" in capsys.readouterr().out

    def test_unreachable_tolerance_fails(self, capsys):
        assert dgm.main(["gradcheck", "--instances", "2", "--tolerance", "1e-12"]) == 2
        assert "FAIL" in capsys.readouterr().out

    def test_non_positive_step(self):
        assert dgm.main(["gradcheck", "--step", "0"]) == 1

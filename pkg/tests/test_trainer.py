import shutil

import numpy as np
import pytest

from analysis.metrics import unimodal_closed_form
from conftest import tiny_backbone, tiny_run_config
from models.backbone import build_lma
from synth.dataset import PairedDataset, load_dataset_split
from train_pipeline import METRICS_FILE, RESUME_LATEST, accuracy_report, check_compatible, evaluate, train
from utils.data_model import ModelMode, OptimizerKind
from utils.errors import ConfigError, DatasetFormatError


def epoch_rows(result):
    return [row for row in result.history if row["kind"] == "epoch"]


class TestAdaptiveRun:
    def test_final_rank_meets_target(self, run_config, tmp_path):
        result = train(run_config, output_dir=str(tmp_path / "run"))
        n_adaptors = len(result.model.adaptor_entries())
        assert n_adaptors == 4
        assert result.allocator.total_active_rank() == n_adaptors * run_config.r_target
        assert result.allocator.frozen
        assert all(a.rank == a.active_rank for _, a in result.model.adaptor_entries())
        assert len(epoch_rows(result)) == run_config.epochs
        assert any(row["kind"] == "prune" for row in result.history)
        assert result.final_checkpoint.exists()

    def test_metrics_are_byte_identical_across_runs(self, run_config, tmp_path):
        first = train(run_config, output_dir=str(tmp_path / "a"))
        second = train(tiny_run_config(run_config.dataset_path), output_dir=str(tmp_path / "b"))
        assert first.metrics_path.read_bytes() == second.metrics_path.read_bytes()
        text = first.metrics_path.read_text().splitlines()
        assert text[0] == "schema_version,1"

    @pytest.mark.parametrize("optimizer", [OptimizerKind.SGD, OptimizerKind.ADAM])
    def test_resume_matches_uninterrupted(self, run_config, tmp_path, optimizer):
        run_config.optimizer = optimizer
        full = train(run_config, output_dir=str(tmp_path / "full"))
        checkpoint = tmp_path / "full" / "checkpoints" / "epoch_002.lmack"
        assert checkpoint.exists()
        resumed = train(run_config, output_dir=str(tmp_path / "resumed"), resume=str(checkpoint))
        assert (tmp_path / "resumed" / METRICS_FILE).read_bytes() == full.metrics_path.read_bytes()
        assert resumed.allocator.active_ranks() == full.allocator.active_ranks()

    def test_resume_latest_picks_newest_epoch(self, run_config, tmp_path):
        full = train(run_config, output_dir=str(tmp_path / "full"))
        interrupted = tmp_path / "interrupted" / "checkpoints"
        interrupted.mkdir(parents=True)
        for name in ("epoch_001.lmack", "epoch_002.lmack"):
            shutil.copy(tmp_path / "full" / "checkpoints" / name, interrupted / name)
        resumed = train(run_config, output_dir=str(tmp_path / "interrupted"), resume=RESUME_LATEST)
        assert (tmp_path / "interrupted" / METRICS_FILE).read_bytes() == full.metrics_path.read_bytes()
        assert resumed.final_checkpoint == interrupted / "final.lmack"

    def test_resume_latest_without_checkpoints(self, run_config, tmp_path):
        with pytest.raises(FileNotFoundError, match="No checkpoints found"):
            train(run_config, output_dir=str(tmp_path / "empty"), resume=RESUME_LATEST)


class TestOtherModes:
    def test_unimodal_parameter_count(self, run_config, tmp_path):
        run_config.mode = ModelMode.UNIMODAL
        result = train(run_config, output_dir=str(tmp_path / "uni"))
        assert result.model.num_params() == unimodal_closed_form(run_config.backbone)
        assert result.allocator is None
        assert epoch_rows(result)[-1]["total_active_rank"] == ""

    def test_fixed_rank_never_prunes(self, run_config, tmp_path):
        run_config.mode = ModelMode.LMA_FIXED
        run_config.rank_fixed = 2
        result = train(run_config, output_dir=str(tmp_path / "fixed"))
        assert all(row["kind"] == "epoch" for row in result.history)
        assert result.allocator.active_ranks() == [2] * 4


class TestEvaluate:
    def test_repeatable(self, run_config, tmp_path):
        result = train(run_config, output_dir=str(tmp_path / "run"))
        first = evaluate(str(result.final_checkpoint))
        second = evaluate(str(result.final_checkpoint))
        assert first.as_dict() == second.as_dict()
        assert first.count == 8
        assert 0.0 <= first.accuracy <= 1.0

    def test_chance_level_on_label_free_inputs(self):
        rng = np.random.default_rng(0)
        n = 800
        images = rng.normal(size=(n, 2, 8, 8))
        labels = rng.permutation(np.arange(n) % 2)
        dataset = PairedDataset(images, rng.normal(size=images.shape), labels, num_classes=2)
        report = accuracy_report(build_lma(tiny_backbone(), 2, seed=3), dataset)
        assert abs(report.accuracy - 0.5) <= 0.075
        assert report.count == n


class TestCompatibility:
    def test_channel_mismatch_names_offset(self, dataset_dir):
        config = tiny_run_config(str(dataset_dir), backbone=tiny_backbone(in_channels=3))
        with pytest.raises(DatasetFormatError) as excinfo:
            check_compatible(config, load_dataset_split(str(dataset_dir), "train"))
        assert excinfo.value.offset == 13

    def test_class_mismatch_names_offset(self, dataset_dir):
        config = tiny_run_config(str(dataset_dir), backbone=tiny_backbone(num_classes=3))
        with pytest.raises(DatasetFormatError) as excinfo:
            check_compatible(config, load_dataset_split(str(dataset_dir), "train"))
        assert excinfo.value.offset == 21

    def test_modality_count_mismatch(self, dataset_dir):
        config = tiny_run_config(
            str(dataset_dir), backbone=tiny_backbone(num_modalities=3),
        )
        with pytest.raises(ConfigError):
            check_compatible(config, load_dataset_split(str(dataset_dir), "train"))

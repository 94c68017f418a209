"""
train_pipeline.py
Training orchestration for every mode: data, model, step loop, metrics, checkpoints
"""
import csv
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from tqdm import tqdm

from allocator.optim import make_optimizer
from allocator.rank_allocator import PruneEvent, RankAllocator
from allocator.schedule import BudgetSchedule
from checkpoint.manage_checkpoint import (
    FINAL_NAME, CheckpointData, CheckpointManager,
    load_model_state, model_state, restore_rng, rng_state,
)
from engine.tensor import Tensor, no_grad
from models.backbone import LMAModel, MultimodalModel, build_model
from models.task import gradient_step
from synth.dataset import PairedDataset, load_dataset_split
from utils.config import parse_run_config, runs_dir, save_run_config
from utils.data_model import ModelMode, RunConfig
from utils.errors import ConfigError, DatasetFormatError

logger = logging.getLogger(__name__)

METRICS_SCHEMA_VERSION = 1
METRICS_FILE = "metrics.csv"
CONFIG_ECHO = "config.json"
CHECKPOINT_DIR = "checkpoints"
RESUME_LATEST = "latest"
METRICS_FIELDS = [
    "kind", "epoch", "step", "loss", "train_accuracy", "val_accuracy",
    "total_active_rank", "budget", "active_ranks", "kept", "dropped", "revived",
]

# Byte offsets of the FORA1 header fields checked against the run config
_CHANNELS_OFFSET = 13
_CLASSES_OFFSET = 21


@dataclass
class RunResult:
    final_checkpoint: Path
    metrics_path: Path
    history: List[Dict[str, str]]
    model: MultimodalModel
    allocator: Optional[RankAllocator] = None


@dataclass
class EvalResult:
    accuracy: float
    per_class: List[float]
    count: int
    split: str = "val"

    def as_dict(self) -> Dict[str, object]:
        return {"accuracy": self.accuracy, "per_class": self.per_class, "count": self.count, "split": self.split}


def _fmt(value: float) -> str:
    return f"{value:.12g}"


def _ids(ids) -> str:
    return ";".join(f"{k}:{i}" for k, i in ids)


def predict(model: MultimodalModel, dataset: PairedDataset, batch_size: int = 64) -> np.ndarray:
    """Argmax class of the fused logits for every sample, in order"""
    predictions = []
    with no_grad():
        for batch in dataset.batches(batch_size):
            logits = model.forward_fused([Tensor(x) for x in batch.xs])
            predictions.append(np.argmax(logits.data, axis=1))
    return np.concatenate(predictions) if predictions else np.zeros(0, dtype=int)


def accuracy_report(model: MultimodalModel, dataset: PairedDataset, split: str = "val") -> EvalResult:
    predicted = predict(model, dataset)
    correct = predicted == dataset.labels
    per_class = []
    for c in range(dataset.num_classes):
        members = dataset.labels == c
        per_class.append(float(correct[members].mean()) if members.any() else float("nan"))
    return EvalResult(
        accuracy=float(correct.mean()) if len(correct) else float("nan"),
        per_class=per_class, count=len(dataset), split=split,
    )


def check_compatible(config: RunConfig, dataset: PairedDataset) -> None:
    """Dataset header must agree with the backbone; mismatches name the header offset"""
    backbone = config.backbone
    channels = dataset.image_shape[0]
    if channels != backbone.in_channels:
        raise DatasetFormatError(
            f"dataset has {channels} channels, backbone.in_channels is {backbone.in_channels}",
            _CHANNELS_OFFSET, dataset.path,
        )
    if dataset.num_classes != backbone.num_classes:
        raise DatasetFormatError(
            f"dataset has {dataset.num_classes} classes, backbone.num_classes is {backbone.num_classes}",
            _CLASSES_OFFSET, dataset.path,
        )
    if config.mode != ModelMode.UNIMODAL and backbone.num_modalities != dataset.num_modalities:
        raise ConfigError([
            f"backbone.num_modalities is {backbone.num_modalities}, "
            f"dataset carries {dataset.num_modalities} modalities"
        ])


class TrainPipeline:
    """
    One training run.

    Load data → build model → step loop (allocation steps for LMA modes,
    plain gradient steps otherwise) → metrics CSV and checkpoints.
    """

    def __init__(self, config: RunConfig, output_dir: Optional[str] = None):
        self.config = config
        self.output_dir = run_directory(config, output_dir)
        config.output_dir = str(self.output_dir)
        self.checkpoints = CheckpointManager(str(self.output_dir / CHECKPOINT_DIR))
        self.metrics_path = self.output_dir / METRICS_FILE
        self.history: List[Dict[str, str]] = []
        self.start_epoch = 0
        self.step = 0

        self._say("Initialized training pipeline")
        self._say(f"Mode: {config.mode.value}")
        self._say(f"Output: {self.output_dir}")

        self.train_data = load_dataset_split(config.dataset_path, config.train_split)
        check_compatible(config, self.train_data)
        self._say(f"Loaded {config.train_split} split with {len(self.train_data)} pairs")
        self.val_data = self._load_optional(config.val_split)

        self.steps_per_epoch = math.ceil(len(self.train_data) / config.batch_size)
        self.model = build_model(config.mode, config.backbone, rank=config.model_rank(), seed=config.seed)
        self.data_rng = np.random.default_rng([config.seed, 1])
        self.allocator: Optional[RankAllocator] = None
        self.optimizer = None
        self._build_trainer()

    def _say(self, message: str) -> None:
        if not self.config.quiet:
            print(message)

    def _load_optional(self, split: str) -> Optional[PairedDataset]:
        if os.path.isfile(self.config.dataset_path):
            return None
        try:
            data = load_dataset_split(self.config.dataset_path, split)
        except FileNotFoundError:
            self._say(f"No {split} split found; validation accuracy will be empty")
            return None
        check_compatible(self.config, data)
        self._say(f"Loaded {split} split with {len(data)} pairs")
        return data

    def _build_trainer(self) -> None:
        config = self.config
        shared_lr = config.shared_learning_rate or config.learning_rate
        if isinstance(self.model, LMAModel):
            schedule = None
            if config.mode == ModelMode.LMA_ADAPTIVE:
                schedule = BudgetSchedule.from_epochs(
                    n_adaptors=len(self.model.adaptor_entries()),
                    r_init=config.r_init,
                    r_target=config.r_target,
                    warmup_epochs=config.warmup_epochs,
                    decay_end_epoch=config.decay_end_epoch,
                    epochs=config.epochs,
                    steps_per_epoch=self.steps_per_epoch,
                )
            self.allocator = RankAllocator(
                self.model,
                schedule,
                adaptor_optimizer=make_optimizer(config.optimizer, config.learning_rate),
                shared_optimizer=make_optimizer(config.optimizer, shared_lr),
                beta1=config.beta1,
                beta2=config.beta2,
                prune_interval=config.prune_interval,
            )
        else:
            self.optimizer = make_optimizer(config.optimizer, shared_lr)

    # --- run ---------------------------------------------------------------

    def run(self) -> RunResult:
        """
        Train to the configured epoch count, writing metrics and checkpoints.

        Returns:
            RunResult with the final checkpoint path and the metrics history
        """
        config = self.config
        self._say("\n" + "=" * 60)
        self._say(f"TRAINING - {config.mode.value.upper()}")
        self._say("=" * 60)
        self._say(f"Parameters: {self.model.num_params()} (unimodal {self.model.unimodal_param_count()})")

        os.makedirs(self.output_dir, exist_ok=True)
        save_run_config(config, str(self.output_dir / CONFIG_ECHO))
        self._rewrite_metrics()

        epochs = tqdm(range(self.start_epoch, config.epochs), desc="epochs", disable=config.quiet)
        for epoch in epochs:
            losses, correct, seen = [], 0, 0
            for batch in self.train_data.batches(config.batch_size, self.data_rng):
                loss, logits, event = self._train_step(batch)
                losses.append(loss)
                correct += int((np.argmax(logits, axis=1) == batch.labels).sum())
                seen += len(batch)
                if event is not None:
                    self._record(self._event_row(epoch, event))
                self.step += 1
            row = self._epoch_row(epoch, float(np.mean(losses)), correct / seen)
            self._record(row)
            epochs.set_postfix(loss=row["loss"], val=row["val_accuracy"] or "-")
            if (epoch + 1) % config.checkpoint_every == 0 and epoch + 1 < config.epochs:
                self.save_checkpoint(f"epoch_{epoch + 1:03d}", epoch + 1)

        final = self.save_checkpoint(FINAL_NAME, config.epochs)

        self._say("\n" + "=" * 60)
        self._say("TRAINING COMPLETE")
        self._say("=" * 60)
        if self.history:
            last = [r for r in self.history if r["kind"] == "epoch"][-1]
            self._say(f"Final loss: {last['loss']}")
            self._say(f"Final val accuracy: {last['val_accuracy'] or 'n/a'}")
        if self.allocator is not None:
            self._say(f"Total active rank: {self.allocator.total_active_rank()}")
        self._say(f"Metrics: {self.metrics_path}")
        self._say(f"Checkpoint: {final}")
        self._say("=" * 60)
        return RunResult(final, self.metrics_path, self.history, self.model, self.allocator)

    def _train_step(self, batch):
        if self.allocator is not None:
            return self.allocator.allocation_step(batch, self.step)
        loss, logits = gradient_step(self.model, batch, self.optimizer)
        return loss, logits, None

    # --- metrics -----------------------------------------------------------

    def _epoch_row(self, epoch: int, loss: float, train_accuracy: float) -> Dict[str, str]:
        val = accuracy_report(self.model, self.val_data).accuracy if self.val_data is not None else None
        row = dict.fromkeys(METRICS_FIELDS, "")
        row.update(
            kind="epoch", epoch=str(epoch), step=str(self.step), loss=_fmt(loss),
            train_accuracy=_fmt(train_accuracy), val_accuracy="" if val is None else _fmt(val),
        )
        if self.allocator is not None:
            row["total_active_rank"] = str(self.allocator.total_active_rank())
            row["active_ranks"] = ";".join(str(r) for r in self.allocator.active_ranks())
            if self.allocator.schedule is not None:
                row["budget"] = str(self.allocator.schedule.budget(max(self.step - 1, 0)))
        return row

    def _event_row(self, epoch: int, event: PruneEvent) -> Dict[str, str]:
        row = dict.fromkeys(METRICS_FIELDS, "")
        row.update(
            kind="prune", epoch=str(epoch), step=str(event.step),
            total_active_rank=str(sum(event.active_ranks)), budget=str(event.budget),
            active_ranks=";".join(str(r) for r in event.active_ranks),
            kept=_ids(event.kept), dropped=_ids(event.dropped), revived=_ids(event.revived),
        )
        return row

    def _record(self, row: Dict[str, str]) -> None:
        self.history.append(row)
        with open(self.metrics_path, "a", newline="") as f:
            csv.DictWriter(f, fieldnames=METRICS_FIELDS).writerow(row)

    def _rewrite_metrics(self) -> None:
        """Schema row, header, then any rows carried over from a checkpoint"""
        with open(self.metrics_path, "w", newline="") as f:
            csv.writer(f).writerow(["schema_version", METRICS_SCHEMA_VERSION])
            writer = csv.DictWriter(f, fieldnames=METRICS_FIELDS)
            writer.writeheader()
            writer.writerows(self.history)

    # --- checkpoints -------------------------------------------------------

    def save_checkpoint(self, name: str, epoch: int) -> Path:
        data = CheckpointData()
        data.put_json("config", self.config.to_dict())
        frozen = self.allocator.frozen if self.allocator is not None else False
        data.put_json("meta", {"epoch": epoch, "step": self.step, "frozen": frozen, "mode": self.config.mode.value})
        data.put_json("history", self.history)
        model_state(self.model, data)
        rng_state(self.data_rng, data)
        if self.allocator is not None:
            if not frozen:
                for key, array in self.allocator.state_arrays().items():
                    data.tensors[f"importance/{key}"] = array
            for key, array in self.allocator.adaptor_optimizer.state_dict().items():
                data.tensors[f"optim/adaptor/{key}"] = array
            for key, array in self.allocator.shared_optimizer.state_dict().items():
                data.tensors[f"optim/shared/{key}"] = array
        else:
            for key, array in self.optimizer.state_dict().items():
                data.tensors[f"optim/shared/{key}"] = array
        return self.checkpoints.save(name, data)

    @classmethod
    def resume(cls, checkpoint_path: str, output_dir: Optional[str] = None, quiet: Optional[bool] = None) -> "TrainPipeline":
        """Rebuild a pipeline at the end of the checkpointed epoch"""
        data = CheckpointManager.load(checkpoint_path)
        config = parse_run_config(data.json_blob("config"), source=checkpoint_path)
        if quiet is not None:
            config.quiet = quiet
        meta = data.json_blob("meta")
        pipeline = cls(config, output_dir=output_dir)
        load_model_state(pipeline.model, data)
        pipeline.data_rng = restore_rng(data)
        pipeline.history = data.json_blob("history")
        pipeline.start_epoch = meta["epoch"]
        pipeline.step = meta["step"]
        if pipeline.allocator is not None:
            allocator = RankAllocator(
                pipeline.model, pipeline.allocator.schedule,
                adaptor_optimizer=pipeline.allocator.adaptor_optimizer,
                shared_optimizer=pipeline.allocator.shared_optimizer,
                beta1=config.beta1, beta2=config.beta2, prune_interval=config.prune_interval,
            )
            allocator.load_state_arrays(data.prefixed("importance"), meta["step"], meta["frozen"])
            allocator.adaptor_optimizer.load_state_dict(data.prefixed("optim/adaptor"))
            allocator.shared_optimizer.load_state_dict(data.prefixed("optim/shared"))
            pipeline.allocator = allocator
        else:
            pipeline.optimizer.load_state_dict(data.prefixed("optim/shared"))
        pipeline._say(f"Resumed from {checkpoint_path} at epoch {pipeline.start_epoch}, step {pipeline.step}")
        return pipeline


def load_trained_model(checkpoint_path: str):
    """(config, model) restored from a checkpoint, for evaluation and analysis"""
    data = CheckpointManager.load(checkpoint_path)
    config = parse_run_config(data.json_blob("config"), source=checkpoint_path)
    model = build_model(config.mode, config.backbone, rank=config.model_rank(), seed=config.seed)
    load_model_state(model, data)
    return config, model


def run_directory(config: RunConfig, output_dir: Optional[str] = None) -> Path:
    return Path(output_dir or config.output_dir or runs_dir() / f"{config.mode.value}_seed{config.seed}")


def latest_checkpoint(config: RunConfig, output_dir: Optional[str] = None) -> Path:
    """
    Newest checkpoint of a run directory.

    Raises:
        FileNotFoundError: If the run has not written any checkpoint yet
    """
    directory = run_directory(config, output_dir) / CHECKPOINT_DIR
    path = CheckpointManager(str(directory)).latest()
    if path is None:
        raise FileNotFoundError(
            f"No checkpoints found in {directory}. "
            "Please run `train` first to create them."
        )
    return path


def train(config: RunConfig, output_dir: Optional[str] = None, resume: Optional[str] = None) -> RunResult:
    if resume == RESUME_LATEST:
        output_dir = str(run_directory(config, output_dir))
        resume = str(latest_checkpoint(config, output_dir))
    if resume:
        return TrainPipeline.resume(resume, output_dir=output_dir, quiet=config.quiet).run()
    return TrainPipeline(config, output_dir=output_dir).run()


def evaluate(checkpoint_path: str, split: str = "val", dataset_path: Optional[str] = None) -> EvalResult:
    """
    Accuracy and per-class accuracy of a checkpointed model on one split.

    Deterministic and read-only: the model is rebuilt from the checkpoint every call.
    """
    config, model = load_trained_model(checkpoint_path)
    dataset = load_dataset_split(dataset_path or config.dataset_path, split)
    check_compatible(config, dataset)
    return accuracy_report(model, dataset, split)


"""
dataset.py
FORA1 split containers: generation, loading, batching and PNG previews
"""
import json
import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Sequence

import numpy as np
from PIL import Image
from tqdm import tqdm

from models.task import Batch
from synth.scene import DatasetConfig, build_scene, render_pair
from utils.config import read_json
from utils.errors import ConfigError, DatasetFormatError

logger = logging.getLogger(__name__)

MAGIC = b"FORA1"
HEADER = struct.Struct("<5i")  # height, width, channels, count, classes
HEADER_SIZE = len(MAGIC) + HEADER.size
SPLIT_SUFFIX = ".fora"
CONFIG_ECHO = "dataset.json"


@dataclass
class PairedDataset:
    """One loaded split: [N, C, H, W] visible and infrared arrays plus labels"""
    visible: np.ndarray
    infrared: np.ndarray
    labels: np.ndarray
    num_classes: int
    path: Optional[str] = None

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_modalities(self) -> int:
        return 2

    @property
    def image_shape(self):
        return self.visible.shape[1:]

    def modality(self, m: int) -> np.ndarray:
        return (self.visible, self.infrared)[m]

    def batch(self, indices: Sequence[int]) -> Batch:
        idx = np.asarray(indices)
        return Batch(xs=[self.visible[idx], self.infrared[idx]], labels=self.labels[idx])

    def batches(self, batch_size: int, rng: Optional[np.random.Generator] = None) -> Iterator[Batch]:
        """Consecutive batches; shuffled with `rng` when one is given"""
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for start in range(0, len(order), batch_size):
            yield self.batch(order[start:start + batch_size])


def split_path(out_dir: str, split: str) -> Path:
    return Path(out_dir) / f"{split}{SPLIT_SUFFIX}"


def load_dataset_config(path: str) -> DatasetConfig:
    return DatasetConfig.from_dict(read_json(path), source=path)


def make_dataset(
    config: DatasetConfig,
    out_dir: str,
    overwrite: bool = False,
    splits: Optional[Sequence[str]] = None,
    quiet: bool = False,
) -> List[Path]:
    """
    Generate and write FORA1 splits.

    Every sample draws from its own stream seeded by (seed, split index,
    sample index), so any split can be regenerated on its own.

    Args:
        config: generator settings
        out_dir: target directory
        overwrite: replace existing split files
        splits: subset of config.samples to write (default: all)

    Returns:
        Paths of the written split files
    """
    problems = config.validate()
    if problems:
        raise ConfigError(problems)
    wanted = list(config.samples) if splits is None else list(splits)
    unknown = [s for s in wanted if s not in config.samples]
    if unknown:
        raise ConfigError([f"unknown split {s!r}; config has {list(config.samples)}" for s in unknown])

    os.makedirs(out_dir, exist_ok=True)
    targets = [split_path(out_dir, s) for s in wanted]
    existing = [str(t) for t in targets if t.exists()]
    if existing and not overwrite:
        raise FileExistsError(
            f"Dataset files already exist: {', '.join(existing)}. "
            "Pass --overwrite to replace them."
        )

    split_names = list(config.samples)
    written = []
    for split, target in zip(wanted, targets):
        split_index = split_names.index(split)
        count = config.samples[split]
        labels = _balanced_labels(count, config.num_classes, config.seed, split_index)
        print(f"Generating {split}: {count} pairs -> {target}")
        with open(target, "wb") as f:
            f.write(MAGIC)
            f.write(HEADER.pack(config.height, config.width, config.channels, count, config.num_classes))
            for i in tqdm(range(count), desc=split, disable=quiet):
                rng = np.random.default_rng([config.seed, split_index, i])
                visible, infrared, label = render_pair(build_scene(config, int(labels[i]), rng), rng)
                f.write(visible.astype("<f4").tobytes())
                f.write(infrared.astype("<f4").tobytes())
                f.write(struct.pack("<i", label))
        written.append(target)

    with open(Path(out_dir) / CONFIG_ECHO, "w", encoding="utf-8") as f:
        json.dump(config.to_dict(), f, indent=2, sort_keys=True)
    return written


def _balanced_labels(count: int, num_classes: int, seed: int, split_index: int) -> np.ndarray:
    """Each class count within 1 of count / num_classes, in a seeded order"""
    labels = np.arange(count) % num_classes
    return np.random.default_rng([seed, split_index]).permutation(labels)


def load_split(path: str) -> PairedDataset:
    """
    Read one FORA1 container.

    Raises:
        FileNotFoundError: split missing
        DatasetFormatError: malformed header, truncated records or bad labels
    """
    if not os.path.exists(path):
        raise FileNotFoundError(
            f"Dataset split not found at {path}. "
            "Run `gen-data` first to create it."
        )
    raw = Path(path).read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise DatasetFormatError(f"bad magic {raw[:len(MAGIC)]!r}, expected {MAGIC!r}", 0, path)
    if len(raw) < HEADER_SIZE:
        raise DatasetFormatError(
            f"header truncated: {len(raw)} bytes, need {HEADER_SIZE}", len(raw), path
        )
    height, width, channels, count, classes = HEADER.unpack_from(raw, len(MAGIC))
    for name, value, field_offset in (
        ("height", height, 5), ("width", width, 9), ("channels", channels, 13), ("classes", classes, 21)
    ):
        if value < 1:
            raise DatasetFormatError(f"{name} must be >= 1, got {value}", field_offset, path)
    if count < 0:
        raise DatasetFormatError(f"count must be >= 0, got {count}", len(MAGIC) + 12, path)

    raster = (channels, height, width)
    record = np.dtype([("visible", "<f4", raster), ("infrared", "<f4", raster), ("label", "<i4")])
    body = len(raw) - HEADER_SIZE
    expected = count * record.itemsize
    if body < expected:
        complete = body // record.itemsize
        raise DatasetFormatError(
            f"record {complete} truncated: header promises {count} records of {record.itemsize} bytes",
            HEADER_SIZE + complete * record.itemsize, path,
        )
    if body > expected:
        raise DatasetFormatError(
            f"{body - expected} trailing bytes after {count} records", HEADER_SIZE + expected, path
        )

    records = np.frombuffer(raw, dtype=record, count=count, offset=HEADER_SIZE)
    labels = records["label"].astype(np.int64)
    bad = np.flatnonzero((labels < 0) | (labels >= classes))
    if len(bad):
        i = int(bad[0])
        label_offset = HEADER_SIZE + i * record.itemsize + record.fields["label"][1]
        raise DatasetFormatError(f"record {i} label {labels[i]} outside [0, {classes})", label_offset, path)

    dataset = PairedDataset(
        visible=records["visible"].astype(np.float64),
        infrared=records["infrared"].astype(np.float64),
        labels=labels,
        num_classes=classes,
        path=path,
    )
    logger.info("Loaded %s: %d pairs, %dx%dx%d, %d classes", path, count, channels, height, width, classes)
    return dataset


def load_dataset_split(dataset_path: str, split: str) -> PairedDataset:
    """Split `split` of a dataset directory, or the file itself when given one"""
    if os.path.isfile(dataset_path):
        return load_split(dataset_path)
    return load_split(str(split_path(dataset_path, split)))


def write_previews(dataset: PairedDataset, out_dir: str, count: int) -> List[Path]:
    """Save the first `count` pairs as side-by-side grayscale PNGs of channel 0"""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for i in range(min(count, len(dataset))):
        pair = np.concatenate([dataset.visible[i, 0], dataset.infrared[i, 0]], axis=1)
        low, high = pair.min(), pair.max()
        scaled = np.zeros_like(pair) if high == low else (pair - low) / (high - low)
        image = Image.fromarray((scaled * 255).round().astype(np.uint8))
        path = Path(out_dir) / f"pair_{i:04d}_label{dataset.labels[i]}.png"
        image.save(path)
        paths.append(path)
    return paths

"""
data_model.py
Shared configuration and descriptor types
"""
from dataclasses import dataclass, field, asdict
from typing import List, Optional, Dict, Any
from enum import Enum

# Defaults of the training protocol
DEFAULT_R_INIT = 9
DEFAULT_R_TARGET = 6
DEFAULT_EPOCHS = 50
DEFAULT_WARMUP_EPOCHS = 8
DEFAULT_DECAY_END_EPOCH = 25
DEFAULT_BETA = 0.85
DEFAULT_PRUNE_INTERVAL = 10

DEFAULT_MODALITY_NAMES = ["visible", "infrared"]
DEFAULT_TAPS = {"P3": 0, "P4": 1, "P5": 2}


class LayerKind(Enum):
    """Kinds of feature extraction layers that carry adaptors"""
    CONV = "conv"
    LINEAR = "linear"


class ModelMode(Enum):
    """Training modes of a run"""
    LMA_ADAPTIVE = "lma_adaptive"
    LMA_FIXED = "lma_fixed"
    TWO_STREAM = "two_stream"
    UNIMODAL = "unimodal"


class FeatureSource(Enum):
    """Where the features compared by the bias analysis come from"""
    SHARED_PATH = "shared_path"
    ADAPTOR_PATH = "adaptor_path"
    TWO_STREAM = "two_stream"
    RAW_INPUT = "raw_input"


class OptimizerKind(Enum):
    SGD = "sgd"
    ADAM = "adam"


@dataclass(frozen=True)
class ModalityId:
    """One input source of a paired sample"""
    index: int
    name: str


@dataclass
class BlockSpec:
    """A downsampling conv followed by (layers - 1) stride-1 convs"""
    channels: int
    kernel_size: int = 3
    stride: int = 2
    layers: int = 2


@dataclass
class HeadSpec:
    """Pooling plus optional adapted fully-connected layers, then the classifier"""
    pooling: str = "avg"
    hidden: List[int] = field(default_factory=list)


@dataclass(frozen=True)
class LayerGeometry:
    """Shape of one adapted layer; for linear layers kernel_size is 1"""
    kind: LayerKind
    c_in: int
    c_out: int
    kernel_size: int
    stride: int
    padding: int
    block: int

    @property
    def rows_out(self) -> int:
        return self.c_out * self.kernel_size

    @property
    def rows_in(self) -> int:
        return self.c_in * self.kernel_size

    @property
    def weight_shape(self) -> tuple:
        if self.kind == LayerKind.CONV:
            return (self.c_out, self.c_in, self.kernel_size, self.kernel_size)
        return (self.c_out, self.c_in)


@dataclass
class BackboneConfig:
    """Architecture of the shared backbone and its adaptors"""
    in_channels: int = 4
    num_classes: int = 4
    blocks: List[BlockSpec] = field(default_factory=lambda: [
        BlockSpec(8), BlockSpec(16), BlockSpec(32)
    ])
    taps: Dict[str, int] = field(default_factory=lambda: dict(DEFAULT_TAPS))
    head: HeadSpec = field(default_factory=HeadSpec)
    rank: int = DEFAULT_R_TARGET
    num_modalities: int = 2
    modality_names: List[str] = field(default_factory=lambda: list(DEFAULT_MODALITY_NAMES))

    def modalities(self) -> List[ModalityId]:
        names = list(self.modality_names)
        # Unnamed extra modalities get positional names
        while len(names) < self.num_modalities:
            names.append(f"modality{len(names)}")
        return [ModalityId(i, names[i]) for i in range(self.num_modalities)]

    def layer_geometries(self) -> List[LayerGeometry]:
        """Every adapted layer in data flow order"""
        geometries = []
        c_in = self.in_channels
        for b, block in enumerate(self.blocks):
            for l in range(block.layers):
                geometries.append(LayerGeometry(
                    kind=LayerKind.CONV,
                    c_in=c_in,
                    c_out=block.channels,
                    kernel_size=block.kernel_size,
                    stride=block.stride if l == 0 else 1,
                    padding=block.kernel_size // 2,
                    block=b,
                ))
                c_in = block.channels
        for width in self.head.hidden:
            geometries.append(LayerGeometry(
                kind=LayerKind.LINEAR, c_in=c_in, c_out=width,
                kernel_size=1, stride=1, padding=0, block=len(self.blocks),
            ))
            c_in = width
        return geometries

    @property
    def embedding_dim(self) -> int:
        if self.head.hidden:
            return self.head.hidden[-1]
        return self.blocks[-1].channels

    def validate(self, rank: Optional[int] = None) -> List[str]:
        """Return every problem found; empty means valid"""
        problems = []
        rank = self.rank if rank is None else rank
        if self.in_channels < 1:
            problems.append(f"backbone.in_channels must be >= 1, got {self.in_channels}")
        if self.num_classes < 2:
            problems.append(f"backbone.num_classes must be >= 2, got {self.num_classes}")
        if not self.blocks:
            problems.append("backbone.blocks must list at least one block")
        for b, block in enumerate(self.blocks):
            if block.channels < 1 or block.kernel_size < 1 or block.stride < 1 or block.layers < 1:
                problems.append(f"backbone.blocks[{b}] has a non-positive field: {asdict(block)}")
        for name, index in self.taps.items():
            if not 0 <= index < len(self.blocks):
                problems.append(f"backbone.taps.{name} references missing block {index}")
        if self.head.pooling != "avg":
            problems.append(f"backbone.head.pooling must be 'avg', got {self.head.pooling!r}")
        if any(w < 1 for w in self.head.hidden):
            problems.append(f"backbone.head.hidden widths must be >= 1, got {self.head.hidden}")
        if self.num_modalities < 1:
            problems.append(f"backbone.num_modalities must be >= 1, got {self.num_modalities}")
        if rank < 0:
            problems.append(f"rank must be >= 0, got {rank}")
        if not problems:
            for i, geo in enumerate(self.layer_geometries()):
                bound = min(geo.rows_out, geo.rows_in)
                if rank >= bound:
                    problems.append(
                        f"rank {rank} violates r < min(rows_out, rows_in) = {bound} "
                        f"at layer {i} ({geo.kind.value} {geo.c_in}->{geo.c_out}, K={geo.kernel_size})"
                    )
        return problems

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "BackboneConfig":
        data = dict(data)
        if "blocks" in data:
            data["blocks"] = [BlockSpec(**b) for b in data["blocks"]]
        if "head" in data:
            data["head"] = HeadSpec(**data["head"])
        return cls(**data)


@dataclass
class RunConfig:
    """Everything a training run needs; the config echo makes a run reproducible"""
    dataset_path: str
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    mode: ModelMode = ModelMode.LMA_ADAPTIVE
    r_init: int = DEFAULT_R_INIT
    r_target: int = DEFAULT_R_TARGET
    rank_fixed: Optional[int] = None
    epochs: int = DEFAULT_EPOCHS
    warmup_epochs: int = DEFAULT_WARMUP_EPOCHS
    decay_end_epoch: int = DEFAULT_DECAY_END_EPOCH
    batch_size: int = 8
    learning_rate: float = 0.05
    shared_learning_rate: Optional[float] = None
    beta1: float = DEFAULT_BETA
    beta2: float = DEFAULT_BETA
    prune_interval: Optional[int] = DEFAULT_PRUNE_INTERVAL
    optimizer: OptimizerKind = OptimizerKind.SGD
    seed: int = 0
    output_dir: Optional[str] = None
    checkpoint_every: int = 1
    train_split: str = "train"
    val_split: str = "val"
    quiet: bool = False

    def model_rank(self) -> int:
        """Adaptor rank the model is built with"""
        if self.mode == ModelMode.LMA_ADAPTIVE:
            return self.r_init
        if self.mode == ModelMode.LMA_FIXED:
            return self.r_target if self.rank_fixed is None else self.rank_fixed
        return 0

    def validate(self) -> List[str]:
        problems = []
        if not self.warmup_epochs < self.decay_end_epoch < self.epochs:
            problems.append(
                "epochs must satisfy warmup_epochs < decay_end_epoch < epochs, got "
                f"{self.warmup_epochs} / {self.decay_end_epoch} / {self.epochs}"
            )
        if self.warmup_epochs < 0:
            problems.append(f"warmup_epochs must be >= 0, got {self.warmup_epochs}")
        if self.r_target > self.r_init:
            problems.append(f"r_target ({self.r_target}) must be <= r_init ({self.r_init})")
        if self.r_target < 0:
            problems.append(f"r_target must be >= 0, got {self.r_target}")
        if self.rank_fixed is not None and self.rank_fixed < 0:
            problems.append(f"rank_fixed must be >= 0, got {self.rank_fixed}")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            problems.append(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.shared_learning_rate is not None and not self.shared_learning_rate > 0:
            problems.append(f"shared_learning_rate must be > 0, got {self.shared_learning_rate}")
        for name in ("beta1", "beta2"):
            value = getattr(self, name)
            if not 0 < value < 1:
                problems.append(f"{name} must lie in (0, 1), got {value}")
        if self.prune_interval is not None and self.prune_interval < 1:
            problems.append(f"prune_interval must be >= 1 or null, got {self.prune_interval}")
        if self.checkpoint_every < 1:
            problems.append(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")
        problems.extend(self.backbone.validate(rank=self.model_rank()))
        return problems

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["mode"] = self.mode.value
        data["optimizer"] = self.optimizer.value
        return data

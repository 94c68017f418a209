"""
backbone.py
Shared backbone with per-modality adaptors, plus the two-stream and
unimodal baselines it is compared against
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from adaptors.lowrank import LowRankAdaptor
from engine.ops import avg_pool_global, linear, relu
from engine.tensor import Tensor
from models.layers import SharedLayer
from utils.data_model import BackboneConfig, LayerKind, ModalityId, ModelMode
from utils.errors import ShapeError


@dataclass
class ForwardOutput:
    """Features recorded at each tap, the pooled embedding and the logits"""
    taps: Dict[str, Tensor]
    embedding: Tensor
    logits: Tensor


@dataclass
class SplitOutput:
    """
    Parallel-branch view of one modality's forward.

    taps map to (shared_path, adaptor_path) pre-activations; layers holds the
    same pair for every layer and merged the merged pre-activation it sums to.
    """
    taps: Dict[str, Tuple[Tensor, Tensor]] = field(default_factory=dict)
    layers: List[Tuple[Tensor, Tensor]] = field(default_factory=list)
    merged: List[Tensor] = field(default_factory=list)


def fuse(features: Sequence[Tensor]) -> Tensor:
    """Elementwise sum of per-modality features, left to right"""
    if not features:
        raise ShapeError("fuse needs at least one feature tensor")
    shape = features[0].shape
    for i, f in enumerate(features[1:], start=1):
        if f.shape != shape:
            raise ShapeError(f"fuse shape mismatch: feature 0 has {shape}, feature {i} has {f.shape}")
    fused = features[0]
    for f in features[1:]:
        fused = fused + f
    return fused


class LayerStack:
    """Feature extraction layers in data flow order"""

    def __init__(self, config: BackboneConfig, rng: np.random.Generator, name: str):
        self.config = config
        self.name = name
        self.layers = [
            SharedLayer(geo, rng, name=f"{name}.{i}")
            for i, geo in enumerate(config.layer_geometries())
        ]
        # Taps fire after the last layer of their block
        self.tap_after: Dict[int, List[str]] = {}
        last_in_block: Dict[int, int] = {}
        for i, layer in enumerate(self.layers):
            if layer.kind == LayerKind.CONV:
                last_in_block[layer.geometry.block] = i
        for tap, block in config.taps.items():
            self.tap_after.setdefault(last_in_block[block], []).append(tap)

    def conv_layers(self) -> List[SharedLayer]:
        return [l for l in self.layers if l.kind == LayerKind.CONV]

    def fc_layers(self) -> List[SharedLayer]:
        return [l for l in self.layers if l.kind == LayerKind.LINEAR]

    def forward(
        self, x: Tensor, modality: Optional[int], pre_activation_taps: bool = False
    ) -> Tuple[Dict[str, Tensor], Tensor]:
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ShapeError(
                f"{self.name}: expected input [N, {self.config.in_channels}, H, W], got {x.shape}"
            )
        taps: Dict[str, Tensor] = {}
        h = x
        for i, layer in enumerate(self.conv_layers()):
            pre = layer.forward(h, modality)
            h = relu(pre)
            for tap in self.tap_after.get(i, []):
                taps[tap] = pre if pre_activation_taps else h
        embedding = avg_pool_global(h)
        for layer in self.fc_layers():
            embedding = relu(layer.forward(embedding, modality))
        return taps, embedding

    def forward_split(self, x: Tensor, modality: int) -> SplitOutput:
        out = SplitOutput()
        h = x
        for i, layer in enumerate(self.layers):
            if layer.kind == LayerKind.LINEAR and h.ndim == 4:
                h = avg_pool_global(h)
            shared, adaptor = layer.forward_split(h, modality)
            merged = layer.forward(h, modality)
            out.layers.append((shared, adaptor))
            out.merged.append(merged)
            for tap in self.tap_after.get(i, []):
                out.taps[tap] = (shared, adaptor)
            h = relu(merged)
        return out

    def parameters(self) -> Dict[str, Tensor]:
        params = {}
        for layer in self.layers:
            params.update(layer.parameters())
        return params

    def shared_param_count(self) -> int:
        return sum(layer.shared_param_count() for layer in self.layers)


class MultimodalModel:
    """Common surface of every model kind: stacks, a shared head, fused forward"""
    mode: ModelMode

    def __init__(self, config: BackboneConfig, stacks: List[LayerStack], rng: np.random.Generator):
        self.config = config
        self.stacks = stacks
        self.modalities = config.modalities()
        dim = config.embedding_dim
        self.head_weight = Tensor(
            rng.normal(0.0, np.sqrt(1.0 / dim), size=(config.num_classes, dim)),
            requires_grad=True, name="head.weight",
        )
        self.head_bias = Tensor(np.zeros(config.num_classes), requires_grad=True, name="head.bias")

    # Subclasses pick the stack and adaptor for a modality
    def _stack_for(self, modality: int) -> Tuple[LayerStack, Optional[int]]:
        raise NotImplementedError

    def check_modality(self, modality: int) -> None:
        if not 0 <= modality < len(self.modalities):
            raise ShapeError(
                f"unknown modality {modality}; model has {len(self.modalities)} "
                f"({', '.join(m.name for m in self.modalities)})"
            )

    def head(self, embedding: Tensor) -> Tensor:
        return linear(embedding, self.head_weight, self.head_bias)

    def forward_modality(self, x: Tensor, modality: int, pre_activation_taps: bool = False) -> ForwardOutput:
        self.check_modality(modality)
        stack, adaptor_index = self._stack_for(modality)
        taps, embedding = stack.forward(x, adaptor_index, pre_activation_taps)
        return ForwardOutput(taps=taps, embedding=embedding, logits=self.head(embedding))

    def forward_fused(self, xs: Sequence[Tensor]) -> Tensor:
        """Logits of the multimodal task: head(sum of per-modality embeddings)"""
        if len(xs) != len(self.modalities):
            raise ShapeError(f"expected {len(self.modalities)} modality inputs, got {len(xs)}")
        embeddings = []
        for m, x in enumerate(xs):
            stack, adaptor_index = self._stack_for(m)
            embeddings.append(stack.forward(x, adaptor_index)[1])
        return self.head(fuse(embeddings))

    def parameters(self) -> Dict[str, Tensor]:
        params = {}
        for stack in self.stacks:
            params.update(stack.parameters())
        params["head.weight"] = self.head_weight
        params["head.bias"] = self.head_bias
        return params

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def num_params(self) -> int:
        """Scalars actually stored"""
        return sum(p.size for p in self.parameters().values())

    def head_param_count(self) -> int:
        return self.head_weight.size + self.head_bias.size

    def unimodal_param_count(self) -> int:
        """One stack plus the head: the model this one extends"""
        return self.stacks[0].shared_param_count() + self.head_param_count()

    def adaptor_entries(self) -> List[Tuple[Tuple[int, int], LowRankAdaptor]]:
        """((layer, modality), adaptor) in allocation order; empty without adaptors"""
        return []


class LMAModel(MultimodalModel):
    """One shared stack; every layer holds one low-rank adaptor per modality"""
    mode = ModelMode.LMA_FIXED

    def __init__(self, config: BackboneConfig, rank: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        super().__init__(config, [LayerStack(config, rng, name="layers")], rng)
        self.rank = rank
        self._adaptor_rng = rng
        for layer in self.stack.layers:
            for modality in self.modalities:
                layer.add_adaptor(modality, rank, rng)

    @property
    def stack(self) -> LayerStack:
        return self.stacks[0]

    def _stack_for(self, modality: int) -> Tuple[LayerStack, Optional[int]]:
        return self.stack, modality

    def forward_split(self, x: Tensor, modality: int) -> SplitOutput:
        self.check_modality(modality)
        return self.stack.forward_split(x, modality)

    def adaptor_entries(self) -> List[Tuple[Tuple[int, int], LowRankAdaptor]]:
        entries = []
        for l, layer in enumerate(self.stack.layers):
            for m in sorted(layer.adaptors):
                entries.append(((l, m), layer.adaptors[m]))
        return entries

    def adaptor_param_count(self, modality: Optional[int] = None) -> int:
        return sum(
            a.num_params() for (l, m), a in self.adaptor_entries()
            if modality is None or m == modality
        )

    def add_modality(self, name: str, seed: Optional[int] = None) -> ModalityId:
        """Attach a fresh zero-Lambda adaptor for a new modality to every layer"""
        rng = self._adaptor_rng if seed is None else np.random.default_rng(seed)
        modality = ModalityId(len(self.modalities), name)
        for layer in self.stack.layers:
            layer.add_adaptor(modality, self.rank, rng)
        self.modalities.append(modality)
        return modality

    def export_modality(self, modality: int) -> "UnimodalModel":
        """Plain network whose kernels are this model's merged kernels for one modality"""
        self.check_modality(modality)
        plain = UnimodalModel(self.config, seed=0)
        for src, dst in zip(self.stack.layers, plain.stack.layers):
            dst.weight.data = src.kernel_for(modality).data.copy()
            dst.bias.data = src.bias.data.copy()
        plain.head_weight.data = self.head_weight.data.copy()
        plain.head_bias.data = self.head_bias.data.copy()
        return plain


class TwoStreamModel(MultimodalModel):
    """Fully independent stack per modality, fused by addition; no adaptors"""
    mode = ModelMode.TWO_STREAM

    def __init__(self, config: BackboneConfig, seed: int = 0, identical_streams: bool = False):
        rng = np.random.default_rng(seed)
        stacks = [LayerStack(config, rng, name=f"streams.{m}") for m in range(config.num_modalities)]
        if identical_streams:
            for stack in stacks[1:]:
                for src, dst in zip(stacks[0].layers, stack.layers):
                    dst.weight.data = src.weight.data.copy()
                    dst.bias.data = src.bias.data.copy()
        super().__init__(config, stacks, rng)

    def _stack_for(self, modality: int) -> Tuple[LayerStack, Optional[int]]:
        return self.stacks[modality], None


class UnimodalModel(MultimodalModel):
    """One stack without adaptors; multimodal batches use only modality 0"""
    mode = ModelMode.UNIMODAL

    def __init__(self, config: BackboneConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        super().__init__(config, [LayerStack(config, rng, name="layers")], rng)

    @property
    def stack(self) -> LayerStack:
        return self.stacks[0]

    def check_modality(self, modality: int) -> None:
        if modality != 0:
            raise ShapeError(f"unimodal model only accepts modality 0, got {modality}")

    def _stack_for(self, modality: int) -> Tuple[LayerStack, Optional[int]]:
        return self.stack, None

    def forward_fused(self, xs: Sequence[Tensor]) -> Tensor:
        if not xs:
            raise ShapeError("expected at least one modality input")
        return self.head(self.stack.forward(xs[0], None)[1])


def build_lma(config: BackboneConfig, rank: Optional[int] = None, seed: int = 0) -> LMAModel:
    return LMAModel(config, config.rank if rank is None else rank, seed=seed)


def build_two_stream(config: BackboneConfig, seed: int = 0, identical_streams: bool = False) -> TwoStreamModel:
    return TwoStreamModel(config, seed=seed, identical_streams=identical_streams)


def build_unimodal(config: BackboneConfig, seed: int = 0) -> UnimodalModel:
    return UnimodalModel(config, seed=seed)


def build_model(mode: ModelMode, config: BackboneConfig, rank: int = 0, seed: int = 0) -> MultimodalModel:
    """Model for a training mode; LMA modes get adaptors of the given rank"""
    if mode in (ModelMode.LMA_ADAPTIVE, ModelMode.LMA_FIXED):
        model = build_lma(config, rank, seed)
        model.mode = mode
        return model
    if mode == ModelMode.TWO_STREAM:
        return build_two_stream(config, seed)
    return build_unimodal(config, seed)

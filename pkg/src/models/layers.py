"""
layers.py
Shared feature-extraction layer carrying one adaptor per modality
"""
from typing import Dict, Optional, Tuple

import numpy as np

from adaptors.lowrank import LowRankAdaptor, merged_kernel
from engine.ops import conv2d, linear
from engine.tensor import Tensor
from utils.data_model import LayerGeometry, LayerKind, ModalityId
from utils.errors import ShapeError


def init_weight(geometry: LayerGeometry, rng: np.random.Generator) -> np.ndarray:
    """He-normal init for a layer followed by ReLU"""
    fan_in = geometry.c_in * geometry.kernel_size * geometry.kernel_size
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=geometry.weight_shape)


class SharedLayer:
    """
    Convolution or fully-connected layer whose kernel is shared by all
    modalities; each modality adds its own low-rank adaptor kernel.
    The bias is shared and never adapted.
    """

    def __init__(self, geometry: LayerGeometry, rng: np.random.Generator, name: str = "layer"):
        self.geometry = geometry
        self.name = name
        self.weight = Tensor(init_weight(geometry, rng), requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(geometry.c_out), requires_grad=True, name=f"{name}.bias")
        self.adaptors: Dict[int, LowRankAdaptor] = {}

    @property
    def kind(self) -> LayerKind:
        return self.geometry.kind

    def add_adaptor(self, modality: ModalityId, rank: int, rng: np.random.Generator) -> LowRankAdaptor:
        adaptor = LowRankAdaptor(
            self.geometry, rank, rng, name=f"{self.name}.adaptor.{modality.index}"
        )
        self.adaptors[modality.index] = adaptor
        return adaptor

    def kernel_for(self, modality: Optional[int]) -> Tensor:
        """Merged kernel for a modality; the shared kernel when modality is None"""
        if modality is None or not self.adaptors:
            return self.weight
        if modality not in self.adaptors:
            raise ShapeError(f"{self.name}: no adaptor for modality {modality}")
        return merged_kernel(self.weight, self.adaptors[modality])

    def apply(self, x: Tensor, kernel: Tensor, bias: Optional[Tensor]) -> Tensor:
        """Run the layer's op with an explicit kernel (pre-activation)"""
        if self.kind == LayerKind.CONV:
            return conv2d(x, kernel, bias, stride=self.geometry.stride, padding=self.geometry.padding)
        return linear(x, kernel, bias)

    def forward(self, x: Tensor, modality: Optional[int]) -> Tensor:
        return self.apply(x, self.kernel_for(modality), self.bias)

    def forward_split(self, x: Tensor, modality: int) -> Tuple[Tensor, Tensor]:
        """Shared branch (with bias) and adaptor branch (no bias) run separately"""
        shared = self.apply(x, self.weight, self.bias)
        if modality not in self.adaptors:
            raise ShapeError(f"{self.name}: no adaptor for modality {modality}")
        adaptor = self.apply(x, self.adaptors[modality].materialize(), None)
        return shared, adaptor

    def parameters(self) -> Dict[str, Tensor]:
        params = {f"{self.name}.weight": self.weight, f"{self.name}.bias": self.bias}
        for index, adaptor in sorted(self.adaptors.items()):
            for key, tensor in adaptor.parameters().items():
                params[f"{adaptor.name}.{key}"] = tensor
        return params

    def shared_param_count(self) -> int:
        return self.weight.size + self.bias.size

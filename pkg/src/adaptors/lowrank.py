"""
lowrank.py
SVD-triplet modal adaptors: M = P diag(Lambda) Q, reshaped onto a layer kernel
"""
import logging
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from engine.tensor import Tensor
from utils.data_model import LayerGeometry, LayerKind
from utils.errors import ShapeError

logger = logging.getLogger(__name__)

ADAPTOR_INIT_STD = 0.02


@dataclass
class ParamCountReport:
    """Closed-form parameter accounting for one adapted layer"""
    adaptor_params: int
    shared_params: int
    admissible_rank_bound: int
    increment_percent: float


def count_params(c1: int, c2: int, k: int, r: int, unimodal_total: Optional[int] = None) -> ParamCountReport:
    """
    Adaptor and shared-kernel parameter counts for one layer.

    Args:
        c1: input channels (Din for linear layers)
        c2: output channels (Dout for linear layers)
        k: kernel extent (1 for linear layers)
        r: adaptor rank
        unimodal_total: denominator of the increment; defaults to the shared kernel size
    """
    per_rank = k * (c1 + c2) + 1
    shared = c1 * c2 * k * k
    adaptor = r * per_rank
    denominator = shared if unimodal_total is None else unimodal_total
    return ParamCountReport(
        adaptor_params=adaptor,
        shared_params=shared,
        admissible_rank_bound=shared // per_rank,
        increment_percent=100.0 * adaptor / denominator if denominator else 0.0,
    )


class LowRankAdaptor:
    """
    One modality's adaptor for one layer.

    P holds the left vectors as columns, Q the right vectors as rows and
    Lambda the singular values. Triplet i is (P[:, i], Lambda[i], Q[i, :]);
    a masked triplet keeps its storage but has Lambda[i] == 0.
    """

    def __init__(
        self,
        geometry: LayerGeometry,
        rank: int,
        rng: np.random.Generator,
        init_std: float = ADAPTOR_INIT_STD,
        name: str = "adaptor",
    ):
        bound = min(geometry.rows_out, geometry.rows_in)
        if not 0 <= rank < bound:
            raise ShapeError(
                f"{name}: rank {rank} violates r < min(rows_out={geometry.rows_out}, "
                f"rows_in={geometry.rows_in}) = {bound}"
            )
        report = count_params(geometry.c_in, geometry.c_out, geometry.kernel_size, rank)
        if rank > report.admissible_rank_bound:
            logger.warning(
                "%s: rank %d exceeds the admissible bound %d; adaptor (%d) outgrows the shared kernel (%d)",
                name, rank, report.admissible_rank_bound, report.adaptor_params, report.shared_params,
            )
        self.geometry = geometry
        self.name = name
        self.P = Tensor(rng.normal(0.0, init_std, size=(geometry.rows_out, rank)), requires_grad=True, name=f"{name}.P")
        self.Lambda = Tensor(np.zeros(rank), requires_grad=True, name=f"{name}.Lambda")
        self.Q = Tensor(rng.normal(0.0, init_std, size=(rank, geometry.rows_in)), requires_grad=True, name=f"{name}.Q")
        self.mask = np.ones(rank, dtype=bool)

    @classmethod
    def from_arrays(
        cls,
        geometry: LayerGeometry,
        P: np.ndarray,
        Lambda: np.ndarray,
        Q: np.ndarray,
        mask: np.ndarray,
        name: str = "adaptor",
    ) -> "LowRankAdaptor":
        """Rebuild an adaptor from stored arrays (checkpoint load)"""
        rank = Lambda.shape[0]
        expected = {
            "P": (geometry.rows_out, rank), "Lambda": (rank,),
            "Q": (rank, geometry.rows_in), "mask": (rank,),
        }
        for key, array in (("P", P), ("Lambda", Lambda), ("Q", Q), ("mask", mask)):
            if array.shape != expected[key]:
                raise ShapeError(f"{name}.{key}: expected shape {expected[key]}, got {array.shape}")
        adaptor = cls.__new__(cls)
        adaptor.geometry = geometry
        adaptor.name = name
        adaptor.P = Tensor(P, requires_grad=True, name=f"{name}.P")
        adaptor.Lambda = Tensor(Lambda, requires_grad=True, name=f"{name}.Lambda")
        adaptor.Q = Tensor(Q, requires_grad=True, name=f"{name}.Q")
        adaptor.mask = np.asarray(mask, dtype=bool).copy()
        adaptor.check_invariants()
        return adaptor

    @property
    def target_shape(self) -> Tuple[int, ...]:
        return self.geometry.weight_shape

    @property
    def rank(self) -> int:
        """Stored triplets, active or not"""
        return int(self.Lambda.shape[0])

    @property
    def active_rank(self) -> int:
        return int(self.mask.sum())

    def parameters(self) -> Dict[str, Tensor]:
        return {"P": self.P, "Lambda": self.Lambda, "Q": self.Q}

    def num_params(self) -> int:
        return self.P.size + self.Lambda.size + self.Q.size

    def check_invariants(self) -> None:
        if np.any(self.Lambda.data[~self.mask] != 0.0):
            raise ShapeError(f"{self.name}: masked triplets must have Lambda == 0")

    def materialize(self) -> Tensor:
        """Adaptor kernel in the layer's weight shape"""
        # Masked triplets hold Lambda == 0, so P diag(Lambda) Q already drops them
        # while Lambda still receives the gradient that allows revival
        matrix = (self.P * self.Lambda) @ self.Q
        if self.geometry.kind == LayerKind.LINEAR:
            return matrix
        c2, c1, k, _ = self.target_shape
        # M[c2*K + kh, c1*K + kw] -> kernel[c2, c1, kh, kw]
        return matrix.reshape(c2, k, c1, k).transpose(0, 2, 1, 3)

    def apply_mask(self, mask: np.ndarray, lambdas: np.ndarray) -> None:
        """Install new singular values and mask; inactive triplets get Lambda = 0"""
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (self.rank,) or lambdas.shape != (self.rank,):
            raise ShapeError(f"{self.name}: mask/lambdas must have shape ({self.rank},)")
        self.mask = mask.copy()
        self.Lambda.data = np.where(mask, lambdas, 0.0)

    def compact(self) -> np.ndarray:
        """
        Physically drop inactive triplets.

        Returns:
            indices of the kept triplets in the old numbering
        """
        keep = np.flatnonzero(self.mask)
        self.P = Tensor(self.P.data[:, keep], requires_grad=True, name=self.P.name)
        self.Lambda = Tensor(self.Lambda.data[keep], requires_grad=True, name=self.Lambda.name)
        self.Q = Tensor(self.Q.data[keep, :], requires_grad=True, name=self.Q.name)
        self.mask = np.ones(len(keep), dtype=bool)
        return keep


def materialize(adaptor: LowRankAdaptor) -> Tensor:
    return adaptor.materialize()


def merged_kernel(shared: Tensor, adaptor: LowRankAdaptor) -> Tensor:
    """Effective modality kernel: shared kernel plus the materialized adaptor"""
    if shared.shape != adaptor.target_shape:
        raise ShapeError(
            f"shared kernel shape {shared.shape} does not match adaptor target {adaptor.target_shape}"
        )
    return shared + adaptor.materialize()

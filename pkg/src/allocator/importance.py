"""
importance.py
Per-entry sensitivity, its smoothed estimate and uncertainty, and triplet scores
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from adaptors.lowrank import LowRankAdaptor
from utils.errors import ConfigError, GradientError

AdaptorKey = Tuple[int, int]
PARAM_KEYS = ("P", "Lambda", "Q")


@dataclass
class EntryStats:
    """Smoothed importance and uncertainty for every entry of one parameter"""
    I_bar: np.ndarray
    U_bar: np.ndarray

    @property
    def score(self) -> np.ndarray:
        return self.I_bar * self.U_bar


@dataclass
class ImportanceState:
    """Stats for every P, Lambda and Q entry of every adaptor, keyed by (layer, modality)"""
    stats: Dict[AdaptorKey, Dict[str, EntryStats]] = field(default_factory=dict)
    it: int = 0

    @classmethod
    def for_adaptors(cls, entries: Sequence[Tuple[AdaptorKey, LowRankAdaptor]]) -> "ImportanceState":
        state = cls()
        for key, adaptor in entries:
            state.stats[key] = {
                name: EntryStats(np.zeros_like(t.data), np.zeros_like(t.data))
                for name, t in adaptor.parameters().items()
            }
        return state


@dataclass(frozen=True)
class TripletScore:
    k: int
    i: int
    score: float


def entry_importance(value: np.ndarray, grad: Optional[np.ndarray], singular: bool) -> np.ndarray:
    """
    Basic importance of each entry.

    Singular values use |value * grad|; vector entries use |grad| alone.
    """
    if grad is None:
        raise GradientError("entry_importance needs a populated gradient; run backward first")
    if singular:
        return np.abs(value * grad)
    return np.abs(grad)


def check_betas(beta1: float, beta2: float) -> None:
    problems = [f"{n} must lie in (0, 1), got {b}" for n, b in (("beta1", beta1), ("beta2", beta2)) if not 0 < b < 1]
    if problems:
        raise ConfigError(problems)


def update_importance(
    state: ImportanceState,
    fresh: Dict[AdaptorKey, Dict[str, np.ndarray]],
    beta1: float,
    beta2: float,
) -> ImportanceState:
    """EMA of importance, then EMA of |I - I_bar| against the updated I_bar"""
    check_betas(beta1, beta2)
    for key, per_param in fresh.items():
        for name, I in per_param.items():
            stats = state.stats[key][name]
            stats.I_bar = beta1 * stats.I_bar + (1.0 - beta1) * I
            stats.U_bar = beta2 * stats.U_bar + (1.0 - beta2) * np.abs(I - stats.I_bar)
    state.it += 1
    return state


def adaptor_importance(adaptor: LowRankAdaptor) -> Dict[str, np.ndarray]:
    return {
        name: entry_importance(t.data, t.grad, singular=(name == "Lambda"))
        for name, t in adaptor.parameters().items()
    }


def triplet_scores(
    state: ImportanceState, entries: Sequence[Tuple[AdaptorKey, LowRankAdaptor]]
) -> List[TripletScore]:
    """
    Score of triplet i in adaptor k: s(Lambda_i) + mean s(P[:, i]) + mean s(Q[i, :]),
    with s = I_bar * U_bar. Returned in (k, i) order.
    """
    scores = []
    for k, (key, adaptor) in enumerate(entries):
        stats = state.stats[key]
        s_lambda = stats["Lambda"].score
        s_p = stats["P"].score.mean(axis=0) if adaptor.P.shape[0] else np.zeros(adaptor.rank)
        s_q = stats["Q"].score.mean(axis=1) if adaptor.Q.shape[1] else np.zeros(adaptor.rank)
        combined = s_lambda + s_p + s_q
        if not np.all(np.isfinite(combined)) or np.any(combined < 0):
            raise GradientError(f"{adaptor.name}: triplet scores must be finite and >= 0")
        scores.extend(TripletScore(k, i, float(combined[i])) for i in range(adaptor.rank))
    return scores

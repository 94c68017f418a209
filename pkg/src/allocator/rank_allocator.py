"""
rank_allocator.py
Importance-aware adaptive rank allocation: score, update, prune to the
scheduled budget, then freeze and compact the surviving triplets
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from adaptors.lowrank import LowRankAdaptor
from allocator.importance import (
    AdaptorKey, ImportanceState, TripletScore, adaptor_importance,
    check_betas, triplet_scores, update_importance,
)
from allocator.optim import SGD, Optimizer
from allocator.schedule import BudgetSchedule
from engine.tensor import backward
from models.backbone import LMAModel
from models.task import Batch, LossFn, classification_loss, shared_parameters
from utils.errors import ConfigError, GradientError, LMAError

logger = logging.getLogger(__name__)

TripletId = Tuple[int, int]
AdaptorEntries = Sequence[Tuple[AdaptorKey, LowRankAdaptor]]

# Axis of the triplet index in each adaptor parameter
_TRIPLET_AXIS = {"P": 1, "Lambda": 0, "Q": 0}


@dataclass
class PruneResult:
    """New singular values and masks per adaptor, in adaptor order k"""
    lambdas: List[np.ndarray]
    masks: List[np.ndarray]
    kept: List[TripletId]


@dataclass
class PruneEvent:
    """One top-b evaluation, as written to the metrics stream"""
    step: int
    budget: int
    active_ranks: List[int]
    kept: List[TripletId]
    dropped: List[TripletId] = field(default_factory=list)
    revived: List[TripletId] = field(default_factory=list)


def adaptor_step(entries: AdaptorEntries, optimizer: Optimizer) -> List[np.ndarray]:
    """
    Update P and Q in place and return the provisional singular values.

    The provisional values are computed from the current Lambda for every
    triplet, masked ones included, which is what lets a triplet come back.
    """
    provisional = []
    for _, adaptor in entries:
        for key in ("P", "Q"):
            t = adaptor.parameters()[key]
            if t.grad is None:
                raise GradientError(f"{t.name}: missing gradient; run backward first")
            t.data = optimizer.update(t.name, t.data, t.grad)
        lam = adaptor.Lambda
        if lam.grad is None:
            raise GradientError(f"{lam.name}: missing gradient; run backward first")
        provisional.append(optimizer.update(lam.name, lam.data, lam.grad))
    return provisional


def sgd_step(entries: AdaptorEntries, learning_rate: float) -> List[np.ndarray]:
    """Plain gradient descent on every adaptor; see adaptor_step"""
    return adaptor_step(entries, SGD(learning_rate))


def prune_to_budget(
    scores: Sequence[TripletScore], provisional: Sequence[np.ndarray], budget: int
) -> PruneResult:
    """
    Keep the `budget` highest-scoring triplets across all adaptors.

    Equal scores are broken by lower (k, i). Kept triplets take their
    provisional Lambda, all others get Lambda = 0 and an inactive mask.
    """
    total = sum(len(p) for p in provisional)
    if len(scores) != total:
        raise ConfigError([f"got {len(scores)} scores for {total} triplets"])
    if not 0 <= budget <= total:
        raise ConfigError([f"budget {budget} outside [0, {total}] triplets"])

    ranked = sorted(scores, key=lambda s: (-s.score, s.k, s.i))
    kept = sorted((s.k, s.i) for s in ranked[:budget])
    masks = [np.zeros(len(p), dtype=bool) for p in provisional]
    for k, i in kept:
        masks[k][i] = True
    lambdas = [np.where(mask, p, 0.0) for mask, p in zip(masks, provisional)]
    return PruneResult(lambdas=lambdas, masks=masks, kept=kept)


def topb_oracle(scores: Sequence[TripletScore], budget: int) -> List[TripletId]:
    """Independent full-sort top-b, used to cross-check prune_to_budget"""
    if budget == 0 or not scores:
        return []
    k = np.array([s.k for s in scores])
    i = np.array([s.i for s in scores])
    value = np.array([s.score for s in scores])
    # lexsort sorts by the last key first
    order = np.lexsort((i, k, -value))[:budget]
    return sorted(zip(k[order].tolist(), i[order].tolist()))


class RankAllocator:
    """
    Drives one LMA model through the allocation schedule.

    Without a schedule (fixed-rank mode) it only runs the step rule and keeps
    every mask as it is.
    """

    def __init__(
        self,
        model: LMAModel,
        schedule: Optional[BudgetSchedule],
        adaptor_optimizer: Optimizer,
        shared_optimizer: Optional[Optimizer] = None,
        beta1: float = 0.85,
        beta2: float = 0.85,
        prune_interval: Optional[int] = 10,
        loss_fn: LossFn = classification_loss,
        verify_with_oracle: bool = False,
    ):
        check_betas(beta1, beta2)
        if prune_interval is not None and prune_interval < 1:
            raise ConfigError([f"prune_interval must be >= 1 or None, got {prune_interval}"])
        self.model = model
        self.schedule = schedule
        self.adaptor_optimizer = adaptor_optimizer
        self.shared_optimizer = shared_optimizer or adaptor_optimizer
        self.beta1 = beta1
        self.beta2 = beta2
        self.prune_interval = prune_interval
        self.loss_fn = loss_fn
        self.verify_with_oracle = verify_with_oracle
        self.state = ImportanceState.for_adaptors(model.adaptor_entries())
        self.frozen = False
        self.events: List[PruneEvent] = []

    @property
    def adaptive(self) -> bool:
        return self.schedule is not None

    def active_ranks(self) -> List[int]:
        return [a.active_rank for _, a in self.model.adaptor_entries()]

    def total_active_rank(self) -> int:
        return sum(self.active_ranks())

    def should_prune(self, it: int) -> bool:
        if not self.adaptive or self.frozen or self.prune_interval is None:
            return False
        s = self.schedule
        if not s.warmup_end < it <= s.decay_end:
            return False
        return it % self.prune_interval == 0 or it == s.decay_end

    def allocation_step(self, batch: Batch, it: int) -> Tuple[float, np.ndarray, Optional[PruneEvent]]:
        """
        One training step at global step index `it` (0-based).

        Returns:
            (loss value, logits array, prune event or None)
        """
        if self.adaptive and it >= self.schedule.total_steps:
            raise ConfigError([f"step {it} is past the schedule's {self.schedule.total_steps} steps"])
        model = self.model
        entries = model.adaptor_entries()

        model.zero_grad()
        loss, logits = self.loss_fn(model, batch)
        backward(loss)

        if self.adaptive and not self.frozen:
            fresh = {key: adaptor_importance(adaptor) for key, adaptor in entries}
            update_importance(self.state, fresh, self.beta1, self.beta2)

        provisional = adaptor_step(entries, self.adaptor_optimizer)
        for name, p in shared_parameters(model).items():
            p.data = self.shared_optimizer.update(name, p.data, p.grad)

        event = None
        if self.should_prune(it):
            event = self.prune(it, provisional)
        else:
            for (_, adaptor), lam in zip(entries, provisional):
                adaptor.apply_mask(adaptor.mask, lam)

        if self.adaptive and not self.frozen and it >= self.schedule.decay_end:
            self.freeze()
        return loss.item(), logits.data, event

    def prune(self, it: int, provisional: Sequence[np.ndarray]) -> PruneEvent:
        """Evaluate top-b membership at step `it` and install the result"""
        entries = self.model.adaptor_entries()
        budget = self.schedule.budget(it)
        scores = triplet_scores(self.state, entries)
        result = prune_to_budget(scores, provisional, budget)
        if self.verify_with_oracle:
            expected = topb_oracle(scores, budget)
            if expected != result.kept:
                raise LMAError(f"step {it}: kept set disagrees with the full-sort oracle")

        before = [adaptor.mask.copy() for _, adaptor in entries]
        for (_, adaptor), mask, lam in zip(entries, result.masks, result.lambdas):
            adaptor.apply_mask(mask, lam)

        dropped, revived = [], []
        for k, (old, new) in enumerate(zip(before, result.masks)):
            dropped.extend((k, int(i)) for i in np.flatnonzero(old & ~new))
            revived.extend((k, int(i)) for i in np.flatnonzero(~old & new))
        event = PruneEvent(
            step=it, budget=budget, active_ranks=self.active_ranks(),
            kept=result.kept, dropped=dropped, revived=revived,
        )
        self.events.append(event)
        logger.debug(
            "prune at step %d: budget %d, dropped %d, revived %d",
            it, budget, len(dropped), len(revived),
        )
        return event

    def freeze(self) -> None:
        """Fix the allocation: drop inactive triplets from storage and optimizer state"""
        for _, adaptor in self.model.adaptor_entries():
            keep = adaptor.compact()
            for key, t in adaptor.parameters().items():
                self.adaptor_optimizer.select(t.name, keep, _TRIPLET_AXIS[key])
        self.frozen = True
        logger.info("Rank allocation frozen at total active rank %d", self.total_active_rank())

    def state_arrays(self) -> Dict[str, np.ndarray]:
        """Importance statistics as flat named arrays, for checkpoints"""
        arrays = {}
        for (l, m), per_param in self.state.stats.items():
            for key, stats in per_param.items():
                arrays[f"{l}.{m}.{key}.I_bar"] = stats.I_bar
                arrays[f"{l}.{m}.{key}.U_bar"] = stats.U_bar
        return arrays

    def load_state_arrays(self, arrays: Dict[str, np.ndarray], it: int, frozen: bool) -> None:
        self.frozen = frozen
        self.state.it = it
        if frozen:
            return
        for (l, m), per_param in self.state.stats.items():
            for key, stats in per_param.items():
                stats.I_bar = arrays[f"{l}.{m}.{key}.I_bar"].copy()
                stats.U_bar = arrays[f"{l}.{m}.{key}.U_bar"].copy()

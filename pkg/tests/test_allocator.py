import numpy as np
import pytest

from allocator.importance import (
    EntryStats, ImportanceState, TripletScore, entry_importance,
    triplet_scores, update_importance,
)
from allocator.optim import SGD, Adam, make_optimizer
from allocator.rank_allocator import RankAllocator, prune_to_budget, sgd_step, topb_oracle
from allocator.schedule import BudgetSchedule
from conftest import KINK_MARGIN, has_tiny_gradient, tiny_backbone
from engine.grad_check import finite_diff_check
from engine.tensor import Tensor, backward, no_grad
from models.backbone import build_lma
from models.task import Batch, classification_loss
from utils.data_model import OptimizerKind
from utils.errors import ConfigError, GradientError, LMAError


def random_batch(rng, size=4, classes=2):
    return Batch(
        xs=[rng.normal(size=(size, 2, 8, 8)) for _ in range(2)],
        labels=np.arange(size) % classes,
    )


def scores_of(values, k=0):
    return [TripletScore(k, i, v) for i, v in enumerate(values)]


class TestEntryImportance:
    def test_singular_value(self):
        assert entry_importance(np.array([0.5]), np.array([-0.2]), singular=True)[0] == pytest.approx(0.1)

    def test_vector_entry_uses_gradient_only(self):
        np.testing.assert_array_equal(
            entry_importance(np.array([3.0, -1.0]), np.array([0.0, -0.4]), singular=False), [0.0, 0.4]
        )

    def test_zero_singular_value_scores_zero(self):
        assert entry_importance(np.zeros(1), np.array([7.0]), singular=True)[0] == 0.0

    def test_missing_gradient(self):
        with pytest.raises(GradientError):
            entry_importance(np.zeros(2), None, singular=False)


class TestUpdateImportance:
    def one_entry_state(self, i_bar=0.0, u_bar=0.0):
        return ImportanceState(stats={(0, 0): {"Lambda": EntryStats(np.array([i_bar]), np.array([u_bar]))}})

    def test_ema_arithmetic(self):
        state = self.one_entry_state(i_bar=0.2)
        update_importance(state, {(0, 0): {"Lambda": np.array([0.1])}}, 0.85, 0.85)
        stats = state.stats[(0, 0)]["Lambda"]
        assert stats.I_bar[0] == pytest.approx(0.185)
        # Uncertainty is measured against the updated I_bar
        assert stats.U_bar[0] == pytest.approx(0.15 * abs(0.1 - 0.185))
        assert state.it == 1

    def test_constant_stream_converges(self):
        state = self.one_entry_state()
        for _ in range(400):
            update_importance(state, {(0, 0): {"Lambda": np.array([0.7])}}, 0.85, 0.85)
        stats = state.stats[(0, 0)]["Lambda"]
        assert stats.I_bar[0] == pytest.approx(0.7, abs=1e-12)
        assert stats.U_bar[0] == pytest.approx(0.0, abs=1e-12)

    def test_small_beta_tracks_latest(self):
        state = self.one_entry_state()
        update_importance(state, {(0, 0): {"Lambda": np.array([0.3])}}, 1e-12, 0.5)
        assert state.stats[(0, 0)]["Lambda"].I_bar[0] == pytest.approx(0.3)

    @pytest.mark.parametrize("beta1,beta2", [(0.0, 0.5), (1.0, 0.5), (0.5, 1.2), (-0.1, 0.5)])
    def test_beta_out_of_range(self, beta1, beta2):
        with pytest.raises(ConfigError):
            update_importance(self.one_entry_state(), {}, beta1, beta2)


class TestTripletScores:
    def test_all_zero_state(self, backbone, rng):
        model = build_lma(backbone, 2)
        entries = model.adaptor_entries()
        scores = triplet_scores(ImportanceState.for_adaptors(entries), entries)
        assert len(scores) == sum(a.rank for _, a in entries)
        assert all(s.score == 0.0 for s in scores)

    def test_single_triplet_sum(self, backbone):
        model = build_lma(backbone, 1)
        entries = model.adaptor_entries()[:1]
        _, adaptor = entries[0]
        state = ImportanceState.for_adaptors(entries)
        stats = state.stats[(0, 0)]
        stats["Lambda"] = EntryStats(np.array([0.3]), np.array([1.0]))
        stats["P"] = EntryStats(np.full(adaptor.P.shape, 0.1), np.ones(adaptor.P.shape))
        stats["Q"] = EntryStats(np.full(adaptor.Q.shape, 0.2), np.ones(adaptor.Q.shape))
        (score,) = triplet_scores(state, entries)
        assert score.score == pytest.approx(0.6)

    def test_permuting_triplets_permutes_scores(self, backbone, rng):
        model = build_lma(backbone, 3)
        entries = model.adaptor_entries()[:1]
        _, adaptor = entries[0]
        state = ImportanceState.for_adaptors(entries)
        for name, t in adaptor.parameters().items():
            state.stats[(0, 0)][name] = EntryStats(rng.random(t.shape), rng.random(t.shape))
        before = [s.score for s in triplet_scores(state, entries)]
        perm = np.array([2, 0, 1])
        stats = state.stats[(0, 0)]
        stats["P"] = EntryStats(stats["P"].I_bar[:, perm], stats["P"].U_bar[:, perm])
        stats["Lambda"] = EntryStats(stats["Lambda"].I_bar[perm], stats["Lambda"].U_bar[perm])
        stats["Q"] = EntryStats(stats["Q"].I_bar[perm], stats["Q"].U_bar[perm])
        after = [s.score for s in triplet_scores(state, entries)]
        np.testing.assert_allclose(after, np.array(before)[perm], rtol=1e-15)


class TestStepRules:
    def test_sgd_scalar(self):
        assert SGD(0.1).update("w", np.array([1.0]), np.array([0.5]))[0] == pytest.approx(0.95)

    def test_non_positive_learning_rate(self):
        with pytest.raises(ConfigError):
            SGD(0.0)
        with pytest.raises(ConfigError):
            make_optimizer(OptimizerKind.ADAM, -1.0)

    def test_zero_gradients_leave_parameters(self, backbone):
        model = build_lma(backbone, 2)
        entries = model.adaptor_entries()
        before = {t.name: t.data.copy() for _, a in entries for t in a.parameters().values()}
        for _, adaptor in entries:
            for t in adaptor.parameters().values():
                t.zero_grad()
        provisional = sgd_step(entries, 0.1)
        for _, adaptor in entries:
            np.testing.assert_array_equal(adaptor.P.data, before[adaptor.P.name])
            np.testing.assert_array_equal(adaptor.Q.data, before[adaptor.Q.name])
        for lam, (_, adaptor) in zip(provisional, entries):
            np.testing.assert_array_equal(lam, before[adaptor.Lambda.name])

    def test_masked_lambda_gets_provisional_value(self, backbone, rng):
        model = build_lma(backbone, 2, seed=3)
        for _, adaptor in model.adaptor_entries():
            adaptor.apply_mask(np.array([True, False]), rng.normal(size=2))
        model.zero_grad()
        backward(classification_loss(model, random_batch(rng))[0])
        provisional = sgd_step(model.adaptor_entries(), 0.5)
        revivable = [lam[1] for lam in provisional]
        assert all(adaptor.Lambda.data[1] == 0.0 for _, adaptor in model.adaptor_entries())
        assert any(value != 0.0 for value in revivable)

    def test_missing_gradient(self, backbone):
        model = build_lma(backbone, 1)
        with pytest.raises(GradientError):
            sgd_step(model.adaptor_entries(), 0.1)

    def test_adam_state_follows_compaction(self):
        adam = Adam(0.01)
        adam.update("a.P", np.zeros((3, 4)), np.ones((3, 4)))
        adam.select("a.P", np.array([0, 2]), axis=1)
        assert adam.m["a.P"].shape == (3, 2)
        state = adam.state_dict()
        restored = Adam(0.01)
        restored.load_state_dict(state)
        np.testing.assert_array_equal(restored.v["a.P"], adam.v["a.P"])
        assert restored.t["a.P"] == 1


class TestPruneToBudget:
    def test_tie_break(self):
        provisional = [np.array([1.0, 2.0, 3.0, 4.0, 5.0])]
        result = prune_to_budget(scores_of([0.5, 0.1, 0.4, 0.4, 0.2]), provisional, 3)
        assert result.kept == [(0, 0), (0, 2), (0, 3)]
        np.testing.assert_array_equal(result.masks[0], [True, False, True, True, False])
        np.testing.assert_array_equal(result.lambdas[0], [1.0, 0.0, 3.0, 4.0, 0.0])

    def test_full_and_empty_budget(self):
        provisional = [np.array([1.0, -2.0]), np.array([0.5])]
        scores = scores_of([0.3, 0.2]) + scores_of([0.1], k=1)
        full = prune_to_budget(scores, provisional, 3)
        assert all(m.all() for m in full.masks)
        empty = prune_to_budget(scores, provisional, 0)
        assert all(not lam.any() for lam in empty.lambdas)

    def test_budget_beyond_triplets(self):
        with pytest.raises(ConfigError):
            prune_to_budget(scores_of([0.1, 0.2]), [np.zeros(2)], 3)

    def test_agrees_with_oracle(self, rng):
        for _ in range(50):
            sizes = rng.integers(1, 6, size=4)
            # Coarse values force plenty of ties
            scores = [
                TripletScore(k, i, float(rng.integers(0, 4)) / 4)
                for k, n in enumerate(sizes) for i in range(n)
            ]
            budget = int(rng.integers(0, len(scores) + 1))
            result = prune_to_budget(scores, [np.ones(n) for n in sizes], budget)
            assert result.kept == topb_oracle(scores, budget)
            assert sum(int(m.sum()) for m in result.masks) == budget

    def test_scaling_scores_keeps_set(self, rng):
        values = rng.random(12)
        provisional = [np.ones(12)]
        base = prune_to_budget(scores_of(values), provisional, 5).kept
        scaled = prune_to_budget(scores_of(values * 37.5), provisional, 5).kept
        assert base == scaled


class TestBudgetSchedule:
    def test_endpoints_and_monotone(self):
        n = 12
        schedule = BudgetSchedule.from_epochs(n, 9, 6, 8, 25, 50, steps_per_epoch=7)
        budgets = [schedule.budget(it) for it in range(schedule.total_steps)]
        assert schedule.budget(schedule.warmup_end) == n * 9
        assert schedule.budget(schedule.decay_end) == n * 6
        assert budgets[0] == n * 9
        assert budgets[-1] == n * 6
        assert all(isinstance(b, int) for b in budgets)
        assert all(a >= b for a, b in zip(budgets, budgets[1:]))

    def test_cubic_midpoint(self):
        schedule = BudgetSchedule(b0=100, bT=20, warmup_end=0, decay_end=10, total_steps=20)
        # 20 + round(80 * 0.5 ** 3) = 30
        assert schedule.budget(5) == 30

    def test_invalid(self):
        with pytest.raises(ConfigError):
            BudgetSchedule(b0=5, bT=6, warmup_end=0, decay_end=10, total_steps=20)
        with pytest.raises(ConfigError):
            BudgetSchedule(b0=6, bT=5, warmup_end=10, decay_end=10, total_steps=20)


def make_allocator(backbone, schedule, prune_interval=2, seed=0, lr=0.05):
    model = build_lma(backbone, 3, seed=seed)
    return RankAllocator(
        model, schedule, adaptor_optimizer=SGD(lr), shared_optimizer=SGD(lr),
        prune_interval=prune_interval, verify_with_oracle=True,
    )


class TestRankAllocator:
    def test_budget_tracked_through_run(self, backbone, rng):
        n = 2 * len(backbone.layer_geometries())
        schedule = BudgetSchedule(b0=n * 3, bT=n * 2, warmup_end=2, decay_end=12, total_steps=16)
        allocator = make_allocator(backbone, schedule)
        events, frozen_masks = [], None
        for it in range(schedule.total_steps):
            _, _, event = allocator.allocation_step(random_batch(rng), it)
            if it <= schedule.warmup_end:
                assert allocator.total_active_rank() == n * 3
            if event is not None:
                events.append(event)
                assert sum(event.active_ranks) == schedule.budget(it)
                assert allocator.total_active_rank() == schedule.budget(it)
            if allocator.frozen:
                masks = [a.mask.copy() for _, a in allocator.model.adaptor_entries()]
                if frozen_masks is not None:
                    assert all(np.array_equal(a, b) for a, b in zip(masks, frozen_masks))
                frozen_masks = masks
            for stats in allocator.state.stats.values():
                for entry in stats.values():
                    assert np.all(np.isfinite(entry.I_bar)) and np.all(entry.I_bar >= 0)
                    assert np.all(np.isfinite(entry.U_bar)) and np.all(entry.U_bar >= 0)
        assert [e.step for e in events] == [4, 6, 8, 10, 12]
        assert allocator.frozen
        assert allocator.total_active_rank() == n * 2
        assert all(a.rank == a.active_rank for _, a in allocator.model.adaptor_entries())

    def test_never_pruning_is_fixed_rank(self, backbone, rng):
        schedule = BudgetSchedule(b0=24, bT=16, warmup_end=1, decay_end=4, total_steps=6)
        batches = [random_batch(np.random.default_rng(i)) for i in range(3)]
        adaptive = make_allocator(backbone, schedule, prune_interval=None)
        fixed = make_allocator(backbone, None)
        for it, batch in enumerate(batches):
            a = adaptive.allocation_step(batch, it)
            b = fixed.allocation_step(batch, it)
            assert a[0] == b[0]
        for (_, x), (_, y) in zip(adaptive.model.adaptor_entries(), fixed.model.adaptor_entries()):
            np.testing.assert_array_equal(x.Lambda.data, y.Lambda.data)

    def test_step_past_schedule(self, backbone, rng):
        schedule = BudgetSchedule(b0=24, bT=16, warmup_end=1, decay_end=2, total_steps=3)
        allocator = make_allocator(backbone, schedule)
        with pytest.raises(ConfigError):
            allocator.allocation_step(random_batch(rng), 3)

    def test_revival(self, backbone):
        n = 2 * len(backbone.layer_geometries())
        schedule = BudgetSchedule(b0=n * 3, bT=n * 3 - 1, warmup_end=0, decay_end=10, total_steps=12)
        allocator = make_allocator(backbone, schedule)
        entries = allocator.model.adaptor_entries()
        provisional = [np.full(a.rank, 0.5) for _, a in entries]

        def favour(i):
            for stats in allocator.state.stats.values():
                for name in stats:
                    shape = stats[name].I_bar.shape
                    stats[name] = EntryStats(np.full(shape, 1.0), np.full(shape, 1.0))
            low = allocator.state.stats[(0, 0)]
            low["Lambda"] = EntryStats(np.array([0.0 if j == i else 1.0 for j in range(3)]), np.ones(3))

        # Importance oscillates between triplets 0 and 1 of the first adaptor
        favour(0)
        first = allocator.prune(8, provisional)
        assert (0, 0) in first.dropped
        favour(1)
        second = allocator.prune(9, provisional)
        assert (0, 0) in second.revived
        assert (0, 1) in second.dropped
        _, adaptor = entries[0]
        assert adaptor.Lambda.data[0] == 0.5
        assert adaptor.Lambda.data[1] == 0.0

    def test_oracle_guard(self, backbone, monkeypatch):
        n = 2 * len(backbone.layer_geometries())
        schedule = BudgetSchedule(b0=n * 3, bT=n, warmup_end=0, decay_end=10, total_steps=12)
        allocator = make_allocator(backbone, schedule)
        monkeypatch.setattr("allocator.rank_allocator.topb_oracle", lambda scores, budget: [])
        with pytest.raises(LMAError, match="oracle"):
            allocator.prune(5, [np.ones(a.rank) for _, a in allocator.model.adaptor_entries()])

    def test_freeze_compacts_optimizer_state(self, backbone, rng):
        model = build_lma(backbone, 3)
        adam = Adam(0.01)
        schedule = BudgetSchedule(b0=12, bT=8, warmup_end=0, decay_end=1, total_steps=3)
        allocator = RankAllocator(model, schedule, adaptor_optimizer=adam, prune_interval=1)
        allocator.allocation_step(random_batch(rng), 0)
        allocator.allocation_step(random_batch(rng), 1)
        assert allocator.frozen
        for _, adaptor in model.adaptor_entries():
            assert adam.m[adaptor.P.name].shape == adaptor.P.shape
            assert adam.m[adaptor.Lambda.name].shape == adaptor.Lambda.shape
            assert adam.m[adaptor.Q.name].shape == adaptor.Q.shape
        allocator.allocation_step(random_batch(rng), 2)


class TestLmaGradients:
    def test_full_forward_matches_finite_differences(self):
        config = tiny_backbone()
        checked = 0
        for seed in range(100):
            rng = np.random.default_rng(seed)
            model = build_lma(config, 2, seed=seed)
            for _, adaptor in model.adaptor_entries():
                adaptor.Lambda.data = rng.normal(size=adaptor.rank)
                adaptor.P.data = rng.normal(0.0, 0.3, size=adaptor.P.shape)
                adaptor.Q.data = rng.normal(0.0, 0.3, size=adaptor.Q.shape)
            batch = Batch(xs=[rng.normal(size=(1, 2, 4, 4)) for _ in range(2)], labels=np.array([1]))
            with no_grad():
                pre = [
                    merged.data
                    for m in range(2)
                    for merged in model.forward_split(Tensor(batch.xs[m]), m).merged
                ]
            if min(np.abs(p).min() for p in pre) < KINK_MARGIN:
                continue
            params = {}
            for _, adaptor in model.adaptor_entries():
                for t in adaptor.parameters().values():
                    params[t.name] = t

            def loss_fn():
                return classification_loss(model, batch)[0]

            if has_tiny_gradient(loss_fn, params):
                continue
            report = finite_diff_check(loss_fn, params)
            assert report.passed(1e-4), (seed, report.as_dict())
            checked += 1
            if checked == 20:
                break
        assert checked == 20

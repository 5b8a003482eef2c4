import math

import numpy as np
import pytest

from masknet.errors import (
    CapacityError,
    DimensionError,
    DisjointnessError,
    InputError,
    StateError,
)
from masknet.layers import Activation, Loss
from masknet.multitask import (
    SlotSpec,
    active_weight_count,
    build_model,
    disjointness_check,
    mt_backward,
)
from masknet.pruning import (
    AvailabilityLedger,
    PruneConfig,
    ceil_budget,
    commit_mask,
    format_prune_report,
    masked_gradient_filter,
    rank_candidates,
    select_subnetwork,
    stored_masks,
    validate_capacity,
)
from masknet.tensor import DTYPE, Rng


def tiny_regression_model(t, seed=0):
    """One dense 4 -> 1 identity slot: W = 4, fully controllable gradients."""
    specs = [SlotSpec(kind="dense", units=1, activation=Activation.IDENTITY)]
    return build_model(specs, {i: Loss.MSE for i in range(t)},
                       {i: (4,) for i in range(t)}, Rng(seed))


# Gradient of MSE w.r.t. the kernel column is x^T * dL/dpred, so with one
# probe row the magnitude ranking is exactly the ranking of |x|.
PROBE = (np.array([[0.9, -0.1, 0.5, 0.3]], DTYPE), np.array([[-100.0]], DTYPE))


class TestBudgetArithmetic:
    def test_ceiling(self):
        assert ceil_budget(0.5, 4) == 2
        assert ceil_budget(0.2, 100) == 20
        assert ceil_budget(0.5, 5) == 3
        assert ceil_budget(0.8, 4) == 4

    def test_tiny_layers_get_at_least_one(self):
        assert ceil_budget(0.01, 3) == 1

    def test_decimal_fraction_is_exact(self):
        # Binary float fuzz overshoots here; the decimal reading does not.
        assert math.ceil(0.07 * 100) == 8
        assert ceil_budget(0.07, 100) == 7
        assert ceil_budget(0.1, 250) == 25


class TestPruneConfig:
    def test_valid(self):
        PruneConfig({0: 0.2, 1: 0.2}, probe_batch_size=512)

    def test_fraction_bounds(self):
        with pytest.raises(InputError):
            PruneConfig({0: 0.0})
        with pytest.raises(InputError):
            PruneConfig({0: 1.0})
        with pytest.raises(InputError):
            PruneConfig({0: 1.5})

    def test_probe_size_positive(self):
        with pytest.raises(InputError):
            PruneConfig({0: 0.2}, probe_batch_size=0)

    def test_empty_rejected(self):
        with pytest.raises(InputError):
            PruneConfig({})


class TestValidateCapacity:
    def test_shared_slot_overcommitted(self):
        model = tiny_regression_model(t=2)
        with pytest.raises(CapacityError):
            validate_capacity(model, PruneConfig({0: 0.6, 1: 0.5}))

    def test_sum_exactly_one_allowed(self):
        model = tiny_regression_model(t=2)
        validate_capacity(model, PruneConfig({0: 0.5, 1: 0.5}))

    def test_disjoint_routes_not_constrained_jointly(self):
        specs = [
            SlotSpec(kind="dense", units=2, activation=Activation.SOFTMAX,
                     tasks=(0,)),
            SlotSpec(kind="dense", units=2, activation=Activation.SOFTMAX,
                     tasks=(1,)),
        ]
        model = build_model(specs, {0: Loss.CCE, 1: Loss.CCE},
                            {0: (4,), 1: (4,)}, Rng(0))
        validate_capacity(model, PruneConfig({0: 0.6, 1: 0.6}))


class TestRankCandidates:
    def test_full_sort_oracle(self):
        mags = np.array([0.9, 0.1, 0.5, 0.3], DTYPE)
        got = rank_candidates(mags, np.ones(4, DTYPE), 2)
        assert sorted(got.tolist()) == [0, 2]

    def test_used_positions_never_win(self):
        mags = np.array([0.9, 0.1, 0.5, 0.3], DTYPE)
        free = np.array([0.0, 1.0, 0.0, 1.0], DTYPE)
        got = rank_candidates(mags, free, 2)
        assert sorted(got.tolist()) == [1, 3]

    def test_zero_gradient_free_weight_beats_used(self):
        mags = np.array([5.0, 0.0], DTYPE)
        free = np.array([0.0, 1.0], DTYPE)
        assert rank_candidates(mags, free, 1).tolist() == [1]

    def test_ties_break_to_lowest_flat_index(self):
        mags = np.array([0.5, 0.7, 0.5, 0.5], DTYPE)
        got = rank_candidates(mags, np.ones(4, DTYPE), 2)
        assert got.tolist() == [1, 0]

    def test_matches_brute_force_on_200_random_instances(self):
        rng = Rng(200)
        for trial in range(200):
            n = int(rng.integers(1, 30, None))
            # Quantized magnitudes force plenty of ties.
            mags = (rng.integers(0, 6, n) / 4.0).astype(DTYPE)
            free = (rng.uniform(0, 1, n) < 0.7).astype(DTYPE)
            free_idx = [i for i in range(n) if free[i]]
            budget = int(rng.integers(0, len(free_idx) + 1, None))
            expected = sorted(free_idx, key=lambda i: (-mags[i], i))[:budget]
            got = rank_candidates(mags, free, budget).tolist()
            assert got == expected, f"trial {trial}"


class TestSelectSubnetwork:
    def test_hand_ranked_probe(self):
        model = tiny_regression_model(t=2)
        ledger = AvailabilityLedger(model)
        result = select_subnetwork(model, 0, PROBE, PruneConfig({0: 0.5, 1: 0.5}),
                                   ledger)
        mask, bias_mask = result.masks[0]
        assert mask[:, 0].tolist() == [1.0, 0.0, 1.0, 0.0]
        assert bias_mask.tolist() == [1.0]
        assert int(mask.sum()) == ceil_budget(0.5, 4)

    def test_keep_everything_when_budget_is_w(self):
        model = tiny_regression_model(t=1)
        ledger = AvailabilityLedger(model)
        result = select_subnetwork(model, 0, PROBE, PruneConfig({0: 0.8}), ledger)
        assert result.masks[0][0].sum() == 4

    def test_second_task_confined_to_free_positions(self):
        model = tiny_regression_model(t=2)
        ledger = AvailabilityLedger(model)
        config = PruneConfig({0: 0.5, 1: 0.5})
        commit_mask(model, 0, select_subnetwork(model, 0, PROBE, config, ledger),
                    ledger)
        result = select_subnetwork(model, 1, PROBE, config, ledger)
        mask = result.masks[0][0]
        assert mask[:, 0].tolist() == [0.0, 1.0, 0.0, 1.0]
        assert not (mask * ledger.used[0]).any()

    def test_capacity_error_when_free_pool_exhausted(self):
        model = tiny_regression_model(t=3)
        ledger = AvailabilityLedger(model)
        config = PruneConfig({0: 0.5, 1: 0.5, 2: 0.5})
        for task in (0, 1):
            commit_mask(model, task,
                        select_subnetwork(model, task, PROBE, config, ledger),
                        ledger)
        with pytest.raises(CapacityError):
            select_subnetwork(model, 2, PROBE, config, ledger)

    def test_empty_probe(self):
        model = tiny_regression_model(t=1)
        with pytest.raises(InputError):
            select_subnetwork(model, 0,
                              (np.zeros((0, 4), DTYPE), np.zeros((0, 1), DTYPE)),
                              PruneConfig({0: 0.5}), AvailabilityLedger(model))

    def test_reselection_after_commit_is_state_error(self):
        model = tiny_regression_model(t=1)
        ledger = AvailabilityLedger(model)
        config = PruneConfig({0: 0.5})
        commit_mask(model, 0, select_subnetwork(model, 0, PROBE, config, ledger),
                    ledger)
        with pytest.raises(StateError):
            select_subnetwork(model, 0, PROBE, config, ledger)

    def test_deterministic_given_probe(self):
        def run():
            model = tiny_regression_model(t=2, seed=5)
            ledger = AvailabilityLedger(model)
            rng = Rng(6)
            x = rng.uniform(-1, 1, (16, 4)).astype(DTYPE)
            y = rng.uniform(-1, 1, (16, 1)).astype(DTYPE)
            return select_subnetwork(model, 0, (x, y), PruneConfig({0: 0.4}),
                                     ledger).masks[0]

        (m1, b1), (m2, b2) = run(), run()
        np.testing.assert_array_equal(m1, m2)
        np.testing.assert_array_equal(b1, b2)

    def test_probe_truncated_to_batch_size(self):
        rng = Rng(7)
        x = rng.uniform(-1, 1, (40, 4)).astype(DTYPE)
        y = rng.uniform(-1, 1, (40, 1)).astype(DTYPE)
        config = PruneConfig({0: 0.4}, probe_batch_size=16)

        def masks_for(xp, yp, cfg):
            model = tiny_regression_model(t=1, seed=8)
            return select_subnetwork(model, 0, (xp, yp), cfg,
                                     AvailabilityLedger(model)).masks[0][0]

        np.testing.assert_array_equal(
            masks_for(x, y, config),
            masks_for(x[:16], y[:16], PruneConfig({0: 0.4}, probe_batch_size=16)),
        )
        # A different window would pick differently; sanity-check the probe
        # actually matters.
        assert not np.array_equal(
            masks_for(x, y, config),
            masks_for(x[24:], y[24:], PruneConfig({0: 0.4}, probe_batch_size=16)),
        )

    def test_multi_layer_budgets_are_per_layer(self):
        specs = [
            SlotSpec(kind="dense", units=10, activation=Activation.RELU),
            SlotSpec(kind="dense", units=5, activation=Activation.SOFTMAX),
        ]
        model = build_model(specs, {0: Loss.CCE, 1: Loss.CCE},
                            {0: (20,), 1: (20,)}, Rng(9))
        rng = Rng(10)
        probe = (rng.uniform(-1, 1, (8, 20)).astype(DTYPE),
                 np.arange(8) % 5)
        result = select_subnetwork(model, 0, probe, PruneConfig({0: 0.3, 1: 0.3}),
                                   AvailabilityLedger(model))
        assert int(result.masks[0][0].sum()) == ceil_budget(0.3, 200)
        assert int(result.masks[1][0].sum()) == ceil_budget(0.3, 50)
        assert int(result.masks[0][1].sum()) == ceil_budget(0.3, 10)
        assert int(result.masks[1][1].sum()) == ceil_budget(0.3, 5)

    def test_report_records(self):
        model = tiny_regression_model(t=1)
        result = select_subnetwork(model, 0, PROBE, PruneConfig({0: 0.5}),
                                   AvailabilityLedger(model))
        rec = result.records[0]
        assert (rec.budget, rec.bias_budget) == (2, 1)
        assert rec.free_before == 4 and rec.free_after == 2
        assert rec.threshold > 0
        text = format_prune_report(result.records)
        assert "budget" in text and "dense" in text


class TestCommit:
    def test_disjoint_after_sequential_commits(self):
        model = tiny_regression_model(t=2)
        ledger = AvailabilityLedger(model)
        config = PruneConfig({0: 0.5, 1: 0.5})
        for task in (0, 1):
            free_before = ledger.free_count(0)
            result = select_subnetwork(model, task, PROBE, config, ledger)
            commit_mask(model, task, result, ledger)
            assert ledger.free_count(0) == free_before - 2
            assert disjointness_check(model.slots[0]).ok

    def test_used_count_is_t_times_budget(self):
        # Five tasks at p = 0.2 on a 100-weight layer fill it exactly.
        specs = [SlotSpec(kind="dense", units=10,
                          activation=Activation.IDENTITY)]
        model = build_model(specs, {i: Loss.MSE for i in range(5)},
                            {i: (10,) for i in range(5)}, Rng(11))
        ledger = AvailabilityLedger(model)
        config = PruneConfig({i: 0.2 for i in range(5)})
        rng = Rng(12)
        for task in range(5):
            probe = (rng.uniform(-1, 1, (4, 10)).astype(DTYPE),
                     rng.uniform(-1, 1, (4, 10)).astype(DTYPE))
            commit_mask(model, task,
                        select_subnetwork(model, task, probe, config, ledger),
                        ledger)
            assert ledger.used_count(0) == (task + 1) * 20
        counts = active_weight_count(model)
        assert counts["total"] == 100
        assert all(v == 20 for v in counts["per_task"].values())

    def test_double_grant_rejected(self):
        model = tiny_regression_model(t=2)
        ledger = AvailabilityLedger(model)
        result = select_subnetwork(model, 0, PROBE, PruneConfig({0: 0.5, 1: 0.5}),
                                   ledger)
        commit_mask(model, 0, result, ledger)
        with pytest.raises(DisjointnessError):
            commit_mask(model, 1, result.masks, ledger)

    def test_wrong_slot_set_rejected(self):
        model = tiny_regression_model(t=1)
        with pytest.raises(InputError):
            commit_mask(model, 0, {5: (np.ones((4, 1), DTYPE), np.ones(1, DTYPE))},
                        AvailabilityLedger(model))

    def test_non_binary_mask_rejected(self):
        model = tiny_regression_model(t=1)
        with pytest.raises(InputError):
            commit_mask(model, 0,
                        {0: (np.full((4, 1), 0.5, DTYPE), np.ones(1, DTYPE))},
                        AvailabilityLedger(model))

    def test_wrong_shape_rejected(self):
        model = tiny_regression_model(t=1)
        with pytest.raises(DimensionError):
            commit_mask(model, 0, {0: (np.ones((2, 2), DTYPE), np.ones(1, DTYPE))},
                        AvailabilityLedger(model))


class TestMaskedGradientFilter:
    def _grads_and_masks(self, seed):
        model = tiny_regression_model(t=1, seed=seed)
        ledger = AvailabilityLedger(model)
        commit_mask(model, 0,
                    select_subnetwork(model, 0, PROBE, PruneConfig({0: 0.5}),
                                      ledger), ledger)
        rng = Rng(seed + 1)
        x = rng.uniform(-1, 1, (4, 4)).astype(DTYPE)
        y = rng.uniform(-1, 1, (4, 1)).astype(DTYPE)
        return model, mt_backward(model, x, y, 0)

    def test_all_ones_mask_is_identity(self):
        model, grads = self._grads_and_masks(20)
        ones = {0: (np.ones((4, 1), DTYPE), np.ones(1, DTYPE))}
        out = masked_gradient_filter(grads, ones)
        np.testing.assert_array_equal(out.slot_grads[0]["kernel"],
                                      grads.slot_grads[0]["kernel"])

    def test_all_zeros_mask_freezes_everything(self):
        model, grads = self._grads_and_masks(21)
        zeros = {0: (np.zeros((4, 1), DTYPE), np.zeros(1, DTYPE))}
        out = masked_gradient_filter(grads, zeros)
        assert not out.slot_grads[0]["kernel"].any()
        assert not out.slot_grads[0]["bias"].any()

    def test_matches_elementwise_product_oracle(self):
        model, grads = self._grads_and_masks(22)
        masks = stored_masks(model, 0)
        out = masked_gradient_filter(grads, masks)
        np.testing.assert_array_equal(
            out.slot_grads[0]["kernel"],
            grads.slot_grads[0]["kernel"] * masks[0][0],
        )
        np.testing.assert_array_equal(
            out.slot_grads[0]["bias"],
            grads.slot_grads[0]["bias"] * masks[0][1],
        )

    def test_original_not_mutated(self):
        model, grads = self._grads_and_masks(23)
        before = grads.slot_grads[0]["kernel"].copy()
        masked_gradient_filter(grads, {0: (np.zeros((4, 1), DTYPE),
                                           np.zeros(1, DTYPE))})
        np.testing.assert_array_equal(grads.slot_grads[0]["kernel"], before)

    def test_shape_mismatch(self):
        model, grads = self._grads_and_masks(24)
        with pytest.raises(DimensionError):
            masked_gradient_filter(grads, {0: (np.ones((2, 2), DTYPE),
                                               np.ones(1, DTYPE))})

    def test_missing_mask_for_slot(self):
        model, grads = self._grads_and_masks(25)
        with pytest.raises(InputError):
            masked_gradient_filter(grads, {})


class TestLedger:
    def test_monotone(self):
        model = tiny_regression_model(t=2)
        ledger = AvailabilityLedger(model)
        m = np.zeros((4, 1), DTYPE)
        m[0, 0] = 1
        ledger.mark_used(0, m)
        assert ledger.used_count(0) == 1
        with pytest.raises(DisjointnessError):
            ledger.mark_used(0, m)
        m2 = np.zeros((4, 1), DTYPE)
        m2[1, 0] = 1
        ledger.mark_used(0, m2)
        assert ledger.used_count(0) == 2
        assert ledger.free_count(0) == 2

    def test_shape_guard(self):
        model = tiny_regression_model(t=1)
        ledger = AvailabilityLedger(model)
        with pytest.raises(DimensionError):
            ledger.mark_used(0, np.ones((2, 2), DTYPE))

import numpy as np
import pytest

from conftest import TINY_STUDENT, TINY_TEACHER, tiny_model
from evc.errors import SequencingError, ValidationError
from evc.mask_decay import (
    DecayConfig,
    MaskLayer,
    apply_task_gradient,
    build_avoid_sets,
    channel_overlap_table,
    check_sparse_enough,
    decay_step,
    force_freeze,
    insert_masks,
    mask_stage,
    merge_masks,
    read_prune_report,
    record_chosen_channels,
    select_survivors,
    sparsity_grad,
    sparsity_loss,
    write_prune_report,
)
from evc.model import LARGE, SMALL, build_model, count_params
from evc.tensor import Tensor


def _mask(values, target, name="m"):
    mask = MaskLayer.ones(name, len(values), target, dtype=np.float64)
    mask.m.data = np.asarray(values, dtype=np.float64)
    return mask


def _random_freeze(mm, rng):
    for mask in mm.mask_list():
        mask.m.data = rng.uniform(0.2, 1.5, mask.size)
        force_freeze(mask)


class TestSparsityLoss:
    def test_ours_values(self):
        np.testing.assert_allclose(sparsity_loss([0.0, 1.0, 2.0]), [0.0, 0.5, 1.0])

    def test_ours_gradient(self):
        np.testing.assert_allclose(sparsity_grad([1.0, 0.0, 3.0]), [0.0, 1.0, 2.0])

    def test_ours_clamps_negatives(self):
        assert sparsity_loss(-1.0) == 0.0

    def test_baselines(self):
        assert sparsity_grad(0.2, "l1") == 1.0
        assert sparsity_grad(0.2, "l2") == pytest.approx(0.2)
        assert sparsity_loss(2.0, "l2") == pytest.approx(2.0)

    def test_smooth_at_one(self):
        eps = 1e-7
        assert sparsity_loss(1.0 - eps) == pytest.approx(sparsity_loss(1.0 + eps), abs=1e-12)
        assert sparsity_grad(1.0) == 0.0
        assert sparsity_grad(1.0 + eps) == pytest.approx(sparsity_grad(1.0 - eps), abs=1e-12)

    def test_closed_form_at_random_points(self, rng):
        x = rng.uniform(0.0, 3.0, 10000)
        expected = np.where(x > 1.0, 0.5 * x * x - x + 1.0, -0.5 * x * x + x)
        np.testing.assert_allclose(sparsity_loss(x), expected, rtol=0, atol=1e-15)
        np.testing.assert_allclose(sparsity_grad(x), np.abs(x - 1.0), rtol=0, atol=1e-15)

    def test_unknown_kind(self):
        with pytest.raises(ValidationError):
            sparsity_loss(1.0, "l3")


class TestDecayConfig:
    def test_avoid_rate_defaults_to_ten_times(self):
        assert DecayConfig(eta=0.1).eta_avoid == pytest.approx(1.0)

    def test_avoid_rate_below_rate(self):
        with pytest.raises(ValidationError):
            DecayConfig(eta=0.1, eta_avoid=0.05)


class TestDecayStep:
    def test_half_decays(self):
        mask = decay_step(_mask([0.5], 0), DecayConfig(eta=0.1))
        assert mask.values[0] == pytest.approx(0.45)

    def test_one_is_fixed_point(self):
        mask = decay_step(_mask([1.0], 0), DecayConfig(eta=0.1))
        assert mask.values[0] == 1.0

    def test_avoid_set_uses_faster_rate(self):
        mask = _mask([0.5, 0.5], 0)
        mask.avoid_set = frozenset({0})
        decay_step(mask, DecayConfig(eta=0.1, eta_avoid=1.0))
        assert mask.values[0] == pytest.approx(0.0)
        assert mask.values[1] == pytest.approx(0.45)

    def test_half_reaches_zero_quickly(self):
        mask = _mask([0.5], 0)
        cfg = DecayConfig(eta=0.1)
        steps = 0
        while mask.values[0] >= cfg.zero_threshold and steps < 40:
            decay_step(mask, cfg)
            steps += 1
        assert mask.values[0] < cfg.zero_threshold

    def test_l2_stalls_near_zero(self):
        mask = _mask([1e-6], 0)
        decay_step(mask, DecayConfig(eta=0.1, loss_kind="l2"))
        assert 1e-6 - mask.values[0] <= 1e-7 * (1 + 1e-9)

    def test_frozen_mask_untouched(self):
        mask = _mask([0.5, 0.7], 2)
        force_freeze(mask)
        decay_step(mask, DecayConfig(eta=0.1))
        np.testing.assert_array_equal(mask.values, [0.5, 0.7])

    def test_task_gradient_and_clamp(self):
        mask = decay_step(_mask([0.01], 0), DecayConfig(eta=0.1), task_grad=np.array([1.0]), lr=1.0)
        assert mask.values[0] == 0.0


class TestFreeze:
    def test_freezes_when_sparse_enough(self):
        mask = _mask([0.9, 1e-5, 1e-6, 0.8], 2)
        assert check_sparse_enough(mask, DecayConfig(zero_threshold=1e-3), iteration=7)
        np.testing.assert_array_equal(mask.values, [0.9, 0.0, 0.0, 0.8])
        np.testing.assert_array_equal(mask.keep, [0, 3])
        assert mask.freeze_iteration == 7

    def test_dense_mask_not_frozen(self):
        mask = _mask(np.ones(4), 2)
        assert not check_sparse_enough(mask, DecayConfig())
        assert not mask.frozen

    def test_full_target_freezes_immediately(self):
        mask = _mask(np.ones(4), 4)
        assert check_sparse_enough(mask, DecayConfig())
        np.testing.assert_array_equal(mask.keep, [0, 1, 2, 3])

    def test_survivor_ties_go_to_lowest_index(self):
        np.testing.assert_array_equal(select_survivors(np.array([0.5, 0.9, 0.5, 0.5]), 2), [0, 1])

    def test_force_freeze_keeps_exactly_target(self):
        mask = _mask([0.3, 0.9, 0.8, 0.7], 2)
        force_freeze(mask)
        assert mask.frozen
        assert mask.live_count(1e-3) == 2

    def test_task_gradient_only_on_survivors(self):
        mask = _mask([0.9, 0.1, 0.0, 0.8], 2)
        force_freeze(mask)
        apply_task_gradient(mask, np.full(4, 0.1), lr=1.0)
        np.testing.assert_allclose(mask.values, [0.8, 0.0, 0.0, 0.7])

    def test_task_gradient_needs_frozen_mask(self):
        with pytest.raises(SequencingError):
            apply_task_gradient(_mask([1.0], 1), np.ones(1), lr=0.1)

    def test_target_range(self):
        with pytest.raises(ValidationError):
            MaskLayer.ones("bad", 4, 5)


class TestInsertMasks:
    def test_large_to_small_targets(self):
        model = build_model(LARGE, LARGE, latent_channels=8, hyper_channels=4)
        mm = insert_masks(model, SMALL)
        group = mm.masks["encoder.s1"]
        assert (group.size, group.target) == (192, 64)
        assert mm.masks["encoder.s4"].target == 192
        assert mm.masks["encoder.s1.dc.ffn"].target == 256
        assert mm.enc_target == SMALL and mm.dec_target == SMALL

    def test_group_mask_is_shared(self, model):
        mm = insert_masks(model, TINY_STUDENT)
        res, dc = model.encoder.stages[0]
        assert res.out_mask is dc.out_mask
        assert res.out_mask is mm.masks["encoder.s1"]
        assert set(mm.masks["encoder.s1"].sites) == {"encoder.s1.res.out", "encoder.s1.dc.out"}

    def test_decoder_only(self, model):
        mm = insert_masks(model, TINY_TEACHER, decoder_scheme=TINY_STUDENT)
        assert mm.masks
        assert all(name.startswith("decoder.") for name in mm.masks)

    def test_wider_student_rejected(self, model):
        with pytest.raises(ValidationError, match="wider"):
            insert_masks(model, LARGE)

    def test_all_ones_masks_keep_outputs(self, rng):
        base = tiny_model()
        masked = tiny_model()
        insert_masks(masked, TINY_STUDENT)
        x = Tensor(rng.uniform(0.0, 1.0, (1, 3, 16, 16)))
        y = base.encoder.forward(x)
        np.testing.assert_array_equal(masked.encoder.forward(x).data, y.data)
        np.testing.assert_array_equal(masked.decoder.forward(y).data, base.decoder.forward(y).data)

    def test_mask_stage(self):
        assert mask_stage("encoder.s1.dc.ffn") == "encoder.s1"
        assert mask_stage("decoder.s2") == "decoder.s2"


class TestMerge:
    def test_merged_model_matches_masked_model(self, rng):
        model = tiny_model()
        mm = insert_masks(model, TINY_STUDENT)
        _random_freeze(mm, rng)
        merged = merge_masks(mm)
        x = Tensor(rng.uniform(0.0, 1.0, (2, 3, 16, 16)))
        y_masked = model.encoder.forward(x)
        y_merged = merged.encoder.forward(x)
        np.testing.assert_allclose(y_merged.data, y_masked.data, rtol=0, atol=1e-6)
        np.testing.assert_allclose(merged.decoder.forward(y_masked).data, model.decoder.forward(y_masked).data, rtol=0, atol=1e-6)

    def test_merged_widths_match_fresh_student(self, rng):
        mm = insert_masks(tiny_model(), TINY_STUDENT)
        _random_freeze(mm, rng)
        merged = merge_masks(mm)
        assert merged.enc_scheme == TINY_STUDENT
        assert merged.dec_scheme == TINY_STUDENT
        assert count_params(merged) == count_params(tiny_model(enc=TINY_STUDENT, dec=TINY_STUDENT))

    def test_all_ones_full_width_merge_keeps_weights(self):
        model = tiny_model()
        mm = insert_masks(model, TINY_STUDENT)
        for mask in mm.mask_list():
            mask.target = mask.size
            assert check_sparse_enough(mask, DecayConfig())
        mm.enc_target = TINY_TEACHER
        mm.dec_target = TINY_TEACHER
        merged = merge_masks(mm)
        for (na, pa), (nb, pb) in zip(model.named_parameters(), merged.named_parameters()):
            assert na == nb
            np.testing.assert_allclose(pb.data, pa.data, rtol=0, atol=1e-12)

    def test_merged_model_owns_shared_parameters(self, rng):
        model = tiny_model()
        mm = insert_masks(model, TINY_STUDENT)
        _random_freeze(mm, rng)
        merged = merge_masks(mm)
        assert merged.quant.log_global is not model.quant.log_global

    def test_unfrozen_merge(self, model):
        mm = insert_masks(model, TINY_STUDENT)
        with pytest.raises(SequencingError, match="not frozen"):
            merge_masks(mm)


class TestReports:
    def test_prune_report_roundtrip(self, tmp_path, rng):
        mm = insert_masks(tiny_model(), TINY_STUDENT)
        _random_freeze(mm, rng)
        path = tmp_path / "prune_report.yaml"
        write_prune_report(path, mm)
        assert read_prune_report(path) == record_chosen_channels(mm)

    def test_chosen_channels_need_frozen_masks(self, model):
        with pytest.raises(SequencingError):
            record_chosen_channels(insert_masks(model, TINY_STUDENT))

    def test_overlap_table(self):
        mm = insert_masks(tiny_model(), TINY_STUDENT)
        runs = []
        for seed in (0, 1):
            gen = np.random.default_rng(seed)
            _random_freeze(mm, gen)
            runs.append(record_chosen_channels(mm))
            for mask in mm.mask_list():
                mask.frozen, mask.keep = False, None
        table = channel_overlap_table(runs, mm).set_index("mask")
        group = table.loc["encoder.s1"]
        assert group["intersection"] <= group["ns"] <= group["union"] <= group["n2"]
        same = channel_overlap_table([runs[0], runs[0]], mm)
        assert (same["intersection"] == same["ns"]).all()

    def test_overlap_needs_runs(self, model):
        with pytest.raises(ValidationError):
            channel_overlap_table([], insert_masks(model, TINY_STUDENT))

    def test_avoid_sets_cover_first_block(self, model):
        mm = insert_masks(model, TINY_STUDENT)
        union = {name: list(range(mask.size)) for name, mask in mm.masks.items()}
        avoid = build_avoid_sets(union, mm, 1)
        assert avoid
        assert {mask_stage(name) for name in avoid} == {"encoder.s1"}
        mm.set_avoid_sets(avoid)
        assert mm.masks["encoder.s1"].avoid_set == frozenset(range(4))

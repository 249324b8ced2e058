import math

import pytest
import torch

from collabseg.decoder import PredictionSet
from collabseg.errors import AnnotationError, SizingError
from collabseg.losses import (
    GuidedMaskBatch,
    LossWeights,
    boundary_weight_map,
    combine_components,
    partial_ce,
    structure_consistency,
    total_loss,
    weighted_seg_loss,
)

LN2 = math.log(2.0)


def scribble_like(h, w, fg, bg):
    s = torch.zeros(h, w, dtype=torch.long)
    for y, x in fg:
        s[y, x] = 1
    for y, x in bg:
        s[y, x] = 2
    return s


class TestPartialCE:
    def test_uniform_prediction_gives_ln2(self):
        logits = torch.zeros(1, 1, 8, 8)
        s = scribble_like(8, 8, fg=[(1, 1), (2, 5)], bg=[(6, 6)]).unsqueeze(0)
        assert float(partial_ce(logits, s)) == pytest.approx(LN2, abs=1e-6)

    def test_four_pixel_arithmetic(self):
        probs = torch.tensor([0.9, 0.8, 0.3, 0.1])
        logits = torch.logit(probs).reshape(1, 1, 2, 2)
        s = scribble_like(2, 2, fg=[(0, 0), (0, 1)], bg=[(1, 0), (1, 1)])
        want = -(math.log(0.9) + math.log(0.8) + math.log(0.7) + math.log(0.9)) / 4
        assert float(partial_ce(logits, s)) == pytest.approx(want, abs=1e-5)

    def test_perfect_prediction_vanishes(self):
        s = scribble_like(8, 8, fg=[(2, 2), (3, 3)], bg=[(6, 1), (7, 7)])
        logits = torch.where(s == 1, 40.0, -40.0).float().reshape(1, 1, 8, 8)
        assert float(partial_ce(logits, s)) < 1e-6

    def test_unlabeled_pixels_carry_nothing(self):
        s = scribble_like(6, 6, fg=[(1, 1)], bg=[(4, 4)])
        base = torch.randn(1, 1, 6, 6)
        other = base.clone()
        other[0, 0, 2, 2] = 17.0
        other[0, 0, 5, 0] = -9.0
        assert torch.equal(partial_ce(base, s), partial_ce(other, s))

        lg = base.clone().requires_grad_()
        partial_ce(lg, s).backward()
        grad = lg.grad[0, 0]
        labeled = s != 0
        assert torch.all(grad[~labeled] == 0)
        assert torch.all(grad[labeled] != 0)

    def test_no_labeled_pixels(self):
        with pytest.raises(AnnotationError):
            partial_ce(torch.zeros(1, 1, 4, 4), torch.zeros(1, 4, 4, dtype=torch.long))

    def test_shape_mismatch(self):
        with pytest.raises(SizingError):
            partial_ce(torch.zeros(1, 1, 4, 4), torch.ones(1, 4, 5, dtype=torch.long))

    def test_gradcheck(self):
        torch.manual_seed(0)
        s = scribble_like(5, 5, fg=[(0, 0), (2, 3)], bg=[(4, 4), (1, 2)])
        lg = torch.randn(1, 1, 5, 5, dtype=torch.float64, requires_grad=True)
        assert torch.autograd.gradcheck(lambda t: partial_ce(t, s), (lg,))


class TestStructureConsistency:
    def test_identical_maps_score_zero(self):
        x = torch.randn(1, 1, 8, 8)
        assert float(structure_consistency(x, x)) < 1e-10

    def test_opposite_saturated_maps_score_one(self):
        full = torch.full((1, 1, 8, 8), 40.0)
        down = torch.full((1, 1, 8, 8), -40.0)
        assert float(structure_consistency(full, down)) == pytest.approx(1.0, abs=1e-6)

    def test_two_by_two_fixture(self):
        full = torch.logit(torch.tensor([[0.2, 0.4], [0.6, 0.8]])).reshape(1, 1, 2, 2)
        down = torch.logit(torch.tensor([[0.2, 0.4], [0.6, 0.6]])).reshape(1, 1, 2, 2)
        assert float(structure_consistency(full, down)) == pytest.approx(0.01, abs=1e-6)

    def test_reduced_map_may_not_exceed_full(self):
        with pytest.raises(SizingError, match="larger"):
            structure_consistency(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 8, 8))

    def test_batch_mismatch(self):
        with pytest.raises(SizingError, match="batch"):
            structure_consistency(torch.zeros(2, 1, 4, 4), torch.zeros(1, 1, 4, 4))

    def test_gradient_reaches_both_branches(self):
        full = torch.randn(1, 1, 8, 8, requires_grad=True)
        down = torch.randn(1, 1, 4, 4, requires_grad=True)
        structure_consistency(full, down).backward()
        assert float(full.grad.abs().sum()) > 0
        assert float(down.grad.abs().sum()) > 0

    def test_gradcheck(self):
        torch.manual_seed(1)
        full = torch.randn(1, 1, 6, 6, dtype=torch.float64, requires_grad=True)
        down = torch.randn(1, 1, 3, 3, dtype=torch.float64, requires_grad=True)
        assert torch.autograd.gradcheck(structure_consistency, (full, down))


class TestBoundaryWeightMap:
    def test_constant_masks_weight_one(self):
        for value in (0.0, 1.0):
            m = torch.full((1, 1, 20, 20), value)
            w = boundary_weight_map(m, radius=3, gain=5.0)
            assert torch.all(w == 1.0)

    def test_weights_rise_near_edges(self):
        m = torch.zeros(1, 1, 32, 32)
        m[:, :, 10:22, 10:22] = 1.0
        w = boundary_weight_map(m, radius=3, gain=5.0)
        assert torch.all(w >= 1.0)
        assert float(w[0, 0, 10, 10]) > 1.5      # corner of the square
        assert float(w[0, 0, 16, 16]) == 1.0     # deep interior
        assert float(w[0, 0, 0, 0]) == 1.0       # far background

    def test_zero_radius_is_identity_weight(self):
        m = (torch.rand(1, 1, 9, 9) < 0.5).float()
        assert torch.all(boundary_weight_map(m, radius=0) == 1.0)


class TestWeightedSegLoss:
    def test_half_probability_on_full_mask(self):
        logits = torch.zeros(1, 1, 16, 16)
        mask = torch.ones(1, 1, 16, 16)
        v = float(weighted_seg_loss(logits, mask))
        assert v == pytest.approx(0.5 + LN2, abs=1e-5)

    def test_perfect_prediction(self):
        mask = torch.zeros(1, 1, 16, 16)
        mask[:, :, 4:12, 4:12] = 1.0
        logits = torch.where(mask > 0, 40.0, -40.0)
        assert float(weighted_seg_loss(logits, mask)) < 1e-5

    def test_mask_must_be_binary(self):
        with pytest.raises(ValueError, match="binary"):
            weighted_seg_loss(torch.zeros(1, 1, 4, 4), torch.full((1, 1, 4, 4), 0.5))

    def test_shape_mismatch(self):
        with pytest.raises(SizingError):
            weighted_seg_loss(torch.zeros(1, 1, 4, 4), torch.ones(1, 1, 4, 5))

    def test_reductions(self):
        torch.manual_seed(2)
        logits = torch.randn(3, 1, 8, 8)
        mask = (torch.rand(3, 1, 8, 8) < 0.5).float()
        per = weighted_seg_loss(logits, mask, radius=2, reduction="none")
        assert per.shape == (3,)
        mean = weighted_seg_loss(logits, mask, radius=2)
        assert float(mean) == pytest.approx(float(per.mean()), abs=1e-7)
        with pytest.raises(ValueError, match="reduction"):
            weighted_seg_loss(logits, mask, reduction="sum")

    def test_gradcheck(self):
        torch.manual_seed(3)
        mask = (torch.rand(1, 1, 6, 6) < 0.5).double()
        lg = torch.randn(1, 1, 6, 6, dtype=torch.float64, requires_grad=True)
        assert torch.autograd.gradcheck(
            lambda t: weighted_seg_loss(t, mask, radius=2), (lg,))


class TestGuidedMaskBatch:
    def test_reliable_fraction(self):
        g = GuidedMaskBatch(torch.zeros(4, 1, 4, 4), torch.tensor([1, 0, 1, 1]))
        assert g.reliable_fraction == 0.75

    def test_rejects_soft_masks(self):
        with pytest.raises(ValueError, match="binary"):
            GuidedMaskBatch(torch.full((1, 1, 4, 4), 0.3), torch.tensor([1]))

    def test_rejects_bad_indicator(self):
        with pytest.raises(ValueError, match="indicator"):
            GuidedMaskBatch(torch.zeros(1, 1, 4, 4), torch.tensor([2]))
        with pytest.raises(SizingError, match="length"):
            GuidedMaskBatch(torch.zeros(2, 1, 4, 4), torch.tensor([1]))


class TestCombine:
    def test_reference_total(self):
        total = combine_components(
            pce=[0.2, 0.2, 0.2, 0.2], seg=[0.4, 0.4, 0.4, 0.4], ss=0.1)
        assert float(total) == pytest.approx(1.22, abs=1e-9)

    def test_component_count_checked(self):
        with pytest.raises(ValueError):
            combine_components([0.1] * 3, [0.1] * 4, 0.0)

    def test_custom_weights(self):
        w = LossWeights(alpha=1.0, lambda2=1.0, lambda3=1.0, lambda4=1.0)
        total = combine_components([1.0] * 4, [1.0] * 4, 0.0, w)
        assert float(total) == pytest.approx(8.0, abs=1e-12)

    def test_weight_validation(self):
        with pytest.raises(ValueError):
            LossWeights(alpha=0.0)
        with pytest.raises(ValueError):
            LossWeights(eps=0.1)


def make_preds(h=16, w=16, batch=1, seed=0, down_scale=2):
    gen = torch.Generator().manual_seed(seed)
    sides = tuple(torch.randn(batch, 1, h, w, generator=gen) for _ in range(4))
    down = torch.randn(batch, 1, h // down_scale, w // down_scale, generator=gen)
    return PredictionSet(side_logits=sides, down_logits=down)


def make_scribble_batch(h=16, w=16, batch=1):
    s = torch.zeros(batch, h, w, dtype=torch.long)
    s[:, 2, 2:5] = 1
    s[:, h - 3, 2:6] = 2
    return s


class TestTotalLoss:
    def test_requires_reduced_map(self):
        preds = make_preds()
        preds = PredictionSet(side_logits=preds.side_logits, down_logits=None)
        with pytest.raises(SizingError, match="reduced"):
            total_loss(preds, make_scribble_batch())

    def test_components_complete(self):
        loss, comps = total_loss(make_preds(), make_scribble_batch())
        keys = {f"pce{i}" for i in (1, 2, 3, 4)} | {f"seg{i}" for i in (1, 2, 3, 4)}
        keys |= {"ss", "total", "reliable_fraction"}
        assert set(comps) == keys
        assert comps["reliable_fraction"] == 0.0
        assert all(comps[f"seg{i}"] == 0.0 for i in (1, 2, 3, 4))
        assert float(loss) == pytest.approx(comps["total"], abs=1e-6)

    def test_matches_manual_combination(self):
        preds = make_preds(seed=4)
        scr = make_scribble_batch()
        mask = (torch.rand(1, 1, 16, 16, generator=torch.Generator().manual_seed(5))
                < 0.5).float()
        guided = GuidedMaskBatch(mask, torch.tensor([1]))
        loss, comps = total_loss(preds, scr, guided)
        w = LossWeights()
        want = combine_components(
            [partial_ce(s, scr, w.eps) for s in preds.side_logits],
            [weighted_seg_loss(s, mask, w.wmap_radius, w.wmap_gain, w.eps)
             for s in preds.side_logits],
            structure_consistency(preds.side_logits[0], preds.down_logits), w)
        assert float(loss) == pytest.approx(float(want), abs=1e-6)
        assert comps["reliable_fraction"] == 1.0

    def test_unreliable_masks_are_invisible(self):
        preds = make_preds(batch=2, seed=6)
        scr = make_scribble_batch(batch=2)
        gen = torch.Generator().manual_seed(7)
        shared = (torch.rand(1, 1, 16, 16, generator=gen) < 0.5).float()
        junk_a = torch.zeros(1, 1, 16, 16)
        junk_b = torch.ones(1, 1, 16, 16)
        ind = torch.tensor([1, 0])
        loss_a, comps_a = total_loss(
            preds, scr, GuidedMaskBatch(torch.cat([shared, junk_a]), ind))
        loss_b, comps_b = total_loss(
            preds, scr, GuidedMaskBatch(torch.cat([shared, junk_b]), ind))
        assert float(loss_a) == float(loss_b)
        assert comps_a == comps_b

        # the kept seg term is the plain loss of the reliable sample alone
        want = weighted_seg_loss(preds.side_logits[0][:1], shared)
        assert comps_a["seg1"] == pytest.approx(float(want), abs=1e-6)

    def test_all_unreliable_equals_no_guidance(self):
        preds = make_preds(batch=2, seed=8)
        scr = make_scribble_batch(batch=2)
        masks = (torch.rand(2, 1, 16, 16) < 0.5).float()
        with_g, _ = total_loss(preds, scr, GuidedMaskBatch(masks, torch.tensor([0, 0])))
        without, _ = total_loss(preds, scr, None)
        assert float(with_g) == float(without)

    def test_gradient_skips_unreliable_samples(self):
        sides = tuple(
            torch.randn(2, 1, 8, 8, generator=torch.Generator().manual_seed(i))
            .requires_grad_() for i in range(4))
        down = torch.randn(2, 1, 4, 4)
        preds = PredictionSet(side_logits=sides, down_logits=down)
        scr = make_scribble_batch(8, 8, batch=2)
        scr[1] = 0  # sample 2 unlabeled; pce comes from sample 1 only
        masks = (torch.rand(2, 1, 8, 8) < 0.5).float()
        loss, _ = total_loss(preds, scr, GuidedMaskBatch(masks, torch.tensor([1, 0])))
        loss.backward()
        for s in sides[1:]:
            assert torch.all(s.grad[1] == 0)  # no scribble, no reliable mask

    def test_perfect_prediction_total_vanishes(self):
        gt = torch.zeros(1, 1, 16, 16)
        gt[:, :, 4:12, 5:11] = 1.0
        logits = torch.where(gt > 0, 40.0, -40.0)
        scr = torch.zeros(1, 16, 16, dtype=torch.long)
        scr[0, 6, 6:9] = 1
        scr[0, 1, 1:5] = 2
        target = torch.nn.functional.interpolate(
            torch.sigmoid(logits), size=(8, 8), mode="bilinear", align_corners=False)
        down = torch.logit(target.clamp(1e-6, 1 - 1e-6))
        preds = PredictionSet(side_logits=(logits,) * 4, down_logits=down)
        guided = GuidedMaskBatch(gt, torch.tensor([1]))
        loss, _ = total_loss(preds, scr, guided)
        assert float(loss) <= 1e-4

import math

import numpy as np
import pytest
import torch

from ssv import losses
from ssv.codec import EncodedViewpoints, encode_viewpoints
from ssv.exceptions import ShapeError
from ssv.losses import (
    LossWeights,
    RandomConvFeatures,
    SynthesisLossTerms,
    ViewpointLossTerms,
    adversarial_loss,
    discriminator_loss,
    flip_image_consistency,
    horizontal_flip,
    image_consistency,
    paired_style_viewpoint_loss,
    style_viewpoint_loss,
    symmetry_loss,
    total_synthesis_loss,
    total_viewpoint_loss,
    viewpoint_consistency,
)

UNIFORM_SIGN_VALUE = -3.0 + 3.0 * math.log(4.0)


def t(x):
    return torch.tensor(x, dtype=torch.float64)


def uniform_sign_encoding(angles):
    enc = encode_viewpoints(t(angles))
    probs = torch.full_like(enc.sign_probs, 0.25)
    return EncodedViewpoints(abs_vec=enc.abs_vec, sign_probs=probs)


def encoding_from_raw(raw_abs, raw_logits):
    """Network-style parameterization: |raw| L2-normalized, softmax sign probs."""
    a = raw_abs.abs()
    abs_vec = a / a.norm(dim=-1, keepdim=True)
    return EncodedViewpoints(abs_vec=abs_vec, sign_probs=torch.softmax(raw_logits, dim=-1))


class TestImageConsistency:
    def test_identical_is_zero(self):
        f = torch.randn(2, 8, 4, 4, dtype=torch.float64)
        assert image_consistency(f, f).item() == pytest.approx(0.0, abs=1e-9)

    def test_orthogonal_is_one(self):
        a = t([[1.0, 0.0, 0.0, 0.0]])
        b = t([[0.0, 1.0, 0.0, 0.0]])
        assert image_consistency(a, b).item() == pytest.approx(1.0, abs=1e-7)

    def test_opposite_is_two(self):
        f = torch.randn(3, 16, dtype=torch.float64)
        assert image_consistency(f, -f).item() == pytest.approx(2.0, abs=1e-9)

    def test_range(self):
        g = torch.Generator().manual_seed(0)
        for _ in range(50):
            a = torch.randn(4, 32, generator=g, dtype=torch.float64)
            b = torch.randn(4, 32, generator=g, dtype=torch.float64)
            val = image_consistency(a, b).item()
            assert 0.0 - 1e-9 <= val <= 2.0 + 1e-9

    def test_zero_norm_guarded(self):
        a = torch.zeros(1, 8, dtype=torch.float64)
        b = torch.randn(1, 8, dtype=torch.float64)
        assert torch.isfinite(image_consistency(a, b))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            image_consistency(torch.zeros(1, 4), torch.zeros(1, 5))


class TestViewpointConsistency:
    def test_identical_confident_is_minus_three(self):
        enc = encode_viewpoints(t([[0.4, -0.2, 1.0], [2.0, 0.3, -2.5]]))
        assert viewpoint_consistency(enc, enc).item() == pytest.approx(-3.0, abs=1e-9)

    def test_orthogonal_abs_correct_signs_is_zero(self):
        # per angle: abs vectors (1,0) vs (0,1), same (+,+) sign class
        e1 = encode_viewpoints(t([[0.0, 0.0, 0.0]]))
        e2 = encode_viewpoints(t([[math.pi / 2, math.pi / 2, math.pi / 2]]))
        assert viewpoint_consistency(e1, e2).item() == pytest.approx(0.0, abs=1e-9)

    def test_uniform_sign_probs_value(self):
        angles = [[0.7, -0.1, 2.2]]
        pred = uniform_sign_encoding(angles)
        target = encode_viewpoints(t(angles))
        assert viewpoint_consistency(pred, target).item() == pytest.approx(
            UNIFORM_SIGN_VALUE, abs=1e-9
        )

    def test_minimum_is_minus_three(self):
        g = torch.Generator().manual_seed(1)
        for _ in range(50):
            raw_a = torch.randn(2, 3, 2, generator=g, dtype=torch.float64)
            raw_l = torch.randn(2, 3, 4, generator=g, dtype=torch.float64)
            pred = encoding_from_raw(raw_a, raw_l)
            target = encode_viewpoints(torch.randn(2, 3, generator=g, dtype=torch.float64))
            assert viewpoint_consistency(pred, target).item() >= -3.0 - 1e-9


class TestStyleViewpoint:
    def test_perfect_prediction(self):
        enc = encode_viewpoints(t([[0.5, 0.1, -0.4]]))
        z = torch.randn(1, 16, dtype=torch.float64)
        assert style_viewpoint_loss(z, z, enc, enc).item() == pytest.approx(-3.0, abs=1e-9)

    def test_style_offset_d128(self):
        enc = encode_viewpoints(t([[0.5, 0.1, -0.4]]))
        z = torch.zeros(1, 128, dtype=torch.float64)
        z_hat = torch.full((1, 128), 0.1, dtype=torch.float64)
        assert style_viewpoint_loss(z, z_hat, enc, enc).item() == pytest.approx(-1.72, abs=1e-9)

    def test_uniform_signs_perfect_style(self):
        angles = [[0.5, 0.1, -0.4]]
        target = encode_viewpoints(t(angles))
        pred = uniform_sign_encoding(angles)
        z = torch.randn(1, 8, dtype=torch.float64)
        assert style_viewpoint_loss(z, z, target, pred).item() == pytest.approx(
            UNIFORM_SIGN_VALUE, abs=1e-9
        )

    def test_dim_mismatch(self):
        enc = encode_viewpoints(t([[0.0, 0.0, 0.0]]))
        with pytest.raises(ShapeError):
            style_viewpoint_loss(torch.zeros(1, 4), torch.zeros(1, 5), enc, enc)


class TestCriticLosses:
    def test_discriminator_example(self):
        assert discriminator_loss(t([0.4, 0.6]), t([0.1, 0.3])).item() == pytest.approx(-0.3)

    def test_discriminator_identical_batches(self):
        c = torch.randn(8, dtype=torch.float64)
        assert discriminator_loss(c, c).item() == pytest.approx(0.0, abs=1e-12)

    def test_discriminator_extremes(self):
        assert discriminator_loss(t([1.0, 1.0]), t([-1.0, -1.0])).item() == pytest.approx(-2.0)

    def test_adversarial_example(self):
        assert adversarial_loss(t([0.2, 0.4])).item() == pytest.approx(-0.3)

    def test_adversarial_zero(self):
        assert adversarial_loss(torch.zeros(5)).item() == 0.0

    def test_adversarial_negates_synth_term(self):
        c = torch.randn(6, dtype=torch.float64)
        zero_real = torch.zeros(6, dtype=torch.float64)
        assert adversarial_loss(c).item() == pytest.approx(
            -discriminator_loss(zero_real, c).item()
        )

    def test_empty_batches_rejected(self):
        with pytest.raises(ValueError):
            discriminator_loss(torch.zeros(0), torch.zeros(2))
        with pytest.raises(ValueError):
            adversarial_loss(torch.zeros(0))


class TestSymmetry:
    def test_perfectly_mirrored_prediction(self):
        v = encode_viewpoints(t([[0.3, 0.1, -0.05]]))
        v_star = encode_viewpoints(t([[-0.3, 0.1, 0.05]]))
        z = torch.randn(1, 12, dtype=torch.float64)
        assert symmetry_loss((v, z), (v_star, z)).item() == pytest.approx(-3.0, abs=1e-9)

    def test_orthogonal_reflipped_zero(self):
        # re-flipped flip-prediction is (pi/2, pi/2, pi/2): abs vectors orthogonal
        # to the (0, 0, 0) prediction, sign classes all (+,+) and thus correct
        v = encode_viewpoints(t([[0.0, 0.0, 0.0]]))
        v_star = encode_viewpoints(t([[-math.pi / 2, math.pi / 2, -math.pi / 2]]))
        z = torch.randn(1, 4, dtype=torch.float64)
        assert symmetry_loss((v, z), (v_star, z)).item() == pytest.approx(0.0, abs=1e-9)

    def test_style_term_additive(self):
        v = encode_viewpoints(t([[0.3, 0.1, -0.05]]))
        v_star = encode_viewpoints(t([[-0.3, 0.1, 0.05]]))
        z = torch.zeros(1, 8, dtype=torch.float64)
        z_star = torch.zeros(1, 8, dtype=torch.float64)
        z_star[0, 0] = math.sqrt(0.5)
        assert symmetry_loss((v, z), (v_star, z_star)).item() == pytest.approx(
            -3.0 + 0.5, abs=1e-9
        )


class TestPaired:
    def triplet(self, d=6, perfect=True, uniform_first=False):
        g = torch.Generator().manual_seed(3)
        z0 = torch.rand(2, d, generator=g, dtype=torch.float64) * 2 - 1
        z1 = torch.rand(2, d, generator=g, dtype=torch.float64) * 2 - 1
        a0 = torch.randn(2, 3, generator=g, dtype=torch.float64)
        a1 = torch.randn(2, 3, generator=g, dtype=torch.float64)
        v0, v1 = encode_viewpoints(a0), encode_viewpoints(a1)
        samples = [(v0, z0), (v1, z0), (v1, z1)]
        if perfect:
            preds = [(v0, z0), (v1, z0), (v1, z1)]
        else:
            preds = [(uniform_sign_encoding(a0.numpy()), z0), (v1, z0), (v1, z1)]
        if uniform_first:
            preds[0] = (uniform_sign_encoding(a0.numpy()), z0)
        return list(zip(samples, preds))

    def test_all_perfect_is_minus_nine(self):
        assert paired_style_viewpoint_loss(self.triplet()).item() == pytest.approx(-9.0, abs=1e-9)

    def test_additivity(self):
        trip = self.triplet(perfect=False)
        total = paired_style_viewpoint_loss(trip)
        parts = sum(
            style_viewpoint_loss(z_s, z_p, v_s, v_p).item()
            for (v_s, z_s), (v_p, z_p) in trip
        )
        assert total.item() == pytest.approx(parts, abs=1e-12)

    def test_one_uniform_pair(self):
        trip = self.triplet(uniform_first=True)
        assert paired_style_viewpoint_loss(trip).item() == pytest.approx(
            -9.0 + 3.0 * math.log(4.0), abs=1e-9
        )

    def test_pattern_violations_rejected(self):
        trip = self.triplet()
        # break the shared style between pairs 0 and 1
        (v0, z0), p0 = trip[0]
        trip_bad = [((v0, z0 + 1.0), p0), trip[1], trip[2]]
        with pytest.raises(ValueError):
            paired_style_viewpoint_loss(trip_bad)
        # duplicate viewpoint between pairs 0 and 1 (nothing varied)
        (v1, z1), p1 = trip[1]
        trip_bad2 = [((v1, z1), p1), trip[1], trip[2]]
        with pytest.raises(ValueError):
            paired_style_viewpoint_loss(trip_bad2)


class TestFlipImageConsistency:
    def test_exact_flip_is_zero(self):
        img = torch.randn(2, 3, 8, 8, dtype=torch.float64)
        assert flip_image_consistency(img, horizontal_flip(img)).item() == pytest.approx(0.0)

    def test_constant_offset(self):
        a = torch.zeros(1, 3, 4, 4)
        b = torch.full((1, 3, 4, 4), 0.5)
        assert flip_image_consistency(a, b).item() == pytest.approx(0.5)

    def test_swap_symmetry(self):
        g = torch.Generator().manual_seed(5)
        a = torch.randn(2, 3, 6, 6, generator=g, dtype=torch.float64)
        b = torch.randn(2, 3, 6, 6, generator=g, dtype=torch.float64)
        assert flip_image_consistency(a, b).item() == pytest.approx(
            flip_image_consistency(b, a).item(), abs=1e-12
        )

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            flip_image_consistency(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 5))


class TestTotals:
    def test_unit_weights(self):
        terms = ViewpointLossTerms(t(1.0), t(1.0), t(1.0), t(1.0))
        assert total_viewpoint_loss(terms, LossWeights()).item() == pytest.approx(4.0)
        s_terms = SynthesisLossTerms(t(1.0), t(1.0), t(1.0))
        assert total_synthesis_loss(s_terms, LossWeights()).item() == pytest.approx(3.0)

    def test_masking(self):
        terms = ViewpointLossTerms(t(5.0), t(7.0), t(11.0), t(13.0))
        w = LossWeights(symmetry=0, image_consistency=0, style_viewpoint=0, discriminator=1)
        assert total_viewpoint_loss(terms, w).item() == pytest.approx(13.0)
        s_terms = SynthesisLossTerms(t(5.0), t(7.0), t(11.0))
        sw = LossWeights(adversarial=1, paired_style_viewpoint=0, flip_consistency=0)
        assert total_synthesis_loss(s_terms, sw).item() == pytest.approx(5.0)

    def test_linearity(self):
        terms = ViewpointLossTerms(t(1.0), t(2.0), t(3.0), t(4.0))
        w1 = LossWeights()
        w2 = LossWeights(
            symmetry=2, image_consistency=2, style_viewpoint=2, discriminator=2,
            adversarial=2, paired_style_viewpoint=2, flip_consistency=2,
        )
        assert total_viewpoint_loss(terms, w2).item() == pytest.approx(
            2 * total_viewpoint_loss(terms, w1).item()
        )

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(symmetry=-1.0)


class TestFeatureExtractor:
    def test_deterministic(self):
        ext1 = RandomConvFeatures(input_resolution=64, seed=9)
        ext2 = RandomConvFeatures(input_resolution=64, seed=9)
        img = torch.rand(2, 3, 64, 64) * 2 - 1
        assert torch.equal(ext1(img), ext2(img))
        assert torch.equal(ext1(img), ext1(img))

    def test_spatial_reduction_by_32(self):
        ext = RandomConvFeatures(input_resolution=64)
        out = ext(torch.zeros(1, 3, 64, 64))
        assert out.shape[-2:] == (2, 2)
        ext128 = RandomConvFeatures(input_resolution=128)
        assert ext128(torch.zeros(1, 3, 128, 128)).shape[-2:] == (4, 4)

    def test_zero_image_finite(self):
        ext = RandomConvFeatures(input_resolution=64)
        assert torch.isfinite(ext(torch.zeros(1, 3, 64, 64))).all()

    def test_wrong_resolution_rejected(self):
        ext = RandomConvFeatures(input_resolution=64)
        with pytest.raises(ShapeError):
            ext(torch.zeros(1, 3, 32, 32))

    def test_frozen(self):
        ext = RandomConvFeatures()
        assert all(not p.requires_grad for p in ext.parameters())


# ---------------------------------------------------------------------------
# Gradient checks: analytic autograd vs central finite differences
# ---------------------------------------------------------------------------

def finite_difference_check(fn, leaves, eps=1e-4, tol=1e-3):
    """Compare autograd gradients of fn(*leaves) against central differences."""
    for leaf in leaves:
        leaf.requires_grad_(True)
    loss = fn(*leaves)
    grads = torch.autograd.grad(loss, leaves, allow_unused=False)
    for leaf, grad in zip(leaves, grads):
        fd = torch.zeros_like(leaf)
        flat = leaf.detach().reshape(-1)
        fd_flat = fd.reshape(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            hi = fn(*leaves).item()
            flat[i] = orig - eps
            lo = fn(*leaves).item()
            flat[i] = orig
            fd_flat[i] = (hi - lo) / (2 * eps)
        num = (grad - fd).norm().item()
        den = max(grad.norm().item(), fd.norm().item(), 1e-8)
        assert num / den < tol, f"gradient mismatch: rel err {num / den:.2e}"


class TestGradients:
    def setup_method(self):
        self.g = torch.Generator().manual_seed(11)

    def randn(self, *shape):
        return torch.randn(*shape, generator=self.g, dtype=torch.float64)

    def test_image_consistency_grad(self):
        finite_difference_check(
            image_consistency, [self.randn(2, 12), self.randn(2, 12)]
        )

    def test_viewpoint_consistency_grad(self):
        target = encode_viewpoints(self.randn(2, 3))

        def fn(raw_abs, raw_logits):
            return viewpoint_consistency(encoding_from_raw(raw_abs, raw_logits), target)

        finite_difference_check(fn, [self.randn(2, 3, 2) + 2.0, self.randn(2, 3, 4)])

    def test_style_viewpoint_grad(self):
        target = encode_viewpoints(self.randn(2, 3))
        z_t = self.randn(2, 6)

        def fn(raw_abs, raw_logits, z_p):
            return style_viewpoint_loss(z_t, z_p, target, encoding_from_raw(raw_abs, raw_logits))

        finite_difference_check(fn, [self.randn(2, 3, 2) + 2.0, self.randn(2, 3, 4), self.randn(2, 6)])

    def test_discriminator_grad(self):
        finite_difference_check(discriminator_loss, [self.randn(4), self.randn(4)])

    def test_adversarial_grad(self):
        finite_difference_check(adversarial_loss, [self.randn(4)])

    def test_symmetry_grad(self):
        # the flipped branch's sign probs only enter through the argmax target,
        # so they are a categorical (non-continuous) input and stay constant here
        raw_logits_f = self.randn(2, 3, 4)

        def fn(raw_abs, raw_logits, z, raw_abs_f, z_f):
            return symmetry_loss(
                (encoding_from_raw(raw_abs, raw_logits), z),
                (encoding_from_raw(raw_abs_f, raw_logits_f), z_f),
            )

        finite_difference_check(
            fn,
            [
                self.randn(2, 3, 2) + 2.0,
                self.randn(2, 3, 4),
                self.randn(2, 5),
                self.randn(2, 3, 2) + 2.0,
                self.randn(2, 5),
            ],
        )

    def test_paired_grad(self):
        z0 = self.randn(2, 4)
        z1 = self.randn(2, 4)
        v0 = encode_viewpoints(self.randn(2, 3))
        v1 = encode_viewpoints(self.randn(2, 3))
        samples = [(v0, z0), (v1, z0), (v1, z1)]

        def fn(*raw):
            preds = [
                (encoding_from_raw(raw[3 * i], raw[3 * i + 1]), raw[3 * i + 2]) for i in range(3)
            ]
            return paired_style_viewpoint_loss(list(zip(samples, preds)))

        leaves = []
        for _ in range(3):
            leaves += [self.randn(2, 3, 2) + 2.0, self.randn(2, 3, 4), self.randn(2, 4)]
        finite_difference_check(fn, leaves)

    def test_flip_consistency_grad(self):
        finite_difference_check(
            flip_image_consistency, [self.randn(1, 3, 4, 4), self.randn(1, 3, 4, 4)]
        )

    def test_total_viewpoint_grad(self):
        w = LossWeights(symmetry=0.5, image_consistency=2.0, style_viewpoint=1.5, discriminator=0.7)

        def fn(a, b, c, d):
            return total_viewpoint_loss(ViewpointLossTerms(a.sum(), b.sum(), c.sum(), d.sum()), w)

        finite_difference_check(fn, [self.randn(2), self.randn(2), self.randn(2), self.randn(2)])

    def test_total_synthesis_grad(self):
        w = LossWeights(adversarial=0.3, paired_style_viewpoint=1.1, flip_consistency=2.2)

        def fn(a, b, c):
            return total_synthesis_loss(SynthesisLossTerms(a.sum(), b.sum(), c.sum()), w)

        finite_difference_check(fn, [self.randn(2), self.randn(2), self.randn(2)])

    def test_all_losses_finite_on_random_inputs(self):
        for _ in range(20):
            f1, f2 = self.randn(2, 10), self.randn(2, 10)
            assert torch.isfinite(image_consistency(f1, f2))
            pred = encoding_from_raw(self.randn(2, 3, 2) + 2.0, self.randn(2, 3, 4))
            target = encode_viewpoints(self.randn(2, 3))
            assert torch.isfinite(viewpoint_consistency(pred, target))

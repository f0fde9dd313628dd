import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from erpnormal.losses import (
    LossWeights,
    PerceptualExtractor,
    angle_between,
    mse_loss,
    perceptual_loss,
    quaternion_loss,
    smooth_loss,
    total_loss,
)


def unit_map(gen, shape=(1, 3, 4, 8), dtype=torch.float64):
    x = torch.randn(*shape, generator=gen, dtype=dtype)
    return x / x.norm(dim=1, keepdim=True)


def vec_map(v, h=1, w=1):
    return torch.tensor(v, dtype=torch.float64).view(1, 3, 1, 1).expand(1, 3, h, w).clone()


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(7)


@pytest.fixture
def extractor():
    return PerceptualExtractor().double()


class TestLossWeights:
    def test_defaults(self):
        w = LossWeights()
        assert (w.lambda_m, w.lambda_q, w.lambda_p, w.lambda_s) == (1.0, 10.0, 0.05, 0.5)

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            LossWeights(lambda_s=-0.1)


class TestMse:
    def test_identical_is_zero(self, gen):
        g = unit_map(gen)
        assert mse_loss([g], g).item() == 0.0

    def test_single_pixel_hand_value(self):
        loss = mse_loss([vec_map([1.0, 0.0, 0.0])], vec_map([0.0, 0.0, 0.0]))
        assert loss.item() == pytest.approx(1 / 3, abs=1e-15)

    def test_doubling_scales_doubles(self, gen):
        p, g = unit_map(gen), unit_map(gen)
        assert mse_loss([p, p], g).item() == pytest.approx(2 * mse_loss([p], g).item(), rel=1e-14)

    def test_coarse_prediction_is_upsampled(self, gen):
        g = unit_map(gen, (1, 3, 4, 8))
        coarse = torch.full((1, 3, 2, 4), 0.5, dtype=torch.float64)
        full = torch.full((1, 3, 4, 8), 0.5, dtype=torch.float64)
        assert mse_loss([coarse], g).item() == pytest.approx(mse_loss([full], g).item(), rel=1e-14)

    def test_empty_mask_raises(self, gen):
        g = unit_map(gen)
        with pytest.raises(ValueError):
            mse_loss([g], g, torch.zeros(1, 4, 8, dtype=torch.bool))


class TestQuaternion:
    @pytest.mark.parametrize("p, expected", [
        ([2.0, 0.0, 0.0], 0.0),
        ([0.0, 1.0, 0.0], math.pi / 2),
        ([-1.0, 0.0, 0.0], math.pi),
    ])
    def test_hand_angles(self, p, expected):
        loss = quaternion_loss([vec_map(p)], vec_map([1.0, 0.0, 0.0]))
        assert loss.item() == pytest.approx(expected, abs=1e-7)

    def test_zero_gt_excluded_and_counted(self):
        gt = vec_map([1.0, 0.0, 0.0], 1, 2)
        gt[..., 1] = 0.0
        pred = vec_map([0.0, 1.0, 0.0], 1, 2)
        pred[0, :, 0, 0] = torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64)
        loss, excluded = quaternion_loss([pred], gt, return_excluded=True)
        assert excluded == 1
        assert loss.item() == pytest.approx(0.0, abs=1e-7)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(0.01, math.pi - 0.01), min_size=2, max_size=2))
    def test_monotone_in_true_angle(self, angles):
        a, b = sorted(angles)
        gt = vec_map([0.0, 0.0, 1.0])
        la = quaternion_loss([vec_map([math.sin(a), 0.0, math.cos(a)])], gt).item()
        lb = quaternion_loss([vec_map([math.sin(b), 0.0, math.cos(b)])], gt).item()
        assert la <= lb + 1e-12
        assert la == pytest.approx(a, abs=1e-7)

    def test_matches_arccos_oracle(self, gen):
        p, g = unit_map(gen), unit_map(gen)
        oracle = torch.arccos((p * g).sum(1).clamp(-1, 1)).mean()
        assert quaternion_loss([p], g).item() == pytest.approx(oracle.item(), abs=1e-6)

    def test_angle_between_range(self, gen):
        ang = angle_between(torch.randn(1, 3, 16, 16, generator=gen), torch.randn(1, 3, 16, 16, generator=gen))
        assert ang.min() >= 0 and ang.max() <= math.pi


class TestPerceptual:
    def test_identical_is_zero(self, gen, extractor):
        g = unit_map(gen, (1, 3, 8, 16))
        assert perceptual_loss(g, g, extractor).item() == 0.0

    def test_same_seed_same_value(self, gen):
        p, g = unit_map(gen, (1, 3, 8, 16)), unit_map(gen, (1, 3, 8, 16))
        a = perceptual_loss(p, g, PerceptualExtractor(seed=3).double())
        b = perceptual_loss(p, g, PerceptualExtractor(seed=3).double())
        assert a.item() == b.item()

    def test_positive_on_random_pairs(self, gen, extractor):
        for _ in range(10):
            p, g = unit_map(gen, (1, 3, 8, 16)), unit_map(gen, (1, 3, 8, 16))
            assert perceptual_loss(p, g, extractor).item() > 0

    def test_frozen(self, extractor):
        assert list(extractor.parameters()) == []
        assert [b.shape[0] for b in extractor.buffers()] == [16, 32, 64]

    def test_manual_per_layer_mean(self, gen, extractor):
        p, g = unit_map(gen, (1, 3, 8, 16)), unit_map(gen, (1, 3, 8, 16))
        fp, fg = extractor(p), extractor(g)
        expected = sum(((a - b) ** 2).sum() / (a.shape[1] * a[0, 0].numel()) for a, b in zip(fp, fg))
        assert perceptual_loss(p, g, extractor).item() == pytest.approx(expected.item(), rel=1e-12)

    def test_invalid_pixels_filled_with_gt(self, gen, extractor):
        p, g = unit_map(gen, (1, 3, 8, 16)), unit_map(gen, (1, 3, 8, 16))
        mask = torch.zeros(1, 8, 16, dtype=torch.bool)
        assert perceptual_loss(p, g, extractor, mask).item() == 0.0


class TestSmooth:
    def test_identical_is_zero(self, gen):
        g = unit_map(gen)
        assert smooth_loss([g], g).item() == 0.0

    def test_constant_offset_is_zero(self, gen):
        g = unit_map(gen)
        assert smooth_loss([g + 0.3], g).item() == pytest.approx(0.0, abs=1e-14)

    def test_one_by_two_wrap(self):
        # residual (0,0,0),(1,0,0): each pixel's wrapped x-difference has L1 norm 1
        gt = torch.zeros(1, 3, 1, 2, dtype=torch.float64)
        pred = gt.clone()
        pred[0, 0, 0, 1] = 1.0
        assert smooth_loss([pred], gt).item() == pytest.approx(1.0, abs=1e-15)

    def test_brute_force_oracle(self, gen):
        p, g = unit_map(gen), unit_map(gen)
        mask = torch.rand(1, 4, 8, generator=gen) > 0.3
        r = (p - g)[0].numpy()
        m = mask[0].numpy()
        H, W = m.shape
        acc = 0.0
        for i in range(H):
            for j in range(W):
                jn = (j + 1) % W
                if m[i, j] and m[i, jn]:
                    acc += np.abs(r[:, i, jn] - r[:, i, j]).sum()
                if i + 1 < H and m[i, j] and m[i + 1, j]:
                    acc += np.abs(r[:, i + 1, j] - r[:, i, j]).sum()
        assert smooth_loss([p], g, mask).item() == pytest.approx(acc / m.sum(), rel=1e-12)


class TestTotal:
    def test_identical_all_zero(self, gen, extractor):
        g = unit_map(gen)
        total, terms = total_loss([g, g], g, None, LossWeights(), extractor)
        assert total.item() == pytest.approx(0.0, abs=1e-7)
        for k in ("L_m", "L_p", "L_s"):
            assert terms[k] == 0.0
        assert terms["L_q"] == pytest.approx(0.0, abs=1e-7)

    def test_mse_only_weights(self, gen, extractor):
        p, g = unit_map(gen), unit_map(gen)
        total, _ = total_loss([p], g, None, LossWeights(1, 0, 0, 0), extractor)
        assert total.item() == mse_loss([p], g).item()

    def test_recombination_oracle(self, gen, extractor):
        p1, p2, g = unit_map(gen, (1, 3, 2, 4)), unit_map(gen), unit_map(gen)
        mask = torch.rand(1, 4, 8, generator=gen) > 0.2
        w = LossWeights()
        total, terms = total_loss([p1, p2], g, mask, w, extractor)
        expected = (w.lambda_m * mse_loss([p1, p2], g, mask) + w.lambda_q * quaternion_loss([p1, p2], g, mask)
                    + w.lambda_p * perceptual_loss(p2, g, extractor, mask)
                    + w.lambda_s * smooth_loss([p1, p2], g, mask))
        assert total.item() == pytest.approx(expected.item(), rel=1e-12)
        assert terms["total"] == total.item()

    def test_finest_scale_mode(self, gen, extractor):
        p1, p2, g = unit_map(gen, (1, 3, 2, 4)), unit_map(gen), unit_map(gen)
        a, _ = total_loss([p1, p2], g, None, LossWeights(), extractor, scales="finest")
        b, _ = total_loss([p2], g, None, LossWeights(), extractor)
        assert a.item() == b.item()

    def test_unknown_scales_mode(self, gen, extractor):
        g = unit_map(gen)
        with pytest.raises(ValueError):
            total_loss([g], g, None, LossWeights(), extractor, scales="middle")

    def test_invalid_pixels_do_not_matter(self, gen, extractor):
        p, g = unit_map(gen), unit_map(gen)
        mask = torch.rand(1, 4, 8, generator=gen) > 0.3
        q = torch.where(mask.unsqueeze(1), p, unit_map(gen))
        _, ta = total_loss([p], g, mask, LossWeights(), extractor)
        _, tb = total_loss([q], g, mask, LossWeights(), extractor)
        for k in ("L_m", "L_q", "L_p", "L_s"):
            assert ta[k] == pytest.approx(tb[k], rel=1e-12, abs=1e-15), k


class TestGradients:
    @pytest.mark.parametrize("term", ["mse", "quat", "perc", "smooth"])
    def test_central_differences(self, term, gen, extractor):
        g = unit_map(gen)
        p = (unit_map(gen) * 0.9).requires_grad_(True)
        mask = torch.rand(1, 4, 8, generator=gen) > 0.2
        fns = {
            "mse": lambda x: mse_loss([x], g, mask),
            "quat": lambda x: quaternion_loss([x], g, mask),
            "perc": lambda x: perceptual_loss(x, g, extractor, mask),
            "smooth": lambda x: smooth_loss([x], g, mask),
        }
        f = fns[term]
        f(p).backward()
        an = p.grad.clone().view(-1)
        h = 1e-6
        fd = torch.empty_like(an)
        base = p.detach().clone().view(-1)
        for i in range(base.numel()):
            e = torch.zeros_like(base)
            e[i] = h
            fd[i] = (f((base + e).view_as(p)) - f((base - e).view_as(p))).item() / (2 * h)
        assert (an - fd).norm() / max(fd.norm(), 1e-12) < 1e-4

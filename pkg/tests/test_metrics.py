import math

import pytest
import torch

from pairedit.metrics import (
    FeatureGaussian,
    diou,
    edit_mask,
    frechet_distance,
    frequency_loss,
    pixel_features,
    psnr,
)


def rand_img(h, w, c, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(h, w, c, generator=g, dtype=dtype) * 2 - 1


class TestFrequencyLoss:
    def test_zero_when_equal(self):
        a = rand_img(8, 8, 3, seed=1)
        assert frequency_loss(a, a.clone()).item() == 0.0
        assert frequency_loss(a, a.clone(), focal=True).item() == 0.0

    def test_parseval_identity(self):
        for seed in range(5):
            a = rand_img(8, 8, 3, seed=seed)
            b = rand_img(8, 8, 3, seed=seed + 100)
            plain = frequency_loss(a, b).item()
            mse = torch.mean((a - b) ** 2).item()
            assert abs(plain - mse) <= 1e-10

    def test_single_pixel_delta_flat_spectrum(self):
        # a - b is a unit delta on N pixels: orthonormal FFT spreads it to
        # constant magnitude 1/sqrt(N) per bin, so the mean power is 1/N.
        n = 8 * 8
        a = torch.zeros(8, 8, 1, dtype=torch.float64)
        b = a.clone()
        b[3, 5, 0] = 1.0
        assert abs(frequency_loss(a, b).item() - 1.0 / n) <= 1e-12

    def test_symmetry_and_nonnegativity(self):
        a = rand_img(8, 8, 1, seed=2)
        b = rand_img(8, 8, 1, seed=3)
        assert frequency_loss(a, b).item() == pytest.approx(frequency_loss(b, a).item(), abs=1e-12)
        assert frequency_loss(a, b).item() >= 0
        assert frequency_loss(a, b, focal=True).item() >= 0

    def test_focal_weights_detached(self):
        a = rand_img(8, 8, 1, seed=4).requires_grad_(True)
        b = rand_img(8, 8, 1, seed=5)
        frequency_loss(a, b, focal=True).backward()
        assert a.grad is not None and torch.isfinite(a.grad).all()

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            frequency_loss(torch.zeros(4, 4, 1), torch.zeros(4, 5, 1))


class TestPsnr:
    def test_identical_hits_cap(self):
        a = rand_img(8, 8, 3, seed=6)
        assert psnr(a, a.clone()) == 99.0

    def test_closed_form_20db(self):
        # MSE 0.01 with peak 1 -> 10*log10(1/0.01) = 20 dB
        a = torch.zeros(10, 10, 1, dtype=torch.float64)
        b = torch.full((10, 10, 1), 0.1, dtype=torch.float64)
        assert psnr(a, b, peak=1.0) == pytest.approx(20.0, abs=1e-9)

    def test_matches_closed_form_oracle(self):
        a = rand_img(16, 16, 3, seed=7)
        b = rand_img(16, 16, 3, seed=8)
        mse = torch.mean((a - b) ** 2).item()
        expected = 10 * math.log10(4.0 / mse)
        assert psnr(a, b) == pytest.approx(expected, abs=1e-9)

    def test_invalid_peak(self):
        with pytest.raises(ValueError):
            psnr(torch.zeros(2, 2, 1), torch.zeros(2, 2, 1), peak=0.0)


class TestEditMask:
    def test_no_edit_gives_empty_mask(self):
        x = rand_img(8, 8, 3, seed=9)
        assert not edit_mask(x, x.clone(), 0.1).any()

    def test_patch_edit_exact_support(self):
        x = rand_img(8, 8, 3, seed=10)
        y = x.clone()
        y[2:4, 5:7] += 0.5
        mask = edit_mask(x, y, 0.1)
        expected = torch.zeros(8, 8, dtype=torch.bool)
        expected[2:4, 5:7] = True
        assert torch.equal(mask, expected)

    def test_mask_area_monotone_in_tau(self):
        x = rand_img(16, 16, 3, seed=11)
        y = x + torch.linspace(0, 0.5, 16 * 16 * 3).reshape(16, 16, 3)
        areas = [edit_mask(x, y, tau).sum().item() for tau in (0.0, 0.1, 0.2, 0.3, 0.4)]
        assert all(a >= b for a, b in zip(areas, areas[1:]))


class TestDiou:
    def test_identical_lists(self):
        g = torch.Generator().manual_seed(12)
        masks = [torch.rand(6, 6, generator=g) > 0.5 for _ in range(3)]
        assert diou(masks, [m.clone() for m in masks]) == 1.0

    def test_disjoint_unions(self):
        a = torch.zeros(4, 4, dtype=torch.bool)
        b = torch.zeros(4, 4, dtype=torch.bool)
        a[0, 0] = True
        b[3, 3] = True
        assert diou([a], [b]) == 0.0

    def test_hand_counted_case(self):
        # reference union covers 4 pixels, generated covers 4, 2 shared
        ref = torch.zeros(4, 4, dtype=torch.bool)
        ref[0, 0] = ref[0, 1] = ref[1, 0] = ref[1, 1] = True
        gen = torch.zeros(4, 4, dtype=torch.bool)
        gen[1, 0] = gen[1, 1] = gen[2, 0] = gen[2, 1] = True
        assert diou([gen], [ref]) == pytest.approx(2.0 / 6.0)

    def test_both_empty_defined_as_one(self):
        empty = torch.zeros(4, 4, dtype=torch.bool)
        assert diou([empty], [empty.clone()]) == 1.0

    def test_rejects_empty_list(self):
        with pytest.raises(ValueError):
            diou([], [torch.zeros(4, 4, dtype=torch.bool)])

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ValueError):
            diou([torch.zeros(4, 4, dtype=torch.bool)], [torch.zeros(5, 4, dtype=torch.bool)])


def denman_beavers_sqrtm(mat: torch.Tensor, iters: int = 80) -> torch.Tensor:
    """High-precision matrix square root by Denman-Beavers iteration."""
    y = mat.double().clone()
    z = torch.eye(mat.shape[0], dtype=torch.float64)
    for _ in range(iters):
        y_next = 0.5 * (y + torch.linalg.inv(z))
        z_next = 0.5 * (z + torch.linalg.inv(y))
        y, z = y_next, z_next
    return y


def random_gaussian(dim, seed):
    g = torch.Generator().manual_seed(seed)
    a = torch.randn(dim + 4, dim, generator=g, dtype=torch.float64)
    cov = a.t() @ a / (dim + 3)
    mean = torch.randn(dim, generator=g, dtype=torch.float64)
    return FeatureGaussian(mean=mean, cov=cov)


class TestFrechet:
    def test_zero_for_identical(self):
        p = random_gaussian(3, seed=13)
        assert frechet_distance(p, p) == pytest.approx(0.0, abs=1e-8)

    def test_one_dimensional_closed_form(self):
        p = FeatureGaussian(mean=torch.tensor([0.0]), cov=torch.tensor([[1.0]]))
        q = FeatureGaussian(mean=torch.tensor([1.0]), cov=torch.tensor([[1.0]]))
        assert frechet_distance(p, q) == pytest.approx(1.0, abs=1e-12)

    def test_matches_denman_beavers_oracle(self):
        for seed in range(4):
            p = random_gaussian(3, seed=20 + seed)
            q = random_gaussian(3, seed=40 + seed)
            sqrt_pq = denman_beavers_sqrtm(p.cov @ q.cov)
            expected = (
                (p.mean - q.mean).square().sum()
                + p.cov.trace()
                + q.cov.trace()
                - 2 * sqrt_pq.trace()
            ).item()
            assert frechet_distance(p, q) == pytest.approx(expected, abs=1e-6)

    def test_symmetry_and_nonnegativity(self):
        p = random_gaussian(4, seed=60)
        q = random_gaussian(4, seed=61)
        d_pq = frechet_distance(p, q)
        assert d_pq >= 0
        assert d_pq == pytest.approx(frechet_distance(q, p), rel=1e-9, abs=1e-9)

    def test_rejects_non_psd(self):
        bad = FeatureGaussian(mean=torch.zeros(2), cov=torch.tensor([[1.0, 0.0], [0.0, -0.5]]))
        good = random_gaussian(2, seed=62)
        with pytest.raises(ValueError):
            frechet_distance(bad, good)

    def test_rejects_dim_mismatch(self):
        with pytest.raises(ValueError):
            frechet_distance(random_gaussian(2, seed=63), random_gaussian(3, seed=64))


class TestPixelFeatures:
    def test_shapes(self):
        assert pixel_features(torch.zeros(32, 32, 3)).shape == (64,)
        assert pixel_features(torch.zeros(5, 32, 32, 3)).shape == (5, 64)

    def test_constant_image(self):
        feats = pixel_features(torch.full((16, 16, 3), 0.25))
        assert torch.allclose(feats, torch.full((64,), 0.25))

    def test_gaussian_fit(self):
        g = torch.Generator().manual_seed(65)
        feats = torch.randn(30, 5, generator=g, dtype=torch.float64)
        fg = FeatureGaussian.from_features(feats)
        assert torch.allclose(fg.mean, feats.mean(dim=0))
        centered = feats - feats.mean(dim=0)
        assert torch.allclose(fg.cov, centered.t() @ centered / 29)

import pytest
import torch

from pairedit.autoencoder import (
    AutoencoderConfig,
    ImageDecoder,
    ImageEncoder,
    SkipStack,
    decode,
    encode,
    kl_loss,
    reparameterize,
)


@pytest.fixture(scope="module")
def nets():
    torch.manual_seed(0)
    cfg = AutoencoderConfig(base_channels=8, latent_channels=4, levels=3)
    return ImageEncoder(cfg), ImageDecoder(cfg)


def rand_img(h, w, c=3, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(h, w, c, generator=g) * 2 - 1


class TestEncode:
    def test_shape_contract(self, nets):
        enc, _ = nets
        mu, logvar, skips = encode(rand_img(16, 16), enc)
        assert mu.shape == (4, 4, 4)
        assert logvar.shape == (4, 4, 4)
        assert len(skips) == 3

    def test_deterministic(self, nets):
        enc, _ = nets
        img = rand_img(16, 16, seed=1)
        mu1, lv1, s1 = encode(img, enc)
        mu2, lv2, s2 = encode(img, enc)
        assert torch.equal(mu1, mu2) and torch.equal(lv1, lv2)
        for a, b in zip(s1.features, s2.features):
            assert torch.equal(a, b)

    def test_indivisible_dims_rejected(self, nets):
        enc, _ = nets
        with pytest.raises(ValueError):
            encode(rand_img(18, 16), enc)

    def test_batched(self, nets):
        enc, _ = nets
        imgs = torch.stack([rand_img(16, 16, seed=k) for k in range(3)])
        mu, _, _ = encode(imgs, enc)
        assert mu.shape == (3, 4, 4, 4)


class TestReparameterize:
    def test_clamped_logvar_collapses_to_mu(self):
        mu = torch.randn(4, 4, 2, generator=torch.Generator().manual_seed(2))
        out = reparameterize(mu, torch.full_like(mu, -1e9), seeded_rng_like())
        assert torch.allclose(out, mu, atol=1e-5)

    def test_unit_gaussian_monte_carlo(self):
        g = torch.Generator().manual_seed(3)
        mu = torch.zeros(10_000)
        out = reparameterize(mu, torch.zeros_like(mu), g)
        assert out.var().item() == pytest.approx(1.0, abs=0.05)
        assert out.mean().item() == pytest.approx(0.0, abs=0.05)

    def test_disabled_rng_returns_mu_exactly(self):
        mu = torch.randn(3, 3, 4, generator=torch.Generator().manual_seed(4))
        assert reparameterize(mu, torch.zeros_like(mu), None) is mu

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            reparameterize(torch.zeros(2, 2, 1), torch.zeros(2, 2, 2), None)


def seeded_rng_like(seed=0):
    g = torch.Generator()
    g.manual_seed(seed)
    return g


class TestKlLoss:
    def test_prior_matched_posterior_is_zero(self):
        z = torch.zeros(4, 4, 4)
        assert kl_loss(z, z).item() == 0.0

    def test_closed_form_half(self):
        mu = torch.ones(8, 8, 2)
        assert kl_loss(mu, torch.zeros_like(mu)).item() == pytest.approx(0.5, abs=1e-7)

    def test_matches_independent_oracle(self):
        g = torch.Generator().manual_seed(5)
        mu = torch.randn(6, 6, 3, generator=g, dtype=torch.float64)
        lv = torch.randn(6, 6, 3, generator=g, dtype=torch.float64) * 0.3
        oracle = 0.5 * (lv.exp() + mu**2 - 1.0 - lv)
        assert kl_loss(mu, lv).item() == pytest.approx(oracle.mean().item(), abs=1e-10)

    def test_nonnegative(self):
        g = torch.Generator().manual_seed(6)
        for _ in range(20):
            mu = torch.randn(4, 4, 2, generator=g)
            lv = torch.randn(4, 4, 2, generator=g)
            assert kl_loss(mu, lv).item() >= 0.0


class TestDecode:
    def test_noise_free_decode_is_deterministic(self, nets):
        enc, dec = nets
        img = rand_img(16, 16, seed=7)
        mu, _, skips = encode(img, enc)
        out1 = decode(mu, skips, dec, noise_scale=0.0)
        out2 = decode(mu, skips, dec, noise_scale=0.0)
        assert torch.equal(out1, out2)
        assert out1.shape == (16, 16, 3)

    def test_zero_gains_make_noise_scale_irrelevant_at_init(self, nets):
        enc, dec = nets
        img = rand_img(16, 16, seed=8)
        mu, _, skips = encode(img, enc)
        quiet = decode(mu, skips, dec, noise_scale=0.0)
        loud = decode(mu, skips, dec, noise_scale=1.0, rng=seeded_rng_like(1))
        assert torch.equal(quiet, loud)

    def test_level_mismatch_rejected(self, nets):
        enc, dec = nets
        img = rand_img(16, 16, seed=9)
        mu, _, skips = encode(img, enc)
        with pytest.raises(ValueError):
            decode(mu, SkipStack(skips.features[:2]), dec)

    def test_none_skips_run_with_zero_stack(self, nets):
        enc, dec = nets
        mu, _, skips = encode(rand_img(16, 16, seed=10), enc)
        zeroed = decode(mu, skips.zeros_like(), dec)
        none = decode(mu, None, dec)
        assert torch.equal(zeroed, none)

    def test_nonzero_gain_responds_to_noise(self, nets):
        enc, dec = nets
        mu, _, skips = encode(rand_img(16, 16, seed=11), enc)
        with torch.no_grad():
            dec.noises[0].gain.fill_(0.5)
        try:
            quiet = decode(mu, skips, dec, noise_scale=0.0)
            loud = decode(mu, skips, dec, noise_scale=1.0, rng=seeded_rng_like(2))
            assert not torch.equal(quiet, loud)
            again = decode(mu, skips, dec, noise_scale=1.0, rng=seeded_rng_like(2))
            assert torch.equal(loud, again)
        finally:
            with torch.no_grad():
                dec.noises[0].gain.zero_()

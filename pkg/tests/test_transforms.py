import pytest
import torch

from pairedit.transforms import (
    TransformPack,
    apply_color_affine,
    apply_flow,
    compose_transform,
    hflip_flow,
    identity_flow,
    identity_pack,
)


def rand_img(h, w, c, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(h, w, c, generator=g, dtype=dtype) * 2 - 1


class TestIdentityFlow:
    def test_2x2_grid_values(self):
        flow = identity_flow(2, 2)
        expected = torch.tensor(
            [[[-1.0, -1.0], [-1.0, 1.0]], [[1.0, -1.0], [1.0, 1.0]]]
        )
        assert torch.equal(flow, expected)

    def test_single_pixel_convention(self):
        flow = identity_flow(1, 1)
        assert torch.equal(flow, torch.tensor([[[-1.0, -1.0]]]))

    def test_identity_warp_is_bit_exact(self):
        for h, w in [(2, 2), (3, 5), (7, 7), (16, 16), (33, 17)]:
            img = rand_img(h, w, 3, seed=h * 100 + w)
            out = apply_flow(img, identity_flow(h, w))
            assert torch.equal(out, img)

    def test_rejects_bad_dims(self):
        with pytest.raises(ValueError):
            identity_flow(0, 4)
        with pytest.raises(ValueError):
            identity_flow(4, -1)


class TestHflipFlow:
    def test_1x2_mirror(self):
        img = torch.tensor([[[0.25], [-0.75]]])
        out = apply_flow(img, hflip_flow(1, 2))
        assert torch.equal(out, torch.tensor([[[-0.75], [0.25]]]))

    def test_involution(self):
        img = rand_img(6, 8, 3, seed=3)
        flow = hflip_flow(6, 8)
        assert torch.equal(apply_flow(apply_flow(img, flow), flow), img)

    def test_equals_identity_with_negated_columns(self):
        ident = identity_flow(5, 9)
        flip = hflip_flow(5, 9)
        assert torch.equal(flip[..., 0], ident[..., 0])
        assert torch.equal(flip[..., 1], -ident[..., 1])

    def test_checkerboard_mirror(self):
        board = torch.zeros(4, 4, 1)
        board[::2, 1::2] = 1.0
        board[1::2, ::2] = 1.0
        out = apply_flow(board, hflip_flow(4, 4))
        assert torch.equal(out, torch.flip(board, dims=[1]))


class TestApplyFlow:
    def test_center_bilinear_oracle(self):
        # all four corners blend equally at the exact center of a 2x2 image
        ref = torch.tensor([[[0.0], [1.0]], [[1.0], [0.0]]])
        flow = torch.zeros(2, 2, 2)
        out = apply_flow(ref, flow)
        assert torch.allclose(out, torch.full((2, 2, 1), 0.5))

    def test_manual_bilinear_point(self):
        # every output pixel samples (row, col) = (0.25, 0.75) in pixel units
        ref = torch.tensor([[[0.0], [1.0]], [[2.0], [3.0]]], dtype=torch.float64)
        flow = torch.empty(2, 2, 2, dtype=torch.float64)
        flow[..., 0] = 2 * 0.25 - 1
        flow[..., 1] = 2 * 0.75 - 1
        out = apply_flow(ref, flow)
        expected = (
            0.75 * 0.25 * 0.0 + 0.75 * 0.75 * 1.0 + 0.25 * 0.25 * 2.0 + 0.25 * 0.75 * 3.0
        )
        assert torch.allclose(out, torch.full((2, 2, 1), expected, dtype=torch.float64))

    def test_border_clamp(self):
        ref = torch.tensor([[[1.0], [2.0]], [[3.0], [4.0]]])
        flow = torch.full((2, 2, 2), -5.0)  # far out of range: nearest is pixel (0, 0)
        out = apply_flow(ref, flow)
        assert torch.equal(out, torch.full((2, 2, 1), 1.0))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            apply_flow(rand_img(4, 4, 1), identity_flow(4, 5))

    def test_nonfinite_flow_rejected(self):
        flow = identity_flow(4, 4).clone()
        flow[0, 0, 0] = float("nan")
        with pytest.raises(ValueError):
            apply_flow(rand_img(4, 4, 1), flow)

    def test_batched_matches_loop(self):
        g = torch.Generator().manual_seed(11)
        imgs = torch.rand(3, 5, 5, 3, generator=g) * 2 - 1
        flows = torch.rand(3, 5, 5, 2, generator=g) * 1.8 - 0.9
        batched = apply_flow(imgs, flows)
        for k in range(3):
            assert torch.equal(batched[k], apply_flow(imgs[k], flows[k]))


class TestColorAffine:
    def test_identity(self):
        img = rand_img(5, 5, 3, seed=5)
        aff = torch.zeros(5, 5, 2)
        aff[..., 0] = 1.0
        assert torch.equal(apply_color_affine(img, aff), img)

    def test_degenerate_constant(self):
        img = rand_img(4, 4, 3, seed=6)
        aff = torch.zeros(4, 4, 2)
        aff[..., 1] = 0.3
        assert torch.allclose(apply_color_affine(img, aff), torch.full((4, 4, 3), 0.3))

    def test_forced_arithmetic(self):
        img = torch.full((1, 1, 1), 0.5)
        aff = torch.tensor([[[2.0, -0.25]]])
        assert torch.allclose(apply_color_affine(img, aff), torch.tensor([[[0.75]]]))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            apply_color_affine(rand_img(4, 4, 1), torch.zeros(4, 5, 2))


class TestCompose:
    def test_identity_pack(self):
        img = rand_img(8, 8, 3, seed=7)
        assert torch.equal(compose_transform(img, identity_pack(8, 8)), img)

    def test_flip_and_half_intensity(self):
        img = rand_img(6, 6, 3, seed=8)
        aff = torch.zeros(6, 6, 2)
        aff[..., 0] = 0.5
        pack = TransformPack(flow=hflip_flow(6, 6), affine=aff)
        assert torch.allclose(compose_transform(img, pack), 0.5 * torch.flip(img, dims=[1]))

    def test_equals_sequential_application(self):
        g = torch.Generator().manual_seed(9)
        img = rand_img(7, 7, 3, seed=9)
        flow = torch.rand(7, 7, 2, generator=g) * 2 - 1
        aff = torch.rand(7, 7, 2, generator=g)
        pack = TransformPack(flow=flow, affine=aff)
        manual = apply_color_affine(apply_flow(img, flow), aff)
        assert torch.equal(compose_transform(img, pack), manual)

    def test_range_preservation(self):
        g = torch.Generator().manual_seed(10)
        eps = 0.05
        img = rand_img(8, 8, 3, seed=10)
        flow = torch.rand(8, 8, 2, generator=g) * 2 - 1
        aff = torch.stack(
            [torch.rand(8, 8, generator=g), (torch.rand(8, 8, generator=g) * 2 - 1) * eps],
            dim=-1,
        )
        out = compose_transform(img, TransformPack(flow=flow, affine=aff))
        assert out.min() >= -1 - eps - 1e-6
        assert out.max() <= 1 + eps + 1e-6


class TestPackSerialization:
    def test_raster_plane_order(self):
        pack = identity_pack(3, 4)
        raster = pack.to_raster()
        assert raster.shape == (3, 4, 4)
        assert torch.equal(raster[..., 0], pack.flow[..., 0])
        assert torch.equal(raster[..., 1], pack.flow[..., 1])
        assert torch.equal(raster[..., 2], pack.affine[..., 0])
        assert torch.equal(raster[..., 3], pack.affine[..., 1])

    def test_round_trip(self):
        pack = identity_pack(5, 5)
        back = TransformPack.from_raster(pack.to_raster())
        assert torch.equal(back.flow, pack.flow)
        assert torch.equal(back.affine, pack.affine)

    def test_mismatched_shapes_rejected(self):
        with pytest.raises(ValueError):
            TransformPack(flow=torch.zeros(3, 3, 2), affine=torch.zeros(4, 3, 2))


def interior_flow(h, w, seed, margin=0.05):
    """Random flow whose pixel coordinates stay strictly inside bilinear
    cells, away from border clamps, snap windows, and weight switches."""
    g = torch.Generator().manual_seed(seed)
    cell_r = torch.randint(0, h - 1, (h, w), generator=g).double()
    cell_c = torch.randint(0, w - 1, (h, w), generator=g).double()
    frac_r = torch.rand(h, w, generator=g, dtype=torch.float64) * (1 - 2 * margin) + margin
    frac_c = torch.rand(h, w, generator=g, dtype=torch.float64) * (1 - 2 * margin) + margin
    rows = (cell_r + frac_r) * (2.0 / (h - 1)) - 1.0
    cols = (cell_c + frac_c) * (2.0 / (w - 1)) - 1.0
    return torch.stack([rows, cols], dim=-1)


def finite_difference_check(seed, h=6, w=6, step=1e-4, tol=1e-4):
    g = torch.Generator().manual_seed(seed + 10_000)
    ref = (torch.rand(h, w, 1, generator=g, dtype=torch.float64) * 2 - 1).requires_grad_(True)
    flow = interior_flow(h, w, seed).requires_grad_(True)
    aff = torch.rand(h, w, 2, generator=g, dtype=torch.float64).requires_grad_(True)
    weight = torch.rand(h, w, 1, generator=g, dtype=torch.float64)

    def loss_fn(ref_, flow_, aff_):
        pack = TransformPack(flow=flow_, affine=aff_)
        return (weight * compose_transform(ref_, pack)).sum()

    loss = loss_fn(ref, flow, aff)
    loss.backward()

    for pos, tensor in enumerate((ref, flow, aff)):
        analytic = tensor.grad
        flat = tensor.detach().clone().reshape(-1)
        numeric = torch.zeros_like(flat)
        for idx in range(flat.numel()):
            for sign, store in ((1.0, 1), (-1.0, -1)):
                probe = flat.clone()
                probe[idx] += sign * step
                args = [ref.detach(), flow.detach(), aff.detach()]
                args[pos] = probe.reshape(tensor.shape)
                val = loss_fn(*args).item()
                numeric[idx] += store * val
        numeric = (numeric / (2 * step)).reshape(tensor.shape)
        err = (analytic - numeric).abs()
        scale = torch.maximum(analytic.abs(), numeric.abs())
        assert (err <= tol * scale + 1e-8).all(), (
            f"gradient mismatch for tensor of shape {tuple(tensor.shape)}: "
            f"max rel err {(err / (scale + 1e-12)).max().item():.3e}"
        )


class TestGradients:
    @pytest.mark.parametrize("seed", range(10))
    def test_finite_difference_match(self, seed):
        finite_difference_check(seed)

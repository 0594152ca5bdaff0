import numpy as np
import pytest
import torch

from celldet.geometry import PyramidLevel, bilinear_sample, generate_grid_proposals
from celldet.model import (
    BackboneConfig,
    HeadConfig,
    MFoVAggregator,
    ModelConfig,
    PointProposalNet,
    PyramidEncoder,
    build_pyramid,
    deformation_offsets,
    extract_multiscale_features,
    mfov_aggregate,
)
from oracles import central_difference


def test_pyramid_shapes():
    enc = PyramidEncoder(BackboneConfig(stage_channels=[4, 8, 8, 8], pyramid_channels=64))
    pyr = build_pyramid(torch.randn(2, 3, 64, 64), enc)
    assert [lv.level_index for lv in pyr] == [2, 3, 4, 5]
    assert [lv.spatial_size for lv in pyr] == [(16, 16), (8, 8), (4, 4), (2, 2)]
    assert all(lv.channels == 64 for lv in pyr)
    assert all(lv.stride == 2 ** lv.level_index for lv in pyr)


def test_pyramid_zero_input_bias_free():
    enc = PyramidEncoder(BackboneConfig(stage_channels=[4, 8, 8, 8], pyramid_channels=8))
    with torch.no_grad():
        for name, p in enc.named_parameters():
            if name.endswith("bias"):
                p.zero_()
    assert all(torch.count_nonzero(t) == 0 for t in enc(torch.zeros(1, 3, 32, 32)))


def test_pyramid_indivisible():
    enc = PyramidEncoder(BackboneConfig(stage_channels=[4, 8, 8, 8], pyramid_channels=8))
    with pytest.raises(ValueError, match="divisible by 32"):
        enc(torch.zeros(1, 3, 48, 48))


@pytest.mark.parametrize("levels", [[1, 2], [3, 3], [4, 2], []])
def test_bad_levels(levels):
    with pytest.raises(ValueError):
        BackboneConfig(levels=levels)


def test_bad_dropout_and_mode():
    with pytest.raises(ValueError):
        HeadConfig(dropout_rate=1.0)
    with pytest.raises(ValueError):
        ModelConfig(mode="cascade")


def test_multiscale_features():
    pyr = [PyramidLevel(j, torch.randn(1, 64, 2 ** (6 - j), 2 ** (6 - j))) for j in (2, 3, 4, 5)]
    pts = torch.rand(1, 5, 2) * 64
    assert extract_multiscale_features(pyr, pts).shape == (1, 5, 256)
    zero = [PyramidLevel(lv.level_index, torch.zeros_like(lv.data)) for lv in pyr]
    assert torch.count_nonzero(extract_multiscale_features(zero, pts)) == 0
    one = [pyr[1]]
    assert torch.equal(extract_multiscale_features(one, pts), bilinear_sample(pyr[1], pts))
    # finest first regardless of input order
    shuffled = [pyr[2], pyr[0], pyr[3], pyr[1]]
    assert torch.equal(extract_multiscale_features(shuffled, pts), extract_multiscale_features(pyr, pts))


class TestDeformationHead:
    def test_zero_at_init(self, tiny_cfg):
        model = PointProposalNet(tiny_cfg())
        assert torch.count_nonzero(deformation_offsets(model, torch.randn(10, 8))) == 0

    def test_unbounded_output(self, tiny_cfg):
        model = PointProposalNet(tiny_cfg())
        model.eval()
        head = model.deformation
        with torch.no_grad():
            head.fc2.bias.copy_(torch.tensor([100.0, -100.0]))
        out = deformation_offsets(model, torch.randn(3, 8))
        assert torch.allclose(out, torch.tensor([[100.0, -100.0]] * 3))

    def test_parameter_gradient(self, tiny_cfg, float64):
        model = PointProposalNet(tiny_cfg(head=HeadConfig(hidden_dim=6, num_classes=2, dropout_rate=0.0))).double()
        head = model.deformation
        torch.nn.init.normal_(head.fc2.weight)
        x = torch.randn(5, 8, dtype=torch.float64)
        w = torch.randn(5, 2, dtype=torch.float64)
        (deformation_offsets(model, x) * w).sum().backward()
        for param in (head.fc1.weight, head.fc2.weight):
            base = param.detach().clone()

            def f(v, param=param):
                with torch.no_grad():
                    param.copy_(torch.from_numpy(v))
                    val = float((deformation_offsets(model, x) * w).sum())
                    param.copy_(base)
                return val

            fd = central_difference(f, base.numpy())
            np.testing.assert_allclose(param.grad.numpy(), fd, rtol=1e-4, atol=1e-8)


class TestForward:
    def test_shapes_and_identity_at_init(self, tiny_cfg):
        model = PointProposalNet(tiny_cfg(head=HeadConfig(hidden_dim=16, num_classes=3)))
        out = model(torch.rand(2, 3, 64, 64))
        m = len(generate_grid_proposals(64, 64, 16))
        assert out.logits.shape == (2, m, 4)
        assert out.final_points.shape == (2, m, 2)
        assert out.regression_offsets.shape == (2, m, 2)
        grid = out.proposals_initial.initial.expand(2, -1, -1)
        assert torch.equal(out.final_points, grid)
        assert torch.equal(out.proposals_deformed.deformed, grid)
        assert torch.equal(out.final_points, out.proposals_deformed.deformed + out.regression_offsets)

    def test_eval_is_deterministic(self, tiny_cfg):
        model = PointProposalNet(tiny_cfg()).eval()
        x = torch.rand(1, 3, 32, 32)
        a, b = model(x), model(x)
        assert torch.equal(a.logits, b.logits) and torch.equal(a.final_points, b.final_points)

    def test_iterative_pools_stages(self, tiny_cfg):
        model = PointProposalNet(tiny_cfg(mode="iterative", n_stages=2))
        out = model(torch.rand(1, 3, 512, 512))
        assert out.num_proposals == 1024
        assert out.matcher_points.shape == (1, 2048, 2)
        assert out.matcher_logits.shape == (1, 2048, 4)
        assert len(out.stages) == 2

    def test_mode_errors(self, tiny_cfg):
        model = PointProposalNet(tiny_cfg())
        with pytest.raises(ValueError, match="unknown mode"):
            model(torch.rand(1, 3, 32, 32), mode="bogus")

    def test_size_error(self, tiny_cfg):
        model = PointProposalNet(tiny_cfg())
        with pytest.raises(ValueError, match="divisible by 32"):
            model(torch.rand(1, 3, 40, 40))

    def test_mfov_k1_matches_single(self, tiny_cfg):
        torch.manual_seed(0)
        single = PointProposalNet(tiny_cfg()).eval()
        mfov = PointProposalNet(tiny_cfg(mfov_k=1)).eval()
        mfov.load_state_dict(single.state_dict())
        x = torch.rand(2, 3, 32, 32)
        a, b = single(x), mfov(x.unsqueeze(1))
        assert torch.equal(a.logits, b.logits) and torch.equal(a.final_points, b.final_points)

    def test_mfov_forward_shapes(self, tiny_cfg):
        model = PointProposalNet(tiny_cfg(mfov_k=2))
        out = model(torch.rand(1, 2, 3, 128, 128))
        assert out.logits.shape == (1, 64, 4)
        with pytest.raises(ValueError, match="expects 2 FoV"):
            model(torch.rand(1, 3, 128, 128))


class TestAggregate:
    @pytest.mark.parametrize("k_total", [2, 3, 4])
    @pytest.mark.parametrize("upsample", ["transposed", "bilinear"])
    def test_shapes(self, k_total, upsample):
        sizes = [64, 32, 16]
        agg = MFoVAggregator(k_total, len(sizes), 4, upsample)
        pyrs = [[torch.randn(1, 4, s, s) for s in sizes] for _ in range(k_total)]
        out = agg(pyrs)
        assert [t.shape for t in out] == [t.shape for t in pyrs[-1]]

    def test_single_fov_passthrough(self):
        pyr = [torch.randn(1, 4, 8, 8)]
        assert mfov_aggregate([pyr], None)[0] is pyr[0]

    def test_zero_context_identity_conv(self):
        agg = MFoVAggregator(3, 2, 4)
        with torch.no_grad():
            for conv in agg.fuse:
                conv.weight.zero_()
                conv.bias.zero_()
                conv.weight[range(4), range(4), 1, 1] = 1.0
        inner = [torch.randn(1, 4, 16, 16), torch.randn(1, 4, 8, 8)]
        zeros = [[torch.zeros_like(t) for t in inner] for _ in range(2)]
        out = agg(zeros + [inner])
        assert all(torch.equal(a, b) for a, b in zip(out, inner))

    def test_transposed_init_is_nearest(self):
        agg = MFoVAggregator(2, 1, 3)
        x = torch.randn(1, 3, 4, 4)
        up = agg.up[0](x)
        assert torch.allclose(up, torch.nn.functional.interpolate(x, scale_factor=2, mode="nearest"))

    def test_shape_mismatch(self):
        agg = MFoVAggregator(2, 1, 4)
        with pytest.raises(ValueError, match="FoV 1"):
            agg([[torch.randn(1, 4, 8, 8)], [torch.randn(1, 4, 16, 16)]])


def test_end_to_end_parameter_gradients(tiny_cfg, float64):
    from celldet.assignment import LossConfig, batch_loss

    torch.manual_seed(3)
    cfg = tiny_cfg(head=HeadConfig(hidden_dim=8, num_classes=2, dropout_rate=0.0))
    model = PointProposalNet(cfg).double()
    with torch.no_grad():
        for head in (model.deformation, model.heads[0].regression):
            torch.nn.init.normal_(head.fc2.weight, std=0.5)
    x = torch.rand(1, 3, 32, 32)
    targets = [(torch.tensor([[7.0, 9.0], [20.0, 25.0]]), torch.tensor([0, 1]))]
    out = model(x)
    _, assignments = batch_loss(out, targets, LossConfig())
    fixed = assignments[0]

    from celldet.assignment import compute_loss

    def loss():
        o = model(x)
        return compute_loss(o.final_points[0], o.logits[0], *targets[0], fixed, LossConfig()).total

    model.zero_grad()
    loss().backward()
    rng = np.random.default_rng(0)
    named = dict(model.named_parameters())
    picks = [("encoders.0.stem.0.weight", 4), ("encoders.0.smooth.0.weight", 4),
             ("deformation.fc1.weight", 4), ("deformation.fc2.weight", 4),
             ("heads.0.regression.fc2.weight", 3), ("heads.0.classification.fc1.weight", 3)]
    checked = 0
    for name, count in picks:
        p = named[name]
        for flat in rng.choice(p.numel(), size=count, replace=False):
            idx = np.unravel_index(flat, p.shape)
            base = p.detach()[idx].item()

            def f(v, p=p, idx=idx, base=base):
                with torch.no_grad():
                    p[idx] = float(v[0])
                    val = float(loss())
                    p[idx] = base
                return val

            fd = central_difference(f, [base], eps=1e-6)[0]
            g = p.grad[idx].item()
            assert abs(g - fd) <= 1e-3 * max(abs(fd), abs(g)) + 1e-7, (name, idx, g, fd)
            checked += 1
    assert checked >= 20

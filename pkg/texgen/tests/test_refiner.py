import math, pytest, torch
import numpy as np
import torch.nn as nn

from modules.types import ConfigurationError, InvalidInputError
from modules.perceptual import PerceptualFeatureExtractor, RandomPyramidExtractor
from modules.refiner import (
    RefinerConfig, RefinerNet, PatchDiscriminator, DiscriminatorOutput, LossWeights, PerceptualTapSchedule,
    RefinerLossComponents, blend, refiner_recon_loss, tapped_perceptual_loss, gan_losses,
    feature_matching_loss, refiner_total_loss, PROBABILITY_EPS,
)


def logit(p: float) -> float:
    return 60.0 if p >= 1.0 else -60.0 if p <= 0.0 else math.log(p / (1.0 - p))


class ConstantDiscriminator(nn.Module):
    """Emits fixed probabilities for real (bright) and fake (dark) inputs."""
    def __init__(self, p_real: float, p_fake: float):
        super().__init__()
        self.p_real, self.p_fake = p_real, p_fake

    def forward(self, x):
        real = x.mean(dim=(1, 2, 3)) > 0.5
        logits = torch.tensor([logit(self.p_real if r else self.p_fake) for r in real.tolist()]).view(-1, 1, 1, 1).expand(-1, 1, 3, 3)
        return DiscriminatorOutput(logits=logits, features=[x, x, x])


class ScaledTapExtractor(PerceptualFeatureExtractor):
    """Passes the input through at every tap (or only at `zero_all_but`), so each tap term has a closed form."""
    def __init__(self, taps=(1, 6, 11, 20, 29), zero_all_but=None):
        super().__init__()
        self.taps = tuple(taps)
        self.zero_all_but = zero_all_but

    def forward(self, x):
        return [x * (0.0 if self.zero_all_but not in (None, tap) else 1.0) for tap in self.taps]


class TestRefinerNet:
    config = RefinerConfig(resolution=32, base_channels=4)

    def test_output_shapes_and_ranges(self):
        net = RefinerNet(self.config).eval()
        t_refine, m_blend = net(torch.rand(2, 3, 32, 32), torch.rand(2, 1, 32, 32))
        assert tuple(t_refine.shape) == (2, 3, 32, 32) and tuple(m_blend.shape) == (2, 1, 32, 32)
        assert 0.0 <= t_refine.min() and t_refine.max() <= 1.0
        assert 0.0 <= m_blend.min() and m_blend.max() <= 1.0

    def test_deterministic_in_eval_mode(self):
        net = RefinerNet(self.config).eval()
        inputs = torch.rand(1, 3, 32, 32), torch.rand(1, 1, 32, 32)
        with torch.no_grad():
            a, b = net(*inputs), net(*inputs)
        assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])

    def test_gradients_reach_every_parameter(self):
        net = RefinerNet(self.config)
        t_sample = torch.rand(2, 3, 32, 32)
        t_refine, m_blend = net(t_sample, torch.rand(2, 1, 32, 32))
        (blend(t_sample, t_refine, m_blend) * torch.rand(2, 3, 32, 32)).sum().backward()
        for name, p in net.named_parameters():
            assert p.grad is not None, name
            # conv biases ahead of instance norm cancel out, so only weights must move
            if name.endswith("weight"):
                assert p.grad.abs().sum() > 0, name

    def test_resolution_mismatch_is_rejected(self):
        with pytest.raises(InvalidInputError):
            RefinerNet(self.config)(torch.rand(1, 3, 16, 16), torch.rand(1, 1, 16, 16))


class TestBlend:
    def test_limits(self):
        ts, tr = torch.rand(1, 3, 8, 8), torch.rand(1, 3, 8, 8)
        assert torch.equal(blend(ts, tr, torch.ones(1, 1, 8, 8)), ts)
        assert torch.equal(blend(ts, tr, torch.zeros(1, 1, 8, 8)), tr)

    def test_half_mask_matches_loop_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            ts, tr = rng.uniform(size=(8, 8, 3)), rng.uniform(size=(8, 8, 3))
            out = blend(ts, tr, np.full((8, 8, 1), 0.5))
            for y in range(8):
                for x in range(8):
                    for c in range(3):
                        assert abs(out[y, x, c] - (ts[y, x, c] + tr[y, x, c]) / 2) <= 1e-6

    def test_convex_combination(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            ts, tr = rng.uniform(size=(8, 8, 3)), rng.uniform(size=(8, 8, 3))
            out = blend(ts, tr, rng.uniform(size=(8, 8, 1)))
            assert np.all(out >= np.minimum(ts, tr) - 1e-12) and np.all(out <= np.maximum(ts, tr) + 1e-12)


class TestReconLoss:
    def test_zero_and_closed_form(self):
        t = torch.rand(1, 3, 8, 8)
        assert refiner_recon_loss(t, t).item() == 0.0
        assert refiner_recon_loss(t + 0.1, t).item() == pytest.approx(0.1 * 3 * 64, rel=1e-5)

    def test_symmetric(self):
        a, b = torch.rand(1, 3, 8, 8), torch.rand(1, 3, 8, 8)
        assert refiner_recon_loss(a, b).item() == pytest.approx(refiner_recon_loss(b, a).item())


class TestTappedPerceptualLoss:
    def test_identical_inputs(self):
        t = torch.rand(1, 3, 32, 32)
        assert tapped_perceptual_loss(t, t, RandomPyramidExtractor(width_divisor=16)).item() == 0.0

    def test_deepest_tap_has_unit_weight(self):
        a, b = torch.rand(1, 3, 8, 8), torch.rand(1, 3, 8, 8)
        loss = tapped_perceptual_loss(a, b, ScaledTapExtractor(zero_all_but=29))
        assert loss.item() == pytest.approx((a - b).abs().sum().item(), rel=1e-6)

    @pytest.mark.parametrize("tap, divisor", [(1, 32.0), (6, 16.0), (11, 8.0), (20, 4.0), (29, 1.0)])
    def test_per_tap_scaling(self, tap, divisor):
        a, b = torch.rand(1, 3, 8, 8), torch.rand(1, 3, 8, 8)
        loss = tapped_perceptual_loss(a, b, ScaledTapExtractor(zero_all_but=tap))
        assert loss.item() == pytest.approx((a - b).abs().sum().item() / divisor, rel=1e-6)

    def test_matches_independent_sum(self):
        extractor = RandomPyramidExtractor(width_divisor=16)
        a, b = torch.rand(1, 3, 32, 32), torch.rand(1, 3, 32, 32)
        fa, fb = extractor.tapped(a), extractor.tapped(b)
        expected = sum((fb[t] - fa[t]).abs().sum().item() / w for t, w in zip((1, 6, 11, 20, 29), (32, 16, 8, 4, 1)))
        assert tapped_perceptual_loss(a, b, extractor).item() == pytest.approx(expected, rel=1e-5)

    def test_missing_tap_is_a_configuration_error(self):
        with pytest.raises(ConfigurationError):
            tapped_perceptual_loss(torch.rand(1, 3, 8, 8), torch.rand(1, 3, 8, 8), ScaledTapExtractor(taps=(1, 6, 11)))

    def test_schedule_validation(self):
        with pytest.raises(ValueError):
            PerceptualTapSchedule(taps=(6, 1, 11, 20, 29))


class TestGanLosses:
    def test_equilibrium_value(self):
        d = ConstantDiscriminator(0.5, 0.5)
        d_loss, _ = gan_losses(d, torch.ones(1, 3, 8, 8), torch.zeros(1, 3, 8, 8))
        assert d_loss.item() == pytest.approx(-2.0 * math.log(0.5), rel=1e-6)

    def test_perfect_discriminator(self):
        d = ConstantDiscriminator(1.0, 0.0)
        d_loss, g_loss = gan_losses(d, torch.ones(1, 3, 8, 8), torch.zeros(1, 3, 8, 8))
        assert d_loss.item() < 1e-5
        assert g_loss.item() > 10.0
        assert math.isfinite(d_loss.item()) and math.isfinite(g_loss.item())

    def test_batch_is_mean_of_samples(self):
        d = PatchDiscriminator(channels=8)
        real, fake = torch.rand(2, 3, 32, 32), torch.rand(2, 3, 32, 32)
        d_both, g_both = gan_losses(d, real, fake)
        per_sample = [gan_losses(d, real[i:i + 1], fake[i:i + 1]) for i in range(2)]
        assert d_both.item() == pytest.approx(np.mean([p[0].item() for p in per_sample]), rel=1e-5)
        assert g_both.item() == pytest.approx(np.mean([p[1].item() for p in per_sample]), rel=1e-5)

    def test_patch_map_is_larger_than_one_texel(self):
        out = PatchDiscriminator(channels=4)(torch.rand(1, 3, 256, 256))
        assert out.logits.shape[-1] > 1 and out.logits.shape[-2] > 1
        assert len(out.features) == 3

    def test_untrained_discriminator_is_near_equilibrium(self):
        d = PatchDiscriminator(channels=16)
        d_loss, _ = gan_losses(d, torch.rand(2, 3, 64, 64), torch.rand(2, 3, 64, 64))
        assert d_loss.item() == pytest.approx(2.0 * math.log(2.0), rel=0.2)

    def test_probabilities_are_clamped(self):
        d = ConstantDiscriminator(0.0, 1.0)
        d_loss, g_loss = gan_losses(d, torch.ones(1, 3, 8, 8), torch.zeros(1, 3, 8, 8))
        assert d_loss.item() == pytest.approx(-2.0 * math.log(PROBABILITY_EPS), rel=1e-2)
        assert math.isfinite(g_loss.item())


class TestFeatureMatching:
    def test_zero_for_identical_inputs(self):
        d = PatchDiscriminator(channels=8)
        t = torch.rand(1, 3, 32, 32)
        assert feature_matching_loss(d, t, t).item() == 0.0

    def test_equals_sum_of_tap_distances(self):
        d = PatchDiscriminator(channels=8)
        real, fake = torch.rand(1, 3, 32, 32), torch.rand(1, 3, 32, 32)
        fr, ff = d(real).features, d(fake).features
        expected = sum((a - b).abs().mean().item() for a, b in zip(fr, ff))
        assert feature_matching_loss(d, real, fake).item() == pytest.approx(expected, rel=1e-5)

    def test_nonnegative(self):
        d = PatchDiscriminator(channels=4)
        for _ in range(100):
            assert feature_matching_loss(d, torch.rand(1, 3, 32, 32), torch.rand(1, 3, 32, 32)).item() >= 0.0


class TestTotalLoss:
    def test_weights(self):
        assert refiner_total_loss(RefinerLossComponents(0.0, 0.0, 0.0, 0.0)) == 0.0
        assert refiner_total_loss(RefinerLossComponents(1.0, 1.0, 1.0, 1.0)) == 31.0

    def test_linear_in_each_component(self):
        weights = LossWeights()
        base = refiner_total_loss(RefinerLossComponents(0.3, 0.2, 0.5, 0.1), weights)
        assert refiner_total_loss(RefinerLossComponents(1.3, 0.2, 0.5, 0.1), weights) - base == pytest.approx(10.0)
        assert refiner_total_loss(RefinerLossComponents(0.3, 0.2, 1.5, 0.1), weights) - base == pytest.approx(1.0)

    def test_weights_are_nonnegative(self):
        with pytest.raises(ValueError):
            LossWeights(gan=-1.0)

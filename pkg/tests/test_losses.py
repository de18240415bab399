import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import (
    finite_difference_grad,
    oracle_discriminator_loss,
    oracle_feature_loss_l2,
    oracle_gan_generator_loss,
    oracle_mae,
)
from semsr.errors import ShapeError
from semsr.losses import (
    LossBreakdown,
    LossWeights,
    discriminator_loss,
    feature_loss,
    gan_generator_loss,
    mae_loss,
    total_generator_loss,
)

PAPER_WEIGHTS = LossWeights(alpha=1e-3, beta=5.0, gamma=1e-3)


def t64(arr):
    return torch.tensor(np.asarray(arr), dtype=torch.float64)


class TestMAELoss:
    def test_identity(self, rng):
        x = t64(rng.random((2, 3, 4, 4)))
        assert float(mae_loss(x, x.clone())) == 0.0

    def test_constant_offset(self):
        x = torch.full((1, 3, 4, 4), 0.3, dtype=torch.float64)
        assert float(mae_loss(x, x + 0.1)) == pytest.approx(0.1, abs=1e-12)

    def test_matches_oracle(self, rng):
        x, y = rng.random((4, 4, 3)), rng.random((4, 4, 3))
        assert float(mae_loss(t64(x), t64(y))) == pytest.approx(oracle_mae(x, y), abs=1e-7)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mae_loss(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 5, 5))

    def test_gradient_matches_finite_differences(self, rng):
        x = rng.random((4, 4)) + 0.1
        y = rng.random((4, 4))
        xt = t64(x).requires_grad_(True)
        mae_loss(xt, t64(y)).backward()
        fd = finite_difference_grad(lambda a: oracle_mae(a, y), x.copy())
        rel = np.abs(xt.grad.numpy() - fd) / np.maximum(np.abs(fd), 1e-8)
        assert rel.max() < 1e-4


class TestFeatureLoss:
    def test_identity(self, rng):
        fx = t64(rng.random((1, 6, 4, 4)))
        assert float(feature_loss(fx, fx.clone())) == 0.0

    def test_one_hot_flip_value(self):
        # one-hot class 0 vs one-hot class 1: squared distance 2 per pixel, / K=6
        fx = torch.zeros(1, 6, 4, 4, dtype=torch.float64)
        fy = torch.zeros(1, 6, 4, 4, dtype=torch.float64)
        fx[:, 0] = 1.0
        fy[:, 1] = 1.0
        assert float(feature_loss(fx, fy)) == pytest.approx(2.0 / 6.0, abs=1e-12)

    def test_matches_oracle(self, rng):
        fx, fy = rng.random((8, 8, 6)), rng.random((8, 8, 6))
        assert float(feature_loss(t64(fx), t64(fy))) == pytest.approx(
            oracle_feature_loss_l2(fx, fy), abs=1e-7
        )

    def test_gradient_matches_finite_differences(self, rng):
        fx = rng.random((4, 4))
        target = rng.random((4, 4))
        xt = t64(fx).requires_grad_(True)
        feature_loss(t64(target), xt).backward()
        fd = finite_difference_grad(lambda a: oracle_feature_loss_l2(target, a), fx.copy())
        rel = np.abs(xt.grad.numpy() - fd) / np.maximum(np.abs(fd), 1e-8)
        assert rel.max() < 1e-4

    def test_bce_variant_finite_and_zero_floor(self, rng):
        fx = t64(rng.uniform(0.05, 0.95, (2, 3, 4, 4)))
        same = float(feature_loss(fx, fx.clone(), kind="bce"))
        other = float(feature_loss(fx, 1 - fx, kind="bce"))
        assert math.isfinite(same) and math.isfinite(other)
        assert other > same

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            feature_loss(torch.zeros(1), torch.zeros(1), kind="huber")


class TestGANGeneratorLoss:
    def test_zero_logits(self):
        z = torch.zeros(2, 4, 4, 1, dtype=torch.float64)
        assert float(gan_generator_loss(z)) == pytest.approx(math.log(2.0), abs=1e-9)

    def test_saturated_real(self):
        z = torch.full((1, 4, 4, 1), 100.0, dtype=torch.float64)
        assert float(gan_generator_loss(z)) == pytest.approx(0.0, abs=1e-9)

    def test_extreme_negative_no_overflow(self):
        z = torch.full((1, 2, 2, 1), -20.0, dtype=torch.float64)
        got = float(gan_generator_loss(z))
        assert got == pytest.approx(oracle_gan_generator_loss(np.full((1, 2, 2, 1), -20.0)), abs=1e-6)
        assert got == pytest.approx(20.0, abs=1e-6)

    def test_matches_oracle_random(self, rng):
        z = rng.normal(0, 5, (2, 4, 4, 1))
        assert float(gan_generator_loss(t64(z))) == pytest.approx(
            oracle_gan_generator_loss(z), abs=1e-6
        )

    def test_stability_at_large_magnitude(self, rng):
        z = t64(rng.uniform(-50, 50, (2, 4, 4, 1))).requires_grad_(True)
        loss = gan_generator_loss(z)
        loss.backward()
        assert math.isfinite(float(loss.detach()))
        assert torch.isfinite(z.grad).all()

    def test_gradient_matches_finite_differences(self, rng):
        z = rng.normal(0, 2, (4, 4))
        zt = t64(z).requires_grad_(True)
        gan_generator_loss(zt).backward()
        fd = finite_difference_grad(oracle_gan_generator_loss, z.copy())
        rel = np.abs(zt.grad.numpy() - fd) / np.maximum(np.abs(fd), 1e-8)
        assert rel.max() < 1e-4


class TestDiscriminatorLoss:
    def test_zero_logits(self):
        z = torch.zeros(1, 4, 4, 1, dtype=torch.float64)
        assert float(discriminator_loss(z, z)) == pytest.approx(2 * math.log(2.0), abs=1e-9)

    def test_perfect_discriminator(self):
        real = torch.full((1, 2, 2, 1), 100.0, dtype=torch.float64)
        fake = torch.full((1, 2, 2, 1), -100.0, dtype=torch.float64)
        assert float(discriminator_loss(real, fake)) == pytest.approx(0.0, abs=1e-9)

    def test_matches_oracle_random(self, rng):
        zr = rng.normal(0, 3, (2, 4, 4, 1))
        zf = rng.normal(0, 3, (2, 4, 4, 1))
        assert float(discriminator_loss(t64(zr), t64(zf))) == pytest.approx(
            oracle_discriminator_loss(zr, zf), abs=1e-6
        )

    def test_gradient_matches_finite_differences(self, rng):
        zr = rng.normal(0, 2, (4, 4))
        zf_fixed = rng.normal(0, 2, (4, 4))
        zt = t64(zr).requires_grad_(True)
        discriminator_loss(zt, t64(zf_fixed)).backward()
        fd = finite_difference_grad(
            lambda a: oracle_discriminator_loss(a, zf_fixed), zr.copy()
        )
        rel = np.abs(zt.grad.numpy() - fd) / np.maximum(np.abs(fd), 1e-8)
        assert rel.max() < 1e-4


class TestTotalLoss:
    def test_paper_weights_value(self):
        bd = total_generator_loss(
            torch.tensor(0.6931), torch.tensor(0.02), torch.tensor(0.05), PAPER_WEIGHTS
        )
        assert float(bd.total) == pytest.approx(
            1e-3 * 0.6931 + 5 * 0.02 + 1e-3 * 0.05, abs=1e-7
        )

    def test_all_zero(self):
        z = torch.tensor(0.0)
        assert float(total_generator_loss(z, z, z, PAPER_WEIGHTS).total) == 0.0

    def test_unit_weights(self):
        bd = total_generator_loss(
            torch.tensor(1.0), torch.tensor(2.0), torch.tensor(3.0), LossWeights(1, 1, 1)
        )
        assert float(bd.total) == pytest.approx(6.0, abs=1e-12)

    def test_breakdown_consistency(self, rng):
        g, f, m = (torch.tensor(float(v)) for v in rng.random(3))
        bd = total_generator_loss(g, f, m, PAPER_WEIGHTS)
        recon = (
            PAPER_WEIGHTS.alpha * bd.floats()["gan"]
            + PAPER_WEIGHTS.beta * bd.floats()["feat"]
            + PAPER_WEIGHTS.gamma * bd.floats()["mae"]
        )
        assert bd.floats()["total"] == pytest.approx(recon, rel=1e-6)

    def test_gamma_linearity(self, rng):
        g, f, m = (torch.tensor(float(v)) for v in rng.random(3))
        base = total_generator_loss(g, f, m, LossWeights(0, 0, 1.0))
        doubled = total_generator_loss(g, f, m, LossWeights(0, 0, 2.0))
        assert float(doubled.total) == pytest.approx(2 * float(base.total), rel=1e-12)

    def test_degenerate_weights_reduce_to_mae(self, rng):
        x = t64(rng.random((1, 3, 4, 4)))
        y = t64(rng.random((1, 3, 4, 4)))
        m = mae_loss(x, y)
        bd = total_generator_loss(torch.tensor(0.123), torch.tensor(0.456), m, LossWeights(0, 0, 1.0))
        assert float(bd.total) == float(m)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(alpha=-0.1)


class TestNonNegativity:
    @given(data=st.data())
    @settings(max_examples=25, deadline=None)
    def test_losses_nonnegative(self, data):
        vals = data.draw(
            st.lists(st.floats(-30, 30, allow_nan=False), min_size=8, max_size=8)
        )
        z = torch.tensor(vals, dtype=torch.float64).reshape(1, 2, 2, 2)
        assert float(gan_generator_loss(z)) >= 0.0
        assert float(discriminator_loss(z, -z)) >= 0.0

import numpy as np
import pytest

from msdlab.diffusion import AnalyticGaussian, NoiseSchedule
from msdlab.distill import (
    DiscriminatorHead,
    DistillConfig,
    DistillState,
    Generator,
    SigmaSampling,
    TsmConfig,
    dmd_cotangent,
    dmd_generator_grad,
    dmd_surrogate,
    dmd_weight,
    draw_tsm_sigma,
    fake_score_update,
    gan_losses,
    generate,
    regression_loss_and_grad,
    tsm_loss_and_grad,
    ttur_distill_step,
)
from msdlab.errors import NumericalError, ShapeError, ValidationError
from msdlab.nn_core import AdamWState, Mlp, finite_diff_grad
from tests.conftest import assert_grads_close, identity_generator, make_denoiser


def uniform_conditions(num_classes):
    return lambda rng, n: rng.integers(0, num_classes, size=n)


class TestGenerator:
    def test_zero_net_outputs_zero(self):
        g = Generator(Mlp.zeros([5, 4, 2]), num_classes=3)
        assert np.array_equal(generate(g, np.ones((4, 2)), 1), np.zeros((4, 2)))

    def test_identity_net_passes_latent_through(self, rng):
        z = rng.standard_normal((6, 2))
        np.testing.assert_array_equal(generate(identity_generator(3), z, np.arange(6) % 3), z)

    def test_bitwise_reproducible(self, rng):
        g = Generator.init(3, [8], rng)
        z = np.random.default_rng(9).standard_normal((5, 2))
        assert np.array_equal(g.generate(z, 2), g.generate(z, 2))

    def test_one_evaluation_per_row(self, rng):
        g = Generator.init(3, [8], rng)
        g.generate(np.zeros((7, 2)), 0)
        assert (g.rows_generated, g.forward_calls) == (7, 1)

    def test_latent_width_checked(self, rng):
        with pytest.raises(ShapeError):
            Generator.init(3, [8], rng).generate(np.zeros((2, 3)), 0)

    def test_unknown_label(self, rng):
        with pytest.raises(ValidationError):
            Generator.init(3, [8], rng).generate(np.zeros((2, 2)), 5)

    @pytest.mark.parametrize("hidden", [[8, 8], []])
    def test_from_denoiser_drops_only_the_skip_term(self, hidden, rng):
        d = make_denoiser(2, hidden=hidden)
        g = Generator.from_denoiser(d)
        z = rng.normal(0.0, 80.0, size=(6, 2))
        labels = np.arange(6) % 3
        c_skip = d.precondition(np.array(80.0))[0]
        expected = d.denoise(z, 80.0, labels) - c_skip * z
        np.testing.assert_allclose(g.generate(z, labels), expected, rtol=1e-9, atol=1e-12)
        assert g.latent_scale == 80.0


class TestDmdWeight:
    def test_unit_weight(self):
        x = np.zeros((3, 2))
        assert dmd_weight(1.0, 1.0, x + 1.0, x) == pytest.approx(1.0)

    def test_scales_with_sigma_squared(self):
        x = np.zeros((3, 2))
        assert dmd_weight(2.0, 1.0, x + 1.0, x) == pytest.approx(4.0 * dmd_weight(1.0, 1.0, x + 1.0, x))

    def test_small_difference_gives_large_weight(self):
        x = np.zeros((3, 2))
        assert dmd_weight(1.0, 1.0, x + 1e-6, x) > 1e5

    def test_zero_difference_is_an_error(self):
        x = np.ones((3, 2))
        with pytest.raises(NumericalError):
            dmd_weight(1.0, 1.0, x, x)


class TestDmdGeneratorGrad:
    @pytest.mark.parametrize("seed", range(20))
    def test_identical_fake_gives_exact_zero(self, seed):
        rng = np.random.default_rng(seed)
        teacher = make_denoiser(seed)
        fake = teacher.copy()
        g = Generator.init(3, [int(rng.integers(2, 9))], rng)
        z = g.sample_latents(rng, int(rng.integers(1, 9)))
        labels = rng.integers(0, 3, size=z.shape[0])
        grads = dmd_generator_grad(teacher, fake, g, z, labels, rng, t_max_index=750)
        assert grads.global_norm() == 0.0

    def test_pushes_samples_toward_teacher_mean(self, rng):
        schedule = NoiseSchedule()
        teacher = AnalyticGaussian(np.array([1.0, 1.0]), 0.01)
        fake = AnalyticGaussian(np.array([-1.0, -1.0]), 0.01)
        g = identity_generator(1)
        grads = dmd_generator_grad(
            teacher, fake, g, np.zeros((4, 2)), 0, rng, step_index=500, schedule=schedule
        )
        # descent along -grad increases the output bias toward +1
        assert np.all(grads.biases[0] < 0)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_finite_differences_of_surrogate(self, seed):
        rng = np.random.default_rng(seed)
        teacher, fake = make_denoiser(seed), make_denoiser(seed + 100)
        g = Generator.init(3, [6], rng, latent_scale=1.0)
        z = g.sample_latents(rng, 4)
        labels = rng.integers(0, 3, size=4)
        noise = rng.standard_normal((4, 2))
        step = 600
        sigma = float(teacher.schedule.sigmas[step])

        analytic = dmd_generator_grad(teacher, fake, g, z, labels, rng, step_index=step, noise=noise)
        cot, _, _ = dmd_cotangent(teacher, fake, g.generate(z, labels), labels, sigma, noise)
        numeric = finite_diff_grad(lambda net: dmd_surrogate(cot, g.with_net(net), z, labels), g.net)
        assert_grads_close(analytic, numeric)

    def test_step_window_respected(self):
        rng = np.random.default_rng(0)
        cfg = DistillConfig(batch_size=4, regression_weight=0.0, t_max_index=750)
        teacher = make_denoiser()
        state = DistillState.create(
            teacher, Generator.from_denoiser(teacher), teacher.copy(), cfg, uniform_conditions(3)
        )
        indices = [ttur_distill_step(state, cfg, rng).step_index for _ in range(30)]
        assert all(0 <= i < 750 for i in indices)


class TestFakeScoreUpdate:
    def constant_generator(self, value):
        net = Mlp.zeros([5, 2])
        net.biases[0][:] = value
        return Generator(net, num_classes=3)

    def test_loss_decreases_on_constant_output(self):
        rng = np.random.default_rng(11)
        fake = make_denoiser(4)
        g = self.constant_generator([0.3, -0.2])
        cfg = DistillConfig(fake_lr=1e-3, weight_decay=0.0, batch_size=64)
        opt = AdamWState.for_net(fake.net)
        losses = [
            fake_score_update(fake, opt, g, g.sample_latents(rng, 64), rng.integers(0, 3, size=64), rng, cfg)
            for _ in range(200)
        ]
        assert np.mean(losses[-20:]) < np.mean(losses[:20])

    def test_generator_untouched(self, rng):
        fake = make_denoiser(4)
        g = self.constant_generator([0.3, -0.2])
        before = g.net.checksum()
        fake_score_update(fake, AdamWState.for_net(fake.net), g, np.zeros((8, 2)), np.zeros(8, dtype=int), rng, DistillConfig())
        assert g.net.checksum() == before

    def test_zero_lr_freezes_fake(self, rng):
        fake = make_denoiser(4)
        before = fake.net.checksum()
        cfg = DistillConfig(fake_lr=0.0)
        fake_score_update(fake, AdamWState.for_net(fake.net), self.constant_generator([0.0, 0.0]),
                          np.zeros((8, 2)), np.zeros(8, dtype=int), rng, cfg)
        assert fake.net.checksum() == before


class TestRegression:
    def test_zero_net_single_pair(self):
        g = Generator(Mlp.zeros([5, 2]), num_classes=3)
        loss, _ = regression_loss_and_grad(g, np.zeros((1, 2)), np.array([0]), np.array([[3.0, 4.0]]))
        assert loss == 25.0

    def test_exact_fit_has_zero_loss_and_gradient(self, rng):
        g = Generator.init(3, [6], rng)
        z = rng.standard_normal((5, 2))
        labels = rng.integers(0, 3, size=5)
        loss, grads = regression_loss_and_grad(g, z, labels, g.generate(z, labels))
        assert loss == 0.0
        assert grads.global_norm() == 0.0

    def test_gradient_matches_finite_differences(self, rng):
        g = Generator.init(3, [6, 5], rng, latent_scale=1.0)
        z = rng.standard_normal((4, 2))
        labels = rng.integers(0, 3, size=4)
        y = rng.standard_normal((4, 2))
        _, analytic = regression_loss_and_grad(g, z, labels, y)
        numeric = finite_diff_grad(lambda net: regression_loss_and_grad(g.with_net(net), z, labels, y)[0], g.net)
        assert_grads_close(analytic, numeric)

    def test_empty_batch(self, rng):
        g = Generator.init(3, [6], rng)
        with pytest.raises(ValidationError):
            regression_loss_and_grad(g, np.zeros((0, 2)), np.zeros(0, dtype=int), np.zeros((0, 2)))


class TestTtur:
    def make_state(self, cfg, pairs=False):
        teacher = make_denoiser(0)
        draw_pairs = None
        if pairs:
            pz = np.random.default_rng(1).normal(0.0, 80.0, size=(32, 2))
            pl = np.arange(32) % 3
            py = np.random.default_rng(2).normal(0.0, 0.3, size=(32, 2))
            draw_pairs = lambda rng, n: (pz[:n], pl[:n], py[:n])  # noqa: E731
        return DistillState.create(
            teacher, Generator.from_denoiser(teacher), teacher.copy(), cfg, uniform_conditions(3),
            draw_pairs=draw_pairs,
        )

    def test_counters_after_ten_steps(self):
        cfg = DistillConfig(ttur_n=3, batch_size=4, regression_weight=0.0)
        state = self.make_state(cfg)
        rng = np.random.default_rng(0)
        for _ in range(10):
            ttur_distill_step(state, cfg, rng)
        assert (state.fake_updates, state.generator_updates) == (30, 10)

    def test_teacher_never_changes(self):
        cfg = DistillConfig(ttur_n=2, batch_size=4, regression_weight=0.25)
        state = self.make_state(cfg, pairs=True)
        before = state.teacher.net.checksum()
        rng = np.random.default_rng(0)
        for _ in range(5):
            m = ttur_distill_step(state, cfg, rng)
        assert state.teacher.net.checksum() == before
        assert m.regression_loss is not None

    def test_frozen_identical_fake_leaves_generator_unchanged(self):
        cfg = DistillConfig(ttur_n=1, batch_size=4, regression_weight=0.0, fake_lr=0.0, weight_decay=0.0)
        state = self.make_state(cfg)
        before = state.generator.net.checksum()
        rng = np.random.default_rng(0)
        for _ in range(3):
            m = ttur_distill_step(state, cfg, rng)
        assert m.grad_norm == 0.0
        assert state.generator.net.checksum() == before

    def test_regression_without_pairs_rejected(self):
        cfg = DistillConfig(batch_size=4, regression_weight=0.25)
        state = self.make_state(cfg)
        with pytest.raises(ValidationError):
            ttur_distill_step(state, cfg, np.random.default_rng(0))

    def test_adversarial_step_updates_head_not_teacher(self):
        cfg = DistillConfig(batch_size=4, regression_weight=0.0, gan_gen_weight=3e-3, gan_disc_weight=1e-2)
        teacher = make_denoiser(0)
        head = DiscriminatorHead.init(8, 4, np.random.default_rng(3))
        real = lambda rng, n: (rng.normal(0.0, 0.3, size=(n, 2)), rng.integers(0, 3, size=n))  # noqa: E731
        state = DistillState.create(
            teacher, Generator.from_denoiser(teacher), teacher.copy(), cfg, uniform_conditions(3),
            draw_real=real, head=head,
        )
        head_before, teacher_before = head.net.checksum(), teacher.net.checksum()
        m = ttur_distill_step(state, cfg, np.random.default_rng(0))
        assert head.net.checksum() != head_before
        assert teacher.net.checksum() == teacher_before
        assert m.gan_gen_loss is not None and m.gan_disc_loss is not None

    @pytest.mark.parametrize(
        "kwargs", [{"ttur_n": 0}, {"t_min_index": 5, "t_max_index": 5}, {"generator_lr": 0.0}, {"fake_lr": -1.0}]
    )
    def test_config_validation(self, kwargs):
        with pytest.raises(ValidationError):
            DistillConfig(**kwargs)

    def test_window_beyond_schedule_rejected(self):
        with pytest.raises(ValidationError):
            DistillConfig(t_max_index=2000).check_schedule(NoiseSchedule())


class TestGan:
    def test_zero_logits(self):
        head = DiscriminatorHead(Mlp.zeros([4, 1]))
        feats = np.ones((5, 4))
        losses = gan_losses(head, feats, feats)
        assert losses.disc_loss == pytest.approx(2 * np.log(2))
        assert losses.gen_loss == pytest.approx(np.log(2))

    def test_perfect_discriminator_limit(self):
        net = Mlp.zeros([2, 1])
        net.weights[0][0, 0] = 50.0
        head = DiscriminatorHead(net)
        real, fake = np.array([[1.0, 0.0]] * 3), np.array([[-1.0, 0.0]] * 3)
        assert gan_losses(head, fake, real).disc_loss < 1e-20

    def test_non_finite_logits(self):
        net = Mlp.zeros([2, 1])
        net.biases[0][0] = np.inf
        with pytest.raises(NumericalError):
            gan_losses(DiscriminatorHead(net), np.ones((2, 2)), np.ones((2, 2)))

    def test_head_must_emit_one_logit(self):
        with pytest.raises(ShapeError):
            DiscriminatorHead(Mlp.zeros([4, 2]))

    @pytest.mark.parametrize("hidden", [None, 5])
    def test_head_gradient_matches_finite_differences(self, hidden, rng):
        head = DiscriminatorHead.init(4, hidden, rng)
        fake, real = rng.standard_normal((6, 4)), rng.standard_normal((5, 4))
        analytic = gan_losses(head, fake, real).head_grads
        numeric = finite_diff_grad(lambda net: gan_losses(DiscriminatorHead(net), fake, real).disc_loss, head.net)
        assert_grads_close(analytic, numeric)

    def test_feature_gradient_matches_finite_differences(self, rng):
        head = DiscriminatorHead.init(3, 4, rng)
        fake, real = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
        analytic = gan_losses(head, fake, real).fake_feature_grad
        numeric = np.zeros_like(fake)
        for idx in np.ndindex(fake.shape):
            fp, fm = fake.copy(), fake.copy()
            fp[idx] += 1e-6
            fm[idx] -= 1e-6
            numeric[idx] = (gan_losses(head, fp, real).gen_loss - gan_losses(head, fm, real).gen_loss) / 2e-6
        np.testing.assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-9)


class ConstantTeacher:
    def __init__(self, m):
        self.m = np.asarray(m)

    def denoise(self, x_t, sigma, labels):
        return np.broadcast_to(self.m, x_t.shape).copy()


class TestTsm:
    def test_copied_student_has_zero_loss(self, rng):
        teacher = make_denoiser(3)
        loss, _ = tsm_loss_and_grad(teacher.copy(), teacher, rng.normal(0, 0.3, (16, 2)), rng.integers(0, 3, 16), rng)
        assert loss <= 1e-20

    def test_zero_student_against_constant_teacher(self, rng):
        from msdlab.diffusion import Denoiser, loss_weight

        student = Denoiser(Mlp.zeros([21, 4, 2]), num_classes=3)
        m = np.array([0.5, -0.5])
        x = rng.normal(0, 0.3, (8, 2))
        noise = rng.standard_normal((8, 2))
        loss, _ = tsm_loss_and_grad(student, ConstantTeacher(m), x, np.zeros(8, dtype=int), rng, sigma=1.0, noise=noise)
        c_skip = 0.25 / 1.25
        x_t = x + noise
        expected = loss_weight(1.0, 0.5) * np.mean(np.sum((c_skip * x_t - m) ** 2, axis=1))
        assert loss == pytest.approx(expected, rel=1e-12)

    def test_gradient_matches_finite_differences(self, rng):
        teacher, student = make_denoiser(3), make_denoiser(4, hidden=[5])
        x = rng.normal(0, 0.3, (4, 2))
        labels = rng.integers(0, 3, 4)
        noise = rng.standard_normal((4, 2))
        sigma = np.array([[0.6], [1.0], [1.5], [2.0]])
        _, analytic = tsm_loss_and_grad(student, teacher, x, labels, rng, sigma=sigma, noise=noise)
        numeric = finite_diff_grad(
            lambda _: tsm_loss_and_grad(student, teacher, x, labels, rng, sigma=sigma, noise=noise)[0], student.net
        )
        assert_grads_close(analytic, numeric)

    def test_lognormal_sigmas_stay_in_schedule(self, schedule, rng):
        cfg = TsmConfig(sigma_sampling=SigmaSampling.LOGNORMAL, p_mean=0.0, p_std=10.0)
        sigma = draw_tsm_sigma(schedule, rng, 1000, cfg)
        assert sigma.shape == (1000, 1)
        assert sigma.min() >= schedule.sigma_min and sigma.max() <= schedule.sigma_max

    def test_schedule_mismatch_rejected(self, rng):
        from msdlab.diffusion import Denoiser

        teacher = make_denoiser(3)
        student = Denoiser.init(3, [4], rng, schedule=NoiseSchedule(num_steps=10))
        with pytest.raises(ValidationError):
            tsm_loss_and_grad(student, teacher, np.zeros((2, 2)), np.zeros(2, dtype=int), rng)

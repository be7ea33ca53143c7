"""Tests for the particle training engine."""

from dataclasses import replace

import numpy as np
import pytest
from scipy.special import logsumexp

from repulse.engine import (
    LogEntry,
    Likelihood,
    LikelihoodKind,
    Method,
    TrainConfig,
    TrainLog,
    attraction_gradient,
    log_likelihood,
    output_cotangent,
    povi_step_function,
    povi_step_param,
    pretrain_base,
    total_steps,
    train,
)
from repulse.errors import EmptyPool, LabelOutOfRange, NumericError, SpecError
from repulse.models import (
    Activation,
    BandwidthRule,
    KernelConfig,
    MlpSpec,
    ParticleMode,
    Representation,
    Space,
)
from repulse.nn import backward, features, forward, unflatten
from repulse.particles import ParticleSet, clone_from_map, init_particles
from repulse.sources import RepulsionSource

GAUSSIAN = Likelihood(LikelihoodKind.GAUSSIAN, noise_std=0.1)
PARAM_CONFIG = TrainConfig(
    method=Method.PARAM_REPULSION, kernel=KernelConfig(space=Space.PARAMETER)
)


def fixed_kernel(space=Space.PARAMETER, nu=2.0):
    return KernelConfig(space=space, bandwidth=BandwidthRule.FIXED, nu=nu)


def numeric_gradient(fn, theta, h=1e-6):
    grad = np.zeros_like(theta)
    for k in range(theta.shape[0]):
        plus, minus = theta.copy(), theta.copy()
        plus[k] += h
        minus[k] -= h
        grad[k] = (fn(plus) - fn(minus)) / (2 * h)
    return grad


def log_kernel_sum(u, others, nu):
    """log sum_j exp(-||u - u_j||^2 / nu) with the u_j held fixed."""
    return logsumexp(-np.sum((others - u) ** 2, axis=1) / nu)


@pytest.fixture
def moons_ensemble(moons):
    """Three small ReLU networks sized for two moons."""
    return init_particles(ParticleMode.FULL_ENSEMBLE, MlpSpec((2, 8, 2)), 3, seed=2)


@pytest.fixture
def domain_source():
    return RepulsionSource.uniform_domain([[-3.0, 3.0], [-3.0, 3.0]])


class TestLikelihood:
    """Test log-likelihoods and their output gradients."""

    def test_uniform_logits(self):
        """Equal logits over 10 classes give log(1/10)."""
        assert log_likelihood(np.zeros((1, 10)), [3], Likelihood()) == pytest.approx(-2.302585093)

    def test_gaussian_zero_residual(self):
        """sigma=1 and mu=y give -log(2 pi)/2 per sample."""
        value = log_likelihood(
            np.array([[0.5], [2.0]]), [0.5, 2.0], Likelihood(LikelihoodKind.GAUSSIAN, 1.0)
        )
        assert value == pytest.approx(2 * -0.918938533)

    def test_matches_max_subtracted_oracle(self, rng):
        """Random logits agree with an explicit max-subtracted log-softmax."""
        logits = rng.standard_normal((6, 5)) * 10.0
        labels = rng.integers(0, 5, size=6)
        expected = 0.0
        for row, y in zip(logits, labels):
            shifted = row - row.max()
            expected += shifted[y] - np.log(np.sum(np.exp(shifted)))
        assert log_likelihood(logits, labels, Likelihood()) == pytest.approx(expected, abs=1e-12)

    def test_label_out_of_range(self):
        """Labels must index an output."""
        with pytest.raises(LabelOutOfRange):
            log_likelihood(np.zeros((2, 3)), [0, 3], Likelihood())

    def test_gaussian_needs_one_output(self):
        """A Gaussian likelihood takes a scalar mean."""
        with pytest.raises(SpecError):
            log_likelihood(np.zeros((2, 2)), [0.0, 1.0], GAUSSIAN)

    @pytest.mark.parametrize("likelihood", [Likelihood(), GAUSSIAN])
    def test_cotangent_matches_finite_differences(self, likelihood, rng):
        """The output gradient agrees with central differences."""
        k = 4 if likelihood.kind is LikelihoodKind.CATEGORICAL else 1
        outputs = rng.standard_normal((3, k))
        targets = rng.integers(0, k, size=3) if k > 1 else rng.standard_normal(3)
        cot = output_cotangent(outputs, targets, likelihood)
        fd = numeric_gradient(
            lambda flat: log_likelihood(flat.reshape(3, k), targets, likelihood), outputs.ravel()
        )
        np.testing.assert_allclose(cot.ravel(), fd, rtol=1e-5, atol=1e-6)


class TestAttractionGradient:
    """Test the mini-batch log-posterior gradient."""

    def test_zero_residual_at_origin(self, rng):
        """theta = 0 with zero targets is stationary."""
        spec = MlpSpec((2, 3, 1))
        grad = attraction_gradient(
            np.zeros(spec.parameter_count),
            spec,
            rng.standard_normal((4, 2)),
            np.zeros(4),
            likelihood=GAUSSIAN,
            dataset_size=4,
            prior_variance=1.0,
        )
        np.testing.assert_array_equal(grad, np.zeros(spec.parameter_count))

    def test_matches_finite_differences(self, small_spec, rng):
        """Rescaled likelihood plus Gaussian prior, checked numerically."""
        theta = rng.standard_normal(small_spec.parameter_count) * 0.5
        x = rng.standard_normal((5, 3))
        y = rng.integers(0, 4, size=5)

        def objective(params):
            ll = log_likelihood(forward(params, small_spec, x), y, Likelihood())
            return 40 / 5 * ll - params @ params / (2 * 3.0)

        grad = attraction_gradient(
            theta, small_spec, x, y, likelihood=Likelihood(), dataset_size=40, prior_variance=3.0
        )
        np.testing.assert_allclose(grad, numeric_gradient(objective, theta), rtol=1e-4, atol=1e-6)

    def test_vanishing_prior(self, small_spec, rng):
        """A huge prior variance leaves the plain log-likelihood gradient."""
        theta = rng.standard_normal(small_spec.parameter_count)
        x, y = rng.standard_normal((4, 3)), rng.integers(0, 4, size=4)
        weak = attraction_gradient(
            theta, small_spec, x, y, likelihood=Likelihood(), dataset_size=4, prior_variance=1e300
        )
        cot = output_cotangent(forward(theta, small_spec, x), y, Likelihood())
        np.testing.assert_allclose(weak, backward(theta, small_spec, x, cot), rtol=1e-12)


class TestParamStep:
    """Test parameter-space and plain-ensemble steps."""

    def test_single_particle_is_map(self, moons):
        """n = 1 with repulsion is bitwise the plain step."""
        ps = init_particles(ParticleMode.FULL_ENSEMBLE, MlpSpec((2, 8, 2)), 1, seed=0)
        x, y = moons.inputs[:10], moons.targets[:10]
        plain, _ = povi_step_param(ps, x, y, TrainConfig(method=Method.PLAIN), 60)
        repulsive, _ = povi_step_param(ps, x, y, PARAM_CONFIG, 60)
        np.testing.assert_array_equal(plain.particles, repulsive.particles)
        assert repulsive.step == 1

    def test_zero_gamma_is_plain(self, moons_ensemble, moons):
        """gamma = 0 reproduces the plain ensemble exactly."""
        x, y = moons.inputs[:12], moons.targets[:12]
        plain, _ = povi_step_param(moons_ensemble, x, y, TrainConfig(method=Method.PLAIN))
        zero, _ = povi_step_param(
            moons_ensemble, x, y, TrainConfig(method=Method.PARAM_REPULSION, repulsion_weight=0.0)
        )
        np.testing.assert_array_equal(plain.particles, zero.particles)

    def test_identical_particles_stay_identical(self, moons):
        """Coincident particles feel no repulsion."""
        spec = MlpSpec((2, 5, 2))
        theta = init_particles(ParticleMode.FULL_ENSEMBLE, spec, 1, seed=4).particles[0]
        ps = clone_from_map(theta, 2, base_spec=spec)
        config = PARAM_CONFIG
        stepped, _ = povi_step_param(ps, moons.inputs[:8], moons.targets[:8], config)
        np.testing.assert_array_equal(stepped.particles[0], stepped.particles[1])
        assert not np.array_equal(stepped.particles[0], theta)

    def test_matches_finite_differences(self, moons_ensemble, moons):
        """Each row moves along the attraction minus the repulsion surrogate gradient."""
        x, y = moons.inputs[:10], moons.targets[:10]
        config = TrainConfig(
            step_size=1.0,
            method=Method.PARAM_REPULSION,
            kernel=fixed_kernel(nu=4.0),
            repulsion_weight=0.5,
            prior_variance=10.0,
        )
        stepped, info = povi_step_param(moons_ensemble, x, y, config, dataset_size=30)
        assert info.bandwidth == 4.0
        spec = moons_ensemble.base_spec
        before = moons_ensemble.particles
        for i in range(3):

            def objective(theta):
                ll = log_likelihood(forward(theta, spec, x), y, Likelihood())
                prior = theta @ theta / (2 * 10.0)
                return 30 / 10 * ll - prior - 0.5 * log_kernel_sum(theta, before, 4.0)

            expected = numeric_gradient(objective, before[i])
            moved = stepped.particles[i] - before[i]
            np.testing.assert_allclose(moved, expected, rtol=1e-4, atol=1e-6)

    def test_permutation_equivariant(self, moons_ensemble, moons):
        """Relabeling the particles relabels the result."""
        x, y = moons.inputs[:10], moons.targets[:10]
        config = PARAM_CONFIG
        perm = np.array([2, 0, 1])
        direct, _ = povi_step_param(moons_ensemble, x, y, config)
        permuted, _ = povi_step_param(
            moons_ensemble.with_particles(moons_ensemble.particles[perm]), x, y, config
        )
        np.testing.assert_allclose(
            permuted.particles, direct.particles[perm], rtol=1e-10, atol=1e-14
        )

    def test_rejects_function_method(self, moons_ensemble, moons):
        """Function-space configs go through the function step."""
        with pytest.raises(SpecError):
            povi_step_param(moons_ensemble, moons.inputs[:4], moons.targets[:4], TrainConfig())


class TestFunctionStep:
    """Test function-space steps."""

    def test_zero_gamma_is_plain(self, moons_ensemble, moons, rng):
        """gamma = 0 reproduces the plain ensemble exactly."""
        x, y = moons.inputs[:12], moons.targets[:12]
        plain, _ = povi_step_param(moons_ensemble, x, y, TrainConfig(method=Method.PLAIN))
        zero, info = povi_step_function(
            moons_ensemble, x, y, rng.standard_normal((6, 2)), TrainConfig(repulsion_weight=0.0)
        )
        np.testing.assert_array_equal(plain.particles, zero.particles)
        assert np.isnan(info.bandwidth)

    def test_single_particle_is_map(self, moons, rng):
        """n = 1 gets a zero repulsion direction."""
        ps = init_particles(ParticleMode.FULL_ENSEMBLE, MlpSpec((2, 8, 2)), 1, seed=0)
        x, y = moons.inputs[:10], moons.targets[:10]
        plain, _ = povi_step_param(ps, x, y, TrainConfig(method=Method.PLAIN))
        func, _ = povi_step_function(ps, x, y, rng.standard_normal((5, 2)), TrainConfig())
        np.testing.assert_array_equal(plain.particles, func.particles)

    @pytest.mark.parametrize("representation", ["logits", "probabilities"])
    def test_heads_match_finite_differences(self, multi_head, rng, representation):
        """Linear heads on a frozen base follow the surrogate gradient."""
        rep = Representation(representation)
        x = rng.standard_normal((5, 3))
        y = rng.integers(0, 4, size=5)
        rep_x = rng.standard_normal((4, 3))
        kernel = replace(fixed_kernel(Space.FUNCTION, nu=3.0), representation=rep)
        config = TrainConfig(
            step_size=1.0, kernel=kernel, repulsion_weight=0.7, prior_variance=10.0
        )
        stepped, _ = povi_step_function(multi_head, x, y, rep_x, config, dataset_size=20)

        head = multi_head.head_spec
        feats = features(multi_head.base_params, multi_head.base_spec, x)
        rep_feats = features(multi_head.base_params, multi_head.base_spec, rep_x)

        def vector(theta):
            out = forward(theta, head, rep_feats)
            if rep is Representation.PROBABILITIES:
                out = np.exp(out - logsumexp(out, axis=1, keepdims=True))
            return out.ravel()

        before = multi_head.particles
        others = np.stack([vector(theta) for theta in before])
        for i in range(multi_head.n):

            def objective(theta):
                ll = log_likelihood(forward(theta, head, feats), y, Likelihood())
                repulsion = log_kernel_sum(vector(theta), others, 3.0)
                return 4 * ll - theta @ theta / 20.0 - 0.7 * repulsion

            expected = numeric_gradient(objective, before[i])
            moved = stepped.particles[i] - before[i]
            np.testing.assert_allclose(moved, expected, rtol=1e-4, atol=1e-6)
        np.testing.assert_array_equal(stepped.base_params, multi_head.base_params)

    def test_joint_base_moves(self, multi_head, rng):
        """An unfrozen base is updated along with the heads."""
        ps = replace(multi_head, frozen_base=False)
        x, y = rng.standard_normal((5, 3)), rng.integers(0, 4, size=5)
        stepped, _ = povi_step_function(ps, x, y, rng.standard_normal((4, 3)), TrainConfig())
        assert not np.array_equal(stepped.base_params, ps.base_params)

    def test_empty_repulsion_batch(self, moons_ensemble, moons):
        """A repulsion batch needs at least one row."""
        with pytest.raises(EmptyPool):
            povi_step_function(
                moons_ensemble, moons.inputs[:4], moons.targets[:4], np.zeros((0, 2)), TrainConfig()
            )

    def test_rejects_param_method(self, moons_ensemble, moons):
        """Parameter-space configs go through the parameter step."""
        with pytest.raises(SpecError):
            povi_step_function(
                moons_ensemble,
                moons.inputs[:4],
                moons.targets[:4],
                moons.inputs[:4],
                TrainConfig(method=Method.PLAIN),
            )


class TestTrainConfig:
    """Test training settings."""

    def test_decay_latest_milestone(self):
        """The latest reached milestone sets the multiplier."""
        config = TrainConfig(step_size=1.0, decay=((20, 0.1), (10, 0.5)))
        assert config.step_size_at(5) == 1.0
        assert config.step_size_at(10) == 0.5
        assert config.step_size_at(25) == pytest.approx(0.1)

    def test_total_steps_from_epochs(self):
        """Epochs count mini-batches per pass over the data."""
        assert total_steps(TrainConfig(epochs=2, train_batch_size=16), 60) == 8
        assert total_steps(TrainConfig(steps=7), 60) == 7

    def test_plain_has_zero_gamma(self):
        """The plain ensemble ignores the repulsion weight."""
        assert TrainConfig(method=Method.PLAIN, repulsion_weight=3.0).gamma == 0.0

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"step_size": 0.0},
            {"train_batch_size": 0},
            {"repulsion_weight": -1.0},
            {"momentum": 1.0},
        ],
    )
    def test_invalid(self, kwargs):
        """Out-of-range settings are rejected."""
        with pytest.raises(SpecError):
            TrainConfig(**kwargs)

    def test_log_steps_increase(self):
        """A training log only accepts increasing steps."""
        log = TrainLog()
        log.append(LogEntry(2, 0.5, 0.0, 0.0, 1.0))
        with pytest.raises(SpecError):
            log.append(LogEntry(2, 0.4, 0.0, 0.0, 1.0))


class TestTrain:
    """Test the training loop."""

    def test_zero_steps(self, moons_ensemble, moons, domain_source):
        """No steps leaves the particles unchanged and logs nothing."""
        trained, log = train(moons_ensemble, moons, domain_source, TrainConfig(steps=0))
        np.testing.assert_array_equal(trained.particles, moons_ensemble.particles)
        assert len(log) == 0

    def test_deterministic(self, moons_ensemble, moons, domain_source):
        """Same seed, same trajectory and log."""
        config = TrainConfig(steps=6, train_batch_size=16, repulsion_batch_size=8, seed=9)
        a, log_a = train(moons_ensemble, moons, domain_source, config)
        b, log_b = train(moons_ensemble, moons, domain_source, config)
        np.testing.assert_array_equal(a.particles, b.particles)
        np.testing.assert_array_equal(np.array(log_a.rows()), np.array(log_b.rows()))

    def test_single_particle_trajectory_is_map(self, moons, domain_source):
        """n = 1 trains identically with and without function-space repulsion."""
        ps = init_particles(ParticleMode.FULL_ENSEMBLE, MlpSpec((2, 8, 2)), 1, seed=0)
        config = TrainConfig(steps=5, train_batch_size=16, repulsion_batch_size=8, seed=3)
        func, _ = train(ps, moons, domain_source, config)
        plain, _ = train(ps, moons, None, replace(config, method=Method.PLAIN))
        np.testing.assert_array_equal(func.particles, plain.particles)

    def test_zero_gamma_trajectory_is_plain(self, moons_ensemble, moons, domain_source):
        """gamma = 0 follows the plain ensemble step for step."""
        config = TrainConfig(steps=5, train_batch_size=16, repulsion_weight=0.0, seed=3)
        func, _ = train(moons_ensemble, moons, domain_source, config)
        plain, _ = train(moons_ensemble, moons, None, replace(config, method=Method.PLAIN))
        np.testing.assert_array_equal(func.particles, plain.particles)

    def test_log_every(self, moons_ensemble, moons, domain_source):
        """Entries every log_every steps plus the final step."""
        config = TrainConfig(steps=7, train_batch_size=16, repulsion_batch_size=8, log_every=3)
        trained, log = train(moons_ensemble, moons, domain_source, config)
        assert [row[0] for row in log.rows()] == [3, 6, 7]
        assert trained.step == 7
        assert all(entry.bandwidth > 0 for entry in log.entries)

    def test_epochs(self, moons_ensemble, moons):
        """Two epochs of batch 16 over 60 samples take 8 steps."""
        config = TrainConfig(method=Method.PLAIN, epochs=2, train_batch_size=16)
        trained, _ = train(moons_ensemble, moons, None, config)
        assert trained.step == 8

    def test_function_method_needs_source(self, moons_ensemble, moons):
        """Function-space repulsion without a source is rejected."""
        with pytest.raises(SpecError):
            train(moons_ensemble, moons, None, TrainConfig(steps=1))

    def test_divergence_raises(self, toy_regression):
        """Non-finite parameters stop training."""
        ps = init_particles(ParticleMode.FULL_ENSEMBLE, MlpSpec((1, 4, 1)), 2, seed=0)
        config = TrainConfig(
            method=Method.PLAIN, step_size=1e300, steps=5, likelihood=GAUSSIAN, log_every=100
        )
        with np.errstate(all="ignore"), pytest.raises(NumericError):
            train(ps, toy_regression, None, config)

    def test_spectral_norm_bounds_hidden_layers(self, moons):
        """Feature-extractor layers end near the coefficient; the output layer is untouched."""
        spec = MlpSpec((2, 6, 6, 2), Activation.TANH)
        ps = init_particles(ParticleMode.FULL_ENSEMBLE, spec, 2, seed=1)
        ps = ps.with_particles(ps.particles * 4.0)
        config = TrainConfig(
            method=Method.PLAIN,
            step_size=1e-12,
            steps=40,
            train_batch_size=16,
            spectral_norm=True,
            spectral_coeff=0.5,
        )
        trained, _ = train(ps, moons, None, config)
        for row in trained.particles:
            layers = unflatten(row, spec)
            for weight, _bias in layers[:2]:
                assert np.linalg.norm(weight, 2) <= 0.5 * 1.05
        before = unflatten(ps.particles[0], spec)[2][0]
        after = unflatten(trained.particles[0], spec)[2][0]
        np.testing.assert_allclose(after, before, atol=1e-6)

    def test_momentum_changes_trajectory(self, moons_ensemble, moons):
        """Heavy-ball momentum differs from plain steps after the first."""
        config = TrainConfig(method=Method.PLAIN, steps=3, train_batch_size=16)
        plain, _ = train(moons_ensemble, moons, None, config)
        heavy, _ = train(moons_ensemble, moons, None, replace(config, momentum=0.9))
        assert not np.array_equal(plain.particles, heavy.particles)


class TestPretrainBase:
    """Test MAP pretraining and the base/head split."""

    def test_split_shapes(self, moons):
        """A 2-8-8-2 network splits into a 2-8-8 base and an 8-2 head."""
        config = TrainConfig(steps=4, train_batch_size=16, log_every=2)
        base_spec, base, head_spec, head, log = pretrain_base(
            moons, MlpSpec((2, 8, 8, 2)), config, seed=0
        )
        assert base_spec.layer_widths == (2, 8, 8)
        assert head_spec.layer_widths == (8, 2)
        assert base.shape == (base_spec.parameter_count,)
        assert head.shape == (head_spec.parameter_count,)
        assert len(log) == 2

    def test_base_feeds_particles(self, moons):
        """The pretrained base and cloned heads reproduce the MAP network."""
        spec = MlpSpec((2, 8, 8, 2))
        config = TrainConfig(steps=3, train_batch_size=16)
        base_spec, base, head_spec, head, _ = pretrain_base(moons, spec, config, seed=0)
        ps = clone_from_map(head, 2, base_spec=base_spec, head_spec=head_spec, base_params=base)
        assert isinstance(ps, ParticleSet)
        full = np.concatenate([base, head])
        np.testing.assert_allclose(
            forward(head, head_spec, features(base, base_spec, moons.inputs)),
            forward(full, spec, moons.inputs),
        )

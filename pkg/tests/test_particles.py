"""Tests for particle sets."""

import numpy as np
import pytest

from repulse.errors import DimensionMismatch, SpecError
from repulse.models import Activation, MlpSpec, ParticleMode
from repulse.nn import forward
from repulse.particles import (
    ParticleRecipe,
    ParticleSet,
    clone_from_map,
    init_particles,
    map_particles,
    member_params,
    predict_all,
    to_full_ensemble,
    trainable_vectors,
)


class TestInitParticles:
    """Test random initialization."""

    def test_multi_head_parameter_count(self):
        """Ten linear heads on 512 features with 10 classes train 51,300 scalars."""
        base = MlpSpec((784, 512))
        ps = init_particles(
            ParticleMode.MULTI_HEAD, base, 10, seed=0, head_spec=MlpSpec((512, 10))
        )
        assert ps.trainable_parameter_count == 51300
        assert ps.particles.shape == (10, 5130)

    def test_unfrozen_base_counts_base(self, multi_head):
        """Training the base adds its parameters to the count."""
        unfrozen = ParticleSet(
            mode=multi_head.mode,
            base_spec=multi_head.base_spec,
            particles=multi_head.particles,
            head_spec=multi_head.head_spec,
            base_params=multi_head.base_params,
            frozen_base=False,
        )
        assert unfrozen.trainable_parameter_count == (
            multi_head.particles.size + multi_head.base_spec.parameter_count
        )

    def test_deterministic(self, small_spec):
        """The same seed gives bit-identical particles."""
        a = init_particles(ParticleMode.FULL_ENSEMBLE, small_spec, 3, seed=5)
        b = init_particles(ParticleMode.FULL_ENSEMBLE, small_spec, 3, seed=5)
        np.testing.assert_array_equal(a.particles, b.particles)

    def test_particles_differ(self, full_ensemble):
        """Each particle gets its own sub-seed."""
        for i in range(1, full_ensemble.n):
            assert not np.array_equal(full_ensemble.particles[0], full_ensemble.particles[i])

    def test_zero_particles(self, small_spec):
        """At least one particle is required."""
        with pytest.raises(SpecError):
            init_particles(ParticleMode.FULL_ENSEMBLE, small_spec, 0, seed=0)

    def test_multi_head_needs_head(self, small_spec):
        """Multi-head mode without a head spec is rejected."""
        with pytest.raises(SpecError):
            init_particles(ParticleMode.MULTI_HEAD, small_spec, 2, seed=0)

    def test_head_width_mismatch(self):
        """The head input must equal the base feature width."""
        with pytest.raises(SpecError):
            init_particles(
                ParticleMode.MULTI_HEAD, MlpSpec((2, 5)), 2, seed=0, head_spec=MlpSpec((4, 3))
            )

    def test_given_base_is_kept(self, multi_head):
        """A supplied base is used as is."""
        ps = init_particles(
            ParticleMode.MULTI_HEAD,
            multi_head.base_spec,
            2,
            seed=1,
            head_spec=multi_head.head_spec,
            base_params=multi_head.base_params,
        )
        np.testing.assert_array_equal(ps.base_params, multi_head.base_params)


class TestParticleSet:
    """Test particle set validation."""

    def test_wrong_particle_width(self, small_spec):
        """Rows must have the spec's parameter count."""
        with pytest.raises(DimensionMismatch):
            ParticleSet(ParticleMode.FULL_ENSEMBLE, small_spec, np.zeros((2, 3)))

    def test_full_ensemble_rejects_base(self, small_spec):
        """Base parameters only make sense for multi-head sets."""
        with pytest.raises(SpecError):
            ParticleSet(
                ParticleMode.FULL_ENSEMBLE,
                small_spec,
                np.zeros((2, small_spec.parameter_count)),
                base_params=np.zeros(3),
            )

    def test_with_particles_keeps_base(self, multi_head):
        """Replacing the rows keeps the base and bumps only what is asked."""
        updated = multi_head.with_particles(multi_head.particles * 0.0, step=4)
        assert updated.step == 4
        assert updated.base_params is multi_head.base_params
        assert np.all(updated.particles == 0.0)
        assert multi_head.step == 0


class TestPrediction:
    """Test batched prediction."""

    def test_shape(self, full_ensemble, rng):
        """Output is n x B x K."""
        out = predict_all(full_ensemble, rng.standard_normal((7, 3)))
        assert out.shape == (5, 7, 4)

    def test_matches_single_forward(self, full_ensemble, rng):
        """Each slice equals the particle's own forward pass."""
        x = rng.standard_normal((4, 3))
        out = predict_all(full_ensemble, x)
        for i in range(full_ensemble.n):
            expected = forward(full_ensemble.particles[i], full_ensemble.base_spec, x)
            np.testing.assert_array_equal(out[i], expected)

    def test_multi_head_equals_full_ensemble(self, multi_head, rng):
        """Sharing the base gives the same predictions as copying it into each member."""
        x = rng.standard_normal((6, 3))
        full = to_full_ensemble(multi_head)
        assert full.mode is ParticleMode.FULL_ENSEMBLE
        assert full.base_spec.layer_widths == (3, 8, 6, 4)
        np.testing.assert_allclose(predict_all(multi_head, x), predict_all(full, x), rtol=1e-12)

    def test_threads_preserve_order(self, full_ensemble, rng):
        """Threaded evaluation is identical to the serial loop."""
        x = rng.standard_normal((5, 3))
        np.testing.assert_array_equal(
            predict_all(full_ensemble, x, threads=4), predict_all(full_ensemble, x, threads=1)
        )

    def test_input_width(self, multi_head):
        """Wrong input width is a dimension mismatch."""
        with pytest.raises(DimensionMismatch):
            predict_all(multi_head, np.zeros((2, 5)))

    def test_member_params(self, multi_head):
        """A member is the base followed by its head."""
        params = member_params(multi_head, 2)
        n_base = multi_head.base_spec.parameter_count
        np.testing.assert_array_equal(params[:n_base], multi_head.base_params)
        np.testing.assert_array_equal(params[n_base:], multi_head.particles[2])

    def test_trainable_vectors_are_heads(self, multi_head):
        """The parameter-space kernel sees only the heads."""
        assert trainable_vectors(multi_head) is multi_head.particles


class TestMapParticles:
    """Test the per-particle map."""

    @pytest.mark.parametrize("threads", [1, 3, 8])
    def test_index_order(self, threads):
        """Results come back in index order."""
        assert map_particles(lambda i: i * i, 6, threads) == [0, 1, 4, 9, 16, 25]


class TestCloneFromMap:
    """Test fine-tuning initialization."""

    def test_identical_rows(self, small_spec, rng):
        """All particles copy the MAP vector."""
        params = rng.standard_normal(small_spec.parameter_count)
        ps = clone_from_map(params, 4, base_spec=small_spec)
        assert ps.mode is ParticleMode.FULL_ENSEMBLE
        for row in ps.particles:
            np.testing.assert_array_equal(row, params)

    def test_multi_head(self, multi_head):
        """Passing a head spec selects multi-head mode."""
        head = multi_head.particles[0]
        ps = clone_from_map(
            head,
            3,
            base_spec=multi_head.base_spec,
            head_spec=multi_head.head_spec,
            base_params=multi_head.base_params,
        )
        assert ps.mode is ParticleMode.MULTI_HEAD
        assert ps.n == 3

    def test_shape_mismatch(self, small_spec):
        """The MAP vector must fit the particle spec."""
        with pytest.raises(DimensionMismatch):
            clone_from_map(np.zeros(3), 2, base_spec=small_spec)


class TestParticleRecipe:
    """Test building particle sets from a recipe."""

    def test_multi_head_specs(self):
        """The last base width feeds the heads."""
        recipe = ParticleRecipe(hidden=(16, 8), head_hidden=(4,), activation=Activation.TANH)
        base, head = recipe.specs(2, 3)
        assert base.layer_widths == (2, 16, 8)
        assert head is not None and head.layer_widths == (8, 4, 3)

    def test_full_ensemble_specs(self):
        """A full ensemble has no head spec."""
        recipe = ParticleRecipe(mode=ParticleMode.FULL_ENSEMBLE, hidden=(5,))
        spec, head = recipe.specs(2, 3)
        assert spec.layer_widths == (2, 5, 3)
        assert head is None

    def test_multi_head_needs_hidden(self):
        """A base needs at least one layer."""
        with pytest.raises(SpecError):
            ParticleRecipe(hidden=()).specs(2, 3)

    def test_build(self):
        """build() draws n particles with the recipe's specs."""
        ps = ParticleRecipe(hidden=(6,), n=3).build(2, 2, seed=0)
        assert ps.n == 3
        assert ps.particles.shape == (3, 6 * 2 + 2)

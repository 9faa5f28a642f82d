import itertools
import logging

import numpy as np
import pytest

from app.services.basis_noise import BasisTruncation, NoiseStream
from app.services.dynamics import ModelVariant, Variant
from app.services.errors import BlowUpError, ConfigError, VariantError
from app.services.initial_conditions import random_band
from app.services.sde_engine import (
    Coupling,
    Ensemble,
    check_time_step,
    heat_flow,
    meanfield_transport_map,
    ordered_mean,
    pairwise_sum,
    parallel_map,
    picard_iterate,
    run_ensemble,
    run_reference,
    step_heun_v1,
    step_ips,
    step_meanfield,
    trajectory_distance,
    weak_order_estimate,
)
from app.services.spectral_core import GridSpec, VectorField, divergence, norm_l2


def test_parallel_map_does_not_depend_on_workers():
    def work(block):
        return [i * i for i in block]

    serial = parallel_map(work, 37, workers=1, chunk_size=4)
    threaded = parallel_map(work, 37, workers=4, chunk_size=4)
    assert serial == threaded == [i * i for i in range(37)]


def test_reference_reproduces_taylor_green_decay(tg16):
    ref = run_reference(tg16, eta=0.05, dt=0.01, T=0.2)
    expected = tg16 * float(np.exp(-2 * 0.05 * 0.2))
    assert norm_l2(ref.final() - expected) <= 1e-10 * norm_l2(expected)
    energies = ref.energies()
    assert np.all(np.diff(energies) < 0)
    assert ref.metadata["steps"] == 20


def test_reference_storage_and_interpolation(tg16):
    ref = run_reference(tg16, eta=0.05, dt=0.01, T=0.05, store_every=2)
    np.testing.assert_allclose(ref.times, [0.0, 0.02, 0.04, 0.05])
    middle = ref.at(0.03)
    np.testing.assert_allclose(middle.components, 0.5 * (ref.fields[1] + ref.fields[2]))
    with pytest.raises(ConfigError):
        ref.at(1.0)


def test_reference_observer_sees_stored_samples(tg16):
    seen = []
    run_reference(tg16, eta=0.05, dt=0.01, T=0.05, store_every=2, observer=lambda step, t, values: seen.append(step))
    assert seen == [0, 2, 4, 5]


def test_reference_stops_on_spectral_tail_growth(grid16, monkeypatch):
    shear = VectorField.from_function(grid16, lambda x, y: (np.sin(6 * y), 0 * x))
    with pytest.raises(BlowUpError, match="spectral tail"):
        run_reference(shear, eta=0.05, dt=0.01, T=0.02)
    monkeypatch.setattr("app.services.sde_engine.SPECTRAL_TAIL_LIMIT", 1.5)
    ref = run_reference(shear, eta=0.05, dt=0.01, T=0.02)
    assert ref.metadata["spectral_tail"] == pytest.approx(1.0)


def test_heat_flow_of_a_mode(grid16):
    u0 = VectorField.from_function(grid16, lambda x, y: (np.sin(2 * y), 0 * x))
    flow = heat_flow(u0, 0.1, [0.0, 1.0])
    np.testing.assert_allclose(flow[1], u0.components * np.exp(-0.4), atol=1e-13)


def test_noiseless_particles_follow_the_viscous_solution(tg16, v1_k1):
    variant = v1_k1.noiseless()
    ens = Ensemble.from_initial(tg16, 3, variant, NoiseStream(0), Coupling.IPS)
    ens = run_ensemble(ens, dt=0.01, T=0.1)
    ref = run_reference(tg16, eta=0.05, dt=0.01, T=0.1)
    for xi in ens.fields:
        assert norm_l2(xi - ref.final()) <= 1e-3 * norm_l2(ref.final())
    assert ens.step == 10
    assert ens.t == pytest.approx(0.1)


def test_results_do_not_depend_on_worker_count(tg16, v1_k1):
    ens = Ensemble.from_initial(tg16, 5, v1_k1, NoiseStream(3), Coupling.IPS)
    one = step_ips(step_ips(ens, 1e-3, workers=1, chunk_size=2), 1e-3, workers=1, chunk_size=2)
    four = step_ips(step_ips(ens, 1e-3, workers=4, chunk_size=2), 1e-3, workers=4, chunk_size=2)
    np.testing.assert_array_equal(one.particles, four.particles)


def test_ordered_mean_ignores_storage_order(rng):
    stack = rng.standard_normal((7, 5))
    order = [3, 6, 0, 5, 1, 4, 2]
    ids = list(range(7))
    np.testing.assert_array_equal(ordered_mean(stack, ids), ordered_mean(stack[order], [ids[i] for i in order]))
    np.testing.assert_allclose(pairwise_sum(stack), stack.sum(axis=0), rtol=1e-14)


@pytest.mark.parametrize("seed", range(4))
def test_permuting_particles_permutes_the_step(tg16, v1_k1, seed):
    ens = Ensemble.from_initial(tg16, 7, v1_k1, NoiseStream(seed), Coupling.IPS)
    ens = step_ips(ens, 1e-3)
    order = [3, 6, 0, 5, 1, 4, 2]
    stepped_then_permuted = step_ips(ens, 1e-3).particles[order]
    permuted_then_stepped = step_ips(ens.permuted(order), 1e-3).particles
    np.testing.assert_array_equal(permuted_then_stepped, stepped_then_permuted)
    np.testing.assert_array_equal(ens.permuted(order).mean().components, ens.mean().components)
    heun = step_heun_v1(ens, 1e-3).particles[order]
    np.testing.assert_array_equal(step_heun_v1(ens.permuted(order), 1e-3).particles, heun)


def test_particles_stay_solenoidal(tg16):
    trunc = BasisTruncation(2, 2, 3.0)
    for tag in (Variant.V1_HAMILTONIAN, Variant.V2_PROJECTED):
        ens = Ensemble.from_initial(tg16, 3, ModelVariant(tag, 0.05, trunc), NoiseStream(1), Coupling.IPS)
        ens = run_ensemble(ens, dt=1e-3, T=5e-3)
        for xi in ens.fields:
            assert norm_l2(divergence(xi)) <= 1e-8 * norm_l2(xi)


def test_couplings_are_checked(tg16, v1_k1):
    prescribed = Ensemble.from_initial(tg16, 2, v1_k1, NoiseStream(0), Coupling.PRESCRIBED)
    with pytest.raises(ConfigError):
        step_ips(prescribed, 1e-3)
    ips = Ensemble.from_initial(tg16, 2, v1_k1, NoiseStream(0), Coupling.IPS)
    with pytest.raises(ConfigError):
        step_meanfield(ips, tg16, 1e-3)
    with pytest.raises(ConfigError):
        run_ensemble(prescribed, dt=1e-3, T=2e-3)


def test_heun_is_only_defined_for_the_hamiltonian_model(tg16, v1_k1):
    ens = Ensemble.from_initial(tg16, 2, v1_k1.with_tag(Variant.V2_PROJECTED), NoiseStream(0), Coupling.IPS)
    with pytest.raises(VariantError):
        step_heun_v1(ens, 1e-3)
    ens = Ensemble.from_initial(tg16, 2, v1_k1.without_stretching(), NoiseStream(0), Coupling.IPS)
    with pytest.raises(VariantError):
        step_heun_v1(ens, 1e-3)


def test_noiseless_heun_follows_the_exact_decay(tg16, v1_k1):
    variant = v1_k1.noiseless()
    heun = Ensemble.from_initial(tg16, 1, variant, NoiseStream(0), Coupling.PRESCRIBED)
    heun = run_ensemble(heun, 0.01, 0.1, u_provider=lambda step, t: tg16 * float(np.exp(-0.1 * t)), scheme="heun")
    expected = tg16 * float(np.exp(-0.1 * 0.1))
    assert norm_l2(heun.particle(0) - expected) <= 1e-5 * norm_l2(expected)


def test_prescribed_mean_is_close_to_the_driving_field(tg16, v1_k1):
    ens = Ensemble.from_initial(tg16, 40, v1_k1, NoiseStream(2), Coupling.PRESCRIBED)
    ens = run_ensemble(ens, 1e-3, 0.01, u_provider=lambda step, t: tg16 * float(np.exp(-0.1 * t)))
    target = tg16 * float(np.exp(-0.1 * 0.01))
    gap = norm_l2(ens.mean() - target) / norm_l2(target)
    assert gap <= 4.0 * ens.mean_standard_error() / norm_l2(target) + 10 * 1e-3


def test_time_step_heuristic_warns(tg16, v1_k1, caplog):
    with caplog.at_level(logging.WARNING):
        bound = check_time_step(10.0, tg16, v1_k1)
    assert bound < 10.0
    assert "stability heuristic" in caplog.text


def test_picard_stops_on_a_fixed_point(tg16):
    steps = 5
    times = 0.01 * np.arange(steps + 1)
    fixed = heat_flow(tg16, 0.05, times)
    result = picard_iterate(tg16, 0.05, 0.01, 0.05, iters=4, phi=lambda trajectory: (fixed, 0.0))
    assert result.converged
    assert result.iterations == 1
    assert result.residuals[0] == pytest.approx(0.0, abs=1e-12)


def test_picard_reports_a_stall(tg16):
    calls = itertools.count(1)

    def phi(trajectory):
        return trajectory + float(next(calls)), 0.0

    result = picard_iterate(tg16, 0.05, 0.01, 0.05, iters=8, phi=phi)
    assert not result.converged
    assert result.reason == "stalled"
    assert result.iterations == 4


def test_picard_with_particle_transport_settles_on_the_reference(tg16, v1_k1):
    dt, T = 1e-3, 5e-3
    ref = run_reference(tg16, v1_k1.eta, dt, T)
    phi = meanfield_transport_map(tg16, v1_k1, NoiseStream(3), 16, dt)
    image, error = phi(ref.fields)
    np.testing.assert_array_equal(phi(ref.fields)[0], image)
    assert image.shape == ref.fields.shape
    assert error > 0

    from_reference = picard_iterate(tg16, v1_k1.eta, dt, T, iters=3, phi=phi, initial=ref.fields)
    assert from_reference.converged
    assert from_reference.iterations == 1
    assert trajectory_distance(from_reference.final(), ref.fields, tg16.grid) <= from_reference.tolerances[0]

    # the heat flow of Taylor-Green is already the Navier-Stokes solution
    from_heat = picard_iterate(tg16, v1_k1.eta, dt, T, iters=3, phi=phi)
    assert from_heat.converged
    assert from_heat.residuals[0] == pytest.approx(from_reference.residuals[0], rel=1e-3)


def test_heun_and_euler_means_agree(tg16, v1_k1):
    provider = lambda step, t: tg16 * float(np.exp(-0.1 * t))  # noqa: E731
    means, errors = [], []
    for scheme in ("euler", "heun"):
        ens = Ensemble.from_initial(tg16, 32, v1_k1, NoiseStream(4), Coupling.PRESCRIBED)
        ens = run_ensemble(ens, 1e-3, 0.01, u_provider=provider, scheme=scheme)
        means.append(ens.mean())
        errors.append(ens.mean_standard_error())
    gap = norm_l2(means[0] - means[1])
    assert gap <= 4.0 * sum(errors) + 1e-2 * norm_l2(tg16)


def test_weak_order_of_synthetic_errors():
    dts = [4e-3, 2e-3, 1e-3]
    assert weak_order_estimate([3.0 * dt for dt in dts], dts) == pytest.approx(1.0)
    assert weak_order_estimate([dt ** 0.5 for dt in dts], dts) == pytest.approx(0.5)


def test_ensemble_rejects_mismatched_ids(tg16, v1_k1):
    particles = np.repeat(tg16.components[np.newaxis], 2, axis=0)
    with pytest.raises(ConfigError):
        Ensemble(GridSpec(2, 16), particles, v1_k1, NoiseStream(0), particle_ids=(0, 1, 2))


@pytest.mark.slow
def test_particle_mean_recovers_the_viscous_flow():
    u0 = random_band(GridSpec(2, 32), band=3, seed=7)
    ref = run_reference(u0, 0.05, 5e-4, 0.25)
    variant = ModelVariant(Variant.V1_HAMILTONIAN, 0.05, BasisTruncation(2, 4, 3.0))
    target = ref.at(0.25)
    for model in (variant, variant.without_stretching()):
        ens = Ensemble.from_initial(u0, 200, model, NoiseStream(0), Coupling.PRESCRIBED)
        ens = run_ensemble(ens, 5e-4, 0.25, u_provider=ref.provider(), cadence=500)
        gap = norm_l2(ens.mean() - target) / norm_l2(target)
        assert gap <= 3.0 * ens.mean_standard_error() / norm_l2(target) + 10 * 5e-4

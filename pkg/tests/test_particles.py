import numpy as np
import pytest

from uniformpf.exact import DiscreteBelief, forward_filter, kalman_filter
from uniformpf.metrics import bl_distance, tv_distance
from uniformpf.models import ModelSpec, make_finite_hmm, make_linear_gaussian, simulate
from uniformpf.particles import (
    NaiveFilterState,
    ParticleEnsemble,
    UnderflowError,
    bootstrap_init,
    bootstrap_step,
    ess_report,
    iterate_bootstrap,
    iterate_naive,
    naive_init,
    naive_step,
    predictor_from_filter,
    propagate,
    resample,
    resample_indices,
    update,
)
from uniformpf.rng import stream


def two_state(emission=((0.8, 0.2), (0.2, 0.8))):
    return make_finite_hmm([[0.9, 0.1], [0.1, 0.9]], emission, [0.5, 0.5])


def as_discrete(ens, n_states=2):
    p = np.bincount(ens.locations[:, 0].astype(int), weights=ens.weights, minlength=n_states)
    return DiscreteBelief(p / p.sum())


def constant_likelihood(base):
    return ModelSpec(
        name="flat", state_dim=1, obs_dim=1, sample_initial=base.sample_initial,
        transition=base.transition, log_likelihood=lambda x, y: np.full(len(x), -0.3),
        observation_sampler=base.observation_sampler, reference_measure="lebesgue",
    )


def identity_transition(base):
    return ModelSpec(
        name="frozen", state_dim=1, obs_dim=1, sample_initial=base.sample_initial,
        transition=lambda x, rng: x.copy(), log_likelihood=base.log_likelihood,
        observation_sampler=base.observation_sampler, reference_measure="lebesgue",
    )


LINEAR = make_linear_gaussian(0.9, 1.0, 1.0)


# -- ensembles --------------------------------------------------------------


def test_ensemble_validation():
    with pytest.raises(ValueError):
        ParticleEnsemble(np.zeros((2, 1)), np.array([0.5, 0.6]))
    with pytest.raises(ValueError):
        ParticleEnsemble(np.zeros((2, 1)), np.array([1.5, -0.5]))
    e = ParticleEnsemble.uniform(np.arange(4.0))
    assert e.n_particles == 4 and e.locations.shape == (4, 1)


def test_ess_report():
    w = np.array([0.5, 0.25, 0.25])
    r = ess_report(w, step=3)
    assert r.ess == pytest.approx(1 / np.sum(w**2), abs=1e-9)
    assert r.max_weight == 0.5 and r.step == 3
    assert ess_report(np.full(10, 0.1)).ess == pytest.approx(10.0, abs=1e-9)


# -- update -----------------------------------------------------------------


def test_update_two_atoms_by_hand():
    e = ParticleEnsemble(np.array([[0.0], [1.0]]), np.array([0.5, 0.5]))
    out = update(e, [0.0], LINEAR)
    np.testing.assert_allclose(out.weights, [0.62246, 0.37754], atol=5e-6)
    np.testing.assert_array_equal(out.locations, e.locations)


def test_update_constant_likelihood_is_identity():
    e = ParticleEnsemble(np.array([[0.0], [1.0], [4.0]]), np.array([0.2, 0.3, 0.5]))
    out = update(e, [9.0], constant_likelihood(LINEAR))
    np.testing.assert_allclose(out.weights, e.weights, atol=1e-15)


def test_update_single_atom():
    e = ParticleEnsemble(np.array([[3.0]]), np.array([1.0]))
    for y in (-20.0, 0.0, 25.0):
        assert update(e, [y], LINEAR).weights[0] == 1.0


def test_update_underflow_reports_step():
    e = ParticleEnsemble.uniform(np.array([[0.0], [1.0]]))
    with pytest.raises(UnderflowError) as info:
        update(e, [1e3], LINEAR, step=17)
    assert info.value.step == 17


def test_weights_normalised_after_every_operation():
    gen = stream(1)
    obs = simulate(LINEAR, 50, 2).observations
    for pred, filt in iterate_bootstrap(LINEAR, obs, 64, gen):
        assert abs(pred.weights.sum() - 1) <= 1e-10
        assert abs(filt.weights.sum() - 1) <= 1e-10
        assert np.all(filt.weights >= 0)
        assert filt.n_particles == 64


# -- resample ---------------------------------------------------------------


THREE_ATOMS = ParticleEnsemble(np.array([[-1.0], [0.0], [2.0]]), np.array([0.2, 0.5, 0.3]))


def test_resample_point_mass():
    e = ParticleEnsemble.uniform(np.full((10, 1), 2.5))
    out = resample(e, stream(3))
    assert np.all(out.locations == 2.5)
    np.testing.assert_array_equal(out.weights, np.full(10, 0.1))


def test_resample_indices_are_deterministic_and_in_range():
    w = np.array([0.0, 0.3, 0.0, 0.7, 0.0])
    a = resample_indices(w, 1000, stream(4))
    b = resample_indices(w, 1000, stream(4))
    np.testing.assert_array_equal(a, b)
    assert set(np.unique(a)) <= {1, 3}


def test_resample_barycentre_and_variance():
    n, reps = 100, 100_000
    gen = stream(5)
    rho_f = 0.2 * -1 + 0.3 * 2  # 0.4
    rho_f2 = 0.2 * 1 + 0.3 * 4  # 1.4
    target_var = (rho_f2 - rho_f**2) / n  # 0.0124
    means = np.empty(reps)
    for r in range(reps):
        means[r] = resample(THREE_ATOMS, gen, n).mean()[0]
    se = means.std(ddof=1) / np.sqrt(reps)
    assert abs(means.mean() - rho_f) <= 3 * se
    assert means.var(ddof=1) == pytest.approx(target_var, rel=0.05)


# -- propagate --------------------------------------------------------------


def test_propagate_identity_transition():
    e = ParticleEnsemble.uniform(np.arange(5.0)[:, None])
    out = propagate(e, identity_transition(LINEAR), stream(6))
    np.testing.assert_array_equal(out.locations, e.locations)


def test_propagate_variance_from_origin():
    n = 100_000
    out = propagate(ParticleEnsemble.uniform(np.zeros((n, 1))), LINEAR, stream(7))
    x = out.locations[:, 0]
    # standard error of the sample variance of N(0, 1) is sqrt(2 / n)
    assert abs(x.var(ddof=1) - 1.0) <= 3 * np.sqrt(2 / n)


def test_propagate_same_stream_same_output():
    e = ParticleEnsemble.uniform(np.zeros((50, 1)))
    a = propagate(e, LINEAR, stream(8, 1))
    b = propagate(e, LINEAR, stream(8, 1))
    np.testing.assert_array_equal(a.locations, b.locations)


# -- bootstrap --------------------------------------------------------------


def test_bootstrap_uninformative_filter_equals_predictor():
    model = two_state(((0.5, 0.5), (0.5, 0.5)))
    e = bootstrap_init(model, 200, [0], stream(9))
    pred, filt = bootstrap_step(e, [1], model, stream(10))
    np.testing.assert_array_equal(filt.locations, pred.locations)
    np.testing.assert_allclose(filt.weights, pred.weights, atol=1e-15)


def test_bootstrap_one_step_hmm_oracle():
    model = two_state()
    obs = np.array([[0], [1]])
    exact = forward_filter(model, obs)
    e0 = bootstrap_init(model, 100_000, obs[0], stream(11))
    assert tv_distance(as_discrete(e0), exact[0]) <= 0.01
    _, e1 = bootstrap_step(e0, obs[1], model, stream(12))
    assert tv_distance(as_discrete(e1), exact[1]) <= 0.01


def test_bootstrap_tracks_hmm_filter_over_ten_steps():
    model = two_state()
    errs = []
    for seed in range(20):
        traj = simulate(model, 10, seed)
        exact = forward_filter(model, traj.observations)
        for (_, f), ex in zip(iterate_bootstrap(model, traj.observations, 100_000, stream(seed, 1)), exact):
            errs.append(tv_distance(as_discrete(f), ex))
    assert np.mean(errs) <= 0.02


def test_single_particle_filter():
    obs = simulate(LINEAR, 30, 13).observations
    exact = kalman_filter(LINEAR, obs)
    for k, (_, f) in enumerate(iterate_bootstrap(LINEAR, obs, 1, stream(14))):
        assert f.n_particles == 1 and f.weights[0] == 1.0
        ref = ParticleEnsemble(np.array([[exact[k].mean[0]]]), np.ones(1))
        assert bl_distance(f, ref) <= 2.0


def test_bootstrap_init_rejects_zero_particles():
    with pytest.raises(ValueError):
        bootstrap_init(LINEAR, 0, [0.0], stream(0))


def test_monte_carlo_rate():
    model = two_state()
    obs = np.array([[0], [1]])
    target = forward_filter(model, obs)[1].probs[1]
    ns = np.array([50, 100, 200, 400, 800, 1600, 3200])
    rmse = []
    for n in ns:
        est = []
        for rep in range(400):
            gen = stream(15, int(n), rep)
            _, f = bootstrap_step(bootstrap_init(model, int(n), obs[0], gen), obs[1], model, gen)
            est.append(f.weights @ f.locations[:, 0])
        rmse.append(np.sqrt(np.mean((np.array(est) - target) ** 2)))
    slope = np.polyfit(np.log(ns), np.log(rmse), 1)[0]
    assert -0.65 <= slope <= -0.35


# -- naive ------------------------------------------------------------------


def test_naive_log_weights_accumulate():
    gen = stream(16)
    s0 = naive_init(LINEAR, 10, [0.5], gen)
    s1 = naive_step(s0, [1.0], LINEAR, gen)
    np.testing.assert_allclose(s1.log_weights - s0.log_weights, LINEAR.log_likelihood(s1.locations, np.array([1.0])))
    assert abs(s1.normalized_weights().sum() - 1) <= 1e-12


def test_naive_rejects_nan():
    with pytest.raises(ValueError):
        NaiveFilterState(np.zeros((2, 1)), np.array([0.0, np.nan]))


def test_naive_survives_extreme_log_weights():
    s = NaiveFilterState(np.zeros((3, 1)), np.array([-1e5, -1e5 - 1, -2e5]))
    w = s.normalized_weights()
    assert np.all(np.isfinite(w)) and abs(w.sum() - 1) <= 1e-12
    assert w[0] == pytest.approx(1 / (1 + np.exp(-1)))


def test_naive_matches_bootstrap_at_time_zero():
    a = bootstrap_init(LINEAR, 500, [0.7], stream(17))
    b = naive_init(LINEAR, 500, [0.7], stream(17)).as_ensemble()
    assert a.mean()[0] == pytest.approx(b.mean()[0], abs=1e-12)


def test_flat_likelihood_estimates_are_unbiased():
    model = constant_likelihood(make_linear_gaussian(0.9, 1.0, 1.0, x0=2.0))
    obs = np.zeros((6, 1))
    target = 2.0 * 0.9**5
    boot, naive = [], []
    for rep in range(2000):
        boot.append(list(iterate_bootstrap(model, obs, 20, stream(18, rep)))[-1][1].mean()[0])
        naive.append(list(iterate_naive(model, obs, 20, stream(19, rep)))[-1].as_ensemble().mean()[0])
    for est in (boot, naive):
        est = np.asarray(est)
        assert abs(est.mean() - target) <= 3 * est.std(ddof=1) / np.sqrt(len(est))


def test_naive_error_grows_while_bootstrap_does_not():
    early_b, late_b, early_n, late_n = [], [], [], []
    for rep in range(10):
        traj = simulate(LINEAR, 300, rep)
        km = np.array([b.mean[0] for b in kalman_filter(LINEAR, traj.observations)])
        bm = np.array([f.mean()[0] for _, f in iterate_bootstrap(LINEAR, traj.observations, 100, stream(rep, 1))])
        nm = np.array([s.as_ensemble().mean()[0] for s in iterate_naive(LINEAR, traj.observations, 100, stream(rep, 2))])
        early_b.append((bm - km)[1:51] ** 2)
        late_b.append((bm - km)[250:] ** 2)
        early_n.append((nm - km)[1:51] ** 2)
        late_n.append((nm - km)[250:] ** 2)
    assert np.mean(late_n) > 5 * np.mean(late_b)
    assert np.mean(late_n) > np.mean(early_n)


# -- predictor --------------------------------------------------------------


def test_predictor_round_trip():
    gen = stream(20)
    for _ in range(100):
        n = int(gen.integers(1, 50))
        w = gen.dirichlet(np.ones(n))
        e = ParticleEnsemble(3 * gen.standard_normal((n, 1)), w)
        y = [float(2 * gen.standard_normal())]
        back = predictor_from_filter(update(e, y, LINEAR), y, LINEAR)
        assert np.max(np.abs(back.weights - e.weights)) < 1e-10


def test_predictor_round_trip_simple_case_is_exact():
    e = ParticleEnsemble(np.array([[0.0], [1.0], [2.0]]), np.array([0.25, 0.25, 0.5]))
    back = predictor_from_filter(update(e, [0.3], LINEAR), [0.3], LINEAR)
    np.testing.assert_allclose(back.weights, e.weights, atol=1e-12, rtol=0)


def test_predictor_constant_likelihood_is_identity():
    e = ParticleEnsemble(np.array([[0.0], [1.0]]), np.array([0.3, 0.7]))
    out = predictor_from_filter(e, [5.0], constant_likelihood(LINEAR))
    np.testing.assert_allclose(out.weights, e.weights, atol=1e-15)


def test_bootstrap_predictor_is_recovered_from_filter():
    obs = simulate(LINEAR, 20, 21).observations
    for k, (pred, filt) in enumerate(iterate_bootstrap(LINEAR, obs, 40, stream(22))):
        back = predictor_from_filter(filt, obs[k], LINEAR)
        np.testing.assert_allclose(back.weights, pred.weights, atol=1e-10)

import inspect

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedindex import (
    AggregatorConfig,
    DivergenceError,
    FedOptConfig,
    IndexCoefficients,
    LocalUpdateConfig,
    ProducerDataset,
    ServerState,
    TweedieParams,
    aggregate_fedavg,
    fedopt_step,
    local_risk_gradient,
    local_update,
    pseudo_gradient,
    run_round,
    run_training,
)
from fedindex.federated import client_rng, initial_coeffs, run_rounds


def c(*a):
    return IndexCoefficients(np.array(a, dtype=float))


def fresh_rngs(clients, seed=0):
    return {cl.id: np.random.default_rng(seed) for cl in clients}


class TestConfigs:
    def test_local_defaults_and_validation(self):
        cfg = LocalUpdateConfig()
        assert (cfg.epochs, cfg.batch_size, cfg.prox_beta) == (1, 32, 0.0)
        for bad in [dict(epochs=-1), dict(batch_size=0), dict(learning_rate=-0.1), dict(prox_beta=-1.0)]:
            with pytest.raises(ValueError):
                LocalUpdateConfig(**bad)

    def test_fedopt_present_iff_kind(self):
        assert AggregatorConfig.fedavg().fedopt is None
        opt = AggregatorConfig.fedopt_adam()
        assert opt.fedopt == FedOptConfig()
        assert (opt.fedopt.beta1, opt.fedopt.beta2, opt.fedopt.epsilon, opt.fedopt.server_lr) == (0.9, 0.999, 1e-8, 0.1)
        with pytest.raises(ValueError):
            AggregatorConfig("fedavg", FedOptConfig())

    def test_server_state_moments(self):
        s = ServerState(c(0.1, 0.1))
        assert s.m.tolist() == [0.0, 0.0] and s.v.tolist() == [0.0, 0.0]
        with pytest.raises(ValueError):
            ServerState(c(0.1, 0.1), v=np.array([-1.0, 0.0]))


class TestLocalUpdate:
    @pytest.mark.parametrize("cfg", [LocalUpdateConfig(epochs=0), LocalUpdateConfig(learning_rate=0.0)])
    def test_no_op(self, small_population, cfg):
        start = c(0.3, 0.2)
        assert local_update(small_population[0], start, cfg, np.random.default_rng(0)) == start

    def test_single_full_batch_step(self, small_population):
        ds = small_population[0]
        start = c(0.45, 0.25)
        cfg = LocalUpdateConfig(epochs=1, batch_size=ds.n_obs, learning_rate=0.01)
        out = local_update(ds, start, cfg, np.random.default_rng(3))
        expected = start.a - 0.01 * local_risk_gradient(start, ds, ds.params)
        np.testing.assert_allclose(out.a, expected, rtol=1e-12)

    def test_tail_batch_used(self):
        # three observations with batch size 2: the tail batch moves the iterate too
        y = np.array([[1.0], [1.0], [1.0]])
        ds = ProducerDataset("a", y, np.array([2.0, 2.0, 2.0]), TweedieParams(1.0, 1.5, 1.0))
        one = local_update(ds, c(1.0), LocalUpdateConfig(batch_size=2, learning_rate=0.1), np.random.default_rng(0))
        w = 1.0
        for _ in range(2):
            w -= 0.1 * local_risk_gradient(c(w), (y[:1], np.array([2.0])), ds.params)[0]
        assert one.a[0] == pytest.approx(w, rel=1e-12)

    def test_divergence_names_client(self):
        y = np.array([[1.0]])
        ds = ProducerDataset("boom", y, np.array([1e300]), TweedieParams(1.0, 1.5, 1e-300))
        with pytest.raises(DivergenceError) as info:
            local_update(ds, c(1.0), LocalUpdateConfig(learning_rate=1.0), np.random.default_rng(0))
        assert info.value.client == "boom"

    def test_data_locality(self):
        params = list(inspect.signature(local_update).parameters)
        assert params == ["data", "global_coeffs", "cfg", "rng"]
        # aggregation accepts (weight, coefficients) pairs only
        with pytest.raises((AttributeError, TypeError, ValueError)):
            aggregate_fedavg([(1.0, ProducerDataset("a", np.ones((1, 1)), np.ones(1), TweedieParams(1, 1.5, 1)))])


class TestAggregate:
    def test_identical_updates(self):
        assert aggregate_fedavg([(2.0, c(0.3, 0.7)), (5.0, c(0.3, 0.7))]) == c(0.3, 0.7)

    def test_midpoint(self):
        assert aggregate_fedavg([(1.0, c(1, 0)), (1.0, c(0, 1))]) == c(0.5, 0.5)

    def test_weighted(self):
        assert aggregate_fedavg([(3.0, c(4, 0)), (1.0, c(0, 4))]) == c(3, 1)

    def test_rejects_bad_weights(self):
        with pytest.raises(ValueError):
            aggregate_fedavg([(0.0, c(1.0))])
        with pytest.raises(ValueError):
            aggregate_fedavg([])

    @settings(max_examples=100, deadline=None)
    @given(
        st.lists(
            st.tuples(st.floats(0.01, 100), st.lists(st.floats(-50, 50), min_size=3, max_size=3)),
            min_size=1,
            max_size=8,
        ),
        st.randoms(use_true_random=False),
    )
    def test_convex_hull_and_permutation(self, raw, rnd):
        updates = [(w, IndexCoefficients(np.array(a))) for w, a in raw]
        out = aggregate_fedavg(updates).a
        stacked = np.array([a for _, a in raw])
        assert np.all(out >= stacked.min(axis=0)) and np.all(out <= stacked.max(axis=0))
        shuffled = list(updates)
        rnd.shuffle(shuffled)
        assert np.array_equal(aggregate_fedavg(shuffled).a, out)
        anchor = c(0.1, -0.2, 0.3)
        assert np.array_equal(pseudo_gradient(anchor, shuffled), pseudo_gradient(anchor, updates))


class TestPseudoGradient:
    def test_zero_when_unchanged(self):
        g = pseudo_gradient(c(0.2, 0.4), [(1.0, c(0.2, 0.4)), (3.0, c(0.2, 0.4))])
        assert g.tolist() == [0.0, 0.0]

    def test_single_client(self):
        assert pseudo_gradient(c(1, 1), [(1.0, c(0, 2))]).tolist() == [1.0, -1.0]

    def test_identity_exact_on_dyadic_values(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            k = int(rng.integers(1, 6))
            weights = [float(2 ** rng.integers(0, 3)) for _ in range(k)]
            if np.log2(sum(weights)) % 1:
                weights[0] += 2 ** np.ceil(np.log2(sum(weights))) - sum(weights)
            updates = [(w, IndexCoefficients(rng.integers(-64, 64, 2) / 8.0)) for w in weights]
            anchor = IndexCoefficients(rng.integers(-64, 64, 2) / 8.0)
            lhs = anchor.a - pseudo_gradient(anchor, updates)
            assert np.array_equal(lhs, aggregate_fedavg(updates).a)

    @settings(max_examples=200, deadline=None)
    @given(
        st.lists(
            st.tuples(st.floats(0.1, 10), st.lists(st.floats(-5, 5), min_size=2, max_size=2)),
            min_size=1,
            max_size=6,
        ),
        st.lists(st.floats(-5, 5), min_size=2, max_size=2),
    )
    def test_identity_to_rounding(self, raw, anchor):
        updates = [(w, IndexCoefficients(np.array(a))) for w, a in raw]
        anchor = IndexCoefficients(np.array(anchor))
        lhs = anchor.a - pseudo_gradient(anchor, updates)
        np.testing.assert_allclose(lhs, aggregate_fedavg(updates).a, rtol=0, atol=1e-13)


class TestFedOptStep:
    def test_zero_gradient_is_fixpoint(self):
        s = fedopt_step(ServerState(c(0.3, 0.4)), np.zeros(2), FedOptConfig())
        assert s.coeffs == c(0.3, 0.4)
        assert s.round == 1

    def test_first_step_magnitude(self):
        s = fedopt_step(ServerState(c(0.0, 0.0)), np.array([1.0, 0.0]), FedOptConfig())
        assert s.coeffs.a[0] == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-9)
        assert s.coeffs.a[1] == 0.0

    def test_second_moment_nonnegative(self):
        rng = np.random.default_rng(0)
        s = ServerState(c(0.0, 0.0, 0.0))
        for _ in range(200):
            s = fedopt_step(s, rng.normal(0, 10, 3), FedOptConfig(server_lr=0.01))
            assert np.all(s.v >= 0)


class TestRounds:
    def test_single_client_fedavg_equals_local_update(self, small_population):
        ds = small_population[0]
        cfg = LocalUpdateConfig(epochs=2, batch_size=16)
        state, trace = run_round(ServerState(c(0.1, 0.1)), [ds], AggregatorConfig.fedavg(), cfg, fresh_rngs([ds], 4))
        expected = local_update(ds, c(0.1, 0.1), cfg, np.random.default_rng(4))
        assert state.coeffs == expected
        assert trace.round == 1 and set(trace.per_client_losses) == {ds.id}

    def test_prox_zero_matches_fedavg(self, small_population):
        cfg = LocalUpdateConfig(epochs=2, batch_size=16)
        _, avg = run_training(small_population, AggregatorConfig.fedavg(), cfg, 5, 7)
        _, prox = run_training(small_population, AggregatorConfig.fedprox(), cfg, 5, 7)
        assert [t.coeffs_after for t in avg] == [t.coeffs_after for t in prox]
        assert [t.global_loss for t in avg] == [t.global_loss for t in prox]

    def test_identical_clients_follow_single_trajectory(self, small_population):
        base = small_population[0]
        twins = [ProducerDataset(f"twin-{k}", base.y, base.x, base.params, base.weight) for k in range(3)]
        cfg = LocalUpdateConfig(epochs=1, batch_size=20)
        agg = AggregatorConfig.fedavg()
        s_many = s_one = ServerState(c(0.1, 0.1))
        for r in range(4):
            s_many, _ = run_round(s_many, twins, agg, cfg, fresh_rngs(twins, r))
            s_one, _ = run_round(s_one, twins[:1], agg, cfg, fresh_rngs(twins[:1], r))
            np.testing.assert_allclose(s_many.coeffs.a, s_one.coeffs.a, rtol=1e-14)

    @pytest.mark.parametrize("agg", [AggregatorConfig.fedavg(), AggregatorConfig.fedopt_adam()])
    def test_client_order_irrelevant(self, small_population, agg):
        cfg = LocalUpdateConfig(batch_size=16)
        rev = list(reversed(small_population))
        rngs = lambda: {cl.id: client_rng(1, 0, cl.id) for cl in small_population}
        a, ta = run_round(ServerState(c(0.1, 0.1)), small_population, agg, cfg, rngs())
        b, tb = run_round(ServerState(c(0.1, 0.1)), rev, agg, cfg, rngs())
        assert a.coeffs == b.coeffs and ta.global_loss == tb.global_loss

    def test_resume_zero_rounds(self, small_population):
        agg, cfg = AggregatorConfig.fedopt_adam(), LocalUpdateConfig(batch_size=16)
        state, _ = run_rounds(ServerState(c(0.1, 0.1)), small_population, agg, cfg, 3, 0)
        again, traces = run_rounds(state, small_population, agg, cfg, 0, 0)
        assert traces == [] and again is state

    def test_resume_continues_trajectory(self, small_population):
        agg, cfg = AggregatorConfig.fedavg(), LocalUpdateConfig(batch_size=16)
        start = ServerState(c(0.1, 0.1))
        full, _ = run_rounds(start, small_population, agg, cfg, 4, 2)
        half, _ = run_rounds(start, small_population, agg, cfg, 2, 2)
        rest, _ = run_rounds(half, small_population, agg, cfg, 2, 2)
        assert rest.coeffs == full.coeffs

    def test_deterministic(self, small_population):
        cfg = LocalUpdateConfig(batch_size=16)
        for agg in [AggregatorConfig.fedavg(), AggregatorConfig.fedopt_adam()]:
            a = run_training(small_population, agg, cfg, 3, 11)
            b = run_training(small_population, agg, cfg, 3, 11)
            assert a[0] == b[0]
            assert [t.global_loss for t in a[1]] == [t.global_loss for t in b[1]]

    def test_seed_matters(self, small_population):
        cfg = LocalUpdateConfig(batch_size=16)
        a, _ = run_training(small_population, AggregatorConfig.fedavg(), cfg, 2, 1)
        b, _ = run_training(small_population, AggregatorConfig.fedavg(), cfg, 2, 2)
        assert a != b

    def test_one_trace_per_round(self, small_population):
        _, traces = run_training(small_population, AggregatorConfig.fedavg(), LocalUpdateConfig(), 4, 0)
        assert [t.round for t in traces] == [1, 2, 3, 4]
        assert all(np.all(np.isfinite(t.coeffs_after.a)) and t.global_loss >= 0 for t in traces)

    def test_divergence_names_round_and_client(self, small_population):
        boom = ProducerDataset("zz-boom", np.ones((1, 2)), np.array([1e300]), TweedieParams(1.0, 1.5, 1e-300))
        with pytest.raises(DivergenceError) as info:
            run_training(small_population + [boom], AggregatorConfig.fedavg(), LocalUpdateConfig(), 5, 0)
        assert (info.value.round, info.value.client) == (1, "zz-boom")
        assert str(info.value).startswith("[round 1, client 'zz-boom']")

    def test_rejects_duplicate_ids(self, small_population):
        with pytest.raises(ValueError):
            run_training([small_population[0]] * 2, AggregatorConfig.fedavg(), LocalUpdateConfig(), 1, 0)

    def test_monotone_trend_homogeneous(self, homogeneous_small):
        cfg = LocalUpdateConfig(epochs=2, batch_size=64, learning_rate=0.01)
        for run in range(3):
            _, traces = run_training(homogeneous_small, AggregatorConfig.fedavg(), cfg, 15, 3, run=run)
            assert traces[-1].global_loss < traces[0].global_loss


class TestInit:
    def test_constant(self):
        assert initial_coeffs(2) == c(0.1, 0.1)
        ic = initial_coeffs(2, intercept=True)
        assert ic.intercept == 0.0

    def test_jitter_reproducible_per_run(self):
        a = initial_coeffs(3, jitter=0.1, master_seed=5, run=1)
        assert a == initial_coeffs(3, jitter=0.1, master_seed=5, run=1)
        assert a != initial_coeffs(3, jitter=0.1, master_seed=5, run=2)

"""Server mechanics against hand-simulated schedules and frozen constants."""
import numpy as np
import pytest

from asgdsim.algorithms import (
    DivergenceError,
    StoppingRule,
    all_workers_once,
    harmonic_mean,
    make_server,
    malenia_condition,
    predicted_iterations,
    theory_stepsize,
)
from asgdsim.problems import ConfigurationError, QuadraticEnsemble, make_quadratic
from asgdsim.timeline import FixedProfile, Horizon, run_event_loop

import oracles


def two_worker_problem(sigma_sq=0.0):
    # f_i(x) = 0.5 x^2 + x for both workers: grad = x + 1 everywhere.
    curv = np.ones((2, 1))
    lin = np.ones((2, 1))
    return QuadraticEnsemble(curv, lin, sigma_sq, x0=np.zeros(1))


def run(method, problem, taus, iterations, gamma=0.1, **kw):
    server = make_server(method, problem, gamma, run_seed=0, **kw)
    run_event_loop([FixedProfile(t) for t in taus], server,
                   Horizon(iterations=iterations))
    return server


def test_stopping_rule_semantics():
    rule = StoppingRule(threshold=4.0)
    assert not rule.satisfied([0, 5])          # everyone must contribute
    assert not rule.satisfied([8, 2])          # harmonic 3.2 < 4
    assert rule.satisfied([12, 3])             # harmonic 4.8 >= 4
    assert all_workers_once().satisfied([1, 1, 1])
    assert harmonic_mean([12, 3]) == pytest.approx(4.8)
    assert malenia_condition(2, 8.0, 1.0).threshold == 4.0
    assert malenia_condition(3, 0.0, 1.0).threshold == 1.0
    with pytest.raises(ConfigurationError):
        malenia_condition(2, 1.0, 0.0)


def test_ringleader_first_round_hand_simulation():
    # taus [1,3]: worker 0 delivers at 1,2,3; worker 1 at 3 (after worker 0).
    server = run("ringleader", two_worker_problem(), [1.0, 3.0], 2, gamma=0.25)
    r0, r1 = server.records
    assert (r0.iteration, r0.virtual_time) == (0, 3.0)
    assert r0.batch_counts == (3, 1)
    assert r0.harmonic_batch == 1.5
    assert r0.delays == (0, 0) and r0.max_delay == 0
    assert r0.updates_this_round == 1
    assert r0.grad_norm_sq == 1.0          # grad at x0=0 is exactly 1
    # Owed worker 0 returns at t=4 and fires the second update; the served
    # worker's frozen entry still contributes its averaged gradient.
    assert (r1.iteration, r1.virtual_time) == (1, 4.0)
    assert r1.batch_counts == (4, 1)
    assert r1.harmonic_batch == 1.6
    assert r1.delays == (1, 1) and r1.max_delay == 1
    assert r1.updates_this_round == 2
    assert r1.grad_norm_sq == pytest.approx((1 - 0.25) ** 2, rel=1e-15)


def test_ringleader_round_cadence_and_conservation():
    server = run("ringleader", two_worker_problem(), [1.0, 3.0], 12)
    rounds = [r.updates_this_round for r in server.records]
    assert rounds == [1, 2] * 6              # n updates per round, then swap
    assert server.discarded == 0
    assert {e.disposition for e in server.events} <= {"main-table", "plus-table"}
    # Phase 1 of round c >= 1 starts at iteration c*n with one fresh worker
    # and one aged by a full round; round 0 starts with everyone at x^0.
    for r in server.records:
        if r.iteration == 0:
            assert r.delays == (0, 0)
        elif r.iteration % 2 == 0:
            assert sorted(r.delays) == [0, 1]


def test_ringleader_three_workers_steady_state_batches():
    # taus [1,1,10]: round 1 fires at t=10 with counts [10,10,1]; the second
    # round re-collects and fires at t=20 with the steady-state [9,9,1].
    problem = QuadraticEnsemble(np.ones((3, 1)), np.ones((3, 1)), 0.0, np.zeros(1))
    server = run("ringleader", problem, [1.0, 1.0, 10.0], 4)
    recs = server.records
    assert recs[0].virtual_time == 10.0
    assert recs[0].batch_counts == (10, 10, 1)
    assert recs[0].harmonic_batch == 2.5
    assert recs[1].batch_counts == (11, 10, 1)
    assert recs[2].batch_counts == (11, 11, 1)
    assert recs[3].virtual_time == 20.0
    assert recs[3].batch_counts == (9, 9, 1)
    assert recs[3].harmonic_batch == pytest.approx(27 / 11, rel=1e-15)
    assert sorted(recs[3].delays) == [0, 1, 2]
    # Lemma bound tau_max/(2 tau_avg) = 10/8.
    assert all(r.harmonic_batch >= 1.25 for r in recs)


def test_malenia_parameter_free_round_per_tau_max():
    server = run("malenia-parameter-free", two_worker_problem(), [1.0, 3.0], 3)
    assert [r.virtual_time for r in server.records] == [3.0, 6.0, 9.0]
    assert [r.batch_counts for r in server.records] == [(3, 1)] * 3
    assert [r.discarded_events for r in server.records] == [1, 2, 3]
    assert server.discarded == 3
    discards = [e for e in server.events if e.disposition == "discarded"]
    assert [(e.time, e.worker_id) for e in discards] == [(3.0, 0), (6.0, 0), (9.0, 0)]
    assert all(e.draw_index == -1 for e in discards)


def test_malenia_threshold_waits_for_harmonic_mean():
    # sigma^2/(n eps) = 4 with taus [1,4]: counts [12,2] still miss the bar,
    # the t=12 arrival of worker 1 lifts it to [12,3], harmonic 4.8.
    problem = two_worker_problem(sigma_sq=8.0)
    server = run("malenia", problem, [1.0, 4.0], 1, epsilon=1.0)
    (r0,) = server.records
    assert r0.virtual_time == 12.0
    assert r0.batch_counts == (12, 3)
    assert r0.harmonic_batch == pytest.approx(4.8, rel=1e-12)
    assert min(r0.batch_counts) < 4          # the rule is not a min rule


def test_ia2sgd_barrier_then_single_slot_updates():
    server = run("ia2sgd", two_worker_problem(), [1.0, 3.0], 4)
    recs = server.records
    # Barrier completes when worker 1 first arrives at t=3.
    assert recs[0].virtual_time == 3.0
    assert recs[0].delays == (0, 0)
    # Afterwards every arrival updates; worker 0 returns at 4, 5, 6.
    assert [r.virtual_time for r in recs[1:]] == [4.0, 5.0, 6.0]
    assert [r.updates_this_round for r in recs] == [1] * 4
    # Worker 1's slot ages while it recomputes from the barrier broadcast.
    assert recs[3].delays == (0, 3)
    assert {e.disposition for e in server.events} == {"ia2sgd-slot"}


def test_minibatch_rounds_and_idle_workers():
    server = run("minibatch", two_worker_problem(), [1.0, 3.0], 3)
    assert [r.virtual_time for r in server.records] == [3.0, 6.0, 9.0]
    # Worker 0 idles after each delivery: exactly one draw per round.
    assert [e.worker_id for e in server.events] == [0, 1] * 3
    assert [e.draw_index for e in server.events if e.worker_id == 0] == [0, 1, 2]
    assert all(r.harmonic_batch == 1.0 for r in server.records)
    assert all(r.max_delay == 0 for r in server.records)


def test_single_worker_methods_coincide():
    problem = make_quadratic(dim=3, n=1, sigma_sq=1.0, seed=3)
    traces = {}
    for method in ("ringleader", "ia2sgd", "minibatch"):
        server = run(method, problem, [2.0], 30, gamma=0.05)
        traces[method] = [(r.virtual_time, r.grad_norm_sq, r.harmonic_batch,
                           r.max_delay) for r in server.records]
    assert traces["ringleader"] == traces["ia2sgd"] == traces["minibatch"]
    assert [t for t, *_ in traces["minibatch"]] == [2.0 * (k + 1) for k in range(30)]


def test_update_rule_matches_closed_form_descent():
    # sigma^2 = 0, n=1: the iterates are plain gradient descent.
    problem = make_quadratic(dim=4, n=1, heterogeneity=1.0, seed=5)
    server = run("minibatch", problem, [1.0], 50, gamma=0.2)
    for r in server.records:
        want = oracles.gd_gradient_norm_sq(
            problem.curvatures, problem.linears, problem.x0, 0.2, r.iteration)
        assert r.grad_norm_sq == pytest.approx(want, rel=1e-12)


def test_divergence_raises_with_iteration_context():
    problem = make_quadratic(dim=2, n=1, heterogeneity=1.0, seed=0)
    with pytest.raises(DivergenceError) as err:
        run("minibatch", problem, [1.0], 2000, gamma=1e8)
    assert err.value.iteration < 2000


def test_frozen_theory_constants():
    assert theory_stepsize(2, 1.0, 0.0, 0.1) == 0.0625
    assert theory_stepsize(4, 1.0, 1.0, 0.1) == 0.01
    assert theory_stepsize(4, 1.0, 40.0, 0.01) == pytest.approx(2.5e-5, rel=1e-12)
    assert theory_stepsize(10, 1.0, 5.0, 0.1, universal=True) == 0.01
    assert predicted_iterations(4, 1.0, 1.0, 0.0, 0.1) == 1280
    assert predicted_iterations(4, 1.0, 1.0, 1.0, 0.1) == 5280
    assert predicted_iterations(1, 1.0, 1.0, 0.0, 0.1, universal=True) == 1600
    with pytest.raises(ConfigurationError):
        theory_stepsize(0, 1.0, 0.0, 0.1)


def test_make_server_rejects_unknown_method_and_bad_gamma():
    problem = two_worker_problem()
    with pytest.raises(ConfigurationError):
        make_server("sgd", problem, 0.1, 0)
    with pytest.raises(ConfigurationError):
        make_server("ringleader", problem, -0.1, 0)

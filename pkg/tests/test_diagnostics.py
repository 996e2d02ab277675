import os

import numpy as np
import pytest

import featreplay as fr
from featreplay.diagnostics import (InsufficientSamples, TheoryProbe, account_memory,
                                    convergence_report, count_stored_floats, estimate_sigma, grad_check)
from featreplay.layers import Conv2d, Linear, Loss
from featreplay.network import full_gradient, partition

from conftest import make_mlp, make_trainer


def _net_checksum(net):
    return [p.tobytes() for p in net.params()]


def test_sigma_is_one_for_single_module(batch):
    x, y = batch
    tr = make_trainer("fr", make_mlp(), K=1)
    _, ref = full_gradient(tr.net, x, y)
    tr.step(x, y)
    est = estimate_sigma(tr.gradient_blocks(), ref, [range(len(ref))])
    assert est.global_ == 1.0 and est.per_module == [1.0]


def test_sigma_with_frozen_weights(batch):
    x, y = batch
    net = make_mlp(depth=6)
    tr = make_trainer("fr", net, K=3, gamma=0.0)
    for _ in range(4):
        tr.step(x, y)
    _, ref = full_gradient(net, x, y)
    est = estimate_sigma(tr.gradient_blocks(), ref, tr.param_slices)
    assert est.global_ == pytest.approx(1.0, abs=1e-12)
    assert all(s == pytest.approx(1.0, abs=1e-12) for s in est.per_module)


def test_sigma_guard_on_zero_gradient():
    est = estimate_sigma([[np.ones(2)], [np.ones(2)]], [np.zeros(2), np.ones(2)], [[0], [1]])
    assert est.per_module == [None, 1.0] and est.global_ == 1.0
    assert estimate_sigma([[np.ones(2)]], [np.zeros(2)], [[0]]).global_ is None


def test_sigma_probe_does_not_touch_state(batch):
    x, y = batch
    net = make_mlp()
    tr = make_trainer("fr", net, K=2)
    tr.step(x, y)
    before = _net_checksum(net), [v.tobytes() for v in tr.optimizer.velocity]
    _, ref = full_gradient(net, x, y)
    estimate_sigma(tr.gradient_blocks(), ref, tr.param_slices)
    assert before == (_net_checksum(net), [v.tobytes() for v in tr.optimizer.velocity])


def _uniform_net(d, L):
    return fr.build_network((d,), [{"kind": "linear", "out": d}] * L, Loss("mse"))


def test_fr_history_closed_form_uniform_width():
    b, d = 5, 7
    for K in (1, 2, 3, 4):
        net = _uniform_net(d, 2 * K)
        acc = account_memory(net, partition(net, K, mode="layer"), "fr", b)
        assert acc.history_floats == b * d * K * (K + 1) // 2
        assert acc.delta_floats == b * d * (K - 1)


def test_bp_accounting_is_sum_of_layer_outputs():
    net = make_mlp(depth=3, hidden=8)  # 10 -> 8 -> relu -> 8 -> relu -> 4
    acc = account_memory(net, partition(net, 1), "bp", 2)
    assert acc.activation_floats == 2 * (8 + 8 + 8 + 8 + 4)
    assert acc.weight_floats == net.param_count


def _random_config(r):
    depth = int(r.integers(2, 7))
    hidden = int(r.integers(3, 20))
    net = make_mlp(depth=depth, hidden=hidden, in_dim=int(r.integers(2, 15)), seed=int(r.integers(0, 99)))
    K = int(r.integers(1, min(4, len(net)) + 1))
    return net, K, int(r.integers(1, 9))


@pytest.mark.parametrize("kind", ["fr", "ddg"])
def test_accounting_matches_stored_arrays(kind):
    r = fr.Rng(31)
    for _ in range(10):
        net, K, b = _random_config(r)
        tr = make_trainer(kind, net, K=K, gamma=0.001)
        for _ in range(K + 2):
            tr.step(r.normal((b, net.in_shape[0])), r.integers(0, 4, b))
        counted = count_stored_floats(tr)
        acc = account_memory(net, tr.part, kind, b)
        if kind == "fr":
            assert counted == {"history": acc.history_floats, "delta": acc.delta_floats}
        else:
            assert counted == {"activation": acc.activation_floats, "delta": acc.delta_floats}


def test_memory_ordering_for_layer_balanced_partitions():
    r = fr.Rng(77)
    checked = 0
    while checked < 10:
        net, K, b = _random_config(r)
        if K < 2 or len(net) < 2 * K:
            continue
        part = partition(net, K, mode="layer")
        bp, frr, ddg = (account_memory(net, part, a, b).total for a in ("bp", "fr", "ddg"))
        assert bp < frr < ddg
        checked += 1


def test_accounting_is_additive_over_batch():
    net = make_mlp(depth=4)
    part = partition(net, 2, mode="layer")
    for algo in ("bp", "fr", "ddg"):
        one, three = account_memory(net, part, algo, 1), account_memory(net, part, algo, 3)
        assert three.total - three.weight_floats == 3 * (one.total - one.weight_floats)
    with pytest.raises(ValueError):
        account_memory(net, part, "adam", 1)


def test_theory_probe_lipschitz_of_quadratic():
    probe = TheoryProbe()
    A = np.diag([1.0, 3.0])
    for w in ([1.0, 0.0], [0.0, 1.0], [2.0, 2.0]):
        w = np.array(w)
        probe.add_point([w], [A @ w])
    assert 1.0 <= probe.lipschitz <= 3.0 + 1e-12
    probe.add_direction([np.array([3.0, 4.0])])
    assert probe.second_moment == 25.0


def _records(values, gamma=0.1):
    return [{"iteration": i, "grad_norm": np.sqrt(v), "step_size": gamma} for i, v in enumerate(values)]


def test_convergence_report_fixed_and_diminishing():
    sched = fr.StepSchedule("fixed", 0.1)
    rep = convergence_report(_records([1.0] * 20), sched, sigma_min=0.5, lipschitz=1.0,
                             second_moment=1.0, f0=2.0, f_best=0.0)
    # (2 / (0.5 * 0.1 * 20)) + 0.1 / (2 * 0.5) = 2.1
    assert rep["bound"] == pytest.approx(2.1) and rep["bound_consistent"]
    inv = fr.StepSchedule("inverse_t", a=1.0, b=1.0)
    rep = convergence_report(_records(list(np.linspace(4, 1, 40))), inv)
    assert rep["decreasing"] and "bound" not in rep
    with pytest.raises(InsufficientSamples):
        convergence_report(_records([1.0] * 5), sched)


def test_grad_check_mlp_and_conv():
    assert grad_check(make_mlp(depth=3, hidden=5), fr.Rng(1)).max_rel_error < 1e-6
    conv = Conv2d((2, 8, 8), 3, kernel_size=3, stride=1, padding=1, rng=fr.Rng(4))
    rep = grad_check(conv, fr.Rng(2), batch=2)
    assert rep.passed and rep.max_rel_error < 1e-6


def test_grad_check_reports_failing_coordinates():
    lin = Linear(3, 2, rng=fr.Rng(0))
    real_backward = lin.backward

    def broken(x, upstream, need_input_grad=True):
        grads, dx = real_backward(x, upstream, need_input_grad)
        grads[0] = grads[0].copy()
        grads[0][1, 2] += 1.0
        return grads, dx

    lin.backward = broken
    rep = grad_check(lin, fr.Rng(1))
    assert not rep.passed
    assert ("param0", (1, 2)) in [f[:2] for f in rep.failures]


def test_k1_accounting_examples():
    net = make_mlp(depth=3)
    part = partition(net, 1)
    bp, frr, ddg = (account_memory(net, part, a, 4).total for a in ("bp", "fr", "ddg"))
    assert frr == bp + 4 * 10
    # the delayed-gradient stack also keeps its input batch
    assert ddg == frr


def _smooth_problem(seed=0, n=200):
    r = fr.Rng(seed, 5)
    x = r.normal((n, 6))
    y = x @ r.normal((6, 1)) / 3 + 0.3 * r.normal((n, 1))
    net = fr.build_network((6,), [{"kind": "linear", "out": 6}, {"kind": "linear", "out": 1}],
                           Loss("mse"), seed=seed)
    return net, x, y


def test_descent_probe_holds_on_average():
    from featreplay.diagnostics import descent_probe_terms, flat
    net, x, y = _smooth_problem()
    gamma = 0.01
    opt = fr.Optimizer(net.params(), "sgd", schedule=fr.StepSchedule("fixed", gamma))
    tr = fr.FRTrainer(net, partition(net, 2, mode="layer"), opt)
    probe = TheoryProbe()
    from featreplay.harness import BatchSampler
    sampler = BatchSampler(len(x), 20, seed=0)
    steps = []
    for t in range(400):
        f_now, grad = full_gradient(net, x, y)
        probe.add_point(net.params(), grad)
        idx = sampler.indices(t)
        tr.step(x[idx], y[idx])
        probe.add_direction(tr.last_grads)
        f_next = net.loss.forward(net.forward(x), y)
        g2 = float(flat(grad) @ flat(grad))
        sigma = float(flat(grad) @ flat(tr.last_grads)) / g2
        steps.append((f_next, f_now, g2, sigma))
    residuals = [descent_probe_terms(fn, fw, g2, s, gamma, probe.lipschitz, probe.second_moment)
                 for fn, fw, g2, s in steps]
    assert np.mean(residuals) <= 0
    assert np.mean(residuals[len(residuals) // 2:]) <= 0


def test_bound_consistency_on_smooth_problem(tmp_path):
    from featreplay.harness import RunConfig, run
    from featreplay.harness.metrics import read_metrics
    cfg = RunConfig(dataset={"kind": "synthetic_regression", "params": {"n_samples": 400, "dims": 6}},
                    architecture=[{"kind": "linear", "out": 6}, {"kind": "linear", "out": 1}], loss="mse",
                    trainer="fr", k=2, partition="layer", optimizer="sgd", weight_decay=0.0,
                    schedule={"kind": "fixed", "gamma0": 0.02}, batch_size=32, iterations=1500,
                    probe_every=10, probe_full_gradient=True, out_dir=str(tmp_path / "b"), seed=0)
    res = run(cfg)
    rows = read_metrics(os.path.join(res.out_dir, "metrics.csv"))
    th = res.summary["theory"]
    assert th["sigma_min"] > 0
    sched = fr.StepSchedule("fixed", 0.02)
    # mse is nonnegative, so 0 bounds the optimum from below
    rep = convergence_report(rows, sched, th["sigma_min"], th["lipschitz_estimate"],
                             th["second_moment_estimate"], f0=float(rows[0]["train_loss"]), f_best=0.0)
    assert rep["bound_consistent"] and rep["bound_slack"] >= 0

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import featreplay as fr
from featreplay.engine import DeltaSlot, FeatureHistory, InvariantError
from featreplay.layers import Linear, Loss
from featreplay.network import Network, full_gradient, partition

from conftest import make_mlp, make_trainer


# ---------------------------------------------------------------------------
# independent straight-line simulation of the replay schedule for a 2-module
# scalar chain out = w2 * (w1 * x), loss 1/2 (out - y)^2

def simulate_scalar_chain(T, w1=1.0, w2=1.0, x=1.0, y=0.0, gamma=0.1):
    inputs1, inputs2 = {}, {}
    mailbox = None  # (stamp, gradient) sent down by the upper module
    trace = []
    for t in range(T):
        inputs1[t] = x
        h1 = w1 * x
        inputs2[t] = h1
        # upper module replays its input from this iteration
        h1_r = inputs2[t]
        d2 = w2 * h1_r - y
        g2 = d2 * h1_r
        outgoing = (t, w2 * d2)
        # lower module replays the input from one iteration back
        stamp = t - 1
        if stamp < 0:
            inp, d1 = 0.0, 0.0
        else:
            assert mailbox[0] == stamp
            inp, d1 = inputs1[stamp], mailbox[1]
        g1 = d1 * inp
        w1 -= gamma * g1
        w2 -= gamma * g2
        mailbox = outgoing
        trace.append((w1, w2))
    return trace


def test_simulation_hand_values():
    trace = simulate_scalar_chain(2)
    # t=0: lower module is in warm-up (zero gradient), upper gets g = 1
    assert trace[0] == (1.0, 0.9)
    # t=1: lower module uses the delta w2 * d2 = 1 from t=0 on input 1
    assert trace[1][0] == 0.9 and trace[1][1] == pytest.approx(0.81, abs=1e-15)


def _scalar_chain_net():
    l1, l2 = Linear(1, 1, bias=False), Linear(1, 1, bias=False)
    l1.weight[...] = 1.0
    l2.weight[...] = 1.0
    return Network([l1, l2], Loss("half_mse"))


@pytest.mark.parametrize("lockstep", [True, False])
def test_engine_matches_scalar_chain_simulation(lockstep):
    net = _scalar_chain_net()
    opt = fr.Optimizer(net.params(), "sgd", schedule=fr.StepSchedule("fixed", 0.1))
    x, y = np.array([[1.0]]), np.array([[0.0]])
    with fr.FRTrainer(net, partition(net, boundaries=[1, 2]), opt, lockstep=lockstep) as tr:
        trace = []
        for _ in range(12):
            tr.step(x, y)
            trace.append((net.layers[0].weight[0, 0], net.layers[1].weight[0, 0]))
    assert trace == simulate_scalar_chain(12)


# ---------------------------------------------------------------------------

def test_feature_history_ring():
    h = FeatureHistory(3)
    for t in range(5):
        h.push(t, np.full(1, t))
    assert h.stamps() == [2, 3, 4] and len(h) == 3
    assert h.lookup(3)[0] == 3
    with pytest.raises(InvariantError):
        h.lookup(1)
    with pytest.raises(InvariantError):
        h.push(7, np.zeros(1))


@given(st.integers(1, 6), st.integers(1, 30))
def test_history_holds_at_most_capacity_in_order(capacity, n):
    h = FeatureHistory(capacity)
    for t in range(n):
        h.push(t, t)
    assert h.stamps() == list(range(max(0, n - capacity), n))


def test_delta_slot_exchange():
    s = DeltaSlot()
    assert s.take() is None
    s.put(0, "d")
    with pytest.raises(InvariantError):
        s.put(0, "again")
    s.advance()
    assert s.take() == (0, "d") and s.take() is None
    with pytest.raises(InvariantError):
        s.advance()


def test_forward_loss_equals_bp_loss(batch):
    x, y = batch
    net = make_mlp(depth=4)
    tr = make_trainer("fr", net, K=3)
    assert tr.forward(x, y) == net.loss.forward(net.forward(x), y)


def test_history_capacities_and_steady_state():
    net = make_mlp(depth=6)  # 11 layers
    r = fr.Rng(0)
    tr = make_trainer("fr", net, K=4)
    for t in range(6):
        tr.step(r.normal((8, 10)), r.integers(0, 4, 8))
    assert [len(h) for h in tr.histories] == [4, 3, 2, 1]
    one = make_trainer("fr", make_mlp(depth=2), K=1)
    one.step(r.normal((8, 10)), r.integers(0, 4, 8))
    assert len(one.histories[0]) == 1


def test_twelve_layers_four_modules_layout():
    net = fr.build_network((6,), [{"kind": "linear", "out": 6}] * 12, Loss("mse"))
    part = partition(net, 4, mode="layer")
    assert part.boundaries == (3, 6, 9, 12)
    opt = fr.Optimizer(net.params(), schedule=fr.StepSchedule("fixed", 0.0))
    tr = fr.FRTrainer(net, part, opt)
    r = fr.Rng(1)
    for _ in range(5):
        tr.step(r.normal((2, 6)), r.normal((2, 6)))
    assert len(tr.histories[0]) == 4


def test_k1_step_equals_bp_gradients(batch):
    x, y = batch
    tr = make_trainer("fr", make_mlp(seed=1), K=1, gamma=0.0)
    tr.step(x, y)
    _, ref = full_gradient(tr.net, x, y)
    assert all(np.array_equal(a, b) for a, b in zip(tr.last_grads, ref))


def test_warm_up_zero_substitution(batch):
    x, y = batch
    net = make_mlp(depth=4)
    tr = make_trainer("fr", net, K=2, gamma=0.0)
    grads = tr.forward(x, y) and tr.backward_step()
    assert all(not g.any() for g in grads[0])
    _, ref = full_gradient(net, x, y)
    top = [ref[i] for i in tr.param_slices[1]]
    assert all(np.array_equal(a, b) for a, b in zip(grads[1], top))


@pytest.mark.parametrize("K", [2, 3, 4])
def test_frozen_weights_recover_bp_gradients(K, batch):
    x, y = batch
    net = make_mlp(depth=6, seed=K)
    tr = make_trainer("fr", net, K=K, gamma=0.0)
    for _ in range(K):
        tr.step(x, y)
    tr.step(x, y)
    _, ref = full_gradient(net, x, y)
    assert max(np.abs(a - b).max() for a, b in zip(tr.last_grads, ref)) < 1e-9


def test_stamp_mismatch_is_detected(batch):
    x, y = batch
    tr = make_trainer("fr", make_mlp(depth=4), K=2)
    tr.step(x, y)
    tr.slots[0].pending = (5, tr.slots[0].pending[1])
    with pytest.raises(InvariantError, match="stamp"):
        tr.step(x, y)


def test_missing_history_is_detected(batch):
    x, y = batch
    tr = make_trainer("fr", make_mlp(depth=4), K=2)
    tr.step(x, y)
    tr.step(x, y)
    tr.histories[0].clear()
    with pytest.raises(InvariantError):
        tr.step(x, y)


def test_top_activation_cache_is_bit_identical():
    r = fr.Rng(4)
    data = [(r.normal((16, 10)), r.integers(0, 4, 16)) for _ in range(10)]
    results = []
    for reuse in (False, True):
        net = make_mlp(depth=5, seed=2)
        tr = make_trainer("fr", net, K=3, reuse_top_activation=reuse)
        losses = [tr.step(x, y) for x, y in data]
        results.append((losses, [p.copy() for p in net.params()]))
    assert results[0][0] == results[1][0]
    assert all(np.array_equal(a, b) for a, b in zip(results[0][1], results[1][1]))


def test_lockstep_and_parallel_are_bit_identical():
    r = fr.Rng(5)
    data = [(r.normal((16, 10)), r.integers(0, 4, 16)) for _ in range(15)]
    results = []
    for lockstep in (True, False):
        net = make_mlp(depth=6, seed=3)
        with make_trainer("fr", net, K=4, lockstep=lockstep) as tr:
            losses = [tr.step(x, y) for x, y in data]
        results.append((losses, [p.copy() for p in net.params()]))
    assert results[0][0] == results[1][0]
    assert all(np.array_equal(a, b) for a, b in zip(results[0][1], results[1][1]))


def test_backward_step_then_update_equals_step(batch):
    x, y = batch
    a = make_trainer("fr", make_mlp(seed=9), K=2)
    b = make_trainer("fr", make_mlp(seed=9), K=2)
    for _ in range(4):
        a.step(x, y)
        b.forward(x, y)
        b.update(b.backward_step())
    assert all(np.array_equal(p, q) for p, q in zip(a.net.params(), b.net.params()))


# ---------------------------------------------------------------------------
# optimizer

def test_sgd_examples():
    w = np.array([1.0])
    fr.Optimizer([w], "sgd", schedule=fr.StepSchedule("fixed", 0.1)).update([0], [np.array([0.5])], 0)
    assert w[0] == pytest.approx(0.95, abs=1e-16)
    z = np.array([2.0, -1.0])
    fr.Optimizer([z], "sgd_momentum", 0.9, schedule=fr.StepSchedule("fixed", 0.1)).update([0], [np.zeros(2)], 0)
    assert np.array_equal(z, [2.0, -1.0])


def test_momentum_recurrence():
    w0 = 3.0
    w = np.array([w0])
    opt = fr.Optimizer([w], "sgd_momentum", 0.9, 0.0, fr.StepSchedule("fixed", 0.1))
    opt.update([0], [np.ones(1)], 0)
    opt.update([0], [np.ones(1)], 1)
    # v1 = 1, v2 = 0.9 * 1 + 1 = 1.9
    assert w[0] == pytest.approx(w0 - 0.1 * 1 - 0.1 * 1.9, abs=1e-15)


def test_weight_decay_adds_l2_gradient():
    w = np.array([2.0])
    fr.Optimizer([w], "sgd", weight_decay=0.5, schedule=fr.StepSchedule("fixed", 0.1)).update(
        [0], [np.zeros(1)], 0)
    assert w[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


def test_non_finite_gradient_raises_with_module_and_iteration():
    w = np.array([1.0])
    opt = fr.Optimizer([w], schedule=fr.StepSchedule("fixed", 0.1))
    with pytest.raises(fr.DivergenceError, match="module 2 at iteration 7") as e:
        opt.update([0], [np.array([np.nan])], 7, module=2)
    assert e.value.module == 2 and e.value.iteration == 7
    assert w[0] == 1.0


def test_divergence_halts_training():
    net = make_mlp(depth=3)
    tr = make_trainer("fr", net, K=2)
    r = fr.Rng(0)
    x, y = r.normal((16, 10)), r.integers(0, 4, 16)
    tr.step(x, y)
    x[0, 0] = np.inf
    with pytest.raises(fr.DivergenceError):
        for _ in range(3):
            tr.step(x, y)


def test_schedules():
    s = fr.StepSchedule("step_decay", 0.01, milestones=[10, 15], factor=0.1)
    assert s(0) == 0.01 and s(10) == pytest.approx(0.001) and s(20) == pytest.approx(0.0001)
    inv = fr.StepSchedule("inverse_t", a=2.0, b=4.0)
    assert inv(0) == 0.5 and inv(4) == 0.25
    # partial sums: harmonic-like sum grows, sum of squares stays bounded
    assert inv.cumulative(10**4) > 10 and sum(inv(t) ** 2 for t in range(10**4)) < 2.0 * 2.0 / 3.0
    assert fr.StepSchedule("fixed", 0.3)(1000) == 0.3
    with pytest.raises(ValueError):
        fr.StepSchedule("cosine")
    with pytest.raises(ValueError):
        fr.Optimizer([], momentum=1.0)

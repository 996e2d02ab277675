import numpy as np
import pytest

import featreplay as fr


def make_mlp(depth=4, hidden=16, in_dim=10, classes=4, seed=0):
    return fr.build_network((in_dim,), fr.mlp_architecture(hidden, classes, depth),
                            fr.Loss("softmax_cross_entropy", classes), seed=seed)


def make_trainer(kind, net, K=1, gamma=0.05, momentum=0.9, weight_decay=5e-4, mode="layer", **kw):
    opt = fr.Optimizer(net.params(), "sgd_momentum" if momentum else "sgd", momentum, weight_decay,
                       fr.StepSchedule("fixed", gamma))
    if kind == "bp":
        return fr.BPTrainer(net, opt)
    part = fr.partition(net, K, mode=mode)
    cls = fr.FRTrainer if kind == "fr" else fr.DDGTrainer
    return cls(net, part, opt, **kw)


@pytest.fixture
def batch():
    r = fr.Rng(123)
    return r.normal((32, 10)), r.integers(0, 4, 32)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)

"""SGD / momentum SGD with stepsize schedules."""
import math

import numpy as np


class DivergenceError(RuntimeError):
    """Raised when a loss or gradient becomes non-finite."""

    def __init__(self, message, module=None, iteration=None):
        super().__init__(message)
        self.module = module
        self.iteration = iteration


class StepSchedule:
    """Stepsize sequence gamma_t.

    fixed:       gamma_t = gamma0
    step_decay:  gamma0 * factor ** (number of milestones <= t)
    inverse_t:   a / (b + t), which has a divergent sum and a convergent sum of squares
    """

    KINDS = ("fixed", "step_decay", "inverse_t")

    def __init__(self, kind="fixed", gamma0=0.01, milestones=(), factor=0.1, a=None, b=None):
        if kind not in self.KINDS:
            raise ValueError(f"unknown schedule {kind!r}")
        self.kind = kind
        self.gamma0 = float(gamma0)
        self.milestones = tuple(sorted(int(m) for m in milestones))
        self.factor = float(factor)
        if kind == "inverse_t":
            if b is None:
                b = 1.0
            if a is None:
                a = self.gamma0 * b
            if a <= 0 or b <= 0:
                raise ValueError("inverse_t needs a > 0 and b > 0")
        elif self.gamma0 < 0:
            raise ValueError("gamma0 must be non-negative")
        self.a, self.b = a, b

    def __call__(self, t):
        if self.kind == "fixed":
            return self.gamma0
        if self.kind == "step_decay":
            drops = sum(1 for m in self.milestones if t >= m)
            return self.gamma0 * self.factor ** drops
        return self.a / (self.b + t)

    def cumulative(self, T):
        """Gamma_T = sum of gamma_t for t < T."""
        return math.fsum(self(t) for t in range(T))

    def to_dict(self):
        return {"kind": self.kind, "gamma0": self.gamma0, "milestones": list(self.milestones),
                "factor": self.factor, "a": self.a, "b": self.b}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: v for k, v in d.items() if v is not None})


class Optimizer:
    """Per-tensor SGD. The momentum variant keeps a velocity per weight tensor:

        v <- mu * v + g + lambda * w
        w <- w - gamma_t * v
    """

    def __init__(self, params, kind="sgd", momentum=0.0, weight_decay=0.0, schedule=None):
        if kind not in ("sgd", "sgd_momentum"):
            raise ValueError(f"unknown optimizer {kind!r}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        self.params = params
        self.kind = kind
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.schedule = schedule if schedule is not None else StepSchedule()
        self.velocity = [np.zeros_like(p) for p in params] if kind == "sgd_momentum" else []

    def update(self, indices, grads, t, module=None):
        """Apply one step to ``params[i]`` for ``i`` in ``indices`` (in place)."""
        for g in grads:
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite gradient in module {module} at iteration {t}",
                                      module=module, iteration=t)
        gamma = self.schedule(t)
        for i, g in zip(indices, grads):
            w = self.params[i]
            if w.shape != g.shape:
                raise ValueError(f"gradient shape {g.shape} does not match weight {w.shape}")
            d = g + self.weight_decay * w if self.weight_decay else g
            if self.kind == "sgd_momentum":
                v = self.velocity[i]
                v *= self.momentum
                v += d
                d = v
            w -= gamma * d

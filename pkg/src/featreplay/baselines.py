"""Reference trainers: plain backpropagation and delayed-gradient pipelining (DDG).

The DDG trainer is a behaviour-level reconstruction: every module keeps the
full activation stack of each in-flight iteration and backpropagates a stale
error gradient through the stack recorded ``K - 1 - k`` iterations ago.
"""
from collections import deque

import numpy as np

from .engine import InvariantError, PipelinedTrainer, Trainer
from .network import full_gradient, module_replay
from .optim import DivergenceError


class BPTrainer(Trainer):
    name = "bp"

    def step(self, x, y):
        t = self.iteration
        loss, grads = full_gradient(self.net, x, y)
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite loss at iteration {t}", iteration=t)
        self.last_grads = grads
        self.optimizer.update(range(len(grads)), grads, t, module=0)
        self.iteration += 1
        return loss


class DDGTrainer(PipelinedTrainer):
    name = "ddg"

    def __init__(self, net, part, optimizer, lockstep=True, max_workers=None):
        super().__init__(net, part, optimizer, lockstep=lockstep, max_workers=max_workers)
        # module k keeps K - k activation stacks; a stack is [input, layer outputs...]
        self.stacks = [deque(maxlen=self.K - k) for k in range(self.K)]

    def _play(self, k, t, h):
        acts = module_replay(self.net, self.part, k, h)
        self.stacks[k].append((t, acts))
        return acts[-1]

    def _activations(self, k, stamp):
        stack = self.stacks[k]
        if stamp < 0:
            return module_replay(self.net, self.part, k, np.zeros_like(stack[-1][1][0]))
        i = stamp - stack[0][0]
        if not 0 <= i < len(stack):
            raise InvariantError(f"module {k} holds no activation stack for stamp {stamp}")
        return stack[i][1]

    def extra_state(self):
        meta, tensors = self._slot_state()
        meta["stack_stamps"] = []
        meta["stack_depths"] = []
        for k, stack in enumerate(self.stacks):
            meta["stack_stamps"].append([s for s, _ in stack])
            meta["stack_depths"].append([len(a) for _, a in stack])
            for stamp, acts in stack:
                for j, a in enumerate(acts):
                    tensors[f"stack/{k}/{stamp}/{j}"] = a
        return meta, tensors

    def load_extra_state(self, meta, tensors):
        self._load_slot_state(meta, tensors)
        for k, (stamps, depths) in enumerate(zip(meta["stack_stamps"], meta["stack_depths"])):
            self.stacks[k].clear()
            for stamp, depth in zip(stamps, depths):
                acts = [tensors[f"stack/{k}/{stamp}/{j}"] for j in range(depth)]
                self.stacks[k].append((stamp, acts))

    def stored_arrays(self):
        acts = [a for stack in self.stacks for _, stack_acts in stack for a in stack_acts]
        delta = [s.pending[1] for s in self.slots if s.pending is not None]
        return {"activation": acts, "delta": delta}

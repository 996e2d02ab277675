"""Features-replay training engine.

Each iteration has two barrier-separated phases:

* forward ("play"): one worker walks the modules in order, storing every
  module's input in that module's :class:`FeatureHistory`;
* backward ("replay"): the K modules run independently. Module k (0-based)
  recomputes its activations from the input it saw ``K - 1 - k`` iterations
  ago, chains the error gradient its upper neighbour sent during the previous
  iteration, updates its own weights, and posts the gradient with respect to
  its replayed input to the module below for use at the next iteration.

Replayed features with a negative stamp and the very first deltas are zero.
"""
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .network import module_backprop, module_forward, module_replay
from .optim import DivergenceError


class InvariantError(RuntimeError):
    """Internal bookkeeping violated (missing history entry, stamp mismatch, ...)."""


class FeatureHistory:
    """Ring buffer of ``(stamp, features)`` holding the last ``capacity`` inputs."""

    def __init__(self, capacity):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._buf = deque(maxlen=capacity)

    def push(self, stamp, features):
        if self._buf and stamp != self._buf[-1][0] + 1:
            raise InvariantError(f"history expected stamp {self._buf[-1][0] + 1}, got {stamp}")
        self._buf.append((stamp, features))

    def lookup(self, stamp):
        if self._buf:
            i = stamp - self._buf[0][0]
            if 0 <= i < len(self._buf):
                return self._buf[i][1]
        raise InvariantError(f"no stored feature with stamp {stamp} (have {self.stamps()})")

    def latest(self):
        return self._buf[-1][1]

    def stamps(self):
        return [s for s, _ in self._buf]

    def entries(self):
        return list(self._buf)

    def clear(self):
        self._buf.clear()

    def __len__(self):
        return len(self._buf)


class DeltaSlot:
    """Single-producer / single-consumer mailbox between two adjacent modules.

    The producer writes into the incoming side during iteration t; after the
    barrier :meth:`advance` makes it the pending value consumed at t + 1.
    """

    def __init__(self):
        self.pending = None
        self._incoming = None

    def put(self, stamp, delta):
        if self._incoming is not None:
            raise InvariantError("delta slot written twice in one iteration")
        self._incoming = (stamp, delta)

    def take(self):
        value, self.pending = self.pending, None
        return value

    def advance(self):
        if self._incoming is None:
            raise InvariantError("delta slot was not written this iteration")
        self.pending, self._incoming = self._incoming, None


class Trainer:
    """Common plumbing: owns the network, the optimizer and the iteration counter."""

    name = "base"

    def __init__(self, net, optimizer):
        self.net = net
        self.optimizer = optimizer
        self.iteration = 0
        self.last_grads = None
        self.backward_seconds = 0.0

    def step(self, x, y):
        raise NotImplementedError

    def gradient_blocks(self):
        """Per-module views into ``last_grads`` (a single block for BP)."""
        return [self.last_grads]

    def extra_state(self):
        return {}, {}

    def load_extra_state(self, meta, tensors):
        pass

    def stored_arrays(self):
        """Arrays retained between iterations, keyed by storage category."""
        return {}

    def close(self):
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class PipelinedTrainer(Trainer):
    """Shared two-phase scheduler for features replay and delayed-gradient training."""

    def __init__(self, net, part, optimizer, lockstep=True, max_workers=None):
        super().__init__(net, optimizer)
        if part.num_layers != len(net):
            raise ValueError("partition does not cover the network")
        self.part = part
        self.K = part.K
        self.slots = [DeltaSlot() for _ in range(self.K - 1)]
        self.param_slices = part.param_slices(net)
        self.lockstep = lockstep
        self._labels = None
        self._pool = None
        if not lockstep:
            self._pool = ThreadPoolExecutor(max_workers=max_workers or self.K,
                                            thread_name_prefix="module")
        self.last_module_grads = None

    def replay_stamp(self, k, t):
        return t + k - (self.K - 1)

    # subclass hooks
    def _play(self, k, t, h):
        raise NotImplementedError

    def _activations(self, k, stamp):
        raise NotImplementedError

    def forward(self, x, y):
        """Sequential forward pass; records what each module needs for its backward."""
        t = self.iteration
        h = x
        for k in range(self.K):
            h = self._play(k, t, h)
        self._labels = y
        loss = self.net.loss.forward(h, y)
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite loss at iteration {t}", iteration=t)
        return loss

    def _module_gradients(self, k, t):
        stamp = self.replay_stamp(k, t)
        acts = self._activations(k, stamp)
        if k == self.K - 1:
            delta = self.net.loss.backward(acts[-1], self._labels)
        else:
            msg = self.slots[k].take()
            if msg is None:
                if t != 0:
                    raise InvariantError(f"module {k} has no delta at iteration {t}")
                delta = np.zeros_like(acts[-1])
            else:
                if msg[0] != stamp:
                    raise InvariantError(f"module {k} at iteration {t}: delta stamp {msg[0]} "
                                         f"!= replay stamp {stamp}")
                delta = msg[1]
        grads, dx = module_backprop(self.net, self.part, k, acts, delta, need_input_grad=k > 0)
        if k > 0:
            self.slots[k - 1].put(stamp, dx)
        return grads

    def _module_task(self, k, t, apply_update):
        grads = self._module_gradients(k, t)
        if apply_update:
            self.optimizer.update(self.param_slices[k], grads, t, module=k)
        return grads

    def _run_modules(self, t, apply_update):
        start = time.perf_counter()
        if self._pool is None:
            results = [self._module_task(k, t, apply_update) for k in range(self.K)]
        else:
            futures = [self._pool.submit(self._module_task, k, t, apply_update)
                       for k in range(self.K)]
            errors = [f.exception() for f in futures]
            for err in errors:
                if err is not None:
                    raise err
            results = [f.result() for f in futures]
        # barrier: every module has finished iteration t
        for slot in self.slots:
            slot.advance()
        self.backward_seconds += time.perf_counter() - start
        self.last_module_grads = results
        self.last_grads = [g for grads in results for g in grads]
        return results

    def backward_step(self):
        """Compute every module's gradient for the current iteration without updating."""
        return self._run_modules(self.iteration, apply_update=False)

    def update(self, module_grads):
        t = self.iteration
        for k, grads in enumerate(module_grads):
            self.optimizer.update(self.param_slices[k], grads, t, module=k)
        self.iteration += 1

    def step(self, x, y):
        loss = self.forward(x, y)
        self._run_modules(self.iteration, apply_update=True)
        self.iteration += 1
        return loss

    def gradient_blocks(self):
        return self.last_module_grads

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def _slot_state(self):
        meta, tensors = {"delta_stamps": []}, {}
        for k, slot in enumerate(self.slots):
            if slot.pending is None:
                meta["delta_stamps"].append(None)
            else:
                meta["delta_stamps"].append(slot.pending[0])
                tensors[f"delta/{k}"] = slot.pending[1]
        return meta, tensors

    def _load_slot_state(self, meta, tensors):
        for k, slot in enumerate(self.slots):
            stamp = meta["delta_stamps"][k]
            slot.pending = None if stamp is None else (stamp, tensors[f"delta/{k}"])


class FRTrainer(PipelinedTrainer):
    """Features replay: module k keeps its last ``K - k`` inputs and recomputes from them.

    With ``reuse_top_activation`` the top module reuses the activations from the
    forward pass instead of recomputing them (its replay stamp is always the
    current iteration, so the result is identical).
    """

    name = "fr"

    def __init__(self, net, part, optimizer, lockstep=True, reuse_top_activation=False,
                 max_workers=None):
        super().__init__(net, part, optimizer, lockstep=lockstep, max_workers=max_workers)
        self.histories = [FeatureHistory(self.K - k) for k in range(self.K)]
        self.reuse_top_activation = reuse_top_activation
        self._top_acts = None

    def _play(self, k, t, h):
        self.histories[k].push(t, h)
        if k == self.K - 1 and self.reuse_top_activation:
            self._top_acts = module_replay(self.net, self.part, k, h)
            return self._top_acts[-1]
        return module_forward(self.net, self.part, k, h)

    def _activations(self, k, stamp):
        if k == self.K - 1 and self.reuse_top_activation:
            acts, self._top_acts = self._top_acts, None
            return acts
        if stamp < 0:
            x = np.zeros_like(self.histories[k].latest())
        else:
            x = self.histories[k].lookup(stamp)
        return module_replay(self.net, self.part, k, x)

    def extra_state(self):
        meta, tensors = self._slot_state()
        meta["history_stamps"] = [h.stamps() for h in self.histories]
        for k, hist in enumerate(self.histories):
            for stamp, feat in hist.entries():
                tensors[f"history/{k}/{stamp}"] = feat
        return meta, tensors

    def load_extra_state(self, meta, tensors):
        self._load_slot_state(meta, tensors)
        for k, stamps in enumerate(meta["history_stamps"]):
            self.histories[k].clear()
            for stamp in stamps:
                self.histories[k].push(stamp, tensors[f"history/{k}/{stamp}"])

    def stored_arrays(self):
        history = [f for h in self.histories for _, f in h.entries()]
        delta = [s.pending[1] for s in self.slots if s.pending is not None]
        return {"history": history, "delta": delta}

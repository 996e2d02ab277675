"""Features-replay training: decoupled, module-parallel backpropagation with
replayed input features, plus BP / DDG baselines and convergence diagnostics."""
from ._backend import BACKEND
from .baselines import BPTrainer, DDGTrainer
from .diagnostics import account_memory, convergence_report, estimate_sigma, grad_check
from .engine import DeltaSlot, FeatureHistory, FRTrainer, InvariantError
from .layers import Conv2d, Flatten, Linear, Loss, ReLU
from .network import (ModulePartition, Network, build_network, full_gradient, mlp_architecture,
                      module_backward, module_forward, partition)
from .optim import DivergenceError, Optimizer, StepSchedule
from .tensor import Rng, elementwise, matmul, randn

__version__ = "0.1.0"

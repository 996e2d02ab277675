"""Run configuration: a JSON document mirroring :class:`RunConfig` field for field."""
import json
from dataclasses import asdict, dataclass, field, fields

from .datasets import KINDS as DATASET_KINDS

TRAINERS = ("bp", "ddg", "fr")
PARTITION_MODES = ("param", "layer", "explicit")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    dataset: dict = field(default_factory=lambda: {"kind": "synthetic_gaussian_classes",
                                                   "params": {"n_samples": 1000, "dims": 20,
                                                              "classes": 4}})
    # layer list; see featreplay.network.build_network
    architecture: list = field(default_factory=lambda: [
        {"kind": "linear", "out": 64}, {"kind": "relu"},
        {"kind": "linear", "out": 64}, {"kind": "relu"},
        {"kind": "linear", "out": 4}])
    loss: str = "softmax_cross_entropy"
    trainer: str = "fr"
    k: int = 2
    partition: str = "param"
    boundaries: list | None = None
    optimizer: str = "sgd_momentum"
    momentum: float = 0.9
    weight_decay: float = 5e-4
    # schedule: {"kind": fixed|step_decay|inverse_t, "gamma0", "milestones", "factor", "a", "b"};
    # step_decay without milestones decays at 50% and 75% of the run
    schedule: dict = field(default_factory=lambda: {"kind": "step_decay", "gamma0": 0.01,
                                                    "factor": 0.1})
    batch_size: int = 128
    epochs: int = 1
    iterations: int | None = None
    seed: int = 0
    probe_every: int = 50
    probe_full_gradient: bool = False
    # batch the sigma reference gradient is taken on: "replay" uses, per module,
    # the batch that module's gradient was computed from; "current" uses this
    # iteration's batch for every module
    sigma_reference: str = "replay"
    checkpoint_every: int | None = None
    resume: str | None = None
    out_dir: str = "runs/default"
    lockstep: bool = True
    reuse_top_activation: bool = False

    def validate(self):
        if self.trainer not in TRAINERS:
            raise ConfigError(f"trainer must be one of {TRAINERS}, got {self.trainer!r}")
        if self.partition not in PARTITION_MODES:
            raise ConfigError(f"partition must be one of {PARTITION_MODES}")
        if self.partition == "explicit" and not self.boundaries:
            raise ConfigError("explicit partition needs boundaries")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be positive")
        if self.iterations is not None and self.iterations < 0:
            raise ConfigError("iterations must be non-negative")
        if self.probe_every < 0:
            raise ConfigError("probe_every must be >= 0 (0 disables probes)")
        if self.sigma_reference not in ("replay", "current"):
            raise ConfigError("sigma_reference must be 'replay' or 'current'")
        if self.dataset.get("kind") not in DATASET_KINDS:
            raise ConfigError(f"dataset kind must be one of {DATASET_KINDS}")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if not self.architecture:
            raise ConfigError("architecture must list at least one layer")
        return self

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    def replace(self, **changes):
        d = self.to_dict()
        d.update(changes)
        return type(self).from_dict(d)

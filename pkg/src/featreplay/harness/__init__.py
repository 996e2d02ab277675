from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig
from .datasets import BatchSampler, Dataset, DatasetSpec, load_dataset, read_idx, write_idx
from .metrics import COLUMNS, MetricsRecord, read_metrics
from .runner import compare, run

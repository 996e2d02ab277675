"""Run orchestration: config -> trained weights, metrics CSV, checkpoint, summary."""
import csv
import json
import logging
import os
import time
from dataclasses import dataclass

import numpy as np

from ..baselines import BPTrainer, DDGTrainer
from ..diagnostics import TheoryProbe, account_memory, estimate_sigma, flat
from ..engine import FRTrainer
from ..layers import Loss
from ..network import build_network, evaluate, full_gradient, partition
from ..optim import DivergenceError, Optimizer, StepSchedule
from .checkpoint import load_checkpoint, restore_trainer, save_checkpoint, trainer_checkpoint
from .config import ConfigError, RunConfig
from .datasets import BatchSampler, load_dataset
from .metrics import MetricsRecord, MetricsWriter, read_metrics

log = logging.getLogger(__name__)

METRICS_FILE = "metrics.csv"
CHECKPOINT_FILE = "checkpoint.bin"
SUMMARY_FILE = "summary.json"


@dataclass
class RunResult:
    exit_status: int
    out_dir: str
    summary: dict
    trainer: object = None


def build_schedule(config, total_iterations, steps_per_epoch):
    d = dict(config.schedule)
    if d.get("kind") == "step_decay" and not d.get("milestones"):
        if config.iterations is None:
            d["milestones"] = [round(config.epochs * f) * steps_per_epoch for f in (0.5, 0.75)]
        else:
            d["milestones"] = [round(total_iterations * f) for f in (0.5, 0.75)]
    try:
        return StepSchedule.from_dict(d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad schedule {config.schedule}: {e}") from e


def build_run(config):
    """Validate the config and construct (dataset, network, partition, trainer, sampler, schedule)."""
    config.validate()
    data = load_dataset(config.dataset)
    loss = Loss(config.loss, num_classes=data.num_classes)
    try:
        net = build_network(data.input_shape, config.architecture, loss, seed=config.seed)
        k = 1 if config.trainer == "bp" else config.k
        part = partition(net, K=k, mode=config.partition,
                         boundaries=config.boundaries if config.partition == "explicit" else None)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    sampler = BatchSampler(len(data.x_train), config.batch_size, config.seed)
    total = config.iterations if config.iterations is not None else config.epochs * sampler.steps_per_epoch
    schedule = build_schedule(config, total, sampler.steps_per_epoch)
    opt = Optimizer(net.params(), kind=config.optimizer, momentum=config.momentum,
                    weight_decay=config.weight_decay, schedule=schedule)
    if config.trainer == "bp":
        trainer = BPTrainer(net, opt)
    elif config.trainer == "fr":
        trainer = FRTrainer(net, part, opt, lockstep=config.lockstep,
                            reuse_top_activation=config.reuse_top_activation)
    else:
        trainer = DDGTrainer(net, part, opt, lockstep=config.lockstep)
    return data, net, part, trainer, sampler, schedule, total


def _reference_blocks(net, part, trainer, data, sampler, t, mode, current):
    """BP gradient at the current weights, per module, on the batch that module's
    gradient at iteration t is computed from (or on ``current`` for every module)."""
    slices = part.param_slices(net)
    if mode == "current" or not hasattr(trainer, "replay_stamp"):
        return current
    cache = {t: current}
    ref = list(current)
    for k, idx in enumerate(slices):
        stamp = max(trainer.replay_stamp(k, t), 0)
        if stamp not in cache:
            b = sampler.indices(stamp)
            cache[stamp] = full_gradient(net, data.x_train[b], data.y_train[b])[1]
        for i in idx:
            ref[i] = cache[stamp][i]
    return ref


def _truncate_metrics(path, start):
    """Drop rows at or after ``start`` (left behind by an interrupted run)."""
    if not os.path.exists(path):
        return False
    with open(path, encoding="utf-8", newline="") as f:
        header, *lines = f.readlines()
    keep = [ln for ln in lines if int(ln.split(",", 1)[0]) < start]
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(header)
        f.writelines(keep)
    return True


def run(config, stop_after=None):
    """Train per ``config``; writes metrics.csv, checkpoint.bin and summary.json to ``out_dir``.

    ``stop_after`` ends the run early at that iteration (with a checkpoint), as
    if it had been interrupted.
    """
    if isinstance(config, dict):
        config = RunConfig.from_dict(config)
    data, net, part, trainer, sampler, schedule, total = build_run(config)
    os.makedirs(config.out_dir, exist_ok=True)
    with open(os.path.join(config.out_dir, "config.json"), "w", encoding="utf-8") as f:
        f.write(config.to_json())

    metrics_path = os.path.join(config.out_dir, METRICS_FILE)
    ckpt_path = os.path.join(config.out_dir, CHECKPOINT_FILE)
    append = False
    if config.resume:
        meta, tensors = load_checkpoint(config.resume)
        restore_trainer(trainer, meta, tensors)
        append = _truncate_metrics(metrics_path, trainer.iteration)

    algo = "bp" if config.trainer == "bp" else config.trainer
    account = account_memory(net, part, algo, config.batch_size)
    feature_floats = account.activation_floats + account.history_floats + account.delta_floats
    probe = TheoryProbe()
    end = total if stop_after is None else min(total, stop_after)
    summary = {"trainer": config.trainer, "k": part.K, "boundaries": list(part.boundaries),
               "iterations_planned": total, "status": "ok"}
    best_acc, last_eval = None, (None, None)
    sigmas, losses = [], []
    run_start = time.perf_counter()
    writer = MetricsWriter(metrics_path, append=append)
    try:
        for t in range(trainer.iteration, end):
            idx = sampler.indices(t)
            xb, yb = data.x_train[idx], data.y_train[idx]
            probing = config.probe_every and t % config.probe_every == 0
            if probing:
                true_grads = full_gradient(net, xb, yb)[1]
                sigma_ref = _reference_blocks(net, part, trainer, data, sampler, t,
                                              config.sigma_reference, true_grads)
                if config.probe_full_gradient:
                    norm_grads = full_gradient(net, data.x_train, data.y_train)[1]
                else:
                    norm_grads = true_grads
                probe.add_point(net.params(), norm_grads)
            tic = time.perf_counter()
            loss = trainer.step(xb, yb)
            wall_ms = (time.perf_counter() - tic) * 1e3
            losses.append(loss)
            gamma = schedule(t)
            probe.add_step(gamma)
            rec = MetricsRecord(iteration=t, epoch=sampler.epoch_of(t), wall_ms=wall_ms,
                                train_loss=float(loss), step_size=float(gamma),
                                activation_floats=feature_floats)
            if probing:
                blocks = trainer.gradient_blocks()
                slices = part.param_slices(net) if len(blocks) > 1 else [range(len(true_grads))]
                est = estimate_sigma(blocks, sigma_ref, slices, iteration=t)
                rec.sigma_global = est.global_
                rec.sigma_per_module = est.per_module
                rec.grad_norm = float(np.linalg.norm(flat(norm_grads)))
                probe.add_direction(trainer.last_grads)
                sigmas.append(est.global_)
            if (t + 1) % sampler.steps_per_epoch == 0 or t + 1 == total:
                ev_loss, ev_acc = evaluate(net, data.x_eval, data.y_eval)
                rec.eval_loss, rec.eval_accuracy = float(ev_loss), ev_acc
                last_eval = (ev_loss, ev_acc)
                if ev_acc is not None:
                    best_acc = ev_acc if best_acc is None else max(best_acc, ev_acc)
            writer.write(rec)
            if config.checkpoint_every and trainer.iteration % config.checkpoint_every == 0:
                save_checkpoint(ckpt_path, *trainer_checkpoint(trainer, {"seed": config.seed}))
    except DivergenceError as e:
        summary["status"] = "diverged"
        summary["diagnostic"] = str(e)
        log.error("run diverged: %s", e)
    finally:
        writer.close()
        trainer.close()

    if summary["status"] == "ok":
        save_checkpoint(ckpt_path, *trainer_checkpoint(trainer, {"seed": config.seed}))
    defined = [s for s in sigmas if s is not None]
    summary.update({
        "iterations_completed": trainer.iteration,
        "final_train_loss": losses[-1] if losses else None,
        "final_eval_loss": last_eval[0],
        "final_eval_accuracy": last_eval[1],
        "best_eval_accuracy": best_acc,
        "total_wall_s": time.perf_counter() - run_start,
        "backward_seconds": trainer.backward_seconds,
        "peak_accounted_floats": feature_floats,
        "memory": {"algorithm": account.algorithm, "activation_floats": account.activation_floats,
                   "history_floats": account.history_floats, "delta_floats": account.delta_floats,
                   "weight_floats": account.weight_floats},
        "theory": {"lipschitz_estimate": probe.lipschitz, "second_moment_estimate": probe.second_moment,
                   "gamma_sum": probe.gamma_sum,
                   "sigma_min": min(defined) if defined else None},
    })
    with open(os.path.join(config.out_dir, SUMMARY_FILE), "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2)
    return RunResult(0 if summary["status"] == "ok" else 2, config.out_dir, summary, trainer)


COMPARE_AXES = {"trainer", "k", "partition", "boundaries", "schedule", "lockstep", "out_dir",
                "reuse_top_activation", "resume"}


def run_label(config):
    if config.trainer == "bp":
        return "bp"
    mode = "lockstep" if config.lockstep else "parallel"
    return f"{config.trainer}-K{config.k}-{mode}"


def compare(configs, out_dir):
    """Run configs that differ only along the comparison axes; returns per-epoch rows.

    Writes ``comparison.csv`` (one row per run and epoch) and
    ``comparison.json`` (the rows plus per-run summaries and any
    lockstep/parallel wall-time ratios).
    """
    configs = [RunConfig.from_dict(c) if isinstance(c, dict) else c for c in configs]
    if not configs:
        raise ConfigError("nothing to compare")
    base = {k: v for k, v in configs[0].to_dict().items() if k not in COMPARE_AXES}
    for c in configs[1:]:
        other = {k: v for k, v in c.to_dict().items() if k not in COMPARE_AXES}
        diff = sorted(k for k in base if base[k] != other[k])
        if diff:
            raise ConfigError(f"incompatible axes: configs also differ in {diff}")
    os.makedirs(out_dir, exist_ok=True)
    rows, runs = [], []
    labels = []
    for i, c in enumerate(configs):
        label = run_label(c)
        labels.append(label)
        c = c.replace(out_dir=os.path.join(out_dir, f"{i:02d}-{label}"))
        result = run(c)
        runs.append({"label": label, "out_dir": result.out_dir, **result.summary})
        by_epoch = {}
        for r in read_metrics(os.path.join(result.out_dir, METRICS_FILE)):
            by_epoch.setdefault(r["epoch"], []).append(r)
        for epoch, ers in sorted(by_epoch.items()):
            last = ers[-1]
            rows.append({
                "run": label, "epoch": epoch,
                "train_loss": float(np.mean([float(r["train_loss"]) for r in ers])),
                "eval_loss": float(last["eval_loss"]) if last["eval_loss"] else None,
                "eval_accuracy": float(last["eval_accuracy"]) if last["eval_accuracy"] else None,
                "activation_floats": int(last["activation_floats"]),
                "wall_s": sum(float(r["wall_ms"]) for r in ers) / 1e3,
            })
    ratios = {}
    for i, a in enumerate(configs):
        for j, b in enumerate(configs):
            if a.lockstep and not b.lockstep and a.replace(lockstep=False, out_dir="") == b.replace(out_dir=""):
                ratios[f"{labels[i]} / {labels[j]}"] = (runs[i]["backward_seconds"] /
                                                        max(runs[j]["backward_seconds"], 1e-12))
    with open(os.path.join(out_dir, "comparison.csv"), "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=["run", "epoch", "train_loss", "eval_loss", "eval_accuracy",
                                          "activation_floats", "wall_s"])
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if v is None else v) for k, v in r.items()})
    report = {"rows": rows, "runs": runs, "backward_time_ratios": ratios}
    with open(os.path.join(out_dir, "comparison.json"), "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2)
    return report

"""Sequential task training with projected updates, plus ACC/BWT/FWT metrics."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from . import gpm, optim
from .errors import ConfigError, DimensionError, NumericalError

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    patience: int = 6
    min_delta: float = 1e-3
    seed: int = 0
    scale: gpm.ScaleConfig = field(default_factory=gpm.ScaleConfig)
    optimizer: str = "sgd"
    lr: float = 0.1
    lr_decay: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    n_s: int = 125
    max_patch_cols: int = 1000
    restore_best: bool = True

    def __post_init__(self):
        for name in ("epochs", "batch_size", "patience", "n_s", "max_patch_cols"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.optimizer not in optim.KINDS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.lr <= 0 or self.lr_decay <= 0:
            raise ConfigError("learning rate and decay must be positive")


class ContinualResult(NamedTuple):
    net: object
    memory: gpm.BasisMemory
    accuracy: np.ndarray
    lambda_history: list
    memory_history: list
    reports: list


def seed_streams(seed: int) -> dict:
    """Independent generators for each consumer of randomness, derived from one seed."""
    names = ("init", "data", "shuffle", "memory")
    return dict(zip(names, (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(len(names)))))


def accuracy(net, x, y, task_id: int, batch: int = 512) -> float:
    if len(y) == 0:
        return float("nan")
    correct = 0
    for i in range(0, len(y), batch):
        logits, _ = net.forward(x[i : i + batch], task_id)
        correct += int(np.sum(np.argmax(logits, axis=1) == y[i : i + batch]))
    return correct / len(y)


def train_task(net, task, memory, config: TrainConfig, rng, on_step=None, step_offset: int = 0):
    """Train one task until the epoch cap or early stop. Returns the step count."""
    state = optim.OptimizerState(config.optimizer,
                                 lr=config.lr * config.lr_decay ** (task.task_id - 1),
                                 beta1=config.beta1, beta2=config.beta2)
    apply_mem = memory if any(e.k for e in memory) else None
    n = len(task.y_train)
    best, best_weights, stale = -np.inf, None, 0
    steps = step_offset
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            grads = net.backward(task.x_train[idx], task.y_train[idx], task.task_id)
            if not np.isfinite(grads.loss):
                raise NumericalError(f"non-finite loss at task {task.task_id}, epoch {epoch + 1}")
            optim.step(net, grads, apply_mem, state)
            steps += 1
            if on_step is not None:
                on_step(steps, net)
        if len(task.y_val) == 0:
            continue
        val = accuracy(net, task.x_val, task.y_val, task.task_id)
        if val > best + config.min_delta:
            best, stale = val, 0
            best_weights = net.copy() if config.restore_best else None
        else:
            stale += 1
            if stale >= config.patience:
                log.debug("task %d: early stop after epoch %d", task.task_id, epoch + 1)
                break
    if best_weights is not None:
        net.weights, net.heads = best_weights.weights, best_weights.heads
    return steps


def train_continual(net, tasks, config: TrainConfig, on_step: Callable | None = None,
                    on_task_end: Callable | None = None) -> ContinualResult:
    """Learn ``tasks`` in order, updating the basis memory after each one.

    ``accuracy[i, j]`` is the test accuracy on task ``j + 1`` after training
    task ``i + 1``; entries above the diagonal are NaN. ``on_step(step, net)``
    is called after every optimizer step and ``on_task_end(task_id, net,
    memory)`` after each memory update.
    """
    if len(tasks) == 0:
        raise ConfigError("task sequence is empty")
    config.scale.validate_schedule(len(tasks), len(net.layers))
    streams = seed_streams(config.seed)
    n_tasks = len(tasks)
    acc = np.full((n_tasks, n_tasks), np.nan)
    memory = gpm.BasisMemory.for_network(net)
    lam_hist, mem_hist, reports = [], [], []
    steps = 0
    for i, task in enumerate(tasks):
        if task.task_id not in net.heads:
            net.add_head(task.task_id, task.class_count, streams["init"])
        steps = train_task(net, task, memory, config, streams["shuffle"], on_step, steps)
        for j in range(i + 1):
            acc[i, j] = accuracy(net, tasks[j].x_test, tasks[j].y_test, tasks[j].task_id)
        memory, rep = gpm.update_memory_after_task(net, task, memory, config.scale, task.task_id,
                                                   config.n_s, streams["memory"], config.max_patch_cols)
        reports.append(rep)
        lam_hist.append([e.lam.copy() for e in memory])
        mem_hist.append(memory.copy())
        if on_task_end is not None:
            on_task_end(task.task_id, net, memory)
        log.info("task %d: acc=%s bases=%s", task.task_id, np.round(acc[i, : i + 1], 4), memory.sizes)
    return ContinualResult(net, memory, acc, lam_hist, mem_hist, reports)


def _final_row(r):
    r = np.asarray(r, dtype=np.float64)
    if r.ndim != 2 or r.shape[0] != r.shape[1] or r.shape[0] == 0:
        raise DimensionError(f"accuracy matrix must be square and non-empty, got {r.shape}")
    if np.any(np.isnan(r[np.tril_indices(r.shape[0])])):
        raise ValueError("accuracy matrix lower triangle is incomplete")
    return r


def average_accuracy(r) -> float:
    r = _final_row(r)
    return float(np.mean(r[-1]))


def backward_transfer(r) -> float:
    r = _final_row(r)
    t = r.shape[0]
    if t < 2:
        raise ValueError("backward transfer needs at least two tasks")
    return float(np.mean(r[-1, :-1] - np.diag(r)[:-1]))


def compute_metrics(r):
    """``(ACC, BWT)`` of a filled accuracy matrix. Raises if there is only one task."""
    return average_accuracy(r), backward_transfer(r)


def compute_relative_fwt(r_a, r_b) -> float:
    """Mean difference of just-learned accuracies, method A minus method B."""
    r_a, r_b = np.asarray(r_a, dtype=np.float64), np.asarray(r_b, dtype=np.float64)
    if r_a.shape != r_b.shape or r_a.ndim != 2 or r_a.shape[0] != r_a.shape[1]:
        raise DimensionError(f"accuracy matrices differ in shape: {r_a.shape} vs {r_b.shape}")
    return float(np.mean(np.diag(r_a) - np.diag(r_b)))

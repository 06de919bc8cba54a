"""Optimizers that respect the basis memory.

Backbone updates go through :func:`sgp.gpm.project_gradient`; classifier
heads are always updated without projection.

``adam_gp`` projects Adam's output direction, so the applied step never has
a component along a fully protected basis. ``adam_preprojected`` feeds the
projected gradient into ordinary Adam; it is kept as a diagnostic because
the per-coordinate rescaling leaks the step back into protected directions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError
from .gpm import project_gradient

KINDS = ("sgd", "adam_gp", "adam_preprojected")


@dataclass
class OptimizerState:
    kind: str = "sgd"
    lr: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"optimizer kind must be one of {KINDS}, got {self.kind!r}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


def _check(net, grads):
    for w, g in zip(net.weights, grads.layers):
        if w.shape != g.shape:
            raise DimensionError(f"gradient {g.shape} does not match weight {w.shape}")
    if net.heads[grads.task_id].shape != grads.head.shape:
        raise DimensionError("head gradient shape mismatch")


def _project(g, mem, i):
    return g if mem is None else project_gradient(g, mem[i])


def sgd_step(net, grads, mem, state: OptimizerState):
    _check(net, grads)
    for i, g in enumerate(grads.layers):
        net.weights[i] -= state.lr * _project(g, mem, i)
    net.heads[grads.task_id] -= state.lr * grads.head
    state.t += 1
    return net


def _adam_direction(state, key, g):
    m = state.m.get(key)
    if m is None:
        m = state.m[key] = np.zeros_like(g)
        state.v[key] = np.zeros_like(g)
    v = state.v[key]
    m *= state.beta1
    m += (1 - state.beta1) * g
    v *= state.beta2
    v += (1 - state.beta2) * g * g
    m_hat = m / (1 - state.beta1**state.t)
    v_hat = v / (1 - state.beta2**state.t)
    return m_hat / (np.sqrt(v_hat) + state.eps)


def adam_gp_step(net, grads, mem, state: OptimizerState):
    """Adam on raw gradients; the resulting direction is projected before the update."""
    _check(net, grads)
    state.t += 1
    for i, g in enumerate(grads.layers):
        direction = _adam_direction(state, ("layer", i), g)
        net.weights[i] -= state.lr * _project(direction, mem, i)
    head_dir = _adam_direction(state, ("head", grads.task_id), grads.head)
    net.heads[grads.task_id] -= state.lr * head_dir
    return net


def adam_preprojected_step(net, grads, mem, state: OptimizerState):
    """Ordinary Adam on projected gradients (does not preserve the projection)."""
    _check(net, grads)
    state.t += 1
    for i, g in enumerate(grads.layers):
        direction = _adam_direction(state, ("layer", i), _project(g, mem, i))
        net.weights[i] -= state.lr * direction
    head_dir = _adam_direction(state, ("head", grads.task_id), grads.head)
    net.heads[grads.task_id] -= state.lr * head_dir
    return net


STEPS = {"sgd": sgd_step, "adam_gp": adam_gp_step, "adam_preprojected": adam_preprojected_step}


def step(net, grads, mem, state: OptimizerState):
    return STEPS[state.kind](net, grads, mem, state)

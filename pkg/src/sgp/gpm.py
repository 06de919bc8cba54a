"""Basis memory with per-basis importance and scaled gradient projection.

Each layer keeps an orthonormal basis ``m`` (``in_dim x k``) of the input
space its past tasks used, and an importance ``lam`` in ``[0, 1]`` per
basis. During training a layer gradient ``g`` (``out x in``) is replaced by
``g - g @ m @ diag(lam) @ m.T``: its component along basis ``i`` shrinks by
``1 - lam[i]`` and everything orthogonal to ``m`` passes through. With every
importance at 1 this is plain gradient projection memory (GPM).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import linalg
from .errors import ConfigError, ConsistencyError, DegenerateInputError, DimensionError, FormatError
from .linalg import RANK_TOL

MEMORY_VERSION = 1
MODES = ("sgp", "gpm", "finetune")


@dataclass
class ScaleConfig:
    """Projection hyperparameters.

    ``epsilon_th`` is either one threshold for all layers or one per layer.
    Task ``t`` (1-based) uses ``epsilon_th + (t - 1) * epsilon_increment``.
    ``finetune`` never builds memory, so training is unconstrained.
    """

    alpha: float = 10.0
    epsilon_th: float | Sequence[float] = 0.97
    epsilon_increment: float = 0.0
    mode: str = "sgp"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.alpha >= 0:
            raise ConfigError("alpha must be non-negative")
        eps = np.atleast_1d(np.asarray(self.epsilon_th, dtype=float))
        if np.any(eps <= 0) or np.any(eps >= 1):
            raise ConfigError("epsilon_th must lie in (0, 1)")
        if self.epsilon_increment < 0:
            raise ConfigError("epsilon_increment must be non-negative")

    def threshold(self, layer: int, task_id: int) -> float:
        eps = self.epsilon_th
        base = float(eps) if np.isscalar(eps) else float(eps[layer])
        return base + (task_id - 1) * self.epsilon_increment

    def validate_schedule(self, n_tasks: int, n_layers: int | None = None) -> None:
        eps = np.atleast_1d(np.asarray(self.epsilon_th, dtype=float))
        if n_layers is not None and eps.size not in (1, n_layers):
            raise ConfigError(f"{eps.size} thresholds given for {n_layers} layers")
        if np.any(eps + n_tasks * self.epsilon_increment >= 1):
            raise ConfigError("epsilon_th schedule reaches 1 within the task sequence")


@dataclass
class LayerMemory:
    m: np.ndarray
    lam: np.ndarray = field(default=None)

    def __post_init__(self):
        self.m = np.asarray(self.m, dtype=np.float64)
        if self.m.ndim != 2:
            raise DimensionError("basis matrix must be 2-D")
        if self.lam is None:
            self.lam = np.ones(self.m.shape[1])
        self.lam = np.asarray(self.lam, dtype=np.float64).reshape(-1)
        if self.lam.size != self.m.shape[1]:
            raise DimensionError(f"{self.lam.size} importances for {self.m.shape[1]} bases")
        if self.m.shape[1] > self.m.shape[0]:
            raise DimensionError("more bases than input dimensions")

    @classmethod
    def empty(cls, in_dim: int) -> "LayerMemory":
        return cls(np.zeros((in_dim, 0)), np.zeros(0))

    @property
    def k(self) -> int:
        return self.m.shape[1]

    @property
    def in_dim(self) -> int:
        return self.m.shape[0]

    def copy(self) -> "LayerMemory":
        return LayerMemory(self.m.copy(), self.lam.copy())


class BasisMemory(list):
    """One :class:`LayerMemory` per backbone layer."""

    @classmethod
    def for_network(cls, net) -> "BasisMemory":
        return cls(LayerMemory.empty(net.weights[i].shape[1]) for i in range(len(net.layers)))

    def copy(self) -> "BasisMemory":
        return BasisMemory(e.copy() for e in self)

    @property
    def sizes(self) -> list[int]:
        return [e.k for e in self]


# --- importance and projection -------------------------------------------


def compute_importance(sigma, alpha: float) -> np.ndarray:
    """Importance ``(alpha + 1) s / (alpha s + max(s))`` of each singular value.

    The largest singular value always maps to exactly 1.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.size == 0:
        raise DegenerateInputError("empty singular value vector")
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    top = sigma.max()
    if not top > 0:
        raise DegenerateInputError("all singular values are zero")
    lam = (alpha + 1.0) * sigma / (alpha * sigma + top)
    lam[sigma == top] = 1.0
    return np.clip(lam, 0.0, 1.0)


def project_gradient(grad, mem: LayerMemory) -> np.ndarray:
    grad = np.asarray(grad, dtype=np.float64)
    if grad.ndim != 2 or grad.shape[1] != mem.in_dim:
        raise DimensionError(f"gradient {grad.shape} does not match basis of dimension {mem.in_dim}")
    if mem.k == 0:
        return grad.copy()
    return grad - ((grad @ mem.m) * mem.lam) @ mem.m.T


def compute_residual(r, mem: LayerMemory):
    """Split ``r`` into the part outside ``span(m)`` and the part inside."""
    r = linalg.as_matrix(r, "representation")
    if r.shape[0] != mem.in_dim:
        raise DimensionError(f"representation rows {r.shape[0]} != basis dimension {mem.in_dim}")
    if mem.k == 0:
        return r.copy(), np.zeros_like(r)
    r_proj = mem.m @ (mem.m.T @ r)
    return r - r_proj, r_proj


def _zero_tol(r_full) -> float:
    return RANK_TOL * np.sqrt(linalg.frobenius_norm_sq(r_full))


def select_new_bases(residual, r_projected, r_full, epsilon_th: float):
    """Fewest leading residual singular vectors reaching the energy threshold.

    Returns ``(bases, sigma_hat)`` with ``bases`` of shape ``(in_dim, k_new)``.
    """
    residual = linalg.as_matrix(residual, "residual")
    total = linalg.frobenius_norm_sq(r_full)
    if not np.any(r_projected):
        if total == 0:
            return np.zeros((residual.shape[0], 0)), np.zeros(0)
        res = linalg.svd(residual)
        k = linalg.select_rank(res.sigma, epsilon_th)
        return res.u[:, :k].copy(), res.sigma[:k].copy()
    need = epsilon_th * total - linalg.frobenius_norm_sq(r_projected)
    if need <= 0:
        return np.zeros((residual.shape[0], 0)), np.zeros(0)
    res = linalg.svd(residual)
    nnz = int(np.count_nonzero(res.sigma > _zero_tol(r_full)))
    if nnz == 0:
        return np.zeros((residual.shape[0], 0)), np.zeros(0)
    energy = np.cumsum(res.sigma[:nnz] ** 2)
    k = min(int(np.searchsorted(energy, need)) + 1, nnz)
    return res.u[:, :k].copy(), res.sigma[:k].copy()


def projection_coefficients(m, u_tau_m, sigma=None, tol: float = 1e-6) -> np.ndarray:
    """Coefficients ``m.T @ u`` of each column of ``u`` in the basis ``m``.

    Columns whose singular value in ``sigma`` is nonzero must lie in
    ``span(m)``; violations raise :class:`ConsistencyError`.
    """
    m = np.asarray(m, dtype=np.float64)
    u = np.asarray(u_tau_m, dtype=np.float64)
    if m.shape[0] != u.shape[0]:
        raise DimensionError("basis and vectors live in different spaces")
    c = m.T @ u
    check = np.ones(u.shape[1], bool) if sigma is None else np.asarray(sigma) > 0
    if np.any(check):
        off = u[:, check] - m @ c[:, check]
        worst = np.linalg.norm(off, axis=0).max()
        if worst > tol:
            raise ConsistencyError(f"vector leaves the basis span by {worst:.3g}")
    return c


def surrogate_singular_values(c, sigma_tau_m) -> np.ndarray:
    """Transfer singular mass onto the stored bases: ``sqrt((c*c) @ sigma**2)``."""
    c = np.asarray(c, dtype=np.float64)
    s = np.asarray(sigma_tau_m, dtype=np.float64)
    if c.shape[1] != s.size:
        raise DimensionError(f"{c.shape[1]} coefficient columns for {s.size} singular values")
    return np.sqrt((c * c) @ (s * s))


def energy_check(sigma_prime, sigma_hat, r_full_norm_sq: float, epsilon_th: float):
    """Both sides of the retained-energy inequality, ``(captured, required)``."""
    captured = float(np.sum(np.square(sigma_prime)) + np.sum(np.square(sigma_hat)))
    return captured, epsilon_th * r_full_norm_sq


def assemble_singular_vector(sigma_prime, sigma_hat, r_full_norm_sq=None, epsilon_th=None) -> np.ndarray:
    """Concatenate old-basis surrogates and new singular values.

    When the representation energy and threshold are given, the result must
    capture at least that fraction of energy (up to a 1e-8 relative slack).
    """
    sigma_tau = np.concatenate([np.asarray(sigma_prime, float), np.asarray(sigma_hat, float)])
    if r_full_norm_sq is not None and epsilon_th is not None:
        captured, required = energy_check(sigma_prime, sigma_hat, r_full_norm_sq, epsilon_th)
        if captured < required - 1e-8 * r_full_norm_sq:
            raise ConsistencyError(
                f"retained energy {captured:.6g} below required {required:.6g}"
            )
    return sigma_tau


def accumulate_importance(mem: LayerMemory, lambda_tau, new_bases=None, drop_tol: float = 1e-8) -> LayerMemory:
    """Add this task's importance to the old bases (capped at 1), then append new bases.

    ``lambda_tau`` holds ``k`` entries for the stored bases followed by one
    per new basis. New bases are re-orthonormalized against the memory; a
    basis that collapses below ``drop_tol`` is dropped with its importance.
    """
    lambda_tau = np.asarray(lambda_tau, dtype=np.float64)
    k = mem.k
    n_new = 0 if new_bases is None else np.shape(new_bases)[1]
    if lambda_tau.size != k + n_new:
        raise DimensionError(f"expected {k + n_new} importances, got {lambda_tau.size}")
    lam = np.minimum(1.0, mem.lam + lambda_tau[:k])
    if n_new == 0:
        return LayerMemory(mem.m.copy(), lam)
    m, kept = linalg.gram_schmidt_extend(mem.m, np.asarray(new_bases, float), drop_tol)
    lam = np.concatenate([lam, lambda_tau[k:][kept]])
    return LayerMemory(m, lam)


# --- per-task update ------------------------------------------------------


class LayerUpdate(NamedTuple):
    """Diagnostics of one layer's memory update."""

    k_old: int
    k_new: int
    energy_total: float
    energy_in_memory: float
    captured: float
    required: float
    sigma_tau: np.ndarray


def update_layer(mem: LayerMemory, r, epsilon_th: float, alpha: float, mode: str = "sgp"):
    """Grow one layer's memory from representation ``r`` (``in_dim x n``)."""
    r = linalg.as_matrix(r, "representation")
    total = linalg.frobenius_norm_sq(r)
    if total == 0:
        return mem.copy(), LayerUpdate(mem.k, 0, 0.0, 0.0, 0.0, 0.0, np.zeros(0))
    residual, r_proj = compute_residual(r, mem)
    bases, sigma_hat = select_new_bases(residual, r_proj, r, epsilon_th)
    k = mem.k
    if k:
        res_m = linalg.svd(r_proj)
        kk = min(k, res_m.sigma.size)
        sigma_m = np.where(res_m.sigma[:kk] > _zero_tol(r), res_m.sigma[:kk], 0.0)
        c = projection_coefficients(mem.m, res_m.u[:, :kk], sigma_m)
        sigma_prime = surrogate_singular_values(c, sigma_m)
    else:
        sigma_prime = np.zeros(0)
    sigma_tau = assemble_singular_vector(sigma_prime, sigma_hat, total, epsilon_th)
    captured, required = energy_check(sigma_prime, sigma_hat, total, epsilon_th)
    if mode == "gpm":
        lambda_tau = np.ones(sigma_tau.size)
    else:
        lambda_tau = compute_importance(sigma_tau, alpha)
    new = accumulate_importance(mem, lambda_tau, bases)
    report = LayerUpdate(k, new.k - k, total, linalg.frobenius_norm_sq(r_proj),
                         captured, required, sigma_tau)
    return new, report


def sample_indices(n_available: int, n_s: int, rng) -> np.ndarray:
    rng = np.random.default_rng(rng)
    if n_s >= n_available:
        return np.arange(n_available)
    return np.sort(rng.choice(n_available, size=n_s, replace=False))


def update_memory_after_task(net, dataset, mem: BasisMemory, config: ScaleConfig, task_id: int,
                             n_s: int = 125, rng=None, max_cols: int | None = 1000):
    """Capture ``n_s`` training inputs of the finished task and update every layer.

    Returns ``(new_memory, reports)``; the input memory is left untouched.
    """
    from .net import build_representation_matrix

    if config.mode == "finetune":
        return mem.copy(), []
    idx = sample_indices(len(dataset.x_train), n_s, rng)
    _, acts = net.features(dataset.x_train[idx], capture=True)
    new_mem, reports = BasisMemory(), []
    for layer, entry in enumerate(mem):
        cols = max_cols if acts[layer].ndim == 3 else None
        r = build_representation_matrix(acts, layer, cols)
        eps = config.threshold(layer, task_id)
        updated, report = update_layer(entry, r, eps, config.alpha, config.mode)
        new_mem.append(updated)
        reports.append(report)
    return new_mem, reports


# --- persistence ----------------------------------------------------------
#
# Memory checkpoint (``.npz``):
#   format_version  int, currently 1
#   n_layers        int
#   m_<l>           float64 (in_dim, k) orthonormal bases of layer l
#   lambda_<l>      float64 (k,) importance of each basis


def save_memory(mem: BasisMemory, path) -> None:
    arrays = {"format_version": np.array(MEMORY_VERSION), "n_layers": np.array(len(mem))}
    for i, e in enumerate(mem):
        arrays[f"m_{i}"] = e.m
        arrays[f"lambda_{i}"] = e.lam
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_memory(path) -> BasisMemory:
    with np.load(Path(path), allow_pickle=False) as z:
        version = int(z["format_version"]) if "format_version" in z.files else None
        if version != MEMORY_VERSION:
            raise FormatError(f"unsupported memory checkpoint version {version} (expected {MEMORY_VERSION})")
        return BasisMemory(LayerMemory(z[f"m_{i}"], z[f"lambda_{i}"]) for i in range(int(z["n_layers"])))


def write_importance_csv(path, rows) -> None:
    """Write ``(task, layer, basis_index, lambda)`` rows with a header."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["task", "layer", "basis_index", "lambda"])
        for row in rows:
            w.writerow([row[0], row[1], row[2], repr(float(row[3]))])


def importance_rows(mem: BasisMemory, task_id: int, layer: int | None = None):
    layers = range(len(mem)) if layer is None else [layer]
    for l in layers:
        for i, v in enumerate(mem[l].lam):
            yield task_id, l, i, v

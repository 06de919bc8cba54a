"""Task sequences: seeded synthetic suites, IDX image files, split/permute builders."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
SEQUENCE_VERSION = 1


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TaskDataset:
    task_id: int
    class_count: int
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    def __post_init__(self):
        for name in ("x_train", "x_val", "x_test"):
            object.__setattr__(self, name, _frozen(getattr(self, name), np.float64))
        for name in ("y_train", "y_val", "y_test"):
            y = _frozen(getattr(self, name), np.int64)
            if y.size and (y.min() < 0 or y.max() >= self.class_count):
                raise ValueError(f"{name} has labels outside [0, {self.class_count})")
            object.__setattr__(self, name, y)
        for s in ("train", "val", "test"):
            if len(getattr(self, f"x_{s}")) != len(getattr(self, f"y_{s}")):
                raise ValueError(f"{s} inputs and labels differ in length")

    @property
    def sizes(self) -> dict:
        return {"train": len(self.y_train), "val": len(self.y_val), "test": len(self.y_test)}


@dataclass(frozen=True)
class TaskSequence:
    tasks: tuple
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        if [t.task_id for t in self.tasks] != list(range(1, len(self.tasks) + 1)):
            raise ValueError("task ids must run consecutively from 1")

    def __len__(self):
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def __getitem__(self, i):
        return self.tasks[i]


@dataclass(frozen=True)
class ImagePool:
    """Images scaled to [0, 1] with integer labels, before any task split."""

    images: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)


def _split(x, y, rng, val_fraction, test_fraction, task_id, class_count):
    """Stratified seeded split into train/val/test."""
    parts = {"train": [], "val": [], "test": []}
    for c in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == c))
        n_test = int(round(test_fraction * idx.size))
        n_val = int(round(val_fraction * (idx.size - n_test)))
        parts["test"].append(idx[:n_test])
        parts["val"].append(idx[n_test : n_test + n_val])
        parts["train"].append(idx[n_test + n_val :])
    sel = {k: np.sort(np.concatenate(v)) if v else np.zeros(0, int) for k, v in parts.items()}
    return TaskDataset(
        task_id, class_count,
        x[sel["train"]], y[sel["train"]],
        x[sel["val"]], y[sel["val"]],
        x[sel["test"]], y[sel["test"]],
    )


def gen_synthetic_split(seed: int, tasks: int = 5, classes_per_task: int = 2, dim: int = 64,
                        samples_per_class: int = 200, cluster_spread: float = 0.5, *,
                        shared_dim: int = 8, private_dim: int = 4, overlap: float = 0.5,
                        separation: float = 3.0, subspace_noise: bool = False,
                        val_fraction: float = 0.05, test_fraction: float = 0.2) -> TaskSequence:
    """Gaussian-cluster classification tasks with a controllable shared subspace.

    A random orthonormal frame of ``R^dim`` is cut into a block of
    ``shared_dim`` directions common to all tasks and ``private_dim``
    directions per task. A class mean puts a fraction ``overlap`` of its
    squared length in the shared block and the rest in the task's private
    block, scaled by ``separation``; within each block the classes of a task
    point along mutually orthogonal directions when the block is wide enough. Samples add
    isotropic noise of scale ``cluster_spread``; with ``subspace_noise`` the
    noise stays inside the task's own directions, so each task's inputs have
    rank ``shared_dim + private_dim``.
    """
    if min(tasks, classes_per_task, dim, samples_per_class) <= 0:
        raise ConfigError("synthetic suite parameters must be positive")
    if classes_per_task < 2:
        raise ConfigError("need at least two classes per task")
    if dim < tasks * classes_per_task:
        raise ConfigError(f"dim={dim} too small for {tasks} tasks x {classes_per_task} classes")
    if shared_dim + tasks * private_dim > dim:
        raise ConfigError("shared_dim + tasks * private_dim exceeds dim")
    if not 0 <= overlap <= 1:
        raise ConfigError("overlap must lie in [0, 1]")
    if cluster_spread < 0:
        raise ConfigError("cluster_spread must be non-negative")

    ss = np.random.SeedSequence(seed)
    frame_ss, *task_ss = ss.spawn(tasks + 1)
    q, _ = np.linalg.qr(np.random.default_rng(frame_ss).standard_normal((dim, dim)))
    shared = q[:, :shared_dim]

    out = []
    for t in range(tasks):
        rng = np.random.default_rng(task_ss[t])
        lo = shared_dim + t * private_dim
        private = q[:, lo : lo + private_dim]
        a_dirs = _directions(rng, shared_dim, classes_per_task)
        b_dirs = _directions(rng, private_dim, classes_per_task)
        xs, ys = [], []
        for c in range(classes_per_task):
            mean = separation * (np.sqrt(overlap) * (shared @ a_dirs[:, c])
                                 + np.sqrt(1 - overlap) * (private @ b_dirs[:, c]))
            if subspace_noise:
                span = np.hstack([shared, private])
                noise = rng.standard_normal((samples_per_class, span.shape[1])) @ span.T
            else:
                noise = rng.standard_normal((samples_per_class, dim))
            xs.append(mean + cluster_spread * noise)
            ys.append(np.full(samples_per_class, c))
        x, y = np.vstack(xs), np.concatenate(ys)
        out.append(_split(x, y, rng, val_fraction, test_fraction, t + 1, classes_per_task))

    params = dict(seed=seed, tasks=tasks, classes_per_task=classes_per_task, dim=dim,
                  samples_per_class=samples_per_class, cluster_spread=cluster_spread,
                  shared_dim=shared_dim, private_dim=private_dim, overlap=overlap,
                  separation=separation, subspace_noise=subspace_noise,
                  val_fraction=val_fraction, test_fraction=test_fraction)
    return TaskSequence(out, {"generator": "synthetic_split", "params": params})


def _directions(rng, d, n):
    """``n`` unit vectors in ``R^d``, mutually orthogonal when ``n <= d``."""
    g = rng.standard_normal((d, n))
    if d == 0:
        return g
    if n <= d:
        q, r = np.linalg.qr(g)
        return q * np.sign(np.diag(r))
    return g / np.linalg.norm(g, axis=0)


def gen_permuted(seed: int, base: TaskDataset, tasks: int) -> TaskSequence:
    """Repeat ``base`` as ``tasks`` tasks, task ``t > 1`` with its own pixel permutation."""
    n_pixels = int(np.prod(base.x_train.shape[1:]))
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(tasks)]
    out = []
    for t in range(tasks):
        perm = np.arange(n_pixels) if t == 0 else rngs[t].permutation(n_pixels)

        def apply(x, perm=perm):
            return x.reshape(len(x), -1)[:, perm].reshape(x.shape)

        out.append(TaskDataset(t + 1, base.class_count,
                               apply(base.x_train), base.y_train,
                               apply(base.x_val), base.y_val,
                               apply(base.x_test), base.y_test))
    return TaskSequence(out, {"generator": "permuted", "params": {"seed": seed, "tasks": tasks}})


# --- IDX ------------------------------------------------------------------


def _read_idx(path, expected_magic, rank):
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise FormatError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", data[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: bad magic number 0x{magic:08x}, expected 0x{expected_magic:08x}")
    header = 4 + 4 * rank
    if len(data) < header:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{rank}I", data[4:header])
    n = int(np.prod(dims))
    if len(data) < header + n:
        raise FormatError(f"{path}: truncated data, expected {n} bytes, found {len(data) - header}")
    if len(data) > header + n:
        raise FormatError(f"{path}: {len(data) - header - n} trailing bytes")
    return np.frombuffer(data, dtype=np.uint8, count=n, offset=header).reshape(dims)


def load_idx(images_path, labels_path) -> ImagePool:
    """Read an unsigned-byte IDX image file (rank 3) and its label file (rank 1)."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels")
    return ImagePool(_frozen(images / 255.0, np.float64), _frozen(labels, np.int64))


def write_idx(path, array) -> None:
    """Write a uint8 array of rank 1 or 3 as an IDX file."""
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise ValueError("IDX writer only handles uint8 data")
    magic = {1: IDX_LABELS_MAGIC, 3: IDX_IMAGES_MAGIC}.get(array.ndim)
    if magic is None:
        raise ValueError("IDX writer handles rank 1 (labels) or rank 3 (images)")
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(f">{array.ndim}I", *array.shape))
        f.write(np.ascontiguousarray(array).tobytes())


def split_by_class(pool: ImagePool, classes_per_task: int, seed: int = 0,
                   val_fraction: float = 0.05, test_fraction: float = 0.2,
                   add_channel: bool = True) -> TaskSequence:
    """Consecutive class blocks become tasks; labels are renumbered from 0 per task."""
    labels = np.asarray(pool.labels)
    if labels.size == 0:
        raise ConfigError("cannot split an empty pool")
    classes = np.unique(labels)
    if not np.array_equal(classes, np.arange(classes[0], classes[0] + classes.size)):
        raise ConfigError("pool labels must cover a contiguous range")
    if classes_per_task <= 0 or classes.size % classes_per_task:
        raise ConfigError(f"{classes.size} classes cannot be split into blocks of {classes_per_task}")
    x = np.asarray(pool.images)
    if add_channel and x.ndim == 3:
        x = x[:, None]
    n_tasks = classes.size // classes_per_task
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n_tasks)]
    out = []
    for t in range(n_tasks):
        lo = classes[0] + t * classes_per_task
        sel = np.flatnonzero((labels >= lo) & (labels < lo + classes_per_task))
        out.append(_split(x[sel], labels[sel] - lo, rngs[t], val_fraction, test_fraction,
                          t + 1, classes_per_task))
    return TaskSequence(out, {"generator": "split_by_class",
                              "params": {"classes_per_task": classes_per_task, "seed": seed}})


# --- sequence dump ----------------------------------------------------------
#
# ``.npz`` with ``format_version``, ``provenance`` (JSON), ``n_tasks`` and per
# task ``t<i>_class_count`` plus ``t<i>_{x,y}_{train,val,test}``.


def save_sequence(seq: TaskSequence, path) -> None:
    arrays = {"format_version": np.array(SEQUENCE_VERSION),
              "provenance": np.array(json.dumps(seq.provenance, sort_keys=True)),
              "n_tasks": np.array(len(seq))}
    for t in seq:
        p = f"t{t.task_id}_"
        arrays[p + "class_count"] = np.array(t.class_count)
        for s in ("train", "val", "test"):
            arrays[f"{p}x_{s}"] = t.__getattribute__(f"x_{s}")
            arrays[f"{p}y_{s}"] = t.__getattribute__(f"y_{s}")
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_sequence(path) -> TaskSequence:
    with np.load(Path(path), allow_pickle=False) as z:
        version = int(z["format_version"]) if "format_version" in z.files else None
        if version != SEQUENCE_VERSION:
            raise FormatError(f"unsupported sequence version {version}")
        tasks = []
        for i in range(1, int(z["n_tasks"]) + 1):
            p = f"t{i}_"
            tasks.append(TaskDataset(i, int(z[p + "class_count"]),
                                     *(z[f"{p}{a}_{s}"] for s in ("train", "val", "test") for a in ("x", "y"))))
        return TaskSequence(tasks, json.loads(str(z["provenance"])))

"""Command line runner: ``sgp run``, ``sgp inspect-memory``, ``sgp gen-data``.

Experiments are described by an INI-style file of flat ``key = value``
sections (values are Python/TOML-like literals)::

    [data]
    generator = synthetic        # synthetic | idx_split | idx_permuted | file
    tasks = 5

    [network]
    hidden = 64, 64

    [train]
    seed = 7
    epochs = 50

    [method]
    methods = sgp, gpm
    alpha = 10
    epsilon_th = 0.97

    [output]
    dir = runs/exp

Command line flags override the file; ``SGP_OUT_DIR`` overrides the
configured output directory but not ``--out``.
"""

from __future__ import annotations

import argparse
import ast
import configparser
import csv
import json
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import data as D
from . import gpm, trainer
from .errors import ConfigError, FormatError, NumericalError, SGPError
from .net import Conv2d, Dense, Network

log = logging.getLogger("sgp")

OUT_ENV = "SGP_OUT_DIR"
METHODS = ("sgp", "gpm", "finetune")

SYNTHETIC_KEYS = {"tasks", "classes_per_task", "dim", "samples_per_class", "cluster_spread",
                  "shared_dim", "private_dim", "overlap", "separation", "subspace_noise",
                  "val_fraction", "test_fraction"}
SCHEMA = {
    "data": SYNTHETIC_KEYS | {"generator", "images", "labels", "path"},
    "network": {"hidden", "conv", "activation"},
    "train": {"seed", "epochs", "batch_size", "patience", "min_delta", "optimizer", "lr",
              "lr_decay", "beta1", "beta2", "n_s", "max_patch_cols", "restore_best"},
    "method": {"methods", "alpha", "epsilon_th", "epsilon_increment"},
    "output": {"dir"},
}
GENERATORS = ("synthetic", "idx_split", "idx_permuted", "file")


@dataclass
class ExperimentConfig:
    data: dict = field(default_factory=lambda: {"generator": "synthetic"})
    network: dict = field(default_factory=lambda: {"hidden": (64, 64)})
    train: dict = field(default_factory=dict)
    method: dict = field(default_factory=lambda: {"methods": ("sgp", "gpm")})
    output: dict = field(default_factory=lambda: {"dir": "runs"})

    @property
    def seed(self) -> int:
        return int(self.train.get("seed", 0))

    @property
    def methods(self) -> tuple:
        m = self.method.get("methods", ("sgp",))
        return (m,) if isinstance(m, str) else tuple(m)

    @property
    def out_dir(self) -> Path:
        return Path(self.output.get("dir", "runs"))


def _literal(text: str):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        if "," in text:
            return tuple(_literal(p.strip()) for p in text.split(",") if p.strip())
        return text


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    parser.optionxform = str
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    cfg = ExperimentConfig()
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        values = {k: _literal(v) for k, v in parser[section].items()}
        unknown = set(values) - SCHEMA[section]
        if unknown:
            raise ConfigError(f"unknown keys in [{section}]: {', '.join(sorted(unknown))}")
        getattr(cfg, section).update(values)
    return cfg


def apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if getattr(args, "seed", None) is not None:
        cfg.train["seed"] = args.seed
    if getattr(args, "alpha", None) is not None:
        cfg.method["alpha"] = args.alpha
    if getattr(args, "epsilon_th", None) is not None:
        cfg.method["epsilon_th"] = args.epsilon_th
    if getattr(args, "method", None):
        cfg.method["methods"] = tuple(m.strip() for m in args.method.split(",") if m.strip())
    if getattr(args, "optimizer", None):
        cfg.train["optimizer"] = args.optimizer
    if os.environ.get(OUT_ENV):
        cfg.output["dir"] = os.environ[OUT_ENV]
    if getattr(args, "out", None):
        cfg.output["dir"] = args.out
    return cfg


def root_seeds(seed: int) -> dict:
    """Split the root seed into independent seeds for data, init and training."""
    names = ("data", "init", "train")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: int(c.generate_state(1)[0]) for n, c in zip(names, children)}


def build_tasks(cfg: ExperimentConfig) -> D.TaskSequence:
    d = dict(cfg.data)
    gen = d.pop("generator", "synthetic")
    if gen not in GENERATORS:
        raise ConfigError(f"unknown generator {gen!r}; choose from {GENERATORS}")
    seed = root_seeds(cfg.seed)["data"]
    try:
        if gen == "synthetic":
            extra = set(d) - SYNTHETIC_KEYS
            if extra:
                raise ConfigError(f"keys {sorted(extra)} do not apply to the synthetic generator")
            return D.gen_synthetic_split(seed, **d)
        if gen == "file":
            path = Path(d.get("path", ""))
            if not path.is_file():
                raise ConfigError(f"dataset file not found: {path}")
            return D.load_sequence(path)
        for key in ("images", "labels"):
            if not Path(str(d.get(key, ""))).is_file():
                raise ConfigError(f"dataset file not found: {d.get(key)}")
        pool = D.load_idx(d["images"], d["labels"])
        vf, tf = d.get("val_fraction", 0.05), d.get("test_fraction", 0.2)
        if gen == "idx_split":
            return D.split_by_class(pool, int(d.get("classes_per_task", 2)), seed, vf, tf)
        n_classes = int(np.unique(pool.labels).size)
        base = D.split_by_class(pool, n_classes, seed, vf, tf)[0]
        return D.gen_permuted(seed, base, int(d.get("tasks", 2)))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, SGPError):
            raise
        raise ConfigError(f"invalid [data] section: {exc}") from exc


def build_network(cfg: ExperimentConfig, tasks: D.TaskSequence) -> Network:
    n = cfg.network
    act = n.get("activation", "relu")
    shape = tasks[0].x_train.shape[1:]
    layers = []
    convs = n.get("conv", ())
    if convs and isinstance(convs, str):
        convs = (convs,)
    if convs:
        if len(shape) != 3:
            raise ConfigError("convolution layers need (C, H, W) image inputs")
        c, h, w = shape
        for item in convs:
            out_ch, k, s = (int(v) for v in str(item).split(":"))
            spec = Conv2d(c, out_ch, (k, k), (h, w), s, act)
            layers.append(spec)
            c, (h, w) = out_ch, spec.output_hw
        size = c * h * w
    else:
        size = int(np.prod(shape))
    hidden = n.get("hidden", ())
    hidden = (hidden,) if isinstance(hidden, int) else tuple(hidden)
    for width in hidden:
        layers.append(Dense(size, int(width), act))
        size = int(width)
    if not layers:
        raise ConfigError("network needs at least one hidden layer")
    return Network(layers, rng=root_seeds(cfg.seed)["init"])


def build_train_config(cfg: ExperimentConfig, method: str) -> trainer.TrainConfig:
    t = dict(cfg.train)
    t["seed"] = root_seeds(cfg.seed)["train"]
    m = cfg.method
    eps = m.get("epsilon_th", 0.97)
    scale = gpm.ScaleConfig(alpha=float(m.get("alpha", 10.0)), epsilon_th=eps,
                            epsilon_increment=float(m.get("epsilon_increment", 0.0)), mode=method)
    try:
        return trainer.TrainConfig(scale=scale, **t)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def validate(cfg: ExperimentConfig):
    """Resolve everything that can fail before any training starts."""
    bad = [m for m in cfg.methods if m not in METHODS]
    if bad or not cfg.methods:
        raise ConfigError(f"unknown methods {bad}; choose from {METHODS}")
    tasks = build_tasks(cfg)
    net = build_network(cfg, tasks)
    configs = {m: build_train_config(cfg, m) for m in cfg.methods}
    for tc in configs.values():
        tc.scale.validate_schedule(len(tasks), len(net.layers))
    return tasks, net, configs


def _fmt(x) -> str:
    return "" if x is None or (isinstance(x, float) and np.isnan(x)) else repr(float(x))


def write_metrics_csv(path, acc) -> None:
    """Rows ``after_task, task_1 .. task_T``; cells above the diagonal stay empty."""
    t = acc.shape[0]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["after_task"] + [f"task_{j + 1}" for j in range(t)])
        for i in range(t):
            w.writerow([i + 1] + [_fmt(acc[i, j]) if j <= i else "" for j in range(t)])


def _metrics(acc):
    a = trainer.average_accuracy(acc)
    b = trainer.backward_transfer(acc) if acc.shape[0] > 1 else None
    return a, b


def run_method(cfg, method, tasks, net0, tconf, out_dir: Path):
    net = net0.copy()
    res = trainer.train_continual(net, tasks, tconf)
    acc, bwt = _metrics(res.accuracy)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{method}-", dir=out_dir.parent))
    try:
        write_metrics_csv(tmp / "metrics.csv", res.accuracy)
        for layer in range(len(net.layers)):
            rows = []
            for t, mem in enumerate(res.memory_history, start=1):
                rows.extend(gpm.importance_rows(mem, t, layer))
            gpm.write_importance_csv(tmp / f"importance_{layer}.csv", rows)
        for t, mem in enumerate(res.memory_history, start=1):
            gpm.save_memory(mem, tmp / f"memory_task{t}.npz")
        gpm.save_memory(res.memory, tmp / "memory.npz")
        net.save(tmp / "network.npz")
        summary = {
            "method": method, "acc": acc, "bwt": bwt, "seed": cfg.seed,
            "bases_per_layer": res.memory.sizes,
            "config": {k: _jsonable(v) for k, v in asdict(cfg).items()},
        }
        (tmp / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        if out_dir.exists():
            shutil.rmtree(out_dir)
        os.replace(tmp, out_dir)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return res


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (tuple, list)):
        return [_jsonable(x) for x in v]
    return v


def write_comparison(path, results: dict) -> None:
    names = list(results)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["method_a", "method_b", "acc_a", "acc_b", "bwt_a", "bwt_b", "delta_acc", "delta_fwt"])
        for i, a in enumerate(names):
            for b in names[i + 1 :]:
                ra, rb = results[a].accuracy, results[b].accuracy
                (acc_a, bwt_a), (acc_b, bwt_b) = _metrics(ra), _metrics(rb)
                w.writerow([a, b, _fmt(acc_a), _fmt(acc_b), _fmt(bwt_a), _fmt(bwt_b),
                            _fmt(acc_a - acc_b), _fmt(trainer.compute_relative_fwt(ra, rb))])


def run(cfg: ExperimentConfig) -> int:
    try:
        tasks, net0, configs = validate(cfg)
    except (SGPError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out = cfg.out_dir
    results = {}
    try:
        for method, tconf in configs.items():
            log.info("running %s", method)
            results[method] = run_method(cfg, method, tasks, net0, tconf, out / method)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    write_comparison(out / "comparison.csv", results)
    for m, r in results.items():
        acc, bwt = _metrics(r.accuracy)
        print(f"{m}: ACC={acc:.4f}" + (f" BWT={bwt:+.4f}" if bwt is not None else ""))
    return 0


def lambda_histogram(lam, bins: int = 10):
    counts, edges = np.histogram(np.clip(lam, 0, 1), bins=bins, range=(0.0, 1.0))
    return counts, edges


def inspect_memory(paths, csv_path=None, bins: int = 10, stream=None) -> list[dict]:
    """Per-layer basis count and share of fully protected bases for each checkpoint."""
    stream = stream or sys.stdout
    report, hist_rows = [], []
    for p in paths:
        mem = gpm.load_memory(p)
        for l, e in enumerate(mem):
            frac = float(np.mean(e.lam == 1.0)) if e.k else 0.0
            report.append({"checkpoint": str(p), "layer": l, "in_dim": e.in_dim, "bases": e.k,
                           "lambda_one": int(np.sum(e.lam == 1.0)), "fraction_lambda_one": frac})
            counts, edges = lambda_histogram(e.lam, bins)
            hist_rows.extend((str(p), l, edges[i], edges[i + 1], int(c)) for i, c in enumerate(counts))
    print("checkpoint,layer,in_dim,bases,lambda_one,fraction_lambda_one", file=stream)
    for r in report:
        print(f"{r['checkpoint']},{r['layer']},{r['in_dim']},{r['bases']},{r['lambda_one']},"
              f"{r['fraction_lambda_one']:.6f}", file=stream)
    if csv_path:
        with open(csv_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["checkpoint", "layer", "bin_lo", "bin_hi", "count"])
            for row in hist_rows:
                w.writerow([row[0], row[1], repr(float(row[2])), repr(float(row[3])), row[4]])
    return report


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sgp", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train every configured method on one task sequence")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--alpha", type=float)
    r.add_argument("--epsilon-th", type=float, dest="epsilon_th")
    r.add_argument("--method", help="comma separated subset of sgp,gpm,finetune")
    r.add_argument("--optimizer", choices=("sgd", "adam_gp", "adam_preprojected"))
    r.add_argument("--out")

    i = sub.add_parser("inspect-memory", help="summarize memory checkpoints")
    i.add_argument("checkpoints", nargs="+")
    i.add_argument("--csv", help="write a lambda histogram CSV here")
    i.add_argument("--bins", type=int, default=10)

    g = sub.add_parser("gen-data", help="materialize the configured task sequence")
    g.add_argument("--config", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True, help="destination .npz file")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "inspect-memory":
        try:
            inspect_memory(args.checkpoints, args.csv, args.bins)
        except (FormatError, OSError, KeyError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        return 0
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.command == "gen-data":
        if args.seed is not None:
            cfg.train["seed"] = args.seed
        try:
            seq = build_tasks(cfg)
        except (SGPError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        D.save_sequence(seq, args.out)
        return 0
    return run(apply_overrides(cfg, args))


if __name__ == "__main__":
    sys.exit(main())

"""Experiment harness: config files, multi-seed runs, CSV tables, SVG plots.

Config files are plain ``key = value`` lines (``#`` starts a comment);
`methods` and `seeds` take comma-separated lists.  Every run is fully
deterministic: rerunning the same config byte-reproduces the raw CSV.
"""

import argparse
import concurrent.futures
import os
import sys
from dataclasses import dataclass, field, replace

import numpy as np

from .bayes_mlp import NetworkSpec
from .continual import Method, TrainConfig, forgetting_measure, run_task_sequence
from .data import (
    IdxFormatError,
    load_idx,
    make_permuted_tasks,
    make_split_tasks,
    make_synthetic_tasks,
)
from .objectives import Hyperparams

BENCHMARKS = ("permuted_mnist", "split_mnist", "split_fashion", "synthetic")
SPLIT_PAIRS = [(0, 1), (2, 3), (4, 5), (6, 7), (8, 9)]

# synthetic benchmark shape (desk-scale testing substrate)
SYNTHETIC_INPUT_DIM = 20
SYNTHETIC_SEPARATION = 8.0
SYNTHETIC_N_PER_CLASS = 313  # ~500 training examples per task after the 80/20 split
SYNTHETIC_HIDDEN = [32]

ARCHITECTURES = {
    "permuted_mnist": ([100, 100], 10, True),
    "split_mnist": ([256, 256], 2, False),
    "split_fashion": ([150, 150, 150, 150], 2, False),
    "synthetic": (SYNTHETIC_HIDDEN, 2, False),
}


class ConfigError(ValueError):
    """Bad experiment config; message names the offending line."""


@dataclass
class ExperimentConfig:
    benchmark: str = ""
    methods: list = field(default_factory=list)
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    n_tasks: int = 5
    epochs: int = 100
    batch_size: int = 256
    learning_rate: float = 1e-3
    lam: float = 100.0
    k: float = 5.0
    fisher_samples: int = 5000
    coreset_size: int = 200
    eval_samples: int = 10
    mnist_images: str = ""
    mnist_labels: str = ""
    mnist_test_images: str = ""
    mnist_test_labels: str = ""
    fashion_images: str = ""
    fashion_labels: str = ""
    fashion_test_images: str = ""
    fashion_test_labels: str = ""
    out_dir: str = "results"

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            hp=Hyperparams(lam=self.lam, k=self.k, mc_eval_samples=self.eval_samples),
            fisher_samples=self.fisher_samples, coreset_size=self.coreset_size,
            seed=seed, eval_samples=self.eval_samples)


def _parse_int(raw, line_no):
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"line {line_no}: expected an integer, got '{raw}'")


def _parse_float(raw, line_no):
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"line {line_no}: expected a number, got '{raw}'")


def _parse_methods(raw, line_no):
    methods = []
    for name in (part.strip() for part in raw.split(",")):
        try:
            methods.append(Method(name))
        except ValueError:
            known = ", ".join(m.value for m in Method)
            raise ConfigError(f"line {line_no}: unknown method '{name}' "
                              f"(known: {known})")
    if not methods:
        raise ConfigError(f"line {line_no}: methods list is empty")
    return methods


def _parse_seeds(raw, line_no):
    try:
        seeds = [int(part.strip()) for part in raw.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"line {line_no}: seeds must be comma-separated integers")
    if not seeds:
        raise ConfigError(f"line {line_no}: seeds list is empty")
    return seeds


_INT_KEYS = {"n_tasks", "epochs", "batch_size", "fisher_samples",
             "coreset_size", "eval_samples"}
_FLOAT_KEYS = {"learning_rate", "lambda", "k"}
_PATH_KEYS = {"mnist_images", "mnist_labels", "mnist_test_images",
              "mnist_test_labels", "fashion_images", "fashion_labels",
              "fashion_test_images", "fashion_test_labels", "out_dir"}


def parse_config(path) -> ExperimentConfig:
    """Parse a key = value config file; unknown/duplicate keys are errors."""
    config = ExperimentConfig()
    seen = set()
    with open(path) as f:
        lines = f.readlines()
    for line_no, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"line {line_no}: expected 'key = value', got '{text}'")
        key, raw = (part.strip() for part in text.split("=", 1))
        if key in seen:
            raise ConfigError(f"line {line_no}: duplicate key '{key}'")
        seen.add(key)
        if key == "benchmark":
            if raw not in BENCHMARKS:
                raise ConfigError(f"line {line_no}: unknown benchmark '{raw}' "
                                  f"(known: {', '.join(BENCHMARKS)})")
            config.benchmark = raw
        elif key == "methods":
            config.methods = _parse_methods(raw, line_no)
        elif key == "seeds":
            config.seeds = _parse_seeds(raw, line_no)
        elif key in _INT_KEYS:
            setattr(config, key, _parse_int(raw, line_no))
        elif key in _FLOAT_KEYS:
            setattr(config, "lam" if key == "lambda" else key,
                    _parse_float(raw, line_no))
        elif key in _PATH_KEYS:
            setattr(config, key, raw)
        else:
            raise ConfigError(f"line {line_no}: unknown key '{key}'")
    if not config.benchmark:
        raise ConfigError("missing required key 'benchmark'")
    if not config.methods:
        raise ConfigError("missing required key 'methods'")
    if config.n_tasks < 1:
        raise ConfigError("n_tasks must be >= 1")
    if config.epochs < 1 or config.batch_size < 1:
        raise ConfigError("epochs and batch_size must be >= 1")
    if config.learning_rate <= 0:
        raise ConfigError("learning_rate must be > 0")
    return config


def _require_paths(config, keys):
    for key in keys:
        value = getattr(config, key)
        if not value:
            raise ConfigError(f"benchmark '{config.benchmark}' needs config key '{key}'")
        if not os.path.exists(value):
            raise FileNotFoundError(f"{key}: no such file '{value}'")


def build_stream(config: ExperimentConfig, seed: int):
    """Construct (TaskStream, NetworkSpec) for one run of the benchmark."""
    hidden, head_dim, single = ARCHITECTURES[config.benchmark]
    if config.benchmark == "synthetic":
        stream = make_synthetic_tasks(config.n_tasks, SYNTHETIC_N_PER_CLASS,
                                      SYNTHETIC_INPUT_DIM, SYNTHETIC_SEPARATION,
                                      seed)
    elif config.benchmark == "permuted_mnist":
        _require_paths(config, ("mnist_images", "mnist_labels",
                                "mnist_test_images", "mnist_test_labels"))
        base = (load_idx(config.mnist_images, config.mnist_labels),
                load_idx(config.mnist_test_images, config.mnist_test_labels))
        stream = make_permuted_tasks(base, config.n_tasks, seed)
    else:
        prefix = "mnist" if config.benchmark == "split_mnist" else "fashion"
        keys = tuple(f"{prefix}{suffix}" for suffix in
                     ("_images", "_labels", "_test_images", "_test_labels"))
        _require_paths(config, keys)
        base = (load_idx(getattr(config, keys[0]), getattr(config, keys[1])),
                load_idx(getattr(config, keys[2]), getattr(config, keys[3])))
        if config.n_tasks > len(SPLIT_PAIRS):
            raise ConfigError(f"split benchmarks support at most "
                              f"{len(SPLIT_PAIRS)} tasks")
        stream = make_split_tasks(base, SPLIT_PAIRS[:config.n_tasks])
    spec = NetworkSpec(input_dim=stream.input_dim, hidden_dims=list(hidden),
                       head_dim=head_dim, n_heads=1, single_head=single)
    return stream, spec


@dataclass
class ResultsTable:
    """Raw per-(method, seed, after_task, eval_task) accuracies plus aggregates."""

    rows: list        # (method: str, seed, after_task, eval_task, accuracy)
    aggregates: list  # (method, after_task, avg_acc_mean, avg_acc_std, forgetting_mean)


def _run_single(config: ExperimentConfig, method: Method, seed: int):
    stream, spec = build_stream(config, seed)
    matrix = run_task_sequence(method, config.train_config(seed), stream, spec)
    return [(method.value, seed, s + 1, t + 1, acc)
            for s, row in enumerate(matrix) for t, acc in enumerate(row)]


def _worker(args):
    config, method, seed = args
    return _run_single(config, method, seed)


def aggregate_rows(rows):
    """Per (method, after_task): mean/std over seeds of the running average
    accuracy, plus the mean forgetting measure (0 by convention after task 1)."""
    matrices = {}
    for method, seed, s, t, acc in rows:
        matrices.setdefault((method, seed), {})[(s, t)] = acc
    per_run = {}
    for (method, seed), cells in matrices.items():
        T = max(s for s, _ in cells)
        matrix = [[cells[(s, t)] for t in range(1, s + 1)] for s in range(1, T + 1)]
        per_run[(method, seed)] = matrix

    methods = sorted({m for m, _ in per_run})
    aggregates = []
    for method in methods:
        seeds = sorted(seed for m, seed in per_run if m == method)
        T = len(per_run[(method, seeds[0])])
        for s in range(1, T + 1):
            avgs = [float(np.mean(per_run[(method, seed)][s - 1]))
                    for seed in seeds]
            forgets = [forgetting_measure(per_run[(method, seed)][:s])
                       if s >= 2 else 0.0 for seed in seeds]
            std = float(np.std(avgs, ddof=1)) if len(avgs) > 1 else 0.0
            aggregates.append((method, s, float(np.mean(avgs)), std,
                               float(np.mean(forgets))))
    return aggregates


def run_experiment(config: ExperimentConfig, workers: int = 1) -> ResultsTable:
    """Run every (method, seed) pair; any failure aborts naming the run."""
    jobs = [(config, method, seed) for method in config.methods
            for seed in config.seeds]
    rows = []
    if workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            for (cfg, method, seed), result in zip(
                    jobs, pool.map(_worker, jobs)):
                rows.extend(result)
    else:
        for job in jobs:
            _, method, seed = job
            try:
                rows.extend(_worker(job))
            except ConfigError:
                raise  # misconfiguration, identical for every run
            except Exception as exc:
                raise RuntimeError(
                    f"run (method={method.value}, seed={seed}) failed: {exc}"
                ) from exc
    rows.sort(key=lambda r: (r[0], r[1], r[2], r[3]))
    return ResultsTable(rows=rows, aggregates=aggregate_rows(rows))


def write_results_csv(table: ResultsTable, path) -> None:
    """Raw rows, sorted, six decimal places."""
    with open(path, "w", newline="") as f:
        f.write("method,seed,after_task,eval_task,accuracy\n")
        for method, seed, s, t, acc in sorted(table.rows):
            f.write(f"{method},{seed},{s},{t},{acc:.6f}\n")


def write_aggregate_csv(table: ResultsTable, path) -> None:
    with open(path, "w", newline="") as f:
        f.write("method,after_task,avg_accuracy_mean,avg_accuracy_std,forgetting_mean\n")
        for method, s, mean, std, forget in sorted(table.aggregates):
            f.write(f"{method},{s},{mean:.6f},{std:.6f},{forget:.6f}\n")


def read_results_csv(path):
    """Inverse of write_results_csv."""
    rows = []
    with open(path) as f:
        header = f.readline().strip()
        if header != "method,seed,after_task,eval_task,accuracy":
            raise ValueError(f"{path}: unexpected header '{header}'")
        for line in f:
            line = line.strip()
            if not line:
                continue
            method, seed, s, t, acc = line.split(",")
            rows.append((method, int(seed), int(s), int(t), float(acc)))
    return rows


_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
            "#8c564b", "#17becf", "#7f7f7f"]


def render_accuracy_svg(table: ResultsTable, path) -> None:
    """Average-accuracy-vs-tasks-trained curves, one polyline per method."""
    if not table.aggregates:
        raise ValueError("nothing to plot: results table has no aggregate rows")
    series = {}
    for method, s, mean, _, _ in table.aggregates:
        series.setdefault(method, []).append((s, min(max(mean, 0.0), 1.0)))
    max_task = max(s for pts in series.values() for s, _ in pts)

    width, height = 640, 440
    left, right, top, bottom = 60, 170, 20, 50
    plot_w, plot_h = width - left - right, height - top - bottom

    def sx(s):
        return left if max_task == 1 else left + plot_w * (s - 1) / (max_task - 1)

    def sy(v):
        return top + plot_h * (1.0 - v)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + plot_h}" '
        'stroke="black"/>',
        f'<line x1="{left}" y1="{top + plot_h}" x2="{left + plot_w}" '
        f'y2="{top + plot_h}" stroke="black"/>',
    ]
    for i in range(6):  # y ticks at 0, 0.2, ..., 1.0
        v = i / 5
        y = sy(v)
        parts.append(f'<line x1="{left - 4}" y1="{y:.1f}" x2="{left}" '
                     f'y2="{y:.1f}" stroke="black"/>')
        parts.append(f'<text x="{left - 8}" y="{y + 4:.1f}" text-anchor="end" '
                     f'font-size="11">{v:.1f}</text>')
    for s in range(1, max_task + 1):
        x = sx(s)
        parts.append(f'<line x1="{x:.1f}" y1="{top + plot_h}" x2="{x:.1f}" '
                     f'y2="{top + plot_h + 4}" stroke="black"/>')
        parts.append(f'<text x="{x:.1f}" y="{top + plot_h + 18}" '
                     f'text-anchor="middle" font-size="11">{s}</text>')
    parts.append(f'<text x="{left + plot_w / 2:.1f}" y="{height - 12}" '
                 'text-anchor="middle" font-size="13">tasks trained</text>')
    parts.append(f'<text x="16" y="{top + plot_h / 2:.1f}" font-size="13" '
                 f'transform="rotate(-90 16 {top + plot_h / 2:.1f})" '
                 'text-anchor="middle">average accuracy</text>')

    for i, (method, pts) in enumerate(sorted(series.items())):
        color = _PALETTE[i % len(_PALETTE)]
        coords = " ".join(f"{sx(s):.1f},{sy(v):.1f}" for s, v in sorted(pts))
        parts.append(f'<polyline points="{coords}" fill="none" '
                     f'stroke="{color}" stroke-width="2"/>')
        ly = top + 16 + 18 * i
        lx = left + plot_w + 12
        parts.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 22}" '
                     f'y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{lx + 28}" y="{ly}" font-size="12">{method}</text>')
    parts.append("</svg>")
    with open(path, "w") as f:
        f.write("\n".join(parts) + "\n")


def _cmd_run(args) -> int:
    try:
        config = parse_config(args.config)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    if args.out:
        config = replace(config, out_dir=args.out)
    try:
        table = run_experiment(config, workers=args.workers)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (IdxFormatError, FileNotFoundError, RuntimeError, ValueError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 2
    os.makedirs(config.out_dir, exist_ok=True)
    raw_path = os.path.join(config.out_dir, "results.csv")
    agg_path = os.path.join(config.out_dir, "aggregate.csv")
    svg_path = os.path.join(config.out_dir, "accuracy.svg")
    write_results_csv(table, raw_path)
    write_aggregate_csv(table, agg_path)
    render_accuracy_svg(table, svg_path)
    print(f"wrote {raw_path}, {agg_path}, {svg_path}")
    return 0


def _cmd_plot(args) -> int:
    try:
        rows = read_results_csv(args.results)
        table = ResultsTable(rows=rows, aggregates=aggregate_rows(rows))
        render_accuracy_svg(table, args.out)
    except (OSError, ValueError) as exc:
        print(f"plot failed: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {args.out}")
    return 0


def _cmd_selftest(_args) -> int:
    from .verify import selftest

    return 0 if selftest() else 2


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="evclplus",
        description="Continual-learning benchmark harness (EVCL+ and baselines)")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run an experiment config")
    run_p.add_argument("--config", required=True)
    run_p.add_argument("--out", default=None, help="override out_dir")
    run_p.add_argument("--workers", type=int, default=1)
    run_p.set_defaults(fn=_cmd_run)

    plot_p = sub.add_parser("plot", help="re-plot a raw results CSV")
    plot_p.add_argument("--results", required=True)
    plot_p.add_argument("--out", required=True)
    plot_p.set_defaults(fn=_cmd_plot)

    self_p = sub.add_parser("selftest", help="run the numeric oracle suite")
    self_p.set_defaults(fn=_cmd_selftest)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())

"""Experiment configuration, run records, and the commands behind the CLI.

A config file is flat ``key = value`` text; ``#`` starts a comment.  Keys are
the :class:`TrainConfig` fields plus the experiment keys in
:data:`EXPERIMENT_DEFAULTS`.  Unknown keys are rejected.

A run record is a directory holding

* ``config.snapshot``: every resolved key, re-loadable with ``--config``;
* ``metrics.csv``: ``arm,seed,metric,t,value`` with one ``A`` row per task and
  one ``F`` row per (arm, seed) when at least two tasks ran;
* ``accuracy_<arm>_seed<seed>.csv``: the full ``a[t][i]`` matrix;
* ``timings.csv``: wall-clock seconds per phase (kept apart so that
  ``metrics.csv`` is byte-identical across re-runs);
* ``summary.csv`` and ``summary.txt``: mean and sample std over seeds.
"""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

from .cltrain import (PROFILES, ContinualModel, SequenceResult, TrainConfig, profile_config, run_naive_baseline,
                      run_sequence)
from .data import BlobSpec, TaskStream, load_mnist, permuted_stream, rotated_stream, split_stream, synthetic_stream
from .errors import ConfigError, ParameterError
from .kernels import KernelSpec
from .metrics import AccuracyMatrix, average_accuracy, average_forgetting, mean_and_std
from .numcore import RngState

STREAMS = ("permuted", "rotated", "split", "synthetic")

EXPERIMENT_DEFAULTS: dict[str, object] = {
    "profile": "paper",
    "stream": "permuted",
    "tasks": 20,
    "seeds": (1, 2, 3, 4, 5),
    "train_subset": None,
    "test_subset": None,
    "identity_first": False,
    "classes_per_task": 2,
    "data_root": None,
    "infer_sizes": (1, 2, 5, 10, 20, 40),
    "coreset_sizes": (1, 2, 5, 10, 20),
    "kernels": ("linear", "poly", "rbf"),
    "dump_per_class": 20,
    "dump_test": 1000,
    "save_checkpoints": False,
    "blob_dim": 8,
    "blob_separation": 0.5,
    "blob_sigma": 0.05,
    "blob_n_train": 200,
    "blob_n_test": 200,
}

# experiment-level defaults that a profile changes
EXPERIMENT_PROFILES: dict[str, dict] = {
    "paper": {},
    "desk": {"tasks": 5, "seeds": (1, 2, 3), "train_subset": 10000},
}

TRAIN_FIELDS = {f.name: f for f in fields(TrainConfig)}
_TRAIN_DEFAULTS = TrainConfig()


@dataclass(frozen=True)
class ExperimentConfig:
    train: TrainConfig
    profile: str = "paper"
    stream: str = "permuted"
    tasks: int = 20
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    train_subset: int | None = None
    test_subset: int | None = None
    identity_first: bool = False
    classes_per_task: int = 2
    data_root: str | None = None
    infer_sizes: tuple[int, ...] = (1, 2, 5, 10, 20, 40)
    coreset_sizes: tuple[int, ...] = (1, 2, 5, 10, 20)
    kernels: tuple[str, ...] = ("linear", "poly", "rbf")
    dump_per_class: int = 20
    dump_test: int = 1000
    save_checkpoints: bool = False
    blob_dim: int = 8
    blob_separation: float = 0.5
    blob_sigma: float = 0.05
    blob_n_train: int = 200
    blob_n_test: int = 200

    def __post_init__(self):
        if self.stream not in STREAMS:
            raise ConfigError(f"stream: expected one of {STREAMS}, got {self.stream!r}")
        if self.tasks < 1:
            raise ConfigError("tasks: must be at least 1")
        if not self.seeds:
            raise ConfigError("seeds: at least one seed is required")
        for name in ("infer_sizes", "coreset_sizes"):
            if not getattr(self, name) or min(getattr(self, name)) < 1:
                raise ConfigError(f"{name}: sizes must be positive")
        for k in self.kernels:
            try:
                KernelSpec.from_name(k)
            except ParameterError:
                raise ConfigError(f"kernels: unknown kernel {k!r}") from None

    def with_train(self, **overrides) -> "ExperimentConfig":
        return replace(self, train=replace(self.train, **overrides))

    def snapshot(self) -> str:
        """Config text that parses back to this exact configuration."""
        lines = ["# gkcl resolved configuration"]
        for key in EXPERIMENT_DEFAULTS:
            lines.append(f"{key} = {_format(getattr(self, key))}")
        for key, value in asdict(self.train).items():
            lines.append(f"{key} = {_format(value)}")
        return "\n".join(lines) + "\n"


# config text

def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ", ".join(_format(v) for v in value)
    return str(value)


def _parse_scalar(key: str, text: str, kind: type):
    try:
        if kind is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot read {text!r} as {kind.__name__}") from None


def _parse_value(key: str, text: str, template):
    """Parse ``text`` using the type of the default value ``template``."""
    text = text.strip()
    if key in _OPTIONAL_INT:
        return None if text.lower() == "none" else _parse_scalar(key, text, int)
    if key == "data_root":
        return None if text.lower() == "none" else text
    if isinstance(template, tuple):
        kind = type(template[0]) if template else int
        items = [t.strip() for t in text.replace(";", ",").split(",") if t.strip()]
        return tuple(_parse_scalar(key, t, kind) for t in items)
    return _parse_scalar(key, text, type(template))


_OPTIONAL_INT = ("train_subset", "test_subset")


def parse_config_text(text: str, source: str = "<config>") -> dict[str, object]:
    """Key-value pairs from config text, typed and checked against the schema."""
    out: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = parse_setting(key, value, where=f"{source}:{lineno}")
    return out


def parse_setting(key: str, value: str, where: str = "") -> object:
    prefix = f"{where}: " if where else ""
    if key in EXPERIMENT_DEFAULTS:
        template = EXPERIMENT_DEFAULTS[key]
    elif key in TRAIN_FIELDS:
        template = getattr(_TRAIN_DEFAULTS, key)
    else:
        raise ConfigError(f"{prefix}unknown config key {key!r}")
    try:
        return _parse_value(key, value, template)
    except ConfigError as err:
        raise ConfigError(f"{prefix}{err}") from None


def build_config(settings: Mapping[str, object]) -> ExperimentConfig:
    """Resolve profile defaults, then ``settings`` on top."""
    unknown = set(settings) - set(EXPERIMENT_DEFAULTS) - set(TRAIN_FIELDS)
    if unknown:
        raise ConfigError(f"unknown config key {sorted(unknown)[0]!r}")
    profile = str(settings.get("profile", EXPERIMENT_DEFAULTS["profile"]))
    if profile not in PROFILES:
        raise ConfigError(f"profile: expected one of {sorted(PROFILES)}, got {profile!r}")
    exp = {**EXPERIMENT_DEFAULTS, **EXPERIMENT_PROFILES[profile]}
    train = {}
    for key, value in settings.items():
        (train if key in TRAIN_FIELDS else exp)[key] = value
    exp["profile"] = profile
    try:
        train_cfg = profile_config(profile, **train)
        return ExperimentConfig(train=train_cfg, **exp)
    except ParameterError as err:
        raise ConfigError(str(err)) from None


def load_config(path) -> dict[str, object]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    return parse_config_text(text, str(path))


# streams

def make_stream(exp: ExperimentConfig, seed: int) -> TaskStream:
    if exp.stream == "synthetic":
        spec = BlobSpec(dim=exp.blob_dim, classes_per_task=exp.classes_per_task, separation=exp.blob_separation,
                        sigma=exp.blob_sigma, n_train=exp.blob_n_train, n_test=exp.blob_n_test)
        return synthetic_stream(spec, exp.tasks, seed)
    train, test = load_mnist(exp.data_root)
    sub = {"train_subset": exp.train_subset, "test_subset": exp.test_subset}
    if exp.stream == "permuted":
        return permuted_stream(train, test, exp.tasks, seed, identity_first=exp.identity_first, **sub)
    if exp.stream == "rotated":
        return rotated_stream(train, test, exp.tasks, seed, **sub)
    stream = split_stream(train, test, exp.classes_per_task, seed, **sub)
    if exp.tasks > len(stream):
        raise ConfigError(f"tasks: split stream has only {len(stream)} tasks")
    return stream.head(exp.tasks)


# run records

@dataclass
class ArmRun:
    """One arm on one seed."""

    arm: str
    seed: int
    matrix: AccuracyMatrix
    timings: list[dict[str, float]]


class RunRecord:
    """Collects arm runs and writes the record directory."""

    def __init__(self, out: Path, exp: ExperimentConfig, command: str):
        self.out = Path(out)
        self.exp = exp
        self.command = command
        self.runs: list[ArmRun] = []
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "config.snapshot").write_text(f"# command: {command}\n" + exp.snapshot(), encoding="utf-8")

    def add(self, run: ArmRun) -> None:
        self.runs.append(run)
        write_matrix_csv(self.out / f"accuracy_{run.arm}_seed{run.seed}.csv", run.matrix)

    def finish(self) -> list[dict]:
        write_metrics_csv(self.out / "metrics.csv", self.runs)
        write_timings_csv(self.out / "timings.csv", self.runs)
        summary = summarize(read_metrics_csv(self.out / "metrics.csv"))
        write_summary(self.out, summary)
        return summary


def metric_rows(runs: Iterable[ArmRun]) -> list[tuple[str, int, str, str, float]]:
    rows = []
    for run in runs:
        m = run.matrix
        for t in range(1, len(m.rows) + 1):
            rows.append((run.arm, run.seed, "A", str(t), average_accuracy(m, t)))
        if len(m.rows) >= 2:
            rows.append((run.arm, run.seed, "F", "", average_forgetting(m)))
    return rows


def _csv_text(header: list[str], rows: Iterable[Iterable]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow(["%.17g" % v if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def write_metrics_csv(path, runs: Iterable[ArmRun]) -> None:
    Path(path).write_text(_csv_text(["arm", "seed", "metric", "t", "value"], metric_rows(runs)), encoding="utf-8")


def read_metrics_csv(path) -> list[tuple[str, int, str, int | None, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [(r["arm"], int(r["seed"]), r["metric"], int(r["t"]) if r["t"] else None, float(r["value"]))
                for r in csv.DictReader(fh)]


def write_matrix_csv(path, m: AccuracyMatrix) -> None:
    rows = [(t, i, m.get(t, i)) for t in range(1, len(m.rows) + 1) for i in range(1, t + 1)]
    Path(path).write_text(_csv_text(["t", "i", "accuracy"], rows), encoding="utf-8")


def read_matrix_csv(path) -> AccuracyMatrix:
    rows: dict[int, dict[int, float]] = defaultdict(dict)
    with open(path, newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            rows[int(r["t"])][int(r["i"])] = float(r["accuracy"])
    return AccuracyMatrix.from_rows([[rows[t][i] for i in range(1, t + 1)] for t in range(1, len(rows) + 1)])


def write_timings_csv(path, runs: Iterable[ArmRun]) -> None:
    rows = []
    for run in runs:
        for t, phases in enumerate(run.timings, start=1):
            rows.extend((run.arm, run.seed, t, phase, float(sec)) for phase, sec in phases.items())
    Path(path).write_text(_csv_text(["arm", "seed", "t", "phase", "seconds"], rows), encoding="utf-8")


def summarize(records: Iterable[tuple[str, int, str, int | None, float]]) -> list[dict]:
    """Mean and sample std over seeds of the final ``A_T`` and of ``F`` per arm."""
    final: dict[tuple[str, int], tuple[int, float]] = {}
    forget: dict[str, dict[int, float]] = defaultdict(dict)
    for arm, seed, metric, t, value in records:
        if metric == "A":
            if (arm, seed) not in final or t >= final[(arm, seed)][0]:
                final[(arm, seed)] = (t, value)
        elif metric == "F":
            forget[arm][seed] = value
    arms = list(dict.fromkeys(arm for arm, _ in final))
    out = []
    for arm in arms:
        seeds = sorted(s for a, s in final if a == arm)
        T = final[(arm, seeds[0])][0]
        mean, std = mean_and_std([final[(arm, s)][1] for s in seeds])
        out.append({"arm": arm, "metric": f"A_{T}", "mean": mean, "std": std, "n": len(seeds)})
        if forget.get(arm):
            mean, std = mean_and_std([forget[arm][s] for s in sorted(forget[arm])])
            out.append({"arm": arm, "metric": "F", "mean": mean, "std": std, "n": len(forget[arm])})
    return out


def write_summary(out: Path, summary: list[dict]) -> None:
    rows = [(s["arm"], s["metric"], s["mean"], s["std"], s["n"]) for s in summary]
    (out / "summary.csv").write_text(_csv_text(["arm", "metric", "mean", "std", "n"], rows), encoding="utf-8")
    (out / "summary.txt").write_text(format_summary(summary), encoding="utf-8")


def format_summary(summary: list[dict]) -> str:
    lines = []
    for s in summary:
        scale = 100.0 if s["metric"].startswith("A") else 1.0
        unit = "%" if scale == 100.0 else ""
        lines.append(f"{s['arm']:<24} {s['metric']:<5} {s['mean'] * scale:8.3f}{unit} "
                     f"± {s['std'] * scale:.3f}{unit}  (n={s['n']})")
    return "\n".join(lines) + "\n"


# commands

Progress = Callable[[str], None]


def _arm_runs(seed: int, results: Mapping[str, SequenceResult]) -> list[ArmRun]:
    runs = []
    for name, res in results.items():
        timings = [r.timings for r in res.tasks]
        for size, matrix in res.matrices.items():
            arm = name if size == res.infer_size else f"{name}_infer{size}"
            runs.append(ArmRun(arm, seed, matrix, timings))
    return runs


def _sequence(exp: ExperimentConfig, record: RunRecord, arms: Mapping[str, Mapping] | None = None,
              eval_sizes: Mapping[str, tuple[int, ...]] | None = None, train: TrainConfig | None = None,
              progress: Progress | None = None, hook=None) -> None:
    train = train or exp.train
    for seed in exp.seeds:
        stream = make_stream(exp, seed)
        report = None
        if progress is not None:
            def report(t, rows, seed=seed):
                progress(f"seed {seed} task {t}: " + ", ".join(f"{a}={np.mean(r):.4f}" for a, r in rows.items()))
        results = run_sequence(stream, train, seed, arms=arms, eval_sizes=eval_sizes, progress=report)
        for run in _arm_runs(seed, results):
            record.add(run)
        if exp.save_checkpoints:
            for name, res in results.items():
                res.model.save(record.out / f"checkpoint_{name}_seed{seed}.npz", {"seed": seed})
        if hook is not None:
            hook(seed, stream, results)


def cmd_run(exp: ExperimentConfig, out, progress: Progress | None = None) -> list[dict]:
    record = RunRecord(out, exp, "run")
    _sequence(exp, record, progress=progress)
    return record.finish()


def cmd_ablate_coreset(exp: ExperimentConfig, out, progress: Progress | None = None) -> list[dict]:
    """Generative vs uniform coresets across sizes, and inference-size sweeps."""
    record = RunRecord(out, exp, "ablate-coreset")
    arms: dict[str, dict] = {}
    for n in exp.coreset_sizes:
        for source in ("generative", "uniform"):
            arms[f"{source}_c{n}"] = {"coreset_source": source, "coreset_train": n, "coreset_infer": n}
    train_n = exp.train.coreset_train
    sweep = f"generative_train{train_n}"
    arms[sweep] = {"coreset_source": "generative", "coreset_train": train_n, "coreset_infer": train_n}
    _sequence(exp, record, arms, {sweep: tuple(exp.infer_sizes)}, progress=progress)
    return record.finish()


def cmd_ablate_contrastive(exp: ExperimentConfig, out, progress: Progress | None = None) -> list[dict]:
    """Two arms per seed: with and without the contrastive regulariser."""
    record = RunRecord(out, exp, "ablate-contrastive")
    weight = exp.train.con_weight if exp.train.con_weight > 0 else 1.0
    for name, w in (("contrastive", weight), ("no_contrastive", 0.0)):
        _sequence(exp, record, {name: {}}, train=replace(exp.train, con_weight=w), progress=progress)
    return record.finish()


def cmd_ablate_kernel(exp: ExperimentConfig, out, progress: Progress | None = None) -> list[dict]:
    """Each kernel with ``f_gamma``, plus the linear kernel with ``f_gamma`` = identity."""
    record = RunRecord(out, exp, "ablate-kernel")
    arms = {k: {"kernel": k} for k in exp.kernels}
    arms["identity"] = {"kernel": "linear", "kernel_network": False}
    _sequence(exp, record, arms, progress=progress)
    return record.finish()


def cmd_baseline(exp: ExperimentConfig, out, progress: Progress | None = None) -> list[dict]:
    record = RunRecord(out, exp, "baseline")
    for seed in exp.seeds:
        res = run_naive_baseline(make_stream(exp, seed), exp.train, seed)
        if progress is not None:
            progress(f"seed {seed}: A={average_accuracy(res.matrix):.4f}")
        record.add(ArmRun("baseline", seed, res.matrix, [r.timings for r in res.tasks]))
    return record.finish()


def dump_embeddings(model: ContinualModel, stream: TaskStream, per_class: int, n_test: int,
                    seed: int) -> dict[str, np.ndarray]:
    """Encoder representations of generated coresets and test images, per task."""
    rng = RngState(seed).split("dump")
    out = {}
    for task in stream:
        core = model.gen.generate_coreset(task.task_id, task.classes, per_class, rng.split(("coreset", task.task_id)))
        out[f"coreset/{task.task_id}/h"] = model.hidden(core.x)
        out[f"coreset/{task.task_id}/y"] = core.y
        n = min(n_test, len(task.test))
        out[f"test/{task.task_id}/h"] = model.hidden(task.test.images[:n])
        out[f"test/{task.task_id}/y"] = np.asarray(task.classes)[task.test.labels[:n]]
    return out


def cmd_dump_embeddings(exp: ExperimentConfig, out, progress: Progress | None = None) -> list[dict]:
    record = RunRecord(out, exp, "dump-embeddings")

    def hook(seed, stream, results):
        arrays = dump_embeddings(results["gkcl"].model, stream, exp.dump_per_class, exp.dump_test, seed)
        np.savez(record.out / f"embeddings_seed{seed}.npz", **{k.replace("/", "_"): v for k, v in arrays.items()})

    _sequence(exp, record, progress=progress, hook=hook)
    return record.finish()


def cmd_report(paths: Iterable, out=None) -> list[dict]:
    """Aggregate the metrics.csv files of one or more run records."""
    records = []
    for p in paths:
        p = Path(p)
        records.extend(read_metrics_csv(p / "metrics.csv" if p.is_dir() else p))
    summary = summarize(records)
    if out is not None:
        Path(out).mkdir(parents=True, exist_ok=True)
        write_summary(Path(out), summary)
    return summary


COMMANDS = {
    "run": cmd_run,
    "ablate-coreset": cmd_ablate_coreset,
    "ablate-contrastive": cmd_ablate_contrastive,
    "ablate-kernel": cmd_ablate_kernel,
    "baseline": cmd_baseline,
    "dump-embeddings": cmd_dump_embeddings,
}

"""Per-task two-step training, evaluation, and full task-sequence runs.

Step 1 updates the generator (ELBO on current data and replay, plus the
contrastive term).  Step 2 decodes a labelled coreset for the new task, and
step 3 fits the shared kernel network ``f_gamma`` by cross-entropy through the
kernel ridge regression classifier.

The classifier side never influences the generator, so several classifier
*arms* (different coreset sizes, kernels, identity ``f_gamma``) can share one
generator run.  Each arm draws from its own named random stream, so an arm
gives the same numbers whether it runs alone or next to others.
"""

from __future__ import annotations

import copy
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Mapping

import numpy as np

from . import numcore as nc
from .contrastive import ConLossConfig, ProjectionParams, generator_objective
from .data import ImageDataset, Task, TaskStream
from .errors import ParameterError, ProtocolError
from .genmodel import GenBatch, GenConfig, GenerativeModel, load_checkpoint, save_checkpoint
from .kernels import KernelSpec, RidgeConfig, krr_logits, one_hot
from .metrics import AccuracyMatrix
from .numcore import Node, RngState

CORESET_SOURCES = ("generative", "uniform")


@dataclass(frozen=True)
class TrainConfig:
    # generator (step 1)
    hidden: tuple[int, ...] = (2000, 2000)
    latent: int = 100
    gen_lr: float = 1e-3
    batch_size: int = 512
    replay_size: int = 512
    iterations: int = 2000
    gate_fraction: float = 0.5
    con_weight: float = 1.0
    tau: float = 0.08
    proj_dim: int = 196
    # kernel classifier (steps 2 and 3)
    kernel: str = "linear"
    ridge: float = 1.0
    kernel_network: bool = True
    kernel_width: int = 512
    kernel_dropout: float = 0.1
    kernel_lr: float = 0.1
    kernel_momentum: float = 0.8
    kernel_lr_decay: float = 0.8
    kernel_batch: int = 10
    kernel_epochs: int = 1
    coreset_train: int = 20
    coreset_infer: int = 20
    coreset_source: str = "generative"
    feature_layer: int = -1

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        positive = ("latent", "batch_size", "iterations", "proj_dim", "kernel_width", "kernel_batch",
                    "kernel_epochs", "coreset_train", "coreset_infer")
        for name in positive:
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be positive")
        if self.replay_size < 0 or self.con_weight < 0:
            raise ParameterError("replay_size and con_weight must be non-negative")
        if not self.hidden or min(self.hidden) < 1:
            raise ParameterError("hidden widths must be positive")
        for name in ("gen_lr", "tau", "ridge", "kernel_lr"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be positive")
        if not 0.0 <= self.kernel_dropout < 1.0:
            raise ParameterError("kernel_dropout must lie in [0, 1)")
        if self.coreset_source not in CORESET_SOURCES:
            raise ParameterError(f"coreset_source must be one of {CORESET_SOURCES}")
        if not -len(self.hidden) <= self.feature_layer < len(self.hidden):
            raise ParameterError("feature_layer does not name an encoder hidden layer")
        KernelSpec.from_name(self.kernel)

    @property
    def kernel_spec(self) -> KernelSpec:
        return KernelSpec.from_name(self.kernel)

    @property
    def con(self) -> ConLossConfig:
        return ConLossConfig(self.tau, self.con_weight)

    def generator_part(self) -> dict:
        return {k: v for k, v in asdict(self).items() if k in GENERATOR_KEYS}


GENERATOR_KEYS = frozenset(("hidden", "latent", "gen_lr", "batch_size", "replay_size", "iterations",
                            "gate_fraction", "con_weight", "tau", "proj_dim"))
CLASSIFIER_KEYS = frozenset(f.name for f in fields(TrainConfig)) - GENERATOR_KEYS

PROFILES: dict[str, dict] = {
    "paper": {},
    # tuned on seed 1 of a 5-task PermutedMNIST stream; see the README
    "desk": {"hidden": (400, 400), "latent": 64, "batch_size": 128, "replay_size": 128, "iterations": 500,
             "con_weight": 0.3, "kernel_lr": 0.001},
}


def profile_config(name: str, **overrides) -> TrainConfig:
    if name not in PROFILES:
        raise ParameterError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
    return TrainConfig(**{**PROFILES[name], **overrides})


class KernelNetwork:
    """``f_gamma``: ReLU layers followed by dropout, or the identity map."""

    def __init__(self, in_dim: int, width: int, dropout: float, rng: RngState, identity: bool = False, layers: int = 2):
        self.identity = identity
        self.dropout = dropout
        self.params: list[Node] = []
        if identity:
            self.out_dim = in_dim
            return
        dims = [in_dim] + [width] * layers
        for i in range(layers):
            bound = 1.0 / math.sqrt(dims[i])
            r = rng.split(("layer", i))
            self.params.append(nc.parameter(r.split("w").uniform((dims[i], dims[i + 1]), -bound, bound)))
            self.params.append(nc.parameter(r.split("b").uniform((1, dims[i + 1]), -bound, bound)))
        self.out_dim = width

    def parameters(self) -> list[Node]:
        return list(self.params)

    def __call__(self, h, training: bool = False, rng: RngState | None = None):
        if self.identity:
            return h
        for i in range(0, len(self.params), 2):
            h = nc.relu(nc.add(nc.matmul(h, self.params[i]), self.params[i + 1]))
        return nc.dropout(h, self.dropout, rng, training)


@dataclass
class TaskResult:
    task_id: int
    elbo: float = float("nan")  # mean generator loss over the last tenth of step 1
    supcon: float = float("nan")
    fit_loss: float = float("nan")
    fit_accuracy: float = float("nan")  # training-set accuracy after step 3, training coreset, dropout off
    timings: dict[str, float] = field(default_factory=dict)


class ContinualModel:
    """Shared generator and projection plus one kernel classifier arm."""

    def __init__(self, gen: GenerativeModel, proj: ProjectionParams | None, config: TrainConfig, rng: RngState):
        self.gen = gen
        self.proj = proj
        self.config = config
        self.rng = rng
        in_dim = gen.config.hidden[config.feature_layer]
        self.kernel_net = KernelNetwork(in_dim, config.kernel_width, config.kernel_dropout, rng.split("kernel-init"),
                                        identity=not config.kernel_network)
        self.spec = config.kernel_spec
        self.ridge = RidgeConfig(config.ridge)
        self.registry: dict[int, tuple[int, ...]] = {}
        self.memory: dict[int, GenBatch] = {}  # only for the uniform-coreset ablation

    @classmethod
    def create(cls, input_dim: int, n_classes: int, scenario: str, config: TrainConfig, seed: int,
               arm: str = "gkcl") -> "ContinualModel":
        gen = GenerativeModel(GenConfig(input_dim, n_classes, scenario, config.hidden, config.latent,
                                        config.gate_fraction), seed)
        proj = ProjectionParams(config.hidden[-1], config.proj_dim, seed)
        return cls(gen, proj, config, RngState(seed).split(("arm", arm)))

    def hidden(self, x: np.ndarray) -> np.ndarray:
        with nc.no_grad():
            return self.gen.hidden(x, self.config.feature_layer).value

    def features(self, x, training: bool = False, rng: RngState | None = None):
        """Encoder representation (gradient blocked) passed through ``f_gamma``."""
        h = nc.detach(self.gen.hidden(nc.detach(x), self.config.feature_layer))
        return self.kernel_net(h, training, rng)

    def coreset(self, task_id: int, n_per_class: int, rng: RngState) -> GenBatch:
        classes = self.registry.get(task_id) or self.gen.task_classes[task_id]
        if self.config.coreset_source == "uniform":
            stored = self.memory[task_id]
            keep = np.concatenate([np.flatnonzero(stored.y == c)[:n_per_class] for c in classes])
            return GenBatch(stored.x[keep], stored.y[keep], stored.t[keep])
        return self.gen.generate_coreset(task_id, classes, n_per_class, rng)

    # checkpoints

    def state_dict(self) -> dict[str, np.ndarray]:
        state = self.gen.state_dict()
        if self.proj is not None:
            state.update(self.proj.state_dict())
        for i, p in enumerate(self.kernel_net.params):
            state[f"kernel/{i}"] = p.value
        for t, b in self.memory.items():
            state[f"memory/{t}/x"], state[f"memory/{t}/y"] = b.x, b.y
        return state

    def save(self, path, extra: dict | None = None) -> None:
        meta = {"kind": "continual", "generator": self.gen.meta(), "train_config": asdict(self.config),
                "rng": {"seed": self.rng.seed, "path": list(self.rng.path)},
                "registry": {str(k): list(v) for k, v in self.registry.items()}}
        if extra:
            meta["extra"] = extra
        save_checkpoint(path, self.state_dict(), meta)

    @classmethod
    def load(cls, path) -> "ContinualModel":
        arrays, meta = load_checkpoint(path)
        gen = GenerativeModel.from_meta(meta["generator"])
        gen.load_state(arrays, meta["generator"])
        config = TrainConfig(**meta["train_config"])
        proj = None
        if "proj/w" in arrays:
            proj = ProjectionParams(config.hidden[-1], config.proj_dim, gen.seed)
            proj.load_state(arrays)
        model = cls(gen, proj, config, RngState(meta["rng"]["seed"], tuple(_as_label(p) for p in meta["rng"]["path"])))
        for i, p in enumerate(model.kernel_net.params):
            p.value = np.array(arrays[f"kernel/{i}"], dtype=np.float64)
        model.registry = {int(k): tuple(v) for k, v in meta["registry"].items()}
        for t in model.registry:
            if f"memory/{t}/x" in arrays:
                y = arrays[f"memory/{t}/y"]
                model.memory[t] = GenBatch(arrays[f"memory/{t}/x"], y, np.full(len(y), t))
        return model


def _as_label(p):
    return tuple(p) if isinstance(p, list) else p


def _global_labels(task: Task, data: ImageDataset) -> np.ndarray:
    return np.asarray(task.classes, dtype=np.int64)[data.labels]


def _local_labels(classes: tuple[int, ...], y: np.ndarray) -> np.ndarray:
    lookup = {c: i for i, c in enumerate(classes)}
    return np.array([lookup[int(c)] for c in y], dtype=np.int64)


# step 1

def train_generator(gen: GenerativeModel, proj: ProjectionParams | None, task: Task, config: TrainConfig,
                    rng: RngState, replay_source: GenerativeModel | None = None) -> dict[str, float]:
    """Generator update on one task; replay comes from ``replay_source`` (a frozen copy)."""
    prev = [(t, c) for t, classes in gen.task_classes.items() if t != task.task_id for c in classes]
    gen.register_task(task.task_id, task.classes)
    x = task.train.images
    y = _global_labels(task, task.train)
    n = len(y)
    params = gen.parameters() + (proj.parameters() if proj is not None and config.con_weight > 0 else [])
    opt = nc.Adam(params, lr=config.gen_lr)
    con = config.con
    replay_source = replay_source or gen
    tail = max(1, config.iterations // 10)
    elbo, supcon = [], []
    for i in range(config.iterations):
        r = rng.split(("step", i))
        idx = r.split("batch").choice_without_replacement(n, min(config.batch_size, n))
        current = GenBatch(x[idx], y[idx], np.full(len(idx), task.task_id))
        if prev and config.replay_size:
            replay = replay_source.sample_replay(prev, config.replay_size, r.split("replay"))
        else:
            replay = GenBatch.empty(x.shape[1])
        loss, parts = generator_objective(gen, proj, current, replay, r.split("noise"), con)
        opt.zero_grad()
        nc.backward(loss)
        opt.step()
        if i >= config.iterations - tail:
            elbo.append(parts["elbo"])
            supcon.append(parts.get("supcon", float("nan")))
    return {"elbo": float(np.mean(elbo)), "supcon": float(np.mean(supcon))}


# steps 2 and 3

def fit_classifier(model: ContinualModel, task: Task, rng: RngState) -> dict[str, float]:
    """Build the task's coreset and fit ``f_gamma`` by cross-entropy through KRR."""
    config = model.config
    tid = task.task_id
    model.registry[tid] = tuple(task.classes)
    if config.coreset_source == "uniform":
        model.memory[tid] = _uniform_memory(task, max(config.coreset_train, config.coreset_infer), rng.split("memory"))
    core = model.coreset(tid, config.coreset_train, rng.split("coreset"))
    if not model.kernel_net.params:
        return {"fit_loss": float("nan"), "fit_accuracy": _accuracy(model, core, task.classes, task.train)}
    k = len(task.classes)
    y_core = one_hot(_local_labels(task.classes, core.y), k)
    h_core = model.hidden(core.x)
    h_query = model.hidden(task.train.images)
    labels = task.train.labels
    lr = config.kernel_lr * config.kernel_lr_decay ** (len(model.registry) - 1)
    opt = nc.SGD(model.kernel_net.parameters(), lr=lr, momentum=config.kernel_momentum)
    n_core = len(core)
    losses = []
    step = 0
    for epoch in range(config.kernel_epochs):
        order = rng.split(("order", epoch)).permutation(len(labels))
        for start in range(0, len(order), config.kernel_batch):
            q = order[start:start + config.kernel_batch]
            phi = model.kernel_net(np.concatenate([h_core, h_query[q]]), True, rng.split(("dropout", step)))
            phi_c = nc.transpose(nc.slice_rows(phi, 0, n_core))
            phi_q = nc.transpose(nc.slice_rows(phi, n_core, n_core + len(q)))
            logits = nc.transpose(krr_logits(phi_c, y_core, phi_q, model.ridge, model.spec))
            logp = nc.row_log_softmax(logits)
            target = one_hot(labels[q], k).T
            loss = nc.scale(nc.reduce_sum(nc.hadamard(logp, target)), -1.0 / len(q))
            opt.zero_grad()
            nc.backward(loss)
            opt.step()
            losses.append(float(loss.value[0, 0]))
            step += 1
    tail = max(1, len(losses) // 5)
    return {"fit_loss": float(np.mean(losses[-tail:])), "fit_accuracy": _accuracy(model, core, task.classes, task.train)}


def _uniform_memory(task: Task, n_per_class: int, rng: RngState) -> GenBatch:
    y = _global_labels(task, task.train)
    keep = []
    for c in task.classes:
        pool = np.flatnonzero(y == c)
        take = min(n_per_class, len(pool))
        keep.append(np.sort(pool[rng.split(("class", c)).choice_without_replacement(len(pool), take)]))
    keep = np.concatenate(keep)
    return GenBatch(task.train.images[keep], y[keep], np.full(len(keep), task.task_id))


def train_task(model: ContinualModel, task: Task, config: TrainConfig | None = None,
               rng: RngState | None = None) -> TaskResult:
    """Both training steps for one task on a single-arm model."""
    config = config or model.config
    if task.task_id in model.registry:
        raise ProtocolError(f"task {task.task_id} has already been trained")
    if len(task.train) == 0:
        raise ProtocolError("task has no training data")
    # same stream layout as run_sequence, so both paths give identical models
    rng = rng or RngState(model.gen.seed)
    snapshot = copy.deepcopy(model.gen) if model.gen.task_classes else None
    t0 = time.perf_counter()
    gen_stats = train_generator(model.gen, model.proj, task, config, rng.split(("generator", task.task_id)), snapshot)
    t1 = time.perf_counter()
    fit_stats = fit_classifier(model, task, model.rng.split(("fit", task.task_id)))
    t2 = time.perf_counter()
    return TaskResult(task.task_id, gen_stats["elbo"], gen_stats["supcon"], fit_stats["fit_loss"],
                      fit_stats["fit_accuracy"], {"generator": t1 - t0, "classifier": t2 - t1})


def evaluate(model: ContinualModel, task_id: int, test_data: ImageDataset, coreset_size: int | None = None,
             rng: RngState | None = None) -> float:
    """Accuracy of the task's kernel classifier rebuilt from a fresh coreset."""
    if task_id not in model.registry:
        raise ProtocolError(f"task {task_id} is not registered")
    size = coreset_size or model.config.coreset_infer
    rng = rng or model.rng.split(("eval", task_id, size))
    core = model.coreset(task_id, size, rng)
    return _accuracy(model, core, model.registry[task_id], test_data)


def _accuracy(model: ContinualModel, core: GenBatch, classes: tuple[int, ...], data: ImageDataset) -> float:
    with nc.no_grad():
        phi_c = nc.as_value(model.kernel_net(model.hidden(core.x)))
        y_core = one_hot(_local_labels(classes, core.y), len(classes))
        correct = 0
        for start in range(0, len(data), 2000):
            phi_q = nc.as_value(model.kernel_net(model.hidden(data.images[start:start + 2000])))
            logits = krr_logits(phi_c.T, y_core, phi_q.T, model.ridge, model.spec)
            correct += int((logits.argmax(axis=0) == data.labels[start:start + 2000]).sum())
    return correct / len(data)


@dataclass
class SequenceResult:
    arm: str
    matrices: dict[int, AccuracyMatrix]  # keyed by inference coreset size
    infer_size: int
    tasks: list[TaskResult] = field(default_factory=list)
    model: ContinualModel | None = None

    @property
    def matrix(self) -> AccuracyMatrix:
        return self.matrices[self.infer_size]


def _arm_config(base: TrainConfig, overrides: Mapping) -> TrainConfig:
    bad = set(overrides) - CLASSIFIER_KEYS
    if bad:
        raise ParameterError(f"arms may only override classifier settings, not {sorted(bad)}")
    return replace(base, **overrides)


def run_sequence(stream: TaskStream, config: TrainConfig, seed: int, arms: Mapping[str, Mapping] | None = None,
                 eval_sizes: Mapping[str, tuple[int, ...]] | None = None, progress=None) -> dict[str, SequenceResult]:
    """Train on every task in order, evaluating all seen tasks after each one.

    ``arms`` maps arm names to classifier-side overrides of ``config``; all arms
    share one generator.  ``eval_sizes`` optionally adds inference coreset
    sizes per arm.
    """
    if len(stream) == 0:
        raise ParameterError("empty task stream")
    arms = dict(arms or {"gkcl": {}})
    eval_sizes = dict(eval_sizes or {})
    root = RngState(seed)
    first = ContinualModel.create(stream.input_dim, stream.n_classes, stream.scenario, config, seed)
    gen, proj = first.gen, first.proj
    if config.con_weight == 0:
        proj = None
    models = {}
    for name, overrides in arms.items():
        arm_cfg = _arm_config(config, overrides)
        models[name] = ContinualModel(gen, proj, arm_cfg, root.split(("arm", name)))
    results = {}
    for name, m in models.items():
        sizes = tuple(dict.fromkeys((m.config.coreset_infer,) + tuple(eval_sizes.get(name, ()))))
        results[name] = SequenceResult(name, {s: AccuracyMatrix(len(stream)) for s in sizes}, m.config.coreset_infer)
    for task in stream:
        snapshot = copy.deepcopy(gen) if gen.task_classes else None
        t0 = time.perf_counter()
        gen_stats = train_generator(gen, proj, task, config, root.split(("generator", task.task_id)), snapshot)
        gen_time = time.perf_counter() - t0
        for name, m in models.items():
            t1 = time.perf_counter()
            fit = fit_classifier(m, task, m.rng.split(("fit", task.task_id)))
            t2 = time.perf_counter()
            res = results[name]
            for size, matrix in res.matrices.items():
                matrix.append_row([evaluate(m, i.task_id, i.test, size, m.rng.split(("eval", i.task_id, size)))
                                   for i in stream.tasks[: task.task_id]])
            t3 = time.perf_counter()
            res.tasks.append(TaskResult(task.task_id, gen_stats["elbo"], gen_stats["supcon"], fit["fit_loss"],
                                        fit["fit_accuracy"],
                                        {"generator": gen_time, "classifier": t2 - t1, "evaluation": t3 - t2}))
        if progress is not None:
            progress(task.task_id, {n: r.matrix.rows[-1] for n, r in results.items()})
    for name, m in models.items():
        results[name].model = m
    return results


# naive baseline

class BaselineNet:
    """Encoder-shaped MLP with a linear head, trained by plain cross-entropy."""

    def __init__(self, input_dim: int, hidden: tuple[int, ...], n_classes: int, rng: RngState):
        dims = [input_dim, *hidden, n_classes]
        self.params: list[Node] = []
        for i in range(len(dims) - 1):
            bound = 1.0 / math.sqrt(dims[i])
            r = rng.split(("layer", i))
            self.params.append(nc.parameter(r.split("w").uniform((dims[i], dims[i + 1]), -bound, bound)))
            self.params.append(nc.parameter(r.split("b").uniform((1, dims[i + 1]), -bound, bound)))

    def logits(self, x):
        h = x
        last = len(self.params) - 2
        for i in range(0, len(self.params), 2):
            h = nc.add(nc.matmul(h, self.params[i]), self.params[i + 1])
            if i < last:
                h = nc.relu(h)
        return h


def _task_logits(net: BaselineNet, x, classes: tuple[int, ...]):
    # task identity is known: score only the task's own classes
    return nc.matmul(net.logits(x), np.eye(net.params[-1].shape[1])[:, list(classes)])


def run_naive_baseline(stream: TaskStream, config: TrainConfig, seed: int) -> SequenceResult:
    """Sequential fine-tuning without replay, kernel, or gating."""
    rng = RngState(seed).split("baseline")
    net = BaselineNet(stream.input_dim, config.hidden, stream.n_classes, rng.split("init"))
    matrix = AccuracyMatrix(len(stream))
    results = []
    for task in stream:
        t0 = time.perf_counter()
        opt = nc.Adam(net.params, lr=config.gen_lr)
        x, labels = task.train.images, task.train.labels
        k = len(task.classes)
        r = rng.split(("task", task.task_id))
        losses = []
        for i in range(config.iterations):
            idx = r.split(("step", i)).choice_without_replacement(len(labels), min(config.batch_size, len(labels)))
            logp = nc.row_log_softmax(_task_logits(net, x[idx], task.classes))
            loss = nc.scale(nc.reduce_sum(nc.hadamard(logp, one_hot(labels[idx], k).T)), -1.0 / len(idx))
            opt.zero_grad()
            nc.backward(loss)
            opt.step()
            losses.append(float(loss.value[0, 0]))
        t1 = time.perf_counter()
        row = []
        with nc.no_grad():
            for prev in stream.tasks[: task.task_id]:
                pred = _task_logits(net, prev.test.images, prev.classes).value.argmax(axis=1)
                row.append(float((pred == prev.test.labels).mean()))
        matrix.append_row(row)
        tail = max(1, len(losses) // 10)
        results.append(TaskResult(task.task_id, fit_loss=float(np.mean(losses[-tail:])),
                                  timings={"train": t1 - t0, "evaluation": time.perf_counter() - t1}))
    return SequenceResult("baseline", {0: matrix}, 0, results)

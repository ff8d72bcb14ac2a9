"""Conditional VAE with a learnable per-class Gaussian prior and a gated decoder.

The decoder sees ``[z, onehot(y)]`` and every hidden decoder layer's output is
multiplied by a fixed binary mask chosen by the *context*: the class id in the
task-incremental scenario, the task id in the domain-incremental one.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from . import numcore as nc
from .data import DOMAIN_INCREMENTAL, TASK_INCREMENTAL
from .errors import ContextError, DimensionError, NumericError, ParameterError
from .numcore import Node, RngState
from .numcore.autodiff import _make, _sigmoid

CHECKPOINT_FORMAT = 1


@dataclass
class GenBatch:
    x: np.ndarray  # N x D
    y: np.ndarray  # global class ids
    t: np.ndarray  # task ids

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        self.t = np.asarray(self.t, dtype=np.int64).reshape(-1)
        if self.x.ndim != 2 or not (len(self.x) == len(self.y) == len(self.t)):
            raise DimensionError("GenBatch fields must have equal lengths")
        if len(self.x) and (self.x.min() < 0.0 or self.x.max() > 1.0):
            raise ParameterError("GenBatch inputs must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.y)

    @classmethod
    def empty(cls, dim: int) -> "GenBatch":
        return cls(np.zeros((0, dim)), [], [])

    @staticmethod
    def concat(batches: Iterable["GenBatch"]) -> "GenBatch":
        batches = list(batches)
        return GenBatch(np.concatenate([b.x for b in batches]), np.concatenate([b.y for b in batches]),
                        np.concatenate([b.t for b in batches]))


@dataclass
class GenConfig:
    input_dim: int
    n_classes: int
    scenario: str = DOMAIN_INCREMENTAL
    hidden: tuple[int, ...] = (400, 400)
    latent: int = 64
    gate_fraction: float = 0.5
    prior_init_scale: float = 0.1
    binary_replay: bool = False

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.scenario not in (DOMAIN_INCREMENTAL, TASK_INCREMENTAL):
            raise ParameterError(f"unknown scenario {self.scenario!r}")
        if not 0.0 < self.gate_fraction <= 1.0:
            raise ParameterError("gate_fraction must lie in (0, 1]")
        if min(self.input_dim, self.n_classes, self.latent, *self.hidden) < 1:
            raise ParameterError("dimensions must be positive")


class GateTable:
    """Fixed binary masks per (decoder layer, context), drawn on registration."""

    def __init__(self, widths: tuple[int, ...], fraction: float, rng: RngState):
        self.widths = tuple(widths)
        self.fraction = fraction
        self.rng = rng
        self.masks: dict[int, list[np.ndarray]] = {}

    def active_count(self, width: int) -> int:
        return max(1, int(round(self.fraction * width)))

    def register(self, context: int) -> None:
        context = int(context)
        if context in self.masks:
            return
        layers = []
        for layer, width in enumerate(self.widths):
            m = np.zeros(width)
            idx = self.rng.split(("gate", layer, context)).choice_without_replacement(width, self.active_count(width))
            m[idx] = 1.0
            m.flags.writeable = False
            layers.append(m)
        self.masks[context] = layers

    def rows(self, layer: int, contexts: np.ndarray) -> np.ndarray:
        try:
            return np.stack([self.masks[int(c)][layer] for c in contexts])
        except KeyError as exc:
            raise ContextError(f"no gate registered for context {exc.args[0]}") from None


def _linear_init(fan_in: int, fan_out: int, rng: RngState) -> tuple[np.ndarray, np.ndarray]:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.split("w").uniform((fan_in, fan_out), -bound, bound), rng.split("b").uniform((1, fan_out), -bound, bound)


@nc.differentiable(tensors=2)
def bce_with_logits_sum(logits: Node, target: Node) -> Node:
    """Summed Bernoulli cross-entropy of ``target`` under ``sigmoid(logits)``."""
    l, x = logits.value, target.value
    val = (np.maximum(l, 0.0) - l * x + np.log1p(np.exp(-np.abs(l)))).sum()

    def rule(g):
        return (g * (_sigmoid(l) - x), None)

    return _make(np.array([[val]]), (logits, target), rule)


@nc.differentiable(tensors=4)
def gaussian_kl_sum(mu: Node, logsigma: Node, prior_mu: Node, prior_logsigma: Node) -> Node:
    """Summed KL( N(mu, diag e^{2 logsigma}) || N(prior_mu, e^{2 prior_logsigma} I) ).

    ``prior_logsigma`` holds one scalar per row (shape N x 1).
    """
    m, ls, pm, pls = mu.value, logsigma.value, prior_mu.value, prior_logsigma.value
    var = np.exp(2.0 * ls)
    inv_pvar = np.exp(-2.0 * pls)
    diff = m - pm
    terms = pls - ls + (var + diff * diff) * 0.5 * inv_pvar - 0.5
    val = terms.sum()
    if not np.isfinite(val):
        raise NumericError("KL divergence is not finite")

    def rule(g):
        g = float(g[0, 0])
        dmu = g * diff * inv_pvar
        dls = g * (var * inv_pvar - 1.0)
        dpls = g * (1.0 - ((var + diff * diff) * inv_pvar)).sum(axis=1, keepdims=True)
        return (dmu, dls, -dmu, dpls)

    return _make(np.array([[val]]), (mu, logsigma, prior_mu, prior_logsigma), rule)


@dataclass
class ForwardRecord:
    mu: Node
    logsigma: Node
    hidden: Node
    z: Node
    logits: Node
    recon: Node
    kl: Node
    loss: Node  # (recon + kl) / N


class GenerativeModel:
    def __init__(self, config: GenConfig, seed: int):
        self.config = config
        self.seed = int(seed)
        root = RngState(self.seed).split("genmodel")
        d, m, c = config.input_dim, config.latent, config.n_classes
        self.params: dict[str, Node] = {}
        widths = (d,) + config.hidden
        for i in range(len(config.hidden)):
            w, b = _linear_init(widths[i], widths[i + 1], root.split(("enc", i)))
            self.params[f"enc{i}.w"], self.params[f"enc{i}.b"] = nc.parameter(w), nc.parameter(b)
        h = config.hidden[-1]
        for head in ("mu", "logsigma"):
            w, b = _linear_init(h, m, root.split(("head", head)))
            self.params[f"{head}.w"], self.params[f"{head}.b"] = nc.parameter(w), nc.parameter(b)
        dec_widths = (m + c,) + tuple(reversed(config.hidden)) + (d,)
        for i in range(len(dec_widths) - 1):
            w, b = _linear_init(dec_widths[i], dec_widths[i + 1], root.split(("dec", i)))
            self.params[f"dec{i}.w"], self.params[f"dec{i}.b"] = nc.parameter(w), nc.parameter(b)
        self.params["prior.mu"] = nc.parameter(config.prior_init_scale * root.split("prior").normal((c, m)))
        self.params["prior.logsigma"] = nc.parameter(np.zeros((c, 1)))
        self.gates = GateTable(tuple(reversed(config.hidden)), config.gate_fraction, root.split("gates"))
        self.observed: set[int] = set()
        # task id -> global class ids seen in that task
        self.task_classes: dict[int, tuple[int, ...]] = {}

    # registry

    def register_task(self, task_id: int, classes: Iterable[int]) -> None:
        classes = tuple(int(c) for c in classes)
        if any(c < 0 or c >= self.config.n_classes for c in classes):
            raise ParameterError(f"class ids must lie in [0, {self.config.n_classes})")
        self.task_classes[int(task_id)] = classes
        self.observed.update(classes)
        if self.config.scenario == TASK_INCREMENTAL:
            for c in classes:
                self.gates.register(c)
        else:
            self.gates.register(task_id)

    def contexts(self, y: np.ndarray, t: np.ndarray) -> np.ndarray:
        return y if self.config.scenario == TASK_INCREMENTAL else t

    def _check_labels(self, y: np.ndarray) -> None:
        missing = set(np.unique(y).tolist()) - self.observed
        if missing:
            raise ContextError(f"no prior entry for class(es) {sorted(missing)}")

    def parameters(self, include_prior: bool = True) -> list[Node]:
        return [p for k, p in self.params.items() if include_prior or not k.startswith("prior.")]

    # network pieces

    def _layer(self, x, name: str):
        return nc.add(nc.matmul(x, self.params[f"{name}.w"]), self.params[f"{name}.b"])

    def encode(self, x):
        """Return ``(mu, logsigma, hidden)``; ``hidden`` is the last hidden layer."""
        xv = x.value if isinstance(x, Node) else x
        if xv.ndim != 2 or xv.shape[1] != self.config.input_dim:
            raise DimensionError(f"encoder expects N x {self.config.input_dim}, got {xv.shape}")
        h = x
        for i in range(len(self.config.hidden)):
            h = nc.relu(self._layer(h, f"enc{i}"))
        return self._layer(h, "mu"), self._layer(h, "logsigma"), h

    def hidden(self, x, layer: int = -1):
        """Activation of encoder hidden layer ``layer`` (default: the last)."""
        depth = len(self.config.hidden)
        stop = layer % depth
        h = x
        for i in range(stop + 1):
            h = nc.relu(self._layer(h, f"enc{i}"))
        return h

    @staticmethod
    def reparameterize(mu, logsigma, rng: RngState):
        eps = rng.normal(mu.shape if isinstance(mu, np.ndarray) else mu.value.shape)
        return nc.add(mu, nc.hadamard(nc.exp(logsigma), eps))

    def decode(self, z, y, t):
        y = np.asarray(y, dtype=np.int64)
        ctx = self.contexts(y, np.asarray(t, dtype=np.int64))
        onehot = np.zeros((len(y), self.config.n_classes))
        onehot[np.arange(len(y)), y] = 1.0
        h = nc.concat_cols(z, onehot)
        n_hidden = len(self.config.hidden)
        for i in range(n_hidden):
            h = nc.hadamard(nc.relu(self._layer(h, f"dec{i}")), self.gates.rows(i, ctx))
        return self._layer(h, f"dec{n_hidden}")

    # objectives

    def forward(self, batch: GenBatch, rng: RngState) -> ForwardRecord:
        self._check_labels(batch.y)
        mu, logsigma, hidden = self.encode(batch.x)
        z = self.reparameterize(mu, logsigma, rng)
        logits = self.decode(z, batch.y, batch.t)
        recon = bce_with_logits_sum(logits, batch.x)
        pm = nc.gather_rows(self.params["prior.mu"], batch.y)
        pls = nc.gather_rows(self.params["prior.logsigma"], batch.y)
        kl = gaussian_kl_sum(mu, logsigma, pm, pls)
        loss = nc.scale(nc.add(recon, kl), 1.0 / len(batch))
        return ForwardRecord(mu, logsigma, hidden, z, logits, recon, kl, loss)

    def elbo_loss(self, batch: GenBatch, rng: RngState) -> Node:
        """Negative ELBO averaged over the batch."""
        return self.forward(batch, rng).loss

    def combined_generative_loss(self, current: GenBatch, replay: GenBatch, rng: RngState) -> Node:
        loss = self.elbo_loss(current, rng)
        if len(replay):
            loss = nc.add(loss, self.elbo_loss(replay, rng))
        return loss

    # generation

    def _generate(self, y: np.ndarray, t: np.ndarray, rng: RngState) -> GenBatch:
        if len(y) == 0:
            return GenBatch.empty(self.config.input_dim)
        with nc.no_grad():
            mu = self.params["prior.mu"].value[y]
            sigma = np.exp(self.params["prior.logsigma"].value[y])
            z = mu + sigma * rng.normal(mu.shape)
            means = _sigmoid(self.decode(z, y, t).value)
        if self.config.binary_replay:
            means = (rng.uniform(means.shape) < means).astype(np.float64)
        return GenBatch(means, y, t)

    def sample_replay(self, prev_contexts: Iterable[tuple[int, int]], n: int, rng: RngState) -> GenBatch:
        """Replay drawn uniformly over previously seen ``(task, class)`` pairs."""
        pairs = sorted(set((int(t), int(c)) for t, c in prev_contexts))
        if not pairs:
            raise ParameterError("sample_replay needs at least one previous context")
        if n == 0:
            return GenBatch.empty(self.config.input_dim)
        pick = rng.integers(0, len(pairs), size=n)
        chosen = np.array(pairs, dtype=np.int64)[pick]
        self._check_labels(chosen[:, 1])
        return self._generate(chosen[:, 1], chosen[:, 0], rng)

    def generate_coreset(self, task_id: int, classes: Iterable[int], n_per_class: int, rng: RngState) -> GenBatch:
        """``n_per_class`` decoded prior samples for each class, class-major."""
        classes = [int(c) for c in classes]
        self._check_labels(np.array(classes))
        y = np.repeat(np.array(classes, dtype=np.int64), n_per_class)
        t = np.full(len(y), int(task_id), dtype=np.int64)
        return self._generate(y, t, rng)

    # checkpoints

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {f"param/{k}": p.value for k, p in self.params.items()}
        for ctx, layers in self.gates.masks.items():
            for i, m in enumerate(layers):
                state[f"gate/{ctx}/{i}"] = m
        return state

    def meta(self) -> dict:
        return {
            "config": asdict(self.config),
            "seed": self.seed,
            "observed": sorted(self.observed),
            "task_classes": {str(k): list(v) for k, v in self.task_classes.items()},
        }

    def load_state(self, state: dict[str, np.ndarray], meta: dict) -> None:
        for k, p in self.params.items():
            p.value = np.array(state[f"param/{k}"], dtype=np.float64)
        self.gates.masks = {}
        for key, arr in state.items():
            if key.startswith("gate/"):
                _, ctx, layer = key.split("/")
                self.gates.masks.setdefault(int(ctx), [None] * len(self.gates.widths))[int(layer)] = arr
        for layers in self.gates.masks.values():
            for m in layers:
                m.flags.writeable = False
        self.observed = set(meta["observed"])
        self.task_classes = {int(k): tuple(v) for k, v in meta["task_classes"].items()}

    @classmethod
    def from_meta(cls, meta: dict) -> "GenerativeModel":
        return cls(GenConfig(**meta["config"]), meta["seed"])


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Write an ``.npz`` holding the arrays plus a JSON metadata record."""
    payload = dict(arrays)
    meta = dict(meta, format_version=CHECKPOINT_FORMAT)
    payload["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    with open(Path(path), "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(Path(path), allow_pickle=False) as data:
        arrays = {k: data[k] for k in data.files if k != "__meta__"}
        meta = json.loads(data["__meta__"].tobytes().decode("utf-8"))
    if meta.get("format_version") != CHECKPOINT_FORMAT:
        raise ParameterError(f"unsupported checkpoint format {meta.get('format_version')!r}")
    return arrays, meta


def save_generator(model: GenerativeModel, path) -> None:
    save_checkpoint(path, model.state_dict(), {"kind": "generator", **model.meta()})


def load_generator(path) -> GenerativeModel:
    arrays, meta = load_checkpoint(path)
    model = GenerativeModel.from_meta(meta)
    model.load_state(arrays, meta)
    return model

"""Supervised contrastive regularisation of the encoder representation.

Views are the real inputs and their encode/decode reconstructions.  Each view
is mapped to the unit sphere twice: once after the encoder's last hidden layer
and once after the projection layer ``f_p``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import DimensionError, ParameterError
from .genmodel import GenBatch, GenerativeModel
from .numcore import Node, RngState
from .numcore.autodiff import _make

NORM_EPS = 1e-12


@dataclass(frozen=True)
class ConLossConfig:
    tau: float = 0.08
    weight: float = 1.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ParameterError(f"temperature must be positive, got {self.tau}")
        if not self.weight >= 0:
            raise ParameterError(f"regulariser weight must be non-negative, got {self.weight}")


class ProjectionParams:
    """One fully connected layer ``H -> v``."""

    def __init__(self, in_dim: int, out_dim: int, seed: int):
        rng = RngState(int(seed)).split("projection")
        bound = 1.0 / math.sqrt(in_dim)
        self.w = nc.parameter(rng.split("w").uniform((in_dim, out_dim), -bound, bound))
        self.b = nc.parameter(rng.split("b").uniform((1, out_dim), -bound, bound))

    def parameters(self) -> list[Node]:
        return [self.w, self.b]

    def __call__(self, r):
        return nc.add(nc.matmul(r, self.w), self.b)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {"proj/w": self.w.value, "proj/b": self.b.value}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.w.value = np.array(state["proj/w"], dtype=np.float64)
        self.b.value = np.array(state["proj/b"], dtype=np.float64)


def augment(model: GenerativeModel, batch: GenBatch, rng: RngState):
    """``sigmoid(decode(z))`` with ``z`` sampled from the encoder posterior."""
    mu, logsigma, _ = model.encode(batch.x)
    z = model.reparameterize(mu, logsigma, rng)
    return nc.sigmoid(model.decode(z, batch.y, batch.t))


def project_hidden(proj: ProjectionParams, hidden):
    return nc.l2_normalize_rows(proj(nc.l2_normalize_rows(hidden, NORM_EPS)), NORM_EPS)


def embed(model: GenerativeModel, proj: ProjectionParams, x):
    return project_hidden(proj, model.hidden(x))


@nc.differentiable(tensors=1)
def supcon_loss(s: Node, labels, tau: float) -> Node:
    """Summed supervised contrastive loss over anchors.

    Anchors without a positive partner contribute nothing.
    """
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    sv = s.value
    labels = np.asarray(labels).reshape(-1)
    n = sv.shape[0]
    if len(labels) != n:
        raise DimensionError(f"{n} embeddings but {len(labels)} labels")
    if n < 2:
        raise DimensionError("supcon_loss needs at least two embeddings")
    logits = (sv @ sv.T) / tau
    np.fill_diagonal(logits, -np.inf)
    top = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - top)
    lse = np.log(e.sum(axis=1, keepdims=True)) + top
    pos = (labels[:, None] == labels[None, :]).astype(np.float64)
    np.fill_diagonal(pos, 0.0)
    count = pos.sum(axis=1, keepdims=True)
    active = count[:, 0] > 0
    weights = np.zeros_like(pos)
    weights[active] = pos[active] / count[active]
    np.fill_diagonal(logits, 0.0)
    per_anchor = lse[:, 0] - (weights * logits).sum(axis=1)
    val = per_anchor[active].sum()

    def rule(g):
        soft = e / e.sum(axis=1, keepdims=True)
        dlogits = np.where(active[:, None], soft - weights, 0.0) * float(g[0, 0])
        return (((dlogits + dlogits.T) @ sv) / tau,)

    return _make(np.array([[val]]), (s,), rule)


def generator_objective(model: GenerativeModel, proj: ProjectionParams | None, current: GenBatch,
                        replay: GenBatch, rng: RngState, con: ConLossConfig) -> tuple[Node, dict[str, float]]:
    """ELBO on current and replay data plus the weighted contrastive term.

    The augmentation of each real input reuses the reconstruction computed for
    its ELBO term (same posterior draw), so the regulariser consumes no extra
    random numbers and ``weight = 0`` reproduces the bare generative loss.
    """
    records = [model.forward(current, rng)]
    labels = [current.y]
    if len(replay):
        records.append(model.forward(replay, rng))
        labels.append(replay.y)
    loss = records[0].loss
    for rec in records[1:]:
        loss = nc.add(loss, rec.loss)
    parts = {"elbo": float(loss.value[0, 0])}
    if con.weight > 0 and proj is not None:
        real = nc.concat_rows(*[r.hidden for r in records])
        views = nc.sigmoid(nc.concat_rows(*[r.logits for r in records]))
        s = project_hidden(proj, nc.concat_rows(real, model.hidden(views)))
        lab = np.concatenate(labels + labels)
        con_term = supcon_loss(s, lab, con.tau)
        parts["supcon"] = float(con_term.value[0, 0])
        loss = nc.add(loss, nc.scale(con_term, con.weight))
    return loss, parts

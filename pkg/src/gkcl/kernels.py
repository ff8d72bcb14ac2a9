"""Kernel functions and the kernel-ridge-regression classifier.

Feature matrices are laid out column-wise (``d x N``): column ``j`` is the
feature vector of sample ``j``.  Given coreset features ``Phi_c``, one-hot
labels ``Y`` (``C x N_c``) and query features ``Phi_q``, the classifier returns
``softmax(Y (lam*I + K)^-1 K~)`` per query column with ``K = k(Phi_c, Phi_c)``
and ``K~ = k(Phi_c, Phi_q)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, FactorizationError, KernelDegeneracyError, NumericError, ParameterError
from .numcore import Node, matmul, row_softmax, spd_solve, transpose
from .numcore.autodiff import _make, differentiable

KINDS = ("linear", "polynomial", "rbf")


@dataclass(frozen=True)
class KernelSpec:
    """Kernel choice; ``bandwidth=None`` on an rbf kernel selects the median heuristic."""

    kind: str = "linear"
    degree: int | None = None
    offset: float | None = None
    bandwidth: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown kernel kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "polynomial":
            if self.degree is None or self.offset is None:
                raise ParameterError("polynomial kernel needs degree and offset")
            if int(self.degree) != self.degree or self.degree < 1:
                raise ParameterError("polynomial degree must be a positive integer")
            if self.offset < 0:
                raise ParameterError("polynomial offset must be >= 0")
        elif self.degree is not None or self.offset is not None:
            raise ParameterError(f"{self.kind} kernel takes no degree/offset")
        if self.kind == "rbf":
            if self.bandwidth is not None and not self.bandwidth > 0:
                raise ParameterError("rbf bandwidth must be positive")
        elif self.bandwidth is not None:
            raise ParameterError(f"{self.kind} kernel takes no bandwidth")

    @classmethod
    def linear(cls) -> "KernelSpec":
        return cls("linear")

    @classmethod
    def polynomial(cls, degree: int = 2, offset: float = 1.0) -> "KernelSpec":
        return cls("polynomial", degree=degree, offset=offset)

    @classmethod
    def rbf(cls, bandwidth: float | None = None) -> "KernelSpec":
        return cls("rbf", bandwidth=bandwidth)

    @classmethod
    def from_name(cls, name: str) -> "KernelSpec":
        name = name.lower()
        if name == "linear":
            return cls.linear()
        if name in ("poly", "polynomial"):
            return cls.polynomial()
        if name == "rbf":
            return cls.rbf()
        raise ParameterError(f"unknown kernel {name!r}")


@dataclass(frozen=True)
class RidgeConfig:
    lam: float = 0.1
    jitter_allowed: bool = True

    def __post_init__(self):
        if not self.lam > 0:
            raise ParameterError("ridge lambda must be positive")


def median_bandwidth(features: np.ndarray) -> float:
    """Median pairwise Euclidean distance between the columns of ``features``."""
    x = features.T
    sq = (x * x).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * x @ x.T, 0.0)
    iu = np.triu_indices(x.shape[0], k=1)
    if iu[0].size == 0:
        return 1.0
    med = float(np.median(np.sqrt(d2[iu])))
    return med if med > 0 else 1.0


@differentiable(tensors=1)
def _power_offset(g: Node, offset: float, degree: int) -> Node:
    base = g.value + offset
    out = base ** degree
    return _make(out, (g,), lambda adj: (adj * degree * base ** (degree - 1),))


@differentiable(tensors=2)
def _rbf_gram(a: Node, b: Node, bandwidth: float) -> Node:
    av, bv = a.value, b.value
    sa = (av * av).sum(axis=0)
    sb = (bv * bv).sum(axis=0)
    d2 = np.maximum(sa[:, None] + sb[None, :] - 2.0 * av.T @ bv, 0.0)
    inv = 1.0 / (bandwidth * bandwidth)
    k = np.exp(-0.5 * inv * d2)

    def rule(adj):
        w = adj * k
        ga = -inv * (av * w.sum(axis=1)[None, :] - bv @ w.T)
        gb = -inv * (bv * w.sum(axis=0)[None, :] - av @ w)
        return ga, gb

    return _make(k, (a, b), rule)


def gram(phi_a, phi_b, spec: KernelSpec):
    """Kernel matrix ``k(a_i, b_j)`` between the columns of two feature matrices."""
    rows_a = phi_a.shape[0]
    rows_b = phi_b.shape[0]
    if rows_a != rows_b:
        raise DimensionError(f"gram: feature dimensions differ ({rows_a} vs {rows_b})")
    if spec.kind == "linear":
        out = matmul(transpose(phi_a), phi_b)
    elif spec.kind == "polynomial":
        out = _power_offset(matmul(transpose(phi_a), phi_b), spec.offset, spec.degree)
    else:
        bandwidth = spec.bandwidth
        if bandwidth is None:
            raise ParameterError("rbf bandwidth unresolved; call resolve_spec first")
        out = _rbf_gram(phi_a, phi_b, bandwidth)
    value = out.value if isinstance(out, Node) else out
    if not np.isfinite(value).all():
        raise NumericError("gram matrix has non-finite entries")
    return out


def resolve_spec(spec: KernelSpec, coreset_features) -> KernelSpec:
    """Fix the rbf bandwidth from the coreset when it was left to the heuristic."""
    if spec.kind == "rbf" and spec.bandwidth is None:
        value = coreset_features.value if isinstance(coreset_features, Node) else np.asarray(coreset_features)
        return KernelSpec.rbf(median_bandwidth(value))
    return spec


def one_hot(labels, n_classes: int) -> np.ndarray:
    """``C x N`` one-hot matrix (classes down the rows)."""
    labels = np.asarray(labels, dtype=np.intp)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ParameterError("label out of range for one-hot encoding")
    out = np.zeros((n_classes, labels.size))
    out[labels, np.arange(labels.size)] = 1.0
    return out


def krr_logits(coreset_features, coreset_labels, query_features, ridge: RidgeConfig, spec: KernelSpec):
    """``Y (lam*I + K)^-1 K~`` as a ``C x N_q`` matrix (pre-softmax)."""
    y = np.asarray(coreset_labels, dtype=np.float64)
    n_c = coreset_features.shape[1]
    if n_c < 1:
        raise ParameterError("coreset must contain at least one sample")
    if y.shape[1] != n_c:
        raise DimensionError(f"labels have {y.shape[1]} columns for {n_c} coreset samples")
    if not (np.isin(y, (0.0, 1.0)).all() and (y.sum(axis=0) == 1.0).all()):
        raise ParameterError("coreset labels must be one-hot columns")
    spec = resolve_spec(spec, coreset_features)
    k = gram(coreset_features, coreset_features, spec)
    k_query = gram(coreset_features, query_features, spec)
    system = k + ridge.lam * np.eye(n_c)
    try:
        alpha = spd_solve(system, k_query, jitter=ridge.jitter_allowed)
    except FactorizationError as exc:
        raise KernelDegeneracyError(f"kernel system is degenerate (pivot {exc.pivot})") from exc
    return matmul(y, alpha)


def krr_predict(coreset_features, coreset_labels, query_features, ridge: RidgeConfig, spec: KernelSpec):
    """Class probabilities, ``C x N_q``; every column sums to one."""
    logits = krr_logits(coreset_features, coreset_labels, query_features, ridge, spec)
    return transpose(row_softmax(transpose(logits)))

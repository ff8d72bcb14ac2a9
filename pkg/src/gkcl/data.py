"""Datasets and continual-learning task streams.

Streams are built from a base train/test pair.  Each task carries a transform
descriptor from which :func:`rebuild_stream` regenerates the stream exactly.
"""

from __future__ import annotations

import gzip
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import integrate
from scipy.stats import norm

from .errors import CountMismatchError, DatasetPathError, ParameterError, ParseError
from .numcore import RngState

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

DOMAIN_INCREMENTAL = "domain_incremental"
TASK_INCREMENTAL = "task_incremental"

DATA_ENV = "GKCL_DATA"

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass
class ImageDataset:
    images: np.ndarray  # N x D, float64 in [0, 1]
    labels: np.ndarray  # N ints

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 2:
            raise ParameterError("images must be an N x D matrix")
        if len(self.images) != len(self.labels):
            raise ParameterError("images and labels differ in length")
        if len(self.labels) == 0:
            raise ParameterError("dataset is empty")
        if self.images.min() < 0.0 or self.images.max() > 1.0:
            raise ParameterError("pixel values must lie in [0, 1]")
        if self.labels.min() < 0:
            raise ParameterError("labels must be non-negative")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.images.shape[1]

    def subset(self, index) -> "ImageDataset":
        index = np.asarray(index)
        return ImageDataset(self.images[index], self.labels[index])


@dataclass
class Task:
    task_id: int
    train: ImageDataset
    test: ImageDataset
    classes: tuple[int, ...]  # global class id of each local label
    transform: dict = field(default_factory=dict)

    @property
    def n_local_classes(self) -> int:
        return len(self.classes)


@dataclass
class TaskStream:
    tasks: list[Task]
    scenario: str
    n_classes: int
    descriptor: dict
    bayes_accuracy: list[float] | None = None

    def __post_init__(self):
        ids = [t.task_id for t in self.tasks]
        if ids != list(range(1, len(ids) + 1)):
            raise ParameterError("task ids must run consecutively from 1")
        if self.scenario == TASK_INCREMENTAL:
            seen: set[int] = set()
            for t in self.tasks:
                if seen & set(t.classes):
                    raise ParameterError("task-incremental class sets must be disjoint")
                seen |= set(t.classes)

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    @property
    def input_dim(self) -> int:
        return self.tasks[0].train.dim

    def head(self, n_tasks: int) -> "TaskStream":
        return TaskStream(self.tasks[:n_tasks], self.scenario, self.n_classes, dict(self.descriptor, tasks=n_tasks),
                          None if self.bayes_accuracy is None else self.bayes_accuracy[:n_tasks])


# IDX parsing

def _read_bytes(path) -> bytes:
    path = Path(path)
    if not path.exists():
        raise DatasetPathError(f"no such file: {path}")
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, magic: int, what: str) -> np.ndarray:
    if len(raw) < 8:
        raise ParseError(f"{what}: file too short for an IDX header")
    got = int.from_bytes(raw[:4], "big")
    if got != magic:
        raise ParseError(f"{what}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ParseError(f"{what}: truncated header")
    dims = [int.from_bytes(raw[4 + 4 * i: 8 + 4 * i], "big") for i in range(ndim)]
    expected = math.prod(dims)
    payload = len(raw) - header
    if payload < expected:
        raise ParseError(f"{what}: truncated payload ({payload} of {expected} bytes)")
    if payload > expected:
        raise ParseError(f"{what}: {payload - expected} trailing bytes after payload")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path) -> ImageDataset:
    """Read an IDX image/label file pair (raw or gzip, detected by magic bytes)."""
    images = _parse_idx(_read_bytes(images_path), IMAGE_MAGIC, str(images_path))
    labels = _parse_idx(_read_bytes(labels_path), LABEL_MAGIC, str(labels_path))
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    flat = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return ImageDataset(flat, labels.astype(np.int64))


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path, side: int | None = None) -> None:
    """Write uint8-quantised images and labels as raw IDX files."""
    images = np.asarray(images)
    n = len(images)
    side = side or int(round(math.sqrt(images.shape[1])))
    pix = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)
    head = IMAGE_MAGIC.to_bytes(4, "big") + b"".join(v.to_bytes(4, "big") for v in (n, side, side))
    Path(images_path).write_bytes(head + pix.tobytes())
    lab = LABEL_MAGIC.to_bytes(4, "big") + n.to_bytes(4, "big")
    Path(labels_path).write_bytes(lab + np.asarray(labels, dtype=np.uint8).tobytes())


def dataset_root(root=None) -> Path:
    if root is None:
        root = os.environ.get(DATA_ENV) or "data/mnist"
    root = Path(root)
    if not root.is_dir():
        raise DatasetPathError(f"dataset directory not found: {root} (set {DATA_ENV})")
    return root


def load_mnist(root=None) -> tuple[ImageDataset, ImageDataset]:
    root = dataset_root(root)
    out = []
    for split in ("train", "test"):
        paths = []
        for stem in MNIST_FILES[split]:
            for cand in (root / stem, root / f"{stem}.gz"):
                if cand.exists():
                    paths.append(cand)
                    break
            else:
                raise DatasetPathError(f"missing {stem}[.gz] under {root}")
        out.append(load_idx(*paths))
    return out[0], out[1]


# transforms

def _subset_index(n: int, size: int | None, rng: RngState) -> np.ndarray:
    if size is None or size >= n:
        return np.arange(n)
    return np.sort(rng.choice_without_replacement(n, size))


def rotation_operator(degrees: float, side: int) -> np.ndarray:
    """Linear map ``D x D`` rotating a ``side x side`` image about its centre.

    Each source pixel's value is distributed bilinearly over the four target
    pixels around its rotated position (the adjoint of bilinear sampling), so
    no mass is created and whatever falls outside the frame is dropped.
    """
    centre = (side - 1) / 2.0
    theta = math.radians(degrees)
    c, s = math.cos(theta), math.sin(theta)
    rows, cols = np.mgrid[0:side, 0:side]
    y = rows.ravel() - centre
    x = cols.ravel() - centre
    ty = c * y - s * x + centre
    tx = s * y + c * x + centre
    y0 = np.floor(ty).astype(np.int64)
    x0 = np.floor(tx).astype(np.int64)
    fy = ty - y0
    fx = tx - x0
    src = np.arange(side * side)
    op = np.zeros((side * side, side * side))
    for dy, dx, w in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx), (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        yy, xx = y0 + dy, x0 + dx
        ok = (yy >= 0) & (yy < side) & (xx >= 0) & (xx < side) & (w > 0)
        np.add.at(op, (yy[ok] * side + xx[ok], src[ok]), w[ok])
    return op


def rotate_images(images: np.ndarray, degrees: float) -> np.ndarray:
    side = int(round(math.sqrt(images.shape[1])))
    if side * side != images.shape[1]:
        raise ParameterError("rotation needs square images")
    return np.clip(images @ rotation_operator(degrees, side).T, 0.0, 1.0)


def apply_transform(descriptor: dict, images: np.ndarray) -> np.ndarray:
    """Re-apply a task's transform descriptor to raw base images."""
    kind = descriptor["kind"]
    if kind == "permutation":
        return images[:, np.asarray(descriptor["permutation"])]
    if kind == "rotation":
        return rotate_images(images, descriptor["degrees"])
    if kind in ("split", "blob"):
        return images
    raise ParameterError(f"unknown transform kind {kind!r}")


def permuted_stream(train: ImageDataset, test: ImageDataset, n_tasks: int, seed: int, *,
                    identity_first: bool = False, train_subset: int | None = None,
                    test_subset: int | None = None) -> TaskStream:
    """Domain-incremental stream: one fixed pixel permutation per task."""
    if n_tasks < 1:
        raise ParameterError("need at least one task")
    rng = RngState(seed).split("permuted")
    classes = tuple(range(int(max(train.labels.max(), test.labels.max())) + 1))
    tasks = []
    for t in range(1, n_tasks + 1):
        if identity_first and t == 1:
            perm = np.arange(train.dim)
        else:
            perm = rng.split(("perm", t)).permutation(train.dim)
        desc = {"kind": "permutation", "seed": seed, "task": t, "identity": identity_first and t == 1,
                "permutation": perm.tolist()}
        tr = train.subset(_subset_index(len(train), train_subset, rng.split(("train-subset", t))))
        te = test.subset(_subset_index(len(test), test_subset, rng.split(("test-subset", t))))
        tasks.append(Task(t, ImageDataset(tr.images[:, perm], tr.labels),
                          ImageDataset(te.images[:, perm], te.labels), classes, desc))
    descriptor = {"kind": "permuted", "seed": seed, "tasks": n_tasks, "identity_first": identity_first,
                  "train_subset": train_subset, "test_subset": test_subset}
    return TaskStream(tasks, DOMAIN_INCREMENTAL, len(classes), descriptor)


def rotated_stream(train: ImageDataset, test: ImageDataset, n_tasks: int, seed: int, *,
                   train_subset: int | None = None, test_subset: int | None = None) -> TaskStream:
    """Domain-incremental stream: one rotation angle in [0, 180) per task."""
    if n_tasks < 1:
        raise ParameterError("need at least one task")
    rng = RngState(seed).split("rotated")
    classes = tuple(range(int(max(train.labels.max(), test.labels.max())) + 1))
    tasks = []
    for t in range(1, n_tasks + 1):
        degrees = float(rng.split(("angle", t)).uniform((), 0.0, 180.0))
        desc = {"kind": "rotation", "seed": seed, "task": t, "degrees": degrees}
        tr = train.subset(_subset_index(len(train), train_subset, rng.split(("train-subset", t))))
        te = test.subset(_subset_index(len(test), test_subset, rng.split(("test-subset", t))))
        tasks.append(Task(t, ImageDataset(rotate_images(tr.images, degrees), tr.labels),
                          ImageDataset(rotate_images(te.images, degrees), te.labels), classes, desc))
    descriptor = {"kind": "rotated", "seed": seed, "tasks": n_tasks,
                  "train_subset": train_subset, "test_subset": test_subset}
    return TaskStream(tasks, DOMAIN_INCREMENTAL, len(classes), descriptor)


def split_stream(train: ImageDataset, test: ImageDataset, classes_per_task: int, seed: int, *,
                 train_subset: int | None = None, test_subset: int | None = None) -> TaskStream:
    """Task-incremental stream over disjoint class groups.

    Labels inside each task are remapped to ``0..k-1``; ``Task.classes`` maps
    them back to the original class ids.
    """
    all_classes = np.unique(np.concatenate([train.labels, test.labels]))
    if classes_per_task < 1 or classes_per_task > len(all_classes):
        raise ParameterError(f"classes_per_task must be in [1, {len(all_classes)}]")
    rng = RngState(seed).split("split")
    order = all_classes[rng.split("class-order").permutation(len(all_classes))]
    groups = [tuple(int(c) for c in order[i:i + classes_per_task])
              for i in range(0, len(order), classes_per_task)]
    tasks = []
    for t, group in enumerate(groups, start=1):
        lookup = {c: i for i, c in enumerate(group)}
        parts = []
        for ds, name in ((train, "train"), (test, "test")):
            mask = np.isin(ds.labels, group)
            local = np.array([lookup[int(c)] for c in ds.labels[mask]], dtype=np.int64)
            sub = ImageDataset(ds.images[mask], local)
            size = train_subset if name == "train" else test_subset
            parts.append(sub.subset(_subset_index(len(sub), size, rng.split((f"{name}-subset", t)))))
        tasks.append(Task(t, parts[0], parts[1], group, {"kind": "split", "seed": seed, "task": t,
                                                          "classes": list(group)}))
    descriptor = {"kind": "split", "seed": seed, "classes_per_task": classes_per_task,
                  "train_subset": train_subset, "test_subset": test_subset}
    return TaskStream(tasks, TASK_INCREMENTAL, int(all_classes.max()) + 1, descriptor)


@dataclass(frozen=True)
class BlobSpec:
    """Isotropic Gaussian class blobs centred at ``centre`` in ``dim`` dimensions.

    Class means sit on orthonormal directions at distance ``separation`` from
    each other; ``sigma`` is the per-coordinate standard deviation.
    """

    dim: int = 8
    classes_per_task: int = 2
    separation: float = 0.5
    sigma: float = 0.05
    n_train: int = 200
    n_test: int = 200
    centre: float = 0.5

    def __post_init__(self):
        if self.classes_per_task < 2 or self.dim < self.classes_per_task:
            raise ParameterError("need 2 <= classes_per_task <= dim")
        if self.sigma <= 0 or self.separation < 0:
            raise ParameterError("sigma must be positive and separation non-negative")


def blob_bayes_accuracy(spec: BlobSpec) -> float:
    """Bayes accuracy for equiprobable classes with orthogonal, equidistant means."""
    k = spec.classes_per_task
    shift = spec.separation / math.sqrt(2.0) / spec.sigma
    if k == 2:
        return float(norm.cdf(spec.separation / (2.0 * spec.sigma)))
    val, _ = integrate.quad(lambda u: norm.pdf(u) * norm.cdf(u + shift) ** (k - 1), -np.inf, np.inf)
    return float(val)


def synthetic_stream(spec: BlobSpec, n_tasks: int, seed: int) -> TaskStream:
    """Task-incremental stream of Gaussian blob classification tasks."""
    if n_tasks < 1:
        raise ParameterError("need at least one task")
    rng = RngState(seed).split("blobs")
    k = spec.classes_per_task
    radius = spec.separation / math.sqrt(2.0)
    tasks = []
    for t in range(1, n_tasks + 1):
        q, _ = np.linalg.qr(rng.split(("directions", t)).normal((spec.dim, k)))
        means = spec.centre + radius * q.T  # k x dim
        sets = []
        for name, n in (("train", spec.n_train), ("test", spec.n_test)):
            r = rng.split((name, t))
            labels = np.arange(n) % k
            labels = labels[r.permutation(n)]
            x = means[labels] + spec.sigma * r.normal((n, spec.dim))
            sets.append(ImageDataset(np.clip(x, 0.0, 1.0), labels))
        classes = tuple(range((t - 1) * k, t * k))
        tasks.append(Task(t, sets[0], sets[1], classes, {"kind": "blob", "seed": seed, "task": t,
                                                          "means": means.tolist()}))
    descriptor = {"kind": "synthetic", "seed": seed, "tasks": n_tasks, "spec": spec.__dict__.copy()}
    bayes = [blob_bayes_accuracy(spec)] * n_tasks
    return TaskStream(tasks, TASK_INCREMENTAL, n_tasks * k, descriptor, bayes)


def rebuild_stream(descriptor: dict, train: ImageDataset | None = None, test: ImageDataset | None = None) -> TaskStream:
    """Regenerate a stream from its descriptor (and the same base data)."""
    kind = descriptor["kind"]
    if kind == "synthetic":
        return synthetic_stream(BlobSpec(**descriptor["spec"]), descriptor["tasks"], descriptor["seed"])
    if train is None or test is None:
        raise ParameterError(f"{kind} streams need the base datasets")
    if kind == "permuted":
        return permuted_stream(train, test, descriptor["tasks"], descriptor["seed"],
                               identity_first=descriptor["identity_first"],
                               train_subset=descriptor["train_subset"], test_subset=descriptor["test_subset"])
    if kind == "rotated":
        return rotated_stream(train, test, descriptor["tasks"], descriptor["seed"],
                              train_subset=descriptor["train_subset"], test_subset=descriptor["test_subset"])
    if kind == "split":
        return split_stream(train, test, descriptor["classes_per_task"], descriptor["seed"],
                            train_subset=descriptor["train_subset"], test_subset=descriptor["test_subset"])
    raise ParameterError(f"unknown stream kind {kind!r}")

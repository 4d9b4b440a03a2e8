"""Synthetic classification tasks with closed-form label posteriors.

Three generators are available:

``gaussian-mixture``
    Equal-prior isotropic Gaussian components with standard deviation
    ``overlap``.  Class means sit at unit pairwise distance (scaled by
    ``separation``).
``separable-linear``
    Labels are the argmax of a fixed linear map; points whose margin is
    below ``margin`` are rejected, so the task is linearly separable.
``ring``
    Concentric annuli in the first two feature dimensions; the radius of
    class ``k`` is folded-normal around ``k + 1`` with width ``overlap``.
    Remaining dimensions are pure noise.

Labels are drawn from the exact posterior ``q(.|x)`` and then optionally
flipped to a uniformly chosen different class at rate ``noise_rate``.
Features are standardized with the training split's statistics.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

GENERATORS = ("gaussian-mixture", "separable-linear", "ring")
SPLITS = ("train", "val", "test")


class TaskError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "gaussian-mixture"
    num_classes: int = 3
    dim: int = 2
    overlap: float = 0.5
    separation: float = 1.0
    margin: float = 1.0
    noise_rate: float = 0.0
    noise_splits: tuple = SPLITS
    n_train: int = 5000
    n_val: int = 1000
    n_test: int = 2000
    seed: int = 0

    def validate(self):
        if self.kind not in GENERATORS:
            raise TaskError(f"unknown generator kind {self.kind!r}")
        if self.num_classes < 2:
            raise TaskError("need at least two classes")
        if self.dim < 1:
            raise TaskError("feature dimension must be positive")
        if not 0.0 <= self.noise_rate < 1.0:
            raise TaskError("noise rate must lie in [0, 1)")
        if self.kind != "separable-linear" and self.overlap <= 0:
            raise TaskError("overlap scale must be positive")
        if self.kind == "ring" and self.dim < 2:
            raise TaskError("ring task needs at least two dimensions")
        if min(self.n_train, self.n_val, self.n_test) < 0 or self.n_train == 0:
            raise TaskError("sample counts must be non-negative with a non-empty train split")
        for s in self.noise_splits:
            if s not in SPLITS:
                raise TaskError(f"unknown split {s!r}")
        return self

    def to_dict(self):
        d = asdict(self)
        d["noise_splits"] = list(self.noise_splits)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "noise_splits" in d:
            d["noise_splits"] = tuple(d["noise_splits"])
        return cls(**d)


@dataclass(frozen=True)
class LabeledExample:
    features: np.ndarray
    label: int
    bayes_posterior: np.ndarray | None = None


@dataclass
class Dataset:
    """Column-oriented examples: features ``X[n, d]``, labels ``y[n]``."""

    X: np.ndarray
    y: np.ndarray
    num_classes: int
    posterior: np.ndarray | None = None
    clean_y: np.ndarray | None = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        X = np.asarray(self.X, dtype=np.float64)
        if X.ndim != 2:
            X = X.reshape(len(self.y), -1) if len(self.y) else X.reshape(0, 0)
        self.X = X
        if self.posterior is not None:
            self.posterior = np.asarray(self.posterior, dtype=np.float64)

    def __len__(self):
        return len(self.y)

    def __getitem__(self, i):
        post = None if self.posterior is None else self.posterior[i]
        return LabeledExample(self.X[i], int(self.y[i]), post)

    @property
    def dim(self):
        return self.X.shape[1]

    def subset(self, idx):
        idx = np.asarray(idx)
        return Dataset(
            self.X[idx], self.y[idx], self.num_classes,
            None if self.posterior is None else self.posterior[idx],
            None if self.clean_y is None else self.clean_y[idx],
        )


@dataclass
class TaskData:
    spec: TaskSpec
    train: Dataset
    val: Dataset
    test: Dataset
    # affine map from raw to stored features: x_std = (x_raw - shift) / scale
    shift: np.ndarray = field(default=None)
    scale: np.ndarray = field(default=None)
    # generator's linear map in standardized coordinates (separable-linear only)
    true_weights: np.ndarray | None = None
    true_bias: np.ndarray | None = None

    def split(self, name):
        return getattr(self, name)


# ---------------------------------------------------------------------------
# generators


def gaussian_means(num_classes, dim, separation=1.0):
    """Class means at pairwise distance ``separation`` (or a circle if dim < K)."""
    if dim >= num_classes:
        means = np.eye(num_classes, dim) / np.sqrt(2.0)
    elif dim >= 2:
        ang = 2.0 * np.pi * np.arange(num_classes) / num_classes
        radius = 0.5 / np.sin(np.pi / num_classes)
        means = np.zeros((num_classes, dim))
        means[:, 0] = radius * np.cos(ang)
        means[:, 1] = radius * np.sin(ang)
    else:
        means = (np.arange(num_classes, dtype=np.float64) - (num_classes - 1) / 2)[:, None]
    return separation * means


def gaussian_posterior(x, means, sigma):
    ll = -0.5 * ((x[:, None, :] - means[None]) ** 2).sum(-1) / sigma**2
    return np.exp(ll - logsumexp(ll, axis=1, keepdims=True))


def ring_posterior(x, num_classes, sigma):
    r = np.sqrt((x[:, :2] ** 2).sum(1))[:, None]
    centers = np.arange(1, num_classes + 1, dtype=np.float64)[None]
    # folded normal density in the radius; the 1/(2 pi r) Jacobian cancels
    a = -0.5 * ((r - centers) / sigma) ** 2
    b = -0.5 * ((r + centers) / sigma) ** 2
    ll = np.logaddexp(a, b)
    return np.exp(ll - logsumexp(ll, axis=1, keepdims=True))


def _draw_labels(rng, post):
    u = rng.random(len(post))[:, None]
    cdf = np.cumsum(post, axis=1)
    y = (u > cdf).sum(axis=1)
    return np.minimum(y, post.shape[1] - 1)


def _sample_gaussian(spec, rng, n):
    means = gaussian_means(spec.num_classes, spec.dim, spec.separation)
    comp = rng.integers(0, spec.num_classes, n)
    x = means[comp] + spec.overlap * rng.standard_normal((n, spec.dim))
    post = gaussian_posterior(x, means, spec.overlap)
    return x, _draw_labels(rng, post), post


def _sample_ring(spec, rng, n):
    comp = rng.integers(0, spec.num_classes, n)
    r = np.abs(comp + 1.0 + spec.overlap * rng.standard_normal(n))
    theta = rng.uniform(0.0, 2.0 * np.pi, n)
    x = rng.standard_normal((n, spec.dim))
    x[:, 0] = r * np.cos(theta)
    x[:, 1] = r * np.sin(theta)
    post = ring_posterior(x, spec.num_classes, spec.overlap)
    return x, _draw_labels(rng, post), post


def _linear_map(spec):
    rng = np.random.default_rng([spec.seed, 7919])
    w = rng.standard_normal((spec.num_classes, spec.dim))
    return w / np.linalg.norm(w, axis=1, keepdims=True)


def _sample_separable(spec, rng, n):
    w = _linear_map(spec)
    xs, ys = [np.empty((0, spec.dim))], [np.empty(0, dtype=np.int64)]
    have = 0
    while have < n:
        x = 2.0 * rng.standard_normal((2 * (n - have) + 16, spec.dim))
        s = x @ w.T
        top = np.sort(s, axis=1)
        keep = top[:, -1] - top[:, -2] >= spec.margin
        xs.append(x[keep])
        ys.append(s[keep].argmax(axis=1))
        have += int(keep.sum())
    x = np.concatenate(xs)[:n]
    y = np.concatenate(ys)[:n]
    return x, y, np.eye(spec.num_classes)[y]


_SAMPLERS = {
    "gaussian-mixture": _sample_gaussian,
    "ring": _sample_ring,
    "separable-linear": _sample_separable,
}


def inject_label_noise(data, rate, seed):
    """Replace each label, with probability ``rate``, by a uniform other class.

    The posterior column is left alone; it describes the clean task.
    """
    if not 0.0 <= rate < 1.0:
        raise TaskError("noise rate must lie in [0, 1)")
    if rate == 0.0:
        return data
    rng = np.random.default_rng(seed)
    n, k = len(data), data.num_classes
    flip = rng.random(n) < rate
    offset = rng.integers(1, k, n)
    y = np.where(flip, (data.y + offset) % k, data.y)
    clean = data.y if data.clean_y is None else data.clean_y
    return Dataset(data.X, y, k, data.posterior, clean)


def generate(spec):
    """Deterministically build train/val/test splits for ``spec``."""
    spec.validate()
    counts = {"train": spec.n_train, "val": spec.n_val, "test": spec.n_test}
    raw = {}
    for i, name in enumerate(SPLITS):
        rng = np.random.default_rng([spec.seed, i])
        raw[name] = _SAMPLERS[spec.kind](spec, rng, counts[name])

    shift = raw["train"][0].mean(axis=0)
    scale = raw["train"][0].std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)

    splits = {}
    for i, name in enumerate(SPLITS):
        x, y, post = raw[name]
        ds = Dataset((x - shift) / scale, y, spec.num_classes, post)
        if name in spec.noise_splits:
            ds = inject_label_noise(ds, spec.noise_rate, [spec.seed, 101 + i])
        splits[name] = ds

    tw = tb = None
    if spec.kind == "separable-linear":
        w = _linear_map(spec)
        tw = w * scale[None]
        tb = w @ shift
    return TaskData(spec, splits["train"], splits["val"], splits["test"],
                    shift, scale, tw, tb)


def bayes_error(data):
    """Analytic Bayes error ``E[1 - max_k q(k|x)]`` averaged over the split."""
    if data.posterior is None:
        raise TaskError("dataset has no posterior column")
    return float(np.mean(1.0 - data.posterior.max(axis=1)))


def mean_entropy(data):
    p = data.posterior
    return float(-np.mean(np.sum(np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0), axis=1)))


# ---------------------------------------------------------------------------
# CSV


class CSVFormatError(ValueError):
    def __init__(self, path, line, message):
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


def load_csv(path, num_classes, dim=None):
    """Read ``feature_0,...,feature_{d-1},label`` rows.

    A header row (non-numeric first line) is skipped.  Empty files give an
    empty dataset.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    feats, labels = [], []
    with path.open(newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if row[0].lstrip().startswith("#"):
                continue
            if lineno == 1 and row[0].strip().startswith("feature"):
                continue
            if len(row) < 2:
                raise CSVFormatError(path, lineno, "need at least one feature and a label")
            if dim is not None and len(row) != dim + 1:
                raise CSVFormatError(path, lineno, f"expected {dim + 1} fields, got {len(row)}")
            try:
                x = [float(v) for v in row[:-1]]
                label = float(row[-1])
            except ValueError as exc:
                raise CSVFormatError(path, lineno, f"non-numeric field ({exc})") from None
            if label != int(label) or not 0 <= label < num_classes:
                raise CSVFormatError(path, lineno, f"label {row[-1]} outside 0..{num_classes - 1}")
            if feats and len(x) != len(feats[0]):
                raise CSVFormatError(path, lineno, "inconsistent number of features")
            feats.append(x)
            labels.append(int(label))
    d = dim if dim is not None else (len(feats[0]) if feats else 0)
    X = np.asarray(feats, dtype=np.float64).reshape(len(labels), d)
    return Dataset(X, np.asarray(labels, dtype=np.int64), num_classes)


def save_csv(data, path):
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"feature_{j}" for j in range(data.dim)] + ["label"])
        for x, y in zip(data.X, data.y):
            w.writerow([repr(float(v)) for v in x] + [int(y)])


def export_task(task, directory):
    """Write one CSV per split plus ``task.json`` with the spec and posteriors."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    side = {"spec": task.spec.to_dict(), "splits": {}}
    for name in SPLITS:
        ds = task.split(name)
        save_csv(ds, directory / f"{name}.csv")
        entry = {"n": len(ds)}
        if ds.posterior is not None:
            entry["bayes_posterior"] = ds.posterior.tolist()
        if ds.clean_y is not None:
            entry["clean_label"] = ds.clean_y.tolist()
        side["splits"][name] = entry
    (directory / "task.json").write_text(json.dumps(side))
    return directory


def import_task(directory):
    """Inverse of :func:`export_task`."""
    directory = Path(directory)
    side = json.loads((directory / "task.json").read_text())
    spec = TaskSpec.from_dict(side["spec"])
    parts = {}
    for name in SPLITS:
        ds = load_csv(directory / f"{name}.csv", spec.num_classes, spec.dim)
        entry = side["splits"][name]
        if "bayes_posterior" in entry:
            ds.posterior = np.asarray(entry["bayes_posterior"], dtype=np.float64).reshape(len(ds), -1)
        if "clean_label" in entry:
            ds.clean_y = np.asarray(entry["clean_label"], dtype=np.int64)
        parts[name] = ds
    return TaskData(spec, parts["train"], parts["val"], parts["test"])


def with_noise(spec, rate):
    return replace(spec, noise_rate=rate)

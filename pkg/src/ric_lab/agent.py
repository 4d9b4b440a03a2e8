"""Recurrent actor-critic over the probability simplex.

The network has four parts, all shared across refinement steps:

* an MLP encoder ``e(x)`` (two layers, width ``hidden``),
* a GRU cell updating the thought state from ``[e(x); a_prev]``,
* a Dirichlet policy head with mean ``softmax(W tau)`` and concentration
  ``c`` squashed into ``[c_min, c_max]``; ``alpha = mu * c + eps``,
* a scalar value head.

Graph-building functions (``encode``, ``think_step``, ``policy_head``,
``value_head``, ``dirichlet_log_prob``) take a dict of :class:`Tensor`
parameters as produced by :meth:`Params.tensors`.  Actions fed back into the
GRU are plain arrays, so gradients reach the policy only through
log-probability terms.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .special import lgamma as _np_lgamma

CHECKPOINT_FORMAT = "ric-lab-checkpoint/1"
ACTIVATIONS = {"silu": dc.silu, "relu": dc.relu, "tanh": dc.tanh}
TINY = np.finfo(np.float64).tiny


@dataclass(frozen=True)
class AgentConfig:
    input_dim: int
    num_classes: int
    hidden: int = 64
    activation: str = "silu"
    c_min: float = 1.0
    c_max: float = 10.0
    eps: float = 0.01
    c_mode: str = "sigmoid"  # or "clip": hard clip of the raw head output
    init_scale: float = 1.0

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.c_mode not in ("sigmoid", "clip"):
            raise ValueError(f"unknown concentration mode {self.c_mode!r}")
        if not 0 < self.c_min <= self.c_max:
            raise ValueError("need 0 < c_min <= c_max")
        if self.num_classes < 2 or self.input_dim < 1 or self.hidden < 1:
            raise ValueError("degenerate network dimensions")


# ---------------------------------------------------------------------------
# value types


@dataclass
class SimplexVector:
    """Points on the simplex, batched along the first axis.

    ``log_probs`` is carried alongside ``probs`` so coordinates far below
    the float64 range keep a finite log.
    """

    probs: np.ndarray
    log_probs: np.ndarray

    @classmethod
    def from_probs(cls, probs):
        probs = np.asarray(probs, dtype=np.float64)
        with np.errstate(divide="ignore"):
            return cls(probs, np.log(probs))

    @classmethod
    def from_log(cls, log_probs):
        log_probs = np.asarray(log_probs, dtype=np.float64)
        return cls(np.maximum(np.exp(log_probs), TINY), log_probs)

    @classmethod
    def uniform(cls, num_classes, batch=None):
        shape = (num_classes,) if batch is None else (batch, num_classes)
        return cls.from_probs(np.full(shape, 1.0 / num_classes))

    def is_interior(self):
        return bool(np.all(self.probs > 0) and np.all(self.probs < 1)
                    and np.all(np.isfinite(self.log_probs)))


@dataclass
class DirichletParams:
    mu: np.ndarray
    c: np.ndarray
    alpha: np.ndarray

    @classmethod
    def from_mean(cls, mu, c, eps=0.01):
        mu = np.asarray(mu, dtype=np.float64)
        c = np.asarray(c, dtype=np.float64)
        return cls(mu, c, mu * np.expand_dims(c, -1) + eps)

    @classmethod
    def from_alpha(cls, alpha):
        alpha = np.asarray(alpha, dtype=np.float64)
        total = alpha.sum(axis=-1)
        return cls(alpha / total[..., None], total, alpha)


# ---------------------------------------------------------------------------
# parameters


def param_shapes(cfg):
    d, k, h = cfg.input_dim, cfg.num_classes, cfg.hidden
    return {
        "enc_w1": (h, d), "enc_b1": (h,),
        "enc_w2": (h, h), "enc_b2": (h,),
        "gru_wx": (3 * h, h + k), "gru_bx": (3 * h,),
        "gru_wh": (3 * h, h), "gru_bh": (3 * h,),
        "pi_w": (k, h), "pi_b": (k,),
        "c_w": (1, h), "c_b": (1,),
        "v_w": (1, h), "v_b": (1,),
    }


def supervised_shapes(cfg):
    d, k, h = cfg.input_dim, cfg.num_classes, cfg.hidden
    return {
        "enc_w1": (h, d), "enc_b1": (h,),
        "enc_w2": (h, h), "enc_b2": (h,),
        "cls_w": (k, h), "cls_b": (k,),
    }


class Params:
    """Ordered named float64 arrays plus the config that shaped them."""

    def __init__(self, config, arrays, kind="ric"):
        self.config = config
        self.kind = kind
        self.arrays = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}

    def __getitem__(self, name):
        return self.arrays[name]

    def __iter__(self):
        return iter(self.arrays)

    def items(self):
        return self.arrays.items()

    def copy(self):
        return Params(self.config, {k: v.copy() for k, v in self.arrays.items()}, self.kind)

    def tensors(self, requires_grad=False):
        return {k: dc.Tensor(v, requires_grad=requires_grad, name=k)
                for k, v in self.arrays.items()}

    @property
    def num_parameters(self):
        return int(sum(v.size for v in self.arrays.values()))

    def flat(self):
        return np.concatenate([v.ravel() for v in self.arrays.values()])

    def with_flat(self, vec):
        out, pos = {}, 0
        for k, v in self.arrays.items():
            out[k] = np.asarray(vec[pos:pos + v.size], dtype=np.float64).reshape(v.shape)
            pos += v.size
        return Params(self.config, out, self.kind)

    def is_finite(self):
        return all(np.all(np.isfinite(v)) for v in self.arrays.values())


def init_params(cfg, rng, kind="ric"):
    """Glorot-style uniform init; GRU update-gate bias starts at 0."""
    shapes = param_shapes(cfg) if kind == "ric" else supervised_shapes(cfg)
    arrays = {}
    for name, shape in shapes.items():
        if len(shape) == 1:
            arrays[name] = np.zeros(shape)
        else:
            fan_out, fan_in = shape
            lim = cfg.init_scale * np.sqrt(6.0 / (fan_in + fan_out))
            arrays[name] = rng.uniform(-lim, lim, size=shape)
    # small classifier heads: both models start close to the uniform prediction
    arrays["pi_w" if kind == "ric" else "cls_w"] *= 0.1
    if kind == "ric":
        # start the concentration near the middle of its range
        arrays["c_w"][:] = 0.0
    return Params(cfg, arrays, kind)


def zero_params(cfg, kind="ric"):
    shapes = param_shapes(cfg) if kind == "ric" else supervised_shapes(cfg)
    return Params(cfg, {k: np.zeros(s) for k, s in shapes.items()}, kind)


# ---------------------------------------------------------------------------
# network pieces (graph building)


def encode(p, x, cfg):
    x = dc._as_tensor(x)
    if x.shape[-1] != cfg.input_dim:
        raise dc.ShapeError("encode", p["enc_w1"].shape, x.shape)
    act = ACTIVATIONS[cfg.activation]
    hidden = act(dc.matvec(p["enc_w1"], x) + p["enc_b1"])
    return act(dc.matvec(p["enc_w2"], hidden) + p["enc_b2"])


def think_step(p, embedding, tau_prev, a_prev, cfg):
    """One GRU update over ``[embedding; a_prev]`` with hidden state ``tau_prev``."""
    h = cfg.hidden
    a_prev = np.asarray(a_prev.probs if isinstance(a_prev, SimplexVector) else a_prev)
    if not np.all(np.isfinite(a_prev)):
        raise dc.NonFiniteError("non-finite previous action")
    u = dc.concat([embedding, a_prev], axis=-1)
    gx = dc.matvec(p["gru_wx"], u) + p["gru_bx"]
    gh = dc.matvec(p["gru_wh"], tau_prev) + p["gru_bh"]
    z = dc.sigmoid(gx[..., :h] + gh[..., :h])
    r = dc.sigmoid(gx[..., h:2 * h] + gh[..., h:2 * h])
    n = dc.tanh(gx[..., 2 * h:] + r * gh[..., 2 * h:])
    return n + z * (tau_prev - n)


def concentration(raw, cfg):
    if cfg.c_mode == "clip":
        return dc.clip(raw, cfg.c_min, cfg.c_max)
    return cfg.c_min + (cfg.c_max - cfg.c_min) * dc.sigmoid(raw)


def policy_head(p, tau, cfg):
    """Return ``(mu, c, alpha)`` tensors; ``c`` keeps a trailing unit axis."""
    mu = dc.softmax(dc.matvec(p["pi_w"], tau) + p["pi_b"])
    c = concentration(dc.matvec(p["c_w"], tau) + p["c_b"], cfg)
    alpha = mu * c + cfg.eps
    return mu, c, alpha


def value_head(p, tau):
    return (dc.matvec(p["v_w"], tau) + p["v_b"])[..., 0]


def dirichlet_log_prob(alpha, log_a):
    """Dirichlet log-density at ``exp(log_a)``; ``alpha`` may be a Tensor."""
    log_a = np.asarray(log_a, dtype=np.float64)
    if not np.all(np.isfinite(log_a)):
        raise ValueError("action on the simplex boundary: log-density undefined")
    alpha = dc._as_tensor(alpha)
    return (dc.lgamma(dc.sum(alpha, axis=-1)) - dc.sum(dc.lgamma(alpha), axis=-1)
            + dc.sum((alpha - 1.0) * log_a, axis=-1))


def supervised_logits(p, x, cfg):
    return dc.matvec(p["cls_w"], encode(p, x, cfg)) + p["cls_b"]


# ---------------------------------------------------------------------------
# array-level API


class Agent:
    """Convenience wrapper evaluating the network without recording."""

    def __init__(self, params):
        self.params = params
        self.config = params.config
        self._t = params.tensors()

    def encode(self, x):
        with dc.no_grad():
            return encode(self._t, np.atleast_2d(x), self.config).data

    def initial_state(self, batch):
        return np.zeros((batch, self.config.hidden))

    def think_step(self, embedding, tau_prev, a_prev):
        with dc.no_grad():
            return think_step(self._t, embedding, tau_prev, a_prev, self.config).data

    def policy_head(self, tau):
        with dc.no_grad():
            mu, c, alpha = policy_head(self._t, tau, self.config)
        return DirichletParams(mu.data, c.data[..., 0], alpha.data)

    def value_head(self, tau):
        with dc.no_grad():
            return value_head(self._t, tau).data


def sample_action(d, rng):
    """Dirichlet draw via log-space Gamma variates.

    ``Gamma(a) = Gamma(a + 1) * U**(1/a)`` keeps every log-coordinate finite
    even for concentrations far below one.
    """
    alpha = np.asarray(d.alpha if isinstance(d, DirichletParams) else d, dtype=np.float64)
    g = rng.standard_gamma(alpha + 1.0)
    u = rng.random(alpha.shape)
    log_g = np.log(g) + np.log(u) / alpha
    m = log_g.max(axis=-1, keepdims=True)
    log_a = log_g - m - np.log(np.exp(log_g - m).sum(axis=-1, keepdims=True))
    return SimplexVector.from_log(log_a)


def log_prob(d, a):
    alpha = d.alpha if isinstance(d, DirichletParams) else d
    if isinstance(a, SimplexVector):
        log_a = a.log_probs
    else:
        a = np.asarray(a, dtype=np.float64)
        if np.any(a <= 0):
            raise ValueError("Dirichlet log-density needs strictly positive components")
        log_a = np.log(a)
    with dc.no_grad():
        return dirichlet_log_prob(alpha, log_a).data


def deterministic_action(d):
    alpha = d.alpha if isinstance(d, DirichletParams) else np.asarray(d, dtype=np.float64)
    return SimplexVector.from_probs(alpha / alpha.sum(axis=-1, keepdims=True))


def dirichlet_mean_log(alpha):
    """``E[log a_k]`` under ``Dir(alpha)`` (digamma difference)."""
    from .special import digamma
    alpha = np.asarray(alpha, dtype=np.float64)
    return digamma(alpha) - digamma(alpha.sum(axis=-1, keepdims=True))


def log_normalizer(alpha):
    alpha = np.asarray(alpha, dtype=np.float64)
    return _np_lgamma(alpha).sum(axis=-1) - _np_lgamma(alpha.sum(axis=-1))


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params, path, rng=None, extra=None):
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (little-endian f8)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    for name, arr in params.items():
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "kind": params.kind,
        "config": asdict(params.config),
        "tensors": entries,
        "count": offset,
        "rng_state": None if rng is None else rng.bit_generator.state,
        "extra": extra or {},
    }
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1))
    path.with_suffix(".bin").write_bytes(params.flat().astype("<f8").tobytes())
    return path


def load_checkpoint(path):
    """Return ``(params, rng_or_None, extra)``."""
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {manifest.get('format')!r}")
    blob = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8")
    if blob.size != manifest["count"]:
        raise ValueError("checkpoint blob size does not match manifest")
    cfg = AgentConfig(**manifest["config"])
    arrays = {}
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        arrays[e["name"]] = blob[e["offset"]:e["offset"] + n].reshape(e["shape"]).astype(np.float64)
    rng = None
    if manifest.get("rng_state") is not None:
        rng = np.random.default_rng()
        rng.bit_generator.state = manifest["rng_state"]
    return Params(cfg, arrays, manifest["kind"]), rng, manifest.get("extra", {})

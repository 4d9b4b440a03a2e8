"""Snapshot-round actor-critic training and the supervised baseline.

Each round freezes a copy of the parameters.  For ``passes_per_snapshot``
passes over the training set, every minibatch is rolled out under the
frozen policy, advantages come from GAE with the frozen critic's values,
and the live parameters take one step on the clipped-ratio policy loss
plus ``value_coef`` times the value regression loss.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import diffcore as dc
from .agent import (Agent, AgentConfig, dirichlet_log_prob, encode, init_params,
                    policy_head, supervised_logits, think_step, value_head)
from .episodes import infer_with_halting, rollout
from .metrics import MetricLog, deterministic_steps, ece
from .optim import clip_by_global_norm, make_optimizer

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.8
    gae_lambda: float = 0.95
    horizon: int = 20
    passes_per_snapshot: int = 5
    value_coef: float = 0.5
    clip_ratio: float = 0.2
    objective: str = "clipped"
    normalize_advantages: bool = True
    optimizer: str = "adam"
    lr: float = 3e-4
    momentum: float = 0.9
    weight_decay: float = 0.001
    grad_clip: float = 0.5
    batch_size: int = 256
    epochs: int = 2000
    seed: int = 0
    hidden: int = 64
    activation: str = "silu"
    c_mode: str = "sigmoid"
    init_scale: float = 1.0
    eval_every: int = 1
    eval_train_size: int = 1000
    ece_bins: int = 15
    halting_in_eval: bool = True
    max_abs_log_prob: float = 1e6

    def validate(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("gae_lambda must lie in [0, 1]")
        if self.passes_per_snapshot < 1 or self.horizon < 1:
            raise ValueError("passes_per_snapshot and horizon must be at least 1")
        if self.clip_ratio <= 0:
            raise ValueError("clip ratio must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be positive and epochs non-negative")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        return self

    def agent_config(self, input_dim, num_classes):
        return AgentConfig(input_dim, num_classes, hidden=self.hidden,
                           activation=self.activation, c_mode=self.c_mode,
                           init_scale=self.init_scale)

    # flat ``key = value`` text

    def to_text(self):
        return "".join(f"{f.name} = {_to_str(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text, **overrides):
        kinds = {f.name: f.type for f in fields(cls)}
        defaults = cls()
        values = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected 'key = value'")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in kinds:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            values[key] = _parse(raw, type(getattr(defaults, key)))
        for key, raw in overrides.items():
            if key not in kinds:
                raise ValueError(f"unknown config key {key!r}")
            if raw is not None:
                values[key] = _parse(raw, type(getattr(defaults, key))) if isinstance(raw, str) else raw
        return replace(defaults, **values).validate()

    @classmethod
    def from_file(cls, path, **overrides):
        with open(path) as fh:
            return cls.from_text(fh.read(), **overrides)


def _to_str(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse(raw, kind):
    if kind is bool:
        low = raw.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {raw!r}")
        return low in ("true", "1", "yes")
    return kind(raw)


# ---------------------------------------------------------------------------
# advantages


@dataclass
class AdvantageEstimates:
    advantages: np.ndarray
    returns: np.ndarray


def gae(traj, gamma, lam):
    """Generalized advantage estimates over a step-major trajectory batch.

    Accepts a :class:`Trajectory` or a ``(rewards, values, bootstrap)``
    tuple with ``rewards`` and ``values`` shaped ``[T, ...]``.
    """
    if isinstance(traj, tuple):
        rewards, values, bootstrap = (np.asarray(a, dtype=np.float64) for a in traj)
    else:
        rewards, values, bootstrap = traj.rewards, traj.values, traj.bootstrap
    T = rewards.shape[0]
    adv = np.empty_like(rewards)
    acc = np.zeros_like(bootstrap)
    next_v = bootstrap
    for t in range(T - 1, -1, -1):
        delta = rewards[t] + gamma * next_v - values[t]
        acc = delta + gamma * lam * acc
        adv[t] = acc
        next_v = values[t]
    return AdvantageEstimates(adv, adv + values)


# ---------------------------------------------------------------------------
# losses


def forward_trajectory(p, traj, cfg):
    """Re-evaluate the recorded actions under parameter tensors ``p``.

    Returns per-step lists of log-probability and value tensors, each of
    shape ``[B]``.
    """
    emb = encode(p, traj.x, cfg)
    tau = dc.Tensor(np.zeros((traj.batch, cfg.hidden)))
    logps, vals = [], []
    for t in range(traj.horizon):
        tau = think_step(p, emb, tau, traj.actions[t], cfg)
        _, _, alpha = policy_head(p, tau, cfg)
        logps.append(dirichlet_log_prob(alpha, traj.log_actions[t + 1]))
        vals.append(value_head(p, tau))
    return logps, vals


def clipped_surrogate(logps, old_logps, adv, clip):
    """Negated mean of ``min(rho * A, clip(rho, 1 - e, 1 + e) * A)``."""
    total = None
    for t, lp in enumerate(logps):
        ratio = dc.exp(lp - old_logps[t])
        a = adv[t]
        term = dc.sum(dc.minimum(ratio * a, dc.clip(ratio, 1.0 - clip, 1.0 + clip) * a))
        total = term if total is None else total + term
    return -total / adv.size


def vanilla_surrogate(logps, old_logps, adv, clip):
    """Importance-weighted policy gradient without clipping."""
    total = None
    for t, lp in enumerate(logps):
        term = dc.sum(dc.exp(lp - old_logps[t]) * adv[t])
        total = term if total is None else total + term
    return -total / adv.size


OBJECTIVES = {"clipped": clipped_surrogate, "vanilla": vanilla_surrogate}


def policy_surrogate(traj, params, params_old=None, clip=0.2, advantages=None,
                     objective="clipped", gamma=0.8, lam=0.95):
    """Surrogate loss tensor for a batch sampled under ``params_old``.

    Old log-probabilities are recomputed under ``params_old`` when it is
    given and read from ``traj.log_probs`` otherwise.  Advantages default
    to GAE over the stored values.  Returns the loss and its leaf tensors.
    """
    if advantages is None:
        advantages = gae(traj, gamma, lam).advantages
    old = traj.log_probs
    if params_old is not None:
        with dc.no_grad():
            old = np.stack([lp.data for lp in
                            forward_trajectory(params_old.tensors(), traj, params_old.config)[0]])
    p = params.tensors(requires_grad=True)
    logps, _ = forward_trajectory(p, traj, params.config)
    return OBJECTIVES[objective](logps, old, np.asarray(advantages), clip), p


def value_loss(traj, params, targets):
    p = params.tensors(requires_grad=True)
    _, vals = forward_trajectory(p, traj, params.config)
    return _value_loss(vals, np.asarray(targets)), p


def _value_loss(vals, targets):
    total = None
    for t, v in enumerate(vals):
        term = dc.sum(dc.square(v - targets[t]))
        total = term if total is None else total + term
    return total / targets.size


# ---------------------------------------------------------------------------
# evaluation


def evaluate_ric(params, data, cfg, max_examples=None, epoch=0, split="val"):
    X, y = data.X, data.y
    if max_examples is not None and len(y) > max_examples:
        X, y = X[:max_examples], y[:max_examples]
    preds, _ = deterministic_steps(params, X, cfg.horizon)
    final = preds[-1]
    rep = ece(final, y, cfg.ece_bins)
    k = params.config.num_classes
    idx = np.arange(len(y))
    log_y = np.log(np.concatenate([np.full((1, len(y)), 1.0 / k), preds[:, idx, y]]))
    # undiscounted telescoped return: log a_{T,y} + log K
    ret = float(np.mean(log_y[-1] - log_y[0]))
    halt = float("nan")
    if cfg.halting_in_eval:
        rec = infer_with_halting(X, params, cfg.horizon)
        halt = float(np.mean(rec.halt_step))
    return rep.to_csv_row(epoch, split, float(ret / np.log(k)), halt)


def evaluate_supervised(params, data, cfg, max_examples=None, epoch=0, split="val"):
    X, y = data.X, data.y
    if max_examples is not None and len(y) > max_examples:
        X, y = X[:max_examples], y[:max_examples]
    probs = predict_supervised(params, X)
    rep = ece(probs, y, cfg.ece_bins)
    k = params.config.num_classes
    ret = float(np.mean(np.log(probs[np.arange(len(y)), y]) + np.log(k)))
    return rep.to_csv_row(epoch, split, float(ret / np.log(k)), float("nan"))


def predict_supervised(params, X):
    with dc.no_grad():
        return dc.softmax(supervised_logits(params.tensors(), X, params.config)).data


# ---------------------------------------------------------------------------
# training loops


def _batch_rng(seed, epoch, batch):
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, batch]))


def _order(seed, epoch, n):
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, 2**31 - 1])).permutation(n)


def ric_update(params, snapshot, traj, optimizer, cfg):
    """One combined policy/value step against the snapshot rollouts.

    Returns a dict of diagnostics; ``skipped`` is set if any importance
    ratio was non-finite.
    """
    est = gae(traj, cfg.gamma, cfg.gae_lambda)
    adv = est.advantages
    if cfg.normalize_advantages and adv.size > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    p = params.tensors(requires_grad=True)
    logps, vals = forward_trajectory(p, traj, params.config)
    new_lp = np.stack([lp.data for lp in logps])
    ratio = np.exp(new_lp - traj.log_probs)
    if not np.all(np.isfinite(ratio)):
        return {"skipped": True, "ratio_max": float("inf")}
    pol = OBJECTIVES[cfg.objective](logps, traj.log_probs, adv, cfg.clip_ratio)
    val = _value_loss(vals, est.returns)
    loss = pol + cfg.value_coef * val
    grads = dc.backward(loss)
    g = {name: grads[t] for name, t in p.items() if t in grads}
    gnorm = clip_by_global_norm(g, cfg.grad_clip)
    optimizer.step(params, g)
    return {"skipped": False, "policy_loss": float(pol.data), "value_loss": float(val.data),
            "grad_norm": gnorm, "ratio_max": float(ratio.max()),
            "mean_abs_log_prob": float(np.mean(np.abs(traj.log_probs)))}


def train_ric(task, cfg, params=None, callback=None):
    """Train the recurrent agent on ``task.train``; returns ``(params, MetricLog)``.

    ``callback(epoch, params, log)`` runs after each epoch; returning
    ``True`` stops training early.
    """
    cfg.validate()
    train = task.train
    if len(train) == 0:
        raise ValueError("empty training set")
    if params is None:
        params = init_params(cfg.agent_config(train.dim, train.num_classes),
                             np.random.default_rng(np.random.SeedSequence([cfg.seed, 17])))
    opt = make_optimizer(cfg.optimizer, cfg.lr, cfg.weight_decay, cfg.momentum)
    mlog = MetricLog()
    snapshot = params.copy()
    snap_agent = Agent(snapshot)
    t0 = time.time()
    for epoch in range(1, cfg.epochs + 1):
        if (epoch - 1) % cfg.passes_per_snapshot == 0:
            snapshot = params.copy()
            snap_agent = Agent(snapshot)
        order = _order(cfg.seed, epoch, len(train))
        skipped, diag = 0, []
        for b, start in enumerate(range(0, len(train), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            traj = rollout(train.X[idx], train.y[idx], snap_agent, cfg.horizon,
                           _batch_rng(cfg.seed, epoch, b))
            if np.mean(np.abs(traj.log_probs)) > cfg.max_abs_log_prob:
                raise TrainingDiverged(f"mean |log_prob| exceeded bound at epoch {epoch}")
            info = ric_update(params, snapshot, traj, opt, cfg)
            skipped += info["skipped"]
            diag.append(info)
        if not params.is_finite():
            raise TrainingDiverged(f"non-finite parameters after epoch {epoch}")
        mlog.extras.append(_extras(epoch, params, diag, skipped, time.time() - t0))
        if cfg.eval_every and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            mlog.append(evaluate_ric(params, train, cfg, cfg.eval_train_size, epoch, "train"))
            if len(task.val):
                mlog.append(evaluate_ric(params, task.val, cfg, None, epoch, "val"))
        if callback is not None and callback(epoch, params, mlog):
            break
    return params, mlog


def _extras(epoch, params, diag, skipped, elapsed):
    ok = [d for d in diag if not d["skipped"]]
    out = {"epoch": epoch, "w_norm": float(np.linalg.norm(params["pi_w"])),
           "skipped_updates": skipped, "elapsed": elapsed}
    if ok:
        out["value_loss"] = float(np.mean([d["value_loss"] for d in ok]))
        out["grad_norm"] = float(np.mean([d["grad_norm"] for d in ok]))
    return out


def supervised_config(cfg):
    return replace(cfg, epochs=max(1, cfg.epochs * 3 // 20))


def train_supervised(task, cfg, params=None, callback=None):
    """Cross-entropy training of encoder + linear classifier in one pass."""
    cfg.validate()
    train = task.train
    if len(train) == 0:
        raise ValueError("empty training set")
    acfg = cfg.agent_config(train.dim, train.num_classes)
    if params is None:
        params = init_params(acfg, np.random.default_rng(np.random.SeedSequence([cfg.seed, 17])),
                             kind="supervised")
    opt = make_optimizer(cfg.optimizer, cfg.lr, cfg.weight_decay, cfg.momentum)
    mlog = MetricLog()
    t0 = time.time()
    for epoch in range(1, cfg.epochs + 1):
        order = _order(cfg.seed, epoch, len(train))
        for start in range(0, len(train), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            p = params.tensors(requires_grad=True)
            logits = supervised_logits(p, train.X[idx], acfg)
            loss = -dc.mean(dc.pick(dc.log_softmax(logits), train.y[idx]))
            grads = dc.backward(loss)
            g = {name: grads[t] for name, t in p.items() if t in grads}
            clip_by_global_norm(g, cfg.grad_clip)
            opt.step(params, g)
        if not params.is_finite():
            raise TrainingDiverged(f"non-finite parameters after epoch {epoch}")
        mlog.extras.append({"epoch": epoch, "w_norm": float(np.linalg.norm(params["cls_w"])),
                            "elapsed": time.time() - t0})
        if cfg.eval_every and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            mlog.append(evaluate_supervised(params, train, cfg, cfg.eval_train_size, epoch, "train"))
            if len(task.val):
                mlog.append(evaluate_supervised(params, task.val, cfg, None, epoch, "val"))
        if callback is not None and callback(epoch, params, mlog):
            break
    return params, mlog


def config_dict(cfg):
    return asdict(cfg)

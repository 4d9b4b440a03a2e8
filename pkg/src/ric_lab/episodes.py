"""Episode rollouts, shaped rewards and value-based halting.

An episode starts from the uniform prediction ``a_0`` and zero thought
state.  Step ``t`` updates the thought state from ``(x, tau_{t-1},
a_{t-1})``, reads the policy and value heads, and emits ``a_t``.  The
label is only touched when rewards are computed from the finished action
sequence; the network pass in :func:`policy_pass` never sees it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .agent import (Agent, SimplexVector, deterministic_action, dirichlet_log_prob,
                    policy_head, sample_action, think_step, value_head)


def shaped_reward(a_prev_y, a_y):
    """Log-score improvement ``log a_y - log a_prev_y`` for the true class."""
    a_prev_y = np.asarray(a_prev_y, dtype=np.float64)
    a_y = np.asarray(a_y, dtype=np.float64)
    if np.any(a_prev_y <= 0) or np.any(a_y <= 0):
        raise ValueError("zero probability for the true class: interior support violated")
    if np.any(a_prev_y > 1) or np.any(a_y > 1):
        raise ValueError("probabilities must not exceed one")
    return np.log(a_y) - np.log(a_prev_y)


@dataclass
class Trajectory:
    """A batch of episodes of common horizon ``T``.

    Arrays are step-major: ``log_actions[t]`` holds ``log a_t`` for
    ``t = 0..T`` (``t = 0`` is the uniform prior); ``log_probs``, ``rewards``,
    ``values`` and ``taus`` are indexed ``0..T-1`` for steps ``1..T``;
    ``bootstrap`` is ``V_{T+1}``.
    """

    x: np.ndarray
    y: np.ndarray
    actions: np.ndarray
    log_actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    bootstrap: np.ndarray
    taus: np.ndarray
    concentrations: np.ndarray

    @property
    def horizon(self):
        return self.rewards.shape[0]

    @property
    def batch(self):
        return self.rewards.shape[1]

    def returns(self, gamma=1.0):
        disc = gamma ** np.arange(self.horizon)
        return (disc[:, None] * self.rewards).sum(axis=0)

    def telescoping_gap(self):
        """``sum_t r_t - (log a_{T,y} - log a_{0,y})`` per episode."""
        idx = np.arange(self.batch)
        ends = self.log_actions[-1][idx, self.y] - self.log_actions[0][idx, self.y]
        return self.rewards.sum(axis=0) - ends

    def to_jsonl(self, fh):
        """Write one JSON object per episode."""
        for i in range(self.batch):
            rec = {
                "x": self.x[i].tolist(),
                "y": int(self.y[i]),
                "actions": self.actions[:, i].tolist(),
                "log_prob": self.log_probs[:, i].tolist(),
                "reward": self.rewards[:, i].tolist(),
                "value": self.values[:, i].tolist(),
                "bootstrap": float(self.bootstrap[i]),
                "concentration": self.concentrations[:, i].tolist(),
            }
            fh.write(json.dumps(rec) + "\n")


def policy_pass(agent, x, horizon, rng=None):
    """Run the network for ``horizon`` steps without any label.

    With ``rng`` actions are sampled, otherwise the Dirichlet mean is used.
    Returns ``(actions, log_actions, log_probs, values, bootstrap, taus,
    concentrations)``; ``actions`` are the exact arrays fed back to the GRU.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n, k = len(x), agent.config.num_classes
    emb = agent.encode(x)
    tau = agent.initial_state(n)
    a = SimplexVector.uniform(k, n)
    actions = np.empty((horizon + 1, n, k))
    log_actions = np.empty((horizon + 1, n, k))
    actions[0] = a.probs
    log_actions[0] = a.log_probs
    log_probs = np.empty((horizon, n))
    values = np.empty((horizon, n))
    taus = np.empty((horizon, n, agent.config.hidden))
    concs = np.empty((horizon, n))
    t_ = agent._t
    cfg = agent.config
    with dc.no_grad():
        for t in range(horizon):
            tau = think_step(t_, emb, tau, a.probs, cfg).data
            if not np.all(np.isfinite(tau)):
                raise dc.NonFiniteError(f"non-finite thought state at step {t + 1}")
            mu, c, alpha = policy_head(t_, tau, cfg)
            values[t] = value_head(t_, tau).data
            a = sample_action(alpha.data, rng) if rng is not None else deterministic_action(alpha.data)
            log_probs[t] = dirichlet_log_prob(alpha.data, a.log_probs).data
            actions[t + 1] = a.probs
            log_actions[t + 1] = a.log_probs
            taus[t] = tau
            concs[t] = c.data[:, 0]
        tau_next = think_step(t_, emb, tau, a.probs, cfg).data
        bootstrap = value_head(t_, tau_next).data
    return actions, log_actions, log_probs, values, bootstrap, taus, concs


def rollout(x, y, params, horizon, rng, deterministic=False):
    """Sample one episode per row of ``x`` under ``params``."""
    agent = params if isinstance(params, Agent) else Agent(params)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    actions, log_actions, log_probs, values, bootstrap, taus, concs = policy_pass(
        agent, x, horizon, None if deterministic else rng)
    idx = np.arange(len(y))
    log_y = log_actions[:, idx, y]
    rewards = np.diff(log_y, axis=0)
    traj = Trajectory(np.atleast_2d(x), y, actions, log_actions, log_probs, rewards,
                      values, bootstrap, taus, concs)
    if __debug__:
        gap = np.abs(traj.telescoping_gap())
        assert np.all(gap <= 1e-9 * np.maximum(1.0, np.abs(log_y).max(axis=0))), gap.max()
    return traj


def sample_geometric_horizon(gamma, rng, size=None):
    """Draw ``N`` with ``P(N = t) = (1 - gamma) * gamma**(t - 1)``, ``t >= 1``."""
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    return rng.geometric(1.0 - gamma, size=size)


@dataclass
class HaltingRecord:
    """Batched outcome of value-halted inference.

    ``halt_step[i]`` is the step whose value estimate triggered the stop
    (or ``max_steps``); ``refinements[i]`` counts emitted actions.
    ``values[:, i]`` is NaN after the halt.
    """

    halt_step: np.ndarray
    refinements: np.ndarray
    prediction: np.ndarray
    values: np.ndarray

    def __len__(self):
        return len(self.halt_step)


def infer_with_halting(x, params, max_steps, check_first_step=True):
    """Deterministic refinement that stops once ``V(s_t) < 0``.

    The value of ``s_t`` is read before the action for step ``t`` is taken,
    so a stop at step ``t`` returns ``a_{t-1}``.  ``V = 0`` continues.
    With ``check_first_step=False`` the step-1 check is skipped.
    """
    if max_steps < 1:
        raise ValueError("max_steps must be at least 1")
    agent = params if isinstance(params, Agent) else Agent(params)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n, k = len(x), agent.config.num_classes
    emb = agent.encode(x)
    tau = agent.initial_state(n)
    a = np.full((n, k), 1.0 / k)
    pred = a.copy()
    active = np.ones(n, dtype=bool)
    halt = np.full(n, max_steps, dtype=np.int64)
    refinements = np.zeros(n, dtype=np.int64)
    values = np.full((max_steps, n), np.nan)
    for t in range(1, max_steps + 1):
        tau = agent.think_step(emb, tau, a)
        v = agent.value_head(tau)
        values[t - 1, active] = v[active]
        if t > 1 or check_first_step:
            stop = active & (v < 0)
            halt[stop] = t
            pred[stop] = a[stop]
            active &= ~stop
        a = deterministic_action(agent.policy_head(tau)).probs
        pred[active] = a[active]
        refinements[active] += 1
        if not active.any():
            break
    return HaltingRecord(halt, refinements, pred, values)

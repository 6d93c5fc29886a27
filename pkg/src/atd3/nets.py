"""Actor and critic networks.

The attention actor encodes the observation window with a tanh recurrence,
scores every hidden state against the final one with concatenation attention,
and maps the attention-weighted context to a normalised action in [-1, 1].
Networks take batches of windows shaped ``(batch, window, 3)``; observations
are standardised with fixed constants before entering any layer.

Each network keeps its weights in a plain ``dict[str, np.ndarray]``.  There
are two evaluation paths: ``forward_tape`` records onto a
:class:`~atd3.numerics.Tape` for training, ``__call__`` is a numpy-only
inference path used for rollouts and target computation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .env import WINDOW
from .numerics import Node, ShapeError, Tape

HIDDEN = 100
OBS_MEAN = np.array([15.0, 0.0, 25.0])
OBS_STD = np.array([8.0, 2.0, 15.0])


def normalize(states: np.ndarray) -> np.ndarray:
    return (np.asarray(states, dtype=np.float64) - OBS_MEAN) / OBS_STD


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _check_states(states: np.ndarray, window: int) -> np.ndarray:
    states = np.asarray(states, dtype=np.float64)
    if states.ndim == 2:
        states = states[None]
    if states.ndim != 3 or states.shape[2] != 3 or states.shape[1] < window:
        raise ShapeError(f"expected states of shape (batch, {window}, 3), got {states.shape}")
    if states.shape[1] != window and window == WINDOW:
        raise ShapeError(f"attention actor needs exactly {WINDOW} observations, got {states.shape[1]}")
    return states[:, -window:, :]


class Network:
    """Shared parameter handling."""

    params: dict[str, np.ndarray]

    def copy(self):
        clone = object.__new__(type(self))
        clone.__dict__.update(self.__dict__)
        clone.params = {k: v.copy() for k, v in self.params.items()}
        return clone

    def load(self, params: Mapping[str, np.ndarray]) -> None:
        for k, v in params.items():
            if self.params[k].shape != v.shape:
                raise ShapeError(f"{k}: {v.shape} does not match {self.params[k].shape}")
            self.params[k][...] = v

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def tape_params(self, tape: Tape, trainable: bool = True) -> dict[str, Node]:
        leaf = tape.param if trainable else tape.const
        return {k: leaf(v, name=k) for k, v in self.params.items()}


class AttentionActor(Network):
    """Recurrent encoder + concatenation attention + tanh action head."""

    kind = "attention"

    def __init__(self, params: dict[str, np.ndarray], window: int = WINDOW):
        self.params = params
        self.window = window
        self.hidden = params["W_E"].shape[0]

    @classmethod
    def init(cls, rng: np.random.Generator, hidden: int = HIDDEN) -> "AttentionActor":
        params = {
            "U_E": _uniform(rng, 3, (3, hidden)),
            "W_E": _uniform(rng, hidden, (hidden, hidden)),
            "W1_a": _uniform(rng, 2 * hidden, (2 * hidden, hidden)),
            "W2_a": _uniform(rng, hidden, (hidden, 1)),
            "W_c": _uniform(rng, hidden, (hidden, 1)),
        }
        return cls(params)

    def forward_tape(self, tape: Tape, states, p: dict[str, Node] | None = None):
        """Record the forward pass; returns ``(action, beta)`` nodes, shapes (B,1) and (B,T)."""
        states = normalize(_check_states(states, self.window))
        p = self.tape_params(tape) if p is None else p
        batch = states.shape[0]
        hs = []
        h = None
        for j in range(self.window):
            z = tape.const(states[:, j, :]) @ p["U_E"]
            if h is not None:
                z = z + h @ p["W_E"]
            h = tape.tanh(z)
            hs.append(h)
        keys = tape.concat(hs, axis=0)
        query = tape.concat([h] * self.window, axis=0)
        e = tape.tanh(tape.concat([query, keys], axis=1) @ p["W1_a"])
        flat_scores = e @ p["W2_a"]
        scores = tape.concat([tape.slice(flat_scores, rows=(j * batch, (j + 1) * batch))
                              for j in range(self.window)], axis=1)
        beta = tape.softmax(scores)
        context = None
        for j in range(self.window):
            term = tape.mul_col(hs[j], tape.slice(beta, cols=(j, j + 1)))
            context = term if context is None else context + term
        action = tape.tanh(context @ p["W_c"])
        return action, beta

    def __call__(self, states):
        """Numpy inference: ``(action (B,), beta (B, T))`` with action in [-1, 1]."""
        states = normalize(_check_states(states, self.window))
        P = self.params
        batch = states.shape[0]
        hs = np.empty((self.window, batch, self.hidden))
        h = None
        for j in range(self.window):
            z = states[:, j, :] @ P["U_E"]
            if h is not None:
                z = z + h @ P["W_E"]
            h = np.tanh(z)
            hs[j] = h
        H = self.hidden
        # [h_f; h_j] @ W1_a split into its query and key halves
        pre = (hs.reshape(self.window * batch, H) @ P["W1_a"][H:]).reshape(self.window, batch, H)
        pre += h @ P["W1_a"][:H]
        e = np.tanh(pre, out=pre)
        scores = (e.reshape(-1, H) @ P["W2_a"]).reshape(self.window, batch).T
        scores = scores - scores.max(axis=1, keepdims=True)
        w = np.exp(scores)
        beta = w / w.sum(axis=1, keepdims=True)
        context = (beta.T[:, :, None] * hs).sum(axis=0)
        action = np.tanh(context @ P["W_c"])[:, 0]
        return action, beta


class MlpActor(Network):
    """Feed-forward actor over the newest ``window`` observations (flattened)."""

    kind = "mlp"

    def __init__(self, params: dict[str, np.ndarray], window: int):
        self.params = params
        self.window = window

    @classmethod
    def init(cls, rng: np.random.Generator, window: int, hidden: int = HIDDEN) -> "MlpActor":
        n_in = 3 * window
        params = {
            "W1": _uniform(rng, n_in, (n_in, hidden)), "b1": _uniform(rng, n_in, (1, hidden)),
            "W2": _uniform(rng, hidden, (hidden, hidden)), "b2": _uniform(rng, hidden, (1, hidden)),
            "W3": _uniform(rng, hidden, (hidden, 1)), "b3": _uniform(rng, hidden, (1, 1)),
        }
        return cls(params, window)

    def forward_tape(self, tape: Tape, states, p: dict[str, Node] | None = None):
        x = normalize(_check_states(states, self.window)).reshape(-1, 3 * self.window)
        p = self.tape_params(tape) if p is None else p
        h = tape.tanh(tape.const(x) @ p["W1"] + p["b1"])
        h = tape.tanh(h @ p["W2"] + p["b2"])
        return tape.tanh(h @ p["W3"] + p["b3"]), None

    def __call__(self, states):
        x = normalize(_check_states(states, self.window)).reshape(-1, 3 * self.window)
        P = self.params
        h = np.tanh(x @ P["W1"] + P["b1"])
        h = np.tanh(h @ P["W2"] + P["b2"])
        return np.tanh(h @ P["W3"] + P["b3"])[:, 0], None


class Critic(Network):
    """Q(s, a): two tanh hidden layers over the flattened window and the action."""

    def __init__(self, params: dict[str, np.ndarray], window: int = WINDOW):
        self.params = params
        self.window = window

    @classmethod
    def init(cls, rng: np.random.Generator, window: int = WINDOW, hidden: int = HIDDEN) -> "Critic":
        n_in = 3 * window + 1
        params = {
            "W1": _uniform(rng, n_in, (n_in, hidden)), "b1": _uniform(rng, n_in, (1, hidden)),
            "W2": _uniform(rng, hidden, (hidden, hidden)), "b2": _uniform(rng, hidden, (1, hidden)),
            "W3": _uniform(rng, hidden, (hidden, 1)), "b3": _uniform(rng, hidden, (1, 1)),
        }
        return cls(params, window)

    def _inputs(self, states) -> np.ndarray:
        return normalize(_check_states(states, self.window)).reshape(-1, 3 * self.window)

    def forward_tape(self, tape: Tape, states, action: Node, p: dict[str, Node] | None = None) -> Node:
        """``action`` is a (B, 1) node of normalised actions; returns Q as (B, 1)."""
        x = self._inputs(states)
        if action.shape != (x.shape[0], 1):
            raise ShapeError(f"action node has shape {action.shape}, expected ({x.shape[0]}, 1)")
        p = self.tape_params(tape) if p is None else p
        inp = tape.concat([tape.const(x), action], axis=1)
        h = tape.tanh(inp @ p["W1"] + p["b1"])
        h = tape.tanh(h @ p["W2"] + p["b2"])
        return h @ p["W3"] + p["b3"]

    def __call__(self, states, actions) -> np.ndarray:
        x = self._inputs(states)
        a = np.asarray(actions, dtype=np.float64).reshape(-1, 1)
        if a.shape[0] != x.shape[0]:
            raise ShapeError(f"{a.shape[0]} actions for {x.shape[0]} states")
        P = self.params
        h = np.tanh(np.concatenate([x, a], axis=1) @ P["W1"] + P["b1"])
        h = np.tanh(h @ P["W2"] + P["b2"])
        return (h @ P["W3"] + P["b3"])[:, 0]


@dataclass
class TargetSet:
    actor: Network
    critic1: Critic
    critic2: Critic | None


def soft_update(target: Network, main: Network, tau: float) -> None:
    """``target <- tau * main + (1 - tau) * target`` for every matrix, in place."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    for k, t in target.params.items():
        m = main.params[k]
        if m.shape != t.shape:
            raise ShapeError(f"{k}: target {t.shape} vs main {m.shape}")
        t *= 1.0 - tau
        t += tau * m


def parameter_set(actor: Network, critic1: Critic, critic2: Critic | None,
                  targets: TargetSet | None = None) -> dict[str, np.ndarray]:
    """Flat, labelled view of every matrix for persistence."""
    out = dict(actor.params)
    for prefix, net in (("critic1_", critic1), ("critic2_", critic2)):
        if net is not None:
            out.update({prefix + k: v for k, v in net.params.items()})
    if targets is not None:
        out.update({"targets_actor_" + k: v for k, v in targets.actor.params.items()})
        out.update({"targets_critic1_" + k: v for k, v in targets.critic1.params.items()})
        if targets.critic2 is not None:
            out.update({"targets_critic2_" + k: v for k, v in targets.critic2.params.items()})
    return out

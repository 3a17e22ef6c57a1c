"""Small known MDP with an exact value-iteration solution, used to check
that batch DQN recovers the optimal policy from uniformly logged data."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .preprocess import TransitionSet


@dataclass
class ToyMDP:
    P: np.ndarray       # (S, A, S) transition probabilities
    R: np.ndarray       # (S, A) deterministic rewards
    gamma: float

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]

    def one_hot(self, s) -> np.ndarray:
        return np.eye(self.n_states)[np.asarray(s, dtype=int)]


def chain_mdp(gamma: float = 0.5, slip: float = 0.2) -> ToyMDP:
    """Five-state chain. Actions: 0 left, 1 stay, 2 right. Moving right from
    the last state wraps to the first. With probability ``slip`` the agent
    lands in a uniformly random state instead."""
    S, A = 5, 3
    utility = np.array([0.0, 0.1, 0.25, 0.5, 1.0])
    P = np.zeros((S, A, S))
    for s in range(S):
        dest = {0: max(s - 1, 0), 1: s, 2: (s + 1) % S}
        for a, d in dest.items():
            P[s, a] += slip / S
            P[s, a, d] += 1.0 - slip
    R = P @ utility
    return ToyMDP(P, R, gamma)


def value_iteration(mdp: ToyMDP, tol: float = 1e-12, max_iter: int = 100_000):
    """Return (V*, Q*, greedy policy) by iterating the Bellman optimality operator."""
    V = np.zeros(mdp.n_states)
    for _ in range(max_iter):
        Q = mdp.R + mdp.gamma * mdp.P @ V
        V_new = Q.max(axis=1)
        if np.max(np.abs(V_new - V)) < tol:
            V = V_new
            break
        V = V_new
    Q = mdp.R + mdp.gamma * mdp.P @ V
    return V, Q, Q.argmax(axis=1)


def logged_dataset(mdp: ToyMDP, n: int = 10_000, seed: int = 0) -> TransitionSet:
    """Transitions with uniformly random states and actions, one-hot states."""
    rng = np.random.default_rng(seed)
    s = rng.integers(0, mdp.n_states, size=n)
    a = rng.integers(0, mdp.n_actions, size=n)
    cum = np.cumsum(mdp.P[s, a], axis=1)
    s2 = np.minimum((rng.random(n)[:, None] > cum).sum(axis=1), mdp.n_states - 1)
    return TransitionSet(
        states=mdp.one_hot(s),
        actions=a,
        rewards=mdp.R[s, a],
        next_states=mdp.one_hot(s2),
        terminal=np.zeros(n, dtype=bool),
        patient_ids=np.array([f"toy{i % 100:03d}" for i in range(n)], dtype=object),
        encounter_index=np.arange(n) // 100,
    )

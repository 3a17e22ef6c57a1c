"""
Batch DQN on a five-state chain
===============================

The chain has known dynamics, so value iteration gives the exact optimal
policy. We log 10,000 transitions with uniformly random actions and check
that a network trained only on that log picks the same actions.
"""
import numpy as np

from regimenrl import qnet, toy_mdp
from regimenrl import trainer as tr

mdp = toy_mdp.chain_mdp(gamma=0.5)
V, Q, pi = toy_mdp.value_iteration(mdp)
print("exact Q*:")
print(np.round(Q, 3))
print("optimal actions (0 left, 1 stay, 2 right):", pi)

data = toy_mdp.logged_dataset(mdp, n=10_000, seed=0)
print("logged actions per state:", np.bincount(data.states.argmax(1) * 3 + data.actions).reshape(5, 3).tolist())

cfg = tr.TrainConfig(gamma=0.5, hidden_sizes=(64, 64), learning_rate=1e-3,
                     target_sync_period=100, max_iterations=3000, early_stop_patience=None)
params, report = tr.train_dqn(data, None, cfg)

states = mdp.one_hot(np.arange(mdp.n_states))
print("learned Q:")
print(np.round(qnet.forward(params, states), 3))
greedy = tr.recommend(params, states)
print("greedy actions:", greedy, "match:", bool((greedy == pi).all()))

# the TD error curve flattens once the targets stop moving
for point in report.curve[::5]:
    print(f"iteration {point['iteration']:5d}  td_error {point['td_error']:.5f}")

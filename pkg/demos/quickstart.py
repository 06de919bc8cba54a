"""Train SGP on a small synthetic task sequence and print the accuracy matrix.

Run with ``python demos/quickstart.py``.
"""

import numpy as np

from sgp import Dense, Network, ScaleConfig, TrainConfig, compute_metrics, gen_synthetic_split, train_continual

tasks = gen_synthetic_split(seed=0, tasks=5)
net = Network([Dense(64, 64), Dense(64, 64)], rng=0)
result = train_continual(net, tasks, TrainConfig(seed=0, scale=ScaleConfig(alpha=10, epsilon_th=0.97)))

# row i holds test accuracy on tasks 1..i+1 right after training task i+1
np.set_printoptions(precision=3, suppress=True)
print(result.accuracy)

acc, bwt = compute_metrics(result.accuracy)
print(f"ACC={acc:.4f} BWT={bwt:+.4f}")
print("bases per layer:", result.memory.sizes)

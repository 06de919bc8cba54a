"""Why Adam has to be projected after its update, not before.

Feeding projected gradients into plain Adam lets the per-coordinate
rescaling rotate the step back into protected directions. Projecting the
Adam direction keeps every step orthogonal to the memory.
"""

import numpy as np

from sgp import Dense, LayerMemory, Network, OptimizerState
from sgp.gpm import BasisMemory
from sgp.net import Gradients
from sgp.optim import step

rng = np.random.default_rng(0)
basis, _ = np.linalg.qr(rng.standard_normal((6, 2)))
memory = BasisMemory([LayerMemory(basis, np.ones(2))])

start = Network([Dense(6, 4)], rng=0)
start.add_head(1, 3, rng)
grads = [Gradients(0.0, [rng.standard_normal((4, 6))], rng.standard_normal((3, 4)), 1) for _ in range(2)]

for kind in ("adam_gp", "adam_preprojected"):
    net = start.copy()
    state = OptimizerState(kind, lr=1e-3)
    for t in range(100):
        step(net, grads[t % 2], memory, state)
    leak = np.abs((net.weights[0] - start.weights[0]) @ basis).max()
    print(f"{kind:>18}: largest update component along protected bases = {leak:.2e}")

"""Compare SGP at a few alphas with GPM and unconstrained fine-tuning.

The task suite shares most of its input subspace between tasks, which is
where scaling the projection (instead of blocking it) pays off. All methods
see the same data and the same initial weights.
"""

from sgp import Dense, Network, ScaleConfig, TrainConfig, compute_metrics, compute_relative_fwt, gen_synthetic_split, train_continual

tasks = gen_synthetic_split(0, tasks=10, dim=40, classes_per_task=3, shared_dim=8, private_dim=3,
                            overlap=0.9, subspace_noise=True, cluster_spread=1.0, separation=2.5)

runs = {
    "finetune": ScaleConfig(mode="finetune"),
    "gpm": ScaleConfig(mode="gpm"),
    "sgp a=1": ScaleConfig(alpha=1),
    "sgp a=10": ScaleConfig(alpha=10),
}
matrices = {}
for name, scale in runs.items():
    net = Network([Dense(40, 48), Dense(48, 48)], rng=100)
    matrices[name] = train_continual(net, tasks, TrainConfig(seed=0, scale=scale)).accuracy

for name, r in matrices.items():
    acc, bwt = compute_metrics(r)
    fwt = compute_relative_fwt(r, matrices["gpm"])
    print(f"{name:>9}: ACC={acc:.4f} BWT={bwt:+.4f} FWT vs GPM={fwt:+.4f}")

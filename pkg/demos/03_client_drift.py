"""Show client drift: many local steps pull averaging off the true optimum.

Two clients with different curvatures (1 and 5) and different optima (0 and
2). The global optimum weights the stiffer client more: x* = 10/6. With one
local step per round, plain averaging hovers around x*; with twenty, each
client walks most of the way to its own optimum before averaging, and the
fixed point slides toward the unweighted blend of client optima.
"""

import numpy as np

from fedagm import (
    ClientShard,
    ExperimentConfig,
    FederatedProblem,
    LocalConfig,
    QuadraticTask,
    RngStream,
    SamplingSpec,
    make_quadratic_client_data,
    named_optimizer,
    run_experiment,
)

X_STAR = 10.0 / 6.0


def build_problem():
    tasks = [
        QuadraticTask(np.array([1.0]), np.array([0.0])),
        QuadraticTask(np.array([5.0]), np.array([2.0])),
    ]
    shards = [
        ClientShard(make_quadratic_client_data(t, 16, 0.0, RngStream(1)), 0.5) for t in tasks
    ]
    return FederatedProblem(tasks, shards)


def tail_point(problem, K, rounds, seed):
    cfg = ExperimentConfig(
        problem=problem,
        local=LocalConfig(K=K, gamma=0.02, batch_size=16),
        sampling=SamplingSpec(S=1),
        server=named_optimizer("FedAvg", eta=1.0),
        rounds=rounds,
        seed=seed,
        eval_every=rounds,
        record_iterates=True,
        init_x=np.array([0.0]),
    )
    result = run_experiment(cfg)
    return float(np.stack(result.iterates)[-(rounds // 4):].mean())


def main():
    problem = build_problem()
    print(f"global optimum x* = {X_STAR:.4f};  unweighted blend of client optima = 1.0")
    print("one client sampled per round; equal total gradient budgets\n")
    print(f"{'K':>4} {'rounds':>8} {'tail-average point':>20} {'|x - x*|':>10}")
    for K, rounds in ((1, 6000), (5, 1200), (10, 600), (20, 300)):
        points = [tail_point(problem, K, rounds, seed) for seed in range(10)]
        mean_pt = float(np.mean(points))
        print(f"{K:>4} {rounds:>8} {mean_pt:>20.4f} {abs(mean_pt - X_STAR):>10.4f}")
    print(
        "\nThe drift grows with K even though every row consumed the same number\n"
        "of local gradients: averaging after long excursions is not the same\n"
        "algorithm as averaging after short ones."
    )


if __name__ == "__main__":
    main()

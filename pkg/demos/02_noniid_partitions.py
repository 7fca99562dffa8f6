"""Carve one labeled dataset into client shards of varying skew.

Three schemes: dirichlet (per-client class mix drawn from a Dirichlet with
concentration alpha), sort (each client holds at most a fixed number of
classes), and uniform (iid split). Low alpha or few classes per client means
highly non-IID shards; the mean per-client label entropy summarizes the skew.
"""

import numpy as np

from fedagm import (
    PartitionSpec,
    RngStream,
    empirical_label_histogram,
    make_blobs_dataset,
    mean_label_entropy,
    partition,
)

N_CLIENTS = 8
N_CLASSES = 6


def describe(shards, title):
    hist = empirical_label_histogram(shards, N_CLASSES)
    print(f"\n{title}")
    print(f"  mean label entropy {mean_label_entropy(hist):.4f} (max {np.log(N_CLASSES):.4f})")
    print(f"  {'client':<8}{'rows':>6}  class shares")
    for i, shard in enumerate(shards):
        shares = "".join(f"{v:>6.2f}" for v in hist[i])
        print(f"  {i:<8}{shard.data.n:>6}  {shares}")


def main():
    data = make_blobs_dataset(960, N_CLASSES, 4, RngStream(0).derive(1))

    for alpha in (0.05, 1.0, 100.0):
        spec = PartitionSpec(scheme="dirichlet", N=N_CLIENTS, alpha=alpha)
        shards = partition(data, spec, RngStream(0).derive(2))
        describe(shards, f"dirichlet, alpha = {alpha}")

    spec = PartitionSpec(scheme="sort", N=N_CLIENTS, classes_per_client=2)
    describe(partition(data, spec, RngStream(0).derive(3)), "sort, 2 classes per client")

    spec = PartitionSpec(scheme="uniform", N=N_CLIENTS)
    describe(partition(data, spec, RngStream(0).derive(4)), "uniform (iid)")

    print("\nentropy vs alpha, averaged over 20 partition seeds:")
    for alpha in (0.05, 0.2, 0.5, 1.0, 10.0, 100.0):
        vals = []
        for seed in range(20):
            spec = PartitionSpec(scheme="dirichlet", N=N_CLIENTS, alpha=alpha)
            shards = partition(data, spec, RngStream(seed).derive(2))
            vals.append(mean_label_entropy(empirical_label_histogram(shards, N_CLASSES)))
        bar = "#" * int(40 * np.mean(vals) / np.log(N_CLASSES))
        print(f"  alpha {alpha:>7.2f}  entropy {np.mean(vals):.4f}  {bar}")


if __name__ == "__main__":
    main()

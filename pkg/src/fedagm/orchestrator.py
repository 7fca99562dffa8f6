"""The round loop: sample clients, run inner loops from the broadcast
point, average, take the server step, advance schedules, record metrics.

Determinism contract: with a fixed seed the metric log is bit-identical
under any thread count and any client-execution order. Three mechanisms
carry that guarantee: every (round, slot) pair derives its own RNG stream,
results land in slot-indexed cells, and aggregation always sums finals in
ascending (client, slot) order.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .errors import ParameterError, StructuralError
from .local import LocalConfig, run_local
from .numerics import RngStream, l2_norm_sq
from .partition import ClientShard
from .sampling import SamplingSpec, sample_round
from .serialize import RoundMetrics
from .server import (
    ServerOptimizer,
    ServerState,
    aggregate,
    init_server_state,
    recover_baseline,
    server_step,
)
from .tasks import Dataset, Task, evaluate, full_gradient, init_params

# Stream tags: fixed keys that keep the per-purpose child streams apart.
TAG_INIT = 0x696E6974
TAG_DATA = 0x64617461
TAG_PARTITION = 0x70617274
TAG_SAMPLE = 0x73616D70
TAG_LOCAL = 0x6C6F636C

SCHEDULE_KINDS = ("constant", "multistage", "plateau")


@dataclass(frozen=True)
class ScheduleSpec:
    """Stepsize multiplier policy, applied round by round.

    constant    multiplier 1 throughout;
    multistage  multiplier shrinks by `decay` at each fraction of the run
                (defaults: x0.1 at T/2 and again at 3T/4);
    plateau     multiplier shrinks by `factor` whenever the best training
                loss has not improved for `patience` consecutive rounds.
    """

    kind: str = "constant"
    decay: float = 0.1
    fractions: tuple = (0.5, 0.75)
    patience: int = 10
    factor: float = 0.1

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ParameterError(f"schedule kind must be one of {SCHEDULE_KINDS}, got {self.kind!r}")
        if not 0 < self.decay <= 1 or not 0 < self.factor <= 1:
            raise ParameterError("decay and factor must lie in (0, 1]")
        if any(not 0 < f < 1 for f in self.fractions):
            raise ParameterError("schedule fractions must lie in (0, 1)")
        if self.patience < 1:
            raise ParameterError("patience must be >= 1")


def apply_schedule(schedule: ScheduleSpec, t: int, T: int, plateau_decays: int = 0) -> float:
    """Multiplier for round t of T; plateau_decays is the tracker's count so far."""
    if not 0 <= t < T:
        raise ParameterError(f"round index {t} outside [0, {T})")
    if schedule.kind == "constant":
        return 1.0
    if schedule.kind == "multistage":
        crossed = sum(1 for f in schedule.fractions if t >= f * T)
        return schedule.decay**crossed
    return schedule.factor**plateau_decays


class PlateauTracker:
    """Counts decay events: one per `patience` consecutive non-improving rounds."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.bad = 0
        self.decays = 0

    def update(self, loss: float) -> None:
        if loss < self.best:
            self.best = loss
            self.bad = 0
            return
        self.bad += 1
        if self.bad >= self.patience:
            self.decays += 1
            self.bad = 0


@dataclass
class FederatedProblem:
    """N clients' objectives and shards, plus an optional global test set.

    Data-driven problems share one task object across clients; synthetic
    quadratic federations give each client its own. The global objective is
    the weight-p mixture of the client objectives.
    """

    client_tasks: list[Task]
    shards: list[ClientShard]
    test_data: Dataset | None = None

    def __post_init__(self):
        if len(self.client_tasks) != len(self.shards) or not self.shards:
            raise StructuralError("need one task per shard, at least one client")
        total = sum(shard.weight for shard in self.shards)
        if abs(total - 1.0) > 1e-9:
            raise StructuralError(f"shard weights must sum to 1, got {total!r}")

    @property
    def N(self) -> int:
        return len(self.shards)

    @property
    def dim(self) -> int:
        return self.client_tasks[0].dim

    @property
    def weights(self) -> np.ndarray:
        return np.array([shard.weight for shard in self.shards])

    def global_gradient(self, x: np.ndarray) -> np.ndarray:
        grads = np.stack(
            [full_gradient(t, s.data, x) for t, s in zip(self.client_tasks, self.shards)]
        )
        return self.weights @ grads

    def gradient_stats(self, x: np.ndarray) -> tuple[float, float]:
        """(||grad f(x)||^2, weighted client-gradient dissimilarity) in one pass."""
        grads = np.stack(
            [full_gradient(t, s.data, x) for t, s in zip(self.client_tasks, self.shards)]
        )
        p = self.weights
        mean = p @ grads
        gaps = ((grads - mean) ** 2).sum(axis=1)
        return float(mean @ mean), float(p @ gaps)

    def train_loss(self, x: np.ndarray) -> float:
        p = self.weights
        return float(
            sum(
                w * evaluate(t, s.data, x)[0]
                for w, t, s in zip(p, self.client_tasks, self.shards)
            )
        )

    def test_metrics(self, x: np.ndarray) -> tuple[float, float]:
        if self.test_data is None:
            return 0.0, 0.0
        return evaluate(self.client_tasks[0], self.test_data, x)


@dataclass
class ExperimentConfig:
    """Everything one deterministic run needs."""

    problem: FederatedProblem
    local: LocalConfig
    sampling: SamplingSpec
    server: ServerOptimizer
    rounds: int
    seed: int = 0
    gamma_schedule: ScheduleSpec = ScheduleSpec()
    eta_schedule: ScheduleSpec = ScheduleSpec()
    eval_every: int = 1
    init_x: np.ndarray | None = None
    record_walltime: bool = False
    record_iterates: bool = False
    record_drift: bool = False
    divergence_loss_cap: float = 1e12

    def __post_init__(self):
        if self.rounds < 1:
            raise ParameterError("rounds must be >= 1")
        if self.eval_every < 1:
            raise ParameterError("eval_every must be >= 1")


@dataclass
class ExperimentResult:
    """Metric log plus the final server state and optional diagnostics."""

    metrics: list[RoundMetrics]
    state: ServerState
    method: str
    diverged: bool = False
    divergence_round: int | None = None
    iterates: list | None = None
    drift: np.ndarray | None = None

    @property
    def grad_norm_history(self) -> np.ndarray:
        return np.array([row.grad_norm_sq for row in self.metrics])

    @property
    def final_x(self) -> np.ndarray:
        return self.state.x


def _resolve_threads(threads: int | None) -> int:
    if threads is not None:
        return max(1, threads)
    return max(1, int(os.environ.get("FEDOPT_THREADS", "1")))


def run_experiment(
    cfg: ExperimentConfig,
    threads: int | None = None,
    _execution_order=None,
) -> ExperimentResult:
    """Drive T rounds and return the full metric log.

    A non-finite iterate or a training loss above the divergence cap aborts
    the loop; the log then ends at the last finite round and the result is
    marked diverged. `_execution_order` permutes the order in which client
    slots are evaluated (testing hook: the output must not depend on it).
    """
    prob = cfg.problem
    root = RngStream(cfg.seed)
    threads = _resolve_threads(threads)
    T = cfg.rounds
    p = prob.weights

    if cfg.init_x is not None:
        x0 = np.asarray(cfg.init_x, dtype=np.float64).copy()
        if x0.shape != (prob.dim,):
            raise StructuralError("init_x does not match the model dimension")
    else:
        x0 = init_params(prob.client_tasks[0], root.derive(TAG_INIT))

    use_cv = cfg.local.variant == "scaffold"
    state = init_server_state(x0, with_control_variate=use_cv)
    # Local copies so a run never mutates the caller's shards.
    shards = [
        ClientShard(s.data, s.weight, np.zeros(prob.dim) if use_cv else None, s.indices)
        for s in prob.shards
    ]

    gamma_tracker = PlateauTracker(cfg.gamma_schedule.patience)
    eta_tracker = PlateauTracker(cfg.eta_schedule.patience)
    plateau_in_use = "plateau" in (cfg.gamma_schedule.kind, cfg.eta_schedule.kind)

    metrics: list[RoundMetrics] = []
    iterates: list | None = [] if cfg.record_iterates else None
    drift = np.zeros((T, cfg.local.K + 1)) if cfg.record_drift else None
    diverged = False
    divergence_round = None

    for t in range(T):
        t_start = time.perf_counter()
        if not np.all(np.isfinite(state.x)):
            diverged, divergence_round = True, t
            break

        want_row = (t % cfg.eval_every == 0) or t == T - 1
        train_loss = np.nan
        if want_row or plateau_in_use:
            train_loss = prob.train_loss(state.x)
            if not np.isfinite(train_loss) or train_loss > cfg.divergence_loss_cap:
                diverged, divergence_round = True, t
                break
            gamma_tracker.update(train_loss)
            eta_tracker.update(train_loss)

        gamma_t = cfg.local.gamma * apply_schedule(cfg.gamma_schedule, t, T, gamma_tracker.decays)
        eta_t = cfg.server.eta * apply_schedule(cfg.eta_schedule, t, T, eta_tracker.decays)

        grad_norm_sq, sigma_g = (np.nan, np.nan)
        test_acc = 0.0
        if want_row:
            grad_norm_sq, sigma_g = prob.gradient_stats(state.x)
            _, test_acc = prob.test_metrics(state.x)
        if iterates is not None:
            iterates.append(state.x.copy())

        sampled = sample_round(p, cfg.sampling, root.derive(TAG_SAMPLE, t))
        local_cfg = replace(cfg.local, gamma=gamma_t)
        broadcast_x = state.x
        server_cv = state.server_cv

        def run_slot(slot: int):
            ci = int(sampled[slot])
            stream = root.derive(TAG_LOCAL, t, slot, ci)
            return run_local(
                prob.client_tasks[ci],
                shards[ci],
                broadcast_x,
                local_cfg,
                server_cv=server_cv,
                rng=stream,
                record=cfg.record_drift,
            )

        order = range(len(sampled)) if _execution_order is None else _execution_order
        results = [None] * len(sampled)
        if threads == 1:
            for slot in order:
                results[slot] = run_slot(slot)
        else:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                futures = {slot: pool.submit(run_slot, slot) for slot in order}
                for slot, fut in futures.items():
                    results[slot] = fut.result()

        if drift is not None:
            for slot, res in enumerate(results):
                w = shards[int(sampled[slot])].weight
                for k, xk in enumerate(res.trajectory):
                    drift[t, k] += w * l2_norm_sq(xk - broadcast_x)

        # Aggregate in ascending (client, slot) order, whatever the
        # completion order was; this pins the floating-point sum.
        slot_order = sorted(range(len(sampled)), key=lambda s: (int(sampled[s]), s))
        x_tilde, delta = aggregate(state.x, [results[s].x_final for s in slot_order])

        if use_cv:
            new_cvs = [results[s].new_control_variate for s in range(len(sampled))]
            old_cvs = [shards[int(sampled[s])].control_variate for s in range(len(sampled))]
            jump = np.stack([new - old for new, old in zip(new_cvs, old_cvs)]).mean(axis=0)
            for s in range(len(sampled)):
                shards[int(sampled[s])].control_variate = new_cvs[s].copy()
            state.server_cv = state.server_cv + (len(sampled) / prob.N) * jump

        state = server_step(state, delta, replace(cfg.server, eta=eta_t), x_tilde=x_tilde)

        if want_row:
            wall = (time.perf_counter() - t_start) * 1e3 if cfg.record_walltime else 0.0
            metrics.append(
                RoundMetrics(
                    t=t,
                    train_loss=train_loss,
                    test_acc=test_acc,
                    grad_norm_sq=grad_norm_sq,
                    sigma_g=sigma_g,
                    gamma=gamma_t,
                    eta=eta_t,
                    clients=[int(c) for c in sampled],
                    wall_ms=wall,
                )
            )

    if iterates is not None and not diverged:
        iterates.append(state.x.copy())
    return ExperimentResult(
        metrics=metrics,
        state=state,
        method=recover_baseline(cfg.server),
        diverged=diverged,
        divergence_round=divergence_round,
        iterates=iterates,
        drift=drift,
    )

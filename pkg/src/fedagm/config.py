"""JSON experiment configs -> runnable ExperimentConfig objects.

The format mirrors the module structure: a `task` section builds the
federated problem, `sampling`/`local`/`server` map one-to-one onto their
dataclasses, `schedules` holds the gamma and eta policies. Every validation
failure is raised as ConfigError with the JSON path of the offending key,
so a bad config points at itself.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FedAgmError
from .local import LocalConfig
from .numerics import RngStream
from .orchestrator import (
    TAG_DATA,
    TAG_PARTITION,
    ExperimentConfig,
    FederatedProblem,
    ScheduleSpec,
)
from .partition import ClientShard, PartitionSpec, partition
from .sampling import SamplingSpec
from .server import Calibration, ServerOptimizer, named_optimizer, recover_baseline
from .tasks import (
    Dataset,
    LogisticRegressionTask,
    MlpTask,
    load_idx_dataset,
    make_blobs_dataset,
    make_quadratic_client_data,
    make_synthetic_federated_quadratic,
)

_REQUIRED = object()


def _get(section: dict, key: str, path: str, default=_REQUIRED):
    if key in section:
        return section[key]
    if default is _REQUIRED:
        raise ConfigError(f"{path}.{key}: missing required key")
    return default


def _get_number(section, key, path, default=_REQUIRED, minimum=None):
    value = _get(section, key, path, default)
    if not isinstance(value, (int, float)) or isinstance(value, bool):
        raise ConfigError(f"{path}.{key}: expected a number, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(f"{path}.{key}: must be >= {minimum}, got {value!r}")
    return value


def _get_int(section, key, path, default=_REQUIRED, minimum=None):
    value = _get(section, key, path, default)
    if not isinstance(value, int) or isinstance(value, bool):
        raise ConfigError(f"{path}.{key}: expected an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(f"{path}.{key}: must be >= {minimum}, got {value!r}")
    return value


def _get_str(section, key, path, default=_REQUIRED, choices=None):
    value = _get(section, key, path, default)
    if not isinstance(value, str):
        raise ConfigError(f"{path}.{key}: expected a string, got {value!r}")
    if choices is not None and value not in choices:
        raise ConfigError(f"{path}.{key}: expected one of {sorted(choices)}, got {value!r}")
    return value


def _get_section(obj, key, path, default=_REQUIRED) -> dict:
    value = _get(obj, key, path, default)
    if not isinstance(value, dict):
        raise ConfigError(f"{path}.{key}: expected an object")
    return value


def load_json_file(path: str):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc


def _wrap(path: str, builder, *args, **kwargs):
    """Run a dataclass constructor, re-labelling its errors with the JSON path."""
    try:
        return builder(*args, **kwargs)
    except FedAgmError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def parse_calibration(section: dict, path: str) -> Calibration:
    scheme = _get_str(section, "scheme", path)
    kwargs = {}
    if "eps" in section:
        kwargs["eps"] = _get_number(section, "eps", path)
    if "p" in section:
        kwargs["p"] = _get_number(section, "p", path)
    if "beta" in section:
        kwargs["beta"] = _get_number(section, "beta", path)
    return _wrap(path, Calibration, scheme, **kwargs)


def parse_server(section: dict, path: str) -> ServerOptimizer:
    if "name" in section:
        name = _get_str(section, "name", path)
        eta = float(_get_number(section, "eta", path, minimum=0.0))
        overrides = {}
        if "beta1" in section:
            overrides["beta1"] = float(_get_number(section, "beta1", path))
        if "beta2" in section:
            overrides["beta2"] = float(_get_number(section, "beta2", path))
        if "calibration" in section:
            overrides["calibration"] = parse_calibration(
                _get_section(section, "calibration", path), path + ".calibration"
            )
        return _wrap(path, named_optimizer, name, eta, **overrides)
    kind = _get_str(section, "kind", path)
    cal = Calibration("identity")
    if "calibration" in section:
        cal = parse_calibration(_get_section(section, "calibration", path), path + ".calibration")
    return _wrap(
        path,
        ServerOptimizer,
        kind=kind,
        eta=float(_get_number(section, "eta", path)),
        beta1=float(_get_number(section, "beta1", path, default=0.0)),
        beta2=float(_get_number(section, "beta2", path, default=0.0)),
        calibration=cal,
    )


def parse_schedule(section: dict, path: str) -> ScheduleSpec:
    kwargs = {"kind": _get_str(section, "kind", path)}
    if "decay" in section:
        kwargs["decay"] = float(_get_number(section, "decay", path))
    if "fractions" in section:
        fractions = _get(section, "fractions", path)
        if not isinstance(fractions, list):
            raise ConfigError(f"{path}.fractions: expected a list")
        kwargs["fractions"] = tuple(float(f) for f in fractions)
    if "patience" in section:
        kwargs["patience"] = _get_int(section, "patience", path)
    if "factor" in section:
        kwargs["factor"] = float(_get_number(section, "factor", path))
    return _wrap(path, ScheduleSpec, **kwargs)


def parse_local(section: dict, path: str) -> LocalConfig:
    return _wrap(
        path,
        LocalConfig,
        K=_get_int(section, "steps", path),
        gamma=float(_get_number(section, "gamma", path)),
        batch_size=_get_int(section, "batch_size", path),
        variant=_get_str(section, "variant", path, default="sgd"),
        prox_mu=float(_get_number(section, "prox_mu", path, default=0.0)),
        epoch_mode=bool(_get(section, "epoch_mode", path, default=False)),
    )


def parse_sampling(section: dict, path: str) -> SamplingSpec:
    return _wrap(
        path,
        SamplingSpec,
        S=_get_int(section, "clients_per_round", path),
        mode=_get_str(section, "mode", path, default="weighted"),
    )


def parse_partition(section: dict, path: str) -> PartitionSpec:
    groups = _get(section, "class_groups", path, default=None)
    return _wrap(
        path,
        PartitionSpec,
        scheme=_get_str(section, "scheme", path),
        N=_get_int(section, "num_clients", path),
        alpha=_get(section, "alpha", path, default=None),
        classes_per_client=_get(section, "classes_per_client", path, default=None),
        balance=_get_str(section, "balance", path, default="equal"),
        class_groups=np.asarray(groups, dtype=np.int64) if groups is not None else None,
    )


def build_dataset(section: dict, path: str, seed: int, base_dir: str = ".") -> Dataset:
    source = _get_str(section, "source", path, choices=("blobs", "idx"))
    if source == "blobs":
        return make_blobs_dataset(
            n=_get_int(section, "n", path, minimum=1),
            num_classes=_get_int(section, "num_classes", path, minimum=2),
            num_features=_get_int(section, "num_features", path, minimum=1),
            rng=RngStream(seed).derive(TAG_DATA, 1),
            center_spread=float(_get_number(section, "center_spread", path, default=3.0)),
            noise=float(_get_number(section, "noise", path, default=1.0)),
        )
    images = os.path.join(base_dir, _get_str(section, "images", path))
    labels = os.path.join(base_dir, _get_str(section, "labels", path))
    try:
        return load_idx_dataset(images, labels)
    except FedAgmError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _split_train_test(data: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset | None]:
    if test_fraction <= 0.0:
        return data, None
    gen = RngStream(seed).derive(TAG_DATA, 2).generator()
    perm = gen.permutation(data.n)
    n_test = max(1, int(round(test_fraction * data.n)))
    if n_test >= data.n:
        raise ConfigError("task.test_fraction: leaves no training data")
    return data.subset(perm[n_test:]), data.subset(perm[:n_test])


def build_problem(obj: dict, seed: int, base_dir: str = ".") -> FederatedProblem:
    task_sec = _get_section(obj, "task", "config")
    kind = _get_str(task_sec, "kind", "task", choices=("quadratic", "logistic", "mlp"))

    if kind == "quadratic":
        N = _get_int(task_sec, "num_clients", "task", minimum=1)
        dim = _get_int(task_sec, "dim", "task", minimum=1)
        het = float(_get_number(task_sec, "heterogeneity", "task", minimum=0.0))
        crange = _get(task_sec, "curvature_range", "task", default=[0.5, 2.0])
        if not (isinstance(crange, list) and len(crange) == 2):
            raise ConfigError("task.curvature_range: expected [low, high]")
        samples = _get_int(task_sec, "samples_per_client", "task", default=64, minimum=1)
        noise = float(_get_number(task_sec, "anchor_noise", "task", default=1.0, minimum=0.0))
        wd = float(_get_number(task_sec, "weight_decay", "task", default=0.0, minimum=0.0))
        mode = _get_str(task_sec, "weights", "task", default="equal")
        stream = RngStream(seed).derive(TAG_DATA)
        tasks, p = _wrap(
            "task",
            make_synthetic_federated_quadratic,
            N,
            dim,
            het,
            stream.derive(1),
            curvature_range=(float(crange[0]), float(crange[1])),
            weight_decay=wd,
            weights=mode,
        )
        shards = [
            ClientShard(
                make_quadratic_client_data(tasks[i], samples, noise, stream.derive(2, i)),
                float(p[i]),
            )
            for i in range(N)
        ]
        return FederatedProblem(tasks, shards)

    data = build_dataset(_get_section(task_sec, "dataset", "task"), "task.dataset", seed, base_dir)
    wd = float(_get_number(task_sec, "weight_decay", "task", default=0.0, minimum=0.0))
    if kind == "logistic":
        task = LogisticRegressionTask(data.features.shape[1], data.num_classes, weight_decay=wd)
    else:
        task = MlpTask(
            data.features.shape[1],
            _get_int(task_sec, "hidden", "task", minimum=1),
            data.num_classes,
            weight_decay=wd,
        )
    test_fraction = float(_get_number(task_sec, "test_fraction", "task", default=0.2))
    train, test = _split_train_test(data, test_fraction, seed)
    spec = parse_partition(_get_section(obj, "partition", "config"), "partition")
    shards = _wrap("partition", partition, train, spec, RngStream(seed).derive(TAG_PARTITION))
    return FederatedProblem([task] * spec.N, shards, test_data=test)


def parse_config(obj: dict, base_dir: str = ".") -> ExperimentConfig:
    if not isinstance(obj, dict):
        raise ConfigError("config: top level must be a JSON object")
    seed = _get_int(obj, "seed", "config", default=0)
    problem = build_problem(obj, seed, base_dir)
    schedules = _get_section(obj, "schedules", "config", default={})
    gamma_sched = ScheduleSpec()
    eta_sched = ScheduleSpec()
    if "gamma" in schedules:
        gamma_sched = parse_schedule(_get_section(schedules, "gamma", "schedules"), "schedules.gamma")
    if "eta" in schedules:
        eta_sched = parse_schedule(_get_section(schedules, "eta", "schedules"), "schedules.eta")
    return _wrap(
        "config",
        ExperimentConfig,
        problem=problem,
        local=parse_local(_get_section(obj, "local", "config"), "local"),
        sampling=parse_sampling(_get_section(obj, "sampling", "config"), "sampling"),
        server=parse_server(_get_section(obj, "server", "config"), "server"),
        rounds=_get_int(obj, "rounds", "config", minimum=1),
        seed=seed,
        gamma_schedule=gamma_sched,
        eta_schedule=eta_sched,
        eval_every=_get_int(obj, "eval_every", "config", default=1, minimum=1),
        record_walltime=bool(_get(obj, "record_walltime", "config", default=False)),
    )


def load_config(path: str) -> ExperimentConfig:
    return parse_config(load_json_file(path), base_dir=os.path.dirname(os.path.abspath(path)))


@dataclass
class CompareManifest:
    """Grid description for the comparison harness."""

    base: dict
    methods: list[tuple[str, dict]]
    seeds: list[int]
    out: str
    base_dir: str = "."


def load_manifest(path: str) -> CompareManifest:
    obj = load_json_file(path)
    base_dir = os.path.dirname(os.path.abspath(path))
    base = _get(obj, "config", "manifest")
    if isinstance(base, str):
        base_path = os.path.join(base_dir, base)
        base = load_json_file(base_path)
        base_dir = os.path.dirname(os.path.abspath(base_path))
    if not isinstance(base, dict):
        raise ConfigError("manifest.config: expected a path or an inline config object")
    methods_raw = _get(obj, "methods", "manifest")
    if not isinstance(methods_raw, list) or not methods_raw:
        raise ConfigError("manifest.methods: expected a nonempty list")
    methods = []
    for i, sec in enumerate(methods_raw):
        if not isinstance(sec, dict):
            raise ConfigError(f"manifest.methods[{i}]: expected an object")
        opt = parse_server(sec, f"manifest.methods[{i}]")
        label = sec.get("label") or sec.get("name") or recover_baseline(opt)
        methods.append((str(label), sec))
    seeds = _get(obj, "seeds", "manifest", default=[0])
    if not isinstance(seeds, list) or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("manifest.seeds: expected a list of integers")
    out = _get_str(obj, "out", "manifest", default="compare-out")
    return CompareManifest(base=base, methods=methods, seeds=list(seeds), out=out, base_dir=base_dir)

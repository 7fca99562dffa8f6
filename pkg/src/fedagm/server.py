"""Server side of a round: average the client finals, fold the resulting
virtual direction into first/second momenta, and apply the calibrated
adaptive update.

The virtual direction delta_t = x_t - x_tilde_{t+1} plays the role of a
gradient; the server never sees client data or per-step gradients. Momenta
start at zero and are used without bias correction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ParameterError, StructuralError
from .numerics import ParamVector

KINDS = ("avg", "momentum", "adam", "amsgrad", "yogi")
CALIBRATION_SCHEMES = ("epsilon", "power", "softplus", "identity")


@dataclass(frozen=True)
class Calibration:
    """Monotone transform of the second momentum that floors the denominator.

    epsilon   sqrt(v) + eps            stepsize span (1/(sqrt(V)+eps), 1/eps)
    power     (v + eps)^p, p <= 1/2    compresses the span to its p-th power
    softplus  log(1 + e^(beta sqrt(v)))/beta   smooth, floored at log(2)/beta
    identity  1                        calibration off (plain averaging)
    """

    scheme: str
    eps: float = 1e-8
    p: float = 0.5
    beta: float = 50.0

    def __post_init__(self):
        if self.scheme not in CALIBRATION_SCHEMES:
            raise ParameterError(f"scheme must be one of {CALIBRATION_SCHEMES}, got {self.scheme!r}")
        if self.scheme in ("epsilon", "power") and self.eps <= 0:
            raise ParameterError("eps must be > 0")
        if self.scheme == "power" and not 0 < self.p <= 0.5:
            raise ParameterError("power exponent must lie in (0, 1/2]")
        if self.scheme == "softplus" and self.beta <= 0:
            raise ParameterError("softplus beta must be > 0")


IDENTITY = Calibration("identity")


@dataclass(frozen=True)
class ServerOptimizer:
    """Outer-loop update rule: kind + base rate + momenta + calibration."""

    kind: str
    eta: float
    beta1: float = 0.0
    beta2: float = 0.0
    calibration: Calibration = IDENTITY

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.eta <= 0:
            raise ParameterError("eta must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ParameterError("beta1 and beta2 must lie in [0, 1)")
        if self.kind in ("avg", "momentum"):
            if self.calibration.scheme != "identity":
                raise ParameterError(f"{self.kind} kind requires the identity calibration")
            if self.beta2 != 0.0:
                raise ParameterError(f"{self.kind} kind does not use beta2; set it to 0")
        if self.kind == "avg" and self.beta1 != 0.0:
            raise ParameterError("avg kind requires beta1 = 0")


@dataclass
class ServerState:
    """Evolving server-side quantities; one instance per experiment."""

    x: ParamVector
    m: ParamVector
    v: ParamVector
    t: int = 0
    server_cv: ParamVector | None = None
    yogi_clamped: bool = False


def init_server_state(x0: ParamVector, with_control_variate: bool = False) -> ServerState:
    x0 = np.asarray(x0, dtype=np.float64)
    zeros = np.zeros_like(x0)
    cv = np.zeros_like(x0) if with_control_variate else None
    return ServerState(x=x0.copy(), m=zeros.copy(), v=zeros.copy(), server_cv=cv)


def aggregate(x_t: ParamVector, client_finals: list[ParamVector]) -> tuple[ParamVector, ParamVector]:
    """Average the client finals and form the virtual direction.

    Returns (x_tilde, delta) with x_tilde the plain mean over the S entries
    (duplicates included with multiplicity) and delta = x_t - x_tilde. The
    caller fixes the list order; the mean is computed over the stacked array
    so the summation order is reproducible.
    """
    if not client_finals:
        raise StructuralError("aggregate needs at least one client final")
    stacked = np.stack([np.asarray(x, dtype=np.float64) for x in client_finals])
    if stacked.shape[1:] != np.shape(x_t):
        raise StructuralError("client finals do not match the model dimension")
    x_tilde = stacked.mean(axis=0)
    return x_tilde, x_t - x_tilde


def calibrate(v: ParamVector, cal: Calibration) -> ParamVector:
    """Per-coordinate denominator of the adaptive stepsize; always > 0."""
    v = np.asarray(v, dtype=np.float64)
    if np.any(v < 0):
        raise NumericError("calibrate needs v >= 0 in every coordinate")
    if cal.scheme == "epsilon":
        return np.sqrt(v) + cal.eps
    if cal.scheme == "power":
        return (v + cal.eps) ** cal.p
    if cal.scheme == "softplus":
        z = cal.beta * np.sqrt(v)
        return (np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))) / cal.beta
    return np.ones_like(v)


def _second_momentum(state: ServerState, delta_sq: np.ndarray, opt: ServerOptimizer):
    if opt.kind == "adam":
        return opt.beta2 * state.v + (1.0 - opt.beta2) * delta_sq, False
    if opt.kind == "amsgrad":
        candidate = opt.beta2 * state.v + (1.0 - opt.beta2) * delta_sq
        return np.maximum(candidate, state.v), False
    if opt.kind == "yogi":
        v = state.v - (1.0 - opt.beta2) * delta_sq * np.sign(state.v - delta_sq)
        clamped = bool(np.any(v < 0.0))
        return np.maximum(v, 0.0), clamped
    return state.v, False


def server_step(
    state: ServerState,
    delta: ParamVector,
    opt: ServerOptimizer,
    x_tilde: ParamVector | None = None,
) -> ServerState:
    """One outer update; returns a fresh state, inputs untouched.

    With kind avg and eta = 1 the update is algebraically x_{t+1} = x_tilde;
    passing x_tilde takes that path literally so the recovery is exact at
    the bit level rather than up to roundoff.
    """
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != state.x.shape:
        raise StructuralError("delta does not match the model dimension")
    m = opt.beta1 * state.m + (1.0 - opt.beta1) * delta
    v, clamped = _second_momentum(state, delta * delta, opt)
    if opt.kind == "avg" and opt.eta == 1.0 and x_tilde is not None:
        x = np.asarray(x_tilde, dtype=np.float64).copy()
    else:
        x = state.x - (opt.eta / calibrate(v, opt.calibration)) * m
    return ServerState(
        x=x,
        m=m,
        v=v,
        t=state.t + 1,
        server_cv=state.server_cv,
        yogi_clamped=state.yogi_clamped or clamped,
    )


def recover_baseline(opt: ServerOptimizer) -> str:
    """Canonical method name for reporting; parameters decide, not labels."""
    if opt.calibration.scheme == "identity":
        return "FedAvg" if opt.beta1 == 0.0 else "FedMomentum"
    base = {"adam": "FedAdam", "amsgrad": "FedAMSGrad", "yogi": "FedYogi"}.get(opt.kind)
    if base is None:
        return "FedAvg" if opt.beta1 == 0.0 else "FedMomentum"
    if opt.calibration.scheme == "power":
        return "p-" + base
    if opt.calibration.scheme == "softplus":
        return "s-" + base
    # Yogi ships with a large epsilon by convention; for the Adam family a
    # vanishing epsilon is the textbook default and gets no prefix.
    if opt.kind == "yogi" or opt.calibration.eps <= 1e-8:
        return base
    return "eps-" + base


def named_optimizer(name: str, eta: float, **overrides) -> ServerOptimizer:
    """Construct the usual baselines by name; a convenience for grids."""
    table = {
        "FedAvg": dict(kind="avg"),
        "FedMomentum": dict(kind="momentum", beta1=0.9),
        "FedAdam": dict(kind="adam", beta1=0.9, beta2=0.99, calibration=Calibration("epsilon", eps=1e-8)),
        "eps-FedAdam": dict(kind="adam", beta1=0.9, beta2=0.99, calibration=Calibration("epsilon", eps=1e-2)),
        "p-FedAdam": dict(kind="adam", beta1=0.9, beta2=0.99, calibration=Calibration("power", eps=1e-8, p=0.25)),
        "s-FedAdam": dict(kind="adam", beta1=0.9, beta2=0.99, calibration=Calibration("softplus", beta=50.0)),
        "FedAMSGrad": dict(kind="amsgrad", beta1=0.9, beta2=0.99, calibration=Calibration("epsilon", eps=1e-8)),
        "s-FedAMSGrad": dict(kind="amsgrad", beta1=0.9, beta2=0.99, calibration=Calibration("softplus", beta=50.0)),
        "FedYogi": dict(kind="yogi", beta1=0.0, beta2=0.99, calibration=Calibration("epsilon", eps=1e-3)),
    }
    if name not in table:
        raise ParameterError(f"unknown optimizer name {name!r}; known: {sorted(table)}")
    params = dict(table[name])
    params.update(overrides)
    return ServerOptimizer(eta=eta, **params)

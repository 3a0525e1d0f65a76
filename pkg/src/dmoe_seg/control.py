"""Numerical checks for the control-system reading of routed residual nets.

Covers: explicit Euler rollouts of controlled dynamics, softmax kernel
feedback weights (which coincide with noiseless dense gating), the
mixing identity for linear experts, and a toy mode-switching controller
that beats any single fixed policy on a two-regime task.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .moe import DMoEConfig, DMoELayer
from .tensor import Tensor


class DivergenceError(FloatingPointError):
    def __init__(self, step):
        super().__init__("state became non-finite at rollout step %d" % step)
        self.step = step


@dataclass
class ControlSystem:
    state_dim: int
    dynamics: object          # f(h, u) -> dh/dt
    dt: float
    horizon: int

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")


@dataclass
class Policy:
    kind: str                               # open_loop | feedback | mode_switching
    controls: list = None                   # open_loop: fixed u per step
    gain: float = 0.0                       # feedback: u = -gain * h (scalar systems)
    modes: dict = field(default_factory=dict)  # mode_switching: attr -> Policy

    def control(self, h, t, attr=None):
        if self.kind == "open_loop":
            return self.controls[t] if self.controls is not None else 0.0
        if self.kind == "feedback":
            return -self.gain * h
        if self.kind == "mode_switching":
            if not self.modes:
                raise ValueError("mode map is empty")
            return self.modes[attr].control(h, t, attr)
        raise ValueError("unknown policy kind %r" % self.kind)


def euler_rollout(system, policy, h0, attr=None):
    """h_{t+1} = h_t + dt * f(h_t, policy(h_t)); returns horizon+1 states."""
    h = np.asarray(h0, dtype=np.float64)
    traj = [h]
    for t in range(system.horizon):
        u = policy.control(h, t, attr)
        h = h + system.dt * np.asarray(system.dynamics(h, u), dtype=np.float64)
        if not np.all(np.isfinite(h)):
            raise DivergenceError(t)
        traj.append(h)
    return traj


def kernel_weights(h, anchor_matrix):
    """Softmax over inner products <h, column_i> of the anchor matrix.

    The anchor matrix holds the feature-mapped anchors as columns, exactly
    the gate weight matrix of a noiseless full-k router; the two paths are
    verified to agree bitwise.
    """
    h = np.asarray(h, dtype=np.float64).reshape(1, -1)
    w = np.asarray(anchor_matrix, dtype=np.float64)
    return T.softmax(Tensor(h) @ Tensor(w), axis=1).data[0]


def gate_weights_dense(h, anchor_matrix):
    """The same weights via the routing layer with k = n and no noise."""
    w = np.asarray(anchor_matrix, dtype=np.float64)
    d, n = w.shape
    cfg = DMoEConfig(d_model=d, d_hidden=1, n_experts=n, top_k=n,
                     dropout_p=0.0, attributes=("only",))
    layer = DMoELayer(cfg, seed=0)
    layer.routers["only"].w.data = w
    decision = layer.gate(Tensor(np.asarray(h, dtype=np.float64).reshape(1, -1)),
                          "only", training=False)
    dense = np.zeros(n)
    dense[decision.indices[0]] = decision.weights[0]
    return dense


def linear_mixing_check(h, anchor_thetas, weights):
    """max |f(h, sum_i w_i theta_i) - sum_i w_i f(h, theta_i)| for f(h, Th) = Th @ h.

    Zero (to rounding) whenever f is linear in its parameter argument.
    """
    h = np.asarray(h, dtype=np.float64)
    thetas = [np.asarray(t, dtype=np.float64) for t in anchor_thetas]
    weights = np.asarray(weights, dtype=np.float64)
    mixed_theta = sum(w * t for w, t in zip(weights, thetas))
    lhs = mixed_theta @ h
    rhs = sum(w * (t @ h) for w, t in zip(weights, thetas))
    return float(np.max(np.abs(lhs - rhs)))


def relu_mixing_counterexample(h, anchor_thetas, weights):
    """Deviation of the same identity under f(h, Th) = relu(Th @ h)."""
    h = np.asarray(h, dtype=np.float64)
    thetas = [np.asarray(t, dtype=np.float64) for t in anchor_thetas]
    weights = np.asarray(weights, dtype=np.float64)
    mixed_theta = sum(w * t for w, t in zip(weights, thetas))
    lhs = np.maximum(mixed_theta @ h, 0.0)
    rhs = sum(w * np.maximum(t @ h, 0.0) for w, t in zip(weights, thetas))
    return float(np.max(np.abs(lhs - rhs)))


# ---------------------------------------------------------------------------
# mode-switching demo

def _regime_cost(a, gain, h0, dt, horizon, rho, open_loop_u=None):
    """Quadratic cost sum(h^2 + rho u^2) along an Euler rollout of dh = a h + u."""
    h = h0
    cost = 0.0
    for t in range(horizon):
        u = open_loop_u if open_loop_u is not None else -gain * h
        cost += h * h + rho * u * u
        h = h + dt * (a * h + u)
    return cost + h * h


def mode_switch_demo(seed=0, a_regimes=(-0.5, 0.5), rho=0.1, dt=0.1, horizon=40,
                     gain_grid=None, u_grid=None):
    """Fit open-loop, single-feedback, and per-regime feedback policies by
    grid search; return mean costs on the mixed-regime evaluation.

    The expected ordering is mode_switching <= single_feedback <= open_loop.
    """
    if gain_grid is None:
        gain_grid = np.linspace(0.0, 4.0, 81)
    if u_grid is None:
        u_grid = np.linspace(-2.0, 2.0, 81)
    rng = np.random.default_rng(seed)
    h0s = np.concatenate([np.array([1.0, -1.0, 0.5, -0.5]),
                          rng.uniform(-1.5, 1.5, size=8)])
    regimes = {"regime_%d" % i: a for i, a in enumerate(a_regimes)}

    def mean_cost_feedback(gain, regime_subset):
        return float(np.mean([_regime_cost(a, gain, h0, dt, horizon, rho)
                              for a in regime_subset for h0 in h0s]))

    def mean_cost_open(u, regime_subset):
        return float(np.mean([_regime_cost(a, 0.0, h0, dt, horizon, rho, open_loop_u=u)
                              for a in regime_subset for h0 in h0s]))

    all_a = list(regimes.values())
    open_cost = min(mean_cost_open(u, all_a) for u in u_grid)
    single_cost = min(mean_cost_feedback(g, all_a) for g in gain_grid)
    per_regime = {name: min(gain_grid, key=lambda g: mean_cost_feedback(g, [a]))
                  for name, a in regimes.items()}
    switch_cost = float(np.mean([_regime_cost(a, per_regime[name], h0, dt, horizon, rho)
                                 for name, a in regimes.items() for h0 in h0s]))
    return {"open_loop": open_cost, "single_feedback": single_cost,
            "mode_switching": switch_cost}


def write_cost_table(path, costs):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["policy", "mean_cost"])
        for name in ("open_loop", "single_feedback", "mode_switching"):
            writer.writerow([name, "%.10g" % costs[name]])

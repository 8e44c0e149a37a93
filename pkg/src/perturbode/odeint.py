"""Flow-map integration of the model ODE and gradients through the solver steps."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.integrate import solve_ivp

from .model import CompiledField, GradAccumulator, ModelParams, ParamGrads, RegimeContext


class Scheme(str, Enum):
    RK4 = "rk4"
    DOPRI5 = "dopri5"  # adaptive, forward only


class DivergenceError(FloatingPointError):
    def __init__(self, step: int, message: str = "non-finite state"):
        super().__init__(f"{message} at step {step}")
        self.step = step


@dataclass(frozen=True)
class FlowSpec:
    t_end: float = 25.0
    n_steps: int = 50
    scheme: Scheme = Scheme.RK4
    rtol: float = 1e-6
    atol: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        if self.t_end < 0:
            raise ValueError("t_end must be nonnegative")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")

    @property
    def h(self) -> float:
        return self.t_end / self.n_steps


def _as_batch(y0) -> tuple[np.ndarray, bool]:
    y = np.asarray(y0, dtype=float)
    if not np.all(np.isfinite(y)):
        raise ValueError("initial state must be finite")
    return np.atleast_2d(y), y.ndim == 1


def _rk4_step(f: CompiledField, y: np.ndarray, h: float) -> np.ndarray:
    k1 = f(y)
    k2 = f(y + 0.5 * h * k1)
    k3 = f(y + 0.5 * h * k2)
    k4 = f(y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def flow_map(params: ModelParams, ctx: RegimeContext, y0, spec: FlowSpec = FlowSpec(),
             return_trajectory: bool = False):
    """Push states (d,) or (n, d) forward by ``spec.t_end`` time units.

    With ``return_trajectory`` the RK4 path also returns the (n_steps+1, ...)
    array of intermediate states.
    """
    Y, single = _as_batch(y0)
    f = CompiledField(params, ctx)
    f.check(Y)
    if spec.t_end == 0:
        out = Y.copy()
        traj = out[None]
    elif spec.scheme is Scheme.DOPRI5:
        if return_trajectory:
            raise ValueError("trajectories are only recorded for the fixed-step scheme")
        out = _dopri5(f, Y, spec)
        traj = None
    else:
        h = spec.h
        traj = [Y] if return_trajectory else None
        y = Y
        for step in range(spec.n_steps):
            with np.errstate(over="ignore", invalid="ignore"):
                y = _rk4_step(f, y, h)
            if not np.all(np.isfinite(y)):
                raise DivergenceError(step + 1)
            if traj is not None:
                traj.append(y)
        out = y
        traj = np.stack(traj) if traj is not None else None
    if single:
        out = out[0]
        traj = traj[:, 0] if traj is not None else None
    return (out, traj) if return_trajectory else out


def _dopri5(f: CompiledField, Y: np.ndarray, spec: FlowSpec) -> np.ndarray:
    shape = Y.shape

    def rhs(_t, flat):
        return f(flat.reshape(shape)).ravel()

    sol = solve_ivp(rhs, (0.0, spec.t_end), Y.ravel(), method="RK45",
                    rtol=spec.rtol, atol=spec.atol)
    if not sol.success:
        raise DivergenceError(len(sol.t), sol.message)
    out = sol.y[:, -1].reshape(shape)
    if not np.all(np.isfinite(out)):
        raise DivergenceError(len(sol.t))
    return out


def flow_map_with_grad(params: ModelParams, ctx: RegimeContext, Y0, spec: FlowSpec,
                       loss_cotangent) -> tuple[np.ndarray, ParamGrads]:
    """Fixed-step RK4 flow plus the exact gradient of <loss_cotangent, Yhat>.

    Differentiates the discrete map: every stage state is stored on the way
    forward and the stages are swept in reverse.
    """
    if spec.scheme is not Scheme.RK4:
        raise ValueError("gradients require the fixed-step RK4 scheme")
    Y, single = _as_batch(Y0)
    C = np.atleast_2d(np.asarray(loss_cotangent, dtype=float))
    if C.shape != Y.shape:
        raise ValueError(f"cotangent shape {C.shape} != state shape {Y.shape}")
    f = CompiledField(params, ctx)
    f.check(Y)
    acc = GradAccumulator(params)
    if spec.t_end == 0:
        out = Y.copy()
        return (out[0] if single else out), acc.finish(ctx)

    h = spec.h
    tape = []
    y = Y
    for step in range(spec.n_steps):
        with np.errstate(over="ignore", invalid="ignore"):
            k1, z1, a1 = f.forward(y)
            y2 = y + 0.5 * h * k1
            k2, z2, a2 = f.forward(y2)
            y3 = y + 0.5 * h * k2
            k3, z3, a3 = f.forward(y3)
            y4 = y + h * k3
            k4, z4, a4 = f.forward(y4)
            y_next = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        tape.append(((y, z1, a1), (y2, z2, a2), (y3, z3, a3), (y4, z4, a4)))
        y = y_next
        if not np.all(np.isfinite(y)):
            raise DivergenceError(step + 1)
    out = y

    bar = C.copy()
    for s1, s2, s3, s4 in reversed(tape):
        g4 = f.vjp(*s4, (h / 6.0) * bar, acc)
        g3 = f.vjp(*s3, (h / 3.0) * bar + h * g4, acc)
        g2 = f.vjp(*s2, (h / 3.0) * bar + 0.5 * h * g3, acc)
        g1 = f.vjp(*s1, (h / 6.0) * bar + 0.5 * h * g2, acc)
        bar = bar + g1 + g2 + g3 + g4
    return (out[0] if single else out), acc.finish(ctx)

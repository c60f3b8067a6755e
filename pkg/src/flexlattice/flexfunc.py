"""Flexibility Functions: a parametric step response from penalty to demand.

A unit penalty step at t = 0 produces a demand deviation that is zero until
``tau``, falls linearly to ``-delta * p_base`` at ``alpha``, recovers
linearly to zero at ``beta``, then shows a triangular rebound lobe of width
``rebound_duration`` whose area is ``rebound_ratio`` times the reduced
energy. Arbitrary penalty trajectories are handled by superposition of
shifted, scaled step responses.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.integrate import trapezoid
from scipy.optimize import least_squares

from .errors import GridTooCoarse, NegativeTime, NoResponse, NonCanonical
from .signals import PenaltySignal, Signal, Unit

RECORD_KEYS = {
    "tau": "tau_h",
    "alpha": "alpha_h",
    "beta": "beta_h",
    "delta": "delta",
    "rebound_ratio": "rebound_ratio",
    "rebound_duration": "rebound_duration_h",
    "p_base": "p_base_kw",
}

NO_RESPONSE_TOL = 1e-9
NON_CANONICAL_FRACTION = 0.1


@dataclass(frozen=True)
class FlexibilityFunction:
    tau: float
    alpha: float
    beta: float
    delta: float
    rebound_ratio: float
    rebound_duration: float
    p_base: float

    def __post_init__(self):
        for f in fields(self):
            if not math.isfinite(getattr(self, f.name)):
                raise ValueError(f"{f.name} must be finite")
        if not 0.0 <= self.tau < self.alpha <= self.beta:
            raise ValueError("need 0 <= tau < alpha <= beta")
        if not 0.0 < self.delta <= 1.0:
            raise ValueError("delta must be in (0, 1]")
        if self.rebound_ratio < 0:
            raise ValueError("rebound_ratio must be >= 0")
        if not self.rebound_duration > 0:
            raise ValueError("rebound_duration must be > 0")
        if not self.p_base > 0:
            raise ValueError("p_base must be > 0")

    @property
    def depth(self) -> float:
        """Largest power reduction in kW."""
        return self.delta * self.p_base

    @property
    def reduced_energy(self) -> float:
        return self.depth * (self.beta - self.tau) / 2.0

    @property
    def rebound_peak(self) -> float:
        return 2.0 * self.rebound_ratio * self.reduced_energy / self.rebound_duration

    @property
    def support(self) -> float:
        """Time after which the step response is identically zero."""
        return self.beta + self.rebound_duration

    def breakpoints(self) -> np.ndarray:
        half = self.rebound_duration / 2.0
        return np.array([self.tau, self.alpha, self.beta, self.beta + half, self.support])


def step_response(ff: FlexibilityFunction, t):
    """Demand deviation (kW) at ``t`` hours after a unit penalty step."""
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0):
        raise NegativeTime("step response is defined for t >= 0")
    out = np.zeros_like(t_arr)
    depth = ff.depth
    fall = (t_arr >= ff.tau) & (t_arr <= ff.alpha)
    out[fall] = -depth * (t_arr[fall] - ff.tau) / (ff.alpha - ff.tau)
    if ff.beta > ff.alpha:
        rise = (t_arr > ff.alpha) & (t_arr <= ff.beta)
        out[rise] = -depth * (ff.beta - t_arr[rise]) / (ff.beta - ff.alpha)
    half = ff.rebound_duration / 2.0
    lobe = (t_arr > ff.beta) & (t_arr < ff.support)
    mid = ff.beta + half
    out[lobe] = ff.rebound_peak * (1.0 - np.abs(t_arr[lobe] - mid) / half)
    return float(out) if out.ndim == 0 else out


def cumulative_response(ff: FlexibilityFunction, t):
    """Energy (kWh) of the step response integrated over [0, t], in closed form."""
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0):
        raise NegativeTime("cumulative response is defined for t >= 0")
    depth = ff.depth
    ramp = ff.alpha - ff.tau
    s = np.clip(t_arr, ff.tau, ff.alpha) - ff.tau
    out = -depth * s ** 2 / (2.0 * ramp)
    if ff.beta > ff.alpha:
        recover = ff.beta - ff.alpha
        end = ff.beta - np.clip(t_arr, ff.alpha, ff.beta)
        out = out - depth * (recover ** 2 - end ** 2) / (2.0 * recover)
    half = ff.rebound_duration / 2.0
    peak = ff.rebound_peak
    up = np.clip(t_arr, ff.beta, ff.beta + half) - ff.beta
    down = ff.support - np.clip(t_arr, ff.beta + half, ff.support)
    out = out + peak * up ** 2 / (2.0 * half) + peak * (half ** 2 - down ** 2) / (2.0 * half)
    return float(out) if out.ndim == 0 else out


def rebound_areas(ff: FlexibilityFunction) -> tuple[float, float]:
    """(reduced energy A, rebound energy B) in kWh."""
    a = ff.reduced_energy
    return a, ff.rebound_ratio * a


def impulse_kernel(ff: FlexibilityFunction, steps: int, dt: float) -> np.ndarray:
    return step_response(ff, dt * np.arange(steps))


def predict_response(ff: FlexibilityFunction, penalty: Signal,
                     initial: float | None = None) -> Signal:
    """Expected demand deviation (kW) for a penalty trajectory.

    Each penalty increment launches a scaled copy of the step response.
    The level before the first step defaults to ``penalty[0]`` so a
    constant penalty predicts no deviation.
    """
    dt = penalty.grid.step_h
    if dt > (ff.alpha - ff.tau) * (1 + 1e-12):
        raise GridTooCoarse(
            f"grid step {dt:.4g} h is longer than the ramp {ff.alpha - ff.tau:.4g} h"
        )
    p = np.asarray(penalty.values, dtype=float)
    before = p[0] if initial is None else float(initial)
    increments = np.diff(p, prepend=before)
    kernel = impulse_kernel(ff, p.size, dt)
    response = np.convolve(increments, kernel)[: p.size]
    return Signal(penalty.grid, response, Unit.KW)


# identification -------------------------------------------------------------

@dataclass(frozen=True)
class FitResult:
    ff: FlexibilityFunction
    residual_fraction: float  # residual energy / response energy
    rmse: float  # kW
    initial: FlexibilityFunction


def _from_theta(theta, p_base: float) -> FlexibilityFunction:
    tau, rise, recover, delta, ratio, width = theta
    return FlexibilityFunction(
        tau=tau, alpha=tau + rise, beta=tau + rise + recover, delta=delta,
        rebound_ratio=ratio, rebound_duration=width, p_base=p_base,
    )


def _crossing(t, y, level, start, stop, step):
    """Linearly interpolated time where ``y`` first crosses ``level`` walking from start."""
    for k in range(start, stop, step):
        j = k + step
        if not 0 <= j < y.size:
            break
        if (y[k] - level) * (y[j] - level) <= 0 and y[k] != y[j]:
            return t[k] + (level - y[k]) * (t[j] - t[k]) / (y[j] - y[k])
    return None


def extract_features(observed: Signal, p_base: float) -> FlexibilityFunction:
    """Initial parameter guess read directly off a sampled step response.

    Kinks are located from half-amplitude crossings, which for a linear
    ramp sit midway between the kink and the extremum and are far less
    noise-sensitive than first departures from zero.
    """
    y = np.asarray(observed.values, dtype=float)
    t = observed.grid.hours
    dt = observed.grid.step_h
    k_min = int(np.argmin(y))
    depth = -y[k_min]
    alpha = t[k_min]
    half = -depth / 2.0
    t1 = _crossing(t, y, half, k_min, -1, -1)
    tau = alpha - 2.0 * (alpha - t1) if t1 is not None else 0.0
    tau = min(max(tau, 0.0), alpha - dt / 2 if alpha > dt / 2 else 0.0)
    if alpha <= tau:
        alpha = tau + dt
    t2 = _crossing(t, y, half, k_min, y.size, 1)
    beta = alpha + 2.0 * (t2 - alpha) if t2 is not None else alpha + dt
    beta = max(beta, alpha)
    reduced = depth * (beta - tau) / 2.0
    tail = np.where(t > beta, np.maximum(y, 0.0), 0.0)
    if tail.max() > 0.0 and reduced > 0.0:
        k_peak = int(np.argmax(tail))
        above = np.flatnonzero(tail >= tail[k_peak] / 2.0)
        width = max(2.0 * (above[-1] - above[0] + 1) * dt, 2 * dt)
        ratio = float(trapezoid(tail, t)) / reduced
    else:
        width, ratio = max(beta - tau, dt), 0.0
    delta = min(max(depth / p_base, 1e-9), 1.0)
    return FlexibilityFunction(tau, alpha, beta, delta, ratio, width, p_base)


def fit_from_step(observed: Signal, p_base: float) -> FitResult:
    """Identify a Flexibility Function from the response to a unit penalty step.

    ``observed[k]`` is the demand deviation ``k`` steps after the step.
    Feature extraction seeds a bounded least-squares fit of all six shape
    parameters. Raises NoResponse for a flat record and NonCanonical (with
    the best-effort fit attached) when the fit explains too little.
    """
    if not p_base > 0:
        raise ValueError("p_base must be > 0")
    y = np.asarray(observed.values, dtype=float)
    if np.max(np.abs(y)) < NO_RESPONSE_TOL * p_base:
        raise NoResponse("observed response is indistinguishable from zero")
    if np.min(y) >= 0:
        raise NoResponse("observed response contains no demand reduction")
    t = observed.grid.hours
    horizon = float(t[-1]) + observed.grid.step_h
    init = extract_features(observed, p_base)
    theta0 = np.array([
        init.tau, init.alpha - init.tau, init.beta - init.alpha,
        init.delta, init.rebound_ratio, init.rebound_duration,
    ])
    lower = np.array([0.0, 1e-6, 0.0, 1e-9, 0.0, 1e-6])
    upper = np.array([horizon, horizon, horizon, 1.0, np.inf, horizon])
    theta0 = np.clip(theta0, lower, np.where(np.isfinite(upper), upper, theta0 + 1))

    def residual(theta):
        return step_response(_from_theta(theta, p_base), t) - y

    scale = np.array([1.0, 1.0, 1.0, max(init.delta, 1e-3), 1.0, 1.0])
    sol = least_squares(
        residual, theta0, bounds=(lower, upper), x_scale=scale, method="trf",
        jac="3-point", ftol=1e-15, xtol=1e-15, gtol=1e-15, max_nfev=4000,
    )
    ff = _from_theta(sol.x, p_base)
    res = residual(sol.x)
    energy = float(y @ y)
    fraction = float(res @ res) / energy
    fit = FitResult(ff, fraction, float(np.sqrt(np.mean(res ** 2))), init)
    if fraction > NON_CANONICAL_FRACTION:
        raise NonCanonical(fit, fraction)
    return fit


# exchange record ------------------------------------------------------------

def to_record(ff: FlexibilityFunction) -> str:
    """Flat ``key=value`` text block, one parameter per line, 17 significant digits."""
    values = asdict(ff)
    return "".join(f"{RECORD_KEYS[name]}={values[name]:.17g}\n" for name in RECORD_KEYS)


def from_record(text: str) -> FlexibilityFunction:
    reverse = {v: k for k, v in RECORD_KEYS.items()}
    kwargs = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or key not in reverse:
            raise ValueError(f"line {lineno}: unknown entry {line!r}")
        kwargs[reverse[key]] = float(value)
    missing = set(RECORD_KEYS) - set(kwargs)
    if missing:
        raise ValueError(f"record is missing {sorted(RECORD_KEYS[m] for m in missing)}")
    return FlexibilityFunction(**kwargs)


def unit_step(grid, start: int = 0) -> PenaltySignal:
    values = np.zeros(grid.steps)
    values[start:] = 1.0
    return PenaltySignal(grid, values)

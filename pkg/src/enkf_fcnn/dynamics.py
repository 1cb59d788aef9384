"""Lorenz-63 and Lorenz-96 forward models with forward-Euler time stepping.

States are float64 arrays whose first axis is the state dimension. A 2-D
array of shape ``(d, N)`` is treated as ``N`` independent states (one per
column) and is integrated column by column with identical floating point
operations, so batching members never changes their trajectories.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, NumericalBlowupError

#: Any state component with a larger magnitude counts as a blowup.
BLOWUP_THRESHOLD = 1e6

LORENZ63_DEFAULTS = {"sigma": 10.0, "rho": 28.0, "beta": 8.0 / 3.0}
LORENZ96_DEFAULTS = {"F": 8.0}


@dataclass(frozen=True)
class ModelSpec:
    model_id: str
    dim: int
    params: dict = field(default_factory=dict)
    dt: float = 0.01
    steps_per_window: int = 1

    def __post_init__(self):
        if self.model_id == "lorenz63":
            if self.dim != 3:
                raise ContractViolation(f"lorenz63 has dimension 3, got {self.dim}")
            missing = set(LORENZ63_DEFAULTS) - set(self.params)
        elif self.model_id == "lorenz96":
            if self.dim < 4:
                raise ContractViolation(f"lorenz96 needs at least 4 variables, got {self.dim}")
            missing = set(LORENZ96_DEFAULTS) - set(self.params)
        else:
            raise ContractViolation(f"unknown model_id {self.model_id!r}")
        if missing:
            raise ContractViolation(f"missing model parameters: {sorted(missing)}")
        if not self.dt >= 0:
            raise ContractViolation(f"dt must be non-negative, got {self.dt}")
        if self.steps_per_window < 1:
            raise ContractViolation(f"steps_per_window must be >= 1, got {self.steps_per_window}")

    @property
    def window_length(self):
        return self.dt * self.steps_per_window

    def with_steps(self, steps_per_window):
        return ModelSpec(self.model_id, self.dim, dict(self.params), self.dt, steps_per_window)


def lorenz63(dt=0.01, steps_per_window=8, **params):
    return ModelSpec("lorenz63", 3, {**LORENZ63_DEFAULTS, **params}, dt, steps_per_window)


def lorenz96(dim=10, dt=0.01, steps_per_window=5, **params):
    return ModelSpec("lorenz96", dim, {**LORENZ96_DEFAULTS, **params}, dt, steps_per_window)


def rhs_lorenz63(x, params):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != 3:
        raise ContractViolation(f"lorenz63 state must have 3 components, got {x.shape[0]}")
    sigma, rho, beta = params["sigma"], params["rho"], params["beta"]
    chi, ups, zeta = x[0], x[1], x[2]
    out = np.empty_like(x)
    out[0] = sigma * (ups - chi)
    out[1] = chi * (rho - zeta) - ups
    out[2] = chi * ups - beta * zeta
    return out


def rhs_lorenz96(x, params):
    """Cyclic Lorenz-96 tendency ``(x[i+1] - x[i-2]) * x[i-1] - x[i] + F`` (0-based)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < 4:
        raise ContractViolation(f"lorenz96 state needs at least 4 components, got {x.shape[0]}")
    forcing = params["F"]
    ahead = np.roll(x, -1, axis=0)
    back2 = np.roll(x, 2, axis=0)
    back1 = np.roll(x, 1, axis=0)
    return (ahead - back2) * back1 - x + forcing


_RHS = {"lorenz63": rhs_lorenz63, "lorenz96": rhs_lorenz96}


def rhs(x, spec):
    return _RHS[spec.model_id](x, spec.params)


def _check_finite(x, time_index):
    bad = ~(np.abs(x) <= BLOWUP_THRESHOLD)  # NaN compares False
    if bad.any():
        member = None
        if x.ndim == 2:
            member = int(np.flatnonzero(bad.any(axis=0))[0])
        raise NumericalBlowupError(time_index, member=member, detail="state magnitude above threshold")


def step_euler(x, spec, time_index=0):
    """One forward-Euler step ``x + dt * f(x)``; ``time_index`` labels errors."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != spec.dim:
        raise ContractViolation(f"state dimension {x.shape[0]} does not match model dimension {spec.dim}")
    out = x + spec.dt * rhs(x, spec)
    _check_finite(out, time_index + 1)
    return out


def propagate_window(x, spec, time_index=0, steps=None):
    """Apply ``steps`` (default ``spec.steps_per_window``) Euler steps."""
    n = spec.steps_per_window if steps is None else int(steps)
    for i in range(n):
        x = step_euler(x, spec, time_index + i)
    return np.asarray(x, dtype=np.float64)

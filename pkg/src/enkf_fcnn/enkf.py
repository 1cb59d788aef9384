"""Stochastic (perturbed-observation) ensemble Kalman filter."""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import dynamics
from .errors import ContractViolation, DegenerateEnsembleError, NumericalBlowupError
from .numerics import GaussianSpec, covariance, gaussian_sample, spd_solve

MEASUREMENT = "measurement"
FORECAST = "forecast"
ANALYSIS = "analysis"


@dataclass
class Ensemble:
    """``members`` is a ``d x N`` float64 matrix, one member per column."""

    members: np.ndarray
    kind: str
    time_index: int = 0

    def __post_init__(self):
        self.members = np.asarray(self.members, dtype=np.float64)
        if self.members.ndim != 2:
            raise ContractViolation(f"ensemble members must be a d x N matrix, got {self.members.shape}")
        if self.kind not in (MEASUREMENT, FORECAST, ANALYSIS):
            raise ContractViolation(f"unknown ensemble kind {self.kind!r}")

    @property
    def size(self):
        return self.members.shape[1]

    @property
    def dim(self):
        return self.members.shape[0]

    def mean(self):
        return self.members.mean(axis=1)


@dataclass(frozen=True)
class ObservationModel:
    """Linear selection operator: ``H x`` returns ``x[observed_indices]`` in order.

    Indices are 0-based. ``state_dim`` is the model dimension ``d``.
    """

    observed_indices: tuple
    noise_magnitude: float
    state_dim: int

    def __post_init__(self):
        idx = tuple(int(i) for i in self.observed_indices)
        object.__setattr__(self, "observed_indices", idx)
        if not idx:
            raise ContractViolation("at least one observed index is required")
        if len(set(idx)) != len(idx):
            raise ContractViolation(f"observed indices must be distinct: {idx}")
        if any(i < 0 or i >= self.state_dim for i in idx):
            raise ContractViolation(f"observed indices must lie in [0, {self.state_dim}): {idx}")
        if not self.noise_magnitude >= 0:
            raise ContractViolation(f"noise magnitude must be >= 0, got {self.noise_magnitude}")

    @classmethod
    def full(cls, state_dim, noise_magnitude):
        return cls(tuple(range(state_dim)), noise_magnitude, state_dim)

    @property
    def obs_dim(self):
        return len(self.observed_indices)

    @property
    def H(self):
        H = np.zeros((self.obs_dim, self.state_dim))
        H[np.arange(self.obs_dim), self.observed_indices] = 1.0
        return H

    def apply(self, x):
        """``H x`` for a state vector or a ``d x N`` matrix."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[0] != self.state_dim:
            raise ContractViolation(f"state dimension {x.shape[0]} does not match {self.state_dim}")
        return x[list(self.observed_indices)]


@dataclass
class AssimilationStepOutput:
    time_index: int
    obs_mean: np.ndarray
    analysis: Ensemble
    analysis_mean: np.ndarray
    forecast_mean: np.ndarray = None
    correction: np.ndarray = None
    #: Filter output: ``analysis_mean + correction`` in a coupled run.
    output_mean: np.ndarray = None


def synthesize_measurement_mean(truth, obs, rng):
    """``H truth + delta`` with ``delta ~ N(0, A I_m)`` drawn from ``rng``."""
    truth = np.asarray(truth, dtype=np.float64)
    projected = obs.apply(truth)
    return gaussian_sample(rng, GaussianSpec(projected, obs.noise_magnitude), obs.obs_dim)


def synthesize_measurement_ensemble(obs_mean, obs, N, rng, time_index=0):
    """Members ``obs_mean + delta_e(n)``.

    Member ``n`` draws its perturbation from ``rng.derive(n, time_index)``, so
    the first members do not depend on the ensemble size.
    """
    obs_mean = np.asarray(obs_mean, dtype=np.float64)
    if N < 2:
        raise DegenerateEnsembleError(f"measurement ensemble needs N >= 2, got {N}")
    m = obs_mean.shape[0]
    spec = GaussianSpec(obs_mean, obs.noise_magnitude)
    members = np.empty((m, N))
    for n in range(N):
        members[:, n] = gaussian_sample(rng.derive(n, time_index), spec, m)
    return Ensemble(members, MEASUREMENT, time_index)


def _propagate_chunk(block, spec, time_index, offset):
    try:
        return dynamics.propagate_window(block, spec, time_index * spec.steps_per_window)
    except NumericalBlowupError as exc:
        member = None if exc.member is None else exc.member + offset
        raise NumericalBlowupError(time_index + 1, member=member, detail="during forecast") from exc


def forecast(ens, spec, workers=1):
    """Propagate every member over one assimilation window.

    Members are split into contiguous column blocks when ``workers > 1``; the
    per-column arithmetic is identical either way.
    """
    X = ens.members
    if X.shape[0] != spec.dim:
        raise ContractViolation(f"ensemble dimension {X.shape[0]} does not match model dimension {spec.dim}")
    workers = max(1, min(int(workers), X.shape[1]))
    if workers == 1:
        out = _propagate_chunk(X, spec, ens.time_index, 0)
    else:
        bounds = np.linspace(0, X.shape[1], workers + 1).astype(int)
        blocks = [(X[:, a:b], a) for a, b in zip(bounds[:-1], bounds[1:])]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda ab: _propagate_chunk(ab[0], spec, ens.time_index, ab[1]), blocks))
        out = np.concatenate(parts, axis=1)
    return Ensemble(out, FORECAST, ens.time_index + 1)


def kalman_gain(P_f, R, obs):
    """``P_f H^T (H P_f H^T + R)^{-1}`` via a Cholesky solve of the transposed system."""
    P_f = np.asarray(P_f, dtype=np.float64)
    R = np.asarray(R, dtype=np.float64)
    d, m = obs.state_dim, obs.obs_dim
    if P_f.shape != (d, d):
        raise ContractViolation(f"P_f must be {d} x {d}, got {P_f.shape}")
    if R.shape != (m, m):
        raise ContractViolation(f"R must be {m} x {m}, got {R.shape}")
    idx = list(obs.observed_indices)
    HP = P_f[idx, :]
    innovation_cov = HP[:, idx] + R
    return spd_solve(innovation_cov, HP).T


def analyze(S_f, S_m, obs, R=None):
    """Analysis update ``S_a = S_f + K (S_m - H S_f)``.

    ``P_f`` and (unless ``R`` is given) ``R`` are the sample covariances of
    the forecast and measurement ensembles.
    """
    if S_f.size != S_m.size:
        raise ContractViolation(f"forecast has {S_f.size} members, measurements have {S_m.size}")
    if S_f.time_index != S_m.time_index:
        raise ContractViolation(f"time index mismatch: forecast {S_f.time_index}, measurements {S_m.time_index}")
    if S_m.dim != obs.obs_dim:
        raise ContractViolation(f"measurement dimension {S_m.dim} does not match {obs.obs_dim}")
    P_f = covariance(S_f.members)
    if R is None:
        R = covariance(S_m.members)
    innovation = S_m.members - obs.apply(S_f.members)
    if not innovation.any():
        return Ensemble(S_f.members.copy(), ANALYSIS, S_f.time_index)
    K = kalman_gain(P_f, R, obs)
    return Ensemble(S_f.members + K @ innovation, ANALYSIS, S_f.time_index)


def initial_ensemble(truth0, obs, N, obs_rng, member_rng):
    """Initial measurement ensemble ``S_m,0`` in the full state space.

    Unobserved components cannot be left undefined at ``t_0``, so the initial
    "measurement" perturbs every state component with the observation noise
    magnitude. Returns ``(ensemble, full_state_mean)``.
    """
    full = ObservationModel.full(obs.state_dim, obs.noise_magnitude)
    mean0 = synthesize_measurement_mean(truth0, full, obs_rng.derive(0))
    S0 = synthesize_measurement_ensemble(mean0, full, N, member_rng, time_index=0)
    return S0, mean0


def obs_mean_sequence(truth, obs, obs_rng):
    """Measurement means for steps ``1..J`` of a truth trajectory (``J x m``).

    Step ``j`` draws from ``obs_rng.derive(j)``; the full-state mean at step 0
    lives on ``obs_rng.derive(0)`` (see :func:`initial_ensemble`).
    """
    truth = np.asarray(truth, dtype=np.float64)
    out = np.empty((truth.shape[0] - 1, obs.obs_dim))
    for j in range(1, truth.shape[0]):
        out[j - 1] = synthesize_measurement_mean(truth[j], obs, obs_rng.derive(j))
    return out


def enkf_run(truth, N, spec, obs, obs_rng, member_rng, workers=1, known_R=False, correct=None):
    """Run the forecast/analysis cycle along a truth trajectory.

    Parameters
    ----------
    truth : ndarray, shape (J+1, d)
        Reference states at the assimilation times.
    N : int
        Ensemble size.
    obs_rng, member_rng : RngStream
        Stream for the shared measurement means, and base stream for the
        per-member perturbations.
    known_R : bool
        Use ``A I`` instead of the sample covariance of the measurement ensemble.
    correct : callable, optional
        ``correct(j, S_a, obs_mean, prev_mean) -> delta`` is evaluated after
        each analysis; ``delta`` is added to every member before the next
        forecast. ``prev_mean`` is the previous output mean.

    Returns
    -------
    list of AssimilationStepOutput
        Entry 0 is the initial ensemble; entries ``1..J`` the analyses.
    """
    truth = np.asarray(truth, dtype=np.float64)
    if truth.ndim != 2 or truth.shape[1] != spec.dim:
        raise ContractViolation(f"truth must have shape (J+1, {spec.dim}), got {truth.shape}")
    if truth.shape[0] < 1:
        raise ContractViolation("truth trajectory is empty")
    R_known = obs.noise_magnitude * np.eye(obs.obs_dim) if known_R else None

    S0, mean0 = initial_ensemble(truth[0], obs, N, obs_rng, member_rng)
    S_a = Ensemble(S0.members, ANALYSIS, 0)
    m0 = S_a.mean()
    outputs = [AssimilationStepOutput(0, obs.apply(mean0), S_a, m0, output_mean=m0)]
    prev_mean = m0
    obs_means = obs_mean_sequence(truth, obs, obs_rng)
    for j in range(1, truth.shape[0]):
        S_f = forecast(S_a, spec, workers=workers)
        obs_mean = obs_means[j - 1]
        S_m = synthesize_measurement_ensemble(obs_mean, obs, N, member_rng, time_index=j)
        S_a = analyze(S_f, S_m, obs, R=R_known)
        a_mean = S_a.mean()
        out = AssimilationStepOutput(j, obs_mean, S_a, a_mean, forecast_mean=S_f.mean(), output_mean=a_mean)
        if correct is not None:
            delta = np.asarray(correct(j, S_a, obs_mean, prev_mean), dtype=np.float64)
            out.correction = delta
            out.output_mean = a_mean + delta
            S_a = Ensemble(S_a.members + delta[:, None], ANALYSIS, j)
        outputs.append(out)
        prev_mean = out.output_mean
    return outputs

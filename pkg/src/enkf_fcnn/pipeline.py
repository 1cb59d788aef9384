"""Twin-experiment orchestration for the EnKF-FCNN method.

Random streams are all derived from ``RngStream(config.seed)``:

* ``derive("initial-condition", k)``: uniform draw of trajectory ``k``'s initial state
* ``derive("observation", k)``: measurement means of trajectory ``k``, shared by
  every filter run on that trajectory
* ``derive("members", k, N)``: member perturbations of an ``N``-member run

Keying member streams by ``N`` makes the large and small runs independent
while a coupled run reuses exactly the perturbations of the plain small run.
"""

import logging
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import dynamics, enkf
from .errors import ContractViolation, NumericalBlowupError
from .fcnn import build_input_vector, forward, train
from .numerics import RngStream

log = logging.getLogger(__name__)


@dataclass
class TruthTrajectory:
    index: int
    initial_condition: np.ndarray
    states: np.ndarray  # (J+1, d), one row per assimilation time


@dataclass
class AssimilationRecord:
    time_index: int
    small_analysis_ensemble: np.ndarray
    small_analysis_mean: np.ndarray
    large_analysis_mean: np.ndarray
    obs_mean: np.ndarray
    prev_small_analysis_mean: np.ndarray


@dataclass
class TrajectoryRecords:
    """Paired large/small filter results along one truth trajectory.

    Row 0 holds the initial ensembles; ``obs_means[0]`` is the projection of
    the full-state initial measurement mean.
    """

    index: int
    obs_means: np.ndarray        # (J+1, m)
    small_means: np.ndarray      # (J+1, d)
    large_means: np.ndarray      # (J+1, d)
    small_ensembles: np.ndarray  # (J+1, d, N_small)
    targets: np.ndarray = None   # (J, d)

    def __post_init__(self):
        if self.targets is None:
            self.targets = correction_targets(self.large_means, self.small_means)

    @property
    def n_records(self):
        return self.small_means.shape[0] - 1

    def records(self):
        for j in range(1, self.small_means.shape[0]):
            yield AssimilationRecord(
                j, self.small_ensembles[j], self.small_means[j], self.large_means[j],
                self.obs_means[j], self.small_means[j - 1],
            )

    def inputs(self):
        rows = [
            build_input_vector(self.small_ensembles[j], self.obs_means[j], self.small_means[j - 1])
            for j in range(1, self.small_means.shape[0])
        ]
        if not rows:
            return np.empty((0, 0))
        return np.stack(rows)


@dataclass
class Dataset:
    trajectories: list
    train_ids: list
    val_ids: list
    test_ids: list
    meta: dict = field(default_factory=dict)
    #: trajectories left out because a filter run blew up: ``{"index", "reason"}``
    excluded: list = field(default_factory=list)

    def by_index(self):
        return {t.index: t for t in self.trajectories}

    def pairs(self, ids):
        table = self.by_index()
        chosen = [table[i] for i in ids if table[i].n_records]
        if not chosen:
            return np.empty((0, 0)), np.empty((0, 0))
        X = np.concatenate([t.inputs() for t in chosen])
        Y = np.concatenate([t.targets for t in chosen])
        return X, Y

    @property
    def fit_ids(self):
        return [i for i in self.train_ids if i not in set(self.val_ids)]


def correction_targets(large_means, small_means):
    """Correction ``large_mean - small_mean`` for every step after the first."""
    return np.asarray(large_means)[1:] - np.asarray(small_means)[1:]


def parallel_map(fn, items, workers):
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))


#: Redraws allowed per trajectory when forward Euler blows up from an initial state.
MAX_INITIAL_CONDITION_DRAWS = 100


def _truth_one(args):
    config, k = args
    spec = config.model
    root = RngStream(config.seed)
    box = config.initial_box
    for attempt in range(MAX_INITIAL_CONDITION_DRAWS):
        stream = root.derive("initial-condition", k) if attempt == 0 else root.derive("initial-condition", k, attempt)
        x0 = box[:, 0] + stream.uniforms(spec.dim) * (box[:, 1] - box[:, 0])
        try:
            x = dynamics.propagate_window(x0, spec, steps=config.spinup_steps)
            states = np.empty((config.windows + 1, spec.dim))
            states[0] = x
            for j in range(1, config.windows + 1):
                x = dynamics.propagate_window(x, spec, time_index=(j - 1) * spec.steps_per_window)
                states[j] = x
        except NumericalBlowupError as exc:
            last = exc
            log.debug("trajectory %d: initial draw %d blew up at step %d", k, attempt, exc.time_index)
            continue
        return TruthTrajectory(k, x0, states)
    raise NumericalBlowupError(last.time_index, trajectory=k,
                               detail=f"truth generation, {MAX_INITIAL_CONDITION_DRAWS} initial draws") from last


def generate_truths(config, workers=1):
    """``K`` reference trajectories: uniform initial state, spin-up, then ``J+1`` recorded states.

    An initial draw whose integration blows up is replaced by a fresh draw from
    ``derive("initial-condition", k, attempt)``.
    """
    return parallel_map(_truth_one, [(config, k) for k in range(config.initial_conditions)], workers)


def obs_stream(config, k):
    return RngStream(config.seed).derive("observation", k)


def member_stream(config, k, N):
    return RngStream(config.seed).derive("members", k, N)


def run_filter(config, truth, N, correct=None, workers=1):
    """EnKF with ``N`` members along ``truth`` (a :class:`TruthTrajectory`)."""
    try:
        return enkf.enkf_run(
            truth.states, N, config.model, config.observation,
            obs_stream(config, truth.index), member_stream(config, truth.index, N),
            workers=workers, known_R=config.known_covariance, correct=correct,
        )
    except NumericalBlowupError as exc:
        raise NumericalBlowupError(exc.time_index, member=exc.member, trajectory=truth.index,
                                   detail="filter run") from exc


def _records_one(args):
    config, truth = args
    try:
        large = run_filter(config, truth, config.large)
        small = run_filter(config, truth, config.small)
    except NumericalBlowupError as exc:
        return str(exc)
    return TrajectoryRecords(
        truth.index,
        obs_means=np.stack([s.obs_mean for s in small]),
        small_means=np.stack([s.analysis_mean for s in small]),
        large_means=np.stack([s.analysis_mean for s in large]),
        small_ensembles=np.stack([s.analysis.members for s in small]),
    )


def split_ids(config, ids):
    """Whole-trajectory train/validation/test assignment (train first, in index order)."""
    ids = list(ids)
    n_train = int(round(config.train_fraction * len(ids)))
    n_train = min(max(n_train, 1), len(ids))
    train_ids, test_ids = ids[:n_train], ids[n_train:]
    n_val = int(round(config.validation_fraction * n_train)) if n_train >= 2 else 0
    n_val = min(n_val, n_train - 1)
    val_ids = train_ids[n_train - n_val:] if n_val else []
    return train_ids, val_ids, test_ids


def generate_dataset(config, truths, workers=1):
    """Paired large/small runs on every truth trajectory, split by trajectory.

    A trajectory on which either filter run blows up is left out and listed
    in ``Dataset.excluded``; the split is made over the remaining ones.
    """
    results = parallel_map(_records_one, [(config, t) for t in truths], workers)
    records, excluded = [], []
    for t, res in zip(truths, results):
        if isinstance(res, str):
            log.warning("trajectory %d excluded: %s", t.index, res)
            excluded.append({"index": t.index, "reason": res})
        else:
            records.append(res)
    if not records:
        raise NumericalBlowupError(0, detail="every trajectory blew up")
    train_ids, val_ids, test_ids = split_ids(config, [r.index for r in records])
    return Dataset(records, train_ids, val_ids, test_ids, excluded=excluded)


def coupled_pairs(config, model, truth, large_means):
    """Training pairs observed along a coupled run: inputs and ``large_mean - analysis_mean``."""
    outputs = run_coupled(config, model, truth)
    X = [build_input_vector(outputs[j].analysis.members, outputs[j].obs_mean, outputs[j - 1].output_mean)
         for j in range(1, len(outputs))]
    Y = [large_means[j] - outputs[j].analysis_mean for j in range(1, len(outputs))]
    d = config.model.dim
    return np.array(X).reshape(len(X), config.n_inputs), np.array(Y).reshape(len(Y), d)


def train_model(config, dataset, truths=None, log_fn=None):
    """Train on the fit trajectories, validate on the validation ones, report test MSE.

    With ``fcnn.refinement_rounds = R > 0`` the network is retrained ``R``
    more times. Each round runs the coupled filter with the current network
    along every fit and validation trajectory (this needs ``truths``) and
    appends the pairs seen there to the respective set, so the network also
    learns from the states it produces itself. A coupled run that blows up
    contributes no pairs to that round. Test trajectories are never used.
    """
    rounds = int(config.fcnn.get("refinement_rounds", 0))
    fit = dataset.pairs(dataset.fit_ids)
    val = dataset.pairs(dataset.val_ids) if dataset.val_ids else None
    test = dataset.pairs(dataset.test_ids) if dataset.test_ids else None
    if rounds and truths is None:
        raise ContractViolation("refinement rounds need the truth trajectories")
    fcfg = config.fcnn_config()
    history = []

    def fit_once(r):
        def tagged(rec):
            rec = {"round": r, **rec}
            history.append(rec)
            if log_fn is not None:
                log_fn(rec)
        return train(fcfg, fit, test, val, layout=config.input_layout(), log=tagged)

    skipped = []

    def collect(model, ids, r):
        pairs = []
        for i in ids:
            try:
                pairs.append(coupled_pairs(config, model, truth_of[i], table[i].large_means))
            except NumericalBlowupError as exc:
                log.warning("refinement round %d: %s", r, exc)
                skipped.append({"round": r, "index": i})
        return pairs

    model = fit_once(0)
    if rounds:
        table = dataset.by_index()
        truth_of = {t.index: t for t in truths}
        for r in range(1, rounds + 1):
            new_fit = collect(model, dataset.fit_ids, r)
            fit = tuple(np.concatenate([fit[c]] + [p[c] for p in new_fit]) for c in (0, 1))
            if val is not None:
                new_val = collect(model, dataset.val_ids, r)
                val = tuple(np.concatenate([val[c]] + [p[c] for p in new_val]) for c in (0, 1))
            log.info("refinement round %d: %d training pairs", r, fit[0].shape[0])
            model = fit_once(r)
    model.history = history
    model.training_meta["refinement_rounds"] = rounds
    model.training_meta["refinement_skipped"] = skipped
    return model


def check_model(config, model):
    sizes = model.config.layer_sizes
    if sizes[0] != config.n_inputs or sizes[-1] != config.model.dim:
        raise ContractViolation(
            f"model maps {sizes[0]} -> {sizes[-1]} but the configuration needs "
            f"{config.n_inputs} -> {config.model.dim}"
        )


def run_coupled(config, model, truth, workers=1):
    """Small-ensemble EnKF with the network correction added after every analysis."""
    check_model(config, model)

    def correct(j, S_a, obs_mean, prev_mean):
        return forward(model, build_input_vector(S_a.members, obs_mean, prev_mean))

    return run_filter(config, truth, config.small, correct=correct, workers=workers)


def epsilon_metric(small_means, large_means):
    """Mean over trajectories of the Euclidean distance between the two means, per step.

    Both inputs have shape ``(K_t, T, d)``.
    """
    a = np.asarray(small_means, dtype=np.float64)
    b = np.asarray(large_means, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 3:
        raise ContractViolation(f"misaligned series: {a.shape} vs {b.shape}")
    return np.linalg.norm(a - b, axis=2).mean(axis=0)


def _coupled_means(args):
    config, model, truth = args
    return np.stack([s.output_mean for s in run_coupled(config, model, truth)])


def evaluate(config, dataset, truths, model, workers=1):
    """ε(t) of the plain and the corrected small-ensemble filter on the test trajectories."""
    table = dataset.by_index()
    test_truths = [t for t in truths if t.index in set(dataset.test_ids)]
    if not test_truths:
        raise ContractViolation("dataset has no test trajectories")
    large = np.stack([table[t.index].large_means for t in test_truths])
    plain = np.stack([table[t.index].small_means for t in test_truths])
    coupled = np.stack(parallel_map(_coupled_means, [(config, model, t) for t in test_truths], workers))
    eps_plain = epsilon_metric(plain, large)
    eps_coupled = epsilon_metric(coupled, large)
    mean_plain = float(eps_plain[1:].mean())
    mean_coupled = float(eps_coupled[1:].mean())
    return {
        "test_ids": [t.index for t in test_truths],
        "epsilon_plain": eps_plain,
        "epsilon_coupled": eps_coupled,
        "time_mean_plain": mean_plain,
        "time_mean_coupled": mean_coupled,
        "ratio": mean_plain / mean_coupled if mean_coupled > 0 else float("inf"),
    }


def analysis_rmse(means, truth_states):
    """Per-step RMSE over state components (``(T,)``)."""
    diff = np.asarray(means) - np.asarray(truth_states)
    return np.sqrt(np.mean(diff * diff, axis=-1))


def _median_time(fn, repetitions, warmup):
    for _ in range(warmup):
        fn()
    times = []
    clock = time.perf_counter
    for _ in range(repetitions):
        t0 = clock()
        fn()
        times.append(clock() - t0)
    return statistics.median(times)


def timing_benchmark(config, model, repetitions=1000, warmup=100):
    """Median wall time of one single-member window propagation and one network call."""
    if repetitions < 1:
        raise ContractViolation("repetitions must be >= 1")
    check_model(config, model)
    spec = config.model
    truth = _truth_one((config.with_overrides(**{"experiment.windows": 0}), 0)).states[0]
    x_in = np.resize(truth, config.n_inputs)
    window = _median_time(lambda: dynamics.propagate_window(truth, spec), repetitions, warmup)
    infer = _median_time(lambda: forward(model, x_in), repetitions, warmup)
    return {
        "single_window_seconds": window,
        "fcnn_inference_seconds": infer,
        "repetitions": repetitions,
        "warmup": warmup,
        "ratio": window / infer if infer > 0 else float("inf"),
    }

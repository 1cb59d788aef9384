"""Random streams, Gaussian sampling and the small dense kernels used by the filter.

Random numbers come from the Philox4x64-10 counter-based generator. A stream is
identified by ``(master_seed, stream_index)``, which is used verbatim as the
128-bit Philox key (low word = seed, high word = stream index) with the counter
starting at zero. Uniform doubles are produced as ``(u64 >> 11) * 2**-53`` (the
NumPy ``Generator.random`` transform), and standard normals by Box-Muller:
each pair of consecutive uniforms ``(u1, u2)`` yields

    r = sqrt(-2 log(1 - u1)),  z0 = r cos(2 pi u2),  z1 = r sin(2 pi u2)

and the normals are emitted in the order ``z0, z1`` of pair 0, pair 1, ...
A request for an odd number of normals discards the final ``z1``.
"""

import hashlib
import math

import numpy as np
import scipy.linalg

from .errors import ContractViolation, DegenerateEnsembleError, SingularInnovationCovarianceError

ALGORITHM_ID = "philox4x64-10/box-muller"

_U64 = (1 << 64) - 1

#: Jitter retries for :func:`spd_solve`.
MAX_JITTER_RETRIES = 3
JITTER_SCALE = 1e-10


def _label_bytes(label):
    if isinstance(label, (bool, np.bool_)):
        raise TypeError("boolean stream labels are ambiguous")
    if isinstance(label, (int, np.integer)):
        return b"i" + int(label).to_bytes(16, "little", signed=True)
    if isinstance(label, str):
        data = label.encode("utf-8")
        return b"s" + len(data).to_bytes(4, "little") + data
    raise TypeError(f"unsupported stream label {label!r}")


class RngStream:
    """A reproducible stream of uniforms and normals.

    Streams are cheap. Derive a child with :meth:`derive` for every independent
    consumer (ensemble member, trajectory, time step) rather than sharing one
    stream between workers.
    """

    __slots__ = ("algorithm_id", "master_seed", "stream_index", "_gen")

    def __init__(self, master_seed, stream_index=0):
        master_seed = int(master_seed)
        stream_index = int(stream_index)
        if not (0 <= master_seed <= _U64 and 0 <= stream_index <= _U64):
            raise ContractViolation("seed and stream index must be unsigned 64-bit integers")
        self.algorithm_id = ALGORITHM_ID
        self.master_seed = master_seed
        self.stream_index = stream_index
        self._gen = None

    def __repr__(self):
        return f"RngStream(master_seed={self.master_seed}, stream_index={self.stream_index:#018x})"

    def derive(self, *labels):
        """Child stream keyed by this stream's index and ``labels`` (ints or strings).

        The child index is the first 8 bytes (little endian) of
        ``blake2b(parent_index || encoded labels, digest_size=8)``.
        """
        h = hashlib.blake2b(digest_size=8)
        h.update(self.stream_index.to_bytes(8, "little"))
        for label in labels:
            h.update(_label_bytes(label))
        return RngStream(self.master_seed, int.from_bytes(h.digest(), "little"))

    def _generator(self):
        if self._gen is None:
            key = self.master_seed | (self.stream_index << 64)
            self._gen = np.random.Generator(np.random.Philox(key=key))
        return self._gen

    def uniforms(self, n):
        """``n`` doubles in [0, 1), consumed from the stream in order."""
        return self._generator().random(int(n))

    def permutation(self, n):
        return self._generator().permutation(int(n))

    def standard_normals(self, n):
        n = int(n)
        npairs = (n + 1) // 2
        u = self.uniforms(2 * npairs).reshape(npairs, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = 2.0 * math.pi * u[:, 1]
        z = np.empty((npairs, 2))
        z[:, 0] = r * np.cos(theta)
        z[:, 1] = r * np.sin(theta)
        return z.reshape(-1)[:n]


class GaussianSpec:
    """Isotropic Gaussian ``N(mean, A * I)``."""

    __slots__ = ("mean", "covariance_magnitude")

    def __init__(self, mean, covariance_magnitude):
        if not covariance_magnitude >= 0:
            raise ContractViolation(f"covariance magnitude must be >= 0, got {covariance_magnitude}")
        self.mean = np.asarray(mean, dtype=np.float64)
        self.covariance_magnitude = float(covariance_magnitude)


def gaussian_sample(rng, spec, dim):
    """Draw ``mean + sqrt(A) * z`` using ``dim`` normals from ``rng``."""
    if spec.mean.ndim != 1 or spec.mean.shape[0] != dim:
        raise ContractViolation(f"dimension mismatch: mean has shape {spec.mean.shape}, dim={dim}")
    z = rng.standard_normals(dim)
    return spec.mean + math.sqrt(spec.covariance_magnitude) * z


def _as_ensemble_matrix(S):
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2:
        raise ContractViolation(f"expected a d x N matrix, got shape {S.shape}")
    if S.shape[1] < 2:
        raise DegenerateEnsembleError(f"need at least 2 members, got {S.shape[1]}")
    return S


def ensemble_anomalies(S):
    """Deviations of each column of ``S`` (d x N) from the column mean."""
    S = _as_ensemble_matrix(S)
    return S - S.mean(axis=1, keepdims=True)


def covariance(S):
    """Sample covariance ``S' S'^T / (N - 1)`` of the columns of ``S``."""
    A = ensemble_anomalies(S)
    C = A @ A.T / (A.shape[1] - 1)
    # exact symmetry; the product is symmetric only up to rounding
    return 0.5 * (C + C.T)


def spd_solve(Amat, B):
    """Solve ``Amat X = B`` for symmetric positive definite ``Amat`` by Cholesky.

    If the factorization fails, ``JITTER_SCALE * trace(Amat) / m`` is added to
    the diagonal and the factorization retried, at most ``MAX_JITTER_RETRIES``
    times. A matrix with zero trace uses ``JITTER_SCALE`` itself as the jitter.
    """
    Amat = np.asarray(Amat, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if Amat.ndim != 2 or Amat.shape[0] != Amat.shape[1]:
        raise ContractViolation(f"expected a square matrix, got shape {Amat.shape}")
    vector_rhs = B.ndim == 1
    if vector_rhs:
        B = B[:, None]
    if B.shape[0] != Amat.shape[0]:
        raise ContractViolation(f"right-hand side has {B.shape[0]} rows, matrix has {Amat.shape[0]}")
    if not (np.all(np.isfinite(Amat)) and np.all(np.isfinite(B))):
        raise ContractViolation("non-finite entries in linear system")

    m = Amat.shape[0]
    trace = float(np.trace(Amat))
    jitter = JITTER_SCALE * trace / m if trace > 0 else JITTER_SCALE
    work = Amat.copy()
    for attempt in range(MAX_JITTER_RETRIES + 1):
        try:
            factor = scipy.linalg.cho_factor(work, lower=True, check_finite=False)
            break
        except np.linalg.LinAlgError:
            if attempt == MAX_JITTER_RETRIES:
                raise SingularInnovationCovarianceError(
                    f"Cholesky factorization failed after {MAX_JITTER_RETRIES} jitter retries"
                ) from None
            work[np.diag_indices(m)] += jitter
    X = scipy.linalg.cho_solve(factor, B, check_finite=False)
    return X[:, 0] if vector_rhs else X

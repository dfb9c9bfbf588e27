"""Score models: analytic Gaussian / Gaussian-mixture priors and an external
denoiser client.

A score model returns score(x, sigma) ~= grad log p(x + noise of std sigma).
The analytic models compute the smoothed score in closed form through the
denoising-residual identity

    score(x, sigma) = (denoise(x, sigma) - x) / sigma**2

where denoise is the exact conditional mean E[x_clean | x]. They exist to
verify the sampler end to end against ground truth. Learned denoisers attach
through ``ExternalDenoiserClient``, which speaks a small binary protocol over
a child process's standard streams (or any binary stream pair):

    request:  b"SNDQ", u16 version=1, u32 N, f64 sigma, N * f32 noisy values
    response: b"SNDR", u16 version=1, u32 N,            N * f32 denoised

All integers and floats are little-endian. Anything else on the wire raises
``ProtocolError`` with the offending header bytes attached. The client is
single-session: one outstanding request at a time.
"""

from __future__ import annotations

import struct
import subprocess
import threading
from typing import Protocol, runtime_checkable

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import logsumexp

REQUEST_MAGIC = b"SNDQ"
RESPONSE_MAGIC = b"SNDR"
PROTOCOL_VERSION = 1

_LOG_2PI = float(np.log(2.0 * np.pi))


class ProtocolError(RuntimeError):
    """Wire protocol violation; carries the raw header for diagnosis."""

    def __init__(self, message: str, header: bytes = b""):
        super().__init__(message)
        self.header = header


@runtime_checkable
class ScoreModel(Protocol):
    """Anything that can return the smoothed prior score."""

    @property
    def dim(self) -> int: ...

    def score(self, x: np.ndarray, sigma: float) -> np.ndarray: ...


class GaussianPrior:
    """Multivariate normal prior with exact smoothed score and denoiser.

    The smoothed density at noise level sigma is N(mean, cov + sigma^2 I),
    so score(x, sigma) = -(cov + sigma^2 I)^{-1} (x - mean). sigma = 0 is
    allowed and gives the clean-prior score. Cholesky factors are cached per
    sigma because the sampler revisits each annealing level many times.
    """

    supports_batch = True

    def __init__(self, mean: np.ndarray, covariance: np.ndarray):
        mean = np.ascontiguousarray(mean, dtype=np.float64)
        cov = np.ascontiguousarray(covariance, dtype=np.float64)
        if mean.ndim != 1:
            raise ValueError("mean must be 1-D")
        n = mean.size
        if cov.shape != (n, n):
            raise ValueError(f"covariance must be {n}x{n}, got {cov.shape}")
        if np.max(np.abs(cov - cov.T)) > 1e-12:
            raise ValueError("covariance must be symmetric to 1e-12")
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ValueError("covariance must be positive definite") from exc
        mean.flags.writeable = False
        cov.flags.writeable = False
        self.mean = mean
        self.covariance = cov
        # diagonal covariances get elementwise arithmetic; image-sized priors
        # are usually diagonal and dense factorization would dominate runtime
        diag = np.diag(np.diag(cov))
        self._diagonal = np.array_equal(cov, diag)
        self._variances = np.diag(cov).copy() if self._diagonal else None
        self._factor_cache: dict[float, tuple] = {}
        self._cache_lock = threading.Lock()

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def is_diagonal(self) -> bool:
        return self._diagonal

    @property
    def is_isotropic(self) -> bool:
        return self._diagonal and bool(
            np.all(self._variances == self._variances[0])
        )

    @property
    def isotropic_variance(self) -> float:
        if not self.is_isotropic:
            raise ValueError("prior is not isotropic")
        return float(self._variances[0])

    def _factor(self, sigma: float):
        key = float(sigma)
        with self._cache_lock:
            hit = self._factor_cache.get(key)
        if hit is not None:
            return hit
        smoothed = self.covariance + key * key * np.eye(self.dim)
        try:
            fac = cho_factor(smoothed, lower=True)
        except np.linalg.LinAlgError as exc:  # unreachable under the invariants
            raise ArithmeticError(f"singular smoothed covariance at sigma={sigma}") from exc
        with self._cache_lock:
            self._factor_cache[key] = fac
        return fac

    def score(self, x: np.ndarray, sigma: float = 0.0) -> np.ndarray:
        if sigma < 0:
            raise ValueError("sigma must be >= 0")
        x = np.asarray(x, dtype=np.float64)
        delta = x - self.mean
        if self._diagonal:
            return -delta / (self._variances + sigma * sigma)
        return -cho_solve(self._factor(sigma), delta.T).T

    def denoise(self, x: np.ndarray, sigma: float) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return x + sigma * sigma * self.score(x, sigma)

    def log_marginal(self, x: np.ndarray, sigma: float = 0.0) -> np.ndarray:
        """log density of the sigma-smoothed prior at x; supports batches."""
        x = np.asarray(x, dtype=np.float64)
        delta = np.atleast_2d(x - self.mean)
        if self._diagonal:
            var = self._variances + sigma * sigma
            quad = np.sum(delta * delta / var, axis=-1)
            logdet = float(np.sum(np.log(var)))
        else:
            fac = self._factor(sigma)
            solved = cho_solve(fac, delta.T).T
            quad = np.einsum("bi,bi->b", delta, solved)
            logdet = 2.0 * np.sum(np.log(np.diag(fac[0])))
        out = -0.5 * (quad + logdet + self.dim * _LOG_2PI)
        return out[0] if x.ndim == 1 else out


class GmmPrior:
    """Gaussian mixture prior with closed-form smoothed denoiser and score.

    denoise(x, sigma) is the posterior mixture mean: component posterior
    means weighted by responsibilities under the sigma-smoothed mixture.
    Responsibilities are computed in log space; annealing pushes sigma down
    to ~0.01 where naive weights underflow.
    """

    supports_batch = True

    def __init__(self, weights: np.ndarray, components: list[GaussianPrior]):
        w = np.ascontiguousarray(weights, dtype=np.float64)
        if w.ndim != 1 or w.size != len(components) or w.size == 0:
            raise ValueError("weights must match the number of components")
        if np.any(w <= 0):
            raise ValueError("weights must be positive")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights must sum to 1, got {w.sum()!r}")
        dims = {c.dim for c in components}
        if len(dims) != 1:
            raise ValueError("components must share one dimension")
        w.flags.writeable = False
        self.weights = w
        self.components = tuple(components)

    @property
    def dim(self) -> int:
        return self.components[0].dim

    def responsibilities(self, x: np.ndarray, sigma: float) -> np.ndarray:
        """Posterior component weights under the smoothed mixture, shape (..., K)."""
        logs = np.stack(
            [np.log(w) + c.log_marginal(x, sigma) for w, c in zip(self.weights, self.components)],
            axis=-1,
        )
        return np.exp(logs - logsumexp(logs, axis=-1, keepdims=True))

    def denoise(self, x: np.ndarray, sigma: float) -> np.ndarray:
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        x = np.asarray(x, dtype=np.float64)
        resp = self.responsibilities(x, sigma)
        means = np.stack([c.denoise(x, sigma) for c in self.components], axis=-1)
        return np.einsum("...kj,...j->...k", means, resp)

    def score(self, x: np.ndarray, sigma: float) -> np.ndarray:
        return (self.denoise(x, sigma) - np.asarray(x, dtype=np.float64)) / (sigma * sigma)

    def log_marginal(self, x: np.ndarray, sigma: float = 0.0) -> np.ndarray:
        logs = np.stack(
            [np.log(w) + c.log_marginal(x, sigma) for w, c in zip(self.weights, self.components)],
            axis=-1,
        )
        return logsumexp(logs, axis=-1)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Draw clean samples from the mixture (testing convenience)."""
        picks = rng.choice(self.weights.size, size=size, p=self.weights)
        out = np.empty((size, self.dim))
        for k, comp in enumerate(self.components):
            mask = picks == k
            if mask.any():
                out[mask] = rng.multivariate_normal(
                    comp.mean, comp.covariance, size=int(mask.sum())
                )
        return out


def _read_exact(stream, count: int, header: bytes) -> bytes:
    data = stream.read(count)
    if data is None or len(data) != count:
        got = 0 if data is None else len(data)
        raise ProtocolError(
            f"truncated response: wanted {count} bytes, got {got}", header
        )
    return data


class ExternalDenoiserClient:
    """Score model backed by a denoiser process speaking the wire protocol.

    One request may be in flight at a time; concurrent chains must each own
    a client or serialize access. The score is computed locally from the
    returned denoised vector via the residual identity.
    """

    def __init__(self, dim: int, reader, writer, process: subprocess.Popen | None = None):
        if dim < 1:
            raise ValueError("dim must be positive")
        self._dim = dim
        self._reader = reader
        self._writer = writer
        self._process = process
        self._lock = threading.Lock()

    @classmethod
    def spawn(cls, command: list[str], dim: int) -> "ExternalDenoiserClient":
        """Launch the denoiser as a child process wired through its std streams."""
        proc = subprocess.Popen(command, stdin=subprocess.PIPE, stdout=subprocess.PIPE)
        return cls(dim, proc.stdout, proc.stdin, process=proc)

    @property
    def dim(self) -> int:
        return self._dim

    def denoise(self, x: np.ndarray, sigma: float) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self._dim,):
            raise ValueError(f"expected shape ({self._dim},), got {x.shape}")
        request = (
            REQUEST_MAGIC
            + struct.pack("<HId", PROTOCOL_VERSION, self._dim, float(sigma))
            + x.astype("<f4").tobytes()
        )
        with self._lock:
            self._writer.write(request)
            self._writer.flush()
            header = _read_exact(self._reader, 10, b"")
            magic, version, n = header[:4], *struct.unpack("<HI", header[4:10])
            if magic != RESPONSE_MAGIC:
                raise ProtocolError(f"bad response magic {magic!r}", header)
            if version != PROTOCOL_VERSION:
                raise ProtocolError(f"unsupported protocol version {version}", header)
            if n != self._dim:
                raise ProtocolError(
                    f"dimension mismatch: sent {self._dim}, denoiser answered {n}", header
                )
            payload = _read_exact(self._reader, 4 * n, header)
        return np.frombuffer(payload, dtype="<f4").astype(np.float64)

    def score(self, x: np.ndarray, sigma: float) -> np.ndarray:
        if sigma <= 0:
            raise ValueError("external score requires sigma > 0")
        d = self.denoise(x, sigma)
        return (d - np.asarray(x, dtype=np.float64)) / (sigma * sigma)

    def close(self) -> None:
        if self._process is not None:
            try:
                self._process.stdin.close()
            except OSError:
                pass
            self._process.wait(timeout=10)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def serve_denoiser(reader, writer, denoise_fn) -> int:
    """Answer protocol requests until EOF; returns the number served.

    Intended for writing denoiser processes: ``denoise_fn(x, sigma)`` gets a
    float64 vector and must return one of the same length.
    """
    served = 0
    while True:
        header = reader.read(18)
        if not header:
            return served
        if len(header) != 18 or header[:4] != REQUEST_MAGIC:
            raise ProtocolError(f"bad request header {header[:4]!r}", header)
        version, n, sigma = struct.unpack("<HId", header[4:18])
        if version != PROTOCOL_VERSION:
            raise ProtocolError(f"unsupported protocol version {version}", header)
        payload = _read_exact(reader, 4 * n, header)
        x = np.frombuffer(payload, dtype="<f4").astype(np.float64)
        d = np.asarray(denoise_fn(x, sigma), dtype=np.float64)
        if d.shape != (n,):
            raise ProtocolError(f"denoise_fn returned shape {d.shape}, expected ({n},)")
        writer.write(RESPONSE_MAGIC + struct.pack("<HI", PROTOCOL_VERSION, n))
        writer.write(d.astype("<f4").tobytes())
        writer.flush()
        served += 1


def _cov_from_array(raw: np.ndarray, n: int) -> np.ndarray:
    cov = np.asarray(raw, dtype=np.float64)
    if cov.ndim == 0:
        return float(cov) * np.eye(n)
    if cov.ndim == 1:
        if cov.size != n:
            raise ValueError(f"diagonal covariance length {cov.size} != dim {n}")
        return np.diag(cov)
    return cov


def load_gaussian_prior(path) -> GaussianPrior:
    """Load a Gaussian prior from an .npz file with arrays 'mean' and 'cov'.

    'cov' may be a full matrix, a diagonal vector, or a scalar variance.
    """
    with np.load(path) as data:
        mean = np.asarray(data["mean"], dtype=np.float64)
        cov = _cov_from_array(data["cov"], mean.size)
    return GaussianPrior(mean, cov)


def load_gmm_prior(path) -> GmmPrior:
    """Load a mixture prior from an .npz file: 'weights', 'means', 'covs'.

    'means' is (K, N); 'covs' is (K, N, N), (K, N) for diagonals, or (K,)
    for isotropic variances.
    """
    with np.load(path) as data:
        weights = np.asarray(data["weights"], dtype=np.float64)
        means = np.asarray(data["means"], dtype=np.float64)
        covs = np.asarray(data["covs"], dtype=np.float64)
    comps = [
        GaussianPrior(means[k], _cov_from_array(covs[k], means.shape[1]))
        for k in range(weights.size)
    ]
    return GmmPrior(weights, comps)

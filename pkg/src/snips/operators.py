"""Dense linear degradation operators and their singular value decompositions.

Everything here is an explicit float64 matrix at desk scale (signal sizes up
to ~1024). Factories cover the classic measurement models: uniform blur with
circular boundary handling, non-overlapping block averaging (downscaling),
random orthonormal projections (compressive sensing), and row-selection
masks (inpainting). ``svd_decompose`` produces the factorization consumed by
the rest of the library.

Operators can be stored in a small portable binary container, see
``operator_to_bytes`` / ``operator_from_bytes``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

OPERATOR_MAGIC = b"SNOP"
OPERATOR_FORMAT_VERSION = 1

_ORTHO_TOL = 1e-8
_RECONSTRUCTION_TOL = 1e-8


class DecompositionError(RuntimeError):
    """Raised when the SVD routine fails on an operator."""


def _as_matrix(entries: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(entries, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"operator entries must be 2-D, got shape {a.shape}")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError(f"operator must be at least 1x1, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("operator entries must be finite")
    return a


@dataclass(frozen=True)
class LinearOperator:
    """A dense M x N measurement matrix."""

    matrix: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "matrix", _as_matrix(self.matrix))
        self.matrix.flags.writeable = False

    @property
    def rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def cols(self) -> int:
        return self.matrix.shape[1]

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Apply the operator to a vector (N,) or a batch (..., N)."""
        x = np.asarray(x, dtype=np.float64)
        return x @ self.matrix.T


@dataclass(frozen=True)
class DegradationSVD:
    """Factorization H = u @ diag(singulars) @ v.T with square u and v.

    ``singulars`` has length M (descending, zero-padded when M > N) and
    ``extended_singulars`` length N (zero-padded when N > M) so that both
    the measurement side and the signal side can be indexed uniformly.
    """

    u: np.ndarray
    singulars: np.ndarray
    v: np.ndarray
    extended_singulars: np.ndarray

    def __post_init__(self):
        u = np.ascontiguousarray(self.u, dtype=np.float64)
        v = np.ascontiguousarray(self.v, dtype=np.float64)
        s = np.ascontiguousarray(self.singulars, dtype=np.float64)
        ext = np.ascontiguousarray(self.extended_singulars, dtype=np.float64)
        m, n = u.shape[0], v.shape[0]
        if u.shape != (m, m) or v.shape != (n, n):
            raise ValueError("u and v must be square")
        if s.shape != (m,) or ext.shape != (n,):
            raise ValueError("singular value vectors have wrong length")
        k = min(m, n)
        if not np.allclose(s[:k], ext[:k], rtol=0, atol=0):
            raise ValueError("singulars and extended_singulars disagree")
        if np.any(s[k:]) or np.any(ext[k:]):
            raise ValueError("padded singular values must be zero")
        if np.any(s < 0) or np.any(np.diff(s) > 0):
            raise ValueError("singular values must be non-negative and descending")
        for name, q in (("u", u), ("v", v)):
            err = np.max(np.abs(q.T @ q - np.eye(q.shape[0])))
            if err > _ORTHO_TOL:
                raise ValueError(f"{name} is not orthogonal (max deviation {err:.3e})")
        for arr in (u, v, s, ext):
            arr.flags.writeable = False
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "singulars", s)
        object.__setattr__(self, "extended_singulars", ext)

    @property
    def m(self) -> int:
        return self.u.shape[0]

    @property
    def n(self) -> int:
        return self.v.shape[0]

    def reconstruct(self) -> np.ndarray:
        """Multiply the factors back into the dense M x N matrix."""
        k = min(self.m, self.n)
        return (self.u[:, :k] * self.singulars[:k]) @ self.v[:, :k].T

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Apply H through the factors: u @ (s * (v.T @ x))."""
        x = np.asarray(x, dtype=np.float64)
        k = min(self.m, self.n)
        xt = x @ self.v
        return (xt[..., :k] * self.singulars[:k]) @ self.u[:, :k].T


def svd_decompose(op: LinearOperator) -> DegradationSVD:
    """Compute the full SVD of an operator.

    The result is deterministic for a given matrix up to the usual sign and
    permutation freedom inside equal-singular-value subspaces; downstream
    code only consumes singular values and orthogonality, so no basis
    canonicalization is attempted.
    """
    a = op.matrix
    m, n = a.shape
    try:
        u, s, vh = np.linalg.svd(a, full_matrices=True)
    except np.linalg.LinAlgError as exc:
        raise DecompositionError(f"SVD failed for {m}x{n} operator: {exc}") from exc
    # numpy returns descending order; sort defensively with a stable permutation
    order = np.argsort(-s, kind="stable")
    s = s[order]
    k = min(m, n)
    # snap numerically-zero singular values to exact zero (standard rank cutoff)
    # so null-space coordinates are classified as such downstream
    if s.size and s[0] > 0:
        s[s < max(m, n) * np.finfo(np.float64).eps * s[0]] = 0.0
    u = np.concatenate([u[:, order], u[:, k:]], axis=1) if u.shape[1] > k else u[:, order]
    v = vh.T
    v = np.concatenate([v[:, order], v[:, k:]], axis=1) if v.shape[1] > k else v[:, order]
    singulars = np.zeros(m)
    singulars[:k] = s
    extended = np.zeros(n)
    extended[:k] = s
    svd = DegradationSVD(u=u, singulars=singulars, v=v, extended_singulars=extended)
    err = np.max(np.abs(svd.reconstruct() - a))
    if err > _RECONSTRUCTION_TOL:
        raise DecompositionError(
            f"SVD of {m}x{n} operator did not reconstruct (max error {err:.3e})"
        )
    return svd


def make_uniform_blur(side: int, kernel: int, boundary: str = "circular") -> LinearOperator:
    """Uniform 2-D blur on a side x side image, one matrix row per pixel.

    The kernel is a kernel x kernel box filter; wrap-around (circular)
    boundary handling keeps every row summing to one.
    """
    if boundary != "circular":
        raise ValueError(f"unsupported boundary {boundary!r}; only 'circular'")
    if side < 1:
        raise ValueError("side must be positive")
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"kernel width must be odd and positive, got {kernel}")
    if kernel > side:
        raise ValueError(f"kernel {kernel} exceeds image side {side}")
    npix = side * side
    h = np.zeros((npix, npix))
    half = kernel // 2
    w = 1.0 / (kernel * kernel)
    for r in range(side):
        for c in range(side):
            row = r * side + c
            for dr in range(-half, half + 1):
                for dc in range(-half, half + 1):
                    col = ((r + dr) % side) * side + (c + dc) % side
                    h[row, col] += w
    return LinearOperator(h)


def make_block_average(side: int, block: int) -> LinearOperator:
    """Downscale by averaging non-overlapping block x block pixel groups."""
    if side < 1 or block < 1:
        raise ValueError("side and block must be positive")
    if side % block != 0:
        raise ValueError(f"block {block} does not divide side {side}")
    out_side = side // block
    h = np.zeros((out_side * out_side, side * side))
    w = 1.0 / (block * block)
    for r in range(out_side):
        for c in range(out_side):
            row = r * out_side + c
            for dr in range(block):
                for dc in range(block):
                    h[row, (r * block + dr) * side + c * block + dc] = w
    return LinearOperator(h)


def make_random_projection(n: int, keep_fraction: float, seed: int) -> LinearOperator:
    """Random M x n matrix with orthonormal rows, M = round(keep_fraction * n)."""
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    m = int(round(keep_fraction * n))
    if m < 1:
        raise ValueError(f"keep_fraction {keep_fraction} keeps zero of {n} rows")
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((n, m))
    q, _ = np.linalg.qr(g)
    return LinearOperator(q.T)


def make_inpainting_mask(n: int, kept_indices) -> LinearOperator:
    """Row-selection operator keeping the given signal coordinates."""
    idx = np.asarray(sorted(kept_indices), dtype=np.int64)
    if idx.size == 0:
        raise ValueError("kept_indices must be nonempty")
    if np.unique(idx).size != idx.size:
        raise ValueError("kept_indices must be unique")
    if idx.min() < 0 or idx.max() >= n:
        raise ValueError(f"kept_indices must lie in [0, {n})")
    h = np.zeros((idx.size, n))
    h[np.arange(idx.size), idx] = 1.0
    return LinearOperator(h)


def operator_to_bytes(op: LinearOperator) -> bytes:
    header = OPERATOR_MAGIC + struct.pack("<HII", OPERATOR_FORMAT_VERSION, op.rows, op.cols)
    return header + op.matrix.astype("<f8").tobytes()


def operator_from_bytes(data: bytes) -> LinearOperator:
    if len(data) < 14:
        raise ValueError("operator container truncated (header incomplete)")
    if data[:4] != OPERATOR_MAGIC:
        raise ValueError(f"bad operator container magic {data[:4]!r}")
    version, m, n = struct.unpack("<HII", data[4:14])
    if version != OPERATOR_FORMAT_VERSION:
        raise ValueError(f"unsupported operator container version {version}")
    expected = 14 + 8 * m * n
    if len(data) != expected:
        raise ValueError(f"operator container has {len(data)} bytes, expected {expected}")
    entries = np.frombuffer(data, dtype="<f8", offset=14).reshape(m, n)
    return LinearOperator(entries.copy())


def save_operator(op: LinearOperator, path) -> None:
    with open(path, "wb") as f:
        f.write(operator_to_bytes(op))


def load_operator(path) -> LinearOperator:
    with open(path, "rb") as f:
        return operator_from_bytes(f.read())

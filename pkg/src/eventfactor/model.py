"""Model parameters, identifiability constraints, and penalty primitives.

The intensity of event type ``j`` for a subject with latent factor
``theta`` is ``Y(t) * exp(beta0_j + beta_j . x(t) + theta . (A_j^T z(t)))``
with a constant baseline ``exp(beta0_j)`` and Gaussian factors
``theta ~ N(0, Sigma)``.  Identifiability is anchored either by fixing
an identity submatrix inside the stacked loadings, or by fixing the
diagonal of Sigma to one and leaving only a diagonal loading submatrix
unpenalized.
"""

from __future__ import annotations

import enum
import io
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Mask",
    "ModelParams",
    "ConstraintMask",
    "PenaltyConfig",
    "ModelError",
    "DimensionMismatch",
    "MaskShapeMismatch",
    "SigmaNotPD",
    "log_intensity",
    "scad_derivative",
    "scad_penalty",
    "soft_threshold",
    "apply_mask",
    "canonicalize_scale",
    "write_params",
    "read_params",
    "write_mask",
    "read_mask",
]

SIGMA_EIG_FLOOR = 1e-8


class ModelError(ValueError):
    pass


class DimensionMismatch(ModelError):
    pass


class MaskShapeMismatch(ModelError):
    pass


class SigmaNotPD(ModelError):
    pass


class Mask(enum.IntEnum):
    """Per-coordinate constraint codes."""

    PENALIZED = 0  # free, subject to the SCAD penalty
    FREE = 1  # free, never penalized
    ZERO = 2  # fixed at 0
    ONE = 3  # fixed at 1


@dataclass
class ModelParams:
    """All model parameters: intercepts, fixed effects, loadings, covariance.

    ``beta`` and ``loadings`` are per event type; ``loadings[j]`` has
    shape ``(L2j, K)``.  Treated as a value type: fitting code copies
    before mutating, and the Cholesky factor of Sigma is cached lazily.
    """

    beta0: np.ndarray
    beta: list[np.ndarray]
    loadings: list[np.ndarray]
    sigma: np.ndarray
    _chol: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.beta0 = np.asarray(self.beta0, dtype=float)
        self.beta = [np.asarray(b, dtype=float) for b in self.beta]
        self.loadings = [np.asarray(a, dtype=float) for a in self.loadings]
        self.sigma = np.asarray(self.sigma, dtype=float)
        J = self.beta0.shape[0]
        if len(self.beta) != J or len(self.loadings) != J:
            raise DimensionMismatch("beta/loadings must cover every event type")
        K = self.sigma.shape[0]
        if self.sigma.shape != (K, K):
            raise DimensionMismatch("sigma must be square")
        for A in self.loadings:
            if A.ndim != 2 or A.shape[1] != K:
                raise DimensionMismatch("loading matrices must have K columns")
        if not np.allclose(self.sigma, self.sigma.T, atol=1e-12, rtol=0):
            raise SigmaNotPD("sigma must be symmetric (1e-12)")

    @property
    def n_types(self) -> int:
        return self.beta0.shape[0]

    @property
    def n_factors(self) -> int:
        return self.sigma.shape[0]

    def dims_fixed(self) -> list[int]:
        return [b.shape[0] for b in self.beta]

    def dims_random(self) -> list[int]:
        return [A.shape[0] for A in self.loadings]

    def sigma_chol(self) -> np.ndarray:
        """Lower Cholesky factor of Sigma; raises SigmaNotPD if degenerate."""
        if self._chol is None:
            try:
                self._chol = np.linalg.cholesky(self.sigma)
            except np.linalg.LinAlgError:
                raise SigmaNotPD("sigma is not positive definite") from None
        return self._chol

    def validate_pd(self):
        self.sigma_chol()

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.beta0.copy(),
            [b.copy() for b in self.beta],
            [A.copy() for A in self.loadings],
            self.sigma.copy(),
        )

    def set_sigma(self, sigma: np.ndarray):
        self.sigma = np.asarray(sigma, dtype=float)
        self._chol = None

    @classmethod
    def zeros(cls, dims_fixed, dims_random, n_factors: int) -> "ModelParams":
        J = len(dims_fixed)
        return cls(
            np.zeros(J),
            [np.zeros(L) for L in dims_fixed],
            [np.zeros((L, n_factors)) for L in dims_random],
            np.eye(n_factors),
        )


@dataclass(frozen=True)
class ConstraintMask:
    """Constraint codes per coordinate plus the anchoring mode.

    In ``anchor_loadings`` mode the fixed entries of the stacked loading
    matrix must contain, after row permutation, a K x K identity
    submatrix.  In ``anchor_sigma`` mode Sigma is held at unit diagonal
    and the anchor rows form a diagonal submatrix: one FREE entry per
    factor, the rest of those rows fixed at zero.
    """

    beta: tuple[np.ndarray, ...]
    loadings: tuple[np.ndarray, ...]
    mode: str = "anchor_loadings"

    def __post_init__(self):
        object.__setattr__(
            self, "beta", tuple(np.asarray(m, dtype=np.int8) for m in self.beta)
        )
        object.__setattr__(
            self,
            "loadings",
            tuple(np.asarray(m, dtype=np.int8) for m in self.loadings),
        )
        if self.mode not in ("anchor_loadings", "anchor_sigma"):
            raise ModelError(f"unknown anchoring mode {self.mode!r}")
        for m in self.beta:
            if np.any(m == Mask.ONE):
                raise ModelError("beta coordinates cannot be fixed at one")
        self._check_anchor()

    def _check_anchor(self):
        K = self.n_factors
        if K == 0:
            return
        rows = np.concatenate([m for m in self.loadings], axis=0) if self.loadings else np.zeros((0, K), np.int8)
        if self.mode == "anchor_loadings":
            fully_fixed = np.all((rows == Mask.ZERO) | (rows == Mask.ONE), axis=1)
            anchor_cols = []
            for r in np.nonzero(fully_fixed)[0]:
                ones = np.nonzero(rows[r] == Mask.ONE)[0]
                if ones.size == 1:
                    anchor_cols.append(ones[0])
            if len(set(anchor_cols)) != K:
                raise ModelError(
                    "anchor_loadings mode needs K fixed rows forming an identity submatrix"
                )
        else:
            # an anchor row has exactly one FREE entry, the rest fixed zero;
            # together the anchor rows must cover every factor
            cols = set()
            for r in range(rows.shape[0]):
                free_cols = np.nonzero(rows[r] == Mask.FREE)[0]
                if free_cols.size == 1 and np.sum(rows[r] == Mask.ZERO) == K - 1:
                    cols.add(int(free_cols[0]))
            if cols != set(range(K)):
                raise ModelError(
                    "anchor_sigma mode needs one diagonal anchor row per factor"
                )

    @property
    def n_types(self) -> int:
        return len(self.beta)

    @property
    def n_factors(self) -> int:
        return self.loadings[0].shape[1] if self.loadings else 0

    def check_shapes(self, params: ModelParams):
        if len(self.beta) != params.n_types or len(self.loadings) != params.n_types:
            raise MaskShapeMismatch("mask does not cover every event type")
        for m, b in zip(self.beta, params.beta):
            if m.shape != b.shape:
                raise MaskShapeMismatch("beta mask shape mismatch")
        for m, A in zip(self.loadings, params.loadings):
            if m.shape != A.shape:
                raise MaskShapeMismatch("loading mask shape mismatch")

    @classmethod
    def all_penalized(
        cls, dims_fixed, dims_random, n_factors: int, mode: str = "anchor_sigma"
    ) -> "ConstraintMask":
        """Mask with every coordinate penalized and no anchors declared yet."""
        beta = tuple(np.full(L, Mask.PENALIZED, np.int8) for L in dims_fixed)
        loadings = tuple(
            np.full((L, n_factors), Mask.PENALIZED, np.int8) for L in dims_random
        )
        obj = object.__new__(cls)
        object.__setattr__(obj, "beta", beta)
        object.__setattr__(obj, "loadings", loadings)
        object.__setattr__(obj, "mode", mode)
        return obj

    def with_anchors(self, anchors) -> "ConstraintMask":
        """Declare anchor rows, one (j, l, k) triple per factor ``k``."""
        loadings = [m.copy() for m in self.loadings]
        for j, l, k in anchors:
            row = loadings[j][l]
            row[:] = Mask.ZERO
            row[k] = Mask.ONE if self.mode == "anchor_loadings" else Mask.FREE
        return ConstraintMask(self.beta, tuple(loadings), self.mode)

    def anchor_positions(self) -> list[tuple[int, int, int]]:
        """The (j, l, k) anchor coordinates, ordered by factor.

        In anchor_sigma mode these carry the sign convention: the free
        diagonal entries are kept nonnegative.
        """
        cached = getattr(self, "_anchor_cache", None)
        if cached is not None:
            return cached
        K = self.n_factors
        out: list[tuple[int, int, int] | None] = [None] * K
        target = Mask.ONE if self.mode == "anchor_loadings" else Mask.FREE
        for j, m in enumerate(self.loadings):
            for l in range(m.shape[0]):
                row = m[l]
                hits = np.nonzero(row == target)[0]
                if hits.size == 1 and np.sum(row == Mask.ZERO) == K - 1:
                    k = int(hits[0])
                    if out[k] is None:
                        out[k] = (j, l, k)
        result = [pos for pos in out if pos is not None]
        object.__setattr__(self, "_anchor_cache", result)
        return result


@dataclass(frozen=True)
class PenaltyConfig:
    """SCAD tuning: gamma1 for fixed effects, gamma2 for loadings."""

    gamma1: float = 0.0
    gamma2: float = 0.0
    a: float = 3.7

    def __post_init__(self):
        if self.gamma1 < 0 or self.gamma2 < 0:
            raise ModelError("penalty tunings must be nonnegative")
        if not self.a > 2:
            raise ModelError("SCAD shape parameter must exceed 2")


def log_intensity(params: ModelParams, j: int, x, z, theta) -> float:
    """Log intensity of type ``j`` given covariates and factor value.

    Returns ``beta0_j + beta_j . x + theta . (A_j^T z)``; the at-risk
    factor is applied by callers.
    """
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if x.shape != params.beta[j].shape:
        raise DimensionMismatch(f"x has shape {x.shape}, expected {params.beta[j].shape}")
    if z.shape[0] != params.loadings[j].shape[0]:
        raise DimensionMismatch("z length does not match loading rows")
    if theta.shape[0] != params.n_factors:
        raise DimensionMismatch("theta length does not match factor count")
    return float(
        params.beta0[j] + params.beta[j] @ x + theta @ (params.loadings[j].T @ z)
    )


def scad_derivative(x, gamma: float, a: float = 3.7):
    """Derivative of the SCAD penalty at ``x >= 0``.

    ``gamma * ( I(x <= gamma) + (a*gamma - x)_+ / ((a-1)*gamma) * I(x > gamma) )``.
    """
    if gamma <= 0:
        raise ModelError("gamma must be positive")
    if not a > 2:
        raise ModelError("SCAD shape parameter must exceed 2")
    x_arr = np.asarray(x, dtype=float)
    if np.any(x_arr < 0):
        raise ModelError("scad_derivative requires x >= 0")
    flat = np.where(x_arr <= gamma, gamma, 0.0)
    clipped = np.maximum(a * gamma - x_arr, 0.0) / (a - 1.0)
    out = np.where(x_arr <= gamma, flat, clipped)
    return float(out) if np.isscalar(x) or x_arr.ndim == 0 else out


def scad_penalty(x, gamma: float, a: float = 3.7):
    """SCAD penalty value at ``|x|`` (integral of scad_derivative from 0)."""
    if gamma == 0:
        return 0.0 if np.isscalar(x) else np.zeros_like(np.asarray(x, dtype=float))
    x_arr = np.abs(np.asarray(x, dtype=float))
    lin = gamma * x_arr
    quad = (2 * a * gamma * x_arr - x_arr**2 - gamma**2) / (2 * (a - 1.0))
    flat = gamma**2 * (a + 1.0) / 2.0
    out = np.where(x_arr <= gamma, lin, np.where(x_arr < a * gamma, quad, flat))
    return float(out) if np.isscalar(x) or x_arr.ndim == 0 else out


def soft_threshold(x, gamma):
    """Soft-thresholding ``sgn(x) (|x| - gamma)_+``."""
    x_arr = np.asarray(x, dtype=float)
    out = np.sign(x_arr) * np.maximum(np.abs(x_arr) - gamma, 0.0)
    return float(out) if np.isscalar(x) or x_arr.ndim == 0 else out


def apply_mask(params: ModelParams, mask: ConstraintMask) -> ModelParams:
    """Enforce the constraint mask on a copy of ``params``.

    Fixed entries are overwritten exactly.  In anchor_sigma mode the
    covariance is rescaled to unit diagonal with the loadings absorbing
    the scale (``A_j <- A_j D``, ``Sigma <- D^-1 Sigma D^-1``), which
    leaves every product ``A_j Sigma A_l^T`` unchanged.
    """
    mask.check_shapes(params)
    out = params.copy()
    for m, b in zip(mask.beta, out.beta):
        b[m == Mask.ZERO] = 0.0
    for m, A in zip(mask.loadings, out.loadings):
        A[m == Mask.ZERO] = 0.0
        A[m == Mask.ONE] = 1.0
    if mask.mode == "anchor_sigma":
        out, _ = canonicalize_scale(out, mask)
    return out


def canonicalize_scale(
    params: ModelParams, mask: ConstraintMask
) -> tuple[ModelParams, np.ndarray]:
    """Unit-diagonal covariance and nonnegative anchor diagonals.

    Returns the transformed parameters and the per-factor multiplier
    ``m`` with ``theta_new = theta * m``: loadings absorb the scale
    (``A_j <- A_j diag(1/m)``) and factor signs are pinned by the
    anchors, so every ``A_j theta`` product and the likelihood are
    unchanged.
    """
    out = params.copy()
    K = out.n_factors
    d = np.sqrt(np.diag(out.sigma))
    if np.any(d <= 0):
        raise SigmaNotPD("sigma diagonal must be positive to rescale")
    if not np.all(d == 1.0):
        out.loadings = [A * d[None, :] for A in out.loadings]
        sigma = out.sigma / np.outer(d, d)
        np.fill_diagonal(sigma, 1.0)
        out.set_sigma(sigma)
    # factor signs are otherwise unidentified: flipping factor k flips
    # column k of every A_j and row/column k of Sigma without changing
    # the likelihood
    flips = np.ones(K)
    for j, l, k in mask.anchor_positions():
        if out.loadings[j][l, k] < 0:
            flips[k] = -1.0
    if np.any(flips < 0):
        out.loadings = [A * flips[None, :] for A in out.loadings]
        out.set_sigma(out.sigma * np.outer(flips, flips))
    return out, flips / d


# ---------------------------------------------------------------------------
# parameter and mask files

_MASK_SYMBOLS = {Mask.PENALIZED: ".", Mask.FREE: "u", Mask.ZERO: "0", Mask.ONE: "1"}
_MASK_CODES = {v: k for k, v in _MASK_SYMBOLS.items()}


def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in np.atleast_1d(values))


def write_params(params: ModelParams, labels=None) -> str:
    """Render parameters as delimited text: one block per event type, then Sigma."""
    J = params.n_types
    names = list(labels) if labels is not None else [f"type{j}" for j in range(J)]
    buf = io.StringIO()
    for j in range(J):
        buf.write(f"event {names[j]}\n")
        buf.write(f"beta0 {float(params.beta0[j])!r}\n")
        buf.write(f"beta {_fmt(params.beta[j])}\n" if params.beta[j].size else "beta\n")
        buf.write("A\n")
        for row in params.loadings[j]:
            buf.write(_fmt(row) + "\n")
    buf.write("sigma\n")
    for row in params.sigma:
        buf.write(_fmt(row) + "\n")
    return buf.getvalue()


def read_params(text: str) -> tuple[ModelParams, list[str]]:
    """Parse the output of :func:`write_params`; returns (params, labels)."""
    lines = [ln.rstrip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln and not ln.lstrip().startswith("#")]
    labels: list[str] = []
    beta0: list[float] = []
    beta: list[np.ndarray] = []
    loadings: list[np.ndarray] = []
    sigma_rows: list[list[float]] = []
    i = 0
    section = None
    current_A: list[list[float]] | None = None

    def flush_A():
        nonlocal current_A
        if current_A is not None:
            loadings.append(np.array(current_A, dtype=float))
            current_A = None

    while i < len(lines):
        ln = lines[i]
        if ln.startswith("event "):
            flush_A()
            labels.append(ln[len("event "):].strip())
            section = "event"
        elif ln.startswith("beta0"):
            beta0.append(float(ln.split()[1]))
        elif ln.startswith("beta"):
            parts = ln.split()[1:]
            beta.append(np.array([float(p) for p in parts], dtype=float))
        elif ln == "A":
            current_A = []
            section = "A"
        elif ln == "sigma":
            flush_A()
            section = "sigma"
        elif section == "A":
            current_A.append([float(p) for p in ln.split()])
        elif section == "sigma":
            sigma_rows.append([float(p) for p in ln.split()])
        else:
            raise ModelError(f"unexpected line in parameter file: {ln!r}")
        i += 1
    flush_A()
    K = len(sigma_rows)
    loadings = [
        A if A.size else A.reshape(0, K) for A in loadings
    ]
    params = ModelParams(
        np.array(beta0), beta, loadings, np.array(sigma_rows, dtype=float)
    )
    return params, labels


def write_mask(mask: ConstraintMask, labels=None) -> str:
    J = mask.n_types
    names = list(labels) if labels is not None else [f"type{j}" for j in range(J)]
    buf = io.StringIO()
    buf.write(f"mode {mask.mode}\n")
    for j in range(J):
        buf.write(f"event {names[j]}\n")
        row = "".join(_MASK_SYMBOLS[Mask(v)] for v in mask.beta[j])
        buf.write(f"beta {row}\n" if row else "beta\n")
        buf.write("A\n")
        for r in mask.loadings[j]:
            buf.write("".join(_MASK_SYMBOLS[Mask(v)] for v in r) + "\n")
    return buf.getvalue()


def read_mask(text: str) -> tuple[ConstraintMask, list[str]]:
    lines = [ln.strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    mode = "anchor_loadings"
    labels: list[str] = []
    beta: list[np.ndarray] = []
    loadings: list[np.ndarray] = []
    current_A: list[list[int]] | None = None
    section = None

    def flush_A():
        nonlocal current_A
        if current_A is not None:
            loadings.append(np.array(current_A, dtype=np.int8))
            current_A = None

    for ln in lines:
        if ln.startswith("mode "):
            mode = ln.split()[1]
        elif ln.startswith("event "):
            flush_A()
            labels.append(ln[len("event "):].strip())
        elif ln.startswith("beta"):
            symbols = ln[len("beta"):].strip()
            beta.append(
                np.array([_MASK_CODES[c] for c in symbols], dtype=np.int8)
            )
            section = None
        elif ln == "A":
            current_A = []
            section = "A"
        elif section == "A":
            current_A.append([_MASK_CODES[c] for c in ln])
        else:
            raise ModelError(f"unexpected line in mask file: {ln!r}")
    flush_A()
    K = max((np.asarray(A).shape[1] for A in loadings if np.asarray(A).size), default=0)
    loadings = [
        A if A.size else A.reshape(0, K) for A in loadings
    ]
    return ConstraintMask(tuple(beta), tuple(loadings), mode), labels

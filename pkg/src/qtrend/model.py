"""Model specification, gridded data container and posterior-draw container."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from .diffops import DifferenceOperator, assemble_D
from .errors import ValidationError

__all__ = ["Prior", "QuantileModelSpec", "GridDataset", "PosteriorDraws", "validate", "difference_operator"]


class Prior(str, enum.Enum):
    HORSESHOE = "horseshoe"
    LAPLACE = "laplace"


@dataclass(frozen=True)
class QuantileModelSpec:
    """Quantile level, trend order, shrinkage family and hyperparameters.

    ``a_sigma, b_sigma`` parameterize the inverse-gamma prior on the AL
    scale, ``C_tau`` the half-Cauchy scale of the global horseshoe
    parameter, and ``a_w, b_w`` the inverse-gamma prior on the weights of
    the ``k + 1`` unpenalized leading coordinates.
    """

    p: float = 0.5
    k: int = 0
    prior: Prior = Prior.HORSESHOE
    a_sigma: float = 0.1
    b_sigma: float = 0.1
    C_tau: float = 1.0
    a_w: float = 0.1
    b_w: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "prior", Prior(self.prior))
        if not (0.0 < self.p < 1.0):
            raise ValidationError(f"quantile level must lie in (0, 1), got {self.p}")
        if int(self.k) != self.k or self.k < 0:
            raise ValidationError(f"trend order k must be a nonnegative integer, got {self.k}")
        object.__setattr__(self, "k", int(self.k))
        for name in ("a_sigma", "b_sigma", "C_tau", "a_w", "b_w"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValidationError(f"hyperparameter {name} must be positive, got {v}")

    def with_level(self, p: float) -> "QuantileModelSpec":
        return replace(self, p=p)

    def to_dict(self) -> dict:
        return {
            "p": self.p, "k": self.k, "prior": self.prior.value,
            "a_sigma": self.a_sigma, "b_sigma": self.b_sigma, "C_tau": self.C_tau,
            "a_w": self.a_w, "b_w": self.b_w,
        }


@dataclass(frozen=True)
class GridDataset:
    """Observations ``y[i, j]`` at strictly increasing locations ``x[i]``.

    The ragged array is stored flat: ``y`` has length ``N`` and ``index[j]``
    is the grid position of observation ``j``; observations of a location
    are contiguous and ``offsets`` delimit them.
    """

    x: np.ndarray
    y: np.ndarray
    index: np.ndarray
    counts: np.ndarray
    offsets: np.ndarray = field(repr=False)

    @classmethod
    def from_groups(cls, x, groups) -> "GridDataset":
        x = np.asarray(x, dtype=float)
        counts = np.array([len(g) for g in groups], dtype=np.int64)
        y = np.concatenate([np.asarray(g, dtype=float).ravel() for g in groups]) if len(groups) else np.zeros(0)
        index = np.repeat(np.arange(len(counts)), counts)
        offsets = np.concatenate([[0], np.cumsum(counts)])
        return cls(x=x, y=y, index=index, counts=counts, offsets=offsets)

    @classmethod
    def from_pairs(cls, x, y) -> "GridDataset":
        """Build from (possibly unsorted, duplicated) location/value pairs."""
        x = np.asarray(x, dtype=float).ravel()
        y = np.asarray(y, dtype=float).ravel()
        if x.shape != y.shape:
            raise ValidationError("x and y must have equal length")
        order = np.lexsort((np.arange(x.size), x))  # stable in original order
        xs, ys = x[order], y[order]
        if xs.size == 0:
            return cls.from_groups(np.zeros(0), [])
        ux, start, counts = np.unique(xs, return_index=True, return_counts=True)
        groups = [ys[s : s + c] for s, c in zip(start, counts)]
        return cls.from_groups(ux, groups)

    @classmethod
    def from_sequence(cls, y, x=None) -> "GridDataset":
        y = np.asarray(y, dtype=float).ravel()
        x = np.arange(1.0, y.size + 1.0) if x is None else np.asarray(x, dtype=float)
        return cls(x=x, y=y, index=np.arange(y.size), counts=np.ones(y.size, dtype=np.int64),
                   offsets=np.arange(y.size + 1))

    @property
    def n(self) -> int:
        return int(self.x.size)

    @property
    def N(self) -> int:
        return int(self.y.size)

    def groups(self) -> list[np.ndarray]:
        return [self.y[self.offsets[i] : self.offsets[i + 1]] for i in range(self.n)]

    def with_values(self, y) -> "GridDataset":
        """Same grid and replication structure with new observation values."""
        y = np.asarray(y, dtype=float)
        if y.shape != self.y.shape:
            raise ValidationError("replacement values must match the observation count")
        return replace(self, y=y)

    def is_regular(self, rtol: float = 1e-9) -> bool:
        if self.n < 3:
            return True
        d = np.diff(self.x)
        return bool(np.allclose(d, d[0], rtol=rtol, atol=0.0))


@dataclass
class PosteriorDraws:
    theta: np.ndarray
    sigma2: np.ndarray
    tau2: np.ndarray | None
    meta: dict = field(default_factory=dict)

    @property
    def n_draws(self) -> int:
        return int(self.theta.shape[0])

    def mean(self) -> np.ndarray:
        return self.theta.mean(axis=0)

    def interval(self, alpha: float = 0.05):
        lo, hi = np.quantile(self.theta, [alpha / 2, 1 - alpha / 2], axis=0)
        return lo, hi


def validate(spec: QuantileModelSpec, data: GridDataset) -> GridDataset:
    """Check the dataset against the model specification and normalize its layout.

    Unsorted or duplicated locations are merged into replicated
    observations; the result is idempotent under repeated validation.
    """
    if data.N == 0 or data.n == 0:
        raise ValidationError("dataset is empty")
    bad_x = np.flatnonzero(~np.isfinite(data.x))
    if bad_x.size:
        raise ValidationError(f"non-finite locations at indices {bad_x.tolist()}", bad_x.tolist())
    bad_y = np.flatnonzero(~np.isfinite(data.y))
    if bad_y.size:
        pairs = [(int(data.index[j]), int(j - data.offsets[data.index[j]])) for j in bad_y]
        raise ValidationError(f"non-finite observations at (i, j) = {pairs}", pairs)
    if np.any(data.counts < 1):
        empty = np.flatnonzero(data.counts < 1).tolist()
        raise ValidationError(f"locations without observations: {empty}", empty)
    if data.n > 1 and not np.all(np.diff(data.x) > 0):
        data = GridDataset.from_pairs(data.x[data.index], data.y)
    if data.n <= spec.k + 1:
        raise ValidationError(f"need more than k + 1 = {spec.k + 1} distinct locations, got {data.n}")
    return data


def difference_operator(spec: QuantileModelSpec, data: GridDataset, force_regular: bool = False) -> DifferenceOperator:
    """Operator for the data's grid: adjusted differences only when irregular and ``k >= 1``."""
    if force_regular or spec.k == 0 or data.is_regular():
        return assemble_D(data.n, spec.k)
    return assemble_D(data.n, spec.k, data.x)

"""Gibbs samplers for Bayesian quantile trend filtering.

Working likelihood: asymmetric Laplace via the normal / exponential mixture
``y = theta + psi z + sqrt(t2 sigma2 z) u``, ``z ~ Exp(mean sigma2)``.
Prior: ``D theta ~ N(0, sigma2 W)`` with
``W = diag(w_1^2, ..., w_{k+1}^2, tau2 w_{k+2}^2, ..., tau2 w_n^2)``.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .diffops import DifferenceOperator, assemble_precision, cholesky
from .errors import NumericalBreakdown
from .model import GridDataset, PosteriorDraws, Prior, QuantileModelSpec, difference_operator, validate
from .specfun import GigParams, al_constants, sample_gig, sample_inv_gamma

__all__ = [
    "GibbsState",
    "initial_state",
    "update_theta",
    "update_z",
    "update_sigma2",
    "update_shrinkage_laplace",
    "update_shrinkage_horseshoe",
    "sample_cauchy_aux",
    "gibbs_sweep",
    "run_gibbs",
]

DEFAULT_ITERS = 77_500
DEFAULT_BURNIN = 2_500
DEFAULT_THIN = 10

# Shape of the inverse-gamma conditional of a half-Cauchy auxiliary
# (nu, nu_i, xi) given its scale: the auxiliary's own IG(1/2) prior plus the
# (1/nu)^{1/2} normalizer of the child's IG(1/2, 1/nu) density.
AUX_SHAPE = 1.0


def sample_cauchy_aux(rng, scale2, c2=1.0):
    """Auxiliary of a half-Cauchy(0, c) scale given the squared scale: IG(AUX_SHAPE, 1/scale2 + 1/c2)."""
    scale2 = np.asarray(scale2, dtype=float)
    return sample_inv_gamma(rng, np.full(scale2.shape, AUX_SHAPE), 1.0 / scale2 + 1.0 / c2)


@dataclass
class GibbsState:
    theta: np.ndarray
    z: np.ndarray
    sigma2: float
    w2: np.ndarray
    tau2: float = 1.0
    xi: float = 1.0
    gamma2: float = 1.0
    nu: float = 1.0
    nu_i: np.ndarray | None = None

    def copy(self) -> "GibbsState":
        return replace(
            self,
            theta=self.theta.copy(),
            z=self.z.copy(),
            w2=self.w2.copy(),
            nu_i=None if self.nu_i is None else self.nu_i.copy(),
        )


# Cap on W^{-1} relative to the largest likelihood precision; beyond it the
# banded factorization loses all significant digits.
WINV_RELATIVE_CAP = 1e10


def inverse_weights(state: GibbsState, k: int, data_precision=None) -> np.ndarray:
    """Diagonal of ``W^{-1}``, capped at ``WINV_RELATIVE_CAP * max(data_precision)``."""
    scale = state.w2.copy()
    scale[k + 1 :] *= state.tau2
    with np.errstate(divide="ignore", over="ignore"):
        winv = 1.0 / scale
    if data_precision is not None:
        np.minimum(winv, WINV_RELATIVE_CAP * float(np.max(data_precision)), out=winv)
    return winv


def _data_precision(state, data, t2):
    return np.bincount(data.index, 1.0 / state.z, minlength=data.n) / t2


def initial_state(spec: QuantileModelSpec, data: GridDataset) -> GibbsState:
    theta = np.array([np.quantile(g, spec.p) for g in data.groups()])
    spread = float(np.var(data.y)) if data.N > 1 else 1.0
    sigma2 = max(spread, 1e-8)
    n = data.n
    return GibbsState(
        theta=theta,
        z=np.full(data.N, sigma2),
        sigma2=sigma2,
        w2=np.ones(n),
        nu_i=np.ones(n - spec.k - 1) if spec.prior is Prior.HORSESHOE else None,
    )


def update_theta(state, spec, data, D, rng, u=None):
    """Draw ``theta ~ N(A^{-1} B, sigma2 A^{-1})``.

    ``u`` may supply the standard normals used for the draw.
    """
    al = al_constants(spec.p)
    inv_z = 1.0 / state.z
    diag = np.bincount(data.index, inv_z, minlength=data.n) / al.t2
    rhs = np.bincount(data.index, data.y * inv_z - al.psi, minlength=data.n) / al.t2
    sys = assemble_precision(D, inverse_weights(state, spec.k, diag), diag, rhs)
    factor = cholesky(sys.A)
    if u is None:
        u = rng.standard_normal(data.n)
    return factor.solve(rhs) + np.sqrt(state.sigma2) * factor.solve_lt(u)


def update_z(state, spec, data, rng):
    al = al_constants(spec.p)
    resid = data.y - state.theta[data.index]
    a = resid * resid / (al.t2 * state.sigma2)
    b = (al.psi ** 2 / al.t2 + 2.0) / state.sigma2
    return sample_gig(rng, GigParams(0.5, a, np.full(data.N, b)))


def sigma2_conditional(state, spec, data, D):
    """Shape and rate of the inverse-gamma conditional of sigma2."""
    al = al_constants(spec.p)
    resid = data.y - state.theta[data.index] - al.psi * state.z
    eta = D.apply(state.theta)
    rate = (
        float(np.sum(resid * resid / state.z)) / (2.0 * al.t2)
        + 0.5 * float(np.sum(eta * eta * inverse_weights(state, spec.k, _data_precision(state, data, al.t2))))
        + float(np.sum(state.z))
        + spec.b_sigma
    )
    shape = 0.5 * (data.n + 3 * data.N) + spec.a_sigma
    assert rate > 0, "sigma2 rate must be positive"
    return shape, rate


def update_sigma2(state, spec, data, D, rng):
    shape, rate = sigma2_conditional(state, spec, data, D)
    return sample_inv_gamma(rng, shape, rate)


def _boundary_w2(eta, state, spec, rng):
    lead = eta[: spec.k + 1]
    return sample_inv_gamma(rng, np.full(lead.size, 0.5 + spec.a_w), lead * lead / (2.0 * state.sigma2) + spec.b_w)


def update_shrinkage_laplace(state, spec, D, rng, eta=None):
    """Return ``(w2, gamma2, nu)`` under the Laplace prior (tau2 pinned to 1)."""
    if eta is None:
        eta = D.apply(state.theta)
    k1 = spec.k + 1
    w2 = np.empty(D.n)
    w2[:k1] = _boundary_w2(eta, state, spec, rng)
    pen = eta[k1:]
    w2[k1:] = sample_gig(rng, GigParams(0.5, pen * pen / state.sigma2, np.full(pen.size, state.gamma2)))
    gamma2 = sample_gig(rng, GigParams(D.n - spec.k - 1.5, 2.0 / state.nu, float(np.sum(w2[k1:]))))
    gamma2 = float(np.asarray(gamma2).reshape(-1)[0])
    nu = sample_cauchy_aux(rng, gamma2)
    return w2, gamma2, nu


def update_shrinkage_horseshoe(state, spec, D, rng, eta=None):
    """Return ``(w2, nu_i, tau2, xi)`` under the horseshoe prior.

    Half-Cauchy scales are represented through inverse-gamma auxiliaries;
    the global rate sums over the penalized coordinates only.
    """
    if eta is None:
        eta = D.apply(state.theta)
    k1 = spec.k + 1
    n = D.n
    w2 = np.empty(n)
    w2[:k1] = _boundary_w2(eta, state, spec, rng)
    pen2 = eta[k1:] ** 2
    w2[k1:] = sample_inv_gamma(rng, np.ones(n - k1), 1.0 / state.nu_i + pen2 / (2.0 * state.sigma2 * state.tau2))
    nu_i = sample_cauchy_aux(rng, w2[k1:])
    tau_rate = float(np.sum(pen2 / w2[k1:])) / (2.0 * state.sigma2) + 1.0 / state.xi
    tau2 = sample_inv_gamma(rng, 0.5 * (n - spec.k), tau_rate)
    xi = sample_cauchy_aux(rng, tau2, spec.C_tau ** 2)
    return w2, nu_i, tau2, xi


def gibbs_sweep(state: GibbsState, spec, data, D, rng) -> GibbsState:
    """One systematic scan: theta, z, sigma2, local shrinkage, global scale."""
    state.theta = update_theta(state, spec, data, D, rng)
    state.z = update_z(state, spec, data, rng)
    state.sigma2 = update_sigma2(state, spec, data, D, rng)
    eta = D.apply(state.theta)
    if spec.prior is Prior.LAPLACE:
        state.w2, state.gamma2, state.nu = update_shrinkage_laplace(state, spec, D, rng, eta)
    else:
        state.w2, state.nu_i, state.tau2, state.xi = update_shrinkage_horseshoe(state, spec, D, rng, eta)
    return state


def run_gibbs(
    spec: QuantileModelSpec,
    data: GridDataset,
    iters: int = DEFAULT_ITERS,
    burnin: int = DEFAULT_BURNIN,
    thin: int = DEFAULT_THIN,
    seed: int | None = 0,
    *,
    D: DifferenceOperator | None = None,
    init: GibbsState | None = None,
    force_regular: bool = False,
) -> PosteriorDraws:
    """Run a single chain and keep every ``thin``-th post-burn-in sweep."""
    if not (iters > burnin >= 0) or thin < 1:
        raise ValueError(f"need iters > burnin >= 0 and thin >= 1 (got {iters}, {burnin}, {thin})")
    data = validate(spec, data)
    if D is None:
        D = difference_operator(spec, data, force_regular)
    rng = np.random.default_rng(seed)
    state = initial_state(spec, data) if init is None else init.copy()
    keep = (iters - burnin) // thin
    theta = np.empty((keep, data.n))
    sigma2 = np.empty(keep)
    tau2 = np.empty(keep) if spec.prior is Prior.HORSESHOE else None
    start = time.perf_counter()
    saved = 0
    for it in range(iters):
        try:
            gibbs_sweep(state, spec, data, D, rng)
        except NumericalBreakdown as exc:
            raise NumericalBreakdown(f"{exc} (sweep {it})", pivot=exc.pivot, iteration=it) from exc
        if it >= burnin and (it - burnin) % thin == thin - 1 and saved < keep:
            theta[saved] = state.theta
            sigma2[saved] = state.sigma2
            if tau2 is not None:
                tau2[saved] = state.tau2
            saved += 1
    elapsed = time.perf_counter() - start
    meta = {
        "iters": iters,
        "burnin": burnin,
        "thin": thin,
        "seed": seed,
        "wall_seconds": elapsed,
        "prior": spec.prior.value,
        "p": spec.p,
        "k": spec.k,
    }
    return PosteriorDraws(theta=theta, sigma2=sigma2, tau2=tau2, meta=meta)

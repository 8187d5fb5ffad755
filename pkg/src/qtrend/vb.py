"""Mean-field variational Bayes for quantile trend filtering.

Coordinate ascent over the factors ``q(theta) = N(mu, (E[1/sigma2] A)^{-1})``,
``q(z_ij) = GIG(1/2, .)``, ``q(sigma2) = IG``, and the shrinkage factors of
the Laplace or horseshoe prior. Every update is a closed-form moment map.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from numba import njit

from .diffops import (
    DifferenceOperator,
    _backward,
    _chol_banded,
    _forward,
    _selected_inverse,
    assemble_precision,
    cholesky,
    solve_gaussian_summary,
)
from .gibbs import AUX_SHAPE, WINV_RELATIVE_CAP
from .model import GridDataset, Prior, QuantileModelSpec, difference_operator, validate
from .specfun import A_FLOOR, GigParams, al_constants, gig_mean_pair, normal_quantile

__all__ = [
    "VariationalState",
    "initial_vb_state",
    "vb_common_cycle",
    "vb_laplace_cycle",
    "vb_horseshoe_cycle",
    "vb_fit",
    "vb_interval",
]

DEFAULT_TOL = 1e-4
DEFAULT_MAX_ITERS = 10_000


@dataclass
class VariationalState:
    mu: np.ndarray
    var_diag: np.ndarray
    E_theta: np.ndarray
    E_theta2: np.ndarray
    E_eta2: np.ndarray
    E_z: np.ndarray
    E_inv_z: np.ndarray
    E_sigma2: float
    E_inv_sigma2: float
    E_inv_w2: np.ndarray
    E_w2: np.ndarray | None = None
    E_gamma2: float = 1.0
    E_inv_gamma2: float = 1.0
    E_inv_nu: float = 0.5
    E_inv_tau2: float = 1.0
    E_inv_xi: float = 0.0
    E_inv_nu_i: np.ndarray | None = None
    iterations: int = 0
    converged: bool = False

    def copy(self) -> "VariationalState":
        arrays = {
            name: getattr(self, name).copy()
            for name in ("mu", "var_diag", "E_theta", "E_theta2", "E_eta2", "E_z", "E_inv_z", "E_inv_w2")
        }
        for name in ("E_w2", "E_inv_nu_i"):
            v = getattr(self, name)
            arrays[name] = None if v is None else v.copy()
        return replace(self, **arrays)


def initial_vb_state(spec: QuantileModelSpec, data: GridDataset) -> VariationalState:
    """Unit-scale start with ``E[1/sigma2]`` set from the pooled variance."""
    n, N = data.n, data.N
    pooled = float(np.var(data.y)) if N > 1 else 1.0
    pooled = pooled if pooled > 0 else 1.0
    horseshoe = spec.prior is Prior.HORSESHOE
    zeros = np.zeros(n)
    return VariationalState(
        mu=zeros.copy(),
        var_diag=np.ones(n),
        E_theta=zeros.copy(),
        E_theta2=np.ones(n),
        E_eta2=np.ones(n),
        E_z=np.ones(N),
        E_inv_z=np.ones(N),
        E_sigma2=pooled,
        E_inv_sigma2=1.0 / pooled,
        E_inv_w2=np.ones(n),
        E_w2=None if horseshoe else np.ones(n - spec.k - 1),
        E_gamma2=1.0,
        E_inv_gamma2=1.0,
        E_inv_nu=0.5,
        E_inv_tau2=1.0,
        E_inv_xi=0.5 if horseshoe else 0.0,
        E_inv_nu_i=np.full(n - spec.k - 1, 0.5) if horseshoe else None,
    )


def _inverse_weights(state: VariationalState, k: int, data_precision: np.ndarray) -> np.ndarray:
    winv = state.E_inv_w2.copy()
    winv[k + 1 :] *= state.E_inv_tau2
    np.minimum(winv, WINV_RELATIVE_CAP * float(np.max(data_precision)), out=winv)
    return winv


def precision_system(state: VariationalState, spec: QuantileModelSpec, data: GridDataset, D: DifferenceOperator):
    """``A``, ``B`` and the weights ``W^{-1}`` implied by the current moments."""
    al = al_constants(spec.p)
    diag = np.bincount(data.index, state.E_inv_z, minlength=data.n) / al.t2
    rhs = np.bincount(data.index, data.y * state.E_inv_z - al.psi, minlength=data.n) / al.t2
    winv = _inverse_weights(state, spec.k, diag)
    return assemble_precision(D, winv, diag, rhs), winv


def vb_common_cycle(state: VariationalState, spec: QuantileModelSpec, data: GridDataset, D: DifferenceOperator):
    """Update the theta, sigma2, z and boundary-weight factors in place."""
    al = al_constants(spec.p)
    sys, winv = precision_system(state, spec, data, D)
    factor = cholesky(sys.A)
    mean, s_diag, s_eta = solve_gaussian_summary(sys, D, factor)
    scale = 1.0 / state.E_inv_sigma2
    state.mu = mean
    state.var_diag = s_diag * scale
    state.E_theta = mean
    state.E_theta2 = state.var_diag + mean * mean
    state.E_eta2 = s_eta * scale + D.apply(mean) ** 2

    y = data.y
    e_th = state.E_theta[data.index]
    e_th2 = state.E_theta2[data.index]
    lik = np.sum(
        y * y * state.E_inv_z
        - 2.0 * al.psi * y
        + al.psi ** 2 * state.E_z
        - 2.0 * (state.E_inv_z * y - al.psi) * e_th
        + e_th2 * state.E_inv_z
    )
    alpha = (
        float(lik) / (2.0 * al.t2)
        + 0.5 * float(np.sum(state.E_eta2 * winv))
        + float(np.sum(state.E_z))
        + spec.b_sigma
    )
    total = data.n + 3 * data.N + 2.0 * spec.a_sigma
    state.E_inv_sigma2 = total / (2.0 * alpha)
    state.E_sigma2 = 2.0 * alpha / (total - 2.0)

    a_z = np.maximum((y * y - 2.0 * y * e_th + e_th2) / al.t2 * state.E_inv_sigma2, A_FLOOR)
    b_z = np.full(data.N, (al.psi ** 2 / al.t2 + 2.0) * state.E_inv_sigma2)
    state.E_z, state.E_inv_z = gig_mean_pair(GigParams(0.5, a_z, b_z))

    k1 = spec.k + 1
    state.E_inv_w2[:k1] = (1.0 + 2.0 * spec.a_w) / (state.E_eta2[:k1] * state.E_inv_sigma2 + 2.0 * spec.b_w)
    return state


def vb_laplace_cycle(state: VariationalState, spec: QuantileModelSpec, D: DifferenceOperator, aux_shape: float = AUX_SHAPE):
    """Update the Laplace shrinkage factors in place.

    ``aux_shape`` is the shape of ``q(nu)``; 1/2 reproduces the literal
    published update ``E[1/nu] = 1 / (2 (E[1/gamma2] + 1))``.
    """
    k1 = spec.k + 1
    alpha_w = np.maximum(state.E_inv_sigma2 * state.E_eta2[k1:], A_FLOOR)
    e_w2, e_inv_w2 = gig_mean_pair(GigParams(0.5, alpha_w, np.full(alpha_w.size, state.E_gamma2)))
    state.E_w2 = np.atleast_1d(e_w2)
    state.E_inv_w2[k1:] = e_inv_w2
    order = D.n - spec.k - 1.5
    state.E_gamma2, state.E_inv_gamma2 = gig_mean_pair(
        GigParams(order, 2.0 * state.E_inv_nu, float(np.sum(state.E_w2)))
    )
    state.E_inv_nu = aux_shape / (state.E_inv_gamma2 + 1.0)
    return state


def vb_horseshoe_cycle(state: VariationalState, spec: QuantileModelSpec, D: DifferenceOperator, aux_shape: float = AUX_SHAPE):
    """Update the horseshoe shrinkage factors in place.

    ``aux_shape`` is the shape of ``q(nu_i)`` and ``q(xi)``; 1/2 reproduces
    the literal published updates.
    """
    k1 = spec.k + 1
    eta2 = state.E_eta2[k1:]
    alpha_w = state.E_inv_nu_i + 0.5 * state.E_inv_sigma2 * state.E_inv_tau2 * eta2
    assert np.all(alpha_w > 0), "local scale rate must be positive"
    state.E_inv_w2[k1:] = 1.0 / alpha_w
    state.E_inv_nu_i = aux_shape / (state.E_inv_w2[k1:] + 1.0)
    alpha_tau = 0.5 * float(np.sum(eta2 * state.E_inv_w2[k1:])) * state.E_inv_sigma2 + state.E_inv_xi
    assert alpha_tau > 0, "global scale rate must be positive"
    state.E_inv_tau2 = (D.n - spec.k) / (2.0 * alpha_tau)
    state.E_inv_xi = aux_shape / (state.E_inv_tau2 + 1.0 / spec.C_tau ** 2)
    return state


def vb_fit(
    spec: QuantileModelSpec,
    data: GridDataset,
    tol: float = DEFAULT_TOL,
    max_iters: int = DEFAULT_MAX_ITERS,
    init: VariationalState | None = None,
    *,
    D: DifferenceOperator | None = None,
    force_regular: bool = False,
    aux_shape: float = AUX_SHAPE,
    engine: str = "numba",
) -> VariationalState:
    """Cycle the updates until ``max_i |dE[theta_i]| < tol``.

    ``init`` warm-starts from another fit on the same grid. Hitting
    ``max_iters`` returns the current state with ``converged=False``.
    ``engine="numba"`` runs the fused compiled loop; ``"python"`` runs the
    reference cycle functions. Both compute the same updates; the compiled
    loop hands over to the reference loop (which retries a failed
    factorization with jitter) on a Cholesky breakdown.
    """
    if engine not in ("numba", "python"):
        raise ValueError(f"unknown engine {engine!r}")
    data = validate(spec, data)
    if D is None:
        D = difference_operator(spec, data, force_regular)
    state = initial_vb_state(spec, data) if init is None else _warm(init, spec, data)
    state.converged = False
    previous = None
    start_iter = 1
    if engine == "numba":
        status, previous = _run_compiled(state, spec, data, D, tol, max_iters, aux_shape)
        if status >= 0:
            state.converged = bool(status)
            return state
        start_iter = state.iterations + 1
    prior_cycle = vb_laplace_cycle if spec.prior is Prior.LAPLACE else vb_horseshoe_cycle
    for it in range(start_iter, max_iters + 1):
        vb_common_cycle(state, spec, data, D)
        prior_cycle(state, spec, D, aux_shape)
        state.iterations = it
        if previous is not None and float(np.max(np.abs(state.E_theta - previous))) < tol:
            state.converged = True
            break
        previous = state.E_theta.copy()
    return state


_SCALARS = ("E_sigma2", "E_inv_sigma2", "E_gamma2", "E_inv_gamma2", "E_inv_nu", "E_inv_tau2", "E_inv_xi")


def _run_compiled(state, spec, data, D, tol, max_iters, aux_shape):
    al = al_constants(spec.p)
    horseshoe = spec.prior is Prior.HORSESHOE
    m = spec.k + 1
    scal = np.array([getattr(state, name) for name in _SCALARS], dtype=float)
    e_w2 = np.ones(data.n - m) if state.E_w2 is None else state.E_w2
    nu_i = np.ones(data.n - m) if state.E_inv_nu_i is None else state.E_inv_nu_i
    arrays = [np.ascontiguousarray(a, dtype=float).copy() for a in (state.E_z, state.E_inv_z, state.E_inv_w2, e_w2, nu_i)]
    mu, var, th2, eta2, prev, iters, status = _vb_loop(
        data.y, data.index, data.n, np.ascontiguousarray(D.bands, dtype=float), spec.k,
        al.psi, al.t2, spec.a_sigma, spec.b_sigma, spec.a_w, spec.b_w, spec.C_tau,
        horseshoe, aux_shape, tol, max_iters, WINV_RELATIVE_CAP, *arrays, scal,
    )
    state.E_z, state.E_inv_z, state.E_inv_w2 = arrays[0], arrays[1], arrays[2]
    if not horseshoe:
        state.E_w2 = arrays[3]
    else:
        state.E_inv_nu_i = arrays[4]
    for name, v in zip(_SCALARS, scal):
        setattr(state, name, float(v))
    state.iterations = int(iters)
    if iters > 0:
        state.mu, state.E_theta = mu, mu.copy()
        state.var_diag, state.E_theta2, state.E_eta2 = var, th2, eta2
    return int(status), (state.E_theta.copy() if iters > 0 else None)


@njit(cache=True)
def _bessel_ratio(order, x):
    r = 1.0 + 1.0 / x
    nu = 0.5
    for _ in range(int(round(order - 0.5))):
        nu += 1.0
        r = 1.0 / r + 2.0 * nu / x
    return r


@njit(cache=True)
def _vb_loop(y, index, n, bands, k, psi, t2, a_sigma, b_sigma, a_w, b_w, C_tau, horseshoe, aux_shape,
             tol, max_iters, cap_rel, E_z, E_inv_z, E_inv_w2, E_w2, E_inv_nu_i, scal):
    m = k + 1
    N = y.size
    E_sigma2, E_inv_sigma2, E_gamma2, E_inv_gamma2, E_inv_nu, E_inv_tau2, E_inv_xi = (
        scal[0], scal[1], scal[2], scal[3], scal[4], scal[5], scal[6])
    total = n + 3.0 * N + 2.0 * a_sigma
    mu = np.zeros(n)
    prev = np.zeros(n)
    var = np.zeros(n)
    th2 = np.zeros(n)
    eta2 = np.zeros(n)
    winv = np.empty(n)
    status = 0
    it_done = 0
    for it in range(1, max_iters + 1):
        # (i) theta factor
        diag = np.zeros(n)
        rhs = np.zeros(n)
        for j in range(N):
            i = index[j]
            diag[i] += E_inv_z[j]
            rhs[i] += y[j] * E_inv_z[j] - psi
        dmax = 0.0
        for i in range(n):
            diag[i] /= t2
            rhs[i] /= t2
            dmax = max(dmax, diag[i])
        cap = cap_rel * dmax
        for i in range(n):
            w = E_inv_w2[i] * E_inv_tau2 if i >= m else E_inv_w2[i]
            winv[i] = min(w, cap)
        ab = np.zeros((m + 1, n))
        for r in range(n):
            for j2 in range(m + 1):
                c2 = r - m + j2
                if c2 < 0:
                    continue
                wb = winv[r] * bands[r, j2]
                for j1 in range(j2, m + 1):
                    ab[j1 - j2, c2] += wb * bands[r, j1]
        for i in range(n):
            ab[0, i] += diag[i]
        L, info = _chol_banded(ab)
        if info >= 0:
            status = -1
            break
        if it_done > 0:
            prev[:] = mu
        mean = _backward(L, _forward(L, rhs))
        S = _selected_inverse(L)
        scale = 1.0 / E_inv_sigma2
        for i in range(n):
            var[i] = S[0, i] * scale
            th2[i] = var[i] + mean[i] * mean[i]
        for r in range(n):
            q = 0.0
            dm = 0.0
            for j1 in range(m + 1):
                c1 = r - m + j1
                if c1 < 0:
                    continue
                b1 = bands[r, j1]
                dm += b1 * mean[c1]
                for j2 in range(m + 1):
                    c2 = r - m + j2
                    if c2 < 0:
                        continue
                    s = S[c1 - c2, c2] if c1 >= c2 else S[c2 - c1, c1]
                    q += b1 * bands[r, j2] * s
            eta2[r] = q * scale + dm * dm
        mu = mean
        # sigma2 factor
        lik = 0.0
        ez_sum = 0.0
        for j in range(N):
            i = index[j]
            yj = y[j]
            lik += (yj * yj * E_inv_z[j] - 2.0 * psi * yj + psi * psi * E_z[j]
                    - 2.0 * (E_inv_z[j] * yj - psi) * mean[i] + th2[i] * E_inv_z[j])
            ez_sum += E_z[j]
        pen = 0.0
        for i in range(n):
            pen += eta2[i] * winv[i]
        alpha = lik / (2.0 * t2) + 0.5 * pen + ez_sum + b_sigma
        E_inv_sigma2 = total / (2.0 * alpha)
        E_sigma2 = 2.0 * alpha / (total - 2.0)
        # z factors
        bz = (psi * psi / t2 + 2.0) * E_inv_sigma2
        for j in range(N):
            i = index[j]
            yj = y[j]
            az = max((yj * yj - 2.0 * yj * mean[i] + th2[i]) / t2 * E_inv_sigma2, 1e-300)
            root = np.sqrt(az / bz)
            E_z[j] = root * (1.0 + 1.0 / np.sqrt(az * bz))
            E_inv_z[j] = 1.0 / root
        for i in range(m):
            E_inv_w2[i] = (1.0 + 2.0 * a_w) / (eta2[i] * E_inv_sigma2 + 2.0 * b_w)
        # (ii) shrinkage factors
        if horseshoe:
            acc = 0.0
            for i in range(m, n):
                aw = E_inv_nu_i[i - m] + 0.5 * E_inv_sigma2 * E_inv_tau2 * eta2[i]
                E_inv_w2[i] = 1.0 / aw
                E_inv_nu_i[i - m] = aux_shape / (E_inv_w2[i] + 1.0)
                acc += eta2[i] * E_inv_w2[i]
            alpha_tau = 0.5 * acc * E_inv_sigma2 + E_inv_xi
            E_inv_tau2 = (n - k) / (2.0 * alpha_tau)
            E_inv_xi = aux_shape / (E_inv_tau2 + 1.0 / (C_tau * C_tau))
        else:
            wsum = 0.0
            for i in range(m, n):
                aw = max(E_inv_sigma2 * eta2[i], 1e-300)
                root = np.sqrt(aw / E_gamma2)
                E_w2[i - m] = root * (1.0 + 1.0 / np.sqrt(aw * E_gamma2))
                E_inv_w2[i] = 1.0 / root
                wsum += E_w2[i - m]
            order = n - k - 1.5
            ag = 2.0 * E_inv_nu
            ratio = _bessel_ratio(order, np.sqrt(ag * wsum))
            root = np.sqrt(ag / wsum)
            E_gamma2 = root * ratio
            E_inv_gamma2 = ratio / root - 2.0 * order / ag
            E_inv_nu = aux_shape / (E_inv_gamma2 + 1.0)
        it_done = it
        if it > 1:
            diff = 0.0
            for i in range(n):
                diff = max(diff, abs(mean[i] - prev[i]))
            if diff < tol:
                status = 1
                break
    scal[0], scal[1], scal[2], scal[3], scal[4], scal[5], scal[6] = (
        E_sigma2, E_inv_sigma2, E_gamma2, E_inv_gamma2, E_inv_nu, E_inv_tau2, E_inv_xi)
    return mu, var, th2, eta2, prev, it_done, status


def _warm(init: VariationalState, spec: QuantileModelSpec, data: GridDataset) -> VariationalState:
    state = init.copy()
    if state.E_theta.size != data.n or state.E_z.size != data.N:
        raise ValueError("warm start state does not match the data layout")
    fresh = initial_vb_state(spec, data)
    horseshoe = spec.prior is Prior.HORSESHOE
    if horseshoe and state.E_inv_nu_i is None:
        state.E_inv_nu_i, state.E_inv_xi = fresh.E_inv_nu_i, fresh.E_inv_xi
    if not horseshoe:
        state.E_inv_tau2, state.E_inv_xi, state.E_inv_nu_i = 1.0, 0.0, None
        if state.E_w2 is None:
            state.E_w2 = fresh.E_w2
    state.iterations = 0
    return state


def vb_interval(state: VariationalState, alpha: float = 0.05, lam=1.0):
    """Pointwise ``mu_i -/+ z_{1-alpha/2} sqrt(lam_i var_i)``."""
    if not (0.0 < alpha < 1.0):
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    lam = np.broadcast_to(np.asarray(lam, dtype=float), state.mu.shape)
    if np.any(~(lam > 0)):
        raise ValueError("interval scales must be positive")
    half = normal_quantile(1.0 - alpha / 2.0) * np.sqrt(lam * state.var_diag)
    return state.mu - half, state.mu + half

"""Special functions and random variate generators.

GIG convention used throughout: ``GIG(order, a, b)`` has density
proportional to ``z**(order - 1) * exp(-(a / z + b * z) / 2)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import DomainError

__all__ = [
    "ALConstants",
    "GigParams",
    "al_constants",
    "check_loss",
    "log_bessel_k_half",
    "bessel_k_ratio",
    "gig_mean_pair",
    "sample_gig",
    "sample_inv_gamma",
]

A_FLOOR = 1e-300


@dataclass(frozen=True)
class ALConstants:
    p: float
    psi: float
    t2: float


@dataclass(frozen=True)
class GigParams:
    order: float
    a: float | np.ndarray
    b: float | np.ndarray


def _check_level(p):
    if not (0.0 < p < 1.0):
        raise DomainError(f"quantile level must lie in (0, 1), got {p}")


def al_constants(p: float) -> ALConstants:
    """Mixture constants of the asymmetric Laplace working likelihood."""
    _check_level(p)
    q = p * (1.0 - p)
    return ALConstants(p=p, psi=(1.0 - 2.0 * p) / q, t2=2.0 / q)


def check_loss(r, p: float) -> float:
    _check_level(p)
    r = np.asarray(r, dtype=float)
    return float(np.sum(r * (p - (r < 0))))


def _half_order_steps(order) -> int:
    m = order - 0.5
    steps = int(round(m))
    if steps < 0 or abs(m - steps) > 1e-12:
        raise DomainError(f"order must be a half-integer >= 1/2, got {order}")
    return steps


def bessel_k_ratio(order, x):
    """``K_{order+1}(x) / K_order(x)`` for half-integer ``order``.

    Uses the recurrence ``r_nu = 1 / r_{nu-1} + 2 nu / x`` seeded with
    ``r_{1/2} = 1 + 1/x``; every term is positive so no cancellation or
    overflow occurs for any ``x > 0``.
    """
    steps = _half_order_steps(order)
    x = np.asarray(x, dtype=float)
    if np.any(~(x > 0)):
        raise DomainError("Bessel argument must be positive")
    r = 1.0 + 1.0 / x
    nu = 0.5
    for _ in range(steps):
        nu += 1.0
        r = 1.0 / r + 2.0 * nu / x
    return r


def log_bessel_k_half(order, x):
    """``log K_order(x)`` for half-integer ``order >= 1/2``.

    Seeds with ``K_{1/2}(x) = sqrt(pi / 2x) exp(-x)`` and accumulates the
    logarithms of successive ratios from the upward recurrence.
    """
    steps = _half_order_steps(order)
    xa = np.asarray(x, dtype=float)
    if np.any(~(xa > 0)):
        raise DomainError("Bessel argument must be positive")
    out = 0.5 * np.log(np.pi / (2.0 * xa)) - xa
    r = 1.0 + 1.0 / xa
    nu = 0.5
    for _ in range(steps):
        out = out + np.log(r)
        nu += 1.0
        r = 1.0 / r + 2.0 * nu / xa
    return out if out.ndim else float(out)


def gig_mean_pair(params: GigParams):
    """Return ``(E[z], E[1/z])`` for ``z ~ GIG(order, a, b)``."""
    a = np.asarray(params.a, dtype=float)
    b = np.asarray(params.b, dtype=float)
    if np.any(~(a > 0)) or np.any(~(b > 0)):
        raise DomainError("GIG parameters a and b must be positive")
    s = np.sqrt(a * b)
    ratio = bessel_k_ratio(params.order, s)
    root = np.sqrt(a / b)
    e_z = root * ratio
    if params.order == 0.5:
        # K_{3/2}/K_{1/2} = 1 + 1/s gives E[1/z] = sqrt(b/a) exactly
        e_inv = 1.0 / root
    else:
        e_inv = ratio / root - 2.0 * params.order / a
    if e_z.ndim == 0:
        return float(e_z), float(e_inv)
    return e_z, e_inv


def _sample_gig_half(rng, a, b):
    # X ~ GIG(1/2, a, b)  <=>  1/X ~ InverseGaussian(mean=sqrt(b/a), shape=b).
    # Written in terms of sqrt(a/b) so that a -> 0 (the Gamma(1/2, b/2)
    # limit) is handled without cancellation.
    shape = np.broadcast(a, b).shape
    inv_mu = np.sqrt(a / b)
    y = rng.standard_normal(shape) ** 2
    g = inv_mu + y / (2.0 * b) + np.sqrt(4.0 * b * y * inv_mu + y * y) / (2.0 * b)
    u = rng.random(shape)
    return np.where(u * (g + inv_mu) <= g, g, inv_mu * inv_mu / g)


def _devroye_psi(x, alpha, lam):
    return -alpha * (np.cosh(x) - 1.0) - lam * (np.expm1(x) - x)


def _devroye_dpsi(x, alpha, lam):
    return -alpha * np.sinh(x) - lam * np.expm1(x)


def _sample_gig_standard(rng, lam, omega):
    """Devroye (2014) rejection sampler for density ``x^(lam-1) exp(-omega (x + 1/x) / 2)``.

    Vectorized over ``omega``; rejected entries are redrawn until all accept.
    """
    omega = np.atleast_1d(np.asarray(omega, dtype=float))
    swap = lam < 0
    lam = abs(lam)
    alpha = np.sqrt(omega * omega + lam * lam) - lam

    x = -_devroye_psi(1.0, alpha, lam)
    t = np.where((x >= 0.5) & (x <= 2.0), 1.0,
                 np.where(x > 2.0, np.sqrt(2.0 / (alpha + lam)), np.log(4.0 / (alpha + 2.0 * lam))))
    x = -_devroye_psi(-1.0, alpha, lam)
    with np.errstate(divide="ignore"):
        s_small = np.log1p(1.0 / alpha + np.sqrt(1.0 / alpha ** 2 + 2.0 / alpha))
        if lam > 0:
            s_small = np.minimum(1.0 / lam, s_small)
    s = np.where((x >= 0.5) & (x <= 2.0), 1.0,
                 np.where(x > 2.0, np.sqrt(4.0 / (alpha * np.cosh(1.0) + lam)), s_small))

    eta = -_devroye_psi(t, alpha, lam)
    zeta = -_devroye_dpsi(t, alpha, lam)
    theta = -_devroye_psi(-s, alpha, lam)
    xi = _devroye_dpsi(-s, alpha, lam)
    p = 1.0 / xi
    r = 1.0 / zeta
    td = t - r * eta
    sd = s - p * theta
    q = td + sd
    total = p + q + r

    out = np.empty_like(omega)
    todo = np.arange(omega.size)
    while todo.size:
        u, v, w = rng.random((3, todo.size))
        qq, rr, pp, tt, ss = q[todo], r[todo], p[todo], td[todo], sd[todo]
        frac = u * total[todo]
        y = np.where(frac < qq, -ss + qq * v,
                     np.where(frac < qq + rr, tt - rr * np.log(v), -ss + pp * np.log(v)))
        f1 = np.exp(-eta[todo] - zeta[todo] * (y - t[todo]))
        f2 = np.exp(-theta[todo] + xi[todo] * (y + s[todo]))
        envelope = np.where(y > tt, f1, np.where(y < -ss, f2, 1.0))
        ok = w * envelope <= np.exp(_devroye_psi(y, alpha[todo], lam))
        out[todo[ok]] = y[ok]
        todo = todo[~ok]

    ratio = lam / omega
    res = np.exp(out) * (ratio + np.sqrt(1.0 + ratio * ratio))
    return 1.0 / res if swap else res


def sample_gig(rng: np.random.Generator, params: GigParams):
    """Draw from ``GIG(order, a, b)``; vectorized over ``a`` and ``b``.

    ``a`` is floored at 1e-300 so exact-fit residuals stay valid.
    """
    a = np.maximum(np.asarray(params.a, dtype=float), A_FLOOR)
    b = np.asarray(params.b, dtype=float)
    if np.any(~(b > 0)):
        raise DomainError("GIG parameter b must be positive")
    if params.order == 0.5:
        out = _sample_gig_half(rng, a, b)
    else:
        a, b = np.broadcast_arrays(a, b)
        out = np.sqrt(a / b) * _sample_gig_standard(rng, params.order, np.sqrt(a * b))
    return out if np.ndim(out) else float(out)


def sample_inv_gamma(rng: np.random.Generator, shape, scale):
    """Draw from IG(shape, scale), density ``x^(-shape-1) exp(-scale/x)``."""
    shape = np.asarray(shape, dtype=float)
    scale = np.asarray(scale, dtype=float)
    if np.any(~(shape > 0)) or np.any(~(scale > 0)):
        raise DomainError("inverse-gamma shape and scale must be positive")
    out = scale / rng.standard_gamma(shape, size=np.broadcast(shape, scale).shape)
    return out if np.ndim(out) else float(out)


def normal_quantile(prob: float) -> float:
    return float(stats.norm.ppf(prob))

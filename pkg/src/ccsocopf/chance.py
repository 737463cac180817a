"""Uncertainty description, Gaussian margins and critical-line screening."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import ndtri

from .network import NetworkCase, branch_admittances, lifted_flows

FORWARD = "forward"
REVERSE = "reverse"
DIRECTIONS = (FORWARD, REVERSE)
DEFAULT_BETA = 0.5


class UncertaintyError(ValueError):
    pass


class CrossedBoundsError(UncertaintyError):
    """A tightened interval became empty; ``quantity`` names the culprit."""

    def __init__(self, quantity: str, lo: float, hi: float):
        self.quantity = quantity
        self.lo = lo
        self.hi = hi
        super().__init__(f"tightened bounds cross for {quantity}: lower {lo:.6g} > upper {hi:.6g}")


def gaussian_quantile(p: float) -> float:
    """Inverse standard normal CDF."""
    p = float(p)
    if not 0.0 < p < 1.0:
        raise ValueError(f"quantile level must lie in (0, 1), got {p}")
    return float(ndtri(p))


def participation_factors(case: NetworkCase) -> np.ndarray:
    """Reserve shares proportional to installed capacity ``p_max``."""
    cap = np.array([max(g.p_max, 0.0) for g in case.generators])
    if cap.sum() <= 0:
        raise UncertaintyError("no generator with positive capacity to carry reserves")
    return cap / cap.sum()


@dataclass
class UncertaintySpec:
    """Gaussian wind deviations ``xi ~ N(0, sigma)`` and chance-constraint settings.

    ``beta`` maps ``(branch, direction)`` to a weight in (0, 1).  A value of
    ``None`` (or ``default_beta=None`` for unlisted lines) enforces both
    sides of the two-sided split at ``1 - epsilon``.
    """

    sigma: np.ndarray
    epsilon: float
    gamma: np.ndarray
    beta: dict = field(default_factory=dict)
    default_beta: float | None = DEFAULT_BETA
    quantile_fn: Callable[[float], float] = gaussian_quantile

    def __post_init__(self):
        self.sigma = np.atleast_2d(np.asarray(self.sigma, dtype=float))
        self.gamma = np.asarray(self.gamma, dtype=float)
        if self.sigma.shape[0] != self.sigma.shape[1]:
            raise UncertaintyError(f"covariance must be square, got {self.sigma.shape}")
        if not np.allclose(self.sigma, self.sigma.T, atol=1e-12, rtol=0):
            raise UncertaintyError("covariance is not symmetric")
        if self.sigma.size and np.linalg.eigvalsh(self.sigma).min() < -1e-10 * max(1.0, np.abs(self.sigma).max()):
            raise UncertaintyError("covariance is not positive semidefinite")
        if not 0.0 < self.epsilon < 1.0:
            raise UncertaintyError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if abs(self.gamma.sum() - 1.0) > 1e-10:
            raise UncertaintyError(f"participation factors sum to {self.gamma.sum():.12g}, expected 1")
        for key, b in list(self.beta.items()) + [("default", self.default_beta)]:
            if b is not None and not 0.0 < b < 1.0:
                raise UncertaintyError(f"beta for {key} must lie in (0, 1), got {b}")

    @property
    def n_wind(self) -> int:
        return self.sigma.shape[0]

    def beta_for(self, branch: int, direction: str) -> float | None:
        return self.beta.get((branch, direction), self.default_beta)

    def with_(self, **kw) -> "UncertaintySpec":
        d = dict(
            sigma=self.sigma, epsilon=self.epsilon, gamma=self.gamma, beta=dict(self.beta),
            default_beta=self.default_beta, quantile_fn=self.quantile_fn,
        )
        d.update(kw)
        return UncertaintySpec(**d)

    @classmethod
    def from_case(cls, case: NetworkCase, epsilon: float = 0.05, correlation=None, **kw) -> "UncertaintySpec":
        """Covariance from the farms' ``sigma`` and an optional correlation matrix."""
        sd = np.array([w.sigma for w in case.wind_farms])
        corr = np.eye(len(sd)) if correlation is None else np.asarray(correlation, float)
        gamma = kw.pop("gamma", None)
        gamma = participation_factors(case) if gamma is None else gamma
        return cls(sigma=corr * np.outer(sd, sd), epsilon=epsilon, gamma=gamma, **kw)


def uncertainty_margin(upsilon_row, spec: UncertaintySpec, level: float | None = None) -> float:
    """``f^{-1}(1 - eps) * sqrt(row @ Sigma @ row)`` for one sensitivity row."""
    row = np.asarray(upsilon_row, dtype=float).ravel()
    if row.shape[0] != spec.n_wind:
        raise UncertaintyError(f"sensitivity row has {row.shape[0]} entries, covariance is {spec.n_wind}x{spec.n_wind}")
    var = float(row @ spec.sigma @ row)
    if var < -1e-12:
        raise UncertaintyError(f"negative variance {var:.3e}")
    q = spec.quantile_fn(1.0 - (spec.epsilon if level is None else level))
    return q * np.sqrt(max(var, 0.0))


def margins(upsilon: np.ndarray, spec: UncertaintySpec, level: float | None = None) -> np.ndarray:
    """Row-wise :func:`uncertainty_margin` for a stacked sensitivity matrix."""
    U = np.atleast_2d(np.asarray(upsilon, dtype=float))
    if U.shape[1] != spec.n_wind:
        raise UncertaintyError(f"sensitivity matrix has {U.shape[1]} columns, expected {spec.n_wind}")
    var = np.einsum("ij,jk,ik->i", U, spec.sigma, U)
    q = spec.quantile_fn(1.0 - (spec.epsilon if level is None else level))
    return q * np.sqrt(np.maximum(var, 0.0))


def tighten_bounds(lo, hi, omega, labels=None):
    """Shrink ``[lo, hi]`` by ``omega`` from both sides.

    Raises :class:`CrossedBoundsError` for the first interval that empties.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    omega = np.broadcast_to(np.asarray(omega, dtype=float), lo.shape)
    if np.any(omega < 0):
        raise UncertaintyError("margins must be nonnegative")
    new_lo = lo + omega
    new_hi = hi - omega
    bad = np.flatnonzero(new_lo > new_hi)
    if bad.size:
        k = int(bad[0])
        name = labels[k] if labels is not None else f"index {k}"
        raise CrossedBoundsError(name, float(new_lo[k]), float(new_hi[k]))
    return new_lo, new_hi


def two_sided_flow_margins(ups_p, ups_q, spec: UncertaintySpec, beta: float | None = DEFAULT_BETA):
    """Margins ``(Omega_P, Omega_Q)`` for ``|P| <= k_P`` and ``|Q| <= k_Q``.

    The violation budget splits as ``beta * eps`` on the active side and
    ``(1 - beta) * eps`` on the reactive side; ``beta=None`` gives each side
    the whole ``eps``.
    """
    if beta is None:
        lp = lq = spec.epsilon
    else:
        if not 0.0 < beta < 1.0:
            raise UncertaintyError(f"beta must lie in (0, 1), got {beta}")
        lp, lq = beta * spec.epsilon, (1.0 - beta) * spec.epsilon
    return uncertainty_margin(ups_p, spec, lp), uncertainty_margin(ups_q, spec, lq)


# ---------------------------------------------------------------------------
# critical-line screening


@dataclass(frozen=True)
class CriticalLineSet:
    entries: frozenset = frozenset()
    history: tuple = ()  # one tuple of additions per screening pass

    def __contains__(self, key) -> bool:
        return key in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.sorted())

    def sorted(self) -> list[tuple[int, str]]:
        return sorted(self.entries)

    def union(self, found) -> "CriticalLineSet":
        added = tuple(sorted(set(found) - self.entries))
        return CriticalLineSet(self.entries | frozenset(added), self.history + (added,))

    @property
    def last_added(self) -> tuple:
        return self.history[-1] if self.history else ()


def box_vertices(spec: UncertaintySpec) -> np.ndarray:
    """Corners of the box ``+-f^{-1}(1 - eps/2) * sd`` around the forecast.

    The box contains the matching confidence ellipsoid, so its worst corner
    bounds the worst ellipsoid point per line.  Returns ``2^W x W``.
    """
    r = spec.quantile_fn(1.0 - spec.epsilon / 2) * np.sqrt(np.diag(spec.sigma))
    signs = np.array(list(itertools.product((-1.0, 1.0), repeat=spec.n_wind)))
    return signs * r


def vertex_injections(case: NetworkCase, spec: UncertaintySpec, vertices: np.ndarray) -> np.ndarray:
    """Nodal injection changes per vertex: wind deviation minus reserve pickup."""
    xi = np.atleast_2d(vertices)
    total = xi.sum(axis=1)
    return (case.wind_matrix @ xi.T).T - np.outer(total, case.gen_matrix @ spec.gamma)


def screen_critical_lines(
    case: NetworkCase,
    anchor,
    spec: UncertaintySpec,
    ptdf: np.ndarray,
    existing: CriticalLineSet | None = None,
    tol: float = 1e-6,
    vertices: Callable[[UncertaintySpec], np.ndarray] = box_vertices,
) -> CriticalLineSet:
    """Flag ``(branch, direction)`` pairs whose apparent flow may exceed its rating.

    Active flows at each vertex are ``P + PTDF @ dP``; reactive flows stay at
    the anchor.  Forward means the sending-end limit ``S_ij``, reverse the
    receiving-end limit ``S_ji``.
    """
    existing = CriticalLineSet() if existing is None else existing
    kappa = vertices(spec)
    if not np.any(kappa):
        return existing.union(())
    flows = lifted_flows(case, anchor.u, anchor.c, anchor.s, branch_admittances(case))
    dpf = (np.asarray(ptdf) @ vertex_injections(case, spec, kappa).T).T  # vertices x branches
    s_fwd = np.hypot(flows[:, 0] + dpf, flows[:, 1])
    s_rev = np.hypot(flows[:, 2] - dpf, flows[:, 3])
    rating = case.rating
    limited = rating > 0
    found = []
    for l in np.flatnonzero(limited):
        if np.any(s_fwd[:, l] > rating[l] + tol):
            found.append((int(l), FORWARD))
        if np.any(s_rev[:, l] > rating[l] + tol):
            found.append((int(l), REVERSE))
    return existing.union(found)

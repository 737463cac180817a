"""Linear sensitivities of the lifted load-flow equations to wind deviations.

Residual rows are nodal P and Q in ``(u, c, s)``, the coupling
``c^2 + s^2 - u_i u_j`` and the angle relation
``theta_j - theta_i - atan(s / c)``; columns are ``(u, c, s, theta)``.
Under the response rules (losses at the reference, reactive pickup at PV
and reference buses, fixed ``u`` there, fixed reference angle) the system
splits into a square block solved for the free deltas and a block that
reads off the generator responses.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import root
from scipy.sparse.linalg import splu

from .chance import UncertaintyError
from .network import BusKind, NetworkCase, branch_admittances

log = logging.getLogger(__name__)

CONE_TOL = 1e-6


class SensitivityError(RuntimeError):
    pass


class LooseConeWarning(UserWarning):
    pass


def response_kinds(case: NetworkCase) -> np.ndarray:
    """Bus kinds for the response rules; PV buses without a generator act as PQ."""
    kinds = case.kinds.copy()
    has_gen = np.bincount(case.gen_bus, minlength=case.n_bus) > 0
    kinds[(kinds == BusKind.PV) & ~has_gen] = BusKind.PQ
    return kinds


def soc_residuals(case: NetworkCase, u, c, s, theta, adm=None) -> np.ndarray:
    """Stacked ``[P(N), Q(N), cone(L), angle(L)]`` of the lifted equations."""
    adm = branch_admittances(case) if adm is None else adm
    f, t, n = case.f, case.t, case.n_bus
    G, B = -adm.g, -adm.b
    p = adm.g_ii * u
    q = -adm.b_ii * u
    p = p + np.bincount(f, G * c - B * s, minlength=n) + np.bincount(t, G * c + B * s, minlength=n)
    q = q - np.bincount(f, B * c + G * s, minlength=n) - np.bincount(t, B * c - G * s, minlength=n)
    cone = c**2 + s**2 - u[f] * u[t]
    ang = theta[t] - theta[f] - np.arctan(s / c)
    return np.concatenate([p, q, cone, ang])


@dataclass
class SocJacobian:
    matrix: sp.csr_matrix
    n_bus: int
    n_branch: int

    @property
    def row_blocks(self) -> dict[str, slice]:
        n, nl = self.n_bus, self.n_branch
        return {"P": slice(0, n), "Q": slice(n, 2 * n), "cone": slice(2 * n, 2 * n + nl), "angle": slice(2 * n + nl, 2 * n + 2 * nl)}

    @property
    def col_blocks(self) -> dict[str, slice]:
        n, nl = self.n_bus, self.n_branch
        return {"u": slice(0, n), "c": slice(n, n + nl), "s": slice(n + nl, n + 2 * nl), "theta": slice(n + 2 * nl, 2 * n + 2 * nl)}


def soc_jacobian(case: NetworkCase, u, c, s, adm=None) -> SocJacobian:
    """Analytic Jacobian of :func:`soc_residuals` (independent of ``theta``)."""
    adm = branch_admittances(case) if adm is None else adm
    n, nl = case.n_bus, case.n_branch
    f, t = case.f, case.t
    G, B = -adm.g, -adm.b
    if np.any(c == 0):
        raise SensitivityError(f"c = 0 on branch {int(np.flatnonzero(c == 0)[0])}; atan(s/c) is not differentiable there")
    L = np.arange(nl)
    cu, cc, cs, ct = 0, n, n + nl, n + 2 * nl
    rp, rq, rc, ra = 0, n, 2 * n, 2 * n + nl
    r2 = c**2 + s**2
    rows, cols, vals = [], [], []

    def put(r, cidx, v):
        rows.append(np.broadcast_to(r, np.shape(v)).ravel() if np.ndim(r) == 0 else np.asarray(r).ravel())
        cols.append(np.asarray(cidx).ravel())
        vals.append(np.asarray(v, float).ravel())

    idx = np.arange(n)
    put(rp + idx, cu + idx, adm.g_ii)
    put(rq + idx, cu + idx, -adm.b_ii)
    put(rp + f, cc + L, G)
    put(rp + t, cc + L, G)
    put(rp + f, cs + L, -B)
    put(rp + t, cs + L, B)
    put(rq + f, cc + L, -B)
    put(rq + t, cc + L, -B)
    put(rq + f, cs + L, -G)
    put(rq + t, cs + L, G)
    put(rc + L, cc + L, 2 * c)
    put(rc + L, cs + L, 2 * s)
    put(rc + L, cu + f, -u[t])
    put(rc + L, cu + t, -u[f])
    put(ra + L, ct + t, np.ones(nl))
    put(ra + L, ct + f, -np.ones(nl))
    put(ra + L, cs + L, -c / r2)
    put(ra + L, cc + L, s / r2)
    m = 2 * n + 2 * nl
    J = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(m, m))
    return SocJacobian(J, n, nl)


def project_anchor(case: NetworkCase, u, c, s, tol: float = CONE_TOL):
    """Scale ``(c, s)`` on loose branches onto ``c^2 + s^2 = u_i u_j``.

    Returns ``(c, s, loose_branches)``.
    """
    c = np.asarray(c, float).copy()
    s = np.asarray(s, float).copy()
    uu = u[case.f] * u[case.t]
    slack = uu - c**2 - s**2
    loose = np.flatnonzero(np.abs(slack) > tol)
    if loose.size:
        k = np.sqrt(uu[loose] / (c[loose] ** 2 + s[loose] ** 2))
        c[loose] *= k
        s[loose] *= k
    return c, s, loose


def build_psi(case: NetworkCase, spec, lambda_ratio) -> np.ndarray:
    """Right-hand side map ``Psi`` (rows as in the residual, ``W`` columns).

    ``spec`` is an :class:`UncertaintySpec` or a bare participation vector.
    """
    gamma = np.asarray(getattr(spec, "gamma", spec), dtype=float)
    if gamma.shape != (case.n_gen,):
        raise UncertaintyError(f"need {case.n_gen} participation factors, got {gamma.shape}")
    if abs(gamma.sum() - 1.0) > 1e-10:
        raise UncertaintyError(f"participation factors sum to {gamma.sum():.12g}, expected 1")
    lam = np.broadcast_to(np.asarray(lambda_ratio, float), (case.n_wind,))
    n, nl, w = case.n_bus, case.n_branch, case.n_wind
    cw = case.wind_matrix.toarray()
    psi = np.zeros((2 * n + 2 * nl, w))
    psi[:n] = -np.outer(case.gen_matrix @ gamma, np.ones(w)) + cw
    psi[n : 2 * n] = cw * lam
    return psi


@dataclass
class Partition:
    """Index sets of the response rules on the residual rows/columns."""

    g_rows: np.ndarray  # P_ref, Q_ref, Q_PV
    z_rows: np.ndarray  # everything else
    y_cols: np.ndarray  # u_PQ, c, s, theta_PV, theta_PQ
    ref: int
    pv: np.ndarray
    pq: np.ndarray


def partition(case: NetworkCase, kinds) -> Partition:
    n, nl = case.n_bus, case.n_branch
    kinds = np.asarray(kinds)
    ref = int(np.flatnonzero(kinds == BusKind.SLACK)[0])
    pv = np.flatnonzero(kinds == BusKind.PV)
    pq = np.flatnonzero(kinds == BusKind.PQ)
    g_rows = np.concatenate([[ref], [n + ref], n + pv])
    mask = np.ones(2 * n + 2 * nl, bool)
    mask[g_rows] = False
    z_rows = np.flatnonzero(mask)
    ct = n + 2 * nl
    y_cols = np.concatenate([pq, np.arange(n, n + 2 * nl), ct + pv, ct + pq])
    return Partition(g_rows, z_rows, y_cols, ref, pv, pq)


@dataclass
class SensitivityBundle:
    """Responses per unit wind deviation, each matrix ``rows x W``."""

    upsilon_yhat: np.ndarray
    upsilon_g: np.ndarray
    du: np.ndarray
    dc: np.ndarray
    ds: np.ndarray
    dtheta: np.ndarray
    gen_p: np.ndarray
    gen_q: np.ndarray
    flows: np.ndarray  # (L, 4, W): P_ij, Q_ij, P_ji, Q_ji
    part: Partition
    anchor: object = None
    warnings: list = field(default_factory=list)

    @property
    def n_wind(self) -> int:
        return self.upsilon_yhat.shape[1]


def derive_upsilon(jac: SocJacobian, psi: np.ndarray, bus_kinds, case: NetworkCase) -> SensitivityBundle:
    """Solve the free block for the state deltas and read off ``Delta g``.

    Generator rows are left at zero here; :func:`compute_sensitivities`
    fills them from the reserve shares.
    """
    n, nl = jac.n_bus, jac.n_branch
    part = partition(case, bus_kinds)
    J = jac.matrix.tocsc()
    j4 = J[part.z_rows][:, part.y_cols].tocsc()
    j2 = J[part.g_rows][:, part.y_cols]
    psi = np.asarray(psi, float)
    try:
        lu = splu(j4, permc_spec="COLAMD")
        ups_y = lu.solve(psi[part.z_rows])
    except RuntimeError as exc:
        rank = np.linalg.matrix_rank(j4.toarray()) if j4.shape[0] <= 3000 else -1
        raise SensitivityError(
            f"free block of the lifted Jacobian is singular (size {j4.shape[0]}, rank {rank}); "
            "check for islanded PQ subnetworks"
        ) from exc
    if not np.all(np.isfinite(ups_y)):
        raise SensitivityError("free block solve produced non-finite sensitivities")
    ups_g = j2 @ ups_y - psi[part.g_rows]

    w = psi.shape[1]
    full = np.zeros((2 * n + 2 * nl, w))
    full[part.y_cols] = ups_y
    du = full[:n]
    dc = full[n : n + nl]
    ds = full[n + nl : n + 2 * nl]
    dtheta = full[n + 2 * nl :]

    adm = branch_admittances(case)
    G, B, Bsh = -adm.g, -adm.b, adm.b_sh / 2
    f, t = case.f, case.t
    flows = np.stack([
        -G[:, None] * du[f] + G[:, None] * dc - B[:, None] * ds,
        (B - Bsh)[:, None] * du[f] - B[:, None] * dc - G[:, None] * ds,
        -G[:, None] * du[t] + G[:, None] * dc + B[:, None] * ds,
        (B - Bsh)[:, None] * du[t] - B[:, None] * dc + G[:, None] * ds,
    ], axis=1)
    return SensitivityBundle(ups_y, ups_g, du, dc, ds, dtheta, np.zeros((case.n_gen, w)),
                             np.zeros((case.n_gen, w)), flows, part)


def _generator_responses(case: NetworkCase, bundle: SensitivityBundle, gamma: np.ndarray):
    """Per-generator P and Q rows from ``Delta g`` and the reserve shares."""
    w = bundle.n_wind
    part = bundle.part
    gen_p = -np.outer(gamma, np.ones(w))
    gen_p[case.slack_gen] += bundle.upsilon_g[0]
    # bus-level reactive change at ref and PV buses, split by capability range
    dq_bus = np.zeros((case.n_bus, w))
    dq_bus[part.ref] = bundle.upsilon_g[1]
    dq_bus[part.pv] = bundle.upsilon_g[2:]
    gen_q = np.zeros((case.n_gen, w))
    for i in np.concatenate([[part.ref], part.pv]):
        ks = case.gens_at(int(i))
        rng = np.array([case.generators[k].q_max - case.generators[k].q_min for k in ks])
        share = rng / rng.sum() if rng.sum() > 0 else np.full(len(ks), 1.0 / len(ks))
        gen_q[ks] = np.outer(share, dq_bus[i])
    return gen_p, gen_q


def compute_sensitivities(case: NetworkCase, anchor, spec, kinds=None) -> SensitivityBundle:
    """Jacobian at ``anchor`` (cones projected if loose), ``Psi`` and the responses."""
    kinds = response_kinds(case) if kinds is None else kinds
    c, s, loose = project_anchor(case, anchor.u, anchor.c, anchor.s)
    notes = []
    if loose.size:
        msg = f"{loose.size} loose cone(s) at the anchor (branches {loose.tolist()[:10]}); linearizing at the projected point"
        warnings.warn(msg, LooseConeWarning, stacklevel=2)
        notes.append(msg)
    jac = soc_jacobian(case, anchor.u, c, s)
    lam = anchor.lambda_ratio if case.n_wind else np.zeros(0)
    psi = build_psi(case, spec, lam)
    bundle = derive_upsilon(jac, psi, kinds, case)
    gamma = np.asarray(getattr(spec, "gamma", spec), float)
    bundle.gen_p, bundle.gen_q = _generator_responses(case, bundle, gamma)
    bundle.anchor = anchor
    bundle.warnings = notes
    return bundle


def nonlinear_response(case: NetworkCase, u, c, s, theta, psi, xi, kinds=None, tol: float = 1e-13):
    """Exact deltas of the lifted equations for a finite ``xi`` under the response rules.

    Solves ``r(y + dy) - r(y) = Psi xi`` on the free rows for the free
    deltas with a finite-difference Newton method, independent of the
    analytic Jacobian.  Returns ``(d_yhat, d_g)``.
    """
    kinds = response_kinds(case) if kinds is None else kinds
    part = partition(case, kinds)
    adm = branch_admittances(case)
    n, nl = case.n_bus, case.n_branch
    y0 = np.concatenate([u, c, s, theta])
    r0 = soc_residuals(case, u, c, s, theta, adm)
    target = np.asarray(psi) @ np.asarray(xi, float)

    def full_r(dy_hat):
        y = y0.copy()
        y[part.y_cols] += dy_hat
        return soc_residuals(case, y[:n], y[n : n + nl], y[n + nl : n + 2 * nl], y[n + 2 * nl :], adm) - r0

    def fun(dy_hat):
        return full_r(dy_hat)[part.z_rows] - target[part.z_rows]

    sol = root(fun, np.zeros(part.y_cols.size), method="hybr", options={"xtol": tol})
    # hybr reports slow progress once the residual sits at round-off; judge by the residual
    res = np.abs(fun(sol.x)).max(initial=0.0)
    if not sol.success and res > 1e-11:
        raise SensitivityError(f"nonlinear response did not converge (residual {res:.2e}): {sol.message}")
    d_g = full_r(sol.x)[part.g_rows] - target[part.g_rows]
    return sol.x, d_g


def ptdf(case: NetworkCase, slack: int | None = None) -> np.ndarray:
    """DC injection-shift factors from series reactances, referenced to ``slack``."""
    slack = case.slack if slack is None else slack
    x = np.array([br.x for br in case.branches])
    if np.any(x == 0):
        raise SensitivityError(f"branch {int(np.flatnonzero(x == 0)[0])} has zero series reactance")
    n, nl = case.n_bus, case.n_branch
    A = sp.csr_matrix(
        (np.r_[np.ones(nl), -np.ones(nl)], (np.r_[np.arange(nl), np.arange(nl)], np.r_[case.f, case.t])),
        shape=(nl, n),
    )
    bf = sp.diags(1.0 / x) @ A
    bbus = (A.T @ bf).tocsc()
    keep = np.setdiff1d(np.arange(n), [slack])
    out = np.zeros((nl, n))
    lu = splu(bbus[keep][:, keep].tocsc())
    # PTDF[:, keep] = Bf[:, keep] @ inv(Bbus_kk) = (inv(Bbus_kk)^T Bf[:, keep]^T)^T; Bbus is symmetric
    out[:, keep] = lu.solve(bf[:, keep].toarray().T).T
    return out


def flow_rows(bundle: SensitivityBundle, branch: int, direction: str):
    """``(Upsilon_P, Upsilon_Q)`` of one branch end."""
    k = 0 if direction == "forward" else 2
    return bundle.flows[branch, k], bundle.flows[branch, k + 1]

"""Method of moving asymptotes for box-constrained nonlinear programs.

One step builds the separable convex approximation around the current
iterate (asymptotes adapt to oscillation history) and solves it with a
primal-dual interior point iteration. The artificial y/z variables follow
the usual elastic formulation, so feasible subproblems stay solvable even
when the outer constraints are momentarily violated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SolverFailure, ValidationError


@dataclass(frozen=True)
class MmaOptions:
    move: float = 0.2  # fraction of the variable range per step
    asyinit: float = 0.5
    asyincr: float = 1.2
    asydecr: float = 0.7
    albefa: float = 0.1
    raa0: float = 1e-5
    a0: float = 1.0
    c_elastic: float = 1000.0
    d_elastic: float = 1.0
    # minimum asymptote distance as a fraction of the range; a large floor
    # locks interior optima into a persistent 2-cycle above the move tolerance
    asy_floor: float = 1e-5


def mma_step(
    iteration: int,
    x: np.ndarray,
    xmin: np.ndarray,
    xmax: np.ndarray,
    xold1: np.ndarray,
    xold2: np.ndarray,
    df0: np.ndarray,
    fval: np.ndarray,
    dfdx: np.ndarray,
    low: np.ndarray,
    upp: np.ndarray,
    opts: MmaOptions = MmaOptions(),
):
    """One outer MMA update.

    iteration counts from 0; xold1/xold2 are the previous two iterates
    (ignored on the first two calls). fval/dfdx describe the constraints
    g_i(x) <= 0. Returns (x_new, low, upp) with updated asymptotes.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    m = np.asarray(fval, dtype=float).size
    dfdx = np.asarray(dfdx, dtype=float).reshape(m, n)
    fval = np.asarray(fval, dtype=float).reshape(m)
    df0 = np.asarray(df0, dtype=float).reshape(n)
    xmin = np.asarray(xmin, dtype=float)
    xmax = np.asarray(xmax, dtype=float)
    if (xmax < xmin).any():
        raise ValidationError("xmax must dominate xmin")

    xrange = xmax - xmin
    if iteration < 2:
        low = x - opts.asyinit * xrange
        upp = x + opts.asyinit * xrange
    else:
        zzz = (x - xold1) * (xold1 - xold2)
        factor = np.ones(n)
        factor[zzz > 0] = opts.asyincr
        factor[zzz < 0] = opts.asydecr
        low = x - factor * (xold1 - low)
        upp = x + factor * (upp - xold1)
        low = np.clip(low, x - 10.0 * xrange, x - opts.asy_floor * xrange)
        upp = np.clip(upp, x + opts.asy_floor * xrange, x + 10.0 * xrange)

    alfa = np.maximum.reduce([low + opts.albefa * (x - low), x - opts.move * xrange, xmin])
    beta = np.minimum.reduce([upp - opts.albefa * (upp - x), x + opts.move * xrange, xmax])

    xmami = np.maximum(xrange, 1e-5)
    ux1 = upp - x
    xl1 = x - low
    p0 = np.maximum(df0, 0.0)
    q0 = np.maximum(-df0, 0.0)
    pq0 = 0.001 * (p0 + q0) + opts.raa0 / xmami
    p0 = (p0 + pq0) * ux1**2
    q0 = (q0 + pq0) * xl1**2
    pmat = np.maximum(dfdx, 0.0)
    qmat = np.maximum(-dfdx, 0.0)
    pq = 0.001 * (pmat + qmat) + opts.raa0 / xmami[None, :]
    pmat = (pmat + pq) * ux1[None, :] ** 2
    qmat = (qmat + pq) * xl1[None, :] ** 2
    b = pmat @ (1.0 / ux1) + qmat @ (1.0 / xl1) - fval

    a_vec = np.zeros(m)
    c_vec = np.full(m, opts.c_elastic)
    d_vec = np.full(m, opts.d_elastic)
    x_new = _subsolve(low, upp, alfa, beta, p0, q0, pmat, qmat, opts.a0, a_vec, b, c_vec, d_vec)
    return x_new, low, upp


def _subsolve(low, upp, alfa, beta, p0, q0, pmat, qmat, a0, a, b, c, d, epsimin=1e-7):
    """Primal-dual interior point solve of the MMA subproblem."""
    n = low.size
    m = b.size
    x = 0.5 * (alfa + beta)
    y = np.ones(m)
    z = 1.0
    lam = np.ones(m)
    xsi = np.maximum(1.0 / (x - alfa), 1.0)
    eta = np.maximum(1.0 / (beta - x), 1.0)
    mu = np.maximum(np.ones(m), 0.5 * c)
    zet = 1.0
    s = np.ones(m)
    epsi = 1.0

    def residuals(x, y, z, lam, xsi, eta, mu, zet, s, epsi):
        ux1 = upp - x
        xl1 = x - low
        plam = p0 + pmat.T @ lam
        qlam = q0 + qmat.T @ lam
        gvec = pmat @ (1.0 / ux1) + qmat @ (1.0 / xl1)
        rex = plam / ux1**2 - qlam / xl1**2 - xsi + eta
        rey = c + d * y - mu - lam
        rez = a0 - zet - a @ lam
        relam = gvec - a * z - y + s - b
        rexsi = xsi * (x - alfa) - epsi
        reeta = eta * (beta - x) - epsi
        remu = mu * y - epsi
        rezet = zet * z - epsi
        res = lam * s - epsi
        full = np.concatenate(
            [rex, rey, [rez], relam, rexsi, reeta, remu, [rezet], res]
        )
        return full

    while epsi > epsimin:
        residu = residuals(x, y, z, lam, xsi, eta, mu, zet, s, epsi)
        residunorm = np.linalg.norm(residu)
        residumax = np.abs(residu).max()
        for _ in range(200):
            if residumax < 0.9 * epsi:
                break
            ux1 = upp - x
            xl1 = x - low
            ux2 = ux1**2
            xl2 = xl1**2
            uxinv1 = 1.0 / ux1
            xlinv1 = 1.0 / xl1
            plam = p0 + pmat.T @ lam
            qlam = q0 + qmat.T @ lam
            gvec = pmat @ uxinv1 + qmat @ xlinv1
            gg = pmat / ux2[None, :] - qmat / xl2[None, :]
            dpsidx = plam / ux2 - qlam / xl2
            delx = dpsidx - epsi / (x - alfa) + epsi / (beta - x)
            dely = c + d * y - lam - epsi / y
            delz = a0 - a @ lam - epsi / z
            dellam = gvec - a * z - y - b + epsi / lam
            diagx = 2.0 * (plam / ux1**3 + qlam / xl1**3) + xsi / (x - alfa) + eta / (beta - x)
            diagy = d + mu / y
            diaglamyi = s / lam + 1.0 / diagy

            # m is small here; Schur complement in the multipliers
            blam = dellam + dely / diagy - gg @ (delx / diagx)
            alam = np.diag(diaglamyi) + (gg / diagx[None, :]) @ gg.T
            aa = np.empty((m + 1, m + 1))
            aa[:m, :m] = alam
            aa[:m, m] = a
            aa[m, :m] = a
            aa[m, m] = -zet / z
            bb = np.concatenate([blam, [delz]])
            try:
                solut = np.linalg.solve(aa, bb)
            except np.linalg.LinAlgError as exc:
                raise SolverFailure(f"subproblem Newton system singular: {exc}") from exc
            dlam = solut[:m]
            dz = solut[m]
            dx = -delx / diagx - (gg.T @ dlam) / diagx
            dy = -dely / diagy + dlam / diagy
            dxsi = -xsi + epsi / (x - alfa) - (xsi * dx) / (x - alfa)
            deta = -eta + epsi / (beta - x) + (eta * dx) / (beta - x)
            dmu = -mu + epsi / y - (mu * dy) / y
            dzet = -zet + epsi / z - zet * dz / z
            ds = -s + epsi / lam - (s * dlam) / lam

            xx = np.concatenate([y, [z], lam, xsi, eta, mu, [zet], s])
            dxx = np.concatenate([dy, [dz], dlam, dxsi, deta, dmu, [dzet], ds])
            stmxx = np.max(-1.01 * dxx / xx)
            stmalfa = np.max(-1.01 * dx / (x - alfa))
            stmbeta = np.max(1.01 * dx / (beta - x))
            steg = 1.0 / max(stmxx, stmalfa, stmbeta, 1.0)

            xold, yold, zold = x, y, z
            lamold, xsiold, etaold = lam, xsi, eta
            muold, zetold, sold = mu, zet, s
            for _ in range(50):
                x = xold + steg * dx
                y = yold + steg * dy
                z = zold + steg * dz
                lam = lamold + steg * dlam
                xsi = xsiold + steg * dxsi
                eta = etaold + steg * deta
                mu = muold + steg * dmu
                zet = zetold + steg * dzet
                s = sold + steg * ds
                residu = residuals(x, y, z, lam, xsi, eta, mu, zet, s, epsi)
                if np.linalg.norm(residu) < residunorm:
                    break
                steg *= 0.5
            residunorm = np.linalg.norm(residu)
            residumax = np.abs(residu).max()
        epsi *= 0.1
    if not np.isfinite(x).all():
        raise SolverFailure("subproblem produced non-finite iterate")
    return x

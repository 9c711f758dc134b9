"""Discrete harmonic functions for nonlocal generators and their regularity.

A function h is harmonic in D when sum_y C(x,y) (h(y) - h(x)) = 0 for every
x in D, the sum running over the whole lattice.  The solver truncates that
sum at the enclosing window: boundary data g is read on window \\ D, and
mass jumping beyond the window is assigned ``tail_value`` (default 0) with
the induced bias bound reported.  The window must be wide enough that this
truncated mass is below 1e-6 of each vertex rate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg

from . import conductance as cd
from . import pathsim as ps
from . import rng
from .errors import ConfigurationError, DomainError
from .lattice import LatticeWindow
from .reports import CheckReport

TAIL_MASS_TOL = 1e-6
RESIDUAL_TOL = 1e-10
DENSE_SOLVE_CAP = 2000


@dataclass
class HarmonicProblem:
    model: cd.ConductanceModel
    window: LatticeWindow
    domain_mask: np.ndarray          # D as a mask over the window
    g: Callable[[np.ndarray], np.ndarray]  # boundary data on window \ D
    tail_value: float = 0.0

    def __post_init__(self):
        if self.model.scale != 1 or self.window.scale != 1:
            raise ConfigurationError("harmonic problems run at scale 1")
        self.domain_mask = np.asarray(self.domain_mask, dtype=bool)
        if self.domain_mask.shape != (self.window.site_count,):
            raise ConfigurationError("domain mask does not match the window")
        if not self.domain_mask.any():
            raise DomainError("domain D is empty")

    @property
    def domain_indices(self) -> np.ndarray:
        return np.nonzero(self.domain_mask)[0]


def boundary_preset(name: str, **kw) -> Callable[[np.ndarray], np.ndarray]:
    """Reproducible boundary data: half_space, far_site, linear_ramp."""
    if name == "half_space":
        cut = kw.get("cut", 0)
        axis = kw.get("axis", 0)
        return lambda pts: (pts[:, axis] >= cut).astype(np.float64)
    if name == "far_site":
        site = np.asarray(kw["site"], dtype=np.int64)
        return lambda pts: (pts == site).all(axis=1).astype(np.float64)
    if name == "linear_ramp":
        span = float(kw.get("span", 1.0))
        axis = kw.get("axis", 0)
        return lambda pts: pts[:, axis] / span
    raise ConfigurationError(f"unknown boundary preset {name!r}")


def recommended_half_width(model: cd.ConductanceModel, domain_radius: float,
                           tol: float = TAIL_MASS_TOL) -> int:
    """Window half-width keeping out-of-window mass below tol * v_x on D."""
    env = cd.envelope(model)
    v = cd.vertex_rate_total(model, np.zeros(model.dim, dtype=np.int64), 64.0)
    if model.finite_range is not None:
        return int(math.ceil(domain_radius + model.finite_range)) + 1
    w = max(2.0 * domain_radius, 64.0)
    while env.tail(w - domain_radius) > tol * v:
        w *= 1.3
    return int(math.ceil(w))


def _solve_cg(A: np.ndarray, b: np.ndarray, atol: float) -> np.ndarray:
    """Plain CG on the SPD reduced system, terminating on the inf-norm."""
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rs = float(r @ r)
    for _ in range(10 * len(b) + 100):
        if np.max(np.abs(r)) <= atol:
            break
        Ap = A @ p
        al = rs / float(p @ Ap)
        x += al * p
        r -= al * Ap
        rs_new = float(r @ r)
        p = r + (rs_new / rs) * p
        rs = rs_new
    return x


def solve_harmonic(problem: HarmonicProblem, method: str = "cg"):
    """h on D with residual below 1e-10 * max |g|; returns (h, info)."""
    model = problem.model
    window = problem.window
    idx = problem.domain_indices
    nD = len(idx)
    pts = window.coords[idx]

    # displacement enumeration must reach every window site from any x in D
    shape = np.asarray(window.shape, dtype=np.int64)
    reach = float(np.sqrt(((shape - 1).astype(np.float64) ** 2).sum()))
    z = cd.support_displacements(model, reach)
    env_tail = cd.envelope(model).tail(reach)
    if model.translation_invariant:
        zrates = model.unit_rates(z) * model.rate_scale
        v_hat = float(zrates.sum()) + env_tail
    else:
        raise ConfigurationError("harmonic solves require translation-invariant models")

    # tail-mass precondition and boundary load, one domain site at a time
    b = np.zeros(nD)
    out_mass = np.zeros(nD)
    gmax = 0.0
    for i, x in enumerate(pts):
        targets = x[None, :] + z
        inside = window.contains(targets)
        out_mass[i] = float(zrates[~inside].sum()) + env_tail
        tcoords = targets[inside]
        tidx = window.index(tcoords)
        is_boundary = ~problem.domain_mask[tidx]
        if is_boundary.any():
            gvals = np.asarray(problem.g(tcoords[is_boundary]), dtype=np.float64)
            gmax = max(gmax, float(np.max(np.abs(gvals), initial=0.0)))
            b[i] = float(np.dot(zrates[inside][is_boundary], gvals))
        b[i] += out_mass[i] * problem.tail_value
    if np.any(out_mass > TAIL_MASS_TOL * v_hat):
        need = recommended_half_width(model, float(np.max(np.abs(pts))))
        raise DomainError(
            f"window too small: out-of-window mass exceeds {TAIL_MASS_TOL} v_x; "
            f"a half-width of about {need} is required")

    A = -cd.pair_rates(model, np.repeat(pts, nD, axis=0),
                       np.tile(pts, (nD, 1))).reshape(nD, nD)
    np.fill_diagonal(A, v_hat)
    # row sums of A are each site's boundary mass (rate leaving D)
    if float(A.sum(axis=1).max()) <= 1e-14 * v_hat:
        raise DomainError("domain touches no boundary mass: singular system")

    gscale = max(gmax, abs(problem.tail_value), 1e-30)
    if method == "dense":
        if nD > DENSE_SOLVE_CAP:
            raise ConfigurationError(f"dense solve capped at {DENSE_SOLVE_CAP} unknowns")
        h = scipy.linalg.solve(A, b, assume_a="pos")
    elif method == "cg":
        h = _solve_cg(A, b, atol=0.5 * RESIDUAL_TOL * gscale)
    else:
        raise ConfigurationError(f"unknown solve method {method!r}")

    residual = float(np.max(np.abs(A @ h - b)))
    if residual > RESIDUAL_TOL * gscale:
        raise ConfigurationError(f"solver residual {residual:.3e} above tolerance")
    info = {
        "residual_inf": residual,
        "v_hat": v_hat,
        "bias_bound": float(np.max(out_mass / v_hat)) * gscale,
        "unknowns": nD,
        "g_max": gmax,
    }
    return h, info


def harmonic_on_window(problem: HarmonicProblem, h: np.ndarray) -> np.ndarray:
    """h extended by g to the whole window (for profiling and checks)."""
    full = np.empty(problem.window.site_count)
    outside = ~problem.domain_mask
    full[outside] = problem.g(problem.window.coords[outside])
    full[problem.domain_mask] = h
    return full


# -- oscillation profiles -----------------------------------------------------


@dataclass
class OscillationProfile:
    center: tuple
    base_radius: float
    contraction: float
    levels: list = field(default_factory=list)  # dicts: radius, sup, inf, osc, sites
    beta_hat: Optional[float] = None
    inconclusive: bool = False
    notes: list = field(default_factory=list)

    def oscillations(self) -> np.ndarray:
        return np.array([lv["osc"] for lv in self.levels])


MIN_BALL_SITES = 5
OSC_FLOOR = 1e-8


def oscillation_profile(problem: HarmonicProblem, h: np.ndarray, x, r: float,
                        contraction: float = 0.5, levels: int = 4) -> OscillationProfile:
    """Oscillation of h over nested balls B(x, c^k r) and the fitted exponent."""
    if not (0.0 < contraction < 1.0):
        raise DomainError("contraction must lie in (0, 1)")
    x0 = np.asarray(x, dtype=np.int64)
    window = problem.window
    dist = np.sqrt(((window.coords - x0).astype(np.float64) ** 2).sum(axis=1))
    outer = dist < r
    if not problem.domain_mask[outer].all():
        raise DomainError("B(x, r) must lie inside the harmonic domain")
    full = harmonic_on_window(problem, h)
    prof = OscillationProfile(tuple(int(c) for c in x0), r, contraction)
    radius = r
    for _ in range(levels):
        ball = dist < radius
        sites = int(ball.sum())
        if sites == 0:
            break
        vals = full[ball]
        prof.levels.append({
            "radius": radius,
            "sup": float(vals.max()),
            "inf": float(vals.min()),
            "osc": float(vals.max() - vals.min()),
            "sites": sites,
        })
        radius *= contraction
    usable = [lv for lv in prof.levels
              if lv["osc"] > OSC_FLOOR and lv["sites"] >= MIN_BALL_SITES]
    if len(usable) < 3:
        prof.inconclusive = True
        prof.notes.append("fewer than 3 usable levels for the power-law fit")
        return prof
    lr = np.log([lv["radius"] for lv in usable])
    lo = np.log([lv["osc"] for lv in usable])
    prof.beta_hat = float(np.polyfit(lr, lo, 1)[0])
    return prof


# -- martingale cross-check -----------------------------------------------------


def _shard_martingale(problem: HarmonicProblem, sampler: ps.JumpSampler,
                      h_win: np.ndarray, x0: np.ndarray, lo: int, hi: int,
                      seed: int, horizon: float, max_steps: int):
    m = hi - lo
    window = problem.window
    pos = np.tile(x0, (m, 1))
    t = np.zeros(m)
    status = np.full(m, ps.RUNNING, dtype=np.int8)
    value = np.zeros(m)
    for k in range(max_steps):
        run = status == ps.RUNNING
        if not run.any():
            break
        U = rng.step_uniforms(seed, k, lo, hi)
        holds, tail, disp = ps.draw_step(sampler, U)
        t_next = t + holds
        stopped = run & (t_next >= horizon)
        if stopped.any():
            # t hits the horizon first: the path is still sitting in D
            value[stopped] = h_win[window.index(pos[stopped])]
            status[stopped] = ps.HORIZON
            run = run & ~stopped
        ct = run & tail
        status[ct] = ps.CENSOR_TAIL
        run = run & ~ct
        idx = np.nonzero(run)[0]
        if len(idx) == 0:
            continue
        new = pos[idx] + disp[idx]
        pos[idx] = new
        t[idx] = t_next[idx]
        inside_win = window.contains(new)
        exited = np.zeros(len(idx), dtype=bool)
        beyond = ~inside_win
        value[idx[beyond]] = problem.tail_value
        status[idx[beyond]] = ps.EXITED
        exited |= beyond
        win_idx = np.full(len(idx), -1, dtype=np.int64)
        win_idx[inside_win] = window.index(new[inside_win])
        on_boundary = inside_win & ~problem.domain_mask[np.maximum(win_idx, 0)]
        on_boundary &= ~exited
        if on_boundary.any():
            gv = problem.g(new[on_boundary])
            value[idx[on_boundary]] = gv
            status[idx[on_boundary]] = ps.EXITED
    status[status == ps.RUNNING] = ps.MAXSTEPS
    return value, status


def martingale_check(problem: HarmonicProblem, h: np.ndarray, x, t: float,
                     n: int, seed: int, threads: Optional[int] = None) -> CheckReport:
    """E^x h(X_{t ^ tau_D}) against h(x), solver and simulator as mutual oracles."""
    x0 = np.asarray(x, dtype=np.int64)
    widx = int(problem.window.index(x0))
    if not problem.domain_mask[widx]:
        raise DomainError("x must lie in the harmonic domain")
    h_win = harmonic_on_window(problem, h)
    href = float(h_win[widx])
    if t == 0.0:
        return CheckReport("martingale", True, False,
                           {"estimate": href, "reference": href, "gap": 0.0,
                            "sigma": 0.0, "n": n, "censored": 0})
    sampler = ps.build_sampler(problem.model, "censor")
    parts = ps._map_shards(
        lambda lo, hi: _shard_martingale(problem, sampler, h_win, x0, lo, hi,
                                         seed, t, ps.MAX_STEPS),
        n, threads)
    value = np.concatenate([p[0] for p in parts])
    status = np.concatenate([p[1] for p in parts])
    ok = (status == ps.EXITED) | (status == ps.HORIZON)
    censored = int(n - ok.sum())
    est = float(value[ok].mean())
    se = float(value[ok].std(ddof=1) / math.sqrt(ok.sum()))
    gap = abs(est - href)
    inconclusive = censored / n > 0.01
    passed = bool(gap <= 3.0 * se + sampler.tail_bound / sampler.v_sim)
    return CheckReport("martingale", passed, inconclusive,
                       {"estimate": est, "reference": href, "gap": gap,
                        "sigma": se, "n": n, "censored": censored, "t": t,
                        "seed": seed})


# -- the explicit exponent recursion ---------------------------------------------


def theoretical_exponent(c1_support: float, c2_exit: float, eta: float,
                         alpha: float):
    """(gamma, rho, beta) of the oscillation iteration; beta must land in (0, alpha)."""
    if not (0.0 < c1_support < 1.0):
        raise DomainError("c1_support must lie in (0, 1)")
    if c2_exit <= 0.0:
        raise DomainError("c2_exit must be positive")
    if not (0.0 < eta < 1.0):
        raise DomainError("eta must lie in (0, 1)")
    if not (0.0 < alpha <= 2.0):
        raise DomainError("alpha must lie in (0, 2]")
    gamma = 1.0 - c1_support / 4.0
    rho = min(eta,
              (gamma / 2.0) ** (1.0 / alpha),
              (c1_support * gamma * gamma / (8.0 * c2_exit)) ** (1.0 / alpha))
    beta = math.log(gamma) / math.log(rho)
    assert 0.0 < beta < alpha, "exponent recursion left (0, alpha)"
    return gamma, rho, beta

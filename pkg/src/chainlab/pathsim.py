"""Exact continuous-time path simulation and Monte Carlo estimators.

The jump-hold construction runs on the infinite lattice: per-site dynamics
need only the displacement distribution C(x, .) / v_x, realized by an alias
table over all displacements within an enumeration radius chosen so the
envelope tail mass is below ``TAIL_FRACTION`` of the vertex rate.  The tail
remainder is simulated as an explicit censoring event (default policy), so
paths are exact conditional on no censoring and the censored fraction is a
first-class output of every estimator.

Simulation runs at scale 1 only; rescaled chains are checked analytically
in the kernel module.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.sparse.linalg

from . import conductance as cd
from . import heatkernel as hk
from . import rng
from .errors import ConfigurationError, DomainError
from .lattice import LatticeWindow
from .reports import CheckReport, EstimatorResult

TAIL_FRACTION = 1e-6
SHARD = 16384
MAX_STEPS = 200_000

# path status codes
RUNNING, EXITED, HORIZON, HIT, CENSOR_TAIL, CENSOR_WINDOW, MAXSTEPS = range(7)


def alias_setup(probs: np.ndarray):
    """Vose's alias method: O(1) draws from a finite distribution."""
    p = np.asarray(probs, dtype=np.float64)
    K = len(p)
    q = p * K / p.sum()
    J = np.arange(K, dtype=np.int64)
    small = [i for i in range(K) if q[i] < 1.0]
    large = [i for i in range(K) if q[i] >= 1.0]
    while small and large:
        s = small.pop()
        g = large.pop()
        J[s] = g
        q[g] = q[g] - (1.0 - q[s])
        if q[g] < 1.0:
            small.append(g)
        else:
            large.append(g)
    for i in small + large:
        q[i] = 1.0
    return J, q


@dataclass
class JumpSampler:
    """Displacement distribution of one site, shared by translation invariance."""

    model: cd.ConductanceModel
    displacements: np.ndarray   # (K, d)
    probs: np.ndarray           # conditional on an enumerated jump
    alias_J: np.ndarray
    alias_q: np.ndarray
    v_enum: float               # enumerated jump rate
    tail_bound: float           # envelope bound beyond the enumeration radius
    enum_radius: float
    policy: str = "censor"      # or "reject"

    @property
    def v_sim(self) -> float:
        """Total event rate driving the exponential holds."""
        return self.v_enum + self.tail_bound if self.policy == "censor" else self.v_enum

    @property
    def p_tail(self) -> float:
        return self.tail_bound / self.v_sim if self.policy == "censor" else 0.0


_SAMPLER_CACHE: dict = {}


def build_sampler(model: cd.ConductanceModel, policy: str = "censor",
                  tail_fraction: float = TAIL_FRACTION) -> JumpSampler:
    if model.scale != 1:
        raise ConfigurationError("simulation runs on the unrescaled lattice only")
    if not model.translation_invariant:
        raise ConfigurationError("path simulation requires a translation-invariant model")
    if policy not in ("censor", "reject"):
        raise ConfigurationError(f"unknown tail policy {policy!r}")
    key = (model.cache_key(), policy, tail_fraction)
    if key in _SAMPLER_CACHE:
        return _SAMPLER_CACHE[key]

    env = cd.envelope(model)
    if model.finite_range is not None:
        radius = model.finite_range
    else:
        radius = 64.0
        v_ref, _ = cd.vertex_rate(model, np.zeros(model.dim, dtype=np.int64), radius)
        while env.tail(radius) > tail_fraction * v_ref:
            radius *= 1.3
    z = cd.support_displacements(model, radius)
    rates = model.unit_rates(z) * model.rate_scale
    keep = rates > 0
    z, rates = z[keep], rates[keep]
    v_enum = float(rates.sum())
    tail = float(env.tail(radius))
    probs = rates / v_enum
    J, q = alias_setup(probs)
    sampler = JumpSampler(model, z, probs, J, q, v_enum, tail, radius, policy)
    _SAMPLER_CACHE[key] = sampler
    return sampler


def draw_step_cells(sampler: JumpSampler, U: np.ndarray):
    """Decode one uniform block: (holds, tail event mask, alias cells)."""
    holds = -np.log1p(-U[:, 0]) / sampler.v_sim
    np.maximum(holds, 5e-324, out=holds)
    tail = U[:, 1] < sampler.p_tail
    K = len(sampler.alias_q)
    idx = np.minimum((U[:, 2] * K).astype(np.int64), K - 1)
    take = U[:, 3] < sampler.alias_q[idx]
    cell = np.where(take, idx, sampler.alias_J[idx])
    return holds, tail, cell


def draw_step(sampler: JumpSampler, U: np.ndarray):
    """Decode one uniform block: (holds, tail event mask, displacements)."""
    holds, tail, cell = draw_step_cells(sampler, U)
    return holds, tail, sampler.displacements[cell]


def _threads(threads: Optional[int]) -> int:
    if threads is not None:
        return max(1, int(threads))
    return max(1, int(os.environ.get("CHAINLAB_THREADS", "1")))


def _map_shards(fn: Callable, n: int, threads: Optional[int]):
    """Apply fn(lo, hi) over fixed-size path ranges; shard order is fixed."""
    ranges = [(lo, min(lo + SHARD, n)) for lo in range(0, n, SHARD)]
    t = _threads(threads)
    if t == 1 or len(ranges) == 1:
        return [fn(lo, hi) for lo, hi in ranges]
    with ThreadPoolExecutor(max_workers=t) as pool:
        return list(pool.map(lambda r: fn(*r), ranges))


# -- single-path simulation ------------------------------------------------------


@dataclass
class PathSample:
    seed: int
    path_index: int
    times: list
    states: list                 # lattice points, one per time
    horizon: float
    censored: Optional[str] = None  # None | "tail" | "window" | "max_steps"
    censor_time: Optional[float] = None  # time of an unresolved tail jump

    @property
    def n_jumps(self) -> int:
        return len(self.times) - 1


def sample_path(model: cd.ConductanceModel, x0, horizon: float,
                window: Optional[LatticeWindow] = None, seed: int = 0,
                path_index: int = 0, max_steps: int = MAX_STEPS,
                policy: str = "censor") -> PathSample:
    """One jump-hold trajectory up to the horizon, censoring recorded as data."""
    sampler = build_sampler(model, policy)
    x = np.asarray(x0, dtype=np.int64)
    if window is not None and not window.contains(x[None, :])[0]:
        raise DomainError("x0 outside window")
    times = [0.0]
    states = [tuple(int(c) for c in x)]
    t = 0.0
    censored = None
    censor_time = None
    for k in range(max_steps):
        U = rng.path_step_uniforms(seed, k, path_index)[None, :]
        holds, tail, disp = draw_step(sampler, U)
        t_next = t + float(holds[0])
        if t_next > horizon:
            break
        if tail[0]:
            # the chain jumped beyond the enumeration radius: target unknown
            censored = "tail"
            censor_time = t_next
            break
        x = x + disp[0]
        t = t_next
        times.append(t)
        states.append(tuple(int(c) for c in x))
        if window is not None and not window.contains(x[None, :])[0]:
            censored = "window"
            break
    else:
        censored = "max_steps"
    return PathSample(seed, path_index, times, states, horizon, censored, censor_time)


# -- batch engines -----------------------------------------------------------------


def _shard_exit(sampler: JumpSampler, x0: np.ndarray, lo: int, hi: int, seed: int,
                r: float, horizon: Optional[float], max_steps: int):
    """Exit of the open ball B(x0, r): status and resolution times."""
    m = hi - lo
    pos = np.tile(x0, (m, 1))
    t = np.zeros(m)
    status = np.full(m, RUNNING, dtype=np.int8)
    out_t = np.zeros(m)
    tail_exits = sampler.enum_radius >= 2.0 * r
    for k in range(max_steps):
        run = status == RUNNING
        if not run.any():
            break
        U = rng.step_uniforms(seed, k, lo, hi)
        holds, tail, disp = draw_step(sampler, U)
        t_next = t + holds
        if horizon is not None:
            done = run & (t_next >= horizon)
            status[done] = HORIZON
            out_t[done] = horizon
            run = run & ~done
        ct = run & tail
        if ct.any():
            if tail_exits:
                status[ct] = EXITED
                out_t[ct] = t_next[ct]
            else:
                status[ct] = CENSOR_TAIL
            run = run & ~ct
        pos[run] = pos[run] + disp[run]
        t[run] = t_next[run]
        dist = np.sqrt(((pos[run] - x0).astype(np.float64) ** 2).sum(axis=1))
        exited = np.zeros(m, dtype=bool)
        exited[np.nonzero(run)[0][dist >= r]] = True
        status[exited] = EXITED
        out_t[exited] = t[exited]
    status[status == RUNNING] = MAXSTEPS
    return status, out_t


def estimate_exit_prob(model: cd.ConductanceModel, x, a: float, R: float,
                       gamma: float, n: int, seed: int,
                       window: Optional[LatticeWindow] = None,
                       threads: Optional[int] = None) -> EstimatorResult:
    """P^x(exit B(x, aR) before gamma R^alpha), with binomial standard error."""
    x0 = np.asarray(x, dtype=np.int64)
    r = a * R
    if window is not None:
        margin = min(min(int(x0[i]) - window.lower[i],
                         window.upper[i] - 1 - int(x0[i])) for i in range(model.dim))
        if margin < 2 * r:
            raise DomainError("window margin below the ball diameter; refusing "
                              "a boundary-biased estimate")
    horizon = gamma * R ** model.alpha
    sampler = build_sampler(model, "censor")
    if horizon <= 0.0:
        return EstimatorResult(0.0, 0.0, n, 0, seed, {"horizon": horizon})
    parts = _map_shards(
        lambda lo, hi: _shard_exit(sampler, x0, lo, hi, seed, r, horizon, MAX_STEPS),
        n, threads)
    status = np.concatenate([p[0] for p in parts])
    censored = int(np.sum((status == CENSOR_TAIL) | (status == MAXSTEPS)))
    good = (status == EXITED) | (status == HORIZON)
    hits = int(np.sum(status == EXITED))
    n_eff = int(good.sum())
    p_hat = hits / n_eff if n_eff else 0.0
    se = math.sqrt(max(p_hat * (1 - p_hat), 1e-300) / n_eff) if n_eff else math.inf
    return EstimatorResult(p_hat, se, n, censored, seed,
                           {"horizon": horizon, "radius": r,
                            "censored_fraction": censored / n})


def expected_exit_time(model: cd.ConductanceModel, x, radii, n: int, seed: int,
                       threads: Optional[int] = None):
    """Mean exit times over increasing radii and the log-log slope."""
    radii = [float(r) for r in radii]
    if any(b <= a for a, b in zip(radii, radii[1:])):
        raise DomainError("radii must be strictly increasing")
    x0 = np.asarray(x, dtype=np.int64)
    sampler = build_sampler(model, "censor")
    results = []
    for j, r in enumerate(radii):
        sub = rng.derive_seed(seed, f"exit-r{j}")
        parts = _map_shards(
            lambda lo, hi: _shard_exit(sampler, x0, lo, hi, sub, r, None, MAX_STEPS),
            n, threads)
        status = np.concatenate([p[0] for p in parts])
        times = np.concatenate([p[1] for p in parts])
        ok = status == EXITED
        censored = int(n - ok.sum())
        if ok.sum() < 2:
            raise DomainError(f"too few resolved paths at radius {r}")
        mean = float(times[ok].sum() / ok.sum())
        sd = float(np.sqrt(np.sum((times[ok] - mean) ** 2) / (ok.sum() - 1)))
        results.append(EstimatorResult(mean, sd / math.sqrt(ok.sum()), n, censored,
                                       sub, {"radius": r}))
    means = np.array([res.estimate for res in results])
    slope = float(np.polyfit(np.log(radii), np.log(means), 1)[0]) \
        if len(radii) >= 2 else math.nan
    inconclusive = any(res.censored_fraction > 0.01 for res in results)
    return results, slope, inconclusive


def exact_expected_exit_time(model: cd.ConductanceModel, x, r: float) -> np.ndarray:
    """Oracle: solve (-Q_B) u = 1 on the open ball; exact up to the tail slack."""
    x0 = np.asarray(x, dtype=np.int64)
    m = int(math.ceil(r)) + 1
    window = LatticeWindow(tuple(x0 - m), tuple(x0 + m + 1), 1)
    gen = hk.build_generator(model, window)
    dist = np.sqrt(((window.coords - x0).astype(np.float64) ** 2).sum(axis=1))
    inside = dist < r
    kgen = hk.kill_inside(gen, inside)
    u = scipy.sparse.linalg.spsolve(-kgen.matrix.tocsc(), np.ones(kgen.n))
    return float(u[kgen.local_index(x0)])


def _shard_hit(sampler: JumpSampler, x0: np.ndarray, lo: int, hi: int, seed: int,
               r: float, A: np.ndarray, max_steps: int):
    """Hit A or exit B(x0, r), whichever first."""
    m = hi - lo
    pos = np.tile(x0, (m, 1))
    t = np.zeros(m)
    status = np.full(m, RUNNING, dtype=np.int8)
    tail_exits = sampler.enum_radius >= 2.0 * r
    for k in range(max_steps):
        run = status == RUNNING
        if not run.any():
            break
        U = rng.step_uniforms(seed, k, lo, hi)
        holds, tail, disp = draw_step(sampler, U)
        ct = run & tail
        if ct.any():
            # the unseen target lies outside B, hence outside A
            status[ct] = EXITED if tail_exits else CENSOR_TAIL
            run = run & ~ct
        pos[run] = pos[run] + disp[run]
        t[run] = t[run] + holds[run]
        idx = np.nonzero(run)[0]
        cur = pos[idx]
        hit = (cur[:, None, :] == A[None, :, :]).all(axis=2).any(axis=1)
        dist = np.sqrt(((cur - x0).astype(np.float64) ** 2).sum(axis=1))
        status[idx[hit]] = HIT
        status[idx[~hit & (dist >= r)]] = EXITED
    status[status == RUNNING] = MAXSTEPS
    return (status,)


def estimate_hitting_prob(model: cd.ConductanceModel, x, A, r: float, n: int,
                          seed: int, eta: float = 0.25,
                          threads: Optional[int] = None) -> EstimatorResult:
    """P^x(hit A before exiting B(x, r)); A must sit inside B(x, eta r)."""
    x0 = np.asarray(x, dtype=np.int64)
    A_arr = np.atleast_2d(np.asarray(A, dtype=np.int64))
    if A_arr.size == 0:
        raise DomainError("target set A is empty")
    dist_A = np.sqrt(((A_arr - x0).astype(np.float64) ** 2).sum(axis=1))
    if float(dist_A.max()) >= eta * r:
        raise DomainError(f"A must lie inside B(x, eta r) with eta={eta}")
    if (A_arr == x0).all(axis=1).any():
        return EstimatorResult(1.0, 0.0, n, 0, seed, {"note": "x0 in A"})
    sampler = build_sampler(model, "censor")
    parts = _map_shards(
        lambda lo, hi: _shard_hit(sampler, x0, lo, hi, seed, r, A_arr, MAX_STEPS),
        n, threads)
    status = np.concatenate([p[0] for p in parts])
    censored = int(np.sum((status == CENSOR_TAIL) | (status == MAXSTEPS)))
    good = (status == HIT) | (status == EXITED)
    hits = int(np.sum(status == HIT))
    n_eff = int(good.sum())
    p_hat = hits / n_eff if n_eff else 0.0
    se = math.sqrt(max(p_hat * (1 - p_hat), 1e-300) / n_eff) if n_eff else math.inf
    return EstimatorResult(p_hat, se, n, censored, seed,
                           {"radius": r, "A_size": len(A_arr),
                            "censored_fraction": censored / n})


def _shard_levy(sampler: JumpSampler, x0: np.ndarray, lo: int, hi: int, seed: int,
                r: float, f: Callable, F_of: Callable, max_steps: int):
    m = hi - lo
    pos = np.tile(x0, (m, 1))
    status = np.full(m, RUNNING, dtype=np.int8)
    lhs = np.zeros(m)
    rhs = np.zeros(m)
    for k in range(max_steps):
        run = status == RUNNING
        if not run.any():
            break
        U = rng.step_uniforms(seed, k, lo, hi)
        holds, tail, disp = draw_step(sampler, U)
        ct = run & tail
        status[ct] = CENSOR_TAIL
        run = run & ~ct
        idx = np.nonzero(run)[0]
        if len(idx) == 0:
            continue
        old = pos[idx]
        new = old + disp[idx]
        # the hold completes at this jump: time integral and jump sum accrue
        rhs[idx] += holds[idx] * F_of(old)
        lhs[idx] += f(old, new)
        pos[idx] = new
        dist = np.sqrt(((new - x0).astype(np.float64) ** 2).sum(axis=1))
        status[idx[dist >= r]] = EXITED
    status[status == RUNNING] = MAXSTEPS
    return lhs, rhs, status


def levy_system_check(model: cd.ConductanceModel, x, f: Callable, r: float,
                      n: int, seed: int, threads: Optional[int] = None) -> CheckReport:
    """Jump-sum vs time-integral sides of the Levy system identity.

    LHS: E^x sum_{s <= T} f(X_{s-}, X_s); RHS: E^x int_0^T sum_y f(X_s, y)
    C(X_s, y) ds, with T the exit time of B(x, r).  f must vanish on the
    diagonal and take vectorized (m, d) point pairs.
    """
    x0 = np.asarray(x, dtype=np.int64)
    sampler = build_sampler(model, "censor")
    probe = np.tile(x0, (3, 1))
    if np.any(np.asarray(f(probe, probe)) != 0.0):
        raise DomainError("f must vanish on the diagonal")

    cache: dict = {}
    z = sampler.displacements
    rates = sampler.probs * sampler.v_enum

    def F_of(points: np.ndarray) -> np.ndarray:
        out = np.empty(len(points))
        for i, p in enumerate(map(tuple, points.tolist())):
            val = cache.get(p)
            if val is None:
                base = np.asarray(p, dtype=np.int64)
                val = float(np.sum(rates * f(np.broadcast_to(base, z.shape), base + z)))
                cache[p] = val
            out[i] = val
        return out

    parts = _map_shards(
        lambda lo, hi: _shard_levy(sampler, x0, lo, hi, seed, r, f, F_of, MAX_STEPS),
        n, threads)
    lhs = np.concatenate([p[0] for p in parts])
    rhs = np.concatenate([p[1] for p in parts])
    status = np.concatenate([p[2] for p in parts])
    ok = status == EXITED
    censored = int(n - ok.sum())
    mean_l = float(lhs[ok].mean())
    mean_r = float(rhs[ok].mean())
    se_l = float(lhs[ok].std(ddof=1) / math.sqrt(ok.sum()))
    se_r = float(rhs[ok].std(ddof=1) / math.sqrt(ok.sum()))
    gap = abs(mean_l - mean_r)
    tol = 3.0 * (se_l + se_r)
    inconclusive = censored / n > 0.01
    passed = bool(gap <= tol) if (se_l + se_r) > 0 else bool(gap == 0.0)
    return CheckReport("levy_system", passed, inconclusive,
                       {"lhs": mean_l, "rhs": mean_r, "gap": gap,
                        "sigma_lhs": se_l, "sigma_rhs": se_r,
                        "n": n, "censored": censored, "seed": seed,
                        "tail_bias_budget": sampler.tail_bound})


def green_quadrature_rhs(model: cd.ConductanceModel, x, f: Callable, r: float) -> float:
    """Killed-kernel oracle for the Levy RHS: solve (-Q_B) u = F on the ball."""
    x0 = np.asarray(x, dtype=np.int64)
    sampler = build_sampler(model, "censor")
    m = int(math.ceil(r)) + 1
    window = LatticeWindow(tuple(x0 - m), tuple(x0 + m + 1), 1)
    gen = hk.build_generator(model, window)
    dist = np.sqrt(((window.coords - x0).astype(np.float64) ** 2).sum(axis=1))
    inside = dist < r
    kgen = hk.kill_inside(gen, inside)
    pts = kgen.points()
    z = sampler.displacements
    rates = sampler.probs * sampler.v_enum
    F = np.array([float(np.sum(rates * f(np.broadcast_to(p, z.shape), p + z)))
                  for p in pts])
    u = scipy.sparse.linalg.spsolve(-kgen.matrix.tocsc(), F)
    return float(u[kgen.local_index(x0)])


def one_step_sample(model: cd.ConductanceModel, n: int, seed: int):
    """First-step draws for distributional fidelity tests."""
    sampler = build_sampler(model, "censor")
    U = rng.step_uniforms(seed, 0, 0, n)
    holds, tail, cells = draw_step_cells(sampler, U)
    return {"holds": holds, "tail": tail, "cells": cells,
            "displacements": sampler.displacements[cells], "sampler": sampler}

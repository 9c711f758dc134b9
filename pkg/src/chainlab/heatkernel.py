"""Transition densities via uniformization, killed kernels, and bound checks.

Generator convention: the jump rate from x to y on a window at scale rho is
C^rho(x, y) / mu^rho = rho^d * C^rho(u, v) in integer coordinates, and the
diagonal carries the full vertex rate v_x (enumerated mass plus envelope
tail), so mass jumping out of the window or beyond the enumeration radius
is absorbed by an implicit cemetery.  All kernels returned are densities
with respect to the site mass rho^-d; at scale 1 they coincide with
probabilities.

The killed chain on B is the plain restriction of the generator to B x B
with the diagonal unchanged, which kills at exactly the rate of jumps out
of B.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.special

from . import conductance as cd
from . import forms
from .errors import ConfigurationError, DomainError
from .lattice import Cube, LatticeWindow, make_set, _max_offset
from .reports import CheckReport

UNIFORMIZATION_SAFETY = 1.05
MAX_POISSON_STEPS = 10_000.0  # split when Lambda * t exceeds this
DENSE_SPECTRAL_CAP = 500
DEFAULT_TOL = 1e-10
WEIGHTED_SITE_CAP = 5000

_V_CACHE: dict = {}


def default_enum_radius(model: cd.ConductanceModel) -> float:
    """Enumeration radius for vertex rates, sized so the tail slack is tiny."""
    fr = model.finite_range
    if fr is not None:
        return fr
    if model.kind == cd.AXIS_STABLE_LIKE:
        return 10_000.0
    return {1: 8192.0, 2: 1000.0}.get(model.dim, 40.0)


def vertex_rates_on(model: cd.ConductanceModel, window: LatticeWindow,
                    enum_radius: Optional[float] = None) -> np.ndarray:
    """v_x (enumerated + envelope tail), per window site, in form units."""
    diam = float(np.sqrt(((np.asarray(window.shape) - 1).astype(float) ** 2).sum()))
    radius = max(enum_radius or default_enum_radius(model), diam)
    if model.translation_invariant:
        key = (model.cache_key(), radius)
        if key not in _V_CACHE:
            _V_CACHE[key] = cd.vertex_rate_total(model, np.zeros(model.dim, dtype=np.int64), radius)
        return np.full(window.site_count, _V_CACHE[key])
    if window.site_count > WEIGHTED_SITE_CAP:
        raise ConfigurationError(
            "per-site vertex rates for weighted models are capped at "
            f"{WEIGHTED_SITE_CAP} sites")
    return np.array([cd.vertex_rate_total(model, p, radius) for p in window.coords])


@dataclass
class SparseGenerator:
    """Symmetric rate matrix with absorbing diagonal on (a subset of) a window."""

    window: LatticeWindow
    model: cd.ConductanceModel
    matrix: sp.csr_matrix          # Q: off-diagonal rates, diagonal -v
    v: np.ndarray                  # vertex rates (jump units)
    uniformization: float          # Lambda >= max v
    boundary_mode: str = "absorb"
    lambda_cut: Optional[float] = None
    support: Optional[np.ndarray] = None  # window indices when killed to a set

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def mass(self) -> float:
        return self.window.site_mass

    def local_index(self, point) -> int:
        idx = int(self.window.index(np.asarray(point, dtype=np.int64)))
        if self.support is None:
            return idx
        pos = np.searchsorted(self.support, idx)
        if pos >= len(self.support) or self.support[pos] != idx:
            raise DomainError(f"point {point} outside the killed domain")
        return int(pos)

    def points(self) -> np.ndarray:
        coords = self.window.coords
        return coords if self.support is None else coords[self.support]


def build_generator(model: cd.ConductanceModel, window: LatticeWindow,
                    boundary_mode: str = "absorb",
                    lambda_cut: Optional[float] = None,
                    enum_radius: Optional[float] = None) -> SparseGenerator:
    """Assemble Q on a window; jumps beyond lambda_cut (physical) removed."""
    if window.scale != model.scale:
        raise ConfigurationError(
            f"window scale {window.scale} does not match model scale {model.scale}")
    if boundary_mode != "absorb":
        raise ConfigurationError("build_generator only assembles absorbing windows; "
                                 "use kill_inside for killed chains")
    if lambda_cut is not None and lambda_cut <= 0:
        raise ConfigurationError("lambda_cut must be positive when present")

    n = window.site_count
    mass_inv = float(window.scale) ** window.dim
    form = forms.build_form(model, window)
    rows, cols, coeffs = form.rows, form.cols, form.coeffs

    if lambda_cut is not None:
        pts = window.coords
        d2 = ((pts[rows] - pts[cols]).astype(np.float64) ** 2).sum(axis=1)
        keep = d2 <= (lambda_cut * window.scale) ** 2
        rows, cols, coeffs = rows[keep], cols[keep], coeffs[keep]
        # truncated vertex rates are finite sums, exact
        z = cd.support_displacements(model, lambda_cut * window.scale)
        if model.translation_invariant:
            v_form = float(np.sum(model.unit_rates(z) * model.rate_scale)) if len(z) else 0.0
            v = np.full(n, v_form)
        else:
            v = np.array([float(np.sum(cd.rates_from(model, p, z))) for p in window.coords])
    else:
        v = vertex_rates_on(model, window, enum_radius)

    v_jump = v * mass_inv
    q = coeffs * mass_inv
    data = np.concatenate([q, q, -v_jump])
    mrows = np.concatenate([rows, cols, np.arange(n)])
    mcols = np.concatenate([cols, rows, np.arange(n)])
    Q = sp.csr_matrix((data, (mrows, mcols)), shape=(n, n))

    inrow = np.zeros(n)
    np.add.at(inrow, rows, q)
    np.add.at(inrow, cols, q)
    if np.any(inrow > v_jump * (1 + 1e-12) + 1e-12):
        raise ConfigurationError("in-window rate mass exceeds the vertex rate; "
                                 "enumeration radius too small")

    lam = UNIFORMIZATION_SAFETY * float(v_jump.max()) if n else 0.0
    return SparseGenerator(window, model, Q, v_jump, lam,
                           lambda_cut=lambda_cut)


def kill_inside(gen: SparseGenerator, domain) -> SparseGenerator:
    """Restrict the generator to a set; the unchanged diagonal does the killing."""
    if gen.support is not None:
        raise ConfigurationError("generator already killed to a subset")
    mask = domain.mask if hasattr(domain, "mask") else np.asarray(domain, dtype=bool)
    idx = np.nonzero(mask)[0]
    if len(idx) == 0:
        raise DomainError("killed domain is empty")
    sub = gen.matrix[idx][:, idx].tocsr()
    v = gen.v[idx]
    lam = UNIFORMIZATION_SAFETY * float(v.max())
    return SparseGenerator(gen.window, gen.model, sub, v, lam,
                           boundary_mode="kill_inside",
                           lambda_cut=gen.lambda_cut, support=idx)


@dataclass
class KernelSlice:
    """One row p(t, x, .) of a transition density, with its error budget."""

    t: float
    source: int                  # local index of x
    density: np.ndarray          # w.r.t. site mass rho^-d
    poisson_truncation_error: float
    variant: str
    window: LatticeWindow
    support: Optional[np.ndarray] = None

    @property
    def mass_retained(self) -> float:
        return float(self.density.sum()) * self.window.site_mass


def _poisson_weights(lam_t: float, tol: float) -> np.ndarray:
    """Weights of the Poisson(lam_t) mixture truncated so the tail is < tol."""
    if lam_t == 0.0:
        return np.ones(1)
    spread = 12.0 * math.sqrt(lam_t) + 40.0
    hi = int(lam_t + spread)
    while True:
        k = np.arange(hi + 1, dtype=np.float64)
        logw = -lam_t + k * math.log(lam_t) - scipy.special.gammaln(k + 1)
        w = np.exp(logw)
        cum = np.cumsum(w)
        good = np.nonzero((k >= lam_t) & (1.0 - cum < tol))[0]
        if len(good):
            K = int(good[0])
            return w[: K + 1]
        hi *= 2


def _uniformized_apply(Q: sp.csr_matrix, lam: float, lam_t: float,
                       operand: np.ndarray, tol: float):
    """sum_k w_k P^k x with P = I + Q / lam; returns (result, tail mass)."""
    if lam_t == 0.0 or lam == 0.0:
        return operand.copy(), 0.0
    w = _poisson_weights(lam_t, tol)
    out = w[0] * operand
    vk = operand
    for k in range(1, len(w)):
        vk = vk + (Q @ vk) / lam
        out = out + w[k] * vk
    return out, float(1.0 - w.sum())


def _evolve(gen: SparseGenerator, t: float, operand: np.ndarray, tol: float):
    if t < 0:
        raise DomainError("time must be nonnegative")
    lam = gen.uniformization
    pieces = max(1, int(math.ceil(lam * t / MAX_POISSON_STEPS)))
    err = 0.0
    out = operand
    for _ in range(pieces):
        out, e = _uniformized_apply(gen.matrix, lam, lam * (t / pieces), out, tol / pieces)
        err += e
    return out, err


def transition_density(gen: SparseGenerator, t: float, x,
                       tol: float = DEFAULT_TOL) -> KernelSlice:
    """p(t, x, .) by the Poisson series, split when Lambda t is large."""
    i = gen.local_index(np.asarray(x, dtype=np.int64)) if not np.isscalar(x) else int(x)
    delta = np.zeros(gen.n)
    delta[i] = 1.0
    prob, err = _evolve(gen, float(t), delta, tol)
    mass_inv = float(gen.window.scale) ** gen.window.dim
    variant = "full" if gen.support is None else "killed"
    if gen.lambda_cut is not None:
        variant = "truncated"
    return KernelSlice(float(t), i, prob * mass_inv, err, variant, gen.window,
                       gen.support)


def transition_matrix(gen: SparseGenerator, t: float,
                      tol: float = DEFAULT_TOL) -> np.ndarray:
    """All-sources density matrix (n, n); rows are sources."""
    eye = np.eye(gen.n)
    prob, _ = _evolve(gen, float(t), eye, tol)
    return prob * float(gen.window.scale) ** gen.window.dim


def killed_density(model: cd.ConductanceModel, window: LatticeWindow, domain,
                   t: float, x, tol: float = DEFAULT_TOL,
                   lambda_cut: Optional[float] = None) -> KernelSlice:
    """Density of the chain killed on exiting the domain, from x in it."""
    gen = kill_inside(build_generator(model, window, lambda_cut=lambda_cut), domain)
    return transition_density(gen, t, np.asarray(x, dtype=np.int64), tol)


@dataclass
class SpectralOracle:
    """Dense eigendecomposition of a (killed) generator on a small set."""

    eigenvalues: np.ndarray   # of -Q, all >= 0
    eigenvectors: np.ndarray  # orthonormal columns in plain l2
    gen: SparseGenerator

    @classmethod
    def build(cls, gen: SparseGenerator) -> "SpectralOracle":
        if gen.n > DENSE_SPECTRAL_CAP:
            raise ConfigurationError(
                f"spectral oracle capped at {DENSE_SPECTRAL_CAP} sites, got {gen.n}")
        evals, evecs = scipy.linalg.eigh(-gen.matrix.toarray())
        return cls(evals, evecs, gen)

    def density_matrix(self, t: float) -> np.ndarray:
        decay = np.exp(-self.eigenvalues * t)
        prob = (self.eigenvectors * decay) @ self.eigenvectors.T
        return prob * float(self.gen.window.scale) ** self.gen.window.dim


# -- bound checks ----------------------------------------------------------------


def _center_of(window: LatticeWindow) -> np.ndarray:
    lo = np.asarray(window.lower)
    up = np.asarray(window.upper)
    return (lo + up - 1) // 2


def near_diagonal_lower_check(model: cd.ConductanceModel, window: LatticeWindow,
                              times: Sequence[float], alpha: Optional[float] = None,
                              spread_factor: float = 3.0,
                              epsilon_floor: float = 0.0,
                              mass_floor: float = 0.9,
                              tol: float = DEFAULT_TOL) -> CheckReport:
    """min over |y-x| <= 2 t^(1/a) of p(t, x, y) t^(d/a), x at the center."""
    alpha = model.alpha if alpha is None else alpha
    d = model.dim
    gen = build_generator(model, window)
    x0 = _center_of(window)
    per_time = []
    dist = np.sqrt(((window.coords - x0).astype(float) ** 2).sum(axis=1)) / window.scale
    inconclusive = False
    notes = []
    for t in sorted(times):
        sl = transition_density(gen, t, x0, tol)
        if sl.mass_retained < mass_floor:
            inconclusive = True
            notes.append(f"boundary loss {1 - sl.mass_retained:.3g} at t={t}")
        ball = dist <= 2.0 * t ** (1.0 / alpha)
        eps_t = float(sl.density[ball].min()) * t ** (d / alpha)
        per_time.append({"t": t, "epsilon": eps_t, "mass": sl.mass_retained,
                         "pairs": int(ball.sum())})
    vals = np.array([row["epsilon"] for row in per_time])
    spread = float(vals.max() / vals.min()) if vals.min() > 0 else math.inf
    passed = bool(vals.min() > 0) and vals.min() >= epsilon_floor \
        and spread <= spread_factor
    return CheckReport("near_diagonal_lower", passed, inconclusive,
                       {"epsilon_hat": float(vals.min()), "spread": spread,
                        "per_time": per_time}, notes)


def killed_lower_check(model: cd.ConductanceModel, R: float, rhos: Sequence[int],
                       t: float = 1.0, spread_factor: float = 3.0,
                       tol: float = DEFAULT_TOL) -> CheckReport:
    """min over B(x0, 3R/4)^2 of the killed density at time t, per rho."""
    mins = []
    for rho in rhos:
        scaled = cd.rescale(model, int(rho))
        m = _max_offset(R, scaled.scale)
        window = LatticeWindow((-m,) * model.dim, (m + 1,) * model.dim, scaled.scale)
        gen = kill_inside(build_generator(scaled, window),
                          make_set(window, Cube((0,) * model.dim, R)))
        kernel = transition_matrix(gen, t, tol)
        pts = gen.points()
        dist = np.sqrt((pts.astype(float) ** 2).sum(axis=1)) / scaled.scale
        inner = dist < 0.75 * R
        sub = kernel[np.ix_(inner, inner)]
        mins.append({"rho": int(rho), "min_density": float(sub.min()),
                     "inner_sites": int(inner.sum())})
    vals = np.array([row["min_density"] for row in mins])
    spread = float(vals.max() / vals.min()) if vals.min() > 0 else math.inf
    passed = bool(vals.min() > 0) and spread <= spread_factor
    return CheckReport("killed_near_diagonal_lower", passed, False,
                       {"per_rho": mins, "spread": spread,
                        "min_density": float(vals.min())})


def upper_bound_check(model: cd.ConductanceModel, window: LatticeWindow,
                      times: Sequence[float], alpha: Optional[float] = None,
                      spread_factor: float = 3.0, mass_floor: float = 0.9,
                      tol: float = DEFAULT_TOL) -> CheckReport:
    """max over y of p(t, x, y) (t^(d/a) v 1): bounded and stable in t."""
    alpha = model.alpha if alpha is None else alpha
    d = model.dim
    gen = build_generator(model, window)
    x0 = _center_of(window)
    rows = []
    notes = []
    for t in sorted(times):
        sl = transition_density(gen, t, x0, tol)
        c_hat = float(sl.density.max()) * max(t ** (d / alpha), 1.0)
        excluded = sl.mass_retained < mass_floor
        if excluded:
            notes.append(f"t={t} excluded: boundary loss {1 - sl.mass_retained:.3g}")
        rows.append({"t": t, "c_hat": c_hat, "mass": sl.mass_retained,
                     "max_density": float(sl.density.max()), "excluded": excluded})
    used = np.array([r["c_hat"] for r in rows if not r["excluded"]])
    if len(used) == 0:
        return CheckReport("upper_bound", False, True, {"per_time": rows}, notes)
    spread = float(used.max() / used.min())
    density_cap_ok = all(r["max_density"] <= 1.0 + 10 * tol for r in rows)
    passed = spread <= spread_factor and density_cap_ok
    return CheckReport("upper_bound", passed, False,
                       {"c_hat": float(used.max()), "spread": spread,
                        "per_time": rows}, notes)


def truncated_decay_check(model: cd.ConductanceModel, window: LatticeWindow,
                          lam_cut: float, t: float = 1.0,
                          rho: int = 1, slope_max: float = -0.75,
                          tol: float = DEFAULT_TOL) -> CheckReport:
    """Fit log p^(rho,lambda)(t, x, .) against |x-y| / lambda."""
    scaled = cd.rescale(model, rho)
    if scaled.scale != window.scale:
        raise ConfigurationError("window scale must match rho")
    diam = float(np.sqrt(((np.asarray(window.shape) - 1).astype(float) ** 2).sum()))
    if scaled.finite_range is None and lam_cut * window.scale >= diam:
        return CheckReport("truncated_decay", False, True,
                           {"lambda": lam_cut},
                           ["truncation inactive on this window: the kernel "
                            "keeps its polynomial tails"])
    gen = build_generator(scaled, window, lambda_cut=lam_cut)
    x0 = _center_of(window)
    sl = transition_density(gen, t, x0, tol)
    dist = np.sqrt(((window.coords - x0).astype(float) ** 2).sum(axis=1)) / window.scale
    keep = sl.density > 10.0 * tol
    if keep.sum() < 5:
        return CheckReport("truncated_decay", False, True,
                           {"points": int(keep.sum())},
                           ["too few cells above the truncation floor"])
    u = dist[keep] / lam_cut
    logp = np.log(sl.density[keep])
    slope, intercept = np.polyfit(u, logp, 1)
    # implied c1 at c2 = 1 from the intercept
    c1 = math.exp(intercept) * t ** (model.dim / model.alpha) * math.exp(-t)
    passed = bool(slope <= slope_max)
    return CheckReport("truncated_decay", passed, False,
                       {"slope": float(slope), "intercept": float(intercept),
                        "implied_c1_at_c2_1": c1, "points": int(keep.sum()),
                        "lambda": lam_cut, "t": t})


def scaling_identity_check(model: cd.ConductanceModel, half_width: int, rho: int,
                           t: float, x, y, rel_tol: float = 1e-6,
                           tol: float = DEFAULT_TOL) -> CheckReport:
    """Both sides of p^rho(t,x,y) = rho^d p(rho^a t, rho x, rho y), independently.

    The two sides are computed from independently assembled generators (the
    rescaled model vs the base model) over the same integer window, so the
    comparison exercises the whole rescaling path; the shared window also
    means finite-window absorption affects both sides identically.
    """
    d = model.dim
    x = np.asarray(x, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    if np.any(np.abs(x) > half_width) or np.any(np.abs(y) > half_width):
        raise DomainError("rho x, rho y must lie inside the base window")

    scaled = cd.rescale(model, rho)
    win_s = LatticeWindow((-half_width,) * d, (half_width + 1,) * d, scaled.scale)
    slice_v = transition_density(build_generator(scaled, win_s), t, x, tol)
    lhs = float(slice_v.density[win_s.index(y)])

    win_b = LatticeWindow((-half_width,) * d, (half_width + 1,) * d, 1)
    slice_x = transition_density(build_generator(model, win_b),
                                 (rho ** model.alpha) * t, x, tol)
    rhs = float(rho ** d) * float(slice_x.density[win_b.index(y)])

    denom = max(abs(lhs), abs(rhs), 1e-300)
    rel = abs(lhs - rhs) / denom
    return CheckReport("scaling_identity", bool(rel <= rel_tol), False,
                       {"lhs": lhs, "rhs": rhs, "relative_difference": rel,
                        "rho": rho, "t": t,
                        "boundary_loss_rescaled": 1.0 - slice_v.mass_retained,
                        "boundary_loss_base": 1.0 - slice_x.mass_retained})

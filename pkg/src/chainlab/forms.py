"""Dirichlet-form energies and functional-inequality verification.

Conventions fixed here once and used by every check:

* ``dirichlet_energy`` is the form value (1/2) * sum_{x,y} (f(y)-f(x))^2 C(x,y),
  i.e. each unordered pair counted once with weight C.
* Variance-vs-energy Poincare constants divide by ``dirichlet_energy``.
* The weighted Poincare inequality divides by the ordered double sum
  sum_B sum_B (f(x)-f(y))^2 (phi(x) ^ phi(y)) C(x,y), which is twice the
  unordered sum, matching the inequality's display.

Both choices only shift constants by a factor 2; all acceptance checks are
spread/consistency checks plus hand oracles computed under the same
convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from . import conductance as cd
from .errors import ConfigurationError, DomainError
from .lattice import Cube, LatticeWindow, make_set, _max_offset
from .reports import AssumptionReport

ALL_PAIRS_CAP = 3000
PAIR_COUNT_CAP = 40_000_000
DENSE_EIG_CAP = 2000
RAYLEIGH_TOL = 1e-10
RAYLEIGH_MAXIT = 10_000


@dataclass
class QuadraticForm:
    """Off-diagonal coefficients of a Dirichlet form on a window.

    ``rows[k] < cols[k]`` index one unordered pair with coefficient
    ``coeffs[k]``; the site mass is the window's (scale^-d).
    """

    window: LatticeWindow
    rows: np.ndarray
    cols: np.ndarray
    coeffs: np.ndarray

    @property
    def site_mass(self) -> float:
        return self.window.site_mass

    def laplacian(self) -> sp.csr_matrix:
        """Sparse L with f^T L f = sum_{i<j} C_ij (f_j - f_i)^2."""
        n = self.window.site_count
        i, j, c = self.rows, self.cols, self.coeffs
        data = np.concatenate([-c, -c, c, c])
        rows = np.concatenate([i, j, i, j])
        cols = np.concatenate([j, i, i, j])
        return sp.csr_matrix((data, (rows, cols)), shape=(n, n))

    def adjacency(self) -> sp.csr_matrix:
        n = self.window.site_count
        data = np.concatenate([self.coeffs, self.coeffs])
        rows = np.concatenate([self.rows, self.cols])
        cols = np.concatenate([self.cols, self.rows])
        return sp.csr_matrix((data, (rows, cols)), shape=(n, n))


def _lex_positive(z: np.ndarray) -> np.ndarray:
    """Mask of displacements whose first nonzero coordinate is positive."""
    m = np.zeros(len(z), dtype=bool)
    undecided = np.ones(len(z), dtype=bool)
    for a in range(z.shape[1]):
        col = z[:, a]
        m |= undecided & (col > 0)
        undecided &= col == 0
    return m


def _displacement_list(model: cd.ConductanceModel, window: LatticeWindow) -> np.ndarray:
    """Lex-positive displacements with positive rate fitting in the window."""
    shape = np.asarray(window.shape, dtype=np.int64)
    diameter = float(np.sqrt(((shape - 1).astype(float) ** 2).sum()))
    if model.kind == cd.STABLE_LIKE:
        m = shape - 1
        axes = [np.arange(-mi, mi + 1, dtype=np.int64) for mi in m]
        grid = np.meshgrid(*axes, indexing="ij")
        z = np.stack([g.ravel() for g in grid], axis=-1)
        z = z[_lex_positive(z)]
        return z
    z = cd.support_displacements(model, diameter)
    if len(z) == 0:
        return z
    keep = (np.abs(z) <= (shape - 1)).all(axis=1)
    z = z[keep]
    return z[_lex_positive(z)]


def _pairs_for_displacement(window: LatticeWindow, z: np.ndarray):
    """Flat index arrays (i, j=i+offset) of all in-window pairs at offset z."""
    shape = window.shape
    strides = np.ones(window.dim, dtype=np.int64)
    for a in range(window.dim - 2, -1, -1):
        strides[a] = strides[a + 1] * shape[a + 1]
    ranges = []
    for a in range(window.dim):
        lo = max(0, -int(z[a]))
        hi = shape[a] - max(0, int(z[a]))
        if hi <= lo:
            return None
        ranges.append(np.arange(lo, hi, dtype=np.int64) * strides[a])
    idx = ranges[0]
    for r in ranges[1:]:
        idx = np.add.outer(idx, r).ravel()
    return idx, idx + int(np.dot(z, strides))


def build_form(model: cd.ConductanceModel, window: LatticeWindow) -> QuadraticForm:
    """Enumerate every unordered in-window pair carrying positive rate."""
    n = window.site_count
    coords = window.coords
    if model.kind == cd.STABLE_LIKE and n <= ALL_PAIRS_CAP:
        i, j = np.triu_indices(n, k=1)
        rates = cd.pair_rates(model, coords[i], coords[j])
        keep = rates > 0
        return QuadraticForm(window, i[keep], j[keep], rates[keep])

    zs = _displacement_list(model, window)
    est_pairs = len(zs) * n
    if est_pairs > PAIR_COUNT_CAP:
        raise ConfigurationError(
            f"window of {n} sites yields ~{est_pairs} pairs, beyond the cap"
        )
    ii, jj, cc = [], [], []
    for z in zs:
        got = _pairs_for_displacement(window, z)
        if got is None:
            continue
        i, j = got
        if model.translation_invariant:
            rate = float(model.unit_rates(z[None, :])[0] * model.rate_scale)
            if rate <= 0:
                continue
            c = np.full(len(i), rate)
        else:
            c = cd.pair_rates(model, coords[i], coords[j])
        ii.append(i)
        jj.append(j)
        cc.append(c)
    if not ii:
        empty = np.zeros(0, dtype=np.int64)
        return QuadraticForm(window, empty, empty, np.zeros(0))
    i = np.concatenate(ii)
    j = np.concatenate(jj)
    c = np.concatenate(cc)
    keep = c > 0
    lo = np.minimum(i, j)[keep]
    hi = np.maximum(i, j)[keep]
    return QuadraticForm(window, lo, hi, c[keep])


# -- energies -----------------------------------------------------------------


def dirichlet_energy(form: QuadraticForm, f: np.ndarray) -> float:
    """(1/2) sum_{x,y} (f(y)-f(x))^2 C(x,y) over the window."""
    f = np.asarray(f, dtype=np.float64)
    if f.shape != (form.window.site_count,):
        raise ConfigurationError("function length does not match window")
    d = f[form.cols] - f[form.rows]
    return float(np.sum(form.coeffs * d * d))


def double_sum_energy(form: QuadraticForm, f: np.ndarray) -> float:
    """Ordered double sum: twice the Dirichlet energy."""
    return 2.0 * dirichlet_energy(form, f)


def nash_ratio(form: QuadraticForm, f: np.ndarray, alpha: float, d: int) -> float:
    """||f||_2^(2+2a/d) / (E(f,f) ||f||_1^(2a/d)); inf when the energy vanishes."""
    f = np.asarray(f, dtype=np.float64)
    mass = form.site_mass
    l1 = float(np.sum(np.abs(f)) * mass)
    l2sq = float(np.sum(f * f) * mass)
    if l2sq == 0.0:
        raise DomainError("nash_ratio of the zero function")
    energy = dirichlet_energy(form, f)
    if energy == 0.0:
        return math.inf
    return l2sq ** (1.0 + alpha / d) / (energy * l1 ** (2.0 * alpha / d))


def nash_two_term_constants(form: QuadraticForm, fs, s_grid, alpha: float, d: int):
    """Smallest shared (c4, c5) making the two-term bound hold on the grid.

    Reports K = max over (f, s) of ||f||_2^2 / (s^a E(f,f) + s^-d ||f||_1^2)
    as both constants, so the bound holds pointwise by construction; the
    interest is in K staying bounded as the ensemble and window grow.
    """
    mass = form.site_mass
    K = 0.0
    for f in fs:
        f = np.asarray(f, dtype=np.float64)
        l1 = float(np.sum(np.abs(f)) * mass)
        l2sq = float(np.sum(f * f) * mass)
        e = dirichlet_energy(form, f)
        for s in s_grid:
            denom = s ** alpha * e + s ** (-d) * l1 * l1
            if denom > 0:
                K = max(K, l2sq / denom)
    return K, K


# -- generalized Rayleigh maximization -----------------------------------------


def _helmert_basis(n: int) -> np.ndarray:
    """Orthonormal (n-1, n) basis of the complement of constants."""
    H = np.zeros((n - 1, n))
    for k in range(1, n):
        c = 1.0 / math.sqrt(k * (k + 1))
        H[k - 1, :k] = c
        H[k - 1, k] = -k * c
    return H


def _project_out_ones(x: np.ndarray) -> np.ndarray:
    return x - x.mean()

def _cg_solve(apply_A: Callable, b: np.ndarray, tol: float, maxit: int) -> np.ndarray:
    """CG on the complement of constants; A must be SPD there."""
    x = np.zeros_like(b)
    r = _project_out_ones(b.copy())
    p = r.copy()
    rs = float(r @ r)
    bnorm = math.sqrt(float(b @ b)) or 1.0
    for _ in range(maxit):
        if math.sqrt(rs) <= tol * bnorm:
            break
        Ap = _project_out_ones(apply_A(p))
        alpha = rs / float(p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        rs_new = float(r @ r)
        p = r + (rs_new / rs) * p
        rs = rs_new
    return x


def max_generalized_rayleigh(M, E, n: int, dense: Optional[bool] = None):
    """Largest x^T M x / x^T E x over x not constant.

    M, E are symmetric PSD (dense arrays, sparse matrices, or callables for
    the iterative path); E must be positive definite on the complement of
    constants.  Returns (value, argmax vector).
    """
    if n < 2:
        return 0.0, np.zeros(n)
    if dense is None:
        dense = n <= DENSE_EIG_CAP
    if dense:
        Md = M if isinstance(M, np.ndarray) else M.toarray()
        Ed = E if isinstance(E, np.ndarray) else E.toarray()
        H = _helmert_basis(n)
        A = H @ Md @ H.T
        B = H @ Ed @ H.T
        vals, vecs = scipy.linalg.eigh(A, B)
        f = H.T @ vecs[:, -1]
        return float(vals[-1]), f

    apply_M = M if callable(M) else (lambda v, M=M: M @ v)
    apply_E = E if callable(E) else (lambda v, E=E: E @ v)
    rng = np.random.Generator(np.random.Philox(key=np.array([0x5eed, n], dtype=np.uint64)))
    x = _project_out_ones(rng.standard_normal(n))
    x /= math.sqrt(float(x @ x))
    lam = 0.0
    for _ in range(RAYLEIGH_MAXIT):
        y = apply_M(x)
        x_new = _cg_solve(apply_E, y, tol=1e-12, maxit=4 * n)
        x_new = _project_out_ones(x_new)
        norm = math.sqrt(float(x_new @ x_new))
        if norm == 0.0:
            break
        x_new /= norm
        num = float(x_new @ apply_M(x_new))
        den = float(x_new @ apply_E(x_new))
        lam_new = num / den
        if abs(lam_new - lam) <= RAYLEIGH_TOL * max(abs(lam_new), 1e-300):
            return lam_new, x_new
        lam, x = lam_new, x_new
    return lam, x


# -- Poincare constants ---------------------------------------------------------


@dataclass
class PoincareResult:
    constant: float
    rayleigh: float
    extremal: Optional[np.ndarray]
    connected: bool
    side: float
    detail: dict = field(default_factory=dict)


def _cube_window(model: cd.ConductanceModel, center, physical_radius: float, scale: int) -> LatticeWindow:
    c = np.asarray(center, dtype=np.int64)
    m = _max_offset(physical_radius, scale)
    return LatticeWindow(tuple(c - m), tuple(c + m + 1), scale)


def best_poincare_constant(model: cd.ConductanceModel, center, r: float,
                           kappa5: float = 1.0) -> PoincareResult:
    """Smallest kappa_4 with sum_B (f - f_B)^2 <= kappa_4 r^a E_{k5 B}(f, f).

    The energy is the Dirichlet form over the enlarged cube; the maximizing
    f is returned as a witness.  A disconnected rate graph on the enlarged
    cube is reported, not raised.
    """
    if kappa5 < 1.0:
        raise DomainError("kappa5 must be >= 1")
    scale = model.scale
    big = _cube_window(model, center, kappa5 * r, scale)
    n = big.site_count
    form = build_form(model, big)
    B = make_set(big, Cube(tuple(np.asarray(center, dtype=np.int64)), r))
    nb = B.site_count

    ncomp, labels = connected_components(form.adjacency(), directed=False)
    if ncomp > 1:
        sizes = np.bincount(labels)
        return PoincareResult(math.inf, math.inf, None, False, 2 * r,
                              {"components": int(ncomp),
                               "witness_component": labels.tolist()})

    mask = B.mask.astype(np.float64)
    L = form.laplacian()
    if n <= DENSE_EIG_CAP:
        # centering form on B, extended by zero
        P = np.diag(mask)
        M = P - np.outer(mask, mask) / nb
        lam, f = max_generalized_rayleigh(M, L.toarray(), n)
    else:
        def apply_M(v):
            w = v * mask
            return mask * (v - w.sum() / nb)

        lam, f = max_generalized_rayleigh(apply_M, lambda v: L @ v, n, dense=False)
    # site mass rho^-d multiplies the variance side of the rescaled inequality
    constant = lam * big.site_mass / r ** model.alpha
    return PoincareResult(constant, lam, f, True, 2 * r,
                          {"sites": n, "B_sites": nb})


def check_A4_scaling(model: cd.ConductanceModel, sides, kappa5: float = 1.0,
                     bound_factor: float = 4.0, cap: Optional[float] = None,
                     rhos=(1,)) -> AssumptionReport:
    """Poincare constants across cube sizes (and optional rescalings)."""
    if not sides:
        raise DomainError("sides must be nonempty")
    rows = []
    witness = None
    for rho in rhos:
        scaled = cd.rescale(model, int(rho))
        for side in sides:
            r = side / 2.0
            res = best_poincare_constant(scaled, (0,) * model.dim, r, kappa5)
            if not res.connected:
                rep = AssumptionReport("A4", f"side {side}, rho {rho}")
                rep.passed = False
                rep.notes.append("rate graph disconnected on the enlarged cube")
                rep.witness = res.detail.get("witness_component")
                return rep
            rows.append({"side": side, "rho": int(rho), "kappa4": res.constant})
    vals = np.array([row["kappa4"] for row in rows])
    spread = float(vals.max() / vals.min()) if (vals > 0).all() else math.inf
    passed = bool(np.isfinite(vals).all()) and spread <= bound_factor
    if cap is not None:
        passed = passed and bool(vals.max() <= cap)
    if not passed:
        witness = rows[int(np.argmax(vals))]
    rep = AssumptionReport("A4", f"sides {list(sides)}, rhos {list(rhos)}",
                           {"kappa4_by_case": rows, "spread": spread,
                            "kappa4_max": float(vals.max())},
                           passed, witness)
    return rep


# -- the cut-paraboloid weight ---------------------------------------------------


@dataclass
class WeightProfile:
    """phi_R on the open cube B[x0, R]: c1 (R^2 - |x0 - x|_m^2)^+."""

    center: tuple
    radius: float
    scale: int
    window: LatticeWindow
    values: np.ndarray  # per window site, zero off the cube
    c1: float

    @property
    def mass_weights(self) -> np.ndarray:
        """phi_R * rho^-d, summing to one on the cube."""
        return self.values * self.window.site_mass


def weight_phi(window: LatticeWindow, center, R: float) -> WeightProfile:
    """Normalized so that sum_B phi_R = rho^d."""
    c = np.asarray(center, dtype=np.int64)
    rho = window.scale
    cube = make_set(window, Cube(tuple(c), R))
    if cube.clipped:
        raise DomainError("cube B[x0, R] must lie inside the window")
    if cube.site_count == 0:
        raise DomainError("cube B[x0, R] is empty")
    diff = np.abs(window.coords - c).max(axis=1).astype(np.float64) / rho
    raw = np.maximum(R * R - diff * diff, 0.0)
    raw[~cube.mask] = 0.0
    total = float(raw.sum())
    c1 = float(rho ** window.dim) / total
    return WeightProfile(tuple(int(v) for v in c), R, rho, window, c1 * raw, c1)


def weighted_poincare_on_grid(R: float, rho: int, tol: float = 1e-9) -> bool:
    """Whether R lies in the admissible grid U_n [n/rho + 1/(4 rho), n/rho + 1/rho]."""
    g = R * rho
    frac = g - math.floor(g)
    if abs(g - round(g)) < tol:
        return round(g) >= 1
    return frac >= 0.25 - tol


@dataclass
class WeightedPoincareResult:
    constant: float
    rayleigh: float
    extremal: Optional[np.ndarray]
    on_grid: bool
    connected: bool
    detail: dict = field(default_factory=dict)


def weighted_poincare_constant(model: cd.ConductanceModel, center, R: float,
                               rho: Optional[int] = None) -> WeightedPoincareResult:
    """Smallest c1 in the local weighted Poincare inequality on B[x0, R].

    LHS: sum_B (f - fbar)^2 phi_R rho^-d with fbar = sum f phi_R rho^-d.
    RHS: R^a sum_B sum_B (f(x)-f(y))^2 (phi(x) ^ phi(y)) C^rho(x, y),
    the ordered double sum.  Off-grid R only flags the result.
    """
    if rho is None:
        rho = model.scale
    scaled = cd.rescale(model, rho // model.scale) if rho != model.scale else model
    if scaled.scale != rho:
        raise ConfigurationError(f"cannot reach scale {rho} from model at scale {model.scale}")
    win = _cube_window(scaled, center, R, rho)
    n = win.site_count
    profile = weight_phi(win, center, R)
    w = profile.mass_weights  # sums to 1
    form = build_form(scaled, win)
    phi = profile.values
    pair_min = np.minimum(phi[form.rows], phi[form.cols])
    coeffs = 2.0 * form.coeffs * pair_min  # ordered double sum
    eff = QuadraticForm(win, form.rows, form.cols, coeffs)

    ncomp, _ = connected_components(eff.adjacency(), directed=False)
    on_grid = weighted_poincare_on_grid(R, rho)
    if ncomp > 1 and n > 1:
        return WeightedPoincareResult(math.inf, math.inf, None, on_grid, False,
                                      {"components": int(ncomp)})

    M = np.diag(w) - np.outer(w, w)
    E = eff.laplacian()
    lam, f = max_generalized_rayleigh(M, E, n, dense=n <= DENSE_EIG_CAP)
    return WeightedPoincareResult(lam / R ** scaled.alpha, lam, f, on_grid, True,
                                  {"sites": n, "rho": rho})

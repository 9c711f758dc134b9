"""Conductance models on Z^d: rate evaluation, assumption checks, rescaling.

Four model kinds are built in:

* ``stable_like``      - rate c(x,y) / |x-y|^(d+alpha) between any two sites;
* ``axis_stable_like`` - rate c(x,y) / |x-y|^(1+alpha) along coordinate axes,
                         zero elsewhere (dim >= 2);
* ``sparse_long_range``- unit total rate split between nearest neighbours in
                         coordinates 2..d and a sparse sequence of long jumps
                         +-b_n e^1 with rate a_n (dim >= 3, alpha = 2);
* ``table``            - an explicit symmetric displacement -> rate list.

All coordinates here are integer points of the base lattice.  A rescaled
model (see :func:`rescale`) keeps integer coordinates and multiplies every
rate by ``rho^(alpha-d)``; the geometric reinterpretation (site spacing
``1/rho``, site mass ``rho^-d``) is carried by the window's ``scale`` tag.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import ConfigurationError, DomainError
from .reports import AssumptionReport

STABLE_LIKE = "stable_like"
AXIS_STABLE_LIKE = "axis_stable_like"
SPARSE_LONG_RANGE = "sparse_long_range"
TABLE = "table"

KINDS = (STABLE_LIKE, AXIS_STABLE_LIKE, SPARSE_LONG_RANGE, TABLE)

# Largest displacement list a single enumeration may materialize.
ENUMERATION_CAP = 8_000_000


@dataclass(frozen=True)
class ConductanceModel:
    kind: str
    alpha: float
    dim: int
    c_lo: float = 1.0
    c_hi: float = 1.0
    weight_fn: Optional[Callable] = None
    a_seq: tuple = ()
    b_seq: tuple = ()
    table: tuple = ()  # sorted ((dz...), rate) pairs, symmetric closure
    rate_scale: float = 1.0
    scale: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown conductance kind {self.kind!r}")
        if not (0.0 < self.alpha <= 2.0):
            raise ConfigurationError(f"alpha must lie in (0, 2], got {self.alpha}")
        if self.dim < 1:
            raise ConfigurationError("dim must be a positive integer")
        if self.kind == AXIS_STABLE_LIKE and self.dim < 2:
            raise ConfigurationError("axis_stable_like requires dim >= 2")
        if self.kind == SPARSE_LONG_RANGE and self.dim < 3:
            raise ConfigurationError("sparse_long_range requires dim >= 3")
        if self.weight_fn is not None and not (0.0 < self.c_lo <= self.c_hi < math.inf):
            raise ConfigurationError("weight bounds must satisfy 0 < c_lo <= c_hi < inf")

    # -- structural helpers -------------------------------------------------

    @property
    def translation_invariant(self) -> bool:
        return self.weight_fn is None

    @property
    def epsilon(self) -> float:
        """Total long-jump rate 2*sum(a_n) of the sparse model."""
        return 2.0 * float(np.sum(self.a_seq)) if self.kind == SPARSE_LONG_RANGE else 0.0

    @property
    def finite_range(self) -> Optional[float]:
        """Largest jump length, or None for unbounded-range kinds."""
        if self.kind == SPARSE_LONG_RANGE:
            return float(max(self.b_seq)) if self.b_seq else 1.0
        if self.kind == TABLE:
            return max(
                (math.sqrt(sum(c * c for c in dz)) for dz, _ in self.table), default=0.0
            )
        return None

    def cache_key(self) -> tuple:
        return (
            self.kind,
            self.alpha,
            self.dim,
            self.c_lo,
            self.c_hi,
            id(self.weight_fn) if self.weight_fn else None,
            self.a_seq,
            self.b_seq,
            self.table,
            self.rate_scale,
            self.scale,
        )

    def describe(self) -> str:
        return f"{self.kind}(alpha={self.alpha}, d={self.dim}, scale={self.scale})"

    # -- rate evaluation ----------------------------------------------------

    def unit_rates(self, displacements: np.ndarray) -> np.ndarray:
        """Base rates (before weight and rate_scale) for an (m, d) array."""
        z = np.atleast_2d(np.asarray(displacements, dtype=np.int64))
        if z.shape[-1] != self.dim:
            raise ConfigurationError(
                f"displacements of dimension {z.shape[-1]} for a {self.dim}-d model"
            )
        if self.kind == STABLE_LIKE:
            r2 = (z.astype(np.float64) ** 2).sum(axis=1)
            with np.errstate(divide="ignore"):
                out = r2 ** (-(self.dim + self.alpha) / 2.0)
            out[r2 == 0] = 0.0
            return out
        if self.kind == AXIS_STABLE_LIKE:
            nz = np.count_nonzero(z, axis=1)
            k = np.abs(z).max(axis=1).astype(np.float64)
            out = np.zeros(len(z))
            on_axis = (nz == 1)
            out[on_axis] = k[on_axis] ** (-(1.0 + self.alpha))
            return out
        # explicit displacement lists
        lookup = self._table_lookup
        out = np.zeros(len(z))
        for i, row in enumerate(map(tuple, z.tolist())):
            out[i] = lookup.get(row, 0.0)
        return out

    @property
    def _table_lookup(self) -> dict:
        cached = _LOOKUP_CACHE.get(self.cache_key())
        if cached is None:
            if self.kind == SPARSE_LONG_RANGE:
                cached = {}
                for a, b in zip(self.a_seq, self.b_seq):
                    for s in (+1, -1):
                        dz = [0] * self.dim
                        dz[0] = s * int(b)
                        cached[tuple(dz)] = float(a)
                nn = (1.0 - self.epsilon) / (2.0 * (self.dim - 1))
                for j in range(1, self.dim):
                    for s in (+1, -1):
                        dz = [0] * self.dim
                        dz[j] = s
                        cached[tuple(dz)] = nn
            else:
                cached = {dz: rate for dz, rate in self.table}
            _LOOKUP_CACHE[self.cache_key()] = cached
        return cached


_LOOKUP_CACHE: dict = {}


# -- constructors -----------------------------------------------------------


def stable_like(alpha: float, dim: int, c_lo: float = 1.0, c_hi: float = 1.0,
                weight_fn: Optional[Callable] = None) -> ConductanceModel:
    return ConductanceModel(STABLE_LIKE, alpha, dim, c_lo, c_hi, weight_fn)


def axis_stable_like(alpha: float, dim: int, c_lo: float = 1.0, c_hi: float = 1.0,
                     weight_fn: Optional[Callable] = None) -> ConductanceModel:
    return ConductanceModel(AXIS_STABLE_LIKE, alpha, dim, c_lo, c_hi, weight_fn)


def default_sparse_sequences() -> tuple:
    """b_n = n^(n^n) capped at 2^62, a_n = 2^(-n-4) / b_n^2."""
    b = []
    n = 1
    while True:
        val = n ** (n ** n)
        if val > 2 ** 62:
            break
        b.append(val)
        n += 1
    a = tuple(2.0 ** (-(i + 1) - 4) / float(bn) ** 2 for i, bn in enumerate(b))
    return a, tuple(b)


def sparse_long_range(dim: int, a_seq=None, b_seq=None) -> ConductanceModel:
    if a_seq is None or b_seq is None:
        a_seq, b_seq = default_sparse_sequences()
    a_seq = tuple(float(a) for a in a_seq)
    b_seq = tuple(int(b) for b in b_seq)
    if len(a_seq) != len(b_seq) or not a_seq:
        raise ConfigurationError("a_seq and b_seq must be nonempty and equal length")
    if any(a <= 0 for a in a_seq) or any(b <= 0 for b in b_seq):
        raise ConfigurationError("sparse sequences must be positive")
    if sum(a_seq) > 0.125:
        raise ConfigurationError("sparse sequences must satisfy sum(a_n) <= 1/8")
    if not math.isfinite(sum(a * b * b for a, b in zip(a_seq, b_seq))):
        raise ConfigurationError("sum(a_n * b_n^2) must be finite")
    return ConductanceModel(SPARSE_LONG_RANGE, 2.0, dim, a_seq=a_seq, b_seq=b_seq)


def table_model(rows, dim: int, alpha: float = 2.0) -> ConductanceModel:
    """Build a Table model from (displacement, rate) rows; symmetric closure.

    Listing both z and -z with different rates is a configuration error;
    listing one of them implies the other.
    """
    rates: dict = {}
    for row in rows:
        dz, rate = tuple(int(c) for c in row[0]), float(row[1])
        if len(dz) != dim:
            raise ConfigurationError(f"table row {dz} does not match dim={dim}")
        if all(c == 0 for c in dz):
            raise ConfigurationError("table may not assign rate to the zero displacement")
        if rate < 0:
            raise ConfigurationError("table rates must be nonnegative")
        neg = tuple(-c for c in dz)
        for key in (dz, neg):
            if key in rates and rates[key] != rate:
                raise ConfigurationError(f"nonsymmetric table: {key} given conflicting rates")
        rates[dz] = rate
        rates[neg] = rate
    rates = {k: v for k, v in rates.items() if v > 0}
    return ConductanceModel(TABLE, alpha, dim, table=tuple(sorted(rates.items())))


def nearest_neighbor(dim: int, rate: float = 1.0) -> ConductanceModel:
    rows = []
    for j in range(dim):
        dz = [0] * dim
        dz[j] = 1
        rows.append((tuple(dz), rate))
    return table_model(rows, dim=dim, alpha=2.0)


# -- rate evaluation (public) -------------------------------------------------


def pair_rates(model: ConductanceModel, x, y) -> np.ndarray:
    """Rates C(x_i, y_i) for matched (m, d) point arrays, weights applied."""
    x = np.atleast_2d(np.asarray(x, dtype=np.int64))
    y = np.atleast_2d(np.asarray(y, dtype=np.int64))
    x, y = np.broadcast_arrays(x, y)
    base = model.unit_rates(y - x) * model.rate_scale
    if model.weight_fn is not None:
        base = base * np.asarray(model.weight_fn(x, y), dtype=np.float64)
    return base


def eval_conductance(model: ConductanceModel, x, y) -> float:
    """C(x, y) for a single pair of lattice points."""
    x = np.asarray(x, dtype=np.int64).reshape(-1)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if x.shape != (model.dim,) or y.shape != (model.dim,):
        raise ConfigurationError(
            f"points of dimension {x.size}/{y.size} for a {model.dim}-d model"
        )
    return float(pair_rates(model, x[None, :], y[None, :])[0])


def rates_from(model: ConductanceModel, x: np.ndarray, displacements: np.ndarray) -> np.ndarray:
    """Rates C(x, x+z) for an (m, d) displacement array, weights applied."""
    x = np.asarray(x, dtype=np.int64)[None, :]
    return pair_rates(model, x, x + np.atleast_2d(displacements))


def support_displacements(model: ConductanceModel, radius: float) -> np.ndarray:
    """All displacements z with 0 < |z| <= radius and positive base rate."""
    if radius < 1:
        return np.zeros((0, model.dim), dtype=np.int64)
    if model.kind == STABLE_LIKE:
        m = int(math.floor(radius))
        if (2 * m + 1) ** model.dim > ENUMERATION_CAP:
            raise ConfigurationError(
                f"enumerating a radius-{radius} ball in d={model.dim} exceeds the "
                f"{ENUMERATION_CAP} displacement cap"
            )
        axes = [np.arange(-m, m + 1, dtype=np.int64)] * model.dim
        grid = np.meshgrid(*axes, indexing="ij")
        z = np.stack([g.ravel() for g in grid], axis=-1)
        r2 = (z.astype(np.float64) ** 2).sum(axis=1)
        keep = (r2 > 0) & (r2 <= radius * radius)
        return z[keep]
    if model.kind == AXIS_STABLE_LIKE:
        m = int(math.floor(radius))
        ks = np.arange(1, m + 1, dtype=np.int64)
        blocks = []
        for j in range(model.dim):
            for s in (+1, -1):
                block = np.zeros((len(ks), model.dim), dtype=np.int64)
                block[:, j] = s * ks
                blocks.append(block)
        return np.concatenate(blocks) if blocks else np.zeros((0, model.dim), dtype=np.int64)
    rows = np.array([dz for dz, _ in sorted(model._table_lookup.items())], dtype=np.int64)
    if len(rows) == 0:
        return np.zeros((0, model.dim), dtype=np.int64)
    keep = (rows.astype(np.float64) ** 2).sum(axis=1) <= radius * radius
    return rows[keep]


# -- envelope and tail bounds -------------------------------------------------


def radial_power_tail(dim: int, exponent: float, radius: float) -> float:
    """Upper bound for sum over |z| > radius of |z|^(-exponent) on Z^d.

    Unit-cube comparison: each lattice point beyond the radius owns a unit
    cube on which the integrand, shifted by sqrt(d)/2, dominates the lattice
    value.  Requires exponent > dim and radius > sqrt(d).
    """
    if exponent <= dim:
        return math.inf
    if dim == 1:
        k0 = math.floor(radius) + 1
        return 2.0 * (k0 ** (-exponent) + k0 ** (1 - exponent) / (exponent - 1))
    L = radius - math.sqrt(dim)
    if L <= 0:
        # radius too small for the cube comparison: enumerate a thin shell
        # directly and recurse beyond it
        shell = math.ceil(math.sqrt(dim)) + 1
        z = _ball_displacements(dim, shell + radius)
        r = np.sqrt((z.astype(np.float64) ** 2).sum(axis=1))
        direct = float(np.sum(r[r > radius] ** (-exponent)))
        return direct + radial_power_tail(dim, exponent, shell + radius)
    surface = 2.0 * math.pi ** (dim / 2.0) / math.gamma(dim / 2.0)
    half = math.sqrt(dim) / 2.0
    total = 0.0
    for j in range(dim):
        p = exponent - j - 1
        total += math.comb(dim - 1, j) * half ** (dim - 1 - j) * L ** (-p) / p
    return surface * total


def _ball_displacements(dim: int, radius: float) -> np.ndarray:
    m = int(math.floor(radius))
    axes = [np.arange(-m, m + 1, dtype=np.int64)] * dim
    grid = np.meshgrid(*axes, indexing="ij")
    z = np.stack([g.ravel() for g in grid], axis=-1)
    r2 = (z.astype(np.float64) ** 2).sum(axis=1)
    return z[(r2 > 0) & (r2 <= radius * radius)]


def axis_power_tail(dim: int, exponent: float, radius: float) -> float:
    """Upper bound for the on-axis sum over |k| > radius of k^(-exponent)."""
    if exponent <= 1:
        return math.inf
    k0 = math.floor(radius) + 1
    return 2.0 * dim * (k0 ** (-exponent) + k0 ** (1 - exponent) / (exponent - 1))


@dataclass(frozen=True)
class EnvelopeFunction:
    """Radial profile dominating the rates, with an analytic tail bound."""

    phi: Callable[[float], float]
    tail: Callable[[float], float]  # >= sum over |z| > r of the envelope values
    max_range: float = math.inf
    kappa2: Optional[float] = None
    kappa3: Optional[float] = None


def envelope(model: ConductanceModel) -> EnvelopeFunction:
    cs = model.c_hi * model.rate_scale
    if model.kind == STABLE_LIKE:
        p = model.dim + model.alpha
        return EnvelopeFunction(
            phi=lambda s, cs=cs, p=p: cs * s ** (-p) if s > 0 else 0.0,
            tail=lambda r, cs=cs, p=p: cs * radial_power_tail(model.dim, p, r),
        )
    if model.kind == AXIS_STABLE_LIKE:
        p = 1.0 + model.alpha
        return EnvelopeFunction(
            phi=lambda s, cs=cs, p=p: cs * s ** (-p) if s > 0 else 0.0,
            tail=lambda r, cs=cs, p=p: cs * axis_power_tail(model.dim, p, r),
        )
    # explicit lists: empirical radial maximum, exact finite tail
    lookup = model._table_lookup
    radii = {}
    for dz, rate in lookup.items():
        s = math.sqrt(sum(c * c for c in dz))
        radii[s] = max(radii.get(s, 0.0), rate * model.rate_scale)
    by_radius = sorted(radii.items())

    def phi(s: float) -> float:
        best = 0.0
        for rad, val in by_radius:
            if abs(rad - s) < 1e-9:
                best = max(best, val)
        return best

    def tail(r: float) -> float:
        total = 0.0
        for dz, rate in lookup.items():
            if math.sqrt(sum(c * c for c in dz)) > r:
                total += rate * model.rate_scale
        return total

    return EnvelopeFunction(phi=phi, tail=tail, max_range=model.finite_range or 0.0)


# -- vertex rates -------------------------------------------------------------


def vertex_rate(model: ConductanceModel, x, radius: float) -> tuple:
    """(sum of rates within radius of x, envelope bound on the remainder)."""
    if radius < 1:
        raise DomainError("radius must be >= 1")
    x = np.asarray(x, dtype=np.int64).reshape(-1)
    z = support_displacements(model, radius)
    value = float(np.sum(rates_from(model, x, z))) if len(z) else 0.0
    return value, envelope(model).tail(radius)


def vertex_rate_total(model: ConductanceModel, x, radius: float) -> float:
    """Upper representative of v_x: enumerated mass plus envelope tail."""
    value, tail = vertex_rate(model, x, radius)
    return value + tail


# -- assumption checks --------------------------------------------------------


def check_A1(model: ConductanceModel, n_pairs: int = 10_000, box: int = 32,
             seed: int = 0) -> AssumptionReport:
    """Symmetry and vanishing diagonal on random pairs."""
    rng = np.random.Generator(np.random.Philox(key=np.array([seed, 0xA1], dtype=np.uint64)))
    x = rng.integers(-box, box + 1, size=(n_pairs, model.dim))
    y = rng.integers(-box, box + 1, size=(n_pairs, model.dim))
    fwd = pair_rates(model, x, y)
    bwd = pair_rates(model, y, x)
    max_gap = float(np.max(np.abs(fwd - bwd), initial=0.0))
    diag = float(np.max(pair_rates(model, x, x), initial=0.0))
    passed = max_gap == 0.0 and diag == 0.0 and float(np.min(fwd)) >= 0.0
    return AssumptionReport("A1", f"random pairs in [-{box},{box}]^{model.dim}",
                            {"max_symmetry_gap": max_gap, "max_diagonal": diag},
                            passed)


def check_A2(model: ConductanceModel, sites=None, radius: float = 64.0) -> AssumptionReport:
    """Lower bound kappa_1 on the vertex rates over sampled sites."""
    if sites is None:
        sites = [np.zeros(model.dim, dtype=np.int64)]
    values = [vertex_rate(model, s, radius)[0] for s in sites]
    kappa1 = float(min(values))
    return AssumptionReport("A2", f"{len(list(sites))} sites, radius {radius}",
                            {"kappa1_lower": kappa1}, kappa1 > 0.0)


def _a3_sums(model: ConductanceModel, radii, cutoff: Optional[int]):
    """S1(r) = sum_{|z|>=r} env(z), S2(r) = sum_{|z|<r} |z|^2 env(z)."""
    env = envelope(model)
    radii = np.asarray(sorted(radii), dtype=np.float64)
    if model.kind == STABLE_LIKE:
        if cutoff is None:
            # largest box within ~4e6 enumerated points
            cutoff = int(max(4.0 * radii.max() + 8,
                             math.floor(4_000_000 ** (1.0 / model.dim)) // 2))
        z = _ball_displacements(model.dim, cutoff)
        vals = model.unit_rates(z) * model.c_hi * model.rate_scale
        r = np.sqrt((z.astype(np.float64) ** 2).sum(axis=1))
        tail = env.tail(float(cutoff))
        s1 = np.array([float(vals[r >= rr].sum()) + tail for rr in radii])
        s2 = np.array([float((vals * r * r)[r < rr].sum()) for rr in radii])
        return s1, s2, tail
    if model.kind == AXIS_STABLE_LIKE:
        if cutoff is None:
            cutoff = int(max(1_000_000, 4 * radii.max()))
        k = np.arange(1, cutoff + 1, dtype=np.float64)
        vals = 2.0 * model.dim * model.c_hi * model.rate_scale * k ** (-(1.0 + model.alpha))
        tail = env.tail(float(cutoff))
        s1 = np.array([float(vals[k >= rr].sum()) + tail for rr in radii])
        s2 = np.array([float((vals * k * k)[k < rr].sum()) for rr in radii])
        return s1, s2, tail
    # explicit lists: exact
    lookup = model._table_lookup
    zs = np.array([dz for dz in lookup], dtype=np.int64)
    vals = np.array([lookup[tuple(dz)] for dz in zs.tolist()]) * model.rate_scale
    r = np.sqrt((zs.astype(np.float64) ** 2).sum(axis=1))
    s1 = np.array([float(vals[r >= rr].sum()) for rr in radii])
    s2 = np.array([float((vals * r * r)[r < rr].sum()) for rr in radii])
    return s1, s2, 0.0


def check_A3(model: ConductanceModel, radii, bound_factor: float = 4.0,
             cutoff: Optional[int] = None) -> AssumptionReport:
    """Measure the tail-sum constants kappa_2, kappa_3 across radii.

    Passes when both constants are finite and their spread across the given
    radii stays within ``bound_factor``.  A non-summable envelope is
    reported as a violation, not raised.
    """
    radii = sorted(float(r) for r in radii)
    if not radii or radii[0] < 1:
        raise DomainError("radii must be nonempty, each >= 1")
    s1, s2, tail = _a3_sums(model, radii, cutoff)
    alpha = model.alpha
    k2 = s1 * np.asarray(radii) ** alpha
    k3 = s2 * np.asarray(radii) ** (alpha - 2.0)
    report = AssumptionReport("A3", f"radii {radii}")
    if not np.isfinite(s1).all():
        report.constants = {"divergent": True}
        report.notes.append("envelope tail sum diverges")
        report.passed = False
        return report

    def spread(arr):
        nz = arr[arr > 0]
        return float(nz.max() / nz.min()) if len(nz) else 1.0

    report.constants = {
        "kappa2": float(k2.max()),
        "kappa3": float(k3.max()),
        "kappa2_by_radius": k2.tolist(),
        "kappa3_by_radius": k3.tolist(),
        "kappa2_spread": spread(k2),
        "kappa3_spread": spread(k3),
        "enumeration_tail": tail,
    }
    report.passed = spread(k2) <= bound_factor and spread(k3) <= bound_factor
    if not report.passed:
        worst = "kappa2" if spread(k2) >= spread(k3) else "kappa3"
        report.witness = {"ratio": worst, "radius": radii[int(np.argmax(k2 if worst == "kappa2" else k3))]}
    return report


# -- rescaling ----------------------------------------------------------------


def rescale(model: ConductanceModel, rho: int) -> ConductanceModel:
    """Model of the chain sped by rho^alpha on the lattice shrunk by rho.

    Integer coordinates are reused; each rate picks up rho^(alpha-d) and the
    site mass rho^(-d) is tracked through the ``scale`` tag on windows and
    on the model itself.
    """
    if rho < 1 or int(rho) != rho:
        raise DomainError("rho must be a positive integer")
    rho = int(rho)
    if rho == 1:
        return model
    return replace(
        model,
        rate_scale=model.rate_scale * float(rho) ** (model.alpha - model.dim),
        scale=model.scale * rho,
    )

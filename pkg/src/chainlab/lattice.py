"""Finite windows of the integer lattice and geometric set constructors.

A window at scale ``rho`` represents a box of the rescaled lattice
``rho^{-1} Z^d``: sites keep integer coordinates ``u`` and stand for the
physical points ``u / rho``.  Each site carries mass ``rho^{-d}`` (the
counting measure at scale 1).  All radii passed to set constructors are in
physical units; membership uses strict inequalities (open balls and open
cubes).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence, Union

import numpy as np

from .errors import ConfigurationError, DomainError

MAX_SITES = 50_000_000


def _as_point(x, dim: int) -> np.ndarray:
    p = np.atleast_1d(np.asarray(x, dtype=np.int64))
    if p.shape != (dim,):
        raise ConfigurationError(f"point {x!r} does not have dimension {dim}")
    return p


@dataclass(frozen=True)
class LatticeWindow:
    """Axis-aligned box ``[lower, upper)`` of Z^d with a bijective index map."""

    lower: tuple
    upper: tuple
    scale: int = 1

    def __post_init__(self):
        lo = tuple(int(v) for v in self.lower)
        up = tuple(int(v) for v in self.upper)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", up)
        if len(lo) != len(up) or not lo:
            raise ConfigurationError("lower/upper corners must have equal positive length")
        if any(u <= l for l, u in zip(lo, up)):
            raise ConfigurationError(f"window corners must satisfy lower < upper, got {lo} / {up}")
        if self.scale < 1 or int(self.scale) != self.scale:
            raise ConfigurationError(f"scale must be a positive integer, got {self.scale}")
        n = 1
        for l, u in zip(lo, up):
            n *= u - l
            if n > MAX_SITES:
                raise ConfigurationError(f"window of {lo}..{up} exceeds the {MAX_SITES} site cap")

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def shape(self) -> tuple:
        return tuple(u - l for l, u in zip(self.lower, self.upper))

    @property
    def site_count(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def site_mass(self) -> float:
        """Mass of one site: rho^{-d}."""
        return float(self.scale) ** (-self.dim)

    @property
    def total_mass(self) -> float:
        return self.site_count * self.site_mass

    def index(self, points) -> np.ndarray:
        """Row-major flat index of lattice points (shape (..., d))."""
        pts = np.asarray(points, dtype=np.int64)
        squeeze = pts.ndim == 1
        pts = np.atleast_2d(pts)
        if pts.shape[-1] != self.dim:
            raise ConfigurationError(f"points of dimension {pts.shape[-1]} in a {self.dim}-d window")
        if not self.contains(pts).all():
            raise DomainError("point outside window")
        rel = pts - np.asarray(self.lower, dtype=np.int64)
        idx = np.ravel_multi_index(tuple(rel.T), self.shape)
        return int(idx[0]) if squeeze else idx

    def point(self, indices) -> np.ndarray:
        """Inverse of :meth:`index`."""
        idx = np.asarray(indices)
        rel = np.stack(np.unravel_index(idx, self.shape), axis=-1)
        return rel + np.asarray(self.lower, dtype=np.int64)

    def contains(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.int64))
        lo = np.asarray(self.lower, dtype=np.int64)
        up = np.asarray(self.upper, dtype=np.int64)
        return ((pts >= lo) & (pts < up)).all(axis=-1)

    @cached_property
    def coords(self) -> np.ndarray:
        """All sites as an (n, d) int array in index order."""
        axes = [np.arange(l, u, dtype=np.int64) for l, u in zip(self.lower, self.upper)]
        grid = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in grid], axis=-1)

    @staticmethod
    def centered(radius: Union[int, Sequence[int]], dim: int, scale: int = 1) -> "LatticeWindow":
        """Symmetric box {-radius, ..., radius}^d."""
        r = np.broadcast_to(np.asarray(radius, dtype=np.int64), (dim,))
        return LatticeWindow(tuple(-r), tuple(r + 1), scale)


@dataclass(frozen=True)
class Ball:
    """Open Euclidean ball {y : |y - center| < r}, radius in physical units."""

    center: tuple
    radius: float


@dataclass(frozen=True)
class Cube:
    """Open cube {y : |y - center|_m < r}, i.e. side length 2r, physical units."""

    center: tuple
    radius: float


@dataclass(frozen=True)
class Explicit:
    points: tuple


Descriptor = Union[Ball, Cube, Explicit]


@dataclass(frozen=True)
class LatticeSet:
    window: LatticeWindow
    mask: np.ndarray
    descriptor: Descriptor
    clipped: bool = False

    @property
    def site_count(self) -> int:
        return int(self.mask.sum())

    @property
    def measure(self) -> float:
        """mu(A) at the window's scale."""
        return self.site_count * self.window.site_mass

    def indices(self) -> np.ndarray:
        return np.nonzero(self.mask)[0]

    def points(self) -> np.ndarray:
        return self.window.coords[self.mask]

    def union(self, other: "LatticeSet") -> "LatticeSet":
        self._check_same_window(other)
        return LatticeSet(self.window, self.mask | other.mask, Explicit(()), self.clipped or other.clipped)

    def intersection(self, other: "LatticeSet") -> "LatticeSet":
        self._check_same_window(other)
        return LatticeSet(self.window, self.mask & other.mask, Explicit(()), False)

    def _check_same_window(self, other: "LatticeSet") -> None:
        if self.window is not other.window and self.window != other.window:
            raise ConfigurationError("set operations require a shared window")


def _max_offset(physical_radius: float, scale: int) -> int:
    """Largest integer coordinate offset strictly inside radius*scale."""
    s = physical_radius * scale
    m = math.ceil(s) - 1 if float(s).is_integer() else math.floor(s)
    return max(int(m), 0)


def make_window(lower, upper, scale: int = 1) -> LatticeWindow:
    return LatticeWindow(tuple(lower), tuple(upper), scale)


def make_set(window: LatticeWindow, descriptor: Descriptor) -> LatticeSet:
    """Materialize a ball/cube/explicit set on a window, clipping if needed."""
    if isinstance(descriptor, Explicit):
        mask = np.zeros(window.site_count, dtype=bool)
        pts = np.atleast_2d(np.asarray(descriptor.points, dtype=np.int64))
        inside = window.contains(pts)
        if inside.any():
            mask[window.index(pts[inside])] = True
        return LatticeSet(window, mask, descriptor, clipped=not inside.all())

    center = _as_point(descriptor.center, window.dim)
    if not window.contains(center[None, :])[0]:
        raise DomainError(f"descriptor center {tuple(center)} outside window")
    if descriptor.radius <= 0:
        raise DomainError("set radius must be positive")

    diff = window.coords - center
    if isinstance(descriptor, Ball):
        lhs = np.sqrt((diff.astype(np.float64) ** 2).sum(axis=1))
    else:
        lhs = np.abs(diff).max(axis=1).astype(np.float64)
    mask = lhs < descriptor.radius * window.scale

    m = _max_offset(descriptor.radius, window.scale)
    lo = np.asarray(window.lower, dtype=np.int64)
    up = np.asarray(window.upper, dtype=np.int64)
    clipped = bool(((center - m) < lo).any() or ((center + m) >= up).any())
    return LatticeSet(window, mask, descriptor, clipped=clipped)

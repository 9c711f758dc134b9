"""Counter-based uniform streams for reproducible Monte Carlo.

The quadruple of uniforms consumed by path ``i`` at step ``k`` under seed
``s`` is a pure function of ``(s, k, i)``: it is Philox block ``i`` of the
stream keyed ``(s, k)``.  Batch engines draw a contiguous range of paths in
one call by setting the counter, so results are bit-identical however the
paths are sharded across threads or runs.
"""

from __future__ import annotations

import numpy as np

BLOCK = 4  # uniforms per (path, step): hold, event, alias row, alias accept


def _key(seed: int, step: int) -> np.ndarray:
    return np.array([np.uint64(seed & 0xFFFFFFFFFFFFFFFF),
                     np.uint64(step & 0xFFFFFFFFFFFFFFFF)], dtype=np.uint64)


def step_uniforms(seed: int, step: int, lo: int, hi: int) -> np.ndarray:
    """Uniform block for paths lo..hi-1 at one step: shape (hi-lo, BLOCK)."""
    bg = np.random.Philox(counter=np.array([lo, 0, 0, 0], dtype=np.uint64),
                          key=_key(seed, step))
    return np.random.Generator(bg).random(BLOCK * (hi - lo)).reshape(hi - lo, BLOCK)


def path_step_uniforms(seed: int, step: int, path_index: int) -> np.ndarray:
    """The (BLOCK,) quadruple for one path; agrees with step_uniforms rows."""
    return step_uniforms(seed, step, path_index, path_index + 1)[0]


def derive_seed(seed: int, label: str) -> int:
    """Stable 64-bit sub-seed for a named purpose."""
    h = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
    for ch in label.encode("utf-8"):
        h = np.uint64((int(h) * 1099511628211 + ch) & 0xFFFFFFFFFFFFFFFF)
    return int(h)

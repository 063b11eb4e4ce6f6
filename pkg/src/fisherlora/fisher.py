"""Kronecker-factored Fisher statistics and Fisher Energy evaluation.

``vec`` is column-major throughout, which makes
``vec(u vᵀ) = v ⊗ u`` and pairs with ``S_X ⊗ S_Y`` (input factor first).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .dense import ShapeError, as_matrix, as_vector, symmetrize
from .micrograd import LayerTap

UNIT_TOL = 1e-9
FULL_FISHER_MAX_PARAMS = 256


@dataclass(frozen=True)
class FisherFactors:
    """Running sums of input and output-gradient second moments for one layer.

    ``sum_x`` and ``sum_y`` hold the per-tap normalized outer products; the
    means are only formed by :func:`finalize`.
    """

    layer_id: int
    sum_x: np.ndarray
    sum_y: np.ndarray
    batches_seen: int = 0
    columns_seen: int = 0
    alg1_literal: bool = False

    @classmethod
    def zeros(cls, layer_id: int, n: int, m: int, alg1_literal: bool = False) -> "FisherFactors":
        return cls(layer_id, np.zeros((n, n)), np.zeros((m, m)), 0, 0, alg1_literal)

    @property
    def n(self) -> int:
        return self.sum_x.shape[0]

    @property
    def m(self) -> int:
        return self.sum_y.shape[0]


def accumulate(factors: FisherFactors, tap: LayerTap) -> FisherFactors:
    x, g = tap.X, tap.G
    if x.shape[0] != factors.n or g.shape[0] != factors.m:
        raise ShapeError(
            f"tap shapes X {x.shape}, G {g.shape} do not match factors (n={factors.n}, m={factors.m})"
        )
    l = x.shape[1]
    if factors.alg1_literal:
        cx, cy = x.shape[0], g.shape[0]
    else:
        cx = cy = l
    return replace(
        factors,
        sum_x=factors.sum_x + (x @ x.T) / cx,
        sum_y=factors.sum_y + (g @ g.T) / cy,
        batches_seen=factors.batches_seen + 1,
        columns_seen=factors.columns_seen + l,
    )


def accumulate_all(factors: FisherFactors, taps: Iterable[LayerTap]) -> FisherFactors:
    for tap in taps:
        factors = accumulate(factors, tap)
    return factors


def merge(shards: Sequence[FisherFactors]) -> FisherFactors:
    """Combine per-worker accumulators by index-ordered pairwise addition."""
    if not shards:
        raise ValueError("nothing to merge")
    level = list(shards)
    while len(level) > 1:
        nxt = []
        for i in range(0, len(level) - 1, 2):
            a, b = level[i], level[i + 1]
            if a.sum_x.shape != b.sum_x.shape or a.sum_y.shape != b.sum_y.shape:
                raise ShapeError("cannot merge factors of different shapes")
            nxt.append(replace(
                a,
                sum_x=a.sum_x + b.sum_x,
                sum_y=a.sum_y + b.sum_y,
                batches_seen=a.batches_seen + b.batches_seen,
                columns_seen=a.columns_seen + b.columns_seen,
            ))
        if len(level) % 2:
            nxt.append(level[-1])
        level = nxt
    return level[0]


def finalize(factors: FisherFactors) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(S_X, S_Y)``: accumulated sums divided by the batch count."""
    if factors.batches_seen < 1:
        raise ValueError(f"layer {factors.layer_id}: no batches accumulated")
    t = factors.batches_seen
    return symmetrize(factors.sum_x / t), symmetrize(factors.sum_y / t)


@dataclass(frozen=True)
class FullFisher:
    layer_id: int
    S_W: np.ndarray  # (mn) x (mn), indexed by column-major vec of the m x n gradient
    sample_count: int


def full_fisher(taps: Sequence[LayerTap]) -> FullFisher:
    """Dense Fisher ``E[vec(g xᵀ) vec(g xᵀ)ᵀ]`` over individual sample columns."""
    if not taps:
        raise ValueError("need at least one tap")
    n, m = taps[0].X.shape[0], taps[0].G.shape[0]
    if m * n > FULL_FISHER_MAX_PARAMS:
        raise ShapeError(f"full Fisher limited to m*n <= {FULL_FISHER_MAX_PARAMS}, got {m * n}")
    total = np.zeros((m * n, m * n))
    count = 0
    for tap in taps:
        if tap.X.shape[0] != n or tap.G.shape[0] != m:
            raise ShapeError("taps disagree on layer shape")
        # column j of the per-sample gradient vec(g_j x_jᵀ) is x_j ⊗ g_j
        vecs = (tap.X[:, None, :] * tap.G[None, :, :]).reshape(n * m, -1)
        total += vecs @ vecs.T
        count += tap.X.shape[1]
    return FullFisher(taps[0].layer_id, symmetrize(total / count), count)


def _unit(x, name: str) -> np.ndarray:
    x = as_vector(x, name)
    norm = float(np.linalg.norm(x))
    if abs(norm - 1.0) > UNIT_TOL:
        raise ValueError(f"{name} must have unit norm, got {norm:.12g}")
    return x


def fisher_energy_exact(full, u, v) -> float:
    """``vec(u vᵀ)ᵀ S_W vec(u vᵀ)`` against a dense Fisher."""
    s_w = full.S_W if isinstance(full, FullFisher) else as_matrix(full, "S_W")
    u = _unit(u, "u")
    v = _unit(v, "v")
    z = np.kron(v, u)
    if s_w.shape != (z.size, z.size):
        raise ShapeError(f"S_W shape {s_w.shape} does not match m*n={z.size}")
    return float(z @ s_w @ z)


def fisher_energy_factored(s_x, s_y, u, v) -> float:
    """``(vᵀ S_X v)(uᵀ S_Y u)``."""
    u = _unit(u, "u")
    v = _unit(v, "v")
    if s_x.shape != (v.size, v.size) or s_y.shape != (u.size, u.size):
        raise ShapeError("factor shapes do not match direction lengths")
    return float(v @ s_x @ v) * float(u @ s_y @ u)


def kfac_relative_error(full: FullFisher, s_x, s_y) -> float:
    """Relative Frobenius error of ``S_X ⊗ S_Y`` against the dense Fisher."""
    approx = np.kron(s_x, s_y)
    denom = np.linalg.norm(full.S_W)
    return float(np.linalg.norm(full.S_W - approx) / denom) if denom > 0 else 0.0

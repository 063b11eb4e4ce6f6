"""Candidate direction bases, per-direction Fisher Energies and selection."""

from __future__ import annotations

import enum
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dense import SvdResult, ShapeError, as_matrix, gram, normalize_columns, svd, topk_min


class Criterion(str, enum.Enum):
    MIN = "min-energy"
    MAX = "max-energy"
    RANDOM = "random"


class Scaling(str, enum.Enum):
    FISHER = "fisher"
    SVD_SIGMA = "svd-sigma"


class BasisKind(str, enum.Enum):
    SURROGATE = "surrogate"
    EXACT_SVD = "exact-svd"


@dataclass(frozen=True)
class SelectionStrategy:
    criterion: Criterion = Criterion.MIN
    scaling: Scaling = Scaling.FISHER
    basis: BasisKind = BasisKind.SURROGATE
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "criterion", Criterion(self.criterion))
        object.__setattr__(self, "scaling", Scaling(self.scaling))
        object.__setattr__(self, "basis", BasisKind(self.basis))
        if self.scaling is Scaling.SVD_SIGMA and self.basis is not BasisKind.EXACT_SVD:
            raise ValueError("svd-sigma scaling needs the exact-svd basis")

    @property
    def label(self) -> str:
        letter = {Criterion.MAX: "P", Criterion.RANDOM: "R", Criterion.MIN: "M"}[self.criterion]
        return f"{letter}-{self.scaling.value}"


@dataclass(frozen=True)
class SurrogateBasis:
    """Candidate pairs ``(U_hat[:, j], V_hat[:, j])``.

    For the exact-SVD basis ``sigma`` carries the singular values and the
    candidate count is ``min(m, n)``; for the surrogate basis it is ``n``.
    """

    V_hat: np.ndarray
    U_hat: np.ndarray
    dead_mask: np.ndarray
    sigma: np.ndarray | None = None

    @property
    def candidate_count(self) -> int:
        return self.V_hat.shape[1]

    @property
    def live_count(self) -> int:
        return int(np.sum(~self.dead_mask))


def surrogate_basis(w0) -> SurrogateBasis:
    w0 = as_matrix(w0, "w0")
    v_hat, dead_v = normalize_columns(gram(w0))
    u_hat, dead_u = normalize_columns(w0 @ v_hat)
    return SurrogateBasis(V_hat=v_hat, U_hat=u_hat, dead_mask=dead_v | dead_u)


def exact_svd_basis(w0) -> SvdResult:
    return svd(w0)


def svd_candidates(result: SvdResult) -> SurrogateBasis:
    h = len(result.sigma)
    return SurrogateBasis(
        V_hat=result.V[:, :h],
        U_hat=result.U[:, :h],
        dead_mask=np.zeros(h, dtype=bool),
        sigma=result.sigma.copy(),
    )


def build_basis(w0, kind: BasisKind | str) -> SurrogateBasis:
    if BasisKind(kind) is BasisKind.SURROGATE:
        return surrogate_basis(w0)
    return svd_candidates(exact_svd_basis(w0))


@dataclass(frozen=True)
class EnergySpectrum:
    energies: np.ndarray  # dead entries hold +inf
    dead_mask: np.ndarray

    @property
    def live_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.dead_mask)

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("index,energy,dead\n")
        for j, (e, d) in enumerate(zip(self.energies, self.dead_mask)):
            out.write(f"{j},{format_float(e)},{int(bool(d))}\n")
        return out.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "EnergySpectrum":
        lines = text.strip("\n").split("\n")
        if lines[0] != "index,energy,dead":
            raise ValueError(f"unexpected energies header {lines[0]!r}")
        energies, dead = [], []
        for j, line in enumerate(lines[1:]):
            idx, e, d = line.split(",")
            if int(idx) != j:
                raise ValueError(f"row {j} has index {idx}")
            energies.append(float(e))
            dead.append(d == "1")
        return cls(np.array(energies), np.array(dead, dtype=bool))


def format_float(x: float) -> str:
    return format(float(x), ".17g")


def project_energies(basis, s_x, s_y) -> EnergySpectrum:
    """Per-candidate energy ``(v̂ᵀ S_X v̂)(ûᵀ S_Y û)``.

    Only the diagonals of the projected factors are formed.
    """
    if isinstance(basis, SvdResult):
        basis = svd_candidates(basis)
    s_x = as_matrix(s_x, "S_X")
    s_y = as_matrix(s_y, "S_Y")
    v, u = basis.V_hat, basis.U_hat
    if s_x.shape != (v.shape[0], v.shape[0]) or s_y.shape != (u.shape[0], u.shape[0]):
        raise ShapeError(
            f"factor shapes S_X {s_x.shape}, S_Y {s_y.shape} do not fit basis "
            f"V {v.shape}, U {u.shape}"
        )
    px = np.einsum("ij,ij->j", v, s_x @ v)
    py = np.einsum("ij,ij->j", u, s_y @ u)
    energies = px * py
    energies = np.where(basis.dead_mask, np.inf, energies)
    return EnergySpectrum(energies=energies, dead_mask=basis.dead_mask.copy())


class SelectionError(ValueError):
    pass


TIE_DECIMALS = 12


def _rank_key(vals: np.ndarray) -> np.ndarray:
    """Energies relative to the largest, rounded so rounding noise ties by index."""
    scale = np.max(np.abs(vals))
    if scale == 0.0:
        return np.zeros_like(vals)
    return np.round(vals / scale, TIE_DECIMALS)


def select(spectrum: EnergySpectrum, r: int, strategy: SelectionStrategy) -> np.ndarray:
    """Pick ``r`` live candidates; the result is sorted by index."""
    live = spectrum.live_indices
    if r < 1 or r > len(live):
        raise SelectionError(f"cannot select r={r} directions: {len(live)} live candidates")
    vals = _rank_key(spectrum.energies[live])
    if strategy.criterion is Criterion.MIN:
        chosen = live[topk_min(vals, r)]
    elif strategy.criterion is Criterion.MAX:
        chosen = live[topk_min(-vals, r)]
    else:
        rng = np.random.default_rng(strategy.rng_seed)
        chosen = rng.choice(live, size=r, replace=False)
    return np.sort(chosen)


def group_energy(spectrum: EnergySpectrum, indices: Sequence[int], reduce: str = "sum") -> float:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("empty group")
    if np.any(idx < 0) or np.any(idx >= len(spectrum.energies)):
        raise IndexError("group index out of range")
    if np.any(spectrum.dead_mask[idx]):
        raise SelectionError(f"group contains dead candidates {idx[spectrum.dead_mask[idx]].tolist()}")
    total = float(np.sum(spectrum.energies[idx]))
    if reduce == "sum":
        return total
    if reduce == "mean":
        return total / idx.size
    raise ValueError(f"unknown reduction {reduce!r}")

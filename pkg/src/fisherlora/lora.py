"""LoRA factor construction, residual decomposition and curvature probes."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .dense import SvdResult, ShapeError, as_matrix, as_vector
from .fisher import fisher_energy_factored
from .micrograd import Batch, LinearLayer, Model, backward, forward, loss_value

UNIT_TOL = 1e-9


@dataclass(frozen=True)
class LoraInit:
    layer_id: int
    indices: np.ndarray
    sigma_sel: np.ndarray
    A: np.ndarray  # r x n
    B: np.ndarray  # m x r
    alpha: float
    scale: float
    W_res: np.ndarray | None = None

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    def delta(self) -> np.ndarray:
        return self.scale * (self.B @ self.A)

    def recompose(self) -> np.ndarray:
        if self.W_res is None:
            raise ValueError("residual not computed yet; call decompose first")
        return self.W_res + self.delta()


def lora_scale(alpha: float, r: int, raw_alpha: bool = False) -> float:
    return float(alpha) if raw_alpha else float(alpha) / r


def build_factors(U_sel, V_sel, sigma_sel, alpha: float, *, raw_alpha: bool = False,
                  layer_id: int = 0, indices=None) -> LoraInit:
    """``A = sqrt(Σ) V_selᵀ`` and ``B = U_sel sqrt(Σ)``, so ``BA = U_sel Σ V_selᵀ``."""
    U_sel = as_matrix(U_sel, "U_sel")
    V_sel = as_matrix(V_sel, "V_sel")
    sigma_sel = as_vector(sigma_sel, "sigma_sel")
    r = sigma_sel.size
    if U_sel.shape[1] != r or V_sel.shape[1] != r:
        raise ShapeError(f"U_sel {U_sel.shape} and V_sel {V_sel.shape} must have {r} columns")
    if np.any(sigma_sel < 0):
        raise ValueError("sigma_sel must be non-negative")
    root = np.sqrt(sigma_sel)
    A = root[:, None] * V_sel.T
    B = U_sel * root[None, :]
    if indices is None:
        indices = np.arange(r)
    return LoraInit(
        layer_id=layer_id,
        indices=np.asarray(indices, dtype=np.int64),
        sigma_sel=sigma_sel.copy(),
        A=A,
        B=B,
        alpha=float(alpha),
        scale=lora_scale(alpha, r, raw_alpha),
    )


def decompose(w0, init: LoraInit) -> LoraInit:
    """Fill ``W_res = W0 - scale * B A``."""
    w0 = as_matrix(w0, "w0")
    if w0.shape != (init.B.shape[0], init.A.shape[1]):
        raise ShapeError(f"w0 {w0.shape} does not match factors B {init.B.shape}, A {init.A.shape}")
    return replace(init, W_res=w0 - init.delta())


def adapted_forward(init: LoraInit, x) -> np.ndarray:
    """``W_res x + scale B (A x)`` without forming the dense sum."""
    if init.W_res is None:
        raise ValueError("residual not computed yet; call decompose first")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] != init.A.shape[1]:
        raise ShapeError(f"input has {x.shape[0]} rows, layer expects {init.A.shape[1]}")
    return init.W_res @ x + init.scale * (init.B @ (init.A @ x))


@dataclass(frozen=True)
class LoraLayer:
    """Linear layer whose weight is ``W_res + scale B A``; only A, B train."""

    init: LoraInit
    tapped: bool = True

    @property
    def in_dim(self) -> int:
        return self.init.A.shape[1]

    @property
    def out_dim(self) -> int:
        return self.init.B.shape[0]

    def effective_weight(self) -> np.ndarray:
        return self.init.recompose()

    def apply(self, x: np.ndarray) -> np.ndarray:
        return adapted_forward(self.init, x)

    def apply_transpose(self, g: np.ndarray) -> np.ndarray:
        i = self.init
        return i.W_res.T @ g + i.scale * (i.A.T @ (i.B.T @ g))

    def sgd_update(self, grad: np.ndarray, lr: float) -> "LoraLayer":
        # grad is dL/dW for the effective weight
        if lr == 0.0:
            return self
        i = self.init
        grad_a = i.scale * (i.B.T @ grad)
        grad_b = i.scale * (grad @ i.A.T)
        return replace(self, init=replace(i, A=i.A - lr * grad_a, B=i.B - lr * grad_b))


@dataclass(frozen=True)
class Direction:
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        for name in ("u", "v"):
            x = as_vector(getattr(self, name), name)
            if abs(np.linalg.norm(x) - 1.0) > UNIT_TOL:
                raise ValueError(f"{name} must be a unit vector")
            object.__setattr__(self, name, x)

    def matrix(self) -> np.ndarray:
        return np.outer(self.u, self.v)


class ProbeError(ArithmeticError):
    pass


def sym_perturb_probe(loss_eval: Callable[[np.ndarray], float], w0, z: Direction, gamma: float) -> float:
    """``½[L(W0 + γZ) + L(W0 - γZ)] - L(W0)``; first-order terms cancel."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    w0 = as_matrix(w0, "w0")
    zm = z.matrix()
    if zm.shape != w0.shape:
        raise ShapeError(f"direction shape {zm.shape} does not match weight {w0.shape}")
    base = loss_eval(w0)
    plus = loss_eval(w0 + gamma * zm)
    minus = loss_eval(w0 - gamma * zm)
    if not all(np.isfinite(v) for v in (base, plus, minus)):
        raise ProbeError(f"non-finite loss under perturbation with gamma={gamma}")
    return 0.5 * (plus + minus) - base


def kfac_quadratic_loss(s_x, s_y, w_star) -> Callable[[np.ndarray], float]:
    """Quadratic loss whose Hessian is exactly ``S_X ⊗ S_Y``.

    ``½ vec(D)ᵀ (S_X ⊗ S_Y) vec(D) = ½ tr(Dᵀ S_Y D S_X)`` with ``D = W - W*``.
    """
    s_x = as_matrix(s_x)
    s_y = as_matrix(s_y)
    w_star = as_matrix(w_star)

    def loss(w: np.ndarray) -> float:
        d = w - w_star
        return 0.5 * float(np.sum(d * (s_y @ d @ s_x)))

    return loss


def layer_loss_fn(model: Model, batch: Batch, layer_id: int) -> Callable[[np.ndarray], float]:
    """Loss as a function of one linear layer's weight, everything else fixed."""
    tapped = model.linear_layers[layer_id].tapped

    def loss(w: np.ndarray) -> float:
        return loss_value(model.replace_linear(layer_id, LinearLayer(w, tapped)), batch)

    return loss


def tap_factors(model: Model, batch: Batch, layer_id: int) -> tuple[np.ndarray, np.ndarray]:
    """Single-batch ``(S_X, S_Y)`` for one layer."""
    layer = model.linear_layers[layer_id]
    if not layer.tapped:
        model = model.replace_linear(layer_id, replace(layer, tapped=True))
    _, cache = forward(model, batch)
    _, taps = backward(model, cache)
    tap = next(t for t in taps if t.layer_id == layer_id)
    l = tap.X.shape[1]
    return tap.X @ tap.X.T / l, tap.G @ tap.G.T / l


def spearman(a: Sequence[float], b: Sequence[float]) -> float:
    """Spearman rank correlation; NaN when either input is constant."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or np.all(a == a[0]) or np.all(b == b[0]):
        return float("nan")
    return float(stats.spearmanr(a, b).statistic)


@dataclass
class TaylorReport:
    rows: list = field(default_factory=list)  # dicts: direction, gamma, probe_curvature, half_energy
    spearman: dict = field(default_factory=dict)  # gamma -> correlation

    def columns(self) -> list[str]:
        return list(self.rows[0].keys()) if self.rows else []


def taylor_report(model: Model, batch: Batch, w0, directions: Sequence[Direction],
                  gammas: Sequence[float] = (1e-1, 1e-2, 1e-3), *, layer_id: int = 0,
                  factors: tuple[np.ndarray, np.ndarray] | None = None,
                  loss_eval: Callable[[np.ndarray], float] | None = None,
                  full_fisher_matrix: np.ndarray | None = None) -> TaylorReport:
    """Compare symmetric-probe curvature ``ΔL_sym/γ²`` with half the Fisher Energy.

    ``loss_eval`` overrides the model loss; ``factors`` overrides the
    single-batch ``(S_X, S_Y)`` estimate.
    """
    gammas = [float(g) for g in gammas]
    if any(g <= 0 for g in gammas):
        raise ValueError("gammas must be positive")
    if any(b >= a for a, b in zip(gammas, gammas[1:])):
        raise ValueError("gammas must be strictly decreasing")
    w0 = as_matrix(w0, "w0")
    if loss_eval is None:
        loss_eval = layer_loss_fn(model, batch, layer_id)
    if factors is None:
        factors = tap_factors(model, batch, layer_id)
    s_x, s_y = factors
    report = TaylorReport()
    energies = [fisher_energy_factored(s_x, s_y, d.u, d.v) for d in directions]
    exact = None
    if full_fisher_matrix is not None:
        exact = [float(np.kron(d.v, d.u) @ full_fisher_matrix @ np.kron(d.v, d.u)) for d in directions]
    for g in gammas:
        curv = []
        for k, d in enumerate(directions):
            c = sym_perturb_probe(loss_eval, w0, d, g) / (g * g)
            curv.append(c)
            row = {
                "direction": k,
                "gamma": g,
                "probe_curvature": c,
                "half_energy": 0.5 * energies[k],
            }
            if exact is not None:
                row["half_exact_energy"] = 0.5 * exact[k]
            report.rows.append(row)
        report.spearman[g] = spearman(curv, energies)
    return report


def preliminary_init(result: SvdResult, group_index: int, r: int, sigma_mode: str,
                     alpha: float, *, n_groups: int = 32, w0=None, raw_alpha: bool = False,
                     layer_id: int = 0) -> LoraInit:
    """Factors from ``r`` consecutive singular directions of one group.

    Every direction is scaled by the global minimum (or maximum) singular
    value. ``W_res`` is filled when ``w0`` is given, otherwise the SVD
    reconstruction is used.
    """
    h = len(result.sigma)
    if sigma_mode not in ("min", "max"):
        raise ValueError("sigma_mode must be 'min' or 'max'")
    if not 0 <= group_index < n_groups:
        raise ValueError(f"group index {group_index} outside [0, {n_groups})")
    start = (group_index * h) // n_groups
    if r < 1 or r * n_groups > h or start + r > h:
        raise ValueError(f"group {group_index} with r={r} overflows {h} singular directions "
                         f"({n_groups} groups)")
    sig = float(result.sigma.min() if sigma_mode == "min" else result.sigma.max())
    sl = slice(start, start + r)
    init = build_factors(result.U[:, sl], result.V[:, sl], np.full(r, sig), alpha,
                         raw_alpha=raw_alpha, layer_id=layer_id, indices=np.arange(start, start + r))
    if w0 is None:
        w0 = result.reconstruct()
    return decompose(w0, init)

"""Shared pipeline stages used by the CLI commands and the experiments."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .. import fisher, lora, subspace
from ..micrograd import Batch, LinearLayer, Model, backward, build_mlp, forward, train_step
from ..subspace import Scaling, SelectionStrategy
from . import data as datamod

DIVERGENCE_LOSS = 1e6


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"training diverged at step {step} (loss {loss:.4g})")
        self.step = step
        self.loss = loss


def stream_seed(*parts: int) -> int:
    """Deterministic 63-bit seed from a tuple of integers."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, np.uint64)[0] >> 1)


def base_model(cfg) -> Model:
    """Seeded MLP, optionally pre-trained on a source task, playing ``W0``."""
    m = cfg.model
    rng = np.random.default_rng(stream_seed(cfg.seed, 101))
    tapped_ids = set(m.tapped_ids())
    model = build_mlp(m.dims, m.activation, rng, m.loss_kind,
                      tapped=[k in tapped_ids for k in range(m.n_linear)],
                      weight_scale=m.weight_scale)
    if m.pretrain_steps > 0:
        source = datamod.make_dataset(cfg, task_seed=m.source_task_seed).train
        for _ in range(m.pretrain_steps):
            model, _ = train_step(model, source, None, m.pretrain_lr)
    return model


def collect_taps(model: Model, cfg, train: Batch):
    """Forward/backward over the configured minibatches; yields tap lists."""
    f = cfg.fisher
    rng = np.random.default_rng(stream_seed(cfg.seed, 202))
    for k, batch in enumerate(datamod.minibatches(train, f.minibatch_size, f.minibatch_count, rng)):
        loss, cache = forward(model, batch)
        if not np.isfinite(loss):
            raise ArithmeticError(f"non-finite loss on minibatch {k}")
        _, taps = backward(model, cache)
        yield taps


def estimate_factors(model: Model, cfg, train: Batch, keep_taps: bool = False):
    """Accumulate ``FisherFactors`` for each tapped layer.

    Returns ``(factors_by_layer, taps_by_layer)``; the second is empty unless
    ``keep_taps``.
    """
    factors: dict[int, fisher.FisherFactors] = {}
    kept: dict[int, list] = {}
    for layer_id, layer in enumerate(model.linear_layers):
        if layer.tapped:
            factors[layer_id] = fisher.FisherFactors.zeros(
                layer_id, layer.in_dim, layer.out_dim, cfg.fisher.alg1_literal)
            kept[layer_id] = []
    for taps in collect_taps(model, cfg, train):
        for tap in taps:
            factors[tap.layer_id] = fisher.accumulate(factors[tap.layer_id], tap)
            if keep_taps:
                kept[tap.layer_id].append(tap)
    return factors, (kept if keep_taps else {})


@dataclass(frozen=True)
class LayerInit:
    init: lora.LoraInit
    spectrum: subspace.EnergySpectrum
    basis: subspace.SurrogateBasis


def layer_strategy(strategy: SelectionStrategy, seed: int, layer_id: int) -> SelectionStrategy:
    return replace(strategy, rng_seed=stream_seed(seed, strategy.rng_seed, layer_id))


def init_layer(w0: np.ndarray, s_x: np.ndarray, s_y: np.ndarray, r: int, alpha: float,
               strategy: SelectionStrategy, *, layer_id: int = 0, normalize_sigma: bool = False,
               raw_alpha: bool = False) -> LayerInit:
    """Basis, energies, selection, factors and residual for one layer."""
    basis = subspace.build_basis(w0, strategy.basis)
    spectrum = subspace.project_energies(basis, s_x, s_y)
    idx = subspace.select(spectrum, r, strategy)
    if strategy.scaling is Scaling.SVD_SIGMA:
        sigma_sel = basis.sigma[idx]
    else:
        sigma_sel = spectrum.energies[idx]
    sigma_sel = np.maximum(sigma_sel, 0.0)
    if normalize_sigma and sigma_sel.max() > 0:
        sigma_sel = sigma_sel / sigma_sel.max()
    init = lora.build_factors(basis.U_hat[:, idx], basis.V_hat[:, idx], sigma_sel, alpha,
                              raw_alpha=raw_alpha, layer_id=layer_id, indices=idx)
    return LayerInit(lora.decompose(w0, init), spectrum, basis)


def init_from_factors(model: Model, finalized: dict, cfg, strategy: SelectionStrategy | None = None):
    """Run :func:`init_layer` for every layer in ``finalized`` (id -> (S_X, S_Y))."""
    i = cfg.init
    strategy = strategy or i.strategy()
    out = {}
    for layer_id in sorted(finalized):
        s_x, s_y = finalized[layer_id]
        w0 = model.linear_layers[layer_id].effective_weight()
        out[layer_id] = init_layer(
            np.array(w0), s_x, s_y, i.rank, i.alpha, layer_strategy(strategy, cfg.seed, layer_id),
            layer_id=layer_id, normalize_sigma=i.normalize_sigma, raw_alpha=i.raw_alpha)
    return out


def adapt(model: Model, inits: dict) -> Model:
    """Swap each initialized layer for a LoRA layer."""
    for layer_id, init in inits.items():
        li = init.init if isinstance(init, LayerInit) else init
        tapped = model.linear_layers[layer_id].tapped
        model = model.replace_linear(layer_id, lora.LoraLayer(li, tapped))
    return model


def evaluate(model: Model, batch: Batch) -> tuple[float, float]:
    """Mean loss and accuracy (NaN for regression)."""
    loss, cache = forward(model, batch)
    if model.loss_kind == "softmax-cross-entropy":
        return loss, datamod.accuracy(cache.outputs[-1], batch.targets)
    return loss, float("nan")


def trainable_mask(model: Model, mode: str) -> list[bool]:
    if mode == "full":
        return [True] * len(model.linear_layers)
    return [isinstance(layer, lora.LoraLayer) for layer in model.linear_layers]


def train(model: Model, dataset: datamod.Dataset, spec, seed: int):
    """Gradient descent with periodic evaluation.

    Returns ``(model, rows)`` with rows ``(step, train_loss, eval_loss, eval_acc)``;
    ``train_loss`` is the full training-set loss at that step.
    """
    mask = trainable_mask(model, spec.trainable)
    rng = np.random.default_rng(stream_seed(seed, 303))
    rows = []

    def record(step: int):
        tl, _ = evaluate(model, dataset.train)
        el, acc = evaluate(model, dataset.eval)
        rows.append((step, tl, el, acc))

    record(0)
    n = dataset.train.size
    for step in range(1, spec.steps + 1):
        if spec.batch_size and spec.batch_size < n:
            idx = rng.choice(n, size=spec.batch_size, replace=False)
            t = dataset.train.targets
            batch = Batch(dataset.train.inputs[:, idx], t[idx] if t.ndim == 1 else t[:, idx])
        else:
            batch = dataset.train
        model, loss = train_step(model, batch, mask, spec.lr)
        if not np.isfinite(loss) or loss > DIVERGENCE_LOSS:
            raise TrainingDiverged(step, loss)
        if step % max(spec.eval_every, 1) == 0 or step == spec.steps:
            record(step)
    return model, rows


"""Implementations behind the CLI subcommands.

Every command takes a validated :class:`RunConfig` and an output directory,
writes its artifacts plus a ``manifest_<command>.json`` run manifest, and
returns the manifest dict.
"""

from __future__ import annotations

import copy
import json
import time
import tracemalloc
from contextlib import contextmanager
from pathlib import Path
from typing import Mapping

import numpy as np

from .. import __version__, dense, fisher, lora, subspace
from ..micrograd import LinearLayer, NonFiniteLossError
from ..subspace import BasisKind, Criterion, Scaling, SelectionStrategy
from . import checkpoint, csvio, data as datamod, pipeline

TASK_NAME_CHARS = set("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789_-")


class CommandError(RuntimeError):
    """Fatal, user-facing command failure."""


class _Timer:
    def __init__(self):
        self.phases: dict[str, float] = {}

    @contextmanager
    def phase(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.phases[name] = self.phases.get(name, 0.0) + (time.perf_counter() - t0) * 1e3


def write_manifest(out: Path, command: str, cfg, timer: _Timer, artifacts, **extra) -> dict:
    manifest = {
        "seed": cfg.seed,
        "config_echo": cfg.echo(),
        "phase_timings_ms": timer.phases,
        "artifact_paths": [str(p) for p in artifacts],
        "tool_version": __version__,
    }
    manifest.update(extra)
    path = Path(out) / f"manifest_{command}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def read_manifest(path: str | Path) -> dict:
    manifest = json.loads(Path(path).read_text(encoding="utf-8"))
    missing = {"seed", "config_echo", "phase_timings_ms", "artifact_paths", "tool_version"} - set(manifest)
    if missing:
        raise ValueError(f"manifest missing keys {sorted(missing)}")
    return manifest


# checkpoint layouts -------------------------------------------------------

def factors_path(stats_dir: Path, layer_id: int) -> Path:
    return Path(stats_dir) / f"factors_layer{layer_id}.filt"


def init_path(init_dir: Path, layer_id: int) -> Path:
    return Path(init_dir) / f"lora_layer{layer_id}.filt"


def factors_tensors(f: fisher.FisherFactors) -> dict:
    s_x, s_y = fisher.finalize(f)
    return {
        "S_X": s_x,
        "S_Y": s_y,
        "layer_id": np.array([f.layer_id], dtype=np.float64),
        "batches_seen": np.array([f.batches_seen], dtype=np.float64),
        "columns_seen": np.array([f.columns_seen], dtype=np.float64),
    }


def load_factors(path: Path) -> tuple[int, np.ndarray, np.ndarray]:
    t = checkpoint.read(path)
    return int(checkpoint.scalar(t, "layer_id")), t["S_X"], t["S_Y"]


def lora_tensors(init: lora.LoraInit) -> dict:
    return {
        "A": init.A,
        "B": init.B,
        "W_res": init.W_res,
        "alpha": np.array([init.alpha]),
        "rank": np.array([float(init.rank)]),
        "scale": np.array([init.scale]),
        "indices": init.indices.astype(np.float64),
        "sigma_sel": init.sigma_sel,
        "layer_id": np.array([float(init.layer_id)]),
    }


def load_lora(path: Path) -> lora.LoraInit:
    t = checkpoint.read(path)
    return lora.LoraInit(
        layer_id=int(checkpoint.scalar(t, "layer_id")),
        indices=t["indices"].astype(np.int64),
        sigma_sel=t["sigma_sel"],
        A=t["A"],
        B=t["B"],
        alpha=checkpoint.scalar(t, "alpha"),
        scale=checkpoint.scalar(t, "scale"),
        W_res=t["W_res"],
    )


def _dirs(cfg, out: Path):
    out = Path(out)
    return out / cfg.output.stats_dir, out / cfg.output.init_dir, out / cfg.output.train_dir


# stats --------------------------------------------------------------------

def cmd_stats(cfg, out: Path) -> dict:
    timer = _Timer()
    stats_dir, _, _ = _dirs(cfg, out)
    with timer.phase("model"):
        model = pipeline.base_model(cfg)
        ds = datamod.make_dataset(cfg)
    with timer.phase("stats"):
        try:
            factors, _ = pipeline.estimate_factors(model, cfg, ds.train)
        except (ArithmeticError, NonFiniteLossError) as exc:
            raise CommandError(f"stats aborted: {exc}") from exc
    artifacts = [checkpoint.write(factors_path(stats_dir, k), factors_tensors(f))
                 for k, f in sorted(factors.items())]
    counts = {str(k): {"batches": f.batches_seen, "columns": f.columns_seen} for k, f in factors.items()}
    return write_manifest(out, "stats", cfg, timer, artifacts, counts=counts)


# init ---------------------------------------------------------------------

def _load_all_factors(model, stats_dir: Path) -> dict:
    finalized = {}
    for layer_id, layer in enumerate(model.linear_layers):
        if not layer.tapped:
            continue
        path = factors_path(stats_dir, layer_id)
        if not path.exists():
            raise CommandError(f"missing factor checkpoint {path}; run 'stats' first")
        lid, s_x, s_y = load_factors(path)
        if lid != layer_id or s_x.shape != (layer.in_dim,) * 2 or s_y.shape != (layer.out_dim,) * 2:
            raise CommandError(
                f"{path}: factors S_X {s_x.shape}, S_Y {s_y.shape} do not match layer {layer_id} "
                f"({layer.out_dim}x{layer.in_dim})")
        finalized[layer_id] = (s_x, s_y)
    return finalized


def cmd_init(cfg, out: Path, stats_dir: Path | None = None) -> dict:
    timer = _Timer()
    default_stats, init_dir, _ = _dirs(cfg, out)
    stats_dir = Path(stats_dir) if stats_dir else default_stats
    with timer.phase("model"):
        model = pipeline.base_model(cfg)
    finalized = _load_all_factors(model, stats_dir)
    with timer.phase("init"):
        try:
            inits = pipeline.init_from_factors(model, finalized, cfg)
        except subspace.SelectionError as exc:
            raise CommandError(str(exc)) from exc
    artifacts = []
    for layer_id, li in sorted(inits.items()):
        artifacts.append(checkpoint.write(init_path(init_dir, layer_id), lora_tensors(li.init)))
        energies = init_dir / f"energies_layer{layer_id}.csv"
        energies.parent.mkdir(parents=True, exist_ok=True)
        energies.write_text(li.spectrum.to_csv(), encoding="utf-8")
        artifacts.append(energies)
    selected = {str(k): li.init.indices.tolist() for k, li in inits.items()}
    return write_manifest(out, "init", cfg, timer, artifacts, selected=selected)


# train --------------------------------------------------------------------

def load_inits(model, init_dir: Path) -> dict:
    inits = {}
    for layer_id, layer in enumerate(model.linear_layers):
        path = init_path(init_dir, layer_id)
        if not path.exists():
            continue
        li = load_lora(path)
        if li.W_res.shape != (layer.out_dim, layer.in_dim):
            raise CommandError(f"{path}: W_res {li.W_res.shape} does not match layer {layer_id}")
        inits[layer_id] = li
    if not inits:
        raise CommandError(f"no LoRA checkpoints in {init_dir}; run 'init' first")
    return inits


METRIC_HEADER = ["step", "train_loss", "eval_loss", "eval_accuracy"]


def cmd_train(cfg, out: Path, init_dir: Path | None = None) -> dict:
    timer = _Timer()
    _, default_init, train_dir = _dirs(cfg, out)
    init_dir = Path(init_dir) if init_dir else default_init
    with timer.phase("model"):
        model = pipeline.base_model(cfg)
        ds = datamod.make_dataset(cfg)
        adapted = pipeline.adapt(model, load_inits(model, init_dir))
    with timer.phase("train"):
        try:
            _, rows = pipeline.train(adapted, ds, cfg.train, cfg.seed)
        except (pipeline.TrainingDiverged, NonFiniteLossError) as exc:
            write_manifest(out, "train", cfg, timer, [], status="diverged", error=str(exc))
            raise CommandError(str(exc)) from exc
    path = csvio.write(train_dir / "metrics.csv", METRIC_HEADER, rows)
    return write_manifest(out, "train", cfg, timer, [path], status="ok")


# probe --------------------------------------------------------------------

QUADRATIC_OFFSET = 1e-2
PROBE_HEADER = ["direction", "index", "gamma", "probe_curvature", "half_energy",
                "half_exact_energy", "rel_err"]


def probe_directions(basis: subspace.SurrogateBasis, indices) -> list[lora.Direction]:
    return [lora.Direction(basis.U_hat[:, j], basis.V_hat[:, j]) for j in indices]


def cmd_probe(cfg, out: Path, init_dir: Path | None = None) -> dict:
    timer = _Timer()
    p = cfg.probe
    _, default_init, _ = _dirs(cfg, out)
    with timer.phase("model"):
        model = pipeline.base_model(cfg)
        ds = datamod.make_dataset(cfg)
    if not 0 <= p.layer < len(model.linear_layers):
        raise CommandError(f"probe.layer={p.layer} out of range")
    layer = model.linear_layers[p.layer]
    if not layer.tapped:
        model = model.replace_linear(p.layer, LinearLayer(layer.weight, True))
    w0 = np.array(layer.effective_weight())
    m, n = w0.shape
    want_exact = m * n <= fisher.FULL_FISHER_MAX_PARAMS
    with timer.phase("stats"):
        factors, kept = pipeline.estimate_factors(model, cfg, ds.train, keep_taps=want_exact)
        s_x, s_y = fisher.finalize(factors[p.layer])
        full = fisher.full_fisher(kept[p.layer]).S_W if want_exact else None
    basis = subspace.build_basis(w0, cfg.init.basis)
    if p.source == "selected":
        init = load_lora(init_path(Path(init_dir) if init_dir else default_init, p.layer))
        indices = init.indices.tolist()
    else:
        indices = np.flatnonzero(~basis.dead_mask)[:p.max_directions].tolist()
    directions = probe_directions(basis, indices)
    loss_eval = None
    if p.source == "quadratic":
        rng = np.random.default_rng(pipeline.stream_seed(cfg.seed, 404))
        # small offset keeps L(W0) comparable to the γ² term at the finest γ
        w_star = w0 + QUADRATIC_OFFSET * rng.standard_normal(w0.shape)
        loss_eval = lora.kfac_quadratic_loss(s_x, s_y, w_star)
        if want_exact:
            full = np.kron(s_x, s_y)
    with timer.phase("probe"):
        report = lora.taylor_report(model, ds.train, w0, directions, p.gammas, layer_id=p.layer,
                                    factors=(s_x, s_y), loss_eval=loss_eval,
                                    full_fisher_matrix=full)
    rows = []
    for row in report.rows:
        half = row["half_energy"]
        rows.append((row["direction"], indices[row["direction"]], row["gamma"], row["probe_curvature"],
                     half, row.get("half_exact_energy", float("nan")),
                     abs(row["probe_curvature"] - half) / max(abs(half), 1e-300)))
    path = csvio.write(Path(out) / "probe.csv", PROBE_HEADER, rows)
    sp_rows = []
    for g in p.gammas:
        curv = [r[3] for r in rows if r[2] == g]
        exact = [r[5] for r in rows if r[2] == g]
        sp_rows.append((g, report.spearman[g],
                        lora.spearman(curv, exact) if full is not None else float("nan")))
    sp = csvio.write(Path(out) / "probe_spearman.csv", ["gamma", "spearman_factored", "spearman_exact"],
                     sp_rows)
    return write_manifest(out, "probe", cfg, timer, [path, sp], source=p.source)


# preliminary --------------------------------------------------------------

def ema(values, factor: float) -> list[float]:
    out = []
    for v in values:
        out.append(v if not out else factor * v + (1.0 - factor) * out[-1])
    return out


def preliminary_rows(cfg, model=None, ds=None):
    """One row per (sigma_mode, group): the toy direction-group study."""
    pre = cfg.preliminary
    model = model or pipeline.base_model(cfg)
    ds = ds or datamod.make_dataset(cfg)
    if not 0 <= pre.layer < len(model.linear_layers):
        raise CommandError(f"preliminary.layer={pre.layer} out of range")
    layer = model.linear_layers[pre.layer]
    w0 = np.array(layer.effective_weight())
    r = cfg.init.rank
    h = min(w0.shape)
    if pre.groups * r > h:
        raise CommandError(f"layer {pre.layer} has h={h} singular directions: at most {h // r} "
                           f"groups of rank {r}")
    if not layer.tapped:
        model = model.replace_linear(pre.layer, LinearLayer(layer.weight, True))
    factors, _ = pipeline.estimate_factors(model, cfg, ds.train)
    s_x, s_y = fisher.finalize(factors[pre.layer])
    result = dense.svd(w0)
    spectrum = subspace.project_energies(result, s_x, s_y)
    rows = []
    for mode in pre.sigma_modes:
        for i in range(pre.groups):
            init = lora.preliminary_init(result, i, r, mode, cfg.init.alpha, n_groups=pre.groups,
                                         w0=w0, raw_alpha=cfg.init.raw_alpha, layer_id=pre.layer)
            _, metrics = pipeline.train(pipeline.adapt(model, {pre.layer: init}), ds, cfg.train, cfg.seed)
            _, tl, el, acc = metrics[-1]
            rows.append({
                "sigma_mode": mode,
                "group": i,
                "singular_index": int(init.indices[0]),
                "group_energy": subspace.group_energy(spectrum, init.indices),
                "final_train_loss": tl,
                "final_eval_loss": el,
                "final_eval_accuracy": acc,
            })
    return rows


def cmd_preliminary(cfg, out: Path) -> dict:
    timer = _Timer()
    pre = cfg.preliminary
    with timer.phase("preliminary"):
        rows = preliminary_rows(cfg)
    tag = format(pre.ema, "g")
    base_cols = ["sigma_mode", "group", "singular_index", "group_energy", "final_train_loss",
                 "final_eval_loss", "final_eval_accuracy"]
    header = base_cols + [f"ema{tag}_train_loss", f"ema{tag}_eval_loss"]
    artifacts = []
    for sort_key, name in (("singular_index", "by_sigma"), ("group_energy", "by_energy")):
        table = []
        for mode in pre.sigma_modes:
            sub = sorted((r for r in rows if r["sigma_mode"] == mode), key=lambda r: (r[sort_key], r["group"]))
            e_train = ema([r["final_train_loss"] for r in sub], pre.ema)
            e_eval = ema([r["final_eval_loss"] for r in sub], pre.ema)
            for r, a, b in zip(sub, e_train, e_eval):
                table.append([r[c] for c in base_cols] + [a, b])
        artifacts.append(csvio.write(Path(out) / f"preliminary_{name}.csv", header, table))
    summary = []
    for mode in pre.sigma_modes:
        sub = [r for r in rows if r["sigma_mode"] == mode]
        e = [r["group_energy"] for r in sub]
        summary.append((mode,
                        lora.spearman(e, [r["final_train_loss"] for r in sub]),
                        lora.spearman(e, [r["final_eval_loss"] for r in sub]),
                        lora.spearman([r["singular_index"] for r in sub], [r["final_eval_loss"] for r in sub])))
    artifacts.append(csvio.write(Path(out) / "preliminary_summary.csv",
                                 ["sigma_mode", "spearman_energy_train_loss", "spearman_energy_eval_loss",
                                  "spearman_sigma_index_eval_loss"], summary))
    return write_manifest(out, "preliminary", cfg, timer, artifacts, ema_factor=pre.ema)


# ablate -------------------------------------------------------------------

ABLATION_CELLS = [
    SelectionStrategy(c, s, b)
    for c in (Criterion.MAX, Criterion.RANDOM, Criterion.MIN)
    for s, b in ((Scaling.FISHER, BasisKind.SURROGATE), (Scaling.SVD_SIGMA, BasisKind.EXACT_SVD))
]
ABLATION_HEADER = ["seed", "variant", "criterion", "scaling", "basis", "final_train_loss",
                   "final_eval_loss", "final_eval_accuracy"]


def ablation_rows(cfg, seed: int) -> list[list]:
    """The six-cell grid for one seed; every cell shares model, data and factors."""
    c = copy.deepcopy(cfg)
    c.seed = seed
    model = pipeline.base_model(c)
    ds = datamod.make_dataset(c)
    factors, _ = pipeline.estimate_factors(model, c, ds.train)
    finalized = {k: fisher.finalize(f) for k, f in factors.items()}
    rows = []
    for cell in ABLATION_CELLS:
        strategy = SelectionStrategy(cell.criterion, cell.scaling, cell.basis, c.init.rng_seed)
        inits = pipeline.init_from_factors(model, finalized, c, strategy)
        try:
            _, metrics = pipeline.train(pipeline.adapt(model, inits), ds, c.train, seed)
            _, tl, el, acc = metrics[-1]
        except (pipeline.TrainingDiverged, NonFiniteLossError):
            tl = el = acc = float("nan")
        rows.append([seed, strategy.label, strategy.criterion.value, strategy.scaling.value,
                     strategy.basis.value, tl, el, acc])
    return rows


def summarize(values) -> tuple[float, float, float]:
    v = np.asarray(values, dtype=np.float64)
    mean = float(np.mean(v))
    std = float(np.std(v, ddof=1)) if v.size > 1 else 0.0
    return mean, std, std / np.sqrt(v.size) if v.size else float("nan")


def ablation_summary(rows) -> list[list]:
    variants = [c.label for c in ABLATION_CELLS]
    out = []
    by = {v: [r[6] for r in rows if r[1] == v] for v in variants}
    m_mean = summarize(by["M-fisher"])[0] if by.get("M-fisher") else float("nan")
    for v in variants:
        mean, std, se = summarize(by[v])
        diff = m_mean - mean
        out.append([v, len(by[v]), mean, std, se, mean - 1.96 * se, mean + 1.96 * se, diff,
                    int(np.sign(diff))])
    return out


SUMMARY_HEADER = ["variant", "n", "mean_eval_loss", "std", "se", "ci95_low", "ci95_high",
                  "m_fisher_minus_variant", "sign"]


def cmd_ablate(cfg, out: Path) -> dict:
    timer = _Timer()
    seeds = [cfg.seed + s for s in range(cfg.ablate.seed_count)]
    rows = []
    with timer.phase("ablate"):
        for s in seeds:
            rows.extend(ablation_rows(cfg, s))
    a = csvio.write(Path(out) / "ablation.csv", ABLATION_HEADER, rows)
    b = csvio.write(Path(out) / "ablation_summary.csv", SUMMARY_HEADER, ablation_summary(rows))
    return write_manifest(out, "ablate", cfg, timer, [a, b], seeds=seeds)


# overlap ------------------------------------------------------------------

def overlap_matrix(selections: Mapping[str, Mapping[int, tuple]]) -> np.ndarray:
    """Mean over layers of ``100 |I1 ∩ I2| / r``.

    ``selections[task][layer] = (indices, shape)``.
    """
    tasks = list(selections)
    if len(tasks) < 2:
        raise CommandError("overlap needs at least two tasks")
    ref = selections[tasks[0]]
    for t in tasks[1:]:
        other = selections[t]
        if set(other) != set(ref):
            raise CommandError(f"task {t!r} has layers {sorted(other)}, expected {sorted(ref)}")
        for layer in ref:
            if other[layer][1] != ref[layer][1] or len(other[layer][0]) != len(ref[layer][0]):
                raise CommandError(f"task {t!r} layer {layer}: model spec or rank differs")
    k = len(tasks)
    values = np.zeros((k, k))
    for a in range(k):
        for b in range(k):
            per_layer = []
            for layer in sorted(ref):
                ia = set(int(i) for i in selections[tasks[a]][layer][0])
                ib = set(int(i) for i in selections[tasks[b]][layer][0])
                per_layer.append(100.0 * len(ia & ib) / len(ref[layer][0]))
            values[a, b] = float(np.mean(per_layer))
    return values


def load_selection(init_dir: Path) -> dict:
    sel = {}
    for path in sorted(Path(init_dir).glob("lora_layer*.filt")):
        li = load_lora(path)
        sel[li.layer_id] = (tuple(li.indices.tolist()), (li.B.shape[0], li.A.shape[1]))
    if not sel:
        raise CommandError(f"no LoRA checkpoints in {init_dir}")
    return sel


def cmd_overlap(cfg, out: Path, tasks: Mapping[str, Path]) -> dict:
    timer = _Timer()
    for name in tasks:
        if not name or set(name) - TASK_NAME_CHARS:
            raise CommandError(f"task name {name!r} must match [A-Za-z0-9_-]+")
    with timer.phase("overlap"):
        selections = {name: load_selection(Path(d)) for name, d in tasks.items()}
        values = overlap_matrix(selections)
    names = list(tasks)
    path = csvio.write(Path(out) / "overlap.csv", ["task"] + names,
                       [[n] + values[i].tolist() for i, n in enumerate(names)])
    return write_manifest(out, "overlap", cfg, timer, [path])


# timing -------------------------------------------------------------------

def timing_report(cfg) -> dict:
    timer = _Timer()
    tracemalloc.start()
    try:
        model = pipeline.base_model(cfg)
        ds = datamod.make_dataset(cfg)
        with timer.phase("stats"):
            factors, _ = pipeline.estimate_factors(model, cfg, ds.train)
        strategy = cfg.init.strategy()
        for layer_id, f in sorted(factors.items()):
            s_x, s_y = fisher.finalize(f)
            w0 = np.array(model.linear_layers[layer_id].effective_weight())
            with timer.phase("basis"):
                basis = subspace.build_basis(w0, strategy.basis)
            with timer.phase("energies"):
                spectrum = subspace.project_energies(basis, s_x, s_y)
            with timer.phase("selection"):
                idx = subspace.select(spectrum, cfg.init.rank,
                                      pipeline.layer_strategy(strategy, cfg.seed, layer_id))
            with timer.phase("factor_build"):
                sig = basis.sigma[idx] if strategy.scaling is Scaling.SVD_SIGMA else spectrum.energies[idx]
                init = lora.build_factors(basis.U_hat[:, idx], basis.V_hat[:, idx], np.maximum(sig, 0),
                                          cfg.init.alpha, raw_alpha=cfg.init.raw_alpha)
                lora.decompose(w0, init)
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    sweep = {}
    for count in sorted({1, cfg.fisher.minibatch_count}):
        c = copy.deepcopy(cfg)
        c.fisher.minibatch_count = count
        t0 = time.perf_counter()
        pipeline.estimate_factors(model, c, ds.train)
        sweep[str(count)] = (time.perf_counter() - t0) * 1e3
    return {"phase_timings_ms": timer.phases, "peak_bytes": int(peak), "stats_sweep_ms": sweep}


def cmd_timing(cfg, out: Path) -> dict:
    timer = _Timer()
    with timer.phase("total"):
        report = timing_report(cfg)
    path = Path(out) / "timing.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    timer.phases.update(report["phase_timings_ms"])
    return write_manifest(out, "timing", cfg, timer, [path], peak_bytes=report["peak_bytes"])

"""Optimal-transport training loop: loss, diffused-target regularization, Adam, early stopping."""

from __future__ import annotations

import json
import logging
import time
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .core import PerturbDataset, Regime, SplitSpec, split as split_dataset
from .model import (
    CHECKPOINT_FORMAT, CHECKPOINT_VERSION, ModelParams, ParamGrads, init_params, load_checkpoint,
    params_from_dict, params_to_dict, regime_context,
)
from .odeint import DivergenceError, FlowSpec, flow_map, flow_map_with_grad
from .transport import SinkhornConfig, sinkhorn_grad, sinkhorn_w2

log = logging.getLogger(__name__)

DIVERGENCE_PENALTY = 1e6


@dataclass(frozen=True)
class DiffusionConfig:
    enabled: bool = False
    dt: float = 0.3  # variance of the Brownian kick added to targets
    t_reduced: float = 5.0
    n_steps: int = 50

    def __post_init__(self):
        if self.dt < 0:
            raise ValueError("diffusion dt must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    lambda_l1: float = 1e-3
    learning_rate: float = 1e-3
    max_epochs: int = 100
    batch_cap: int = 256
    diffusion: DiffusionConfig = DiffusionConfig()
    early_stop_patience: int = 10
    seed: int = 0
    n_modules: int = 100
    flow: FlowSpec = FlowSpec(25.0, 50)
    sinkhorn: SinkhornConfig = SinkhornConfig()
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    learn_s: bool = False
    init_strength: float = 10.0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.lambda_l1 < 0:
            raise ValueError("lambda_l1 must be >= 0")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.max_epochs < 0 or self.early_stop_patience < 0:
            raise ValueError("max_epochs and early_stop_patience must be >= 0")
        if self.batch_cap < 1:
            raise ValueError("batch_cap must be >= 1")

    @property
    def diffused_flow(self) -> FlowSpec:
        d = self.diffusion
        return FlowSpec(d.t_reduced, d.n_steps, self.flow.scheme)


@dataclass
class TrainState:
    params: ModelParams
    m: dict = field(default_factory=dict)  # Adam first moments by tensor name
    v: dict = field(default_factory=dict)
    step: int = 0  # Adam update count
    epoch: int = 0
    best_val: float = np.inf
    best_params: ModelParams | None = None
    best_epoch: int = -1
    bad_epochs: int = 0
    visits: dict = field(default_factory=dict)  # regime id -> visit count (alternation parity)
    seed: int = 0
    events: list = field(default_factory=list)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_w2: float
    regime_w2: dict
    wall_time: float
    skipped: list


# -- loss pieces -----------------------------------------------------------------

def l1_penalty(params: ModelParams, lambda_l1: float) -> float:
    return lambda_l1 * float(np.abs(params.B).sum())


def regime_stream(seed: int, rid: str, visit: int) -> np.random.Generator:
    """RNG for one visit of one regime; independent of the order regimes are visited in."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(rid.encode()), int(visit)])


def diffuse_targets(Y, dt: float, seed) -> np.ndarray:
    """Y + sqrt(dt) * Z with Z standard normal; ``seed`` may be a Generator."""
    Y = np.asarray(Y, dtype=float)
    if dt < 0:
        raise ValueError("dt must be >= 0")
    if dt == 0:
        return Y.copy()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return Y + np.sqrt(dt) * rng.standard_normal(Y.shape)


def _w2_and_grad(Yhat, Y, cfg: SinkhornConfig, need_grad: bool):
    dist, plan = sinkhorn_w2(Yhat, Y, cfg)
    if not need_grad:
        return dist, None, plan
    if dist <= 1e-12:
        return dist, np.zeros_like(Yhat), plan
    # d sqrt(D) = dD / (2 sqrt(D))
    return dist, sinkhorn_grad(Yhat, Y, cfg, plan) / (2.0 * dist), plan


def loss(params: ModelParams, dataset: PerturbDataset, regime: Regime | str, spec: FlowSpec = FlowSpec(),
         sinkhorn_cfg: SinkhornConfig = SinkhornConfig(), lambda_l1: float = 1e-3,
         control=None, target=None) -> float:
    """W2 between the regime's cells and the pushed-forward control cells, plus lambda |B|_1.

    ``control``/``target`` override the dataset matrices (e.g. a split). A
    diverging trajectory yields a large finite penalty instead of raising.
    """
    if isinstance(regime, str):
        regime = dataset.regime(regime)
    X0 = dataset.control if control is None else control
    Y = dataset.samples[regime.id] if target is None else target
    try:
        Yhat = flow_map(params, regime_context(params, regime), X0, spec)
    except DivergenceError as exc:
        log.warning("regime %s diverged: %s", regime.id, exc)
        return DIVERGENCE_PENALTY + l1_penalty(params, lambda_l1)
    return sinkhorn_w2(Yhat, Y, sinkhorn_cfg)[0] + l1_penalty(params, lambda_l1)


def regime_loss_and_grad(params: ModelParams, regime: Regime, X0, Y, spec: FlowSpec,
                         cfg: SinkhornConfig, lambda_l1: float) -> tuple[float, float, ParamGrads]:
    """(W2, total loss, gradient) for initial states ``X0`` pushed toward ``Y``."""
    ctx = regime_context(params, regime)
    Yhat = flow_map(params, ctx, X0, spec)
    w2, gY, _ = _w2_and_grad(Yhat, Y, cfg, True)
    _, grads = flow_map_with_grad(params, ctx, X0, spec, gY)
    grads.B = grads.B + lambda_l1 * np.sign(params.B)  # subgradient 0 at B == 0
    return w2, w2 + l1_penalty(params, lambda_l1), grads


# -- Adam ----------------------------------------------------------------------

def adam_update(state: TrainState, grads: ParamGrads, cfg: TrainConfig) -> None:
    if cfg.learning_rate == 0:
        return
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    state.step += 1
    t = state.step
    lr_t = cfg.learning_rate * np.sqrt(1 - b2**t) / (1 - b1**t)
    current = state.params.tensors()
    new = {}
    for name, g in grads.tensors().items():
        m = state.m.get(name, np.zeros_like(g))
        v = state.v.get(name, np.zeros_like(g))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        new[name] = current[name] - lr_t * m / (np.sqrt(v) + cfg.adam_eps)
    state.params = state.params.with_tensors(new)


# -- epochs --------------------------------------------------------------------

def _rows(mat: np.ndarray, idx: np.ndarray | None) -> np.ndarray:
    return mat if idx is None else mat[idx]


def _subsample(rng: np.random.Generator, X: np.ndarray, cap: int) -> np.ndarray:
    if X.shape[0] <= cap:
        return X
    return X[np.sort(rng.choice(X.shape[0], cap, replace=False))]


def training_regimes(dataset: PerturbDataset) -> list[Regime]:
    regs = list(dataset.interventions)
    if not regs:
        raise ValueError("dataset has no intervention regimes to train on")
    return regs


def uses_diffused(state: TrainState, rid: str, cfg: TrainConfig) -> bool:
    """Even-indexed visits of a regime start from control cells, odd ones from diffused targets."""
    return cfg.diffusion.enabled and state.visits.get(rid, 0) % 2 == 1


def train_epoch(state: TrainState, dataset: PerturbDataset, cfg: TrainConfig,
                splits: SplitSpec | None = None) -> tuple[TrainState, dict]:
    """One pass over the intervention regimes, one Adam step per regime.

    Returns the updated state and per-regime training W2 (NaN for skipped regimes).
    """
    train_idx = splits.train if splits is not None else {}
    control = _rows(dataset.control, train_idx.get(dataset.control_id))
    per_regime, skipped = {}, []
    for regime in training_regimes(dataset):
        rid = regime.id
        visit = state.visits.get(rid, 0)
        rng = regime_stream(state.seed, rid, visit)
        Y = _subsample(rng, _rows(dataset.samples[rid], train_idx.get(rid)), cfg.batch_cap)
        if uses_diffused(state, rid, cfg):
            X0 = diffuse_targets(Y, cfg.diffusion.dt, rng)
            spec = cfg.diffused_flow
        else:
            X0 = _subsample(rng, control, cfg.batch_cap)
            spec = cfg.flow
        state.visits[rid] = visit + 1
        try:
            w2, _, grads = regime_loss_and_grad(state.params, regime, X0, Y, spec, cfg.sinkhorn, cfg.lambda_l1)
        except DivergenceError as exc:
            state.events.append({"epoch": state.epoch, "regime": rid, "event": f"divergence: {exc}"})
            log.warning("epoch %d regime %s: %s, update skipped", state.epoch, rid, exc)
            per_regime[rid] = DIVERGENCE_PENALTY
            skipped.append(rid)
            continue
        if not grads.all_finite() or not np.isfinite(w2):
            state.events.append({"epoch": state.epoch, "regime": rid, "event": "non-finite gradient"})
            log.warning("epoch %d regime %s: non-finite gradient, update skipped", state.epoch, rid)
            per_regime[rid] = float(w2) if np.isfinite(w2) else np.nan
            skipped.append(rid)
            continue
        per_regime[rid] = w2
        adam_update(state, grads, cfg)
    state.epoch += 1
    return state, {"w2": per_regime, "skipped": skipped}


def validation_w2(params: ModelParams, dataset: PerturbDataset, cfg: TrainConfig,
                  splits: SplitSpec | None) -> tuple[float, dict]:
    """Mean over regimes of W2(validation cells, pushed-forward control validation cells).

    Regimes without validation rows are left out. When the control has no
    validation rows its training rows are pushed instead. With no split at
    all, or a split where no regime has validation rows (small data), every
    cell is used.
    """
    has_val = splits is not None and any(
        splits.val.get(r.id) is not None and splits.val[r.id].size for r in training_regimes(dataset))
    if not has_val:
        control = dataset.control
        val = {r.id: dataset.samples[r.id] for r in training_regimes(dataset)}
    else:
        cv = splits.val.get(dataset.control_id)
        control = dataset.control[cv] if cv is not None and cv.size else dataset.control[splits.train[dataset.control_id]]
        val = {r.id: dataset.samples[r.id][splits.val[r.id]] for r in training_regimes(dataset)
               if splits.val.get(r.id) is not None and splits.val[r.id].size}
    out = {}
    for rid, Y in val.items():
        regime = dataset.regime(rid)
        try:
            Yhat = flow_map(params, regime_context(params, regime), control, cfg.flow)
            out[rid] = sinkhorn_w2(Yhat, Y, cfg.sinkhorn)[0]
        except DivergenceError:
            out[rid] = DIVERGENCE_PENALTY
    if not out:
        return np.nan, out
    return float(np.mean(list(out.values()))), out


# -- fit -----------------------------------------------------------------------

LOG_HEADER = "epoch\tregime\tsplit\tw2\tloss\twall_time\n"


def _write_log_rows(path: Path, rec: EpochRecord, lam_term: float, val_rows: dict) -> None:
    with open(path, "a") as fh:
        for rid, w in rec.regime_w2.items():
            fh.write(f"{rec.epoch}\t{rid}\ttrain\t{w!r}\t{w + lam_term!r}\t{rec.wall_time:.3f}\n")
        for rid, w in val_rows.items():
            fh.write(f"{rec.epoch}\t{rid}\tval\t{w!r}\t{w!r}\t{rec.wall_time:.3f}\n")
        fh.write(f"{rec.epoch}\t*\ttrain\t{rec.train_loss - lam_term!r}\t{rec.train_loss!r}\t{rec.wall_time:.3f}\n")
        fh.write(f"{rec.epoch}\t*\tval\t{rec.val_w2!r}\t{rec.val_w2!r}\t{rec.wall_time:.3f}\n")


def new_state(dataset: PerturbDataset, cfg: TrainConfig, params: ModelParams | None = None) -> TrainState:
    if params is None:
        params = init_params(dataset.d, cfg.n_modules, dataset.regimes, seed=cfg.seed,
                             strength=cfg.init_strength, learn_s=cfg.learn_s)
    else:
        params = params.with_regimes(dataset.regimes, cfg.init_strength)
    return TrainState(params=params, seed=cfg.seed)


def fit(dataset: PerturbDataset, cfg: TrainConfig = TrainConfig(), splits: SplitSpec | None = None,
        state: TrainState | None = None, out_dir=None, vocab_in_checkpoint: bool = True,
        callback: Callable[[TrainState, EpochRecord], None] | None = None
        ) -> tuple[TrainState, list[EpochRecord]]:
    """Train until ``max_epochs`` or until validation W2 stalls for more than ``patience`` epochs.

    History entry 0 is the validation W2 of the untrained parameters. The
    returned state keeps the last iterate in ``params`` and the best-validation
    iterate in ``best_params``. ``out_dir`` receives ``train_log.tsv``,
    ``best.json`` and, with ``checkpoint_every``, periodic checkpoints.
    """
    regs = training_regimes(dataset)
    if splits is None:
        splits = split_dataset(dataset, cfg.seed)
    for r in [dataset.regime(dataset.control_id), *regs]:
        if splits.train[r.id].size == 0:
            raise ValueError(f"regime {r.id!r} has no training cells")
    state = state or new_state(dataset, cfg)
    out = Path(out_dir) if out_dir is not None else None
    log_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "train_log.tsv"
        if state.epoch == 0 or not log_path.exists():
            log_path.write_text(LOG_HEADER)

    history: list[EpochRecord] = []
    t0 = time.perf_counter()
    if state.epoch == 0:
        v0, vrows = validation_w2(state.params, dataset, cfg, splits)
        rec = EpochRecord(0, float("nan"), v0, {}, time.perf_counter() - t0, [])
        history.append(rec)
        state.best_val, state.best_params, state.best_epoch = v0, state.params, 0
        if log_path:
            _write_log_rows(log_path, rec, 0.0, vrows)

    while state.epoch < cfg.max_epochs:
        state, info = train_epoch(state, dataset, cfg, splits)
        w2s = info["w2"]
        lam = l1_penalty(state.params, cfg.lambda_l1)
        train_loss = float(np.mean(list(w2s.values()))) + lam
        v, vrows = validation_w2(state.params, dataset, cfg, splits)
        rec = EpochRecord(state.epoch, train_loss, v, w2s, time.perf_counter() - t0, info["skipped"])
        history.append(rec)
        if log_path:
            _write_log_rows(log_path, rec, lam, vrows)
        improved = np.isfinite(v) and v < state.best_val
        if improved:
            state.best_val, state.best_params, state.best_epoch = v, state.params, state.epoch
            state.bad_epochs = 0
            if out is not None:
                save_state(out / "best.json", state, dataset, cfg)
        else:
            state.bad_epochs += 1
        if out is not None and cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0:
            save_state(out / f"epoch{state.epoch:05d}.json", state, dataset, cfg)
        if callback is not None:
            callback(state, rec)
        log.info("epoch %d train %.4f val %.4f", state.epoch, train_loss, v)
        if state.bad_epochs > cfg.early_stop_patience:
            break
    if out is not None:
        save_state(out / "last.json", state, dataset, cfg)
        if not (out / "best.json").exists():
            save_state(out / "best.json", state, dataset, cfg)
    return state, history


# -- persistence ------------------------------------------------------------------

def config_to_dict(cfg: TrainConfig) -> dict:
    doc = asdict(cfg)
    doc["flow"]["scheme"] = cfg.flow.scheme.value
    return doc


def config_from_dict(doc: dict) -> TrainConfig:
    doc = dict(doc)
    doc["diffusion"] = DiffusionConfig(**doc.get("diffusion", {}))
    doc["flow"] = FlowSpec(**doc.get("flow", {}))
    doc["sinkhorn"] = SinkhornConfig(**doc.get("sinkhorn", {}))
    return TrainConfig(**doc)


def _arrays(d: dict) -> dict:
    return {k: np.asarray(v).tolist() for k, v in d.items()}


def save_state(path, state: TrainState, dataset: PerturbDataset | None, cfg: TrainConfig) -> None:
    """Model checkpoint (best parameters) with the optimizer state needed to resume."""
    best = state.best_params if state.best_params is not None else state.params
    doc = {
        "format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
        "genes": list(dataset.vocab.names) if dataset is not None else None,
        "params": params_to_dict(best),
        "regimes": [r.to_dict() for r in dataset.regimes] if dataset is not None else [],
        "train": {
            "current": params_to_dict(state.params), "m": _arrays(state.m), "v": _arrays(state.v),
            "step": state.step, "epoch": state.epoch,
            "best_val": state.best_val if np.isfinite(state.best_val) else None,
            "best_epoch": state.best_epoch, "bad_epochs": state.bad_epochs,
            "visits": state.visits, "seed": state.seed, "events": state.events,
            "config": config_to_dict(cfg),
        },
    }
    Path(path).write_text(json.dumps(doc))


def load_state(path) -> tuple[TrainState, TrainConfig]:
    best, _, extra = load_checkpoint(path)
    tr = extra.get("train")
    if tr is None:
        raise ValueError(f"{path}: checkpoint carries no optimizer state")
    state = TrainState(
        params=params_from_dict(tr["current"]),
        m={k: np.asarray(v, dtype=float) for k, v in tr["m"].items()},
        v={k: np.asarray(v, dtype=float) for k, v in tr["v"].items()},
        step=tr["step"], epoch=tr["epoch"],
        best_val=np.inf if tr["best_val"] is None else tr["best_val"],
        best_params=best, best_epoch=tr["best_epoch"], bad_epochs=tr["bad_epochs"],
        visits=dict(tr["visits"]), seed=tr["seed"], events=list(tr["events"]),
    )
    return state, config_from_dict(tr["config"])


def resume(path, dataset: PerturbDataset, splits: SplitSpec | None = None, out_dir=None,
           **overrides) -> tuple[TrainState, list[EpochRecord]]:
    """Continue a run from a checkpoint; epoch numbering carries on."""
    state, cfg = load_state(path)
    if overrides:
        cfg = replace(cfg, **overrides)
    return fit(dataset, cfg, splits, state=state, out_dir=out_dir)

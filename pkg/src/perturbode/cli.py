"""Command-line entry point: ``perturbode <command> --config run.json``.

Commands: simulate | preprocess | train | predict | extract-grn | evaluate | baseline-scm | sweep.
Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import itertools
import json
import logging
import os
import platform
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Literal, Optional

import numpy as np
import pandas as pd
import pydantic
import scipy
from pydantic import BaseModel, ConfigDict, Field

from . import __version__
from .core import (GeneVocab, PerturbDataset, Regime, RegimeKind, SplitSpec, mann_whitney_filter,
                   read_dataset, select_genes, split, write_dataset)
from .metrics import EvalConfig, evaluate_grn, pca_fit_project, read_dense, read_edges
from .model import extract_grn, load_checkpoint, regime_context
from .odeint import DivergenceError, FlowSpec, flow_map
from .train import DiffusionConfig, TrainConfig, fit, resume
from .transport import SinkhornConfig, sinkhorn_w2
from . import sim

log = logging.getLogger("perturbode")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class ConfigError(Exception):
    pass


class NumericFailure(Exception):
    pass


# -- configuration schema ---------------------------------------------------------------

class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataCfg(_Strict):
    path: Optional[str] = None
    log1p_input: bool = True
    kind: Literal["perfect", "shift", "knockout"] = "perfect"
    regimes_path: Optional[str] = None
    split: Optional[str] = None
    truth: Optional[str] = None


class SimulateCfg(_Strict):
    generator: Literal["sergio", "boolode", "linear-scm"] = "sergio"
    d: int = Field(100, ge=1)
    n_edges: int = Field(500, ge=0)
    graph: Optional[str] = None  # truth TSV to simulate from instead of a random DAG
    n_regimes: int = Field(100, ge=0)
    targets_per_regime: int = Field(5, ge=1)
    single_gene_regimes: bool = False  # one regime per gene (BoolODE layout)
    n_cells: int = Field(100, ge=1)
    log1p: bool = True
    rules: Optional[str] = None
    horizon: float = Field(1000.0, gt=0)
    dt: Optional[float] = Field(None, gt=0)
    overexpression: float = 20.0
    scm: dict = Field(default_factory=lambda: {"mu": 1.0, "sigma": 0.5, "mu_gamma": 5.0, "sigma_gamma": 0.5,
                                               "sigma_delta_gamma": 0.5, "weight_low": 0.5, "weight_high": 1.5})


class PreprocessCfg(_Strict):
    normalize: bool = False
    p_threshold: float = Field(0.1, gt=0, le=1)
    min_cells: int = Field(10, ge=0)
    k_hvg: Optional[int] = Field(None, ge=0)
    extra_genes: list[str] = Field(default_factory=list)
    val_fraction: float = Field(0.2, ge=0, lt=1)


class ModelCfg(_Strict):
    l: int = Field(100, ge=1)
    learn_s: bool = False
    init_strength: float = 10.0


class FlowCfg(_Strict):
    T: float = Field(25.0, ge=0)
    steps: int = Field(50, ge=1)
    scheme: Literal["rk4", "dopri5"] = "rk4"


class SinkhornCfg(_Strict):
    epsilon: float = Field(0.05, gt=0)
    debiased: bool = True
    iters: int = Field(500, ge=1)
    tol: float = Field(1e-6, gt=0)


class DiffusionCfg(_Strict):
    enabled: bool = False
    dt: float = Field(0.3, ge=0)
    t_reduced: float = Field(5.0, ge=0)
    steps: int = Field(50, ge=1)


class TrainCfg(_Strict):
    lambda_l1: float = Field(1e-3, ge=0)
    lr: float = Field(1e-3, ge=0)
    epochs: int = Field(100, ge=0)
    patience: int = Field(10, ge=0)
    batch_cap: int = Field(256, ge=1)
    diffusion: DiffusionCfg = DiffusionCfg()
    checkpoint_every: int = Field(0, ge=0)


class EvalCfg(_Strict):
    grn: Optional[str] = None  # checkpoint JSON, edge-list TSV or dense TSV
    threshold: Literal["sigma", "fixed"] = "sigma"
    c: float = Field(0.1, gt=0)
    epsilon: float = Field(0.0, ge=0)
    sign_aware: bool = True
    exclude_diagonal: bool = True
    permutations: int = Field(10_000, ge=1)
    statistic: Literal["f1", "recall", "precision"] = "f1"
    recall_only: bool = False
    grid: Optional[list[float]] = None


class RegimeSpec(_Strict):
    id: str
    targets: list[str] = Field(default_factory=list)
    kind: Literal["control", "perfect", "shift", "knockout"] = "perfect"
    strength: Optional[float] = None


class PredictCfg(_Strict):
    checkpoint: Optional[str] = None
    regimes: list[RegimeSpec] = Field(default_factory=list)
    pca_dims: Optional[int] = Field(None, ge=1)


class ScmCfg(_Strict):
    grn: Optional[str] = None
    n_cells: Optional[int] = Field(None, ge=1)
    threshold_c: float = Field(0.1, gt=0)


class SweepCfg(_Strict):
    lambdas: list[float] = Field(default_factory=lambda: [1e-3])
    modules: list[int] = Field(default_factory=lambda: [100])
    n_perturbations: list[Optional[int]] = Field(default_factory=lambda: [None])
    seeds: list[int] = Field(default_factory=lambda: [0])
    workers: Optional[int] = Field(None, ge=1)


class RunConfig(_Strict):
    seed: int = 0
    output_dir: str = "out"
    data: DataCfg = DataCfg()
    simulate: SimulateCfg = SimulateCfg()
    preprocess: PreprocessCfg = PreprocessCfg()
    model: ModelCfg = ModelCfg()
    flow: FlowCfg = FlowCfg()
    sinkhorn: SinkhornCfg = SinkhornCfg()
    train: TrainCfg = TrainCfg()
    eval: EvalCfg = EvalCfg()
    predict: PredictCfg = PredictCfg()
    scm: ScmCfg = ScmCfg()
    sweep: SweepCfg = SweepCfg()


def load_config(path) -> RunConfig:
    """Parse a config (or a manifest, whose ``config`` entry is used)."""
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if isinstance(doc, dict) and "config_hash" in doc and "config" in doc:
        doc = doc["config"]
    return parse_config(doc)


def parse_config(doc: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(doc)
    except pydantic.ValidationError as exc:
        raise ConfigError(str(exc)) from None


def config_hash(cfg: RunConfig) -> str:
    canon = json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def to_train_config(cfg: RunConfig) -> TrainConfig:
    t, d = cfg.train, cfg.train.diffusion
    return TrainConfig(
        lambda_l1=t.lambda_l1, learning_rate=t.lr, max_epochs=t.epochs, batch_cap=t.batch_cap,
        diffusion=DiffusionConfig(d.enabled, d.dt, d.t_reduced, d.steps),
        early_stop_patience=t.patience, seed=cfg.seed, n_modules=cfg.model.l,
        flow=flow_spec(cfg), sinkhorn=sinkhorn_config(cfg), learn_s=cfg.model.learn_s,
        init_strength=cfg.model.init_strength, checkpoint_every=t.checkpoint_every,
    )


def flow_spec(cfg: RunConfig) -> FlowSpec:
    return FlowSpec(cfg.flow.T, cfg.flow.steps, cfg.flow.scheme)


def sinkhorn_config(cfg: RunConfig) -> SinkhornConfig:
    s = cfg.sinkhorn
    return SinkhornConfig(epsilon=s.epsilon, max_iters=s.iters, tol=s.tol, debiased=s.debiased)


def to_eval_config(cfg: RunConfig) -> EvalConfig:
    e = cfg.eval
    kw = dict(mode=e.threshold, c=e.c, epsilon=e.epsilon, sign_aware=e.sign_aware,
              exclude_diagonal=e.exclude_diagonal, n_permutations=e.permutations, seed=cfg.seed,
              statistic=e.statistic)
    if e.grid is not None:
        kw["grid"] = tuple(e.grid)
    return EvalConfig(**kw)


# -- helpers ------------------------------------------------------------------------

def write_manifest(out: Path, command: str, cfg: RunConfig, outputs: list[str], **extra) -> Path:
    doc = {
        "command": command, "config_hash": config_hash(cfg), "seed": cfg.seed,
        "versions": {"perturbode": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "pandas": pd.__version__, "python": platform.python_version()},
        "outputs": sorted(outputs), "config": cfg.model_dump(mode="json"), **extra,
    }
    path = out / f"manifest.{command}.json"
    path.write_text(json.dumps(doc, indent=1))
    return path


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _need(value, what: str):
    if value is None:
        raise ConfigError(f"missing required setting: {what}")
    return value


def _kind(name: str) -> RegimeKind:
    return RegimeKind(name)


def load_data(cfg: RunConfig) -> PerturbDataset:
    path = Path(_need(cfg.data.path, "data.path"))
    if not path.exists():
        raise ConfigError(f"dataset not found: {path}")
    try:
        return read_dataset(path, cfg.data.log1p_input, _kind(cfg.data.kind), cfg.data.regimes_path)
    except KeyError as exc:
        raise ConfigError(f"{path}: {exc.args[0]}") from None


def load_split(cfg: RunConfig, ds: PerturbDataset) -> SplitSpec:
    if cfg.data.split:
        spec = SplitSpec.from_json(Path(cfg.data.split).read_text())
        missing = [r.id for r in ds.regimes if r.id not in spec.train]
        if missing:
            raise ConfigError(f"split file lacks regimes {missing}")
        return spec
    return split(ds, cfg.seed, cfg.preprocess.val_fraction)


def load_grn(path, vocab: GeneVocab) -> np.ndarray:
    """[source, target] matrix from a checkpoint, an edge list, or a dense TSV; aligned to ``vocab``."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"GRN file not found: {path}")
    if path.suffix == ".json":
        params, ck_vocab, _ = load_checkpoint(path)
        G = extract_grn(params, ck_vocab).source_target()
        return _align(G, ck_vocab or GeneVocab(tuple(vocab.names[:params.d])), vocab, path)
    with open(path) as fh:
        header = fh.readline().rstrip("\n").split("\t")
    if header[:2] == ["source", "target"]:
        return read_edges(path, vocab)
    G, dense_vocab = read_dense(path)
    return _align(G, dense_vocab, vocab, path)


def _align(G: np.ndarray, have: GeneVocab, want: GeneVocab, path) -> np.ndarray:
    missing = [g for g in want.names if g not in have]
    if missing:
        raise ConfigError(f"{path}: vocabulary mismatch, genes missing from prediction: {missing}")
    idx = have.indices(want.names)
    return G[np.ix_(idx, idx)]


def _truth_vocab(path) -> GeneVocab:
    df = pd.read_csv(path, sep="\t", dtype={"source": str, "target": str})
    return GeneVocab(tuple(dict.fromkeys(list(df["source"]) + list(df["target"]))))


# -- commands ----------------------------------------------------------------------

def cmd_simulate(cfg: RunConfig) -> dict:
    s, seed = cfg.simulate, cfg.seed
    out = _out_dir(cfg)
    if s.generator == "boolode":
        rules = sim.load_rules(s.rules) if s.rules else sim.example_rules()
        params = sim.BoolOdeParams(horizon=s.horizon, overexpression=s.overexpression,
                                   **({"dt": s.dt} if s.dt else {}))
        vocab = rules.vocab
        regimes = _sim_regimes(cfg, vocab)
        ds = sim.boolode_dataset(rules, params, regimes, s.n_cells, seed)
        truth = sim.SimGrn(rules.signed_adjacency() * (1 - np.eye(rules.d)), rules.genes)
    else:
        if s.graph:
            grn = _grn_from_tsv(s.graph)
        else:
            grn = sim.random_dag(s.d, s.n_edges, seed)
        vocab = grn.vocab
        regimes = _sim_regimes(cfg, vocab)
        truth = grn
        if s.generator == "sergio":
            if not grn.acyclic:
                raise ConfigError("the SERGIO generator needs an acyclic graph")
            sde = sim.sample_sde_params(grn, seed, **({"dt": s.dt} if s.dt else {}))
            ds = sim.sergio_dataset(grn, sde, regimes, s.n_cells, seed, s.log1p)
        else:
            sc = dict(s.scm)
            rng = np.random.default_rng(seed)
            W = grn.adjacency * rng.uniform(sc.pop("weight_low", 0.5), sc.pop("weight_high", 1.5), grn.adjacency.shape)
            params = sim.LinearScmParams(W, **sc)
            ds = sim.scm_dataset(params, regimes, vocab, s.n_cells, seed)
    write_dataset(ds, out / "dataset.tsv")
    truth.write_tsv(out / "truth.tsv")
    outputs = ["dataset.tsv", "dataset.tsv.regimes.json", "truth.tsv"]
    write_manifest(out, "simulate", cfg, outputs, n_cells=int(sum(m.shape[0] for m in ds.samples.values())))
    return {"dataset": str(out / "dataset.tsv"), "truth": str(out / "truth.tsv")}


def _sim_regimes(cfg: RunConfig, vocab: GeneVocab) -> list[Regime]:
    s = cfg.simulate
    if s.single_gene_regimes:
        return sim.single_target_regimes(vocab)
    return sim.make_regimes(len(vocab), s.n_regimes, min(s.targets_per_regime, len(vocab)), cfg.seed,
                            names=vocab.names)


def _grn_from_tsv(path) -> sim.SimGrn:
    vocab = _truth_vocab(path)
    M = np.sign(read_edges(path, vocab))
    return sim.SimGrn(M, vocab.names)


def cmd_preprocess(cfg: RunConfig) -> dict:
    p = cfg.preprocess
    out = _out_dir(cfg)
    ds = load_data(cfg)
    if p.normalize and cfg.data.log1p_input:
        raise ConfigError("preprocess.normalize needs data.log1p_input = false (raw counts)")
    n0 = len(ds.interventions)
    ds = mann_whitney_filter(ds, p.p_threshold, p.min_cells)
    if p.k_hvg is not None:
        if p.k_hvg > ds.d:
            raise ConfigError(f"k_hvg={p.k_hvg} exceeds the {ds.d} genes")
        ds = select_genes(ds, p.k_hvg, p.extra_genes)
    spec = split(ds, cfg.seed, p.val_fraction)
    write_dataset(ds, out / "processed.tsv")
    (out / "split.json").write_text(spec.to_json())
    (out / "filter_report.json").write_text(json.dumps(ds.metadata, indent=1, default=str))
    write_manifest(out, "preprocess", cfg, ["processed.tsv", "processed.tsv.regimes.json", "split.json",
                                             "filter_report.json"],
                   regimes_in=n0, regimes_kept=len(ds.interventions), genes=ds.d)
    return {"dataset": str(out / "processed.tsv"), "split": str(out / "split.json")}


def cmd_train(cfg: RunConfig, resume_from: str | None = None) -> dict:
    out = _out_dir(cfg)
    ds = load_data(cfg)
    spec = load_split(cfg, ds)
    tcfg = to_train_config(cfg)
    if tcfg.flow.scheme.value != "rk4":
        raise ConfigError("training needs flow.scheme = rk4")
    try:
        if resume_from:
            state, hist = resume(resume_from, ds, spec, out, max_epochs=tcfg.max_epochs)
        else:
            state, hist = fit(ds, tcfg, spec, out_dir=out)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    rows = [{"epoch": h.epoch, "train_loss": h.train_loss, "val_w2": h.val_w2, "skipped": ",".join(h.skipped)}
            for h in hist]
    pd.DataFrame(rows).to_csv(out / "history.tsv", sep="\t", index=False, na_rep="NA")
    finite = [h for h in hist[1:] if np.isfinite(h.train_loss) and len(h.skipped) < len(h.regime_w2)]
    if hist[1:] and not finite:
        raise NumericFailure("every training update diverged")
    write_manifest(out, "train", cfg, ["best.json", "last.json", "train_log.tsv", "history.tsv"],
                   best_epoch=state.best_epoch, best_val_w2=state.best_val, epochs_run=state.epoch)
    return {"checkpoint": str(out / "best.json"), "best_val_w2": state.best_val}


def _predict_regimes(cfg: RunConfig, vocab: GeneVocab, ds: PerturbDataset | None) -> list[Regime]:
    if cfg.predict.regimes:
        regs = []
        for r in cfg.predict.regimes:
            unknown = [g for g in r.targets if g not in vocab]
            if unknown:
                raise ConfigError(f"regime {r.id!r}: unknown genes {unknown}")
            strength = () if r.strength is None else (r.strength,) * len(r.targets)
            regs.append(Regime(r.id, tuple(vocab.indices(r.targets)), _kind(r.kind), strength))
        return regs
    if ds is None:
        raise ConfigError("predict.regimes is empty and no dataset was given")
    return list(ds.interventions)


def cmd_predict(cfg: RunConfig) -> dict:
    out = _out_dir(cfg)
    params, vocab, _ = load_checkpoint(_need(cfg.predict.checkpoint, "predict.checkpoint"))
    ds = load_data(cfg)
    if vocab is not None and vocab.names != ds.vocab.names:
        raise ConfigError("dataset genes differ from the checkpoint genes")
    regimes = _predict_regimes(cfg, ds.vocab, ds)
    params = params.with_regimes(regimes, cfg.model.init_strength)
    control = ds.control
    spec = flow_spec(cfg)
    preds, rows = {}, []
    baseline = control.mean(axis=0, keepdims=True)
    scfg = sinkhorn_config(cfg)
    for r in regimes:
        try:
            preds[r.id] = flow_map(params, regime_context(params, r), control, spec)
        except DivergenceError as exc:
            raise NumericFailure(f"regime {r.id}: {exc}") from None
        if r.id in ds.samples and not r.is_control:
            obs = ds.samples[r.id]
            rows.append({"regime": r.id, "w2": sinkhorn_w2(preds[r.id], obs, scfg)[0],
                         "w2_mean_baseline": sinkhorn_w2(baseline, obs, scfg)[0],
                         "trained": r.id in {x.id for x in ds.interventions} and cfg.predict.regimes == []})
    pred_ds = PerturbDataset(ds.vocab, (Regime(ds.control_id), *[r for r in regimes if not r.is_control]),
                             {ds.control_id: control, **{k: v for k, v in preds.items()}}, ds.control_id)
    write_dataset(pred_ds, out / "predictions.tsv")
    outputs = ["predictions.tsv", "predictions.tsv.regimes.json"]
    if rows:
        pd.DataFrame(rows).to_csv(out / "w2.tsv", sep="\t", index=False)
        outputs.append("w2.tsv")
    if cfg.predict.pca_dims:
        ref = ds.all_cells()
        dims = min(cfg.predict.pca_dims, *ref.shape)
        _, basis = pca_fit_project(ref, dims)
        frames = []
        for src, mats in (("observed", ds.samples), ("predicted", preds)):
            for rid, M in mats.items():
                Z = basis.project(M)
                df = pd.DataFrame(Z, columns=[f"pc{i + 1}" for i in range(dims)])
                df.insert(0, "cell", np.arange(M.shape[0]))
                df.insert(0, "source", src)
                df.insert(0, "regime", rid)
                frames.append(df)
        pd.concat(frames).to_csv(out / "pca.tsv", sep="\t", index=False)
        outputs.append("pca.tsv")
    write_manifest(out, "predict", cfg, outputs)
    return {"predictions": str(out / "predictions.tsv"), "w2": rows}


def cmd_extract_grn(checkpoint, out_path, dense: bool = False, threshold_c: float | None = None) -> dict:
    params, vocab, _ = load_checkpoint(checkpoint)
    est = extract_grn(params, vocab)
    if threshold_c is not None:
        from .metrics import threshold_grn
        keep = threshold_grn(est, EvalConfig(c=threshold_c, sign_aware=False, exclude_diagonal=False)) != 0
        est = replace(est, weights=np.where(keep.T, est.weights, 0.0))
    if dense:
        est.write_dense(out_path)
    else:
        est.write_edges(out_path)
    return {"grn": str(out_path), "n_edges": int(np.count_nonzero(est.weights))}


def cmd_evaluate(cfg: RunConfig) -> dict:
    out = _out_dir(cfg)
    truth_path = _need(cfg.data.truth, "data.truth")
    vocab = load_data(cfg).vocab if cfg.data.path else _truth_vocab(truth_path)
    try:
        T = read_edges(truth_path, vocab)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    G = load_grn(_need(cfg.eval.grn, "eval.grn"), vocab)
    try:
        report = evaluate_grn(G, T, to_eval_config(cfg), recall_only=cfg.eval.recall_only)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    report.extra["genes"] = len(vocab)
    report.write(out / "report.json", out / "thresholds.tsv")
    write_manifest(out, "evaluate", cfg, ["report.json", "thresholds.tsv"])
    return json.loads(report.to_json())


def cmd_baseline_scm(cfg: RunConfig) -> dict:
    out = _out_dir(cfg)
    ds = load_data(cfg)
    G = load_grn(_need(cfg.scm.grn or cfg.eval.grn, "scm.grn"), ds.vocab)
    from .metrics import threshold_grn
    keep = threshold_grn(G, EvalConfig(c=cfg.scm.threshold_c, sign_aware=False)) != 0
    params = sim.scm_params_from_grn(np.where(keep, G, 0.0), ds)
    n = cfg.scm.n_cells
    samples = {r.id: sim.sample_linear_scm(params, r, n or ds.samples[r.id].shape[0], cfg.seed)
               for r in ds.regimes}
    scm_ds = PerturbDataset(ds.vocab, ds.regimes, samples, ds.control_id, {"generator": "linear-scm"})
    write_dataset(scm_ds, out / "scm_samples.tsv")
    scfg = sinkhorn_config(cfg)
    rows = [{"regime": r.id, "w2": sinkhorn_w2(samples[r.id], ds.samples[r.id], scfg)[0]} for r in ds.interventions]
    pd.DataFrame(rows).to_csv(out / "scm_w2.tsv", sep="\t", index=False)
    stats = {k: getattr(params, k) for k in ("mu", "sigma", "mu_gamma", "sigma_gamma", "sigma_delta_gamma")}
    (out / "scm_params.json").write_text(json.dumps({**stats, "n_edges": int(np.count_nonzero(params.W_dag))}, indent=1))
    write_manifest(out, "baseline-scm", cfg, ["scm_samples.tsv", "scm_samples.tsv.regimes.json", "scm_w2.tsv",
                                               "scm_params.json"])
    return {"samples": str(out / "scm_samples.tsv"), "w2": rows}


def _sweep_point(args) -> dict:
    doc, point = args
    row = dict(point)
    try:
        cfg = parse_config(doc)
        ds_all = load_data(cfg)
        sub = cfg.output_dir
        if point["n_perturbations"] is not None:
            ids = [r.id for r in ds_all.interventions]
            pick = np.random.default_rng(cfg.seed).permutation(len(ids))[: point["n_perturbations"]]
            keep = [ids[i] for i in sorted(pick)]
            ds_all = ds_all.subset(keep)
            sub_path = Path(sub) / "subset.tsv"
            write_dataset(ds_all, sub_path)
            cfg = cfg.model_copy(update={"data": cfg.data.model_copy(update={"path": str(sub_path),
                                                                              "regimes_path": None,
                                                                              "split": None})})
        res = cmd_train(cfg)
        row.update(status="ok", best_val_w2=res["best_val_w2"])
        if cfg.data.truth:
            ev = cfg.model_copy(update={"eval": cfg.eval.model_copy(update={"grn": res["checkpoint"]})})
            rep = cmd_evaluate(ev)
            row.update({k: rep[k] for k in ("auprc", "precision", "recall", "f1", "fdr", "p_value",
                                            "n_predicted_edges")})
    except Exception as exc:  # one failed grid point must not abort the sweep
        row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
        log.debug("sweep point failed:\n%s", traceback.format_exc())
    return row


def cmd_sweep(cfg: RunConfig) -> dict:
    out = _out_dir(cfg)
    sw = cfg.sweep
    base = cfg.model_dump(mode="json")
    jobs = []
    for lam, l, npert, seed in itertools.product(sw.lambdas, sw.modules, sw.n_perturbations, sw.seeds):
        name = f"lam{lam:g}_l{l}_n{'all' if npert is None else npert}_s{seed}"
        doc = json.loads(json.dumps(base))
        doc["seed"] = seed
        doc["output_dir"] = str(out / name)
        doc["model"]["l"] = l
        doc["train"]["lambda_l1"] = lam
        Path(doc["output_dir"]).mkdir(parents=True, exist_ok=True)
        jobs.append((doc, {"run": name, "lambda_l1": lam, "modules": l, "n_perturbations": npert, "seed": seed}))
    workers = sw.workers or int(os.environ.get("PERTURBODE_THREADS", "1"))
    workers = max(1, min(workers, len(jobs)))
    if workers == 1:
        rows = [_sweep_point(j) for j in jobs]
    else:
        with ProcessPoolExecutor(workers) as pool:
            rows = list(pool.map(_sweep_point, jobs))
    df = pd.DataFrame(rows)
    df.to_csv(out / "sweep.tsv", sep="\t", index=False, na_rep="NA")
    write_manifest(out, "sweep", cfg, ["sweep.tsv"], n_points=len(rows),
                   n_failed=int((df["status"] != "ok").sum()))
    return {"sweep": str(out / "sweep.tsv"), "rows": rows}


# -- argument parsing ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="perturbode", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, helptext in [("simulate", "generate a dataset and its ground-truth network"),
                           ("preprocess", "filter regimes, select genes, split train/validation"),
                           ("train", "fit the model"),
                           ("predict", "push control cells through trained or held-out interventions"),
                           ("evaluate", "score a network against a reference"),
                           ("baseline-scm", "sample the linear-SCM baseline from a network"),
                           ("sweep", "train and evaluate over a hyperparameter grid")]:
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--config", required=True, help="run config JSON (a manifest also works)")
        sp.add_argument("--out", help="override output_dir")
        if name == "train":
            sp.add_argument("--resume", help="checkpoint to continue from")
    sp = sub.add_parser("extract-grn", help="write the network of a checkpoint")
    sp.add_argument("checkpoint")
    sp.add_argument("--out", required=True)
    sp.add_argument("--dense", action="store_true", help="dense matrix instead of an edge list")
    sp.add_argument("--threshold-c", type=float, help="drop edges below c * std(G)")
    return p


def run(argv=None) -> tuple[int, dict | None]:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "extract-grn":
            return EXIT_OK, cmd_extract_grn(args.checkpoint, args.out, args.dense, args.threshold_c)
        cfg = load_config(args.config)
        if args.out:
            cfg = cfg.model_copy(update={"output_dir": args.out})
        handler = {"simulate": cmd_simulate, "preprocess": cmd_preprocess, "predict": cmd_predict,
                   "evaluate": cmd_evaluate, "baseline-scm": cmd_baseline_scm, "sweep": cmd_sweep}
        if args.command == "train":
            return EXIT_OK, cmd_train(cfg, args.resume)
        return EXIT_OK, handler[args.command](cfg)
    except (ConfigError, FileNotFoundError, KeyError) as exc:
        print(f"perturbode: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG, None
    except (NumericFailure, DivergenceError, FloatingPointError) as exc:
        print(f"perturbode: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC, None
    except ValueError as exc:
        print(f"perturbode: invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG, None


def main(argv=None) -> int:
    code, result = run(argv)
    if result is not None:
        print(json.dumps(result, indent=1, default=str))
    return code


if __name__ == "__main__":
    sys.exit(main())

"""GRN scoring, Erdos-Renyi permutation significance, and prediction-quality metrics.

Graph matrices use the ``[source, target]`` layout of edge lists. A
:class:`~perturbode.model.GrnEstimate` is converted with ``source_target()``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import pandas as pd

from .core import GeneVocab
from .model import GrnEstimate

DEFAULT_GRID = np.logspace(-2, 1, 20)
STATISTIC_NAMES = ("f1", "recall", "precision")


class ThresholdMode(str, Enum):
    FIXED = "fixed"  # |G| >= epsilon
    SIGMA = "sigma"  # |G| >= c * std(G)


@dataclass(frozen=True)
class EvalConfig:
    mode: ThresholdMode = ThresholdMode.SIGMA
    c: float = 0.1
    epsilon: float = 0.0
    sign_aware: bool = True
    exclude_diagonal: bool = True
    n_permutations: int = 10_000
    seed: int = 0
    statistic: str = "f1"  # f1 | recall | precision
    grid: tuple[float, ...] = tuple(DEFAULT_GRID)

    def __post_init__(self):
        object.__setattr__(self, "mode", ThresholdMode(self.mode))
        if self.mode is ThresholdMode.SIGMA and self.c <= 0:
            raise ValueError("c must be positive")
        if self.n_permutations < 1:
            raise ValueError("need at least one permutation")
        if self.statistic not in STATISTIC_NAMES:
            raise ValueError(f"unknown statistic {self.statistic!r}; choose from {STATISTIC_NAMES}")


def _matrix(G) -> np.ndarray:
    if isinstance(G, GrnEstimate):
        return np.asarray(G.source_target(), dtype=float)
    G = np.asarray(G, dtype=float)
    if G.ndim != 2 or G.shape[0] != G.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {G.shape}")
    return G


def candidate_mask(d: int, exclude_diagonal: bool = True) -> np.ndarray:
    m = np.ones((d, d), dtype=bool)
    if exclude_diagonal:
        np.fill_diagonal(m, False)
    return m


# -- thresholding ----------------------------------------------------------------

def threshold_value(G, cfg: EvalConfig) -> float:
    G = _matrix(G)
    if cfg.mode is ThresholdMode.FIXED:
        return float(cfg.epsilon)
    return float(cfg.c * G.std())


def threshold_grn(G, cfg: EvalConfig = EvalConfig()) -> np.ndarray:
    """Integer adjacency: entries with |G| >= epsilon (and nonzero) survive; signed when sign-aware."""
    G = _matrix(G)
    eps = threshold_value(G, cfg)
    keep = (np.abs(G) >= eps) & (G != 0) & candidate_mask(G.shape[0], cfg.exclude_diagonal)
    out = np.sign(G) if cfg.sign_aware else np.ones_like(G)
    return (out * keep).astype(int)


# -- ranking metrics --------------------------------------------------------------

def edge_scores(scores, truth, sign_aware: bool = True) -> np.ndarray:
    """|scores|, with true edges whose predicted sign contradicts the truth sign set to 0."""
    S = _matrix(scores)
    T = _matrix(truth)
    s = np.abs(S)
    if sign_aware:
        wrong = (T != 0) & (np.sign(S) != np.sign(T))
        s = np.where(wrong, 0.0, s)
    return s


def average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """Step-interpolated area under the precision-recall curve; tied scores enter together."""
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels, dtype=bool).ravel()
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("truth has no positive edges")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]  # end of each tie block
    tp = np.cumsum(y)[last]
    k = last + 1
    precision = tp / k
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def auprc(scores, truth, cfg: EvalConfig = EvalConfig()) -> float:
    S, T = _matrix(scores), _matrix(truth)
    if S.shape != T.shape:
        raise ValueError(f"score shape {S.shape} != truth shape {T.shape}")
    m = candidate_mask(S.shape[0], cfg.exclude_diagonal)
    s = edge_scores(S, T, cfg.sign_aware)
    return average_precision(s[m], T[m] != 0)


# -- confusion-matrix metrics ---------------------------------------------------------

@dataclass(frozen=True)
class Prf:
    precision: float | None
    recall: float | None
    f1: float | None
    fdr: float | None
    tp: int
    fp: int
    fn: int


def confusion(pred, truth, sign_aware: bool = True, exclude_diagonal: bool = True) -> tuple[int, int, int]:
    """(TP, FP, FN); a predicted true edge with the wrong sign is both a FP and a FN."""
    P, T = _matrix(pred), _matrix(truth)
    m = candidate_mask(P.shape[0], exclude_diagonal)
    p, t = P[m], T[m]
    hit = (p != 0) & (t != 0)
    if sign_aware:
        hit &= np.sign(p) == np.sign(t)
    tp = int(hit.sum())
    return tp, int((p != 0).sum()) - tp, int((t != 0).sum()) - tp


def prf_fdr(pred, truth, sign_aware: bool = True, exclude_diagonal: bool = True,
            recall_only: bool = False) -> Prf:
    """Precision, recall, F1 and FDR; undefined values (no predictions, no truth) are None.

    ``recall_only`` is for truths that list positives but no verified negatives.
    """
    tp, fp, fn = confusion(pred, truth, sign_aware, exclude_diagonal)
    recall = tp / (tp + fn) if tp + fn else None
    if recall_only:
        return Prf(None, recall, None, None, tp, fp, fn)
    precision = tp / (tp + fp) if tp + fp else None
    fdr = fp / (tp + fp) if tp + fp else None
    if precision is None or recall is None:
        f1 = None
    else:
        f1 = 0.0 if tp == 0 else 2 * precision * recall / (precision + recall)
    return Prf(precision, recall, f1, fdr, tp, fp, fn)


# -- permutation test ---------------------------------------------------------------

Statistic = Callable[[np.ndarray, np.ndarray], np.ndarray]


def _batch_counts(pred: np.ndarray, truth: np.ndarray):
    # pred (k, e) bool over candidate entries, truth (e,) bool
    tp = pred @ truth.astype(float)
    npred = pred.sum(axis=1)
    return tp, npred, float(truth.sum())


def f1_statistic(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """F1 per graph; graphs with no true positives score 0."""
    tp, npred, npos = _batch_counts(pred, truth)
    denom = npred + npos
    return np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)


def recall_statistic(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    tp, _, npos = _batch_counts(pred, truth)
    return tp / npos if npos else np.zeros_like(tp)


def precision_statistic(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    tp, npred, _ = _batch_counts(pred, truth)
    return np.divide(tp, npred, out=np.zeros_like(tp), where=npred > 0)


STATISTICS: dict[str, Statistic] = {"f1": f1_statistic, "recall": recall_statistic,
                                    "precision": precision_statistic}


def module_edge_statistic(d: int, module: Sequence[int], direction: str = "in",
                          exclude_diagonal: bool = True) -> Statistic:
    """Count of edges into (or out of) a gene set that are also truth edges."""
    sel = np.zeros((d, d), dtype=bool)
    idx = list(module)
    if direction == "in":
        sel[:, idx] = True
    elif direction == "out":
        sel[idx, :] = True
    else:
        raise ValueError("direction must be 'in' or 'out'")
    sel = sel[candidate_mask(d, exclude_diagonal)]

    def stat(pred, truth):
        return pred @ (truth & sel).astype(float)
    return stat


def statistic_value(statistic: Statistic, pred, truth, exclude_diagonal: bool = True) -> float:
    P, T = _matrix(pred), _matrix(truth)
    m = candidate_mask(P.shape[0], exclude_diagonal)
    return float(statistic((P[m] != 0)[None, :], T[m] != 0)[0])


def permutation_pvalue(tau: float, truth, density: float, statistic: Statistic | str = "f1",
                       n_permutations: int = 10_000, seed=0, exclude_diagonal: bool = True,
                       chunk: int = 2048) -> float:
    """(1 + #{tau* >= tau}) / (1 + n_permutations) over Erdos-Renyi graphs of the given density.

    Each candidate edge of a null graph is present independently with
    probability ``density``.
    """
    if n_permutations < 1:
        raise ValueError("need at least one permutation")
    if not 0 <= density <= 1:
        raise ValueError("density must lie in [0, 1]")
    stat = STATISTICS[statistic] if isinstance(statistic, str) else statistic
    T = _matrix(truth)
    t = T[candidate_mask(T.shape[0], exclude_diagonal)] != 0
    rng = np.random.default_rng(seed)
    hits, done = 0, 0
    while done < n_permutations:
        k = min(chunk, n_permutations - done)
        null = rng.random((k, t.size)) < density
        hits += int(np.count_nonzero(stat(null, t) >= tau))
        done += k
    return (1 + hits) / (1 + n_permutations)


def graph_density(pred, exclude_diagonal: bool = True) -> float:
    P = _matrix(pred)
    m = candidate_mask(P.shape[0], exclude_diagonal)
    return float(np.count_nonzero(P[m]) / m.sum())


# -- PCA and cell-type distance ---------------------------------------------------------

@dataclass(frozen=True)
class PcaBasis:
    mean: np.ndarray
    components: np.ndarray  # (dims, d), orthonormal rows
    variances: np.ndarray

    def project(self, X) -> np.ndarray:
        return (np.atleast_2d(np.asarray(X, dtype=float)) - self.mean) @ self.components.T

    def reconstruct(self, Z) -> np.ndarray:
        return Z @ self.components + self.mean


def pca_fit_project(X, dims: int) -> tuple[np.ndarray, PcaBasis]:
    """Principal components from the covariance eigendecomposition.

    Each component is flipped so its largest-magnitude loading is positive.
    """
    X = np.asarray(X, dtype=float)
    n, d = X.shape
    if not 1 <= dims <= min(n, d):
        raise ValueError(f"dims={dims} must lie in [1, min(n, d)={min(n, d)}]")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / max(n - 1, 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(-evals, kind="stable")[:dims]
    comps = evecs[:, order].T
    flip = np.sign(comps[np.arange(dims), np.argmax(np.abs(comps), axis=1)])
    comps = comps * np.where(flip == 0, 1.0, flip)[:, None]
    basis = PcaBasis(mean, comps, np.maximum(evals[order], 0.0))
    return basis.project(X), basis


@dataclass(frozen=True)
class CellTypeConfig:
    k: int = 10
    pca_dims: int = 50

    def __post_init__(self):
        if self.k < 1 or self.pca_dims < 1:
            raise ValueError("k and pca_dims must be >= 1")


def knn_class_probs(query: np.ndarray, ref: np.ndarray, labels: np.ndarray, classes: np.ndarray,
                    k: int) -> np.ndarray:
    """Class frequencies among the k nearest reference points; ties go to the lower index."""
    if k > ref.shape[0]:
        raise ValueError(f"k={k} exceeds the {ref.shape[0]} reference cells")
    dist = ((ref - query) ** 2).sum(axis=1)
    nearest = np.argsort(dist, kind="stable")[:k]
    return np.array([(labels[nearest] == c).mean() for c in classes])


def cell_type_distance(pred, obs, reference, labels, cfg: CellTypeConfig = CellTypeConfig()) -> float:
    """L1 distance between k-NN cell-type profiles of the mean predicted and mean observed cell.

    Both means are projected into a PCA space fit on ``reference``.
    """
    ref = np.asarray(reference, dtype=float)
    labels = np.asarray(labels)
    if labels.shape[0] != ref.shape[0]:
        raise ValueError("one label per reference cell required")
    if cfg.k > ref.shape[0]:
        raise ValueError(f"k={cfg.k} exceeds the {ref.shape[0]} reference cells")
    classes = np.unique(labels)
    dims = min(cfg.pca_dims, *ref.shape)
    ref_z, basis = pca_fit_project(ref, dims)
    zp = basis.project(np.asarray(pred, dtype=float).mean(axis=0))[0]
    zo = basis.project(np.asarray(obs, dtype=float).mean(axis=0))[0]
    cp = knn_class_probs(zp, ref_z, labels, classes, cfg.k)
    co = knn_class_probs(zo, ref_z, labels, classes, cfg.k)
    return float(np.abs(cp - co).sum())


# -- report ---------------------------------------------------------------------

@dataclass
class EvalReport:
    auprc: float
    precision: float | None
    recall: float | None
    f1: float | None
    fdr: float | None
    p_value: float | None
    n_predicted_edges: int
    sparsity: float  # fraction of candidate edges predicted
    threshold: float
    config: dict = field(default_factory=dict)
    rows: list = field(default_factory=list)  # one dict per threshold of the sweep
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, default=_json_default)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))

    def write(self, json_path, tsv_path=None) -> None:
        Path(json_path).write_text(self.to_json())
        if tsv_path is not None:
            pd.DataFrame(self.rows).to_csv(tsv_path, sep="\t", index=False, na_rep="NA")


def _json_default(obj):
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def threshold_sweep(G, truth, cfg: EvalConfig = EvalConfig(), grid: Sequence[float] | None = None,
                    recall_only: bool = False) -> list[dict]:
    """One row per c in ``grid`` (sigma-scaled thresholds)."""
    G = _matrix(G)
    rows = []
    for c in (cfg.grid if grid is None else grid):
        sub = EvalConfig(ThresholdMode.SIGMA, float(c), sign_aware=cfg.sign_aware,
                         exclude_diagonal=cfg.exclude_diagonal)
        pred = threshold_grn(G, sub)
        m = prf_fdr(pred, truth, cfg.sign_aware, cfg.exclude_diagonal, recall_only)
        rows.append({"c": float(c), "epsilon": threshold_value(G, sub),
                     "n_edges": int(np.count_nonzero(pred)), "precision": m.precision,
                     "recall": m.recall, "f1": m.f1, "fdr": m.fdr})
    return rows


def evaluate_grn(G, truth, cfg: EvalConfig = EvalConfig(), recall_only: bool = False,
                 permutation: bool = True) -> EvalReport:
    G, T = _matrix(G), _matrix(truth)
    if G.shape != T.shape:
        raise ValueError(f"prediction shape {G.shape} != truth shape {T.shape}")
    pred = threshold_grn(G, cfg)
    m = prf_fdr(pred, T, cfg.sign_aware, cfg.exclude_diagonal, recall_only)
    stat_name = "recall" if recall_only and cfg.statistic == "f1" else cfg.statistic
    p = None
    if permutation:
        pm = pred if not cfg.sign_aware else _sign_correct(pred, T)
        tau = statistic_value(STATISTICS[stat_name], pm, T, cfg.exclude_diagonal)
        p = permutation_pvalue(tau, T, graph_density(pred, cfg.exclude_diagonal), stat_name,
                               cfg.n_permutations, cfg.seed, cfg.exclude_diagonal)
    n_cand = int(candidate_mask(G.shape[0], cfg.exclude_diagonal).sum())
    n_edges = int(np.count_nonzero(pred))
    conf = asdict(cfg)
    conf["statistic"] = stat_name
    return EvalReport(
        auprc=auprc(G, T, cfg), precision=m.precision, recall=m.recall, f1=m.f1, fdr=m.fdr,
        p_value=p, n_predicted_edges=n_edges, sparsity=n_edges / n_cand,
        threshold=threshold_value(G, cfg), config=conf, rows=threshold_sweep(G, T, cfg, recall_only=recall_only),
    )


def _sign_correct(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    # wrong-sign predictions on true edges cannot count as hits in the unsigned null statistic
    wrong = (pred != 0) & (truth != 0) & (np.sign(pred) != np.sign(truth))
    return np.where(wrong, 0, pred)


# -- edge-list I/O --------------------------------------------------------------------

def read_edges(path, vocab: GeneVocab, value_col: str | None = None) -> np.ndarray:
    """Edge-list TSV (source, target[, sign|weight]) -> [source, target] matrix over ``vocab``.

    Unknown gene names raise a ValueError that lists them.
    """
    df = pd.read_csv(path, sep="\t", dtype={"source": str, "target": str})
    for col in ("source", "target"):
        if col not in df.columns:
            raise ValueError(f"{path}: missing column {col!r}")
    unknown = sorted((set(df["source"]) | set(df["target"])) - set(vocab.names))
    if unknown:
        raise ValueError(f"{path}: genes not in the vocabulary: {unknown}")
    if value_col is None:
        value_col = next((c for c in ("sign", "weight") if c in df.columns), None)
    vals = df[value_col].to_numpy(dtype=float) if value_col else np.ones(len(df))
    M = np.zeros((len(vocab), len(vocab)))
    M[vocab.indices(df["source"]), vocab.indices(df["target"])] = vals
    return M


def read_dense(path) -> tuple[np.ndarray, GeneVocab]:
    """Dense TSV written by ``GrnEstimate.write_dense`` ([source, target] layout)."""
    df = pd.read_csv(path, sep="\t", index_col=0)
    if list(df.index.astype(str)) != list(df.columns.astype(str)):
        raise ValueError(f"{path}: row and column genes differ")
    return df.to_numpy(dtype=float), GeneVocab(tuple(df.columns.astype(str)))

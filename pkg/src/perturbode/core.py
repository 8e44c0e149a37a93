"""Domain types, dataset I/O and preprocessing for perturbation expression data."""

from __future__ import annotations

import itertools
import json
import zlib
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd
from scipy.special import ndtr
from scipy.stats import rankdata

CONTROL_LABELS = ("control", "ctrl", "mcherry")
TARGET_SEP = "+"
NORMALIZATION_TOTAL = 1e4


class RegimeKind(str, Enum):
    CONTROL = "control"
    SHIFT = "shift"  # overexpression as an additive shift, parents kept
    PERFECT = "perfect"  # overexpression with parents masked
    KNOCKOUT = "knockout"  # parents masked, strength forced to 0

    @property
    def masks_targets(self) -> bool:
        return self in (RegimeKind.PERFECT, RegimeKind.KNOCKOUT)


@dataclass(frozen=True)
class GeneVocab:
    names: tuple[str, ...]
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        names = tuple(str(n) for n in self.names)
        if len(set(names)) != len(names):
            dup = sorted({n for n in names if names.count(n) > 1})
            raise ValueError(f"duplicate gene names: {dup[:10]}")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "_index", {n: i for i, n in enumerate(names)})

    def __len__(self) -> int:
        return len(self.names)

    def __contains__(self, name) -> bool:
        return name in self._index

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise KeyError(f"unknown gene {name!r}") from None

    def indices(self, names: Iterable[str]) -> list[int]:
        missing = [n for n in names if n not in self._index]
        if missing:
            raise KeyError(f"unknown genes: {missing}")
        return [self._index[n] for n in names]


@dataclass(frozen=True)
class Regime:
    """An intervention condition: which genes are perturbed, how, and how strongly.

    ``strength`` holds one value per target (same order as ``targets``).
    """

    id: str
    targets: tuple[int, ...] = ()
    kind: RegimeKind = RegimeKind.CONTROL
    strength: tuple[float, ...] = ()

    def __post_init__(self):
        kind = RegimeKind(self.kind)
        targets = tuple(int(t) for t in self.targets)
        strength = tuple(float(s) for s in self.strength)
        if len(set(targets)) != len(targets):
            raise ValueError(f"regime {self.id!r}: repeated targets")
        if kind is RegimeKind.CONTROL and targets:
            raise ValueError(f"control regime {self.id!r} cannot have targets")
        if kind is not RegimeKind.CONTROL and not targets:
            raise ValueError(f"regime {self.id!r} of kind {kind.value} needs targets")
        if kind is RegimeKind.KNOCKOUT:
            strength = (0.0,) * len(targets)
        elif not strength:
            strength = (np.nan,) * len(targets)  # filled from model defaults
        if len(strength) != len(targets):
            raise ValueError(f"regime {self.id!r}: {len(strength)} strengths for {len(targets)} targets")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "targets", targets)
        object.__setattr__(self, "strength", strength)

    @property
    def is_control(self) -> bool:
        return self.kind is RegimeKind.CONTROL

    def check_dim(self, d: int) -> None:
        bad = [t for t in self.targets if not 0 <= t < d]
        if bad:
            raise ValueError(f"regime {self.id!r}: targets {bad} outside [0, {d})")

    def to_dict(self, vocab: GeneVocab | None = None) -> dict:
        out = {"id": self.id, "kind": self.kind.value, "targets": list(self.targets),
               "strength": [None if np.isnan(s) else s for s in self.strength]}
        if vocab is not None:
            out["target_names"] = [vocab.names[t] for t in self.targets]
        return out

    @classmethod
    def from_dict(cls, doc: Mapping, vocab: GeneVocab | None = None) -> "Regime":
        if "target_names" in doc and vocab is not None:
            targets = vocab.indices(doc["target_names"])
        else:
            targets = doc.get("targets", [])
        strength = [np.nan if s is None else s for s in doc.get("strength") or []]
        return cls(doc["id"], tuple(targets), RegimeKind(doc.get("kind", "control")), tuple(strength))


def as_expression(values, d: int | None = None, name: str = "matrix") -> np.ndarray:
    """Validate and freeze a cells x genes matrix (read-only float64 copy)."""
    arr = np.array(values, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise ValueError(f"{name}: expected a non-empty 2-D matrix, got shape {arr.shape}")
    if d is not None and arr.shape[1] != d:
        raise ValueError(f"{name}: {arr.shape[1]} columns but vocabulary has {d} genes")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class PerturbDataset:
    vocab: GeneVocab
    regimes: tuple[Regime, ...]
    samples: Mapping[str, np.ndarray]
    control_id: str
    metadata: Mapping = field(default_factory=dict, compare=False)

    def __post_init__(self):
        d = len(self.vocab)
        regimes = tuple(self.regimes)
        ids = [r.id for r in regimes]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate regime ids")
        controls = [r for r in regimes if r.is_control]
        if len(controls) != 1:
            raise ValueError(f"expected exactly one control regime, found {len(controls)}")
        if controls[0].id != self.control_id:
            raise ValueError(f"control_id {self.control_id!r} does not name the control regime")
        extra = set(self.samples) - set(ids)
        if extra:
            raise ValueError(f"samples without a regime: {sorted(extra)}")
        missing = set(ids) - set(self.samples)
        if missing:
            raise ValueError(f"regimes without samples: {sorted(missing)}")
        samples = {}
        for r in regimes:
            r.check_dim(d)
            samples[r.id] = as_expression(self.samples[r.id], d, name=f"regime {r.id!r}")
        object.__setattr__(self, "regimes", regimes)
        object.__setattr__(self, "samples", samples)

    @property
    def d(self) -> int:
        return len(self.vocab)

    @property
    def control(self) -> np.ndarray:
        return self.samples[self.control_id]

    @property
    def interventions(self) -> tuple[Regime, ...]:
        return tuple(r for r in self.regimes if not r.is_control)

    def regime(self, rid: str) -> Regime:
        for r in self.regimes:
            if r.id == rid:
                return r
        raise KeyError(f"unknown regime {rid!r}")

    def all_cells(self) -> np.ndarray:
        return np.vstack([self.samples[r.id] for r in self.regimes])

    def subset(self, regime_ids: Iterable[str]) -> "PerturbDataset":
        """Keep the control plus the named regimes, in dataset order."""
        keep = set(regime_ids) | {self.control_id}
        regimes = tuple(r for r in self.regimes if r.id in keep)
        return replace(self, regimes=regimes, samples={r.id: self.samples[r.id] for r in regimes})


def normalize_log1p(raw_counts, total: float = NORMALIZATION_TOTAL) -> np.ndarray:
    """Scale each cell to ``total`` counts then apply ln(1 + x)."""
    raw = np.asarray(raw_counts, dtype=np.float64)
    if raw.ndim != 2:
        raise ValueError(f"expected cells x genes matrix, got shape {raw.shape}")
    if np.any(raw < 0) or not np.all(np.isfinite(raw)):
        raise ValueError("raw counts must be finite and nonnegative")
    sums = raw.sum(axis=1)
    zero = np.flatnonzero(sums <= 0)
    if zero.size:
        raise ValueError(f"row {int(zero[0])} has zero total count")
    return as_expression(np.log1p(raw * (total / sums)[:, None]), name="normalized counts")


# -- Mann-Whitney U ---------------------------------------------------------

EXACT_MAX_N = 8


def mann_whitney_u(x, y, alternative: str = "two-sided") -> tuple[float, float]:
    """U statistic of ``x`` and its p-value against ``y``.

    Exact null distribution (by enumerating rank assignments, ties as midranks)
    when both samples have at most 8 values; otherwise the normal approximation
    with tie and continuity correction.
    """
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    n1, n2 = x.size, y.size
    if n1 == 0 or n2 == 0:
        raise ValueError("both samples need at least one value")
    if alternative not in ("two-sided", "greater", "less"):
        raise ValueError(f"unknown alternative {alternative!r}")
    pooled = np.concatenate([x, y])
    ranks = rankdata(pooled)
    u = float(ranks[:n1].sum() - n1 * (n1 + 1) / 2)
    mu = n1 * n2 / 2
    if np.all(pooled == pooled[0]):
        return u, 1.0

    if n1 <= EXACT_MAX_N and n2 <= EXACT_MAX_N:
        n = n1 + n2
        null = np.array([ranks[list(c)].sum() for c in itertools.combinations(range(n), n1)])
        null = null - n1 * (n1 + 1) / 2
        tol = 1e-9
        if alternative == "greater":
            p = np.mean(null >= u - tol)
        elif alternative == "less":
            p = np.mean(null <= u + tol)
        else:
            p = np.mean(np.abs(null - mu) >= abs(u - mu) - tol)
        return u, float(min(p, 1.0))

    n = n1 + n2
    _, counts = np.unique(pooled, return_counts=True)
    tie_term = (counts**3 - counts).sum() / (n * (n - 1))
    sigma = np.sqrt(n1 * n2 / 12 * ((n + 1) - tie_term))
    if alternative == "greater":
        z = (u - mu - 0.5) / sigma
        p = ndtr(-z)
    elif alternative == "less":
        z = (u - mu + 0.5) / sigma
        p = ndtr(z)
    else:
        z = (abs(u - mu) - 0.5) / sigma
        p = 2 * ndtr(-z)
    return u, float(np.clip(p, 0.0, 1.0))


def mann_whitney_filter(
    dataset: PerturbDataset,
    p_threshold: float = 0.1,
    min_cells: int = 10,
    alternative: str = "two-sided",
) -> PerturbDataset:
    """Drop regimes whose targeted gene is not differentially expressed vs control.

    A regime survives when it has at least ``min_cells`` cells and the U-test
    p-value of some target gene is below ``p_threshold``. Per-regime p-values
    end up in ``metadata["mann_whitney"]``.
    """
    control = dataset.control
    keep, report = [], {}
    for r in dataset.interventions:
        y = dataset.samples[r.id]
        pvals = {dataset.vocab.names[j]: mann_whitney_u(y[:, j], control[:, j], alternative)[1]
                 for j in r.targets}
        enough = y.shape[0] >= min_cells
        passed = enough and any(p < p_threshold for p in pvals.values())
        report[r.id] = {"p_values": pvals, "n_cells": int(y.shape[0]), "kept": bool(passed),
                        "rule": "any-target"}
        if passed:
            keep.append(r.id)
    out = dataset.subset(keep)
    meta = dict(dataset.metadata)
    meta["mann_whitney"] = {"p_threshold": p_threshold, "min_cells": min_cells,
                            "alternative": alternative, "regimes": report}
    return replace(out, metadata=meta)


def select_genes(
    dataset: PerturbDataset,
    k_hvg: int,
    extra_genes: Sequence[str] = (),
) -> PerturbDataset:
    """Restrict to the top-``k_hvg`` variance genes plus every regime target.

    Variance is taken over all cells of all regimes. ``extra_genes`` (e.g. cell
    type markers) are always kept. Column order of survivors is preserved.
    """
    d = dataset.d
    if not 0 <= k_hvg <= d:
        raise ValueError(f"k_hvg={k_hvg} must lie in [0, {d}]")
    var = dataset.all_cells().var(axis=0)
    order = np.argsort(-var, kind="stable")
    keep = set(order[:k_hvg].tolist())
    for r in dataset.regimes:
        keep.update(r.targets)
    keep.update(dataset.vocab.indices(extra_genes))
    cols = sorted(keep)
    remap = {old: new for new, old in enumerate(cols)}
    vocab = GeneVocab(tuple(dataset.vocab.names[c] for c in cols))
    regimes = tuple(replace(r, targets=tuple(remap[t] for t in r.targets)) for r in dataset.regimes)
    samples = {rid: m[:, cols] for rid, m in dataset.samples.items()}
    meta = dict(dataset.metadata)
    meta["gene_selection"] = {"k_hvg": k_hvg, "n_genes": len(cols), "extra_genes": list(extra_genes)}
    return PerturbDataset(vocab, regimes, samples, dataset.control_id, meta)


# -- train / validation split -----------------------------------------------

SPLIT_MIN_CELLS = 100


@dataclass(frozen=True)
class SplitSpec:
    train: Mapping[str, np.ndarray]
    val: Mapping[str, np.ndarray]
    seed: int

    def to_json(self) -> str:
        doc = {"seed": self.seed,
               "regimes": {rid: {"train": self.train[rid].tolist(), "val": self.val[rid].tolist()}
                           for rid in self.train}}
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "SplitSpec":
        doc = json.loads(text)
        regs = doc["regimes"]
        train = {rid: np.asarray(v["train"], dtype=int) for rid, v in regs.items()}
        val = {rid: np.asarray(v["val"], dtype=int) for rid, v in regs.items()}
        return cls(train, val, int(doc["seed"]))

    def rows(self, dataset: PerturbDataset, rid: str, part: str) -> np.ndarray:
        idx = (self.train if part == "train" else self.val)[rid]
        return dataset.samples[rid][idx]


def regime_seed(seed: int, rid: str) -> list[int]:
    """Seed material for a per-regime stream that ignores regime order."""
    return [int(seed) & 0xFFFFFFFF, zlib.crc32(rid.encode())]


def split(dataset: PerturbDataset, seed: int, val_fraction: float = 0.2,
          min_cells: int = SPLIT_MIN_CELLS) -> SplitSpec:
    train, val = {}, {}
    for r in dataset.regimes:
        n = dataset.samples[r.id].shape[0]
        if n < min_cells:
            train[r.id] = np.arange(n)
            val[r.id] = np.arange(0)
            continue
        perm = np.random.default_rng(regime_seed(seed, r.id)).permutation(n)
        n_val = int(round(n * val_fraction))
        val[r.id] = np.sort(perm[:n_val])
        train[r.id] = np.sort(perm[n_val:])
    return SplitSpec(train, val, int(seed))


# -- TSV I/O ------------------------------------------------------------------

def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".regimes.json")


def parse_regime_label(label: str, vocab: GeneVocab, kind: RegimeKind) -> Regime:
    """``control`` (or an alias) or gene names joined by '+'."""
    if label.lower() in CONTROL_LABELS:
        return Regime(label)
    names = label.split(TARGET_SEP)
    return Regime(label, tuple(vocab.indices(names)), kind)


def read_dataset(path, log1p_input: bool = True, kind: RegimeKind = RegimeKind.PERFECT,
                 regimes_path=None) -> PerturbDataset:
    """Load a dataset TSV (first column ``regime``, then one column per gene).

    Regime descriptors come from a ``<file>.regimes.json`` sidecar when present,
    otherwise from the labels themselves. Raw counts are normalized and log1p'd
    unless ``log1p_input`` says they already are.
    """
    path = Path(path)
    df = pd.read_csv(path, sep="\t", dtype={"regime": str}, float_precision="round_trip")
    if df.columns[0] != "regime":
        raise ValueError(f"{path}: first column must be 'regime', got {df.columns[0]!r}")
    vocab = GeneVocab(tuple(df.columns[1:]))
    values = df.iloc[:, 1:].to_numpy(dtype=np.float64)
    if not log1p_input:
        values = normalize_log1p(values)
    labels = df["regime"].to_numpy()

    side = Path(regimes_path) if regimes_path else _sidecar(path)
    if side.exists():
        doc = json.loads(side.read_text())
        regimes = [Regime.from_dict(r, vocab) for r in doc["regimes"]]
    else:
        regimes = [parse_regime_label(lab, vocab, kind) for lab in dict.fromkeys(labels)]
    samples = {}
    for r in regimes:
        rows = labels == r.id
        if not rows.any():
            raise ValueError(f"{path}: regime {r.id!r} has no cells")
        samples[r.id] = values[rows]
    control = [r.id for r in regimes if r.is_control]
    if len(control) != 1:
        raise ValueError(f"{path}: expected exactly one control regime, found {control}")
    return PerturbDataset(vocab, tuple(regimes), samples, control[0], {"source": str(path)})


def write_dataset(dataset: PerturbDataset, path) -> None:
    path = Path(path)
    frames = []
    for r in dataset.regimes:
        m = dataset.samples[r.id]
        df = pd.DataFrame(m, columns=list(dataset.vocab.names))
        df.insert(0, "regime", r.id)
        frames.append(df)
    pd.concat(frames, ignore_index=True).to_csv(path, sep="\t", index=False, float_format="%.17g")
    doc = {"control_id": dataset.control_id,
           "regimes": [r.to_dict(dataset.vocab) for r in dataset.regimes]}
    _sidecar(path).write_text(json.dumps(doc, indent=1))

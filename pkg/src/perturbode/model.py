"""The fixed-form neural ODE: parameters, vector field, reverse-mode derivative, GRN readout.

The vector field for a cell state y under a regime is

    f(y) = mask * (A @ sigmoid(alpha * (B @ y - beta))) + shift - w * y

with beta = softplus(beta_raw) and w = softplus(w_raw) (the diagonal of W).
All functions accept a single state (d,) or a batch of states (n, d).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit

from .core import GeneVocab, Regime, RegimeKind

CHECKPOINT_FORMAT = "perturbode-checkpoint"
CHECKPOINT_VERSION = 1
DEFAULT_STRENGTH = 10.0
PARAM_NAMES = ("A", "B", "alpha", "beta_raw", "w_raw")


def softplus(x):
    x = np.asarray(x, dtype=float)
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def inv_softplus(y):
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0):
        raise ValueError("softplus is strictly positive")
    return y + np.log(-np.expm1(-y))


@dataclass(frozen=True)
class ModelParams:
    """Learnable tensors. ``s`` maps regime id to a d-vector nonzero only at targets."""

    A: np.ndarray  # (d, l) module -> gene
    B: np.ndarray  # (l, d) gene -> module
    alpha: np.ndarray  # (l,)
    beta_raw: np.ndarray  # (l,)
    w_raw: np.ndarray  # (d,)
    s: Mapping[str, np.ndarray] = field(default_factory=dict)
    learn_s: bool = False

    def __post_init__(self):
        d, l = np.shape(self.A)
        shapes = {"B": (l, d), "alpha": (l,), "beta_raw": (l,), "w_raw": (d,)}
        for name, shape in shapes.items():
            if np.shape(getattr(self, name)) != shape:
                raise ValueError(f"{name} has shape {np.shape(getattr(self, name))}, expected {shape}")
        for rid, v in self.s.items():
            if np.shape(v) != (d,):
                raise ValueError(f"s[{rid!r}] has shape {np.shape(v)}, expected ({d},)")

    @property
    def d(self) -> int:
        return self.A.shape[0]

    @property
    def l(self) -> int:
        return self.A.shape[1]

    @property
    def beta(self) -> np.ndarray:
        return softplus(self.beta_raw)

    @property
    def w(self) -> np.ndarray:
        return softplus(self.w_raw)

    def tensors(self) -> dict[str, np.ndarray]:
        """Flat name -> array view; strengths appear as ``s:<regime id>``."""
        out = {name: getattr(self, name) for name in PARAM_NAMES}
        out.update({f"s:{rid}": v for rid, v in self.s.items()})
        return out

    def with_tensors(self, tensors: Mapping[str, np.ndarray]) -> "ModelParams":
        base = {name: tensors.get(name, getattr(self, name)) for name in PARAM_NAMES}
        s = {rid: tensors.get(f"s:{rid}", v) for rid, v in self.s.items()}
        return ModelParams(**base, s=s, learn_s=self.learn_s)

    def with_regimes(self, regimes: Sequence[Regime], default_strength: float = DEFAULT_STRENGTH
                     ) -> "ModelParams":
        """Add strength vectors for regimes not seen yet (e.g. held-out interventions)."""
        s = dict(self.s)
        for r in regimes:
            if r.id not in s and not r.is_control:
                s[r.id] = initial_strength(r, self.d, default_strength)
        return replace(self, s=s)


@dataclass(frozen=True)
class RegimeContext:
    shift: np.ndarray  # (d,)
    mask: np.ndarray  # (d,) 1 = module term kept
    targets: tuple[int, ...] = ()
    regime_id: str | None = None
    shift_learnable: bool = False

    @classmethod
    def control(cls, d: int) -> "RegimeContext":
        return cls(np.zeros(d), np.ones(d))


def initial_strength(regime: Regime, d: int, default: float = DEFAULT_STRENGTH) -> np.ndarray:
    s = np.zeros(d)
    for t, v in zip(regime.targets, regime.strength):
        s[t] = default if np.isnan(v) else v
    if regime.kind is RegimeKind.KNOCKOUT:
        s[:] = 0.0
    return s


def regime_context(params: ModelParams, regime: Regime) -> RegimeContext:
    d = params.d
    regime.check_dim(d)
    if regime.is_control:
        return RegimeContext(np.zeros(d), np.ones(d), (), regime.id)
    s = params.s.get(regime.id)
    if s is None:
        s = initial_strength(regime, d)
    shift = np.zeros(d)
    idx = list(regime.targets)
    shift[idx] = s[idx]
    if regime.kind is RegimeKind.KNOCKOUT:
        shift[:] = 0.0
    mask = np.ones(d)
    if regime.kind.masks_targets:
        mask[idx] = 0.0
    return RegimeContext(shift, mask, regime.targets, regime.id,
                         shift_learnable=regime.kind is not RegimeKind.KNOCKOUT)


class CompiledField:
    """The vector field with parameter transforms evaluated once.

    Solvers call :meth:`forward` many times per pass and keep ``(z, act)`` for
    the reverse sweep. :meth:`vjp` accumulates into a :class:`GradAccumulator`.
    """

    def __init__(self, params: ModelParams, ctx: RegimeContext):
        if ctx.shift.shape != (params.d,) or ctx.mask.shape != (params.d,):
            raise ValueError("regime context does not match the model dimension")
        self.params = params
        self.ctx = ctx
        self.d = params.d
        self.BT = np.ascontiguousarray(params.B.T)
        self.B = params.B
        self.Am = params.A * ctx.mask[:, None]
        self.AmT = np.ascontiguousarray(self.Am.T)
        self.alpha = params.alpha
        self.beta = params.beta
        self.w = params.w
        self.shift = ctx.shift

    def check(self, y: np.ndarray) -> None:
        if y.ndim not in (1, 2) or y.shape[-1] != self.d:
            raise ValueError(f"state has shape {y.shape}, expected (..., {self.d})")

    def forward(self, Y: np.ndarray):
        z = Y @ self.BT - self.beta
        act = expit(self.alpha * z)
        return act @ self.AmT + self.shift - self.w * Y, z, act

    def __call__(self, Y: np.ndarray) -> np.ndarray:
        return self.forward(Y)[0]

    def vjp(self, Y, z, act, C, acc: "GradAccumulator") -> np.ndarray:
        d_u = (C @ self.Am) * act * (1.0 - act)
        d_z = d_u * self.alpha
        acc.A += C.T @ act
        acc.B += d_z.T @ Y
        acc.alpha += np.einsum("nl,nl->l", d_u, z)
        acc.beta -= d_z.sum(axis=0)
        acc.w -= np.einsum("nd,nd->d", C, Y)
        acc.shift += C.sum(axis=0)
        return d_z @ self.B - self.w * C


class GradAccumulator:
    """Running sums of gradients w.r.t. the *constrained* quantities."""

    def __init__(self, params: ModelParams):
        self.params = params
        self.A = np.zeros_like(params.A)
        self.B = np.zeros_like(params.B)
        self.alpha = np.zeros(params.l)
        self.beta = np.zeros(params.l)
        self.w = np.zeros(params.d)
        self.shift = np.zeros(params.d)

    def finish(self, ctx: RegimeContext) -> "ParamGrads":
        p = self.params
        grads = ParamGrads(self.A * ctx.mask[:, None], self.B, self.alpha,
                           self.beta * expit(p.beta_raw), self.w * expit(p.w_raw))
        if p.learn_s and ctx.shift_learnable and ctx.regime_id is not None:
            gs = np.zeros(p.d)
            idx = list(ctx.targets)
            gs[idx] = self.shift[idx]
            grads.s[ctx.regime_id] = gs
        return grads


def vector_field(params: ModelParams, ctx: RegimeContext, y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    field_ = CompiledField(params, ctx)
    field_.check(y)
    return field_(y)


@dataclass
class ParamGrads:
    """Gradients shaped like :class:`ModelParams`; ``s`` holds only learnable entries."""

    A: np.ndarray
    B: np.ndarray
    alpha: np.ndarray
    beta_raw: np.ndarray
    w_raw: np.ndarray
    s: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "ParamGrads":
        return cls(*(np.zeros_like(getattr(params, n), dtype=float) for n in PARAM_NAMES))

    def __iadd__(self, other: "ParamGrads") -> "ParamGrads":
        for n in PARAM_NAMES:
            getattr(self, n).__iadd__(getattr(other, n))
        for rid, g in other.s.items():
            if rid in self.s:
                self.s[rid] = self.s[rid] + g
            else:
                self.s[rid] = g.copy()
        return self

    def scale(self, c: float) -> "ParamGrads":
        return ParamGrads(*(getattr(self, n) * c for n in PARAM_NAMES),
                          s={k: v * c for k, v in self.s.items()})

    def tensors(self) -> dict[str, np.ndarray]:
        out = {n: getattr(self, n) for n in PARAM_NAMES}
        out.update({f"s:{rid}": g for rid, g in self.s.items()})
        return out

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.tensors().values())


def vjp_vector_field(params: ModelParams, ctx: RegimeContext, y, cotangent
                     ) -> tuple[np.ndarray, ParamGrads]:
    """Gradients of <cotangent, f(y)> with respect to y and every parameter.

    For a batch, parameter gradients are summed over rows. Strength gradients
    are reported only for target coordinates of learnable, non-knockout regimes.
    """
    y = np.asarray(y, dtype=float)
    c = np.asarray(cotangent, dtype=float)
    field_ = CompiledField(params, ctx)
    field_.check(y)
    if c.shape != y.shape:
        raise ValueError(f"cotangent shape {c.shape} != state shape {y.shape}")
    Y, C = np.atleast_2d(y), np.atleast_2d(c)
    _, z, act = field_.forward(Y)
    acc = GradAccumulator(params)
    grad_y = field_.vjp(Y, z, act, C, acc)
    return grad_y.reshape(y.shape), acc.finish(ctx)


@dataclass(frozen=True)
class GrnEstimate:
    """Signed gene-to-gene matrix; ``weights[i, j]`` is the effect of gene j on gene i."""

    weights: np.ndarray
    vocab: GeneVocab | None = None
    orientation: str = "row=target,col=source"

    def source_target(self) -> np.ndarray:
        """Transpose to ``[source, target]`` layout, the layout of edge lists."""
        return self.weights.T

    def edges(self) -> list[tuple[str, str, float]]:
        names = self.vocab.names if self.vocab else [str(i) for i in range(len(self.weights))]
        st = self.source_target()
        src, tgt = np.nonzero(st)
        return [(names[i], names[j], float(st[i, j])) for i, j in zip(src, tgt)]

    def write_edges(self, path) -> None:
        lines = ["source\ttarget\tweight"]
        lines += [f"{s}\t{t}\t{w!r}" for s, t, w in self.edges()]
        Path(path).write_text("\n".join(lines) + "\n")

    def write_dense(self, path) -> None:
        names = self.vocab.names if self.vocab else [str(i) for i in range(len(self.weights))]
        st = self.source_target()
        lines = ["source\t" + "\t".join(names)]
        lines += [names[i] + "\t" + "\t".join(repr(float(v)) for v in row) for i, row in enumerate(st)]
        Path(path).write_text("\n".join(lines) + "\n")


def extract_grn(params: ModelParams, vocab: GeneVocab | None = None) -> GrnEstimate:
    return GrnEstimate((params.A * params.alpha) @ params.B, vocab)


def init_params(d: int, l: int, regimes: Sequence[Regime] = (), seed: int = 0,
                scale: float = 0.1, beta0: float = 1.0, w0: float = 1.0,
                strength: float = DEFAULT_STRENGTH, learn_s: bool = False) -> ModelParams:
    if l < 1 or d < 1:
        raise ValueError("need d >= 1 and l >= 1")
    rng = np.random.default_rng(seed)
    sd = scale / np.sqrt(l)
    A = rng.normal(0.0, sd, size=(d, l))
    B = rng.normal(0.0, sd, size=(l, d))
    s = {r.id: initial_strength(r, d, strength) for r in regimes if not r.is_control}
    return ModelParams(A, B, np.ones(l), np.full(l, float(inv_softplus(beta0))),
                       np.full(d, float(inv_softplus(w0))), s, learn_s)


# -- checkpoints --------------------------------------------------------------

def params_to_dict(params: ModelParams) -> dict:
    return {
        "d": params.d, "l": params.l, "learn_s": params.learn_s,
        "tensors": {n: getattr(params, n).tolist() for n in PARAM_NAMES},
        "s": {rid: v.tolist() for rid, v in params.s.items()},
    }


def params_from_dict(doc: Mapping) -> ModelParams:
    t = doc["tensors"]
    return ModelParams(
        *(np.asarray(t[n], dtype=float).reshape(s) for n, s in
          zip(PARAM_NAMES, [(doc["d"], doc["l"]), (doc["l"], doc["d"]), (doc["l"],), (doc["l"],), (doc["d"],)])),
        s={rid: np.asarray(v, dtype=float) for rid, v in doc["s"].items()},
        learn_s=bool(doc["learn_s"]),
    )


def save_checkpoint(path, params: ModelParams, vocab: GeneVocab | None = None, **extra) -> None:
    """JSON checkpoint; floats are written with round-trip precision."""
    doc = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
           "genes": list(vocab.names) if vocab else None,
           "params": params_to_dict(params), **extra}
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> tuple[ModelParams, GeneVocab | None, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    vocab = GeneVocab(tuple(doc["genes"])) if doc.get("genes") else None
    params = params_from_dict(doc["params"])
    extra = {k: v for k, v in doc.items() if k not in ("format", "version", "genes", "params")}
    return params, vocab, extra

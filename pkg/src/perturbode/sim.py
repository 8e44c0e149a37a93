"""Interventional expression simulators and the linear-SCM sampling baseline.

Graph matrices here use the edge-list layout ``adj[source, target]``.
"""

from __future__ import annotations

import ast
import graphlib
import zlib
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .core import GeneVocab, PerturbDataset, Regime, RegimeKind

DATA_DIR = Path(__file__).parent / "data"


# -- graphs --------------------------------------------------------------------

@dataclass(frozen=True)
class SimGrn:
    adjacency: np.ndarray  # (d, d) in {+1, -1, 0}, [source, target]
    names: tuple[str, ...] = ()

    def __post_init__(self):
        adj = np.asarray(self.adjacency, dtype=float)
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
            raise ValueError("adjacency must be square")
        if not np.all(np.isin(adj, (-1.0, 0.0, 1.0))):
            raise ValueError("adjacency entries must be -1, 0 or +1")
        if np.any(np.diag(adj)):
            raise ValueError("self-loops are not allowed")
        names = tuple(self.names) or tuple(f"g{i}" for i in range(adj.shape[0]))
        if len(names) != adj.shape[0]:
            raise ValueError("one name per gene required")
        object.__setattr__(self, "adjacency", adj)
        object.__setattr__(self, "names", names)

    @property
    def d(self) -> int:
        return self.adjacency.shape[0]

    @property
    def master_regulators(self) -> np.ndarray:
        return ~np.any(self.adjacency != 0, axis=0)

    @property
    def acyclic(self) -> bool:
        try:
            topological_order(self.adjacency)
        except ValueError:
            return False
        return True

    @property
    def vocab(self) -> GeneVocab:
        return GeneVocab(self.names)

    def write_tsv(self, path) -> None:
        src, tgt = np.nonzero(self.adjacency)
        lines = ["source\ttarget\tsign"]
        lines += [f"{self.names[i]}\t{self.names[j]}\t{int(self.adjacency[i, j]):+d}" for i, j in zip(src, tgt)]
        Path(path).write_text("\n".join(lines) + "\n")


def topological_order(adj) -> list[int]:
    """Order of nodes with every edge pointing forward; ValueError on a cycle."""
    adj = np.asarray(adj)
    ts = graphlib.TopologicalSorter({j: set(np.flatnonzero(adj[:, j]).tolist()) for j in range(adj.shape[0])})
    try:
        return [int(i) for i in ts.static_order()]
    except graphlib.CycleError as exc:
        raise ValueError(f"graph has a cycle through nodes {exc.args[1]}") from None


def random_dag(d: int, n_edges: int, seed=0) -> SimGrn:
    """Uniformly chosen edges among pairs ordered by a random permutation; all activating."""
    max_edges = d * (d - 1) // 2
    if not 0 <= n_edges <= max_edges:
        raise ValueError(f"n_edges must lie in [0, {max_edges}]")
    rng = np.random.default_rng(seed)
    order = rng.permutation(d)
    iu, ju = np.triu_indices(d, k=1)
    pick = rng.choice(iu.size, n_edges, replace=False)
    adj = np.zeros((d, d))
    adj[order[iu[pick]], order[ju[pick]]] = 1.0
    return SimGrn(adj)


# -- SERGIO-style SDE ----------------------------------------------------------------

@dataclass(frozen=True)
class SdeParams:
    K: np.ndarray  # (d, d) interaction strengths, [regulator, target]
    lambda_decay: np.ndarray
    q: np.ndarray
    b: np.ndarray
    h: float
    gamma: np.ndarray
    dt: float = 2.0
    n_steps: int = 50

    def __post_init__(self):
        if np.any(np.asarray(self.lambda_decay) <= 0):
            raise ValueError("decay rates must be positive")
        if np.any(np.asarray(self.q) < 0):
            raise ValueError("noise amplitudes must be nonnegative")
        if self.h <= 0:
            raise ValueError("Hill threshold must be positive")


def _positive_normal(rng: np.random.Generator, mean: float, sd: float, size: int) -> np.ndarray:
    out = rng.normal(mean, sd, size)
    bad = out <= 0
    while bad.any():
        out[bad] = rng.normal(mean, sd, int(bad.sum()))
        bad = out <= 0
    return out


def sample_sde_params(grn: SimGrn, seed=0, dt: float = 2.0, n_steps: int = 50) -> SdeParams:
    """Draw kinetic parameters; truncated normals are resampled until positive."""
    rng = np.random.default_rng(seed)
    d = grn.d
    lam = _positive_normal(rng, 0.8, 0.2, d)
    K = rng.uniform(0.0, 5.0, (d, d)) * (grn.adjacency != 0)
    q = rng.uniform(0.3, 1.0, d)
    gamma = _positive_normal(rng, 10.0, 1.0, d)
    b = np.where(grn.master_regulators, _positive_normal(rng, 10.0, 0.01, d), 0.0)
    h = float(np.mean(b / q))
    if h <= 0:
        h = 1.0  # graph without master regulators: no basal production at all
    return SdeParams(K, lam, q, b, h, gamma, dt, n_steps)


def production_rate(grn: SimGrn, sde: SdeParams, x) -> np.ndarray:
    """Basal rate plus Hill contributions of every regulator; x is (d,) or (n, d)."""
    x = np.asarray(x, dtype=float)
    hill = x / (sde.h + x)
    act = sde.K * (grn.adjacency > 0)
    rep = sde.K * (grn.adjacency < 0)
    return hill @ act + (1.0 - hill) @ rep + sde.b


def _regime_arrays(regime: Regime | None, d: int, gamma: np.ndarray):
    """(targets mask, per-gene overexpression, production switched off) for a regime."""
    on = np.zeros(d, dtype=bool)
    boost = np.zeros(d)
    if regime is None or regime.is_control:
        return on, boost, on.copy()
    regime.check_dim(d)
    idx = list(regime.targets)
    on[idx] = True
    for t, s in zip(regime.targets, regime.strength):
        boost[t] = gamma[t] if np.isnan(s) else s
    if regime.kind is RegimeKind.KNOCKOUT:
        boost[:] = 0.0
    return on, boost, on & (regime.kind is RegimeKind.KNOCKOUT)


def sergio_fixed_point(grn: SimGrn, sde: SdeParams, regime: Regime | None = None) -> np.ndarray:
    """Expected steady state with overexpression but without masking, solved in topological order."""
    on, boost, off = _regime_arrays(regime, grn.d, sde.gamma)
    x = np.zeros(grn.d)
    act = sde.K * (grn.adjacency > 0)
    rep = sde.K * (grn.adjacency < 0)
    for j in topological_order(grn.adjacency):
        hill = x / (sde.h + x)
        prod = hill @ act[:, j] + (1.0 - hill) @ rep[:, j] + sde.b[j]
        x[j] = 0.0 if off[j] else prod / sde.lambda_decay[j] + boost[j]
    return x


def _cell_streams(seed, regime_id: str, n_cells: int) -> list[np.random.Generator]:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(regime_id.encode())])
    return [np.random.default_rng(s) for s in ss.spawn(n_cells)]


def simulate_sergio(grn: SimGrn, sde: SdeParams, regime: Regime | None = None, n_cells: int = 100,
                    seed=0, return_trajectory: bool = False):
    """Euler-Maruyama runs of the perturbed SDE, one independent noise stream per cell.

    Targets of a perfect intervention drift by their overexpression only; shift
    interventions keep production and decay and add the overexpression; a
    knockout removes production. States are clamped at zero after every step.
    """
    if not grn.acyclic:
        raise ValueError("the SERGIO generator needs an acyclic graph")
    d = grn.d
    regime = regime or Regime("control")
    on, boost, off = _regime_arrays(regime, d, sde.gamma)
    masked = on & regime.kind.masks_targets
    x0 = sergio_fixed_point(grn, sde, regime)
    streams = _cell_streams(seed, regime.id, n_cells)
    # noise[c, t, 0/1, :]: the two Wiener increments of cell c at step t
    noise = np.stack([s.standard_normal((sde.n_steps, 2, d)) for s in streams]) * np.sqrt(sde.dt)
    X = np.tile(x0, (n_cells, 1))
    traj = [X.copy()] if return_trajectory else None
    lam = sde.lambda_decay
    for t in range(sde.n_steps):
        P = production_rate(grn, sde, X)
        P[:, off] = 0.0
        drift = np.where(masked, boost, P - lam * X + boost)
        diff = sde.q * (np.sqrt(np.maximum(P, 0.0)) * noise[:, t, 0] + np.sqrt(np.maximum(lam * X, 0.0)) * noise[:, t, 1])
        X = np.maximum(X + drift * sde.dt + diff, 0.0)
        if traj is not None:
            traj.append(X.copy())
    if return_trajectory:
        return X, np.stack(traj)
    return X


# -- regime layouts and benchmark datasets ----------------------------------------------

def make_regimes(d: int, n_regimes: int, targets_per_regime: int, seed=0,
                 kind: RegimeKind = RegimeKind.PERFECT, names: Sequence[str] | None = None) -> list[Regime]:
    """Control plus ``n_regimes`` random target sets (each of size ``targets_per_regime``).

    With one target per regime and ``n_regimes <= d`` every target is distinct.
    """
    if not 1 <= targets_per_regime <= d:
        raise ValueError("targets_per_regime must lie in [1, d]")
    rng = np.random.default_rng(seed)
    regs = [Regime("control")]
    if targets_per_regime == 1 and n_regimes <= d:
        singles = rng.permutation(d)[:n_regimes]
        sets = [(int(t),) for t in singles]
    else:
        sets = [tuple(sorted(int(t) for t in rng.choice(d, targets_per_regime, replace=False)))
                for _ in range(n_regimes)]
    for k, ts in enumerate(sets):
        label = "+".join(names[t] for t in ts) if names else f"r{k:03d}"
        rid = label if label not in {r.id for r in regs} else f"{label}#{k}"
        regs.append(Regime(rid, ts, kind))
    return regs


def simulate_dataset(simulate: Callable[[Regime, int], np.ndarray], regimes: Sequence[Regime],
                     vocab: GeneVocab, n_cells: int, metadata: Mapping | None = None) -> PerturbDataset:
    samples = {r.id: simulate(r, n_cells) for r in regimes}
    control = [r.id for r in regimes if r.is_control][0]
    return PerturbDataset(vocab, tuple(regimes), samples, control, dict(metadata or {}))


def sergio_dataset(grn: SimGrn, sde: SdeParams, regimes: Sequence[Regime], n_cells: int = 100,
                   seed=0, log1p: bool = True) -> PerturbDataset:
    """Simulate every regime; values are ln(1 + x) transformed unless ``log1p`` is off."""
    def run(r, n):
        X = simulate_sergio(grn, sde, r, n, seed)
        return np.log1p(X) if log1p else X
    return simulate_dataset(run, regimes, grn.vocab, n_cells,
                            {"generator": "sergio", "seed": seed, "log1p": log1p})


# -- BoolODE-style SDE -------------------------------------------------------------

@dataclass(frozen=True)
class BoolOdeParams:
    m: float = 20.0
    r: float = 10.0
    l_x: float = 10.0
    l_p: float = 10.0
    s: float = 10.0
    h: float = 1.0  # Hill threshold of x / (h + x)
    horizon: float = 1000.0
    dt: float = 0.01
    overexpression: float = 20.0
    x0: float = 1.0
    p0: float = 1.0

    def __post_init__(self):
        for name in ("m", "r", "l_x", "l_p", "h", "horizon", "dt"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.s < 0:
            raise ValueError("s must be >= 0")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))


@dataclass(frozen=True)
class BoolRules:
    genes: tuple[str, ...]
    exprs: tuple[ast.expr, ...]
    sources: tuple[str, ...]

    @property
    def d(self) -> int:
        return len(self.genes)

    @property
    def vocab(self) -> GeneVocab:
        return GeneVocab(self.genes)

    def regulators(self, gene: str) -> set[str]:
        e = self.exprs[self.genes.index(gene)]
        return {n.id for n in ast.walk(e) if isinstance(n, ast.Name)}

    def signed_adjacency(self) -> np.ndarray:
        """[source, target] signs; a regulator seen under NOT an odd number of times represses."""
        d = self.d
        adj = np.zeros((d, d))
        for j, e in enumerate(self.exprs):
            for name, sign in _literal_signs(e, 1):
                i = self.genes.index(name)
                adj[i, j] = sign if adj[i, j] in (0, sign) else 1.0
        return adj


def _literal_signs(node, sign):
    if isinstance(node, ast.Name):
        yield node.id, sign
    elif isinstance(node, ast.UnaryOp):
        yield from _literal_signs(node.operand, -sign)
    elif isinstance(node, ast.BoolOp):
        for v in node.values:
            yield from _literal_signs(v, sign)


_KEYWORDS = {"AND": "and", "OR": "or", "NOT": "not", "TRUE": "True", "FALSE": "False"}


def parse_rules(text: str) -> BoolRules:
    """Parse ``gene = expression`` lines built from AND, OR, NOT, parentheses, gene names, 1/0.

    Gene names must be identifiers. Blank lines and ``#`` comments are ignored.
    """
    genes, exprs, sources = [], [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'gene = expression'")
        lhs, rhs = (s.strip() for s in line.split("=", 1))
        if not lhs.isidentifier():
            raise ValueError(f"line {lineno}: bad gene name {lhs!r}")
        if lhs in genes:
            raise ValueError(f"line {lineno}: gene {lhs!r} has two rules")
        tokens = [_KEYWORDS.get(tok.upper(), tok) for tok in rhs.replace("(", " ( ").replace(")", " ) ").split()]
        try:
            tree = ast.parse(" ".join(tokens), mode="eval").body
        except SyntaxError as exc:
            raise ValueError(f"line {lineno}: cannot parse {rhs!r}") from exc
        _check_expr(tree, lineno)
        genes.append(lhs)
        exprs.append(tree)
        sources.append(rhs)
    undeclared = sorted({n.id for e in exprs for n in ast.walk(e) if isinstance(n, ast.Name)} - set(genes))
    if undeclared:
        raise ValueError(f"rules reference undeclared genes: {undeclared}")
    if not genes:
        raise ValueError("no rules found")
    return BoolRules(tuple(genes), tuple(exprs), tuple(sources))


def _check_expr(node, lineno):
    if isinstance(node, ast.BoolOp):
        for v in node.values:
            _check_expr(v, lineno)
    elif isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.Not):
        _check_expr(node.operand, lineno)
    elif isinstance(node, ast.Name):
        pass
    elif isinstance(node, ast.Constant) and node.value in (0, 1, True, False):
        pass
    else:
        raise ValueError(f"line {lineno}: unsupported element {ast.dump(node)}")


def load_rules(path) -> BoolRules:
    return parse_rules(Path(path).read_text())


def example_rules() -> BoolRules:
    """Bundled 10-gene cyclic network with a bifurcation and converging branches."""
    return load_rules(DATA_DIR / "bifurcating_converging.txt")


def _compile(node, index: Mapping[str, int], h: float) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(node, ast.Constant):
        val = float(bool(node.value))
        return lambda P: np.full(P.shape[0], val)
    if isinstance(node, ast.Name):
        i = index[node.id]
        return lambda P: P[:, i] / (h + P[:, i])
    if isinstance(node, ast.UnaryOp):
        inner = _compile(node.operand, index, h)
        return lambda P: 1.0 - inner(P)
    parts = [_compile(v, index, h) for v in node.values]
    if isinstance(node.op, ast.And):
        def f_and(P):
            out = parts[0](P)
            for p in parts[1:]:
                out = out * p(P)
            return out
        return f_and

    def f_or(P):
        out = 1.0 - parts[0](P)
        for p in parts[1:]:
            out = out * (1.0 - p(P))
        return 1.0 - out
    return f_or


def regulation_function(rules: BoolRules, h: float = 1.0) -> Callable[[np.ndarray], np.ndarray]:
    """f(P) for a batch of protein states (n, d) -> (n, d) in [0, 1]."""
    index = {g: i for i, g in enumerate(rules.genes)}
    funcs = [_compile(e, index, h) for e in rules.exprs]

    def f(P):
        return np.stack([fn(P) for fn in funcs], axis=1)
    return f


def simulate_boolode(rules: BoolRules, params: BoolOdeParams = BoolOdeParams(), regime: Regime | None = None,
                     n_cells: int = 300, seed=0, return_protein: bool = False):
    """Euler-Maruyama on the paired mRNA / protein SDEs; returns mRNA levels at the horizon.

    Intervened genes lose their regulatory input and receive the overexpression
    as an additive production term instead (knockouts receive nothing).
    """
    d = rules.d
    regime = regime or Regime("control")
    on, _, _ = _regime_arrays(regime, d, np.full(d, params.overexpression))
    boost = np.zeros(d)
    if regime.kind is not RegimeKind.KNOCKOUT:
        for t, s in zip(regime.targets, regime.strength):
            boost[t] = params.overexpression if np.isnan(s) else s
    keep = ~(on & regime.kind.masks_targets)
    f = regulation_function(rules, params.h)
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(regime.id.encode())])
    X = np.full((n_cells, d), params.x0)
    P = np.full((n_cells, d), params.p0)
    dt, sq = params.dt, np.sqrt(params.dt)
    for _ in range(params.n_steps):
        prod = params.m * f(P) * keep + boost
        dx = (prod - params.l_x * X) * dt
        dp = (params.r * X - params.l_p * P) * dt
        if params.s > 0:
            z = rng.standard_normal((2, n_cells, d))
            dx = dx + params.s * np.sqrt(X) * sq * z[0]
            dp = dp + params.s * np.sqrt(P) * sq * z[1]
        X = np.maximum(X + dx, 0.0)
        P = np.maximum(P + dp, 0.0)
    return (X, P) if return_protein else X


# -- linear SCM baseline ---------------------------------------------------------------

@dataclass(frozen=True)
class LinearScmParams:
    W_dag: np.ndarray  # [source, target]
    mu: float
    sigma: float
    mu_gamma: float
    sigma_gamma: float
    sigma_delta_gamma: float
    clamp_nonnegative: bool = True

    def __post_init__(self):
        W = np.asarray(self.W_dag, dtype=float)
        topological_order(W)  # raises on a cycle
        object.__setattr__(self, "W_dag", W)


def sample_linear_scm(params: LinearScmParams, regime: Regime | None = None, n_cells: int = 100,
                      seed=0) -> np.ndarray:
    """Roots ~ N(mu, sigma) (or N(mu_gamma, sigma_gamma) if overexpressed); other genes are
    the weighted sum of their parents, plus N(mu_gamma - mu, sigma_delta_gamma) if overexpressed.
    """
    W = params.W_dag
    d = W.shape[0]
    order = topological_order(W)
    regime = regime or Regime("control")
    regime.check_dim(d)
    over = np.zeros(d, dtype=bool)
    if not regime.is_control:
        over[list(regime.targets)] = True
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(regime.id.encode())])
    roots = ~np.any(W != 0, axis=0)
    X = np.zeros((n_cells, d))
    for i in order:
        if roots[i]:
            if over[i]:
                X[:, i] = rng.normal(params.mu_gamma, params.sigma_gamma, n_cells)
            else:
                X[:, i] = rng.normal(params.mu, params.sigma, n_cells)
        else:
            X[:, i] = X @ W[:, i]
            if over[i]:
                X[:, i] += rng.normal(params.mu_gamma - params.mu, params.sigma_delta_gamma, n_cells)
    return np.maximum(X, 0.0) if params.clamp_nonnegative else X


def scm_statistics(dataset: PerturbDataset) -> dict:
    """Population statistics the linear SCM draws from.

    mu/sigma pool every gene of every cell; the gamma statistics use the
    overexpressed genes of overexpressed cells, and sigma_delta_gamma is the
    spread of (overexpressed value - that cell's mean over genes).
    """
    allx = dataset.all_cells()
    over, delta = [], []
    for r in dataset.interventions:
        if r.kind is RegimeKind.KNOCKOUT:
            continue
        Y = dataset.samples[r.id]
        cell_mean = Y.mean(axis=1)
        for t in r.targets:
            over.append(Y[:, t])
            delta.append(Y[:, t] - cell_mean)
    if not over:
        raise ValueError("no overexpression regimes to estimate statistics from")
    over, delta = np.concatenate(over), np.concatenate(delta)
    return {"mu": float(allx.mean()), "sigma": float(allx.std()), "mu_gamma": float(over.mean()),
            "sigma_gamma": float(over.std()), "sigma_delta_gamma": float(delta.std())}


def enforce_acyclic(W) -> tuple[np.ndarray, float]:
    """Zero the weakest edges until no cycle remains; returns (DAG weights, cut-off used).

    The cut-off is the smallest |weight| level (found by bisection over the
    sorted magnitudes) at which keeping only strictly larger edges is acyclic.
    """
    W = np.array(W, dtype=float)
    np.fill_diagonal(W, 0.0)

    def is_dag(cut):
        try:
            topological_order(np.abs(W) > cut)
            return True
        except ValueError:
            return False

    if is_dag(0.0):
        return W, 0.0
    levels = np.unique(np.abs(W[W != 0]))
    lo, hi = 0, levels.size - 1  # keeping > levels[hi] leaves no edges at all
    while lo < hi:
        mid = (lo + hi) // 2
        if is_dag(levels[mid]):
            hi = mid
        else:
            lo = mid + 1
    cut = float(levels[lo])
    return np.where(np.abs(W) > cut, W, 0.0), cut


def scm_params_from_grn(G_source_target, dataset: PerturbDataset, **kw) -> LinearScmParams:
    W, _ = enforce_acyclic(G_source_target)
    return LinearScmParams(W, **scm_statistics(dataset), **kw)


def scm_dataset(params: LinearScmParams, regimes: Sequence[Regime], vocab: GeneVocab, n_cells: int,
                seed=0) -> PerturbDataset:
    return simulate_dataset(lambda r, n: sample_linear_scm(params, r, n, seed), regimes, vocab, n_cells,
                            {"generator": "linear-scm", "seed": seed})


def boolode_dataset(rules: BoolRules, params: BoolOdeParams, regimes: Sequence[Regime], n_cells: int = 300,
                    seed=0) -> PerturbDataset:
    return simulate_dataset(lambda r, n: simulate_boolode(rules, params, r, n, seed), regimes, rules.vocab,
                            n_cells, {"generator": "boolode", "seed": seed})


def single_target_regimes(vocab: GeneVocab, kind: RegimeKind = RegimeKind.PERFECT) -> list[Regime]:
    return [Regime("control")] + [Regime(g, (i,), kind) for i, g in enumerate(vocab.names)]


def with_strength(regime: Regime, value: float) -> Regime:
    return replace(regime, strength=(value,) * len(regime.targets))

import numpy as np

from perturbode.core import Regime, RegimeKind
from perturbode.model import ModelParams, PARAM_NAMES


def random_params(rng, d, l, regimes=(), learn_s=True, scale=1.0):
    s = {}
    for r in regimes:
        if not r.is_control:
            v = np.zeros(d)
            v[list(r.targets)] = rng.uniform(0.5, 2.0, len(r.targets))
            s[r.id] = v
    return ModelParams(
        A=rng.normal(0, scale, (d, l)),
        B=rng.normal(0, scale, (l, d)),
        alpha=rng.uniform(0.5, 2.0, l),
        beta_raw=rng.normal(0, 1, l),
        w_raw=rng.normal(0, 1, d),
        s=s,
        learn_s=learn_s,
    )


def random_regime(rng, d, kind=None):
    kinds = [RegimeKind.SHIFT, RegimeKind.PERFECT, RegimeKind.KNOCKOUT]
    kind = kind or kinds[int(rng.integers(3))]
    k = int(rng.integers(1, min(3, d) + 1))
    targets = tuple(int(t) for t in rng.choice(d, size=k, replace=False))
    return Regime("r", targets, kind)


def perturbed(params, name, idx, delta):
    t = {k: v.copy() for k, v in params.tensors().items()}
    t[name][idx] += delta
    return params.with_tensors(t)


def fd_check(fun, params, analytic, step=1e-5, names=None, atol=1e-9):
    """Max relative error of analytic gradients vs central differences of ``fun``."""
    worst = 0.0
    tensors = params.tensors()
    for name in names or tensors:
        g = analytic[name]
        for idx in np.ndindex(tensors[name].shape):
            num = (fun(perturbed(params, name, idx, step)) - fun(perturbed(params, name, idx, -step))) / (2 * step)
            err = abs(num - g[idx]) / max(abs(num), abs(g[idx]), atol)
            if abs(num - g[idx]) > atol:
                worst = max(worst, err)
    return worst


__all__ = ["random_params", "random_regime", "fd_check", "perturbed", "PARAM_NAMES"]


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []

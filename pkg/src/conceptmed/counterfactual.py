"""Gradient-ascent counterfactuals and the average treatment effect."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from conceptmed.errors import ConfigError
from conceptmed.io import write_csv
from conceptmed.net import LayeredNetwork, forward, input_gradient

# f_t(x) at or below this is treated as numerically zero and the pair is excluded
MIN_PROB = 1e-12


@dataclass(frozen=True)
class CounterfactualConfig:
    step_size: float = 0.05
    proximity_weight: float = 0.01
    confidence: float = 0.8
    max_iters: int = 500
    clip: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if not self.step_size > 0:
            raise ConfigError("must be > 0", "counterfactual.step_size")
        if self.proximity_weight < 0:
            raise ConfigError("must be >= 0", "counterfactual.proximity_weight")
        if not 0.5 < self.confidence < 1.0:
            raise ConfigError("must lie in (0.5, 1)", "counterfactual.confidence")
        if self.max_iters < 0:
            raise ConfigError("must be >= 0", "counterfactual.max_iters")
        if not self.clip[0] < self.clip[1]:
            raise ConfigError("clip range must be increasing", "counterfactual.clip")


@dataclass
class CounterfactualResult:
    x_prime: np.ndarray
    success: bool
    target: int
    iterations: int
    l2_perturbation: float
    p_target_x: float = float("nan")
    p_target_x_prime: float = float("nan")


def runner_up(probs: np.ndarray) -> np.ndarray:
    """Second most probable class; ties resolve to the lower class index."""
    order = np.argsort(-probs, axis=-1, kind="stable")
    return order[..., 1]


def _succeeded(p, t, tau):
    rows = np.arange(len(p))
    return (p.argmax(axis=1) == t) & (p[rows, t] >= tau)


def generate_counterfactuals(net: LayeredNetwork, x: np.ndarray, cfg: CounterfactualConfig) -> list[CounterfactualResult]:
    """Batched search; every sample gets its own target and stops independently.

    Update: ``x' <- clip(x' + step * grad[log f_t(x') - gamma * |x' - x|^2])``.
    """
    x = np.asarray(x, dtype=np.float64)
    lo, hi = cfg.clip
    p0 = forward(net, x)
    t = runner_up(p0)
    xp = x.copy()
    iters = np.zeros(len(x), dtype=np.int64)
    done = _succeeded(p0, t, cfg.confidence)
    for _ in range(cfg.max_iters):
        active = np.flatnonzero(~done)
        if active.size == 0:
            break
        g = input_gradient(net, xp[active], t[active])
        g -= 2.0 * cfg.proximity_weight * (xp[active] - x[active])
        xp[active] = np.clip(xp[active] + cfg.step_size * g, lo, hi)
        iters[active] += 1
        done[active] = _succeeded(forward(net, xp[active]), t[active], cfg.confidence)
    p1 = forward(net, xp)
    rows = np.arange(len(x))
    l2 = np.sqrt(((xp - x) ** 2).reshape(len(x), -1).sum(axis=1))
    return [
        CounterfactualResult(xp[i], bool(done[i]), int(t[i]), int(iters[i]), float(l2[i]),
                             float(p0[i, t[i]]), float(p1[i, t[i]]))
        for i in rows
    ]


def generate_counterfactual(net: LayeredNetwork, x: np.ndarray, cfg: CounterfactualConfig) -> CounterfactualResult:
    return generate_counterfactuals(net, np.asarray(x)[None], cfg)[0]


@dataclass
class ATEResult:
    ate_ratio: float
    ate_diff: float
    flip_rate: float
    n_pairs: int
    n_excluded: int


def compute_ate(net: LayeredNetwork, pairs, attempts: int | None = None) -> ATEResult:
    """Average treatment effect over successful (x, x', t) pairs.

    ``ate_ratio`` averages f_t(x')/f_t(x) - 1, ``ate_diff`` averages
    f_t(x') - f_t(x).  Pairs with f_t(x) numerically zero are excluded and
    counted.  ``flip_rate`` is ``len(pairs) / attempts`` (1.0 when attempts
    is not given).
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("compute_ate needs at least one pair")
    x = np.stack([np.asarray(p[0], dtype=np.float64) for p in pairs])
    xp = np.stack([np.asarray(p[1], dtype=np.float64) for p in pairs])
    t = np.array([int(p[2]) for p in pairs])
    rows = np.arange(len(pairs))
    f = forward(net, x)[rows, t]
    fp = forward(net, xp)[rows, t]
    keep = f > MIN_PROB
    if not keep.any():
        raise ValueError("every pair has f_t(x) numerically zero")
    ratio = fp[keep] / f[keep] - 1.0
    diff = fp[keep] - f[keep]
    attempts = len(pairs) if attempts is None else attempts
    return ATEResult(float(ratio.mean()), float(diff.mean()), len(pairs) / attempts,
                     int(keep.sum()), int((~keep).sum()))


def successful_pairs(x, results):
    return [(x[i], r.x_prime, r.target) for i, r in enumerate(results) if r.success]


def write_counterfactual_csv(path, results, ids=None) -> None:
    ids = range(len(results)) if ids is None else ids
    rows = [
        [i, int(r.success), r.target, r.iterations, r.l2_perturbation, r.p_target_x, r.p_target_x_prime]
        for i, r in zip(ids, results)
    ]
    write_csv(path, ["sample_id", "success", "target", "iterations", "l2", "f_t_x", "f_t_x_prime"], rows)

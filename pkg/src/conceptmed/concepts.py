"""Sparse logistic concept probes on hidden activations.

A probe for concept ``k`` is an L1-penalised logistic regression on the
vectorized activation at a split.  Its nonzero coefficients define the
concept-unit set that later serves as the mediator.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from conceptmed.errors import DegenerateLabelsError, ConfigError, ModeError, ShapeError, SplitError
from conceptmed.net import Activation

log = logging.getLogger(__name__)

MODES = ("flatten", "maxpool")
DEFAULT_LAMBDA_GRID = tuple(np.logspace(-4, 1, 10))
LOSS_TIE = 1e-12


@dataclass(frozen=True)
class UnitSet:
    indices: tuple[int, ...]
    granularity: str  # "scalar" or "channel"
    split: int

    def __post_init__(self):
        idx = tuple(sorted(set(int(i) for i in self.indices)))
        object.__setattr__(self, "indices", idx)
        if self.granularity not in ("scalar", "channel"):
            raise ModeError(f"unknown granularity {self.granularity!r}")

    def __len__(self):
        return len(self.indices)

    def complement(self, n_units: int) -> UnitSet:
        keep = set(self.indices)
        return UnitSet(tuple(i for i in range(n_units) if i not in keep), self.granularity, self.split)

    @classmethod
    def all_units(cls, n_units: int, granularity: str, split: int) -> UnitSet:
        return cls(tuple(range(n_units)), granularity, split)


def granularity_for(mode: str) -> str:
    return "channel" if mode == "maxpool" else "scalar"


@dataclass
class ConceptModel:
    concept_id: int
    beta: np.ndarray
    intercept: float
    lam: float
    mode: str
    split: int
    units: UnitSet = field(init=False)
    n_iter: int = 0

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64)
        if self.mode not in MODES:
            raise ModeError(f"unknown vectorization mode {self.mode!r}")
        self.units = UnitSet(tuple(np.flatnonzero(self.beta)), granularity_for(self.mode), self.split)

    def to_dict(self) -> dict:
        nz = np.flatnonzero(self.beta)
        return {
            "concept_id": self.concept_id,
            "lambda": float(self.lam),
            "mode": self.mode,
            "split": self.split,
            "intercept": float(self.intercept),
            "n_features": int(self.beta.size),
            "indices": [int(i) for i in nz],
            "values": [float(v) for v in self.beta[nz]],
        }

    @classmethod
    def from_dict(cls, d: dict) -> ConceptModel:
        beta = np.zeros(d["n_features"])
        beta[d["indices"]] = d["values"]
        return cls(d["concept_id"], beta, d["intercept"], d["lambda"], d["mode"], d["split"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# vectorization


def vectorize(a: Activation | np.ndarray, mode: str, spatial: bool | None = None) -> np.ndarray:
    """Flatten row-major, or max-pool each channel over its spatial plane.

    Works on a single activation or a batch; returns ``(L,)`` or ``(n, L)``.
    """
    if isinstance(a, Activation):
        tensor, spatial, batched = a.tensor, a.spatial, a.batched
    else:
        tensor = np.asarray(a, dtype=np.float64)
        if spatial is None:
            raise ValueError("pass spatial= when vectorizing a bare array")
        batched = tensor.ndim == (4 if spatial else 2)
    t = tensor if batched else tensor[None]
    if mode == "flatten":
        out = t.reshape(len(t), -1)
    elif mode == "maxpool":
        if not spatial:
            raise ModeError("maxpool vectorization needs a spatial (h, w, l) activation")
        out = t.max(axis=(1, 2))
    else:
        raise ModeError(f"unknown vectorization mode {mode!r}")
    return out if batched else out[0]


# ---------------------------------------------------------------------------
# L1 logistic regression


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _log1pexp(z):
    return np.logaddexp(0.0, z)


def _mean_xent(z, y):
    # mean over samples of -[y log s(z) + (1-y) log(1-s(z))]
    return float(np.mean(_log1pexp(z) - y * z))


def soft_threshold(v, t):
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def lambda_max(X: np.ndarray, y: np.ndarray) -> float:
    """Smallest penalty for which beta = 0 is optimal (intercept at prevalence)."""
    p = y.mean()
    return float(np.max(np.abs(X.T @ (y - p))) / len(y)) if X.shape[1] else 0.0


def _spectral_sq(X, iters=50):
    """Squared largest singular value of [X, 1] by power iteration, deterministic start."""
    n = X.shape[0]
    v = np.ones(X.shape[1] + 1)
    v /= np.linalg.norm(v)
    s = 1.0
    for _ in range(iters):
        u = X @ v[:-1] + v[-1]
        w = np.append(X.T @ u, u.sum())
        s = np.linalg.norm(w)
        if s == 0:
            return 1.0
        v = w / s
    return max(s, 1e-12) * 1.01  # small safety margin over the power-iteration estimate


def _check_labels(y):
    y = np.asarray(y, dtype=np.float64)
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("concept labels must be 0/1 (exclude -1 beforehand)")
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == len(y):
        raise DegenerateLabelsError("concept labels contain a single class")
    return y


def lasso_logistic(X, y, lam, beta0=None, b0=None, tol=1e-8, max_iter=5000, step=None):
    """Accelerated proximal gradient with backtracking on mean cross-entropy + lam*|beta|_1.

    FISTA momentum with function-value restart keeps the objective monotone;
    the step may grow by 1.25x per iteration and is halved until the
    quadratic upper bound holds.  The intercept is not penalised.  Stops when
    the objective decreases by less than ``tol`` or after ``max_iter``.
    Returns ``(beta, intercept, n_iter, step)``.
    """
    n, d = X.shape
    beta = np.zeros(d) if beta0 is None else np.array(beta0, dtype=np.float64)
    b = float(np.log(y.mean() / (1 - y.mean()))) if b0 is None else float(b0)
    t = 4.0 * n / _spectral_sq(X) if step is None else step

    z = X @ beta + b
    obj = _mean_xent(z, y) + lam * np.abs(beta).sum()
    # extrapolated point
    v_beta, v_b, v_z = beta, b, z
    momentum = 1.0
    it = 0
    for it in range(1, max_iter + 1):
        smooth_v = _mean_xent(v_z, y)
        r = _sigmoid(v_z) - y
        g_beta = X.T @ r / n
        g_b = r.mean()
        t *= 1.25
        while True:
            beta_new = soft_threshold(v_beta - t * g_beta, t * lam)
            b_new = v_b - t * g_b
            db, dint = beta_new - v_beta, b_new - v_b
            z_new = X @ beta_new + b_new
            smooth_new = _mean_xent(z_new, y)
            quad = smooth_v + g_beta @ db + g_b * dint + (db @ db + dint * dint) / (2 * t)
            if smooth_new <= quad + 1e-15 * abs(quad) or t < 1e-12:
                break
            t *= 0.5
        obj_new = smooth_new + lam * np.abs(beta_new).sum()
        if obj_new > obj:
            # restart: drop momentum and retry from the last accepted iterate
            if momentum == 1.0:
                break
            v_beta, v_b, v_z, momentum = beta, b, z, 1.0
            continue
        decrease = obj - obj_new
        next_momentum = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * momentum * momentum))
        w = (momentum - 1.0) / next_momentum
        v_beta = beta_new + w * (beta_new - beta)
        v_b = b_new + w * (b_new - b)
        v_z = z_new + w * (z_new - z)
        beta, b, z, obj, momentum = beta_new, b_new, z_new, obj_new, next_momentum
        if decrease < tol:
            break
    return beta, b, it, t


def fit_concept(acts, labels, lam: float, *, concept_id: int = 0, mode: str = "flatten", split: int = -1,
                tol: float = 1e-8, max_iter: int = 5000) -> ConceptModel:
    """Fit one sparse concept probe on vectorized activations ``acts`` (n, L)."""
    X = np.asarray(acts, dtype=np.float64)
    y = _check_labels(labels)
    if X.ndim != 2 or len(X) != len(y):
        raise ShapeError(f"acts must be (n, L) matching {len(y)} labels, got {X.shape}")
    if np.bincount(y.astype(int), minlength=2).min() < 2:
        raise DegenerateLabelsError("need at least two examples of each label")
    beta, b, it, _ = lasso_logistic(X, y, lam, tol=tol, max_iter=max_iter)
    return ConceptModel(concept_id, beta, b, lam, mode, split, n_iter=it)


def stratified_folds(y, folds: int, seed: int) -> list[np.ndarray]:
    """Seeded stratified assignment; returns one validation index array per fold."""
    rng = np.random.default_rng(seed)
    buckets = [[] for _ in range(folds)]
    for cls in (0, 1):
        idx = np.flatnonzero(y == cls)
        idx = idx[rng.permutation(len(idx))]
        for j, i in enumerate(idx):
            buckets[j % folds].append(i)
    return [np.sort(np.asarray(b, dtype=np.int64)) for b in buckets]


@dataclass
class LambdaSelection:
    lam: float
    folds: int
    grid: tuple[float, ...]
    cv_loss: tuple[float, ...]


def select_lambda(acts, labels, grid=DEFAULT_LAMBDA_GRID, folds: int = 10, seed: int = 0,
                  tol: float = 1e-8, max_iter: int = 5000) -> LambdaSelection:
    """Pick the grid value with least mean validation cross-entropy.

    Folds are stratified and seeded.  If a class has fewer members than
    ``folds`` the fold count drops to that size.  Ties go to the larger lambda.
    Each fold walks the grid from largest to smallest lambda with warm starts.
    """
    grid = tuple(sorted(set(float(g) for g in grid)))
    if not grid:
        raise ConfigError("lambda grid is empty", "lambda_grid")
    X = np.asarray(acts, dtype=np.float64)
    y = _check_labels(labels)
    if len(grid) == 1:
        return LambdaSelection(grid[0], 0, grid, (float("nan"),))
    k = min(folds, int(np.bincount(y.astype(int), minlength=2).min()))
    if k < 2:
        raise DegenerateLabelsError("need at least two examples of each label for cross-validation")
    if k < folds:
        log.info("lowering fold count from %d to %d (smallest class size)", folds, k)
    losses = np.zeros(len(grid))
    for val in stratified_folds(y, k, seed):
        train = np.setdiff1d(np.arange(len(y)), val)
        Xt, yt = X[train], y[train]
        beta, b, step = None, None, None
        for j in range(len(grid) - 1, -1, -1):
            beta, b, _, step = lasso_logistic(Xt, yt, grid[j], beta, b, tol=tol, max_iter=max_iter, step=step)
            losses[j] += _mean_xent(X[val] @ beta + b, y[val]) / k
    # descending scan; a smaller lambda must beat the incumbent by more than
    # rounding noise, so exact ties (e.g. several all-zero fits) keep the larger one
    best = len(grid) - 1
    for j in range(len(grid) - 2, -1, -1):
        if losses[j] < losses[best] - LOSS_TIE * max(1.0, abs(losses[best])):
            best = j
    return LambdaSelection(grid[best], k, grid, tuple(float(v) for v in losses))


def fit_concept_cv(acts, labels, grid=DEFAULT_LAMBDA_GRID, folds: int = 10, seed: int = 0, **kw) -> tuple[ConceptModel, LambdaSelection]:
    """Cross-validated lambda followed by a refit on all given samples."""
    sel = select_lambda(acts, labels, grid, folds, seed)
    return fit_concept(acts, labels, sel.lam, **kw), sel


def concept_logit(m: ConceptModel, a: Activation | np.ndarray) -> np.ndarray | float:
    """Pre-sigmoid probe output for an activation (or a batch of them)."""
    if isinstance(a, Activation):
        if a.split != m.split:
            raise SplitError(f"probe fit at split {m.split}, activation from split {a.split}")
        v = vectorize(a, m.mode)
    else:
        v = np.asarray(a, dtype=np.float64)
    if v.shape[-1] != m.beta.size:
        raise ShapeError(f"probe expects {m.beta.size} features, got {v.shape[-1]}")
    out = v @ m.beta + m.intercept
    return float(out) if np.ndim(out) == 0 else out


def predict_proba(m: ConceptModel, a) -> np.ndarray | float:
    return _sigmoid(concept_logit(m, a))


# ---------------------------------------------------------------------------
# probe evaluation


def auc(scores, labels) -> float:
    """P(score+ > score-) + 0.5 P(score+ == score-) via average ranks."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabelsError("AUC is undefined without both classes")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def eval_probe(m: ConceptModel, acts, labels) -> dict:
    """AUC of the probe logit and recall at probability 0.5 on held-out data."""
    labels = np.asarray(labels).astype(int)
    z = np.asarray(concept_logit(m, acts))
    pos = labels == 1
    return {"auc": auc(z, labels), "recall": float((z[pos] > 0).mean())}


# ---------------------------------------------------------------------------
# sampling helpers


def probe_indices(c_col, seed: int, max_per_class: int | None = None) -> np.ndarray:
    """Positives (label 1) plus an equal-size seeded random draw of negatives (label 0).

    Samples labelled -1 never enter.  ``max_per_class`` caps both sides.
    """
    c_col = np.asarray(c_col)
    rng = np.random.default_rng(seed)
    pos = np.flatnonzero(c_col == 1)
    neg = np.flatnonzero(c_col == 0)
    n = min(len(pos), len(neg))
    if max_per_class is not None:
        n = min(n, max_per_class)
    if n < 2:
        raise DegenerateLabelsError("too few labelled examples for a balanced probe set")
    pos = np.sort(rng.choice(pos, n, replace=False))
    neg = np.sort(rng.choice(neg, n, replace=False))
    return np.concatenate([pos, neg])


def random_units(size: int, n_units: int, split: int, granularity: str, seed: int) -> UnitSet:
    """Uniform sample of ``size`` units without replacement (random-concept ablation)."""
    if size < 0 or size > n_units:
        raise ValueError(f"cannot draw {size} of {n_units} units")
    rng = np.random.default_rng(seed)
    return UnitSet(tuple(rng.choice(n_units, size, replace=False)), granularity, split)


def activation_mask(unit: int, acts: Activation | np.ndarray, quantile: float = 0.99):
    """Threshold one channel at its pooled quantile; returns (threshold, masks (n, h, w))."""
    if isinstance(acts, Activation):
        if not acts.spatial:
            raise ModeError("activation masks need a spatial split")
        t = acts.tensor if acts.batched else acts.tensor[None]
    else:
        t = np.asarray(acts, dtype=np.float64)
        if t.ndim != 4:
            raise ModeError("activation masks need spatial activations of shape (n, h, w, l)")
    if not 0 <= unit < t.shape[-1]:
        raise IndexError(f"channel {unit} out of range")
    plane = t[..., unit]
    threshold = float(np.quantile(plane, quantile))
    return threshold, plane > threshold


def unit_channel(index: int, shape: tuple[int, ...], granularity: str) -> int:
    """Channel a unit belongs to (identity for channel units)."""
    if granularity == "channel":
        return int(index)
    return int(np.unravel_index(index, shape)[-1])

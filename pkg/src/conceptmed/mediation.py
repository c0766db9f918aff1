"""Direct and indirect effects of counterfactual perturbations through concept units.

Effects are measured on the probability of the counterfactual's target class
``t``.  For a unit set V at split s::

    DE = phi2(splice(phi1(x'), phi1(x), V))_t / f_t(x) - 1
    IE = phi2(splice(phi1(x),  phi1(x'), V))_t / f_t(x) - 1
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from conceptmed.concepts import ConceptModel, UnitSet
from conceptmed.counterfactual import MIN_PROB
from conceptmed.errors import ModeError, SplitError
from conceptmed.io import write_csv
from conceptmed.net import LayeredNetwork, activation_gradient, forward_from, forward_split, splice


@dataclass
class PairBatch:
    """Stacked successful counterfactual pairs."""

    x: np.ndarray
    x_prime: np.ndarray
    target: np.ndarray

    @classmethod
    def from_pairs(cls, pairs) -> PairBatch:
        pairs = list(pairs)
        if not pairs:
            raise ValueError("no successful counterfactual pairs")
        return cls(
            np.stack([np.asarray(p[0], dtype=np.float64) for p in pairs]),
            np.stack([np.asarray(p[1], dtype=np.float64) for p in pairs]),
            np.array([int(p[2]) for p in pairs], dtype=np.int64),
        )

    def __len__(self):
        return len(self.target)


class ExcludedPair(ValueError):
    """Raised when a pair's factual target probability is numerically zero."""


def _pick(p, t):
    return p[np.arange(len(t)), t]


class _SplitCache:
    """phi1 of x and x' at one split plus the factual f_t(x), reused across unit sets."""

    def __init__(self, net, batch: PairBatch, s: int):
        self.net, self.s, self.t = net, s, batch.target
        self.a = forward_split(net, batch.x, s)
        self.a_prime = forward_split(net, batch.x_prime, s)
        self.f = _pick(forward_from(net, self.a, s), self.t)
        self.keep = self.f > MIN_PROB

    def _check(self, units):
        if units.split != self.s:
            raise SplitError(f"unit set belongs to split {units.split}, not {self.s}")

    def de(self, units):
        self._check(units)
        hybrid = splice(self.a_prime, self.a, units)
        return _pick(forward_from(self.net, hybrid, self.s), self.t) / self.f - 1.0

    def ie(self, units):
        self._check(units)
        hybrid = splice(self.a, self.a_prime, units)
        return _pick(forward_from(self.net, hybrid, self.s), self.t) / self.f - 1.0

    def ate_terms(self):
        return _pick(forward_from(self.net, self.a_prime, self.s), self.t) / self.f - 1.0


def _per_pair(kind, net, s, x, x_prime, t, units):
    single = np.asarray(x).shape == net.input_shape
    batch = PairBatch(np.asarray(x, dtype=np.float64).reshape((-1,) + net.input_shape),
                      np.asarray(x_prime, dtype=np.float64).reshape((-1,) + net.input_shape),
                      np.atleast_1d(np.asarray(t, dtype=np.int64)))
    cache = _SplitCache(net, batch, s)
    if not cache.keep.all():
        raise ExcludedPair("f_t(x) is numerically zero; pair excluded")
    out = cache.de(units) if kind == "de" else cache.ie(units)
    return float(out[0]) if single else out


def direct_effect(net: LayeredNetwork, s: int, x, x_prime, t, units: UnitSet):
    """Effect of x -> x' with the mediator held at its factual value."""
    return _per_pair("de", net, s, x, x_prime, t, units)


def indirect_effect(net: LayeredNetwork, s: int, x, x_prime, t, units: UnitSet):
    """Effect of moving only the mediator to its counterfactual value."""
    return _per_pair("ie", net, s, x, x_prime, t, units)


@dataclass
class MediationRecord:
    concept_id: int
    split: int
    de_mean: float
    ie_mean: float
    ie_abs_mean: float
    n_pairs: int
    ate_ratio: float
    n_units: int = 0


def mediation_sweep(net: LayeredNetwork, pairs, mediators: dict, splits) -> list[MediationRecord]:
    """Mean DE, IE and |IE| for every (concept, split) mediator.

    ``mediators`` maps ``(concept_id, split)`` to a :class:`ConceptModel` or
    a :class:`UnitSet`.  Records come out ordered by split, then concept id.
    """
    batch = pairs if isinstance(pairs, PairBatch) else PairBatch.from_pairs(pairs)
    records = []
    for s in splits:
        cache = _SplitCache(net, batch, s)
        if not cache.keep.any():
            raise ValueError(f"no usable counterfactual pairs at split {s}")
        keep = cache.keep
        ate = float(np.mean(cache.ate_terms()[keep]))
        for (k, ms) in sorted(key for key in mediators if key[1] == s):
            med = mediators[(k, ms)]
            units = med.units if isinstance(med, ConceptModel) else med
            de = cache.de(units)[keep]
            ie = cache.ie(units)[keep]
            records.append(MediationRecord(k, s, float(de.mean()), float(ie.mean()), float(np.abs(ie).mean()),
                                           int(keep.sum()), ate, len(units)))
    return records


@dataclass
class ConceptRanking:
    entries: list[tuple[int, float]]

    @property
    def order(self) -> list[int]:
        return [k for k, _ in self.entries]

    def top(self, n: int) -> list[int]:
        return self.order[:n]


def rank_by_score(scores: dict) -> ConceptRanking:
    """Descending by score; ties by concept id ascending."""
    return ConceptRanking(sorted(((int(k), float(v)) for k, v in scores.items()), key=lambda kv: (-kv[1], kv[0])))


def rank_concepts(records) -> ConceptRanking:
    records = list(records)
    splits = {r.split for r in records}
    if len(splits) > 1:
        raise ValueError(f"rank_concepts needs records from a single split, got {sorted(splits)}")
    ids = [r.concept_id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate concept records")
    return rank_by_score({r.concept_id: r.ie_abs_mean for r in records})


def concept_direction(m: ConceptModel, shape: tuple[int, ...]) -> np.ndarray:
    """Unit-norm probe direction mapped back to activation shape."""
    norm = np.linalg.norm(m.beta)
    if norm == 0:
        raise ValueError("probe has an all-zero coefficient vector; direction undefined")
    u = m.beta / norm
    if m.mode == "flatten":
        return u.reshape(shape)
    if len(shape) != 3:
        raise ModeError("maxpool probe on a flat activation")
    return np.broadcast_to(u, shape).copy()


def directional_derivatives(net: LayeredNetwork, s: int, m: ConceptModel, x, t) -> np.ndarray:
    if m.split != s:
        raise SplitError(f"probe fit at split {m.split}, requested {s}")
    a = forward_split(net, np.asarray(x, dtype=np.float64), s)
    g = activation_gradient(net, a, s, t)
    d = concept_direction(m, net.shape_at(s))
    return (g * d).reshape(len(g), -1).sum(axis=1)


def tcav_score(net: LayeredNetwork, s: int, m: ConceptModel, x, t: int) -> float:
    """Fraction of class-``t`` samples ``x`` whose log f_t rises along the probe direction."""
    x = np.asarray(x, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("tcav_score needs at least one sample")
    return float((directional_derivatives(net, s, m, x, t) > 0).mean())


def write_heatmap_csv(path, records, names=None) -> None:
    names = names or {}
    rows = [[names.get(r.concept_id, f"c{r.concept_id}"), r.split, r.ie_mean, r.ie_abs_mean, r.de_mean, r.n_pairs, r.n_units]
            for r in records]
    write_csv(path, ["concept", "split", "ie_mean", "ie_abs_mean", "de_mean", "n_pairs", "n_units"], rows)


def write_ranking_csv(path, ranking: ConceptRanking, tcav: dict, names=None) -> None:
    names = names or {}
    rows = [[i + 1, names.get(k, f"c{k}"), score, tcav.get(k, float("nan"))] for i, (k, score) in enumerate(ranking.entries)]
    write_csv(path, ["rank", "concept", "score", "tcav_score"], rows)

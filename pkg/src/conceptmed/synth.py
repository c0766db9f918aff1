"""Synthetic images with planted concept motifs and a known label rule."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from conceptmed.errors import ConfigError
from conceptmed.io import atomic_write_bytes, atomic_write_text, write_csv

RULES = ("AND", "OR", "TWO_OF_THREE")
MOTIF = 4
INTENSITY = 0.9


@dataclass
class SynthConfig:
    grid_size: int = 16
    K: int = 8
    causal_set: tuple[int, ...] = (0, 1)
    rule: str = "AND"
    concept_prevalence: tuple[float, ...] | float = 0.5
    noise_sigma: float = 0.1
    missing_prob: float = 0.05
    N: int = 2000
    seed: int = 0

    def __post_init__(self):
        self.causal_set = tuple(sorted(int(k) for k in self.causal_set))
        if isinstance(self.concept_prevalence, (int, float)):
            self.concept_prevalence = (float(self.concept_prevalence),) * self.K
        self.concept_prevalence = tuple(float(p) for p in self.concept_prevalence)
        self.validate()

    def validate(self):
        if self.rule not in RULES:
            raise ConfigError(f"rule must be one of {RULES}", "synth.rule")
        if self.K < 1:
            raise ConfigError("need at least one concept", "synth.K")
        if not self.causal_set or any(k < 0 or k >= self.K for k in self.causal_set):
            raise ConfigError(f"causal_set must be a nonempty subset of 0..{self.K - 1}", "synth.causal_set")
        if len(set(self.causal_set)) != len(self.causal_set):
            raise ConfigError("duplicate causal concepts", "synth.causal_set")
        if self.rule == "TWO_OF_THREE" and len(self.causal_set) != 3:
            raise ConfigError("TWO_OF_THREE needs exactly three causal concepts", "synth.causal_set")
        if len(self.concept_prevalence) != self.K:
            raise ConfigError(f"expected {self.K} prevalences", "synth.concept_prevalence")
        if any(not 0.0 < p < 1.0 for p in self.concept_prevalence):
            raise ConfigError("prevalence must lie strictly inside (0, 1)", "synth.concept_prevalence")
        if self.noise_sigma < 0:
            raise ConfigError("must be >= 0", "synth.noise_sigma")
        if not 0.0 <= self.missing_prob < 1.0:
            raise ConfigError("must lie in [0, 1)", "synth.missing_prob")
        if self.N < 5:
            raise ConfigError("need at least 5 samples for an 80/20 split", "synth.N")
        motif_slots(self.grid_size, self.K, self.causal_set)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["causal_set"] = list(self.causal_set)
        d["concept_prevalence"] = list(self.concept_prevalence)
        return d


def motif_slots(grid_size: int, K: int, causal_set=()) -> list[tuple[int, int]]:
    """Top-left corners of the disjoint 4x4 regions reserved for each concept.

    The grid is tiled into 4x4 cells.  Causal concepts are placed first, each
    on the free cell farthest (Chebyshev) from those already placed, starting
    at the top-left corner.  Distractors then fill cells at least two cells
    away from every causal cell (checkerboard cells first), falling back to
    the remaining cells only when the grid is too crowded.
    """
    per_side = grid_size // MOTIF
    cells = [(r, c) for r in range(per_side) for c in range(per_side)]
    if K > len(cells):
        raise ConfigError(f"{K} disjoint {MOTIF}x{MOTIF} motifs do not fit in a {grid_size}x{grid_size} grid", "synth.K")

    def dist(a, b):
        return max(abs(a[0] - b[0]), abs(a[1] - b[1]))

    assigned: dict[int, tuple[int, int]] = {}
    for k in sorted(set(causal_set)):
        free = [cell for cell in cells if cell not in assigned.values()]
        if not assigned:
            assigned[k] = free[0]
        else:
            assigned[k] = max(free, key=lambda cell: min(dist(cell, a) for a in assigned.values()))
    causal_cells = list(assigned.values())
    free = [cell for cell in cells if cell not in causal_cells]
    far = [cell for cell in free if all(dist(cell, a) >= 2 for a in causal_cells)]
    near = [cell for cell in free if cell not in far]

    def checker_first(group):
        return [c for c in group if sum(c) % 2 == 0] + [c for c in group if sum(c) % 2 == 1]

    pool = checker_first(far) + checker_first(near)
    for k in range(K):
        if k not in assigned:
            assigned[k] = pool.pop(0)
    return [(assigned[k][0] * MOTIF, assigned[k][1] * MOTIF) for k in range(K)]


def motif_mask(config: SynthConfig, k: int) -> np.ndarray:
    """Boolean (grid, grid) mask of concept ``k``'s reserved region."""
    r, c = motif_slots(config.grid_size, config.K, config.causal_set)[k]
    mask = np.zeros((config.grid_size, config.grid_size), dtype=bool)
    mask[r:r + MOTIF, c:c + MOTIF] = True
    return mask


def apply_rule(rule: str, c_causal: np.ndarray) -> np.ndarray:
    """Label from the causal concepts' true presence, shape (n, |causal|) -> (n,)."""
    c_causal = np.asarray(c_causal, dtype=bool)
    if rule == "AND":
        return c_causal.all(axis=1)
    if rule == "OR":
        return c_causal.any(axis=1)
    return c_causal.sum(axis=1) >= 2


@dataclass
class Split:
    x: np.ndarray       # (n, g, g, 1) float64 in [0, 1]
    y: np.ndarray       # (n, 2) int8 one-hot
    c: np.ndarray       # (n, K) int8 over {-1, 0, 1}
    c_true: np.ndarray  # (n, K) int8 over {0, 1}

    def __len__(self):
        return len(self.x)

    @property
    def labels(self) -> np.ndarray:
        return self.y.argmax(axis=1)


@dataclass
class Dataset:
    config: SynthConfig
    train: Split
    test: Split
    meta: dict = field(default_factory=dict)


def generate(config: SynthConfig) -> Dataset:
    config.validate()
    rng = np.random.default_rng(config.seed)
    n, g, K = config.N, config.grid_size, config.K
    prevalence = np.asarray(config.concept_prevalence)
    c_true = (rng.random((n, K)) < prevalence).astype(np.int8)

    x = np.zeros((n, g, g, 1))
    for k, (r, col) in enumerate(motif_slots(g, K, config.causal_set)):
        x[c_true[:, k] == 1, r:r + MOTIF, col:col + MOTIF, 0] = INTENSITY
    if config.noise_sigma > 0:
        x += rng.normal(0.0, config.noise_sigma, size=x.shape)
    np.clip(x, 0.0, 1.0, out=x)

    label = apply_rule(config.rule, c_true[:, list(config.causal_set)]).astype(np.int64)
    y = np.zeros((n, 2), dtype=np.int8)
    y[np.arange(n), label] = 1

    c = c_true.copy()
    c[rng.random((n, K)) < config.missing_prob] = -1

    order = rng.permutation(n)
    n_train = int(round(0.8 * n))
    tr, te = order[:n_train], order[n_train:]
    return Dataset(
        config,
        Split(x[tr], y[tr], c[tr], c_true[tr]),
        Split(x[te], y[te], c[te], c_true[te]),
    )


def ground_truth(config: SynthConfig) -> set[int]:
    return set(config.causal_set)


# ---------------------------------------------------------------------------
# on-disk format

_ARRAYS = (("x", "<f8"), ("y", "i1"), ("c", "i1"), ("c_true", "i1"))


def save_dataset(ds: Dataset, directory) -> None:
    """JSON manifest, one little-endian binary file per array, and a concept CSV."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"config": ds.config.to_dict(), "splits": {}}
    for name in ("train", "test"):
        split = getattr(ds, name)
        manifest["splits"][name] = {"n": len(split), "arrays": {}}
        for field_name, dtype in _ARRAYS:
            arr = getattr(split, field_name)
            fname = f"{name}_{field_name}.bin"
            atomic_write_bytes(directory / fname, np.ascontiguousarray(arr, dtype=dtype).tobytes())
            manifest["splits"][name]["arrays"][field_name] = {"file": fname, "dtype": dtype, "shape": list(arr.shape)}
    atomic_write_text(directory / "dataset.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    rows = []
    for name in ("train", "test"):
        split = getattr(ds, name)
        for i in range(len(split)):
            rows.append([name, i, int(split.labels[i])] + [int(v) for v in split.c[i]] + [int(v) for v in split.c_true[i]])
    header = ["split", "index", "label"] + [f"c{k}" for k in range(ds.config.K)] + [f"c_true{k}" for k in range(ds.config.K)]
    write_csv(directory / "concepts.csv", header, rows)


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    manifest = json.loads((directory / "dataset.json").read_text())
    cfg = manifest["config"]
    config = SynthConfig(**{**cfg, "causal_set": tuple(cfg["causal_set"]), "concept_prevalence": tuple(cfg["concept_prevalence"])})
    splits = {}
    for name, info in manifest["splits"].items():
        arrays = {}
        for field_name, spec in info["arrays"].items():
            raw = np.frombuffer((directory / spec["file"]).read_bytes(), dtype=spec["dtype"])
            arr = raw.reshape(spec["shape"])
            arrays[field_name] = arr.astype(np.float64) if spec["dtype"] == "<f8" else arr.astype(np.int8)
        splits[name] = Split(**arrays)
    return Dataset(config, splits["train"], splits["test"])

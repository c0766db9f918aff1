"""End-to-end pipeline: data, classifier, probes, counterfactuals, mediation, surrogate."""

from __future__ import annotations

import dataclasses
import json
import logging
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from conceptmed import __version__
from conceptmed import concepts as C
from conceptmed import counterfactual as CF
from conceptmed import mediation as M
from conceptmed import net as N
from conceptmed import surrogate as G
from conceptmed import synth as S
from conceptmed.errors import ConfigError, DependencyError, NoCounterfactualsError
from conceptmed.io import atomic_write_bytes, read_csv, read_json, sha256_file, write_csv, write_json

log = logging.getLogger(__name__)

STAGES = ("gen-data", "train", "fit-concepts", "counterfactuals", "mediate", "rank", "surrogate", "report")
RANDOM_CONCEPT = -1

REPORT_FILES = ("probe_metrics.csv", "counterfactuals.csv", "heatmap.csv", "ranking.csv",
                "sweep.csv", "tree.json", "tree.txt", "manifest.json")

CSV_COLUMNS = {
    "probe_metrics.csv": {
        "concept": "concept name", "split": "layer index of the split", "auc": "held-out ROC AUC of the probe logit",
        "recall": "held-out recall at probability 0.5", "lambda": "cross-validated L1 weight",
        "n_units": "size of the concept-unit set", "folds": "cross-validation folds used",
    },
    "counterfactuals.csv": {
        "sample_id": "test-split index", "success": "1 if the decision flipped with f_t >= confidence",
        "target": "flip target class t", "iterations": "gradient steps taken", "l2": "L2 norm of x' - x",
        "f_t_x": "f_t(x)", "f_t_x_prime": "f_t(x')",
    },
    "heatmap.csv": {
        "concept": "concept name (random = random-unit ablation)", "split": "layer index",
        "ie_mean": "mean indirect effect", "ie_abs_mean": "mean |indirect effect|", "de_mean": "mean direct effect",
        "n_pairs": "successful pairs averaged", "n_units": "mediator size",
    },
    "ranking.csv": {
        "rank": "1-based position", "concept": "concept name", "score": "mean |IE| at the ranking split",
        "tcav_score": "fraction of class samples with positive directional derivative along the probe",
    },
    "sweep.csv": {
        "fraction": "fraction of top-ranked concepts kept", "n_concepts": "concepts kept",
        "recall": "held-out recall of the positive class against f's labels",
        "agreement": "held-out agreement with f", "recall_truth": "held-out recall against ground-truth labels",
    },
}


def _default_fractions():
    return [0.125, 0.25, 0.375, 0.5, 0.625, 0.75, 0.875, 1.0]


@dataclass
class PipelineConfig:
    synth: S.SynthConfig = field(default_factory=S.SynthConfig)
    train: N.TrainConfig = field(default_factory=N.TrainConfig)
    lambda_grid: list[float] = field(default_factory=lambda: list(C.DEFAULT_LAMBDA_GRID))
    counterfactual: CF.CounterfactualConfig = field(default_factory=CF.CounterfactualConfig)
    splits: list[int] | None = None        # None -> every split candidate
    rank_split: int | None = None          # None -> first swept split
    fractions: list[float] = field(default_factory=_default_fractions)
    out_dir: str = "run"
    seed: int = 0
    probe_mode: str = "flatten"
    cv_folds: int = 10
    probe_max_per_class: int | None = 200
    max_depth: int = 3
    min_leaf: int = 5
    tcav_class: int = 1

    def __post_init__(self):
        if self.probe_mode not in C.MODES:
            raise ConfigError(f"must be one of {C.MODES}", "probe_mode")
        if not self.lambda_grid:
            raise ConfigError("lambda grid is empty", "lambda_grid")
        if any(not (g >= 0) for g in self.lambda_grid):
            raise ConfigError("lambda values must be >= 0", "lambda_grid")
        if not self.fractions or any(not 0 < f <= 1 for f in self.fractions):
            raise ConfigError("fractions must be a nonempty list in (0, 1]", "fractions")
        if self.cv_folds < 2:
            raise ConfigError("need at least 2 folds", "cv_folds")
        if self.max_depth < 0:
            raise ConfigError("must be >= 0", "max_depth")
        if self.min_leaf < 1:
            raise ConfigError("must be >= 1", "min_leaf")
        if self.seed < 0:
            raise ConfigError("must be a non-negative integer", "seed")

    def stage_seed(self, stage: str) -> int:
        return self.seed + STAGES.index(stage)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["synth"] = self.synth.to_dict()
        d["counterfactual"]["clip"] = list(self.counterfactual.clip)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> PipelineConfig:
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown keys {sorted(unknown)}", "<root>")
        try:
            if "synth" in d:
                d["synth"] = _sub(S.SynthConfig, d["synth"], "synth")
            if "train" in d:
                d["train"] = _sub(N.TrainConfig, d["train"], "train")
            if "counterfactual" in d:
                cf = dict(d["counterfactual"])
                if "clip" in cf:
                    cf["clip"] = tuple(cf["clip"])
                d["counterfactual"] = _sub(CF.CounterfactualConfig, cf, "counterfactual")
            return cls(**d)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def _sub(klass, d, path):
    if not isinstance(d, dict):
        raise ConfigError("expected an object", path)
    known = {f.name for f in dataclasses.fields(klass)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)}", path)
    try:
        return klass(**d)
    except ConfigError as exc:
        if exc.path is None:
            full = path
        elif exc.path.startswith(path + "."):
            full = exc.path
        else:
            full = f"{path}.{exc.path}"
        raise ConfigError(exc.message, full) from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), path) from exc


def load_config(path) -> PipelineConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}", str(path)) from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object", "<root>")
    return PipelineConfig.from_dict(raw)


def concept_name(k: int) -> str:
    return "random" if k == RANDOM_CONCEPT else f"c{k}"


def _concept_id(name: str) -> int:
    return RANDOM_CONCEPT if name == "random" else int(name[1:])


class Pipeline:
    """Stage runner over one output directory."""

    def __init__(self, config: PipelineConfig):
        self.config = config
        self.out = Path(config.out_dir)
        self.work = self.out / "work"

    # -- paths and bookkeeping -------------------------------------------------

    def path(self, stage: str, name: str) -> Path:
        return self.work / stage / name

    def _require(self, stage: str, upstream: str, *names: str):
        for name in names:
            p = self.path(upstream, name)
            if not p.exists():
                raise DependencyError(stage, str(p), upstream)

    def _manifest_path(self):
        return self.out / "manifest.json"

    def _record(self, stage: str, seconds: float):
        mp = self._manifest_path()
        manifest = read_json(mp) if mp.exists() else {}
        manifest["tool_version"] = __version__
        manifest["config"] = self.config.to_dict()
        manifest.setdefault("timings", {})[stage] = round(seconds, 3)
        arts = manifest.setdefault("artifacts", {})
        stage_dir = self.work / stage
        for key in [k for k in arts if k.startswith(f"work/{stage}/")]:
            del arts[key]
        if stage_dir.exists():
            for p in sorted(stage_dir.rglob("*")):
                if p.is_file():
                    arts[p.relative_to(self.out).as_posix()] = sha256_file(p)
        write_json(mp, manifest)

    def run_stage(self, stage: str):
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}; choose from {STAGES}", "stage")
        t0 = time.perf_counter()
        getattr(self, "_" + stage.replace("-", "_"))()
        self._record(stage, time.perf_counter() - t0)
        log.info("stage %s done in %.1fs", stage, time.perf_counter() - t0)

    def run_all(self) -> dict:
        for stage in STAGES:
            try:
                self.run_stage(stage)
            except Exception as exc:
                exc.add_note(f"while running stage {stage!r}") if hasattr(exc, "add_note") else None
                log.error("stage %s failed: %s", stage, exc)
                raise
        return read_json(self.out / "report" / "manifest.json")

    # -- loaders ---------------------------------------------------------------

    def dataset(self) -> S.Dataset:
        return S.load_dataset(self.work / "gen-data")

    def network(self) -> N.LayeredNetwork:
        return N.load_network(self.work / "train")

    def splits(self, net) -> list[int]:
        splits = self.config.splits or list(net.split_candidates)
        bad = [s for s in splits if s not in net.split_candidates]
        if bad:
            raise ConfigError(f"{bad} not among split candidates {net.split_candidates}", "splits")
        return splits

    def rank_split(self, net) -> int:
        splits = self.splits(net)
        s = self.config.rank_split if self.config.rank_split is not None else splits[0]
        if s not in splits:
            raise ConfigError(f"{s} is not a swept split {splits}", "rank_split")
        return s

    def concept_models(self) -> dict:
        raw = read_json(self.path("fit-concepts", "models.json"))
        return {(d["concept_id"], d["split"]): C.ConceptModel.from_dict(d) for d in raw["models"]}

    def pairs(self, ds) -> tuple[M.PairBatch, int]:
        info = read_json(self.path("counterfactuals", "counterfactuals.json"))
        xp = np.frombuffer(self.path("counterfactuals", "x_prime.bin").read_bytes(), dtype="<f8")
        xp = xp.reshape(ds.test.x.shape).astype(np.float64)
        ok = np.asarray(info["success"], dtype=bool)
        if not ok.any():
            raise NoCounterfactualsError("no successful counterfactuals; mediation undefined")
        t = np.asarray(info["target"], dtype=np.int64)
        return M.PairBatch(ds.test.x[ok], xp[ok], t[ok]), len(ok)

    # -- stages ----------------------------------------------------------------

    def _gen_data(self):
        synth = dataclasses.replace(self.config.synth, seed=self.config.stage_seed("gen-data"))
        S.save_dataset(S.generate(synth), self.work / "gen-data")

    def _train(self):
        self._require("train", "gen-data", "dataset.json")
        ds = self.dataset()
        seed = self.config.stage_seed("train")
        net = N.default_network(ds.train.x.shape[1:], ds.train.y.shape[1], seed=seed)
        cfg = dataclasses.replace(self.config.train, seed=seed)
        net = N.train(net, ds.train.x, ds.train.y, cfg)
        N.save_network(net, self.work / "train")
        write_json(self.path("train", "metrics.json"), {
            "train_accuracy": N.accuracy(net, ds.train.x, ds.train.y),
            "test_accuracy": N.accuracy(net, ds.test.x, ds.test.y),
        })

    def _fit_concepts(self):
        self._require("fit-concepts", "gen-data", "dataset.json")
        self._require("fit-concepts", "train", "network.json")
        ds, net = self.dataset(), self.network()
        cfg = self.config
        base = cfg.stage_seed("fit-concepts")
        models, rows = [], []
        for s in self.splits(net):
            a_train = N.forward_split(net, ds.train.x, s)
            a_test = N.forward_split(net, ds.test.x, s)
            if cfg.probe_mode == "maxpool" and not a_train.spatial:
                log.info("split %d is flat; using flatten vectorization there", s)
            mode = cfg.probe_mode if a_train.spatial else "flatten"
            X, Xt = C.vectorize(a_train, mode), C.vectorize(a_test, mode)
            for k in range(ds.config.K):
                idx = C.probe_indices(ds.train.c[:, k], seed=base * 1000 + k, max_per_class=cfg.probe_max_per_class)
                m, sel = C.fit_concept_cv(X[idx], ds.train.c[idx, k], cfg.lambda_grid, cfg.cv_folds,
                                          seed=base * 1000 + k, concept_id=k, mode=mode, split=s)
                labelled = ds.test.c[:, k] >= 0
                ev = C.eval_probe(m, Xt[labelled], ds.test.c[labelled, k])
                models.append(m.to_dict() | {"cv_folds": sel.folds, "cv_loss": list(sel.cv_loss)})
                rows.append([concept_name(k), s, ev["auc"], ev["recall"], m.lam, len(m.units), sel.folds])
        write_json(self.path("fit-concepts", "models.json"), {"models": models})
        write_csv(self.path("fit-concepts", "probe_metrics.csv"), list(CSV_COLUMNS["probe_metrics.csv"]), rows)

    def _counterfactuals(self):
        self._require("counterfactuals", "gen-data", "dataset.json")
        self._require("counterfactuals", "train", "network.json")
        ds, net = self.dataset(), self.network()
        results = CF.generate_counterfactuals(net, ds.test.x, self.config.counterfactual)
        xp = np.stack([r.x_prime for r in results])
        atomic_write_bytes(self.path("counterfactuals", "x_prime.bin"), np.ascontiguousarray(xp, dtype="<f8").tobytes())
        CF.write_counterfactual_csv(self.path("counterfactuals", "counterfactuals.csv"), results)
        pairs = CF.successful_pairs(ds.test.x, results)
        summary = {"attempts": len(results), "successes": len(pairs),
                   "success": [int(r.success) for r in results], "target": [r.target for r in results]}
        if pairs:
            ate = CF.compute_ate(net, pairs, attempts=len(results))
            summary |= dataclasses.asdict(ate)
        write_json(self.path("counterfactuals", "counterfactuals.json"), summary)

    def _mediate(self):
        self._require("mediate", "fit-concepts", "models.json")
        self._require("mediate", "counterfactuals", "counterfactuals.json", "x_prime.bin")
        ds, net = self.dataset(), self.network()
        models = self.concept_models()
        batch, _ = self.pairs(ds)
        mediators = dict(models)
        base = self.config.stage_seed("mediate")
        for s in self.splits(net):
            sizes = [len(models[(k, s)].units) for k in range(ds.config.K)]
            gran = models[(0, s)].units.granularity
            size = max(1, int(round(float(np.mean(sizes)))))
            mediators[(RANDOM_CONCEPT, s)] = C.random_units(size, net.n_units(s, gran), s, gran, base * 1000 + s)
        records = M.mediation_sweep(net, batch, mediators, self.splits(net))
        names = {r.concept_id: concept_name(r.concept_id) for r in records}
        M.write_heatmap_csv(self.path("mediate", "heatmap.csv"), records, names)
        write_json(self.path("mediate", "records.json"), {
            "records": [dataclasses.asdict(r) for r in records],
            "random_units": {str(s): list(mediators[(RANDOM_CONCEPT, s)].indices) for s in self.splits(net)},
        })

    def _rank(self):
        self._require("rank", "mediate", "records.json")
        ds, net = self.dataset(), self.network()
        s = self.rank_split(net)
        records = [M.MediationRecord(**r) for r in read_json(self.path("mediate", "records.json"))["records"]]
        ranking = M.rank_concepts([r for r in records if r.split == s])
        models = self.concept_models()
        cls = self.config.tcav_class
        xs = ds.test.x[ds.test.labels == cls]
        tcav = {}
        for k in range(ds.config.K):
            m = models[(k, s)]
            tcav[k] = M.tcav_score(net, s, m, xs, cls) if np.any(m.beta) and len(xs) else float("nan")
        names = {k: concept_name(k) for k, _ in ranking.entries}
        M.write_ranking_csv(self.path("rank", "ranking.csv"), ranking, tcav, names)
        tcav_rank = M.rank_by_score({k: v for k, v in tcav.items() if np.isfinite(v)})
        write_json(self.path("rank", "ranking.json"), {
            "split": s,
            "ie_order": ranking.order,
            "ie_scores": [v for _, v in ranking.entries],
            "tcav_order": tcav_rank.order,
            "tcav_scores": {str(k): v for k, v in tcav.items()},
        })

    def _surrogate(self):
        self._require("surrogate", "rank", "ranking.json")
        ds, net = self.dataset(), self.network()
        info = read_json(self.path("rank", "ranking.json"))
        s = info["split"]
        models = self.concept_models()
        concept_models = [models[(k, s)] for k in range(ds.config.K)]
        fm_train = G.build_features(concept_models, ds.train.x, net, s, ds.train.labels)
        fm_test = G.build_features(concept_models, ds.test.x, net, s, ds.test.labels)
        tree = G.fit_tree(fm_train, self.config.max_depth, self.config.min_leaf, net.n_classes)
        fid = G.fidelity(tree, fm_test)
        names = {k: concept_name(k) for k in range(ds.config.K)}
        ranking = M.ConceptRanking([(k, v) for k, v in zip(info["ie_order"], info["ie_scores"]) if k != RANDOM_CONCEPT])
        points = G.topk_sweep(ranking, self.config.fractions, fm_train, fm_test, self.config.max_depth, self.config.min_leaf)
        write_json(self.path("surrogate", "tree.json"), tree.to_dict())
        (self.work / "surrogate").mkdir(parents=True, exist_ok=True)
        atomic_write_bytes(self.path("surrogate", "tree.txt"),
                           tree.render(names, {0: "absent", 1: "present"}).encode())
        G.write_sweep_csv(self.path("surrogate", "sweep.csv"), points)
        write_json(self.path("surrogate", "fidelity.json"), {
            "agreement": fid["agreement"],
            "recall": {str(c): v for c, v in fid["recall"].items()},
            "recall_truth": {str(c): v for c, v in fid.get("recall_truth", {}).items()},
            "depth": tree.depth(),
        })

    def _report(self):
        sources = {
            "probe_metrics.csv": ("fit-concepts", "probe_metrics.csv"),
            "counterfactuals.csv": ("counterfactuals", "counterfactuals.csv"),
            "heatmap.csv": ("mediate", "heatmap.csv"),
            "ranking.csv": ("rank", "ranking.csv"),
            "sweep.csv": ("surrogate", "sweep.csv"),
            "tree.json": ("surrogate", "tree.json"),
            "tree.txt": ("surrogate", "tree.txt"),
        }
        for name, (stage, fname) in sources.items():
            self._require("report", stage, fname)
        report = self.out / "report"
        report.mkdir(parents=True, exist_ok=True)
        for name, (stage, fname) in sources.items():
            atomic_write_bytes(report / name, self.path(stage, fname).read_bytes())
        work_manifest = read_json(self._manifest_path())
        summary = {
            "train": read_json(self.path("train", "metrics.json")),
            "counterfactuals": {k: v for k, v in read_json(self.path("counterfactuals", "counterfactuals.json")).items()
                                if k not in ("success", "target")},
            "ranking": {k: v for k, v in read_json(self.path("rank", "ranking.json")).items()},
            "surrogate": read_json(self.path("surrogate", "fidelity.json")),
        }
        artifacts = {f"report/{name}": sha256_file(report / name) for name in sources}
        artifacts |= {k: v for k, v in work_manifest.get("artifacts", {}).items()}
        manifest = {
            "tool_version": __version__,
            "config": self.config.to_dict(),
            "artifacts": dict(sorted(artifacts.items())),
            "columns": {f: [{"name": c, "description": d} for c, d in cols.items()] for f, cols in CSV_COLUMNS.items()},
            "summary": summary,
            "timings": work_manifest.get("timings", {}),
        }
        write_json(report / "manifest.json", manifest)


def run_all(config: PipelineConfig) -> dict:
    return Pipeline(config).run_all()


def strip_timings(manifest: dict) -> dict:
    return {k: v for k, v in manifest.items() if k != "timings"}


def clean(out_dir) -> None:
    shutil.rmtree(out_dir, ignore_errors=True)

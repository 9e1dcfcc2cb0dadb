"""Experiment plans and the comparison tables they produce.

A plan is a JSON file::

    {
      "name": "benchmark",
      "seed": 0,
      "atlas": "benchmark",                      # or {"spec": {...}} / {"path": "atlas_dir"}
      "corpus": {"spec": {"docs_per_organ_single": 250, ...}},   # or {"path": "docs.jsonl"}
      "split": [0.70, 0.15, 0.15],
      "train": {"learning_rate": 0.001, "epochs": 15},
      "methods": [{"name": "SOD", "kind": "sod"}, {"name": "Center", "kind": "center"}, ...],
      "experiments": ["general", "merged", "heldout", "selfsupervised", "retrieval", "ablation"],
      "merged_pair": ["lung", "stomach"],
      "retrieval_ks": [1, 5, 10],
      "ablation": {"gamma_p": [0.1, 0.5, 1.0], "gamma_o": [0.1, 0.5, 1.0], "n_points": [100, 1000]}
    }

The plan seed is the only source of randomness: the atlas, corpus, split,
model initialization and baselines each draw from a derived sub-seed, so
the same plan and seed always give the same tables.
"""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .atlas import Atlas, SyntheticAtlasSpec, atlas_center, benchmark_atlas_spec, generate_synthetic_atlas, load_atlas, merge_organs, random_point_in_random_organ
from .corpus import CorpusSpec, Document, find_term_occurrences, generate_corpus, load_corpus, most_frequent_organ, split_corpus
from .metrics import aggregate, grounding_arrays, igr_hit, leave_one_out_recall, nvd_o
from .reportio import Table, TableRow, config_digest, table_markdown, write_table
from .stats import wilcoxon_signed_rank
from .training import TrainConfig, featurize_docs, predict_embeddings, predict_points, train

log = logging.getLogger(__name__)

EXPERIMENTS = ("general", "merged", "heldout", "selfsupervised", "retrieval", "ablation")
BASELINE_KINDS = ("random", "center", "frequency")
TRAINED_KINDS = ("sod", "mse", "classifier")
DEFAULT_GRID = {"gamma_p": [0.1, 0.5, 1.0], "gamma_o": [0.1, 0.5, 1.0], "n_points": [100, 1000]}

# sub-seed tags
_ATLAS, _CORPUS, _SPLIT, _TRAIN, _BASELINE, _EMBED = range(6)


class ExperimentError(ValueError):
    pass


def derive_seed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence([seed, tag]).generate_state(1)[0])


@dataclass(frozen=True)
class MethodSpec:
    name: str
    kind: str
    train: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in BASELINE_KINDS + TRAINED_KINDS:
            raise ExperimentError(f"method {self.name!r}: unknown kind {self.kind!r}")


def default_methods() -> list[MethodSpec]:
    return [
        MethodSpec("Random", "random"),
        MethodSpec("Center", "center"),
        MethodSpec("Frequency", "frequency"),
        MethodSpec("MSE", "mse"),
        MethodSpec("Classifier", "classifier"),
        MethodSpec("SOD", "sod"),
    ]


@dataclass
class ExperimentPlan:
    name: str
    atlas: SyntheticAtlasSpec | Path = field(default_factory=benchmark_atlas_spec)
    corpus: CorpusSpec | Path = field(default_factory=CorpusSpec)
    methods: list[MethodSpec] = field(default_factory=default_methods)
    experiments: list[str] = field(default_factory=lambda: list(EXPERIMENTS))
    train: dict = field(default_factory=dict)
    seed: int = 0
    split: tuple[float, float, float] = (0.70, 0.15, 0.15)
    merged_pair: tuple[str, str] = ("lung", "stomach")
    retrieval_ks: tuple[int, ...] = (1, 5, 10)
    ablation: dict = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_GRID.items()})

    def __post_init__(self) -> None:
        names = [m.name for m in self.methods]
        if len(set(names)) != len(names):
            raise ExperimentError(f"method names must be unique within a plan, got {names}")
        bad = [e for e in self.experiments if e not in EXPERIMENTS]
        if bad:
            raise ExperimentError(f"unknown experiments {bad}; choose from {list(EXPERIMENTS)}")
        for k in DEFAULT_GRID:
            if not self.ablation.get(k):
                raise ExperimentError(f"ablation grid axis {k!r} is empty")
        self.base_config()  # validate overrides early

    def base_config(self) -> TrainConfig:
        return TrainConfig().with_overrides(self.train).with_overrides({"seed": derive_seed(self.seed, _TRAIN)})

    def method_config(self, kind: str, mode: str = "supervised", **extra) -> TrainConfig:
        """Config of the first plan method of ``kind`` (plain defaults when absent)."""
        overrides = next((m.train for m in self.methods if m.kind == kind), {})
        objective = kind if kind in TRAINED_KINDS else "sod"
        return self.base_config().with_overrides({**overrides, "objective": objective, "mode": mode, **extra})

    @classmethod
    def from_dict(cls, d: dict, base_dir: str | Path = ".") -> "ExperimentPlan":
        d = dict(d)
        base_dir = Path(base_dir)
        known = {"name", "atlas", "corpus", "methods", "experiments", "train", "seed", "split", "merged_pair", "retrieval_ks", "ablation"}
        unknown = set(d) - known
        if unknown:
            raise ExperimentError(f"unknown plan keys {sorted(unknown)}")
        if "name" not in d:
            raise ExperimentError("plan needs a name")
        kw: dict = {"name": str(d["name"])}
        atlas = d.get("atlas", "benchmark")
        if atlas == "benchmark":
            kw["atlas"] = benchmark_atlas_spec()
        elif isinstance(atlas, dict) and "spec" in atlas:
            kw["atlas"] = SyntheticAtlasSpec.from_dict(atlas["spec"])
        elif isinstance(atlas, dict) and "path" in atlas:
            kw["atlas"] = base_dir / atlas["path"]
        else:
            raise ExperimentError("atlas must be 'benchmark', {'spec': ...} or {'path': ...}")
        corpus = d.get("corpus", {"spec": {}})
        if isinstance(corpus, dict) and "spec" in corpus:
            kw["corpus"] = CorpusSpec.from_dict(corpus["spec"])
        elif isinstance(corpus, dict) and "path" in corpus:
            kw["corpus"] = base_dir / corpus["path"]
        else:
            raise ExperimentError("corpus must be {'spec': ...} or {'path': ...}")
        if "methods" in d:
            kw["methods"] = [MethodSpec(str(m["name"]), str(m["kind"]), dict(m.get("train", {}))) for m in d["methods"]]
        for key in ("experiments", "train", "seed", "ablation"):
            if key in d:
                kw[key] = d[key]
        for key in ("split", "merged_pair", "retrieval_ks"):
            if key in d:
                kw[key] = tuple(d[key])
        return cls(**kw)

    def to_dict(self) -> dict:
        def src(x, spec_to_dict):
            return {"path": str(x)} if isinstance(x, Path) else {"spec": spec_to_dict(x)}

        return {
            "name": self.name,
            "seed": self.seed,
            "atlas": src(self.atlas, lambda s: s.to_dict()),
            "corpus": src(self.corpus, lambda s: s.to_dict()),
            "split": list(self.split),
            "train": self.train,
            "methods": [{"name": m.name, "kind": m.kind, "train": m.train} for m in self.methods],
            "experiments": list(self.experiments),
            "merged_pair": list(self.merged_pair),
            "retrieval_ks": list(self.retrieval_ks),
            "ablation": self.ablation,
        }


def load_plan(path: str | Path) -> ExperimentPlan:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ExperimentError(f"{path}: invalid JSON ({exc})") from None
    return ExperimentPlan.from_dict(d, path.parent)


# --- workspace --------------------------------------------------------------


def build_atlas(plan: ExperimentPlan) -> Atlas:
    if isinstance(plan.atlas, Path):
        return load_atlas(plan.atlas)
    return generate_synthetic_atlas(plan.atlas, derive_seed(plan.seed, _ATLAS))


class Workspace:
    """Atlas, corpus splits and a cache of trained models for one plan."""

    def __init__(self, plan: ExperimentPlan):
        self.plan = plan
        self.atlas = build_atlas(plan)
        if isinstance(plan.corpus, Path):
            docs = load_corpus(plan.corpus, self.atlas)
        else:
            docs = generate_corpus(self.atlas, replace(plan.corpus, seed=derive_seed(plan.seed, _CORPUS)))
        self.docs = docs
        self.train, self.val, self.test = split_corpus(docs, plan.split, derive_seed(plan.seed, _SPLIT))
        self._models: dict = {}

    def rng(self, *tags: int) -> np.random.Generator:
        return np.random.default_rng([self.plan.seed, _BASELINE, *tags])

    def model(self, data_tag: str, cfg: TrainConfig, train_docs, val_docs, atlas: Atlas | None = None):
        """Train once per (data, config); later requests reuse the result."""
        key = (data_tag, cfg.config_hash())
        if key not in self._models:
            log.info("training %s on %s (%s)", cfg.objective, data_tag, key[1])
            self._models[key] = train(None, train_docs, val_docs, atlas or self.atlas, cfg)
        return self._models[key][0]

    def n_trained(self) -> int:
        return len(self._models)


def _require(docs, what: str):
    if not docs:
        raise ExperimentError(f"{what} is empty")
    return docs


def _grounding_row(label: str, points, target_sets, atlas: Atlas, meta: dict) -> TableRow:
    hits, nvd = grounding_arrays(points, target_sets, atlas)
    row = TableRow(label, meta=meta)
    row.add(aggregate("IOR", hits.astype(np.float64)))
    row.add(aggregate("NVD", nvd))
    row.add(nvd_o(nvd))
    return row


def _meta(cfg: TrainConfig | dict) -> dict:
    h = cfg.config_hash() if isinstance(cfg, TrainConfig) else config_digest(cfg)
    return {"config_hash": h}


def _baseline_points(ws: Workspace, kind: str, n: int, tag: int) -> np.ndarray:
    if kind == "center":
        return np.tile(atlas_center(ws.atlas), (n, 1))
    if kind == "frequency":
        return np.tile(ws.atlas.organ(most_frequent_organ(ws.train)).mean_point(), (n, 1))
    rng = ws.rng(tag)
    return np.stack([random_point_in_random_organ(ws.atlas, rng) for _ in range(n)]) if n else np.zeros((0, 3))


def _baseline_meta(ws: Workspace, kind: str, tag: int) -> dict:
    return _meta({"baseline": kind, "seed": ws.plan.seed, "tag": tag})


# --- experiments ------------------------------------------------------------


def run_general_eval(ws: Workspace) -> Table:
    """Every plan method on the test split: IOR, NVD and NVD-O."""
    plan = ws.plan
    test = _require(ws.test, "test split")
    _require(ws.val, "validation split")
    targets = [d.annotations for d in test]
    table = Table("general")
    if not any(m.kind == "sod" for m in plan.methods):
        raise ExperimentError("general evaluation needs a method of kind 'sod'")
    for i, m in enumerate(plan.methods):
        if m.kind in BASELINE_KINDS:
            pts = _baseline_points(ws, m.kind, len(test), 100 + i)
            table.rows.append(_grounding_row(m.name, pts, targets, ws.atlas, _baseline_meta(ws, m.kind, 100 + i)))
            continue
        cfg = plan.base_config().with_overrides({**m.train, "objective": m.kind, "mode": "supervised"})
        model = ws.model("full", cfg, ws.train, ws.val)
        pts = predict_points(model, m.kind, featurize_docs(model, test), ws.atlas)
        table.rows.append(_grounding_row(m.name, pts, targets, ws.atlas, _meta(cfg)))
    return table


def _per_organ_row(label, hits_by, nvd_by, names, meta, metric="IOR") -> TableRow:
    """Per-organ entries plus micro (pooled) and macro (mean of organ means) averages."""
    row = TableRow(label, meta=meta)
    for oid in hits_by:
        row.add(aggregate(f"{metric}[{names[oid]}]", hits_by[oid]))
        row.add(aggregate(f"NVD[{names[oid]}]", nvd_by[oid]))
    if metric == "IOR":
        row.add(aggregate("IOR:micro", np.concatenate(list(hits_by.values()))))
        row.add(aggregate("NVD:micro", np.concatenate(list(nvd_by.values()))))
    row.add(aggregate(f"{metric}:macro", [float(np.mean(v)) for v in hits_by.values()]))
    row.add(aggregate("NVD:macro", [float(np.mean(v)) for v in nvd_by.values()]))
    return row


def run_merged_experiment(ws: Workspace, organ_pair: Sequence[str] | None = None) -> Table:
    """Within-organ reasoning after merging two organs into one super-organ.

    Training keeps documents annotated with either organ of the pair; testing
    uses documents annotated with exactly one of them.
    """
    atlas = ws.atlas
    pair = tuple(organ_pair or ws.plan.merged_pair)
    try:
        a, b = (atlas.registry.by_name(n).id for n in pair)
    except KeyError as exc:
        raise ExperimentError(f"merged pair {pair}: {exc}") from None
    if a == b:
        raise ExperimentError("merged pair must name two different organs")
    merged = merge_organs(atlas, [a, b], f"{pair[0]} {pair[1]}")

    def keep(docs):
        return [d for d in docs if d.annotations & {a, b}]

    def remap(docs):
        return [d.with_annotations({a if o == b else o for o in d.annotations}) for d in docs]

    tr, va = keep(ws.train), keep(ws.val)
    test = [d for d in ws.test if d.annotations in ({a}, {b})]
    if not test:
        raise ExperimentError(f"no test documents mention exactly one of {pair}")
    _require(tr, "filtered training set")
    _require(va, "filtered validation set")
    names = {a: atlas.organ(a).canonical_name, b: atlas.organ(b).canonical_name}
    tag = f"merged:{a}+{b}"

    runs = [
        ("SOD;Unmerged", ws.plan.method_config("sod"), tr, va, atlas),
        ("Classifier", ws.plan.method_config("classifier"), remap(tr), remap(va), merged),
        ("SOD;Merged", ws.plan.method_config("sod"), remap(tr), remap(va), merged),
    ]
    table = Table("merged")
    for label, cfg, t_docs, v_docs, train_atlas in runs:
        model = ws.model(f"{tag}:{label}", cfg, t_docs, v_docs, train_atlas)
        pts = predict_points(model, cfg.objective, featurize_docs(model, test), train_atlas)
        hits, nvd = grounding_arrays(pts, [d.annotations for d in test], atlas)
        which = np.array([next(iter(d.annotations)) for d in test])
        hits_by = {o: hits[which == o].astype(np.float64) for o in (a, b) if np.any(which == o)}
        nvd_by = {o: nvd[which == o] for o in hits_by}
        table.rows.append(_per_organ_row(label, hits_by, nvd_by, names, _meta(cfg)))
    return table


def run_heldout_experiment(ws: Workspace) -> Table:
    """Generalization to an organ whose annotations were removed from training.

    For each organ sharing its functional group with another organ, documents
    solely about it are dropped and it is stripped from the remaining
    annotations. Test documents are those annotated with that organ alone.
    """
    atlas = ws.atlas
    heldout = []
    for oid in atlas.registry.ids:
        if len(atlas.registry.group_of(oid)) < 2:
            log.warning("skipping organ %d: its functional group has a single member", oid)
            continue
        if not any(d.annotations == {oid} for d in ws.test):
            log.warning("skipping organ %d: no test documents refer only to it", oid)
            continue
        heldout.append(oid)
    if not heldout:
        raise ExperimentError("no organ qualifies for the held-out experiment")

    def strip(docs, oid):
        return [d.with_annotations(d.annotations - {oid}) for d in docs if d.annotations - {oid}]

    labels = ("SOD", "Classifier", "Random", "Center")
    igr = {l: {} for l in labels}
    nvd = {l: {} for l in labels}
    metas = {}
    names = {o: atlas.organ(o).canonical_name for o in heldout}
    for oid in heldout:
        test = [d for d in ws.test if d.annotations == {oid}]
        for label in labels:
            if label in ("SOD", "Classifier"):
                cfg = ws.plan.method_config(label.lower())
                model = ws.model(f"heldout:{oid}", cfg, strip(ws.train, oid), strip(ws.val, oid))
                pts = predict_points(model, cfg.objective, featurize_docs(model, test), atlas)
                metas[label] = _meta(cfg)
            else:
                kind = label.lower()
                pts = _baseline_points(ws, kind, len(test), 200 + oid)
                metas[label] = _baseline_meta(ws, kind, 200)
            igr[label][oid] = np.asarray(igr_hit(pts, oid, atlas), dtype=np.float64)
            nvd[label][oid] = grounding_arrays(pts, [{oid}] * len(pts), atlas)[1]

    scores = {l: [float(igr[l][o].mean()) for o in heldout] for l in labels}
    w = wilcoxon_signed_rank(scores["SOD"], scores["Classifier"], alternative="greater")
    metas["SOD"] = {**metas["SOD"], "wilcoxon_vs_classifier_W": format(w.statistic, ".17g"), "wilcoxon_vs_classifier_p": format(w.p_value, ".17g"), "wilcoxon_method": w.method}
    table = Table("heldout")
    for label in labels:
        table.rows.append(_per_organ_row(label, igr[label], nvd[label], names, metas[label], metric="IGR"))
    return table


def random_occurrence_points(docs: Sequence[Document], atlas: Atlas, rng: np.random.Generator) -> np.ndarray:
    """A random voxel of a random organ named in each text; the atlas center when none is named."""
    out = []
    for d in docs:
        occurring = sorted({o for o, _ in find_term_occurrences(d.tokens, atlas.registry)})
        if not occurring:
            out.append(atlas_center(atlas))
            continue
        organ = atlas.organ(occurring[int(rng.integers(len(occurring)))])
        out.append(organ.voxels[int(rng.integers(organ.n_voxels))].astype(np.float64))
    return np.stack(out) if out else np.zeros((0, 3))


def run_selfsupervised(ws: Workspace) -> Table:
    """Targets from organ terms found in the text instead of annotations."""
    test = _require(ws.test, "test split")
    targets = [d.annotations for d in test]
    table = Table("selfsupervised")
    for label, kind, mode in (
        ("SOD", "sod", "self_supervised"),
        ("SOD+Masking", "sod", "self_supervised_masked"),
        ("Classifier", "classifier", "self_supervised"),
        ("Classifier+Masking", "classifier", "self_supervised_masked"),
    ):
        cfg = ws.plan.method_config(kind, mode=mode)
        model = ws.model("full", cfg, ws.train, ws.val)
        pts = predict_points(model, kind, featurize_docs(model, test), ws.atlas)
        table.rows.append(_grounding_row(label, pts, targets, ws.atlas, _meta(cfg)))
    pts = random_occurrence_points(test, ws.atlas, ws.rng(300))
    table.rows.append(_grounding_row("Random-occurrence", pts, targets, ws.atlas, _baseline_meta(ws, "random-occurrence", 300)))
    return table


def run_retrieval(ws: Workspace) -> Table:
    """Leave-one-out Recall@K over the test split: each document queries all others."""
    test = ws.test
    ks = sorted(ws.plan.retrieval_ks)
    if len(test) < max(ks) + 1:
        raise ExperimentError(f"test split has {len(test)} documents; Recall@{max(ks)} needs {max(ks) + 1}")
    ann = [d.annotations for d in test]
    plan = ws.plan
    table = Table("retrieval")

    def add(label, vectors, meta):
        row = TableRow(label, meta=meta)
        for k, e in leave_one_out_recall(vectors, ann, ks).items():
            row.add(e)
        table.rows.append(row)

    for label, cfg in (
        ("SOD 3D", plan.method_config("sod")),
        ("SOD+M 3D", plan.method_config("sod", mode="self_supervised_masked")),
    ):
        model = ws.model("full", cfg, ws.train, ws.val)
        add(label, predict_points(model, "sod", featurize_docs(model, test), ws.atlas), _meta(cfg))
    base = plan.base_config()
    for label, dim in (("Siamese-3D", 3), ("Siamese-D", base.hidden)):
        cfg = base.with_overrides({"objective": "triplet", "mode": "supervised", "embed_dim": dim})
        model = ws.model("full", cfg, ws.train, ws.val)
        add(label, predict_embeddings(model, featurize_docs(model, test)), _meta(cfg))
    rng = np.random.default_rng([plan.seed, _EMBED])
    add("Random-embedding", rng.standard_normal((len(test), 3)), _baseline_meta(ws, "random-embedding", _EMBED))
    return table


def ablation_cells(grid: dict) -> list[dict]:
    return [
        {"gamma_p": float(gp), "gamma_o": float(go), "n_points": int(n)}
        for gp, go, n in itertools.product(grid["gamma_p"], grid["gamma_o"], grid["n_points"])
    ]


def run_ablation(ws: Workspace, grid: dict | None = None) -> Table:
    """One SOD model per (gamma_p, gamma_o, N) cell, evaluated on the test split."""
    grid = grid or ws.plan.ablation
    test = _require(ws.test, "test split")
    targets = [d.annotations for d in test]
    table = Table("ablation")
    for cell in ablation_cells(grid):
        cfg = ws.plan.method_config("sod", sod=cell)
        model = ws.model("full", cfg, ws.train, ws.val)
        pts = predict_points(model, "sod", featurize_docs(model, test), ws.atlas)
        label = f"gamma_p={cell['gamma_p']:g} gamma_o={cell['gamma_o']:g} N={cell['n_points']}"
        row = _grounding_row(label, pts, targets, ws.atlas, _meta(cfg))
        row.meta.update({k: str(v) for k, v in cell.items()})
        table.rows.append(row)
    return table


RUNNERS = {
    "general": run_general_eval,
    "merged": run_merged_experiment,
    "heldout": run_heldout_experiment,
    "selfsupervised": run_selfsupervised,
    "retrieval": run_retrieval,
    "ablation": run_ablation,
}


def run_plan(plan: ExperimentPlan, out_dir: str | Path | None = None, workspace: Workspace | None = None) -> dict[str, Table]:
    """Run the plan's experiments in declaration order; write tables when ``out_dir`` is given.

    Layout: ``<out>/<experiment>/table.tsv`` and ``summary.md`` per experiment,
    plus a combined ``<out>/summary.md``.
    """
    ws = workspace or Workspace(plan)
    tables = {}
    for name in plan.experiments:
        log.info("running experiment %s", name)
        tables[name] = RUNNERS[name](ws)
        if out_dir is not None:
            d = Path(out_dir) / name
            d.mkdir(parents=True, exist_ok=True)
            write_table(tables[name], d / "table.tsv")
            (d / "summary.md").write_text(table_markdown(tables[name]))
    return tables


def benchmark_plan(seed: int = 0) -> ExperimentPlan:
    """The shipped synthetic benchmark: 40^3 atlas, 4 organs, 2000 documents."""
    return ExperimentPlan(
        name="benchmark",
        corpus=CorpusSpec(docs_per_organ_single=250, docs_per_organ_multi=250),
        train={"learning_rate": 1e-3, "epochs": 15},
        seed=seed,
    )


import json
from pathlib import Path

import numpy as np
import pytest

from atlasground.corpus import Document, find_term_occurrences
from atlasground.experiments import (
    DEFAULT_GRID,
    ExperimentError,
    ExperimentPlan,
    MethodSpec,
    Workspace,
    ablation_cells,
    benchmark_plan,
    derive_seed,
    load_plan,
    random_occurrence_points,
    run_ablation,
    run_general_eval,
    run_plan,
)
from atlasground.reportio import table_differences

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


@pytest.fixture(scope="module")
def smoke_plan():
    return load_plan(CONFIGS / "smoke_plan.json")


@pytest.fixture(scope="module")
def smoke_tables(smoke_plan):
    return run_plan(smoke_plan)


def test_plan_json_round_trip(smoke_plan):
    again = ExperimentPlan.from_dict(json.loads(json.dumps(smoke_plan.to_dict())))
    assert again.to_dict() == smoke_plan.to_dict()
    assert again.base_config() == smoke_plan.base_config()


def test_plan_validation():
    with pytest.raises(ExperimentError):
        ExperimentPlan("p", methods=[MethodSpec("A", "sod"), MethodSpec("A", "mse")])
    with pytest.raises(ExperimentError):
        ExperimentPlan("p", experiments=["bogus"])
    with pytest.raises(ExperimentError):
        MethodSpec("A", "bogus")
    with pytest.raises(ExperimentError):
        ExperimentPlan("p", ablation={"gamma_p": [], "gamma_o": [1.0], "n_points": [10]})
    with pytest.raises(ExperimentError):
        ExperimentPlan.from_dict({"name": "p", "extra": 1})
    with pytest.raises(ExperimentError):
        ExperimentPlan.from_dict({"seed": 1})
    with pytest.raises(ExperimentError):
        ExperimentPlan.from_dict({"name": "p", "atlas": 3})


def test_derived_seeds_differ_per_tag():
    assert len({derive_seed(0, t) for t in range(6)}) == 6
    assert derive_seed(1, 0) != derive_seed(0, 0)
    assert derive_seed(7, 2) == derive_seed(7, 2)


def test_every_experiment_produces_rows(smoke_tables):
    assert list(smoke_tables) == ["general", "merged", "heldout", "selfsupervised", "retrieval", "ablation"]
    assert smoke_tables["general"].labels() == ["Random", "Center", "Frequency", "MSE", "Classifier", "SOD"]
    assert smoke_tables["merged"].labels() == ["SOD;Unmerged", "Classifier", "SOD;Merged"]
    assert smoke_tables["heldout"].labels() == ["SOD", "Classifier", "Random", "Center"]
    assert smoke_tables["retrieval"].labels() == ["SOD 3D", "SOD+M 3D", "Siamese-3D", "Siamese-D", "Random-embedding"]
    assert "wilcoxon_vs_classifier_p" in smoke_tables["heldout"].row("SOD").meta
    for table in smoke_tables.values():
        for row in table.rows:
            assert "config_hash" in row.meta


def test_replay_is_identical(smoke_plan, smoke_tables):
    again = run_plan(smoke_plan)
    for name, table in smoke_tables.items():
        assert table_differences(table, again[name], tol=0.0) == []


def test_seed_changes_results(smoke_plan, smoke_tables):
    plan = ExperimentPlan.from_dict({**smoke_plan.to_dict(), "seed": 6, "experiments": ["general"]})
    other = run_plan(plan)["general"]
    assert table_differences(smoke_tables["general"], other) != []


def test_single_cell_grid_reuses_general_sod_model(smoke_plan):
    cell = {"gamma_p": [0.1], "gamma_o": [1.0], "n_points": [100]}
    plan = ExperimentPlan.from_dict({**smoke_plan.to_dict(), "ablation": cell})
    ws = Workspace(plan)
    general = run_general_eval(ws)
    trained = ws.n_trained()
    ablation = run_ablation(ws)
    assert ws.n_trained() == trained
    row = ablation.rows[0]
    assert row.label == "gamma_p=0.1 gamma_o=1 N=100"
    assert row.entries == general.row("SOD").entries


def test_default_grid_cells():
    cells = ablation_cells(DEFAULT_GRID)
    assert len(cells) == 18 and len({tuple(c.values()) for c in cells}) == 18


def test_random_occurrence_points_follow_terms(bench_atlas):
    docs = [
        Document("a", ("the", "liver", "and", "cardiac", "wall")),
        Document("b", ("nothing", "named")),
        Document("c", ("lung",)),
    ]
    pts = random_occurrence_points(docs, bench_atlas, np.random.default_rng(0))
    for d, p in zip(docs, pts):
        named = {o for o, _ in find_term_occurrences(d.tokens, bench_atlas.registry)}
        label = int(bench_atlas.labels[tuple(p.astype(int))])
        if named:
            assert label in named and np.array_equal(p, np.round(p))
        else:
            assert np.allclose(p, (np.array(bench_atlas.dims) - 1) / 2)


def test_random_occurrence_matches_random_voxel_of_annotated_organ(bench_atlas):
    from atlasground.metrics import grounding_arrays

    docs = [Document(f"d{o}", ("about", bench_atlas.organ(o).canonical_name), frozenset({o})) for o in bench_atlas.registry.ids] * 5
    rng = np.random.default_rng(1)
    occ = random_occurrence_points(docs, bench_atlas, rng)
    within = np.stack([bench_atlas.organ(o).voxels[rng.integers(bench_atlas.organ(o).n_voxels)] for d in docs for o in d.annotations])
    targets = [d.annotations for d in docs]
    hits_occ, _ = grounding_arrays(occ, targets, bench_atlas)
    hits_within, _ = grounding_arrays(within, targets, bench_atlas)
    assert hits_occ.mean() == hits_within.mean() == 1.0


def test_baseline_rows_need_no_training(smoke_plan):
    plan = ExperimentPlan.from_dict({**smoke_plan.to_dict(), "methods": [{"name": "R", "kind": "random"}, {"name": "C", "kind": "center"}, {"name": "S", "kind": "sod"}]})
    ws = Workspace(plan)
    table = run_general_eval(ws)
    assert ws.n_trained() == 1 and table.labels() == ["R", "C", "S"]


def test_merged_pair_errors(smoke_plan):
    from atlasground.experiments import run_merged_experiment

    ws = Workspace(smoke_plan)
    with pytest.raises(ExperimentError):
        run_merged_experiment(ws, ("lung", "spleen"))
    with pytest.raises(ExperimentError):
        run_merged_experiment(ws, ("lung", "pulmonary"))


def test_general_needs_sod(smoke_plan):
    plan = ExperimentPlan.from_dict({**smoke_plan.to_dict(), "methods": [{"name": "C", "kind": "center"}]})
    with pytest.raises(ExperimentError):
        run_general_eval(Workspace(plan))


def test_shipped_configs_match_builtin_plans():
    shipped = json.loads((CONFIGS / "benchmark_plan.json").read_text())
    assert shipped == json.loads(json.dumps(benchmark_plan().to_dict()))
    assert load_plan(CONFIGS / "benchmark_plan.json").to_dict() == benchmark_plan().to_dict()

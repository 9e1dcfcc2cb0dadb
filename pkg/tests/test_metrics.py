import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from atlasground.atlas import Atlas
from atlasground.metrics import (
    aggregate,
    grounding_arrays,
    grounding_report,
    igr_hit,
    ior_hit,
    leave_one_out_recall,
    nvd_cm,
    nvd_o,
    recall_at_k,
)

from oracles import brute_nearest, brute_recall


def test_ior_threshold_is_strict(ball_atlas):
    # the extreme ball voxel along +x is (25, 20, 20)
    assert ior_hit((34.9, 20.0, 20.0), [1], ball_atlas)
    assert not ior_hit((35.0, 20.0, 20.0), [1], ball_atlas)
    assert ior_hit((20.0, 20.0, 20.0), [1], ball_atlas)


@pytest.fixture
def dot_atlas():
    """Single voxels at (0, 0, 0) and (0, 0, 30), 1 mm."""
    labels = np.zeros((1, 1, 40), dtype=np.uint16)
    labels[0, 0, 0] = 1
    labels[0, 0, 30] = 2
    return Atlas.from_labels(labels, 1.0, {1: ("dot", (), "g"), 2: ("far dot", (), "g")})


def test_single_voxel_examples(dot_atlas):
    assert nvd_cm((0.0, 0.0, 20.5), [1], dot_atlas) == pytest.approx(2.05)
    assert ior_hit((0.0, 0.0, 0.0), [1], dot_atlas)
    assert ior_hit((0.0, 0.0, 9.9), [1], dot_atlas) and not ior_hit((0.0, 0.0, 10.0), [1], dot_atlas)
    assert ior_hit((0.0, 0.0, 25.0), [1, 2], dot_atlas)  # close to the second target only
    assert nvd_cm((0.0, 0.0, 14.0), [1, 2], dot_atlas) == pytest.approx(1.4)
    assert nvd_cm((0.0, 0.0, 17.0), [1, 2], dot_atlas) == pytest.approx(1.3)


def test_nvd_is_min_over_target_organs(bench_atlas):
    rng = np.random.default_rng(9)
    ids = bench_atlas.registry.ids
    for p in rng.uniform(0, 39, size=(40, 3)):
        s = rng.choice(ids, size=2, replace=False).tolist()
        if int(bench_atlas.labels[tuple(np.clip(np.floor(p + 0.5), 0, 39).astype(int))]) in s:
            continue
        expected = min(brute_nearest(bench_atlas.organ(o).voxels, p) for o in s) * bench_atlas.resolution_mm / 10
        assert nvd_cm(p, s, bench_atlas) == pytest.approx(expected)


def test_nvd_in_centimeters(two_box_atlas):
    # nearest alpha voxel is (2, 2, 2); 10.25 voxels at 2 mm
    assert nvd_cm((2.0, 2.0, 12.25), [1], two_box_atlas) == pytest.approx(2.05)
    assert nvd_cm((1.0, 1.0, 1.0), [1], two_box_atlas) == 0.0
    assert nvd_cm((1.0, 1.0, 1.0), [1, 2], two_box_atlas) == 0.0
    assert nvd_cm((5.0, 5.0, 5.0), [1, 2], two_box_atlas) == pytest.approx(2 * np.sqrt(3) / 10)


def test_nvd_o_ignores_inside_predictions():
    e = nvd_o([0.0, 0.0, 1.0, 3.0])
    assert (e.mean, e.count) == (2.0, 2)
    assert not nvd_o([0.0, 0.0]).defined


def test_batch_matches_single_point_metrics(ball_atlas, bench_atlas):
    rng = np.random.default_rng(0)
    pts = rng.uniform(-3, 42, size=(300, 3))
    sets = [rng.choice(bench_atlas.registry.ids, size=rng.integers(1, 3), replace=False).tolist() for _ in pts]
    hits, nvd = grounding_arrays(pts, sets, bench_atlas)
    for p, s, h, d in zip(pts, sets, hits, nvd):
        assert h == ior_hit(p, s, bench_atlas)
        assert d == pytest.approx(nvd_cm(p, s, bench_atlas))
    outside = rng.uniform(0, 39, size=(200, 3))
    _, nvd = grounding_arrays(outside, [[1]] * 200, ball_atlas)
    voxels = ball_atlas.organ(1).voxels
    for p, d in zip(outside, nvd):
        if d > 0:
            assert d == pytest.approx(brute_nearest(voxels, p) / 10)


def test_metric_input_errors(ball_atlas):
    with pytest.raises(ValueError):
        ior_hit((0, 0, 0), [], ball_atlas)
    with pytest.raises(KeyError):
        nvd_cm((0, 0, 0), [7], ball_atlas)
    with pytest.raises(ValueError):
        grounding_arrays(np.zeros((2, 3)), [[1]], ball_atlas)


def test_report_entries(ball_atlas):
    rep = grounding_report([(20, 20, 20), (39, 39, 39)], [[1], [1]], ball_atlas)
    assert rep["IOR"].mean == 0.5 and rep["IOR"].count == 2
    assert rep["NVD-O"].count == 1


def test_aggregate():
    e = aggregate("x", [1.0, 0.0])
    assert (e.mean, e.standard_error, e.count) == (0.5, 0.5, 2)
    assert aggregate("x", [4.0]).standard_error == 0.0
    empty = aggregate("x", [])
    assert empty.mean is None and not empty.defined


# --- IGR -----------------------------------------------------------------------


def test_igr_group_hull(bench_atlas):
    reg = bench_atlas.registry
    heart = reg.by_name("heart").id
    group = np.concatenate([bench_atlas.organ(o).voxels for o in reg.group_of(heart)])
    assert igr_hit(group.mean(axis=0), heart, bench_atlas)
    assert igr_hit(bench_atlas.organ(heart).mean_point(), heart, bench_atlas)
    assert not igr_hit((-50.0, -50.0, -50.0), heart, bench_atlas)
    batch = igr_hit(np.array([group.mean(axis=0), (-50.0, -50.0, -50.0)]), heart, bench_atlas)
    assert batch.tolist() == [True, False]


def test_igr_two_cube_centroid():
    labels = np.zeros((20, 20, 20), dtype=np.uint16)
    labels[2:6, 2:6, 2:6] = 1
    labels[12:16, 12:16, 12:16] = 2
    atlas = Atlas.from_labels(labels, 1.0, {1: ("a", (), "pair"), 2: ("b", (), "pair")})
    assert igr_hit((9.0, 9.0, 9.0), 1, atlas)
    assert not igr_hit((30.0, 30.0, -10.0), 2, atlas)


def test_igr_coplanar_group_falls_back_to_distance():
    labels = np.zeros((12, 12, 20), dtype=np.uint16)
    labels[2:5, 2:5, 0] = 1
    labels[7:10, 7:10, 0] = 2
    atlas = Atlas.from_labels(labels, 1.0, {1: ("flat", (), "plane"), 2: ("sheet", (), "plane")})
    assert igr_hit((3.0, 3.0, 9.0), 1, atlas)
    assert not igr_hit((3.0, 3.0, 10.0), 1, atlas)


# --- retrieval -----------------------------------------------------------------


def test_recall_small_database():
    db, da = np.array([[1.0, 0, 0], [2.0, 0, 0]]), [{1}, {2}]
    assert recall_at_k([[0.0, 0, 0]], db, [{1}], da, 1) == 1.0
    assert recall_at_k([[0.0, 0, 0]], db, [{3}], da, 2) == 0.0


def test_recall_fifty_docs_matches_brute_force():
    rng = np.random.default_rng(10)
    emb = rng.normal(size=(50, 3))
    ann = [frozenset(rng.choice(4, size=rng.integers(1, 3), replace=False).tolist()) for _ in range(50)]
    for k in (1, 5, 10):
        assert recall_at_k(emb[:20], emb[20:], ann[:20], ann[20:], k) == brute_recall(emb[:20], emb[20:], ann[:20], ann[20:], k)


def test_recall_examples():
    db = np.array([[1.0, 0, 0], [-1.0, 0, 0], [5.0, 0, 0]])
    da = [{1}, {2}, {2}]
    # equidistant items: the lower database index ranks first
    assert recall_at_k([[0.0, 0, 0]], db, [{2}], da, 1) == 0.0
    assert recall_at_k([[0.0, 0, 0]], db, [{2}], da, 2) == 1.0
    assert recall_at_k([[0.0, 0, 0]], db, [{1, 2}], da, 3) == 0.0  # identical set required
    with pytest.raises(ValueError):
        recall_at_k([[0.0, 0, 0]], db, [{1}], da, 4)
    with pytest.raises(ValueError):
        recall_at_k([[0.0, 0, 0]], db, [{1}], da, 0)


small_sets = st.sampled_from([frozenset({1}), frozenset({2}), frozenset({1, 2})])


@given(
    arrays(np.float64, (6, 2), elements=st.integers(-3, 3).map(float)),
    arrays(np.float64, (9, 2), elements=st.integers(-3, 3).map(float)),
    st.lists(small_sets, min_size=6, max_size=6),
    st.lists(small_sets, min_size=9, max_size=9),
    st.integers(1, 9),
)
def test_recall_matches_brute_force(q, db, qa, da, k):
    assert recall_at_k(q, db, qa, da, k) == pytest.approx(brute_recall(q, db, qa, da, k))


@given(st.lists(small_sets, min_size=3, max_size=8), st.integers(0, 100))
def test_recall_at_full_database(qa, seed):
    rng = np.random.default_rng(seed)
    db, da = rng.normal(size=(len(qa), 3)), list(reversed(qa))
    expected = np.mean([any(a == b for b in da) for a in qa])
    assert recall_at_k(rng.normal(size=(len(qa), 3)), db, qa, da, len(db)) == pytest.approx(expected)


@given(arrays(np.float64, (7, 3), elements=st.integers(-2, 2).map(float)), st.lists(small_sets, min_size=7, max_size=7))
def test_leave_one_out_matches_per_item_queries(pts, ann):
    got = leave_one_out_recall(pts, ann, [1, 3])
    for k in (1, 3):
        per_item = [
            brute_recall(pts[i : i + 1], np.delete(pts, i, axis=0), [ann[i]], ann[:i] + ann[i + 1 :], k) for i in range(7)
        ]
        assert got[k].mean == pytest.approx(np.mean(per_item))
        assert got[k].count == 7


def test_leave_one_out_needs_enough_items():
    with pytest.raises(ValueError):
        leave_one_out_recall(np.zeros((3, 2)), [{1}] * 3, [3])

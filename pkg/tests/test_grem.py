import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cvgeo.data import Source, View, load_image, read_manifest, scan_dataset
from cvgeo.grem import (CandidateFeature, MeanPoolExtractor, audit, build_extractor,
                        extract_pool_features, run_grem, scan_pool, select_top_half,
                        write_assignments)
from oracles import mean_pool_loop, top_half_loop


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def pool_with_scores(scores):
    """Candidates in 2-D whose cosine with the anchor (1, 0) is exactly ``scores``."""
    anchor = CandidateFeature("anchor", np.array([1.0, 0.0]), "original_street", "L")
    pool = [CandidateFeature(f"c{i}", np.array([s, np.sqrt(1 - s * s)]), "auxiliary", "L")
            for i, s in enumerate(scores)]
    return anchor, pool


def test_pool_of_four():
    anchor, pool = pool_with_scores([0.1, 0.9, -0.2, 0.5])
    asg = select_top_half(anchor, pool)
    assert [c for c, _ in asg.selected] == ["c1", "c3"]
    assert [s for _, s in asg.selected] == pytest.approx([0.9, 0.5])
    assert asg.inherit_location == "L"


def test_pool_of_one_selects_nothing():
    anchor, pool = pool_with_scores([0.7])
    assert select_top_half(anchor, pool).selected == ()
    assert select_top_half(anchor, []).selected == ()


def test_random_pool_matches_brute_force(rng):
    anchor = CandidateFeature("a", unit(rng.normal(size=16)))
    pool = [CandidateFeature(f"c{i:02d}", unit(rng.normal(size=16))) for i in range(16)]
    got = [c for c, _ in select_top_half(anchor, pool).selected]
    assert got == top_half_loop(anchor.feature, [(c.image_id, c.feature) for c in pool])
    assert len(got) == 8


def test_boundary_tie_uses_id_order():
    # four candidates tied at the cut: the lower ids survive
    anchor, pool = pool_with_scores([0.5, 0.5, 0.5, 0.5, 0.9, 0.1])
    got = [c for c, _ in select_top_half(anchor, pool).selected]
    assert got == ["c4", "c0", "c1"]


def test_anchor_inside_pool_rejected():
    anchor, pool = pool_with_scores([0.3, 0.4])
    with pytest.raises(ValueError):
        select_top_half(anchor, pool + [anchor])


def test_candidate_feature_must_be_unit():
    with pytest.raises(ValueError):
        CandidateFeature("x", np.array([1.0, 1.0]))
    with pytest.raises(ValueError):
        CandidateFeature("x", np.array([1.0, 0.0]), pool="other")


vectors = st.lists(st.lists(st.floats(-1, 1, allow_nan=False), min_size=4, max_size=4)
                   .filter(lambda v: np.linalg.norm(v) > 1e-3), min_size=0, max_size=12)


@settings(max_examples=60, deadline=None)
@given(vectors, st.randoms(use_true_random=False), st.floats(0.01, 100))
def test_selection_permutation_and_scale_invariant(raw, random, scale):
    anchor = CandidateFeature("a", unit([0.3, -0.2, 0.9, 0.1]))
    pool = [CandidateFeature(f"c{i:02d}", unit(v)) for i, v in enumerate(raw)]
    ref = select_top_half(anchor, pool).selected
    shuffled = list(pool)
    random.shuffle(shuffled)
    assert select_top_half(anchor, shuffled).selected == ref
    scaled = [CandidateFeature(c.image_id, unit(np.asarray(raw[i]) * scale)) for i, c in enumerate(pool)]
    assert [c for c, _ in select_top_half(anchor, scaled).selected] == [c for c, _ in ref]
    assert len(ref) == len(pool) // 2
    scores = [s for _, s in ref]
    assert scores == sorted(scores, reverse=True)


def test_mean_pool_extractor_matches_loop(rng):
    image = rng.uniform(size=(13, 10, 3))
    assert np.allclose(MeanPoolExtractor(grid=4)(image), mean_pool_loop(image, 4), atol=1e-12)


def test_pool_features_unit_and_deterministic(toy_root):
    records = scan_dataset(toy_root, "train")
    street = [r for r in records if r.view is View.STREET][:5]
    f1 = extract_pool_features(street + street[:1], MeanPoolExtractor())
    for f in f1:
        assert abs(np.linalg.norm(f.feature) - 1) < 1e-6
    assert np.array_equal(f1[0].feature, f1[-1].feature)
    img = load_image(street[0].path, 64)
    assert np.allclose(f1[0].feature, unit(mean_pool_loop(img, 4)), atol=1e-12)


def test_build_extractor():
    assert isinstance(build_extractor("meanpool"), MeanPoolExtractor)
    with pytest.raises(ValueError):
        build_extractor("resnet50")
    with pytest.raises(ValueError):
        build_extractor("clip")


def test_run_grem_and_sidecar(toy_root, tmp_path):
    anchors = [r for r in scan_dataset(toy_root, "train")
               if r.view is View.STREET and r.location_id in ("0000", "0001")]
    pool = [r for r in scan_pool(toy_root / "train" / "google") if r.location_id in ("0000", "0001")]
    assignments, records = run_grem(anchors, pool, MeanPoolExtractor())
    assert len(assignments) == len(anchors)
    for a in assignments:
        assert len(a.selected) == 2  # floor(4 / 2)
        assert all(cid.startswith(f"pool/{a.inherit_location}/") for cid, _ in a.selected)
    for r in records:
        assert r.source is Source.GREM and r.view is View.STREET
        assert r.image_id.split(":")[1].split("/")[2] == r.location_id
    stats = audit(assignments)
    assert stats["raw_selected"] == len(records) == 2 * len(anchors)
    assert stats["deduplicated_selected"] <= 8

    manifest = tmp_path / "grem.jsonl"
    sidecar = write_assignments(assignments, records, manifest)
    assert sidecar.name == "grem.assignments.jsonl"
    assert read_manifest(manifest) == records
    lines = [json.loads(x) for x in sidecar.read_text().splitlines()]
    assert [x["anchor_image_id"] for x in lines] == [a.anchor_image_id for a in assignments]


def test_global_scope_searches_everything(toy_root):
    anchors = [r for r in scan_dataset(toy_root, "train")
               if r.view is View.STREET and r.location_id == "0000"][:1]
    pool = scan_pool(toy_root / "train" / "google")
    assignments, _ = run_grem(anchors, pool, MeanPoolExtractor(), scope="global")
    assert len(assignments[0].selected) == len(pool) // 2
    with pytest.raises(ValueError):
        run_grem(anchors, pool, MeanPoolExtractor(), scope="nearby")


def test_scan_pool_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        scan_pool(tmp_path / "nope")

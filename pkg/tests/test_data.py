"""Cohort CSV IO and fold splitting."""

import numpy as np
import pytest

from slidesurv import data
from slidesurv.errors import DataError


def write(path, text):
    path.write_text(text)
    return path


def make_cohort(n, with_images=True, seed=0):
    rng = np.random.default_rng(seed)
    records = tuple(
        data.SurvivalRecord(f"p{i:04d}", float(rng.uniform(1, 2000)), bool(rng.random() < 0.6))
        for i in range(n))
    images = {r.patient_id: (f"images/{r.patient_id}.png",) for r in records} if with_images else {}
    return data.Cohort(records=records, images=images)


def test_load_cohort_minimal(tmp_path):
    clinical = write(tmp_path / "clinical.csv",
                     "patient_id,time,event\na,100.5,1\nb,200,0\n")
    images = write(tmp_path / "images.csv",
                   "patient_id,image_path\na,img/a1.png\na,img/a2.png\nb,img/b.png\n")
    c = data.load_cohort(clinical, images)
    assert c.records == (
        data.SurvivalRecord("a", 100.5, True),
        data.SurvivalRecord("b", 200.0, False),
    )
    assert c.images == {"a": ("img/a1.png", "img/a2.png"), "b": ("img/b.png",)}


@pytest.mark.parametrize("body,fragment", [
    ("patient_id,time,event\na,100,1\na,50,0\n", "row 3"),
    ("patient_id,time,event\na,abc,1\n", "row 2"),
    ("patient_id,time,event\na,-5,1\n", "row 2"),
    ("patient_id,time,event\na,100,2\n", "row 2"),
    ("patient_id,time,event\na,100,1,extra\n", "row 2"),
    ("wrong,header,here\n", "header"),
])
def test_load_cohort_clinical_errors(tmp_path, body, fragment):
    clinical = write(tmp_path / "clinical.csv", body)
    images = write(tmp_path / "images.csv", "patient_id,image_path\n")
    with pytest.raises(DataError, match=fragment):
        data.load_cohort(clinical, images)


def test_load_cohort_unknown_patient_in_images(tmp_path):
    clinical = write(tmp_path / "clinical.csv", "patient_id,time,event\na,100,1\n")
    images = write(tmp_path / "images.csv", "patient_id,image_path\nzz,img.png\n")
    with pytest.raises(DataError, match="zz"):
        data.load_cohort(clinical, images)


def test_cohort_round_trip(tmp_path):
    c = make_cohort(17, seed=1)
    data.save_cohort(c, tmp_path / "c.csv", tmp_path / "i.csv")
    back = data.load_cohort(tmp_path / "c.csv", tmp_path / "i.csv")
    assert back == c  # exact, including awkward float times


def test_patch_round_trip(tmp_path):
    patches = [
        data.PatchRecord("p0_0001", "p0", "img/x.png", 12, 40, 512, None),
        data.PatchRecord("p0_0002", "p0", "img/x.png", 0, 0, 512, 3),
    ]
    data.save_patches(patches, tmp_path / "m.csv")
    assert data.load_patches(tmp_path / "m.csv") == patches


def test_patch_load_rejects_duplicates_and_bad_fields(tmp_path):
    head = ",".join(data.PATCH_HEADER)
    p = write(tmp_path / "m.csv", f"{head}\nid1,p,i.png,0,0,64,\nid1,p,i.png,1,1,64,\n")
    with pytest.raises(DataError, match="duplicate"):
        data.load_patches(p)
    p2 = write(tmp_path / "m2.csv", f"{head}\nid1,p,i.png,-1,0,64,\n")
    with pytest.raises(DataError):
        data.load_patches(p2)


def test_split_matches_cohort_scale_fold_sizes():
    c = make_cohort(583, with_images=False)
    pairs = data.split_k_fold(c, 10, seed=0)
    sizes = sorted(len(test) for _, test in pairs)
    assert set(sizes) == {58, 59}
    assert sum(sizes) == 583
    seen = [p for _, test in pairs for p in test.patient_ids]
    assert sorted(seen) == sorted(c.patient_ids)  # each patient tested once


def test_split_patient_disjoint_and_deterministic():
    c = make_cohort(40)
    pairs1 = data.split_k_fold(c, 5, seed=7)
    pairs2 = data.split_k_fold(c, 5, seed=7)
    for (tr1, te1), (tr2, te2) in zip(pairs1, pairs2):
        assert tr1.patient_ids == tr2.patient_ids
        assert te1.patient_ids == te2.patient_ids
        assert not set(tr1.patient_ids) & set(te1.patient_ids)
        assert len(tr1) + len(te1) == 40
        # image maps follow their patients
        assert set(tr1.images) == set(tr1.patient_ids)
    pairs3 = data.split_k_fold(c, 5, seed=8)
    assert any(te1.patient_ids != te3.patient_ids
               for (_, te1), (_, te3) in zip(pairs1, pairs3))


def test_split_k_bounds():
    c = make_cohort(5, with_images=False)
    with pytest.raises(DataError):
        data.split_k_fold(c, 1, seed=0)
    with pytest.raises(DataError):
        data.split_k_fold(c, 6, seed=0)


def test_holdout_split_has_both_sides():
    ids = [f"p{i}" for i in range(10)]
    train, held = data.holdout_split(ids, 0.2, seed=0)
    assert len(held) == 2 and len(train) == 8
    assert sorted(train + held) == sorted(ids)
    t2, h2 = data.holdout_split(ids, 0.2, seed=0)
    assert (t2, h2) == (train, held)
    # extreme fractions still leave at least one patient per side
    train, held = data.holdout_split(["a", "b"], 0.01, seed=0)
    assert len(train) == 1 and len(held) == 1


def test_cohort_validation():
    with pytest.raises(DataError, match="duplicate"):
        data.Cohort(records=(data.SurvivalRecord("a", 1.0, True),
                             data.SurvivalRecord("a", 2.0, False)), images={})
    with pytest.raises(DataError, match="unknown"):
        data.Cohort(records=(data.SurvivalRecord("a", 1.0, True),),
                    images={"b": ("x.png",)})


def test_subset_preserves_order():
    c = make_cohort(10, with_images=False)
    sub = c.subset(["p0003", "p0001", "p0007"])
    assert sub.patient_ids == ["p0001", "p0003", "p0007"]  # cohort order kept

import numpy as np
import pytest

from longsiam import cohort as C
from longsiam import nifti
from longsiam.nifti import Volume


def _write_pair(tmp_path, sid, shape=(4, 4, 4)):
    rng = np.random.default_rng(len(sid))
    b, f = (Volume(rng.uniform(size=shape).astype(np.float32)) for _ in range(2))
    nifti.save(tmp_path / f"{sid}_b.nii", b)
    nifti.save(tmp_path / f"{sid}_f.nii", f)
    return {"subject_id": sid, "baseline_path": f"{sid}_b.nii", "followup_path": f"{sid}_f.nii", "label": 1}


def test_manifest_round_trip(tmp_path):
    rows = [_write_pair(tmp_path, "a"), _write_pair(tmp_path, "b")]
    rows[1]["label"] = 0
    C.write_manifest(tmp_path / "m.csv", rows)
    back = C.read_manifest(tmp_path / "m.csv")
    assert [r["subject_id"] for r in back] == ["a", "b"]
    assert [r["label"] for r in back] == [1, 0]
    assert back[0]["baseline_path"] == str(tmp_path / "a_b.nii")
    cohort = C.load_cohort(tmp_path / "m.csv")
    assert len(cohort) == 2 and cohort.volume_shape == (4, 4, 4)
    assert np.array_equal(cohort.baseline[0], nifti.load(tmp_path / "a_b.nii").data)


@pytest.mark.parametrize(
    "text,match",
    [
        ("subject_id,baseline_path,label\na,x.nii,1\n", "lacks columns"),
        ("subject_id,baseline_path,followup_path,label\n", "no rows"),
        ("subject_id,baseline_path,followup_path,label\na,x.nii,,1\n", "incomplete"),
        ("subject_id,baseline_path,followup_path,label\na,x.nii,y.nii,2\n", "not 0/1"),
        ("subject_id,baseline_path,followup_path,label\na,x.nii,y.nii,yes\n", "not 0/1"),
    ],
)
def test_malformed_manifests(tmp_path, text, match):
    path = tmp_path / "m.csv"
    path.write_text(text)
    with pytest.raises(C.ManifestError, match=match):
        C.read_manifest(path)


def test_binary_manifest_rejected(tmp_path):
    path = tmp_path / "m.csv"
    path.write_bytes(b"\xff\xfe\x00\x81garbage")
    with pytest.raises(C.ManifestError):
        C.read_manifest(path)


def test_missing_volume_file(tmp_path):
    C.write_manifest(tmp_path / "m.csv", [{"subject_id": "a", "baseline_path": "no.nii",
                                           "followup_path": "no.nii", "label": 0}])
    with pytest.raises(OSError):
        C.load_cohort(tmp_path / "m.csv")


def test_mixed_shapes_rejected(tmp_path):
    rows = [_write_pair(tmp_path, "a"), _write_pair(tmp_path, "bb", shape=(4, 4, 5))]
    C.write_manifest(tmp_path / "m.csv", rows)
    with pytest.raises(C.ManifestError, match="differing shapes"):
        C.load_cohort(tmp_path / "m.csv")


def test_cohort_invariants():
    z = np.zeros((2, 3, 3, 3))
    with pytest.raises(ValueError):
        C.Cohort(["a", "b"], z, z[:, :2], [0, 1])
    with pytest.raises(ValueError):
        C.Cohort(["a"], z, z, [0, 1])
    with pytest.raises(ValueError):
        C.Cohort(["a", "b"], z, z, [0, 2])
    with pytest.raises(ValueError):
        C.Sample("s", Volume(z[0]), Volume(z[0, :2]), 0)
    c = C.Cohort(["a", "b"], z, z + 1, [0, 1])
    sub = c.subset([1])
    assert sub.subject_ids == ["b"] and sub.labels.tolist() == [1]
    assert [s.subject_id for s in c] == ["a", "b"]
    assert c.sample(1).followup.data.max() == 1.0

import json

import numpy as np
import pytest
from PIL import Image

from octfew.dataset import (MAJOR_CLASSES, RARE_CLASSES, ClassLabel, DatasetManifest, ImageRecord, ManifestError,
                            Provenance, load_image, make_folds, manifest_from_json, manifest_to_json,
                            merge_manifests, read_manifest, root_ancestor, sample_class, save_image,
                            scan_directory, write_manifest)


def test_taxonomy():
    assert [c.index for c in ClassLabel] == list(range(9))
    assert [c.name for c in MAJOR_CLASSES] == ["NORMAL", "CNV", "DME", "DRUSEN"]
    assert [c.name for c in RARE_CLASSES] == ["CSC", "MH", "MacTel", "RP", "Stargardt"]
    assert ClassLabel.parse("drusen") is ClassLabel.DRUSEN
    assert ClassLabel.parse("mactel") is ClassLabel.MacTel
    with pytest.raises(ValueError):
        ClassLabel.parse("glaucoma")


def test_record_provenance_rule():
    with pytest.raises(ManifestError):
        ImageRecord("a", "a.png", ClassLabel.CSC, Provenance.augmented)
    with pytest.raises(ManifestError):
        ImageRecord("a", "a.png", ClassLabel.CSC, Provenance.real, source_id="b")
    r = ImageRecord("a", "a.png", "CSC", "generated", source_id="n1", seed=3)
    assert ImageRecord.from_json(r.to_json()) == r


def test_duplicate_ids_rejected():
    r = ImageRecord("a", "a.png", ClassLabel.CSC)
    with pytest.raises(ManifestError, match="duplicate"):
        DatasetManifest((r, r))


def test_scan_directory(small_corpus, small_manifest):
    counts = small_manifest.counts()
    assert counts[ClassLabel.NORMAL] == 20 and counts[ClassLabel.Stargardt] == 6
    assert len(small_manifest) == 4 * 20 + 5 * 6
    assert all(r.provenance is Provenance.real for r in small_manifest)
    paths = [r.path for r in small_manifest]
    assert paths == sorted(paths)
    assert small_manifest.records[0].id == "CNV/img_00000.png"


def test_scan_unmapped_and_custom_mapping(tmp_path):
    img = np.zeros((8, 8), np.uint8)
    save_image(tmp_path / "normal" / "a.png", img)
    save_image(tmp_path / "Glaucoma" / "b.png", img)
    with pytest.raises(ManifestError, match="Glaucoma"):
        scan_directory(tmp_path)
    m = scan_directory(tmp_path, ignore=["Glaucoma"])
    assert m.counts() == {ClassLabel.NORMAL: 1}
    m = scan_directory(tmp_path, class_mapping={"normal": "NORMAL", "Glaucoma": "RP"})
    assert m.counts() == {ClassLabel.NORMAL: 1, ClassLabel.RP: 1}


def test_scan_skips_undecodable(tmp_path, caplog):
    save_image(tmp_path / "CNV" / "ok.png", np.zeros((8, 8), np.uint8))
    (tmp_path / "CNV" / "broken.png").write_bytes(b"not a png")
    m = scan_directory(tmp_path)
    assert len(m) == 1
    assert "undecodable_skipped=1" in m.notes
    assert "broken.png" in caplog.text


def test_image_io_roundtrip(tmp_path, rng):
    gray = rng.integers(0, 256, (10, 12)).astype(np.uint8)
    save_image(tmp_path / "g.png", gray)
    assert Image.open(tmp_path / "g.png").mode == "L"
    rgb = load_image(tmp_path / "g.png")
    assert rgb.shape == (10, 12, 3) and (rgb[..., 0] == gray).all() and (rgb[..., 2] == gray).all()
    assert load_image(tmp_path / "g.png", size=20, channels=1).shape == (20, 20, 1)


def test_manifest_json_roundtrip_and_checks(small_manifest, tmp_path):
    path = tmp_path / "m.json"
    write_manifest(small_manifest, path)
    back = read_manifest(path)
    assert back == small_manifest
    assert manifest_to_json(back) == path.read_text()
    doc = json.loads(path.read_text())
    doc["counts"]["CNV"] = 99
    with pytest.raises(ManifestError, match="counts"):
        manifest_from_json(json.dumps(doc))
    doc = json.loads(path.read_text())
    doc["schema_version"] = "0.1"
    with pytest.raises(ManifestError, match="0.1"):
        manifest_from_json(json.dumps(doc))
    bad = DatasetManifest((ImageRecord("x", str(tmp_path / "missing.png"), ClassLabel.CSC),))
    with pytest.raises(ManifestError, match="does not exist"):
        write_manifest(bad, tmp_path / "bad.json")


def test_sample_class(small_manifest):
    a = sample_class(small_manifest, ClassLabel.NORMAL, 5, seed=1)
    assert len(a) == 5 and a == sample_class(small_manifest, ClassLabel.NORMAL, 5, seed=1)
    assert a != sample_class(small_manifest, ClassLabel.NORMAL, 5, seed=2)
    with pytest.raises(ManifestError, match="short by 4"):
        sample_class(small_manifest, ClassLabel.CSC, 10, seed=1)


def _synthetic_children(manifest, per_real=2):
    out = []
    for r in manifest.records:
        for j in range(per_real):
            out.append(ImageRecord(f"aug:{r.id}:{j}", r.path, r.label, Provenance.augmented, source_id=r.id))
    # a second-generation child and an orphan
    out.append(ImageRecord("aug2", out[0].path, out[0].label, Provenance.augmented, source_id=out[0].id))
    out.append(ImageRecord("gen:orphan", out[0].path, ClassLabel.CSC, Provenance.generated, source_id="elsewhere"))
    return manifest.with_records(list(manifest.records) + out)


def test_make_folds_stratified_and_ancestor_safe(small_manifest):
    m = _synthetic_children(small_manifest)
    plan = make_folds(m, 5, seed=3)
    assert set(plan.assignments) == set(m.ids)
    index = m.by_id()
    for label in ClassLabel:
        per_fold = np.bincount([plan.assignments[r.id] for r in m.of_class(label, Provenance.real)], minlength=5)
        assert per_fold.max() - per_fold.min() <= 1
    assert root_ancestor(index["aug2"], index) == m.records[0].id
    for fold in range(5):
        test = set(plan.test_ids(fold))
        assert all(index[i].provenance is Provenance.real for i in test)
        for i in plan.train_ids(fold):
            assert root_ancestor(index[i], index) not in test
        assert test.isdisjoint(plan.train_ids(fold))
    assert plan == make_folds(m, 5, seed=3)


def test_make_folds_errors(small_manifest):
    with pytest.raises(ValueError, match="k must"):
        make_folds(small_manifest, 1, 0)
    with pytest.raises(ValueError, match="CSC"):
        make_folds(small_manifest, 7, 0)


def test_merge_manifests(small_manifest):
    a = small_manifest.subset(small_manifest.ids[:3])
    b = small_manifest.subset(small_manifest.ids[3:5])
    assert merge_manifests(a, b).ids == small_manifest.ids[:5]
    assert merge_manifests(a, a).ids == a.ids
    clash = DatasetManifest((ImageRecord(a.ids[0], "other.png", ClassLabel.RP),))
    with pytest.raises(ManifestError, match="conflicting"):
        merge_manifests(a, clash)

import json
import os
import subprocess

import numpy as np
import pytest

import cbmkit


def naive_cms(images, concepts, classes):
    v = images @ concepts.T
    t = classes @ concepts.T
    out = []
    for row in v:
        cos = [row @ tm / (np.linalg.norm(row) * np.linalg.norm(tm)) for tm in t]
        top = max(cos)
        out.append(next(i for i, c in enumerate(cos) if c >= top - 1e-12))
    return out


def test_synth_shapes_and_determinism():
    a = cbmkit.synth(classes=3, images_per_class=4, concepts_per_class=2, dim=8, seed=7)
    b = cbmkit.synth(classes=3, images_per_class=4, concepts_per_class=2, dim=8, seed=7)
    assert a["images"].shape == (12, 8)
    assert a["concepts"].shape == (6, 8)
    assert a["classes"].shape == (3, 8)
    assert a["labels"] == [0] * 4 + [1] * 4 + [2] * 4
    np.testing.assert_array_equal(a["images"], b["images"])
    np.testing.assert_allclose(np.linalg.norm(a["images"], axis=1), 1.0, atol=1e-12)


def test_cms_and_zero_shot_match_numpy():
    rng = np.random.default_rng(3)
    for _ in range(20):
        images = rng.normal(size=(15, 6))
        concepts = rng.normal(size=(5, 6))
        classes = rng.normal(size=(4, 6))
        assert cbmkit.cms_classify(images, concepts, classes) == naive_cms(images, concepts, classes)
        cos = (images / np.linalg.norm(images, axis=1, keepdims=True)) @ (
            classes / np.linalg.norm(classes, axis=1, keepdims=True)
        ).T
        assert cbmkit.zero_shot_classify(images, classes) == list(cos.argmax(axis=1))


def test_compute_scores():
    images = np.array([[1.0, 0.0], [0.6, 0.8]])
    concepts = np.array([[0.6, 0.8]])
    s = cbmkit.compute_scores(images, concepts, alpha_log=2.659)
    np.testing.assert_allclose(s[:, 0], np.exp(2.659) * np.array([0.6, 1.0]))
    with pytest.raises(cbmkit.CbmkitError, match="E_NOT_NORMALIZED"):
        cbmkit.compute_scores(np.array([[2.0, 0.0]]), concepts)


def test_manifest_written_from_python_round_trips(tmp_path):
    # The path an external exporter takes: numpy rows in, manifest bundle out.
    rng = np.random.default_rng(0)
    images = rng.normal(size=(6, 5))
    images /= np.linalg.norm(images, axis=1, keepdims=True)
    concepts = np.eye(5)[:3]
    classes = np.eye(5)[3:]
    manifest = cbmkit.write_bundle(
        tmp_path / "bundle", images, concepts, classes, [0, 1, 0, 1, 1, 0],
        concept_names=["fur", "wheel", "wet nose"], class_names=["dog", "car"], dtype="f64",
        normalized=False,
    )
    doc = json.loads(open(manifest).read())
    assert set(doc) == {"format_version", "dim", "normalized", "files", "names_files", "labels_file"}
    assert doc["format_version"] == cbmkit.MANIFEST_FORMAT_VERSION
    assert doc["dim"] == 5
    back = cbmkit.load_bundle(manifest)
    np.testing.assert_array_equal(back["images"], images)
    assert back["concept_names"] == ["fur", "wheel", "wet nose"]
    assert back["labels"] == [0, 1, 0, 1, 1, 0]

    # With the flag set, rows are renormalized on load.
    scaled = cbmkit.write_bundle(tmp_path / "scaled", 3.0 * images, concepts, classes, [0] * 6, dtype="f64")
    np.testing.assert_allclose(cbmkit.load_bundle(scaled)["images"], images, atol=1e-15)

    f32 = cbmkit.write_bundle(tmp_path / "f32", images, concepts, classes, [0] * 6)
    np.testing.assert_allclose(cbmkit.load_bundle(f32)["images"], images, atol=1e-6)

    with pytest.raises(cbmkit.CbmkitError, match="E_LABEL_RANGE"):
        cbmkit.write_bundle(tmp_path / "bad", images, concepts, classes, [0, 1, 2, 0, 0, 0])


def test_training_through_the_binding(tmp_path):
    code, out, err = cbmkit.run_cli(
        ["synth", "--out", str(tmp_path / "d"), "--classes", "2", "--images-per-class", "10", "--dim", "8",
         "--concepts-per-class", "3"]
    )
    assert code == 0, err
    assert out.startswith("synth:")
    manifest = tmp_path / "d" / "manifest.json"
    r1 = cbmkit.train_cbm(manifest, loss="l1", steps=50, batch_size=4, seed=1)
    r2 = cbmkit.train_cbm(manifest, loss="l1", steps=50, batch_size=4, seed=1)
    assert r1["checkpoint"] == r2["checkpoint"]
    assert r1["cbl"].shape == (6, 6)
    assert r1["fc"].shape == (2, 6)
    assert r1["metrics_csv"].startswith("step,cbl_loss,ce_loss,train_acc,tau\n")
    with pytest.raises(cbmkit.CbmkitError, match="E_BAD_SPEC"):
        cbmkit.train_cbm(manifest, loss="hinge")


def test_cli_usage_errors():
    code, _, err = cbmkit.run_cli(["no-such-command"])
    assert code == 2
    assert "error" in err


@pytest.mark.skipif("CBMKIT_EXE" not in os.environ, reason="executable path not provided")
def test_executable_matches_binding(tmp_path):
    exe = os.environ["CBMKIT_EXE"]
    args = ["synth", "--classes", "2", "--images-per-class", "3", "--dim", "4", "--concepts-per-class", "2", "--seed", "9"]
    subprocess.run([exe, *args, "--out", str(tmp_path / "a")], check=True, capture_output=True)
    code, _, _ = cbmkit.run_cli([*args, "--out", str(tmp_path / "b")])
    assert code == 0
    for name in ["manifest.json", "images.bin", "concepts.bin", "classes.bin", "labels.txt"]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

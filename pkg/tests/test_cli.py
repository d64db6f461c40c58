import csv
import hashlib
import json
import logging
import shutil

import numpy as np
import pytest

from kneemorph.cli import EVAL_COLUMNS, SUMMARY_COLUMNS, main
from kneemorph.mesh import write_ply
from kneemorph.morphometrics import Region, parcellate_tc, pseudo_interface
from kneemorph.nifti import read_labels, read_volume, write_volume
from kneemorph.phantoms import knee_phantom
from kneemorph.volume import ImageVolume, LabelMap, flip_lr

KW = dict(femur_radius=6.0, half_width=10.0, cartilage_mm=3.0)
CONFIG = """[paths]
work_root = work
[registration]
lncc_window_edge = 5
iters_per_level = 15
stage2_iters = 10
pyramid_levels = 2
field_resolution_factor = 0.5
[run]
threads = 2
seed = 0
"""
SPLITS = ["train", "train", "train", "test", "analysis", "analysis"]


def _make_cohort(root):
    rows = ["subject_id,image,labels,side,split"]
    for k, split in enumerate(SPLITS):
        seed = min(k, 4)  # s5 is the right-knee twin of the left knee s4
        img, lab = knee_phantom((32, 32, 32), 1.0, seed=seed, shift_mm=(seed - 2) * 0.7 * np.ones(3), **KW)
        side = "left" if k == 4 else "right"
        if side == "left":
            img, lab = flip_lr(img), flip_lr(lab)
        write_volume(img, root / f"img{k}.nii.gz")
        write_volume(lab, root / f"lab{k}.nii.gz")
        rows.append(f"s{k},img{k}.nii.gz,lab{k}.nii.gz,{side},{split}")
    (root / "manifest.csv").write_text("\n".join(rows) + "\n")
    (root / "cfg.ini").write_text(CONFIG)


def _run_all(root, work, threads):
    base = ["--config", str(root / "cfg.ini"), "--work-root", str(work), "--threads", str(threads)]
    for cmd in ("standardize", "learn-template", "register", "evaluate", "quantify"):
        assert main([cmd, *base, "--manifest", str(root / "manifest.csv")]) == 0, cmd
    assert main(["report", *base]) == 0


def _digests(work):
    return {str(p.relative_to(work)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(work.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def cohort(tmp_path_factory):
    root = tmp_path_factory.mktemp("cohort")
    _make_cohort(root)
    _run_all(root, root / "work", threads=2)
    return root


def test_artifacts(cohort):
    w = cohort / "work"
    for name in ("template.nii.gz", "mask.nii.gz", "prob_FC.nii.gz", "prob_TC.nii.gz", "metadata.txt"):
        assert (w / "template" / name).is_file()
    for name in ("phi.nii.gz", "phi_inv.nii.gz", "warped_mask.nii.gz"):
        assert (w / "registered" / "s3" / name).is_file()
    for sid in ("s4", "s5"):
        assert {p.name for p in (w / "quantify" / sid).iterdir()} == {
            "metrics.csv", "metrics.json", "FC_thickness.ply", "MTC_thickness.ply", "LTC_thickness.ply"}
    prov = json.loads((w / "standardized" / "s4" / "provenance.json").read_text())
    assert prov["flipped_lr"] is True and prov["side"] == "left"
    with open(w / "evaluation" / "evaluation.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == EVAL_COLUMNS and [r[0] for r in rows[1:]] == ["s3", "mean"]
    dscs = [float(x) for x in rows[1][1:4]]
    assert all(0 <= d <= 1 for d in dscs) and all(float(x) >= 0 for x in rows[1][4:7])


def test_report_matches_recomputation(cohort):
    w = cohort / "work"
    with open(w / "report" / "summary.csv") as fh:
        summary = list(csv.DictReader(fh))
    assert list(summary[0]) == SUMMARY_COLUMNS
    assert len(summary) == 2 * len(Region)
    per_subject = []
    for sid in ("s4", "s5"):
        with open(w / "quantify" / sid / "metrics.csv") as fh:
            per_subject.extend(csv.DictReader(fh))
    with open(w / "report" / "cohort_means.csv") as fh:
        means = {r["region"]: r for r in csv.DictReader(fh)}
    for region in Region:
        sel = [r for r in per_subject if r["region"] == region.value]
        for k in SUMMARY_COLUMNS[2:]:
            assert float(means[region.value][k]) == pytest.approx(np.mean([float(r[k]) for r in sel]), rel=1e-12)


def test_mirror_twin_metrics(cohort):
    w = cohort / "work"
    a = json.loads((w / "quantify" / "s4" / "metrics.json").read_text())
    b = json.loads((w / "quantify" / "s5" / "metrics.json").read_text())
    for ra, rb in zip(a["regions"], b["regions"]):
        for k, v in ra.items():
            if isinstance(v, float):
                assert abs(v - rb[k]) <= 1e-6


def test_deterministic_across_threads(cohort, tmp_path):
    _run_all(cohort, tmp_path / "work", threads=1)
    first, second = _digests(cohort / "work"), _digests(tmp_path / "work")
    assert first.keys() == second.keys()
    assert first == second


def test_perfect_predictions(cohort, tmp_path):
    w = cohort / "work"
    ref, _ = read_labels(w / "standardized" / "s3" / "labels.nii.gz")
    (tmp_path / "pred" / "s3").mkdir(parents=True)
    write_volume(ref, tmp_path / "pred" / "s3" / "warped_mask.nii.gz")
    parcel = parcellate_tc(ref)
    for region in Region:
        (tmp_path / "pseudo" / "s3").mkdir(parents=True, exist_ok=True)
        write_ply(pseudo_interface(parcel, parcel, region).to_mesh(), tmp_path / "pseudo" / "s3" / f"{region.value}.ply")
    rc = main(["evaluate", "--config", str(cohort / "cfg.ini"), "--work-root", str(w),
               "--manifest", str(cohort / "manifest.csv"), "--pred-dir", str(tmp_path / "pred"),
               "--pseudo-dir", str(tmp_path / "pseudo"), "--out", str(tmp_path / "eval")])
    assert rc == 0
    row = json.loads((tmp_path / "eval" / "evaluation.json").read_text())["subjects"]["s3"]
    for col in ("FC", "mTC", "lTC"):
        assert row[f"DSC_{col}"] == 1.0 and row[f"HD95_{col}"] == 0.0 and row[f"RAD_{col}"] == 0.0


def test_failure_isolation(cohort, tmp_path, caplog):
    (tmp_path / "cfg.ini").write_text(CONFIG)
    for k in range(3):
        for kind in ("img", "lab"):
            shutil.copy(cohort / f"{kind}{k}.nii.gz", tmp_path)
    (tmp_path / "lab1.nii.gz").unlink()
    (tmp_path / "manifest.csv").write_text(
        "subject_id,image,labels,side,split\n"
        + "".join(f"s{k},img{k}.nii.gz,lab{k}.nii.gz,right,train\n" for k in range(3)))
    with caplog.at_level(logging.ERROR, logger="kneemorph"):
        rc = main(["standardize", "--config", str(tmp_path / "cfg.ini"), "--manifest", str(tmp_path / "manifest.csv")])
    assert rc == 1
    std = tmp_path / "work" / "standardized"
    assert sorted(p.name for p in std.iterdir()) == ["s0", "s2"]
    assert "subject s1 failed at step 'read'" in caplog.text


def test_report_without_inputs(tmp_path):
    assert main(["report", "--work-root", str(tmp_path / "empty")]) == 2


def test_register_without_template(cohort, tmp_path):
    rc = main(["register", "--config", str(cohort / "cfg.ini"), "--work-root", str(tmp_path / "w"),
               "--manifest", str(cohort / "manifest.csv")])
    assert rc == 2


def test_standardize_lps_input(tmp_path):
    rng = np.random.default_rng(0)
    aff = np.diag([-0.7, -0.7, 0.7, 1.0])
    aff[:3, 3] = (10.0, 10.0, -5.0)
    data = rng.normal(100, 30, (15, 15, 15))
    labels = np.zeros((15, 15, 15), np.uint8)
    labels[4:11, 4:11, 4:11] = 1
    write_volume(ImageVolume(data, aff), tmp_path / "img.nii.gz")
    write_volume(LabelMap(labels, aff), tmp_path / "lab.nii.gz")
    (tmp_path / "m.csv").write_text("subject_id,image,labels,side,split\na,img.nii.gz,lab.nii.gz,right,train\n")
    (tmp_path / "c.ini").write_text("[paths]\nwork_root = w\n[standardize]\ntarget_spacing = 0.5\n")
    assert main(["standardize", "--config", str(tmp_path / "c.ini"), "--manifest", str(tmp_path / "m.csv")]) == 0
    out, _ = read_volume(tmp_path / "w" / "standardized" / "a" / "image.nii.gz")
    lin = out.affine[:3, :3]
    np.testing.assert_allclose(lin, np.diag([0.5, 0.5, 0.5]), atol=1e-6)
    assert out.data.min() >= 0 and out.data.max() <= 1
    before = _digests(tmp_path / "w")
    assert main(["standardize", "--config", str(tmp_path / "c.ini"), "--manifest", str(tmp_path / "m.csv")]) == 0
    assert _digests(tmp_path / "w") == before

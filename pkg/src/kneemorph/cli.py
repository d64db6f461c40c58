"""Command-line pipeline: standardize, learn-template, register, evaluate, quantify, report.

Work-root layout (every command reads and writes below it unless ``--out``
or ``--template-dir`` say otherwise)::

    standardized/<id>/{image,labels}.nii.gz, provenance.json
    template/                    template.nii.gz, mask.nii.gz, prob_*.nii.gz, metadata.txt, loss_curve.csv
    registered/<id>/{phi,phi_inv,warped_mask}.nii.gz
    evaluation/evaluation.{csv,json}
    quantify/<id>/metrics.{csv,json}, <region>_thickness.ply
    report/summary.csv, cohort_means.csv
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import Manifest, ProjectConfig, load_config, load_manifest
from .errors import ConfigError, KneeMorphError, MissingInputs
from .mesh import read_ply, write_ply
from .metrics import dsc, hd95, relative_area_difference
from .morphometrics import (
    Region,
    measure,
    parcellate_tc,
    pseudo_interface,
    pose_normalize,
    standardize_laterality,
    unflip_mesh,
    write_metrics_csv,
    write_metrics_json,
)
from .nifti import read_labels, read_volume, write_volume
from .registration import CARTILAGE, SubjectEntry, TemplateModel, learn_template, register_to_template
from .volume import (
    LabelMap,
    check_same_grid,
    mask_image,
    normalize_intensity,
    reorient_to_ras,
    resample,
    resample_to_grid,
)
from .warp import warp_mask, write_field

log = logging.getLogger("kneemorph")

REGION_COLUMNS = {Region.FC: "FC", Region.MTC: "mTC", Region.LTC: "lTC"}
EVAL_COLUMNS = ["subject_id"] + [f"{m}_{c}" for m in ("DSC", "HD95", "RAD") for c in REGION_COLUMNS.values()]
SUMMARY_COLUMNS = ["subject_id", "region", "volume_mm3", "mean_thickness_mm", "interface_area_mm2", "fcl_fraction"]
ALL_CARTILAGE = ("FC", "TC", "MTC", "LTC")


class SubjectFailure(Exception):
    def __init__(self, step: str, error: BaseException):
        super().__init__(f"step '{step}': {type(error).__name__}: {error}")
        self.step = step


@contextlib.contextmanager
def step(name: str):
    try:
        yield
    except SubjectFailure:
        raise
    except Exception as e:
        raise SubjectFailure(name, e) from e


def run_subjects(entries, fn, threads: int) -> list:
    """Apply ``fn`` per entry on a bounded pool; returns ``[(entry, result | SubjectFailure)]`` in input order."""
    def guarded(e):
        try:
            return fn(e)
        except SubjectFailure as f:
            return f
        except Exception as exc:  # noqa: BLE001 - isolate unexpected failures too
            return SubjectFailure("unexpected", exc)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(guarded, entries))
    out = list(zip(entries, results))
    for e, r in out:
        if isinstance(r, SubjectFailure):
            log.error("subject %s failed at %s", e.subject_id, r)
    return out


def _failed(results) -> int:
    return sum(isinstance(r, SubjectFailure) for _, r in results)


def _write_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


# ------------------------------------------------------------- paths

class Layout:
    def __init__(self, cfg: ProjectConfig, args):
        self.root = cfg.resolved_work_root()
        self.template = Path(args.template_dir) if getattr(args, "template_dir", None) else self.root / "template"
        self.out = Path(args.out) if getattr(args, "out", None) else None

    def standardized(self, sid: str) -> Path:
        return self.root / "standardized" / sid

    def registered(self, sid: str) -> Path:
        return self.root / "registered" / sid

    def quantified(self, sid: str) -> Path:
        return self.root / "quantify" / sid


def _load_standardized(layout: Layout, sid: str, schema):
    d = layout.standardized(sid)
    if not (d / "image.nii.gz").exists():
        raise MissingInputs(f"{d}: run 'standardize' first")
    image, _ = read_volume(d / "image.nii.gz")
    labels, _ = read_labels(d / "labels.nii.gz", schema)
    with open(d / "provenance.json") as fh:
        prov = json.load(fh)
    return image, labels, prov


def _to_template_grid(v, model: TemplateModel):
    if v.same_grid(model.image):
        return v
    return resample_to_grid(v, model.image.shape, model.image.affine, cval=0)


def _cartilage(labels: LabelMap) -> list:
    return [n for n in ALL_CARTILAGE if n in labels.schema]


def _load_template(layout: Layout) -> TemplateModel:
    if not (layout.template / "metadata.txt").exists():
        raise MissingInputs(f"{layout.template}: no template; run 'learn-template' first")
    return TemplateModel.load(layout.template)


# ---------------------------------------------------------- commands

def cmd_standardize(cfg: ProjectConfig, manifest: Manifest, layout: Layout) -> int:
    def one(e):
        out = layout.standardized(e.subject_id)
        with step("read"):
            image, _ = read_volume(e.image)
            labels, _ = read_labels(e.labels, cfg.schema)
            check_same_grid(image, labels, "image and labels")
        with step("reorient"):
            image, labels = reorient_to_ras(image), reorient_to_ras(labels)
        with step("resample"):
            image, labels = resample(image, cfg.target_spacing), resample(labels, cfg.target_spacing)
        with step("normalize"):
            image = normalize_intensity(image, cfg.percentiles)
        with step("laterality"):
            image, labels, flipped = standardize_laterality(image, labels, e.side)
        with step("write"):
            out.mkdir(parents=True, exist_ok=True)
            write_volume(image, out / "image.nii.gz")
            write_volume(labels, out / "labels.nii.gz")
            _write_json({
                "subject_id": e.subject_id, "source_image": str(e.image), "source_labels": str(e.labels),
                "steps": ["reorient_to_ras", "resample", "normalize_intensity", "standardize_laterality"],
                "target_spacing_mm": list(cfg.target_spacing), "percentiles": list(cfg.percentiles),
                "side": e.side, "flipped_lr": flipped, "version": __version__,
            }, out / "provenance.json")
        return out

    return _failed(run_subjects(list(manifest.entries), one, cfg.threads))


def cmd_learn_template(cfg: ProjectConfig, manifest: Manifest, layout: Layout, split=("train",)) -> int:
    entries = manifest.split(*split)
    subjects = []
    for e in entries:
        image, labels, _ = _load_standardized(layout, e.subject_id, cfg.schema)
        subjects.append(SubjectEntry.from_volumes(e.subject_id, image, labels, CARTILAGE))
    model, _ = learn_template(subjects, cfg.registration, cfg.threshold, workers=cfg.threads)
    out = layout.out or layout.template
    model.save(out)
    with open(out / "loss_curve.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "level", "iteration", "loss", "kernel"])
        for h in model.history:
            w.writerow([h["stage"], h["level"], h["iteration"], repr(float(h["loss"])), h["kernel"]])
    log.info("template written to %s (%d subjects)", out, len(subjects))
    return 0


def cmd_register(cfg: ProjectConfig, manifest: Manifest, layout: Layout, split=("test",)) -> int:
    model = _load_template(layout)

    def one(e):
        with step("load"):
            image, labels, _ = _load_standardized(layout, e.subject_id, cfg.schema)
            target = _to_template_grid(mask_image(image, labels, _cartilage(labels)), model)
        with step("register"):
            phi, phi_inv = register_to_template(model, target, cfg.registration)
        with step("write"):
            out = (layout.out / e.subject_id) if layout.out else layout.registered(e.subject_id)
            out.mkdir(parents=True, exist_ok=True)
            write_field(phi, out / "phi.nii.gz")
            write_field(phi_inv, out / "phi_inv.nii.gz")
            write_volume(warp_mask(model.mask, phi), out / "warped_mask.nii.gz")
        return out

    return _failed(run_subjects(manifest.split(*split), one, cfg.threads))


def _parcellated(labels: LabelMap) -> LabelMap:
    if any(labels.indicator(n).any() for n in ("TC", "MTC", "LTC") if n in labels.schema):
        return parcellate_tc(labels)
    return labels


def evaluate_subject(warped: LabelMap, reference: LabelMap, pseudo: dict | None = None) -> dict:
    """One evaluation row: DSC, HD95 (mm) and, given pseudo-healthy meshes, relative area difference."""
    check_same_grid(warped, reference, "warped mask and reference")
    w, r = _parcellated(warped), _parcellated(reference)
    row = {}
    for region, col in REGION_COLUMNS.items():
        a, b = w.indicator(region.value), r.indicator(region.value)
        row[f"DSC_{col}"] = dsc(a, b)
        row[f"HD95_{col}"] = hd95(a, b, reference.affine)
        row[f"RAD_{col}"] = None
        if pseudo and region in pseudo:
            measured = pseudo_interface(w, reference, region)
            row[f"RAD_{col}"] = relative_area_difference(measured, pseudo[region])
    return row


def cmd_evaluate(cfg: ProjectConfig, manifest: Manifest, layout: Layout, split=("test",),
                 pred_dir=None, pseudo_dir=None) -> int:
    pred_root = Path(pred_dir) if pred_dir else layout.root / "registered"
    model = _load_template(layout) if (layout.template / "metadata.txt").exists() else None

    def one(e):
        with step("load"):
            path = pred_root / e.subject_id / "warped_mask.nii.gz"
            if not path.exists():
                raise MissingInputs(f"{path} not found")
            warped, _ = read_labels(path, cfg.schema)
            _, reference, _ = _load_standardized(layout, e.subject_id, cfg.schema)
            if model is not None and warped.same_grid(model.image):
                reference = _to_template_grid(reference, model)
            pseudo = None
            if pseudo_dir:
                pseudo = {}
                for region in Region:
                    p = Path(pseudo_dir) / e.subject_id / f"{region.value}.ply"
                    if p.exists():
                        pseudo[region] = read_ply(p)
        with step("metrics"):
            return evaluate_subject(warped, reference, pseudo)

    results = run_subjects(manifest.split(*split), one, cfg.threads)
    rows = [(e.subject_id, r) for e, r in results if not isinstance(r, SubjectFailure)]
    out = layout.out or layout.root / "evaluation"
    out.mkdir(parents=True, exist_ok=True)
    means = {}
    for col in EVAL_COLUMNS[1:]:
        vals = [r[col] for _, r in rows if r[col] is not None]
        means[col] = float(np.mean(vals)) if vals else None
    with open(out / "evaluation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EVAL_COLUMNS)
        for sid, r in rows:
            w.writerow([sid] + [_fmt(r[c]) for c in EVAL_COLUMNS[1:]])
        w.writerow(["mean"] + [_fmt(means[c]) for c in EVAL_COLUMNS[1:]])
    _write_json({"columns": EVAL_COLUMNS, "subjects": {sid: r for sid, r in rows}, "mean": means},
                out / "evaluation.json")
    return _failed(results)


def quantify_subject(image, labels, model: TemplateModel, cfg: ProjectConfig, flipped: bool):
    """Pose-normalize, register, parcellate, measure; returns ``(metrics, meshes in subject space)``."""
    with step("pose_normalize"):
        img_t, lab_t, rigid = pose_normalize(image, labels, model, cartilage=_cartilage(labels))
    with step("register"):
        target = mask_image(img_t, lab_t, _cartilage(lab_t))
        phi, _ = register_to_template(model, target, cfg.registration)
        warped = warp_mask(model.mask, phi)
    with step("measure"):
        metrics, meshes = measure(lab_t, warped)
    with step("export"):
        exported = {}
        for region, mesh in meshes.items():
            m = mesh.transformed(rigid)  # template pose -> standardized subject space
            if flipped:
                m = unflip_mesh(m, labels.shape, labels.affine)
            exported[region] = m
    return metrics, exported


def cmd_quantify(cfg: ProjectConfig, manifest: Manifest, layout: Layout, split=("analysis",)) -> int:
    model = _load_template(layout)

    def one(e):
        with step("load"):
            image, labels, prov = _load_standardized(layout, e.subject_id, cfg.schema)
        metrics, meshes = quantify_subject(image, labels, model, cfg, bool(prov.get("flipped_lr")))
        with step("write"):
            out = (layout.out / e.subject_id) if layout.out else layout.quantified(e.subject_id)
            out.mkdir(parents=True, exist_ok=True)
            write_metrics_csv([(e.subject_id, m) for m in metrics], out / "metrics.csv")
            write_metrics_json(e.subject_id, metrics, out / "metrics.json", side=e.side)
            for region, mesh in meshes.items():
                write_ply(mesh, out / f"{region.value}_thickness.ply")
        return metrics

    return _failed(run_subjects(manifest.split(*split), one, cfg.threads))


def cmd_report(layout: Layout) -> int:
    src = layout.root / "quantify"
    files = sorted(src.glob("*/metrics.csv")) if src.is_dir() else []
    if not files:
        raise MissingInputs(f"no per-subject metrics under {src}; run 'quantify' first")
    rows = []
    for f in files:
        with open(f, newline="") as fh:
            rows.extend(csv.DictReader(fh))
    out = layout.out or layout.root / "report"
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, SUMMARY_COLUMNS)
        w.writeheader()
        w.writerows({k: r[k] for k in SUMMARY_COLUMNS} for r in rows)
    means = []
    for region in Region:
        sel = [r for r in rows if r["region"] == region.value]
        if sel:
            means.append([region.value, len(sel)] + [float(np.mean([float(r[k]) for r in sel]))
                                                     for k in SUMMARY_COLUMNS[2:]])
    with open(out / "cohort_means.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["region", "n"] + SUMMARY_COLUMNS[2:])
        w.writerows([m[:2] + [repr(x) for x in m[2:]] for m in means])
    print(f"{'region':<6} {'n':>3} {'volume_mm3':>12} {'thick_mm':>9} {'area_mm2':>10} {'fcl':>7}")
    for m in means:
        print(f"{m[0]:<6} {m[1]:>3} {m[2]:>12.1f} {m[3]:>9.3f} {m[4]:>10.1f} {m[5]:>7.3f}")
    return 0


# -------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kneemorph", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, manifest=True):
        sp.add_argument("--config", help="INI project configuration")
        sp.add_argument("--work-root", help="work directory (default: config, then $CMT_WORK_ROOT)")
        sp.add_argument("--threads", type=int, help="subject-level worker threads")
        sp.add_argument("--seed", type=int, help="global seed")
        sp.add_argument("--out", help="output directory override")
        sp.add_argument("-v", "--verbose", action="store_true")
        if manifest:
            sp.add_argument("--manifest", required=True, help="CSV: subject_id,image,labels,side,split")
        return sp

    common(sub.add_parser("standardize", help="reorient, resample, normalize, mirror left knees"))
    sp = common(sub.add_parser("learn-template", help="two-stage template learning on the train split"))
    sp.add_argument("--template-dir")
    sp.add_argument("--split", nargs="+", default=["train"])
    sp = common(sub.add_parser("register", help="template-to-image registration"))
    sp.add_argument("--template-dir")
    sp.add_argument("--split", nargs="+", default=["test"])
    sp = common(sub.add_parser("evaluate", help="DSC / HD95 / relative area difference table"))
    sp.add_argument("--template-dir")
    sp.add_argument("--split", nargs="+", default=["test"])
    sp.add_argument("--pred-dir", help="directory of <id>/warped_mask.nii.gz (default: registered/)")
    sp.add_argument("--pseudo-dir", help="directory of <id>/<FC|MTC|LTC>.ply pseudo-healthy interfaces")
    sp = common(sub.add_parser("quantify", help="regional thickness, area, volume and FCL"))
    sp.add_argument("--template-dir")
    sp.add_argument("--split", nargs="+", default=["analysis"])
    common(sub.add_parser("report", help="merge per-subject metrics"), manifest=False)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)  # subject-level parallelism only; keeps reductions deterministic
    try:
        cfg = load_config(args.config).override(args.threads, args.seed, args.work_root)
        layout = Layout(cfg, args)
        if args.command == "report":
            return cmd_report(layout)
        manifest = load_manifest(args.manifest, cfg.data_root)
        if args.command == "standardize":
            missing = manifest.missing_paths()
            for sid, path in missing:
                log.error("subject %s: missing input %s", sid, path)
            failed = cmd_standardize(cfg, manifest, layout)
        elif args.command == "learn-template":
            failed = cmd_learn_template(cfg, manifest, layout, args.split)
        elif args.command == "register":
            failed = cmd_register(cfg, manifest, layout, args.split)
        elif args.command == "evaluate":
            failed = cmd_evaluate(cfg, manifest, layout, args.split, args.pred_dir, args.pseudo_dir)
        else:
            failed = cmd_quantify(cfg, manifest, layout, args.split)
    except (KneeMorphError, ConfigError, OSError) as e:
        log.error("%s: %s", type(e).__name__, e)
        return 2
    if failed:
        log.error("%d subject(s) failed", failed)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

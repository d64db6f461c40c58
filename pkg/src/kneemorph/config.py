"""Project configuration (INI) and dataset manifest (CSV).

Configuration grammar, all sections optional::

    [paths]
    data_root = /data/knees        ; relative manifest paths resolve here
    work_root = /scratch/run1      ; falls back to $CMT_WORK_ROOT

    [labels]                       ; name = integer overrides
    FC = 2

    [standardize]
    percentile_low = 0.5
    percentile_high = 99.5
    target_spacing = 0.5           ; mm, one value or three comma-separated

    [registration]                 ; any RegistrationConfig field
    lncc_window_edge = 9

    [template]
    threshold = 0.5

    [run]
    threads = 1
    seed = 0

Precedence is command-line flags over file values over defaults.
"""
from __future__ import annotations

import configparser
import csv
import os
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import ConfigError
from .registration import RegistrationConfig
from .volume import DEFAULT_LABELS, LabelSchema

WORK_ROOT_ENV = "CMT_WORK_ROOT"
SPLITS = ("train", "test", "analysis")
SIDES = ("left", "right")
MANIFEST_COLUMNS = ("subject_id", "image", "labels", "side", "split")


@dataclass(frozen=True)
class ProjectConfig:
    data_root: Path | None = None
    work_root: Path | None = None
    labels: dict = field(default_factory=lambda: dict(DEFAULT_LABELS))
    registration: RegistrationConfig = RegistrationConfig()
    percentiles: tuple = (0.5, 99.5)
    target_spacing: tuple = (1.0, 1.0, 1.0)
    threshold: float = 0.5
    laterality_source: str = "manifest"
    threads: int = 1
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.percentiles
        if not 0 <= lo < hi <= 100:
            raise ConfigError(f"percentiles must satisfy 0 <= low < high <= 100, got {self.percentiles}")
        if len(self.target_spacing) != 3 or min(self.target_spacing) <= 0:
            raise ConfigError(f"target_spacing must be three positive values, got {self.target_spacing}")
        if not 0 < self.threshold <= 1:
            raise ConfigError(f"threshold must be in (0, 1], got {self.threshold}")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        if self.laterality_source != "manifest":
            raise ConfigError("laterality_source must be 'manifest'")
        try:
            LabelSchema(self.labels)
        except ValueError as e:
            raise ConfigError(str(e)) from None

    @property
    def schema(self) -> LabelSchema:
        return LabelSchema(self.labels)

    def resolved_work_root(self) -> Path:
        root = self.work_root or os.environ.get(WORK_ROOT_ENV)
        if not root:
            raise ConfigError(f"no work_root configured and ${WORK_ROOT_ENV} is unset")
        root = Path(root)
        try:
            root.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise ConfigError(f"work_root {root} cannot be created: {e}") from None
        return root

    def override(self, threads=None, seed=None, work_root=None) -> "ProjectConfig":
        """Apply command-line values (``None`` keeps the current value)."""
        cfg = self
        if threads is not None:
            cfg = replace(cfg, threads=threads)
        if seed is not None:
            cfg = replace(cfg, seed=seed, registration=replace(cfg.registration, seed=seed))
        if work_root is not None:
            cfg = replace(cfg, work_root=Path(work_root))
        return cfg


def _floats(text: str) -> tuple:
    return tuple(float(t) for t in text.replace(",", " ").split())


def load_config(path=None) -> ProjectConfig:
    """Read a configuration file; ``None`` gives the defaults."""
    if path is None:
        return ProjectConfig()
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    parser.optionxform = str  # keep label-name case
    if not parser.read(path):
        raise ConfigError(f"cannot read config file {path}")
    known = {"paths", "labels", "standardize", "registration", "template", "run"}
    unknown = set(parser.sections()) - known
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    base = Path(path).resolve().parent
    kw = {}
    try:
        if parser.has_section("paths"):
            p = parser["paths"]
            if "data_root" in p:
                kw["data_root"] = base / p["data_root"]
            if "work_root" in p:
                kw["work_root"] = base / p["work_root"]
        if parser.has_section("labels"):
            labels = dict(DEFAULT_LABELS)
            labels.update({k: int(v) for k, v in parser["labels"].items()})
            kw["labels"] = labels
        if parser.has_section("standardize"):
            s = parser["standardize"]
            kw["percentiles"] = (s.getfloat("percentile_low", 0.5), s.getfloat("percentile_high", 99.5))
            if "target_spacing" in s:
                sp = _floats(s["target_spacing"])
                kw["target_spacing"] = sp * 3 if len(sp) == 1 else sp
        if parser.has_section("template"):
            kw["threshold"] = parser["template"].getfloat("threshold", 0.5)
        if parser.has_section("run"):
            r = parser["run"]
            kw["threads"] = r.getint("threads", 1)
            kw["seed"] = r.getint("seed", 0)
            kw["laterality_source"] = r.get("laterality_source", "manifest")
        reg = dict(parser["registration"]) if parser.has_section("registration") else {}
        if "seed" in kw:
            reg.setdefault("seed", kw["seed"])
        kw["registration"] = RegistrationConfig.from_dict(reg)
    except ValueError as e:
        raise ConfigError(f"{path}: {e}") from None
    return ProjectConfig(**kw)


# ---------------------------------------------------------------- manifest

@dataclass(frozen=True)
class ManifestEntry:
    subject_id: str
    image: Path
    labels: Path
    side: str
    split: str


@dataclass(frozen=True)
class Manifest:
    entries: tuple

    def __post_init__(self):
        ids = [e.subject_id for e in self.entries]
        dup = [k for k, n in Counter(ids).items() if n > 1]
        if dup:
            raise ConfigError(f"duplicate subject ids in manifest: {dup}")

    def split(self, *names: str) -> list:
        return [e for e in self.entries if e.split in names]

    def counts(self) -> dict:
        c = Counter(e.split for e in self.entries)
        return {s: c.get(s, 0) for s in SPLITS}

    def missing_paths(self) -> list:
        """``(subject_id, path)`` pairs whose files do not exist."""
        return [(e.subject_id, p) for e in self.entries for p in (e.image, e.labels) if not p.exists()]


def load_manifest(path, data_root=None) -> Manifest:
    """Read a manifest CSV with columns ``subject_id,image,labels,side,split``."""
    path = Path(path)
    root = Path(data_root) if data_root is not None else path.resolve().parent
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in MANIFEST_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ConfigError(f"{path}: manifest lacks columns {missing}")
        entries = []
        for n, row in enumerate(reader, start=2):
            side, split = row["side"].strip().lower(), row["split"].strip().lower()
            if side not in SIDES:
                raise ConfigError(f"{path}:{n}: side must be left or right, got {row['side']!r}")
            if split not in SPLITS:
                raise ConfigError(f"{path}:{n}: split must be one of {SPLITS}, got {row['split']!r}")
            sid = row["subject_id"].strip()
            if not sid:
                raise ConfigError(f"{path}:{n}: empty subject_id")
            entries.append(ManifestEntry(sid, root / row["image"].strip(), root / row["labels"].strip(), side, split))
    return Manifest(tuple(entries))


def write_manifest(manifest: Manifest, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_COLUMNS)
        for e in manifest.entries:
            w.writerow([e.subject_id, str(e.image), str(e.labels), e.side, e.split])

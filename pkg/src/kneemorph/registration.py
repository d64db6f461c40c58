"""Joint template learning and template-to-subject registration.

Every subject ``i`` owns a stationary velocity field ``v_i``.  Its exponential
``phi_i = exp(v_i)`` maps template-space samples into the subject
(template-to-image) and ``exp(-v_i)`` is the image-to-template inverse.  The
cohort objective is

    sum_i [l1 * sim(T o phi_i, I_i) + l2 * sim(I_i o phi_i^-1, T)] / n
        + l3 * mean_i smooth(v_i) + l4 * centering({v_i})

where ``I_i`` is the masked subject image and ``T`` the template.  Stage 1
optimises ``T`` and all ``v_i`` under MSE; stage 2 freezes ``T`` and refines
the ``v_i`` under LNCC.
"""
from __future__ import annotations

import hashlib
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Sequence

import numpy as np
import torch

from . import nifti
from .errors import CohortTooSmall, Diverged, GridMismatch, NonFinite
from .losses import centering_t, similarity_t, smoothness_t
from .volume import ImageVolume, LabelMap, LabelSchema, mask_image
from .warp import (
    DeformationField,
    VelocityField,
    exp_velocity,
    exponentiate,
    field_from_torch,
    field_to_torch,
    image_to_torch,
    labels_from_probabilities,
    resize_disp,
    resize_image,
    sample,
    warp_probabilities,
)

log = logging.getLogger(__name__)

CARTILAGE = ("FC", "TC")
DIVERGENCE_PATIENCE = 50
CONVERGENCE_WINDOW = 20
MIN_LEVEL_SIZE = 8
MIN_PARAM_SIZE = 16
MIN_LEVEL_ITERS = 2 * CONVERGENCE_WINDOW


@dataclass(frozen=True)
class RegistrationConfig:
    """Loss weights, pyramid schedule and optimiser settings.

    ``lambda4`` applies in stage 1 only; stage 2 uses ``lambda4_stage2``
    (0 by default since the template is frozen there).
    """

    similarity_stage1: str = "mse"
    similarity_stage2: str = "lncc"
    lncc_window_edge: int = 27
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    lambda4: float = 1.0
    lambda4_stage2: float = 0.0
    pyramid_levels: int = 3
    iters_per_level: int = 200
    stage2_iters: int = 200
    step_size: float = 0.05
    template_step_size: float = 0.01
    convergence_rel_tol: float = 1e-5
    squaring_steps: int = 7
    field_resolution_factor: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.lncc_window_edge < 3 or self.lncc_window_edge % 2 == 0:
            raise ValueError("lncc_window_edge must be odd and >= 3")
        if min(self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda4_stage2) < 0:
            raise ValueError("loss weights must be >= 0")
        if self.lambda1 == 0 and self.lambda2 == 0:
            raise ValueError("at least one of lambda1, lambda2 must be > 0")
        if self.step_size <= 0 or self.template_step_size <= 0:
            raise ValueError("step sizes must be > 0")
        if self.pyramid_levels < 1 or self.squaring_steps < 1:
            raise ValueError("pyramid_levels and squaring_steps must be >= 1")
        if not 0 < self.field_resolution_factor <= 1:
            raise ValueError("field_resolution_factor must be in (0, 1]")
        for kind in (self.similarity_stage1, self.similarity_stage2):
            if kind.lower() not in ("mse", "ncc", "lncc"):
                raise ValueError(f"unknown similarity {kind!r}")

    def weights(self, stage: int) -> tuple:
        l4 = self.lambda4 if stage == 1 else self.lambda4_stage2
        return self.lambda1, self.lambda2, self.lambda3, l4

    def similarity(self, stage: int) -> str:
        return (self.similarity_stage1 if stage == 1 else self.similarity_stage2).lower()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RegistrationConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        out = {}
        for k, v in d.items():
            if k not in kinds:
                raise ValueError(f"unknown registration option {k!r}")
            default = getattr(cls, k)
            out[k] = type(default)(v) if not isinstance(v, type(default)) else v
        return cls(**out)


@dataclass(frozen=True, eq=False)
class SubjectEntry:
    id: str
    image: ImageVolume
    labels: LabelMap
    masked_image: ImageVolume
    velocity: VelocityField | None = None
    cartilage: tuple = CARTILAGE

    @classmethod
    def from_volumes(cls, id: str, image: ImageVolume, labels: LabelMap, cartilage=CARTILAGE):
        return cls(id, image, labels, mask_image(image, labels, cartilage), None, tuple(cartilage))

    def with_velocity(self, v: VelocityField | None) -> "SubjectEntry":
        return replace(self, velocity=v)


@dataclass(eq=False)
class TemplateModel:
    image: ImageVolume
    probabilities: dict
    mask: LabelMap
    threshold: float
    n_train: int
    config: RegistrationConfig
    history: list = field(default_factory=list)
    info: dict = field(default_factory=dict)

    @classmethod
    def from_volumes(cls, image: ImageVolume, mask: LabelMap, config: RegistrationConfig = None,
                     threshold: float = 0.5) -> "TemplateModel":
        """Wrap a known image and mask, with one-hot probability maps."""
        if not image.same_grid(mask):
            raise GridMismatch("template image and mask differ in grid")
        probs = {mask.schema.name(v): (mask.data == v).astype(np.float64) for v in mask.present()}
        return cls(image, probs, mask, threshold, 1, config or RegistrationConfig())

    def save(self, directory) -> None:
        """Write image, per-label probability maps, mask and ``metadata.txt``."""
        os.makedirs(directory, exist_ok=True)
        nifti.write_volume(self.image, os.path.join(directory, "template.nii.gz"))
        nifti.write_volume(self.mask, os.path.join(directory, "mask.nii.gz"))
        for name, p in self.probabilities.items():
            nifti.write_array(np.asarray(p, dtype=np.float32), self.image.affine,
                              os.path.join(directory, f"prob_{name}.nii.gz"), descrip=f"P {name}")
        lines = [
            f"threshold = {self.threshold!r}",
            f"n_train = {self.n_train}",
            "labels = " + ",".join(f"{k}:{v}" for k, v in self.mask.schema.labels.items()),
            "probability_maps = " + ",".join(self.probabilities),
        ]
        lines += [f"info.{k} = {v}" for k, v in sorted(self.info.items())]
        lines += [f"config.{k} = {v!r}" for k, v in self.config.to_dict().items()]
        with open(os.path.join(directory, "metadata.txt"), "w") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, directory) -> "TemplateModel":
        meta = {}
        with open(os.path.join(directory, "metadata.txt")) as fh:
            for line in fh:
                if "=" in line:
                    k, v = line.split("=", 1)
                    meta[k.strip()] = v.strip()
        schema = LabelSchema({k: int(v) for k, v in (kv.split(":") for kv in meta["labels"].split(","))})
        image, _ = nifti.read_volume(os.path.join(directory, "template.nii.gz"))
        mask, _ = nifti.read_labels(os.path.join(directory, "mask.nii.gz"), schema)
        probs = {}
        for name in filter(None, meta.get("probability_maps", "").split(",")):
            data, _, _ = nifti.read_array(os.path.join(directory, f"prob_{name}.nii.gz"))
            probs[name] = data.astype(np.float64)
        cfg = {k[len("config."):]: _literal(v) for k, v in meta.items() if k.startswith("config.")}
        info = {k[len("info."):]: v for k, v in meta.items() if k.startswith("info.")}
        return cls(image, probs, mask, float(meta["threshold"]), int(meta["n_train"]),
                   RegistrationConfig.from_dict(cfg), [], info)


def _literal(text: str):
    import ast

    return ast.literal_eval(text)


# ------------------------------------------------------------- objective

def _level_shapes(shape, levels: int) -> list:
    """Grid shapes from coarsest to finest; coarse levels below 8 voxels are skipped."""
    out = []
    for lvl in reversed(range(levels)):
        s = tuple(int(np.ceil(n / 2**lvl)) for n in shape)
        if lvl > 0 and min(s) < MIN_LEVEL_SIZE:
            continue
        out.append(s)
    return out


def _param_shape(shape, factor: float) -> tuple:
    """Velocity grid for a level: ``factor`` times the level grid, but never below 16 voxels per axis
    (or the level extent when that is smaller), so coarse levels keep their resolution."""
    return tuple(max(min(n, MIN_PARAM_SIZE), int(np.ceil(n * factor - 1e-9))) for n in shape)


def _exp_pair(v_param, shape, steps):
    """``exp(v)`` and ``exp(-v)`` stacked on the batch axis, on the working grid.

    The flow is computed on the parameter grid and the displacements are then
    resized, so a coarse ``field_resolution_factor`` also makes this cheaper.
    """
    both = exp_velocity(torch.cat([v_param, -v_param]), steps)
    if tuple(both.shape[2:]) != tuple(shape):
        both = resize_disp(both, shape)
    return both


def _subject_objective(template, masked, v_param, shape, cfg, stage, n, weights):
    """One subject's share of the cohort objective (centering excluded)."""
    l1, l2, l3, _ = weights
    kind = cfg.similarity(stage)
    edge = cfg.lncc_window_edge
    value = template.new_zeros(())
    if l1 or l2:
        both = _exp_pair(v_param, shape, cfg.squaring_steps)
        if l1:
            value = value + l1 * similarity_t(kind, sample(template, both[:1]), masked, edge)[0]
        if l2:
            value = value + l2 * similarity_t(kind, sample(masked, both[1:]), template, edge)[0]
        value = value / n
    if l3:
        value = value + l3 * smoothness_t(v_param)[0] / n
    return value


def _evaluate(template, masked, v_params, shape, cfg, stage, template_grad, need_grad=True, workers=1,
              weights=None):
    """Objective value and gradients, reduced over subjects in list order."""
    n = len(v_params)
    weights = cfg.weights(stage) if weights is None else tuple(float(w) for w in weights)
    if len(weights) != 4 or min(weights) < 0:
        raise ValueError("weights must be four non-negative numbers")
    l4 = weights[3]

    def one(i):
        with torch.enable_grad():
            v = v_params[i].detach().requires_grad_(need_grad)
            t = template.detach().requires_grad_(need_grad and template_grad)
            val = _subject_objective(t, masked[i], v, shape, cfg, stage, n, weights)
            if not need_grad:
                return val.detach(), None, None
            inputs = [v, t] if template_grad else [v]
            if val.requires_grad:
                grads = torch.autograd.grad(val, inputs, allow_unused=True)
                grads = [torch.zeros_like(x) if g is None else g for g, x in zip(grads, inputs)]
            else:
                grads = [torch.zeros_like(x) for x in inputs]
            return val.detach(), grads[0], grads[1] if template_grad else None

    if workers > 1 and n > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, range(n)))
    else:
        results = [one(i) for i in range(n)]

    total = template.new_zeros(())
    for val, _, _ in results:
        total = total + val
    gv = [r[1] for r in results]
    gt = None
    if need_grad and template_grad:
        gt = torch.zeros_like(template)
        for r in results:
            gt = gt + r[2]
    if l4:
        with torch.enable_grad():
            vs = torch.cat([v.detach() for v in v_params]).requires_grad_(need_grad)
            c = l4 * centering_t(vs)
            if need_grad:
                (gc,) = torch.autograd.grad(c, [vs])
                gv = [g + gc[i : i + 1] for i, g in enumerate(gv)]
        total = total + c.detach()
    return total, gt, gv


def _cohort_arrays(template, subjects):
    ordered = sorted(subjects, key=lambda s: s.id)
    masked = [image_to_torch(s.masked_image.data) for s in ordered]
    vs = []
    for s in ordered:
        if s.velocity is None:
            vs.append(torch.zeros((1, 3) + s.masked_image.shape, dtype=torch.float64))
        else:
            vs.append(s.velocity.to_torch())
    t = image_to_torch(template.data)
    for s in ordered:
        if s.masked_image.shape != template.shape:
            raise GridMismatch(f"subject {s.id} grid {s.masked_image.shape} != template {template.shape}")
    return ordered, t, masked, vs


def total_loss(template: ImageVolume, subjects: Sequence[SubjectEntry], cfg: RegistrationConfig, stage: int,
               weights=None) -> float:
    """Cohort objective at the subjects' current velocities (zero when unset).

    ``weights`` overrides ``(l1, l2, l3, l4)`` from ``cfg``, e.g. to isolate a
    single term.
    """
    _, t, masked, vs = _cohort_arrays(template, subjects)
    with torch.no_grad():
        val, _, _ = _evaluate(t, masked, vs, t.shape[2:], cfg, stage, False, need_grad=False, weights=weights)
    return float(val)


def total_loss_arrays(template: np.ndarray, masked: Sequence[np.ndarray], velocities: Sequence[np.ndarray],
                      cfg: RegistrationConfig, stage: int, weights=None) -> float:
    """Float64 array form of :func:`total_loss`; velocities are (X, Y, Z, 3)."""
    t = image_to_torch(template)
    m = [image_to_torch(a) for a in masked]
    vs = [field_to_torch(v) for v in velocities]
    with torch.no_grad():
        val, _, _ = _evaluate(t, m, vs, t.shape[2:], cfg, stage, False, need_grad=False, weights=weights)
    return float(val)


def grad_total_loss_arrays(template: np.ndarray, masked: Sequence[np.ndarray], velocities: Sequence[np.ndarray],
                           cfg: RegistrationConfig, stage: int, workers: int = 1, weights=None):
    """Exact gradient of :func:`total_loss_arrays`.

    Returns ``(template_grad, [velocity_grad, ...])``; the template gradient
    is ``None`` in stage 2, where the template is frozen.
    """
    t = image_to_torch(template)
    m = [image_to_torch(a) for a in masked]
    vs = [field_to_torch(v) for v in velocities]
    _, gt, gv = _evaluate(t, m, vs, t.shape[2:], cfg, stage, stage == 1, workers=workers, weights=weights)
    for g in gv + ([gt] if gt is not None else []):
        if not torch.isfinite(g).all():
            raise NonFinite("gradient overflowed")
    return (None if gt is None else gt[0, 0].numpy()), [field_from_torch(g) for g in gv]


def grad_total_loss(template: ImageVolume, subjects: Sequence[SubjectEntry], cfg: RegistrationConfig, stage: int,
                    workers: int = 1, weights=None):
    """Gradients w.r.t. template voxels (stage 1) and each velocity, subjects ordered by id."""
    ordered = sorted(subjects, key=lambda s: s.id)
    vel = [np.zeros(s.masked_image.shape + (3,)) if s.velocity is None else s.velocity.data for s in ordered]
    return grad_total_loss_arrays(np.asarray(template.data, dtype=np.float64),
                                  [np.asarray(s.masked_image.data, dtype=np.float64) for s in ordered],
                                  vel, cfg, stage, workers, weights)


# ------------------------------------------------------------- optimiser

def _optimize_level(template, masked, v_params, shape, cfg, stage, learn_t, iters, history, level, workers):
    """Adam on the velocities (and template when ``learn_t``); returns the best iterate."""
    v_leaf = [v.detach().clone().requires_grad_(True) for v in v_params]
    groups = [{"params": v_leaf, "lr": cfg.step_size}]
    t_leaf = template.detach().clone()
    if learn_t:
        t_leaf.requires_grad_(True)
        groups.append({"params": [t_leaf], "lr": cfg.template_step_size})
    opt = torch.optim.Adam(groups)
    kind = cfg.similarity(stage)
    best = np.inf
    best_state = ([v.detach().clone() for v in v_leaf], t_leaf.detach().clone())
    best_trace = []
    prev = np.inf
    rising = 0
    for it in range(iters):
        loss, gt, gv = _evaluate(t_leaf, masked, v_leaf, shape, cfg, stage, learn_t, workers=workers)
        loss = float(loss)
        if not np.isfinite(loss):
            raise Diverged(f"non-finite loss at stage {stage} level {level} iteration {it}")
        history.append({"stage": stage, "level": level, "iteration": it, "loss": loss, "kernel": kind})
        if loss < best:
            best = loss
            best_state = ([v.detach().clone() for v in v_leaf], t_leaf.detach().clone())
        best_trace.append(best)
        rising = rising + 1 if loss > prev else 0
        if rising >= DIVERGENCE_PATIENCE:
            raise Diverged(f"loss rose for {rising} consecutive steps (stage {stage}, level {level})")
        prev = loss
        if it >= MIN_LEVEL_ITERS:
            ref = best_trace[-CONVERGENCE_WINDOW - 1]
            if ref - best <= cfg.convergence_rel_tol * abs(ref):
                break
        grads = gv + ([gt] if learn_t else [])
        if not any(bool(g.any()) for g in grads):
            break  # exact stationary point: Adam would leave every parameter unchanged
        for p, g in zip(v_leaf, gv):
            p.grad = g
        if learn_t:
            t_leaf.grad = gt
        opt.step()
    return best_state[0], best_state[1]


def _check_cohort(subjects):
    if len(subjects) < 2:
        raise CohortTooSmall(f"template learning needs at least 2 subjects, got {len(subjects)}")
    ids = [s.id for s in subjects]
    if len(set(ids)) != len(ids):
        raise ValueError("subject ids must be unique")
    shape = subjects[0].masked_image.shape
    spacing = subjects[0].masked_image.spacing
    for s in subjects:
        if s.masked_image.shape != shape or not np.allclose(s.masked_image.spacing, spacing, rtol=1e-4):
            raise GridMismatch(f"subject {s.id} is not on the common working grid")


def _warped_mean(masked, v_params, shape, cfg):
    with torch.no_grad():
        acc = None
        for m, v in zip(masked, v_params):
            w = sample(m, _exp_pair(v, shape, cfg.squaring_steps)[1:])
            acc = w if acc is None else acc + w
        return acc / len(masked)


def run_stage1(subjects: Sequence[SubjectEntry], cfg: RegistrationConfig, history=None, workers: int = 1):
    """Learn template and velocities under the stage-1 similarity over the pyramid.

    Returns ``(template tensor (1, 1, X, Y, Z), [velocity params])`` for the
    subjects in id order.
    """
    history = [] if history is None else history
    ordered = sorted(subjects, key=lambda s: s.id)
    full = [image_to_torch(s.masked_image.data) for s in ordered]
    shape = ordered[0].masked_image.shape
    v_params = None
    template = None
    for level, s in zip(range(len(_level_shapes(shape, cfg.pyramid_levels)) - 1, -1, -1),
                        _level_shapes(shape, cfg.pyramid_levels)):
        masked = [resize_image(m, s) for m in full]
        pshape = _param_shape(s, cfg.field_resolution_factor)
        if v_params is None:
            v_params = [torch.zeros((1, 3) + pshape, dtype=torch.float64) for _ in ordered]
        else:
            v_params = [resize_disp(v, pshape) for v in v_params]
        template = _warped_mean(masked, v_params, s, cfg)
        v_params, template = _optimize_level(template, masked, v_params, s, cfg, 1, True,
                                             cfg.iters_per_level, history, level, workers)
        log.info("stage 1 level %d %s: loss %.6g", level, s, history[-1]["loss"])
    return template, v_params


def run_stage2(template: ImageVolume, subjects: Sequence[SubjectEntry], v_params, cfg: RegistrationConfig,
               history=None, workers: int = 1):
    """Refine velocities against a frozen template under the stage-2 similarity."""
    history = [] if history is None else history
    ordered = sorted(subjects, key=lambda s: s.id)
    masked = [image_to_torch(s.masked_image.data) for s in ordered]
    t = image_to_torch(template.data)
    shape = template.shape
    pshape = _param_shape(shape, cfg.field_resolution_factor)
    v_params = [resize_disp(v, pshape) for v in v_params]
    v_params, _ = _optimize_level(t, masked, v_params, shape, cfg, 2, False, cfg.stage2_iters, history, 0, workers)
    return v_params


def _velocity_field(v_param, shape, affine, cfg) -> VelocityField:
    with torch.no_grad():
        v = resize_disp(v_param, shape)
    return VelocityField(field_from_torch(v), affine, cfg.squaring_steps)


def _deformations(v_param, shape, affine, cfg):
    with torch.no_grad():
        both = _exp_pair(v_param, shape, cfg.squaring_steps)
    return DeformationField(field_from_torch(both[:1]), affine), DeformationField(field_from_torch(both[1:]), affine)


def _sha(a: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(a).tobytes()).hexdigest()


def learn_template(subjects: Sequence[SubjectEntry], cfg: RegistrationConfig = RegistrationConfig(),
                   threshold: float = 0.5, workers: int = 1):
    """Two-stage joint template learning.

    Returns ``(TemplateModel, {subject_id: VelocityField})``.  The template
    image is produced by stage 1 and left untouched by stage 2.
    """
    subjects = list(subjects)
    _check_cohort(subjects)
    torch.manual_seed(cfg.seed)
    ordered = sorted(subjects, key=lambda s: s.id)
    ref = ordered[0].masked_image
    history: list = []
    t1, v_params = run_stage1(ordered, cfg, history, workers)
    template = ImageVolume(t1[0, 0].numpy(), ref.affine)
    stage1_sha = _sha(template.data)
    v_params = run_stage2(template, ordered, v_params, cfg, history, workers)
    if _sha(template.data) != stage1_sha:
        raise AssertionError("stage 2 modified the template")
    velocities = {s.id: _velocity_field(v, ref.shape, ref.affine, cfg) for s, v in zip(ordered, v_params)}
    inverses = [_deformations(v, ref.shape, ref.affine, cfg)[1] for v in v_params]
    names = ordered[0].cartilage
    probs, mask = build_template_mask(ordered, inverses, threshold, names)
    info = {"stage1_template_sha256": stage1_sha, "template_sha256": _sha(template.data)}
    model = TemplateModel(template, probs, mask, threshold, len(ordered), cfg, history, info)
    return model, velocities


def build_template_mask(subjects: Sequence[SubjectEntry], inverse_fields: Sequence[DeformationField],
                        threshold: float = 0.5, names=None):
    """Average warped label indicators into per-label probabilities, then threshold.

    ``inverse_fields[i]`` must be the image-to-template field of
    ``subjects[i]``.  A voxel takes the label with the largest probability when
    that probability is >= ``threshold``; otherwise it is background.
    """
    subjects = list(subjects)
    if len(subjects) != len(inverse_fields) or not subjects:
        raise ValueError("need one inverse field per subject")
    schema = subjects[0].labels.schema
    if names is None:
        values = sorted(set().union(*[set(s.labels.present()) for s in subjects]))
    else:
        values = sorted(schema.value(n) for n in names)
    acc = np.zeros((len(values),) + subjects[0].labels.shape)
    for s, f in zip(subjects, inverse_fields):
        if not s.labels.same_grid(f):
            raise GridMismatch(f"labels of {s.id} and its field differ in grid")
        _, p = warp_probabilities(s.labels, f, values)
        acc += p
    acc /= len(subjects)
    mask = LabelMap(labels_from_probabilities(values, acc, threshold), subjects[0].labels.affine, schema)
    probs = {schema.name(v): acc[k] for k, v in enumerate(values)}
    return probs, mask


# ---------------------------------------------------------- registration

def _register_params(model_image: ImageVolume, target: ImageVolume, cfg: RegistrationConfig, history):
    if target.shape != model_image.shape:
        raise GridMismatch(f"target grid {target.shape} != template grid {model_image.shape}")
    history = [] if history is None else history
    torch.manual_seed(cfg.seed)
    t_full = image_to_torch(model_image.data)
    m_full = image_to_torch(target.data)
    shapes = _level_shapes(model_image.shape, cfg.pyramid_levels)
    v = None
    for level, s in zip(range(len(shapes) - 1, -1, -1), shapes):
        pshape = _param_shape(s, cfg.field_resolution_factor)
        v = torch.zeros((1, 3) + pshape, dtype=torch.float64) if v is None else resize_disp(v, pshape)
        iters = cfg.stage2_iters if s == tuple(model_image.shape) else cfg.iters_per_level
        (v,), _ = _optimize_level(resize_image(t_full, s), [resize_image(m_full, s)], [v], s, cfg, 2, False,
                                  iters, history, level, 1)
    return v


def register_velocity(model_image: ImageVolume, target: ImageVolume, cfg: RegistrationConfig,
                      history=None) -> VelocityField:
    """Optimise a fresh velocity field against a frozen template (stage-2 objective).

    The result is resized to the template grid.
    """
    v = _register_params(model_image, target, cfg, history)
    return _velocity_field(v, model_image.shape, model_image.affine, cfg)


def register_to_template(model: TemplateModel, target: ImageVolume, cfg: RegistrationConfig | None = None,
                         history=None):
    """Template-to-image registration; returns ``(phi, phi_inverse)``.

    ``phi`` pulls template-space data into the target: the warped template
    mask is ``warp_mask(model.mask, phi)``.
    """
    cfg = model.config if cfg is None else cfg
    v = _register_params(model.image, target, cfg, history)
    return _deformations(v, model.image.shape, model.image.affine, cfg)

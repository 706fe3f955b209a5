"""Teacher pretraining and student distillation.

Both loops share :func:`fit`: shuffled mini-batches, warmup + cosine learning
rate, SGD with momentum, per-epoch validation, best-checkpoint retention and
optional early stopping on validation mAP50.
"""

import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import __version__
from . import detector as det_mod
from . import evalkit
from . import losses as L
from . import numcore as nc

log = logging.getLogger(__name__)

LOSS_KEYS = ("obj", "cls", "loc_sup", "loc_kd")


class DivergenceError(RuntimeError):
    pass


@dataclass
class ScheduleConfig:
    warmup_epochs: int = 3
    total_epochs: int = 40
    lr_start: float = 0.002
    lr_peak: float = 0.02
    lr_final: float = 0.0002
    steps_per_epoch: int = 1

    def __post_init__(self):
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError(f"need 0 <= warmup_epochs < total_epochs, got {self.warmup_epochs}, {self.total_epochs}")
        if self.lr_final > self.lr_peak:
            raise ValueError("lr_final must not exceed lr_peak")
        if min(self.lr_start, self.lr_peak, self.lr_final) <= 0 or self.steps_per_epoch < 1:
            raise ValueError("learning rates and steps_per_epoch must be positive")

    @property
    def total_steps(self):
        return self.total_epochs * self.steps_per_epoch


def lr_at(global_step, sched):
    """Linear warmup from lr_start to lr_peak, then cosine down to lr_final."""
    if not 0 <= global_step < sched.total_steps:
        raise ValueError(f"step {global_step} outside [0, {sched.total_steps})")
    warm = sched.warmup_epochs * sched.steps_per_epoch
    if global_step < warm:
        return sched.lr_start + (sched.lr_peak - sched.lr_start) * global_step / warm
    span = sched.total_steps - 1 - warm
    progress = 1.0 if span == 0 else (global_step - warm) / span
    return sched.lr_final + 0.5 * (sched.lr_peak - sched.lr_final) * (1.0 + math.cos(math.pi * progress))


def sgd_step(params, grads, lr, momentum, velocity):
    """v <- momentum*v + g; p <- p - lr*v. ``velocity`` is a list updated in place."""
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter shape {p.data.shape}")
        v = g if velocity[i] is None else momentum * velocity[i] + g
        velocity[i] = v
        p.data = p.data - lr * v


def clip_grad_norm(grads, max_norm):
    """Scale ``grads`` so their joint L2 norm is at most ``max_norm``.

    Returns ``(grads, norm_before)``; ``max_norm <= 0`` disables clipping.
    """
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads if g is not None))
    if max_norm <= 0 or norm <= max_norm:
        return grads, norm
    f = max_norm / norm
    return [None if g is None else g * f for g in grads], norm


@dataclass
class EarlyStopConfig:
    patience: int = 8
    min_delta: float = 0.0

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.min_delta < 0:
            raise ValueError("min_delta must be nonnegative")


class EarlyStopper:
    def __init__(self, config):
        self.config = config
        self.best = -math.inf
        self.best_epoch = None
        self.bad_epochs = 0

    def update(self, epoch, value):
        """Record a validation value; returns True when training should stop."""
        if value > self.best + self.config.min_delta or self.best_epoch is None:
            self.best = value
            self.best_epoch = epoch
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.config.patience


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss_total: float
    loss_obj: float
    loss_cls: float
    loss_loc_sup: float
    loss_loc_kd: float
    val_precision: float
    val_recall: float
    val_map50: float
    val_map50_95: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    best_epoch: int = None
    stopped_early: bool = False

    def __len__(self):
        return len(self.records)

    def column(self, name):
        return [getattr(r, name) for r in self.records]


@dataclass
class TrainConfig:
    batch_size: int = 8
    momentum: float = 0.9
    conf_threshold: float = 0.01
    nms_iou: float = 0.5
    pr_score_threshold: float = 0.25
    grad_clip: float = 5.0  # global L2 norm; 0 disables


# ---------------------------------------------------------------- data


class PreparedData:
    """Images stacked into one array plus flattened per-cell targets."""

    def __init__(self, scenes, config, distill):
        self.scenes = list(scenes)
        if not self.scenes:
            raise ValueError("empty dataset")
        self.images = np.stack([s.image for s in self.scenes])
        _, _, h, w = self.images.shape
        self.scales = config.grid_scales(h, w)
        self.ground_truth = [s.annotations for s in self.scenes]
        per = {k: [[] for _ in self.scales] for k in ("pos", "ycls", "yobj", "edges", "w")}
        for s in self.scenes:
            at = L.assign_targets(s.annotations, self.scales)
            rw = L.region_weights([b for b, _ in s.annotations], self.scales, distill.elr_radius, distill.elr_decay)
            for k in range(len(self.scales)):
                per["pos"][k].append(at.positive[k].ravel())
                per["ycls"][k].append(at.y_cls[k].ravel())
                per["yobj"][k].append(at.y_obj[k].ravel())
                per["edges"][k].append(at.edges[k].reshape(-1, 4))
                per["w"][k].append(rw.grids[k].ravel())
        self.targets = {key: [np.stack(v) for v in lists] for key, lists in per.items()}

    def __len__(self):
        return len(self.scenes)

    def batch_targets(self, idx):
        return {key: np.concatenate([a[idx].reshape((-1,) + a.shape[2:]) for a in arrs]) for key, arrs in self.targets.items()}


def teacher_cells(teacher, data, chunk=32):
    """Frozen teacher outputs per image, flattened like the student's cells.

    Returns per-scale arrays ``cls [S, HW, C]``, ``obj [S, HW]``, ``edges [S, HW, 4, n]``.
    """
    cls_s, obj_s, edge_s = [], [], []
    with nc.no_grad():
        for start in range(0, len(data), chunk):
            out = teacher.forward(data.images[start : start + chunk])
            cls_s.append([lv.cls_logits.data for lv in out.levels])
            obj_s.append([lv.obj_logits.data for lv in out.levels])
            edge_s.append([lv.edge_logits.data for lv in out.levels])
    res = {}
    for key, parts in (("cls", cls_s), ("obj", obj_s), ("edges", edge_s)):
        per_scale = [np.concatenate([p[k] for p in parts]) for k in range(len(parts[0]))]
        res[key] = [a.reshape((a.shape[0], a.shape[1] * a.shape[2]) + a.shape[3:]) for a in per_scale]
    return res


def _gather_teacher(tc, idx):
    def cat(key):
        return np.concatenate([a[idx].reshape((-1,) + a.shape[2:]) for a in tc[key]])

    return cat("cls"), cat("obj"), cat("edges")


# ---------------------------------------------------------------- loss


def batch_loss(out, tg, distill, lattice, teacher=None):
    """Total loss of a batch (mean of per-image losses) and its parts."""
    cls, obj, edges = det_mod.flatten_cells(out)
    groups = det_mod.cell_groups(out)
    t_cls = t_obj = t_edges = None
    if teacher is not None:
        t_cls, t_obj_logits, t_edges = teacher
        t_obj = det_mod._sigmoid(t_obj_logits)
    parts = {
        "obj": L.obj_distill_loss(nc.sigmoid(obj), tg["yobj"], t_obj, distill.epsilon),
        "cls": L.cls_distill_loss(cls, t_cls, tg["ycls"], tg["w"], distill.gamma, distill.T, groups),
        "loc_sup": L.loc_supervised_loss(edges, tg["edges"], tg["pos"], lattice, groups),
        "loc_kd": None,
    }
    if distill.lambda_loc_kd > 0:
        parts["loc_kd"] = L.loc_distill_loss(edges, t_edges, tg["w"], distill.T, groups)
    return L.total_loss(parts, distill), parts


# ---------------------------------------------------------------- evaluation


def predict_batch(model, images, conf_threshold, nms_iou, chunk=64):
    scales = model.config.grid_scales(images.shape[2], images.shape[3])
    preds = []
    with nc.no_grad():
        for start in range(0, len(images), chunk):
            out = model.forward(images[start : start + chunk])
            for i in range(out.n_images):
                dets = det_mod.decode_predictions(out, scales, conf_threshold, image=i, lattice=model.config.lattice)
                preds.append(det_mod.nms(dets, nms_iou))
    return preds


def evaluate_model(model, data, train_cfg):
    preds = predict_batch(model, data.images, train_cfg.conf_threshold, train_cfg.nms_iou)
    return evalkit.evaluate(
        preds, data.ground_truth, model.config.classes, score_threshold=train_cfg.pr_score_threshold
    )


# ---------------------------------------------------------------- loop


def fit(
    model,
    train,
    val,
    distill,
    sched,
    seed,
    train_cfg=None,
    teacher=None,
    early=None,
    ckpt_path=None,
    evaluator=None,
    ckpt_meta=None,
    on_epoch=None,
):
    """Train ``model`` in place; returns the TrainHistory.

    ``evaluator(model, epoch)`` replaces validation (must return an EvalReport).
    The best-by-validation-mAP50 parameters are saved to ``ckpt_path`` and
    restored into ``model`` at the end.
    """
    train_cfg = train_cfg or TrainConfig()
    rng = np.random.default_rng(seed)
    n = len(train)
    bs = train_cfg.batch_size
    steps = math.ceil(n / bs)
    sched = ScheduleConfig(**{**asdict(sched), "steps_per_epoch": steps})
    params = model.parameters()
    velocity = [None] * len(params)
    lattice = model.config.lattice
    tcells = teacher_cells(teacher, train) if (teacher is not None and distill.uses_teacher) else None
    stopper = EarlyStopper(early) if early else None
    history = TrainHistory()
    best_val, best_params = -math.inf, None
    step = 0
    for epoch in range(sched.total_epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        sums = dict.fromkeys(("total",) + LOSS_KEYS, 0.0)
        lr = None
        for b in range(steps):
            idx = order[b * bs : (b + 1) * bs]
            lr = lr_at(step, sched)
            model.zero_grad()
            out = model.forward(train.images[idx])
            tbatch = _gather_teacher(tcells, idx) if tcells is not None else None
            total, parts = batch_loss(out, train.batch_targets(idx), distill, lattice, tbatch)
            value = total.item()
            if not math.isfinite(value):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, step {step}")
            nc.backward(total)
            grads, _ = clip_grad_norm([p.grad for p in params], train_cfg.grad_clip)
            sgd_step(params, grads, lr, train_cfg.momentum, velocity)
            sums["total"] += value
            for k in LOSS_KEYS:
                if parts[k] is not None:
                    sums[k] += parts[k].item()
            step += 1
        report = evaluator(model, epoch) if evaluator else evaluate_model(model, val, train_cfg)
        history.records.append(
            EpochRecord(
                epoch=epoch,
                lr=lr,
                loss_total=sums["total"] / steps,
                loss_obj=sums["obj"] / steps,
                loss_cls=sums["cls"] / steps,
                loss_loc_sup=sums["loc_sup"] / steps,
                loss_loc_kd=sums["loc_kd"] / steps,
                val_precision=report.precision,
                val_recall=report.recall,
                val_map50=report.map50,
                val_map50_95=report.map50_95,
            )
        )
        if report.map50 > best_val:
            best_val = report.map50
            history.best_epoch = epoch
            best_params = [p.data.copy() for p in params]
        log.info(
            "%s epoch %d loss %.4f val mAP50 %.4f mAP50-95 %.4f (%.1fs)",
            model.config.name, epoch, sums["total"] / steps, report.map50, report.map50_95, time.perf_counter() - t0,
        )
        if on_epoch:
            on_epoch(history)
        if stopper and stopper.update(epoch, report.map50):
            history.stopped_early = True
            break
    for p, data in zip(params, best_params):
        p.data = data
    model.zero_grad()
    if ckpt_path:
        meta = {"best_epoch": history.best_epoch, "val_map50": best_val, **(ckpt_meta or {})}
        det_mod.save_checkpoint(ckpt_path, model, meta)
    return history


def train_teacher(
    train_scenes, val_scenes, config=None, sched=None, seed=0, train_cfg=None, distill=None, ckpt_path=None, early=None
):
    """Supervised training of the large model. Returns ``(model, history)``."""
    config = config or det_mod.DetectorConfig.teacher()
    distill = distill or L.DistillConfig.supervised()
    if distill.uses_teacher:
        raise ValueError("teacher training uses the supervised objective only")
    model = det_mod.build(config, seed)
    train = PreparedData(train_scenes, config, distill)
    val = PreparedData(val_scenes, config, distill)
    history = fit(model, train, val, distill, sched or ScheduleConfig(), seed, train_cfg, early=early,
                  ckpt_path=ckpt_path, ckpt_meta={"role": "teacher"})
    return model, history


def check_compatible(teacher_cfg, student_cfg):
    if (teacher_cfg.classes, teacher_cfg.bins, teacher_cfg.scales) != (
        student_cfg.classes,
        student_cfg.bins,
        student_cfg.scales,
    ):
        raise ValueError(
            "teacher/student head shapes differ: "
            f"teacher (C={teacher_cfg.classes}, n={teacher_cfg.bins}, scales={teacher_cfg.scales}) vs "
            f"student (C={student_cfg.classes}, n={student_cfg.bins}, scales={student_cfg.scales})"
        )


def distill_student(
    teacher,
    student_config,
    distill,
    train_scenes,
    val_scenes,
    sched=None,
    early=None,
    seed=0,
    train_cfg=None,
    ckpt_path=None,
    evaluator=None,
):
    """Train a student against a frozen teacher. ``teacher`` is a Detector or a
    checkpoint path. Returns ``(model, history)``."""
    if isinstance(teacher, (str, os.PathLike)):
        teacher, _ = det_mod.load_checkpoint(teacher, requires_grad=False)
    teacher.freeze()
    check_compatible(teacher.config, student_config)
    model = det_mod.build(student_config, seed)
    train = PreparedData(train_scenes, student_config, distill)
    val = PreparedData(val_scenes, student_config, distill) if evaluator is None else None
    meta = {"role": "student", "distill": distill.as_dict()}
    history = fit(model, train, val, distill, sched or ScheduleConfig(), seed, train_cfg, teacher=teacher,
                  early=early, ckpt_path=ckpt_path, evaluator=evaluator, ckpt_meta=meta)
    return model, history


def train_baseline(student_config, train_scenes, val_scenes, sched=None, early=None, seed=0, train_cfg=None,
                   ckpt_path=None, distill=None, evaluator=None):
    """Student trained on ground truth only (the non-distilled objective)."""
    base = distill or L.DistillConfig()
    supervised = L.DistillConfig.supervised(elr_radius=base.elr_radius, elr_decay=base.elr_decay)
    model = det_mod.build(student_config, seed)
    train = PreparedData(train_scenes, student_config, supervised)
    val = PreparedData(val_scenes, student_config, supervised) if evaluator is None else None
    meta = {"role": "baseline", "distill": supervised.as_dict()}
    history = fit(model, train, val, supervised, sched or ScheduleConfig(), seed, train_cfg, early=early,
                  ckpt_path=ckpt_path, evaluator=evaluator, ckpt_meta=meta)
    return model, history


# ---------------------------------------------------------------- config files


@dataclass
class RunConfig:
    """Everything a run reads from a ``key = value`` file."""

    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    distill: L.DistillConfig = field(default_factory=L.DistillConfig)
    early: EarlyStopConfig = field(default_factory=EarlyStopConfig)
    teacher_width: int = 24
    teacher_depth: int = 2
    student_width: int = 8
    student_depth: int = 1
    bins: int = 8

    def flat(self):
        out = {}
        for sect in ("schedule", "train", "distill", "early"):
            out.update(asdict(getattr(self, sect)))
        out.pop("steps_per_epoch", None)
        for f in ("teacher_width", "teacher_depth", "student_width", "student_depth", "bins"):
            out[f] = getattr(self, f)
        return out

    def teacher_config(self, classes):
        return det_mod.DetectorConfig(self.teacher_width, self.teacher_depth, classes=classes, bins=self.bins,
                                      name="teacher")

    def student_config(self, classes, name="student"):
        return det_mod.DetectorConfig(self.student_width, self.student_depth, classes=classes, bins=self.bins,
                                      name=name)


def _section_keys():
    keys = {}
    for sect, cls in (("schedule", ScheduleConfig), ("train", TrainConfig), ("distill", L.DistillConfig),
                      ("early", EarlyStopConfig)):
        for f in fields(cls):
            if f.name != "steps_per_epoch":
                keys[f.name] = (sect, f.type if isinstance(f.type, type) else type(f.default))
    for f in ("teacher_width", "teacher_depth", "student_width", "student_depth", "bins"):
        keys[f] = (None, int)
    return keys


CONFIG_KEYS = _section_keys()


def parse_config(text, base=None, source="<config>"):
    """Apply ``key = value`` lines (``#`` comments allowed) on top of ``base``."""
    values = (base or RunConfig()).flat()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (t.strip() for t in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ValueError(f"{source}:{lineno}: unknown key {key!r}")
        typ = CONFIG_KEYS[key][1]
        try:
            values[key] = typ(value)
        except ValueError:
            raise ValueError(f"{source}:{lineno}: bad value {value!r} for {key}") from None
    return config_from_flat(values)


def config_from_flat(values):
    sections = {"schedule": {}, "train": {}, "distill": {}, "early": {}}
    top = {}
    for key, value in values.items():
        sect = CONFIG_KEYS[key][0]
        (sections[sect] if sect else top)[key] = value
    return RunConfig(
        schedule=ScheduleConfig(**sections["schedule"]),
        train=TrainConfig(**sections["train"]),
        distill=L.DistillConfig(**sections["distill"]),
        early=EarlyStopConfig(**sections["early"]),
        **top,
    )


def load_config(path):
    with open(path) as fh:
        return parse_config(fh.read(), source=path)


def write_run_meta(path, values):
    """``key = value`` lines, sorted, plus the code version."""
    values = {**values, "code_version": __version__}
    with open(path, "w") as fh:
        for k in sorted(values):
            fh.write(f"{k} = {values[k]}\n")

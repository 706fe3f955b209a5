"""Distillation losses, region weighting and target assignment.

Loss inputs are flattened per cell: classification logits ``[M, C]``,
objectness ``[M]`` and edge logits ``[M, 4, n]``, where ``M`` runs over every
cell of every scale. Weighted losses are normalized by the sum of the cell
weights. Passing ``groups`` (the sample index of each cell) normalizes each
sample separately and averages over samples, which is how a batch is reduced.
Teacher inputs are plain arrays or tensors and never receive gradients.
"""

from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from . import boxdist
from . import numcore as nc
from .geometry import to_offsets

EDGE_ORDER = ("t", "b", "l", "r")


class Scale(NamedTuple):
    height: int
    width: int
    stride: float
    size_range: tuple


@dataclass
class DistillConfig:
    T: float = 1.0
    gamma: float = 0.5
    epsilon: float = 1.0
    lambda_cls: float = 1.0
    lambda_loc_sup: float = 1.0
    lambda_loc_kd: float = 0.25
    elr_radius: int = 1
    elr_decay: float = 0.5

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError(f"T must be positive, got {self.T}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.epsilon < 0 or min(self.lambda_cls, self.lambda_loc_sup, self.lambda_loc_kd) < 0:
            raise ValueError("epsilon and loss weights must be nonnegative")
        if self.elr_radius < 0 or not 0.0 < self.elr_decay < 1.0:
            raise ValueError(f"bad ELR settings radius={self.elr_radius} decay={self.elr_decay}")

    @classmethod
    def supervised(cls, **kw):
        """The non-distilled objective: no teacher terms at all."""
        return cls(gamma=0.0, epsilon=0.0, lambda_loc_kd=0.0, **kw)

    @property
    def uses_teacher(self):
        return self.gamma > 0 or self.epsilon > 0 or self.lambda_loc_kd > 0

    def as_dict(self):
        return asdict(self)


@dataclass
class GridRegionWeights:
    grids: list

    def flat(self):
        return np.concatenate([np.asarray(g, dtype=np.float64).ravel() for g in self.grids])


@dataclass
class AssignedTargets:
    """Per-scale targets; arrays are ``[H_s, W_s]`` (edges ``[H_s, W_s, 4]``)."""

    positive: list
    y_cls: list
    y_obj: list
    edges: list
    gt_index: list
    skipped: int = 0


# ---------------------------------------------------------------- regions


def _cell_centers(h, w, stride):
    cy = (np.arange(h) + 0.5) * stride
    cx = (np.arange(w) + 0.5) * stride
    return cy, cx


def _inside_mask(box, cy, cx):
    iy = (cy >= box.y1) & (cy <= box.y2)
    ix = (cx >= box.x1) & (cx <= box.x2)
    return iy[:, None] & ix[None, :]


def chebyshev_dilate(mask, radius):
    out = mask.copy()
    h, w = mask.shape
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            src = mask[max(0, -dy) : h - max(0, dy), max(0, -dx) : w - max(0, dx)]
            out[max(0, dy) : h - max(0, -dy), max(0, dx) : w - max(0, -dx)] |= src
    return out


def compute_region_weights(gt_boxes, grid, stride, elr_radius=1, elr_decay=0.5):
    """KDR cells (center inside a box) get 1, the Chebyshev ring around them
    ``elr_decay``, everything else 0."""
    if not stride > 0:
        raise ValueError(f"stride must be positive, got {stride}")
    h, w = grid
    cy, cx = _cell_centers(h, w, stride)
    kdr = np.zeros((h, w), dtype=bool)
    for box in gt_boxes:
        kdr |= _inside_mask(box, cy, cx)
    out = np.zeros((h, w))
    if elr_radius > 0:
        out[chebyshev_dilate(kdr, elr_radius)] = elr_decay
    out[kdr] = 1.0
    return out


def region_weights(gt_boxes, scales, elr_radius=1, elr_decay=0.5):
    return GridRegionWeights(
        [compute_region_weights(gt_boxes, (s.height, s.width), s.stride, elr_radius, elr_decay) for s in scales]
    )


# ---------------------------------------------------------------- assignment


def scale_for_size(size, scales):
    for k, s in enumerate(scales):
        lo, hi = s.size_range
        if lo < size <= hi:
            return k
    raise ValueError(f"no scale size range contains {size}")


def assign_targets(gt, scales):
    """Center-in-box assignment on the scale whose size range holds max(w, h).

    ``gt`` is a sequence of ``(BoundingBox, class_index)``. Cells claimed by
    several boxes go to the smallest one.
    """
    pos, ycls, yobj, edges, owner = [], [], [], [], []
    for s in scales:
        pos.append(np.zeros((s.height, s.width), dtype=bool))
        ycls.append(np.full((s.height, s.width), -1, dtype=np.int64))
        yobj.append(np.zeros((s.height, s.width)))
        edges.append(np.zeros((s.height, s.width, 4)))
        owner.append(np.full((s.height, s.width), -1, dtype=np.int64))
    skipped = 0
    # larger boxes first so smaller ones overwrite shared cells
    order = sorted(range(len(gt)), key=lambda i: (-gt[i][0].area, -i))
    for gi in order:
        box, cls = gt[gi]
        if box.area <= 0:
            skipped += 1
            continue
        k = scale_for_size(max(box.width, box.height), scales)
        s = scales[k]
        cy, cx = _cell_centers(s.height, s.width, s.stride)
        for i, j in zip(*np.nonzero(_inside_mask(box, cy, cx))):
            off = to_offsets(box, (cx[j], cy[i]))
            pos[k][i, j] = True
            ycls[k][i, j] = cls
            yobj[k][i, j] = 1.0
            edges[k][i, j] = np.array(off.as_tuple()) / s.stride
            owner[k][i, j] = gi
    return AssignedTargets(pos, ycls, yobj, edges, owner, skipped)


# ---------------------------------------------------------------- losses


def _flat_weights(weights):
    if isinstance(weights, GridRegionWeights):
        return weights.flat()
    return np.asarray(weights, dtype=np.float64).ravel()


def cell_coefficients(weights, groups=None):
    """Per-cell multipliers turning a weighted sum into the normalized loss."""
    w = _flat_weights(weights)
    if groups is None:
        total = w.sum()
        return w / total if total > 0 else np.zeros_like(w)
    groups = np.asarray(groups, dtype=np.int64)
    sums = np.bincount(groups, weights=w, minlength=groups.max() + 1 if groups.size else 0)
    denom = sums[groups]
    coef = np.zeros_like(w)
    np.divide(w, denom, out=coef, where=denom > 0)
    return coef / len(sums)


def _teacher_array(t):
    return t.data if isinstance(t, nc.Tensor) else np.asarray(t, dtype=np.float64)


def _zero_like(x):
    # connected to the student so callers still see a zero gradient
    return nc.dot_const(x, np.zeros(x.shape))


def cls_distill_loss(student_logits, teacher_logits, y_cls, weights, gamma=0.5, T=1.0, groups=None):
    """gamma*T^2*CE(Pt, Ps) + (1-gamma)*CE(y, Ps at T=1), region weighted.

    ``y_cls`` holds the class per cell and -1 on cells without an object; the
    supervised term only counts on positive cells.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    if not T > 0:
        raise ValueError(f"temperature must be positive, got {T}")
    coef = cell_coefficients(weights, groups)
    if coef.shape[0] != student_logits.shape[0]:
        raise ValueError(f"{coef.shape[0]} weights for {student_logits.shape[0]} cells")
    if not coef.any():
        return _zero_like(student_logits)
    loss = None
    if gamma < 1.0:
        y = np.asarray(y_cls, dtype=np.int64)
        target = np.zeros(student_logits.shape)
        pos = np.nonzero(y >= 0)[0]
        target[pos, y[pos]] = coef[pos]
        loss = nc.scale(nc.dot_const(nc.log_softmax_t(student_logits, 1.0), -target), 1.0 - gamma)
    if gamma > 0.0:
        t = _teacher_array(teacher_logits)
        if t.shape != student_logits.shape:
            raise ValueError(f"teacher logits {t.shape} do not match student logits {student_logits.shape}")
        pt = nc.softmax_t(nc.Tensor(t), T).data
        kd = nc.dot_const(nc.log_softmax_t(student_logits, T), -pt * coef[:, None])
        kd = nc.scale(kd, gamma * T * T)
        loss = kd if loss is None else nc.add(kd, loss)
    return loss


def obj_distill_loss(Os, y_obj, Ot=None, epsilon=1.0):
    """mean((Os - y)^2) + epsilon * mean((Os - Ot)^2) on post-sigmoid confidences."""
    y = np.asarray(y_obj, dtype=np.float64).reshape(Os.shape)
    loss = nc.mse_mean(Os, y)
    if epsilon > 0:
        t = _teacher_array(Ot).reshape(Os.shape)
        loss = nc.add(loss, nc.scale(nc.mse_mean(Os, t), epsilon))
    return loss


def loc_distill_loss(student_edge_logits, teacher_edge_logits, weights, T=1.0, groups=None):
    """T^2 * KL(teacher || student) per edge, averaged with cell weights."""
    if not T > 0:
        raise ValueError(f"temperature must be positive, got {T}")
    t = _teacher_array(teacher_edge_logits)
    if t.shape != student_edge_logits.shape:
        raise ValueError(f"teacher edges {t.shape} do not match student edges {student_edge_logits.shape}")
    coef = cell_coefficients(weights, groups)
    if not coef.any():
        return _zero_like(student_edge_logits)
    log_pt = nc.log_softmax_t(nc.Tensor(t), T).data
    u = np.exp(log_pt) * (coef[:, None, None] / student_edge_logits.shape[1])
    entropy_part = np.sum(u * log_pt)
    cross = nc.dot_const(nc.log_softmax_t(student_edge_logits, T), -u)
    return nc.scale(nc.add(cross, entropy_part), T * T)


def edge_expectation(edge_logits, lattice, T=1.0):
    """Differentiable ``sum_i e_i * softmax(logits)_i`` over the last axis."""
    p = nc.softmax_t(edge_logits, T)
    vals = np.broadcast_to(lattice.values, edge_logits.shape)
    return nc.sum(nc.mul(p, vals), axis=-1)


def loc_supervised_loss(student_edge_logits, edge_targets, positive, lattice, groups=None):
    """CE against the two-bin target plus L1 on the decoded edge, averaged
    over positive cells and the four edges."""
    pos = np.asarray(positive, dtype=bool).ravel()
    coef = cell_coefficients(pos.astype(np.float64), groups)
    idx = np.nonzero(pos)[0]
    if idx.size == 0:
        return _zero_like(student_edge_logits)
    c = coef[idx][:, None] / 4.0
    targets = np.asarray(edge_targets, dtype=np.float64).reshape(-1, 4)[idx]
    enc, _ = boxdist.encode_array(targets, lattice)
    targets = np.clip(targets, lattice.e_min, lattice.e_max)
    s = nc.take(student_edge_logits, idx)
    ce = nc.dot_const(nc.log_softmax_t(s, 1.0), -enc * c[:, :, None])
    l1 = nc.dot_const(nc.absolute(nc.sub(edge_expectation(s, lattice), targets)), np.broadcast_to(c, targets.shape))
    return nc.add(ce, l1)


def total_loss(parts, config):
    """obj + lambda_cls*cls + lambda_loc_sup*loc_sup + lambda_loc_kd*loc_kd.

    Missing (``None``) parts are treated as zero.
    """
    terms = [
        (parts.get("obj"), 1.0),
        (parts.get("cls"), config.lambda_cls),
        (parts.get("loc_sup"), config.lambda_loc_sup),
        (parts.get("loc_kd"), config.lambda_loc_kd),
    ]
    loss = None
    for part, lam in terms:
        if part is None or lam == 0:
            continue
        term = part if lam == 1.0 else nc.scale(part, lam)
        loss = term if loss is None else nc.add(loss, term)
    return loss if loss is not None else nc.Tensor(0.0)

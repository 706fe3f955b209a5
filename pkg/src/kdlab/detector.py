"""Tiny two-scale detector with decoupled classification / localization heads.

Backbone: a stride-2 conv per stage followed by ``depth`` 3x3 conv blocks,
channels ``width * (stage + 1)``. The feature maps at the configured strides
are merged top-down (1x1 lateral conv + nearest upsampling), then each scale
gets a classification branch and a localization branch (edge distributions
plus objectness). Final head layers start at zero.
"""

import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import boxdist
from . import numcore as nc
from .geometry import BoundingBox, Detection, nms
from .losses import Scale

CKPT_MAGIC = b"DSTL"
CKPT_VERSION = 1


def _default_scales():
    return ((8, (0.0, 20.0)), (16, (20.0, math.inf)))


@dataclass
class DetectorConfig:
    width: int = 8
    depth: int = 1
    scales: tuple = field(default_factory=_default_scales)
    classes: int = 3
    bins: int = 8
    name: str = "student"

    def __post_init__(self):
        self.scales = tuple((int(s), (float(r[0]), float(r[1]))) for s, r in self.scales)
        strides = [s for s, _ in self.scales]
        if strides != sorted(strides) or len(set(strides)) != len(strides):
            raise ValueError(f"scales must have strictly ascending strides, got {strides}")
        for s in strides:
            if s < 2 or s & (s - 1):
                raise ValueError(f"strides must be powers of two >= 2, got {s}")
        for a, b in zip(strides, strides[1:]):
            if b != 2 * a:
                raise ValueError(f"adjacent strides must differ by a factor of 2, got {a} and {b}")
        ranges = [r for _, r in self.scales]
        if ranges[0][0] != 0.0 or ranges[-1][1] != math.inf:
            raise ValueError("size ranges must cover (0, inf)")
        for (_, hi), (lo, _) in zip(ranges, ranges[1:]):
            if hi != lo:
                raise ValueError("size ranges must be contiguous")
        if self.width < 1 or self.depth < 0 or self.classes < 1 or self.bins < 2:
            raise ValueError(f"bad detector config {self}")

    @classmethod
    def student(cls, **kw):
        return cls(**{"width": 8, "depth": 1, "name": "student", **kw})

    @classmethod
    def teacher(cls, **kw):
        return cls(**{"width": 24, "depth": 2, "name": "teacher", **kw})

    @property
    def strides(self):
        return [s for s, _ in self.scales]

    @property
    def lattice(self):
        return boxdist.BinLattice.default(self.bins)

    def grid_scales(self, height, width):
        for s in self.strides:
            if height % s or width % s:
                raise ValueError(f"image size {height}x{width} not divisible by stride {s}")
        return [Scale(height // s, width // s, float(s), r) for s, r in self.scales]

    def to_dict(self):
        d = asdict(self)
        d["scales"] = [[s, list(r)] for s, r in self.scales]
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**{**d, "scales": tuple((s, tuple(r)) for s, r in d["scales"])})


@dataclass
class ScaleOutput:
    # channels-last, matching the internal activation layout
    cls_logits: nc.Tensor  # [N, H, W, C]
    obj_logits: nc.Tensor  # [N, H, W]
    edge_logits: nc.Tensor  # [N, H, W, 4, n]


@dataclass
class HeadOutput:
    """Per-scale head tensors. ``batched=False`` means N was added for a
    single image; :meth:`image` gives the unbatched arrays."""

    levels: list
    batched: bool = True

    @classmethod
    def from_arrays(cls, levels):
        """Build from per-scale ``(cls [C,H,W], obj [H,W], edges [4,n,H,W])``
        arrays of a single image (the layout :meth:`image` returns)."""
        out = []
        for c, o, e in levels:
            c, o, e = (np.asarray(a, dtype=np.float64) for a in (c, o, e))
            out.append(
                ScaleOutput(
                    nc.Tensor(np.ascontiguousarray(c.transpose(1, 2, 0))[None]),
                    nc.Tensor(o[None]),
                    nc.Tensor(np.ascontiguousarray(e.transpose(2, 3, 0, 1))[None]),
                )
            )
        return cls(out, batched=False)

    @property
    def n_images(self):
        return self.levels[0].obj_logits.shape[0]

    def image(self, k, i=0):
        """Arrays for scale ``k`` of image ``i``: cls [C,H,W], obj [H,W], edges [4,n,H,W]."""
        lv = self.levels[k]
        return (
            lv.cls_logits.data[i].transpose(2, 0, 1),
            lv.obj_logits.data[i],
            lv.edge_logits.data[i].transpose(2, 3, 0, 1),
        )


class Detector:
    def __init__(self, config, params):
        self.config = config
        self.params = dict(params)

    def parameters(self):
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    @property
    def n_params(self):
        return int(sum(p.size for p in self.params.values()))

    def freeze(self):
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        return self

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def _conv(self, name, x, stride=1, pad=None):
        w = self.params[name + ".w"]
        k = w.shape[-1]
        return nc.conv2d_nhwc(x, w, self.params[name + ".b"], stride=stride, pad=k // 2 if pad is None else pad)

    def forward(self, images):
        """Head outputs for ``[3, H, W]`` or ``[N, 3, H, W]`` images."""
        x = images if isinstance(images, nc.Tensor) else nc.Tensor(images)
        batched = x.ndim == 4
        if not batched:
            x = nc.reshape(x, (1,) + x.shape)
        cfg = self.config
        cfg.grid_scales(x.shape[2], x.shape[3])
        x = nc.transpose(x, (0, 2, 3, 1))
        n_stages = int(math.log2(cfg.strides[-1]))
        taps = {}
        for si in range(n_stages):
            x = nc.relu(self._conv(f"stage{si}.down", x, stride=2))
            for d in range(cfg.depth):
                x = nc.relu(self._conv(f"stage{si}.block{d}", x))
            taps[2 ** (si + 1)] = x
        feats = [taps[s] for s in cfg.strides]
        # top-down merge, coarsest first
        for k in range(len(feats) - 2, -1, -1):
            lat = self._conv(f"fpn{k}.lateral", feats[k + 1])
            feats[k] = nc.add(feats[k], nc.upsample2x(lat, channels_last=True))
        levels = []
        n, nb = x.shape[0], cfg.bins
        for k, f in enumerate(feats):
            h, w = f.shape[1], f.shape[2]
            c = nc.relu(self._conv(f"head{k}.cls_conv", f))
            cls_logits = self._conv(f"head{k}.cls_out", c)
            r = nc.relu(self._conv(f"head{k}.loc_conv", f))
            edges = nc.reshape(self._conv(f"head{k}.edge_out", r), (n, h, w, 4, nb))
            obj = nc.reshape(self._conv(f"head{k}.obj_out", r), (n, h, w))
            levels.append(ScaleOutput(cls_logits, obj, edges))
        return HeadOutput(levels, batched=batched)

    __call__ = forward


def _layer_specs(cfg):
    """(name, c_out, c_in, k, zero_init) in declaration order."""
    specs = []
    n_stages = int(math.log2(cfg.strides[-1]))
    chans = [cfg.width * (i + 1) for i in range(n_stages)]
    cin = 3
    for si in range(n_stages):
        specs.append((f"stage{si}.down", chans[si], cin, 3, False))
        for d in range(cfg.depth):
            specs.append((f"stage{si}.block{d}", chans[si], chans[si], 3, False))
        cin = chans[si]
    scale_ch = [chans[int(math.log2(s)) - 1] for s in cfg.strides]
    for k in range(len(scale_ch) - 1):
        specs.append((f"fpn{k}.lateral", scale_ch[k], scale_ch[k + 1], 1, False))
    for k, ch in enumerate(scale_ch):
        specs.append((f"head{k}.cls_conv", ch, ch, 3, False))
        specs.append((f"head{k}.cls_out", cfg.classes, ch, 1, True))
        specs.append((f"head{k}.loc_conv", ch, ch, 3, False))
        specs.append((f"head{k}.edge_out", 4 * cfg.bins, ch, 1, True))
        specs.append((f"head{k}.obj_out", 1, ch, 1, True))
    return specs


def build(config, seed=0):
    """Deterministic He-uniform initialization from ``seed``."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, cout, cin, k, zero in _layer_specs(config):
        fan_in = cin * k * k
        bound = math.sqrt(6.0 / fan_in)
        w = np.zeros((cout, cin, k, k)) if zero else rng.uniform(-bound, bound, size=(cout, cin, k, k))
        params[name + ".w"] = nc.Tensor(w, requires_grad=True)
        params[name + ".b"] = nc.Tensor(np.zeros(cout), requires_grad=True)
    return Detector(config, params)


# ---------------------------------------------------------------- flattening


def flatten_cells(out):
    """Concatenate all scales into per-cell tensors.

    Returns ``(cls [M, C], obj [M], edges [M, 4, n])``; cells are ordered by
    scale, then image, then row-major position.
    """
    cls_parts, obj_parts, edge_parts = [], [], []
    for lv in out.levels:
        n, h, w, c = lv.cls_logits.shape
        nb = lv.edge_logits.shape[-1]
        cls_parts.append(nc.reshape(lv.cls_logits, (n * h * w, c)))
        obj_parts.append(nc.reshape(lv.obj_logits, (n * h * w,)))
        edge_parts.append(nc.reshape(lv.edge_logits, (n * h * w, 4, nb)))
    if len(out.levels) == 1:
        return cls_parts[0], obj_parts[0], edge_parts[0]
    return nc.concat(cls_parts), nc.concat(obj_parts), nc.concat(edge_parts)


def cell_groups(out):
    """Image index of every flattened cell (same order as :func:`flatten_cells`)."""
    parts = []
    for lv in out.levels:
        n, h, w = lv.obj_logits.shape
        parts.append(np.repeat(np.arange(n), h * w))
    return np.concatenate(parts)


# ---------------------------------------------------------------- decoding


def _softmax(z, T=1.0, axis=-1):
    z = z / T
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def decode_arrays(levels, strides, lattice, T_decode=1.0):
    """Vectorized decoding of one image.

    ``levels`` is a list of ``(cls [C,H,W], obj [H,W], edges [4,n,H,W])``.
    Returns ``(boxes [M,4], scores [M], classes [M])`` for every cell,
    unclamped and unfiltered.
    """
    all_boxes, all_scores, all_cls = [], [], []
    vals = lattice.values
    for (cls, obj, edges), stride in zip(levels, strides):
        _, h, w = cls.shape
        p = _softmax(cls, axis=0)
        score = _sigmoid(obj) * p.max(axis=0)
        klass = p.argmax(axis=0)
        e = np.tensordot(vals, _softmax(edges, T_decode, axis=1), axes=([0], [1])) * stride  # [4, H, W]
        cy = ((np.arange(h) + 0.5) * stride)[:, None]
        cx = ((np.arange(w) + 0.5) * stride)[None, :]
        t, b, l, r = e
        all_boxes.append(np.stack([cx - l, cy - t, cx + r, cy + b], axis=-1).reshape(-1, 4))
        all_scores.append(score.ravel())
        all_cls.append(klass.ravel())
    return np.concatenate(all_boxes), np.concatenate(all_scores), np.concatenate(all_cls)


def decode_predictions(out, scales, conf_threshold=0.25, T_decode=1.0, image=0, lattice=None):
    """Detections for one image of a HeadOutput.

    ``scales`` is a sequence of :class:`~kdlab.losses.Scale` (or anything with
    ``height``, ``width`` and ``stride``).
    """
    if not 0.0 <= conf_threshold <= 1.0:
        raise ValueError(f"conf_threshold must lie in [0, 1], got {conf_threshold}")
    levels = [out.image(k, image) for k in range(len(out.levels))]
    lattice = lattice or boxdist.BinLattice.default(levels[0][2].shape[1])
    img_h = scales[0].height * scales[0].stride
    img_w = scales[0].width * scales[0].stride
    boxes, scores, classes = decode_arrays(levels, [s.stride for s in scales], lattice, T_decode)
    keep = np.nonzero(scores >= conf_threshold)[0]
    boxes = boxes[keep]
    boxes[:, 0::2] = np.clip(boxes[:, 0::2], 0.0, img_w)
    boxes[:, 1::2] = np.clip(boxes[:, 1::2], 0.0, img_h)
    return [
        Detection(BoundingBox(*map(float, b)), int(c), float(min(s, 1.0)))
        for b, s, c in zip(boxes, scores[keep], classes[keep])
    ]


def predict(det, image, conf_threshold=0.25, nms_iou=0.5, T_decode=1.0):
    """Detections per image after NMS; returns a list of lists for a batch."""
    x = image if isinstance(image, nc.Tensor) else nc.Tensor(image)
    with nc.no_grad():
        out = det.forward(x)
    scales = det.config.grid_scales(x.shape[-2], x.shape[-1])
    n = x.shape[0] if x.ndim == 4 else 1
    res = [
        nms(decode_predictions(out, scales, conf_threshold, T_decode, image=i, lattice=det.config.lattice), nms_iou)
        for i in range(n)
    ]
    return res if x.ndim == 4 else res[0]


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, det, meta=None):
    """Binary checkpoint: magic, version, JSON config record, raw tensors."""
    record = json.dumps({"detector": det.config.to_dict(), "meta": meta or {}}, sort_keys=True).encode()
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(record)), record]
    chunks.append(struct.pack("<I", len(det.params)))
    for name, p in det.params.items():
        nb = name.encode()
        chunks.append(struct.pack("<I", len(nb)) + nb)
        chunks.append(struct.pack(f"<I{p.ndim}I", p.ndim, *p.shape))
        chunks.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


class CheckpointError(ValueError):
    pass


def load_checkpoint(path, requires_grad=True):
    """Inverse of :func:`save_checkpoint`; returns ``(Detector, meta)``."""
    with open(path, "rb") as fh:
        buf = fh.read()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated {what} at byte {pos}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if take(4, "magic") != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic at byte 0")
    version, rlen = struct.unpack("<II", take(8, "header"))
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version} at byte 4")
    record = json.loads(take(rlen, "config record").decode())
    config = DetectorConfig.from_dict(record["detector"])
    (count,) = struct.unpack("<I", take(4, "parameter count"))
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4, "name length"))
        name = take(nlen, "name").decode()
        (rank,) = struct.unpack("<I", take(4, "rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "shape"))
        size = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(take(8 * size, f"tensor {name}"), dtype="<f8").reshape(shape).astype(np.float64)
        params[name] = nc.Tensor(data, requires_grad=requires_grad)
    if pos != len(buf):
        raise CheckpointError(f"{path}: trailing data at byte {pos}")
    expected = [s[0] + suffix for s in _layer_specs(config) for suffix in (".w", ".b")]
    if list(params) != expected:
        raise CheckpointError(f"{path}: parameter names do not match the config")
    return Detector(config, params), record["meta"]

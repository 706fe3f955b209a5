"""Synthetic detection scenes and their on-disk format.

A scene is a small RGB image with 1..max_objects filled shapes on a noisy
dark background. Class ``c`` draws shape ``c % 3`` (rectangle, disk,
triangle) in a colour from hue band ``c // 3``; with three classes the band
is the full hue circle, so only the shape identifies the class.

Files: ``images/<id>.dimg`` (magic ``DIMG``, rank, dims, raw little-endian
float64), ``labels/<id>.txt`` (``class cx cy w h`` normalized, 6 decimals)
and ``manifest.txt``.
"""

import colorsys
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .geometry import BoundingBox

DIMG_MAGIC = b"DIMG"
SPLITS = ("train", "val", "test")

MIN_SIDE = 8  # every box contains a stride-8 cell center
COARSE_SIDE = 20  # boxes above this go to the stride-16 scale ...
COARSE_MIN_SIDE = 16  # ... and must then contain a stride-16 cell center


class DataFormatError(ValueError):
    pass


@dataclass
class Scene:
    image: np.ndarray  # [3, H, W] in [0, 1]
    annotations: list = field(default_factory=list)  # [(BoundingBox, class)]


@dataclass
class DatasetManifest:
    splits: dict
    seed: int
    params: dict = field(default_factory=dict)

    @property
    def counts(self):
        return {k: len(v) for k, v in self.splits.items()}

    @property
    def ids(self):
        return [i for k in SPLITS for i in self.splits.get(k, [])]


# ---------------------------------------------------------------- rendering


def _shape_mask(kind, w, h, rng):
    ys = (np.arange(h) + 0.5)[:, None]
    xs = (np.arange(w) + 0.5)[None, :]
    if kind == 0:
        return np.ones((h, w), dtype=bool)
    if kind == 1:
        return ((xs - w / 2) / (w / 2)) ** 2 + ((ys - h / 2) / (h / 2)) ** 2 <= 1.0
    # isosceles triangle, apex up or down
    if rng.random() < 0.5:
        ys = h - ys
    return np.abs(xs - w / 2) <= (w / 2) * (ys / h)


def _colour(cls, classes, rng):
    bands = math.ceil(classes / 3)
    band = cls // 3
    hue = (band + rng.random()) / bands
    return np.array(colorsys.hsv_to_rgb(hue, rng.uniform(0.5, 1.0), rng.uniform(0.75, 1.0)))


def _overlaps(a, b, margin=1):
    return not (
        a[2] + margin <= b[0] or b[2] + margin <= a[0] or a[3] + margin <= b[1] or b[3] + margin <= a[1]
    )


def generate_scene(seed, height=48, width=48, max_objects=3, classes=3, max_tries=100):
    """Render one scene; fully determined by ``seed`` (int or int sequence)."""
    if height < 16 or width < 16:
        raise ValueError(f"image must be at least 16x16, got {height}x{width}")
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    rng = np.random.default_rng(seed)
    base = rng.uniform(0.05, 0.3, size=3)
    image = base[:, None, None] + rng.normal(0.0, 0.03, size=(3, height, width))
    count = int(rng.integers(1, max_objects + 1))
    placed = []
    annotations = []
    max_side = min(28, height - 2, width - 2)
    for _ in range(count):
        for _ in range(max_tries):
            cls = int(rng.integers(classes))
            kind = cls % 3
            w = int(rng.integers(10, max_side + 1))
            h = w if kind == 1 else int(min(max_side, max(MIN_SIDE, round(w * rng.uniform(0.8, 1.25)))))
            ox = int(rng.integers(0, width - w + 1))
            oy = int(rng.integers(0, height - h + 1))
            mask = _shape_mask(kind, w, h, rng)
            rows = np.nonzero(mask.any(axis=1))[0]
            cols = np.nonzero(mask.any(axis=0))[0]
            box = (ox + cols[0], oy + rows[0], ox + cols[-1] + 1, oy + rows[-1] + 1)
            bw, bh = box[2] - box[0], box[3] - box[1]
            if min(bw, bh) < MIN_SIDE or (max(bw, bh) > COARSE_SIDE and min(bw, bh) < COARSE_MIN_SIDE):
                continue
            if any(_overlaps(box, p) for p in placed):
                continue
            colour = _colour(cls, classes, rng)
            region = image[:, oy : oy + h, ox : ox + w]
            noise = rng.normal(0.0, 0.03, size=region.shape)
            region[:, mask] = (colour[:, None, None] + noise)[:, mask]
            placed.append(box)
            annotations.append((BoundingBox(*map(float, box)), cls))
            break
    return Scene(np.clip(image, 0.0, 1.0), annotations)


def scene_seed(dataset_seed, index):
    return [int(dataset_seed), int(index)]


def generate_dataset(n, seed=0, height=48, width=48, max_objects=3, classes=3):
    return [generate_scene(scene_seed(seed, i), height, width, max_objects, classes) for i in range(n)]


def split_dataset(n, seed=0):
    """Shuffle ``n`` ids and cut them 8:1:1 into train/val/test."""
    if n < 10:
        raise ValueError(f"need at least 10 samples to split, got {n}")
    ids = [f"{i:06d}" for i in range(n)]
    perm = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in perm]
    n_train = round(0.8 * n)
    n_val = round(0.1 * n)
    return DatasetManifest(
        {
            "train": shuffled[:n_train],
            "val": shuffled[n_train : n_train + n_val],
            "test": shuffled[n_train + n_val :],
        },
        seed,
    )


# ---------------------------------------------------------------- files


def write_dimg(path, image):
    arr = np.ascontiguousarray(image, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(DIMG_MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape) + arr.tobytes())


def read_dimg(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != DIMG_MAGIC:
        raise DataFormatError(f"{path}: bad magic at byte 0")
    if len(buf) < 8:
        raise DataFormatError(f"{path}: truncated header at byte 4")
    (rank,) = struct.unpack_from("<I", buf, 4)
    if rank > 8 or len(buf) < 8 + 4 * rank:
        raise DataFormatError(f"{path}: bad rank {rank} at byte 4")
    dims = struct.unpack_from(f"<{rank}I", buf, 8)
    start = 8 + 4 * rank
    size = int(np.prod(dims))
    if len(buf) != start + 8 * size:
        raise DataFormatError(f"{path}: expected {8 * size} data bytes at byte {start}, found {len(buf) - start}")
    return np.frombuffer(buf, dtype="<f8", offset=start).reshape(dims).astype(np.float64)


def format_labels(annotations, height, width):
    lines = []
    for box, cls in annotations:
        cx, cy, w, h = box.to_xywh()
        lines.append(f"{cls} {cx / width:.6f} {cy / height:.6f} {w / width:.6f} {h / height:.6f}")
    return "".join(line + "\n" for line in lines)


def parse_labels(text, height, width, path="<labels>"):
    annotations = []
    offset = 0
    for line in text.splitlines(keepends=True):
        fields = line.split()
        if fields:
            try:
                if len(fields) != 5:
                    raise ValueError
                cls = int(fields[0])
                cx, cy, w, h = (float(v) for v in fields[1:])
                if cls < 0 or w < 0 or h < 0:
                    raise ValueError
            except ValueError:
                raise DataFormatError(f"{path}: malformed label line at byte {offset}") from None
            box = BoundingBox.from_xywh(cx * width, cy * height, w * width, h * height)
            annotations.append((box, cls))
        offset += len(line.encode())
    return annotations


def write_manifest(path, manifest):
    lines = [f"seed = {manifest.seed}"]
    lines += [f"{k} = {v}" for k, v in sorted(manifest.params.items())]
    for split in SPLITS:
        lines.append(f"[{split}]")
        lines.extend(manifest.splits.get(split, []))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_manifest(path):
    splits = {}
    params = {}
    seed = None
    current = None
    offset = 0
    with open(path) as fh:
        text = fh.read()
    for line in text.splitlines(keepends=True):
        s = line.strip()
        if not s:
            pass
        elif s.startswith("[") and s.endswith("]"):
            current = s[1:-1]
            if current not in SPLITS:
                raise DataFormatError(f"{path}: unknown split header at byte {offset}")
            splits[current] = []
        elif current is not None:
            splits[current].append(s)
        elif "=" in s:
            key, value = (t.strip() for t in s.split("=", 1))
            try:
                if key == "seed":
                    seed = int(value)
                else:
                    params[key] = int(value)
            except ValueError:
                raise DataFormatError(f"{path}: bad value at byte {offset}") from None
        else:
            raise DataFormatError(f"{path}: unexpected line at byte {offset}")
        offset += len(line.encode())
    return DatasetManifest(splits, seed, params)


def save_dataset(manifest, scenes, directory):
    """Write every scene listed in ``manifest``; ``scenes`` maps id -> Scene."""
    os.makedirs(os.path.join(directory, "images"), exist_ok=True)
    os.makedirs(os.path.join(directory, "labels"), exist_ok=True)
    for sid in manifest.ids:
        scene = scenes[sid]
        _, h, w = scene.image.shape
        write_dimg(os.path.join(directory, "images", sid + ".dimg"), scene.image)
        with open(os.path.join(directory, "labels", sid + ".txt"), "w") as fh:
            fh.write(format_labels(scene.annotations, h, w))
    write_manifest(os.path.join(directory, "manifest.txt"), manifest)


def load_scene(directory, sid):
    image = read_dimg(os.path.join(directory, "images", sid + ".dimg"))
    path = os.path.join(directory, "labels", sid + ".txt")
    with open(path) as fh:
        annotations = parse_labels(fh.read(), image.shape[1], image.shape[2], path)
    return Scene(image, annotations)


def load_dataset(directory, splits=SPLITS):
    """Returns ``(manifest, {split: [Scene, ...]})``."""
    manifest = read_manifest(os.path.join(directory, "manifest.txt"))
    return manifest, {s: [load_scene(directory, sid) for sid in manifest.splits.get(s, [])] for s in splits}


def make_dataset(n=600, seed=0, height=48, width=48, max_objects=3, classes=3):
    """Generate and split in memory; returns ``(manifest, {id: Scene})``."""
    manifest = split_dataset(n, seed)
    manifest.params = {"n": n, "height": height, "width": width, "max_objects": max_objects, "classes": classes}
    scenes = generate_dataset(n, seed, height, width, max_objects, classes)
    return manifest, {f"{i:06d}": s for i, s in enumerate(scenes)}

"""Time the numba kernels against their numpy fallbacks.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]

Both implementations live side by side in ``kdlab.kernels`` so one process
can time them; the ``KDLAB_DISABLE_NUMBA`` flag only changes which one the
public names point at. Also times one training step of the student through
whichever backend is active.
"""

import argparse
import time
import timeit

import numpy as np

from kdlab import _accel, kernels
from kdlab import detector as det_mod
from kdlab import losses as L
from kdlab import numcore as nc
from kdlab import synthdata, trainkit

# NHWC activations seen by the student/teacher 3x3 convs on 48x48 inputs
CONV_SHAPES = [
    ((8, 48, 48, 3), 3, 2, 1),
    ((8, 24, 24, 8), 3, 1, 1),
    ((8, 12, 12, 16), 3, 1, 1),
    ((8, 24, 24, 24), 3, 1, 1),
    ((8, 6, 6, 96), 3, 1, 1),
]


def best_time(fn, repeat):
    fn()  # warm up / compile
    number = max(1, int(0.05 / max(timeit.timeit(fn, number=1), 1e-6)))
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def random_boxes(rng, m):
    xy = rng.uniform(0, 40, size=(m, 2))
    wh = rng.uniform(4, 20, size=(m, 2))
    return np.hstack([xy, xy + wh])


def rows(repeat):
    rng = np.random.default_rng(0)
    out = []
    for shape, k, s, p in CONV_SHAPES:
        x = rng.normal(size=shape)
        cols = kernels.im2col_numpy(x, k, s, p)
        g = rng.normal(size=cols.shape)
        out.append((f"im2col {shape} k{k} s{s}",
                    best_time(lambda: kernels.im2col_numpy(x, k, s, p), repeat),
                    best_time(lambda: kernels.im2col_loops(x, k, s, p), repeat)))
        out.append((f"col2im {shape} k{k} s{s}",
                    best_time(lambda: kernels.col2im_numpy(g, shape, k, s, p), repeat),
                    best_time(lambda: kernels.col2im_loops(g, shape, k, s, p), repeat)))
    for m in (50, 400):
        a, b = random_boxes(rng, m), random_boxes(rng, m)
        out.append((f"iou_matrix {m}x{m}",
                    best_time(lambda: kernels.iou_matrix_numpy(a, b), repeat),
                    best_time(lambda: kernels.iou_matrix_loops(a, b), repeat)))
        boxes = random_boxes(rng, m)
        classes = rng.integers(0, 3, size=m)
        out.append((f"nms_keep {m}",
                    best_time(lambda: kernels.nms_keep_numpy(boxes, classes, 0.5), repeat),
                    best_time(lambda: kernels.nms_keep_loops(boxes, classes, 0.5), repeat)))
    return out


def train_step_time(repeat):
    scenes = synthdata.generate_dataset(8, seed=0)
    cfg = det_mod.DetectorConfig.student()
    distill = L.DistillConfig.supervised()
    data = trainkit.PreparedData(scenes, cfg, distill)
    model = det_mod.build(cfg, 0)
    idx = np.arange(8)
    tg = data.batch_targets(idx)

    def step():
        model.zero_grad()
        total, _ = trainkit.batch_loss(model.forward(data.images[idx]), tg, distill, cfg.lattice)
        nc.backward(total)

    return best_time(step, repeat)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not _accel.HAVE_NUMBA:
        print("numba not installed: the loop kernels run as plain Python")
    print(f"{'kernel':44s} {'numpy us':>10s} {'numba us':>10s} {'speedup':>8s}")
    for name, t_np, t_nb in rows(args.repeat):
        print(f"{name:44s} {t_np * 1e6:10.1f} {t_nb * 1e6:10.1f} {t_np / t_nb:8.2f}")
    t0 = time.perf_counter()
    step = train_step_time(args.repeat)
    print(f"\nstudent train step (batch 8, backend {kernels.BACKEND}): {step * 1e3:.1f} ms"
          f"  [measured in {time.perf_counter() - t0:.1f}s]")


if __name__ == "__main__":
    main()

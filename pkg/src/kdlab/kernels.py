"""Inner loops that dominate training and evaluation time.

Every kernel exists twice: an explicit-loop version compiled with numba and a
vectorized numpy version. ``_accel.USE_NUMBA`` picks which one the public
names resolve to. Both versions produce bit-identical results (the loop order
of the scatter kernels matches the numpy accumulation order).
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._accel import USE_NUMBA, njit


def conv_out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


# ---------------------------------------------------------------- numpy path
# Images are channels-last ``[N, H, W, C]``; a column row is ordered (ki, kj, c).


def im2col_numpy(x, k, stride, pad):
    """Unfold ``x[N, H, W, C]`` into ``cols[N*Ho*Wo, k*k*C]``."""
    n, h, w, c = x.shape
    ho = conv_out_size(h, k, stride, pad)
    wo = conv_out_size(w, k, stride, pad)
    if k == 1 and stride == 1 and pad == 0:
        return x.reshape(n * h * w, c)
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(x, (k, k), axis=(1, 2))
    win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, k * k * c)


def col2im_numpy(cols, x_shape, k, stride, pad):
    """Adjoint of :func:`im2col_numpy` (scatter-add back onto the image)."""
    n, h, w, c = x_shape
    if k == 1 and stride == 1 and pad == 0:
        return np.ascontiguousarray(cols.reshape(n, h, w, c))
    ho = conv_out_size(h, k, stride, pad)
    wo = conv_out_size(w, k, stride, pad)
    d = cols.reshape(n, ho, wo, k, k, c)
    out = np.zeros((n, h + 2 * pad, w + 2 * pad, c))
    for i in range(k):
        for j in range(k):
            out[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += d[:, :, :, i, j]
    if pad:
        out = out[:, pad:-pad, pad:-pad]
    return np.ascontiguousarray(out)


def iou_matrix_numpy(a, b):
    """Pairwise IoU between corner boxes ``a[M, 4]`` and ``b[K, 4]``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def nms_keep_numpy(boxes, classes, iou_threshold):
    """Greedy class-wise suppression over boxes already sorted by priority."""
    m = len(boxes)
    keep = np.zeros(m, dtype=np.bool_)
    kept = []
    for i in range(m):
        if kept:
            idx = np.asarray(kept)
            same = idx[classes[idx] == classes[i]]
            if same.size and (iou_matrix_numpy(boxes[i : i + 1], boxes[same])[0] > iou_threshold).any():
                continue
        keep[i] = True
        kept.append(i)
    return keep


# ---------------------------------------------------------------- numba path


@njit
def im2col_loops(x, k, stride, pad):
    n, h, w, c = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    cols = np.zeros((n * ho * wo, k * k * c))
    for b in range(n):
        for oy in range(ho):
            for ox in range(wo):
                row = (b * ho + oy) * wo + ox
                for i in range(k):
                    y = oy * stride + i - pad
                    if y < 0 or y >= h:
                        continue
                    for j in range(k):
                        xx = ox * stride + j - pad
                        if xx < 0 or xx >= w:
                            continue
                        base = (i * k + j) * c
                        for ch in range(c):
                            cols[row, base + ch] = x[b, y, xx, ch]
    return cols


@njit
def col2im_loops(cols, x_shape, k, stride, pad):
    n, h, w, c = x_shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    out = np.zeros((n, h, w, c))
    # (i, j) outermost per pixel so accumulation order matches col2im_numpy
    for b in range(n):
        for i in range(k):
            for j in range(k):
                base = (i * k + j) * c
                for oy in range(ho):
                    y = oy * stride + i - pad
                    if y < 0 or y >= h:
                        continue
                    for ox in range(wo):
                        xx = ox * stride + j - pad
                        if xx < 0 or xx >= w:
                            continue
                        row = (b * ho + oy) * wo + ox
                        for ch in range(c):
                            out[b, y, xx, ch] += cols[row, base + ch]
    return out


@njit
def _iou_pair(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


@njit
def iou_matrix_loops(a, b):
    out = np.zeros((a.shape[0], b.shape[0]))
    for i in range(a.shape[0]):
        for j in range(b.shape[0]):
            out[i, j] = _iou_pair(a[i], b[j])
    return out


@njit
def nms_keep_loops(boxes, classes, iou_threshold):
    m = boxes.shape[0]
    keep = np.zeros(m, dtype=np.bool_)
    for i in range(m):
        ok = True
        for j in range(i):
            if keep[j] and classes[j] == classes[i]:
                if _iou_pair(boxes[i], boxes[j]) > iou_threshold:
                    ok = False
                    break
        keep[i] = ok
    return keep


# ---------------------------------------------------------------- dispatch


def _loops_im2col(x, k, stride, pad):
    if k == 1 and stride == 1 and pad == 0:
        return im2col_numpy(x, k, stride, pad)
    return im2col_loops(np.ascontiguousarray(x, dtype=np.float64), k, stride, pad)


def _loops_col2im(cols, x_shape, k, stride, pad):
    if k == 1 and stride == 1 and pad == 0:
        return col2im_numpy(cols, x_shape, k, stride, pad)
    return col2im_loops(np.ascontiguousarray(cols, dtype=np.float64), tuple(x_shape), k, stride, pad)


def _loops_iou(a, b):
    a = np.ascontiguousarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.ascontiguousarray(b, dtype=np.float64).reshape(-1, 4)
    return iou_matrix_loops(a, b)


def _loops_nms(boxes, classes, iou_threshold):
    boxes = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 4)
    classes = np.ascontiguousarray(classes, dtype=np.int64)
    return nms_keep_loops(boxes, classes, float(iou_threshold))


if USE_NUMBA:
    im2col, col2im, iou_matrix, nms_keep = _loops_im2col, _loops_col2im, _loops_iou, _loops_nms
else:
    im2col, col2im, iou_matrix = im2col_numpy, col2im_numpy, iou_matrix_numpy

    def nms_keep(boxes, classes, iou_threshold):
        return nms_keep_numpy(
            np.asarray(boxes, dtype=np.float64).reshape(-1, 4), np.asarray(classes), iou_threshold
        )

BACKEND = "numba" if USE_NUMBA else "numpy"

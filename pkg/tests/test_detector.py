import numpy as np
import pytest

from kdlab import detector as D
from kdlab import numcore as nc
from kdlab.geometry import nms


@pytest.fixture(scope="module")
def student():
    return D.build(D.DetectorConfig.student(), seed=0)


def randomize_heads(det, seed=0):
    rng = np.random.default_rng(seed)
    for name, p in det.params.items():
        if not p.data.any():
            p.data = rng.normal(scale=0.3, size=p.shape)
    return det


def test_build_deterministic():
    a = D.build(D.DetectorConfig.student(), seed=3)
    b = D.build(D.DetectorConfig.student(), seed=3)
    c = D.build(D.DetectorConfig.student(), seed=4)
    assert list(a.params) == list(b.params)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)
    assert any(not np.array_equal(a.params[k].data, c.params[k].data) for k in a.params)


def test_teacher_student_parameter_ratio():
    s = D.build(D.DetectorConfig.student()).n_params
    t = D.build(D.DetectorConfig.teacher()).n_params
    assert t / s >= 4


def test_head_shapes(student):
    out = student.forward(np.zeros((3, 48, 48)))
    assert not out.batched
    shapes = [tuple(a.shape for a in out.image(k)) for k in range(2)]
    assert shapes == [((3, 6, 6), (6, 6), (4, 8, 6, 6)), ((3, 3, 3), (3, 3), (4, 8, 3, 3))]


def test_batched_forward_matches_single(student):
    x = np.random.default_rng(0).uniform(size=(2, 3, 32, 32))
    det = randomize_heads(D.build(D.DetectorConfig.student(), seed=1))
    both = det.forward(x)
    for i in range(2):
        one = det.forward(x[i])
        for k in range(2):
            for a, b in zip(both.image(k, i), one.image(k)):
                np.testing.assert_allclose(a, b, atol=1e-12)


def test_teacher_and_student_heads_align():
    x = np.zeros((3, 32, 32))
    s = D.build(D.DetectorConfig.student()).forward(x)
    t = D.build(D.DetectorConfig.teacher()).forward(x)
    for k in range(2):
        assert [a.shape for a in s.image(k)] == [a.shape for a in t.image(k)]


def test_indivisible_image_rejected(student):
    with pytest.raises(ValueError, match="40x48.*16"):
        student.forward(np.zeros((3, 40, 48)))


def test_zero_image_objectness_half(student):
    out = student.forward(np.zeros((3, 48, 48)))
    for k in range(2):
        _, obj, edges = out.image(k)
        np.testing.assert_array_equal(nc.sigmoid(nc.Tensor(obj)).data, 0.5)
        np.testing.assert_array_equal(edges, 0.0)


def test_channels_grow_as_maps_shrink(student):
    cfg = student.config
    chans = [student.params[f"head{k}.cls_conv.w"].shape[0] for k in range(len(cfg.strides))]
    sizes = [48 // s for s in cfg.strides]
    assert all(a < b for a, b in zip(chans, chans[1:]))
    assert all(a > b for a, b in zip(sizes, sizes[1:]))


def test_forward_deterministic():
    det = randomize_heads(D.build(D.DetectorConfig.student(), seed=2))
    x = np.random.default_rng(1).uniform(size=(3, 32, 32))
    a, b = det.forward(x), det.forward(x)
    for k in range(2):
        for u, v in zip(a.image(k), b.image(k)):
            np.testing.assert_array_equal(u, v)


def _scalar_of_outputs(out, probes):
    cls, obj, edges = D.flatten_cells(out)
    return nc.add(nc.dot_const(nc.sigmoid(obj), probes[1]),
                  nc.add(nc.dot_const(cls, probes[0]), nc.dot_const(nc.log_softmax_t(edges), probes[2])))


@pytest.mark.parametrize("name", ["stage0.down.w", "stage1.block0.w", "fpn0.lateral.w", "head1.loc_conv.w"])
def test_detector_gradient(name):
    det = randomize_heads(D.build(D.DetectorConfig(width=2, depth=1), seed=0))
    x = np.random.default_rng(0).uniform(size=(3, 16, 16))
    out = det.forward(x)
    rng = np.random.default_rng(1)
    probes = [rng.normal(size=a.shape) for a in (a.data for a in D.flatten_cells(out))]
    param = det.params[name]

    def f(w):
        det.params[name] = w
        try:
            return _scalar_of_outputs(det.forward(x), probes)
        finally:
            det.params[name] = param

    assert nc.finite_diff_check(f, param.data) <= 1e-5


def test_heads_are_decoupled():
    det = randomize_heads(D.build(D.DetectorConfig.student(), seed=0))
    x = np.random.default_rng(0).uniform(size=(2, 3, 32, 32))
    cls_params = [n for n in det.params if ".cls_" in n]
    loc_params = [n for n in det.params if ".loc_conv" in n or ".edge_out" in n or ".obj_out" in n]

    det.zero_grad()
    nc.backward(nc.mean(D.flatten_cells(det.forward(x))[2]))
    assert all(det.params[n].grad is None or not det.params[n].grad.any() for n in cls_params)
    assert any(det.params[n].grad is not None and det.params[n].grad.any() for n in loc_params)

    det.zero_grad()
    nc.backward(nc.mean(D.flatten_cells(det.forward(x))[0]))
    assert all(det.params[n].grad is None or not det.params[n].grad.any() for n in loc_params)


def test_flatten_and_groups_order():
    det = randomize_heads(D.build(D.DetectorConfig.student(), seed=0))
    x = np.random.default_rng(0).uniform(size=(2, 3, 32, 32))
    out = det.forward(x)
    cls, obj, edges = (a.data for a in D.flatten_cells(out))
    groups = D.cell_groups(out)
    assert cls.shape == (2 * 16 + 2 * 4, 3) and edges.shape == (40, 4, 8)
    np.testing.assert_array_equal(groups, [0] * 16 + [1] * 16 + [0] * 4 + [1] * 4)
    c1, o1, e1 = out.image(0, 1)
    np.testing.assert_array_equal(cls[16 + 5], c1[:, 1, 1])
    np.testing.assert_array_equal(obj[16 + 5], o1[1, 1])
    np.testing.assert_array_equal(edges[16 + 5], e1[:, :, 1, 1])


# ---------------------------------------------------------------- decoding

CFG = D.DetectorConfig.student()
SCALES = CFG.grid_scales(48, 48)


def blank_levels(obj_value=-50.0):
    return [
        (np.zeros((3, s.height, s.width)), np.full((s.height, s.width), obj_value), np.zeros((4, 8, s.height, s.width)))
        for s in SCALES
    ]


def test_decode_suppressed_confidence_is_empty():
    out = D.HeadOutput.from_arrays(blank_levels(-50.0))
    assert D.decode_predictions(out, SCALES, 0.01) == []


def test_decode_hand_built_cell():
    levels = blank_levels(-50.0)
    cls, obj, edges = levels[0]
    obj[1, 1] = 50.0  # cell center (12, 12)
    cls[2, 1, 1] = 40.0
    for e, v in enumerate((1, 3, 1, 3)):  # t, b, l, r in stride units
        edges[e, v, 1, 1] = 60.0
    out = D.HeadOutput.from_arrays(levels)
    dets = D.decode_predictions(out, SCALES, 0.5)
    assert len(dets) == 1
    d = dets[0]
    assert d.class_index == 2
    # (12 - 8*1, 12 - 8*1, 12 + 8*3, 12 + 8*3)
    assert (d.box.x1, d.box.y1, d.box.x2, d.box.y2) == (4.0, 4.0, 36.0, 36.0)
    assert d.score == pytest.approx(1.0, abs=1e-15)


def test_decode_clamps_to_image():
    levels = blank_levels(-50.0)
    cls, obj, edges = levels[1]
    obj[0, 0] = 50.0  # center (8, 8) at stride 16
    cls[0, 0, 0] = 40.0
    edges[:, 7, 0, 0] = 60.0  # 7 * 16 = 112 px each way
    dets = D.decode_predictions(D.HeadOutput.from_arrays(levels), SCALES, 0.5)
    assert [(d.box.x1, d.box.y1, d.box.x2, d.box.y2) for d in dets] == [(0.0, 0.0, 48.0, 48.0)]


def test_decode_then_nms_identity_at_one():
    det = randomize_heads(D.build(CFG, seed=0))
    out = det.forward(np.random.default_rng(0).uniform(size=(3, 48, 48)))
    dets = D.decode_predictions(out, SCALES, 0.0)
    assert len(dets) == 36 + 9
    assert len(nms(dets, 1.0)) == len(dets)
    for d in dets:
        assert 0 <= d.box.x1 <= d.box.x2 <= 48 and 0 <= d.box.y1 <= d.box.y2 <= 48


def test_decode_rejects_bad_threshold():
    with pytest.raises(ValueError):
        D.decode_predictions(D.HeadOutput.from_arrays(blank_levels()), SCALES, 1.5)


def test_predict_single_and_batch():
    det = randomize_heads(D.build(CFG, seed=0))
    x = np.random.default_rng(0).uniform(size=(2, 3, 48, 48))
    batch = D.predict(det, x, 0.2, 0.5)
    assert len(batch) == 2
    single = D.predict(det, x[1], 0.2, 0.5)
    assert [d.class_index for d in single] == [d.class_index for d in batch[1]]
    for a, b in zip(single, batch[1]):
        np.testing.assert_allclose(a.box.as_array(), b.box.as_array(), atol=1e-9)
        assert a.score == pytest.approx(b.score, abs=1e-12)


# ---------------------------------------------------------------- config and checkpoints


def test_config_validation():
    with pytest.raises(ValueError):
        D.DetectorConfig(scales=((16, (0, 20)), (8, (20, float("inf")))))
    with pytest.raises(ValueError):
        D.DetectorConfig(scales=((8, (0, 20)), (32, (20, float("inf")))))
    with pytest.raises(ValueError):
        D.DetectorConfig(scales=((8, (0, 20)), (16, (25, float("inf")))))
    cfg = D.DetectorConfig(width=4, classes=5)
    assert D.DetectorConfig.from_dict(cfg.to_dict()) == cfg


def test_checkpoint_round_trip_bit_exact(tmp_path):
    det = randomize_heads(D.build(D.DetectorConfig.student(classes=4), seed=5))
    path = tmp_path / "m.dstl"
    D.save_checkpoint(path, det, {"role": "test", "x": 1.5})
    back, meta = D.load_checkpoint(path)
    assert meta == {"role": "test", "x": 1.5}
    assert back.config == det.config
    assert list(back.params) == list(det.params)
    for k in det.params:
        assert back.params[k].data.tobytes() == det.params[k].data.tobytes()
    D.save_checkpoint(tmp_path / "again.dstl", back, meta)
    assert (tmp_path / "again.dstl").read_bytes() == path.read_bytes()


def test_checkpoint_corruption_detected(tmp_path):
    det = D.build(D.DetectorConfig.student(), seed=0)
    path = tmp_path / "m.dstl"
    D.save_checkpoint(path, det)
    raw = path.read_bytes()
    assert raw[:4] == b"DSTL"
    (tmp_path / "bad.dstl").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(D.CheckpointError, match="magic"):
        D.load_checkpoint(tmp_path / "bad.dstl")
    (tmp_path / "short.dstl").write_bytes(raw[:-10])
    with pytest.raises(D.CheckpointError, match="truncated"):
        D.load_checkpoint(tmp_path / "short.dstl")
    (tmp_path / "long.dstl").write_bytes(raw + b"\0")
    with pytest.raises(D.CheckpointError, match="trailing"):
        D.load_checkpoint(tmp_path / "long.dstl")

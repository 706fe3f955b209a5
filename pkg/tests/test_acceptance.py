"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line (shown in the terminal summary) and then
asserts, so a failing criterion fails the run at its stated tolerance.
"""

import json
import os
import shutil
import time

import numpy as np
import pytest

from acceptance_log import verdict
from oracles import conv2d_naive, match_exhaustive, nms_bruteforce
from test_numcore import OPS
from kdlab import boxdist, cli, evalkit, synthdata
from kdlab import detector as D
from kdlab import losses as L
from kdlab import numcore as nc
from kdlab import trainkit as K
from kdlab.geometry import BoundingBox, Detection, nms

TINY = "total_epochs = 2\nwarmup_epochs = 1\nteacher_width = 4\nstudent_width = 4\n"


def t(x):
    return nc.Tensor(np.asarray(x, dtype=np.float64))


def run_cli(*argv):
    code = cli.main([str(a) for a in argv])
    assert code == 0, f"kdlab {argv[0]} exited with {code}"


# ---------------------------------------------------------------- 1


def loss_cases(rng):
    """(name, function of one array, point) for every composite loss."""
    m, c = 12, 3
    s_cls, t_cls = rng.normal(scale=2.0, size=(m, c)), rng.normal(scale=2.0, size=(m, c))
    y = rng.integers(-1, c, size=m)
    w = rng.choice([0.0, 0.5, 1.0], size=m)
    w[0] = 1.0
    groups = np.repeat([0, 1], m // 2)
    os_, yobj, ot = rng.uniform(0.05, 0.95, size=m), (y >= 0).astype(float), rng.uniform(size=m)
    s_e, t_e = rng.normal(size=(m, 4, 8)), rng.normal(size=(m, 4, 8))
    targets = rng.uniform(0.1, 6.9, size=(m, 4))
    lat = boxdist.BinLattice.default(8)
    cfg = L.DistillConfig(T=4.0, lambda_cls=0.7, lambda_loc_sup=1.3, lambda_loc_kd=0.4)

    def total(cls_in, obj_in, edges_in):
        parts = {
            "obj": L.obj_distill_loss(obj_in, yobj, ot, cfg.epsilon),
            "cls": L.cls_distill_loss(cls_in, t_cls, y, w, cfg.gamma, cfg.T, groups),
            "loc_sup": L.loc_supervised_loss(edges_in, targets, y >= 0, lat, groups),
            "loc_kd": L.loc_distill_loss(edges_in, t_e, w, cfg.T, groups),
        }
        return L.total_loss(parts, cfg)

    return [
        ("cls_distill_loss", lambda a: L.cls_distill_loss(a, t_cls, y, w, 0.5, 4.0, groups), s_cls),
        ("obj_distill_loss", lambda a: L.obj_distill_loss(a, yobj, ot, 0.7), os_),
        ("loc_distill_loss", lambda a: L.loc_distill_loss(a, t_e, w, 5.0, groups), s_e),
        ("loc_supervised_loss", lambda a: L.loc_supervised_loss(a, targets, y >= 0, lat, groups), s_e),
        ("total_loss/cls", lambda a: total(a, t(os_), t(s_e)), s_cls),
        ("total_loss/obj", lambda a: total(t(s_cls), a, t(s_e)), os_),
        ("total_loss/edges", lambda a: total(t(s_cls), t(os_), a), s_e),
    ]


def op_cases(rng):
    x = rng.normal(size=(3, 4))
    x = np.where(np.abs(x) < 1e-3, 0.1, x)
    other = rng.normal(size=(3, 4))
    cases = []
    for name, op in sorted(OPS.items()):
        probe = rng.normal(size=op(t(x), other).shape)
        cases.append((name, lambda a, op=op, probe=probe: nc.dot_const(op(a, other), probe), x))
    img, ker, bias = rng.normal(size=(2, 5, 6)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    probe = rng.normal(size=(3, 3, 3))
    cases.append(("conv2d/x", lambda a: nc.dot_const(nc.conv2d(a, t(ker), t(bias), 2, 1), probe), img))
    cases.append(("conv2d/kernel", lambda a: nc.dot_const(nc.conv2d(t(img), a, t(bias), 2, 1), probe), ker))
    cases.append(("conv2d/bias", lambda a: nc.dot_const(nc.conv2d(t(img), t(ker), a, 2, 1), probe), bias))
    return cases


def detector_case(seed):
    rng = np.random.default_rng(seed)
    cfg = D.DetectorConfig(width=2, depth=1)
    det = D.build(cfg, seed=seed)
    for p in det.params.values():
        if not p.data.any():
            p.data = rng.normal(scale=0.3, size=p.shape)
    scenes = synthdata.generate_dataset(2, seed=seed, height=32, width=32)
    distill = L.DistillConfig(T=3.0)
    data = K.PreparedData(scenes, cfg, distill)
    tg = data.batch_targets(np.arange(2))
    m = len(tg["pos"])
    teacher = (rng.normal(size=(m, 3)), rng.normal(size=m), rng.normal(size=(m, 4, 8)))
    name = ["stage0.down.w", "head0.loc_conv.w", "head1.cls_conv.w"][seed % 3]
    orig = det.params[name]

    def f(w):
        det.params[name] = w
        try:
            return K.batch_loss(det.forward(data.images), tg, distill, cfg.lattice, teacher)[0]
        finally:
            det.params[name] = orig

    return name, f, orig.data


def test_criterion_1_gradient_soundness():
    t0 = time.perf_counter()
    worst_loss = worst_det = 0.0
    failures = []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        for name, f, x in op_cases(rng) + loss_cases(rng):
            err = nc.finite_diff_check(f, x, eps=1e-6)
            worst_loss = max(worst_loss, err)
            if err > 1e-6:
                failures.append((name, seed, err))
        name, f, x = detector_case(seed)
        err = nc.finite_diff_check(f, x, eps=1e-6)
        worst_det = max(worst_det, err)
        if err > 1e-5:
            failures.append((f"detector {name}", seed, err))
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 60
    detail = f"ops/losses max {worst_loss:.2e}, detector max {worst_det:.2e}, {elapsed:.1f}s"
    assert verdict(1, "gradient soundness", ok, detail), failures


# ---------------------------------------------------------------- 2


def test_criterion_2_distribution_identities():
    rng = np.random.default_rng(2)
    norm_err = max(
        abs(nc.softmax_t(t(rng.normal(scale=s, size=n)), T).data.sum() - 1.0)
        for s, n, T in zip(rng.uniform(0.1, 30, 500), rng.integers(2, 20, 500), rng.uniform(0.05, 50, 500))
    )
    trip_err, bounded = 0.0, True
    for lat in (boxdist.BinLattice.default(8), boxdist.BinLattice(0.0, 15.0, 16), boxdist.BinLattice(-1.5, 2.5, 5)):
        targets = rng.uniform(lat.e_min, lat.e_max, size=1000)
        for e in targets:
            trip_err = max(trip_err, abs(boxdist.decode_expectation(boxdist.encode_target(e, lat)) - e))
        for _ in range(200):
            v = boxdist.decode_expectation(boxdist.logits_to_distribution(rng.normal(scale=5, size=lat.n), lat))
            bounded &= lat.e_min <= v <= lat.e_max
    argmax_kept = True
    for _ in range(500):
        z = rng.normal(scale=3, size=int(rng.integers(2, 12)))
        for T in (0.1, 1.0, 7.0, 45.0):
            p = nc.softmax_t(t(z), T).data
            argmax_kept &= int(np.argmax(p)) == int(np.argmax(z))
    ok = norm_err <= 1e-12 and trip_err <= 1e-12 and bounded and argmax_kept
    detail = f"|sum-1| {norm_err:.1e}, round trip {trip_err:.1e}"
    assert verdict(2, "distribution identities", ok, detail)


# ---------------------------------------------------------------- 3


def test_criterion_3_oracle_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    nms_ok = True
    for _ in range(1000):
        m = int(rng.integers(0, 13))
        xy = rng.uniform(0, 20, size=(m, 2))
        raw = np.hstack([xy, xy + rng.uniform(0.5, 12, size=(m, 2))])
        scores, classes = rng.integers(0, 6, size=m) / 5, rng.integers(0, 3, size=m)
        thr = float(rng.choice([0.0, 0.3, 0.5, 0.7, 1.0]))
        dets = [Detection(BoundingBox(*b), int(c), float(s)) for b, s, c in zip(raw, scores, classes)]
        want = nms_bruteforce(raw.tolist(), scores.tolist(), classes.tolist(), thr)
        nms_ok &= [id(d) for d in nms(dets, thr)] == [id(dets[i]) for i in want]

    match_ok = True
    for _ in range(500):
        nd, ng = int(rng.integers(0, 9)), int(rng.integers(0, 6))
        xy = rng.integers(0, 12, size=(nd + ng, 2)).astype(float)
        raw = np.hstack([xy, xy + rng.integers(1, 8, size=(nd + ng, 2))])
        scores = (rng.integers(0, 4, size=nd) / 4).tolist()
        classes = rng.integers(0, 2, size=nd + ng).tolist()
        dets = [Detection(BoundingBox(*raw[i]), classes[i], scores[i]) for i in range(nd)]
        gts = [(BoundingBox(*raw[nd + j]), classes[nd + j]) for j in range(ng)]
        flags, fn = evalkit.match_detections(dets, gts, 0.5)
        want = match_exhaustive(raw[:nd].tolist(), scores, classes[:nd], raw[nd:].tolist(), classes[nd:], 0.5)
        match_ok &= (flags.tolist(), fn) == want

    conv_err, n_conv = 0.0, 0
    for cin in range(1, 5):
        for h in range(1, 9):
            for w in range(1, 9):
                for k, stride, pad in ((1, 1, 0), (3, 1, 1), (3, 2, 1), (3, 1, 0), (2, 2, 0)):
                    if h + 2 * pad < k or w + 2 * pad < k:
                        continue
                    x, ker, b = rng.normal(size=(cin, h, w)), rng.normal(size=(2, cin, k, k)), rng.normal(size=2)
                    got = nc.conv2d(t(x), t(ker), t(b), stride, pad).data
                    conv_err = max(conv_err, float(np.abs(got - conv2d_naive(x, ker, b, stride, pad)).max()))
                    n_conv += 1
    elapsed = time.perf_counter() - t0
    ok = nms_ok and match_ok and conv_err <= 1e-12 and elapsed < 60
    detail = f"nms {nms_ok}, matching {match_ok}, conv max {conv_err:.1e} over {n_conv} shapes, {elapsed:.1f}s"
    assert verdict(3, "oracle equivalence", ok, detail)


# ---------------------------------------------------------------- 4


def test_criterion_4_metric_fixtures():
    gts = [[(BoundingBox(0, 0, 10, 10), 0), (BoundingBox(20, 20, 30, 30), 1)], [(BoundingBox(5, 5, 25, 25), 2)]]
    perfect = evalkit.evaluate([[Detection(b, c, 1.0) for b, c in g] for g in gts], gts, 3)
    empty = evalkit.evaluate([[], []], gts, 3)
    ap = evalkit.average_precision([True, False, True], [0.9, 0.8, 0.7], 2)
    hand = (51 * 1.0 + 50 * (2 / 3)) / 101  # envelope 1 up to recall .5, then 2/3
    ok = (
        perfect.map50 == 1.0
        and perfect.map50_95 == 1.0
        and empty.map50 == 0.0
        and empty.map50_95 == 0.0
        and abs(ap - hand) <= 1e-9
    )
    assert verdict(4, "metric fixtures", ok, f"AP {ap:.12f} vs hand {hand:.12f}")


# ---------------------------------------------------------------- 5


def test_criterion_5_degeneration_to_baseline():
    manifest, scenes = synthdata.make_dataset(60, seed=5)
    train = [scenes[i] for i in manifest.splits["train"]]
    val = [scenes[i] for i in manifest.splits["val"]]
    sched = K.ScheduleConfig(warmup_epochs=1, total_epochs=3)
    teacher, _ = K.train_teacher(train, val, D.DetectorConfig(width=8, depth=1), sched, seed=1)
    degenerate = L.DistillConfig(T=30.0, gamma=0.0, epsilon=0.0, lambda_loc_kd=0.0)
    student = D.DetectorConfig.student()
    _, h_kd = K.distill_student(teacher, student, degenerate, train, val, sched, seed=4)
    _, h_base = K.train_baseline(student, train, val, sched, seed=4)
    same = h_kd.column("loss_total") == h_base.column("loss_total") and h_kd.records == h_base.records
    assert verdict(5, "degeneration to baseline", same, f"{len(h_kd)} epochs compared bit for bit")


# ---------------------------------------------------------------- 6 and 7


PAPER_TEMPERATURES = "25,30,35,40,45"


def read_sweep(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    return lines[0].split(","), [line.split(",") for line in lines[1:]]


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    """Default dataset, one teacher, a full sweep on seed 0 and baseline vs
    best-temperature runs on seeds 1..4, all through the command line."""
    root = tmp_path_factory.mktemp("desk")
    data, teacher = root / "data", root / "teacher.dstl"
    t0 = time.perf_counter()
    run_cli("gen-data", "--out", data, "--n", 600, "--seed", 0)
    run_cli("train-teacher", "--data", data, "--out", teacher, "--seed", 0)
    run_cli("eval", "--model", teacher, "--data", data)
    teacher_map = json.loads((root / "teacher.test.eval.json").read_text())["map50"]

    sweep0 = root / "sweep_seed0.csv"
    run_cli("sweep", "--teacher", teacher, "--data", data, "--seed", 0, "--out", sweep0,
            "--temperatures", PAPER_TEMPERATURES)
    header, rows0 = read_sweep(sweep0)
    # temperature chosen on validation data, never on test
    val_by_t = {}
    for T in PAPER_TEMPERATURES.split(","):
        _, meta = D.load_checkpoint(root / "sweep_seed0_runs" / f"distilled-T{T}.dstl")
        val_by_t[T] = meta["val_map50"]
    best_t = max(val_by_t, key=lambda T: (val_by_t[T], -float(T)))

    pairs = {0: (float(rows0[0][2]), float(next(r for r in rows0 if r[1] == best_t)[2]))}
    for seed in range(1, 5):
        path = root / f"sweep_seed{seed}.csv"
        run_cli("sweep", "--teacher", teacher, "--data", data, "--seed", seed, "--out", path,
                "--temperatures", best_t)
        _, rows = read_sweep(path)
        pairs[seed] = (float(rows[0][2]), float(rows[1][2]))
    return {
        "teacher_map50": teacher_map,
        "best_t": best_t,
        "val_by_t": val_by_t,
        "pairs": pairs,
        "sweep_header": header,
        "sweep_rows": rows0,
        "elapsed": time.perf_counter() - t0,
    }


@pytest.mark.slow
def test_criterion_6_directional_gain(desk):
    pairs = desk["pairs"]
    wins = sum(kd > base for base, kd in pairs.values())
    gain = float(np.mean([kd - base for base, kd in pairs.values()]))
    teacher_ok = desk["teacher_map50"] >= 0.70
    ok = teacher_ok and wins >= 3 and gain > 0 and desk["elapsed"] <= 20 * 60
    per_seed = ", ".join(f"s{s} {b:.3f}->{k:.3f}" for s, (b, k) in pairs.items())
    detail = (f"teacher {desk['teacher_map50']:.3f}, best T {desk['best_t']}, wins {wins}/5, "
              f"mean gain {gain:+.4f}, {desk['elapsed'] / 60:.1f} min; {per_seed}")
    assert verdict(6, "directional distillation gain", ok, detail)


@pytest.mark.slow
def test_criterion_7_sweep_report_shape(desk):
    header, rows = desk["sweep_header"], desk["sweep_rows"]
    shape_ok = (
        header == ["model", "temperature", "map50", "map50_95"]
        and len(rows) == 6
        and [r[1] for r in rows] == ["-", "25", "30", "35", "40", "45"]
        and rows[0][0] == "baseline"
        and all(0.0 <= float(v) <= 1.0 for r in rows for v in r[2:])
    )
    swept = [float(r[2]) for r in rows[1:]]
    monotone = all(a <= b for a, b in zip(swept, swept[1:]))
    detail = "mAP50 by T " + " ".join(f"{r[1]}:{r[2]}" for r in rows) + f"; monotone in T: {monotone}"
    assert verdict(7, "sweep report shape", shape_ok, detail)


# ---------------------------------------------------------------- 8


def test_criterion_8_schedule_and_stopping(tiny_scenes):
    s = K.ScheduleConfig(warmup_epochs=3, total_epochs=40, steps_per_epoch=60)
    warm = 3 * 60
    ends = (
        abs(K.lr_at(0, s) - s.lr_start) <= 1e-12
        and abs(K.lr_at(warm, s) - s.lr_peak) <= 1e-12
        and abs(K.lr_at(s.total_steps - 1, s) - s.lr_final) <= 1e-12
    )
    # both pieces give lr_peak at the boundary
    warm_limit = s.lr_start + (s.lr_peak - s.lr_start) * warm / warm
    continuous = abs(warm_limit - K.lr_at(warm, s)) <= 1e-12 and abs(K.lr_at(warm - 1, s) - K.lr_at(warm, s)) < 1e-3

    curve = [0.1, 0.3, 0.5, 0.5, 0.45, 0.5, 0.2, 0.9, 0.9, 0.9, 0.9, 0.9]
    plateau_start, patience, total = 2, 3, len(curve)

    def evaluator(model, epoch):
        return evalkit.EvalReport(map50=curve[epoch])

    _, hist = K.train_baseline(D.DetectorConfig(width=4), tiny_scenes[:4], None,
                               K.ScheduleConfig(warmup_epochs=1, total_epochs=total),
                               K.EarlyStopConfig(patience=patience), evaluator=evaluator)
    stop = hist.records[-1].epoch
    stopping = hist.stopped_early and plateau_start + patience <= stop <= total
    ok = ends and continuous and stopping
    assert verdict(8, "schedule and stopping", ok, f"stopped at epoch {stop} (plateau from {plateau_start})")


# ---------------------------------------------------------------- 9


def tree(root):
    return {
        os.path.relpath(os.path.join(d, f), root): open(os.path.join(d, f), "rb").read()
        for d, _, files in os.walk(root)
        for f in files
    }


def test_criterion_9_determinism_and_persistence(tmp_path):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY)
    outputs = []
    d = tmp_path / "run"
    for rep in ("a", "b"):
        # same directory both times: sidecars record their paths
        run_cli("gen-data", "--out", d / "data", "--n", 30, "--seed", 4)
        run_cli("train-teacher", "--data", d / "data", "--out", d / "t.dstl", "--config", cfg, "--seed", 1)
        run_cli("distill", "--teacher", d / "t.dstl", "--data", d / "data", "--out", d / "s.dstl", "--config", cfg,
                "--temperature", 25, "--seed", 2)
        run_cli("eval", "--model", d / "s.dstl", "--data", d / "data", "--config", cfg)
        run_cli("sweep", "--teacher", d / "t.dstl", "--data", d / "data", "--out", d / "sweep.csv", "--config", cfg,
                "--temperatures", "25,45", "--seed", 3)
        outputs.append(tree(d))
        shutil.move(d, tmp_path / rep)
    identical = outputs[0] == outputs[1]

    det = D.build(D.DetectorConfig.teacher(), seed=9)
    rng = np.random.default_rng(9)
    for p in det.params.values():
        p.data = rng.normal(size=p.shape)
    D.save_checkpoint(tmp_path / "rt.dstl", det, {"k": 1})
    back, _ = D.load_checkpoint(tmp_path / "rt.dstl")
    ckpt_exact = all(back.params[k].data.tobytes() == det.params[k].data.tobytes() for k in det.params)

    manifest, scenes = synthdata.make_dataset(50, seed=8)
    synthdata.save_dataset(manifest, scenes, tmp_path / "rt_data")
    _, splits = synthdata.load_dataset(tmp_path / "rt_data")
    images_exact, label_err = True, 0.0
    for split in synthdata.SPLITS:
        for sid, scene in zip(manifest.splits[split], splits[split]):
            orig = scenes[sid]
            images_exact &= scene.image.tobytes() == orig.image.tobytes()
            images_exact &= [c for _, c in scene.annotations] == [c for _, c in orig.annotations]
            for (b, _), (o, _) in zip(scene.annotations, orig.annotations):
                label_err = max(label_err, float(np.abs((b.as_array() - o.as_array()) / 48).max()))
    ok = identical and ckpt_exact and images_exact and label_err <= 1e-6
    detail = (f"{len(outputs[0])} files byte-identical across reruns: {identical}, checkpoint exact: {ckpt_exact},"
              f" label error {label_err:.1e}")
    assert verdict(9, "determinism and persistence", ok, detail)

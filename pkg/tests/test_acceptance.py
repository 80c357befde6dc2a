"""Release acceptance suite: nine criteria, one test per criterion.

Each test prints one PASS line with its measured numbers (visible under
pytest -s or in the captured output of a failure). Criteria 5 to 7 train
real models on a single core and dominate the runtime; the whole module
takes roughly 15 minutes.

Run order matters only for the clock, not for correctness; every test
builds its own data and models from fixed seeds.
"""

import hashlib
import json
import struct
import time

import numpy as np
import pytest

from kneeoa import models
from kneeoa.autodiff import Tensor
from kneeoa.cli import main
from kneeoa.datasets import KneeSample, load_manifest, split_dataset
from kneeoa.errors import (
    DetectionFailureError,
    WeightFormatError,
    WeightTruncationError,
)
from kneeoa.gradcheck import TOLERANCE, run_all
from kneeoa.localization import (
    BBox,
    crop_and_resize,
    extract_bboxes,
    jaccard,
    predict_mask,
    rect_to_bbox,
    train_fcn,
    training_pairs,
)
from kneeoa.metrics import confusion_matrix, precision_recall_f1, roc_auc_ovr
from kneeoa.models import LayerSpec, make_model
from kneeoa.optim import (
    AdamState,
    NesterovState,
    SchedulerState,
    adam_step,
    reduce_lr_on_plateau,
    sgd_nesterov_step,
)
from kneeoa.quantification import (
    augment_flip,
    evaluate_samples,
    train_classifier,
    train_joint,
)
from kneeoa.synthetic import synth_generate
from kneeoa.weights_io import load_weights, read_entries, save_weights


def announce(n, detail):
    print(f"CRITERION {n}: PASS  ({detail})")


# --------------------------------------------------------------------------
# 1. every differentiable op passes a finite-difference check


def test_criterion_1_gradient_accuracy():
    t0 = time.perf_counter()
    results = run_all(n_shapes=20, seed=0)
    elapsed = time.perf_counter() - t0
    worst = max(err for err, _ in results.values())
    failures = [op for op, (err, _) in results.items() if not err < TOLERANCE]
    assert not failures, f"ops over tolerance: {failures}"
    assert worst < 1e-4
    assert elapsed < 120.0, f"gradient checks took {elapsed:.1f}s"
    announce(1, f"{len(results)} ops x 20 shapes, worst rel err "
                f"{worst:.2e}, {elapsed:.1f}s")


# --------------------------------------------------------------------------
# 2. metric and geometry primitives agree with brute-force oracles


def _jaccard_pixels(a: BBox, b: BBox) -> float:
    ga = np.zeros((a.frame_h, a.frame_w), dtype=bool)
    ga[a.y:a.y + a.h, a.x:a.x + a.w] = True
    gb = np.zeros_like(ga)
    gb[b.y:b.y + b.h, b.x:b.x + b.w] = True
    union = int(np.logical_or(ga, gb).sum())
    return float(np.logical_and(ga, gb).sum() / union) if union else 0.0


def _oracle_components(binary: np.ndarray):
    """(area, scan_order, min_x, min_y, max_x, max_y) per 4-connected blob."""
    h, w = binary.shape
    seen = np.zeros_like(binary, dtype=bool)
    comps = []
    for sy in range(h):
        for sx in range(w):
            if not binary[sy, sx] or seen[sy, sx]:
                continue
            stack, pixels = [(sy, sx)], []
            seen[sy, sx] = True
            while stack:
                y, x = stack.pop()
                pixels.append((y, x))
                for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                    if 0 <= ny < h and 0 <= nx < w and binary[ny, nx] \
                            and not seen[ny, nx]:
                        seen[ny, nx] = True
                        stack.append((ny, nx))
            ys = [p[0] for p in pixels]
            xs = [p[1] for p in pixels]
            comps.append((len(pixels), len(comps),
                          min(xs), min(ys), max(xs), max(ys)))
    return comps


def _oracle_two_boxes(prob: np.ndarray, threshold: float):
    comps = _oracle_components(prob >= threshold)
    if len(comps) < 2:
        return None, len(comps)
    h, w = prob.shape
    top2 = sorted(comps, key=lambda c: (-c[0], c[1]))[:2]
    top2.sort(key=lambda c: c[1])  # x-center ties resolve by scan order
    boxes = [BBox(c[2], c[3], c[4] - c[2] + 1, c[5] - c[3] + 1, w, h)
             for c in top2]
    boxes.sort(key=lambda b: b.x_center)
    return tuple(boxes), len(comps)


def _auc_all_pairs(y: np.ndarray, scores: np.ndarray, cls: int):
    pos = scores[y == cls]
    neg = scores[y != cls]
    if pos.size == 0 or neg.size == 0:
        return None
    wins = 0.0
    for p in pos:
        for q in neg:
            wins += 1.0 if p > q else (0.5 if p == q else 0.0)
    return wins / (pos.size * neg.size)


def test_criterion_2_oracle_equivalence():
    rng = np.random.default_rng(42)
    checked = {"jaccard": 0, "boxes": 0, "confusion": 0, "prf": 0, "auc": 0}

    def random_box(frame):
        w = int(rng.integers(1, frame - 1))
        h = int(rng.integers(1, frame - 1))
        x = int(rng.integers(0, frame - w + 1))
        y = int(rng.integers(0, frame - h + 1))
        return BBox(x, y, w, h, frame, frame)

    for _ in range(120):
        a, b = random_box(24), random_box(24)
        assert abs(jaccard(a, b) - _jaccard_pixels(a, b)) < 1e-9
        checked["jaccard"] += 1

    for _ in range(120):
        prob = (rng.random((14, 14)) < 0.35).astype(np.float64)
        expected, found = _oracle_two_boxes(prob, 0.5)
        if expected is None:
            with pytest.raises(DetectionFailureError) as err:
                extract_bboxes(prob, 0.5)
            assert err.value.found == found
        else:
            got = extract_bboxes(prob, 0.5)
            assert got == expected
        checked["boxes"] += 1

    for _ in range(100):
        n = int(rng.integers(5, 60))
        yt = rng.integers(0, 5, n)
        yp = rng.integers(0, 5, n)
        cm = confusion_matrix(yt, yp)
        loop = np.zeros((5, 5), dtype=np.int64)
        for t, p in zip(yt, yp):
            loop[t, p] += 1
        assert np.array_equal(cm, loop)
        checked["confusion"] += 1

        scores = precision_recall_f1(cm)
        for c in range(5):
            tp = loop[c, c]
            pred = loop[:, c].sum()
            true = loop[c, :].sum()
            prec = tp / pred if pred else 0.0
            rec = tp / true if true else 0.0
            f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
            assert abs(scores.precision[c] - prec) < 1e-9
            assert abs(scores.recall[c] - rec) < 1e-9
            assert abs(scores.f1[c] - f1) < 1e-9
        checked["prf"] += 1

    for _ in range(100):
        n = int(rng.integers(8, 40))
        yt = rng.integers(0, 5, n)
        # quantized probabilities force score ties, exercising midranks
        raw = rng.integers(0, 6, (n, 5)).astype(np.float64) + 1.0
        probs = raw / raw.sum(axis=1, keepdims=True)
        aucs = roc_auc_ovr(yt, probs)
        for c in range(5):
            expected = _auc_all_pairs(yt, probs[:, c], c)
            if expected is None:
                assert aucs[c] is None
            else:
                assert abs(aucs[c] - expected) < 1e-9
        checked["auc"] += 1

    assert all(v >= 100 for v in checked.values())
    announce(2, ", ".join(f"{k} x{v}" for k, v in checked.items()))


# --------------------------------------------------------------------------
# 3. optimizer steps match hand values; both optimizers find a quadratic
#    minimum; the plateau scheduler follows its exact schedule


def test_criterion_3_optimizer_behaviour():
    # single Adam step, float64 so storage precision is not the limit
    w = Tensor(np.array([1.0]), requires_grad=True)
    state = AdamState.for_params([w], lr=0.001)
    adam_step([w], grads=[np.array([0.1])], state=state)
    expected = 1.0 - 0.001 * (0.1 / (0.1 + 1e-8))
    assert abs(float(w.data[0]) - expected) < 1e-9
    assert float(w.data[0]) == pytest.approx(0.9990, abs=1e-6)

    # single Nesterov step: v = -lr*g, step = mu*v - lr*g = -0.0019
    w = Tensor(np.array([0.0]), requires_grad=True)
    nstate = NesterovState.for_params([w], lr=0.001)
    sgd_nesterov_step([w], grads=[np.array([1.0])], state=nstate, momentum=0.9)
    assert abs(float(w.data[0]) - (-0.0019)) < 1e-9

    # quadratic bowl (w - 3)^2 from w = 0, at most 500 steps
    def minimize(step_fn, make_state, lr):
        w = Tensor(np.array([0.0]), requires_grad=True)
        st = make_state([w], lr=lr)
        for i in range(1, 501):
            g = 2.0 * (w.data - 3.0)
            step_fn([w], grads=[g], state=st)
            if abs(float(w.data[0]) - 3.0) < 1e-3:
                return i
        return None

    adam_steps = minimize(adam_step, AdamState.for_params, lr=0.05)
    nest_steps = minimize(sgd_nesterov_step, NesterovState.for_params, lr=0.01)
    assert adam_steps is not None, "Adam missed the quadratic optimum"
    assert nest_steps is not None, "Nesterov missed the quadratic optimum"

    # plateau scheduler: improvement, then four stale epochs, then a cut
    sched = SchedulerState(lr=1.0, factor=10.0, patience=4)
    lrs = []
    for loss in [1.0, 0.9, 0.9, 0.9, 0.9, 0.9]:
        reduce_lr_on_plateau(sched, loss)
        lrs.append(sched.lr)
    assert lrs == [1.0, 1.0, 1.0, 1.0, 1.0, 0.1]

    announce(3, f"adam step exact, nesterov step exact, quadratic in "
                f"{adam_steps}/{nest_steps} steps, scheduler sequence exact")


# --------------------------------------------------------------------------
# 4. architectures hit their parameter budgets and the localizer is
#    shape-preserving at both working resolutions


def test_criterion_4_parameter_budgets_and_shapes():
    fcn_n = models.count_params(models.build_fcn_localizer(128))
    assert fcn_n == 222_913

    clf_n = models.count_params(models.build_classifier(200, 300))
    assert 5_100_000 <= clf_n <= 5_700_000

    joint_n = models.count_params(models.build_joint_net(200, 300))
    assert 3_600_000 <= joint_n <= 4_400_000

    for size in (128, 256):
        model = models.build_fcn_localizer(size)
        models.init_weights(model, np.random.default_rng(0))
        x = np.zeros((1, 1, size, size), dtype=np.float32)
        out = models.forward(model, x, "infer")["mask"]
        assert out.data.shape == (1, 1, size, size)

    announce(4, f"fcn {fcn_n:,}, classifier {clf_n:,}, joint {joint_n:,}, "
                f"mask shape preserved at 128 and 256")


# --------------------------------------------------------------------------
# 5. the localizer trained on synthetic data finds held-out knees


def test_criterion_5_localizer_quality():
    t0 = time.perf_counter()
    size = 128
    records = synth_generate(200, size=size, seed=7)
    train, test = split_dataset(records, train_frac=0.7, seed=7, key=id)

    model = models.build_fcn_localizer(size)
    models.init_weights(model, np.random.default_rng(7))
    train_fcn(model, training_pairs(train, size), epochs=8, batch_size=8,
              seed=7)

    jaccards = []
    for rec in test:
        prob = predict_mask(model, rec.image)
        try:
            boxes = extract_bboxes(prob, 0.5)
        except DetectionFailureError as e:
            pytest.fail(f"detection failed on a test image ({e})")
        truth = [rect_to_bbox(r, size) for r in rec.rects]
        for got, want in zip(boxes, truth):
            jaccards.append(jaccard(got, want))

    elapsed = time.perf_counter() - t0
    mean_j = float(np.mean(jaccards))
    frac_half = float(np.mean(np.asarray(jaccards) >= 0.5))
    assert len(jaccards) == 2 * len(test)
    assert mean_j >= 0.85, f"mean overlap {mean_j:.4f}"
    assert frac_half == 1.0, f"only {frac_half:.1%} of knees at overlap >= 0.5"
    assert elapsed < 900.0, f"criterion took {elapsed:.0f}s"
    announce(5, f"{len(jaccards)} held-out knees, mean overlap {mean_j:.4f}, "
                f"all above 0.5, {elapsed:.0f}s")


# --------------------------------------------------------------------------
# 6. on ground-truth crops the classifier reaches its accuracy target and
#    the joint network's regression beats the classifier's argmax MSE


def _ground_truth_crops(seed: int, n_records=250, out_h=64, out_w=96):
    records = synth_generate(n_records, size=256, seed=seed)
    samples = []
    for i, rec in enumerate(records):
        for rect, side, grade in zip(rec.rects, rec.sides, rec.grades):
            bbox = rect_to_bbox(rect, 256)
            crop = crop_and_resize(rec.image, bbox, out_h, out_w)
            samples.append(KneeSample(image=crop, side=side, kl_grade=grade,
                                      split="train", group=f"g{i}"))
    return samples


def test_criterion_6_grading_quality():
    t0 = time.perf_counter()
    margins = []
    for seed in (0, 1, 2):
        samples = _ground_truth_crops(seed)
        train, val = split_dataset(samples, train_frac=0.8, seed=seed,
                                   key=lambda s: s.group)
        train = augment_flip(train)
        h, w = train[0].image.shape

        clf = models.build_classifier(h, w)
        models.init_weights(clf, np.random.default_rng(seed))
        hist = train_classifier(clf, train, val, epochs=30, batch_size=32,
                                seed=seed, stop_at_val_acc=0.6)
        best_acc = max(r.val_acc for r in hist)
        assert len(hist) <= 30
        assert best_acc >= 0.6, \
            f"seed {seed}: classifier stalled at {best_acc:.3f}"
        clf_report, _ = evaluate_samples(clf, val)

        joint = models.build_joint_net(h, w)
        models.init_weights(joint, np.random.default_rng(seed))
        train_joint(joint, train, val, epochs=10, batch_size=32,
                    loss_weight=0.5, seed=seed)
        joint_report, _ = evaluate_samples(joint, val)

        assert joint_report.reg_mse is not None
        assert joint_report.reg_mse < clf_report.clsf_mse, (
            f"seed {seed}: regression MSE {joint_report.reg_mse:.3f} did not "
            f"beat classifier argmax MSE {clf_report.clsf_mse:.3f}"
        )
        margins.append((seed, best_acc, clf_report.clsf_mse,
                        joint_report.reg_mse))

    elapsed = time.perf_counter() - t0
    detail = "; ".join(f"seed {s}: acc {a:.2f}, clf mse {cm:.3f} vs "
                       f"reg mse {rm:.3f}" for s, a, cm, rm in margins)
    announce(6, f"{detail}; {elapsed:.0f}s")


# --------------------------------------------------------------------------
# 7. the command-line pipeline runs end to end and its confusion matrix
#    accounts for every test knee


def test_criterion_7_cli_pipeline(tmp_path):
    t0 = time.perf_counter()
    data, fcn, crops = tmp_path / "data", tmp_path / "fcn", tmp_path / "crops"
    grading, evald = tmp_path / "joint", tmp_path / "eval"

    steps = [
        ["synth-gen", "--n", "40", "--size", "128", "--seed", "3",
         "--train-frac", "0.7", "--out", str(data)],
        ["train-fcn", "--manifest", str(data / "manifest.csv"),
         "--out", str(fcn), "--size", "128", "--epochs", "12",
         "--batch-size", "8", "--seed", "3"],
        ["extract", "--manifest", str(data / "manifest.csv"),
         "--weights", str(fcn / "fcn.koaw"), "--out", str(crops),
         "--size", "128", "--crop-h", "64", "--crop-w", "96"],
        ["train-joint", "--manifest", str(crops / "manifest.csv"),
         "--out", str(grading), "--epochs", "3", "--seed", "3"],
        ["evaluate", "--manifest", str(crops / "manifest.csv"),
         "--weights", str(grading / "joint.koaw"), "--out", str(evald)],
    ]
    for argv in steps:
        rc = main(argv)
        assert rc == 0, f"step {argv[0]} exited {rc}"

    with open(evald / "metrics.json") as f:
        metrics = json.load(f)
    confusion = np.asarray(metrics["confusion"])
    test_rows = [r for r in load_manifest(crops / "manifest.csv")
                 if r.split == "test"]
    expected = np.bincount([r.kl_grade for r in test_rows], minlength=5)
    assert np.array_equal(confusion.sum(axis=1), expected), (
        f"confusion row sums {confusion.sum(axis=1).tolist()} vs manifest "
        f"test counts {expected.tolist()}"
    )
    assert metrics["n"] == len(test_rows)
    elapsed = time.perf_counter() - t0
    announce(7, f"5 commands exit 0, {len(test_rows)} test knees all "
                f"accounted for, {elapsed:.0f}s")


# --------------------------------------------------------------------------
# 8. weight files round-trip bitwise and corrupted files fail loudly
#    without touching the target model


def _random_arch(seed: int):
    """Small random conv stack; same seed, same architecture."""
    rng = np.random.default_rng(seed)
    size = int(rng.choice([8, 16]))
    trunk = []
    c = 0
    for i in range(int(rng.integers(1, 4))):
        filters = int(rng.integers(2, 9))
        trunk.append(LayerSpec("conv", f"c{i}",
                               {"filters": filters, "k": 3, "padding": "same"}))
        if rng.random() < 0.7:
            trunk.append(LayerSpec("batchnorm", f"c{i}_bn"))
        trunk.append(LayerSpec("relu", f"c{i}_relu"))
        c += 1
    trunk.append(LayerSpec("flatten", "flat"))
    trunk.append(LayerSpec("dense", "fc", {"units": int(rng.integers(3, 17))}))
    head = [LayerSpec("dense", "out", {"units": 5}),
            LayerSpec("softmax", "out_sm")]
    dtype = np.float64 if rng.random() < 0.3 else np.float32
    return make_model("clf", (1, size, size), trunk, {"probs": head}, dtype)


def test_criterion_8_weight_round_trip(tmp_path):
    rng = np.random.default_rng(99)
    for i in range(100):
        model = _random_arch(i)
        models.init_weights(model, rng)
        path = tmp_path / f"m{i}.koaw"
        save_weights(model, path)
        twin = _random_arch(i)
        load_weights(path, twin)
        src = models.state_entries(model)
        dst = models.state_entries(twin)
        assert list(src) == list(dst)
        for name in src:
            assert src[name].tobytes() == dst[name].tobytes(), \
                f"model {i}: entry {name} not bitwise identical"

    # corruption: every probe either loads cleanly rejected or fails typed
    model = _random_arch(0)
    models.init_weights(model, np.random.default_rng(1))
    path = tmp_path / "victim.koaw"
    save_weights(model, path)
    raw = path.read_bytes()
    probes = {
        "bad magic": b"ZZZZ" + raw[4:],
        "bad version": raw[:4] + struct.pack("<I", 77) + raw[8:],
        "truncated header": raw[:7],
        "truncated payload": raw[:len(raw) - 5],
        "trailing bytes": raw + b"\x00",
        "half file": raw[:len(raw) // 2],
    }
    for label, blob in probes.items():
        bad = tmp_path / "bad.koaw"
        bad.write_bytes(blob)
        target = _random_arch(0)
        models.init_weights(target, np.random.default_rng(2))
        before = {k: v.copy() for k, v in models.state_entries(target).items()}
        with pytest.raises((WeightFormatError, WeightTruncationError)):
            load_weights(bad, target)
        for k, v in models.state_entries(target).items():
            assert np.array_equal(v, before[k]), \
                f"{label}: load mutated {k} despite failing"
        with pytest.raises((WeightFormatError, WeightTruncationError)):
            read_entries(bad)

    announce(8, "100 random models bitwise identical, 6 corruption probes "
                "all typed and side-effect free")


# --------------------------------------------------------------------------
# 9. deterministic mode: the same command and seed produce byte-identical
#    output trees


def _tree_hashes(root):
    return {
        p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*")) if p.is_file()
    }


def test_criterion_9_byte_determinism(tmp_path):
    def run(root):
        data, fcn = root / "data", root / "fcn"
        assert main(["--deterministic", "synth-gen", "--n", "6", "--size",
                     "64", "--seed", "4", "--out", str(data)]) == 0
        assert main(["--deterministic", "train-fcn", "--manifest",
                     str(data / "manifest.csv"), "--out", str(fcn),
                     "--size", "64", "--epochs", "2", "--batch-size", "4",
                     "--seed", "4"]) == 0
        return _tree_hashes(root)

    first = run(tmp_path / "a")
    second = run(tmp_path / "b")
    assert first.keys() == second.keys()
    diffs = [name for name in first if first[name] != second[name]]
    assert not diffs, f"outputs differ: {diffs}"
    announce(9, f"{len(first)} files byte-identical across repeated runs "
                f"(includes weights, csv, png)")

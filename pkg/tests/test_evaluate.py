import numpy as np
import pytest

from wiser.data import ImageSample
from wiser.evaluate import EvalResult, evaluate, forward_probs, softmax, topk_hits
from wiser.model import SliceSpec, WiserModel, WiserModelSpec
from wiser.tensor import ShapeError


def tiny_model(seed=0, classes=7, size=16):
    spec = WiserModelSpec(
        input_size=(size, size), num_classes=classes, widen_factor=1,
        blocks_per_stage=1, slice_spec=SliceSpec(kernel_height=3, feature_maps=4),
        fc_hidden=16, mode="full")
    return WiserModel(spec, seed=seed)


def make_samples(model, count, seed=0, hw=None):
    rng = np.random.default_rng(seed)
    h, w = hw or model.spec.input_size
    c = model.spec.num_classes
    return [ImageSample(pixels=rng.random((3, h, w), dtype=np.float32),
                        label=int(rng.integers(0, c)), id=f"s{i:03d}")
            for i in range(count)]


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(11)
    logits = (rng.random((40, 9)) * 20 - 10).astype(np.float32)
    p = softmax(logits)
    assert np.all(p > 0)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-6)


def test_softmax_shift_invariant_and_stable():
    logits = np.array([[1000.0, 1000.0, 999.0]], dtype=np.float64)
    p = softmax(logits)
    assert np.all(np.isfinite(p))
    assert p[0, 0] == pytest.approx(p[0, 1])


def test_topk_hits_by_hand():
    probs = np.array([
        [0.1, 0.5, 0.4],   # ranks: 1, 2, 0
        [0.3, 0.3, 0.4],   # ranks: 2, 0, 1 (tie 0/1 -> lower index first)
    ])
    labels = np.array([2, 1])
    assert topk_hits(probs, labels, 1).tolist() == [False, False]
    assert topk_hits(probs, labels, 2).tolist() == [True, False]
    assert topk_hits(probs, labels, 3).tolist() == [True, True]


def test_topk_tie_prefers_lower_index():
    probs = np.array([[0.5, 0.5]])
    assert topk_hits(probs, np.array([0]), 1).tolist() == [True]
    assert topk_hits(probs, np.array([1]), 1).tolist() == [False]


def test_top5_never_below_top1():
    model = tiny_model()
    samples = make_samples(model, 30)
    for ten in (False, True):
        r = evaluate(model, samples, batch_size=20, ten=ten)
        assert r.top5 >= r.top1
        assert r.count == 30
        assert 0.0 <= r.top1 <= 1.0


def test_forward_probs_rows_sum():
    model = tiny_model()
    batch = np.random.default_rng(3).random((5, 3, 16, 16), dtype=np.float32)
    p = forward_probs(model, batch)
    assert p.shape == (5, 7)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-6)


def test_result_independent_of_batch_size():
    model = tiny_model(seed=2)
    samples = make_samples(model, 17, seed=5)
    a = evaluate(model, samples, batch_size=4)
    b = evaluate(model, samples, batch_size=17)
    c = evaluate(model, samples, batch_size=64)
    assert a == b == c


def test_ten_crop_scores_are_finite_and_counted():
    model = tiny_model(seed=4)
    # larger-than-input sources so the ten crops actually differ
    samples = make_samples(model, 12, seed=9, hw=(24, 24))
    single = evaluate(model, samples, ten=False)
    ten = evaluate(model, samples, ten=True)
    assert np.isfinite(ten.top1) and np.isfinite(ten.top5)
    assert ten.count == single.count == 12


def test_eval_resize_path():
    model = tiny_model(seed=6)
    # short side 20 -> resized to 16, long side rounds to 24, crop to 16x16
    samples = make_samples(model, 4, seed=21, hw=(20, 30))
    r = evaluate(model, samples, eval_resize=16)
    assert r.count == 4
    r2 = evaluate(model, samples, eval_resize=0)  # raw center crop also fits
    assert r2.count == 4


def test_perfect_and_worst_case_scores():
    model = tiny_model(seed=1)
    samples = make_samples(model, 20, seed=8)
    mean = model.buffers["input_norm.mean"].reshape(3, 1, 1)
    std = model.buffers["input_norm.std"].reshape(3, 1, 1)
    probs = np.stack([
        forward_probs(model, ((s.pixels - mean) / std)[None])[0]
        for s in samples])
    pred = probs.argmax(axis=1)
    aligned = [ImageSample(pixels=s.pixels, label=int(p), id=s.id)
               for s, p in zip(samples, pred)]
    assert evaluate(model, aligned).top1 == 1.0
    order = np.argsort(-probs, axis=1, kind="stable")
    last = [ImageSample(pixels=s.pixels, label=int(o[-1]), id=s.id)
            for s, o in zip(samples, order)]
    r = evaluate(model, last)  # rank-7 labels sit outside every top-5
    assert r.top1 == 0.0
    assert r.top5 == 0.0


def test_few_class_top5_clamps():
    model = tiny_model(classes=3)
    samples = make_samples(model, 10)
    r = evaluate(model, samples)
    assert r.top5 == 1.0  # k clamps to num_classes, every label ranks


def test_result_fields():
    r = EvalResult(top1=0.5, top5=0.75, count=4)
    assert (r.top1, r.top5, r.count) == (0.5, 0.75, 4)


def test_empty_samples_rejected():
    model = tiny_model()
    with pytest.raises(ShapeError, match="empty"):
        evaluate(model, [])

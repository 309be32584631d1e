"""Training loop: data plumbing, optimization smoke tests, determinism."""

import numpy as np
import pytest

from wvt.data import SceneSpec, generate_dataset, read_manifest
from wvt.errors import InputError
from wvt.evaluate import APResult, BoxAnnotation, GtRow, read_gt_csv
from wvt.head import make_proposals
from wvt.model import PRESETS
from wvt.train import (
    ClipDataset,
    TrainSettings,
    _batch,
    _multi_hot,
    evaluate_detector,
    load_dataset,
    load_dataset_files,
    predict,
    train_detector,
)

CFG = PRESETS["tiny"]


@pytest.fixture(scope="module")
def small_ds(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    generate_dataset(SceneSpec(seed=3), 6, root)
    return load_dataset_files(root / "manifest.txt", root / "gt.csv", CFG), root


def test_load_dataset_shapes(small_ds):
    ds, _ = small_ds
    assert len(ds) == 6
    assert ds.num_classes == 4
    for clip in ds.clips:
        assert clip.shape == (3, CFG.frames, 32, 32)
        assert clip.dtype == np.float32
    for anns in ds.annotations:
        assert [a.person_id for a in anns] == sorted(a.person_id for a in anns)
        assert len(anns) == 16


def test_load_dataset_files_matches_manual(small_ds):
    ds, root = small_ds
    manual = load_dataset(read_manifest(root / "manifest.txt"),
                          read_gt_csv(root / "gt.csv"), CFG, root)
    assert manual.clip_ids == ds.clip_ids
    for a, b in zip(manual.clips, ds.clips):
        assert np.array_equal(a, b)


def test_gt_rows_expand_labels():
    anns = [BoxAnnotation("c0", (0.1, 0.1, 0.5, 0.5), (0, 2), 0),
            BoxAnnotation("c0", (0.2, 0.2, 0.6, 0.6), (1,), 1)]
    ds = ClipDataset([np.zeros((3, 2, 4, 4), np.float32)], [anns], ["c0"], 3)
    rows = ds.gt_rows()
    assert [(r.clip_id, r.class_id, r.person_id) for r in rows] == [
        ("c0", 0, 0), ("c0", 2, 0), ("c0", 1, 1)]


def test_multi_hot():
    anns = [BoxAnnotation("c", (0, 0, 1, 1), (0, 3), 0),
            BoxAnnotation("c", (0, 0, 1, 1), (1,), 1)]
    t = _multi_hot(anns, 4)
    assert np.array_equal(t, [[1, 0, 0, 1], [0, 1, 0, 0]])
    assert t.dtype == np.float32


def test_batch_layout(small_ds):
    ds, _ = small_ds
    clip, boxes, clip_index, anns = _batch(ds, [2, 0])
    assert clip.data.shape == (2, 3, CFG.frames, 32, 32)
    assert np.array_equal(clip.data[0], ds.clips[2])
    assert np.array_equal(clip.data[1], ds.clips[0])
    assert boxes.shape == (32, 4)
    assert list(clip_index[:16]) == [0] * 16
    assert list(clip_index[16:]) == [1] * 16
    assert anns[0] == ds.annotations[2][0]


def test_train_smoke_and_history(small_ds):
    ds, _ = small_ds
    model, hist = train_detector(CFG, ds, TrainSettings(epochs=2, seed=0))
    assert len(hist) == 2
    assert all(np.isfinite(h) and h > 0 for h in hist)


def test_train_deterministic(small_ds):
    ds, _ = small_ds
    m1, h1 = train_detector(CFG, ds, TrainSettings(epochs=2, seed=1))
    m2, h2 = train_detector(CFG, ds, TrainSettings(epochs=2, seed=1))
    assert h1 == h2
    for (n1, p1), (n2, p2) in zip(m1.named_params(), m2.named_params()):
        assert n1 == n2
        assert np.array_equal(p1.data, p2.data)


def test_train_seed_changes_run(small_ds):
    ds, _ = small_ds
    _, h1 = train_detector(CFG, ds, TrainSettings(epochs=1, seed=0))
    _, h2 = train_detector(CFG, ds, TrainSettings(epochs=1, seed=2))
    assert h1 != h2


def test_loss_decreases(small_ds):
    ds, _ = small_ds
    _, hist = train_detector(CFG, ds, TrainSettings(epochs=8, seed=0))
    assert hist[-1] < 0.9 * hist[0]


def test_train_continues_from_model(small_ds):
    ds, _ = small_ds
    model, h1 = train_detector(CFG, ds, TrainSettings(epochs=1, seed=0))
    before = [p.data.copy() for p in model.params()]
    model2, h2 = train_detector(CFG, ds, TrainSettings(epochs=1, seed=0),
                                model=model)
    assert model2 is model
    assert any(not np.array_equal(b, p.data)
               for b, p in zip(before, model.params()))


def test_train_rejects_empty():
    ds = ClipDataset([], [], [], 4)
    with pytest.raises(InputError):
        train_detector(CFG, ds)


def test_evaluate_detector_outputs(small_ds):
    ds, _ = small_ds
    model, _ = train_detector(CFG, ds, TrainSettings(epochs=1, seed=0))
    result, dets = evaluate_detector(model, ds)
    assert isinstance(result, APResult)
    assert 0.0 <= result.map <= 1.0
    assert len(dets) == 6 * 16 * CFG.num_classes
    assert all(0.0 <= d.score <= 1.0 for d in dets)
    assert {d.clip_id for d in dets} == set(ds.clip_ids)


def test_predict_batch_size_invariant(small_ds):
    ds, _ = small_ds
    model, _ = train_detector(CFG, ds, TrainSettings(epochs=1, seed=0))
    big = predict(model, ds, batch_clips=16)
    one = predict(model, ds, batch_clips=1)
    assert [(d.clip_id, d.class_id, d.box) for d in big] == [
        (d.clip_id, d.class_id, d.box) for d in one]
    assert np.allclose([d.score for d in big], [d.score for d in one],
                       rtol=0, atol=1e-6)


def test_predict_with_jittered_proposals(small_ds):
    ds, _ = small_ds
    model, _ = train_detector(CFG, ds, TrainSettings(epochs=1, seed=0))
    props = [make_proposals(anns, mode="jitter", sigma=0.05, seed=0)
             for anns in ds.annotations]
    result, dets = evaluate_detector(model, ds, proposals=props)
    assert len(dets) == 6 * 16 * CFG.num_classes
    assert 0.0 <= result.map <= 1.0
    jittered = {d.box for d in dets}
    exact_boxes = {a.box for anns in ds.annotations for a in anns}
    assert jittered.isdisjoint(exact_boxes)  # scores came from moved boxes


def test_predict_rejects_wrong_proposal_count(small_ds):
    ds, _ = small_ds
    model, _ = train_detector(CFG, ds, TrainSettings(epochs=1, seed=0))
    with pytest.raises(InputError):
        predict(model, ds, proposals=[[]])


def test_settings_defaults():
    s = TrainSettings()
    assert (s.epochs, s.batch_clips, s.lr, s.weight_decay, s.seed) == (
        30, 8, 3e-3, 0.0, 0)

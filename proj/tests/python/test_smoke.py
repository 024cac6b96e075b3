"""Smoke tests for the _midccnn extension module."""

import json

import numpy as np
import pytest

try:
    import midccnn as m
except ImportError:
    import _midccnn as m

TINY_CONFIG = json.dumps(
    {
        "model": {
            "input_size": 32,
            "init_channels": 8,
            "growth_rate": 4,
            "num_classes": 3,
            "head": "mil",
            "seed": 0,
        },
        "mil": {"method": "attention", "hidden_dim": 8},
        "train": {"stage_epochs": 1, "batch_size": 4, "seed": 0},
    }
)


def test_version():
    assert m.__version__


def test_softmax_matches_numpy():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 6))
    out = m.softmax(x, axis=1)
    e = np.exp(x - x.max(axis=1, keepdims=True))
    np.testing.assert_allclose(out, e / e.sum(axis=1, keepdims=True), atol=1e-12)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)


def test_matmul_matches_numpy():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
    np.testing.assert_allclose(m.matmul(a, b), a @ b, atol=1e-12)


def test_conv2d_matches_naive():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(1, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    out = m.conv2d(x, w, b, stride=1, padding=1)
    assert out.shape == (1, 3, 5, 5)
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    expect = np.zeros((1, 3, 5, 5))
    for o in range(3):
        for i in range(5):
            for j in range(5):
                expect[0, o, i, j] = np.sum(padded[0, :, i : i + 3, j : j + 3] * w[o]) + b[o]
    np.testing.assert_allclose(out, expect, atol=1e-12)


def test_pool2d():
    x = np.arange(16, dtype=float).reshape(1, 1, 4, 4)
    out = m.pool2d(x, "max", k=2, stride=2)
    np.testing.assert_array_equal(out[0, 0], [[5, 7], [13, 15]])
    avg = m.pool2d(x, "avg", k=2, stride=2)
    np.testing.assert_allclose(avg[0, 0], [[2.5, 4.5], [10.5, 12.5]])


def test_shape_plan_published_geometry():
    cfg = json.loads(m.desk_config())
    cfg["model"].update(input_size=224, init_channels=64, growth_rate=32, num_classes=21)
    plan = m.shape_plan(json.dumps(cfg))
    spatial = [h for (_, _, h, _) in plan]
    assert spatial[:8] == [112, 56, 56, 28, 28, 14, 14, 7]
    channels = dict((name, c) for (name, c, _, _) in plan)
    assert channels["dense_block_1"] == 160
    assert channels["transition_1"] == 160  # transitions preserve channels
    assert channels["refine_conv"] == 352


def test_synth_determinism():
    imgs1, labels1, names1 = m.synth_generate(3, 2, 32, seed=9)
    imgs2, labels2, _ = m.synth_generate(3, 2, 32, seed=9)
    assert labels1 == labels2
    assert len(names1) == 3
    for a, b in zip(imgs1, imgs2):
        np.testing.assert_array_equal(a, b)


def test_model_predict_distribution():
    model = m.Model(TINY_CONFIG)
    img = m.synth_generate(3, 1, 32, seed=3)[0][0]
    pred = model.predict(img)
    p = np.asarray(pred["p_bag"])
    assert p.shape == (3,)
    assert abs(p.sum() - 1.0) < 1e-9
    attn = np.asarray(pred["attention"])
    assert abs(attn.sum() - 1.0) < 1e-9


def test_fit_save_load_roundtrip(tmp_path):
    model = m.Model(TINY_CONFIG)
    images, labels, names = m.synth_generate(3, 2, 32, seed=4)
    history = model.fit(images, labels, names)
    assert len(history) == 4  # 1e-3 .. 1e-6 ladder, one epoch per stage

    path = str(tmp_path / "model.midc")
    model.save(path)
    restored = m.Model.load(path)
    p1 = np.asarray(model.predict(images[0])["p_bag"])
    p2 = np.asarray(restored.predict(images[0])["p_bag"])
    np.testing.assert_array_equal(p1, p2)


def test_gradcheck_smoke():
    model = m.Model(TINY_CONFIG)
    img = m.synth_generate(3, 1, 32, seed=5)[0][0]
    report = model.gradcheck(img, label=0, tolerance=1e-4, coords=30, seed=6)
    assert report["max_rel_err"] < 1e-4
    assert report["failures"] == 0


def test_bad_config_rejected():
    with pytest.raises(RuntimeError):
        m.Model('{"model": {"num_classes": 1}}')
    with pytest.raises(RuntimeError):
        m.Model('{"model": {"num_classes": 3, "bogus": true}}')

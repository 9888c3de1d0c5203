import numpy as np
import pytest

from ddcmnet.inference import TileGrid, stitch, tta_predict
from ddcmnet.metrics import REFERENCE_LIDAR, ConfusionMatrix, confusion, report

CONST = np.array([0.1, 0.2, 0.3, 0.4])


def constant_model(x):
    return np.broadcast_to(CONST[None, :, None, None], (x.shape[0], 4) + x.shape[2:]).copy()


def band_softmax_model(x):
    # per-pixel softmax of a fixed linear map of the bands: flip/mirror equivariant
    w = np.array([[1.0, -2.0], [0.5, 0.3], [-1.0, 1.0], [0.0, 0.2]])
    z = np.einsum("kb,nbhw->nkhw", w, x)
    z = np.exp(z - z.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def position_model(x):
    # depends on absolute position, so not equivariant
    n, _, h, w = x.shape
    ramp = np.linspace(0, 3, h * w).reshape(h, w)
    z = np.stack([x[:, 0] * ramp, x[:, 1], -x[:, 0], ramp + 0 * x[:, 0]], axis=1)
    z = np.exp(z - z.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def test_grid_arithmetic():
    g = TileGrid(500, 500, 256, 0.6)
    assert g.stride == 102
    rows = sorted({r for r, _ in g.origins()})
    assert rows == [0, 102, 204, 244]
    cov = g.coverage()
    assert cov.min() >= 1
    assert TileGrid(256, 256, 256).origins() == [(0, 0)]
    with pytest.raises(ValueError):
        TileGrid(200, 500, 256)


@pytest.mark.parametrize("overlap", [0.0, 0.3, 0.6, 0.9])
def test_constant_model_stitches_to_constant(overlap):
    scene = np.random.default_rng(0).uniform(size=(2, 100, 140))
    probs, pred = stitch(scene, constant_model, TileGrid(100, 140, 64, overlap))
    assert np.all(probs == CONST[:, None, None])
    assert np.all(pred == 3)


def test_rows_sum_to_one_and_degenerate_grid():
    scene = np.random.default_rng(1).normal(size=(2, 160, 224))
    probs, pred = stitch(scene, position_model, TileGrid(160, 224, 96, 0.6))
    assert np.max(np.abs(probs.sum(axis=0) - 1)) < 1e-9
    one = np.random.default_rng(2).normal(size=(2, 64, 64))
    _, pred = stitch(one, position_model, TileGrid(64, 64, 64), tta=False)
    np.testing.assert_array_equal(pred, position_model(one[None])[0].argmax(axis=0))


def test_tta_of_equivariant_model_equals_single_pass():
    x = np.random.default_rng(3).normal(size=(2, 64, 96))
    np.testing.assert_allclose(tta_predict(band_softmax_model, x), band_softmax_model(x[None])[0],
                               atol=1e-9)
    np.testing.assert_array_equal(tta_predict(constant_model, x), constant_model(x[None])[0])
    rows = tta_predict(position_model, x).sum(axis=0)
    assert np.max(np.abs(rows - 1)) < 1e-9


def test_tta_mirror_symmetric_input():
    half = np.random.default_rng(4).normal(size=(2, 32, 16))
    x = np.concatenate([half, half[..., ::-1]], axis=-1)
    identity = band_softmax_model(x[None])[0]
    mirror_pass = band_softmax_model(np.ascontiguousarray(x[None, ..., ::-1]))[0][..., ::-1]
    np.testing.assert_array_equal(mirror_pass, identity)


def test_confusion_and_report():
    ref = np.array([1, 1, 1, 1, 1, 0, 0, 0, 0, 0])
    pred = np.array([1, 1, 1, 0, 0, 1, 0, 0, 0, 0])
    rep = report(confusion(pred, ref, 2))
    assert rep.f1[1] == pytest.approx(2 / 3)
    assert rep.iou[1] == pytest.approx(0.5)
    same = report(confusion(ref, ref, 2))
    assert same.oa == 1.0 and same.miou == 1.0 and same.mf1 == 1.0
    cm = confusion(ref, ref, 2)
    assert np.count_nonzero(cm.counts - np.diag(np.diag(cm.counts))) == 0
    with pytest.raises(ValueError):
        confusion(pred[:5], ref)


def test_ignore_and_absent_classes():
    ref = np.array([0, 0, 1, 255])
    pred = np.array([0, 1, 1, 2])
    cm = confusion(pred, ref, 4, ignore_id=255)
    assert cm.total == 3
    rep = report(cm)
    assert rep.excluded == [2, 3]
    assert np.isnan(rep.iou[2]) and rep.miou == pytest.approx(np.mean(rep.iou[:2]))
    assert "0.592" in rep.text() and REFERENCE_LIDAR == {"mF1": 0.696, "mIoU": 0.592}


def _formula(c):
    k = len(c)
    out = {"OA": sum(c[i][i] for i in range(k)) / sum(map(sum, c))}
    f1, iou = [], []
    for i in range(k):
        tp = c[i][i]
        fp = sum(c[r][i] for r in range(k)) - tp
        fn = sum(c[i]) - tp
        f1.append(2 * tp / (2 * tp + fp + fn))
        iou.append(tp / (tp + fp + fn))
    out["mF1"] = sum(f1) / k
    out["mIoU"] = sum(iou) / k
    return out, f1, iou


def test_random_matrices_match_formula_and_identity():
    rng = np.random.default_rng(5)
    for _ in range(100):
        counts = rng.integers(0, 500, size=(4, 4))
        counts[np.diag_indices(4)] += 1
        rep = report(ConfusionMatrix(counts))
        ref, f1, iou = _formula(counts.tolist())
        assert abs(rep.oa - ref["OA"]) < 1e-12
        assert abs(rep.mf1 - ref["mF1"]) < 1e-12 and abs(rep.miou - ref["mIoU"]) < 1e-12
        np.testing.assert_allclose(rep.f1, f1, atol=1e-12)
        assert np.max(np.abs(rep.iou - rep.f1 / (2 - rep.f1))) < 1e-12

"""Acceptance criteria, one test each, at their stated tolerances.

Each test records a PASS/FAIL line (printed in the pytest terminal summary and
on stdout) before asserting.  Running this file directly prints the same lines.
"""

import functools
import json
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from oracles import direct_conv2d, impulse_extent

from ddcmnet.config import RunConfig
from ddcmnet.data import SynthSpec, read_raster, synth_scene, write_raster
from ddcmnet.gradcheck import format_suite, run_suite
from ddcmnet.inference import TileGrid, stitch
from ddcmnet.metrics import ConfusionMatrix, report
from ddcmnet.model import JointTaskDDCM, NetworkConfig, backbone_param_count, jt_ddcm_forward, summarize
from ddcmnet.nn import functional as F
from ddcmnet.optim import lr_at
from ddcmnet.rng import RngState
from ddcmnet.tensor import Tensor, no_grad
from ddcmnet.train import evaluate, train

# pinned from the first verified synthetic run (seed 0 reached 0.743); never below the 0.55 floor
MIOU_FLOOR = 0.55
MIOU_PINNED = 0.70
ABLATION_TOL = 0.02

REDUCED = dict(low_growth=8, low_merge=16, high_growth=16, high_merge=32, post_growth=16,
               post_merge=16, backbone_width=8, backbone_blocks=(1, 1, 1))


def record(n, title, ok, detail):
    ACCEPTANCE_LINES.append((n, title, bool(ok), detail))
    print(f"criterion {n} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
    return ok


# --------------------------------------------------------------------------
# shared synthetic benchmark

_WORK = Path("/tmp") / "ddcmnet-acceptance"


@functools.lru_cache(maxsize=None)
def benchmark_scenes() -> tuple[str, str]:
    _WORK.mkdir(parents=True, exist_ok=True)
    tr = synth_scene(SynthSpec(1024, 1024), RngState(100, ("scene", 0)))
    va = synth_scene(SynthSpec(512, 512, (1, 1, 2)), RngState(100, ("scene", 1)))
    paths = str(_WORK / "train.ddcm"), str(_WORK / "val.ddcm")
    write_raster(paths[0], tr.raster)
    write_raster(paths[1], va.raster)
    return paths


def benchmark_config(seed: int, heads: bool, run_dir: str) -> RunConfig:
    train_path, _ = benchmark_scenes()
    return RunConfig(seed=seed, run_dir=run_dir, binary_head=heads, presence_head=heads,
                     lr=0.002, patch_size=128, batch_size=4, patches_per_epoch=400, epochs=3,
                     max_iterations=300, train_rasters=(train_path,), window=128, **REDUCED)


@functools.lru_cache(maxsize=None)
def benchmark_run(seed: int, heads: bool) -> dict:
    """Train, then score on the held-out scene with TTA; returns timings and metrics."""
    cfg = benchmark_config(seed, heads, str(_WORK / f"run_s{seed}_{'joint' if heads else 'seg'}"))
    t0 = time.perf_counter()
    res = train(cfg)
    t_train = time.perf_counter() - t0
    rep, _ = evaluate(res.net, [read_raster(benchmark_scenes()[1])], cfg.window, cfg.overlap, True)
    losses = np.array([r["l_total"] for r in res.records])
    ma = np.convolve(losses, np.ones(20) / 20, mode="valid")
    return {"miou": rep.miou, "ma_first": ma[0], "ma_last": ma[-1], "iterations": res.iterations,
            "seconds": time.perf_counter() - t0, "train_seconds": t_train}


# --------------------------------------------------------------------------


def test_criterion_1_gradient_suite():
    t0 = time.perf_counter()
    rows = run_suite(seeds=20, rtol=1e-4)
    elapsed = time.perf_counter() - t0
    print(format_suite(rows, 1e-4, elapsed))
    ok = all(r.passed and r.seeds >= 20 for r in rows) and elapsed < 120
    worst = max(rows, key=lambda r: r.worst)
    assert record(1, "gradient suite", ok,
                  f"{sum(r.passed for r in rows)}/{len(rows)} checks pass over 20 seeds, "
                  f"worst {worst.worst:.2e} ({worst.name}), {elapsed:.1f}s")


def test_criterion_2_convolution_oracle():
    rng = np.random.default_rng(2024)
    exact = dilated = 0
    for case in range(40):
        r = 1 if case < 20 else int(rng.choice([2, 3, 5, 9]))
        k = int(rng.choice([1, 2, 3]))
        ext = k + (k - 1) * (r - 1)
        stride, pad = int(rng.integers(1, 4)), int(rng.integers(0, 4))
        H = int(rng.integers(max(ext - 2 * pad, 1), ext + 8))
        W = int(rng.integers(max(ext - 2 * pad, 1), ext + 8))
        C, O, N = (int(v) for v in rng.integers(1, 4, size=3))
        x = rng.integers(-6, 7, size=(N, C, H, W)).astype(float)
        w = rng.integers(-4, 5, size=(O, C, k, k)).astype(float)
        b = rng.integers(-4, 5, size=O).astype(float)
        got = F.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad, r).data
        same = np.array_equal(got, direct_conv2d(x, w, b, stride, pad, r))
        if r == 1:
            exact += same
        else:
            dilated += same
    extents = {r: impulse_extent(3, r) for r in (1, 2, 5, 9)}
    ok = exact == 20 and dilated == 20 and extents == {1: 3, 2: 5, 5: 11, 9: 19}
    assert record(2, "convolution oracle", ok,
                  f"r=1 exact {exact}/20, dilated exact {dilated}/20, extents {extents}")


def test_criterion_3_joint_loss_bookkeeping(tmp_path):
    synth = synth_scene(SynthSpec(256, 256, (1, 1, 2)), RngState(3, ("scene",)))
    path = tmp_path / "scene.ddcm"
    write_raster(path, synth.raster)
    cfg = RunConfig(seed=3, run_dir=str(tmp_path / "run"), train_rasters=(str(path),),
                    low_dilations=(1, 2), low_growth=3, low_merge=4, high_dilations=(1,),
                    high_growth=4, high_merge=4, post_growth=4, post_merge=4, backbone_width=4,
                    backbone_blocks=(1, 1, 1), patch_size=32, batch_size=2,
                    patches_per_epoch=2000, epochs=1, max_iterations=1000)
    train(cfg)
    recs = [json.loads(l) for l in (tmp_path / "run/logs/loss.jsonl").read_text().splitlines()]
    exact = sum(r["l_total"] == r["l_mce"] + r["w1"] * r["l_bce"] + r["w2"] * r["l_lovasz"]
                for r in recs)
    ws = np.array([[r["w1"], r["w2"]] for r in recs])
    in_range = bool(np.all((ws >= 0) & (ws <= 1)))
    mean = float(ws.mean())
    ok = len(recs) == 1000 and exact == 1000 and in_range and 0.45 <= mean <= 0.55
    assert record(3, "joint loss bookkeeping", ok,
                  f"{exact}/{len(recs)} totals exact, weights in [0,1]: {in_range}, mean {mean:.4f}")


def test_criterion_4_lr_policy():
    expect = 0.00012
    ok = lr_at(0) == 0.00012 and lr_at(25) == 1.5e-5
    for epoch in range(121):
        if epoch in (5, 15, 25, 65, 100):
            ok &= lr_at(epoch) == lr_at(epoch - 1) / 2
            expect /= 2
        ok &= lr_at(epoch) == expect
        ok &= lr_at(epoch, "bias") == 2 * lr_at(epoch)
    assert record(4, "LR policy", ok,
                  f"epoch0 {lr_at(0)}, epoch25 {lr_at(25)}, bias epoch0 {lr_at(0, 'bias')}")


def test_criterion_5_architecture():
    cfg = NetworkConfig()
    net = JointTaskDDCM(cfg)
    net.eval()
    with no_grad():
        out = jt_ddcm_forward(np.random.default_rng(5).uniform(size=(2, 256, 256)), cfg, net)
    shapes = tuple(out[k].shape for k in ("full_seg", "binary", "presence"))
    s = summarize(cfg, 256, net)
    built = net.backbone.num_parameters()
    oracle = backbone_param_count(cfg.backbone_width, cfg.backbone_blocks)
    print(s.table())
    ok = shapes == ((4, 256, 256), (1, 256, 256), (3,)) and built == oracle and s.parameters > 0
    dev = s.parameters / 1e6 - 9.30
    assert record(5, "architecture", ok,
                  f"shapes {shapes}; backbone {built:,d} == oracle {oracle:,d}; total "
                  f"{s.parameters:,d} ({dev:+.2f}M vs 9.30M, reported not asserted)")


def test_criterion_6_synthetic_training():
    run = benchmark_run(0, True)
    reduction = 1 - run["ma_last"] / run["ma_first"]
    ok = (run["iterations"] == 300 and reduction >= 0.5 and run["miou"] >= max(MIOU_FLOOR, MIOU_PINNED)
          and run["seconds"] < 1800)
    assert record(6, "synthetic training", ok,
                  f"300 iterations, moving-average loss {run['ma_first']:.3f} -> {run['ma_last']:.3f} "
                  f"({100 * reduction:.0f}% reduction), mIoU {run['miou']:.3f} "
                  f"(pinned >= {MIOU_PINNED}), {run['seconds']:.0f}s")


def test_criterion_7_joint_task_ablation():
    joint = [benchmark_run(s, True)["miou"] for s in range(3)]
    seg = [benchmark_run(s, False)["miou"] for s in range(3)]
    ok = np.mean(joint) >= np.mean(seg) - ABLATION_TOL
    assert record(7, "joint-task ablation", ok,
                  f"mean mIoU joint {np.mean(joint):.3f} {np.round(joint, 3).tolist()} vs "
                  f"full-seg only {np.mean(seg):.3f} {np.round(seg, 3).tolist()}, tol {ABLATION_TOL}")


def test_criterion_8_stitching_and_metrics():
    const = np.array([0.05, 0.15, 0.3, 0.5])

    def constant(x):
        return np.broadcast_to(const[None, :, None, None], (x.shape[0], 4) + x.shape[2:]).copy()

    def varying(x):
        z = np.stack([x[:, 0], x[:, 1], x[:, 0] * x[:, 1], -x[:, 1]], axis=1)
        z = np.exp(z - z.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    scene = np.random.default_rng(8).normal(size=(2, 500, 460))
    grid = TileGrid(500, 460, 256, 0.6)
    probs, _ = stitch(scene, constant, grid)
    constant_ok = all(np.all(probs[c] == probs[c, 0, 0]) for c in range(4))
    probs, _ = stitch(scene, varying, grid)
    row_err = float(np.max(np.abs(probs.sum(axis=0) - 1)))
    rng = np.random.default_rng(88)
    ident = 0.0
    for _ in range(100):
        counts = rng.integers(0, 1000, size=(5, 5))
        counts[np.diag_indices(5)] += 1
        rep = report(ConfusionMatrix(counts))
        ident = max(ident, float(np.max(np.abs(rep.iou - rep.f1 / (2 - rep.f1)))))
    ok = constant_ok and row_err < 1e-9 and ident < 1e-12
    assert record(8, "stitching/TTA/metrics", ok,
                  f"constant map exact: {constant_ok}, row-sum error {row_err:.1e}, "
                  f"IoU=F1/(2-F1) max error {ident:.1e}")


def test_criterion_9_determinism(tmp_path):
    synth = synth_scene(SynthSpec(256, 256, (1, 1, 2)), RngState(9, ("scene",)))
    path = tmp_path / "scene.ddcm"
    write_raster(path, synth.raster)
    base = RunConfig(seed=9, train_rasters=(str(path),), patch_size=64, batch_size=2,
                     patches_per_epoch=10, epochs=2, **REDUCED)
    files = ["logs/loss.jsonl", "checkpoints/epoch_000.ckpt", "checkpoints/epoch_001.ckpt"]
    for name in ("a", "b"):
        train(base.replace(run_dir=str(tmp_path / name)))
    same = [(tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files]
    assert record(9, "determinism", all(same),
                  f"{sum(same)}/{len(files)} artifacts byte-identical (loss log, 2 checkpoints)")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q", "-s"]))

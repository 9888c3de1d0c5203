"""Command line entry point: ``ddcmnet <synth|train|infer|eval|gradcheck|summary>``."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import ConfigError, RunConfig, load_config
from .data import LabeledRaster, SynthSpec, read_raster, synth_scene, write_ppm, write_raster
from .gradcheck import format_suite, run_suite
from .inference import TileGrid, network_predictor, stitch
from .metrics import confusion, report
from .model import JointTaskDDCM, backbone_param_count, summarize
from .rng import RngState
from .train import run_layout, train

log = logging.getLogger("ddcmnet")


def cmd_synth(cfg: RunConfig) -> int:
    out = Path(cfg.synth_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = SynthSpec(cfg.synth_height, cfg.synth_width, cfg.synth_roads, cfg.synth_width_ranges,
                     noise=cfg.synth_noise, num_classes=cfg.num_classes)
    for i in range(cfg.synth_count):
        scene = synth_scene(spec, RngState(cfg.seed, ("synth", i)))
        path = out / f"scene_{i:03d}.ddcm"
        write_raster(path, scene.raster)
        freq = scene.raster.class_counts() / scene.raster.labels.size
        print(f"{path}  {cfg.synth_height}x{cfg.synth_width}  class fractions "
              + " ".join(f"{f:.4f}" for f in freq))
    return 0


def cmd_train(cfg: RunConfig) -> int:
    t0 = time.perf_counter()
    res = train(cfg)
    last = res.records[-1] if res.records else None
    print(f"trained {res.iterations} iterations in {time.perf_counter() - t0:.1f}s -> {res.run_dir}")
    if last:
        print(f"final L_total {last['l_total']:.6f}")
    for v in res.validation:
        print(f"epoch {v['epoch']} validation mIoU {v['mIoU']:.4f} OA {v['OA']:.4f}")
    return 0


def _require(value: str, key: str) -> str:
    if not value:
        raise ConfigError(f"{key!r} is not set (use --set {key}=PATH)")
    if not Path(value).exists():
        raise FileNotFoundError(f"{key} not found: {value}")
    return value


def cmd_infer(cfg: RunConfig) -> int:
    ckpt = _require(cfg.checkpoint, "checkpoint")
    scene_path = _require(cfg.scene, "scene")
    net, _ = checkpoint.load_model(ckpt)
    scene = read_raster(scene_path, net.cfg.num_classes)
    grid = TileGrid(*scene.shape, cfg.window, cfg.overlap)
    probs, pred = stitch(scene.bands, network_predictor(net), grid, cfg.tta)
    out_dir = run_layout(cfg.run_dir)["predictions"]
    stem = Path(scene_path).stem
    prob_path = out_dir / f"{stem}.pred.ddcm"
    write_raster(prob_path, LabeledRaster(probs, pred.astype(np.uint8), net.cfg.num_classes,
                                          tuple(f"p{c}" for c in range(net.cfg.num_classes))))
    write_ppm(out_dir / f"{stem}.pred.ppm", pred)
    print(f"{len(grid.origins())} windows (stride {grid.stride}) -> {prob_path}")
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    pred = read_raster(_require(cfg.pred, "pred"), cfg.num_classes)
    ref = read_raster(_require(cfg.ref, "ref"), cfg.num_classes)
    if pred.labels is None or ref.labels is None:
        raise ValueError("eval needs a label plane in both pred and ref rasters")
    rep = report(confusion(pred.labels, ref.labels, cfg.num_classes))
    out_dir = run_layout(cfg.run_dir)["predictions"]
    text = rep.text()
    (out_dir / "eval_report.txt").write_text(text + "\n")
    (out_dir / "eval_metrics.txt").write_text(
        "".join(f"{k}={v}\n" for k, v in rep.as_dict().items()))
    print(text)
    return 0


def cmd_gradcheck(cfg: RunConfig) -> int:
    t0 = time.perf_counter()
    rows = run_suite(cfg.gradcheck_seeds, cfg.seed)
    print(format_suite(rows, elapsed=time.perf_counter() - t0))
    return 0 if all(r.passed for r in rows) else 1


def cmd_summary(cfg: RunConfig) -> int:
    ncfg = cfg.network()
    net = JointTaskDDCM(ncfg)
    s = summarize(ncfg, cfg.summary_input, net)
    print(s.table())
    built = net.backbone.num_parameters()
    oracle = backbone_param_count(ncfg.backbone_width, ncfg.backbone_blocks)
    print(f"backbone parameters {built:,d} (closed form {oracle:,d}, "
          f"{'match' if built == oracle else 'MISMATCH'})")
    return 0 if built == oracle else 1


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "summary": cmd_summary,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ddcmnet", description=__doc__)
    p.add_argument("command", choices=list(COMMANDS))
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int, help="unsigned 64-bit seed, overrides the config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise ConfigError(f"seed must be in [0, 2^64), got {args.seed}")
        cfg = load_config(args.config, args.overrides, args.seed)
        return COMMANDS[args.command](cfg)
    except (ConfigError, FileNotFoundError, ValueError, checkpoint.CheckpointError) as exc:
        print(f"ddcmnet {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except FloatingPointError as exc:
        print(f"ddcmnet {args.command}: numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

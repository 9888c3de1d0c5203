"""Training loop, validation and the run directory layout.

Run directory::

    manifest.txt      fully resolved RunConfig (re-loadable as a config file)
    checkpoints/      epoch_NNN.ckpt every epoch, best.ckpt on best validation mIoU
    logs/loss.jsonl   one record per iteration, fields in LOSS_FIELDS order
    logs/val.jsonl    one record per validation pass
    predictions/      outputs of ``infer``
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import RunConfig
from .data import LabeledRaster, read_raster, sample_patches
from .inference import TileGrid, network_predictor, stitch
from .losses import ClassWeights, joint_loss, median_frequency_weights, weighted_cross_entropy
from .metrics import ConfusionMatrix, Report, confusion, report
from .model import JointTaskDDCM
from .optim import AdamAMSGrad, LRSchedule
from .rng import RngState
from .tensor import backward

log = logging.getLogger(__name__)

LOSS_FIELDS = ("iteration", "epoch", "lr", "w1", "w2", "l_mce", "l_bce", "l_lovasz", "l_total")


@dataclass
class TrainResult:
    run_dir: Path
    iterations: int
    records: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    validation: list = field(default_factory=list)
    net: JointTaskDDCM | None = None

    @property
    def last_checkpoint(self) -> Path:
        return self.checkpoints[-1]


def run_layout(run_dir) -> dict[str, Path]:
    root = Path(run_dir)
    paths = {
        "root": root,
        "manifest": root / "manifest.txt",
        "checkpoints": root / "checkpoints",
        "logs": root / "logs",
        "predictions": root / "predictions",
    }
    for key in ("checkpoints", "logs", "predictions"):
        paths[key].mkdir(parents=True, exist_ok=True)
    return paths


def class_frequencies(rasters: list[LabeledRaster], num_classes: int) -> np.ndarray:
    counts = np.zeros(num_classes)
    for r in rasters:
        counts += np.bincount(r.labels.reshape(-1), minlength=num_classes)[:num_classes]
    return counts / counts.sum()


def build_optimizer(cfg: RunConfig, net: JointTaskDDCM) -> AdamAMSGrad:
    schedule = LRSchedule(cfg.lr, cfg.lr_milestones, cfg.lr_factor,
                          {"weight": 1.0, "bias": cfg.bias_lr_mult})
    return AdamAMSGrad(net, schedule, cfg.weight_decay, (cfg.adam_beta1, cfg.adam_beta2),
                       cfg.adam_eps, cfg.decoupled_decay)


def evaluate(net: JointTaskDDCM, rasters: list[LabeledRaster], window: int, overlap: float = 0.6,
             tta: bool = True) -> tuple[Report, ConfusionMatrix]:
    predictor = network_predictor(net)
    K = net.cfg.num_classes
    cm = ConfusionMatrix(np.zeros((K, K), dtype=np.int64))
    for r in rasters:
        grid = TileGrid(*r.shape, window, overlap)
        _, pred = stitch(r.bands, predictor, grid, tta)
        cm = cm + confusion(pred, r.labels, K)
    return report(cm), cm


def _loss_record(it, epoch, lr, sample=None, l_mce=None) -> dict:
    if sample is not None:
        vals = dict(w1=sample.w1, w2=sample.w2, l_mce=sample.l_mce, l_bce=sample.l_bce,
                    l_lovasz=sample.l_lovasz, l_total=sample.l_total)
    else:
        vals = dict(w1=None, w2=None, l_mce=l_mce, l_bce=None, l_lovasz=None, l_total=l_mce)
    rec = {"iteration": it, "epoch": epoch, "lr": lr}
    rec.update(vals)
    return {k: rec[k] for k in LOSS_FIELDS}


def train(cfg: RunConfig) -> TrainResult:
    if not cfg.train_rasters:
        raise ValueError("train_rasters is empty; run `synth` first or list raster paths")
    for p in (*cfg.train_rasters, *cfg.val_rasters):
        if not Path(p).exists():
            raise FileNotFoundError(f"raster not found: {p}")
    paths = run_layout(cfg.run_dir)
    netcfg = cfg.network()
    K = netcfg.num_classes
    rasters = [read_raster(p, K) for p in cfg.train_rasters]
    val_rasters = [read_raster(p, K) for p in cfg.val_rasters]

    if not cfg.class_frequencies:
        cfg = cfg.replace(class_frequencies=tuple(float(f) for f in class_frequencies(rasters, K)))
    weights = (median_frequency_weights(cfg.class_frequencies) if cfg.class_balancing
               else ClassWeights.uniform(K))
    paths["manifest"].write_text(cfg.to_text())

    rng = RngState(cfg.seed)
    net = JointTaskDDCM(netcfg, rng.stream("init"))
    opt = build_optimizer(cfg, net)
    sampler = rng.stream("sampler")
    loss_rng = rng.stream("loss")
    joint = netcfg.binary_head and netcfg.presence_head

    per_epoch = math.ceil(cfg.patches_per_epoch / cfg.batch_size)
    total = cfg.epochs * per_epoch
    if cfg.max_iterations:
        total = min(total, cfg.max_iterations)
    result = TrainResult(paths["root"], total, net=net)
    best = -1.0
    loss_log = open(paths["logs"] / "loss.jsonl", "w")
    val_log = paths["logs"] / "val.jsonl"
    if val_rasters:
        val_log.write_text("")
    try:
        it = 0
        for epoch in range(cfg.epochs):
            if it >= total:
                break
            opt.set_epoch(epoch)
            lr = opt.schedule.lr_at(epoch)
            net.train()
            for _ in range(per_epoch):
                if it >= total:
                    break
                it += 1
                raster = rasters[int(sampler.integers(0, len(rasters)))] if len(rasters) > 1 else rasters[0]
                batch = sample_patches(raster, cfg.batch_size, cfg.patch_size, sampler).materialize()
                opt.zero_grad()
                out = net(batch.inputs)
                if joint:
                    sample = joint_loss(it, out, batch.targets(), weights, loss_rng, cfg.loss_pairing)
                    loss = sample.total
                    rec = _loss_record(it, epoch, lr, sample)
                else:
                    loss = weighted_cross_entropy(out["full_seg"], batch.seg, weights)
                    rec = _loss_record(it, epoch, lr, l_mce=float(loss.data))
                backward(loss)
                opt.step()
                loss_log.write(json.dumps(rec) + "\n")
                result.records.append(rec)
                if it % 50 == 0:
                    log.info("iter %d epoch %d loss %.4f", it, epoch, rec["l_total"])
            loss_log.flush()
            ckpt = paths["checkpoints"] / f"epoch_{epoch:03d}.ckpt"
            checkpoint.save_model(ckpt, net, opt, {"iteration": it, "epoch": epoch})
            result.checkpoints.append(ckpt)
            if val_rasters:
                rep, _ = evaluate(net, val_rasters, cfg.window, cfg.overlap, cfg.tta)
                entry = {"epoch": epoch, "iteration": it, **rep.as_dict()}
                result.validation.append(entry)
                with open(val_log, "a") as fh:
                    fh.write(json.dumps(entry) + "\n")
                if rep.miou > best:
                    best = rep.miou
                    checkpoint.save_model(paths["checkpoints"] / "best.ckpt", net, opt,
                                          {"iteration": it, "epoch": epoch, "mIoU": rep.miou})
    finally:
        loss_log.close()
    return result

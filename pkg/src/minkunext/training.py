"""Training configuration presets and the optimization loop.

Two full-scale protocol presets are shipped (baseline: one-region training,
400 epochs, LR steps at 250/350; refined: multi-region training, 500 epochs,
LR steps at 350/450 — both batch 2048) plus a desk-scale preset (channels
divided by 4, batch 64, 50 epochs) that trains on the synthetic dataset in
minutes and is what the test suite exercises. Full-scale presets are
structural: they are validated for their schedules and parameters, not run.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Adam, LrSchedule, Tape, lr_at
from .checkpoint import save_checkpoint
from .data import AugmentConfig, LabelConfig, SubmapRecord, augment, epoch_batches, label_pairs, relation_masks
from .loss import LossConfig, tsap_loss_tape
from .model import ArchConfig, Model, build_model
from .retrieval import evaluate_protocol


@dataclass(frozen=True)
class TrainConfig:
    protocol: str = "baseline"
    epochs: int = 400
    milestones: tuple[int, ...] = (250, 350)
    initial_lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 2048
    tau: float = 0.01
    positives_per_query: int = 4
    quantization_scale: float = 0.01
    positive_radius: float = 10.0
    negative_radius: float = 50.0
    success_radius: float = 25.0
    jitter_max: float = 0.001
    global_shift_max: float = 0.01
    drop_fraction: float = 0.10
    seed: int = 0
    val_interval: int = 0  # epochs between validation recalls; 0 disables
    train_regions: tuple[str, ...] | None = None  # None = all regions
    arch: ArchConfig = field(default_factory=ArchConfig)

    def loss_config(self) -> LossConfig:
        return LossConfig(tau=self.tau, k=self.positives_per_query, batch_size=self.batch_size)

    def label_config(self) -> LabelConfig:
        return LabelConfig(self.positive_radius, self.negative_radius, self.success_radius)

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(self.jitter_max, self.global_shift_max, self.drop_fraction)

    def schedule(self) -> LrSchedule:
        return LrSchedule(self.initial_lr, self.milestones)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        d["train_regions"] = list(self.train_regions) if self.train_regions is not None else None
        d["arch"] = self.arch.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "preset" in d:
            base = preset(d.pop("preset"))
            merged = base.to_dict()
            arch_override = d.pop("arch", None)
            merged.update(d)
            if arch_override:
                merged["arch"].update(arch_override)
            d = merged
        fields = cls.__dataclass_fields__
        d = {k: v for k, v in d.items() if k in fields}  # tolerate extra keys
        d["milestones"] = tuple(d.get("milestones", ()))
        if d.get("train_regions") is not None:
            d["train_regions"] = tuple(d["train_regions"])
        d["arch"] = ArchConfig.from_dict(d["arch"]) if isinstance(d.get("arch"), dict) \
            else d.get("arch", ArchConfig())
        return cls(**d)

    def to_file(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def preset(name: str) -> TrainConfig:
    """Named training configurations."""
    if name == "baseline":
        return TrainConfig(protocol="baseline", epochs=400, milestones=(250, 350),
                           batch_size=2048, train_regions=("oxford",))
    if name == "refined":
        return TrainConfig(protocol="refined", epochs=500, milestones=(350, 450),
                           batch_size=2048, train_regions=("oxford", "us", "ra"))
    if name == "desk":
        # coarser quantization matches the smaller synthetic clouds (a few
        # hundred points instead of 4096) so voxel counts thin out per stride
        return TrainConfig(protocol="desk", epochs=50, milestones=(30, 40),
                           batch_size=64, quantization_scale=0.05,
                           train_regions=None, val_interval=0,
                           arch=ArchConfig().scaled(4))
    raise KeyError(f"unknown preset {name!r}; choose baseline, refined or desk")


@dataclass
class EpochStats:
    epoch: int
    lr: float
    loss: float
    val_recall_at_1: float  # nan when validation was skipped


def train(records: list[SubmapRecord], cfg: TrainConfig, ckpt_path=None,
          log_path=None, model: Model | None = None,
          progress=None) -> tuple[Model, list[EpochStats]]:
    """Run the full optimization loop; returns the model and per-epoch stats.

    ``progress`` may be a callable taking an EpochStats, e.g. for printing.
    Aborts with RuntimeError if the loss goes non-finite.
    """
    if model is None:
        model = build_model(cfg.arch, seed=cfg.seed,
                            quantization_scale=cfg.quantization_scale)
    train_records = [
        r for r in records
        if r.split == "train" and (cfg.train_regions is None or r.region in cfg.train_regions)
    ]
    if not train_records:
        raise ValueError("no training records after region/split filtering")

    loss_cfg = cfg.loss_config()
    label_cfg = cfg.label_config()
    aug_cfg = cfg.augment_config()
    schedule = cfg.schedule()
    params = model.parameters()
    opt = Adam(params, lr=cfg.initial_lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed + 1)

    log_fh = open(log_path, "a") if log_path else None
    history: list[EpochStats] = []
    try:
        for epoch in range(cfg.epochs):
            lr = lr_at(schedule, epoch)
            opt.lr = lr
            batch_losses = []
            for batch in epoch_batches(train_records, loss_cfg, label_cfg, rng):
                batch_records = [train_records[i] for i in batch]
                clouds = [augment(r.cloud, aug_cfg, rng) for r in batch_records]
                pos, neg = relation_masks(label_pairs(batch_records, label_cfg))
                tape = Tape()
                desc = model.forward(clouds, training=True, tape=tape)
                loss_var = tsap_loss_tape(tape, desc, pos, neg, loss_cfg)
                loss_val = float(loss_var.data)
                if not np.isfinite(loss_val):
                    raise RuntimeError(
                        f"training diverged: non-finite loss at epoch {epoch}"
                    )
                grads = tape.backward(loss_var)
                opt.step(grads)
                model.clamp_invariants()
                batch_losses.append(loss_val)

            val = float("nan")
            if cfg.val_interval and (epoch + 1) % cfg.val_interval == 0:
                report = evaluate_protocol(model, records, label_cfg)
                val = report.overall()[0]
            stats = EpochStats(epoch, lr, float(np.mean(batch_losses)), val)
            history.append(stats)
            if log_fh:
                log_fh.write(f"{stats.epoch}\t{stats.lr:.8g}\t{stats.loss:.6f}\t{stats.val_recall_at_1:.6f}\n")
                log_fh.flush()
            if progress:
                progress(stats)
    finally:
        if log_fh:
            log_fh.close()

    if ckpt_path is not None:
        save_model(model, cfg, ckpt_path, optimizer=opt)
    return model, history


def save_model(model: Model, cfg: TrainConfig, path, optimizer: Adam | None = None):
    config_json = json.dumps({
        "arch": model.cfg.to_dict(),
        "quantization_scale": model.quantization_scale,
        "train": cfg.to_dict() if cfg is not None else None,
    })
    opt_blob = None
    if optimizer is not None:
        opt_blob = {
            "step": optimizer.step_count,
            "hypers": (optimizer.lr, optimizer.beta1, optimizer.beta2,
                       optimizer.eps, optimizer.weight_decay),
            "tensors": optimizer.state_tensors(),
        }
    save_checkpoint(path, model.named_tensors(), config_json, opt_blob)


def load_model(path) -> Model:
    from .checkpoint import load_checkpoint

    tensors, config_json, _ = load_checkpoint(path)
    blob = json.loads(config_json)
    arch = ArchConfig.from_dict(blob["arch"])
    model = build_model(arch, seed=0, quantization_scale=blob["quantization_scale"])
    model.load_tensors(tensors)
    return model

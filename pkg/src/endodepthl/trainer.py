"""Self-supervised training loop and evaluation."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import AugmentationConfig, FrameTriplet, augment
from .geometry import synthesize_view
from .losses import (auto_mask, masked_photometric_loss, min_reprojection, photometric_error,
                     smoothness_loss, total_loss)
from .metrics import accuracy_from_pixels, profile_model, select_pixels
from .network import EncoderConfig, EndoDepthL, disparity_to_depth
from .reflection import confidence_mask

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 8
    epochs: int = 30
    max_steps: int | None = None  # cap on total optimisation steps
    lr0: float = 5e-4
    weight_decay: float = 1e-2
    smoothness_weight: float = 1e-3
    ssim_alpha: float | None = None
    tie_noise: float = 1e-5  # breaks auto-mask ties while the pose is still identity
    use_mask: bool = True
    tau_strategy: str = "percentile(95)"
    mask_k: float = 50.0
    mode: str = "efficiency"
    d_min: float = 0.1
    d_max: float = 150.0
    eval_cap: float = 150.0
    median_scaling: bool = True
    augment: bool = True
    flip_prob: float = 0.5
    color_prob: float = 0.5
    grad_clip: float = 10.0
    seed: int = 0
    deterministic: bool = True

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 < self.d_min < self.d_max:
            raise ValueError(f"need 0 < d_min < d_max, got {self.d_min}, {self.d_max}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainLogRecord:
    step: int
    epoch: int
    lr: float
    total: float
    photometric: float
    smoothness: float
    suppressed_fraction: float
    wall_clock: float
    degenerate: bool = False

    def to_json(self) -> str:
        return json.dumps(asdict(self))


class NonFiniteLossError(RuntimeError):
    def __init__(self, record: TrainLogRecord):
        super().__init__(f"non-finite loss at step {record.step}: {record.to_json()}")
        self.record = record


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    if total_steps < 1:
        raise ValueError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def collate(pairs) -> dict:
    """Stack ``(network_input, loss_target)`` triplet pairs into a batch."""
    inp = [p[0] for p in pairs]
    tgt = [p[1] for p in pairs]
    batch = {
        "inp_prev": torch.stack([t.prev for t in inp]),
        "inp_target": torch.stack([t.target for t in inp]),
        "inp_next": torch.stack([t.next for t in inp]),
        "prev": torch.stack([t.prev for t in tgt]),
        "target": torch.stack([t.target for t in tgt]),
        "next": torch.stack([t.next for t in tgt]),
        "K": torch.stack([t.intrinsics.matrix() for t in tgt]),
    }
    if all(t.gt_depth is not None for t in tgt):
        batch["gt_depth"] = torch.stack([t.gt_depth for t in tgt])
    return batch


def self_supervised_loss(target, prev, nxt, disparities, pose_prev, pose_next, k, *,
                         d_min=0.1, d_max=150.0, smoothness_weight=1e-3, ssim_alpha=None,
                         confidence=None, tie_noise=0.0, generator=None):
    """Full objective for one batch.

    ``disparities`` are the decoder outputs at any resolutions; each is
    upsampled to the target size.  ``confidence`` is the reflection mask
    (``None`` disables it).  Returns ``(LossBreakdown, info)``.
    """
    h, w = target.shape[-2:]
    photometric, smoothness = [], []
    degenerate = False
    auto = None
    for disp in disparities:
        if disp.shape[-2:] != (h, w):
            disp = F.interpolate(disp, size=(h, w), mode="bilinear", align_corners=False)
        depth = disparity_to_depth(disp, d_min, d_max)
        warped_prev, valid_prev = synthesize_view(prev, depth, pose_prev, k)
        warped_next, valid_next = synthesize_view(nxt, depth, pose_next, k)
        err_prev = photometric_error(target, warped_prev, valid_prev, ssim_alpha)
        err_next = photometric_error(target, warped_next, valid_next, ssim_alpha)
        err = min_reprojection(err_prev, err_next, valid_prev, valid_next)
        valid = valid_prev | valid_next
        auto = auto_mask(target, prev, nxt, err.detach(), ssim_alpha, tie_noise, generator)
        lp, deg = masked_photometric_loss(err, auto, confidence, valid)
        degenerate |= deg
        photometric.append(lp)
        smoothness.append(smoothness_loss(disp, target))
    breakdown = total_loss(photometric, smoothness, smoothness_weight)
    return breakdown, {"degenerate": degenerate, "auto_mask": auto}


def _state_arrays(model, optimizer) -> dict:
    arrays = {f"model.{k}": v for k, v in model.state_dict().items()}
    names = {id(p): n for n, p in model.named_parameters()}
    for group in optimizer.param_groups:
        for p in group["params"]:
            st = optimizer.state.get(p)
            if not st:
                continue
            for key, val in st.items():
                arrays[f"optim.{names[id(p)]}.{key}"] = torch.as_tensor(val)
    return arrays


def _restore_state(model, optimizer, arrays: dict):
    model.load_state_dict({k[6:]: torch.from_numpy(np.array(v)) for k, v in arrays.items()
                           if k.startswith("model.")})
    if optimizer is None:
        return
    params = dict(model.named_parameters())
    per_param = {}
    for key, val in arrays.items():
        if key.startswith("optim."):
            name, field = key[6:].rsplit(".", 1)
            per_param.setdefault(name, {})[field] = torch.from_numpy(np.array(val))
    for name, st in per_param.items():
        optimizer.state[params[name]] = st


class Trainer:
    def __init__(self, config: TrainConfig, width: int, height: int):
        self.config = config
        if config.deterministic:
            torch.use_deterministic_algorithms(True)
        torch.manual_seed(config.seed)
        self.enc_cfg = EncoderConfig(config.mode, width, height)
        self.model = EndoDepthL(self.enc_cfg)
        self.optimizer = torch.optim.AdamW(self.model.parameters(), lr=config.lr0,
                                           weight_decay=config.weight_decay)
        self.step = 0
        self.epoch = 0
        self.total_steps = 1

    # -- checkpoints --
    def save(self, path) -> Path:
        return save_checkpoint(path, Checkpoint(
            _state_arrays(self.model, self.optimizer), self.enc_cfg.to_dict(), self.step, self.epoch,
            {"train_config": self.config.to_dict()}))

    @classmethod
    def from_checkpoint(cls, path, config: TrainConfig | None = None) -> "Trainer":
        ckpt = load_checkpoint(path)
        enc = EncoderConfig.from_dict(ckpt.encoder_config)
        if config is None:
            config = TrainConfig.from_dict(ckpt.extra.get("train_config", {}))
        config = dataclasses.replace(config, mode=enc.mode)
        trainer = cls(config, enc.width, enc.height)
        _restore_state(trainer.model, trainer.optimizer, ckpt.arrays)
        trainer.step, trainer.epoch = ckpt.step, ckpt.epoch
        return trainer

    # -- optimisation --
    def compute_loss(self, batch):
        cfg = self.config
        disps = self.model.depth(batch["inp_target"])
        pose_prev = self.model.pose(batch["inp_target"], batch["inp_prev"])
        pose_next = self.model.pose(batch["inp_target"], batch["inp_next"])
        conf = confidence_mask(batch["target"], cfg.tau_strategy, cfg.mask_k) if cfg.use_mask else None
        breakdown, info = self_supervised_loss(
            batch["target"], batch["prev"], batch["next"], disps, pose_prev, pose_next, batch["K"],
            d_min=cfg.d_min, d_max=cfg.d_max, smoothness_weight=cfg.smoothness_weight,
            ssim_alpha=cfg.ssim_alpha, confidence=conf, tie_noise=cfg.tie_noise,
            generator=torch.Generator().manual_seed(cfg.seed * 1_000_003 + self.step))
        info["confidence"] = conf
        info["pose_prev"], info["pose_next"] = pose_prev, pose_next
        return breakdown, info

    def train_step(self, batch) -> TrainLogRecord:
        start = time.perf_counter()
        lr = cosine_lr(min(self.step, self.total_steps), self.total_steps, self.config.lr0)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.model.train()
        breakdown, info = self.compute_loss(batch)
        conf = info["confidence"]
        suppressed = float((conf < 0.5).float().mean()) if conf is not None else 0.0
        record = TrainLogRecord(self.step, self.epoch, lr, breakdown.total.item(), breakdown.photometric.item(),
                                breakdown.smoothness.item(), suppressed, 0.0, info["degenerate"])
        if not all(math.isfinite(v) for v in (record.total, record.photometric, record.smoothness)):
            raise NonFiniteLossError(record)
        self.optimizer.zero_grad(set_to_none=True)
        breakdown.total.backward()
        if self.config.grad_clip:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.config.grad_clip)
        self.optimizer.step()
        self.step += 1
        record.wall_clock = time.perf_counter() - start
        return record

    def batches(self, dataset, epoch: int):
        """Deterministic shuffled, augmented batches for one epoch."""
        cfg = self.config
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(dataset))
        aug_rng = np.random.default_rng([cfg.seed, epoch, 1])
        aug_cfg = AugmentationConfig(cfg.flip_prob, cfg.color_prob, seed=cfg.seed)
        for i in range(0, len(order), cfg.batch_size):
            pairs = []
            for j in order[i:i + cfg.batch_size]:
                t = dataset[j]
                pairs.append(augment(t, aug_cfg, aug_rng) if cfg.augment else (t, t))
            yield collate(pairs)

    def plan(self, n_items: int) -> int:
        per_epoch = math.ceil(n_items / self.config.batch_size)
        total = per_epoch * self.config.epochs
        if self.config.max_steps is not None:
            total = min(total, self.config.max_steps)
        self.total_steps = max(total, 1)
        return total

    def fit(self, dataset, out_dir=None, log_stream=None, checkpoint_every_epoch=True):
        """Run the remaining epochs; returns the list of log records."""
        dataset = list(dataset)
        if not dataset:
            raise ValueError("empty dataset")
        total = self.plan(len(dataset))
        out_dir = Path(out_dir) if out_dir is not None else None
        records = []
        while self.epoch < self.config.epochs and self.step < total:
            for batch in self.batches(dataset, self.epoch):
                if self.step >= total:
                    break
                rec = self.train_step(batch)
                records.append(rec)
                if log_stream is not None:
                    log_stream.write(rec.to_json() + "\n")
                    log_stream.flush()
            self.epoch += 1
            if out_dir is not None and checkpoint_every_epoch:
                self.save(out_dir / f"epoch_{self.epoch:03d}.ckpt")
        if out_dir is not None:
            self.save(out_dir / "final.ckpt")
        return records

    # -- inference --
    @torch.no_grad()
    def predict_depth(self, images: torch.Tensor) -> torch.Tensor:
        self.model.eval()
        disp = self.model.depth(images)[0]
        return disparity_to_depth(disp, self.config.d_min, self.config.d_max)


def train(dataset, config: TrainConfig, out_dir, resume=None) -> Trainer:
    """Train and write ``log.jsonl`` plus per-epoch and final checkpoints to ``out_dir``."""
    dataset = list(dataset)
    if not dataset:
        raise ValueError("empty dataset")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        trainer = Trainer.from_checkpoint(resume, config)
    else:
        h, w = dataset[0].target.shape[-2:]
        trainer = Trainer(config, w, h)
    with open(out_dir / "log.jsonl", "a" if resume is not None else "w") as f:
        trainer.fit(dataset, out_dir, f)
    return trainer


def evaluate_accuracy(predict, dataset, cap=150.0, median_scaling=True):
    """Aggregate metrics over all valid pixels of every target frame.

    ``predict`` maps a ``(1, 3, H, W)`` image to a depth map.
    """
    preds, gts = [], []
    for t in dataset:
        if t.gt_depth is None:
            raise ValueError(f"frame {t.index} has no ground-truth depth")
        depth = predict(t.target.unsqueeze(0))[0]
        p, g = select_pixels(depth, t.gt_depth, cap=cap, median_scaling=median_scaling)
        preds.append(p)
        gts.append(g)
    if not gts:
        raise ValueError("dataset has no frames to evaluate")
    return accuracy_from_pixels(np.concatenate(preds), np.concatenate(gts))


def evaluate(trainer: Trainer, dataset, fps_iters: int = 10, fps_warmup: int = 1, profile: bool = True) -> dict:
    """Accuracy with and without median scaling plus the complexity report."""
    dataset = list(dataset)
    cfg = trainer.config
    out = {
        "accuracy": evaluate_accuracy(trainer.predict_depth, dataset, cfg.eval_cap, True).to_dict(),
        "accuracy_unscaled": evaluate_accuracy(trainer.predict_depth, dataset, cfg.eval_cap, False).to_dict(),
    }
    if profile:
        shape = (1, 3, trainer.enc_cfg.height, trainer.enc_cfg.width)
        out["complexity"] = profile_model(trainer.model, shape, warmup=fps_warmup, iters=fps_iters).to_dict()
    return out

"""Training loop: per-epoch validation, early stopping on validation mIoU,
best-checkpoint persistence, deterministic given the seed."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import CheckpointError, checkpoint_load, checkpoint_save
from .config import TrainConfig
from .data import Sample
from .metrics import EvalReport, evaluate
from .model import GroundingModel
from .optim import AdamOptimizer, DivergenceError, lr_schedule


def _stream(seed: int, lane: int) -> np.random.Generator:
    return np.random.default_rng([seed, lane])


def build_model(cfg: TrainConfig, vocab_size: int, d_video: int) -> GroundingModel:
    model = GroundingModel(cfg, vocab_size, d_video, _stream(cfg.seed, 0))
    model.seed_dropout(_stream(cfg.seed, 1))
    return model


def learning_rate_at(cfg: TrainConfig, epoch: int) -> float:
    if cfg.decays_linearly:
        return lr_schedule(epoch, cfg.epochs, cfg.effective_lr)
    return cfg.effective_lr


def config_payload(cfg: TrainConfig, vocab_size: int, d_video: int) -> dict:
    return {"train_config": cfg.to_dict(), "vocab_size": vocab_size,
            "d_video": d_video}


def save_model(path, model: GroundingModel, vocab_size: int, d_video: int,
               optimizer: AdamOptimizer | None = None):
    params = {name: p.data for name, p in model.named_parameters()}
    opt_state = None
    if optimizer is not None and optimizer.state:
        t, m_list, v_list = optimizer.state_arrays()
        opt_state = (t, dict(zip(optimizer.names, m_list)),
                     dict(zip(optimizer.names, v_list)))
    checkpoint_save(path, config_payload(model.cfg, vocab_size, d_video),
                    params, opt_state)


def load_model(path, expected_payload: dict | None = None):
    """Rebuild the model from a checkpoint; returns (model, payload, opt_state)."""
    payload, params, opt_state = checkpoint_load(path, expected_payload)
    cfg = TrainConfig.from_dict(payload["train_config"])
    model = build_model(cfg, payload["vocab_size"], payload["d_video"])
    own = dict(model.named_parameters())
    if set(own) != set(params):
        missing = sorted(set(own) ^ set(params))
        raise CheckpointError(f"parameter name mismatch: {missing[:5]}")
    for name, tensor in own.items():
        if tensor.data.shape != params[name].shape:
            raise CheckpointError(
                f"shape mismatch for {name}: {tensor.data.shape} vs "
                f"{params[name].shape}")
        tensor.data = params[name]
    model.eval()
    return model, payload, opt_state


def infer(model: GroundingModel, samples: list[Sample]):
    """Ranked moment predictions per sample (main group, last layer)."""
    model.eval()
    return [model.forward_infer(s) for s in samples]


def evaluate_model(model: GroundingModel, samples: list[Sample]) -> EvalReport:
    ranked = infer(model, samples)
    spans = [[(p.start, p.end) for p in preds] for preds in ranked]
    gts = [s.gt.as_tuple() for s in samples]
    return evaluate(spans, gts)


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    best_epoch: int = -1
    best_miou: float = -1.0
    checkpoint_path: str = ""
    stopped_early: bool = False
    wall_seconds: float = 0.0

    def to_dict(self) -> dict:
        return dict(vars(self))


def run_training(train_samples: list[Sample], val_samples: list[Sample],
                 cfg: TrainConfig, out_dir, vocab_size: int, d_video: int,
                 log=lambda msg: None) -> TrainResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "best.ckpt"
    started = time.perf_counter()

    model = build_model(cfg, vocab_size, d_video)
    mask_rng = _stream(cfg.seed, 2)
    noise_rng = _stream(cfg.seed, 3)
    shuffle_rng = _stream(cfg.seed, 4)
    optimizer = AdamOptimizer(sorted(model.named_parameters()),
                              weight_decay=cfg.weight_decay, clip=cfg.grad_clip)

    result = TrainResult(checkpoint_path=str(ckpt_path))
    if cfg.epochs == 0:
        save_model(ckpt_path, model, vocab_size, d_video, optimizer)
        result.wall_seconds = time.perf_counter() - started
        _write_history(out_dir, cfg, result)
        return result

    patience_left = cfg.early_stop_patience
    for epoch in range(cfg.epochs):
        lr = learning_rate_at(cfg, epoch)
        model.train()
        order = shuffle_rng.permutation(len(train_samples))
        epoch_losses = []
        for b0 in range(0, len(order), cfg.batch_size):
            batch = order[b0:b0 + cfg.batch_size]
            optimizer.zero_grad()
            for idx in batch:
                loss = model.forward_train(train_samples[idx], mask_rng, noise_rng)
                value = loss.item()
                if not np.isfinite(value):
                    raise DivergenceError(
                        f"loss diverged at epoch {epoch}, sample {idx}: {value}")
                ad.backward(ad.scalar_mul(loss, 1.0 / len(batch)))
                epoch_losses.append(value)
            try:
                optimizer.step(lr)
            except DivergenceError as exc:
                raise DivergenceError(
                    f"epoch {epoch}, batch at {b0}: {exc}") from exc

        model.eval()
        report = evaluate_model(model, val_samples)
        entry = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": float(np.mean(epoch_losses)),
            "val_miou": report.miou,
            **{f"val_r1_iou_{mu:g}": v for mu, v in sorted(report.recalls.items())},
        }
        result.history.append(entry)
        log(f"epoch {epoch:3d}  lr {lr:.2e}  loss {entry['train_loss']:.4f}  "
            f"val mIoU {report.miou:.2f}  "
            + "  ".join(f"R@1@{mu:g} {v:.1f}" for mu, v in sorted(report.recalls.items())))

        if report.miou > result.best_miou:
            result.best_miou = report.miou
            result.best_epoch = epoch
            patience_left = cfg.early_stop_patience
            save_model(ckpt_path, model, vocab_size, d_video, optimizer)
        else:
            patience_left -= 1
            if patience_left <= 0:
                result.stopped_early = True
                log(f"early stop at epoch {epoch} "
                    f"(best mIoU {result.best_miou:.2f} @ {result.best_epoch})")
                break

    result.wall_seconds = time.perf_counter() - started
    _write_history(out_dir, cfg, result)
    return result


def _write_history(out_dir: Path, cfg: TrainConfig, result: TrainResult):
    with open(out_dir / "metrics.json", "w") as fh:
        json.dump({"config": cfg.to_dict(), **result.to_dict()}, fh,
                  indent=2, sort_keys=True)

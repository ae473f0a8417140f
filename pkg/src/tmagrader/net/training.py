"""Training loop: seeded batching, optional augmentation, validation Dice
tracking, and best-checkpoint persistence."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..metrics import mean_dice
from ..postprocess import argmax_labels
from ..preprocess import CohortStats, augment_case, normalize_zscore
from .adam import AdamState, adam_step
from .network import UNetConfig, UNetParams, backward, forward, init_params, loss_xent
from .weights_io import save_weights


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 2
    epochs: int = 1
    seed: int = 0
    augment: bool = False
    max_steps: int = 0  # 0 = no cap

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epsilon <= 0 or self.batch_size < 1:
            raise ValueError("learning_rate, epsilon, batch_size must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1/beta2 must lie in (0,1)")
        if self.epochs < 0 or self.max_steps < 0:
            raise ValueError("epochs and max_steps must be non-negative")


@dataclass
class EpochLog:
    epoch: int
    step: int
    train_loss: float
    val_dice: float


@dataclass
class FitResult:
    params: UNetParams
    best_params: UNetParams
    log: list[EpochLog] = field(default_factory=list)
    best_val_dice: float = float("nan")
    best_epoch: int = -1
    steps: int = 0


def _validation_dice(params: UNetParams, val_pairs) -> float:
    if not val_pairs:
        return float("nan")
    scores = []
    for image, target in val_pairs:
        probs = forward(params, image[None])[0]
        scores.append(mean_dice(argmax_labels(probs), argmax_labels(target)))
    return float(np.mean(scores))


def fit(
    train_pairs: list[tuple[np.ndarray, np.ndarray]],
    val_pairs: list[tuple[np.ndarray, np.ndarray]],
    net_config: UNetConfig,
    train_config: TrainConfig,
    init: UNetParams | str = "random",
    checkpoint_dir: str | Path | None = None,
    start_epoch: int = 0,
    adam_state: AdamState | None = None,
    start_step: int = 0,
) -> FitResult:
    """Train on (normalized canvas image, soft target) pairs.

    Deterministic given the seed: the case order of epoch e is drawn from
    generator seed (seed, e), and augmentation of case i in epoch e from
    (seed, e, i), so a run resumed from a checkpoint at epoch e reproduces
    the uninterrupted run exactly.
    """
    if not train_pairs:
        raise ValueError("training cohort is empty")
    cfg = train_config
    params = init_params(net_config, cfg.seed) if init == "random" else init
    if not isinstance(params, UNetParams):
        raise TypeError("init must be 'random' or UNetParams")
    state = adam_state if adam_state is not None else AdamState.zeros_like(params)
    result = FitResult(params=params, best_params=params.copy(), steps=start_step)
    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if checkpoint_dir is not None:
        checkpoint_dir.mkdir(parents=True, exist_ok=True)

    step = start_step
    for epoch in range(start_epoch, cfg.epochs):
        order = np.random.default_rng((cfg.seed, epoch)).permutation(len(train_pairs))
        losses = []
        stop = False
        for lo in range(0, len(order), cfg.batch_size):
            if cfg.max_steps and step >= cfg.max_steps:
                stop = True
                break
            idxs = order[lo : lo + cfg.batch_size]
            xs, ts = [], []
            for i in idxs:
                image, target = train_pairs[i]
                if cfg.augment:
                    image, target = augment_case(image, target, (cfg.seed, epoch, int(i)))
                xs.append(image)
                ts.append(target)
            x = np.stack(xs).astype(params.dtype)
            t = np.stack(ts).astype(params.dtype)
            probs, caches = forward(params, x, mode="train", return_cache=True)
            loss = loss_xent(probs, t)
            grads = backward(params, caches, t)
            step += 1
            adam_step(
                params, grads, state, step,
                cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon,
            )
            losses.append(loss)
        val_dice = _validation_dice(params, val_pairs)
        mean_loss = float(np.mean(losses)) if losses else float("nan")
        result.log.append(EpochLog(epoch, step, mean_loss, val_dice))
        improved = not np.isnan(val_dice) and (
            np.isnan(result.best_val_dice) or val_dice > result.best_val_dice
        )
        if improved or result.best_epoch < 0:
            result.best_val_dice = val_dice
            result.best_epoch = epoch
            result.best_params = params.copy()
            if checkpoint_dir is not None:
                save_weights(result.best_params, checkpoint_dir / "best.tmaw")
        if checkpoint_dir is not None:
            save_weights(params, checkpoint_dir / "last.tmaw", adam_state=state, step=step)
        if stop:
            break
    result.params = params
    result.steps = step
    return result


def predict_soft(
    params: UNetParams, image: np.ndarray, stats: CohortStats | None = None
) -> np.ndarray:
    """Inference-mode probabilities for one canvas image (H, W, 3)."""
    if stats is not None:
        image = normalize_zscore(image, stats)
    return forward(params, image[None].astype(params.dtype))[0]

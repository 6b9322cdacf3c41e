"""Least-squares adversarial training with an L1 reconstruction term."""

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import structlog

from audio_pipeline import UtterancePair, preemphasize, segment_for_training
from checkpoints import Checkpoint, CheckpointStore, pack_networks
from config import rng_stream
from errors import DivergedLoss, EmptyDataset, IoFailure, ShapeMismatch
from models import TrainConfig, TrainRecord
from segan_model import (
    Discriminator,
    Generator,
    init_vbn_reference,
    refresh_spectral,
    sample_latent,
)

logger = structlog.get_logger()

TrainLog = List[TrainRecord]


@dataclass
class OptimState:
    """RMSprop running mean squares, one per parameter name."""
    acc: Dict[str, np.ndarray] = field(default_factory=dict)
    steps: int = 0


# ---------------------------------------------------------------------------
# Objectives on discriminator scores
# ---------------------------------------------------------------------------

def lsgan_d_objective(real_scores: np.ndarray, fake_scores: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
    """1/2 E[(D(x, x~) - 1)^2] + 1/2 E[D(x^, x~)^2] and its score gradients."""
    real = np.atleast_1d(real_scores)
    fake = np.atleast_1d(fake_scores)
    loss = 0.5 * np.mean((real - 1.0) ** 2) + 0.5 * np.mean(fake ** 2)
    return float(loss), (real - 1.0) / real.size, fake / fake.size


def lsgan_g_objective(fake_scores: np.ndarray) -> Tuple[float, np.ndarray]:
    """1/2 E[(D(x^, x~) - 1)^2] and its score gradient."""
    fake = np.atleast_1d(fake_scores)
    return float(0.5 * np.mean((fake - 1.0) ** 2)), (fake - 1.0) / fake.size


def l1_term(enhanced: np.ndarray, clean: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean absolute error per segment, averaged over the batch."""
    if enhanced.shape != clean.shape:
        raise ShapeMismatch(f"enhanced {enhanced.shape} vs clean {clean.shape}")
    diff = enhanced - clean
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


def d_loss(
    disc: Discriminator,
    clean: np.ndarray,
    noisy: np.ndarray,
    enhanced: np.ndarray,
    training: bool = True
) -> float:
    real = disc.forward(clean, noisy, training)
    fake = disc.forward(enhanced, noisy, training)
    return lsgan_d_objective(real, fake)[0]


def g_loss(
    disc: Discriminator,
    enhanced: np.ndarray,
    noisy: np.ndarray,
    clean: np.ndarray,
    lambda_l1: float,
    training: bool = True
) -> float:
    adv, _ = lsgan_g_objective(disc.forward(enhanced, noisy, training))
    l1, _ = l1_term(enhanced, clean)
    return adv + lambda_l1 * l1


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

def rmsprop_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    state: OptimState,
    cfg: TrainConfig
) -> Tuple[Dict[str, np.ndarray], OptimState]:
    """
    acc <- decay * acc + (1 - decay) * g^2;  p <- p - lr * g / sqrt(acc + eps).

    Parameters are updated in place; names without a gradient are left alone.
    """
    decay = cfg.rmsprop_decay
    for name, grad in grads.items():
        if name not in params:
            continue
        acc = state.acc.get(name)
        if acc is None:
            acc = state.acc[name] = np.zeros_like(params[name])
        acc *= decay
        acc += (1.0 - decay) * grad ** 2
        params[name] -= cfg.lr * grad / np.sqrt(acc + cfg.rmsprop_eps)
    state.steps += 1
    return params, state


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def training_segments(dataset: Sequence[UtterancePair], window: int, overlap: Optional[float] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Pre-emphasised (clean, noisy) training windows of every utterance."""
    clean, noisy = [], []
    for pair in dataset:
        clean.append(segment_for_training(preemphasize(pair.clean), window, overlap).segments)
        noisy.append(segment_for_training(preemphasize(pair.noisy), window, overlap).segments)
    return np.concatenate(clean), np.concatenate(noisy)


class AdversarialTrainer:
    """Alternating D/G updates over a fixed pool of training windows."""

    def __init__(
        self,
        gen: Generator,
        disc: Discriminator,
        tcfg: TrainConfig,
        checkpoint_dir: Optional[Union[str, Path]] = None
    ):
        self.gen = gen
        self.disc = disc
        self.tcfg = tcfg
        self.g_optim = OptimState()
        self.d_optim = OptimState()
        self.step = 0
        self.log: TrainLog = []
        self.store = CheckpointStore(checkpoint_dir, tcfg.keep_checkpoints) if checkpoint_dir else None
        self._latent = rng_stream(tcfg.seed, "latent")

    def snapshot(self) -> Checkpoint:
        return Checkpoint(
            model_config=self.gen.cfg,
            step=self.step,
            train_config=self.tcfg,
            arrays=pack_networks(self.gen, self.disc, self.g_optim, self.d_optim),
        )

    def train_step(self, clean: np.ndarray, noisy: np.ndarray, epoch: int) -> TrainRecord:
        """One D update on real and fake pairs, then one G update."""
        gen, disc, tcfg = self.gen, self.disc, self.tcfg
        batch = clean.shape[0]
        betas = gen.betas() + disc.betas()
        refresh_spectral(gen)
        refresh_spectral(disc)

        z = sample_latent(gen.cfg, self._latent, batch=batch)
        enhanced, g_backward, _ = gen.forward_vjp(noisy, z)

        scores, d_backward = disc.forward_vjp(
            np.concatenate([clean, enhanced]), np.concatenate([noisy, noisy]), training=True
        )
        d_value, d_real, d_fake = lsgan_d_objective(scores[:batch], scores[batch:])
        d_grads, _ = d_backward(np.concatenate([d_real, d_fake]))
        rmsprop_step(disc.params, d_grads, self.d_optim, tcfg)

        fake_scores, d_backward = disc.forward_vjp(enhanced, noisy, training=True)
        g_adv, d_fake = lsgan_g_objective(fake_scores)
        _, d_pair = d_backward(d_fake)
        g_l1, d_l1 = l1_term(enhanced, clean)
        g_grads, _ = g_backward(d_pair[..., 0] + tcfg.lambda_l1 * d_l1)
        rmsprop_step(gen.params, g_grads, self.g_optim, tcfg)

        self.step += 1
        return TrainRecord(
            step=self.step,
            epoch=epoch,
            d_loss=d_value,
            g_adv=g_adv,
            g_l1=g_l1,
            betas=betas,
        )

    def run(self, dataset: Sequence[UtterancePair]) -> Tuple[Checkpoint, TrainLog]:
        if not dataset:
            raise EmptyDataset("training needs at least one utterance pair")
        tcfg = self.tcfg
        clean, noisy = training_segments(dataset, self.gen.cfg.scaled_input_len)
        shuffle = rng_stream(tcfg.seed, "shuffle")
        total = tcfg.max_steps or tcfg.epochs * -(-clean.shape[0] // tcfg.batch_size)

        logger.info("training_started", segments=int(clean.shape[0]), batch_size=tcfg.batch_size,
                    epochs=tcfg.epochs, max_steps=total, attention=self.gen.cfg.attention_layers)

        for epoch in range(1, tcfg.epochs + 1):
            order = shuffle.permutation(clean.shape[0])
            for start in range(0, order.size, tcfg.batch_size):
                idx = order[start:start + tcfg.batch_size]
                if not self.disc.reference_ready:
                    init_vbn_reference(self.disc, clean[idx], noisy[idx])

                record = self.train_step(clean[idx], noisy[idx], epoch)
                self.log.append(record)
                if not record.is_finite():
                    logger.error("loss_diverged", **record.model_dump())
                    raise DivergedLoss(record, self.log)
                if record.step % tcfg.log_every == 0:
                    logger.info("step_completed", step=record.step, epoch=epoch, d_loss=record.d_loss,
                                g_adv=record.g_adv, g_l1=record.g_l1)
                if self.store and record.step % tcfg.checkpoint_every == 0:
                    self.store.save(self.snapshot())
                if self.step >= total:
                    break
            if self.step >= total:
                break

        final = self.snapshot()
        if self.store and not self.store.path_for(self.step).exists():
            self.store.save(final)
        logger.info("training_finished", steps=self.step, g_l1=self.log[-1].g_l1 if self.log else None)
        return final, self.log


def train(
    gen: Generator,
    disc: Discriminator,
    dataset: Sequence[UtterancePair],
    tcfg: TrainConfig,
    checkpoint_dir: Optional[Union[str, Path]] = None
) -> Tuple[Checkpoint, TrainLog]:
    """
    Train G and D in place.

    Raises:
        EmptyDataset: no utterance pairs
        DivergedLoss: a logged value became NaN/Inf
    """
    return AdversarialTrainer(gen, disc, tcfg, checkpoint_dir).run(dataset)


def write_train_log_csv(path: Union[str, Path], log: Sequence[TrainRecord]) -> Path:
    """`step,d_loss,g_adv,g_l1,beta_0,...` with one row per step."""
    path = Path(path)
    n_betas = max((len(r.betas) for r in log), default=0)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["step", "d_loss", "g_adv", "g_l1"] + [f"beta_{i}" for i in range(n_betas)])
            for r in log:
                writer.writerow([r.step, repr(r.d_loss), repr(r.g_adv), repr(r.g_l1)] + [repr(b) for b in r.betas])
    except OSError as e:
        raise IoFailure(f"{path}: {e}") from e
    return path

"""Training loops: ERM, adversarial, and shared adversarial training.

The objective is sigma * mean(perturbed loss) + (1 - sigma) * mean(clean
loss), optimized with SGD plus momentum and weight decay. Perturbations
are regenerated for every mini-batch against the pre-update parameters.
All randomness (shuffling, attack inits) derives from split streams of the
config seed, so identical configs reproduce bit-identical parameters, and
sigma = 0 runs never touch the attack stream and match plain ERM exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import attacks as A
from . import models as M
from .rng import RngStream

DEFENSE_MODES = ("erm", "adv", "shared")


class TrainingDiverged(RuntimeError):
    """Raised when a non-finite loss or update aborts training."""

    def __init__(self, message: str, epoch: int, batch: int):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainConfig:
    sigma: float = 0.0
    epochs: int = 10
    batch_size: int = 32
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    milestones: dict[int, float] = field(default_factory=dict)  # epoch -> lr factor
    seed: int = 0
    defense: str = "erm"
    sharedness: int = 1
    attack_eps: float = 0.0
    attack_steps: int = 4
    attack_step_frac: float = 0.5  # constant alpha_k = frac * eps
    smoothing: float = 0.1
    kappa: float | None = M.DEFAULT_KAPPA
    kappa_in_objective: bool = True  # threshold the perturbed training term too

    def __post_init__(self):
        if not 0.0 <= self.sigma <= 1.0:
            raise ValueError("sigma must lie in [0, 1]")
        if self.defense not in DEFENSE_MODES:
            raise ValueError(f"unknown defense mode {self.defense!r}")
        if self.defense == "shared" and self.sharedness > self.batch_size:
            raise ValueError("sharedness cannot exceed the batch size")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be >= 1")


@dataclass
class EpochStats:
    epoch: int
    clean_loss: float
    adv_loss: float | None
    clean_acc: float
    lr: float


@dataclass
class TrainHistory:
    epochs: list[EpochStats] = field(default_factory=list)


def mixed_loss(clean_losses: np.ndarray | None, perturbed_losses: np.ndarray | None,
               sigma: float) -> float:
    """sigma * mean(perturbed) + (1 - sigma) * mean(clean).

    sigma = 0 needs no perturbed losses, sigma = 1 no clean ones.
    """
    if not 0.0 <= sigma <= 1.0:
        raise ValueError("sigma must lie in [0, 1]")
    if sigma == 0.0:
        return float(np.mean(clean_losses))
    if sigma == 1.0:
        return float(np.mean(perturbed_losses))
    return float(sigma * np.mean(perturbed_losses) + (1.0 - sigma) * np.mean(clean_losses))


def sgd_step(params: M.Params, grads: M.Params, lr: float, momentum: float,
             weight_decay: float, state: M.Params | None) -> tuple[M.Params, M.Params]:
    """One SGD update: v <- momentum*v + (g + wd*p); p <- p - lr*v."""
    if state is None:
        state = {k: np.zeros_like(v) for k, v in params.items()}
    new_params: M.Params = {}
    new_state: M.Params = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        v = momentum * state[name] + (g + weight_decay * p)
        p2 = p - p.dtype.type(lr) * v
        if not np.all(np.isfinite(p2)):
            raise FloatingPointError(f"non-finite update for parameter {name}")
        new_params[name] = p2
        new_state[name] = v
    return new_params, new_state


def _combine_grads(clean: M.Params | None, pert: M.Params | None, sigma: float,
                   names) -> M.Params:
    if sigma == 0.0:
        return {k: clean[k] for k in names}
    if sigma == 1.0:
        return {k: pert[k] for k in names}
    out: M.Params = {}
    for k in names:
        s = clean[k].dtype.type
        out[k] = s(sigma) * pert[k] + s(1.0 - sigma) * clean[k]
    return out


def train(spec: M.ModelSpec, params: M.Params, x: np.ndarray, y: np.ndarray,
          domain: tuple[float, float], cfg: TrainConfig,
          on_epoch=None) -> tuple[M.Params, TrainHistory]:
    """Train on (x, y) under the configured defense; returns final params.

    ``on_epoch(epoch, params, stats)`` is invoked after every epoch when
    given (used for checkpointing). Raises :class:`TrainingDiverged` on a
    non-finite loss.
    """
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty dataset")
    params = {k: v.copy() for k, v in params.items()}
    root = RngStream(cfg.seed)
    shuffle_rng = root.split()
    attack_root = root.split()

    state: M.Params | None = None
    lr = cfg.lr
    history = TrainHistory()
    attack_on = cfg.defense != "erm" and cfg.sigma > 0.0
    clean_cfg = M.LossConfig(smoothing=cfg.smoothing, kappa=None)
    pert_cfg = M.LossConfig(smoothing=cfg.smoothing,
                            kappa=cfg.kappa if cfg.kappa_in_objective else None)
    attack_cfg = M.LossConfig(smoothing=cfg.smoothing, kappa=cfg.kappa)
    ball = A.NormBall(cfg.attack_eps, domain[0], domain[1])
    schedule = A.ConstantSchedule(cfg.attack_step_frac * cfg.attack_eps)

    for epoch in range(cfg.epochs):
        if epoch in cfg.milestones:
            lr *= cfg.milestones[epoch]
        perm = shuffle_rng.permutation(n)
        loss_sum = 0.0
        adv_sum = 0.0
        hit_sum = 0.0
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            take = perm[start:start + cfg.batch_size]
            xb, yb = x[take], y[take]
            targets = M.smooth_labels(yb, spec.num_classes, cfg.smoothing, dtype=x.dtype)
            sigma = cfg.sigma if attack_on else 0.0

            # Clean pass: always needed for epoch metrics, and for the
            # gradient whenever the clean term carries weight.
            clean_logits = M.forward(spec, params, xb)
            clean_mean = float(M.cross_entropy(clean_logits, targets).mean())
            if not np.isfinite(clean_mean):
                raise TrainingDiverged("clean loss is non-finite", epoch, bi)
            clean_grads = None
            if sigma < 1.0:
                clean_grads = M.backward(spec, params, xb, targets, clean_cfg).dparams

            pert_grads = None
            if attack_on:
                s = cfg.sharedness if cfg.defense == "shared" else 1
                plan = A.HeapPlan(batch_size=xb.shape[0], sharedness=min(s, xb.shape[0]))
                pert = A.shared_pgd_attack(spec, params, xb, yb, ball, schedule,
                                           cfg.attack_steps, A.Untargeted(), attack_cfg,
                                           plan, attack_root.split())
                pert_bundle = M.backward(spec, params, xb + pert.broadcast(),
                                         targets, pert_cfg)
                if not np.isfinite(pert_bundle.mean_loss):
                    raise TrainingDiverged("perturbed loss is non-finite", epoch, bi)
                pert_grads = pert_bundle.dparams
                adv_sum += pert_bundle.mean_loss * (xb.shape[0] / n)

            batch_w = xb.shape[0] / n
            loss_sum += clean_mean * batch_w
            hit_sum += M.accuracy(clean_logits, yb) * batch_w

            grads = _combine_grads(clean_grads, pert_grads, sigma, params.keys())
            try:
                params, state = sgd_step(params, grads, lr, cfg.momentum,
                                         cfg.weight_decay, state)
            except FloatingPointError as exc:
                raise TrainingDiverged(str(exc), epoch, bi) from exc

        stats = EpochStats(epoch=epoch, clean_loss=loss_sum,
                           adv_loss=adv_sum if attack_on else None,
                           clean_acc=hit_sum, lr=lr)
        history.epochs.append(stats)
        if on_epoch is not None:
            on_epoch(epoch, params, stats)
    return params, history

"""Sign-gradient attacks: per-example, heap-shared, and universal.

All three adversaries run the same projected ascent loop. A mini-batch is
partitioned into contiguous heaps; each heap optimizes one perturbation
against the mean of its members' thresholded losses (mean-then-sign, not
sign-then-mean), and the result is broadcast back to every member. The
per-example attack is the degenerate case with one-element heaps, and the
universal attack iterates the same update over fresh samples drawn from a
data source each step.

Projection keeps a perturbation inside the max-norm ball and keeps every
member's perturbed input inside the data domain; for shared perturbations
the domain constraint is enforced against the heap's elementwise min/max
envelope, which is exactly the intersection of the members' constraints.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import models as M
from .rng import RngStream
from .tensor import ShapeMismatch, clamp, require_finite, sign


@dataclass(frozen=True)
class NormBall:
    """Max-norm budget eps plus the valid input domain [lo, hi]."""

    eps: float
    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self):
        if self.eps < 0:
            raise ValueError("eps must be >= 0")
        if self.lo >= self.hi:
            raise ValueError("domain bounds must satisfy lo < hi")


@dataclass(frozen=True)
class ConstantSchedule:
    alpha: float


@dataclass(frozen=True)
class GeometricSchedule:
    """Annealed steps alpha_k = beta*eps*gamma^k / sum_j gamma^j; the sum of
    all steps equals beta*eps by construction."""

    beta: float
    gamma: float
    steps: int

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


Schedule = ConstantSchedule | GeometricSchedule


def schedule_alpha(schedule: Schedule, eps: float, k: int) -> float:
    """Step size for iteration k."""
    if isinstance(schedule, ConstantSchedule):
        return schedule.alpha
    if not 0 <= k < schedule.steps:
        raise ValueError(f"step index {k} outside [0, {schedule.steps})")
    denom = sum(schedule.gamma ** j for j in range(schedule.steps))
    return schedule.beta * eps * schedule.gamma ** k / denom


@dataclass(frozen=True)
class Untargeted:
    """Ascend the thresholded loss of the batch's own labels."""


@dataclass(frozen=True)
class Targeted:
    """Descend the loss toward a target class or target label map.

    ``target`` is broadcast over the batch: a scalar class, a per-example
    class vector, or one [H, W] map shared by every image.
    """

    target: np.ndarray

    def __init__(self, target):
        object.__setattr__(self, "target", np.asarray(target))


AttackGoal = Untargeted | Targeted


@dataclass(frozen=True)
class HeapPlan:
    """Contiguous partition of a batch into heaps of `sharedness` members.

    The last heap is smaller when the batch size is not a multiple. With
    ``hierarchical`` set, both sizes must be powers of two so that doubling
    the sharedness merges exactly two adjacent heaps.
    """

    batch_size: int
    sharedness: int
    hierarchical: bool = False

    def __post_init__(self):
        if self.batch_size < 1 or self.sharedness < 1:
            raise ValueError("batch size and sharedness must be >= 1")
        if self.sharedness > self.batch_size:
            raise ValueError("sharedness cannot exceed the batch size")
        if self.hierarchical:
            if self.batch_size & (self.batch_size - 1) or self.sharedness & (self.sharedness - 1):
                raise ValueError("hierarchical heaps need power-of-two batch size and sharedness")

    @property
    def n_heaps(self) -> int:
        return -(-self.batch_size // self.sharedness)

    def heap_index(self) -> np.ndarray:
        return np.arange(self.batch_size) // self.sharedness

    def heap_starts(self) -> np.ndarray:
        return np.arange(self.n_heaps) * self.sharedness


@dataclass
class SharedPerturbation:
    """One perturbation per heap plus the plan used to broadcast it."""

    heap_xi: np.ndarray
    plan: HeapPlan

    def broadcast(self) -> np.ndarray:
        """Repeat each heap's perturbation for all of its members."""
        return self.heap_xi[self.plan.heap_index()]


def _project_envelope(xi: np.ndarray, x_lo: np.ndarray, x_hi: np.ndarray,
                      ball: NormBall) -> np.ndarray:
    # Ball clamp followed by domain clamp collapses to one clip onto the
    # interval intersection (both intervals contain 0, so it is nonempty).
    lo = np.maximum(-ball.eps, ball.lo - x_lo)
    hi = np.minimum(ball.eps, ball.hi - x_hi)
    return np.clip(xi, lo.astype(xi.dtype), hi.astype(xi.dtype))


def project(xi: np.ndarray, x: np.ndarray, ball: NormBall) -> np.ndarray:
    """Clamp xi into the eps ball, then clamp x + xi into the domain."""
    if xi.shape != x.shape:
        raise ShapeMismatch(f"perturbation {xi.shape} vs inputs {x.shape}")
    return _project_envelope(xi, x, x, ball)


def _resolve_goal(goal: AttackGoal, y: np.ndarray | None, batch_shape: tuple,
                  spec: M.ModelSpec, loss_cfg: M.LossConfig, dtype):
    """Targets, loss threshold, and step direction for one attack."""
    d = batch_shape[0]
    if isinstance(goal, Untargeted):
        if y is None:
            raise ValueError("untargeted attacks need labels")
        labels = np.asarray(y)
        direction = 1.0
        kappa = loss_cfg.kappa
    else:
        t = goal.target
        if spec.kind == "dense_predictor":
            if t.ndim == 2:
                t = np.broadcast_to(t, (d, *t.shape))
        elif t.ndim == 0:
            t = np.broadcast_to(t, (d,))
        labels = t
        direction = -1.0
        kappa = None  # loss thresholding is not used for targeted attacks
    expected = spec.logits_shape(d)[:-1]
    if labels.shape != expected:
        raise ShapeMismatch(f"goal labels {labels.shape} vs decisions {expected}")
    targets = M.smooth_labels(labels, spec.num_classes, loss_cfg.smoothing, dtype=dtype)
    return targets, kappa, direction


def shared_pgd_attack(spec: M.ModelSpec, params: M.Params, x: np.ndarray,
                      y: np.ndarray | None, ball: NormBall, schedule: Schedule,
                      steps: int, goal: AttackGoal, loss_cfg: M.LossConfig,
                      plan: HeapPlan, rng: RngStream,
                      init: str = "random") -> SharedPerturbation:
    """Heap-shared PGD: one perturbation per heap of `plan.sharedness` inputs.

    Each step averages the members' loss gradients (by summing, which has
    the same sign), takes the elementwise sign, applies the scheduled step,
    and projects onto the ball and the heap's domain envelope.
    """
    if x.shape[0] != plan.batch_size:
        raise ShapeMismatch(f"batch size {x.shape[0]} vs plan {plan.batch_size}")
    require_finite(x, "attack inputs")
    dtype = x.dtype
    targets, kappa, direction = _resolve_goal(goal, y, x.shape, spec, loss_cfg, dtype)
    step_cfg = M.LossConfig(smoothing=loss_cfg.smoothing, kappa=kappa)

    starts = plan.heap_starts()
    x_lo = np.minimum.reduceat(x, starts, axis=0)
    x_hi = np.maximum.reduceat(x, starts, axis=0)

    init_rng = rng.split()
    if init == "random":
        xi = init_rng.uniform((plan.n_heaps, *x.shape[1:]), -ball.eps, ball.eps, dtype=dtype)
    elif init == "zero":
        xi = np.zeros((plan.n_heaps, *x.shape[1:]), dtype=dtype)
    else:
        raise ValueError(f"unknown init mode {init!r}")
    xi = _project_envelope(xi, x_lo, x_hi, ball)

    idx = plan.heap_index()
    for k in range(steps):
        alpha = schedule_alpha(schedule, ball.eps, k)
        bundle = M.backward(spec, params, x + xi[idx], targets, step_cfg)
        heap_grad = np.add.reduceat(bundle.dx, starts, axis=0)
        xi = xi + dtype.type(direction * alpha) * sign(heap_grad)
        xi = _project_envelope(xi, x_lo, x_hi, ball)
    return SharedPerturbation(heap_xi=xi, plan=plan)


def pgd_attack(spec: M.ModelSpec, params: M.Params, x: np.ndarray,
               y: np.ndarray | None, ball: NormBall, schedule: Schedule,
               steps: int, goal: AttackGoal, loss_cfg: M.LossConfig,
               rng: RngStream, init: str = "random") -> np.ndarray:
    """Per-example PGD; the sharedness-1 case of the heap attack."""
    plan = HeapPlan(batch_size=x.shape[0], sharedness=1)
    result = shared_pgd_attack(spec, params, x, y, ball, schedule, steps,
                               goal, loss_cfg, plan, rng, init=init)
    return result.heap_xi


@dataclass
class UniversalAttackConfig:
    """Stochastic PGD settings: data source, iteration count, schedule,
    per-iteration sample count, and the randomness stream."""

    inputs: np.ndarray
    labels: np.ndarray | None
    steps: int
    schedule: Schedule
    sample_size: int
    rng: RngStream

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.sample_size < 1:
            raise ValueError("sample size must be >= 1")
        if self.inputs.shape[0] == 0:
            raise ValueError("empty data source")
        if self.sample_size > self.inputs.shape[0]:
            raise ValueError("sample size exceeds the data source")


def universal_attack(spec: M.ModelSpec, params: M.Params, cfg: UniversalAttackConfig,
                     ball: NormBall, goal: AttackGoal, loss_cfg: M.LossConfig,
                     init: str = "random") -> np.ndarray:
    """One perturbation for the whole data distribution via stochastic PGD.

    Every iteration samples `sample_size` points without replacement within
    a shuffled cycle and steps along the sign of their mean loss gradient.
    The perturbation itself is confined to the max-norm ball; the domain
    constraint is enforced where the perturbation is applied, by clamping
    the perturbed sample before each gradient evaluation (an input-agnostic
    perturbation cannot satisfy per-input domain slack for a whole data
    source without collapsing to zero).
    """
    x_all = cfg.inputs
    require_finite(x_all, "attack data")
    dtype = x_all.dtype
    n = x_all.shape[0]

    init_rng = cfg.rng.split()
    sample_rng = cfg.rng.split()

    if init == "random":
        xi = init_rng.uniform((1, *x_all.shape[1:]), -ball.eps, ball.eps, dtype=dtype)
    else:
        xi = np.zeros((1, *x_all.shape[1:]), dtype=dtype)

    order = np.arange(n)
    pos = n  # force a shuffle before the first draw
    for k in range(cfg.steps):
        if pos + cfg.sample_size > n:
            order = sample_rng.permutation(n)
            pos = 0
        take = order[pos:pos + cfg.sample_size]
        pos += cfg.sample_size
        xb = x_all[take]
        yb = None if cfg.labels is None else np.asarray(cfg.labels)[take]
        targets, kappa, direction = _resolve_goal(goal, yb, xb.shape, spec, loss_cfg, dtype)
        step_cfg = M.LossConfig(smoothing=loss_cfg.smoothing, kappa=kappa)

        alpha = schedule_alpha(cfg.schedule, ball.eps, k)
        bundle = M.backward(spec, params, clamp(xb + xi, ball.lo, ball.hi),
                            targets, step_cfg)
        grad = bundle.dx.sum(axis=0, keepdims=True)
        xi = xi + dtype.type(direction * alpha) * sign(grad)
        xi = clamp(xi, -ball.eps, ball.eps)
    return xi[0]


@dataclass
class FoolingReport:
    """Attack success summary; mean_pixel_accuracy is None unless dense."""

    rate: float
    n: int
    mean_pixel_accuracy: float | None = None


def fooling_rate(spec: M.ModelSpec, params: M.Params, x: np.ndarray, y: np.ndarray,
                 xi: np.ndarray, goal: AttackGoal, ball: NormBall,
                 delta: float | None = None) -> FoolingReport:
    """Success rate of a perturbation on a dataset.

    Untargeted classification: fraction misclassified. Targeted
    classification: fraction predicted as the target. Targeted dense
    prediction: fraction of images whose pixel accuracy against the target
    map exceeds `delta`, alongside the mean pixel accuracy. Untargeted dense
    prediction: fraction of pixel decisions misclassified.
    """
    xi = np.asarray(xi, dtype=x.dtype)
    if xi.shape == x.shape[1:]:
        xb = x + xi[None]
    elif xi.shape == x.shape:
        xb = x + xi
    else:
        raise ShapeMismatch(f"perturbation {xi.shape} vs inputs {x.shape}")
    xb = clamp(xb, ball.lo, ball.hi)
    pred = M.predict(M.forward(spec, params, xb))
    n = x.shape[0]

    if spec.kind == "dense_predictor":
        if isinstance(goal, Targeted):
            if delta is None:
                raise ValueError("targeted dense prediction needs the success threshold delta")
            target = goal.target
            if target.ndim == 2:
                target = np.broadcast_to(target, pred.shape)
            per_image = (pred == target).mean(axis=(1, 2))
            return FoolingReport(rate=float((per_image > delta).mean()), n=n,
                                 mean_pixel_accuracy=float(per_image.mean()))
        per_image = (pred != np.asarray(y)).mean(axis=(1, 2))
        return FoolingReport(rate=float(per_image.mean()), n=n,
                             mean_pixel_accuracy=float(1.0 - per_image.mean()))

    if isinstance(goal, Targeted):
        target = np.broadcast_to(goal.target, (n,))
        return FoolingReport(rate=float((pred == target).mean()), n=n)
    return FoolingReport(rate=float((pred != np.asarray(y)).mean()), n=n)

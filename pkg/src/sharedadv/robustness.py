"""Empirical risk estimators and the bisection robustness search.

Robustness is quantified as the smallest max-norm budget at which an
attack achieves a required success rate, found by bisection on the budget
with a strong annealed attack at every probe. Returned values are upper
bounds on the true robustness: a stronger attack could only lower them.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import attacks as A
from . import models as M
from .rng import RngStream


@dataclass
class AttackTemplate:
    """Evaluation-attack settings shared by all probes of one query."""

    steps: int = 200
    beta: float = 4.0
    gamma: float = 0.975
    sample_size: int = 16
    goal: A.AttackGoal = field(default_factory=A.Untargeted)
    loss_cfg: M.LossConfig = field(default_factory=lambda: M.LossConfig(smoothing=0.0))

    def schedule(self) -> A.GeometricSchedule:
        return A.GeometricSchedule(self.beta, self.gamma, self.steps)


@dataclass
class RobustnessQuery:
    """One robustness question: mode, required rate, budget interval, data."""

    delta: float
    iterations: int
    eps_lo: float
    eps_hi: float
    mode: str  # "universal" or "per-example"
    template: AttackTemplate
    attack_x: np.ndarray
    attack_y: np.ndarray | None
    eval_x: np.ndarray
    eval_y: np.ndarray
    domain: tuple[float, float]
    rng: RngStream

    def __post_init__(self):
        if not 0.0 < self.delta <= 1.0:
            raise ValueError("delta must lie in (0, 1]")
        if self.iterations < 1:
            raise ValueError("need at least one bisection iteration")
        if self.eps_lo >= self.eps_hi:
            raise ValueError("search interval is empty")
        if self.mode not in ("universal", "per-example"):
            raise ValueError(f"unknown query mode {self.mode!r}")


@dataclass
class TraceRow:
    iteration: int
    eps: float
    rate: float
    success: bool
    stream: int  # rng stream id used by this probe, for reproducibility


@dataclass
class SearchResult:
    """Outcome of a robustness search.

    ``found`` is False when no probed budget reached the required rate; the
    trace is still complete and ``resolution`` documents the final interval
    width (eps_hi - eps_lo) / 2^iterations.
    """

    found: bool
    eps_hat: float | None
    perturbation: np.ndarray | None
    trace: list[TraceRow]
    resolution: float


def bisect_threshold(eps_lo: float, eps_hi: float, iterations: int, probe):
    """Bisection on the attack budget around a success predicate.

    ``probe(eps, iteration)`` returns (rate, success, payload). A success
    sends the search into the lower half, a failure into the upper half,
    and the reported budget is the smallest successful one seen anywhere in
    the procedure, not the final midpoint.
    """
    lo, hi = eps_lo, eps_hi
    best_eps = None
    best_payload = None
    trace: list[TraceRow] = []
    for it in range(iterations):
        mid = 0.5 * (lo + hi)
        rate, success, payload, stream = probe(mid, it)
        trace.append(TraceRow(iteration=it, eps=mid, rate=rate, success=success,
                              stream=stream))
        if success:
            if best_eps is None or mid < best_eps:
                best_eps = mid
                best_payload = payload
            hi = mid
        else:
            lo = mid
    resolution = (eps_hi - eps_lo) / 2.0 ** iterations
    return SearchResult(found=best_eps is not None, eps_hat=best_eps,
                        perturbation=best_payload, trace=trace, resolution=resolution)


def _probe_rate(spec, params, query: RobustnessQuery, eps: float, rng: RngStream):
    """Run the query's attack at one budget and measure its success rate."""
    t = query.template
    ball = A.NormBall(eps, query.domain[0], query.domain[1])
    if query.mode == "universal":
        cfg = A.UniversalAttackConfig(inputs=query.attack_x, labels=query.attack_y,
                                      steps=t.steps, schedule=t.schedule(),
                                      sample_size=min(t.sample_size, query.attack_x.shape[0]),
                                      rng=rng)
        xi = A.universal_attack(spec, params, cfg, ball, t.goal, t.loss_cfg)
    else:
        xi = A.pgd_attack(spec, params, query.eval_x, query.eval_y, ball,
                          t.schedule(), t.steps, t.goal, t.loss_cfg, rng)
    report = A.fooling_rate(spec, params, query.eval_x, query.eval_y, xi,
                            t.goal, ball, delta=query.delta)
    # Dense targeted queries follow the mean-pixel-accuracy success measure;
    # everything else uses the fooling rate directly.
    if spec.kind == "dense_predictor" and isinstance(t.goal, A.Targeted):
        rate = report.mean_pixel_accuracy
    else:
        rate = report.rate
    return rate, xi


def search_robustness(spec: M.ModelSpec, params: M.Params,
                      query: RobustnessQuery) -> SearchResult:
    """Bisection for the smallest budget whose attack rate strictly exceeds
    delta; each iteration attacks with a fresh random stream."""
    root = query.rng

    def probe(eps, iteration):
        iter_rng = root.split()
        stream = iter_rng.stream
        rate, xi = _probe_rate(spec, params, query, eps, iter_rng)
        return rate, rate > query.delta, xi, stream

    return bisect_threshold(query.eps_lo, query.eps_hi, query.iterations, probe)


@dataclass
class RiskEstimate:
    """0-1 risk estimates on one evaluation set, with the universal
    perturbation that realized rho_uni."""

    rho_exp: float
    rho_uni: float
    rho_adv: float
    n: int
    xi_uni: np.ndarray | None = None


def estimate_risks(spec: M.ModelSpec, params: M.Params, x: np.ndarray, y: np.ndarray,
                   ball: A.NormBall, template: AttackTemplate,
                   rng: RngStream) -> RiskEstimate:
    """Clean, universal, and per-example adversarial 0-1 risks.

    The per-example estimate includes a zero-initialized attack run and the
    unperturbed point itself as candidates, so rho_adv >= rho_exp holds by
    construction despite attack stochasticity.
    """
    y = np.asarray(y)
    goal = template.goal
    clean_pred = M.predict(M.forward(spec, params, x))
    clean_wrong = clean_pred != y
    rho_exp = float(clean_wrong.mean())

    schedule = template.schedule()
    fooled = clean_wrong.copy()
    for init in ("zero", "random"):
        xi = A.pgd_attack(spec, params, x, y, ball, schedule, template.steps,
                          goal, template.loss_cfg, rng.split(), init=init)
        pred = M.predict(M.forward(spec, params, np.clip(x + xi, ball.lo, ball.hi)))
        fooled |= pred != y
    rho_adv = float(fooled.mean())

    ucfg = A.UniversalAttackConfig(inputs=x, labels=y, steps=template.steps,
                                   schedule=schedule,
                                   sample_size=min(template.sample_size, x.shape[0]),
                                   rng=rng.split())
    xi_uni = A.universal_attack(spec, params, ucfg, ball, goal, template.loss_cfg)
    rho_uni = A.fooling_rate(spec, params, x, y, xi_uni, goal, ball).rate
    return RiskEstimate(rho_exp=rho_exp, rho_uni=rho_uni, rho_adv=rho_adv,
                        n=int(x.shape[0]), xi_uni=xi_uni)


def estimate_risks_grid(spec: M.ModelSpec, params: M.Params, x: np.ndarray,
                        y: np.ndarray, ball: A.NormBall,
                        values_per_axis: int = 3) -> RiskEstimate:
    """Exact risks when perturbations are restricted to a per-axis value grid.

    Enumerates every sign-grid perturbation ({-eps, 0, +eps} per axis for
    the default 3) and computes the 0-1 risks exactly: per-example risk
    takes the best grid point per example, universal risk the single best
    grid point overall. Only feasible for small input dimension.
    """
    y = np.asarray(y)
    dim = int(np.prod(x.shape[1:]))
    if values_per_axis ** dim > 200_000:
        raise ValueError("perturbation grid too large to enumerate")
    levels = np.linspace(-ball.eps, ball.eps, values_per_axis)
    clean_pred = M.predict(M.forward(spec, params, x))
    rho_exp = float((clean_pred != y).mean())

    fooled_any = clean_pred != y
    best_uni = 0.0
    best_xi = None
    for combo in itertools.product(levels, repeat=dim):
        xi = np.asarray(combo, dtype=x.dtype).reshape(x.shape[1:])
        xb = np.clip(x + xi, ball.lo, ball.hi)
        wrong = M.predict(M.forward(spec, params, xb)) != y
        fooled_any |= wrong
        rate = float(wrong.mean())
        if rate > best_uni or best_xi is None:
            best_uni = rate
            best_xi = xi
    return RiskEstimate(rho_exp=rho_exp, rho_uni=best_uni,
                        rho_adv=float(fooled_any.mean()), n=int(x.shape[0]),
                        xi_uni=best_xi)


@dataclass
class ChainReport:
    """Mean thresholded adversarial losses across the sharedness ladder."""

    sharedness: list[int]
    losses: list[float]
    universal_loss: float | None
    tolerance: float
    violations: list[int]  # indices i where losses[i+1] > losses[i] + tolerance

    @property
    def monotone(self) -> bool:
        return not self.violations


def risk_chain_check(spec: M.ModelSpec, params: M.Params, x: np.ndarray,
                     y: np.ndarray, ball: A.NormBall, steps: int,
                     schedule: A.Schedule, loss_cfg: M.LossConfig,
                     rng: RngStream, tolerance: float = 0.02,
                     include_universal: bool = True,
                     universal_steps: int | None = None) -> ChainReport:
    """Heap-attack losses for sharedness 1, 2, 4, ..., d on one batch.

    The batch size must be a power of two; heaps are contiguous, so
    doubling the sharedness merges adjacent heaps and the mean thresholded
    loss should be non-increasing in s up to attack noise.
    """
    d = x.shape[0]
    if d & (d - 1):
        raise ValueError("risk chain needs a power-of-two batch size")
    s_values = [2 ** i for i in range(int(math.log2(d)) + 1)]
    losses = []
    for s in s_values:
        plan = A.HeapPlan(batch_size=d, sharedness=s, hierarchical=True)
        pert = A.shared_pgd_attack(spec, params, x, y, ball, schedule, steps,
                                   A.Untargeted(), loss_cfg, plan, rng.split())
        xb = np.clip(x + pert.broadcast(), ball.lo, ball.hi)
        targets = M.smooth_labels(np.asarray(y), spec.num_classes,
                                  loss_cfg.smoothing, dtype=x.dtype)
        per_dec = M.adv_loss(M.cross_entropy(M.forward(spec, params, xb), targets),
                             loss_cfg.kappa)
        losses.append(float(per_dec.mean()))

    universal_loss = None
    if include_universal:
        ucfg = A.UniversalAttackConfig(inputs=x, labels=np.asarray(y),
                                       steps=universal_steps or steps,
                                       schedule=schedule,
                                       sample_size=min(d, 16), rng=rng.split())
        xi = A.universal_attack(spec, params, ucfg, ball, A.Untargeted(), loss_cfg)
        xb = np.clip(x + xi, ball.lo, ball.hi)
        targets = M.smooth_labels(np.asarray(y), spec.num_classes,
                                  loss_cfg.smoothing, dtype=x.dtype)
        per_dec = M.adv_loss(M.cross_entropy(M.forward(spec, params, xb), targets),
                             loss_cfg.kappa)
        universal_loss = float(per_dec.mean())

    violations = [i for i in range(len(losses) - 1)
                  if losses[i + 1] > losses[i] + tolerance]
    return ChainReport(sharedness=s_values, losses=losses,
                       universal_loss=universal_loss, tolerance=tolerance,
                       violations=violations)

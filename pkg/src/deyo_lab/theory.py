"""Disentangled-factor simulator for the harmful-sample condition.

A linear binary classifier scores factor vectors v in [0, 1]^d with logit
theta . v.  Factors are split into four partitions (pp, pn, np, nn) by the
sign of their train/test label correlation.  A sample is harmful for
entropy minimization when

    y_hat * v . (E+[v] - E-[v]) < 0,

i.e. one gradient step on its entropy shrinks the gap between the class
mean logits.  ``gap_change_oracle`` measures that gap change by brute force
so the closed form can be checked against it.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .numerics import make_rng, sigmoid

PARTITIONS = ("pp", "pn", "np", "nn")


@dataclass
class FactorWorld:
    sizes: tuple
    mu_plus: np.ndarray
    mu_minus: np.ndarray
    theta: np.ndarray
    eta: float = 1.0
    pop_plus: np.ndarray | None = None
    pop_minus: np.ndarray | None = None

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        self.mu_plus = np.asarray(self.mu_plus, dtype=np.float64)
        self.mu_minus = np.asarray(self.mu_minus, dtype=np.float64)
        self.theta = np.asarray(self.theta, dtype=np.float64)
        d = sum(self.sizes)
        for name in ("mu_plus", "mu_minus", "theta"):
            if getattr(self, name).shape != (d,):
                raise ValueError(f"{name} must have length {d}")
        if self.eta <= 0:
            raise ValueError("eta must be positive")

    @property
    def dim(self):
        return sum(self.sizes)

    def part(self, name) -> slice:
        k = PARTITIONS.index(name)
        start = sum(self.sizes[:k])
        return slice(start, start + self.sizes[k])

    @property
    def mean_gap(self):
        return self.mu_plus - self.mu_minus

    def check(self):
        """Raise if the factor ranges, mean ordering or parameter signs are violated."""
        for mu in (self.mu_plus, self.mu_minus):
            if np.any(mu < 0) or np.any(mu > 1):
                raise ValueError("class-mean factors must lie in [0, 1]")
        pp, pn, np_, nn = (self.part(p) for p in PARTITIONS)
        if np.any(self.mu_plus[pp] < self.mu_minus[pp]):
            raise ValueError("CPR factors need E+[v] >= E-[v]")
        if np.any(self.mu_plus[pn] > self.mu_minus[pn]):
            raise ValueError("TRAP factors need E+[v] <= E-[v]")
        if np.any(self.theta[pp] <= 0) or np.any(self.theta[pn] <= 0):
            raise ValueError("theta_pp and theta_pn must be positive")
        if np.any(self.theta[np_] > 0) or np.any(self.theta[nn] > 0):
            raise ValueError("theta_np and theta_nn must be non-positive")
        return self


@dataclass
class FactorSample:
    v: np.ndarray
    pseudo_label: int


def make_sample(world: FactorWorld, v) -> FactorSample:
    v = np.asarray(v, dtype=np.float64)
    return FactorSample(v, 1 if float(world.theta @ v) > 0 else -1)


def random_world(rng, max_per_partition=3, population=0) -> FactorWorld:
    """Draw a world satisfying the partition sign structure and mean ordering.

    With ``population > 0`` each class also gets that many sampled factor
    vectors, and the class means become their empirical means.
    """
    sizes = rng.integers(0, max_per_partition + 1, size=4)
    if sizes.sum() == 0:
        sizes[rng.integers(0, 4)] = 1
    d = int(sizes.sum())
    lo, hi = rng.random(d), rng.random(d)
    lo, hi = np.minimum(lo, hi), np.maximum(lo, hi)
    mu_plus, mu_minus = rng.random(d), rng.random(d)
    theta = rng.uniform(0.1, 2.0, d)
    world = FactorWorld(tuple(sizes), mu_plus, mu_minus, theta, eta=float(rng.uniform(0.01, 1.0)))
    pp, pn, np_, nn = (world.part(p) for p in PARTITIONS)
    world.mu_plus[pp], world.mu_minus[pp] = hi[pp], lo[pp]
    world.mu_plus[pn], world.mu_minus[pn] = lo[pn], hi[pn]
    world.theta[np_] *= -1
    world.theta[nn] *= -1
    if population:
        # per-coordinate Beta draws centred on the analytic means
        conc = 4.0
        plus = _beta_population(rng, world.mu_plus, conc, population)
        minus = _beta_population(rng, world.mu_minus, conc, population)
        # sampling noise can invert a coordinate's ordering; swap the classes there
        gap = plus.mean(axis=0) - minus.mean(axis=0)
        swap = np.zeros(d, dtype=bool)
        swap[pp] = gap[pp] < 0
        swap[pn] = gap[pn] > 0
        plus[:, swap], minus[:, swap] = minus[:, swap], plus[:, swap].copy()
        world.pop_plus, world.pop_minus = plus, minus
        world.mu_plus = plus.mean(axis=0)
        world.mu_minus = minus.mean(axis=0)
    return world


def _beta_population(rng, mean, conc, n):
    m = np.clip(mean, 1e-3, 1 - 1e-3)
    return rng.beta(m * conc, (1 - m) * conc, size=(n, len(mean)))


def harmful_condition(world: FactorWorld, sample: FactorSample) -> float:
    """y_hat * v . (E+[v] - E-[v]); negative means harmful."""
    return float(sample.pseudo_label * (sample.v @ world.mean_gap))


@dataclass
class EntropyStep:
    delta: np.ndarray
    c_prime: float
    stationary: bool


def binary_entropy(theta, v) -> float:
    p = float(sigmoid(float(np.dot(theta, v))))
    return -(p * math.log(p) + (1 - p) * math.log(1 - p))


def entropy_grad_step(world: FactorWorld, sample: FactorSample) -> EntropyStep:
    """Closed-form entropy-minimization step: delta = y_hat * C' * v.

    C' = eta * |log((1-p)/p) * p * (1-p)|.  At p = 0.5 the step is zero and
    the sample is flagged stationary.
    """
    a = float(world.theta @ sample.v)
    p = float(sigmoid(a))
    if p <= 0.0 or p >= 1.0:
        raise ValueError(f"sigmoid saturated (p={p}); entropy gradient is undefined")
    # log((1-p)/p) == -a, computed without cancellation
    c_prime = world.eta * abs(-a * p * (1 - p))
    if c_prime == 0.0:
        return EntropyStep(np.zeros_like(sample.v), 0.0, True)
    return EntropyStep(sample.pseudo_label * c_prime * sample.v, c_prime, False)


def _mean_logit(theta, pop, mu):
    if pop is not None:
        return float((pop @ theta).mean())
    return float(theta @ mu)


def gap_change_oracle(world: FactorWorld, sample: FactorSample) -> float:
    """Change of E+[logit] - E-[logit] after one step, evaluated before/after."""
    step = entropy_grad_step(world, sample)
    new_theta = world.theta + step.delta

    def gap(theta):
        return _mean_logit(theta, world.pop_plus, world.mu_plus) - _mean_logit(
            theta, world.pop_minus, world.mu_minus
        )

    return gap(new_theta) - gap(world.theta)


def gap_change_closed_form(world: FactorWorld, sample: FactorSample) -> float:
    return entropy_grad_step(world, sample).c_prime * harmful_condition(world, sample)


def decompose_terms(world: FactorWorld, sample: FactorSample) -> tuple[float, float]:
    """(CPR term, TRAP term) of the condition for a y_hat = +1 sample."""
    gap = world.mean_gap
    pp, pn = world.part("pp"), world.part("pn")
    return float(sample.v[pp] @ gap[pp]), float(sample.v[pn] @ gap[pn])


def decomposition_residual(world: FactorWorld, sample: FactorSample) -> float:
    """Part of the condition carried by the np/nn factors (ignored by the two-term split)."""
    a, b = decompose_terms(world, sample)
    return harmful_condition(world, sample) - sample.pseudo_label * (a + b)


def verify_proposition(trials: int, seed: int = 0, population: int = 0, threshold: float = 1e-9) -> dict:
    """Check sign(condition) == sign(brute-force gap change) on random worlds.

    Trials whose condition magnitude is at most ``threshold`` are counted
    but not judged.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = make_rng(seed)
    judged = agreements = stationary = 0
    counterexamples = []
    max_err = 0.0
    for t in range(trials):
        world = random_world(rng, population=population)
        sample = make_sample(world, rng.random(world.dim))
        cond = harmful_condition(world, sample)
        step = entropy_grad_step(world, sample)
        brute = gap_change_oracle(world, sample)
        max_err = max(max_err, abs(brute - step.c_prime * cond))
        if step.stationary:
            stationary += 1
            continue
        if abs(cond) <= threshold:
            continue
        judged += 1
        if np.sign(cond) == np.sign(brute):
            agreements += 1
        else:
            counterexamples.append({"trial": t, "condition": cond, "gap_change": brute})
    return {
        "seed": seed,
        "trials": trials,
        "judged": judged,
        "agreements": agreements,
        "stationary": stationary,
        "counterexamples": counterexamples,
        "max_closed_form_error": max_err,
    }


def report_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"

"""Analytic and Monte-Carlo checks of the two-judge exclusion argument, plus a
direct measurement of how one pseudo-labeled gradient step moves population risk.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import InsufficientSampleError


@dataclass(frozen=True)
class JuryParams:
    p_d: float  # decision-judge accuracy
    p_e: float  # exclusion-judge accuracy
    prior: float  # P(H1)

    def __post_init__(self):
        for name in ("p_d", "p_e", "prior"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")


def posterior_joint(params: JuryParams) -> float:
    """P(H1 | D, E) for independent decision and exclusion judges."""
    p_d, p_e, pi = params.p_d, params.p_e, params.prior
    num = p_d * p_e * pi
    den = num + (1 - p_d) * (1 - p_e) * (1 - pi)
    if den == 0:
        raise ZeroDivisionError("degenerate posterior: P(D, E) = 0")
    return num / den


def posterior_single(p_d: float, prior: float) -> float:
    """P(H1 | D) for the decision judge alone."""
    num = p_d * prior
    den = num + (1 - p_d) * (1 - prior)
    if den == 0:
        raise ZeroDivisionError("degenerate posterior: P(D) = 0")
    return num / den


def exclusion_gain(params: JuryParams) -> float:
    return posterior_joint(params) - posterior_single(params.p_d, params.prior)


@dataclass
class JuryEstimate:
    joint: float
    joint_se: float
    single: float
    single_se: float
    n_joint: int
    n_single: int

    def within(self, params: JuryParams, k: float = 3.0) -> bool:
        """Both estimates inside ``k`` analytic standard errors of the closed forms."""
        ok = True
        for est, n, exact in ((self.joint, self.n_joint, posterior_joint(params)),
                              (self.single, self.n_single,
                               posterior_single(params.p_d, params.prior))):
            se = np.sqrt(exact * (1 - exact) / n)
            ok &= abs(est - exact) <= k * se + 1e-15
        return bool(ok)


def simulate_jury(params: JuryParams, n: int, seed: int = 0) -> JuryEstimate:
    """Sample the two-judge process and estimate both posteriors empirically.

    D is "the decision judge says positive", E is "the exclusion judge lets
    the sample pass"; each is correct independently given the true class.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    h1 = rng.random(n) < params.prior
    d_correct = rng.random(n) < params.p_d
    e_correct = rng.random(n) < params.p_e
    d = np.where(h1, d_correct, ~d_correct)
    e = np.where(h1, e_correct, ~e_correct)
    de = d & e
    n_joint, n_single = int(de.sum()), int(d.sum())
    if n_joint == 0 or n_single == 0:
        raise InsufficientSampleError("no trials satisfied the conditioning event")
    joint = float(h1[de].mean())
    single = float(h1[d].mean())
    return JuryEstimate(joint, float(np.sqrt(joint * (1 - joint) / n_joint)),
                        single, float(np.sqrt(single * (1 - single) / n_single)),
                        n_joint, n_single)


def probability_grid(step: float = 0.05) -> np.ndarray:
    return np.round(np.arange(step, 1.0 - step / 2, step), 10)


def grid_csv(step: float = 0.05, mc_trials: int = 0, seed: int = 0) -> str:
    """CSV over the full (p_d, p_e, prior) grid, optionally with Monte-Carlo columns."""
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["p_d", "p_e", "prior", "joint", "single", "gain", "mc_joint", "mc_single"])
    grid = probability_grid(step)
    for i, p_d in enumerate(grid):
        for j, p_e in enumerate(grid):
            for k, pi in enumerate(grid):
                params = JuryParams(float(p_d), float(p_e), float(pi))
                row = [p_d, p_e, pi, posterior_joint(params),
                       posterior_single(params.p_d, params.prior), exclusion_gain(params)]
                if mc_trials:
                    est = simulate_jury(params, mc_trials, seed + (i * 100 + j) * 100 + k)
                    row += [est.joint, est.single]
                else:
                    row += ["", ""]
                w.writerow(row)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# risk change of one pseudo-labeled gradient step


@dataclass
class RiskDeltaResult:
    delta_correct: np.ndarray
    delta_wrong: np.ndarray

    @property
    def mean_correct(self) -> float:
        return float(self.delta_correct.mean())

    @property
    def mean_abs_correct(self) -> float:
        return float(np.abs(self.delta_correct).mean())

    @property
    def mean_wrong(self) -> float:
        return float(self.delta_wrong.mean())


_GH_NODES, _GH_WEIGHTS = np.polynomial.hermite_e.hermegauss(200)
_GH_WEIGHTS = _GH_WEIGHTS / np.sqrt(2 * np.pi)


def population_risk(w: np.ndarray, b: float, mu: np.ndarray) -> float:
    """Expected logistic loss on the mixture ``x | y=±1 ~ N(±mu, I)``, equal priors.

    The signed margin of class ``s`` is Gaussian with mean ``w.mu + s*b`` and
    standard deviation ``||w||``, so each class reduces to a 1-D
    Gauss-Hermite quadrature.
    """
    scale = float(np.linalg.norm(w))
    risk = 0.0
    for s in (1.0, -1.0):
        margin = float(w @ mu) + s * b + scale * _GH_NODES
        risk += 0.5 * float(_GH_WEIGHTS @ np.logaddexp(0.0, -margin))
    return risk


def _logistic_grad(w, b, x, s):
    """Gradient of mean log(1 + exp(-s (w.x + b))) over rows of x."""
    m = s * (x @ w + b)
    coef = -s / (1.0 + np.exp(m))
    return (coef[:, None] * x).mean(axis=0), float(coef.mean())


def risk_delta_demo(seed: int = 0, steps: int = 5000, *, n_seeds: int = 30, eta: float = 0.5,
                    n_train: int = 200, mu=(1.0, 0.5), train_lr: float = 1.0,
                    tol: float = 1e-3) -> RiskDeltaResult:
    """Population-risk change after one step on a correct vs a wrong pseudo-label.

    For each of ``n_seeds`` runs a logistic regression is trained by gradient
    descent until the gradient norm falls below ``tol`` (or ``steps`` run out);
    a fresh sample then drives one update of size ``eta`` with its true label
    and, separately, with the flipped label.
    """
    mu = np.asarray(mu, dtype=np.float64)
    d_correct, d_wrong = [], []
    for r in range(n_seeds):
        rng = np.random.default_rng(seed * 1_000_003 + r)
        s = rng.choice([-1.0, 1.0], size=n_train)
        x = s[:, None] * mu + rng.standard_normal((n_train, mu.size))
        w, b = np.zeros(mu.size), 0.0
        for _ in range(steps):
            gw, gb = _logistic_grad(w, b, x, s)
            if np.sqrt(gw @ gw + gb * gb) < tol:
                break
            w, b = w - train_lr * gw, b - train_lr * gb
        base = population_risk(w, b, mu)
        s_new = float(rng.choice([-1.0, 1.0]))
        x_new = (s_new * mu + rng.standard_normal(mu.size))[None, :]
        for label, sink in ((s_new, d_correct), (-s_new, d_wrong)):
            gw, gb = _logistic_grad(w, b, x_new, np.array([label]))
            sink.append(population_risk(w - eta * gw, b - eta * gb, mu) - base)
    return RiskDeltaResult(np.asarray(d_correct), np.asarray(d_wrong))

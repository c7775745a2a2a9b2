"""Reward-model calibration, policy KL measurement, OOD curves and the closed-form optimal policy.

Preference probability follows the Bradley-Terry softmax form
``P(y_w > y_l) = exp(r_w) / (exp(r_w) + exp(r_l)) = sigmoid(r_w - r_l)``.

Calibration bins are equal-width over confidence ``[0.5, 1.0]``.  A pair's
confidence is ``sigmoid(s * |delta|)``, with the scale ``s`` chosen so the
largest ``|delta|`` in the evaluated set maps to 0.99.  Correctness credits
a tie (``delta == 0``) with 0.5 rather than 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .ensemble import RewardEnsemble, population_std
from .model import PolicyModel, response_distributions, sample_batch
from .numerics import DomainError
from .synthdata import PreferenceTriple, TaskSpec, gold_reward

__all__ = [
    "ScoredPair",
    "CalibrationReport",
    "preference_prob",
    "calibration_scale",
    "correctness",
    "ece",
    "ensemble_deltas",
    "rm_accuracy",
    "trajectory_kls",
    "measure_kl",
    "OodRow",
    "ood_curve",
    "closed_form_policy",
    "spearman",
]

TOP_CONFIDENCE = 0.99


@dataclass(frozen=True)
class ScoredPair:
    delta: float
    correct: float


@dataclass
class CalibrationReport:
    scale: float
    counts: np.ndarray
    acc: np.ndarray
    conf: np.ndarray
    ece: float
    accuracy: float

    @property
    def bins(self) -> int:
        return len(self.counts)

    def rows(self) -> list[tuple[int, int, float, float]]:
        return [(m, int(self.counts[m]), float(self.acc[m]), float(self.conf[m])) for m in range(self.bins)]


def preference_prob(delta):
    """``sigmoid(delta)`` computed without overflow; works on scalars and arrays."""
    d = np.asarray(delta, dtype=np.float64)
    out = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    return float(out) if out.ndim == 0 else out


def calibration_scale(deltas) -> float:
    """Scale ``s`` with ``sigmoid(s * max|delta|) = 0.99``."""
    top = float(np.max(np.abs(np.asarray(deltas, dtype=np.float64))))
    if top <= 0.0:
        raise DomainError("all reward differences are zero; calibration scale undefined")
    return math.log(TOP_CONFIDENCE / (1.0 - TOP_CONFIDENCE)) / top


def correctness(deltas) -> np.ndarray:
    d = np.asarray(deltas, dtype=np.float64)
    return np.where(d > 0, 1.0, np.where(d == 0, 0.5, 0.0))


def ece(pairs, bins: int = 15, scale: float | None = None) -> CalibrationReport:
    """Expected calibration error of winner-minus-loser reward differences.

    ``pairs`` is a sequence of :class:`ScoredPair` or a plain array of deltas
    (correctness then follows the sign of each delta).  When every delta is
    zero the scale is irrelevant and every confidence is 0.5.
    """
    if len(pairs) == 0:
        raise ValueError("ece needs at least one pair")
    if isinstance(pairs[0], ScoredPair):
        deltas = np.array([p.delta for p in pairs], dtype=np.float64)
        correct = np.array([p.correct for p in pairs], dtype=np.float64)
    else:
        deltas = np.asarray(pairs, dtype=np.float64)
        correct = correctness(deltas)
    if scale is None:
        scale = calibration_scale(deltas) if np.any(deltas != 0) else 1.0
    conf = np.atleast_1d(preference_prob(scale * np.abs(deltas)))
    edges = 0.5 + np.arange(bins + 1) / (2 * bins)
    which = np.clip(np.searchsorted(edges, conf, side="right") - 1, 0, bins - 1)
    n = len(deltas)
    counts = np.zeros(bins, dtype=np.int64)
    acc = np.zeros(bins)
    mean_conf = np.zeros(bins)
    terms = []
    for m in range(bins):
        sel = which == m
        c = int(sel.sum())
        counts[m] = c
        if c == 0:
            continue
        acc[m] = math.fsum(correct[sel]) / c
        mean_conf[m] = math.fsum(conf[sel]) / c
        terms.append((c / n) * abs(acc[m] - mean_conf[m]))
    return CalibrationReport(
        scale=float(scale),
        counts=counts,
        acc=acc,
        conf=mean_conf,
        ece=math.fsum(terms),
        accuracy=math.fsum(correct) / n,
    )


def ensemble_deltas(e: RewardEnsemble, triples: Sequence[PreferenceTriple], batch: int = 256) -> np.ndarray:
    """Mean-reward differences ``r(y_w) - r(y_l)`` for each triple."""
    out = []
    for i in range(0, len(triples), batch):
        chunk = triples[i : i + batch]
        xs = [t.x for t in chunk]
        rw, _ = e.reward_and_uncertainty(xs, [t.y_w for t in chunk])
        rl, _ = e.reward_and_uncertainty(xs, [t.y_l for t in chunk])
        out.append(rw - rl)
    return np.concatenate(out) if out else np.zeros(0)


def rm_accuracy(e: RewardEnsemble, triples: Sequence[PreferenceTriple]) -> float:
    """Fraction of triples ranked correctly by the ensemble mean; ties earn 0.5."""
    if not triples:
        raise ValueError("empty test set")
    return float(correctness(ensemble_deltas(e, triples)).mean())


# ----------------------------------------------------------------------------
# policy KL
# ----------------------------------------------------------------------------


def trajectory_kls(
    policy: PolicyModel,
    reference: PolicyModel,
    prompts,
    samples_per_prompt: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, list[np.ndarray], list[np.ndarray]]:
    """Per-trajectory summed exact KL along responses sampled from ``policy``.

    Returns the KL array plus the prompts/responses that were sampled so the
    caller can score them further.
    """
    prompts = np.repeat(np.atleast_2d(np.asarray(prompts, dtype=np.int64)), samples_per_prompt, axis=0)
    roll = sample_batch(policy, prompts, 1.0, rng)
    lp, mask = response_distributions(policy, prompts, roll.responses)
    lq, _ = response_distributions(reference, prompts, roll.responses)
    per_pos = np.sum(np.exp(lp) * (lp - lq), axis=-1)
    kls = np.sum(np.where(mask, per_pos, 0.0), axis=1)
    return kls, list(prompts), roll.responses


def measure_kl(policy: PolicyModel, reference: PolicyModel, prompts, samples_per_prompt: int, rng) -> float:
    """Monte-Carlo ``E_x E_{y~policy} sum_t KL(policy(.|x,y<t) || reference(.|x,y<t))``."""
    kls, _, _ = trajectory_kls(policy, reference, prompts, samples_per_prompt, rng)
    return float(kls.mean())


@dataclass(frozen=True)
class OodRow:
    checkpoint: str
    kl: float
    u_mean: float
    gold_mean: float
    proxy_mean: float


def ood_curve(
    checkpoints: Sequence[tuple[str, PolicyModel]],
    reference: PolicyModel,
    e: RewardEnsemble,
    prompts,
    spec: TaskSpec,
    rng: np.random.Generator,
    samples_per_prompt: int = 1,
) -> list[OodRow]:
    """KL to the reference, ensemble uncertainty and gold reward for each checkpoint on fresh rollouts."""
    if len(checkpoints) < 2:
        raise ValueError("ood_curve needs at least two checkpoints")
    rows = []
    for name, policy in checkpoints:
        kls, xs, ys = trajectory_kls(policy, reference, prompts, samples_per_prompt, rng)
        s = e.scores(xs, ys)
        gold = [gold_reward(spec, x, y) for x, y in zip(xs, ys)]
        rows.append(
            OodRow(
                checkpoint=name,
                kl=float(kls.mean()),
                u_mean=float(population_std(s, axis=0).mean()),
                gold_mean=float(np.mean(gold)),
                proxy_mean=float(s.mean()),
            )
        )
    return rows


def spearman(a, b) -> float:
    """Spearman rank correlation with average ranks for ties."""
    from scipy.stats import spearmanr

    rho = spearmanr(np.asarray(a, dtype=float), np.asarray(b, dtype=float)).statistic
    return float(rho)


# ----------------------------------------------------------------------------
# closed-form optimum
# ----------------------------------------------------------------------------


def closed_form_policy(pi_d, rewards, beta: float) -> tuple[np.ndarray, float]:
    """``pi*(y) = pi_D(y) exp(r(y) / beta) / Z`` and the partition function ``Z``."""
    if beta <= 0:
        raise DomainError("beta must be positive")
    pi_d = np.asarray(pi_d, dtype=np.float64)
    r = np.asarray(rewards, dtype=np.float64)
    if pi_d.shape != r.shape or np.any(pi_d < 0) or abs(pi_d.sum() - 1.0) > 1e-9:
        raise DomainError("pi_D must be a distribution matching the reward vector")
    logits = np.where(pi_d > 0, np.log(np.where(pi_d > 0, pi_d, 1.0)) + r / beta, -np.inf)
    top = logits.max()
    w = np.exp(logits - top)
    z_shifted = w.sum()
    return w / z_shifted, float(np.exp(top) * z_shifted)

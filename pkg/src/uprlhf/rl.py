"""Uncertainty-penalised policy-gradient fine-tuning with a separate squared-log-ratio KL term.

The actor only sees ``r - beta2 * (u - u_bar)``, where ``u`` is the ensemble
standard deviation and ``u_bar`` the mean uncertainty of every sample seen so
far (the current batch included).  The KL regulariser is a plain
differentiable loss ``beta1 * mean((log pi(y|x) - log pi_sft(y|x))^2)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .ensemble import RewardEnsemble
from .model import PolicyModel, response_distributions, response_logprobs, sample_batch
from .numerics import Tensor
from .pipeline import TrainingError
from .synthdata import TaskSpec, gold_reward

log = logging.getLogger(__name__)

__all__ = [
    "RlConfig",
    "RolloutBatch",
    "UncertaintyTracker",
    "EmaBaseline",
    "RlTraceRow",
    "penalized_reward",
    "kl_objective",
    "collect_rollouts",
    "policy_update",
    "rl_train",
    "fit_one_step_policy",
]


@dataclass(frozen=True)
class RlConfig:
    steps: int = 300
    prompts_per_batch: int = 16
    samples_per_prompt: int = 1
    temperature: float = 1.0
    lr: float = 1e-4
    beta1: float = 0.05
    beta2: float = 1.0
    baseline_decay: float = 0.95
    clip_eps: float = 0.0
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.beta1 < 0 or self.beta2 < 0:
            raise ValueError("beta1 and beta2 must be non-negative")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


def penalized_reward(r, u, u_bar, beta2: float):
    """``r - beta2 * (u - u_bar)``."""
    return r - beta2 * (u - u_bar)


class UncertaintyTracker:
    """Running mean of every uncertainty value recorded so far."""

    def __init__(self):
        self.count = 0
        self.total = 0.0

    @property
    def mean(self) -> float:
        return self.total / self.count if self.count else 0.0

    def update(self, values) -> float:
        values = np.atleast_1d(np.asarray(values, dtype=np.float64))
        self.count += values.size
        self.total += math.fsum(values)
        return self.mean


class EmaBaseline:
    """Exponential moving average of batch-mean rewards, seeded with the first batch mean."""

    def __init__(self, decay: float = 0.95):
        self.decay = decay
        self.value: float | None = None

    def advantages(self, rewards: np.ndarray) -> np.ndarray:
        rewards = np.asarray(rewards, dtype=np.float64)
        batch_mean = float(rewards.mean())
        if self.value is None:
            self.value = batch_mean
        adv = rewards - self.value
        self.value = self.decay * self.value + (1.0 - self.decay) * batch_mean
        return adv


@dataclass
class RolloutBatch:
    prompts: np.ndarray  # (B, P)
    responses: list[np.ndarray]
    logp_policy: list[np.ndarray]  # per-token, from the sampler
    logp_ref: np.ndarray  # (B,) summed, constant
    ref_dist: np.ndarray  # (B, L, V) reference log-distributions
    mask: np.ndarray  # (B, L)
    rewards: np.ndarray
    uncertainties: np.ndarray
    gold: np.ndarray
    truncated: np.ndarray

    @property
    def size(self) -> int:
        return len(self.responses)

    @property
    def seq_logp_policy(self) -> np.ndarray:
        return np.array([lp.sum() for lp in self.logp_policy])


def kl_objective(seq_logp: Tensor, ref_seq_logp, beta1: float) -> Tensor:
    """``beta1 * mean((log pi(y|x) - log pi_sft(y|x))^2)``; the reference side is a constant."""
    ratio = nx.sub(seq_logp, np.asarray(ref_seq_logp, dtype=np.float64))
    return nx.scale(nx.mean(nx.square(ratio)), beta1)


def collect_rollouts(
    policy: PolicyModel,
    reference: PolicyModel,
    ensemble: RewardEnsemble,
    prompts,
    spec: TaskSpec,
    temperature: float,
    rng: np.random.Generator,
) -> RolloutBatch:
    prompts = np.atleast_2d(np.asarray(prompts, dtype=np.int64))
    roll = sample_batch(policy, prompts, temperature, rng, max_new=spec.response_cap)
    ref_dist, mask = response_distributions(reference, prompts, roll.responses)
    width = mask.shape[1]
    padded = np.full((len(roll.responses), width), policy.config.eos_id, dtype=np.int64)
    for i, r in enumerate(roll.responses):
        padded[i, : len(r)] = r
    ref_tok = np.take_along_axis(ref_dist, padded[..., None], axis=-1)[..., 0]
    logp_ref = np.where(mask, ref_tok, 0.0).sum(axis=1)
    rewards, unc = ensemble.reward_and_uncertainty(prompts, roll.responses)
    gold = np.array([gold_reward(spec, x, y) for x, y in zip(prompts, roll.responses)])
    return RolloutBatch(
        prompts=prompts,
        responses=roll.responses,
        logp_policy=roll.logprobs,
        logp_ref=logp_ref,
        ref_dist=ref_dist,
        mask=mask,
        rewards=rewards,
        uncertainties=unc,
        gold=gold,
        truncated=roll.truncated,
    )


def policy_update(
    policy: PolicyModel,
    batch: RolloutBatch,
    tracker: UncertaintyTracker,
    baseline: EmaBaseline,
    optimizer: nx.Adam,
    config: RlConfig,
) -> dict[str, float]:
    """One gradient step on ``-mean(A * log pi(y|x)) + kl_objective``.

    The tracker absorbs this batch before the penalty is computed.  With
    ``config.clip_eps > 0`` the policy-gradient term is the clipped-ratio
    surrogate against the sampler's log-probs.
    """
    u_bar = tracker.update(batch.uncertainties)
    shaped = penalized_reward(batch.rewards, batch.uncertainties, u_bar, config.beta2)
    adv = baseline.advantages(shaped)

    tok_lp, mask = response_logprobs(policy, batch.prompts, batch.responses)
    seq = nx.sum(tok_lp, axis=1)
    b = batch.size
    if config.clip_eps > 0:
        old = batch.seq_logp_policy
        ratio = nx.exp(nx.sub(seq, old))
        r = ratio.data
        eps = config.clip_eps
        active = np.where(adv >= 0, r < 1.0 + eps, r > 1.0 - eps).astype(float)
        pg = nx.neg(nx.mean(nx.mul(ratio, adv * active)))
    else:
        pg = nx.scale(nx.sum(nx.mul(seq, adv)), -1.0 / b)
    kl = kl_objective(seq, batch.logp_ref, config.beta1)
    loss = nx.add(pg, kl)
    value = loss.item()
    if not math.isfinite(value):
        worst = int(np.argmax(np.abs(np.nan_to_num(seq.data, nan=np.inf))))
        raise TrainingError(
            f"non-finite policy loss; sample {worst}: prompt={batch.prompts[worst].tolist()} "
            f"response={batch.responses[worst].tolist()} reward={batch.rewards[worst]} "
            f"u={batch.uncertainties[worst]}"
        )
    optimizer.zero_grad()
    nx.backward(loss)
    optimizer.step()
    return {
        "proxy_reward_mean": float(batch.rewards.mean()),
        "gold_mean": float(batch.gold.mean()),
        "u_mean": float(batch.uncertainties.mean()),
        "u_bar": u_bar,
        "kl_value": kl.item(),
        "loss": value,
    }


@dataclass(frozen=True)
class RlTraceRow:
    step: int
    proxy_reward: float
    gold_reward: float
    kl_measured: float
    u_mean: float
    u_running_mean: float
    kl_objective_value: float


def _batch_kl(policy: PolicyModel, batch: RolloutBatch) -> float:
    lp, mask = response_distributions(policy, batch.prompts, batch.responses)
    per_pos = np.sum(np.exp(lp) * (lp - batch.ref_dist), axis=-1)
    return float(np.where(mask, per_pos, 0.0).sum(axis=1).mean())


@dataclass
class RlResult:
    policy: PolicyModel
    trace: list[RlTraceRow]
    checkpoints: list[tuple[int, dict]] = field(default_factory=list)


def rl_train(
    sft_policy: PolicyModel,
    ensemble: RewardEnsemble,
    prompts: Sequence[Sequence[int]],
    spec: TaskSpec,
    config: RlConfig = RlConfig(),
    on_step: Callable[[RlTraceRow], None] | None = None,
) -> RlResult:
    """Fine-tune a copy of ``sft_policy`` against the ensemble; neither input is modified."""
    policy = sft_policy.copy()
    reference = sft_policy
    pool = np.asarray(prompts, dtype=np.int64)
    tracker = UncertaintyTracker()
    baseline = EmaBaseline(config.baseline_decay)
    opt = nx.Adam(policy.parameters(), lr=config.lr)
    result = RlResult(policy, [])
    if config.checkpoint_every:
        result.checkpoints.append((0, policy.state_dict()))
    for step in range(config.steps):
        pick = nx.make_rng(config.seed, "rl", "prompts", step).choice(len(pool), config.prompts_per_batch, replace=False)
        batch_prompts = np.repeat(pool[pick], config.samples_per_prompt, axis=0)
        batch = collect_rollouts(
            policy, reference, ensemble, batch_prompts, spec, config.temperature,
            nx.make_rng(config.seed, "rl", "sample", step),
        )
        kl_measured = _batch_kl(policy, batch)
        metrics = policy_update(policy, batch, tracker, baseline, opt, config)
        row = RlTraceRow(
            step=step,
            proxy_reward=metrics["proxy_reward_mean"],
            gold_reward=metrics["gold_mean"],
            kl_measured=kl_measured,
            u_mean=metrics["u_mean"],
            u_running_mean=metrics["u_bar"],
            kl_objective_value=metrics["kl_value"],
        )
        result.trace.append(row)
        if on_step is not None:
            on_step(row)
        if config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            result.checkpoints.append((step + 1, policy.state_dict()))
        if step % 25 == 0:
            log.info(
                "rl step %d proxy %.3f gold %.3f kl %.3f u %.3f",
                step, row.proxy_reward, row.gold_reward, row.kl_measured, row.u_mean,
            )
    return result


def fit_one_step_policy(pi_d, rewards, beta: float, steps: int = 2000, lr: float = 0.05) -> np.ndarray:
    """Maximise ``E_pi[r] - beta * KL(pi || pi_D)`` exactly for a bare softmax policy by Adam."""
    pi_d = np.asarray(pi_d, dtype=np.float64)
    r = np.asarray(rewards, dtype=np.float64)
    log_d = np.log(pi_d)
    logits = nx.parameter(np.zeros_like(r))
    opt = nx.Adam([logits], lr=lr)
    for _ in range(steps):
        logp = nx.log_softmax(logits)
        p = nx.exp(logp)
        gain = nx.sum(nx.mul(p, r))
        kl = nx.sum(nx.mul(p, nx.sub(logp, log_d)))
        loss = nx.neg(nx.sub(gain, nx.scale(kl, beta)))
        opt.zero_grad()
        nx.backward(loss)
        opt.step()
    return np.exp(nx.log_softmax(logits).data)

"""Supervised fine-tuning and reward-ensemble training."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .ensemble import RewardEnsemble
from .evaluation import ece, ensemble_deltas
from .model import BackboneConfig, PolicyModel, response_logprobs
from .numerics import NumericError, Tensor
from .synthdata import PreferenceTriple

log = logging.getLogger(__name__)

__all__ = [
    "TrainingError",
    "SftConfig",
    "RmTrainConfig",
    "RmTraceRow",
    "sft_loss",
    "sft_train",
    "rank_loss",
    "rm_objective",
    "rm_train",
]


class TrainingError(NumericError):
    """Loss became non-finite; ``trace`` holds what was recorded so far."""

    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class SftConfig:
    epochs: int = 10
    batch: int = 32
    lr: float = 1e-3
    seed: int = 0


@dataclass(frozen=True)
class RmTrainConfig:
    epochs: int = 5
    batch: int = 32
    lr: float = 1e-3
    nnm_lambda: float = 0.1
    members: int = 5
    rank: int = 4
    init_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.nnm_lambda < 0:
            raise ValueError("nnm_lambda must be non-negative")
        if self.members < 2:
            raise ValueError("need at least two ensemble members")


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, size):
        yield order[i : i + size]


def sft_loss(model: PolicyModel, prompts, responses) -> tuple[Tensor, int]:
    """Summed response-token NLL and the token count it covers."""
    lp, mask = response_logprobs(model, prompts, responses)
    return nx.neg(nx.sum(lp)), int(mask.sum())


def sft_train(
    pairs: Sequence[tuple[Sequence[int], Sequence[int]]],
    config: SftConfig = SftConfig(),
    backbone: BackboneConfig = BackboneConfig(),
    model: PolicyModel | None = None,
) -> tuple[PolicyModel, list[float]]:
    """Maximum-likelihood fine-tuning on (prompt, response) pairs.

    Returns the model and the per-epoch mean token NLL.
    """
    if not pairs:
        raise ValueError("empty SFT set")
    if model is None:
        model = PolicyModel.initialize(backbone, nx.make_rng(config.seed, "policy", "init"))
    opt = nx.Adam(model.parameters(), lr=config.lr)
    trace: list[float] = []
    for epoch in range(config.epochs):
        rng = nx.make_rng(config.seed, "sft", "shuffle", epoch)
        total, tokens = 0.0, 0
        for idx in _batches(len(pairs), config.batch, rng):
            xs = [pairs[i][0] for i in idx]
            ys = [pairs[i][1] for i in idx]
            nll, count = sft_loss(model, xs, ys)
            loss = nx.scale(nll, 1.0 / count)
            if not math.isfinite(loss.item()):
                raise TrainingError(f"SFT loss diverged in epoch {epoch}", trace)
            opt.zero_grad()
            nx.backward(loss)
            opt.step()
            total += nll.item()
            tokens += count
        trace.append(total / tokens)
        log.info("sft epoch %d  nll %.4f", epoch, trace[-1])
    return model, trace


def rank_loss(e: RewardEnsemble, triples: Sequence[PreferenceTriple]) -> Tensor:
    """Mean Bradley-Terry NLL ``-log sigmoid(mean_n r_n(y_w) - mean_n r_n(y_l))``."""
    if not triples:
        raise ValueError("empty preference batch")
    b = len(triples)
    xs = [t.x for t in triples] * 2
    ys = [t.y_w for t in triples] + [t.y_l for t in triples]
    rewards = e.member_rewards(xs, ys)  # (N, 2B)
    mean = nx.mean(rewards, axis=0)
    diff = nx.sub(nx.take(mean, slice(0, b)), nx.take(mean, slice(b, 2 * b)))
    return nx.neg(nx.mean(nx.log_sigmoid(diff)))


def rm_objective(e: RewardEnsemble, triples: Sequence[PreferenceTriple], nnm_lambda: float) -> tuple[Tensor, Tensor, float]:
    """``rank_loss - lambda * diversity``; returns (objective, rank loss, diversity value)."""
    rl = rank_loss(e, triples)
    if nnm_lambda > 0:
        div = e.diversity_tensor()
        return nx.sub(rl, nx.scale(div, nnm_lambda)), rl, div.item()
    return rl, rl, float("nan")


@dataclass(frozen=True)
class RmTraceRow:
    epoch: int
    rank_loss: float
    diversity_value: float
    holdout_acc: float
    holdout_ece: float


def rm_train(
    e: RewardEnsemble,
    train: Sequence[PreferenceTriple],
    config: RmTrainConfig = RmTrainConfig(),
    test: Sequence[PreferenceTriple] | None = None,
    bins: int = 15,
) -> tuple[RewardEnsemble, list[RmTraceRow]]:
    """Joint training of all members; the shared backbone stays frozen."""
    if not train:
        raise ValueError("empty preference training set")
    opt = nx.Adam(e.parameters(), lr=config.lr)
    trace: list[RmTraceRow] = []
    for epoch in range(config.epochs):
        rng = nx.make_rng(config.seed, "rm", "shuffle", epoch)
        losses = []
        for idx in _batches(len(train), config.batch, rng):
            batch = [train[i] for i in idx]
            obj, rl, _ = rm_objective(e, batch, config.nnm_lambda)
            if not math.isfinite(obj.item()):
                raise TrainingError(f"reward-model loss diverged in epoch {epoch}", trace)
            opt.zero_grad()
            nx.backward(obj)
            opt.step()
            losses.append(rl.item())
        div, _ = e.diversity_term()
        acc = ece_val = float("nan")
        if test:
            report = ece(ensemble_deltas(e, test), bins=bins)
            acc, ece_val = report.accuracy, report.ece
        trace.append(RmTraceRow(epoch, float(np.mean(losses)), div, acc, ece_val))
        log.info("rm epoch %d  rank %.4f  div %.4f  acc %.3f  ece %.3f", epoch, *list(trace[-1].__dict__.values())[1:])
    return e, trace

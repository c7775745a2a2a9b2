"""Reward LoRA ensemble over one shared frozen backbone.

Each member owns one LoRA unit per adapted matrix and its own scalar head,
and runs its own end-to-end forward pass.  The ensemble reward is the mean of
the member scalars; uncertainty is their population standard deviation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .linalg import nnm_ratio, nnm_ratio_with_grad
from .model import Backbone, LoraUnit, RewardHead, adapted_targets, reward_batch
from .numerics import DomainError, Tensor

__all__ = ["Member", "RewardEnsemble", "population_std"]


def population_std(values, axis: int = 0) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    centred = values - values.mean(axis=axis, keepdims=True)
    return np.sqrt((centred * centred).mean(axis=axis))


@dataclass
class Member:
    lora: dict[str, LoraUnit]
    head: RewardHead

    def parameters(self) -> list[Tensor]:
        ps: list[Tensor] = []
        for unit in self.lora.values():
            ps += unit.parameters()
        return ps + self.head.parameters()


class RewardEnsemble:
    def __init__(self, backbone: Backbone, members: Sequence[Member]):
        if len(members) < 2:
            raise ValueError("an ensemble needs at least two members")
        self.backbone = backbone
        self.members = list(members)
        self.targets = sorted(self.members[0].lora)
        for n, m in enumerate(self.members):
            if sorted(m.lora) != self.targets:
                raise ValueError(f"member {n} adapts {sorted(m.lora)}, expected {self.targets}")

    @classmethod
    def create(
        cls,
        backbone: Backbone,
        n_members: int = 5,
        rank: int = 4,
        seed: int = 0,
        init_std: float = 0.02,
    ) -> "RewardEnsemble":
        """Fresh ensemble on a frozen copy of ``backbone``: Gaussian A, zero B, zero heads."""
        frozen = backbone.copy()
        frozen.freeze()
        d = frozen.config.embed_dim
        members = []
        for n in range(n_members):
            rng = nx.make_rng(seed, "ensemble", "member", n)
            lora = {}
            for target in adapted_targets(frozen.config):
                d_out, d_in = frozen.params[target].shape
                lora[target] = LoraUnit.create(target, d_in, d_out, rank, rng, std=init_std)
            members.append(Member(lora, RewardHead.zeros(d)))
        return cls(frozen, members)

    @property
    def size(self) -> int:
        return len(self.members)

    def parameters(self) -> list[Tensor]:
        ps: list[Tensor] = []
        for m in self.members:
            ps += m.parameters()
        return ps

    def _member(self, n: int) -> Member:
        if not 0 <= n < len(self.members):
            raise IndexError(f"member index {n} out of range [0, {len(self.members)})")
        return self.members[n]

    # -- rewards ------------------------------------------------------------

    def member_rewards(self, prompts, responses) -> Tensor:
        """Differentiable ``(N, B)`` member rewards."""
        outs = [reward_batch(self.backbone, m.lora, m.head, prompts, responses) for m in self.members]
        return nx.stack(outs, axis=0)

    def scores(self, prompts, responses) -> np.ndarray:
        with nx.no_grad():
            return self.member_rewards(prompts, responses).data

    def member_reward(self, n: int, x, y) -> float:
        m = self._member(n)
        with nx.no_grad():
            return float(reward_batch(self.backbone, m.lora, m.head, [list(x)], [list(y)]).data[0])

    def mean_reward(self, x, y) -> float:
        return float(self.scores([list(x)], [list(y)])[:, 0].mean())

    def uncertainty(self, x, y) -> float:
        return float(population_std(self.scores([list(x)], [list(y)])[:, 0]))

    def reward_and_uncertainty(self, prompts, responses) -> tuple[np.ndarray, np.ndarray]:
        s = self.scores(prompts, responses)
        return s.mean(axis=0), population_std(s, axis=0)

    # -- diversity ----------------------------------------------------------

    def _check_target(self, target: str) -> None:
        if target not in self.targets:
            raise KeyError(f"{target!r} is not an adapted matrix; choose from {self.targets}")

    def concat_A(self, target: str) -> np.ndarray:
        """Members' A matrices for ``target`` stacked row-wise: ``(N * r, d_in)``."""
        self._check_target(target)
        return np.concatenate([m.lora[target].A.data for m in self.members], axis=0)

    def diversity_term(self) -> tuple[float, dict[tuple[int, str], np.ndarray]]:
        """Mean nuclear/Frobenius ratio over adapted matrices and its gradient per member A."""
        total = 0.0
        grads: dict[tuple[int, str], np.ndarray] = {}
        m_count = len(self.targets)
        for target in self.targets:
            stacked = self.concat_A(target)
            if np.sqrt(np.sum(stacked * stacked)) <= 1e-10:
                raise DomainError(f"concatenated A for {target} is (near) zero")
            value, grad = nnm_ratio_with_grad(stacked)
            total += value
            row = 0
            for n, m in enumerate(self.members):
                r = m.lora[target].rank
                grads[(n, target)] = grad[row : row + r] / m_count
                row += r
        return total / m_count, grads

    def diversity_tensor(self) -> Tensor:
        """Differentiable form of :meth:`diversity_term` for use inside a loss."""
        terms = []
        for target in self.targets:
            self._check_target(target)
            stacked = nx.concat([m.lora[target].A for m in self.members], axis=0)
            terms.append(nnm_ratio(stacked))
        return nx.scale(nx.sum(nx.stack(terms)), 1.0 / len(terms))

    # -- persistence --------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        out = self.backbone.state_dict(prefix="backbone/")
        for n, m in enumerate(self.members):
            for target in self.targets:
                out[f"member{n}/{target}/lora_A"] = m.lora[target].A.data
                out[f"member{n}/{target}/lora_B"] = m.lora[target].B.data
            out[f"member{n}/head/w"] = m.head.w.data
            out[f"member{n}/head/b"] = m.head.b.data
        return out

    @classmethod
    def from_state_dict(cls, state) -> "RewardEnsemble":
        backbone = Backbone.from_state_dict(state, prefix="backbone/")
        backbone.freeze()
        targets = adapted_targets(backbone.config)
        members = []
        n = 0
        while f"member{n}/head/w" in state:
            lora = {
                t: LoraUnit(t, nx.parameter(state[f"member{n}/{t}/lora_A"]), nx.parameter(state[f"member{n}/{t}/lora_B"]))
                for t in targets
            }
            head = RewardHead(nx.parameter(state[f"member{n}/head/w"]), nx.parameter(state[f"member{n}/head/b"]))
            members.append(Member(lora, head))
            n += 1
        return cls(backbone, members)

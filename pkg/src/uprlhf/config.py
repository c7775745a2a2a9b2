"""Flat ``key = value`` experiment configuration.

One key per line, ``#`` starts a comment, blank lines are ignored.  Unknown
keys are rejected.  :func:`serialize` writes every key in declaration order,
so ``parse(serialize(c)) == c`` for any config.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Mapping

from .model import BackboneConfig
from .pipeline import RmTrainConfig, SftConfig
from .rl import RlConfig
from .synthdata import TaskSpec

__all__ = ["ConfigError", "ExperimentConfig", "parse", "serialize", "load", "KEY_HELP", "stage_hash"]


class ConfigError(ValueError):
    """Malformed config text, unknown key or bad value."""


@dataclass(frozen=True)
class ExperimentConfig:
    out_dir: str = "runs/default"
    seed: int = 0
    # task and data
    prompt_budget: int = 2000
    content_vocab: int = 16
    prompt_len: int = 5
    response_cap: int = 12
    match_bonus: float = 2.0
    length_free: int = 8
    length_slope: float = 0.5
    repeat_penalty: float = 1.5
    sft_noise: float = 0.1
    pref_noise: float = 0.35
    test_fraction: float = 0.1
    # backbone
    embed_dim: int = 32
    heads: int = 2
    ff_width: int = 64
    layers: int = 1
    max_seq_len: int = 20
    # supervised fine-tuning
    sft_epochs: int = 30
    sft_batch: int = 32
    sft_lr: float = 3e-3
    # reward ensemble
    rm_epochs: int = 10
    rm_batch: int = 32
    rm_lr: float = 3e-3
    nnm_lambda: float = 0.1
    members: int = 5
    lora_rank: int = 4
    lora_init_std: float = 0.02
    # policy optimisation
    rl_steps: int = 300
    rl_prompts_per_batch: int = 16
    rl_samples_per_prompt: int = 1
    temperature: float = 1.0
    rl_lr: float = 3e-3
    beta1: float = 0.05
    beta2: float = 1.0
    baseline_decay: float = 0.95
    clip_eps: float = 0.0
    rl_checkpoint_every: int = 30
    # evaluation and experiment
    rl_seeds: str = "0,1,2,3"
    eval_prompts: int = 200
    eval_samples: int = 1
    ece_bins: int = 15
    plots: bool = True

    def __post_init__(self):
        positive = [
            "prompt_budget", "content_vocab", "prompt_len", "response_cap", "embed_dim", "heads",
            "ff_width", "layers", "max_seq_len", "sft_batch", "rm_batch", "members", "lora_rank",
            "rl_prompts_per_batch", "rl_samples_per_prompt", "eval_prompts", "eval_samples", "ece_bins",
        ]
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("sft_epochs", "rm_epochs", "rl_steps", "rl_checkpoint_every", "nnm_lambda", "beta1", "beta2", "clip_eps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        for name in ("sft_lr", "rm_lr", "rl_lr", "temperature", "lora_init_std"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.members < 2:
            raise ConfigError("members must be at least 2")
        if self.prompt_len + self.response_cap + 2 > self.max_seq_len:
            raise ConfigError("prompt_len + response_cap + 2 exceeds max_seq_len")
        self.seed_list()

    def seed_list(self) -> list[int]:
        try:
            seeds = [int(s) for s in self.rl_seeds.split(",") if s.strip()]
        except ValueError as exc:
            raise ConfigError(f"rl_seeds must be comma-separated integers, got {self.rl_seeds!r}") from exc
        if not seeds:
            raise ConfigError("rl_seeds is empty")
        return seeds

    # -- views used by the library ----------------------------------------

    @property
    def task(self) -> TaskSpec:
        return TaskSpec(
            vocab=self.content_vocab,
            prompt_len=self.prompt_len,
            response_cap=self.response_cap,
            match_bonus=self.match_bonus,
            length_free=self.length_free,
            length_slope=self.length_slope,
            repeat_penalty=self.repeat_penalty,
        )

    @property
    def backbone(self) -> BackboneConfig:
        return BackboneConfig(
            vocab_size=self.content_vocab + 2,
            embed_dim=self.embed_dim,
            heads=self.heads,
            ff_width=self.ff_width,
            layers=self.layers,
            max_seq_len=self.max_seq_len,
        )

    @property
    def sft(self) -> SftConfig:
        return SftConfig(epochs=self.sft_epochs, batch=self.sft_batch, lr=self.sft_lr, seed=self.seed)

    @property
    def rm(self) -> RmTrainConfig:
        return RmTrainConfig(
            epochs=self.rm_epochs,
            batch=self.rm_batch,
            lr=self.rm_lr,
            nnm_lambda=self.nnm_lambda,
            members=self.members,
            rank=self.lora_rank,
            init_std=self.lora_init_std,
            seed=self.seed,
        )

    def rl(self, seed: int | None = None, beta2: float | None = None) -> RlConfig:
        return RlConfig(
            steps=self.rl_steps,
            prompts_per_batch=self.rl_prompts_per_batch,
            samples_per_prompt=self.rl_samples_per_prompt,
            temperature=self.temperature,
            lr=self.rl_lr,
            beta1=self.beta1,
            beta2=self.beta2 if beta2 is None else beta2,
            baseline_decay=self.baseline_decay,
            clip_eps=self.clip_eps,
            checkpoint_every=self.rl_checkpoint_every,
            seed=self.seed if seed is None else seed,
        )

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


KEY_HELP: dict[str, str] = {
    "out_dir": "root directory for every stage's outputs",
    "seed": "seed for data generation, SFT, reward training and the single rl run",
    "prompt_budget": "total distinct prompts, split 20/40/40 into SFT, preference and RL pools",
    "content_vocab": "number of content tokens (BOS and EOS are added)",
    "prompt_len": "prompt length",
    "response_cap": "maximum sampled response length before EOS is forced",
    "match_bonus": "gold credit per distinct echoed prompt token",
    "length_free": "response length allowed before the verbosity penalty starts",
    "length_slope": "gold penalty per token beyond length_free",
    "repeat_penalty": "gold penalty per back-to-back repeated token",
    "sft_noise": "token substitution rate of SFT demonstrations",
    "pref_noise": "token substitution rate of preference candidates",
    "test_fraction": "held-out share of preference triples",
    "embed_dim": "model width",
    "heads": "attention heads",
    "ff_width": "feedforward width",
    "layers": "transformer layers",
    "max_seq_len": "longest token sequence the model accepts",
    "sft_epochs": "SFT epochs",
    "sft_batch": "SFT batch size",
    "sft_lr": "SFT Adam learning rate",
    "rm_epochs": "reward-ensemble epochs",
    "rm_batch": "reward-ensemble batch size",
    "rm_lr": "reward-ensemble Adam learning rate",
    "nnm_lambda": "weight of the nuclear-norm diversity bonus (lambda)",
    "members": "ensemble size N",
    "lora_rank": "LoRA rank r",
    "lora_init_std": "standard deviation of the Gaussian LoRA A init",
    "rl_steps": "policy-gradient updates",
    "rl_prompts_per_batch": "prompts drawn per update",
    "rl_samples_per_prompt": "responses sampled per prompt",
    "temperature": "sampling temperature",
    "rl_lr": "policy Adam learning rate",
    "beta1": "weight of the squared log-ratio KL term",
    "beta2": "weight of the uncertainty penalty (0 disables it)",
    "baseline_decay": "EMA decay of the reward baseline",
    "clip_eps": "ratio clip for the clipped surrogate (0 means plain REINFORCE)",
    "rl_checkpoint_every": "save a policy checkpoint every this many steps (0 disables)",
    "rl_seeds": "comma-separated rl seeds used by the experiment command",
    "eval_prompts": "RL prompts used for OOD evaluation rollouts",
    "eval_samples": "responses per evaluation prompt",
    "ece_bins": "calibration bins",
    "plots": "render PNG figures next to CSV outputs",
}


def _coerce(name: str, kind, text: str):
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {text!r}") from exc


_TYPES = {f.name: {"int": int, "float": float, "bool": bool, "str": str}[f.type] for f in fields(ExperimentConfig)}


def from_mapping(values: Mapping[str, str], base: ExperimentConfig | None = None) -> ExperimentConfig:
    unknown = sorted(set(values) - set(_TYPES))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    typed = {k: _coerce(k, _TYPES[k], v) for k, v in values.items()}
    base = base or ExperimentConfig()
    return dataclasses.replace(base, **typed)


def parse_pairs(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key = key.strip()
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key}")
        out[key] = value.strip()
    return out


def parse(text: str) -> ExperimentConfig:
    return from_mapping(parse_pairs(text))


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize(config: ExperimentConfig) -> str:
    return "".join(f"{f.name} = {_format(getattr(config, f.name))}\n" for f in fields(config))


def load(path) -> ExperimentConfig:
    return parse(Path(path).read_text(encoding="utf-8"))


def stage_hash(config: ExperimentConfig, keys: Iterable[str], upstream: Iterable[str] = ()) -> str:
    """Content address of a stage: the listed config values plus upstream digests."""
    h = hashlib.sha256()
    for k in keys:
        h.update(f"{k}={_format(getattr(config, k))}\n".encode())
    for u in upstream:
        h.update(f"up={u}\n".encode())
    return h.hexdigest()

"""Tiny causal transformer backbone, LoRA units, language head and reward head.

Token layout for one (prompt, response) pair::

    [BOS] x_1 .. x_P y_1 .. y_k EOS

Weight matrices follow the ``z_out = W z_in`` convention (``W`` is
``d_out x d_in``); activations are stored as rows, so a projection is
``z @ W.T``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from . import numerics as nx
from .numerics import DomainError, ShapeError, Tensor

__all__ = [
    "BackboneConfig",
    "LoraUnit",
    "Backbone",
    "PolicyModel",
    "RewardHead",
    "RESPONSE_CAP",
    "lora_forward",
    "linear",
    "encode_batch",
    "response_logprobs",
    "response_distributions",
    "policy_logprobs",
    "policy_sample",
    "sample_batch",
    "Rollouts",
    "reward_batch",
    "reward_forward_single",
    "adapted_targets",
]

RESPONSE_CAP = 12


@dataclass(frozen=True)
class BackboneConfig:
    vocab_size: int = 18
    embed_dim: int = 32
    heads: int = 2
    ff_width: int = 64
    layers: int = 1
    max_seq_len: int = 20

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")
        if self.vocab_size < 3:
            raise ValueError("vocab needs at least one content token plus BOS and EOS")

    @property
    def bos_id(self) -> int:
        return self.vocab_size - 2

    @property
    def eos_id(self) -> int:
        return self.vocab_size - 1

    def to_array(self) -> np.ndarray:
        return np.array(
            [self.vocab_size, self.embed_dim, self.heads, self.ff_width, self.layers, self.max_seq_len], dtype=float
        )

    @classmethod
    def from_array(cls, arr) -> "BackboneConfig":
        v, d, h, f, n, t = (int(round(a)) for a in np.asarray(arr).ravel())
        return cls(vocab_size=v, embed_dim=d, heads=h, ff_width=f, layers=n, max_seq_len=t)


def adapted_targets(config: BackboneConfig) -> list[str]:
    """Names of the matrices that carry LoRA units: query and value projections."""
    names = []
    for layer in range(config.layers):
        names += [f"layer{layer}/attn/wq", f"layer{layer}/attn/wv"]
    return names


# ----------------------------------------------------------------------------
# LoRA
# ----------------------------------------------------------------------------


@dataclass
class LoraUnit:
    target: str
    A: Tensor  # r x d_in
    B: Tensor  # d_out x r

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @classmethod
    def create(cls, target: str, d_in: int, d_out: int, rank: int, rng: np.random.Generator, std: float = 0.02):
        if rank >= min(d_in, d_out):
            raise ValueError(f"LoRA rank {rank} must be below min(d_in, d_out) = {min(d_in, d_out)}")
        a = rng.normal(0.0, std, size=(rank, d_in))
        return cls(target, nx.parameter(a), nx.parameter(np.zeros((d_out, rank))))

    def parameters(self) -> list[Tensor]:
        return [self.A, self.B]


def linear(z: Tensor, w: Tensor) -> Tensor:
    """Row-batched ``W z``: ``(..., d_in) -> (..., d_out)``."""
    return nx.matmul(z, nx.swapaxes(w, 0, 1))


def lora_forward(w0: Tensor, unit: LoraUnit, z_in) -> Tensor:
    """``z_out = W0 z_in + B A z_in`` for row-stacked inputs ``z_in`` of shape (..., d_in)."""
    z_in = z_in if isinstance(z_in, Tensor) else Tensor(z_in)
    d_out, d_in = w0.shape
    if unit.A.shape[1] != d_in or unit.B.shape[0] != d_out or unit.B.shape[1] != unit.A.shape[0]:
        raise ShapeError(
            f"LoRA unit A{unit.A.shape} B{unit.B.shape} does not fit base matrix {w0.shape} ({unit.target})"
        )
    if z_in.shape[-1] != d_in:
        raise ShapeError(f"input width {z_in.shape[-1]} != {d_in} for {unit.target}")
    return nx.add(linear(z_in, w0), linear(linear(z_in, unit.A), unit.B))


# ----------------------------------------------------------------------------
# backbone
# ----------------------------------------------------------------------------


def _init_params(config: BackboneConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    d, f, v = config.embed_dim, config.ff_width, config.vocab_size
    p: dict[str, np.ndarray] = {
        "tok_emb": rng.normal(0.0, 1.0, size=(v, d)) / math.sqrt(d) * 2.0,
        "pos_emb": rng.normal(0.0, 1.0, size=(config.max_seq_len, d)) / math.sqrt(d) * 2.0,
    }
    for layer in range(config.layers):
        pre = f"layer{layer}"
        p[f"{pre}/ln1/gamma"] = np.ones(d)
        p[f"{pre}/ln1/beta"] = np.zeros(d)
        for name in ("wq", "wk", "wv", "wo"):
            p[f"{pre}/attn/{name}"] = rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, d))
        p[f"{pre}/ln2/gamma"] = np.ones(d)
        p[f"{pre}/ln2/beta"] = np.zeros(d)
        p[f"{pre}/ff/w1"] = rng.normal(0.0, 1.0 / math.sqrt(d), size=(f, d))
        p[f"{pre}/ff/b1"] = np.zeros(f)
        p[f"{pre}/ff/w2"] = rng.normal(0.0, 1.0 / math.sqrt(f), size=(d, f))
        p[f"{pre}/ff/b2"] = np.zeros(d)
    p["lnf/gamma"] = np.ones(d)
    p["lnf/beta"] = np.zeros(d)
    return p


class Backbone:
    """Causal self-attention stack producing final normalised hidden states."""

    def __init__(self, config: BackboneConfig, params: Mapping[str, Tensor]):
        self.config = config
        self.params = dict(params)
        self._mask_cache: dict[int, np.ndarray] = {}

    @classmethod
    def initialize(cls, config: BackboneConfig, rng: np.random.Generator) -> "Backbone":
        return cls(config, {k: nx.parameter(v) for k, v in _init_params(config, rng).items()})

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def freeze(self) -> None:
        for p in self.params.values():
            p.requires_grad = False

    def _causal(self, t: int) -> np.ndarray:
        m = self._mask_cache.get(t)
        if m is None:
            m = np.tril(np.ones((t, t), dtype=bool))
            self._mask_cache[t] = m
        return m

    def _proj(self, h: Tensor, name: str, lora: Mapping[str, LoraUnit] | None) -> Tensor:
        w = self.params[name]
        if lora is not None and name in lora:
            return lora_forward(w, lora[name], h)
        return linear(h, w)

    def forward(self, ids, lora: Mapping[str, LoraUnit] | None = None) -> Tensor:
        """Hidden states ``(B, T, d)`` for token ids ``(B, T)``."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None, :]
        cfg = self.config
        b, t = ids.shape
        if t > cfg.max_seq_len:
            raise DomainError(f"sequence length {t} exceeds max_seq_len {cfg.max_seq_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
            raise DomainError(f"token id out of range [0, {cfg.vocab_size})")
        p = self.params
        d, nh = cfg.embed_dim, cfg.heads
        dh = d // nh
        positions = np.broadcast_to(np.arange(t), (b, t))
        x = nx.add(nx.embedding(p["tok_emb"], ids), nx.embedding(p["pos_emb"], positions))
        mask = self._causal(t)
        for layer in range(cfg.layers):
            pre = f"layer{layer}"
            h = nx.layer_norm(x, p[f"{pre}/ln1/gamma"], p[f"{pre}/ln1/beta"])
            q = self._proj(h, f"{pre}/attn/wq", lora)
            k = self._proj(h, f"{pre}/attn/wk", lora)
            v = self._proj(h, f"{pre}/attn/wv", lora)
            q = nx.swapaxes(nx.reshape(q, (b, t, nh, dh)), 1, 2)
            k = nx.swapaxes(nx.reshape(k, (b, t, nh, dh)), 1, 2)
            v = nx.swapaxes(nx.reshape(v, (b, t, nh, dh)), 1, 2)
            scores = nx.scale(nx.matmul(q, nx.swapaxes(k, 2, 3)), 1.0 / math.sqrt(dh))
            att = nx.matmul(nx.softmax(scores, axis=-1, mask=mask), v)
            att = nx.reshape(nx.swapaxes(att, 1, 2), (b, t, d))
            x = nx.add(x, self._proj(att, f"{pre}/attn/wo", lora))
            h = nx.layer_norm(x, p[f"{pre}/ln2/gamma"], p[f"{pre}/ln2/beta"])
            f = nx.relu(nx.add(linear(h, p[f"{pre}/ff/w1"]), p[f"{pre}/ff/b1"]))
            x = nx.add(x, nx.add(linear(f, p[f"{pre}/ff/w2"]), p[f"{pre}/ff/b2"]))
        return nx.layer_norm(x, p["lnf/gamma"], p["lnf/beta"])

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {f"{prefix}meta/backbone": self.config.to_array()}
        out.update({f"{prefix}{k}": v.data for k, v in self.params.items()})
        return out

    @classmethod
    def from_state_dict(cls, state: Mapping[str, np.ndarray], prefix: str = "") -> "Backbone":
        config = BackboneConfig.from_array(state[f"{prefix}meta/backbone"])
        names = _init_params(config, np.random.Generator(np.random.Philox(0))).keys()
        missing = [n for n in names if f"{prefix}{n}" not in state]
        if missing:
            raise KeyError(f"checkpoint lacks backbone tensors: {missing[:3]}")
        return cls(config, {n: nx.parameter(state[f"{prefix}{n}"]) for n in names})

    def copy(self) -> "Backbone":
        return Backbone(self.config, {k: nx.parameter(v.data) for k, v in self.params.items()})


# ----------------------------------------------------------------------------
# policy
# ----------------------------------------------------------------------------


class PolicyModel:
    """Backbone plus a bias-free language head (d x vocab)."""

    def __init__(self, backbone: Backbone, lm_head: Tensor, lora: Mapping[str, LoraUnit] | None = None):
        self.backbone = backbone
        self.lm_head = lm_head
        self.lora = dict(lora) if lora else {}

    @property
    def config(self) -> BackboneConfig:
        return self.backbone.config

    @classmethod
    def initialize(cls, config: BackboneConfig, rng: np.random.Generator) -> "PolicyModel":
        backbone = Backbone.initialize(config, rng)
        head = rng.normal(0.0, 1.0 / math.sqrt(config.embed_dim), size=(config.embed_dim, config.vocab_size))
        return cls(backbone, nx.parameter(head))

    def parameters(self) -> list[Tensor]:
        ps = self.backbone.parameters() + [self.lm_head]
        for unit in self.lora.values():
            ps += unit.parameters()
        return ps

    def logits(self, ids) -> Tensor:
        h = self.backbone.forward(ids, self.lora or None)
        return nx.matmul(h, self.lm_head)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = self.backbone.state_dict()
        out["lm_head"] = self.lm_head.data
        for name, unit in self.lora.items():
            out[f"lora/{name}/A"] = unit.A.data
            out[f"lora/{name}/B"] = unit.B.data
        return out

    @classmethod
    def from_state_dict(cls, state: Mapping[str, np.ndarray]) -> "PolicyModel":
        backbone = Backbone.from_state_dict(state)
        lora = {}
        for key in state:
            if key.startswith("lora/") and key.endswith("/A"):
                name = key[len("lora/") : -len("/A")]
                lora[name] = LoraUnit(name, nx.parameter(state[key]), nx.parameter(state[f"lora/{name}/B"]))
        return cls(backbone, nx.parameter(state["lm_head"]), lora)

    def copy(self) -> "PolicyModel":
        return PolicyModel.from_state_dict(self.state_dict())


def encode_batch(config: BackboneConfig, prompts, responses: Sequence[Sequence[int]] | None = None):
    """Token matrix ``(B, T)`` padded with EOS, plus response lengths (EOS included)."""
    prompts = np.atleast_2d(np.asarray(prompts, dtype=np.int64))
    b, plen = prompts.shape
    if responses is None:
        responses = [[] for _ in range(b)]
    if len(responses) != b:
        raise ShapeError(f"{b} prompts but {len(responses)} responses")
    lens = np.array([len(r) for r in responses], dtype=np.int64)
    width = 1 + plen + (int(lens.max()) if b else 0)
    if width > config.max_seq_len:
        raise DomainError(f"sequence length {width} exceeds max_seq_len {config.max_seq_len}")
    ids = np.full((b, width), config.eos_id, dtype=np.int64)
    ids[:, 0] = config.bos_id
    ids[:, 1 : 1 + plen] = prompts
    for i, r in enumerate(responses):
        if len(r):
            ids[i, 1 + plen : 1 + plen + len(r)] = r
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise DomainError(f"token id out of range [0, {config.vocab_size})")
    return ids, lens


def _check_responses(config: BackboneConfig, responses) -> None:
    for r in responses:
        if len(r) == 0 or int(r[-1]) != config.eos_id:
            raise DomainError("response must end with EOS")


def response_logprobs(model: PolicyModel, prompts, responses) -> tuple[Tensor, np.ndarray]:
    """Per-token ``log pi(y_t | x, y_<t)`` as a ``(B, L)`` tensor (zero past each EOS) and its mask."""
    cfg = model.config
    _check_responses(cfg, responses)
    ids, lens = encode_batch(cfg, prompts, responses)
    plen = np.atleast_2d(prompts).shape[1]
    width = int(lens.max())
    logits = model.logits(ids[:, :-1])
    logp = nx.log_softmax(logits, axis=-1)
    tok = nx.gather_last(logp, ids[:, 1:])
    tok = nx.take(tok, (slice(None), slice(plen, plen + width)))
    mask = np.arange(width)[None, :] < lens[:, None]
    return nx.mul(tok, mask.astype(float)), mask


def response_distributions(model: PolicyModel, prompts, responses) -> tuple[np.ndarray, np.ndarray]:
    """Full next-token log-distributions ``(B, L, V)`` at each response position, no grad."""
    cfg = model.config
    ids, lens = encode_batch(cfg, prompts, responses)
    plen = np.atleast_2d(prompts).shape[1]
    width = int(lens.max())
    with nx.no_grad():
        logp = nx.log_softmax(model.logits(ids[:, :-1]), axis=-1).data
    mask = np.arange(width)[None, :] < lens[:, None]
    return logp[:, plen : plen + width, :], mask


def policy_logprobs(model: PolicyModel, prompt, response) -> np.ndarray:
    """Per-token log-probabilities of one response (EOS included); their sum is ``log pi(y|x)``."""
    with nx.no_grad():
        lp, _ = response_logprobs(model, [list(prompt)], [list(response)])
    return lp.data[0].copy()


class Rollouts(NamedTuple):
    responses: list[np.ndarray]
    logprobs: list[np.ndarray]
    truncated: np.ndarray


def _log_softmax_np(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def sample_batch(
    model: PolicyModel,
    prompts,
    temperature: float,
    rng: np.random.Generator,
    max_new: int = RESPONSE_CAP,
) -> Rollouts:
    """Ancestral sampling for a batch of prompts.

    Temperature shapes the sampling distribution only; returned log-probs are
    those of the untempered model.  Responses that hit ``max_new`` content
    tokens get an EOS appended (scored by the model) and are flagged.
    """
    if temperature <= 0:
        raise DomainError("temperature must be positive")
    cfg = model.config
    prompts = np.atleast_2d(np.asarray(prompts, dtype=np.int64))
    b = prompts.shape[0]
    ids, _ = encode_batch(cfg, prompts)
    toks = np.full((b, max_new + 1), cfg.eos_id, dtype=np.int64)
    lps = np.zeros((b, max_new + 1))
    done = np.zeros(b, dtype=bool)
    lengths = np.zeros(b, dtype=np.int64)
    with nx.no_grad():
        for step in range(max_new):
            logits = model.logits(ids).data[:, -1, :]
            logp = _log_softmax_np(logits)
            probs = np.exp(_log_softmax_np(logits / temperature))
            cdf = np.cumsum(probs, axis=1)
            u = rng.random(b) * cdf[:, -1]
            tok = np.minimum((cdf < u[:, None]).sum(axis=1), cfg.vocab_size - 1)
            active = ~done
            tok = np.where(active, tok, cfg.eos_id)
            toks[active, step] = tok[active]
            lps[active, step] = logp[active, tok[active]]
            lengths[active] += 1
            done |= tok == cfg.eos_id
            ids = np.concatenate([ids, tok[:, None]], axis=1)
            if done.all():
                break
        truncated = ~done
        if truncated.any():
            logits = model.logits(ids[truncated]).data[:, -1, :]
            logp = _log_softmax_np(logits)
            lps[truncated, max_new] = logp[:, cfg.eos_id]
            toks[truncated, max_new] = cfg.eos_id
            lengths[truncated] += 1
    responses = [toks[i, : lengths[i]].copy() for i in range(b)]
    logprobs = [lps[i, : lengths[i]].copy() for i in range(b)]
    return Rollouts(responses, logprobs, truncated)


def policy_sample(model: PolicyModel, prompt, temperature: float, seed: int):
    """Sample one response; returns ``(response, per-token log-probs, truncated)``."""
    out = sample_batch(model, [list(prompt)], temperature, nx.make_rng(seed, "policy_sample"))
    return out.responses[0], out.logprobs[0], bool(out.truncated[0])


# ----------------------------------------------------------------------------
# reward head
# ----------------------------------------------------------------------------


@dataclass
class RewardHead:
    w: Tensor  # (d,)
    b: Tensor  # (1,)

    @classmethod
    def zeros(cls, d: int) -> "RewardHead":
        return cls(nx.parameter(np.zeros(d)), nx.parameter(np.zeros(1)))

    def parameters(self) -> list[Tensor]:
        return [self.w, self.b]

    def __call__(self, h: Tensor) -> Tensor:
        """``(B, d) -> (B,)``."""
        out = nx.matmul(h, nx.reshape(self.w, (-1, 1)))
        return nx.add(nx.reshape(out, (-1,)), self.b)


def reward_batch(backbone: Backbone, lora: Mapping[str, LoraUnit] | None, head: RewardHead, prompts, responses) -> Tensor:
    """Scalar rewards ``(B,)`` read from the hidden state at each response's EOS."""
    cfg = backbone.config
    _check_responses(cfg, responses)
    ids, lens = encode_batch(cfg, prompts, responses)
    plen = np.atleast_2d(prompts).shape[1]
    width = 1 + plen + int(lens.max())
    h = backbone.forward(ids[:, :width], lora)
    eos_at = plen + lens  # index of EOS: BOS + prompt + (len - 1)
    last = nx.take(h, (np.arange(len(lens)), eos_at))
    return head(last)


def reward_forward_single(backbone: Backbone, lora, head: RewardHead, prompt, response) -> float:
    with nx.no_grad():
        return float(reward_batch(backbone, lora, head, [list(prompt)], [list(response)]).data[0])

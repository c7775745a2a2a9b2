"""Synthetic prompt-echo task with a programmatic gold reward.

Prompts are short strings over a 16-token content vocabulary.  A good
response echoes distinct prompt tokens, stays short, and never repeats a
token back to back.  Datasets are written as tab-separated text records::

    x:1 2 3 4 5<TAB>y:3 1 4 17                 (SFT pairs)
    x:1 2 3 4 5<TAB>w:3 1 4 17<TAB>l:9 9 17    (preferences)
    x:1 2 3 4 5                                (RL prompts)

Responses always include the trailing EOS id.
"""

from __future__ import annotations

from collections import Counter

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .numerics import make_rng

__all__ = [
    "TaskSpec",
    "PreferenceTriple",
    "DatasetBundle",
    "gold_reward",
    "scripted_reference_policy",
    "build_bundle",
    "write_sft",
    "read_sft",
    "write_preferences",
    "read_preferences",
    "write_prompts",
    "read_prompts",
]


@dataclass(frozen=True)
class TaskSpec:
    vocab: int = 16
    prompt_len: int = 5
    response_cap: int = 12
    match_bonus: float = 2.0
    length_free: int = 8
    length_slope: float = 0.5
    repeat_penalty: float = 1.5

    @property
    def bos_id(self) -> int:
        return self.vocab

    @property
    def eos_id(self) -> int:
        return self.vocab + 1

    @property
    def vocab_size(self) -> int:
        return self.vocab + 2


class PreferenceTriple(NamedTuple):
    x: tuple[int, ...]
    y_w: tuple[int, ...]
    y_l: tuple[int, ...]


@dataclass
class DatasetBundle:
    sft_set: list[tuple[tuple[int, ...], tuple[int, ...]]]
    pref_train: list[PreferenceTriple]
    pref_test: list[PreferenceTriple]
    rl_prompts: list[tuple[int, ...]]
    skipped: int = 0
    pools: dict[str, int] = field(default_factory=dict)

    @property
    def pref_set(self) -> list[PreferenceTriple]:
        return self.pref_train + self.pref_test


def _content(spec: TaskSpec, y: Sequence[int]) -> list[int]:
    out = []
    for t in y:
        if int(t) == spec.eos_id:
            break
        out.append(int(t))
    return out


def gold_reward(spec: TaskSpec, x: Sequence[int], y: Sequence[int]) -> float:
    """Prompt-echo credit minus verbosity and stutter penalties; EOS and anything after it are ignored."""
    body = _content(spec, y)
    # each prompt position can be credited once, so duplicates in x count separately
    matched = sum((Counter(body) & Counter(int(t) for t in x)).values())
    overlong = max(0, len(body) - spec.length_free)
    repeats = sum(1 for a, b in zip(body, body[1:]) if a == b)
    return spec.match_bonus * matched - spec.length_slope * overlong - spec.repeat_penalty * repeats


def scripted_reference_policy(spec: TaskSpec, x: Sequence[int], noise: float, rng) -> tuple[int, ...]:
    """Demonstrator: a shuffled selection of 4-6 prompt tokens, then EOS.

    Prompt positions are drawn without replacement, cycling through a fresh
    permutation when a length-6 response outruns a 5-token prompt; arrangement
    avoids back-to-back repeats whenever the multiset allows.  Each position is
    replaced by a uniform content token with probability ``noise``.
    ``rng`` is a ``numpy.random.Generator`` or an integer seed.
    """
    if not 0.0 <= noise <= 1.0:
        raise ValueError("noise must lie in [0, 1]")
    if not isinstance(rng, np.random.Generator):
        rng = make_rng(int(rng), "scripted_policy")
    x = [int(t) for t in x]
    length = int(rng.integers(4, 7))
    picks: list[int] = []
    while len(picks) < length:
        picks += [x[i] for i in rng.permutation(len(x))]
    picks = picks[:length]
    arranged: list[int] = []
    pool = picks
    while pool:
        for k, t in enumerate(pool):
            if not arranged or t != arranged[-1]:
                arranged.append(t)
                pool = pool[:k] + pool[k + 1 :]
                break
        else:
            # only copies of the last token remain; slot each into a gap with different neighbours
            for t in pool:
                gaps = [i for i in range(len(arranged) + 1)
                        if (i == 0 or arranged[i - 1] != t) and (i == len(arranged) or arranged[i] != t)]
                arranged.insert(gaps[0] if gaps else len(arranged), t)
            pool = []
    out = []
    for t in arranged:
        if rng.random() < noise:
            t = int(rng.integers(0, spec.vocab))
        out.append(t)
    return tuple(out) + (spec.eos_id,)


def _distinct_prompts(spec: TaskSpec, count: int, rng: np.random.Generator) -> list[tuple[int, ...]]:
    seen: set[tuple[int, ...]] = set()
    out = []
    while len(out) < count:
        p = tuple(int(t) for t in rng.integers(0, spec.vocab, size=spec.prompt_len))
        if p not in seen:
            seen.add(p)
            out.append(p)
    return out


def build_bundle(
    spec: TaskSpec,
    prompt_budget: int = 2000,
    seed: int = 0,
    sft_noise: float = 0.1,
    pref_noise: float = 0.35,
    test_fraction: float = 0.1,
    max_tries: int = 10,
) -> DatasetBundle:
    """SFT / preference / RL datasets from disjoint 20% / 40% / 40% prompt pools."""
    if prompt_budget < 100:
        raise ValueError("prompt_budget must be at least 100")
    rng = make_rng(seed, "data", "prompts")
    prompts = _distinct_prompts(spec, prompt_budget, rng)
    n_sft = prompt_budget * 20 // 100
    n_pref = prompt_budget * 40 // 100
    sft_pool = prompts[:n_sft]
    pref_pool = prompts[n_sft : n_sft + n_pref]
    rl_pool = prompts[n_sft + n_pref :]

    sft_rng = make_rng(seed, "data", "sft")
    sft = [(x, scripted_reference_policy(spec, x, sft_noise, sft_rng)) for x in sft_pool]

    pref_rng = make_rng(seed, "data", "pref")
    triples: list[PreferenceTriple] = []
    skipped = 0
    for x in pref_pool:
        for _ in range(max_tries):
            a = scripted_reference_policy(spec, x, pref_noise, pref_rng)
            b = scripted_reference_policy(spec, x, pref_noise, pref_rng)
            ga, gb = gold_reward(spec, x, a), gold_reward(spec, x, b)
            if ga != gb:
                triples.append(PreferenceTriple(x, a, b) if ga > gb else PreferenceTriple(x, b, a))
                break
        else:
            skipped += 1
    n_test = int(round(len(triples) * test_fraction))
    order = make_rng(seed, "data", "split").permutation(len(triples))
    test_idx = set(order[:n_test].tolist())
    train = [t for i, t in enumerate(triples) if i not in test_idx]
    test = [t for i, t in enumerate(triples) if i in test_idx]
    return DatasetBundle(
        sft_set=sft,
        pref_train=train,
        pref_test=test,
        rl_prompts=list(rl_pool),
        skipped=skipped,
        pools={"sft": len(sft_pool), "pref": len(pref_pool), "rl": len(rl_pool)},
    )


# ----------------------------------------------------------------------------
# text records
# ----------------------------------------------------------------------------


def _ids(seq: Sequence[int]) -> str:
    return " ".join(str(int(t)) for t in seq)


def _parse_fields(line: str, keys: Sequence[str]) -> list[tuple[int, ...]]:
    parts = line.rstrip("\n").split("\t")
    if len(parts) != len(keys):
        raise ValueError(f"expected {len(keys)} fields, got {len(parts)}: {line!r}")
    out = []
    for key, part in zip(keys, parts):
        tag, _, body = part.partition(":")
        if tag != key:
            raise ValueError(f"expected field {key!r}, got {tag!r}")
        out.append(tuple(int(t) for t in body.split()))
    return out


def _write_lines(path: str | os.PathLike, lines: list[str]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def write_sft(path, pairs) -> None:
    _write_lines(path, [f"x:{_ids(x)}\ty:{_ids(y)}" for x, y in pairs])


def read_sft(path) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
    with open(path, encoding="utf-8") as fh:
        return [tuple(_parse_fields(line, ("x", "y"))) for line in fh if line.strip()]


def write_preferences(path, triples) -> None:
    _write_lines(path, [f"x:{_ids(t.x)}\tw:{_ids(t.y_w)}\tl:{_ids(t.y_l)}" for t in triples])


def read_preferences(path) -> list[PreferenceTriple]:
    with open(path, encoding="utf-8") as fh:
        return [PreferenceTriple(*_parse_fields(line, ("x", "w", "l"))) for line in fh if line.strip()]


def write_prompts(path, prompts) -> None:
    _write_lines(path, [f"x:{_ids(x)}" for x in prompts])


def read_prompts(path) -> list[tuple[int, ...]]:
    with open(path, encoding="utf-8") as fh:
        return [_parse_fields(line, ("x",))[0] for line in fh if line.strip()]

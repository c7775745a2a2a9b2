"""Command-line runner: ``uprlhf <subcommand> [--config FILE] [--key value ...]``.

Subcommands mirror the pipeline stages and share one output tree::

    <out_dir>/data/   sft.txt pref_train.txt pref_test.txt rl_prompts.txt manifest.txt
    <out_dir>/sft/    policy.ckpt sft_trace.csv
    <out_dir>/rm/     ensemble.ckpt rm_trace.csv
    <out_dir>/rl/     policy.ckpt rl_trace.csv checkpoints/step_XXXX.ckpt rl_curve.png
    <out_dir>/eval/   calibration.csv ood_curve.csv summary.txt ood_curve.png

``experiment`` writes one rl/seed<S>_beta2_<B>/ run (with its own eval/) per
seed and variant, plus comparison.csv and gold_vs_kl.png at the root.

Exit codes: 0 success, 1 usage or config error, 2 missing/corrupt files,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import config as cfgmod
from . import numerics as nx
from .checkpoint import CheckpointError, read_checkpoint, write_checkpoint
from .config import ConfigError, ExperimentConfig
from .ensemble import RewardEnsemble
from .evaluation import ece, ensemble_deltas, ood_curve
from .model import PolicyModel
from .numerics import NumericError
from .pipeline import rm_train, sft_train
from .rl import rl_train
from .synthdata import (
    build_bundle,
    read_preferences,
    read_prompts,
    read_sft,
    write_preferences,
    write_prompts,
    write_sft,
)

log = logging.getLogger("uprlhf")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3

ALIASES = {"lambda": "nnm_lambda", "steps": "rl_steps"}

DATA_KEYS = (
    "seed", "prompt_budget", "content_vocab", "prompt_len", "response_cap", "match_bonus",
    "length_free", "length_slope", "repeat_penalty", "sft_noise", "pref_noise", "test_fraction",
)
SFT_KEYS = ("seed", "embed_dim", "heads", "ff_width", "layers", "max_seq_len", "sft_epochs", "sft_batch", "sft_lr")
RM_KEYS = ("seed", "rm_epochs", "rm_batch", "rm_lr", "nnm_lambda", "members", "lora_rank", "lora_init_std", "ece_bins")
RL_KEYS = (
    "response_cap", "match_bonus", "length_free", "length_slope", "repeat_penalty",
    "rl_steps", "rl_prompts_per_batch", "rl_samples_per_prompt", "temperature", "rl_lr",
    "beta1", "baseline_decay", "clip_eps", "rl_checkpoint_every",
)
EVAL_KEYS = ("seed", "eval_prompts", "eval_samples", "ece_bins", "response_cap", "match_bonus",
             "length_free", "length_slope", "repeat_penalty")


class MissingInput(Exception):
    pass


# ----------------------------------------------------------------------------
# argument parsing
# ----------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class _Once(argparse.Action):
    """Store a raw string override; a second occurrence of the same key is a usage error."""

    def __call__(self, parser, namespace, values, option_string=None):
        overrides = getattr(namespace, "overrides", None)
        if overrides is None:
            overrides = {}
            namespace.overrides = overrides
        if self.dest in overrides:
            parser.error(f"duplicate flag for {self.dest} ({option_string})")
        overrides[self.dest] = values


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    g = p.add_argument_group("config keys (override the file)")
    defaults = ExperimentConfig()
    for f in fields(ExperimentConfig):
        flags = [f"--{f.name.replace('_', '-')}"]
        flags += [f"--{a}" for a, k in ALIASES.items() if k == f.name]
        g.add_argument(
            *flags,
            dest=f.name,
            action=_Once,
            metavar="V",
            default=argparse.SUPPRESS,
            help=f"{cfgmod.KEY_HELP[f.name]} (default {getattr(defaults, f.name)})",
        )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="uprlhf", description="Uncertainty-penalised RLHF on a synthetic echo task.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    p = sub.add_parser("gen-data", help="write SFT, preference and RL prompt datasets")
    _add_config_flags(p)
    p = sub.add_parser("sft", help="supervised fine-tuning of the policy")
    _add_config_flags(p)
    p = sub.add_parser("train-rm", help="train the reward LoRA ensemble")
    _add_config_flags(p)
    p = sub.add_parser("rl", help="uncertainty-penalised policy optimisation")
    _add_config_flags(p)
    p.add_argument("--run-dir", help="output directory (default <out_dir>/rl)")
    p = sub.add_parser("eval", help="calibration, OOD curve and summary")
    _add_config_flags(p)
    p.add_argument("--run-dir", help="rl run whose checkpoints/ are evaluated (default <out_dir>/rl)")
    p.add_argument("checkpoints", nargs="*", help="policy checkpoints to evaluate instead of the run's")
    p = sub.add_parser("experiment", help="every stage, then beta2=0 vs beta2 over rl_seeds")
    _add_config_flags(p)
    return parser


def resolve_config(args) -> ExperimentConfig:
    base = cfgmod.load(args.config) if getattr(args, "config", None) else ExperimentConfig()
    return cfgmod.from_mapping(getattr(args, "overrides", {}) or {}, base)


# ----------------------------------------------------------------------------
# file helpers
# ----------------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header: Sequence[str], rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def read_csv(path) -> list[dict[str, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        out = []
        for row in csv.DictReader(fh):
            parsed = {}
            for k, v in row.items():
                try:
                    parsed[k] = float(v)
                except ValueError:
                    parsed[k] = v
            out.append(parsed)
        return out


def file_digest(*paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).read_bytes())
    return h.hexdigest()


def _require(*paths) -> None:
    for p in paths:
        if not Path(p).is_file():
            raise MissingInput(f"missing input file: {p}")


class Layout:
    def __init__(self, cfg: ExperimentConfig):
        root = Path(cfg.out_dir)
        self.root = root
        self.data = root / "data"
        self.sft = root / "sft"
        self.rm = root / "rm"
        self.rl = root / "rl"
        self.eval = root / "eval"

    @property
    def data_files(self) -> list[Path]:
        return [self.data / n for n in ("sft.txt", "pref_train.txt", "pref_test.txt", "rl_prompts.txt")]

    @property
    def sft_ckpt(self) -> Path:
        return self.sft / "policy.ckpt"

    @property
    def rm_ckpt(self) -> Path:
        return self.rm / "ensemble.ckpt"


def _stamp_ok(directory: Path, digest: str, outputs: Sequence[Path]) -> bool:
    stamp = directory / "stamp.txt"
    return stamp.is_file() and stamp.read_text().strip() == digest and all(p.is_file() for p in outputs)


def _write_stamp(directory: Path, digest: str) -> None:
    (directory / "stamp.txt").write_text(digest + "\n")


# ----------------------------------------------------------------------------
# stages
# ----------------------------------------------------------------------------


def cmd_gen_data(cfg: ExperimentConfig) -> Path:
    lay = Layout(cfg)
    spec = cfg.task
    bundle = build_bundle(spec, cfg.prompt_budget, cfg.seed, cfg.sft_noise, cfg.pref_noise, cfg.test_fraction)
    lay.data.mkdir(parents=True, exist_ok=True)
    write_sft(lay.data / "sft.txt", bundle.sft_set)
    write_preferences(lay.data / "pref_train.txt", bundle.pref_train)
    write_preferences(lay.data / "pref_test.txt", bundle.pref_test)
    write_prompts(lay.data / "rl_prompts.txt", bundle.rl_prompts)
    manifest = [
        f"seed = {cfg.seed}",
        f"prompt_budget = {cfg.prompt_budget}",
        f"sft_pairs = {len(bundle.sft_set)}",
        f"preference_triples = {len(bundle.pref_set)}",
        f"preference_train = {len(bundle.pref_train)}",
        f"preference_test = {len(bundle.pref_test)}",
        f"preference_skipped = {bundle.skipped}",
        f"rl_prompts = {len(bundle.rl_prompts)}",
    ]
    manifest += [f"{k} = {_fmt(getattr(cfg, k))}" for k in ("match_bonus", "length_free", "length_slope", "repeat_penalty")]
    (lay.data / "manifest.txt").write_text("\n".join(manifest) + "\n")
    log.info("data: %d sft, %d preference, %d rl prompts", len(bundle.sft_set), len(bundle.pref_set), len(bundle.rl_prompts))
    return lay.data


def cmd_sft(cfg: ExperimentConfig) -> Path:
    lay = Layout(cfg)
    _require(lay.data / "sft.txt")
    pairs = read_sft(lay.data / "sft.txt")
    model, trace = sft_train(pairs, cfg.sft, cfg.backbone)
    lay.sft.mkdir(parents=True, exist_ok=True)
    write_checkpoint(lay.sft_ckpt, model.state_dict())
    write_csv(lay.sft / "sft_trace.csv", ["epoch", "nll"], enumerate(trace))
    return lay.sft_ckpt


def _load_policy(path) -> PolicyModel:
    _require(path)
    return PolicyModel.from_state_dict(read_checkpoint(path))


def _load_ensemble(path) -> RewardEnsemble:
    _require(path)
    return RewardEnsemble.from_state_dict(read_checkpoint(path))


def cmd_train_rm(cfg: ExperimentConfig) -> Path:
    lay = Layout(cfg)
    _require(lay.data / "pref_train.txt", lay.data / "pref_test.txt")
    policy = _load_policy(lay.sft_ckpt)
    train = read_preferences(lay.data / "pref_train.txt")
    test = read_preferences(lay.data / "pref_test.txt")
    rm = cfg.rm
    e = RewardEnsemble.create(policy.backbone, rm.members, rm.rank, seed=rm.seed, init_std=rm.init_std)
    e, trace = rm_train(e, train, rm, test, bins=cfg.ece_bins)
    lay.rm.mkdir(parents=True, exist_ok=True)
    write_checkpoint(lay.rm_ckpt, e.state_dict())
    write_csv(
        lay.rm / "rm_trace.csv",
        ["epoch", "rank_loss", "diversity_value", "holdout_acc", "holdout_ece"],
        [(r.epoch, r.rank_loss, r.diversity_value, r.holdout_acc, r.holdout_ece) for r in trace],
    )
    return lay.rm_ckpt


RL_HEADER = ["step", "proxy_reward", "gold_reward", "kl_measured", "u_mean", "u_running_mean", "kl_objective_value"]


def cmd_rl(cfg: ExperimentConfig, run_dir=None, seed: int | None = None, beta2: float | None = None) -> Path:
    lay = Layout(cfg)
    run = Path(run_dir) if run_dir else lay.rl
    _require(lay.data / "rl_prompts.txt")
    policy = _load_policy(lay.sft_ckpt)
    e = _load_ensemble(lay.rm_ckpt)
    prompts = read_prompts(lay.data / "rl_prompts.txt")
    result = rl_train(policy, e, prompts, cfg.task, cfg.rl(seed=seed, beta2=beta2))
    run.mkdir(parents=True, exist_ok=True)
    write_checkpoint(run / "policy.ckpt", result.policy.state_dict())
    for step, state in result.checkpoints:
        write_checkpoint(run / "checkpoints" / f"step_{step:04d}.ckpt", state)
    rows = [
        (r.step, r.proxy_reward, r.gold_reward, r.kl_measured, r.u_mean, r.u_running_mean, r.kl_objective_value)
        for r in result.trace
    ]
    write_csv(run / "rl_trace.csv", RL_HEADER, rows)
    if cfg.plots and rows:
        from .plotting import plot_rl_trace

        plot_rl_trace([dict(zip(RL_HEADER, r)) for r in rows], run / "rl_curve.png", title=run.name)
    return run


def _checkpoint_label(path: Path) -> str:
    return path.stem


def cmd_eval(cfg: ExperimentConfig, run_dir=None, checkpoints: Sequence[str] = (), out_dir=None) -> Path:
    lay = Layout(cfg)
    run = Path(run_dir) if run_dir else lay.rl
    out = Path(out_dir) if out_dir else lay.eval
    _require(lay.data / "pref_test.txt", lay.data / "rl_prompts.txt")
    reference = _load_policy(lay.sft_ckpt)
    e = _load_ensemble(lay.rm_ckpt)
    if checkpoints:
        paths = [Path(c) for c in checkpoints]
    else:
        paths = sorted((run / "checkpoints").glob("step_*.ckpt"))
        if not paths:
            paths = [lay.sft_ckpt, run / "policy.ckpt"]
    if len(paths) == 1:
        paths = [lay.sft_ckpt] + paths
    policies = [(_checkpoint_label(p), _load_policy(p)) for p in paths]

    test = read_preferences(lay.data / "pref_test.txt")
    report = ece(ensemble_deltas(e, test), bins=cfg.ece_bins)
    prompts = read_prompts(lay.data / "rl_prompts.txt")[: cfg.eval_prompts]
    rows = ood_curve(policies, reference, e, prompts, cfg.task, nx.make_rng(cfg.seed, "eval", "ood"), cfg.eval_samples)

    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "calibration.csv", ["bin", "count", "acc", "conf"], report.rows())
    write_csv(
        out / "ood_curve.csv",
        ["checkpoint", "kl", "u_mean", "gold_mean", "proxy_mean"],
        [(r.checkpoint, r.kl, r.u_mean, r.gold_mean, r.proxy_mean) for r in rows],
    )
    summary = [
        f"final_checkpoint = {rows[-1].checkpoint}",
        f"final_gold_reward = {_fmt(rows[-1].gold_mean)}",
        f"final_kl = {_fmt(rows[-1].kl)}",
        f"final_u_mean = {_fmt(rows[-1].u_mean)}",
        f"rm_accuracy = {_fmt(report.accuracy)}",
        f"ece = {_fmt(report.ece)}",
        f"calibration_scale = {_fmt(report.scale)}",
        "ties_credit = 0.5",
    ]
    (out / "summary.txt").write_text("\n".join(summary) + "\n")
    if cfg.plots:
        from .plotting import plot_ood_curve

        plot_ood_curve([r.__dict__ for r in rows], out / "ood_curve.png")
    return out


def _variants(cfg: ExperimentConfig) -> list[tuple[str, float]]:
    out = [("beta2_0", 0.0)]
    if cfg.beta2 != 0.0:
        out.append((f"beta2_{_fmt(cfg.beta2)}", cfg.beta2))
    return out


def cmd_experiment(cfg: ExperimentConfig) -> Path:
    """Every stage, skipping those whose stamp matches; then beta2=0 vs beta2 per rl seed."""
    lay = Layout(cfg)
    lay.root.mkdir(parents=True, exist_ok=True)
    (lay.root / "config.txt").write_text(cfgmod.serialize(cfg))

    d_hash = cfgmod.stage_hash(cfg, DATA_KEYS)
    if not _stamp_ok(lay.data, d_hash, lay.data_files):
        cmd_gen_data(cfg)
        _write_stamp(lay.data, d_hash)
    s_hash = cfgmod.stage_hash(cfg, SFT_KEYS, [file_digest(lay.data / "sft.txt")])
    if not _stamp_ok(lay.sft, s_hash, [lay.sft_ckpt]):
        cmd_sft(cfg)
        _write_stamp(lay.sft, s_hash)
    r_hash = cfgmod.stage_hash(
        cfg, RM_KEYS, [file_digest(lay.sft_ckpt, lay.data / "pref_train.txt", lay.data / "pref_test.txt")]
    )
    if not _stamp_ok(lay.rm, r_hash, [lay.rm_ckpt]):
        cmd_train_rm(cfg)
        _write_stamp(lay.rm, r_hash)
    upstream = file_digest(lay.sft_ckpt, lay.rm_ckpt, lay.data / "rl_prompts.txt")

    comparison = []
    traces = {}
    for seed in cfg.seed_list():
        for name, beta2 in _variants(cfg):
            run = lay.rl / f"seed{seed}_{name}"
            h = cfgmod.stage_hash(cfg, RL_KEYS, [upstream, f"seed={seed}", f"beta2={_fmt(beta2)}"])
            if not _stamp_ok(run, h, [run / "policy.ckpt", run / "rl_trace.csv"]):
                cmd_rl(cfg, run, seed=seed, beta2=beta2)
                _write_stamp(run, h)
            ev = run / "eval"
            eh = cfgmod.stage_hash(cfg, EVAL_KEYS, [h, file_digest(run / "policy.ckpt")])
            if cfg.rl_checkpoint_every and not _stamp_ok(ev, eh, [ev / "ood_curve.csv"]):
                cmd_eval(cfg, run_dir=run, out_dir=ev)
                _write_stamp(ev, eh)
            rows = read_csv(run / "rl_trace.csv")
            traces[f"beta2={_fmt(beta2) if beta2 else '0'} seed={seed}"] = rows
            if (ev / "ood_curve.csv").is_file():
                # checkpoint evaluation on eval_prompts is far less noisy than one training batch
                ood = read_csv(ev / "ood_curve.csv")
                gold, kl = [r["gold_mean"] for r in ood], ood[-1]["kl"]
            else:
                gold = [r["gold_reward"] for r in rows] or [float("nan")]
                kl = rows[-1]["kl_measured"] if rows else float("nan")
            comparison.append((seed, name, gold[-1], max(gold), kl))
    write_csv(lay.root / "comparison.csv", ["seed", "variant", "final_gold", "max_gold", "final_kl"], comparison)
    if cfg.plots:
        from .plotting import plot_gold_comparison

        plot_gold_comparison(traces, lay.root / "gold_vs_kl.png")
    return lay.root


# ----------------------------------------------------------------------------
# entry point
# ----------------------------------------------------------------------------


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"uprlhf: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"uprlhf: cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        if args.command == "gen-data":
            out = cmd_gen_data(cfg)
        elif args.command == "sft":
            out = cmd_sft(cfg)
        elif args.command == "train-rm":
            out = cmd_train_rm(cfg)
        elif args.command == "rl":
            out = cmd_rl(cfg, args.run_dir)
        elif args.command == "eval":
            out = cmd_eval(cfg, args.run_dir, args.checkpoints)
        else:
            out = cmd_experiment(cfg)
    except (MissingInput, CheckpointError) as exc:
        print(f"uprlhf: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"uprlhf: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError) as exc:
        print(f"uprlhf: {exc}", file=sys.stderr)
        return EXIT_IO
    print(out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

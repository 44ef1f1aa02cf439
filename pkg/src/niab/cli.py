"""Command-line entry point wiring generation, training, evaluation, replay,
and ablation sweeps.

Exit codes: 0 success, 1 validation error (bad data or config), 2 execution
fault. Every output directory receives ``effective_config.json`` with the
exact configuration and tool version, so outputs are reproducible from the
snapshot alone. The default output root comes from ``$NIAB_OUT`` (falling
back to the current directory).
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
from dataclasses import asdict

from . import __version__
from .embedding import HashingEmbedder, load_table
from .episodes import load_corpus, save_corpus
from .errors import (
    AllKeysMasked,
    ExecutionFault,
    NiabError,
    NoExpansion,
    NonFiniteActivation,
    NonFiniteGradient,
    PreconditionUnsatisfiable,
)
from .evaluate import POLICIES, evaluate, policy_oracle
from .ranker import RankerConfig, load_checkpoint
from .scenegen import GenConfig, generate_corpus, split_corpus
from .simulator import ExpansionTable, initial_world, run_assisted, run_unassisted
from .trainer import TrainConfig, train
from .vocab import load_default_vocabs, load_vocab_dir

_EXEC_ERRORS = (
    ExecutionFault,
    PreconditionUnsatisfiable,
    NoExpansion,
    NonFiniteActivation,
    NonFiniteGradient,
    AllKeysMasked,
)

DEFAULT_CONFIG = {
    "gen": {
        "seed": 42,
        "n_episodes": 2000,
        "label_mix": [0.75, 0.20, 0.05],
        "min_steps": 4,
        "max_steps": 12,
        "vocab_size_range": [24, 40],
    },
    "retrieval": {"k_per_step": 5, "k_episode": 20},
    "ranker": {
        "d_model": 256,
        "n_layers": 2,
        "n_heads": 4,
        "mlp_hidden": 256,
        "max_steps": 12,
        "max_candidates": 22,
        "input_dim": 64,
    },
    "train": {
        "learning_rate": 3e-4,
        "weight_decay": 1e-2,
        "beta1": 0.9,
        "beta2": 0.999,
        "epsilon": 1e-8,
        "epochs": 12,
        "batch_size": 64,
        "seed": 0,
        "ablation": "full",
        "zero_label_mode": "noop_target",
        "val_fraction": 0.1,
    },
    "eval": {"policy": "model", "seed": 0},
    "embedder": {"kind": "hashing", "dim": 64, "seed": 0},
}


def _deep_merge(base: dict, override: dict) -> dict:
    out = {k: dict(v) if isinstance(v, dict) else v for k, v in base.items()}
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def _load_config(path: str | None) -> dict:
    cfg = DEFAULT_CONFIG
    if path:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = _deep_merge(cfg, json.load(fh))
    return cfg


def _out_dir(args) -> str:
    root = os.environ.get("NIAB_OUT", ".")
    out = args.out if os.path.isabs(args.out) else os.path.join(root, args.out)
    os.makedirs(out, exist_ok=True)
    return out


def _echo_config(out: str, cfg: dict, command: str) -> None:
    payload = {"tool_version": __version__, "command": command, "config": cfg}
    with open(os.path.join(out, "effective_config.json"), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _make_embedder(cfg: dict, flag: str | None):
    if flag:
        if flag == "hashing":
            cfg["embedder"] = {"kind": "hashing", "dim": 64, "seed": 0}
        elif flag.startswith("table:"):
            cfg["embedder"] = {"kind": "table", "path": flag.split(":", 1)[1]}
        else:
            raise ValueError(f"--embedder must be 'hashing' or 'table:<path>', got {flag!r}")
    spec = cfg["embedder"]
    if spec["kind"] == "hashing":
        return HashingEmbedder(dim=spec.get("dim", 64), seed=spec.get("seed", 0))
    if spec["kind"] == "table":
        return load_table(spec["path"])
    raise ValueError(f"unknown embedder kind {spec['kind']!r}")


def _vocabs(args):
    if getattr(args, "vocab_dir", None):
        return load_vocab_dir(args.vocab_dir)
    return load_default_vocabs()


def _ranker_config(cfg: dict) -> RankerConfig:
    return RankerConfig(**cfg["ranker"])


def _train_config(cfg: dict) -> TrainConfig:
    section = dict(cfg["train"])
    section.pop("val_fraction", None)
    return TrainConfig(**section)


# -- subcommands ------------------------------------------------------------------

def _cmd_gen(args) -> int:
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg["gen"]["seed"] = args.seed
    if args.n is not None:
        cfg["gen"]["n_episodes"] = args.n
    vocabs = _vocabs(args)
    gen_cfg = GenConfig(
        seed=cfg["gen"]["seed"],
        n_episodes=cfg["gen"]["n_episodes"],
        label_mix=tuple(cfg["gen"]["label_mix"]),
        min_steps=cfg["gen"]["min_steps"],
        max_steps=cfg["gen"]["max_steps"],
        vocab_size_range=tuple(cfg["gen"]["vocab_size_range"]),
    )
    corpus = generate_corpus(gen_cfg, vocabs)
    out = _out_dir(args)
    save_corpus(corpus, os.path.join(out, "corpus.niab.jsonl"))
    snap = os.path.join(out, "vocab")
    os.makedirs(snap, exist_ok=True)
    if getattr(args, "vocab_dir", None):
        for scene in vocabs:
            shutil.copy(os.path.join(args.vocab_dir, f"{scene}.json"), snap)
    else:
        from importlib import resources

        base = resources.files("niab").joinpath("data/vocab")
        for scene in vocabs:
            with base.joinpath(f"{scene}.json").open("rb") as src, open(
                os.path.join(snap, f"{scene}.json"), "wb"
            ) as dst:
                dst.write(src.read())
    _echo_config(out, cfg, "gen")
    print(f"wrote {len(corpus)} episodes to {out}/corpus.niab.jsonl")
    return 0


def _cmd_split(args) -> int:
    cfg = _load_config(args.config)
    corpus = load_corpus(args.corpus)
    train_c, val_c = split_corpus(corpus, (args.train_frac, 1.0 - args.train_frac), args.seed)
    out = _out_dir(args)
    save_corpus(train_c, os.path.join(out, "train.niab.jsonl"))
    save_corpus(val_c, os.path.join(out, "val.niab.jsonl"))
    _echo_config(out, _deep_merge(cfg, {"split": {"train_frac": args.train_frac, "seed": args.seed}}), "split")
    print(f"split {len(corpus)} -> {len(train_c)} train / {len(val_c)} val")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_config(args.config)
    for key, val in (
        ("epochs", args.epochs),
        ("seed", args.seed),
        ("ablation", args.ablation),
        ("batch_size", args.batch_size),
    ):
        if val is not None:
            cfg["train"][key] = val
    embedder = _make_embedder(cfg, args.embedder)
    cfg["ranker"]["input_dim"] = getattr(embedder, "dim")
    corpus = load_corpus(args.corpus)
    val_corpus = load_corpus(args.val, split="val") if args.val else None
    out = _out_dir(args)
    _echo_config(out, cfg, "train")
    params, history = train(
        corpus,
        embedder,
        _ranker_config(cfg),
        _train_config(cfg),
        val_corpus=val_corpus,
        val_fraction=cfg["train"]["val_fraction"],
        K=cfg["retrieval"]["k_per_step"],
        K_ep=cfg["retrieval"]["k_episode"],
        out_dir=out,
    )
    final = history[-1] if history else {}
    print(
        f"trained {cfg['train']['epochs']} epochs; "
        f"final val SelectionAcc {final.get('val_selection_acc', 0.0):.4f}; "
        f"checkpoints in {out}"
    )
    return 0


def _cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    if args.policy is not None:
        cfg["eval"]["policy"] = args.policy
    if args.seed is not None:
        cfg["eval"]["seed"] = args.seed
    policy = cfg["eval"]["policy"]
    embedder = _make_embedder(cfg, args.embedder)
    corpus = load_corpus(args.corpus, split="test")
    vocabs = _vocabs(args)
    params = config = None
    ablation = args.ablation or cfg["train"]["ablation"]
    if policy == "model":
        if not args.ckpt:
            raise ValueError("eval --policy model requires --ckpt")
        params, config = load_checkpoint(args.ckpt)
    report = evaluate(
        corpus,
        policy,
        vocabs=vocabs,
        params=params,
        config=config,
        embedder=embedder,
        K=cfg["retrieval"]["k_per_step"],
        K_ep=cfg["retrieval"]["k_episode"],
        ablation=ablation,
        seed=cfg["eval"]["seed"],
    )
    out = _out_dir(args)
    with open(os.path.join(out, "report.json"), "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
        fh.write("\n")
    if args.emit_csv:
        with open(os.path.join(out, "report.csv"), "w", encoding="utf-8") as fh:
            fh.write(report.to_csv())
    _echo_config(out, cfg, "eval")
    s = report.summary()
    print(
        f"policy={s['policy']} SelectionAcc={s['selection_acc']:.4f} "
        f"meanHSS={s['mean_hss']:.3f} SuccessAcc={s['success_acc']:.4f}"
    )
    return 0


def _cmd_run(args) -> int:
    cfg = _load_config(args.config)
    corpus = load_corpus(args.corpus)
    episode = corpus.by_id(args.episode)
    vocabs = _vocabs(args)
    table = ExpansionTable.default()
    world0 = initial_world(episode.scene, vocabs[episode.scene])

    if args.step is not None and args.action is not None:
        prediction = (args.step, args.action)
    elif args.ckpt:
        params, config = load_checkpoint(args.ckpt)
        embedder = _make_embedder(cfg, args.embedder)
        from .evaluate import predict

        pred = predict(params, config, episode, embedder,
                       K=cfg["retrieval"]["k_per_step"], K_ep=cfg["retrieval"]["k_episode"])
        prediction = pred.chosen
    else:
        prediction = policy_oracle(episode).chosen

    base = run_unassisted(episode, world0, table)
    rep = run_assisted(episode, world0, table, prediction)
    print(f"episode {episode.episode_id} ({episode.scene}), prediction {prediction}")
    print(f"human steps: {list(episode.human_task_seq)}")
    print(f"unassisted primitives: {base.h_human}")
    print("robot trace:")
    for t in rep.robot_trace:
        print(f"  [window before step {t.step_idx}] {t.prim.sig}")
    if rep.robot_abandoned:
        print(f"  robot action abandoned: {rep.robot_abandoned}")
    print("assisted human trace:")
    for t in rep.human_trace:
        print(f"  [step {t.step_idx}] {t.prim.sig}")
    if rep.skipped_steps:
        print(f"skipped steps: {rep.skipped_steps}")
    print(f"H_human={rep.h_human} H_assist={rep.h_assist} HSS={rep.hss} success={rep.success}")
    return 0


def _cmd_ablate(args) -> int:
    cfg = _load_config(args.config)
    if args.epochs is not None:
        cfg["train"]["epochs"] = args.epochs
    if args.seed is not None:
        cfg["train"]["seed"] = args.seed
    embedder = _make_embedder(cfg, args.embedder)
    cfg["ranker"]["input_dim"] = getattr(embedder, "dim")
    corpus = load_corpus(args.corpus)
    train_c, val_c = split_corpus(
        corpus, (1.0 - cfg["train"]["val_fraction"], cfg["train"]["val_fraction"]),
        cfg["train"]["seed"],
    )
    vocabs = _vocabs(args)
    out = _out_dir(args)
    _echo_config(out, cfg, "ablate")
    table_rows = []
    for ablation in ("full", "no_retrieval", "action_only"):
        sub_cfg = dict(cfg["train"])
        sub_cfg["ablation"] = ablation
        sub_cfg.pop("val_fraction", None)
        variant_dir = os.path.join(out, ablation)
        params, _ = train(
            train_c, embedder, _ranker_config(cfg), TrainConfig(**sub_cfg),
            val_corpus=val_c,
            K=cfg["retrieval"]["k_per_step"], K_ep=cfg["retrieval"]["k_episode"],
            out_dir=variant_dir,
        )
        report = evaluate(
            val_c, "model",
            vocabs=vocabs, params=params, config=_ranker_config(cfg), embedder=embedder,
            K=cfg["retrieval"]["k_per_step"], K_ep=cfg["retrieval"]["k_episode"],
            ablation=ablation, seed=cfg["eval"]["seed"],
        )
        s = report.summary()
        table_rows.append(
            {
                "variant": ablation,
                "selection_acc": s["selection_acc"],
                "mean_hss": s["mean_hss"],
                "success_acc": s["success_acc"],
            }
        )
    with open(os.path.join(out, "ablation.json"), "w", encoding="utf-8") as fh:
        json.dump(table_rows, fh, indent=2, sort_keys=True)
        fh.write("\n")
    lines = [f"{'variant':<14} {'SelectionAcc':>12} {'meanHSS':>9} {'SuccessAcc':>11}"]
    for row in table_rows:
        lines.append(
            f"{row['variant']:<14} {row['selection_acc']:>12.4f} "
            f"{row['mean_hss']:>9.3f} {row['success_acc']:>11.4f}"
        )
    text = "\n".join(lines) + "\n"
    with open(os.path.join(out, "ablation.txt"), "w", encoding="utf-8") as fh:
        fh.write(text)
    print(text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="niab",
        description="Benchmark harness and ranker for non-intrusive robot assistance",
    )
    parser.add_argument("--version", action="version", version=f"niab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", help="JSON config file; flags override it")
        p.add_argument("--embedder", help="'hashing' or 'table:<path>'")
        p.add_argument("--vocab-dir", help="directory with per-scene vocabulary files")
        if out:
            p.add_argument("--out", required=True, help="output directory (under $NIAB_OUT)")

    p = sub.add_parser("gen", help="generate a corpus")
    common(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--n", type=int, help="number of episodes")
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("split", help="stratified train/val split")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--train-frac", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_split)

    p = sub.add_parser("train", help="train the ranker")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--val", help="explicit validation corpus (default: internal split)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--seed", type=int)
    p.add_argument("--ablation", choices=("full", "no_retrieval", "action_only"))
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a policy on a corpus")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--policy", choices=POLICIES)
    p.add_argument("--ckpt", help="checkpoint for the model policy")
    p.add_argument("--ablation", choices=("full", "no_retrieval", "action_only"))
    p.add_argument("--seed", type=int)
    p.add_argument("--emit-csv", action="store_true")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("run", help="verbosely replay one episode")
    common(p, out=False)
    p.add_argument("--corpus", required=True)
    p.add_argument("--episode", required=True)
    p.add_argument("--ckpt")
    p.add_argument("--step", type=int, help="explicit predicted step")
    p.add_argument("--action", help="explicit predicted action")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("ablate", help="train and compare full/no_retrieval/action_only")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_ablate)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _EXEC_ERRORS as exc:
        print(f"error: execution fault: {exc}", file=sys.stderr)
        return 2
    except (NiabError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

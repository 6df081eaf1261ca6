"""Experiment runner: stage orchestration, artifact layout, CLI entry point.

Run layout:

    out_dir/
      config_resolved.ini
      seed_<s>/
        pretrained.ckpt  finetuned.ckpt  masked.ckpt
        tickets/<tag>.ticket
        retrained_<tag>.ckpt
        attack_<tag>.json
        metrics/<stage>.jsonl
      report/*.csv

Every metrics record and attack report carries the config hash and seed.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import pipeline
from .attack import SubstitutionTable, evaluate
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, config_hash, dump_config, load_config
from .data import (Corpus, SyntheticTask, generate_synthetic, load_substitutions,
                   load_tsv, load_vocab, save_substitutions, save_vocab)
from .model import MaskedTransformer, ModelConfig
from .report import make_report
from .seeds import derive_seed


@dataclass
class TaskData:
    corpora: dict[str, Corpus]
    table: SubstitutionTable
    vocab: dict[str, int]
    num_classes: int


def build_task(cfg: RunConfig) -> TaskData:
    if cfg.data_source == "synthetic":
        task: SyntheticTask = generate_synthetic(cfg.synthetic, cfg.data_seed)
        table = SubstitutionTable(task.substitutions, cfg.attack_max_candidates)
        return TaskData(task.splits, table, task.vocab, cfg.synthetic.num_classes)

    paths = cfg.tsv_paths
    max_len = cfg.model_shape["max_seq_len"]
    vocab = load_vocab(paths["vocab_path"]) if paths["vocab_path"] else None
    train = load_tsv(paths["train_path"], max_len, vocab, split="train")
    vocab = train.vocab
    if paths["dev_path"]:
        dev = load_tsv(paths["dev_path"], max_len, vocab, split="dev")
    else:
        # reserve 10% of training data as the development set
        k = max(1, len(train) // 10)
        order = np.random.Generator(
            np.random.PCG64(derive_seed(cfg.data_seed, "devsplit"))
        ).permutation(len(train))
        dev_idx, train_idx = order[:k], order[k:]
        dev = Corpus([train.examples[i] for i in dev_idx],
                     [train.labels[i] for i in dev_idx], vocab, "dev", train.seq_len)
        train = Corpus([train.examples[i] for i in train_idx],
                       [train.labels[i] for i in train_idx], vocab, "train", train.seq_len)
    test = load_tsv(paths["test_path"], max_len, vocab, split="test")
    pretrain = (
        load_tsv(paths["pretrain_path"], max_len, vocab, split="pretrain")
        if paths["pretrain_path"] else
        Corpus(train.examples, train.labels, vocab, "pretrain", train.seq_len)
    )
    table = SubstitutionTable(
        load_substitutions(paths["substitutions_path"], vocab, cfg.attack_max_candidates),
        cfg.attack_max_candidates,
    )
    num_classes = 1 + max(max(c.labels) for c in (train, dev, test))
    return TaskData({"pretrain": pretrain, "train": train, "dev": dev, "test": test},
                    table, vocab, num_classes)


def model_config(cfg: RunConfig, task: TaskData) -> ModelConfig:
    m = cfg.model_shape
    seq_needed = max(c.seq_len for c in task.corpora.values())
    if m["max_seq_len"] < seq_needed:
        raise ValueError(
            f"[model] max_seq_len {m['max_seq_len']} is below the data length {seq_needed}"
        )
    return ModelConfig(vocab_size=len(task.vocab), num_classes=task.num_classes, **m)


# --- artifact paths -----------------------------------------------------------


class RunPaths:
    def __init__(self, out_dir: str, seed: int):
        self.root = Path(out_dir)
        self.seed_dir = self.root / f"seed_{seed}"
        self.tickets = self.seed_dir / "tickets"
        self.metrics = self.seed_dir / "metrics"

    def ckpt(self, tag: str) -> Path:
        return self.seed_dir / f"{tag}.ckpt"

    def ticket(self, tag: str) -> Path:
        return self.tickets / f"{tag}.ticket"

    def attack(self, tag: str) -> Path:
        return self.seed_dir / f"attack_{tag}.json"

    def ensure(self):
        self.tickets.mkdir(parents=True, exist_ok=True)
        self.metrics.mkdir(parents=True, exist_ok=True)


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing {path}; run the '{stage}' stage first")
    return path


def write_metrics(paths: RunPaths, tag: str, records: list[dict],
                  cfg: RunConfig, seed: int):
    out = paths.metrics / f"{tag}.jsonl"
    with open(out, "w", encoding="utf-8") as fh:
        for rec in records:
            row = {"stage": tag, "seed": seed, "config_hash": cfg.config_hash}
            for k, v in rec.items():
                if isinstance(v, np.ndarray):
                    continue
                row[k] = float(v) if isinstance(v, (np.floating, float)) else v
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def _sp(p: float) -> str:
    return f"s{p:.2f}"


def _prepare_run_dir(cfg: RunConfig):
    root = Path(cfg.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    resolved = root / "config_resolved.ini"
    if resolved.exists():
        existing = load_config(resolved)
        if existing.config_hash != cfg.config_hash:
            raise ValueError(
                f"{resolved} holds a different config (hash {existing.config_hash} "
                f"vs {cfg.config_hash}); refusing to mix artifacts"
            )
    else:
        dump_config(cfg, resolved)
    if cfg.data_source == "synthetic":
        vocab_out = root / "vocab.txt"
        subs_out = root / "substitutions.tsv"
        if not vocab_out.exists():
            task = generate_synthetic(cfg.synthetic, cfg.data_seed)
            save_vocab(task.vocab, vocab_out)
            save_substitutions(task.substitutions, task.vocab, subs_out)


def _make_probe(cfg: RunConfig, task: TaskData):
    if cfg.curve_attack_limit <= 0:
        return None

    def probe(model, epoch):
        rep = evaluate(model, task.corpora["test"], task.table,
                       limit=cfg.curve_attack_limit,
                       max_candidates=cfg.attack_max_candidates)
        return {"probe_clean": rep.clean_acc, "probe_aua": rep.aua}

    return probe


# --- stages ---------------------------------------------------------------------


def stage_pretrain(cfg: RunConfig, seed: int, task: TaskData, paths: RunPaths):
    model = MaskedTransformer(model_config(cfg, task), seed=derive_seed(seed, "model"))
    hist = pipeline.pretrain_mlm(model, task.corpora["pretrain"], cfg.pretrain_settings,
                                 derive_seed(seed, "pretrain"), cfg.pretrain_mask_prob)
    model.snapshot_pretrained()
    save_checkpoint(model, paths.ckpt("pretrained"))
    write_metrics(paths, "pretrain", hist, cfg, seed)


def stage_finetune(cfg: RunConfig, seed: int, task: TaskData, paths: RunPaths):
    model = load_checkpoint(_require(paths.ckpt("pretrained"), "pretrain"))
    hist = pipeline.finetune(model, task.corpora["train"], task.corpora["dev"],
                             cfg.finetune_settings, derive_seed(seed, "finetune"),
                             probe=_make_probe(cfg, task))
    save_checkpoint(model, paths.ckpt("finetuned"))
    write_metrics(paths, "finetune", hist, cfg, seed)


def stage_learn_masks(cfg: RunConfig, seed: int, task: TaskData, paths: RunPaths):
    model = load_checkpoint(_require(paths.ckpt("finetuned"), "finetune"))
    _, hist = pipeline.learn_masks(model, task.corpora["train"], task.corpora["dev"],
                                   cfg.mask_cfg, derive_seed(seed, "learn_masks"))
    save_checkpoint(model, paths.ckpt("masked"))
    write_metrics(paths, "learn_masks", hist, cfg, seed)


def stage_draw(cfg: RunConfig, seed: int, task: TaskData, paths: RunPaths):
    model = load_checkpoint(_require(paths.ckpt("masked"), "learn-masks"))
    for p in cfg.sparsities:
        ticket = pipeline.draw_ticket(
            model, p, meta={"config_hash": cfg.config_hash, "seed": seed,
                            "source": "learn-masks"})
        pipeline.save_ticket(ticket, paths.ticket(f"robust_{_sp(p)}"))


def stage_random_ticket(cfg: RunConfig, seed: int, task: TaskData, paths: RunPaths):
    model = load_checkpoint(_require(paths.ckpt("pretrained"), "pretrain"))
    p = cfg.headline_sparsity
    ref = pipeline.load_ticket(_require(paths.ticket(f"robust_{_sp(p)}"), "draw"))
    ticket = pipeline.random_ticket(model, ref, derive_seed(seed, "random_ticket"))
    ticket.meta.update({"config_hash": cfg.config_hash, "seed": seed})
    pipeline.save_ticket(ticket, paths.ticket(f"random_{_sp(p)}"))


def stage_imp(cfg: RunConfig, seed: int, task: TaskData, paths: RunPaths):
    model = load_checkpoint(_require(paths.ckpt("pretrained"), "pretrain"))
    ticket = pipeline.imp_baseline(model, task.corpora["train"], task.corpora["dev"],
                                   cfg.headline_sparsity, cfg.imp_rounds,
                                   cfg.finetune_settings, derive_seed(seed, "imp"))
    ticket.meta.update({"config_hash": cfg.config_hash, "seed": seed})
    pipeline.save_ticket(ticket, paths.ticket(f"imp_{_sp(cfg.headline_sparsity)}"))


def stage_retrain(cfg: RunConfig, seed: int, task: TaskData, paths: RunPaths):
    ticket_files = sorted(paths.tickets.glob("*.ticket"))
    if not ticket_files:
        raise FileNotFoundError(
            f"no tickets under {paths.tickets}; run the 'draw' stage first")
    for tf in ticket_files:
        tag = tf.stem
        ticket = pipeline.load_ticket(tf)
        model = load_checkpoint(_require(paths.ckpt("pretrained"), "pretrain"))
        # same seed stream as fine-tuning: a sparsity-0 ticket reproduces it
        hist = pipeline.retrain(model, ticket, task.corpora["train"], task.corpora["dev"],
                                cfg.finetune_settings, derive_seed(seed, "finetune"),
                                probe=_make_probe(cfg, task))
        save_checkpoint(model, paths.ckpt(f"retrained_{tag}"))
        write_metrics(paths, f"retrain_{tag}", hist, cfg, seed)


def stage_ablate(cfg: RunConfig, seed: int, task: TaskData, paths: RunPaths):
    p = cfg.headline_sparsity
    ticket = pipeline.load_ticket(_require(paths.ticket(f"robust_{_sp(p)}"), "draw"))
    for mode in cfg.ablation_modes:
        model = load_checkpoint(_require(paths.ckpt("pretrained"), "pretrain"))
        hist = pipeline.ablation_variants(
            model, ticket, mode, task.corpora["train"], task.corpora["dev"],
            cfg.finetune_settings, derive_seed(seed, "ablate"),
            longer_epochs=cfg.ablation_longer_epochs, probe=_make_probe(cfg, task))
        tag = f"ablate_{mode}_{_sp(p)}"
        save_checkpoint(model, paths.ckpt(f"retrained_{tag}"))
        write_metrics(paths, f"retrain_{tag}", hist, cfg, seed)


def stage_attack(cfg: RunConfig, seed: int, task: TaskData, paths: RunPaths):
    targets = [("finetune", _require(paths.ckpt("finetuned"), "finetune"))]
    for ck in sorted(paths.seed_dir.glob("retrained_*.ckpt")):
        targets.append((ck.stem.removeprefix("retrained_"), ck))
    for tag, ck in targets:
        model = load_checkpoint(ck)
        rep = evaluate(model, task.corpora["test"], task.table,
                       limit=cfg.attack_limit,
                       max_candidates=cfg.attack_max_candidates)
        payload = {"config_hash": cfg.config_hash, "seed": seed, "tag": tag,
                   "report": rep.to_dict()}
        with open(paths.attack(tag), "w", encoding="utf-8") as fh:
            fh.write(json.dumps(payload, sort_keys=True))


STAGE_FUNCS = {
    "pretrain": stage_pretrain,
    "finetune": stage_finetune,
    "learn-masks": stage_learn_masks,
    "draw": stage_draw,
    "random-ticket": stage_random_ticket,
    "imp": stage_imp,
    "retrain": stage_retrain,
    "ablate": stage_ablate,
    "attack": stage_attack,
}


def run_stage(cfg: RunConfig, stage: str, seeds: list[int] | None = None):
    _prepare_run_dir(cfg)
    if stage == "report":
        make_report(cfg.out_dir)
        return
    task = build_task(cfg)
    for seed in seeds or cfg.seeds:
        paths = RunPaths(cfg.out_dir, seed)
        paths.ensure()
        STAGE_FUNCS[stage](cfg, seed, task, paths)


def run_all(cfg: RunConfig, seeds: list[int] | None = None):
    _prepare_run_dir(cfg)
    task = build_task(cfg)
    per_seed = [s for s in cfg.stages if s != "report"]
    for seed in seeds or cfg.seeds:
        paths = RunPaths(cfg.out_dir, seed)
        paths.ensure()
        for stage in per_seed:
            STAGE_FUNCS[stage](cfg, seed, task, paths)
    if "report" in cfg.stages:
        make_report(cfg.out_dir)


def main(argv=None) -> int:
    import torch

    # ops here are tiny; a single CPU thread beats the sync overhead
    torch.set_num_threads(1)
    parser = argparse.ArgumentParser(
        prog="rtickets",
        description="Robust-subnetwork discovery pipeline on a toy transformer",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("run", "pretrain", "finetune", "learn-masks", "draw", "random-ticket",
                 "imp", "retrain", "ablate", "attack", "report"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="path to the INI config")
        sp.add_argument("--seed", type=int, default=None,
                        help="restrict to one seed (default: all seeds in the config)")
        sp.add_argument("--out", default=None, help="override the output directory")
        if name == "report":
            sp.add_argument("--force", action="store_true",
                            help="aggregate even if config hashes disagree")

    args = parser.parse_args(argv)
    overrides = {}
    if args.out is not None:
        overrides[("run", "out_dir")] = args.out
    try:
        cfg = load_config(args.config, overrides)
        seeds = [args.seed] if args.seed is not None else None
        if args.command == "run":
            run_all(cfg, seeds)
        elif args.command == "report":
            make_report(cfg.out_dir, force=args.force)
        else:
            run_stage(cfg, args.command, seeds)
    except (ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

"""Flat INI experiment configuration.

One human-readable ``key = value`` file with sections; every effective value
(defaults merged with the file) participates in the config hash except the
output directory, so identical experiments hash identically wherever they
are written.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field

from .advloss import AdvConfig
from .data import SyntheticSpec
from .pipeline import ABLATION_MODES, MaskTrainConfig, TrainSettings

STAGES = ("pretrain", "finetune", "learn-masks", "draw", "random-ticket",
          "imp", "retrain", "ablate", "attack", "report")

# fine-tune defaults follow the usual transformer fine-tuning recipe; the
# shipped synthetic configs override lr/epochs because the toy model trains
# from scratch
DEFAULTS: dict[str, dict[str, str]] = {
    "run": {
        "out_dir": "runs/run",
        "seeds": "0,1,2,3,4",
        "stages": "pretrain,finetune,learn-masks,draw,random-ticket,retrain,attack,report",
        "sparsities": "0.1,0.3,0.5,0.7,0.9",
        "headline_sparsity": "0.3",
        "data_seed": "1234",
        "attack_limit": "200",
        "attack_max_candidates": "8",
        "curve_attack_limit": "0",
        "imp_rounds": "3",
        "ablation_modes": ",".join(ABLATION_MODES),
        "ablation_longer_epochs": "10",
    },
    "data": {
        "source": "synthetic",
        "num_classes": "2",
        "seq_len": "16",
        "min_len": "10",
        "filler_tokens": "24",
        "signal_per_class": "20",
        "shortcut_per_class": "3",
        "shortcut_copies": "3",
        "noise_rate": "0.0",
        "train_correlation": "0.95",
        "dev_correlation": "0.95",
        "test_correlation": "0.95",
        "pretrain_correlation": "0.5",
        "pretrain_signal_copies": "3",
        "substitute_fillers": "true",
        "pretrain_size": "3000",
        "train_size": "2000",
        "dev_size": "400",
        "test_size": "600",
        "substitution_fillers": "2",
        "train_path": "",
        "dev_path": "",
        "test_path": "",
        "pretrain_path": "",
        "vocab_path": "",
        "substitutions_path": "",
    },
    "model": {
        "embed_dim": "64",
        "num_layers": "2",
        "num_heads": "4",
        "mlp_dim": "128",
        "max_seq_len": "16",
    },
    "pretrain": {
        "lr": "1e-3",
        "epochs": "8",
        "weight_decay": "0.01",
        "batch_size": "32",
        "grad_clip": "1.0",
        "dropout": "0.1",
        "mask_prob": "0.15",
    },
    "finetune": {
        "lr": "2e-5",
        "epochs": "3",
        "weight_decay": "0.01",
        "batch_size": "32",
        "grad_clip": "1.0",
        "dropout": "0.1",
    },
    "mask": {
        "lambda": "0.5",
        "mask_lr": "0.1",
        "epochs": "20",
        "weight_decay": "1e-6",
        "batch_size": "32",
    },
    "adv": {
        "variant": "freelb_accumulate",
        "eta": "0.03",
        "epsilon0": "0.05",
        "steps": "5",
        "epsilon": "unbounded",
    },
}


@dataclass
class RunConfig:
    raw: dict[str, dict[str, str]]
    out_dir: str
    seeds: list[int]
    stages: list[str]
    sparsities: list[float]
    headline_sparsity: float
    data_seed: int
    attack_limit: int
    attack_max_candidates: int
    curve_attack_limit: int
    imp_rounds: int
    ablation_modes: list[str]
    ablation_longer_epochs: int
    data_source: str
    synthetic: SyntheticSpec | None
    tsv_paths: dict[str, str]
    model_shape: dict[str, int]
    pretrain_settings: TrainSettings
    pretrain_mask_prob: float
    finetune_settings: TrainSettings
    mask_cfg: MaskTrainConfig
    config_hash: str = field(default="")

    def validate(self):
        if not self.seeds:
            raise ValueError("[run] seeds must not be empty")
        for s in self.stages:
            if s not in STAGES:
                raise ValueError(f"unknown stage {s!r}; valid stages: {STAGES}")
        for p in self.sparsities + [self.headline_sparsity]:
            if not (0.0 <= p < 1.0):
                raise ValueError(f"sparsity {p} must lie in [0, 1)")
        for m in self.ablation_modes:
            if m not in ABLATION_MODES:
                raise ValueError(f"unknown ablation mode {m!r}")
        if self.data_source not in ("synthetic", "tsv"):
            raise ValueError("[data] source must be 'synthetic' or 'tsv'")
        if self.data_source == "synthetic":
            self.synthetic.validate()
        else:
            for key in ("train_path", "test_path", "substitutions_path"):
                if not self.tsv_paths.get(key):
                    raise ValueError(f"[data] {key} is required for a tsv source")
        self.mask_cfg.validate()


def _merge(path) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    if path is not None:
        read = parser.read(path)
        if not read:
            raise ValueError(f"config file not found: {path}")
    merged = {sec: dict(items) for sec, items in DEFAULTS.items()}
    for sec in parser.sections():
        if sec not in merged:
            raise ValueError(f"unknown config section [{sec}]")
        for key, value in parser.items(sec):
            if key not in merged[sec]:
                raise ValueError(f"unknown config key [{sec}] {key}")
            merged[sec][key] = value
    return merged


def config_hash(raw: dict[str, dict[str, str]]) -> str:
    lines = []
    for sec in sorted(raw):
        for key in sorted(raw[sec]):
            if (sec, key) == ("run", "out_dir"):
                continue
            lines.append(f"{sec}.{key}={raw[sec][key]}")
    return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()[:16]


def _floats(s: str) -> list[float]:
    return [float(x) for x in s.split(",") if x.strip()]


def _ints(s: str) -> list[int]:
    return [int(x) for x in s.split(",") if x.strip()]


def _names(s: str) -> list[str]:
    return [x.strip() for x in s.split(",") if x.strip()]


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Parse and validate; overrides is a {(section, key): value} dict."""
    raw = _merge(path)
    for (sec, key), value in (overrides or {}).items():
        if sec not in raw or key not in raw[sec]:
            raise ValueError(f"unknown config key [{sec}] {key}")
        raw[sec][key] = str(value)

    run, dat, mod = raw["run"], raw["data"], raw["model"]
    pre, fin, msk, adv = raw["pretrain"], raw["finetune"], raw["mask"], raw["adv"]

    synthetic = None
    if dat["source"] == "synthetic":
        synthetic = SyntheticSpec(
            num_classes=int(dat["num_classes"]),
            seq_len=int(dat["seq_len"]),
            min_len=int(dat["min_len"]),
            filler_tokens=int(dat["filler_tokens"]),
            signal_per_class=int(dat["signal_per_class"]),
            shortcut_per_class=int(dat["shortcut_per_class"]),
            shortcut_copies=int(dat["shortcut_copies"]),
            noise_rate=float(dat["noise_rate"]),
            train_correlation=float(dat["train_correlation"]),
            dev_correlation=float(dat["dev_correlation"]),
            test_correlation=float(dat["test_correlation"]),
            pretrain_correlation=float(dat["pretrain_correlation"]),
            pretrain_signal_copies=int(dat["pretrain_signal_copies"]),
            substitute_fillers=dat["substitute_fillers"].lower() in ("1", "true", "yes"),
            pretrain_size=int(dat["pretrain_size"]),
            train_size=int(dat["train_size"]),
            dev_size=int(dat["dev_size"]),
            test_size=int(dat["test_size"]),
            substitution_fillers=int(dat["substitution_fillers"]),
        )

    def settings(sec: dict[str, str]) -> TrainSettings:
        return TrainSettings(
            lr=float(sec["lr"]),
            epochs=int(sec["epochs"]),
            weight_decay=float(sec["weight_decay"]),
            batch_size=int(sec["batch_size"]),
            grad_clip=float(sec["grad_clip"]),
            dropout=float(sec["dropout"]),
        )

    adv_cfg = AdvConfig(
        eta=float(adv["eta"]),
        epsilon0=float(adv["epsilon0"]),
        steps=int(adv["steps"]),
        epsilon=None if adv["epsilon"] == "unbounded" else float(adv["epsilon"]),
        variant=adv["variant"],
    )
    mask_cfg = MaskTrainConfig(
        lambda_=float(msk["lambda"]),
        mask_lr=float(msk["mask_lr"]),
        epochs=int(msk["epochs"]),
        weight_decay=float(msk["weight_decay"]),
        batch_size=int(msk["batch_size"]),
        adv=adv_cfg,
    )

    cfg = RunConfig(
        raw=raw,
        out_dir=run["out_dir"],
        seeds=_ints(run["seeds"]),
        stages=_names(run["stages"]),
        sparsities=_floats(run["sparsities"]),
        headline_sparsity=float(run["headline_sparsity"]),
        data_seed=int(run["data_seed"]),
        attack_limit=int(run["attack_limit"]),
        attack_max_candidates=int(run["attack_max_candidates"]),
        curve_attack_limit=int(run["curve_attack_limit"]),
        imp_rounds=int(run["imp_rounds"]),
        ablation_modes=_names(run["ablation_modes"]),
        ablation_longer_epochs=int(run["ablation_longer_epochs"]),
        data_source=dat["source"],
        synthetic=synthetic,
        tsv_paths={k: dat[k] for k in
                   ("train_path", "dev_path", "test_path", "pretrain_path",
                    "vocab_path", "substitutions_path")},
        model_shape={k: int(mod[k]) for k in mod},
        pretrain_settings=settings(pre),
        pretrain_mask_prob=float(pre["mask_prob"]),
        finetune_settings=settings(fin),
        mask_cfg=mask_cfg,
        config_hash=config_hash(raw),
    )
    cfg.validate()
    return cfg


def dump_config(cfg: RunConfig, path):
    parser = configparser.ConfigParser()
    for sec, items in cfg.raw.items():
        parser[sec] = items
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)

"""Pipeline stages: fine-tuning, adversarial mask learning, ticket drawing,
retraining, and the baselines (iterative magnitude pruning, random tickets,
re-initialization ablations).

Seed discipline: every stage takes one seed and derives its internal streams
from it.  Retraining deliberately consumes the same streams as fine-tuning,
so retraining a sparsity-0 ticket reproduces plain fine-tuning bit-exactly.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from . import hardconcrete as hc
from .advloss import AdvConfig, adversarial_loss
from .data import Corpus, batches
from .model import MaskedTransformer
from .seeds import derive_seed, np_rng, torch_seed


@dataclass
class TrainSettings:
    """Classifier training knobs (also used verbatim for ticket retraining)."""

    lr: float = 2e-5
    epochs: int = 3
    weight_decay: float = 1e-2
    batch_size: int = 32
    grad_clip: float = 1.0
    dropout: float = 0.1


@dataclass
class MaskTrainConfig:
    lambda_: float = 0.5
    mask_lr: float = 0.1
    epochs: int = 20
    weight_decay: float = 1e-6
    batch_size: int = 32
    adv: AdvConfig = field(default_factory=AdvConfig)
    snapshot_gates: bool = False

    def validate(self):
        if self.lambda_ < 0:
            raise ValueError("regularization strength lambda must be >= 0")
        if self.mask_lr <= 0:
            raise ValueError("mask learning rate must be positive")
        self.adv.validate()


@dataclass
class Ticket:
    """A drawn subnetwork: binary keep mask plus ranking provenance."""

    keep_mask: np.ndarray  # uint8 [num_maskable], 1 = keep
    scores: np.ndarray  # ranking key per maskable weight
    target_sparsity: float
    layer_sparsity: dict[str, float]  # "layer/kind" -> fraction pruned
    provenance: str
    meta: dict = field(default_factory=dict)

    @property
    def sparsity(self) -> float:
        return 1.0 - float(self.keep_mask.mean())


class AdamW:
    """Decoupled-weight-decay Adam for the numpy-side gate locations."""

    def __init__(self, lr, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.wd = lr, weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, param: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(param, dtype=np.float64)
            self.v = np.zeros_like(param, dtype=np.float64)
        self.t += 1
        g = grad.astype(np.float64)
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        out = param * (1 - self.lr * self.wd) - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return out


# --- classifier training ------------------------------------------------------


def train_classifier(model: MaskedTransformer, train: Corpus, dev: Corpus,
                     settings: TrainSettings, seed: int,
                     keep_mask: np.ndarray | None = None, probe=None) -> list[dict]:
    """Cross-entropy training; with keep_mask the pruned weights stay exactly 0.

    Pruned coordinates start at zero, receive zero gradient (the mask sits in
    the forward graph), and decoupled weight decay keeps zero at zero.
    """
    mask_f = None
    if keep_mask is not None:
        mask_f = np.asarray(keep_mask, dtype=np.float32)
        with torch.no_grad():
            for s in model.segments:
                model.params[s.name] *= torch.from_numpy(
                    mask_f[s.start : s.end].reshape(s.shape)
                )

    opt = torch.optim.AdamW(model.trainable(), lr=settings.lr,
                            weight_decay=settings.weight_decay)
    gen = torch.Generator().manual_seed(torch_seed(seed, "dropout"))
    history = []
    for epoch in range(settings.epochs):
        losses = []
        for step, b in enumerate(
            batches(train, settings.batch_size, derive_seed(seed, "shuffle", epoch), shuffle=True)
        ):
            logits = model.forward(b, mask_values=mask_f, dropout_p=settings.dropout, gen=gen)
            loss = torch.nn.functional.cross_entropy(logits, torch.as_tensor(b.labels))
            loss_val = float(loss.detach())
            if not math.isfinite(loss_val):
                raise RuntimeError(
                    f"training diverged (loss={loss_val}) at epoch {epoch} step {step}"
                )
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if settings.grad_clip:
                torch.nn.utils.clip_grad_value_(model.trainable(), settings.grad_clip)
            opt.step()
            losses.append(loss_val)
        rec = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)) if losses else 0.0,
            "train_acc": model.accuracy(train, mask_values=mask_f),
            "dev_acc": model.accuracy(dev, mask_values=mask_f),
        }
        if probe is not None:
            rec.update(probe(model, epoch))
        history.append(rec)
    return history


def finetune(model: MaskedTransformer, train: Corpus, dev: Corpus,
             settings: TrainSettings, seed: int, probe=None) -> list[dict]:
    if model.theta0 is None:
        raise RuntimeError("fine-tuning requires the pretrained snapshot; run pretrain first")
    return train_classifier(model, train, dev, settings, seed, probe=probe)


def pretrain_mlm(model: MaskedTransformer, corpus: Corpus, settings: TrainSettings,
                 seed: int, mask_prob: float = 0.15) -> list[dict]:
    """Masked-token prediction over the corpus; the stand-in pretraining task."""
    opt = torch.optim.AdamW(model.trainable(), lr=settings.lr,
                            weight_decay=settings.weight_decay)
    gen = torch.Generator().manual_seed(torch_seed(seed, "mlm_dropout"))
    history = []
    for epoch in range(settings.epochs):
        losses, hits, total = [], 0, 0
        for step, b in enumerate(
            batches(corpus, settings.batch_size, derive_seed(seed, "mlm_shuffle", epoch),
                    shuffle=True)
        ):
            rng = np_rng(seed, "mlm_mask", epoch, step)
            ids = b.token_ids.copy()
            targets = b.token_ids
            sel = np.zeros_like(ids, dtype=bool)
            for row in range(ids.shape[0]):
                content = np.flatnonzero(b.pad_mask[row])
                k = max(1, int(round(mask_prob * len(content))))
                pick = rng.permutation(content)[:k]
                sel[row, pick] = True
            from .data import MASK

            ids[sel] = MASK
            masked_batch = replace(b, token_ids=ids)
            logits = model.mlm_logits(masked_batch, dropout_p=settings.dropout, gen=gen)
            loss = torch.nn.functional.cross_entropy(
                logits[torch.as_tensor(sel)], torch.as_tensor(targets[sel])
            )
            loss_val = float(loss.detach())
            if not math.isfinite(loss_val):
                raise RuntimeError(
                    f"pretraining diverged (loss={loss_val}) at epoch {epoch} step {step}"
                )
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if settings.grad_clip:
                torch.nn.utils.clip_grad_value_(model.trainable(), settings.grad_clip)
            opt.step()
            losses.append(loss_val)
            with torch.no_grad():
                pred = logits[torch.as_tensor(sel)].argmax(-1).numpy()
            hits += int((pred == targets[sel]).sum())
            total += int(sel.sum())
        history.append({
            "epoch": epoch,
            "mlm_loss": float(np.mean(losses)),
            "mlm_acc": hits / max(total, 1),
        })
    return history


# --- mask learning -------------------------------------------------------------


def polarization_stats(gates: hc.GateParams, tol: float = 0.05) -> dict:
    g = hc.inference_gate(gates)
    return {
        "r_m": hc.expected_l0(gates),
        "polarization": float(np.mean((g <= tol) | (g >= 1.0 - tol))),
        "exact_zero": float(np.mean(g == 0.0)),
        "exact_one": float(np.mean(g == 1.0)),
    }


def learn_masks(model: MaskedTransformer, train: Corpus, dev: Corpus,
                cfg: MaskTrainConfig, seed: int):
    """Optimize gate locations under adversarial loss + lambda * expected L0.

    Model weights are frozen throughout; only log_alpha moves.  Returns the
    final GateParams (also bound back onto the model) and the per-epoch
    trajectory records.
    """
    cfg.validate()
    work = hc.GateParams(
        model.gates.log_alpha.astype(np.float64),
        model.gates.beta.astype(np.float64),
        model.gates.gamma,
        model.gates.zeta,
    )
    opt = AdamW(lr=cfg.mask_lr, weight_decay=cfg.weight_decay)
    for t in model.trainable():
        t.requires_grad_(False)
    history = []
    try:
        for epoch in range(cfg.epochs):
            adv_losses = []
            for step, b in enumerate(
                batches(train, cfg.batch_size, derive_seed(seed, "mask_shuffle", epoch),
                        shuffle=True)
            ):
                sample = hc.sample_gates(work, derive_seed(seed, "mask_sample", epoch, step))
                res = adversarial_loss(model, b, sample, cfg.adv,
                                       derive_seed(seed, "mask_adv", epoch, step))
                grad = res.gate_grad + cfg.lambda_ * hc.expected_l0_grad(work)
                work.log_alpha = opt.step(work.log_alpha, grad)
                adv_losses.append(res.loss)
            rec = {"epoch": epoch, "adv_loss": float(np.mean(adv_losses))}
            rec.update(polarization_stats(work))
            rec["dev_acc"] = model.accuracy(dev, mask_values=hc.inference_gate(work))
            if cfg.snapshot_gates:
                rec["log_alpha"] = work.log_alpha.copy()
            history.append(rec)
    finally:
        for t in model.trainable():
            t.requires_grad_(True)

    model.gates = hc.GateParams(
        work.log_alpha.astype(model.gates.log_alpha.dtype),
        model.gates.beta,
        work.gamma,
        work.zeta,
    )
    return model.gates, history


# --- drawing tickets ------------------------------------------------------------


def compute_layer_sparsity(segments, keep_mask: np.ndarray) -> dict[str, float]:
    return {
        f"{s.layer}/{s.kind}": 1.0 - float(keep_mask[s.start : s.end].mean())
        for s in segments
    }


def draw_ticket(model: MaskedTransformer, target_sparsity: float,
                scores: np.ndarray | None = None, provenance: str = "robust",
                meta: dict | None = None) -> Ticket:
    """Rank maskable weights globally by score (default: gate locations,
    ascending) and zero the lowest target fraction; ties break by index."""
    if not (0.0 <= target_sparsity < 1.0):
        raise ValueError("target sparsity must lie in [0, 1)")
    if scores is None:
        scores = model.gates.log_alpha.astype(np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (model.num_maskable,):
        raise ValueError("scores must have one entry per maskable weight")
    n_zero = int(math.floor(target_sparsity * model.num_maskable))
    order = np.argsort(scores, kind="stable")
    keep = np.ones(model.num_maskable, dtype=np.uint8)
    keep[order[:n_zero]] = 0
    return Ticket(
        keep_mask=keep,
        scores=scores,
        target_sparsity=target_sparsity,
        layer_sparsity=compute_layer_sparsity(model.segments, keep),
        provenance=provenance,
        meta=meta or {},
    )


def random_ticket(model: MaskedTransformer, reference: Ticket, rng_seed: int) -> Ticket:
    """Uniformly random structure matching the reference's per-segment sparsity."""
    keep = np.ones(model.num_maskable, dtype=np.uint8)
    for s in model.segments:
        n_pruned = int(s.size - reference.keep_mask[s.start : s.end].sum())
        idx = np_rng(rng_seed, "random_ticket", s.name).permutation(s.size)[:n_pruned]
        keep[s.start + idx] = 0
    return Ticket(
        keep_mask=keep,
        scores=np.zeros(model.num_maskable),
        target_sparsity=reference.target_sparsity,
        layer_sparsity=compute_layer_sparsity(model.segments, keep),
        provenance="random",
        meta={"reference": reference.provenance},
    )


def _maskable_magnitudes(model: MaskedTransformer) -> np.ndarray:
    out = np.empty(model.num_maskable, dtype=np.float64)
    for s in model.segments:
        out[s.start : s.end] = (
            model.params[s.name].detach().numpy().astype(np.float64).ravel()
        )
    return np.abs(out)


def imp_baseline(model: MaskedTransformer, train: Corpus, dev: Corpus,
                 target_sparsity: float, rounds: int, settings: TrainSettings,
                 seed: int) -> Ticket:
    """Iterative magnitude pruning: train, prune smallest surviving weights,
    rewind to the pretrained snapshot; geometric per-round schedule."""
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    if not (0.0 <= target_sparsity < 1.0):
        raise ValueError("target sparsity must lie in [0, 1)")
    if model.theta0 is None:
        raise RuntimeError("IMP requires the pretrained snapshot")

    n = model.num_maskable
    final_survivors = n - int(math.floor(target_sparsity * n))
    keep = np.ones(n, dtype=np.uint8)
    scores = np.zeros(n, dtype=np.float64)

    for r in range(1, rounds + 1):
        model.reset_to_pretrained()
        train_classifier(model, train, dev, settings, derive_seed(seed, "imp_round", r),
                         keep_mask=keep)
        mags = _maskable_magnitudes(model)
        if r == rounds:
            survivors_next = final_survivors
        else:
            survivors_next = int(round(n * (1.0 - target_sparsity) ** (r / rounds)))
            survivors_next = max(survivors_next, final_survivors)
        alive = np.flatnonzero(keep)
        to_prune = len(alive) - survivors_next
        if to_prune > 0:
            order = alive[np.argsort(mags[alive], kind="stable")]
            victims = order[:to_prune]
            keep[victims] = 0
            scores[victims] = mags[victims]

    scores[keep == 1] = mags[keep == 1]
    model.reset_to_pretrained()
    return Ticket(
        keep_mask=keep,
        scores=scores,
        target_sparsity=target_sparsity,
        layer_sparsity=compute_layer_sparsity(model.segments, keep),
        provenance="imp",
        meta={"rounds": rounds},
    )


# --- retraining ------------------------------------------------------------------


def retrain(model: MaskedTransformer, ticket: Ticket, train: Corpus, dev: Corpus,
            settings: TrainSettings, seed: int, probe=None) -> list[dict]:
    """Rewind to theta0, apply the ticket, fine-tune the survivors.

    Pass the fine-tune stage's seed: a sparsity-0 ticket then reproduces
    plain fine-tuning exactly.
    """
    if model.theta0 is None:
        raise RuntimeError("retraining requires the pretrained snapshot")
    model.reset_to_pretrained()
    return train_classifier(model, train, dev, settings, seed,
                            keep_mask=ticket.keep_mask, probe=probe)


ABLATION_MODES = ("reinit_ticket", "full_model_reinit_outside",
                  "full_model_reinit_outside_longer")


def ablation_variants(model: MaskedTransformer, ticket: Ticket, mode: str,
                      train: Corpus, dev: Corpus, settings: TrainSettings,
                      seed: int, longer_epochs: int = 10, probe=None) -> list[dict]:
    """Initialization-vs-structure controls.

    reinit_ticket: keep the ticket structure but train it from fresh random
    weights.  full_model_reinit_outside: keep theta0 and the full dense
    structure, randomizing only the weights the ticket pruned; the _longer
    variant trains longer to give the structure-free control a fair shot.
    """
    if mode not in ABLATION_MODES:
        raise ValueError(f"unknown ablation mode {mode!r}; pick one of {ABLATION_MODES}")
    if model.theta0 is None:
        raise RuntimeError("ablations require the pretrained snapshot")

    fresh = MaskedTransformer(model.config, seed=derive_seed(seed, "ablate_init", mode),
                              dtype=model.dtype)
    if mode == "reinit_ticket":
        with torch.no_grad():
            for name, t in model.params.items():
                t.copy_(fresh.params[name])
        return train_classifier(model, train, dev, settings, derive_seed(seed, "ablate", mode),
                                keep_mask=ticket.keep_mask, probe=probe)

    model.reset_to_pretrained()
    with torch.no_grad():
        for s in model.segments:
            hole = torch.from_numpy(
                (ticket.keep_mask[s.start : s.end] == 0).reshape(s.shape)
            )
            model.params[s.name][hole] = fresh.params[s.name][hole]
    st = settings
    if mode == "full_model_reinit_outside_longer":
        st = replace(settings, epochs=longer_epochs)
    return train_classifier(model, train, dev, st, derive_seed(seed, "ablate", mode),
                            probe=probe)


# --- ticket files ------------------------------------------------------------------

TICKET_MAGIC = b"RTKTICKT"
TICKET_VERSION = 1


def save_ticket(ticket: Ticket, path):
    header = {
        "n": int(ticket.keep_mask.size),
        "target_sparsity": ticket.target_sparsity,
        "layer_sparsity": ticket.layer_sparsity,
        "provenance": ticket.provenance,
        "meta": ticket.meta,
    }
    header_b = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(TICKET_MAGIC)
        fh.write(struct.pack("<I", TICKET_VERSION))
        fh.write(struct.pack("<I", len(header_b)))
        fh.write(header_b)
        fh.write(np.ascontiguousarray(ticket.scores, dtype="<f4").tobytes())
        fh.write(np.packbits(ticket.keep_mask.astype(np.uint8)).tobytes())


def load_ticket(path) -> Ticket:
    with open(path, "rb") as fh:
        if fh.read(8) != TICKET_MAGIC:
            raise ValueError(f"{path}: not a ticket file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != TICKET_VERSION:
            raise ValueError(f"{path}: unsupported ticket version {version}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        n = header["n"]
        scores = np.frombuffer(fh.read(4 * n), dtype="<f4").astype(np.float64)
        packed = np.frombuffer(fh.read((n + 7) // 8), dtype=np.uint8)
        keep = np.unpackbits(packed)[:n].astype(np.uint8)
    return Ticket(
        keep_mask=keep,
        scores=scores,
        target_sparsity=header["target_sparsity"],
        layer_sparsity=header["layer_sparsity"],
        provenance=header["provenance"],
        meta=header["meta"],
    )

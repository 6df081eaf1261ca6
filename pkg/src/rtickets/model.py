"""A small maskable transformer encoder classifier.

The encoder is pre-norm with bias-free attention/MLP projections, a learned
positional table, and a <cls> position prepended internally for pooling.
Classification reads the final <cls> hidden state, so information about the
other tokens reaches the head only through attention - which is exactly the
part that carries element-wise gates.

Maskable weights are the Q/K/V/output projections and both MLP matrices of
every layer, flattened into one canonical index (layer-major, then
q,k,v,o,mlp_in,mlp_out).  Embeddings, layer norms, and the heads are never
masked.  A mask enters the forward pass as ``weight * mask_segment``, so an
all-ones mask is bit-identical to no mask.

Gradients come from torch reverse-mode autodiff; gate-location gradients are
obtained by chaining the mask gradient through
:func:`rtickets.hardconcrete.gate_gradients`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from . import hardconcrete as hc
from .data import Batch, CLS
from .seeds import derive_seed, torch_seed

MASKABLE_KINDS = ("attn_q", "attn_k", "attn_v", "attn_o", "mlp_in", "mlp_out")


@dataclass
class ModelConfig:
    vocab_size: int
    num_classes: int
    embed_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    mlp_dim: int = 128
    max_seq_len: int = 32

    def validate(self):
        dims = (
            self.vocab_size,
            self.num_classes,
            self.embed_dim,
            self.num_layers,
            self.num_heads,
            self.mlp_dim,
            self.max_seq_len,
        )
        if any(d < 1 for d in dims):
            raise ValueError("all model dimensions must be >= 1")
        if self.embed_dim % self.num_heads != 0:
            raise ValueError("embed_dim must be divisible by num_heads")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class MaskSegment:
    """One maskable weight matrix inside the flat gate index."""

    name: str
    layer: int
    kind: str
    start: int
    end: int
    shape: tuple[int, int]

    @property
    def size(self) -> int:
        return self.end - self.start


def _dropout(x, p, gen):
    if p <= 0.0 or gen is None:
        return x
    keep = (torch.rand(x.shape, generator=gen, dtype=x.dtype) >= p).to(x.dtype)
    return x * keep / (1.0 - p)


def _layer_norm(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdim=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdim=True)
    return xc / torch.sqrt(var + eps) * g + b


class MaskedTransformer:
    """Owns theta, the pretrained snapshot theta0, and the bound gates."""

    def __init__(self, config: ModelConfig, seed: int, dtype=torch.float32):
        config.validate()
        self.config = config
        self.dtype = dtype
        self.seed = seed
        self.theta0: dict[str, torch.Tensor] | None = None
        self.forward_calls = 0

        gen = torch.Generator().manual_seed(torch_seed(seed, "model_init"))
        c = config

        def normal(*shape):
            w = torch.empty(*shape, dtype=dtype)
            w.normal_(0.0, 0.02, generator=gen)
            return w.requires_grad_(True)

        def ones(*shape):
            return torch.ones(*shape, dtype=dtype, requires_grad=True)

        def zeros(*shape):
            return torch.zeros(*shape, dtype=dtype, requires_grad=True)

        p: dict[str, torch.Tensor] = {}
        p["tok_emb"] = normal(c.vocab_size, c.embed_dim)
        p["pos_emb"] = normal(c.max_seq_len + 1, c.embed_dim)
        for i in range(c.num_layers):
            p[f"layer{i}.ln1.g"] = ones(c.embed_dim)
            p[f"layer{i}.ln1.b"] = zeros(c.embed_dim)
            p[f"layer{i}.attn.wq"] = normal(c.embed_dim, c.embed_dim)
            p[f"layer{i}.attn.wk"] = normal(c.embed_dim, c.embed_dim)
            p[f"layer{i}.attn.wv"] = normal(c.embed_dim, c.embed_dim)
            p[f"layer{i}.attn.wo"] = normal(c.embed_dim, c.embed_dim)
            p[f"layer{i}.ln2.g"] = ones(c.embed_dim)
            p[f"layer{i}.ln2.b"] = zeros(c.embed_dim)
            p[f"layer{i}.mlp.w1"] = normal(c.embed_dim, c.mlp_dim)
            p[f"layer{i}.mlp.w2"] = normal(c.mlp_dim, c.embed_dim)
        p["ln_f.g"] = ones(c.embed_dim)
        p["ln_f.b"] = zeros(c.embed_dim)
        p["cls_head.w"] = normal(c.embed_dim, c.num_classes)
        p["cls_head.b"] = zeros(c.num_classes)
        p["mlm_head.w"] = normal(c.embed_dim, c.vocab_size)
        p["mlm_head.b"] = zeros(c.vocab_size)
        self.params = p

        self.segments: list[MaskSegment] = []
        offset = 0
        kind_of = {
            "attn.wq": "attn_q",
            "attn.wk": "attn_k",
            "attn.wv": "attn_v",
            "attn.wo": "attn_o",
            "mlp.w1": "mlp_in",
            "mlp.w2": "mlp_out",
        }
        for i in range(c.num_layers):
            for suffix, kind in kind_of.items():
                name = f"layer{i}.{suffix}"
                size = p[name].numel()
                self.segments.append(
                    MaskSegment(name, i, kind, offset, offset + size, tuple(p[name].shape))
                )
                offset += size
        self.num_maskable = offset
        self.gates = hc.init_gate_params(self.num_maskable, derive_seed(seed, "gates"))

    # --- parameter plumbing -------------------------------------------------

    def param_names(self) -> list[str]:
        return list(self.params.keys())

    def trainable(self) -> list[torch.Tensor]:
        return list(self.params.values())

    def mask_slices(self, mask: torch.Tensor) -> dict[str, torch.Tensor]:
        return {s.name: mask[s.start : s.end].reshape(s.shape) for s in self.segments}

    def _as_mask_tensor(self, mask_values, requires_grad=False) -> torch.Tensor:
        if isinstance(mask_values, torch.Tensor) and mask_values.dtype == self.dtype:
            t = mask_values
        else:
            t = torch.as_tensor(np.asarray(mask_values), dtype=self.dtype)
        if t.shape != (self.num_maskable,):
            raise ValueError(
                f"mask has shape {tuple(t.shape)}, expected ({self.num_maskable},)"
            )
        if requires_grad and not t.requires_grad:
            t.requires_grad_(True)
        return t

    def snapshot_pretrained(self):
        """Freeze the current weights as theta0. Allowed exactly once."""
        if self.theta0 is not None:
            raise RuntimeError("pretrained snapshot already taken")
        self.theta0 = {k: v.detach().clone() for k, v in self.params.items()}

    def reset_to_pretrained(self):
        if self.theta0 is None:
            raise RuntimeError("no pretrained snapshot: run the pretrain stage first")
        with torch.no_grad():
            for k, v in self.params.items():
                v.copy_(self.theta0[k])

    # --- forward ------------------------------------------------------------

    def _encode(self, batch: Batch, mask_t, delta_t, dropout_p, gen):
        c = self.config
        ids = torch.as_tensor(batch.token_ids)
        if ids.ndim != 2 or ids.shape[1] > c.max_seq_len:
            raise ValueError("token_ids must be [batch, seq<=max_seq_len]")
        if int(ids.max()) >= c.vocab_size or int(ids.min()) < 0:
            raise ValueError("token id out of vocabulary range")
        bsz, seq = ids.shape
        self.forward_calls += 1

        cls_col = torch.full((bsz, 1), CLS, dtype=ids.dtype)
        ids_in = torch.cat([cls_col, ids], dim=1)
        valid = torch.cat(
            [torch.ones(bsz, 1, dtype=torch.bool), torch.as_tensor(batch.pad_mask)], dim=1
        )

        p = self.params
        seg = self.mask_slices(mask_t) if mask_t is not None else None

        def w(name):
            return p[name] * seg[name] if seg is not None else p[name]

        x = p["tok_emb"][ids_in] + p["pos_emb"][: seq + 1]
        if delta_t is not None:
            if tuple(delta_t.shape) != (bsz, seq + 1, c.embed_dim):
                raise ValueError(
                    f"perturbation has shape {tuple(delta_t.shape)}, expected "
                    f"{(bsz, seq + 1, c.embed_dim)} (includes the cls position)"
                )
            x = x + delta_t
        x = _dropout(x, dropout_p, gen)

        hd = c.embed_dim // c.num_heads
        neg = torch.finfo(x.dtype).min
        for i in range(c.num_layers):
            h = _layer_norm(x, p[f"layer{i}.ln1.g"], p[f"layer{i}.ln1.b"])
            q = (h @ w(f"layer{i}.attn.wq")).view(bsz, seq + 1, c.num_heads, hd).transpose(1, 2)
            k = (h @ w(f"layer{i}.attn.wk")).view(bsz, seq + 1, c.num_heads, hd).transpose(1, 2)
            v = (h @ w(f"layer{i}.attn.wv")).view(bsz, seq + 1, c.num_heads, hd).transpose(1, 2)
            scores = q @ k.transpose(-2, -1) / math.sqrt(hd)
            scores = scores.masked_fill(~valid[:, None, None, :], neg)
            ctx = torch.softmax(scores, dim=-1) @ v
            ctx = ctx.transpose(1, 2).reshape(bsz, seq + 1, c.embed_dim)
            x = x + _dropout(ctx @ w(f"layer{i}.attn.wo"), dropout_p, gen)

            h = _layer_norm(x, p[f"layer{i}.ln2.g"], p[f"layer{i}.ln2.b"])
            h = F.gelu(h @ w(f"layer{i}.mlp.w1")) @ w(f"layer{i}.mlp.w2")
            x = x + _dropout(h, dropout_p, gen)

        return _layer_norm(x, p["ln_f.g"], p["ln_f.b"])

    def forward(self, batch: Batch, mask_values=None, embed_perturbation=None,
                dropout_p: float = 0.0, gen=None) -> torch.Tensor:
        """Class logits [batch, num_classes]. Deterministic when dropout is off."""
        mask_t = self._as_mask_tensor(mask_values) if mask_values is not None else None
        delta_t = None
        if embed_perturbation is not None:
            delta_t = torch.as_tensor(np.asarray(embed_perturbation), dtype=self.dtype)
        h = self._encode(batch, mask_t, delta_t, dropout_p, gen)
        pooled = _dropout(h[:, 0, :], dropout_p, gen)
        return pooled @ self.params["cls_head.w"] + self.params["cls_head.b"]

    def mlm_logits(self, batch: Batch, dropout_p: float = 0.0, gen=None) -> torch.Tensor:
        """Vocabulary logits for the content positions, [batch, seq, vocab]."""
        h = self._encode(batch, None, None, dropout_p, gen)
        return h[:, 1:, :] @ self.params["mlm_head.w"] + self.params["mlm_head.b"]

    # --- loss / gradients ----------------------------------------------------

    def loss_and_grads(self, batch: Batch, mask_values=None, embed_perturbation=None,
                       wanted=("theta",), gate_sample: hc.GateSample | None = None,
                       dropout_p: float = 0.0, gen=None):
        """Cross-entropy loss and gradients for any subset of
        {theta, gates, perturbation}.

        Gate gradients require the GateSample that produced the mask (its m is
        used as the mask values); they are chained through
        hardconcrete.gate_gradients with u held fixed.
        """
        wanted = set(wanted)
        unknown = wanted - {"theta", "gates", "perturbation"}
        if unknown:
            raise ValueError(f"unknown gradient targets: {sorted(unknown)}")
        if "gates" in wanted:
            if gate_sample is None:
                raise ValueError("gate gradients need the GateSample that made the mask")
            if mask_values is None:
                mask_values = gate_sample.m
        if "perturbation" in wanted and embed_perturbation is None:
            raise ValueError("perturbation gradient requested without a perturbation")

        mask_t = None
        if mask_values is not None:
            mask_t = self._as_mask_tensor(mask_values, requires_grad="gates" in wanted)
        delta_t = None
        if embed_perturbation is not None:
            delta_t = torch.as_tensor(np.asarray(embed_perturbation), dtype=self.dtype)
            delta_t.requires_grad_("perturbation" in wanted)

        h = self._encode(batch, mask_t, delta_t, dropout_p, gen)
        pooled = _dropout(h[:, 0, :], dropout_p, gen)
        logits = pooled @ self.params["cls_head.w"] + self.params["cls_head.b"]
        loss = F.cross_entropy(logits, torch.as_tensor(batch.labels))

        inputs = []
        if "theta" in wanted:
            inputs.extend(self.params.values())
        if "gates" in wanted:
            inputs.append(mask_t)
        if "perturbation" in wanted:
            inputs.append(delta_t)
        grads_t = torch.autograd.grad(loss, inputs, allow_unused=True)

        grads: dict[str, object] = {}
        i = 0
        if "theta" in wanted:
            theta = {}
            for name in self.params:
                g = grads_t[i]
                theta[name] = (
                    np.zeros(self.params[name].shape, dtype=np.float64)
                    if g is None
                    else g.detach().numpy().astype(np.float64)
                )
                i += 1
            grads["theta"] = theta
        if "gates" in wanted:
            upstream = grads_t[i].detach().numpy().astype(np.float64)
            grads["gates"] = hc.gate_gradients(self.gates, gate_sample, upstream)
            i += 1
        if "perturbation" in wanted:
            grads["perturbation"] = grads_t[i].detach().numpy().astype(np.float64)
        return float(loss.detach()), grads

    # --- evaluation helpers ---------------------------------------------------

    @torch.no_grad()
    def predict_proba(self, batch: Batch, mask_values=None) -> np.ndarray:
        logits = self.forward(batch, mask_values=mask_values)
        return torch.softmax(logits, dim=-1).numpy()

    @torch.no_grad()
    def accuracy(self, corpus, mask_values=None, batch_size: int = 64) -> float:
        from .data import batches

        correct = total = 0
        for b in batches(corpus, batch_size):
            pred = self.forward(b, mask_values=mask_values).argmax(dim=-1).numpy()
            correct += int((pred == b.labels).sum())
            total += len(b.labels)
        return correct / max(total, 1)

    def checksum(self, which: str = "theta") -> str:
        import hashlib

        src = self.params if which == "theta" else self.theta0
        if src is None:
            raise RuntimeError("no pretrained snapshot")
        h = hashlib.sha256()
        for name in sorted(src):
            h.update(name.encode())
            h.update(src[name].detach().numpy().tobytes())
        return h.hexdigest()

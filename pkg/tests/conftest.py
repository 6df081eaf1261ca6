import numpy as np
import pytest
import torch

# tiny tensors: single-thread CPU avoids sync overhead and keeps runs stable
torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_task():
    from rtickets.data import SyntheticSpec, generate_synthetic

    spec = SyntheticSpec(
        seq_len=10, min_len=6, filler_tokens=10, signal_per_class=4,
        shortcut_per_class=2, shortcut_copies=2,
        pretrain_size=120, train_size=160, dev_size=48, test_size=64,
    )
    return generate_synthetic(spec, seed=11)


@pytest.fixture()
def tiny_model(tiny_task):
    from rtickets.model import MaskedTransformer, ModelConfig

    cfg = ModelConfig(
        vocab_size=tiny_task.spec.vocab_size, num_classes=2, embed_dim=16,
        num_layers=1, num_heads=2, mlp_dim=24, max_seq_len=10,
    )
    return MaskedTransformer(cfg, seed=5)


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return np.abs(a - b) / denom

"""Robust-subnetwork discovery on a toy transformer classifier.

Learnable stochastic weight gates trained under an adversarial loss with an
expected-L0 sparsity penalty, expectation-ranked one-shot pruning with
retraining from the pretrained snapshot, magnitude/random pruning baselines,
and a greedy word-substitution attack harness for robustness evaluation.
"""

from .advloss import AdvConfig, adversarial_loss, init_perturbation, pgd_step
from .attack import AttackReport, SubstitutionTable, bruteforce_attack, evaluate, greedy_attack
from .data import Batch, Corpus, SyntheticSpec, batches, generate_synthetic, load_tsv
from .hardconcrete import (GateParams, GateSample, expected_l0, gate_gradients,
                           inference_gate, init_gate_params, sample_gates)
from .model import MaskedTransformer, ModelConfig
from .pipeline import (MaskTrainConfig, Ticket, TrainSettings, ablation_variants,
                       draw_ticket, finetune, imp_baseline, learn_masks, pretrain_mlm,
                       random_ticket, retrain)

__version__ = "0.1.0"

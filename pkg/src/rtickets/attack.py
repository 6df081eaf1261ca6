"""Greedy word-substitution attack with exact query accounting, plus a
brute-force oracle for tiny instances and the aggregate robustness metrics.

The attack follows the classic recipe: rank positions by how much deleting
them (replacing with the padding token) drops the true-class probability,
then visit positions in that order and commit the substitution candidate
with the largest drop, stopping at a label flip.  Every probability request
counts as exactly one query.
"""

from __future__ import annotations

import itertools
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import PAD, Corpus, single_batch


class SubstitutionTable:
    """token id -> candidate replacement ids. No self-maps, bounded lists."""

    def __init__(self, mapping: dict[int, list[int]], max_candidates: int = 8):
        self.max_candidates = max_candidates
        self.mapping: dict[int, list[int]] = {}
        for tok, cands in mapping.items():
            if tok in cands:
                raise ValueError(f"token {tok} maps to itself")
            if len(cands) > max_candidates:
                raise ValueError(
                    f"token {tok} has {len(cands)} candidates (limit {max_candidates})"
                )
            self.mapping[int(tok)] = [int(c) for c in cands]

    def candidates(self, tok: int, limit: int | None = None) -> list[int]:
        cands = self.mapping.get(int(tok), [])
        return cands[:limit] if limit is not None else cands

    def __len__(self) -> int:
        return len(self.mapping)


class QueryCounter:
    """Wraps a model into a probability oracle with an exact call counter."""

    def __init__(self, model, seq_len: int, mask_values=None):
        self.model = model
        self.seq_len = seq_len
        self.mask_values = mask_values
        self.queries = 0

    def probs(self, ids: list[int], label: int) -> np.ndarray:
        self.queries += 1
        batch = single_batch(ids, label, self.seq_len)
        return self.model.predict_proba(batch, mask_values=self.mask_values)[0]


@dataclass
class ExampleOutcome:
    index: int
    label: int
    original: list[int]
    perturbed: list[int] | None
    queries: int
    outcome: str  # clean_error | success | failure

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "label": self.label,
            "original": list(map(int, self.original)),
            "perturbed": None if self.perturbed is None else list(map(int, self.perturbed)),
            "queries": self.queries,
            "outcome": self.outcome,
        }


@dataclass
class AttackReport:
    clean_acc: float
    aua: float
    suc: float
    avg_queries: float
    per_example: list[ExampleOutcome] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "clean_acc": self.clean_acc,
            "aua": self.aua,
            "suc": self.suc,
            "avg_queries": self.avg_queries,
            "per_example": [e.to_dict() for e in self.per_example],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def greedy_attack(oracle: QueryCounter, ids: list[int], label: int,
                  table: SubstitutionTable, max_candidates: int | None = None,
                  index: int = 0) -> ExampleOutcome:
    """Importance-ranked greedy substitution. Never edits padding, never edits
    a position twice."""
    if len(ids) == 0:
        raise ValueError("cannot attack an empty example")
    start = oracle.queries
    p0 = oracle.probs(ids, label)
    if int(np.argmax(p0)) != label:
        return ExampleOutcome(index, label, ids, None, oracle.queries - start, "clean_error")

    importance = np.empty(len(ids))
    for j in range(len(ids)):
        probe = list(ids)
        probe[j] = PAD
        importance[j] = p0[label] - oracle.probs(probe, label)[label]

    current = list(ids)
    current_p = p0[label]
    for j in np.argsort(-importance, kind="stable"):
        cands = table.candidates(ids[j], max_candidates)
        if not cands:
            continue
        best_tok, best_p, best_vec = None, None, None
        for cand in cands:
            probe = list(current)
            probe[j] = cand
            pv = oracle.probs(probe, label)
            if best_p is None or pv[label] < best_p:
                best_tok, best_p, best_vec = cand, pv[label], pv
        current[j] = best_tok
        current_p = best_p
        if int(np.argmax(best_vec)) != label:
            return ExampleOutcome(index, label, ids, current,
                                  oracle.queries - start, "success")
    return ExampleOutcome(index, label, ids, None, oracle.queries - start, "failure")


def bruteforce_attack(oracle: QueryCounter, ids: list[int], label: int,
                      table: SubstitutionTable, max_candidates: int | None = None,
                      limit: int = 100_000, index: int = 0) -> ExampleOutcome:
    """Exhaustive oracle over all substitution combinations (tiny instances only)."""
    if len(ids) == 0:
        raise ValueError("cannot attack an empty example")
    options = [[tok] + table.candidates(tok, max_candidates) for tok in ids]
    space = math.prod(len(o) for o in options)
    if space > limit:
        raise ValueError(f"search space {space} exceeds the brute-force limit {limit}")

    start = oracle.queries
    p0 = oracle.probs(ids, label)
    if int(np.argmax(p0)) != label:
        return ExampleOutcome(index, label, ids, None, oracle.queries - start, "clean_error")

    for combo in itertools.product(*options):
        combo = list(combo)
        if combo == list(ids):
            continue
        pv = oracle.probs(combo, label)
        if int(np.argmax(pv)) != label:
            return ExampleOutcome(index, label, ids, combo,
                                  oracle.queries - start, "success")
    return ExampleOutcome(index, label, ids, None, oracle.queries - start, "failure")


def evaluate(model, corpus: Corpus, table: SubstitutionTable,
             limit: int | None = None, max_candidates: int | None = None,
             mask_values=None, attack=greedy_attack) -> AttackReport:
    """Attack each example and aggregate Clean%, Aua%, Suc%, #Query."""
    if len(corpus) == 0:
        raise ValueError("cannot evaluate an empty corpus")
    n = len(corpus) if limit is None else min(limit, len(corpus))

    outcomes = []
    for i in range(n):
        if len(corpus.examples[i]) == 0:
            warnings.warn(f"example {i} is empty, skipped")
            continue
        oracle = QueryCounter(model, corpus.seq_len, mask_values=mask_values)
        out = attack(oracle, corpus.examples[i], corpus.labels[i], table,
                     max_candidates=max_candidates, index=i)
        if out.queries != oracle.queries:
            raise AssertionError(
                f"query accounting broken on example {i}: "
                f"reported {out.queries}, instrumented {oracle.queries}"
            )
        outcomes.append(out)

    n_eval = len(outcomes)
    if n_eval == 0:
        raise ValueError("no non-empty examples to evaluate")
    clean_correct = sum(1 for o in outcomes if o.outcome != "clean_error")
    successes = sum(1 for o in outcomes if o.outcome == "success")
    attempted = [o for o in outcomes if o.outcome != "clean_error"]
    return AttackReport(
        clean_acc=100.0 * clean_correct / n_eval,
        aua=100.0 * (clean_correct - successes) / n_eval,
        suc=100.0 * successes / len(attempted) if attempted else 0.0,
        avg_queries=float(np.mean([o.queries for o in attempted])) if attempted else 0.0,
        per_example=outcomes,
    )

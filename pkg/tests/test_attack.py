import numpy as np
import pytest

from rtickets.attack import (AttackReport, QueryCounter, SubstitutionTable,
                             bruteforce_attack, evaluate, greedy_attack)
from rtickets.data import PAD, Corpus


class BagModel:
    """Linear bag-of-tokens stub: class scores are sums of per-token weights."""

    def __init__(self, weights: dict[int, np.ndarray], num_classes: int = 2):
        self.weights = weights
        self.num_classes = num_classes

    def predict_proba(self, batch, mask_values=None):
        out = np.zeros((batch.token_ids.shape[0], self.num_classes))
        for r, row in enumerate(batch.token_ids):
            score = np.zeros(self.num_classes)
            for tok in row:
                if tok != PAD:
                    score += self.weights.get(int(tok), np.zeros(self.num_classes))
            e = np.exp(score - score.max())
            out[r] = e / e.sum()
        return out


def corpus_of(examples, labels, seq_len=6, vocab_size=40):
    vocab = {f"t{i}": i for i in range(vocab_size)}
    return Corpus([list(e) for e in examples], list(labels), vocab, "test", seq_len)


def counter(model, seq_len=6):
    return QueryCounter(model, seq_len)


class TestSubstitutionTable:
    def test_self_map_rejected(self):
        with pytest.raises(ValueError):
            SubstitutionTable({5: [5, 6]})

    def test_bound_enforced(self):
        with pytest.raises(ValueError):
            SubstitutionTable({5: list(range(6, 16))})
        SubstitutionTable({5: list(range(6, 14))})  # exactly 8 is fine

    def test_candidate_truncation(self):
        table = SubstitutionTable({5: [6, 7, 8]})
        assert table.candidates(5, 2) == [6, 7]
        assert table.candidates(99) == []


class TestGreedyAttack:
    def test_single_token_one_candidate_exactly_three_queries(self):
        # clean + one deletion probe + one candidate
        model = BagModel({10: np.array([2.0, 0.0]), 11: np.array([0.0, 2.0])})
        table = SubstitutionTable({10: [11]})
        out = greedy_attack(counter(model), [10], 0, table)
        assert out.queries == 3
        assert out.outcome == "success"
        assert out.perturbed == [11]

    def test_ignored_token_never_flips(self):
        # the model provably ignores token 20: substituting it cannot flip
        model = BagModel({10: np.array([2.0, 0.0])})
        table = SubstitutionTable({20: [21, 22]})
        out = greedy_attack(counter(model), [10, 20], 0, table)
        assert out.outcome == "failure"
        assert out.perturbed is None

    def test_clean_error_costs_one_query(self):
        model = BagModel({10: np.array([0.0, 3.0])})
        table = SubstitutionTable({10: [11]})
        out = greedy_attack(counter(model), [10], 0, table)
        assert out.outcome == "clean_error"
        assert out.queries == 1

    def test_empty_example_rejected(self):
        model = BagModel({})
        with pytest.raises(ValueError):
            greedy_attack(counter(model), [], 0, SubstitutionTable({}))

    def test_never_touches_padding_or_revisits(self):
        seen = []

        class SpyModel(BagModel):
            def predict_proba(self, batch, mask_values=None):
                seen.append([int(t) for t in batch.token_ids[0]])
                return super().predict_proba(batch, mask_values)

        model = SpyModel({10: np.array([1.0, 0.0]), 12: np.array([0.8, 0.0])})
        table = SubstitutionTable({10: [11], 12: [13]})
        greedy_attack(counter(model, seq_len=4), [10, 12], 0, table)
        for row in seen:
            assert row[2] == PAD and row[3] == PAD
        # each content position is edited at most once away from its original
        finals = seen[-1]
        assert finals[0] in (10, 11, PAD) and finals[1] in (12, 13, PAD)

    def test_importance_order_respected(self):
        # token 30 matters more; it must be substituted first
        model = BagModel({30: np.array([3.0, 0.0]), 31: np.array([0.5, 0.0]),
                          32: np.array([0.0, 3.0]), 33: np.array([0.0, 0.5])})
        table = SubstitutionTable({30: [32], 31: [33]})
        out = greedy_attack(counter(model), [31, 30], 0, table)
        assert out.outcome == "success"
        # one commit at the important position was enough
        assert out.perturbed == [31, 32]

    def test_max_candidates_cap(self):
        model = BagModel({10: np.array([1.0, 0.0])})
        table = SubstitutionTable({10: [11, 12, 13, 14]})
        out = greedy_attack(counter(model), [10], 0, table, max_candidates=2)
        # clean + 1 deletion + 2 candidates
        assert out.queries == 4


class TestBruteforce:
    def test_no_candidates_one_query(self):
        model = BagModel({10: np.array([1.0, 0.0])})
        out = bruteforce_attack(counter(model), [10], 0, SubstitutionTable({}))
        assert out.outcome == "failure"
        assert out.queries == 1

    def test_space_limit_refused(self):
        table = SubstitutionTable({i: [30 + j for j in range(8)] for i in range(10, 18)})
        model = BagModel({})
        with pytest.raises(ValueError):
            bruteforce_attack(counter(model, seq_len=8), list(range(10, 18)), 0, table,
                              limit=1000)

    def test_finds_combination_greedy_misses(self):
        # flipping needs BOTH positions changed; single-swap drops are zero for
        # one of them, but brute force enumerates pairs
        w = {10: np.array([1.0, 0.0]), 11: np.array([0.0, 1.0]),
             20: np.array([1.0, 0.0]), 21: np.array([0.0, 1.0])}
        model = BagModel(w)
        table = SubstitutionTable({10: [11], 20: [21]})
        out = bruteforce_attack(counter(model), [10, 20], 0, table)
        assert out.outcome == "success"


class TestGreedySoundness:
    def make_instance(self, rng):
        vocab = list(range(10, 22))
        weights = {t: rng.normal(0, 1.2, size=2) for t in vocab}
        model = BagModel(weights)
        n_pos = int(rng.integers(1, 5))
        ids = [int(rng.choice(vocab)) for _ in range(n_pos)]
        table_map = {}
        for t in set(vocab):
            cands = [c for c in vocab if c != t][: int(rng.integers(0, 4))]
            if cands:
                table_map[t] = cands
        return model, ids, SubstitutionTable(table_map)

    def test_greedy_success_subset_of_bruteforce_on_100_instances(self):
        rng = np.random.default_rng(123)
        greedy_wins = bf_wins = 0
        for _ in range(100):
            model, ids, table = self.make_instance(rng)
            label = int(np.argmax(model.predict_proba(
                __import__("rtickets.data", fromlist=["single_batch"]).single_batch(ids, 0, 6))[0]))
            g = greedy_attack(counter(model), ids, label, table)
            b = bruteforce_attack(counter(model), ids, label, table)
            assert g.outcome != "clean_error" and b.outcome != "clean_error"
            if g.outcome == "success":
                assert b.outcome == "success"  # greedy success implies brute-force success
                greedy_wins += 1
            bf_wins += b.outcome == "success"
        assert bf_wins >= greedy_wins
        assert greedy_wins > 5  # the instances are actually attackable

    def test_success_replays_as_misclassification(self):
        rng = np.random.default_rng(7)
        for _ in range(60):
            model, ids, table = self.make_instance(rng)
            from rtickets.data import single_batch

            label = int(np.argmax(model.predict_proba(single_batch(ids, 0, 6))[0]))
            out = greedy_attack(counter(model), ids, label, table)
            if out.outcome == "success":
                probs = model.predict_proba(single_batch(out.perturbed, label, 6))[0]
                assert int(np.argmax(probs)) != label


class TestEvaluate:
    def balanced_setup(self):
        # class-0 evidence token 10 (substitutable), class-1 evidence token 12
        model = BagModel({10: np.array([2.0, 0.0]), 11: np.array([0.0, 2.0]),
                          12: np.array([0.0, 2.0])})
        examples = [[10, 3], [12, 4], [10, 5], [12, 6]]
        labels = [0, 1, 0, 1]
        table = SubstitutionTable({10: [11]})
        return model, corpus_of(examples, labels), table

    def test_metric_identities(self):
        model, corpus, table = self.balanced_setup()
        rep = evaluate(model, corpus, table)
        assert rep.clean_acc == 100.0  # every example clean-correct => all attempted
        assert rep.suc == pytest.approx(100.0 * (rep.clean_acc - rep.aua) / rep.clean_acc)
        assert rep.aua == 50.0  # the two class-0 examples flip
        # per-example records recompute the aggregates
        n = len(rep.per_example)
        succ = sum(o.outcome == "success" for o in rep.per_example)
        attempted = [o for o in rep.per_example if o.outcome != "clean_error"]
        assert rep.aua == pytest.approx(100.0 * (len(attempted) - succ) / n)
        assert rep.avg_queries == pytest.approx(
            np.mean([o.queries for o in attempted]))

    def test_empty_table_means_no_attack_surface(self):
        model, corpus, _ = self.balanced_setup()
        rep = evaluate(model, corpus, SubstitutionTable({}))
        assert rep.suc == 0.0
        assert rep.aua == rep.clean_acc

    def test_uniform_model_scores_chance(self):
        model = BagModel({})
        corpus = corpus_of([[10], [11], [12], [13]], [0, 1, 0, 1])
        rep = evaluate(model, corpus, SubstitutionTable({}))
        assert rep.clean_acc == 50.0  # argmax ties resolve to class 0

    def test_deterministic(self):
        model, corpus, table = self.balanced_setup()
        a = evaluate(model, corpus, table).to_json()
        b = evaluate(model, corpus, table).to_json()
        assert a == b

    def test_limit_and_empty_skip(self):
        model, corpus, table = self.balanced_setup()
        rep = evaluate(model, corpus, table, limit=2)
        assert len(rep.per_example) == 2
        corpus.examples[1] = []
        with pytest.warns(UserWarning):
            rep = evaluate(model, corpus, table)
        assert len(rep.per_example) == 3

    def test_bruteforce_as_evaluator_not_weaker(self):
        model, corpus, table = self.balanced_setup()
        greedy_rep = evaluate(model, corpus, table)
        bf_rep = evaluate(model, corpus, table, attack=bruteforce_attack)
        assert bf_rep.suc >= greedy_rep.suc

    def test_real_model_evaluation(self, tiny_model, tiny_task):
        table = SubstitutionTable(tiny_task.substitutions)
        rep = evaluate(tiny_model, tiny_task.splits["test"], table, limit=12)
        again = evaluate(tiny_model, tiny_task.splits["test"], table, limit=12)
        assert rep.to_json() == again.to_json()
        assert 0.0 <= rep.aua <= rep.clean_acc <= 100.0
        for o in rep.per_example:
            assert o.queries >= 1

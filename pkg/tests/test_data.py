import numpy as np
import pytest

from rtickets import data as D


def small_spec(**kw):
    base = dict(
        seq_len=10, min_len=6, filler_tokens=8, signal_per_class=4,
        shortcut_per_class=2, shortcut_copies=2,
        pretrain_size=50, train_size=400, dev_size=60, test_size=400,
    )
    base.update(kw)
    return D.SyntheticSpec(**base)


class TestGenerateSynthetic:
    def test_deterministic(self):
        a = D.generate_synthetic(small_spec(), 7)
        b = D.generate_synthetic(small_spec(), 7)
        for name in a.splits:
            assert a.splits[name].examples == b.splits[name].examples
            assert a.splits[name].labels == b.splits[name].labels
        assert a.substitutions == b.substitutions
        c = D.generate_synthetic(small_spec(), 8)
        assert c.splits["train"].examples != a.splits["train"].examples

    def test_signal_only_classifier_is_perfect_without_noise(self):
        task = D.generate_synthetic(small_spec(noise_rate=0.0), 3)
        sig_of = {t: c for c, toks in enumerate(task.signal_ids) for t in toks}
        for name, split in task.splits.items():
            for ids, label in zip(split.examples, split.labels):
                found = [sig_of[t] for t in ids if t in sig_of]
                if name == "pretrain":  # repeated copies, all of the true class
                    assert set(found) == {label}
                else:
                    assert found == [label]

    def test_shortcut_only_classifier_matches_correlation(self):
        # derived expectation: a shortcut-reading classifier scores ~corr
        task = D.generate_synthetic(
            small_spec(train_correlation=0.95, test_correlation=0.5), 5
        )
        cue_of = {t: c for c, toks in enumerate(task.shortcut_ids) for t in toks}

        def cue_accuracy(split):
            hits = 0
            for ids, label in zip(split.examples, split.labels):
                cues = {cue_of[t] for t in ids if t in cue_of}
                assert len(cues) == 1  # one cue class per example
                hits += cues.pop() == label
            return hits / len(split)

        assert cue_accuracy(task.splits["train"]) == pytest.approx(0.95, abs=0.04)
        assert cue_accuracy(task.splits["test"]) == pytest.approx(0.50, abs=0.07)

    def test_substitutions_never_touch_signal_tokens(self):
        task = D.generate_synthetic(small_spec(), 3)
        cue_ids = {t for toks in task.shortcut_ids for t in toks}
        assert cue_ids <= set(task.substitutions)
        signal_ids = {t for toks in task.signal_ids for t in toks}
        assert not (signal_ids & set(task.substitutions))
        for tok, cands in task.substitutions.items():
            assert tok not in cands
            assert len(cands) <= 8
            assert all(c in cue_ids or c in task.filler_ids for c in cands)

    def test_substitutions_shortcuts_only_when_fillers_disabled(self):
        task = D.generate_synthetic(small_spec(substitute_fillers=False), 3)
        cue_ids = {t for toks in task.shortcut_ids for t in toks}
        assert set(task.substitutions) == cue_ids

    def test_splits_disjoint(self):
        task = D.generate_synthetic(small_spec(), 3)
        train = {tuple(e) for e in task.splits["train"].examples}
        test = {tuple(e) for e in task.splits["test"].examples}
        assert not (train & test)

    def test_bad_spec_rejected(self):
        with pytest.raises(ValueError):
            D.generate_synthetic(small_spec(min_len=2), 0)
        with pytest.raises(ValueError):
            D.generate_synthetic(small_spec(noise_rate=1.5), 0)


class TestBatches:
    def test_single_batch_covers_everything(self, tiny_task):
        corpus = tiny_task.splits["dev"]
        got = list(D.batches(corpus, len(corpus)))
        assert len(got) == 1
        assert got[0].token_ids.shape == (len(corpus), corpus.seq_len)

    def test_union_is_corpus_no_duplicates(self, tiny_task):
        corpus = tiny_task.splits["train"]
        seen = []
        for b in D.batches(corpus, 7, seed=3, shuffle=True):
            assert b.pad_mask.shape == b.token_ids.shape
            for row, label in zip(b.token_ids, b.labels):
                ids = [int(t) for t in row if t != D.PAD]
                seen.append((tuple(ids), int(label)))
        expected = [
            (tuple(e), int(l)) for e, l in zip(corpus.examples, corpus.labels)
        ]
        assert sorted(seen) == sorted(expected)

    def test_order_preserved_without_shuffle(self, tiny_task):
        corpus = tiny_task.splits["dev"]
        rows = [r for b in D.batches(corpus, 5) for r in b.token_ids]
        for row, ex in zip(rows, corpus.examples):
            assert [int(t) for t in row if t != D.PAD] == ex

    def test_shuffle_deterministic_per_seed(self, tiny_task):
        corpus = tiny_task.splits["dev"]
        a = [b.token_ids for b in D.batches(corpus, 8, seed=1, shuffle=True)]
        b_ = [b.token_ids for b in D.batches(corpus, 8, seed=1, shuffle=True)]
        c = [b.token_ids for b in D.batches(corpus, 8, seed=2, shuffle=True)]
        assert all(np.array_equal(x, y) for x, y in zip(a, b_))
        assert any(not np.array_equal(x, y) for x, y in zip(a, c))

    def test_bad_batch_size(self, tiny_task):
        with pytest.raises(ValueError):
            next(D.batches(tiny_task.splits["dev"], 0))


class TestTsvAndVocab:
    def test_simple_rows(self, tmp_path):
        path = tmp_path / "train.tsv"
        path.write_text("1\thello world\n0\tWORLD bye\n")
        corpus = D.load_tsv(path, max_seq_len=8)
        hello, world, bye = (corpus.vocab[t] for t in ("hello", "world", "bye"))
        assert corpus.examples == [[hello, world], [world, bye]]
        assert corpus.labels == [1, 0]

    def test_known_vocab_and_oov(self, tmp_path):
        path = tmp_path / "t.tsv"
        path.write_text("1\thello world zzz\n")
        vocab = {t: i for i, t in enumerate(D.SPECIALS)}
        vocab.update({"hello": 5, "world": 7})
        # non-contiguous custom vocab is fine for lookup
        corpus = D.load_tsv(path, max_seq_len=8, vocab=vocab)
        assert corpus.examples == [[5, 7, D.UNK]]

    def test_truncation(self, tmp_path):
        path = tmp_path / "t.tsv"
        path.write_text("0\t" + " ".join(f"w{i}" for i in range(30)) + "\n")
        corpus = D.load_tsv(path, max_seq_len=6)
        assert len(corpus.examples[0]) == 6

    def test_empty_file_warns(self, tmp_path):
        path = tmp_path / "empty.tsv"
        path.write_text("")
        with pytest.warns(UserWarning):
            corpus = D.load_tsv(path, max_seq_len=8)
        assert len(corpus) == 0

    def test_malformed_row_reports_line(self, tmp_path):
        path = tmp_path / "bad.tsv"
        path.write_text("1\tok line\nno tab here\n")
        with pytest.raises(ValueError, match=":2:"):
            D.load_tsv(path, max_seq_len=8)
        path.write_text("x\ttext\n")
        with pytest.raises(ValueError, match="label"):
            D.load_tsv(path, max_seq_len=8)

    def test_vocab_round_trip(self, tmp_path, tiny_task):
        path = tmp_path / "vocab.txt"
        D.save_vocab(tiny_task.vocab, path)
        assert D.load_vocab(path) == tiny_task.vocab

    def test_substitution_round_trip(self, tmp_path, tiny_task):
        path = tmp_path / "subs.tsv"
        D.save_substitutions(tiny_task.substitutions, tiny_task.vocab, path)
        loaded = D.load_substitutions(path, tiny_task.vocab)
        assert loaded == tiny_task.substitutions

    def test_substitution_unknown_tokens_skipped(self, tmp_path):
        vocab = {t: i for i, t in enumerate(D.SPECIALS + ["a", "b"])}
        path = tmp_path / "subs.tsv"
        path.write_text("a\tb,ghost\nghost\tb\n")
        with pytest.warns(UserWarning):
            table = D.load_substitutions(path, vocab)
        assert table == {vocab["a"]: [vocab["b"]]}

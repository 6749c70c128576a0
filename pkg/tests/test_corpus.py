"""Data model, manifest and recordings formats, splits, and statistics."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bpr.corpus import (
    Corpus,
    CorpusError,
    FormatError,
    Passage,
    SignalRecording,
    SplitPlan,
    corpus_stats,
    format_stats_table,
    lexical_overlap,
    make_loso_splits,
    make_splits,
    normalize_token,
    read_corpus_manifest,
    read_recordings,
    read_splits,
    write_corpus_manifest,
    write_recordings,
    write_splits,
)


def make_passage(pid: str, words) -> Passage:
    words = tuple(words)
    return Passage(passage_id=pid, tokens=words, text=" ".join(words))


def make_recording(pid: str, sid: str, n: int, dim: int = 4,
                   seed: int = 0) -> SignalRecording:
    rng = np.random.default_rng(seed)
    return SignalRecording(
        passage_id=pid, subject_id=sid,
        features=rng.normal(size=(n, dim)).astype(np.float32),
    )


class TestPassage:
    def test_tokens_reproduce_text(self):
        p = Passage(passage_id="p1", tokens=("a", "b"), text="a  b")
        assert len(p) == 2

    def test_mismatched_text_rejected(self):
        with pytest.raises(CorpusError):
            Passage(passage_id="p1", tokens=("a", "b"), text="a c")

    def test_empty_tokens_rejected(self):
        with pytest.raises(CorpusError):
            Passage(passage_id="p1", tokens=(), text="")

    def test_duplicate_ids_rejected(self):
        with pytest.raises(CorpusError, match="duplicate"):
            Corpus.from_passages(
                [make_passage("p1", ["a"]), make_passage("p1", ["b"])]
            )


class TestSignalRecording:
    def test_non_finite_rejected(self):
        feats = np.array([[1.0, np.nan]], dtype=np.float32)
        with pytest.raises(CorpusError, match="non-finite"):
            SignalRecording(passage_id="p", subject_id="s", features=feats)

    def test_wrong_rank_rejected(self):
        with pytest.raises(CorpusError):
            SignalRecording(passage_id="p", subject_id="s",
                            features=np.zeros(3, dtype=np.float32))

    def test_features_read_only(self):
        rec = make_recording("p", "s", 2)
        with pytest.raises(ValueError):
            rec.features[0, 0] = 1.0


class TestManifest:
    def test_three_valid_lines(self, tmp_path):
        path = tmp_path / "m.jsonl"
        corpus = Corpus.from_passages(
            [make_passage(f"p{i}", ["a", "b"]) for i in range(3)]
        )
        write_corpus_manifest(path, corpus)
        assert read_corpus_manifest(path).n == 3

    def test_duplicate_id_error(self, tmp_path):
        path = tmp_path / "m.jsonl"
        line = '{"passage_id": "p1", "text": "a", "tokens": ["a"]}\n'
        path.write_text(line + line)
        with pytest.raises(CorpusError, match="duplicate"):
            read_corpus_manifest(path)

    def test_malformed_line_reports_number(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text(
            '{"passage_id": "p1", "text": "a", "tokens": ["a"]}\n{broken\n'
        )
        with pytest.raises(FormatError, match=":2:"):
            read_corpus_manifest(path)

    def test_empty_file_error(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text("")
        with pytest.raises(FormatError, match="empty"):
            read_corpus_manifest(path)

    def test_generator_output_round_trips(self, tmp_path, small_dataset):
        corpus, _ = small_dataset
        path = tmp_path / "m.jsonl"
        write_corpus_manifest(path, corpus)
        loaded = read_corpus_manifest(path)
        assert loaded.n == corpus.n
        assert all(len(p.tokens) >= 1 for p in loaded)
        assert all(loaded[p.passage_id].tokens == p.tokens for p in corpus)


class TestRecordingsContainer:
    def test_round_trip_bit_exact(self, tmp_path):
        rec = make_recording("p1", "s1", 5, dim=840)
        path = tmp_path / "r.bprs"
        write_recordings(path, [rec])
        (loaded,) = read_recordings(path)
        assert loaded.key == ("p1", "s1")
        assert loaded.features.tobytes() == rec.features.tobytes()

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "r.bprs"
        path.write_bytes(b"XXXX" + bytes(16))
        with pytest.raises(FormatError, match="magic"):
            read_recordings(path)

    def test_truncated_entry(self, tmp_path):
        path = tmp_path / "r.bprs"
        write_recordings(path, [make_recording("p1", "s1", 3)])
        data = path.read_bytes()
        path.write_bytes(data[:-1])
        with pytest.raises(FormatError, match="truncated"):
            read_recordings(path)

    def test_trailing_bytes(self, tmp_path):
        path = tmp_path / "r.bprs"
        write_recordings(path, [make_recording("p1", "s1", 3)])
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(FormatError, match="trailing"):
            read_recordings(path)

    def test_300_entries_order_preserved(self, tmp_path):
        recs = [
            make_recording(f"p{i:03d}", f"s{s}", 4, seed=i * 3 + s)
            for i in range(100) for s in range(3)
        ]
        path = tmp_path / "r.bprs"
        write_recordings(path, recs)
        loaded = read_recordings(path)
        assert len(loaded) == 300
        assert [r.key for r in loaded] == [r.key for r in recs]

    def test_row_count_checked_against_corpus(self, tmp_path):
        corpus = Corpus.from_passages([make_passage("p1", ["a", "b", "c"])])
        path = tmp_path / "r.bprs"
        with pytest.raises(CorpusError, match="rows"):
            write_recordings(path, [make_recording("p1", "s1", 2)], corpus)
        write_recordings(path, [make_recording("p1", "s1", 2)])
        with pytest.raises(FormatError, match="row count"):
            read_recordings(path, corpus)

    def test_inconsistent_feature_dim_rejected(self, tmp_path):
        path = tmp_path / "r.bprs"
        with pytest.raises(CorpusError, match="feature_dim"):
            write_recordings(
                path,
                [make_recording("p1", "s1", 2, dim=4),
                 make_recording("p2", "s1", 2, dim=5)],
            )


class TestLexicalOverlap:
    def test_identical_sets(self):
        assert lexical_overlap(["a", "b", "c"], ["a", "b", "c"]) == 1.0

    def test_disjoint_sets(self):
        assert lexical_overlap(["a", "b"], ["c", "d"]) == 0.0

    def test_half_overlap(self):
        assert lexical_overlap(["a", "b", "c"], ["b", "c", "d"]) == 0.5

    def test_normalization(self):
        assert normalize_token("Word,") == "word"
        assert lexical_overlap(["Word,"], ["word"]) == 1.0

    def test_empty_after_normalization(self):
        with pytest.raises(CorpusError, match="empty"):
            lexical_overlap(["..."], ["a"])

    token_lists = st.lists(
        st.sampled_from(["alpha", "beta", "gamma", "delta", "Echo"]),
        min_size=1, max_size=8,
    )

    @given(a=token_lists, b=token_lists)
    def test_symmetric_and_one_iff_equal_sets(self, a, b):
        value = lexical_overlap(a, b)
        assert value == lexical_overlap(b, a)
        assert 0.0 <= value <= 1.0
        same = {t.lower() for t in a} == {t.lower() for t in b}
        assert (value == 1.0) == same


class TestSplits:
    def test_exact_ratio_case(self):
        keys = [(f"p{i}", "s0") for i in range(10)]
        plans = make_splits(keys, k=5)
        assert len(plans) == 5
        for plan in plans:
            assert (len(plan.train), len(plan.dev), len(plan.test)) == (8, 1, 1)

    def test_determinism(self):
        keys = [(f"p{i}", f"s{s}") for i in range(20) for s in range(2)]
        assert make_splits(keys, seed=3) == make_splits(keys, seed=3)
        assert make_splits(keys, seed=3) != make_splits(keys, seed=4)

    def test_partitions_passage_disjoint_and_cover(self):
        keys = [(f"p{i}", f"s{s}") for i in range(37) for s in range(3)]
        for plan in make_splits(keys, k=5):
            pids = {
                name: {pid for pid, _ in plan.partition(name)}
                for name in ("train", "dev", "test")
            }
            assert not pids["train"] & pids["dev"]
            assert not pids["train"] & pids["test"]
            assert not pids["dev"] & pids["test"]
            assert plan.train | plan.dev | plan.test == set(keys)

    def test_ratio_within_one_item(self):
        keys = [(f"p{i}", "s0") for i in range(37)]
        for plan in make_splits(keys, k=5):
            for name, ratio in (("train", 0.8), ("dev", 0.1), ("test", 0.1)):
                assert abs(len(plan.partition(name)) - 37 * ratio) <= 1

    def test_distinct_test_segments(self):
        keys = [(f"p{i}", "s0") for i in range(10)]
        tests = [plan.test for plan in make_splits(keys, k=5)]
        assert len(set(tests)) == 5

    def test_too_few_passages(self):
        with pytest.raises(CorpusError, match="fewer passages"):
            make_splits([("p1", "s0"), ("p2", "s0")], k=5)

    def test_bad_ratios(self):
        keys = [(f"p{i}", "s0") for i in range(10)]
        with pytest.raises(CorpusError, match="ratios"):
            make_splits(keys, ratios=(0.5, 0.2, 0.2))

    def test_overlapping_partitions_rejected(self):
        with pytest.raises(CorpusError, match="overlap"):
            SplitPlan(fold_id=0, train=frozenset({("p1", "s0")}),
                      dev=frozenset({("p1", "s0")}), test=frozenset())

    def test_loso_one_fold_per_subject(self):
        keys = [(f"p{i}", f"s{s}") for i in range(12) for s in range(3)]
        plans = make_loso_splits(keys)
        assert len(plans) == 3
        for plan, sid in zip(plans, ("s0", "s1", "s2")):
            assert {s for _, s in plan.test} == {sid}
            assert all(s != sid for _, s in plan.train | plan.dev)
            assert not {p for p, _ in plan.train} & {p for p, _ in plan.dev}

    def test_splits_file_round_trip(self, tmp_path):
        keys = [(f"p{i}", f"s{s}") for i in range(15) for s in range(2)]
        plans = make_splits(keys, k=3)
        path = tmp_path / "splits.json"
        write_splits(path, plans)
        assert read_splits(path) == plans


class TestCorpusStats:
    @pytest.fixture()
    def three_passage_setup(self):
        lengths = (10, 12, 14)
        passages = [
            make_passage(f"p{i}", [f"x{i}{j}" for j in range(n)])
            for i, n in enumerate(lengths)
        ]
        corpus = Corpus.from_passages(passages)
        plan = SplitPlan(
            fold_id=0,
            train=frozenset((p.passage_id, "s0") for p in passages),
            dev=frozenset(), test=frozenset(),
        )
        return corpus, plan

    def test_hand_arithmetic_oracle(self, three_passage_setup):
        corpus, plan = three_passage_setup
        stats = corpus_stats(corpus, plan)
        train = stats.per_split["train"]
        assert train.n_queries == 3
        assert train.n_passages == 3
        assert train.n_words == 36
        assert train.passage_len_mean == pytest.approx(12.0)
        assert train.passage_len_sd == pytest.approx(math.sqrt(8 / 3))
        # Query lengths max(1, floor(0.3*l)) for l in (10, 12, 14) are 3, 3, 4.
        assert train.query_len_mean == pytest.approx(10 / 3)

    def test_single_split_overlap_empty(self, three_passage_setup):
        corpus, plan = three_passage_setup
        assert corpus_stats(corpus, plan).overlap == {}

    def test_word_totals_equal_token_sums(self, small_dataset):
        corpus, recordings = small_dataset
        plans = make_splits([r.key for r in recordings], k=5)
        stats = corpus_stats(corpus, plans[0])
        total = sum(stats.per_split[n].n_words for n in ("train", "dev", "test"))
        assert total == sum(len(p) for p in corpus)

    def test_table_renders(self, small_dataset):
        corpus, recordings = small_dataset
        plans = make_splits([r.key for r in recordings], k=5)
        table = format_stats_table(corpus_stats(corpus, plans[0]))
        assert "Total queries" in table and "Lexical overlap" in table

"""Tests for corpus.py ingestion, tokenization, statistics and prompts."""
import json
import os
import re
from pathlib import Path

import numpy as np
import pytest

from common import InputError, SchemaError
from corpus import (
    BOS,
    EOS,
    RESERVED,
    UNK,
    Corpus,
    EssayRecord,
    Vocab,
    build_vocab,
    density_score,
    format_length_stats,
    format_rejects,
    ingest,
    keyword_density,
    length_stats,
    render_prompt,
    split_tokens,
    synthesize_corpus,
    tokenize,
    write_corpus,
)

FIXTURES = Path(__file__).parent / "fixtures"
HEADER = "essay_id,full_text,score,grade,split\n"


def _record(text, score=1, grade=8, split="train", essay_id="x"):
    return EssayRecord(essay_id, text, score, grade, split)


class TestIngest:
    def test_well_formed_fixture(self):
        """Test ingesting the fixture with a multi-line essay."""
        corpus = ingest(FIXTURES / "essays.csv")
        assert len(corpus.records) == 3
        assert corpus.rejects == []
        assert corpus.records[1].full_text == "Venus is hostile.\nYet explorers keep studying it!"
        assert (corpus.score_min, corpus.score_max) == (2, 4)

    def test_unparseable_score_rejected_with_line(self, tmp_path):
        """Test that a bad score becomes a reject with its file line."""
        path = tmp_path / "essays.csv"
        path.write_text(
            HEADER
            + 'a,"first line\nsecond line",3,8,train\n'
            + "b,Some essay text.,N/A,8,train\n"
            + "c,Another essay.,2,6,test\n",
            encoding="utf-8",
        )
        corpus = ingest(path)
        assert len(corpus.records) == 2
        assert len(corpus.rejects) == 1
        assert corpus.rejects[0].line == 4
        assert "N/A" in corpus.rejects[0].reason

    def test_missing_column(self, tmp_path):
        """Test that a missing column is a schema error."""
        path = tmp_path / "essays.csv"
        path.write_text("essay_id,full_text,score,split\na,text,1,train\n", encoding="utf-8")
        with pytest.raises(SchemaError, match="grade"):
            ingest(path)

    def test_column_map(self, tmp_path):
        """Test renaming source columns onto the canonical fields."""
        path = tmp_path / "asap.csv"
        path.write_text("id,text,holistic,grade,set\nq1,Plain words here.,5,9,train\n",
                        encoding="utf-8")
        corpus = ingest(path, column_map={"essay_id": "id", "full_text": "text",
                                          "score": "holistic", "split": "set"})
        assert corpus.records == [EssayRecord("q1", "Plain words here.", 5, 9, "train")]

    def test_declared_score_range(self, tmp_path):
        """Test that a declared range rejects scores outside it."""
        path = tmp_path / "essays.csv"
        path.write_text(HEADER + "a,Text one.,7,8,train\nb,Text two.,3,8,train\n",
                        encoding="utf-8")
        corpus = ingest(path, score_range=(1, 6))
        assert [r.essay_id for r in corpus.records] == ["b"]
        assert corpus.rejects[0].line == 2
        assert (corpus.score_min, corpus.score_max) == (1, 6)

    def test_bad_grade_and_split(self, tmp_path):
        """Test rejects for an unknown grade and split."""
        path = tmp_path / "essays.csv"
        path.write_text(HEADER + "a,Text.,3,7,train\nb,Text.,3,8,holdout\nc,Text.,3,8,test\n",
                        encoding="utf-8")
        corpus = ingest(path)
        assert [r.line for r in corpus.rejects] == [2, 3]

    def test_jsonl(self, tmp_path):
        """Test JSON-lines ingest with a bad score and a broken line."""
        path = tmp_path / "essays.jsonl"
        rows = [
            {"essay_id": "j1", "full_text": "One essay.", "score": 2, "grade": 6,
             "split": "train"},
            {"essay_id": "j2", "full_text": "Two essay.", "score": "x", "grade": 6,
             "split": "train"},
        ]
        path.write_text("\n".join(json.dumps(r) for r in rows) + "\n{broken\n",
                        encoding="utf-8")
        corpus = ingest(path, fmt="jsonl")
        assert [r.essay_id for r in corpus.records] == ["j1"]
        assert [r.line for r in corpus.rejects] == [2, 3]

    def test_missing_file(self, tmp_path):
        """Test that a missing corpus file is an input error."""
        with pytest.raises(InputError):
            ingest(tmp_path / "nope.csv")

    @pytest.mark.parametrize("fmt", ["csv", "jsonl"])
    def test_invalid_utf8(self, tmp_path, fmt):
        """Test that a non-UTF-8 byte fails the whole file as a schema error."""
        path = tmp_path / f"essays.{fmt}"
        if fmt == "csv":
            body = HEADER.encode() + b"a,caf\xe9 au lait,3,8,train\n"
        else:
            body = b'{"essay_id": "a", "full_text": "caf\xe9", "score": 3, "grade": 8}\n'
        path.write_bytes(body)
        with pytest.raises(SchemaError, match="not valid UTF-8"):
            ingest(path, fmt=fmt)

    @pytest.mark.parametrize("fmt", ["csv", "jsonl"])
    def test_round_trip(self, tmp_path, fmt):
        """Test writing records back and reading them again."""
        original = ingest(FIXTURES / "essays.csv")
        path = tmp_path / f"copy.{fmt}"
        write_corpus(original.records, path, fmt)
        assert ingest(path, fmt=fmt).records == original.records

    def test_rejects_report(self, tmp_path):
        """Test the text and csv rejects report."""
        path = tmp_path / "essays.csv"
        path.write_text(HEADER + "a,,3,8,train\nb,Fine.,3,8,train\n", encoding="utf-8")
        corpus = ingest(path)
        assert format_rejects(corpus.rejects) == "line 2: missing full_text\n"
        assert format_rejects(corpus.rejects, "csv") == "line,reason\n2,missing full_text\n"


def _scan_count(text: str) -> int:
    """Character-scan count: detached punctuation plus one token per non-empty core."""
    count = 0
    for word in text.split():
        lead, core, trail = re.fullmatch(r"(\W*)(.*?)(\W*)", word.lower(), re.DOTALL).groups()
        count += len(lead) + len(trail) + (1 if core else 0)
    return count


class TestTokenize:
    @pytest.fixture
    def vocab(self):
        return Vocab(RESERVED + ("the", "cat", "."))

    def test_empty_text(self, vocab):
        """Test that empty text gives only BOS and EOS."""
        assert tokenize("", vocab) == [BOS, EOS]

    def test_punctuation_detached(self, vocab):
        """Test that trailing punctuation becomes its own token."""
        assert tokenize("The cat.", vocab) == [BOS, 4, 5, 6, EOS]

    def test_unknown_maps_to_unk(self, vocab):
        """Test that an unseen word maps to UNK."""
        assert tokenize("The dog", vocab) == [BOS, 4, UNK, EOS]

    def test_inner_punctuation_kept(self):
        """Test that punctuation inside a word stays attached."""
        assert split_tokens('"Don\'t stop," she said...') == [
            '"', "don't", "stop", ",", '"', "she", "said", ".", ".", "."
        ]

    def test_count_matches_scanner(self, vocab):
        """Test token counts against a character scanner."""
        rng = np.random.default_rng(17)
        alphabet = list("abcXYZ019.,!?'\"()-") + [" ", " ", "\n"]
        for _ in range(200):
            text = "".join(rng.choice(alphabet, size=int(rng.integers(0, 40))))
            assert len(tokenize(text, vocab)) == _scan_count(text) + 2


class TestVocab:
    def test_frequency_then_alphabetical(self):
        """Test vocab order by frequency with alphabetical ties."""
        records = [
            _record("b a b c c a d"),
            _record("zz zz zz", split="test"),
        ]
        vocab = build_vocab(records, min_freq=2)
        assert vocab.tokens == RESERVED + ("a", "b", "c")
        assert vocab.id_of("zz") == UNK

    def test_deterministic(self):
        """Test that the same records give the same vocab."""
        records = [_record("one two two three three three")] * 2
        assert build_vocab(records) == build_vocab(list(reversed(records)))

    def test_save_load(self, tmp_path):
        """Test saving and loading a vocab."""
        vocab = build_vocab([_record("x y x y z")], min_freq=1)
        vocab.save(tmp_path / "vocab.txt")
        assert Vocab.load(tmp_path / "vocab.txt") == vocab

    def test_reserved_prefix_required(self):
        """Test that a vocab not starting with the reserved tokens is rejected."""
        with pytest.raises(SchemaError):
            Vocab(("a", "b"))


class TestLengthStats:
    def test_two_essays_same_grade(self):
        """Test the mean word count for two essays of one grade."""
        corpus = Corpus([_record("one two three"), _record("a b c d e")], 1, 1)
        rows = length_stats(corpus)
        grade_row = next(r for r in rows if r.grade == "8")
        assert (grade_row.count, grade_row.mean_words) == (2, 4.0)

    def test_totals_are_consistent(self):
        """Test that per-grade counts add up to the split totals."""
        corpus = synthesize_corpus(60, 20, seed=3)
        rows = length_stats(corpus)
        for split in ("train", "test"):
            grades = [r for r in rows if r.split == split and r.grade != "total"]
            total = next(r for r in rows if r.split == split and r.grade == "total")
            assert total.count == sum(r.count for r in grades)
            weighted = sum(r.count * r.mean_words for r in grades) / total.count
            assert weighted == pytest.approx(total.mean_words)

    def test_rendering(self):
        """Test the text and csv length tables."""
        corpus = Corpus([_record("one two three"), _record("a b c d e")], 1, 1)
        assert format_length_stats(length_stats(corpus), "csv") == (
            "split,grade,count,avg_words\ntrain,8,2,4.0\ntrain,total,2,4.0\n"
        )
        assert format_length_stats(length_stats(corpus)).splitlines()[1].split() == [
            "train", "8", "2", "4.0"
        ]

    def test_empty(self):
        """Test that stats over no records are an input error."""
        with pytest.raises(InputError):
            length_stats(Corpus([], 1, 2))

    @pytest.mark.skipif("LONGSCORE_ASAP_TRAIN" not in os.environ,
                        reason="public ASAP 2.0 training file not available")
    def test_public_dataset_parity(self):
        """Test record counts and mean lengths on the public training file."""
        corpus = ingest(Path(os.environ["LONGSCORE_ASAP_TRAIN"]))
        rows = {r.grade: r for r in length_stats(corpus) if r.split == "train"}
        assert rows["total"].count == 17307
        assert {g: rows[g].count for g in ("6", "8", "9", "10")} == {
            "6": 2094, "8": 1648, "9": 4002, "10": 9563
        }
        assert rows["6"].mean_words == pytest.approx(292.2, abs=0.5)


class TestPrompt:
    RUBRIC = "Score 1-6 for claim, evidence and organization."
    ESSAY = "Cars should not be allowed downtown. They pollute."

    def test_golden(self):
        """Test the rendered prompt against the golden file."""
        user, assistant = render_prompt(self.RUBRIC, self.ESSAY, 4)
        assert user.encode("utf-8") == (FIXTURES / "prompt_user.golden").read_bytes()
        assert assistant.encode("utf-8") == (FIXTURES / "prompt_assistant.golden").read_bytes()

    def test_minimal(self):
        """Test the assistant turn for a known score."""
        assert render_prompt("R", "E", 4)[1] == "**Score**: 4"

    def test_inference_rendering(self):
        """Test that no score leaves the assistant turn empty."""
        assert render_prompt("R", "E")[1] == ""

    def test_empty_inputs(self):
        """Test that an empty rubric or essay is rejected."""
        with pytest.raises(InputError):
            render_prompt("", "E")
        with pytest.raises(InputError):
            render_prompt("R", "")


class TestSynthetic:
    def test_shape_and_labels(self):
        """Test split sizes, score labels and essay lengths of a synthetic corpus."""
        corpus = synthesize_corpus(30, 10, seed=1, n_scores=4, min_words=50, max_words=400)
        assert len(corpus.split("train")) == 30 and len(corpus.split("test")) == 10
        assert (corpus.score_min, corpus.score_max) == (1, 4)
        for record in corpus.records:
            assert 50 <= record.word_count <= 400
            assert record.score == density_score(keyword_density(record.full_text), 1, 4)
        assert {r.grade for r in corpus.split("test")} <= {6, 8, 10}

    def test_deterministic(self):
        """Test that a seed fixes the synthetic corpus."""
        assert synthesize_corpus(10, 5, seed=9).records == synthesize_corpus(10, 5, seed=9).records

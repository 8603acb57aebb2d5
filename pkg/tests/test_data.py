import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grutv import data
from grutv.data import Corpus, Sequence
from grutv.errors import OrderingError, ParseError, UsageError
from grutv.synth import SynthConfig, gen_synth


def write_lines(path, objs):
    path.write_text("".join(json.dumps(o) + "\n" for o in objs))
    return path


class TestLoad:
    def test_one_null_gives_one_zero(self, tmp_path):
        p = write_lines(tmp_path / "c.jsonl", [{"id": "a", "t": [0, 1, 2], "x": [[1, 2], [None, 3], [4, 5]], "y": [1]}])
        corpus = data.load_corpus(p)
        assert len(corpus) == 1
        assert int((corpus[0].mask == 0).sum()) == 1
        assert corpus[0].mask[1, 0] == 0

    def test_empty_file(self, tmp_path):
        p = tmp_path / "empty.jsonl"
        p.write_text("")
        assert len(data.load_corpus(p)) == 0

    def test_close_records_merged(self, tmp_path):
        p = write_lines(tmp_path / "c.jsonl", [{"id": "a", "t": [0.0, 0.05, 1.0], "x": [[1, None], [None, 2], [3, 4]]}])
        seq = data.load_corpus(p)[0]
        assert seq.t.tolist() == [0.0, 1.0]
        assert seq.values[0].tolist() == [1.0, 2.0]
        assert seq.mask.tolist() == [[1, 1], [1, 1]]

    def test_merge_conflict_keeps_later(self, tmp_path):
        p = write_lines(tmp_path / "c.jsonl", [{"id": "a", "t": [0.0, 0.05], "x": [[1], [7]]}])
        corpus = data.load_corpus(p)
        assert corpus[0].values.tolist() == [[7.0]]
        assert corpus.merge_conflicts == 1

    def test_header_names(self, tmp_path):
        p = write_lines(tmp_path / "c.jsonl", [{"vars": ["hr", "sbp"], "tasks": ["mort"]},
                                               {"id": "a", "t": [0], "x": [[1, 2]], "y": [0]}])
        corpus = data.load_corpus(p)
        assert corpus.variables == ["hr", "sbp"] and corpus.tasks == ["mort"]

    def test_malformed_line_number(self, tmp_path):
        p = tmp_path / "bad.jsonl"
        p.write_text(json.dumps({"id": "a", "t": [0], "x": [[1]]}) + "\n{not json\n")
        with pytest.raises(ParseError) as exc:
            data.load_corpus(p)
        assert exc.value.line == 2

    def test_row_count_mismatch(self, tmp_path):
        p = write_lines(tmp_path / "c.jsonl", [{"id": "a", "t": [0, 1], "x": [[1]]}])
        with pytest.raises(ParseError):
            data.load_corpus(p)

    def test_non_monotone(self, tmp_path):
        p = write_lines(tmp_path / "c.jsonl", [{"id": "a", "t": [0, 2, 1], "x": [[1], [2], [3]]}])
        with pytest.raises(OrderingError):
            data.load_corpus(p)

    def test_missing_path(self, tmp_path):
        with pytest.raises(UsageError):
            data.load_corpus(tmp_path / "nope.jsonl")

    def test_jsonl_round_trip(self, tmp_path):
        corpus = gen_synth(SynthConfig(n_sequences=20, seed=3))
        data.save_jsonl(corpus, tmp_path / "c.jsonl")
        back = data.load_corpus(tmp_path / "c.jsonl")
        assert back.variables == corpus.variables and back.tasks == corpus.tasks
        for a, b in zip(corpus, back):
            assert np.array_equal(a.t, b.t)
            assert np.array_equal(a.mask, b.mask)
            assert np.array_equal(np.nan_to_num(a.values), np.nan_to_num(b.values))
            assert np.array_equal(a.labels, b.labels)

    def test_csv_round_trip(self, tmp_path):
        corpus = gen_synth(SynthConfig(n_sequences=8, seed=4))
        data.save_csv_dir(corpus, tmp_path / "csv")
        back = data.load_corpus(tmp_path / "csv")
        by_id = {s.id: s for s in back}
        for a in corpus:
            b = by_id[a.id]
            assert np.array_equal(a.t, b.t)
            assert np.array_equal(a.mask, b.mask)
            assert np.array_equal(np.nan_to_num(a.values), np.nan_to_num(b.values))
            assert np.array_equal(a.labels, b.labels)

    def test_csv_bad_cell(self, tmp_path):
        d = tmp_path / "csv"
        d.mkdir()
        (d / "s1.csv").write_text("t,a\n0,1\n1,abc\n")
        with pytest.raises(ParseError) as exc:
            data.load_corpus(d)
        assert "line 3" in str(exc.value)


class TestCanonicalize:
    def test_fill_with_default_then_last(self):
        seq = Sequence.from_values("s", [0, 1, 2], [[np.nan], [5.0], [np.nan]])
        prep = data.canonicalize(seq, [2.0])
        assert prep.values[:, 0].tolist() == [2.0, 5.0, 5.0]

    def test_elapsed_times(self):
        seq = Sequence.from_values("s", [0, 1.5, 4.0], np.ones((3, 1)))
        assert data.canonicalize(seq, [0.0]).dt.tolist() == [1.0, 1.5, 2.5]

    def test_staleness_example(self):
        seq = Sequence.from_values("s", [0, 2, 5], [[1.0], [np.nan], [np.nan]])
        assert data.canonicalize(seq, [0.0]).delta[:, 0].tolist() == [0.0, 2.0, 5.0]

    def test_staleness_resets_after_observation(self):
        seq = Sequence.from_values("s", [0, 1, 3, 4], [[np.nan], [1.0], [np.nan], [np.nan]])
        assert data.canonicalize(seq, [0.0]).delta[:, 0].tolist() == [0.0, 1.0, 2.0, 3.0]

    def test_defaults_length_checked(self):
        seq = Sequence.from_values("s", [0], [[1.0, 2.0]])
        with pytest.raises(UsageError):
            data.canonicalize(seq, [0.0])

    def test_compute_defaults(self):
        seqs = [Sequence.from_values("a", [0, 1], [[1.0, np.nan], [3.0, np.nan]])]
        assert data.compute_defaults(seqs).tolist() == [2.0, 0.0]

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10_000))
    def test_idempotent_and_recurrence(self, seed):
        rng = np.random.default_rng(seed)
        n, d = int(rng.integers(1, 12)), int(rng.integers(1, 4))
        t = np.cumsum(np.concatenate([[rng.uniform(0, 2)], rng.exponential(1.0, n - 1)]))
        values = rng.normal(size=(n, d))
        values[rng.random((n, d)) < 0.5] = np.nan
        seq = Sequence.from_values("s", t, values)
        defaults = rng.normal(size=d)
        prep = data.canonicalize(seq, defaults)
        again = data.canonicalize(prep, defaults)
        assert prep.equals(again)
        assert np.all(np.isfinite(prep.values))
        # staleness recurrence, written out element by element
        for j in range(d):
            assert prep.delta[0, j] == 0.0
            for i in range(1, n):
                expect = t[i] - t[i - 1] + (prep.delta[i - 1, j] if seq.mask[i - 1, j] == 0 else 0.0)
                assert prep.delta[i, j] == expect
        assert prep.dt[0] == 1.0
        assert np.array_equal(prep.dt[1:], np.diff(t))
        # observed entries pass through unchanged
        obs = seq.mask > 0
        assert np.array_equal(prep.values[obs], values[obs])


class TestStats:
    def test_half_missing(self):
        seq = Sequence.from_values("s", [0, 1, 2, 3], [[1.0], [np.nan], [2.0], [np.nan]])
        s = data.corpus_stats(Corpus([seq]))
        assert s.missing_mean.tolist() == [0.5] and s.missing_std.tolist() == [0.0]

    def test_interval_hist(self):
        seq = Sequence.from_values("s", [0, 1, 2, 4], np.ones((4, 1)))
        s = data.corpus_stats(Corpus([seq]))
        assert s.interval_hist == {1.0: 2, 2.0: 1}
        assert s.interval_mean == pytest.approx(4 / 3, abs=1e-15)

    def test_empty_corpus(self):
        with pytest.raises(UsageError):
            data.corpus_stats(Corpus([]))

    def test_matches_tally_oracle(self):
        corpus = gen_synth(SynthConfig(n_sequences=100, seed=11))
        stats = data.corpus_stats(corpus)
        # single pass over every record
        d = corpus.n_vars
        per_seq = []
        hist = {}
        pairs = 0
        gaps = []
        for seq in corpus:
            missing = [0] * d
            for i in range(len(seq)):
                for j in range(d):
                    missing[j] += seq.mask[i, j] == 0
                if i:
                    g = seq.t[i] - seq.t[i - 1]
                    key = float(np.round(g))
                    hist[key] = hist.get(key, 0) + 1
                    pairs += 1
                    gaps.append(g)
            per_seq.append([m / len(seq) for m in missing])
        per_seq = np.array(per_seq)
        assert np.array_equal(stats.missing_mean, per_seq.mean(axis=0))
        assert np.array_equal(stats.missing_std, per_seq.std(axis=0))
        assert stats.interval_hist == dict(sorted(hist.items()))
        assert stats.n_pairs == pairs == sum(stats.interval_hist.values())
        assert stats.interval_mean == float(np.mean(gaps))
        assert np.all((stats.missing_mean >= 0) & (stats.missing_mean <= 1))

    def test_stats_csv(self):
        import io

        seq = Sequence.from_values("s", [0, 1, 3], [[1.0, np.nan], [2.0, 1.0], [np.nan, 1.0]])
        buf = io.StringIO()
        data.write_stats_csv(data.corpus_stats(Corpus([seq], ["a", "b"])), buf)
        lines = buf.getvalue().splitlines()
        assert lines[0] == "kind,name,mean,std,count"
        assert any(line.startswith("missing_rate,a,") for line in lines)
        assert any(line.startswith("interval_bucket,2.0,") for line in lines)

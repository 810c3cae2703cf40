import numpy as np
import pytest

from speechsmith.score import align, cer, corpus_wer

from helpers import edit_distance_oracle


def _random_seq(rng, max_len=8, alphabet=("a", "b", "c", "d")):
    n = int(rng.integers(0, max_len + 1))
    return tuple(alphabet[int(i)] for i in rng.integers(0, len(alphabet), size=n))


class TestAlign:
    def test_identical(self):
        rep = align(["a", "b", "c"], ["a", "b", "c"])
        assert (rep.substitutions, rep.deletions, rep.insertions) == (0, 0, 0)
        assert rep.wer == 0.0

    def test_single_substitution(self):
        rep = align(["a", "b", "c"], ["a", "x", "c"])
        assert rep.substitutions == 1
        assert rep.wer == pytest.approx(1 / 3)

    def test_all_deleted(self):
        rep = align(["a", "b"], [])
        assert rep.deletions == 2
        assert rep.wer == 1.0

    def test_empty_ref_insertions(self):
        rep = align([], ["a", "b"])
        assert rep.insertions == 2
        assert rep.wer == 2.0  # normalized by max(1, |ref|)

    def test_count_identities(self):
        rng = np.random.default_rng(5)
        for _ in range(300):
            ref, hyp = _random_seq(rng), _random_seq(rng)
            rep = align(ref, hyp)
            assert rep.substitutions + rep.deletions + rep.hits == len(ref)
            assert rep.substitutions + rep.insertions + rep.hits == len(hyp)

    def test_matches_distance_oracle(self):
        rng = np.random.default_rng(6)
        for _ in range(300):
            ref, hyp = _random_seq(rng), _random_seq(rng)
            assert align(ref, hyp).errors == edit_distance_oracle(ref, hyp)

    def test_backtrace_prefers_substitution(self):
        rep = align(["a"], ["b"])
        assert rep.pairs == (("a", "b"),)

    def test_metric_properties(self):
        rng = np.random.default_rng(7)
        seqs = [_random_seq(rng) for _ in range(60)]
        for s in seqs[:30]:
            assert align(s, s).errors == 0
        for _ in range(1000):
            i, j, k = rng.integers(0, len(seqs), size=3)
            x, y, z = seqs[i], seqs[j], seqs[k]
            assert align(x, y).errors == align(y, x).errors
            assert align(x, z).errors <= align(x, y).errors + align(y, z).errors


class TestCorpusWer:
    def test_single_pair_equals_align(self):
        pairs = [(("a", "b"), ("a", "c"))]
        assert corpus_wer(pairs).pooled == align(*pairs[0]).wer

    def test_unweighted_average(self):
        pairs = [
            (tuple("abcde"), tuple("abcdx")),  # 1/5
            (tuple("abcde"), tuple("abxxx")),  # 3/5 -> pooled domain "d2"
        ]
        result = corpus_wer(pairs, ["d1", "d2"])
        assert result.per_domain["d1"] == pytest.approx(0.2)
        assert result.per_domain["d2"] == pytest.approx(0.6)
        assert result.average == pytest.approx(0.4)

    def test_pooled_vs_recomputation(self):
        rng = np.random.default_rng(8)
        pairs = [(_random_seq(rng), _random_seq(rng)) for _ in range(100)]
        result = corpus_wer(pairs)
        total_err = sum(edit_distance_oracle(r, h) for r, h in pairs)
        total_ref = sum(len(r) for r, _ in pairs)
        assert result.pooled == pytest.approx(total_err / total_ref)

    def test_mismatched_domains(self):
        with pytest.raises(ValueError):
            corpus_wer([(("a",), ("a",))], ["d1", "d2"])


class TestCer:
    def test_identical(self):
        assert cer("abcd", "abcd") == 0.0

    def test_one_sub(self):
        assert cer("abcd", "abxd") == pytest.approx(0.25)

    def test_oracle(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            a = "".join(rng.choice(list("abc"), size=int(rng.integers(0, 9))))
            b = "".join(rng.choice(list("abc"), size=int(rng.integers(0, 9))))
            assert cer(a, b) == pytest.approx(
                edit_distance_oracle(a, b) / max(1, len(a))
            )

import itertools

import numpy as np
import pytest

from dysadapt.corpus import (
    SEVERITIES,
    Vocabulary,
    edit_distance,
    generate_corpus,
    load_corpus,
    load_manifest,
    load_profiles,
    merge_vocabularies,
    phone_names,
    word_error_rate,
    write_corpus,
)
from dysadapt.corpus.synth import SynthConfig, split
from dysadapt.errors import ConfigurationError, DataError, UndefinedRateError


@pytest.fixture(scope="module")
def vocab():
    return Vocabulary.from_names(phone_names(10))


@pytest.fixture(scope="module")
def corpus(vocab):
    return generate_corpus({"VL": 1, "L": 1, "M": 1, "H": 1}, vocab, utts_per_speaker=20, seed=5)


# -- vocabulary ----------------------------------------------------------------


def test_merge_forty_and_thirty_five():
    en = Vocabulary.from_names(phone_names(40), "EN")
    es = Vocabulary.from_names(phone_names(35), "ES")
    merged = merge_vocabularies(en, es)
    assert len(merged) == 75
    assert merged.output_size == 76
    assert merged.blank == 75
    assert merged.index("p00", "EN") != merged.index("p00", "ES")


def test_vocabulary_rejects_duplicates_and_reserved():
    with pytest.raises(ConfigurationError):
        Vocabulary((("a", "EN"), ("a", "EN")))
    with pytest.raises(ConfigurationError):
        Vocabulary.from_names(["<blank>"])


def test_vocabulary_round_trip(tmp_path, vocab):
    vocab.save(tmp_path / "v.txt")
    assert Vocabulary.load(tmp_path / "v.txt") == vocab
    assert vocab.decode(vocab.encode(["p03", "p07"], "EN")) == ["p03", "p07"]


# -- generator -----------------------------------------------------------------


def test_generator_is_deterministic(vocab):
    a, _ = generate_corpus({"M": 1}, vocab, 5, seed=9)
    b, _ = generate_corpus({"M": 1}, vocab, 5, seed=9)
    for x, y in zip(a, b):
        assert x.utt_id == y.utt_id and x.transcript == y.transcript
        assert x.features.tobytes() == y.features.tobytes()


def test_generator_invariants(corpus, vocab):
    records, profiles = corpus
    assert len(records) == 80
    assert sorted({r.severity for r in records}) == sorted(SEVERITIES)
    lo, hi = SynthConfig().tokens_per_utt
    for r in records:
        assert lo <= len(r.transcript) <= hi
        assert all(a != b for a, b in zip(r.transcript, r.transcript[1:]))
        assert len(r.phone_labels) == r.n_frames
        assert r.features.shape[1] == 8
        assert max(r.transcript) < vocab.blank
    assert len(split(records, "test")) == 16
    assert len(profiles) == 4


def test_distortion_grows_with_severity(corpus):
    _, profiles = corpus
    mags = {p.severity: p.magnitude for p in profiles.values()}
    assert mags["VL"] < mags["L"] < mags["M"] < mags["H"]


def test_undistort_recovers_clean_up_to_noise(corpus):
    records, profiles = corpus
    rec = next(r for r in records if r.severity == "VL")
    recovered = profiles[rec.speaker].undistort(rec.features)
    assert np.abs(recovered - rec.clean).max() < 0.5


def test_generator_rejects_bad_tiers(vocab):
    with pytest.raises(ConfigurationError):
        generate_corpus({"XX": 1}, vocab, 5)
    with pytest.raises(ConfigurationError):
        generate_corpus({"VL": 0}, vocab, 5)


# -- manifests -----------------------------------------------------------------


def test_corpus_round_trip(tmp_path, corpus, vocab):
    records, profiles = corpus
    write_corpus(tmp_path, records, vocab, profiles)
    loaded, vocab2 = load_corpus(tmp_path)
    assert vocab2 == vocab
    assert [r.utt_id for r in loaded] == [r.utt_id for r in split(records, "train") + split(records, "test")]
    by_id = {r.utt_id: r for r in records}
    for r in loaded:
        np.testing.assert_array_equal(r.features, by_id[r.utt_id].features)
        assert r.transcript == by_id[r.utt_id].transcript
        assert r.phone_labels == by_id[r.utt_id].phone_labels
    assert set(load_profiles(tmp_path)) == set(profiles)


def _corrupt(tmp_path, corpus, vocab, edit):
    records, _ = corpus
    write_corpus(tmp_path, records, vocab)
    path = tmp_path / "train.tsv"
    lines = path.read_text().splitlines()
    path.write_text("\n".join(edit(lines)) + "\n")
    return path


def test_duplicate_id_reports_both_lines(tmp_path, corpus, vocab):
    path = _corrupt(tmp_path, corpus, vocab, lambda lines: lines[:3] + [lines[0]])
    with pytest.raises(DataError, match="lines 1 and 4"):
        load_manifest(path)


def test_unknown_severity(tmp_path, corpus, vocab):
    def edit(lines):
        cells = lines[0].split("\t")
        cells[2] = "XL"
        return ["\t".join(cells)] + lines[1:]

    with pytest.raises(DataError, match="XL"):
        load_manifest(_corrupt(tmp_path, corpus, vocab, edit))


def test_missing_feature_file(tmp_path, corpus, vocab):
    def edit(lines):
        cells = lines[0].split("\t")
        cells[4] = "feats/nobody.ark"
        return ["\t".join(cells)] + lines[1:]

    with pytest.raises(DataError, match="nobody.ark"):
        load_manifest(_corrupt(tmp_path, corpus, vocab, edit))


def test_missing_manifest(tmp_path):
    with pytest.raises(DataError):
        load_manifest(tmp_path / "absent.tsv")


# -- WER -----------------------------------------------------------------------


@pytest.mark.parametrize(
    "ref,hyp,dist",
    [("abc", "abc", 0), ("abc", "", 3), ("", "ab", 2), ("abc", "axc", 1), ("kitten", "sitting", 3)],
)
def test_edit_distance_examples(ref, hyp, dist):
    assert edit_distance(list(ref), list(hyp)) == dist


def _brute_distance(ref, hyp):
    """Exhaustive search over alignments by recursion on the first symbols."""
    if not ref:
        return len(hyp)
    if not hyp:
        return len(ref)
    return min(
        _brute_distance(ref[1:], hyp) + 1,
        _brute_distance(ref, hyp[1:]) + 1,
        _brute_distance(ref[1:], hyp[1:]) + (ref[0] != hyp[0]),
    )


def test_edit_distance_matches_exhaustive_search():
    for n, m in itertools.product(range(4), repeat=2):
        for ref in itertools.product("ab", repeat=n):
            for hyp in itertools.product("abc", repeat=m):
                assert edit_distance(ref, hyp) == _brute_distance(ref, hyp)


def test_wer_per_severity():
    res = word_error_rate([[1, 2], [3, 4, 5, 6]], [[1, 2], [3, 9]], ["VL", "H"])
    assert res.wer == pytest.approx(3 / 6)
    assert res.severity_wer("VL") == 0.0
    assert res.severity_wer("H") == pytest.approx(0.75)
    assert res.severity_wer("M") is None


def test_wer_undefined_for_empty_reference():
    with pytest.raises(UndefinedRateError):
        word_error_rate([[]], [[1]])

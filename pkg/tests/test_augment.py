import logging
import random

import pytest

from mrco.config import Config, ExperimentConfig
from mrco.exceptions import DataFormatError, ValidationError
from mrco.services.augment import (
    augment_charswap, augment_easydata, augment_synonym, AugmentationError, AugmentedExample, Augmenter,
    build_augmented_dataset, build_augmenters, corrupt_labels, count_syllables, filter_augmented,
    flesch_score, load_augmented, register_augmenter, registered_augmenters, save_augmented, SynonymLexicon
)
from mrco.services.dataset import Dataset, Example

PARAGRAPH = ("The quick brown fox jumps over the lazy dog. "
             "A happy child plays with a red ball in the garden.")
LONG_WORDS = "extraordinary international communication"


def _texts(rng, n):
    words = ['good', 'movie', 'bad', 'plot', 'acting', 'was', 'the', 'a', 'really']
    return [' '.join(rng.choice(words) for _ in range(rng.randint(1, 15))) for _ in range(n)]


def _aug(i, text, label=0):
    return AugmentedExample(f"x{i}-a0", f"x{i}", text, label, 'easydata')


def test_synonym_identity_and_forced_replacement(lexicon):
    """Test probability 0 is the identity and probability 1 replaces every lexicon word"""
    rng = random.Random(0)
    assert augment_synonym('good movie tonight', lexicon, 0.0, rng) == 'good movie tonight'
    assert augment_synonym('good', lexicon, 1.0, rng) == 'fine'
    out = augment_synonym('good movie tonight', lexicon, 1.0, rng).split()
    assert out[0] == 'fine'
    assert out[1] in ('film', 'picture')
    assert out[2] == 'tonight'


def test_synonym_preserves_token_count(lexicon):
    """Test synonym replacement never changes the number of tokens"""
    rng = random.Random(1)
    for text in _texts(rng, 1000):
        assert len(augment_synonym(text, lexicon, 0.5, rng).split()) == len(text.split())


def test_easydata_identity_and_forced_swap(lexicon):
    """Test all-zero probabilities are the identity and a forced swap of two words reverses them"""
    rng = random.Random(0)
    zero = {'replace': 0.0, 'insert': 0.0, 'swap': 0.0, 'delete': 0.0}
    assert augment_easydata('good movie tonight', lexicon, zero, rng) == 'good movie tonight'
    assert augment_easydata('a b', lexicon, {**zero, 'swap': 1.0}, rng) == 'b a'


def test_easydata_length_bounds(lexicon):
    """Test outputs keep between 1 and twice the input tokens"""
    rng = random.Random(2)
    probs = {'replace': 0.5, 'insert': 0.5, 'swap': 0.5, 'delete': 0.5}
    for text in _texts(rng, 1000):
        n = len(text.split())
        out = augment_easydata(text, lexicon, probs, rng).split()
        assert 1 <= len(out) <= 2 * n


def test_easydata_rejects_empty_text(lexicon):
    """Test empty input is an augmentation error"""
    with pytest.raises(AugmentationError):
        augment_easydata('   ', lexicon, {'swap': 1.0}, random.Random(0))
    with pytest.raises(ValidationError):
        augment_easydata('a b', lexicon, {'swap': 2.0}, random.Random(0))


def test_charswap_identity_and_forced_swap():
    """Test all-zero probabilities are the identity and a forced swap of 'ab' yields 'ba'"""
    rng = random.Random(0)
    assert augment_charswap('hello world', {}, rng) == 'hello world'
    assert augment_charswap('ab', {'swap': 1.0}, rng) == 'ba'
    assert augment_charswap('a', {'swap': 1.0}, rng) == 'a'


def _edit_distance(a, b):
    previous = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        current = [i]
        for j, cb in enumerate(b, start=1):
            current.append(min(previous[j] + 1, current[j - 1] + 1, previous[j - 1] + (ca != cb)))
        previous = current
    return previous[-1]


def test_charswap_edits_each_token_at_most_twice():
    """Test every token stays within edit distance 2 of its source"""
    rng = random.Random(3)
    probs = {'insert': 0.25, 'swap': 0.25, 'delete': 0.25, 'replace': 0.25}
    for text in _texts(rng, 1000):
        out = augment_charswap(text, probs, rng).split()
        source = text.split()
        assert len(out) == len(source)
        assert all(_edit_distance(s, o) <= 2 for s, o in zip(source, out))


def test_charswap_probabilities_must_sum_to_at_most_one():
    """Test over-committed operation probabilities are rejected"""
    with pytest.raises(ValidationError):
        augment_charswap('abc', {'insert': 0.6, 'swap': 0.6}, random.Random(0))


def test_count_syllables():
    """Test the vowel-group heuristic with the silent-e rule"""
    assert count_syllables('cat') == 1
    assert count_syllables('cake') == 1
    assert count_syllables('table') == 2
    assert count_syllables('the') == 1
    assert count_syllables('lazy') == 2
    assert count_syllables('rhythm') == 1


def test_flesch_single_word():
    """Test one one-syllable word in one sentence scores 121.22"""
    assert abs(flesch_score('cat') - 121.22) <= 1e-9


def test_flesch_is_invariant_under_sentence_duplication():
    """Test repeating a sentence keeps the per-sentence and per-word ratios"""
    sentence = 'The cat sat on the mat.'
    assert abs(flesch_score(sentence) - flesch_score(f"{sentence} {sentence}")) <= 1e-9


def test_flesch_hand_computed_paragraph():
    """Test a 20-word, 2-sentence, 24-syllable paragraph"""
    expected = 206.835 - 1.015 * (20 / 2) - 84.6 * (24 / 20)
    assert abs(flesch_score(PARAGRAPH) - expected) <= 1e-9
    assert abs(flesch_score(LONG_WORDS) - (206.835 - 1.015 * 3 - 84.6 * 5)) <= 1e-9


def test_filter_limits():
    """Test unbounded, empty and mixed readability windows"""
    examples = [_aug(0, 'cat.'), _aug(1, PARAGRAPH), _aug(2, LONG_WORDS)]
    assert filter_augmented(examples) == examples
    assert filter_augmented(examples, None, None) == examples
    assert filter_augmented(examples, 1000.0, 1001.0) == []
    assert [e.id for e in filter_augmented(examples, 0.0, 100.0)] == ['x1-a0']
    assert [e.id for e in filter_augmented(examples, None, 100.0)] == ['x1-a0', 'x2-a0']
    with pytest.raises(ValidationError):
        filter_augmented(examples, 10.0, 5.0)


def test_filter_ignores_separator():
    """Test the pair separator does not count as a word"""
    pair = _aug(0, 'cat [sep] dog')
    assert filter_augmented([pair], flesch_score('cat dog'), flesch_score('cat dog')) == [pair]


def _raw(n=20, pairs=False):
    rng = random.Random(5)
    texts = _texts(rng, n)
    return Dataset('raw', [
        Example(f"x{i:02d}", i % 2, text, 'the plot was good' if pairs else None)
        for i, text in enumerate(texts)
    ])


def _augmenters(lexicon):
    return build_augmenters(['easydata', 'synonym', 'charswap'], lexicon, ExperimentConfig())


def test_build_augmented_dataset_properties(lexicon):
    """Test counts, labels, origins, distinctness and canonical order"""
    raw = _raw()
    augmented = build_augmented_dataset(raw, _augmenters(lexicon), 3, seed=0)
    by_id = raw.by_id()
    assert len(augmented) <= 3 * len(raw)
    assert [a.origin_id for a in augmented] == sorted(a.origin_id for a in augmented)
    assert len({a.id for a in augmented}) == len(augmented)
    for a in augmented:
        origin = by_id[a.origin_id]
        assert a.label == origin.label
        assert a.text != origin.text
        assert a.id.startswith(f"{a.origin_id}-a")
        assert a.augmenter in ('easydata', 'synonym', 'charswap')
    for origin in by_id:
        texts = [a.text for a in augmented if a.origin_id == origin]
        assert len(texts) == len(set(texts))


def test_build_augmented_dataset_is_deterministic(lexicon):
    """Test the same seed reproduces the same augmented set"""
    raw = _raw()
    first = build_augmented_dataset(raw, _augmenters(lexicon), 3, seed=4)
    second = build_augmented_dataset(raw, _augmenters(lexicon), 3, seed=4)
    other = build_augmented_dataset(raw, _augmenters(lexicon), 3, seed=5)
    assert first == second
    assert first != other


def test_pair_augmentation_keeps_one_separator(lexicon):
    """Test both halves of a pair are augmented around a single separator"""
    augmented = build_augmented_dataset(_raw(5, pairs=True), _augmenters(lexicon), 2, seed=0)
    assert augmented
    assert all(a.text.split().count('[sep]') == 1 for a in augmented)


def test_build_augmented_dataset_validation(lexicon):
    """Test count and augmenter list are validated"""
    with pytest.raises(ValidationError):
        build_augmented_dataset(_raw(), _augmenters(lexicon), 0, seed=0)
    with pytest.raises(ValidationError):
        build_augmented_dataset(_raw(), [], 2, seed=0)
    with pytest.raises(ValidationError):
        build_augmenters(['backtranslate'], lexicon, ExperimentConfig())


def test_save_and_load_augmented(tmp_path, lexicon):
    """Test the TSV file reloads identically and is written byte-for-byte reproducibly"""
    augmented = build_augmented_dataset(_raw(), _augmenters(lexicon), 2, seed=0)
    first, second = tmp_path / 'a.tsv', tmp_path / 'b.tsv'
    save_augmented(augmented, str(first))
    save_augmented(augmented, str(second))
    assert first.read_bytes() == second.read_bytes()
    assert load_augmented(str(first)) == augmented


def test_load_augmented_reports_bad_rows(tmp_path):
    """Test malformed augmented files name the offending line"""
    bad_header = tmp_path / 'header.tsv'
    bad_header.write_text('id\ttext\nx\thello\n')
    with pytest.raises(DataFormatError) as excinfo:
        load_augmented(str(bad_header))
    assert excinfo.value.line == 1

    bad_label = tmp_path / 'label.tsv'
    bad_label.write_text('id\torigin_id\tlabel\taugmenter\ttext\n'
                         'x0-a0\tx0\t1\tsynonym\tgood film\n'
                         'x0-a1\tx0\tpositive\tsynonym\tfine film\n')
    with pytest.raises(DataFormatError) as excinfo:
        load_augmented(str(bad_label))
    assert excinfo.value.line == 3


def test_corrupt_labels_flips_exact_share():
    """Test round(rate * n) samples get a different label and a flip marker"""
    examples = [_aug(i, f"text {i}", i % 2) for i in range(40)]
    corrupted = corrupt_labels(examples, 0.3, 2, seed=0)
    flipped = [(a, b) for a, b in zip(examples, corrupted) if b.corrupted]
    assert len(flipped) == 12
    assert all(a.label != b.label and b.augmenter == 'easydata+flip' for a, b in flipped)
    assert all(a == b for a, b in zip(examples, corrupted) if not b.corrupted)
    assert corrupt_labels(examples, 0.3, 2, seed=0) == corrupted
    assert corrupt_labels(examples, 0.0, 2, seed=0) == examples


def test_lexicon_load(tmp_path, caplog):
    """Test comments, case folding and multi-word synonyms"""
    path = tmp_path / 'lexicon.tsv'
    path.write_text('# word\tsynonyms\nGood\tFine,nice\nmovie\tmotion picture\nbad\tpoor\n')
    with caplog.at_level(logging.WARNING):
        lexicon = SynonymLexicon.load(str(path))
    assert lexicon.synonyms('GOOD') == ['fine', 'nice']
    assert 'movie' not in lexicon
    assert 'bad' in lexicon
    assert 'movie' in caplog.text


def test_lexicon_load_rejects_malformed_lines(tmp_path):
    """Test a missing tab or an empty entry names the line"""
    path = tmp_path / 'lexicon.tsv'
    path.write_text('good\tfine\nbad poor\n')
    with pytest.raises(DataFormatError) as excinfo:
        SynonymLexicon.load(str(path))
    assert excinfo.value.line == 2
    path.write_text('good\t \n')
    with pytest.raises(DataFormatError):
        SynonymLexicon.load(str(path))


def test_lexicon_save_round_trip(tmp_path, lexicon):
    """Test a saved lexicon reloads with the same entries"""
    path = tmp_path / 'lexicon.tsv'
    lexicon.save(str(path))
    assert SynonymLexicon.load(str(path)).entries == lexicon.entries


def test_bundled_lexicon_covers_synthetic_words():
    """Test the packaged lexicon loads and includes benchmark vocabulary"""
    lexicon = SynonymLexicon.load(Config.LEXICON_PATH)
    assert 'good' in lexicon
    assert 'terrible' in lexicon


def test_register_custom_augmenter(lexicon):
    """Test a registered augmenter is built by name"""
    @register_augmenter('reverse_words')
    class ReverseAugmenter(Augmenter):
        def __call__(self, text, rng):
            return ' '.join(reversed(text.split()))

        @classmethod
        def from_config(cls, lexicon, config):
            return cls()

    assert 'reverse_words' in registered_augmenters()
    (augmenter,) = build_augmenters(['reverse_words'], lexicon, ExperimentConfig())
    assert augmenter('a b c', random.Random(0)) == 'c b a'
    with pytest.raises(ValidationError):
        register_augmenter('reverse_words')(ReverseAugmenter)

import pytest
from hypothesis import given, strategies as st

from mltc.errors import ConfigError, DataError
from mltc.labelspace import (
    EOS_ID,
    UNK_ID,
    DescriptorScheme,
    Label,
    LabelVocabulary,
    Tokenizer,
    add_pseudo_tokens,
    descriptor_token,
    descriptor_tokens,
    format_target,
    label_from_token,
    load_labels,
    parse_prediction,
    parse_prediction_detailed,
    save_labels,
)

LABELS = [
    Label(0, 1, "finance", "finance", "<label_1>"),
    Label(1, 1, "EU", "eu", "<label_2>"),
    Label(2, 1, "public health", "health", "<label_3>"),
    Label(3, 1, "social security", "welfare", "<label_4>"),
]


@pytest.fixture
def vocab():
    return LabelVocabulary(1, LABELS)


class TestFormatting:
    def test_byte_order(self, vocab):
        assert format_target([0, 1], vocab) == "EU, finance"

    def test_empty(self, vocab):
        assert format_target([], vocab) == ""
        assert parse_prediction("", vocab) == frozenset()

    def test_multi_word(self, vocab):
        assert format_target([3, 2], vocab) == "public health, social security"

    def test_unknown_id(self, vocab):
        with pytest.raises(DataError):
            format_target([9], vocab)

    @given(st.sets(st.integers(0, 3)), st.sampled_from(list(DescriptorScheme)))
    def test_round_trip(self, labels, scheme):
        v = LabelVocabulary(1, LABELS, scheme)
        assert parse_prediction(format_target(labels, v), v) == frozenset(labels)

    def test_order_independent(self, vocab):
        assert format_target([2, 0, 1], vocab) == format_target([1, 2, 0], vocab)


class TestParsing:
    def test_novel_fragment_dropped(self, vocab):
        res = parse_prediction_detailed("EU, accommodation, finance", vocab)
        assert res.labels == {0, 1}
        assert res.novel == ["accommodation"]
        assert res.fragments == ["EU", "accommodation", "finance"]

    def test_duplicates_collapse(self, vocab):
        assert parse_prediction("EU, EU", vocab) == {1}

    def test_empty_fragments_ignored(self, vocab):
        res = parse_prediction_detailed("EU,, finance,", vocab)
        assert res.labels == {0, 1} and res.novel == []

    def test_case_sensitive(self, vocab):
        assert parse_prediction_detailed("eu", vocab).novel == ["eu"]


class TestVocabulary:
    def test_comma_rejected(self):
        with pytest.raises(ConfigError, match="comma"):
            LabelVocabulary(1, [Label(0, 1, "a, b", "ab", "<label_1>")])

    def test_duplicate_rejected(self):
        with pytest.raises(ConfigError, match="unique"):
            LabelVocabulary(1, [Label(0, 1, "a", "x", "<l1>"), Label(1, 1, "b", "x", "<l2>")])

    def test_ids_in_order(self):
        with pytest.raises(ConfigError):
            LabelVocabulary(1, [Label(1, 1, "a", "a", "<l1>")])

    def test_numeric_descriptor(self, vocab):
        v = vocab.with_scheme("numeric")
        assert v.descriptor(0) == "1" and v.lookup("4") == 3

    def test_resolve_any_scheme(self, vocab):
        assert vocab.resolve("welfare") == 3 and vocab.resolve("<label_2>") == 1
        with pytest.raises(DataError):
            vocab.resolve("nothing")

    def test_file_round_trip(self, tmp_path, vocab):
        l2 = LabelVocabulary(2, [Label(0, 2, "tax law", "tax", "<label_1>")])
        save_labels(tmp_path / "labels.tsv", [vocab, l2])
        loaded = load_labels(tmp_path / "labels.tsv")
        assert loaded[1].labels == vocab.labels and loaded[2].labels == l2.labels

    def test_file_error_has_line(self, tmp_path):
        (tmp_path / "bad.tsv").write_text("0\t1\tfinance\tfinance\t<label_1>\n1\t1\tEU\n")
        with pytest.raises(DataError, match=":2:"):
            load_labels(tmp_path / "bad.tsv")


class TestTokens:
    def test_tokenizer_round_trip(self):
        tok = Tokenizer.from_texts(["EU, finance", "public health"])
        ids = tok.encode("EU, finance")
        assert tok.decode(ids + [EOS_ID, 7]) == "EU, finance"
        assert tok.encode("unseen") == [UNK_ID]

    def test_frequency_order(self):
        tok = Tokenizer.from_texts(["b a b", "c b a"])
        assert tok.words[4:] == ["b", "a", "c"]

    def test_save_load(self, tmp_path):
        tok = Tokenizer.from_texts(["x y z"])
        tok.save(tmp_path / "v.txt")
        assert Tokenizer.load(tmp_path / "v.txt").words == tok.words

    def test_simplified_single_token(self, vocab):
        tok = Tokenizer(["finance", "eu", "health", "welfare"])
        v = vocab.with_scheme("simplified")
        assert [tok.words[i] for i in descriptor_tokens(v, tok)] == ["finance", "eu", "health", "welfare"]

    def test_original_rejected_for_single_token(self, vocab):
        tok = Tokenizer(["public", "health"])
        with pytest.raises(ConfigError):
            descriptor_token(2, vocab, tok)

    def test_simplified_unknown_rejected(self, vocab):
        with pytest.raises(ConfigError, match="single token"):
            descriptor_token(0, vocab.with_scheme("simplified"), Tokenizer(["eu"]))

    def test_pseudo_ids_are_fresh(self, vocab):
        tok = Tokenizer(["finance"])
        base = len(tok)
        ids = add_pseudo_tokens(tok, vocab.with_scheme("pseudo"))
        assert ids == list(range(base, base + 4))
        assert label_from_token(ids[2], vocab.with_scheme("pseudo"), tok) == 2

    def test_pseudo_collision(self, vocab):
        with pytest.raises(ConfigError, match="collides"):
            add_pseudo_tokens(Tokenizer(["<label_1>"]), vocab)

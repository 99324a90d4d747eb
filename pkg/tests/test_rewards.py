import math

import numpy as np
import pytest

from duetsql import parser as ps
from duetsql import rewards as rw
from duetsql import seqmodels as sm
from duetsql import sqlcore as sc
from duetsql import transformer as tr

SCHEMA = sc.Schema(
    "toy", ("flights", "airports"),
    (sc.Column("id", 0, "number"), sc.Column("airports_id", 0, "number"),
     sc.Column("price", 0, "number"),
     sc.Column("id", 1, "number"), sc.Column("city", 1, "text")),
    (0, 3), ((1, 3),), {4: ("abilene", "aberdeen")})

INDEX = rw.SchemaTokenIndex.build(SCHEMA)
LEX = rw.PronounLexicon.default()


class TestLexiconAndIndex:
    def test_default_lexicon_contents(self):
        assert "it" in LEX and "their" in LEX and "flights" not in LEX

    def test_lexicon_from_file(self, tmp_path):
        path = tmp_path / "pronouns.txt"
        path.write_text("it\nthem\n\nwhich\n")
        lex = rw.PronounLexicon.from_file(path)
        assert "which" in lex and "them" in lex and "their" not in lex

    def test_empty_lexicon_rejected(self):
        with pytest.raises(ValueError):
            rw.PronounLexicon(frozenset())

    def test_index_covers_names_and_values(self):
        for token in ("flights", "airports", "price", "city", "abilene", "id"):
            assert token in INDEX
        assert "airports_id" in INDEX  # identifier form kept alongside its words
        assert "paris" not in INDEX


class TestTokenRewards:
    def test_schema_token_mentioned_in_original(self):
        assert rw.token_reward_rewrite("flights", "show flights to boston", INDEX, LEX) == 0.1

    def test_pronoun_punished(self):
        assert rw.token_reward_rewrite("them", "what about them", INDEX, LEX) == -0.1

    def test_neutral_token_zero(self):
        assert rw.token_reward_rewrite("the", "show the flights", INDEX, LEX) == 0.0

    def test_schema_token_not_in_original_is_not_rewarded(self):
        assert rw.token_reward_rewrite("airports", "show flights", INDEX, LEX) == 0.0

    def test_schema_test_wins_over_lexicon(self):
        # a column literally named like a pronoun: schema membership decides
        schema = sc.Schema("p", ("ones",), (sc.Column("one", 0, "number"),), (0,), ())
        index = rw.SchemaTokenIndex.build(schema)
        assert rw.token_reward_rewrite("one", "the one value", index, LEX) == 0.1

    def test_simplify_punishes_schema_tokens_from_history(self):
        r = rw.token_reward_simplify("city", "show flights", ["which city is it"], INDEX, LEX)
        assert r == -0.1

    def test_simplify_awards_pronouns(self):
        assert rw.token_reward_simplify("it", "show flights", [], INDEX, LEX) == 0.1

    def test_simplify_neutral_zero(self):
        assert rw.token_reward_simplify("show", "show flights", [], INDEX, LEX) == 0.0

    def test_rewards_only_take_three_values(self):
        rng = np.random.default_rng(0)
        words = ["flights", "price", "them", "it", "show", "value", "city", "xyz"]
        for _ in range(500):
            tok = str(rng.choice(words))
            x = " ".join(rng.choice(words, size=4))
            h = [" ".join(rng.choice(words, size=3))]
            assert rw.token_reward_rewrite(tok, x, INDEX, LEX) in (-0.1, 0.0, 0.1)
            assert rw.token_reward_simplify(tok, x, h, INDEX, LEX) in (-0.1, 0.0, 0.1)


class TestAccumulate:
    def test_spec_example_suffix_sums(self):
        returns = rw.accumulate([0.1, -0.1, 0.0], 0.5, 1.0)
        assert returns == pytest.approx([0.5, 0.4, 0.5])

    def test_zero_discount_keeps_rewards(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            r = list(rng.normal(size=rng.integers(1, 8)))
            s = float(rng.normal())
            final = r[:-1] + [s]
            assert rw.accumulate(r, s, 0.0) == pytest.approx(final)

    def test_single_token_gets_sentence_reward(self):
        assert rw.accumulate([0.1], -2.5, 1.0) == [-2.5]

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            rw.accumulate([], 1.0, 1.0)

    def test_matches_bruteforce_suffix_sum_at_lambda_one(self):
        rng = np.random.default_rng(2)
        for _ in range(300):
            m = int(rng.integers(1, 10))
            r = list(rng.choice([-0.1, 0.0, 0.1], size=m))
            s = float(rng.normal())
            final = r[:-1] + [s]
            expected = [sum(final[j:]) for j in range(m)]
            assert rw.accumulate(r, s, 1.0) == pytest.approx(expected, abs=1e-12)

    def test_one_step_recursion_all_lambdas(self):
        rng = np.random.default_rng(3)
        for lam in (0.0, 0.5, 1.0):
            for _ in range(100):
                m = int(rng.integers(1, 9))
                r = list(rng.normal(size=m))
                s = float(rng.normal())
                returns = rw.accumulate(r, s, lam)
                final = r[:-1] + [s]
                for j in range(m - 1):
                    assert returns[j] == pytest.approx(final[j] + lam * returns[j + 1], abs=1e-12)

    def test_closed_form_formula(self):
        rng = np.random.default_rng(4)
        for lam in (0.3, 0.9):
            m = 6
            r = list(rng.normal(size=m))
            s = float(rng.normal())
            final = r[:-1] + [s]
            returns = rw.accumulate(r, s, lam)
            for j in range(m):
                expected = final[j] + sum(lam ** (l - j) * final[l] for l in range(j + 1, m))
                assert returns[j] == pytest.approx(expected, abs=1e-12)


class TestRewardTrace:
    def test_build_and_validate(self):
        trace = rw.RewardTrace.build([0.1, 0.0], -1.0, 1.0)
        assert trace.returns == (-0.9, -1.0)

    def test_inconsistent_returns_rejected(self):
        with pytest.raises(ValueError):
            rw.RewardTrace((0.1, 0.0), -1.0, (5.0, 5.0), 1.0)


@pytest.fixture(scope="module")
def tiny_models():
    att = tr.AttentionConfig(num_heads=2, hidden_dim=16, num_layers=1, ffn_dim=24,
                             max_positions=64)
    cfg = sm.Seq2SeqConfig(attention=att, max_gen_len=16)
    vocab = sm.Vocabulary.from_texts(
        ["what is the price of flights where city is value", "abilene aberdeen id airports"])
    lm = sm.build_lm(vocab, cfg, seed=0)
    lm.params["out.w"].data[:] = 0.0
    lm.params["out.b"].data[:] = 0.0
    parser_model = ps.build_parser(vocab, ps.ParserConfig(attention=att), seed=0)
    gold = sc.SqlAst((0,), False, (sc.SelectItem(None, 2),), None, (), None, None)
    pairs = [("what is the price of flights", SCHEMA, gold)]
    ps.train_parser(pairs, parser_model, ps.ParserTrainConfig(steps=220, lr=2e-3, seed=0))
    assert ps.exact_ast_accuracy(pairs, parser_model) == 1.0
    return vocab, lm, parser_model, gold


class TestSentenceRewards:
    def test_intent_reward_one_when_parse_matches(self, tiny_models):
        vocab, lm, parser_model, gold = tiny_models
        toks = sm.tokenize("what is the price of flights")
        assert rw.intent_reward(toks, parser_model, SCHEMA, gold) == 1.0
        total = rw.sentence_reward_rewrite(toks, lm, parser_model, SCHEMA, gold)
        assert total == pytest.approx(-math.log(len(vocab)) + 1.0, abs=1e-9)

    def test_intent_reward_zero_when_parse_differs(self, tiny_models):
        vocab, lm, parser_model, gold = tiny_models
        wrong_gold = sc.SqlAst((0,), False, (sc.SelectItem("max", 2),), None, (), None, None)
        toks = sm.tokenize("what is the price of flights")
        assert rw.intent_reward(toks, parser_model, SCHEMA, wrong_gold) == 0.0
        total = rw.sentence_reward_rewrite(toks, lm, parser_model, SCHEMA, wrong_gold)
        assert total == pytest.approx(-math.log(len(vocab)), abs=1e-9)

    def test_simplify_reward_is_lm_only(self, tiny_models):
        vocab, lm, _, _ = tiny_models
        toks = sm.tokenize("what about the price")
        assert rw.sentence_reward_simplify(toks, lm) == pytest.approx(
            -math.log(len(vocab)), abs=1e-9)

    def test_reward_difference_is_intent_indicator(self, tiny_models):
        vocab, lm, parser_model, gold = tiny_models
        for text in ("what is the price of flights", "what is the city of airports"):
            toks = sm.tokenize(text)
            diff = (rw.sentence_reward_rewrite(toks, lm, parser_model, SCHEMA, gold)
                    - rw.sentence_reward_simplify(toks, lm))
            assert diff in (0.0, 1.0)

    def test_empty_candidate_rejected(self, tiny_models):
        vocab, lm, parser_model, gold = tiny_models
        with pytest.raises(ValueError):
            rw.sentence_reward_rewrite([], lm, parser_model, SCHEMA, gold)
        with pytest.raises(ValueError):
            rw.sentence_reward_simplify([], lm)

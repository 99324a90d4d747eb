"""Reward functions for the closed-loop game.

Token-level: +/-0.1 for database-related vs pronoun tokens (sign depends on
loop direction). Sentence-level: length-normalized LM score, plus the parser
intent check (predicted SQL equals gold) on the rewrite side. Accumulation
replaces the final token reward with the sentence reward and discounts the
suffix by lambda.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import parser as parsermod
from . import seqmodels as sm
from . import sqlcore as sc

TOKEN_REWARD = 0.1

DEFAULT_PRONOUNS = (
    "it", "its", "they", "them", "their", "this", "that", "those", "these",
    "one", "ones", "his", "her", "him", "she", "he",
)


@dataclass(frozen=True)
class PronounLexicon:
    tokens: frozenset[str]

    def __post_init__(self):
        if not self.tokens:
            raise ValueError("pronoun lexicon is empty")
        if any(t != t.lower() for t in self.tokens):
            raise ValueError("pronoun lexicon must be lowercase")

    @classmethod
    def default(cls) -> "PronounLexicon":
        return cls(frozenset(DEFAULT_PRONOUNS))

    @classmethod
    def from_file(cls, path) -> "PronounLexicon":
        with open(path) as fh:
            tokens = [line.strip() for line in fh]
        return cls(frozenset(t for t in tokens if t))

    def __contains__(self, token: str) -> bool:
        return token in self.tokens


@dataclass(frozen=True)
class SchemaTokenIndex:
    """Lowercase tokens of table names, column names, and sample cell values."""

    tokens: frozenset[str]

    @classmethod
    def build(cls, schema: sc.Schema) -> "SchemaTokenIndex":
        out: set[str] = set()
        for table in schema.tables:
            out.add(table.lower())
            out.update(parsermod.name_words(table))
        for col in schema.columns:
            out.add(col.name.lower())
            out.update(parsermod.name_words(col.name))
        for values in schema.values.values():
            for v in values:
                out.update(sm.tokenize(v))
        return cls(frozenset(out))

    def __contains__(self, token: str) -> bool:
        return token in self.tokens


def _token_set(text_or_tokens) -> set[str]:
    if isinstance(text_or_tokens, str):
        return set(sm.tokenize(text_or_tokens))
    return {t.lower() for t in text_or_tokens}


def token_reward_rewrite(token: str, original_utterance, index: SchemaTokenIndex,
                         lexicon: PronounLexicon) -> float:
    """+0.1 for a database token the original turn mentioned, -0.1 for a pronoun.

    The database test wins when a token is both (a schema word that is also in
    the lexicon).
    """
    token = token.lower()
    if token in index and token in _token_set(original_utterance):
        return TOKEN_REWARD
    if token in lexicon:
        return -TOKEN_REWARD
    return 0.0


def token_reward_simplify(token: str, original_utterance, history,
                          index: SchemaTokenIndex, lexicon: PronounLexicon) -> float:
    """-0.1 for database tokens mentioned in the turn or history, +0.1 for pronouns."""
    token = token.lower()
    mentioned = _token_set(original_utterance)
    for h in history:
        mentioned |= _token_set(h)
    if token in index and token in mentioned:
        return -TOKEN_REWARD
    if token in lexicon:
        return TOKEN_REWARD
    return 0.0


def intent_reward(candidate_tokens, parser_model, schema: sc.Schema,
                  gold_ast: sc.SqlAst) -> float:
    """1.0 iff the candidate parses to the gold SQL; any failure counts as 0."""
    try:
        predicted = parsermod.parse(list(candidate_tokens), schema, parser_model)
        return 1.0 if sc.sql_equal(predicted, gold_ast, schema) else 0.0
    except (sc.DerivationError, sc.SchemaError, ValueError):
        return 0.0


def sentence_reward_rewrite(candidate_tokens, lm_c: sm.LanguageModel, parser_model,
                            schema: sc.Schema, gold_ast: sc.SqlAst) -> float:
    """r_c = LM score + intent reward for a rewrite candidate."""
    candidate_tokens = list(candidate_tokens)
    if not candidate_tokens:
        raise ValueError("empty candidate")
    return sm.lm_score(lm_c, candidate_tokens) + intent_reward(
        candidate_tokens, parser_model, schema, gold_ast)


def sentence_reward_simplify(candidate_tokens, lm_s: sm.LanguageModel) -> float:
    """Simplification candidates are judged by the follow-up LM alone."""
    candidate_tokens = list(candidate_tokens)
    if not candidate_tokens:
        raise ValueError("empty candidate")
    return sm.lm_score(lm_s, candidate_tokens)


def accumulate(token_rewards, sentence_reward: float, lam: float) -> list[float]:
    """Discounted returns with the final token reward replaced by the sentence reward."""
    if len(token_rewards) == 0:
        raise ValueError("empty reward list")
    final = list(token_rewards)
    final[-1] = float(sentence_reward)
    returns = [0.0] * len(final)
    returns[-1] = final[-1]
    for j in range(len(final) - 2, -1, -1):
        returns[j] = final[j] + lam * returns[j + 1]
    return returns


@dataclass(frozen=True)
class RewardTrace:
    """Per-candidate record: raw token rewards, sentence reward, returns, lambda."""

    token_rewards: tuple[float, ...]
    sentence_reward: float
    returns: tuple[float, ...]
    lam: float

    def __post_init__(self):
        if len(self.token_rewards) != len(self.returns):
            raise ValueError("token reward / return length mismatch")
        recomputed = accumulate(self.token_rewards, self.sentence_reward, self.lam)
        if any(abs(a - b) > 1e-9 for a, b in zip(recomputed, self.returns)):
            raise ValueError("returns are not consistent with rewards and lambda")

    @classmethod
    def build(cls, token_rewards, sentence_reward: float, lam: float) -> "RewardTrace":
        returns = accumulate(token_rewards, sentence_reward, lam)
        return cls(tuple(float(r) for r in token_rewards), float(sentence_reward),
                   tuple(returns), float(lam))

"""Evaluation metrics and the two-phase error attribution.

Text metrics (BLEU-n, ROUGE-n/L, exact match, rewrite F-score) work on token
lists or raw strings. SQL metrics (question match / interaction match) compare
ASTs with exact set match. `attribute_errors` splits pipeline failures into
rewrite-phase and parse-phase errors using the gold rewrite as the
counterfactual phase-one output.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field

from . import sqlcore as sc
from .seqmodels import tokenize


def _tokens(x) -> list[str]:
    return tokenize(x) if isinstance(x, str) else [t.lower() for t in x]


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu_n(prediction, reference, n: int) -> float:
    """Sentence BLEU up to order n; +1 smoothing on orders above 1."""
    if n < 1:
        raise ValueError("n must be >= 1")
    pred, ref = _tokens(prediction), _tokens(reference)
    if not pred:
        return 0.0
    log_sum = 0.0
    for k in range(1, n + 1):
        pred_ngrams = _ngrams(pred, k)
        ref_ngrams = _ngrams(ref, k)
        matches = sum(min(c, ref_ngrams[g]) for g, c in pred_ngrams.items())
        total = sum(pred_ngrams.values())
        if k > 1:
            matches, total = matches + 1, total + 1
        if matches == 0:
            return 0.0
        log_sum += math.log(matches / total)
    brevity = 1.0 if len(pred) >= len(ref) else math.exp(1.0 - len(ref) / len(pred))
    return brevity * math.exp(log_sum / n)


def rouge_n(prediction, reference, n: int = 2) -> float:
    """F1 of clipped n-gram overlap."""
    pred, ref = _tokens(prediction), _tokens(reference)
    pred_ngrams, ref_ngrams = _ngrams(pred, n), _ngrams(ref, n)
    matches = sum(min(c, ref_ngrams[g]) for g, c in pred_ngrams.items())
    if not pred_ngrams or not ref_ngrams or matches == 0:
        return 0.0
    precision = matches / sum(pred_ngrams.values())
    recall = matches / sum(ref_ngrams.values())
    return 2 * precision * recall / (precision + recall)


def _lcs_length(a: list[str], b: list[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[-1]))
        prev = cur
    return prev[-1]


def rouge_l(prediction, reference) -> float:
    """F1 from longest-common-subsequence length."""
    pred, ref = _tokens(prediction), _tokens(reference)
    if not ref:
        raise ValueError("empty reference")
    lcs = _lcs_length(pred, ref)
    if lcs == 0:
        return 0.0
    precision, recall = lcs / len(pred), lcs / len(ref)
    return 2 * precision * recall / (precision + recall)


def exact_match(prediction, reference) -> int:
    """1 iff the lowercased token sequences are identical."""
    return int(_tokens(prediction) == _tokens(reference))


def rewrite_f(prediction, reference, history, current, n: int = 1,
              context: str = "history-minus-current") -> float:
    """F1 over the n-grams that contain at least one context word.

    Context words default to history tokens absent from the current utterance;
    context="all-history" uses every history token. When neither side has any
    such n-gram the score is 1.0 by convention.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if context not in ("history-minus-current", "all-history"):
        raise ValueError(f"unknown context mode {context!r}")
    context_words: set[str] = set()
    for h in history:
        context_words.update(_tokens(h))
    if context == "history-minus-current":
        context_words -= set(_tokens(current))

    def restricted(tokens):
        return Counter({g: c for g, c in _ngrams(tokens, n).items()
                        if set(g) & context_words})

    pred_r = restricted(_tokens(prediction))
    ref_r = restricted(_tokens(reference))
    if not pred_r and not ref_r:
        return 1.0
    matches = sum(min(c, ref_r[g]) for g, c in pred_r.items())
    if matches == 0:
        return 0.0
    precision = matches / sum(pred_r.values())
    recall = matches / sum(ref_r.values())
    return 2 * precision * recall / (precision + recall)


def question_interaction_match(predicted: list[list], gold: list[list],
                               schemas: list[sc.Schema]) -> tuple[float, float]:
    """(QM, IM): per-turn and per-dialogue exact-set-match accuracy.

    `predicted` and `gold` are per-dialogue lists of ASTs; a None prediction
    counts as wrong.
    """
    if len(predicted) != len(gold) or len(gold) != len(schemas):
        raise ValueError("misaligned dialogue lists")
    turns = correct = dialogues_correct = 0
    for preds, golds, schema in zip(predicted, gold, schemas):
        if len(preds) != len(golds):
            raise ValueError("misaligned turn lists")
        all_ok = True
        for pred, g in zip(preds, golds):
            turns += 1
            ok = pred is not None and sc.sql_equal(pred, g, schema)
            correct += ok
            all_ok &= ok
        dialogues_correct += all_ok
    if turns == 0:
        raise ValueError("no turns to evaluate")
    return correct / turns, dialogues_correct / len(gold)


# ---------------------------------------------------------------------------
# Phase attribution.
# ---------------------------------------------------------------------------


@dataclass
class ErrorCell:
    turns: int = 0
    errors: int = 0
    phase1: int = 0
    phase2: int = 0

    @property
    def error_rate(self) -> float:
        return self.errors / self.turns if self.turns else 0.0


@dataclass
class PhaseReport:
    overall: ErrorCell = field(default_factory=ErrorCell)
    per_phenomenon: dict[str, ErrorCell] = field(default_factory=dict)
    per_turn_index: dict[int, ErrorCell] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        def cell(c: ErrorCell) -> dict:
            return {"turns": c.turns, "errors": c.errors, "phase1": c.phase1,
                    "phase2": c.phase2, "error_rate": c.error_rate}

        return {
            "overall": cell(self.overall),
            "per_phenomenon": {k: cell(v) for k, v in sorted(self.per_phenomenon.items())},
            "per_turn_index": {str(k): cell(v) for k, v in sorted(self.per_turn_index.items())},
        }

    def phenomenon_csv(self) -> str:
        lines = ["phenomenon,turns,errors,phase1,phase2,error_rate"]
        for name, c in sorted(self.per_phenomenon.items()):
            lines.append(f"{name},{c.turns},{c.errors},{c.phase1},{c.phase2},{c.error_rate:.4f}")
        return "\n".join(lines) + "\n"

    def turn_csv(self) -> str:
        lines = ["turn_index,turns,errors,phase1,phase2,error_rate"]
        for idx, c in sorted(self.per_turn_index.items()):
            lines.append(f"{idx},{c.turns},{c.errors},{c.phase1},{c.phase2},{c.error_rate:.4f}")
        return "\n".join(lines) + "\n"


def attribute_errors(dialogues, schemas: dict[str, sc.Schema],
                     rewrite_fn, parse_fn) -> PhaseReport:
    """Attribute each wrong pipeline turn to phase one or phase two.

    rewrite_fn(history, utterance) -> text; parse_fn(question, schema) -> ast
    (may raise). A turn is phase-two when even the gold rewrite fails to parse
    to the gold AST, otherwise phase-one. Requires gold rewrites on every turn.
    """
    report = PhaseReport()
    for d in dialogues:
        schema = schemas[d.schema_id]
        history: list[str] = []
        for t_idx, turn in enumerate(d.turns):
            if turn.gold_rewrite is None:
                raise ValueError("error attribution needs gold rewrites")
            cells = [report.overall,
                     report.per_turn_index.setdefault(t_idx + 1, ErrorCell())]
            cells += [report.per_phenomenon.setdefault(p, ErrorCell())
                      for p in turn.phenomena]
            for c in cells:
                c.turns += 1

            def safe_parse(question):
                try:
                    return parse_fn(question, schema)
                except (sc.DerivationError, sc.SchemaError, ValueError):
                    return None

            predicted = safe_parse(rewrite_fn(list(history), turn.utterance))
            wrong = predicted is None or not sc.sql_equal(predicted, turn.ast, schema)
            if wrong:
                gold_parse = safe_parse(turn.gold_rewrite)
                phase2 = gold_parse is None or not sc.sql_equal(gold_parse, turn.ast, schema)
                for c in cells:
                    c.errors += 1
                    if phase2:
                        c.phase2 += 1
                    else:
                        c.phase1 += 1
            history.append(turn.utterance)
    return report


# ---------------------------------------------------------------------------
# Aggregate report.
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    scalars: dict[str, float]
    per_dialogue: list[dict] = field(default_factory=list)
    phase: PhaseReport | None = None
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {"scalars": {k: self.scalars[k] for k in sorted(self.scalars)},
               "metadata": self.metadata,
               "per_dialogue": self.per_dialogue}
        if self.phase is not None:
            doc["phase"] = self.phase.to_json_dict()
        return json.dumps(doc, sort_keys=True, indent=1)

    def to_text_table(self) -> str:
        width = max(len(k) for k in self.scalars)
        lines = [f"{k:<{width}}  {self.scalars[k]:.4f}" for k in sorted(self.scalars)]
        return "\n".join(lines) + "\n"

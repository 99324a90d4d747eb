"""Single-turn text-to-SQL: relation-aware encoder + grammar-constrained decoder.

The joint input is [question tokens; one position per column; one position per
table]. Schema positions are embedded as the mean of their name-word
embeddings plus a segment-type embedding. Relation labels cover intra-question
distance buckets, question<->schema match degree, and intra-schema key
structure; unlabeled pairs carry the reserved ZERO relation.

Decoding runs an LSTM over (previous action embedding, attention context) and
scores rules directly plus columns/tables by pointer dot-products. With
constrain=True the distribution is masked to the actions the shared
DerivationState allows, so every decode delinearizes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from . import seqmodels as sm
from . import sqlcore as sc
from . import transformer as tr
from .numerics import Tensor

PARSER_RELATIONS = tr.RelationVocabulary((
    "ZERO",
    "QQ_M2", "QQ_M1", "QQ_0", "QQ_P1", "QQ_P2",
    "QC_EXACT", "QC_PARTIAL", "CQ_EXACT", "CQ_PARTIAL",
    "QT_EXACT", "QT_PARTIAL", "TQ_EXACT", "TQ_PARTIAL",
    "SAME_TABLE", "PRIMARY_KEY", "FOREIGN_KEY_FWD", "FOREIGN_KEY_REV",
))

_R = {name: i for i, name in enumerate(PARSER_RELATIONS.names)}

STEP_CAP = 100

# segment types for the joint sequence
_SEG_QUESTION, _SEG_COLUMN, _SEG_TABLE = 0, 1, 2


def name_words(identifier: str) -> list[str]:
    """Lowercase words of a schema identifier ('teams_id' -> ['teams', 'id'])."""
    return sm.tokenize(identifier.replace("_", " "))


def _match_degree(question: list[str], words: list[str]) -> tuple[set[int], set[int]]:
    """Indices of question tokens inside a full-name occurrence vs single-word hits."""
    exact: set[int] = set()
    n = len(words)
    for start in range(len(question) - n + 1):
        if question[start:start + n] == words:
            exact.update(range(start, start + n))
    partial = {i for i, tok in enumerate(question) if tok in set(words)} - exact
    return exact, partial


def build_relations(question_tokens: list[str], schema: sc.Schema) -> np.ndarray:
    """Total relation-id matrix over [question; columns; tables]."""
    if not question_tokens:
        raise ValueError("empty question")
    question = [t.lower() for t in question_tokens]
    nq, nc, nt = len(question), len(schema.columns), len(schema.tables)
    n = nq + nc + nt
    rel = np.zeros((n, n), dtype=np.intp)

    for i in range(nq):
        for j in range(max(0, i - 2), min(nq, i + 3)):
            rel[i, j] = _R[f"QQ_{'M' if j < i else 'P'}{abs(j - i)}"] if j != i else _R["QQ_0"]

    for c, col in enumerate(schema.columns):
        exact, partial = _match_degree(question, name_words(col.name))
        for i in exact:
            rel[i, nq + c] = _R["QC_EXACT"]
            rel[nq + c, i] = _R["CQ_EXACT"]
        for i in partial:
            rel[i, nq + c] = _R["QC_PARTIAL"]
            rel[nq + c, i] = _R["CQ_PARTIAL"]

    for t, table in enumerate(schema.tables):
        exact, partial = _match_degree(question, name_words(table))
        for i in exact:
            rel[i, nq + nc + t] = _R["QT_EXACT"]
            rel[nq + nc + t, i] = _R["TQ_EXACT"]
        for i in partial:
            rel[i, nq + nc + t] = _R["QT_PARTIAL"]
            rel[nq + nc + t, i] = _R["TQ_PARTIAL"]

    for a in range(nc):
        for b in range(nc):
            if a != b and schema.columns[a].table == schema.columns[b].table:
                rel[nq + a, nq + b] = _R["SAME_TABLE"]
    for t, pk in enumerate(schema.primary_keys):
        rel[nq + pk, nq + nc + t] = _R["PRIMARY_KEY"]
        rel[nq + nc + t, nq + pk] = _R["PRIMARY_KEY"]
    for src, dst in schema.foreign_keys:
        rel[nq + src, nq + dst] = _R["FOREIGN_KEY_FWD"]
        rel[nq + dst, nq + src] = _R["FOREIGN_KEY_REV"]
    return rel


@dataclass(frozen=True)
class ParserConfig:
    attention: tr.AttentionConfig = field(default_factory=tr.AttentionConfig)
    step_cap: int = STEP_CAP


class ParserModel:
    def __init__(self, vocab: sm.Vocabulary, cfg: ParserConfig, params: dict[str, Tensor]):
        self.vocab = vocab
        self.cfg = cfg
        self.params = params
        self.grammar_version = sc.GRAMMAR_VERSION


def build_parser(vocab: sm.Vocabulary, cfg: ParserConfig, seed: int) -> ParserModel:
    rng = np.random.default_rng(seed)
    att = cfg.attention
    d = att.hidden_dim
    params: dict[str, Tensor] = {}
    tr.register(params, "embed", nm.param(rng.normal(0, tr.INIT_STD, size=(len(vocab), d))))
    tr.register(params, "pos", nm.param(rng.normal(0, tr.INIT_STD, size=(att.max_positions, d))))
    tr.register(params, "seg", nm.param(rng.normal(0, tr.INIT_STD, size=(3, d))))
    tr.init_encoder(params, "enc", att, rng, num_relations=len(PARSER_RELATIONS))
    tr.register(params, "act_rule", nm.param(rng.normal(0, tr.INIT_STD, size=(sc.NUM_RULES, d))))
    tr.register(params, "act_start", nm.param(rng.normal(0, tr.INIT_STD, size=(1, d))))
    tr.register(params, "act_col_w", nm.param(rng.normal(0, tr.INIT_STD, size=(d, d))))
    tr.register(params, "act_tab_w", nm.param(rng.normal(0, tr.INIT_STD, size=(d, d))))
    tr.register(params, "lstm.w_ih", nm.param(rng.normal(0, tr.INIT_STD, size=(2 * d, 4 * d))))
    tr.register(params, "lstm.w_hh", nm.param(rng.normal(0, tr.INIT_STD, size=(d, 4 * d))))
    tr.register(params, "lstm.b", nm.param(np.zeros(4 * d)))
    tr.register(params, "att_w", nm.param(rng.normal(0, tr.INIT_STD, size=(d, d))))
    tr.register(params, "out_rule.w", nm.param(rng.normal(0, tr.INIT_STD, size=(2 * d, sc.NUM_RULES))))
    tr.register(params, "out_rule.b", nm.param(np.zeros(sc.NUM_RULES)))
    tr.register(params, "out_col.w", nm.param(rng.normal(0, tr.INIT_STD, size=(2 * d, d))))
    tr.register(params, "out_tab.w", nm.param(rng.normal(0, tr.INIT_STD, size=(2 * d, d))))
    return ParserModel(vocab, cfg, params)


def joint_input(question_tokens: list[str], schema: sc.Schema, model: ParserModel) -> Tensor:
    """Embedded joint sequence: question tokens, then columns, then tables."""
    att = model.cfg.attention
    params = model.params
    nq = len(question_tokens)
    total = nq + len(schema.columns) + len(schema.tables)
    if total > att.max_positions:
        raise ValueError(f"joint sequence length {total} exceeds max positions {att.max_positions}")
    if nq == 0:
        raise ValueError("empty question")

    q_ids = model.vocab.encode(question_tokens)
    q = nm.add(nm.embedding(params["embed"], q_ids), nm.embedding(params["pos"], np.arange(nq)))
    q = nm.add(q, nm.embedding(params["seg"], np.full(nq, _SEG_QUESTION)))

    def item_rows(names, seg):
        rows = []
        for name in names:
            ids = model.vocab.encode(name_words(name))
            mean = nm.scale(nm.embedding(params["embed"], ids), 1.0 / len(ids))
            ones = nm.constant(np.ones((1, len(ids))))
            rows.append(nm.matmul(ones, mean))
        block = nm.concat(rows, axis=0)
        return nm.add(block, nm.embedding(params["seg"], np.full(len(names), seg)))

    cols = item_rows([c.name for c in schema.columns], _SEG_COLUMN)
    tabs = item_rows(list(schema.tables), _SEG_TABLE)
    return nm.concat([q, cols, tabs], axis=0)


def encode_joint(question_tokens: list[str], schema: sc.Schema, model: ParserModel,
                 relations: np.ndarray | None = None) -> Tensor:
    """Relation-aware encoding of the joint sequence (relations built if omitted)."""
    if relations is None:
        relations = build_relations(question_tokens, schema)
    x = joint_input(question_tokens, schema, model)
    return tr.run_encoder_stack(x, model.params, "enc", model.cfg.attention, relations=relations)


def _lstm_step(x: Tensor, h: Tensor, c: Tensor, params: dict[str, Tensor]):
    d = h.shape[1]
    gates = nm.add(nm.add(nm.matmul(x, params["lstm.w_ih"]), nm.matmul(h, params["lstm.w_hh"])),
                   params["lstm.b"])
    i = nm.sigmoid(nm.narrow(gates, 1, 0, d))
    f = nm.sigmoid(nm.narrow(gates, 1, d, d))
    g = nm.tanh(nm.narrow(gates, 1, 2 * d, d))
    o = nm.sigmoid(nm.narrow(gates, 1, 3 * d, d))
    c_new = nm.add(nm.mul(f, c), nm.mul(i, g))
    h_new = nm.mul(o, nm.tanh(c_new))
    return h_new, c_new


def _action_index(action: sc.Action, n_cols: int) -> int:
    if action.kind == sc.APPLY_RULE:
        return action.index
    if action.kind == sc.SELECT_COLUMN:
        return sc.NUM_RULES + action.index
    return sc.NUM_RULES + n_cols + action.index


def _index_action(idx: int, n_cols: int) -> sc.Action:
    if idx < sc.NUM_RULES:
        return sc.Action(sc.APPLY_RULE, idx)
    if idx < sc.NUM_RULES + n_cols:
        return sc.Action(sc.SELECT_COLUMN, idx - sc.NUM_RULES)
    return sc.Action(sc.SELECT_TABLE, idx - sc.NUM_RULES - n_cols)


class _DecoderRun:
    """Shared step machinery for greedy decoding and teacher-forced loss."""

    def __init__(self, enc: Tensor, schema: sc.Schema, model: ParserModel, nq: int):
        self.model = model
        self.schema = schema
        self.enc = enc
        self.params = model.params
        d = model.cfg.attention.hidden_dim
        self.n_cols = len(schema.columns)
        self.n_tabs = len(schema.tables)
        self.enc_cols = nm.narrow(enc, 0, nq, self.n_cols)
        self.enc_tabs = nm.narrow(enc, 0, nq + self.n_cols, self.n_tabs)
        self.h = nm.constant(np.zeros((1, d)))
        self.c = nm.constant(np.zeros((1, d)))
        self.prev = self.params["act_start"]
        self.state = sc.DerivationState(schema)

    def logits(self) -> Tensor:
        ctx_scores = nm.transpose(nm.matmul(self.enc, nm.transpose(nm.matmul(self.h, self.params["att_w"]))))
        ctx = nm.matmul(nm.softmax(ctx_scores), self.enc)
        x = nm.concat([self.prev, ctx], axis=1)
        self.h, self.c = _lstm_step(x, self.h, self.c, self.params)
        s = nm.concat([self.h, ctx], axis=1)
        rule_logits = nm.add(nm.matmul(s, self.params["out_rule.w"]), self.params["out_rule.b"])
        col_logits = nm.matmul(nm.matmul(s, self.params["out_col.w"]), nm.transpose(self.enc_cols))
        tab_logits = nm.matmul(nm.matmul(s, self.params["out_tab.w"]), nm.transpose(self.enc_tabs))
        return nm.concat([rule_logits, col_logits, tab_logits], axis=1)

    def mask_offsets(self) -> np.ndarray:
        size = sc.NUM_RULES + self.n_cols + self.n_tabs
        offsets = np.full((1, size), -1e30)
        for action in self.state.legal_actions():
            offsets[0, _action_index(action, self.n_cols)] = 0.0
        return offsets

    def advance(self, action: sc.Action) -> None:
        self.state.apply(action)
        if action.kind == sc.APPLY_RULE:
            self.prev = nm.narrow(self.params["act_rule"], 0, action.index, 1)
        elif action.kind == sc.SELECT_COLUMN:
            self.prev = nm.matmul(nm.narrow(self.enc_cols, 0, action.index, 1),
                                  self.params["act_col_w"])
        else:
            self.prev = nm.matmul(nm.narrow(self.enc_tabs, 0, action.index, 1),
                                  self.params["act_tab_w"])


def decode_actions(enc: Tensor, schema: sc.Schema, model: ParserModel, nq: int,
                   constrain: bool = True) -> list[sc.Action]:
    """Greedy action decoding; unconstrained decoding may raise DerivationError."""
    with nm.no_grad():
        run = _DecoderRun(enc, schema, model, nq)
        actions: list[sc.Action] = []
        for _ in range(model.cfg.step_cap):
            if run.state.finished:
                break
            logits = run.logits().data[0]
            if constrain:
                logits = logits + run.mask_offsets()[0]
            action = _index_action(int(np.argmax(logits)), run.n_cols)
            run.advance(action)  # raises DerivationError on an illegal pick
            actions.append(action)
        if not run.state.finished:
            raise sc.IncompleteDerivationError(
                f"step cap {model.cfg.step_cap} reached with frontier left",
                position=len(actions))
    return actions


def action_nll(enc: Tensor, schema: sc.Schema, model: ParserModel, nq: int,
               gold_actions: list[sc.Action]) -> Tensor:
    """Teacher-forced mean NLL of the gold derivation under the legal-action mask."""
    run = _DecoderRun(enc, schema, model, nq)
    step_losses = []
    for action in gold_actions:
        logits = nm.add(run.logits(), nm.constant(run.mask_offsets()))
        logp = nm.log_softmax(logits)
        idx = _action_index(action, run.n_cols)
        step_losses.append(nm.narrow(logp, 1, idx, 1))
        run.advance(action)
    return nm.neg(nm.mean_all(nm.concat(step_losses, axis=1)))


def parse(question, schema: sc.Schema, model: ParserModel) -> sc.SqlAst:
    """encode_joint -> constrained greedy decode -> delinearize."""
    tokens = sm.tokenize(question) if isinstance(question, str) else [t.lower() for t in question]
    enc = encode_joint(tokens, schema, model)
    actions = decode_actions(enc, schema, model, len(tokens), constrain=True)
    return sc.delinearize(actions, schema)


@dataclass(frozen=True)
class ParserTrainConfig:
    steps: int = 2000
    lr: float = 2e-3
    seed: int = 0


def _train_stage(pairs, model: ParserModel, opt, rng: np.random.Generator, steps: int) -> None:
    prepared = []
    for question, schema, gold_ast in pairs:
        tokens = sm.tokenize(question) if isinstance(question, str) else list(question)
        prepared.append((tokens, schema, sc.linearize(gold_ast, schema)))
    done = 0
    while done < steps:
        for i in rng.permutation(len(prepared)):
            if done >= steps:
                break
            tokens, schema, gold = prepared[i]
            loss = action_nll(encode_joint(tokens, schema, model), schema, model,
                              len(tokens), gold)
            opt.zero_grad()
            loss.backward()
            opt.step()
            done += 1


def train_parser(pairs, model: ParserModel, cfg: ParserTrainConfig,
                 finetune_pairs=(), finetune_steps: int = 0,
                 stop_check=None, check_every: int = 0) -> None:
    """Teacher-forced training: a warm-up corpus, then an optional fine-tune corpus.

    `stop_check()` (if given, with check_every > 0) can end a stage early,
    e.g. once a memorization probe hits its target.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("empty parser training set")
    opt = nm.Adam(model.params, cfg.lr)
    rng = np.random.default_rng(cfg.seed)

    def run_stage(stage_pairs, steps):
        if check_every and stop_check is not None:
            done = 0
            while done < steps:
                chunk = min(check_every, steps - done)
                _train_stage(stage_pairs, model, opt, rng, chunk)
                done += chunk
                if stop_check():
                    return
        else:
            _train_stage(stage_pairs, model, opt, rng, steps)

    run_stage(pairs, cfg.steps)
    finetune_pairs = list(finetune_pairs)
    if finetune_pairs and finetune_steps:
        run_stage(finetune_pairs, finetune_steps)


def exact_ast_accuracy(pairs, model: ParserModel) -> float:
    """Fraction of (question, schema, gold ast) pairs parsed to an equal AST."""
    hits = 0
    for question, schema, gold_ast in pairs:
        try:
            hits += sc.sql_equal(parse(question, schema, model), gold_ast, schema)
        except (sc.DerivationError, sc.SchemaError):
            pass
    return hits / len(pairs)

"""The closed-loop game between rewriter and simplifier.

One direction per sample: the starting agent beam-generates candidates, every
candidate is scored by token- and sentence-level rewards, the starting agent
takes one policy-gradient step on -sum(R * log p), and the closing agent takes
a reconstruction MLE step per candidate that passes its length gate
(simplifier only learns from candidates longer than the original; rewriter
only from candidates shorter than it).

Every sample produces one transcript entry (JSON-serializable) recording
candidates, reward traces, losses, and gate outcomes, so the gate invariants
are auditable offline.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from . import rewards as rw
from . import seqmodels as sm
from . import sqlcore as sc


@dataclass(frozen=True)
class DualConfig:
    beam_k: int = 2
    lam: float = 1.0
    policy_lr: float = 1e-4
    mle_lr: float = 1e-4
    epochs: int = 1
    schedule: str = "alternate"  # alternate | rewriter-only | simplifier-only
    seed: int = 0
    optimizer: str = "adam"
    policy_optimizer: str | None = None  # defaults to `optimizer`
    clip_norm: float = 1.0
    normalize_by_candidates: bool = False
    use_baseline: bool = False
    max_len: int = 48

    def __post_init__(self):
        if self.beam_k < 1:
            raise ValueError("beam width must be >= 1")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("discount must lie in [0, 1]")
        if self.schedule not in ("alternate", "rewriter-only", "simplifier-only"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    @property
    def policy_opt_kind(self) -> str:
        return self.policy_optimizer or self.optimizer


@dataclass(frozen=True)
class DualSample:
    schema_id: str
    history: tuple[str, ...]
    utterance: str
    gold_ast: sc.SqlAst


def dual_samples(dialogues, min_turn: int = 1) -> list[DualSample]:
    """(x, h) samples from dialogues; gold SQL is kept for the intent reward."""
    out = []
    for d in dialogues:
        history: list[str] = []
        for i, turn in enumerate(d.turns):
            if i + 1 >= min_turn:
                out.append(DualSample(d.schema_id, tuple(history), turn.utterance, turn.ast))
            history.append(turn.utterance)
    return out


@dataclass
class RewardContext:
    lm_c: sm.LanguageModel
    lm_s: sm.LanguageModel
    parser_model: object
    schemas: dict[str, sc.Schema]
    lexicon: rw.PronounLexicon = field(default_factory=rw.PronounLexicon.default)
    _indexes: dict[str, rw.SchemaTokenIndex] = field(default_factory=dict)

    def index_for(self, schema_id: str) -> rw.SchemaTokenIndex:
        if schema_id not in self._indexes:
            self._indexes[schema_id] = rw.SchemaTokenIndex.build(self.schemas[schema_id])
        return self._indexes[schema_id]


def _content_length(text: str) -> int:
    return len(sm.tokenize(text))


def _step_weights(candidate: sm.BeamCandidate, returns, baseline: float = 0.0) -> np.ndarray:
    """Per-generated-step weights: returns on content steps, 0 on the </s> step."""
    weights = np.zeros(len(candidate.token_ids))
    it = iter(returns)
    for pos, tok in enumerate(candidate.token_ids):
        if tok not in (sm.PAD, sm.START, sm.SEP):
            weights[pos] = next(it) - baseline
    return weights


def _policy_step(model: sm.Seq2Seq, src_ids, candidates, traces, cfg: DualConfig,
                 optimizer) -> tuple[float | None, bool]:
    """One policy-gradient step; skipped entirely when every return is zero."""
    baseline = 0.0
    if cfg.use_baseline:
        baseline = float(np.mean([t.sentence_reward for t in traces]))
    weight_vectors = [_step_weights(c, t.returns, baseline)
                      for c, t in zip(candidates, traces)]
    if all(np.all(w == 0.0) for w in weight_vectors):
        return None, True
    enc = model.encode_source(src_ids)
    total = None
    for cand, weights in zip(candidates, weight_vectors):
        logp = sm.sequence_logprobs(model, src_ids, cand.token_ids, src_enc=enc)
        term = nm.dot(logp, nm.constant(weights))
        total = term if total is None else nm.add(total, term)
    loss = nm.neg(total)
    if cfg.normalize_by_candidates:
        loss = nm.scale(loss, 1.0 / len(candidates))
    nm.zero_grads(model.params)
    loss.backward()
    nm.clip_grad_norm(model.params, cfg.clip_norm)
    optimizer.step()
    return loss.item(), False


def _mle_step(model: sm.Seq2Seq, history, source_text: str, target_text: str,
              cfg: DualConfig, optimizer) -> float:
    src = sm.format_input(list(history), source_text, model.vocab)
    loss = sm.nll(model, src, model.vocab.encode_text(target_text))
    nm.zero_grads(model.params)
    loss.backward()
    nm.clip_grad_norm(model.params, cfg.clip_norm)
    optimizer.step()
    return loss.item()


def _candidate_record(cand: sm.BeamCandidate, trace: rw.RewardTrace, vocab) -> dict:
    return {
        "tokens": cand.content_tokens(vocab),
        "finished": cand.finished,
        "step_logprobs": [round(v, 10) for v in cand.step_logprobs],
        "token_rewards": list(trace.token_rewards),
        "sentence_reward": trace.sentence_reward,
        "returns": list(trace.returns),
    }


def loop_rewriter_start(sample: DualSample, rewriter: sm.Seq2Seq, simplifier: sm.Seq2Seq,
                        ctx: RewardContext, cfg: DualConfig,
                        opt_policy=None, opt_mle=None) -> dict:
    """Rewriter generates, gets policy-gradient; simplifier reconstructs (gated)."""
    opt_policy = opt_policy or nm.make_optimizer(cfg.policy_opt_kind, rewriter.params,
                                                 cfg.policy_lr)
    opt_mle = opt_mle or nm.make_optimizer(cfg.optimizer, simplifier.params, cfg.mle_lr)
    schema = ctx.schemas[sample.schema_id]
    index = ctx.index_for(sample.schema_id)
    vocab = rewriter.vocab

    src = sm.format_input(list(sample.history), sample.utterance, vocab)
    candidates = sm.beam_generate(rewriter, src, cfg.beam_k, max_len=cfg.max_len)
    traces = []
    for cand in candidates:
        toks = cand.content_tokens(vocab)
        token_rs = [rw.token_reward_rewrite(t, sample.utterance, index, ctx.lexicon)
                    for t in toks]
        sent = rw.sentence_reward_rewrite(toks, ctx.lm_c, ctx.parser_model, schema,
                                          sample.gold_ast)
        traces.append(rw.RewardTrace.build(token_rs, sent, cfg.lam))

    policy_loss, skipped = _policy_step(rewriter, src, candidates, traces, cfg, opt_policy)

    x_len = _content_length(sample.utterance)
    mle_records = []
    for i, cand in enumerate(candidates):
        cand_len = len(cand.content_ids())
        applied = x_len < cand_len
        loss_val = None
        if applied:
            loss_val = _mle_step(simplifier, sample.history, cand.text(vocab),
                                 sample.utterance, cfg, opt_mle)
        mle_records.append({"candidate": i, "applied": applied,
                            "len_x": x_len, "len_candidate": cand_len, "loss": loss_val})

    return {
        "direction": "rewriter",
        "schema_id": sample.schema_id,
        "x": sample.utterance,
        "history": list(sample.history),
        "candidates": [_candidate_record(c, t, vocab) for c, t in zip(candidates, traces)],
        "policy_loss": policy_loss,
        "policy_skipped": skipped,
        "mle": mle_records,
    }


def loop_simplifier_start(sample: DualSample, rewriter: sm.Seq2Seq, simplifier: sm.Seq2Seq,
                          ctx: RewardContext, cfg: DualConfig,
                          opt_policy=None, opt_mle=None) -> dict:
    """Simplifier generates (LM-only sentence reward); rewriter reconstructs (gated)."""
    opt_policy = opt_policy or nm.make_optimizer(cfg.policy_opt_kind, simplifier.params,
                                                 cfg.policy_lr)
    opt_mle = opt_mle or nm.make_optimizer(cfg.optimizer, rewriter.params, cfg.mle_lr)
    index = ctx.index_for(sample.schema_id)
    vocab = simplifier.vocab

    src = sm.format_input(list(sample.history), sample.utterance, vocab)
    candidates = sm.beam_generate(simplifier, src, cfg.beam_k, max_len=cfg.max_len)
    traces = []
    for cand in candidates:
        toks = cand.content_tokens(vocab)
        token_rs = [rw.token_reward_simplify(t, sample.utterance, list(sample.history),
                                             index, ctx.lexicon) for t in toks]
        sent = rw.sentence_reward_simplify(toks, ctx.lm_s)
        traces.append(rw.RewardTrace.build(token_rs, sent, cfg.lam))

    policy_loss, skipped = _policy_step(simplifier, src, candidates, traces, cfg, opt_policy)

    x_len = _content_length(sample.utterance)
    mle_records = []
    for i, cand in enumerate(candidates):
        cand_len = len(cand.content_ids())
        applied = x_len > cand_len
        loss_val = None
        if applied:
            loss_val = _mle_step(rewriter, sample.history, cand.text(vocab),
                                 sample.utterance, cfg, opt_mle)
        mle_records.append({"candidate": i, "applied": applied,
                            "len_x": x_len, "len_candidate": cand_len, "loss": loss_val})

    return {
        "direction": "simplifier",
        "schema_id": sample.schema_id,
        "x": sample.utterance,
        "history": list(sample.history),
        "candidates": [_candidate_record(c, t, vocab) for c, t in zip(candidates, traces)],
        "policy_loss": policy_loss,
        "policy_skipped": skipped,
        "mle": mle_records,
    }


def dual_train(samples: list[DualSample], rewriter: sm.Seq2Seq, simplifier: sm.Seq2Seq,
               ctx: RewardContext, cfg: DualConfig,
               transcript_path=None) -> list[dict]:
    """Run the closed-loop game over the unlabeled samples; returns the transcript."""
    if not samples:
        raise ValueError("no unlabeled samples")
    opt_rew_policy = nm.make_optimizer(cfg.policy_opt_kind, rewriter.params, cfg.policy_lr)
    opt_rew_mle = nm.make_optimizer(cfg.optimizer, rewriter.params, cfg.mle_lr)
    opt_sim_policy = nm.make_optimizer(cfg.policy_opt_kind, simplifier.params, cfg.policy_lr)
    opt_sim_mle = nm.make_optimizer(cfg.optimizer, simplifier.params, cfg.mle_lr)
    rng = np.random.default_rng(cfg.seed)
    transcript: list[dict] = []
    counter = 0
    for _ in range(cfg.epochs):
        for i in rng.permutation(len(samples)):
            sample = samples[int(i)]
            if cfg.schedule == "rewriter-only":
                start_with_rewriter = True
            elif cfg.schedule == "simplifier-only":
                start_with_rewriter = False
            else:
                start_with_rewriter = counter % 2 == 0
            if start_with_rewriter:
                entry = loop_rewriter_start(sample, rewriter, simplifier, ctx, cfg,
                                            opt_rew_policy, opt_sim_mle)
            else:
                entry = loop_simplifier_start(sample, rewriter, simplifier, ctx, cfg,
                                              opt_sim_policy, opt_rew_mle)
            transcript.append(entry)
            counter += 1
    if transcript_path is not None:
        save_transcript(transcript_path, transcript)
    return transcript


def save_transcript(path, transcript: list[dict]) -> None:
    with open(path, "w") as fh:
        for entry in transcript:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


def load_transcript(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh]


def gate_violations(transcript: list[dict]) -> int:
    """Number of MLE updates recorded in violation of their length gate."""
    bad = 0
    for entry in transcript:
        for record in entry["mle"]:
            if not record["applied"]:
                continue
            if entry["direction"] == "rewriter":
                bad += not (record["len_x"] < record["len_candidate"])
            else:
                bad += not (record["len_x"] > record["len_candidate"])
    return bad


# ---------------------------------------------------------------------------
# Co-training baseline.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CoTrainConfig:
    iterations: int = 2
    epochs_per_iteration: int = 1
    lr: float = 1e-4
    seed: int = 0


def co_train(labeled_pairs, unlabeled_samples: list[DualSample], rewriter: sm.Seq2Seq,
             parser_model, schemas: dict[str, sc.Schema], cfg: CoTrainConfig) -> dict:
    """Iterative self-labeling filtered by parser equality against gold SQL."""
    labeled_pairs = list(labeled_pairs)
    info = {"iterations": []}
    opt = nm.Adam(rewriter.params, cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    for _ in range(cfg.iterations):
        kept = []
        for sample in unlabeled_samples:
            pseudo = sm.rewrite_text(rewriter, list(sample.history), sample.utterance)
            if not pseudo:
                continue
            schema = schemas[sample.schema_id]
            if rw.intent_reward(sm.tokenize(pseudo), parser_model, schema, sample.gold_ast):
                kept.append((list(sample.history), sample.utterance, pseudo))
        info["iterations"].append({"kept": len(kept), "pool": len(unlabeled_samples)})
        train_set = labeled_pairs + kept
        for _ in range(cfg.epochs_per_iteration):
            for i in rng.permutation(len(train_set)):
                history, utterance, target = train_set[int(i)]
                src = sm.format_input(list(history), utterance, rewriter.vocab)
                loss = sm.nll(rewriter, src, rewriter.vocab.encode_text(target))
                nm.zero_grads(rewriter.params)
                loss.backward()
                opt.step()
    return info

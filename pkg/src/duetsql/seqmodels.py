"""Rewriter, simplifier, and scoring language models.

Covers input formatting (history </s> ... </s> current), teacher-forced NLL,
beam-search generation with retained per-step log-probs, length-normalized LM
scoring, warm-up training of the rewriter/simplifier pair with a shared
encoder, and the two scoring LMs (complete-question LM and follow-up LM).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from . import transformer as tr
from .numerics import Tensor

PAD, UNK, START, SEP = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<unk>", "<s>", "</s>")

_TOKEN_RE = re.compile(r"[a-z0-9_']+|[^\sa-z0-9_']")


def tokenize(text: str) -> list[str]:
    """Lowercased whitespace tokens with punctuation detached."""
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    """Closed token<->id bijection with reserved PAD/UNK/START/SEP ids."""

    def __init__(self, tokens):
        self._tokens = list(SPECIAL_TOKENS) + [t for t in tokens if t not in SPECIAL_TOKENS]
        self._ids = {t: i for i, t in enumerate(self._tokens)}
        if len(self._ids) != len(self._tokens):
            raise ValueError("duplicate tokens in vocabulary")

    @classmethod
    def from_texts(cls, texts) -> "Vocabulary":
        seen = set()
        for text in texts:
            seen.update(tokenize(text))
        return cls(sorted(seen))

    def __len__(self):
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def id_of(self, token: str) -> int:
        return self._ids.get(token, UNK)

    def token_of(self, idx: int) -> str:
        return self._tokens[idx]

    def encode(self, tokens) -> list[int]:
        return [self._ids.get(t, UNK) for t in tokens]

    def encode_text(self, text: str) -> list[int]:
        return self.encode(tokenize(text))

    def decode(self, ids, skip_special: bool = True) -> list[str]:
        toks = [self._tokens[i] for i in ids]
        if skip_special:
            toks = [t for i, t in zip(ids, toks) if i not in (PAD, START, SEP)]
        return toks

    @property
    def tokens(self) -> list[str]:
        return list(self._tokens)


def format_input(history: list[str], current: str, vocab: Vocabulary) -> list[int]:
    """History turns then the current utterance, </s> between adjacent pieces."""
    if not tokenize(current):
        raise ValueError("current utterance is empty")
    ids: list[int] = []
    for piece in list(history) + [current]:
        if ids:
            ids.append(SEP)
        ids.extend(vocab.encode_text(piece))
    return ids


@dataclass(frozen=True)
class Seq2SeqConfig:
    attention: tr.AttentionConfig = field(default_factory=tr.AttentionConfig)
    max_gen_len: int = 64
    max_beam_width: int = 8
    length_normalize: bool = True


class Seq2Seq:
    """Encoder-decoder with a shared embedding table and named parameters."""

    def __init__(self, vocab: Vocabulary, cfg: Seq2SeqConfig, params: dict[str, Tensor]):
        self.vocab = vocab
        self.cfg = cfg
        self.params = params

    def encode_source(self, src_ids) -> Tensor:
        return tr.encode(src_ids, self.params, self.cfg.attention)

    def decoder_logits(self, dec_input_ids, src_enc: Tensor) -> Tensor:
        return tr.decoder_logits(dec_input_ids, src_enc, self.params, self.cfg.attention)


def _init_model_params(registry: dict[str, Tensor], prefix: str, vocab_size: int,
                       cfg: Seq2SeqConfig, rng: np.random.Generator,
                       shared: dict[str, Tensor] | None = None) -> dict[str, Tensor]:
    """Build a model's standard-name param dict, registering under `prefix`."""
    att = cfg.attention
    params: dict[str, Tensor] = {}
    if shared is None:
        shared = {}
        tr.register(registry, f"{prefix}.embed",
                    nm.param(rng.normal(0, tr.INIT_STD, size=(vocab_size, att.hidden_dim))))
        tr.register(registry, f"{prefix}.pos",
                    nm.param(rng.normal(0, tr.INIT_STD, size=(att.max_positions, att.hidden_dim))))
        enc: dict[str, Tensor] = {}
        tr.init_encoder(enc, "enc", att, rng)
        for name, t in enc.items():
            tr.register(registry, f"{prefix}.{name}", t)
        shared["embed"] = registry[f"{prefix}.embed"]
        shared["pos"] = registry[f"{prefix}.pos"]
        shared.update({name: registry[f"{prefix}.{name}"] for name in enc})
    params.update(shared)
    dec: dict[str, Tensor] = {}
    tr.init_decoder(dec, "dec", att, rng)
    for name, t in dec.items():
        tr.register(registry, f"{prefix}.{name}", t)
        params[name] = t
    out_w = nm.param(rng.normal(0, tr.INIT_STD, size=(att.hidden_dim, vocab_size)))
    out_b = nm.param(np.zeros(vocab_size))
    tr.register(registry, f"{prefix}.out.w", out_w)
    tr.register(registry, f"{prefix}.out.b", out_b)
    params["out.w"] = out_w
    params["out.b"] = out_b
    return params


def build_seq2seq(vocab: Vocabulary, cfg: Seq2SeqConfig, seed: int,
                  registry: dict[str, Tensor] | None = None, prefix: str = "model") -> Seq2Seq:
    registry = {} if registry is None else registry
    rng = np.random.default_rng(seed)
    params = _init_model_params(registry, prefix, len(vocab), cfg, rng)
    model = Seq2Seq(vocab, cfg, params)
    model.registry = registry
    return model


def build_rewrite_pair(vocab: Vocabulary, cfg: Seq2SeqConfig, seed: int,
                       share_encoder: bool = True):
    """Rewriter + simplifier; with share_encoder their encoder tensors are one set.

    Returns (rewriter, simplifier, registry) where registry is the canonical
    named-tensor dict covering both models exactly once.
    """
    registry: dict[str, Tensor] = {}
    rng = np.random.default_rng(seed)
    rew_params = _init_model_params(registry, "rewriter", len(vocab), cfg, rng)
    shared = None
    if share_encoder:
        shared = {name: t for name, t in rew_params.items()
                  if name == "embed" or name == "pos" or name.startswith("enc.")}
    sim_params = _init_model_params(registry, "simplifier", len(vocab), cfg, rng, shared=shared)
    rewriter = Seq2Seq(vocab, cfg, rew_params)
    simplifier = Seq2Seq(vocab, cfg, sim_params)
    rewriter.registry = registry
    simplifier.registry = registry
    return rewriter, simplifier, registry


# ---------------------------------------------------------------------------
# Losses and scoring.
# ---------------------------------------------------------------------------


def _check_target(target_ids) -> np.ndarray:
    target_ids = np.asarray(target_ids, dtype=np.intp)
    if target_ids.size == 0:
        raise ValueError("empty target")
    if (target_ids == PAD).any():
        raise ValueError("target contains PAD")
    return target_ids


def sequence_logprobs(model: Seq2Seq, source_ids, out_ids, src_enc: Tensor | None = None) -> Tensor:
    """Per-step log P(out_ids[j] | out_ids[<j], source) as a differentiable vector."""
    out_ids = np.asarray(out_ids, dtype=np.intp)
    if out_ids.size == 0:
        raise ValueError("empty output sequence")
    if src_enc is None:
        src_enc = model.encode_source(source_ids)
    dec_input = np.concatenate([[START], out_ids[:-1]])
    logits = model.decoder_logits(dec_input, src_enc)
    return nm.gather_rows(nm.log_softmax(logits), out_ids)


def nll(model: Seq2Seq, source_ids, target_ids) -> Tensor:
    """Mean NLL over the target tokens plus the closing </s>."""
    target_ids = _check_target(target_ids)
    full = np.concatenate([target_ids, [SEP]])
    return nm.neg(nm.mean_all(sequence_logprobs(model, source_ids, full)))


@dataclass(frozen=True)
class BeamCandidate:
    """One beam hypothesis; token_ids includes the closing </s> when finished."""

    token_ids: tuple[int, ...]
    step_logprobs: tuple[float, ...]
    raw_score: float
    score: float
    finished: bool

    def content_ids(self) -> list[int]:
        return [i for i in self.token_ids if i not in (PAD, START, SEP)]

    def content_tokens(self, vocab: Vocabulary) -> list[str]:
        return [vocab.token_of(i) for i in self.content_ids()]

    def text(self, vocab: Vocabulary) -> str:
        return " ".join(self.content_tokens(vocab))


def beam_generate(model: Seq2Seq, source_ids, k: int, max_len: int | None = None,
                  length_normalize: bool | None = None) -> list[BeamCandidate]:
    """Standard beam search; per-step log-probs are kept for reward weighting."""
    if k < 1:
        raise ValueError("beam width must be >= 1")
    if k > model.cfg.max_beam_width:
        raise ValueError(f"beam width {k} exceeds configured limit {model.cfg.max_beam_width}")
    max_len = model.cfg.max_gen_len if max_len is None else max_len
    normalize = model.cfg.length_normalize if length_normalize is None else length_normalize

    with nm.no_grad():
        src_enc = model.encode_source(source_ids)
        alive: list[tuple[tuple[int, ...], tuple[float, ...], float]] = [((), (), 0.0)]
        finished: list[BeamCandidate] = []

        def rank_score(raw: float, steps: int) -> float:
            return raw / steps if normalize and steps else raw

        for _ in range(max_len):
            if not alive or len(finished) >= k:
                break
            proposals = []
            for ids, lps, raw in alive:
                dec_input = np.concatenate([[START], np.asarray(ids, dtype=np.intp)])
                logits = model.decoder_logits(dec_input, src_enc)
                last = logits.data[-1]
                m = last.max()
                logp = last - m - np.log(np.exp(last - m).sum())
                # structural tokens are never expanded, but stored log-probs
                # stay the model's own (decode_step re-evaluation matches)
                banned = {PAD, START} | ({SEP} if not ids else set())
                for tok in range(len(logp)):
                    if tok not in banned:
                        proposals.append((ids + (tok,), lps + (float(logp[tok]),),
                                          raw + float(logp[tok])))
            proposals.sort(key=lambda c: (-c[2], c[0]))
            alive = []
            for ids, lps, raw in proposals[:k]:
                if ids[-1] == SEP:
                    finished.append(BeamCandidate(ids, lps, raw, rank_score(raw, len(lps)), True))
                else:
                    alive.append((ids, lps, raw))

        pool = finished + [BeamCandidate(ids, lps, raw, rank_score(raw, len(lps)), False)
                           for ids, lps, raw in alive]
    pool.sort(key=lambda c: (-c.score, c.token_ids))
    return pool[:k]


def greedy_generate(model: Seq2Seq, source_ids, max_len: int | None = None) -> BeamCandidate:
    return beam_generate(model, source_ids, k=1, max_len=max_len)[0]


def rewrite_text(model: Seq2Seq, history: list[str], current: str) -> str:
    """Greedy rewrite of one turn, as text."""
    src = format_input(history, current, model.vocab)
    return greedy_generate(model, src).text(model.vocab)


# ---------------------------------------------------------------------------
# Language models (decoder-only, causal).
# ---------------------------------------------------------------------------


class LanguageModel:
    def __init__(self, vocab: Vocabulary, cfg: Seq2SeqConfig, params: dict[str, Tensor]):
        self.vocab = vocab
        self.cfg = cfg
        self.params = params

    def logprob_steps(self, ids) -> Tensor:
        ids = np.asarray(ids, dtype=np.intp)
        dec_input = np.concatenate([[START], ids[:-1]])
        logits = tr.decoder_logits(dec_input, None, self.params, self.cfg.attention, prefix="lm")
        return nm.gather_rows(nm.log_softmax(logits), ids)


def build_lm(vocab: Vocabulary, cfg: Seq2SeqConfig, seed: int) -> LanguageModel:
    rng = np.random.default_rng(seed)
    att = cfg.attention
    params: dict[str, Tensor] = {}
    tr.register(params, "embed", nm.param(rng.normal(0, tr.INIT_STD, size=(len(vocab), att.hidden_dim))))
    tr.register(params, "pos", nm.param(rng.normal(0, tr.INIT_STD, size=(att.max_positions, att.hidden_dim))))
    tr.init_encoder(params, "lm", att, rng)
    tr.register(params, "out.w", nm.param(rng.normal(0, tr.INIT_STD, size=(att.hidden_dim, len(vocab)))))
    tr.register(params, "out.b", nm.param(np.zeros(len(vocab))))
    return LanguageModel(vocab, cfg, params)


def lm_score(lm: LanguageModel, tokens) -> float:
    """Mean autoregressive log-probability per token; always <= 0."""
    if isinstance(tokens, str):
        tokens = tokenize(tokens)
    tokens = list(tokens)
    if not tokens:
        raise ValueError("cannot score an empty sequence")
    ids = tokens if isinstance(tokens[0], (int, np.integer)) else lm.vocab.encode(tokens)
    with nm.no_grad():
        steps = lm.logprob_steps(ids)
    return float(steps.data.sum()) / len(ids)


def train_lm(lm: LanguageModel, texts: list[str], epochs: int, lr: float, seed: int) -> None:
    opt = nm.Adam(lm.params, lr)
    rng = np.random.default_rng(seed)
    encoded = [lm.vocab.encode_text(t) for t in texts]
    encoded = [ids for ids in encoded if ids]
    for _ in range(epochs):
        for i in rng.permutation(len(encoded)):
            ids = np.concatenate([encoded[i], [SEP]])
            loss = nm.neg(nm.mean_all(lm.logprob_steps(ids)))
            opt.zero_grad()
            loss.backward()
            opt.step()


@dataclass(frozen=True)
class LmTrainConfig:
    epochs: int = 3
    lr: float = 1e-3
    seed: int = 0


def train_lms(corpus, vocab: Vocabulary, cfg: Seq2SeqConfig,
              train_cfg: LmTrainConfig = LmTrainConfig()):
    """Train (LM_c, LM_s): complete questions vs turn>=2 utterances.

    `corpus` is a list of dialogues; turns whose gold rewrite is hidden (None)
    contribute only to the follow-up LM.
    """
    complete = [t.gold_rewrite for d in corpus for t in d.turns if t.gold_rewrite is not None]
    followups = [t.utterance for d in corpus for t in d.turns[1:]]
    if not complete:
        raise ValueError("corpus has no visible gold rewrites for the complete-question LM")
    if not followups:
        raise ValueError("corpus has no multi-turn dialogues for the follow-up LM")
    lm_c = build_lm(vocab, cfg, train_cfg.seed)
    lm_s = build_lm(vocab, cfg, train_cfg.seed + 1)
    train_lm(lm_c, complete, train_cfg.epochs, train_cfg.lr, train_cfg.seed)
    train_lm(lm_s, followups, train_cfg.epochs, train_cfg.lr, train_cfg.seed + 1)
    return lm_c, lm_s


# ---------------------------------------------------------------------------
# Warm-up training of the rewriter/simplifier pair.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WarmupConfig:
    epochs: int = 3
    lr: float = 1e-3
    seed: int = 0


def warmup_train(rewriter: Seq2Seq, simplifier: Seq2Seq, labeled_pairs,
                 cfg: WarmupConfig = WarmupConfig(),
                 registry: dict[str, Tensor] | None = None) -> None:
    """Supervised warm-up on (history, utterance, rewrite) triples.

    The rewriter learns (history; utterance) -> rewrite and the simplifier
    learns (history; rewrite) -> utterance, updating the shared encoder
    through both directions.
    """
    labeled_pairs = list(labeled_pairs)
    if not labeled_pairs:
        raise ValueError("empty warm-up dataset")
    if registry is None:
        registry = getattr(rewriter, "registry", None)
    if registry is None:
        registry = {f"rewriter.{k}": v for k, v in rewriter.params.items()}
        for k, v in simplifier.params.items():
            if not any(v is t for t in registry.values()):
                registry[f"simplifier.{k}"] = v
    opt = nm.Adam(registry, cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    vocab = rewriter.vocab
    for _ in range(cfg.epochs):
        for i in rng.permutation(len(labeled_pairs)):
            history, utterance, gold_rewrite = labeled_pairs[i]
            src = format_input(history, utterance, vocab)
            loss = nll(rewriter, src, vocab.encode_text(gold_rewrite))
            opt.zero_grad()
            loss.backward()
            opt.step()

            src = format_input(history, gold_rewrite, vocab)
            loss = nll(simplifier, src, vocab.encode_text(utterance))
            opt.zero_grad()
            loss.backward()
            opt.step()

"""Experiment orchestration: stages, checkpoints, evaluation, ablation ladder.

Everything here is a deterministic function of (config, seed): corpora are
regenerated byte-identically, splits are derived from the corpus seed, and
training stages write versioned checkpoints plus a run manifest. The CLI is a
thin wrapper over these functions.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import os
import time
from dataclasses import dataclass, field, fields, replace

from . import checkpoint as ck
from . import corpus as cp
from . import duallearning as dl
from . import metrics as mt
from . import parser as ps
from . import rewards as rw
from . import seqmodels as sm
from . import sqlcore as sc
from . import transformer as tr


class ConfigError(ValueError):
    """Bad configuration or config file."""


class DependencyError(RuntimeError):
    """A required earlier stage has not produced its artifact."""


class DataError(RuntimeError):
    """Missing, corrupt, or would-be-clobbered data files."""


@dataclass(frozen=True)
class ExperimentConfig:
    out_dir: str = "runs/default"
    seed: int = 0
    seeds: tuple[int, ...] = (0, 1, 2)

    # benchmark corpus
    corpus_seed: int = 13
    n_schemas: int = 20
    dialogues_per_schema: int = 30
    n_tables: int = 2
    cols_per_table: int = 3
    p_four_turns: float = 0.35
    dev_fraction: float = 0.15
    labeled_fraction: float = 0.10

    # auxiliary out-of-domain corpora: a convention-shifted single-turn corpus
    # that warms up the parser, and an alternate-style multi-turn rewrite
    # corpus that pretrains the rewriter/simplifier pair (the no-rewrite-labels
    # ablation trains on it alone)
    aux_n_schemas: int = 12
    parser_aux_per_schema: int = 250
    rewrite_aux_dialogues_per_schema: int = 100

    # model dims (smaller than the library defaults so the ladder stays fast)
    hidden_dim: int = 32
    num_heads: int = 2
    num_layers: int = 1
    ffn_dim: int = 64
    max_positions: int = 192
    max_gen_len: int = 48

    # stages
    lm_epochs: int = 2
    lm_lr: float = 1e-3
    pretrain_epochs: int = 15
    warmup_epochs: int = 30
    warmup_lr: float = 1e-3
    share_encoder: bool = True
    parser_warmup_steps: int = 6000
    parser_finetune_steps: int = 4000
    parser_lr: float = 2e-3
    parser_use_model_rewrites: bool = True
    dual_beam_k: int = 2
    dual_lambda: float = 1.0
    dual_policy_lr: float = 1e-4
    dual_mle_lr: float = 1e-4
    dual_epochs: int = 2
    dual_schedule: str = "alternate"
    dual_clip_norm: float = 1.0
    # candidate returns are centered by the mean sentence reward: at this scale
    # raw LM-score returns are uniformly negative and REINFORCE collapses
    dual_use_baseline: bool = True
    cotrain_iterations: int = 2
    cotrain_lr: float = 1e-4
    # rows (3)/(4) of the ladder rerun dual learning with a weaker parser;
    # capping their sample pool keeps the full ladder inside its time budget
    ablate_aux_dual_samples: int = 600


_SECTION_FOR = {
    "out_dir": "run", "seed": "run", "seeds": "run",
    "corpus_seed": "corpus", "n_schemas": "corpus", "dialogues_per_schema": "corpus",
    "n_tables": "corpus", "cols_per_table": "corpus", "p_four_turns": "corpus",
    "dev_fraction": "corpus", "labeled_fraction": "corpus",
    "aux_n_schemas": "corpus", "parser_aux_per_schema": "corpus",
    "rewrite_aux_dialogues_per_schema": "corpus",
    "hidden_dim": "models", "num_heads": "models", "num_layers": "models",
    "ffn_dim": "models", "max_positions": "models", "max_gen_len": "models",
    "lm_epochs": "lms", "lm_lr": "lms",
    "pretrain_epochs": "warmup", "warmup_epochs": "warmup", "warmup_lr": "warmup",
    "share_encoder": "warmup",
    "parser_warmup_steps": "parser", "parser_finetune_steps": "parser",
    "parser_lr": "parser", "parser_use_model_rewrites": "parser",
    "dual_beam_k": "dual", "dual_lambda": "dual", "dual_policy_lr": "dual",
    "dual_mle_lr": "dual", "dual_epochs": "dual", "dual_schedule": "dual",
    "dual_clip_norm": "dual", "dual_use_baseline": "dual",
    "cotrain_iterations": "cotrain", "cotrain_lr": "cotrain",
    "ablate_aux_dual_samples": "ablate",
}


def _parse_value(text: str, target_type):
    text = text.strip()
    if target_type is int:
        return int(text)
    if target_type is float:
        return float(text)
    if target_type is bool:
        if text.lower() in ("true", "yes", "1"):
            return True
        if text.lower() in ("false", "no", "0"):
            return False
        raise ConfigError(f"not a boolean: {text!r}")
    if target_type is str:
        return text
    if target_type is tuple or "tuple" in str(target_type):
        return tuple(int(v) for v in text.replace(",", " ").split())
    raise ConfigError(f"unsupported config type {target_type}")


def load_config(path=None, seed_override: int | None = None,
                out_override: str | None = None) -> ExperimentConfig:
    """Defaults, optionally overlaid by an INI file and env/CLI overrides."""
    values: dict = {}
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        parsed = configparser.ConfigParser()
        try:
            parsed.read(path)
        except configparser.Error as err:
            raise ConfigError(f"cannot parse config: {err}") from err
        by_field = {f.name: f for f in fields(ExperimentConfig)}
        for section in parsed.sections():
            for key, raw in parsed.items(section):
                if key not in by_field:
                    raise ConfigError(f"unknown config key {key!r} in [{section}]")
                if _SECTION_FOR[key] != section:
                    raise ConfigError(f"key {key!r} belongs in [{_SECTION_FOR[key]}]")
                values[key] = _parse_value(raw, by_field[key].type if isinstance(by_field[key].type, type) else
                                           {"int": int, "float": float, "bool": bool, "str": str,
                                            "tuple[int, ...]": tuple}[str(by_field[key].type)])
    if "DUETSQL_SEED" in os.environ:
        values["seed"] = int(os.environ["DUETSQL_SEED"])
    if "DUETSQL_OUT" in os.environ:
        values["out_dir"] = os.environ["DUETSQL_OUT"]
    if seed_override is not None:
        values["seed"] = seed_override
    if out_override is not None:
        values["out_dir"] = out_override
    try:
        cfg = ExperimentConfig(**values)
    except TypeError as err:
        raise ConfigError(str(err)) from err
    _validate_config(cfg)
    return cfg


def _validate_config(cfg: ExperimentConfig) -> None:
    if not 0.0 < cfg.labeled_fraction < 1.0:
        raise ConfigError("labeled_fraction must lie in (0, 1)")
    if not 0.0 < cfg.dev_fraction < 1.0:
        raise ConfigError("dev_fraction must lie in (0, 1)")
    if cfg.hidden_dim % cfg.num_heads:
        raise ConfigError("hidden_dim must be divisible by num_heads")
    if cfg.dual_beam_k < 1:
        raise ConfigError("dual_beam_k must be >= 1")


def config_dict(cfg: ExperimentConfig) -> dict:
    out = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


# ---------------------------------------------------------------------------
# Paths and manifests.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Paths:
    root: str

    def __post_init__(self):
        os.makedirs(os.path.join(self.root, "checkpoints"), exist_ok=True)
        os.makedirs(os.path.join(self.root, "reports"), exist_ok=True)
        os.makedirs(os.path.join(self.root, "transcripts"), exist_ok=True)

    @property
    def corpus(self):
        return os.path.join(self.root, "corpus.jsonl")

    @property
    def schemas(self):
        return os.path.join(self.root, "schemas.json")

    @property
    def aux_schemas(self):
        return os.path.join(self.root, "aux_schemas.json")

    @property
    def parser_aux(self):
        return os.path.join(self.root, "parser_aux.jsonl")

    @property
    def rewrite_aux(self):
        return os.path.join(self.root, "rewrite_aux.jsonl")

    def ckpt(self, name: str, seed: int):
        return os.path.join(self.root, "checkpoints", f"{name}_seed{seed}.ckpt")

    def transcript(self, name: str, seed: int):
        return os.path.join(self.root, "transcripts", f"{name}_seed{seed}.jsonl")

    def report(self, name: str):
        return os.path.join(self.root, "reports", name)

    def manifest(self, name: str):
        return os.path.join(self.root, f"manifest_{name}.json")


def paths_for(cfg: ExperimentConfig) -> Paths:
    return Paths(cfg.out_dir)


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(paths: Paths, name: str, cfg: ExperimentConfig, artifacts: list,
                   timings: dict, metrics: dict | None = None) -> str:
    doc = {
        "command": name,
        "config": config_dict(cfg),
        "artifacts": {os.path.relpath(p, paths.root): _sha256(p) for p in artifacts},
        "timings": {k: round(v, 3) for k, v in timings.items()},
        "metrics": metrics or {},
    }
    path = paths.manifest(name)
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return path


def _refuse_overwrite(path, force: bool) -> None:
    if os.path.exists(path) and not force:
        raise DataError(f"{path} exists; pass --force to overwrite")


def _require(path, stage: str):
    if not os.path.exists(path):
        raise DependencyError(f"missing artifact {path}; run `duetsql {stage}` first")
    return path


# ---------------------------------------------------------------------------
# Benchmark assembly.
# ---------------------------------------------------------------------------


# conversational corpora are dominated by co-reference; substitution and
# continuation ellipses are the smaller slice
DEFAULT_PHENOMENON_WEIGHTS = {
    "DEMONSTRATIVE_PRONOUN": 1.6,
    "POSSESSIVE_DETERMINER": 1.6,
    "DEFINITE_NOUN_PHRASE": 1.4,
    "ONE_ANAPHORA": 1.2,
    "BRIDGING_ANAPHORA": 0.8,
    "SUBST_IMPLICIT_SCHEMA": 1.2,
    "SUBST_IMPLICIT_OPERATOR": 1.2,
    "SUBST_EXPLICIT_SCHEMA": 0.7,
    "SUBST_EXPLICIT_OPERATOR": 0.7,
    "CONTINUATION": 0.6,
}


def corpus_config(cfg: ExperimentConfig) -> cp.CorpusConfig:
    return cp.CorpusConfig(
        n_schemas=cfg.n_schemas, dialogues_per_schema=cfg.dialogues_per_schema,
        n_tables=cfg.n_tables, cols_per_table=cfg.cols_per_table,
        p_four_turns=cfg.p_four_turns, seed=cfg.corpus_seed,
        style="main", convention=cp.CONVENTION_GROUP_IN_SELECT,
        phenomenon_weights=DEFAULT_PHENOMENON_WEIGHTS)


def parser_aux_config(cfg: ExperimentConfig) -> cp.CorpusConfig:
    """Single-turn parser warm-up corpus: same wording, shifted GROUP BY convention."""
    return cp.CorpusConfig(
        n_schemas=cfg.aux_n_schemas, dialogues_per_schema=cfg.parser_aux_per_schema,
        n_tables=cfg.n_tables, cols_per_table=cfg.cols_per_table,
        seed=cfg.corpus_seed + 101, style="main",
        convention=cp.CONVENTION_GROUP_PLAIN, bank_offset=11, single_turn=True)


def rewrite_aux_config(cfg: ExperimentConfig) -> cp.CorpusConfig:
    """Multi-turn rewrite pretraining corpus: other schemas, alternate wording."""
    return cp.CorpusConfig(
        n_schemas=cfg.aux_n_schemas,
        dialogues_per_schema=cfg.rewrite_aux_dialogues_per_schema,
        n_tables=cfg.n_tables, cols_per_table=cfg.cols_per_table,
        p_four_turns=cfg.p_four_turns, seed=cfg.corpus_seed + 101,
        style="alt", convention=cp.CONVENTION_GROUP_PLAIN, bank_offset=11)


@dataclass
class Benchmark:
    schemas: dict[str, sc.Schema]
    train: list[cp.ToyDialogue]
    dev: list[cp.ToyDialogue]
    labeled: list[cp.ToyDialogue]
    unlabeled: list[cp.ToyDialogue]
    aux_schemas: dict[str, sc.Schema]
    parser_aux: list[cp.ToyDialogue]
    rewrite_aux: list[cp.ToyDialogue]
    vocab: sm.Vocabulary


def partition(dialogues: list, fraction_first: float, seed) -> tuple[list, list]:
    """Dialogue-level partition with nothing hidden (train/dev separation)."""
    import numpy as np
    if not 0.0 < fraction_first < 1.0:
        raise ConfigError("partition fraction must lie in (0, 1)")
    order = np.random.default_rng(seed).permutation(len(dialogues))
    n_first = int(round(fraction_first * len(dialogues)))
    first = [dialogues[i] for i in sorted(int(j) for j in order[:n_first])]
    second = [dialogues[i] for i in sorted(int(j) for j in order[n_first:])]
    return first, second


def _schema_texts(schemas: dict[str, sc.Schema]) -> list[str]:
    texts = []
    for sid in sorted(schemas):
        schema = schemas[sid]
        texts.extend(t.replace("_", " ") for t in schema.tables)
        texts.extend(c.name.replace("_", " ") for c in schema.columns)
        for vals in schema.values.values():
            texts.extend(vals)
    return texts


def load_benchmark(cfg: ExperimentConfig) -> Benchmark:
    paths = paths_for(cfg)
    _require(paths.corpus, "corpus")
    schemas = sc.load_schemas(paths.schemas)
    dialogues = cp.load_corpus(paths.corpus, schemas)
    aux_schemas = sc.load_schemas(paths.aux_schemas)
    parser_aux = cp.load_corpus(paths.parser_aux, aux_schemas)
    rewrite_aux = cp.load_corpus(paths.rewrite_aux, aux_schemas)

    train, dev = partition(dialogues, 1.0 - cfg.dev_fraction, (cfg.corpus_seed, 1))
    labeled, unlabeled = cp.split(train, cfg.labeled_fraction, (cfg.corpus_seed, 2))

    texts = (cp.corpus_texts(dialogues) + cp.corpus_texts(parser_aux)
             + cp.corpus_texts(rewrite_aux)
             + _schema_texts(schemas) + _schema_texts(aux_schemas)
             + ["those", "their", "them", "one", "also", "instead", "about", "what"])
    vocab = sm.Vocabulary.from_texts(texts)
    return Benchmark(schemas, train, dev, labeled, unlabeled,
                     aux_schemas, parser_aux, rewrite_aux, vocab)


def attention_config(cfg: ExperimentConfig) -> tr.AttentionConfig:
    return tr.AttentionConfig(num_heads=cfg.num_heads, hidden_dim=cfg.hidden_dim,
                              num_layers=cfg.num_layers, ffn_dim=cfg.ffn_dim,
                              max_positions=cfg.max_positions)


def seq2seq_config(cfg: ExperimentConfig) -> sm.Seq2SeqConfig:
    return sm.Seq2SeqConfig(attention=attention_config(cfg), max_gen_len=cfg.max_gen_len)


def dual_config(cfg: ExperimentConfig, seed: int) -> dl.DualConfig:
    return dl.DualConfig(beam_k=cfg.dual_beam_k, lam=cfg.dual_lambda,
                         policy_lr=cfg.dual_policy_lr, mle_lr=cfg.dual_mle_lr,
                         epochs=cfg.dual_epochs, schedule=cfg.dual_schedule,
                         seed=seed, clip_norm=cfg.dual_clip_norm,
                         use_baseline=cfg.dual_use_baseline,
                         max_len=cfg.max_gen_len)


def rewrite_pairs(dialogues: list[cp.ToyDialogue]) -> list:
    pairs = []
    for _, _, turn, history in cp.iter_turns(dialogues):
        if turn.gold_rewrite is not None:
            pairs.append((history, turn.utterance, turn.gold_rewrite))
    return pairs


def single_turn_pairs(dialogues: list[cp.ToyDialogue], schemas: dict) -> list:
    return [(turn.gold_rewrite, schemas[d.schema_id], turn.ast)
            for d, _, turn, _ in cp.iter_turns(dialogues) if turn.gold_rewrite is not None]


def concat_pairs(dialogues: list[cp.ToyDialogue], schemas: dict) -> list:
    """(history + utterance, schema, ast) pairs for the no-rewriter baseline."""
    return [(" ".join(history + [turn.utterance]), schemas[d.schema_id], turn.ast)
            for d, _, turn, history in cp.iter_turns(dialogues)]


# ---------------------------------------------------------------------------
# Checkpoint helpers.
# ---------------------------------------------------------------------------


def _model_manifest(kind: str, cfg: ExperimentConfig, vocab: sm.Vocabulary, seed: int,
                    step_count: int, flags: dict | None = None) -> dict:
    return {
        "kind": kind,
        "model": {"hidden_dim": cfg.hidden_dim, "num_heads": cfg.num_heads,
                  "num_layers": cfg.num_layers, "ffn_dim": cfg.ffn_dim,
                  "max_positions": cfg.max_positions, "max_gen_len": cfg.max_gen_len},
        "vocab": vocab.tokens,
        "seed": seed,
        "step_count": step_count,
        "flags": flags or {},
    }


def _config_from_manifest(manifest: dict) -> sm.Seq2SeqConfig:
    m = manifest["model"]
    att = tr.AttentionConfig(num_heads=m["num_heads"], hidden_dim=m["hidden_dim"],
                             num_layers=m["num_layers"], ffn_dim=m["ffn_dim"],
                             max_positions=m["max_positions"])
    return sm.Seq2SeqConfig(attention=att, max_gen_len=m["max_gen_len"])


def save_pair_checkpoint(path, registry, kind, cfg, vocab, seed, steps, flags=None):
    ck.save_checkpoint(path, _model_manifest(kind, cfg, vocab, seed, steps, flags), registry)


def load_pair_checkpoint(path):
    manifest, tensors = ck.load_checkpoint(_require(path, "train warmup"))
    vocab = sm.Vocabulary(manifest["vocab"][len(sm.SPECIAL_TOKENS):])
    s2s = _config_from_manifest(manifest)
    share = manifest["flags"].get("share_encoder", True)
    rewriter, simplifier, registry = sm.build_rewrite_pair(vocab, s2s, seed=0,
                                                           share_encoder=share)
    ck.restore_into(registry, tensors)
    return rewriter, simplifier, registry, manifest


def save_parser_checkpoint(path, model: ps.ParserModel, cfg, seed, steps):
    manifest = _model_manifest("parser", cfg, model.vocab, seed, steps)
    manifest["grammar_version"] = sc.GRAMMAR_VERSION
    ck.save_checkpoint(path, manifest, model.params)


def load_parser_checkpoint(path) -> ps.ParserModel:
    manifest, tensors = ck.load_checkpoint(_require(path, "train parser"))
    if manifest.get("grammar_version") != sc.GRAMMAR_VERSION:
        raise ck.CheckpointError(
            f"checkpoint grammar version {manifest.get('grammar_version')!r} "
            f"does not match this build ({sc.GRAMMAR_VERSION})")
    vocab = sm.Vocabulary(manifest["vocab"][len(sm.SPECIAL_TOKENS):])
    model = ps.build_parser(vocab, ps.ParserConfig(attention=_config_from_manifest(manifest).attention),
                            seed=0)
    ck.restore_into(model.params, tensors)
    return model


def save_lm_checkpoint(path, lm: sm.LanguageModel, cfg, seed):
    ck.save_checkpoint(path, _model_manifest("lm", cfg, lm.vocab, seed, 0), lm.params)


def load_lm_checkpoint(path) -> sm.LanguageModel:
    manifest, tensors = ck.load_checkpoint(_require(path, "train lms"))
    vocab = sm.Vocabulary(manifest["vocab"][len(sm.SPECIAL_TOKENS):])
    lm = sm.build_lm(vocab, _config_from_manifest(manifest), seed=0)
    ck.restore_into(lm.params, tensors)
    return lm


# ---------------------------------------------------------------------------
# Stages.
# ---------------------------------------------------------------------------


def stage_corpus(cfg: ExperimentConfig, force: bool = False) -> dict:
    paths = paths_for(cfg)
    outputs = (paths.corpus, paths.schemas, paths.aux_schemas,
               paths.parser_aux, paths.rewrite_aux)
    for p in outputs:
        _refuse_overwrite(p, force)
    t0 = time.time()
    schemas, dialogues = cp.gen_corpus(corpus_config(cfg))
    aux_schemas, parser_aux = cp.gen_corpus(parser_aux_config(cfg))
    _, rewrite_aux = cp.gen_corpus(rewrite_aux_config(cfg), schemas=aux_schemas)
    sc.save_schemas(paths.schemas, schemas)
    cp.save_corpus(paths.corpus, dialogues)
    sc.save_schemas(paths.aux_schemas, aux_schemas)
    cp.save_corpus(paths.parser_aux, parser_aux)
    cp.save_corpus(paths.rewrite_aux, rewrite_aux)
    n_turns = sum(len(d.turns) for d in dialogues)
    metrics = {"dialogues": len(dialogues), "turns": n_turns,
               "parser_aux_turns": sum(len(d.turns) for d in parser_aux),
               "rewrite_aux_turns": sum(len(d.turns) for d in rewrite_aux)}
    write_manifest(paths, "corpus", cfg, list(outputs),
                   {"corpus": time.time() - t0}, metrics)
    return metrics


def stage_lms(cfg: ExperimentConfig, seed: int | None = None, force: bool = False):
    paths = paths_for(cfg)
    seed = cfg.seed if seed is None else seed
    bench = load_benchmark(cfg)
    out_c, out_s = paths.ckpt("lm_c", seed), paths.ckpt("lm_s", seed)
    _refuse_overwrite(out_c, force)
    _refuse_overwrite(out_s, force)
    t0 = time.time()
    lm_corpus = bench.labeled + bench.unlabeled
    lm_c, lm_s = sm.train_lms(lm_corpus, bench.vocab, seq2seq_config(cfg),
                              sm.LmTrainConfig(epochs=cfg.lm_epochs, lr=cfg.lm_lr, seed=seed))
    save_lm_checkpoint(out_c, lm_c, cfg, seed)
    save_lm_checkpoint(out_s, lm_s, cfg, seed)
    write_manifest(paths, f"train-lms-seed{seed}", cfg, [out_c, out_s],
                   {"lms": time.time() - t0})
    return out_c, out_s


def stage_warmup(cfg: ExperimentConfig, seed: int | None = None, ood: bool = False,
                 force: bool = False) -> str:
    """Pretrain the pair on the auxiliary rewrite corpus, then warm up on the
    labeled split. ood=True skips the in-domain phase entirely (the
    no-rewrite-labels ablation keeps only the out-of-domain supervision)."""
    paths = paths_for(cfg)
    seed = cfg.seed if seed is None else seed
    bench = load_benchmark(cfg)
    name = "warmup_ood" if ood else "warmup"
    out = paths.ckpt(name, seed)
    _refuse_overwrite(out, force)
    t0 = time.time()
    base = paths.ckpt("warmup_ood", seed)
    steps = 0
    if not ood and os.path.exists(base):
        # reuse the cached pretrained pair (identical to retraining: each
        # phase draws from its own seeded rng)
        rewriter, simplifier, registry, manifest = load_pair_checkpoint(base)
        steps = manifest["step_count"]
    else:
        rewriter, simplifier, registry = sm.build_rewrite_pair(
            bench.vocab, seq2seq_config(cfg), seed=seed, share_encoder=cfg.share_encoder)
        if cfg.pretrain_epochs:
            aux_pairs = rewrite_pairs(bench.rewrite_aux)
            sm.warmup_train(rewriter, simplifier, aux_pairs,
                            sm.WarmupConfig(epochs=cfg.pretrain_epochs, lr=cfg.warmup_lr,
                                            seed=seed),
                            registry=registry)
            steps += cfg.pretrain_epochs * len(aux_pairs) * 2
    if not ood:
        pairs = rewrite_pairs(bench.labeled)
        # replay an equal-size slice of the pretraining pairs alongside the
        # labeled split: without it the in-domain phase erodes the copying
        # skill the pretraining stage established
        aux_pairs = rewrite_pairs(bench.rewrite_aux)
        import numpy as np
        order = np.random.default_rng((seed, 5)).permutation(len(aux_pairs))
        replay = [aux_pairs[int(i)] for i in order[:len(pairs)]]
        sm.warmup_train(rewriter, simplifier, pairs + replay,
                        sm.WarmupConfig(epochs=cfg.warmup_epochs, lr=cfg.warmup_lr,
                                        seed=seed),
                        registry=registry)
        steps += cfg.warmup_epochs * (len(pairs) + len(replay)) * 2
    save_pair_checkpoint(out, registry, "rewrite-pair", cfg, bench.vocab, seed,
                         steps=steps,
                         flags={"share_encoder": cfg.share_encoder, "ood": ood})
    write_manifest(paths, f"train-{name}-seed{seed}", cfg, [out], {name: time.time() - t0})
    return out


def stage_parser(cfg: ExperimentConfig, seed: int | None = None,
                 variant: str = "full", force: bool = False) -> str:
    """variant: full | no-finetune | concat."""
    paths = paths_for(cfg)
    seed = cfg.seed if seed is None else seed
    bench = load_benchmark(cfg)
    name = {"full": "parser", "no-finetune": "parser_noft", "concat": "parser_concat"}[variant]
    out = paths.ckpt(name, seed)
    _refuse_overwrite(out, force)
    t0 = time.time()
    warm = single_turn_pairs(bench.parser_aux, bench.aux_schemas)

    finetune: list = []
    finetune_steps = 0
    if variant == "full":
        finetune = single_turn_pairs(bench.labeled, bench.schemas)
        if cfg.parser_use_model_rewrites:
            # fine-tune questions come from the warm-up rewriter, so the parser
            # learns the error distribution it will actually see
            rewriter, _, _, _ = load_pair_checkpoint(paths.ckpt("warmup", seed))
            for d, _, turn, history in cp.iter_turns(bench.unlabeled):
                question = sm.rewrite_text(rewriter, history, turn.utterance)
                if question:
                    finetune.append((question, bench.schemas[d.schema_id], turn.ast))
        # replay a slice of the warm-up corpus so fine-tuning does not erode
        # clean-question accuracy
        import numpy as np
        order = np.random.default_rng((seed, 6)).permutation(len(warm))
        finetune += [warm[int(i)] for i in order[:len(finetune) // 2]]
        finetune_steps = cfg.parser_finetune_steps
    elif variant == "concat":
        finetune = concat_pairs(bench.train, bench.schemas)
        finetune_steps = cfg.parser_finetune_steps

    model = ps.build_parser(bench.vocab, ps.ParserConfig(attention=attention_config(cfg)),
                            seed=seed)
    ps.train_parser(warm, model,
                    ps.ParserTrainConfig(steps=cfg.parser_warmup_steps, lr=cfg.parser_lr, seed=seed),
                    finetune_pairs=finetune, finetune_steps=finetune_steps)
    save_parser_checkpoint(out, model, cfg, seed, cfg.parser_warmup_steps + finetune_steps)
    write_manifest(paths, f"train-{name}-seed{seed}", cfg, [out], {name: time.time() - t0})
    return out


def _reward_context(cfg: ExperimentConfig, bench: Benchmark, seed: int,
                    parser_name: str) -> dl.RewardContext:
    paths = paths_for(cfg)
    lm_c = load_lm_checkpoint(paths.ckpt("lm_c", seed))
    lm_s = load_lm_checkpoint(paths.ckpt("lm_s", seed))
    parser_model = load_parser_checkpoint(paths.ckpt(parser_name, seed))
    return dl.RewardContext(lm_c=lm_c, lm_s=lm_s, parser_model=parser_model,
                            schemas=bench.schemas)


def stage_dual(cfg: ExperimentConfig, seed: int | None = None, parser_name: str = "parser",
               warmup_name: str = "warmup", out_name: str = "dual",
               max_samples: int | None = None, force: bool = False) -> str:
    paths = paths_for(cfg)
    seed = cfg.seed if seed is None else seed
    bench = load_benchmark(cfg)
    out = paths.ckpt(out_name, seed)
    _refuse_overwrite(out, force)
    t0 = time.time()
    rewriter, simplifier, registry, _ = load_pair_checkpoint(paths.ckpt(warmup_name, seed))
    ctx = _reward_context(cfg, bench, seed, parser_name)
    samples = dl.dual_samples(bench.unlabeled)
    if max_samples is not None and len(samples) > max_samples:
        import numpy as np
        keep = np.random.default_rng((seed, 3)).permutation(len(samples))[:max_samples]
        samples = [samples[int(i)] for i in sorted(keep)]
    transcript = dl.dual_train(samples, rewriter, simplifier, ctx, dual_config(cfg, seed),
                               transcript_path=paths.transcript(out_name, seed))
    save_pair_checkpoint(out, registry, "rewrite-pair", cfg, bench.vocab, seed,
                         steps=len(transcript),
                         flags={"share_encoder": cfg.share_encoder, "stage": out_name})
    write_manifest(paths, f"train-{out_name}-seed{seed}", cfg,
                   [out, paths.transcript(out_name, seed)], {out_name: time.time() - t0},
                   {"samples": len(transcript),
                    "gate_violations": dl.gate_violations(transcript)})
    return out


def stage_cotrain(cfg: ExperimentConfig, seed: int | None = None, force: bool = False) -> str:
    paths = paths_for(cfg)
    seed = cfg.seed if seed is None else seed
    bench = load_benchmark(cfg)
    out = paths.ckpt("cotrain", seed)
    _refuse_overwrite(out, force)
    t0 = time.time()
    rewriter, _, registry, _ = load_pair_checkpoint(paths.ckpt("warmup", seed))
    parser_model = load_parser_checkpoint(paths.ckpt("parser", seed))
    info = dl.co_train(rewrite_pairs(bench.labeled), dl.dual_samples(bench.unlabeled),
                       rewriter, parser_model, bench.schemas,
                       dl.CoTrainConfig(iterations=cfg.cotrain_iterations,
                                        lr=cfg.cotrain_lr, seed=seed))
    save_pair_checkpoint(out, registry, "rewrite-pair", cfg, bench.vocab, seed,
                         steps=cfg.cotrain_iterations, flags={"stage": "cotrain"})
    write_manifest(paths, f"train-cotrain-seed{seed}", cfg, [out],
                   {"cotrain": time.time() - t0}, info)
    return out


# ---------------------------------------------------------------------------
# Evaluation.
# ---------------------------------------------------------------------------


def pipeline_rewrite(rewriter: sm.Seq2Seq, history: list[str], utterance: str) -> str:
    """Inference-time rewrite. A turn with no history has nothing to recover,
    so it passes through unchanged; the model only rewrites follow-ups."""
    if not history:
        return utterance
    rewritten = sm.rewrite_text(rewriter, history, utterance)
    return rewritten if rewritten else utterance


def evaluate_pipeline(dev: list[cp.ToyDialogue], schemas: dict[str, sc.Schema],
                      parser_model: ps.ParserModel,
                      rewriter: sm.Seq2Seq | None = None) -> mt.EvalReport:
    """Dev-set evaluation. With no rewriter, the parser sees history + utterance."""
    pred_by_dialogue, gold_by_dialogue, schema_list = [], [], []
    em_scores, bleu_scores, rouge_scores, rf_scores = [], [], [], []
    turn1_em = []
    for d in dev:
        schema = schemas[d.schema_id]
        preds, golds = [], []
        history: list[str] = []
        for i, turn in enumerate(d.turns):
            if rewriter is not None:
                rewritten = pipeline_rewrite(rewriter, history, turn.utterance)
                question = rewritten
                if turn.gold_rewrite is not None:
                    em_scores.append(mt.exact_match(rewritten, turn.gold_rewrite))
                    bleu_scores.append(mt.bleu_n(rewritten, turn.gold_rewrite, 2))
                    rouge_scores.append(mt.rouge_l(rewritten, turn.gold_rewrite))
                    rf_scores.append(mt.rewrite_f(rewritten, turn.gold_rewrite,
                                                  history, turn.utterance, 1))
                    if i == 0:
                        turn1_em.append(em_scores[-1])
            else:
                question = " ".join(history + [turn.utterance])
            try:
                preds.append(ps.parse(question, schema, parser_model))
            except (sc.DerivationError, sc.SchemaError, ValueError):
                preds.append(None)
            golds.append(turn.ast)
            history.append(turn.utterance)
        pred_by_dialogue.append(preds)
        gold_by_dialogue.append(golds)
        schema_list.append(schema)
    qm, im = mt.question_interaction_match(pred_by_dialogue, gold_by_dialogue, schema_list)
    scalars = {"question_match": qm, "interaction_match": im}
    if rewriter is not None and em_scores:
        scalars.update({
            "rewrite_em": sum(em_scores) / len(em_scores),
            "rewrite_bleu2": sum(bleu_scores) / len(bleu_scores),
            "rewrite_rouge_l": sum(rouge_scores) / len(rouge_scores),
            "rewrite_f1": sum(rf_scores) / len(rf_scores),
        })
        if turn1_em:
            scalars["turn1_em"] = sum(turn1_em) / len(turn1_em)
    return mt.EvalReport(scalars=scalars, metadata={"dialogues": len(dev)})


def run_eval(cfg: ExperimentConfig, seed: int | None = None, rewriter_name: str = "dual",
             parser_name: str = "parser") -> mt.EvalReport:
    paths = paths_for(cfg)
    seed = cfg.seed if seed is None else seed
    bench = load_benchmark(cfg)
    parser_model = load_parser_checkpoint(paths.ckpt(parser_name, seed))
    rewriter = None
    if rewriter_name != "none":
        rewriter, _, _, _ = load_pair_checkpoint(paths.ckpt(rewriter_name, seed))
    report = evaluate_pipeline(bench.dev, bench.schemas, parser_model, rewriter)
    report.metadata.update({"seed": seed, "rewriter": rewriter_name, "parser": parser_name})
    out = paths.report(f"eval_{rewriter_name}_seed{seed}.json")
    with open(out, "w") as fh:
        fh.write(report.to_json() + "\n")
    return report


# ---------------------------------------------------------------------------
# Ablation ladder (Table-4 analogue) and error analysis.
# ---------------------------------------------------------------------------

ABLATION_VARIANTS = ("dual", "cotrain", "warmup-only", "no-parser-finetune",
                     "no-rewrite-labels", "no-rewriter")


def ensure_stage(path: str, builder) -> str:
    if not os.path.exists(path):
        builder()
    return path


def run_ablate(cfg: ExperimentConfig, seeds: tuple[int, ...] | None = None) -> dict:
    """Train/evaluate the six ladder variants for each seed; writes the report."""
    paths = paths_for(cfg)
    seeds = cfg.seeds if seeds is None else seeds
    _require(paths.corpus, "corpus")
    bench = load_benchmark(cfg)
    t0 = time.time()
    results: dict = {v: {} for v in ABLATION_VARIANTS}

    for seed in seeds:
        ensure_stage(paths.ckpt("lm_c", seed), lambda: stage_lms(cfg, seed))
        # the pretrained base doubles as the no-rewrite-labels rewriter and as
        # the cached initialization for the in-domain warm-up
        ensure_stage(paths.ckpt("warmup_ood", seed), lambda: stage_warmup(cfg, seed, ood=True))
        ensure_stage(paths.ckpt("warmup", seed), lambda: stage_warmup(cfg, seed))
        ensure_stage(paths.ckpt("parser", seed), lambda: stage_parser(cfg, seed, "full"))
        ensure_stage(paths.ckpt("dual", seed), lambda: stage_dual(cfg, seed))
        ensure_stage(paths.ckpt("cotrain", seed), lambda: stage_cotrain(cfg, seed))
        ensure_stage(paths.ckpt("parser_noft", seed),
                     lambda: stage_parser(cfg, seed, "no-finetune"))
        ensure_stage(paths.ckpt("parser_concat", seed),
                     lambda: stage_parser(cfg, seed, "concat"))
        ensure_stage(paths.ckpt("dual_noft", seed),
                     lambda: stage_dual(cfg, seed, parser_name="parser_noft",
                                        out_name="dual_noft",
                                        max_samples=cfg.ablate_aux_dual_samples))
        ensure_stage(paths.ckpt("dual_ood", seed),
                     lambda: stage_dual(cfg, seed, parser_name="parser_noft",
                                        warmup_name="warmup_ood", out_name="dual_ood",
                                        max_samples=cfg.ablate_aux_dual_samples))

        parser_full = load_parser_checkpoint(paths.ckpt("parser", seed))
        parser_noft = load_parser_checkpoint(paths.ckpt("parser_noft", seed))
        parser_concat = load_parser_checkpoint(paths.ckpt("parser_concat", seed))

        def pair_rewriter(name):
            rewriter, _, _, _ = load_pair_checkpoint(paths.ckpt(name, seed))
            return rewriter

        plan = {
            "dual": (pair_rewriter("dual"), parser_full),
            "cotrain": (pair_rewriter("cotrain"), parser_full),
            "warmup-only": (pair_rewriter("warmup"), parser_full),
            "no-parser-finetune": (pair_rewriter("dual_noft"), parser_noft),
            "no-rewrite-labels": (pair_rewriter("dual_ood"), parser_noft),
            "no-rewriter": (None, parser_concat),
        }
        for variant, (rewriter, parser_model) in plan.items():
            report = evaluate_pipeline(bench.dev, bench.schemas, parser_model, rewriter)
            results[variant][seed] = {k: round(v, 4) for k, v in report.scalars.items()}

    doc = {"variants": results, "seeds": list(seeds),
           "elapsed_sec": round(time.time() - t0, 1)}
    out = paths.report("ablation.json")
    with open(out, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")
    csv_lines = ["variant,seed,question_match,interaction_match"]
    for variant in ABLATION_VARIANTS:
        for seed in seeds:
            r = results[variant][seed]
            csv_lines.append(f"{variant},{seed},{r['question_match']},{r['interaction_match']}")
    with open(paths.report("ablation.csv"), "w") as fh:
        fh.write("\n".join(csv_lines) + "\n")
    return doc


def run_analyze(cfg: ExperimentConfig, seed: int | None = None,
                rewriter_name: str = "dual") -> mt.PhaseReport:
    paths = paths_for(cfg)
    seed = cfg.seed if seed is None else seed
    bench = load_benchmark(cfg)
    parser_model = load_parser_checkpoint(paths.ckpt("parser", seed))
    rewriter, _, _, _ = load_pair_checkpoint(paths.ckpt(rewriter_name, seed))

    def rewrite_fn(history, utterance):
        return pipeline_rewrite(rewriter, history, utterance)

    def parse_fn(question, schema):
        return ps.parse(question, schema, parser_model)

    report = mt.attribute_errors(bench.dev, bench.schemas, rewrite_fn, parse_fn)
    with open(paths.report(f"analysis_seed{seed}.json"), "w") as fh:
        json.dump(report.to_json_dict(), fh, sort_keys=True, indent=1)
        fh.write("\n")
    with open(paths.report(f"analysis_phenomena_seed{seed}.csv"), "w") as fh:
        fh.write(report.phenomenon_csv())
    with open(paths.report(f"analysis_turns_seed{seed}.csv"), "w") as fh:
        fh.write(report.turn_csv())
    return report


def run_infer(cfg: ExperimentConfig, question: str, history: list[str], schema_id: str,
              seed: int | None = None, rewriter_name: str = "dual") -> tuple[str, str]:
    paths = paths_for(cfg)
    seed = cfg.seed if seed is None else seed
    schemas = sc.load_schemas(_require(paths.schemas, "corpus"))
    if schema_id not in schemas:
        raise DataError(f"unknown schema id {schema_id!r} (have: {sorted(schemas)[:5]} ...)")
    schema = schemas[schema_id]
    rewriter, _, _, _ = load_pair_checkpoint(paths.ckpt(rewriter_name, seed))
    parser_model = load_parser_checkpoint(paths.ckpt("parser", seed))
    rewritten = pipeline_rewrite(rewriter, history, question)
    ast = ps.parse(rewritten, schema, parser_model)
    return rewritten, sc.render(ast, schema)

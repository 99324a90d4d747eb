"""Acceptance gate: ten criteria, one pass/fail line each (run with -s to see).

The heavy shared artifact is the full six-variant ablation ladder on the
default benchmark (three seeds); it backs the length-gate audit, the ordering
checks, and the error-attribution identities. Expect the whole module to take
roughly half an hour on a laptop CPU.
"""

import math
import time

import numpy as np
import pytest

from duetsql import corpus as cp
from duetsql import duallearning as dl
from duetsql import metrics as mt
from duetsql import numerics as nm
from duetsql import parser as ps
from duetsql import pipeline as pl
from duetsql import rewards as rw
from duetsql import seqmodels as sm
from duetsql import sqlcore as sc
from duetsql import transformer as tr

from helpers import check_grads_against_fd, naive_attention_layer, relation_vectors

GRAD_TOL = 1e-4


def report(num: int, name: str, ok: bool, detail: str = "") -> None:
    status = "PASS" if ok else "FAIL"
    print(f"\nACCEPTANCE {num:>2} {name:<24} {status}  {detail}")


# ---------------------------------------------------------------------------
# Shared heavy fixture: the default-benchmark ablation ladder.
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def ladder(tmp_path_factory):
    out = tmp_path_factory.mktemp("ladder")
    cfg = pl.ExperimentConfig(out_dir=str(out))
    t0 = time.time()
    pl.stage_corpus(cfg)
    doc = pl.run_ablate(cfg)
    return {"cfg": cfg, "doc": doc, "elapsed": time.time() - t0,
            "paths": pl.paths_for(cfg)}


# ---------------------------------------------------------------------------
# 1. Gradient correctness.
# ---------------------------------------------------------------------------


def test_criterion_1_gradient_correctness():
    t0 = time.time()
    rng = np.random.default_rng(101)
    checked = 0
    worst = 0.0

    def check(params: dict, forward) -> None:
        nonlocal checked, worst
        worst = max(worst, check_grads_against_fd(params, forward, tol=GRAD_TOL))
        checked += 1

    # primitive layers
    for _ in range(4):
        p = {"w": nm.param(rng.normal(size=(3, 4))), "b": nm.param(rng.normal(size=4))}
        x = rng.normal(size=(2, 3))
        check(p, lambda p=p, x=x: nm.sum_all(nm.relu(nm.add(nm.matmul(nm.Tensor(x), p["w"]), p["b"]))))
    for _ in range(3):
        p = {"x": nm.param(rng.normal(size=(3, 5)))}
        check(p, lambda p=p: nm.mean_all(nm.softmax(p["x"])))
    for _ in range(3):
        p = {"x": nm.param(rng.normal(size=(2, 4))), "g": nm.param(rng.normal(size=4)),
             "b": nm.param(rng.normal(size=4))}
        check(p, lambda p=p: nm.sum_all(nm.layer_norm(p["x"], p["g"], p["b"])))

    # attention layers (plain + relation-aware)
    cfg = tr.AttentionConfig(num_heads=2, hidden_dim=4, num_layers=1, ffn_dim=6,
                             max_positions=8)
    for trial in range(3):
        params = {}
        tr.init_attention_layer(params, "l", cfg, np.random.default_rng(200 + trial),
                                num_relations=3)
        x = rng.normal(size=(3, 4))
        rel = rng.integers(0, 3, size=(3, 3))
        check(params, lambda params=params, x=x: nm.mean_all(
            tr.self_attention_layer(nm.Tensor(x), params, "l", cfg)))
        check(params, lambda params=params, x=x, rel=rel: nm.mean_all(
            tr.relation_aware_layer(nm.Tensor(x), rel, params, "l", cfg)))

    # encoder-decoder cross entropy (the L_ce family)
    vocab = sm.Vocabulary(["a", "b", "c", "d"])
    s2s = sm.Seq2SeqConfig(attention=cfg, max_gen_len=6)
    for trial in range(3):
        model = sm.build_seq2seq(vocab, s2s, seed=300 + trial)
        src = [4, 5, 6]
        tgt = [5, 7]
        check(model.params, lambda model=model: sm.nll(model, src, tgt))

    # policy-gradient loss with frozen rewards (the L_pg family)
    for trial in range(3):
        model = sm.build_seq2seq(vocab, s2s, seed=400 + trial)
        out_ids = np.array([5, 6, 3])
        weights = rng.normal(size=3)

        def forward(model=model, weights=weights):
            logp = sm.sequence_logprobs(model, [4, 6], out_ids)
            return nm.neg(nm.dot(logp, nm.constant(weights)))

        check(model.params, forward)

    # parser decoder (LSTM + pointer heads) teacher-forced NLL
    schema = sc.Schema("g", ("players",),
                       (sc.Column("id", 0, "number"), sc.Column("score", 0, "number")),
                       (0,), ())
    gold = sc.linearize(sc.SqlAst((0,), False, (sc.SelectItem(None, 1),), None, (),
                                  None, None), schema)
    for trial in range(2):
        model = ps.build_parser(vocab, ps.ParserConfig(attention=cfg), seed=500 + trial)
        q = ["a", "b"]
        check(model.params, lambda model=model: ps.action_nll(
            ps.encode_joint(q, schema, model), schema, model, 2, gold))

    elapsed = time.time() - t0
    ok = checked >= 20 and worst < GRAD_TOL and elapsed < 60
    report(1, "gradient-correctness", ok,
           f"{checked} configurations, worst relative error {worst:.2e}, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 2. Eq.-1 fidelity.
# ---------------------------------------------------------------------------


def test_criterion_2_attention_fidelity():
    cfg = tr.AttentionConfig(num_heads=2, hidden_dim=8, num_layers=1, ffn_dim=12,
                             max_positions=8)
    rng = np.random.default_rng(7)
    worst_plain = worst_zero = 0.0
    for trial in range(100):
        params = {}
        tr.init_attention_layer(params, "l", cfg, np.random.default_rng(trial),
                                num_relations=4)
        x = rng.normal(size=(rng.integers(2, 5), 8))
        out = tr.self_attention_layer(nm.Tensor(x), params, "l", cfg)
        ref = naive_attention_layer(x, params, "l", cfg)
        worst_plain = max(worst_plain, float(np.abs(out.data - ref).max()))

        rel_zero = np.zeros((x.shape[0], x.shape[0]), dtype=int)
        out_rel = tr.relation_aware_layer(nm.Tensor(x), rel_zero, params, "l", cfg)
        worst_zero = max(worst_zero, float(np.abs(out_rel.data - out.data).max()))

        rel = rng.integers(0, 4, size=(x.shape[0], x.shape[0]))
        out_r = tr.relation_aware_layer(nm.Tensor(x), rel, params, "l", cfg)
        ref_r = naive_attention_layer(x, params, "l", cfg,
                                      rel=relation_vectors(params, "l", rel))
        worst_plain = max(worst_plain, float(np.abs(out_r.data - ref_r).max()))

    ok = worst_plain < 1e-9 and worst_zero < 1e-9
    report(2, "eq1-fidelity", ok,
           f"naive-reference gap {worst_plain:.2e}, ZERO-reduction gap {worst_zero:.2e}")
    assert ok


# ---------------------------------------------------------------------------
# 3. Reward algebra.
# ---------------------------------------------------------------------------


def test_criterion_3_reward_algebra():
    rng = np.random.default_rng(11)
    checked = 0
    for _ in range(1000):
        m = int(rng.integers(1, 12))
        rewards = [float(rng.choice([-0.1, 0.0, 0.1])) for _ in range(m)]
        sentence = float(rng.normal())
        lam = float(rng.choice([0.0, 0.5, 1.0]))
        returns = rw.accumulate(rewards, sentence, lam)
        final = rewards[:-1] + [sentence]
        if lam == 1.0:
            brute = [sum(final[j:]) for j in range(m)]
            assert all(abs(a - b) < 1e-9 for a, b in zip(returns, brute))
        for j in range(m - 1):
            assert abs(returns[j] - (final[j] + lam * returns[j + 1])) < 1e-12
        assert abs(returns[-1] - sentence) < 1e-12
        checked += 1

    schema = cp.gen_schema(seed=5)
    index = rw.SchemaTokenIndex.build(schema)
    lex = rw.PronounLexicon.default()
    words = list(index.tokens)[:10] + ["them", "it", "xyz", "the", "value"]
    token_values = set()
    for _ in range(2000):
        tok = str(rng.choice(words))
        x = " ".join(rng.choice(words, size=5))
        token_values.add(rw.token_reward_rewrite(tok, x, index, lex))
        token_values.add(rw.token_reward_simplify(tok, x, [x], index, lex))
    ok = checked == 1000 and token_values <= {-0.1, 0.0, 0.1}
    report(3, "reward-algebra", ok,
           f"{checked} traces validated, token-reward values {sorted(token_values)}")
    assert ok


# ---------------------------------------------------------------------------
# 4. Length gates (full transcript from the ladder's dual stage).
# ---------------------------------------------------------------------------


def test_criterion_4_length_gates(ladder):
    transcript = dl.load_transcript(ladder["paths"].transcript("dual", ladder["cfg"].seeds[0]))
    violations = dl.gate_violations(transcript)
    applied = sum(1 for e in transcript for r in e["mle"] if r["applied"])
    ok = len(transcript) >= 500 and violations == 0
    report(4, "length-gates", ok,
           f"{len(transcript)} samples, {applied} gated MLE updates, {violations} violations")
    assert ok


# ---------------------------------------------------------------------------
# 5. Grammar safety.
# ---------------------------------------------------------------------------


def test_criterion_5_grammar_safety(ladder):
    att = tr.AttentionConfig(num_heads=2, hidden_dim=16, num_layers=1, ffn_dim=24,
                             max_positions=96)
    rng = np.random.default_rng(13)
    schemas = [cp.gen_schema(seed=(900, i), n_tables=2) for i in range(4)]
    vocab_texts = []
    questions_by_schema = []
    for schema in schemas:
        qs = [cp.gen_single_turn(schema, (901, k))[0] for k in range(10)]
        questions_by_schema.append(qs)
        vocab_texts += qs
    vocab = sm.Vocabulary.from_texts(vocab_texts)

    decodes = 0
    for model_seed in range(240):
        model = ps.build_parser(vocab, ps.ParserConfig(attention=att), seed=model_seed)
        si = model_seed % len(schemas)
        for q in questions_by_schema[si]:
            ast = ps.parse(q, schemas[si], model)  # raises on any violation
            sc.validate_ast(ast, schemas[si])
            decodes += 1

    # trained parameters: the ladder's fine-tuned parser over dev questions
    cfg = ladder["cfg"]
    bench = pl.load_benchmark(cfg)
    parser_model = pl.load_parser_checkpoint(ladder["paths"].ckpt("parser", cfg.seeds[0]))
    for d in bench.dev:
        schema = bench.schemas[d.schema_id]
        for turn in d.turns:
            for question in (turn.gold_rewrite, turn.utterance):
                ast = ps.parse(question, schema, parser_model)
                sc.validate_ast(ast, schema)
                decodes += 1
            if decodes >= 10000:
                break
        if decodes >= 10000:
            break

    round_trips = 0
    rng2 = np.random.default_rng(17)
    for _ in range(1000):
        schema = schemas[int(rng2.integers(len(schemas)))]
        ast = sc.random_ast(schema, rng2)
        assert sc.delinearize(sc.linearize(ast, schema), schema) == ast
        round_trips += 1

    ok = decodes >= 10000 and round_trips == 1000
    report(5, "grammar-safety", ok,
           f"{decodes} constrained decodes without violation, {round_trips} round trips")
    assert ok


# ---------------------------------------------------------------------------
# 6. Metric oracles.
# ---------------------------------------------------------------------------


def test_criterion_6_metric_fixtures(ladder):
    checks = [
        ("bleu identity", mt.bleu_n("a b c", "a b c", 4), 1.0),
        ("bleu disjoint", mt.bleu_n("a b c", "x y z", 1), 0.0),
        ("bleu hand", mt.bleu_n("a b c", "a b d", 1), 2 / 3),
        ("rouge identity", mt.rouge_l("a b", "a b"), 1.0),
        ("rouge-l hand", mt.rouge_l("a x b", "a b"), 0.8),
        ("rouge disjoint", mt.rouge_n("a b", "x y", 1), 0.0),
        ("em equal", mt.exact_match("Show THE score", "show the score"), 1.0),
        ("em differ", mt.exact_match("show the score", "show a score"), 0.0),
        ("rewrite-f identity", mt.rewrite_f("a b", "a b", ["b z"], "a", 1), 1.0),
        ("rewrite-f empty-context", mt.rewrite_f("x y", "y z", [], "q", 1), 1.0),
        ("rewrite-f hand", mt.rewrite_f("the students like students", "the students sing",
                                        ["which students"], "which ones", 1), 2 / 3),
    ]
    schema = sc.Schema("m", ("t",), (sc.Column("id", 0, "number"),
                                     sc.Column("a", 0, "text")), (0,), ())
    ast = sc.SqlAst((0,), False, (sc.SelectItem(None, 1),), None, (), None, None)
    other = sc.SqlAst((0,), True, (), None, (), None, None)
    qm, im = mt.question_interaction_match([[ast, other]], [[ast, ast]], [schema])
    checks += [("qm half", qm, 0.5), ("im zero", im, 0.0)]
    qm2, im2 = mt.question_interaction_match([[ast, ast]], [[ast, ast]], [schema])
    checks += [("qm one", qm2, 1.0), ("im one", im2, 1.0)]

    exact = all(abs(got - want) < 1e-9 for _, got, want in checks)

    # IM <= QM on every real evaluation run of the ladder
    doc = ladder["doc"]
    im_le_qm = all(row["interaction_match"] <= row["question_match"] + 1e-12
                   for variant in doc["variants"].values() for row in variant.values())
    ok = exact and im_le_qm
    detail = "; ".join(f"{name} {got:.4f}" for name, got, want in checks
                       if abs(got - want) >= 1e-9)
    report(6, "metric-oracles", ok,
           f"{len(checks)} fixtures exact, IM<=QM on all ladder runs" if ok else detail)
    assert ok


# ---------------------------------------------------------------------------
# 7. Memorization.
# ---------------------------------------------------------------------------


def test_criterion_7_memorization():
    att = tr.AttentionConfig(num_heads=2, hidden_dim=32, num_layers=1, ffn_dim=64,
                             max_positions=96)
    schema = cp.gen_schema(seed=31, n_tables=2, cols_per_table=3)

    questions, asts = [], []
    seen = set()
    k = 0
    while len(questions) < 50:
        q, ast = cp.gen_single_turn(schema, (32, k))
        k += 1
        if q in seen:
            continue
        seen.add(q)
        questions.append(q)
        asts.append(ast)
    vocab = sm.Vocabulary.from_texts(questions)
    pairs = list(zip(questions, [schema] * 50, asts))

    parser_ok = True
    parser_times = []
    for seed in range(3):
        model = ps.build_parser(vocab, ps.ParserConfig(attention=att), seed=seed)
        state = {"acc": 0.0}

        def stop():
            state["acc"] = ps.exact_ast_accuracy(pairs, model)
            return state["acc"] == 1.0

        t0 = time.time()
        ps.train_parser(pairs, model, ps.ParserTrainConfig(steps=2000, lr=2e-3, seed=seed),
                        stop_check=stop, check_every=250)
        stop()
        parser_times.append(time.time() - t0)
        parser_ok &= state["acc"] == 1.0 and parser_times[-1] < 300

    dialogues = [cp.gen_dialogue(schema, 3, seed=(33, i)) for i in range(17)]
    rpairs = [(h, t.utterance, t.gold_rewrite)
              for d in dialogues for _, _, t, h in cp.iter_turns([d])][:50]
    rvocab = sm.Vocabulary.from_texts([t.gold_rewrite for d in dialogues for t in d.turns]
                                      + [t.utterance for d in dialogues for t in d.turns])
    s2s = sm.Seq2SeqConfig(attention=att, max_gen_len=48)

    def rewrite_em(model):
        hits = sum(sm.rewrite_text(model, h, x) == gold for h, x, gold in rpairs)
        return hits / len(rpairs)

    rewriter_ok = True
    rewriter_times = []
    ems = []
    for seed in range(3):
        rewriter, simplifier, registry = sm.build_rewrite_pair(rvocab, s2s, seed=seed)
        t0 = time.time()
        em = 0.0
        for _ in range(4):  # 4 x 10 epochs x 50 pairs = 2000 steps per model
            sm.warmup_train(rewriter, simplifier, rpairs,
                            sm.WarmupConfig(epochs=10, lr=1.5e-3, seed=seed),
                            registry=registry)
            em = rewrite_em(rewriter)
            if em >= 0.95:
                break
        rewriter_times.append(time.time() - t0)
        ems.append(em)
        rewriter_ok &= em >= 0.95 and rewriter_times[-1] < 300

    ok = parser_ok and rewriter_ok
    report(7, "memorization", ok,
           f"parser 100% in <=2000 steps x3 ({max(parser_times):.0f}s worst), "
           f"rewriter EM {min(ems):.2f} ({max(rewriter_times):.0f}s worst)")
    assert ok


# ---------------------------------------------------------------------------
# 8. Pipeline ordering (Table-4 analogue).
# ---------------------------------------------------------------------------


def test_criterion_8_pipeline_ordering(ladder):
    doc = ladder["doc"]
    seeds = ladder["cfg"].seeds
    rows = {v: {s: doc["variants"][v][s]["question_match"] for s in seeds}
            for v in pl.ABLATION_VARIANTS}
    chain_holds = sum(
        rows["dual"][s] >= rows["cotrain"][s] >= rows["warmup-only"][s]
        >= rows["no-rewriter"][s]
        for s in seeds)
    gaps = [rows["dual"][s] - rows["no-rewriter"][s] for s in seeds]
    ok = (chain_holds >= 2 and all(g >= 0.05 for g in gaps)
          and ladder["elapsed"] < 45 * 60)
    summary = " | ".join(
        f"s{s}: " + " >= ".join(f"{rows[v][s]:.3f}" for v in
                                ("dual", "cotrain", "warmup-only", "no-rewriter"))
        for s in seeds)
    report(8, "pipeline-ordering", ok,
           f"chain holds in {chain_holds}/3 seeds, dual-vs-no-rewriter gaps "
           f"{[round(g, 3) for g in gaps]}, ladder {ladder['elapsed'] / 60:.1f} min :: {summary}")
    assert ok


# ---------------------------------------------------------------------------
# 9. Error attribution.
# ---------------------------------------------------------------------------


def test_criterion_9_error_attribution(ladder):
    cfg = ladder["cfg"]
    seed = cfg.seeds[0]
    phase = pl.run_analyze(cfg, seed=seed)
    eval_report = pl.run_eval(cfg, seed=seed, rewriter_name="dual")

    partition_ok = phase.overall.phase1 + phase.overall.phase2 == phase.overall.errors
    for cell in list(phase.per_phenomenon.values()) + list(phase.per_turn_index.values()):
        partition_ok &= cell.phase1 + cell.phase2 == cell.errors
    rate_ok = abs(phase.overall.error_rate
                  - (1.0 - eval_report.scalars["question_match"])) < 1e-9

    bench = pl.load_benchmark(cfg)
    present = {p for d in bench.dev for t in d.turns for p in t.phenomena}
    coverage_ok = present <= set(phase.per_phenomenon) and len(present) == 10

    ok = partition_ok and rate_ok and coverage_ok
    report(9, "error-attribution", ok,
           f"phase1 {phase.overall.phase1} + phase2 {phase.overall.phase2} = "
           f"{phase.overall.errors} errors, rate {phase.overall.error_rate:.3f}, "
           f"{len(present)} phenomenon types covered")
    assert ok


# ---------------------------------------------------------------------------
# 10. Reproducibility.
# ---------------------------------------------------------------------------


def test_criterion_10_reproducibility(ladder, tmp_path):
    cfg = ladder["cfg"]
    paths = ladder["paths"]

    twin = pl.ExperimentConfig(out_dir=str(tmp_path / "twin"))
    pl.stage_corpus(twin)
    twin_paths = pl.paths_for(twin)
    bytes_ok = True
    for a, b in ((paths.corpus, twin_paths.corpus), (paths.schemas, twin_paths.schemas),
                 (paths.parser_aux, twin_paths.parser_aux),
                 (paths.rewrite_aux, twin_paths.rewrite_aux)):
        bytes_ok &= open(a, "rb").read() == open(b, "rb").read()

    seed = cfg.seeds[0]
    a = pl.run_eval(cfg, seed=seed, rewriter_name="dual")
    b = pl.run_eval(cfg, seed=seed, rewriter_name="dual")
    metrics_ok = a.scalars == b.scalars

    ok = bytes_ok and metrics_ok
    report(10, "reproducibility", ok,
           f"corpus files byte-identical: {bytes_ok}, eval rerun identical: {metrics_ok}")
    assert ok


# ---------------------------------------------------------------------------
# Default-corpus size check (cmd_corpus contract).
# ---------------------------------------------------------------------------


def test_default_corpus_size(ladder):
    bench = pl.load_benchmark(ladder["cfg"])
    turns = sum(len(d.turns) for d in bench.train) + sum(len(d.turns) for d in bench.dev)
    assert 1900 <= turns <= 2100, turns

"""A complete (shrunken) experiment: corpus -> stages -> evaluation.

Runs every pipeline stage on a small benchmark in about a minute and prints
dev question match for the warm-up-only, dual-learning, and no-rewriter
pipelines, plus the two-phase error attribution.

For the full-size benchmark use the CLI instead:
    duetsql corpus && duetsql train lms && duetsql train warmup &&
    duetsql train parser && duetsql train dual && duetsql eval
"""

import tempfile
import time

import duetsql.pipeline as pl

t0 = time.time()
with tempfile.TemporaryDirectory() as out:
    cfg = pl.ExperimentConfig(
        out_dir=out, n_schemas=6, dialogues_per_schema=12,
        aux_n_schemas=3, parser_aux_per_schema=30,
        rewrite_aux_dialogues_per_schema=10,
        labeled_fraction=0.2, pretrain_epochs=6, warmup_epochs=12,
        parser_warmup_steps=500, parser_finetune_steps=700,
        dual_epochs=1, seeds=(0,))

    print("generating corpus...", pl.stage_corpus(cfg))
    pl.stage_lms(cfg, seed=0)
    print("warm-up...")
    pl.stage_warmup(cfg, seed=0)
    print("parser (out-of-domain warm-up, then in-domain fine-tune)...")
    pl.stage_parser(cfg, seed=0)
    warm = pl.run_eval(cfg, seed=0, rewriter_name="warmup")

    print("dual learning over the unlabeled split...")
    pl.stage_dual(cfg, seed=0)
    dual = pl.run_eval(cfg, seed=0, rewriter_name="dual")

    print("no-rewriter baseline (parser fed raw history-concatenated turns)...")
    pl.stage_parser(cfg, seed=0, variant="concat")
    concat = pl.run_eval(cfg, seed=0, rewriter_name="none", parser_name="parser_concat")

    print(f"\ndev question match ({sum(len(d.turns) for d in pl.load_benchmark(cfg).dev)}"
          " turns):")
    print(f"  warm-up only : {warm.scalars['question_match']:.3f}")
    print(f"  + dual       : {dual.scalars['question_match']:.3f}")
    print(f"  no rewriter  : {concat.scalars['question_match']:.3f}")
    print(f"  (rewrite EM warm-up {warm.scalars['rewrite_em']:.3f}"
          f" -> dual {dual.scalars['rewrite_em']:.3f})")

    print("\nwhere do remaining errors come from?")
    report = pl.run_analyze(cfg, seed=0)
    o = report.overall
    print(f"  {o.errors}/{o.turns} turns wrong: {o.phase1} rewrite-phase, "
          f"{o.phase2} parse-phase")
    worst = sorted(report.per_phenomenon.items(), key=lambda kv: -kv[1].error_rate)[:3]
    for name, cell in worst:
        print(f"  hardest phenomenon: {name} ({cell.errors}/{cell.turns} wrong)")

print(f"\ntotal {time.time() - t0:.0f}s")

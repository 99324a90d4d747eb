"""One round of the closed-loop game, narrated.

Warms up a rewriter/simplifier pair on a handful of labeled turns, then plays
a single rewriter-start loop: beam candidates, token rewards, the sentence
reward with its parser intent check, accumulated returns, the policy step,
and the length-gated reconstruction step.
"""

import numpy as np

from duetsql import corpus as cp
from duetsql import duallearning as dl
from duetsql import parser as ps
from duetsql import pipeline as pl
from duetsql import seqmodels as sm
from duetsql import sqlcore as sc

schemas, dialogues = cp.gen_corpus(cp.CorpusConfig(n_schemas=2, dialogues_per_schema=8,
                                                   seed=5))
smap = {s.schema_id: s for s in schemas}
texts = cp.corpus_texts(dialogues) + pl._schema_texts(smap)
vocab = sm.Vocabulary.from_texts(texts)

import duetsql.transformer as tr
att = tr.AttentionConfig(num_heads=2, hidden_dim=32, num_layers=1, ffn_dim=64,
                         max_positions=96)
s2s = sm.Seq2SeqConfig(attention=att, max_gen_len=32)

labeled, unlabeled = cp.split(dialogues, 0.4, seed=0)
pairs = [(h, t.utterance, t.gold_rewrite)
         for d in labeled for _, _, t, h in cp.iter_turns([d])]
print(f"warming up on {len(pairs)} labeled turns...")
rewriter, simplifier, registry = sm.build_rewrite_pair(vocab, s2s, seed=0)
sm.warmup_train(rewriter, simplifier, pairs, sm.WarmupConfig(epochs=12, lr=1.5e-3),
                registry=registry)

print("training scoring LMs and a small parser...")
lm_c, lm_s = sm.train_lms(labeled + unlabeled, vocab, s2s, sm.LmTrainConfig(epochs=2))
parser_model = ps.build_parser(vocab, ps.ParserConfig(attention=att), seed=0)
ppairs = [(t.gold_rewrite, smap[d.schema_id], t.ast)
          for d in labeled for _, _, t, _ in cp.iter_turns([d])]
ps.train_parser(ppairs, parser_model, ps.ParserTrainConfig(steps=600, lr=2e-3))

ctx = dl.RewardContext(lm_c=lm_c, lm_s=lm_s, parser_model=parser_model, schemas=smap)
samples = [s for s in dl.dual_samples(unlabeled) if s.history]
sample = samples[2]

print("\n--- one rewriter-start round ---")
print("history:", sample.history)
print("turn   :", sample.utterance)
print("gold sql:", sc.render(sample.gold_ast, smap[sample.schema_id]))

entry = dl.loop_rewriter_start(sample, rewriter, simplifier, ctx,
                               dl.DualConfig(beam_k=2, seed=0))
for i, cand in enumerate(entry["candidates"]):
    print(f"\ncandidate {i}: {' '.join(cand['tokens'])}")
    print("  token rewards  :", cand["token_rewards"])
    print("  sentence reward:", round(cand["sentence_reward"], 3),
          "(LM score + 1.0 iff the parse equals gold SQL)")
    print("  returns        :", [round(r, 3) for r in cand["returns"]])
print("\npolicy loss:", None if entry["policy_loss"] is None
      else round(entry["policy_loss"], 4), "(skipped)" if entry["policy_skipped"] else "")
for rec in entry["mle"]:
    verdict = "simplifier MLE ran" if rec["applied"] else "gate skipped (not longer)"
    print(f"candidate {rec['candidate']}: len(x)={rec['len_x']} vs "
          f"len(candidate)={rec['len_candidate']} -> {verdict}")

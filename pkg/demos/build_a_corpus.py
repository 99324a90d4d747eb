"""Generate a toy schema and one dialogue, phenomenon by phenomenon.

Shows the corrupted utterance the models see, the self-contained gold rewrite,
and the gold SQL for every turn, then prints corpus-level phenomenon counts.
"""

from collections import Counter

from duetsql import corpus as cp

schema = cp.gen_schema(seed=7, n_tables=2, cols_per_table=3)
print("schema:", schema.schema_id)
for t, table in enumerate(schema.tables):
    cols = ", ".join(f"{schema.columns[i].name}:{schema.columns[i].ctype}"
                     for i in schema.columns_of(t))
    print(f"  {table}({cols})")

dialogue = cp.gen_dialogue(schema, n_turns=4, seed=12)
print("\none dialogue:")
for i, turn in enumerate(dialogue.turns, 1):
    label = ", ".join(turn.phenomena) if turn.phenomena else "first turn"
    print(f"  turn {i} [{label}]")
    print(f"    user said : {turn.utterance}")
    print(f"    rewrite   : {turn.gold_rewrite}")
    print(f"    gold SQL  : {turn.gold_sql}")

schemas, dialogues = cp.gen_corpus(cp.CorpusConfig(n_schemas=6, dialogues_per_schema=10,
                                                   seed=3))
counts = Counter(p for d in dialogues for t in d.turns for p in t.phenomena)
total = sum(counts.values())
print(f"\nphenomenon mix over {total} corrupted turns:")
for name, n in counts.most_common():
    print(f"  {name:<26} {n:>4}  ({n / total:.0%})")

labeled, unlabeled = cp.split(dialogues, 0.1, seed=0)
print(f"\nsplit: {len(labeled)} labeled / {len(unlabeled)} unlabeled dialogues")
print("unlabeled turns keep gold SQL but hide rewrites:",
      unlabeled[0].turns[0].gold_rewrite is None,
      "/ sql present:", bool(unlabeled[0].turns[0].gold_sql))

"""The SQL grammar, action sequences, and why the decoding mask matters.

Linearizes a query into ApplyRule / SelectColumn / SelectTable actions,
rebuilds it, then lets an untrained decoder loose with and without the
legal-action mask.
"""

import numpy as np

from duetsql import parser as ps
from duetsql import seqmodels as sm
from duetsql import sqlcore as sc
from duetsql import transformer as tr

print("\n".join(sc.grammar_table_lines()[:12]))
print(f"... ({sc.NUM_RULES} rules total)\n")

schema = sc.Schema(
    "demo", ("players", "teams"),
    (sc.Column("id", 0, "number"), sc.Column("name", 0, "text"),
     sc.Column("score", 0, "number"), sc.Column("teams_id", 0, "number"),
     sc.Column("id", 1, "number"), sc.Column("budget", 1, "number")),
    (0, 4), ((3, 4),))

ast = sc.SqlAst(tables=(0,), select_star=False,
                select_items=(sc.SelectItem("max", 2),),
                where_connective="AND", where=(sc.Condition(1, "="),),
                group_by=None, order_by=None)
print("query:", sc.render(ast, schema))

actions = sc.linearize(ast, schema)
print("actions:", " ".join(str(a) for a in actions))
assert sc.delinearize(actions, schema) == ast
print("delinearize(linearize(ast)) == ast\n")

# what is legal mid-derivation?
state = sc.DerivationState(schema)
for action in actions[:6]:
    state.apply(action)
print("frontier after 6 actions:", list(reversed(state.stack)))
print("legal next actions:", [str(a) for a in state.legal_actions()])

# untrained decoding: the mask is what keeps outputs grammatical
vocab = sm.Vocabulary.from_texts(["what is the largest score of players"])
att = tr.AttentionConfig(num_heads=2, hidden_dim=16, num_layers=1, ffn_dim=24,
                         max_positions=64)
question = sm.tokenize("what is the largest score of players")

ok = violations = 0
for seed in range(25):
    model = ps.build_parser(vocab, ps.ParserConfig(attention=att), seed=seed)
    enc = ps.encode_joint(question, schema, model)
    parsed = ps.parse(question, schema, model)  # constrained: always valid
    sc.validate_ast(parsed, schema)
    ok += 1
    try:
        raw = ps.decode_actions(enc, schema, model, len(question), constrain=False)
        sc.delinearize(raw, schema)
    except sc.DerivationError:
        violations += 1

print(f"\nconstrained decodes valid under random parameters: {ok}/25")
print(f"unconstrained decodes that broke the grammar:       {violations}/25")

"""Synthetic multi-turn dialogue generation.

Each dialogue tracks a latent query that mutates turn by turn (add condition,
swap a column or aggregate, add a superlative, pull in a joined table). The
complete question for a turn is rendered from a rigid template, so an exact
template inverse exists; the spoken utterance is then produced by applying one
co-reference or ellipsis phenomenon against the previous turn.

Templates are deliberately rigid and pronoun-free on the complete side; all
pronouns and ellipses enter through `apply_phenomenon`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import sqlcore as sc
from .seqmodels import tokenize

PHENOMENON_TYPES = (
    "BRIDGING_ANAPHORA",
    "DEFINITE_NOUN_PHRASE",
    "ONE_ANAPHORA",
    "DEMONSTRATIVE_PRONOUN",
    "POSSESSIVE_DETERMINER",
    "CONTINUATION",
    "SUBST_EXPLICIT_SCHEMA",
    "SUBST_IMPLICIT_SCHEMA",
    "SUBST_EXPLICIT_OPERATOR",
    "SUBST_IMPLICIT_OPERATOR",
)

CONVENTION_GROUP_IN_SELECT = "group-in-select"
CONVENTION_GROUP_PLAIN = "group-plain"

TABLE_BANK = (
    "flights", "airports", "countries", "students", "pets", "rooms", "cities",
    "teams", "players", "stores", "orders", "products", "employees",
    "departments", "books", "authors", "courses", "hotels", "cars", "owners",
    "singers", "concerts", "stadiums", "farms", "machines", "artists",
    "paintings", "museums", "ships", "harbors",
)
NUMERIC_COLUMN_BANK = (
    "population", "gnp", "price", "age", "capacity", "salary", "budget",
    "rank", "score", "weight", "height", "area", "speed", "mileage",
    "revenue", "attendance", "rating", "stock", "duration", "horsepower",
)
TEXT_COLUMN_BANK = (
    "name", "city", "continent", "country", "color", "category", "status",
    "brand", "decor", "language", "genre", "region", "nationality", "grade",
    "district",
)
TEXT_VALUE_BANK = ("asia", "europe", "africa", "red", "blue", "green",
                   "modern", "classic", "north", "south")
NUMERIC_VALUE_BANK = ("7", "10", "25", "42", "100", "250")

_STYLES = {
    "main": {
        "select": "what is the",
        "select_their": "what is their",
        "star": "show everything of",
        "agg": {"count": "number of", "sum": "total", "avg": "average",
                "max": "largest", "min": "smallest"},
    },
    "alt": {
        "select": "list the",
        "select_their": "list their",
        "star": "display every record of",
        "agg": {"count": "count of", "sum": "sum of", "avg": "mean",
                "max": "maximum", "min": "minimum"},
    },
}
_OP_WORDS = {
    "=": "is", ">": "is greater than", "<": "is less than",
    ">=": "is at least", "<=": "is at most", "!=": "is not", "LIKE": "is like",
}


class PhenomenonInapplicable(ValueError):
    """The requested phenomenon cannot corrupt this turn."""


# ---------------------------------------------------------------------------
# Latent query cores and rendering.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QueryCore:
    """The question's content; the group column is kept out of `items`."""

    tables: tuple[int, ...]
    star: bool
    items: tuple[sc.SelectItem, ...]
    connective: str | None
    conds: tuple[sc.Condition, ...]
    group: int | None
    order: sc.OrderBy | None

    def to_ast(self, convention: str) -> sc.SqlAst:
        items = self.items
        if self.group is not None and convention == CONVENTION_GROUP_IN_SELECT:
            items = (sc.SelectItem(None, self.group),) + items
        return sc.SqlAst(self.tables, self.star, items, self.connective,
                         self.conds, self.group, self.order)


@dataclass(frozen=True)
class TurnPlan:
    core: QueryCore
    question: str


def _words(identifier: str) -> str:
    return identifier.replace("_", " ").lower()


def _col_words(schema: sc.Schema, col: int) -> str:
    return _words(schema.columns[col].name)


def _item_phrase(item: sc.SelectItem, schema: sc.Schema, style: dict) -> str:
    base = _col_words(schema, item.column)
    return f"{style['agg'][item.agg]} {base}" if item.agg else base


def _items_phrase(items, schema: sc.Schema, style: dict) -> str:
    return " and the ".join(_item_phrase(i, schema, style) for i in items)


def _cond_phrase(cond: sc.Condition, schema: sc.Schema) -> str:
    return f"{_col_words(schema, cond.column)} {_OP_WORDS[cond.op]} value"


def _tables_phrase(tables, schema: sc.Schema) -> str:
    return " joined with ".join(_words(schema.tables[t]) for t in tables)


def render_question(core: QueryCore, schema: sc.Schema, style: str = "main") -> str:
    st = _STYLES[style]
    if core.star:
        text = f"{st['star']} {_tables_phrase(core.tables, schema)}"
    else:
        text = (f"{st['select']} {_items_phrase(core.items, schema, st)} "
                f"of {_tables_phrase(core.tables, schema)}")
    if core.conds:
        joiner = f" {core.connective.lower()} "
        text += " where " + joiner.join(_cond_phrase(c, schema) for c in core.conds)
    if core.group is not None:
        text += f" for each {_col_words(schema, core.group)}"
    if core.order is not None:
        text += (f" ordered by {_col_words(schema, core.order.column)} "
                 f"{'descending' if core.order.descending else 'ascending'}")
        if core.order.limit:
            text += " limited to 1"
    return text


# ---------------------------------------------------------------------------
# Template inverse (the oracle for corpus consistency).
# ---------------------------------------------------------------------------


def _find_marker(tokens: list[str], marker: list[str]) -> int:
    for i in range(len(tokens) - len(marker) + 1):
        if tokens[i:i + len(marker)] == marker:
            return i
    return -1


def _col_by_words(words: list[str], schema: sc.Schema, tables) -> int:
    listed = set(tables)
    for i, col in enumerate(schema.columns):
        if col.table in listed and tokenize(_words(col.name)) == words:
            return i
    raise ValueError(f"no column matching {' '.join(words)!r}")


def _split_on(tokens: list[str], sep: list[str]) -> list[list[str]]:
    parts, cur, i = [], [], 0
    while i < len(tokens):
        if tokens[i:i + len(sep)] == sep:
            parts.append(cur)
            cur = []
            i += len(sep)
        else:
            cur.append(tokens[i])
            i += 1
    parts.append(cur)
    return parts


def template_inverse(question: str, schema: sc.Schema, style: str = "main",
                     convention: str = CONVENTION_GROUP_IN_SELECT) -> sc.SqlAst:
    """Exact inverse of render_question; raises ValueError on non-template text."""
    st = _STYLES[style]
    tokens = tokenize(question)

    order_words = None
    descending, limit = False, None
    pos = _find_marker(tokens, ["ordered", "by"])
    if pos >= 0:
        tail = tokens[pos + 2:]
        if tail[-3:] == ["limited", "to", "1"]:
            limit, tail = 1, tail[:-3]
        descending = tail[-1] == "descending"
        order_words = tail[:-1]
        tokens = tokens[:pos]

    group_words = None
    pos = _find_marker(tokens, ["for", "each"])
    if pos >= 0:
        group_words = tokens[pos + 2:]
        tokens = tokens[:pos]

    conds_tokens = None
    pos = _find_marker(tokens, ["where"])
    if pos >= 0:
        conds_tokens = tokens[pos + 1:]
        tokens = tokens[:pos]

    star_prefix = tokenize(st["star"])
    select_prefix = tokenize(st["select"])
    if tokens[:len(star_prefix)] == star_prefix:
        star, items_tokens, table_tokens = True, [], tokens[len(star_prefix):]
    elif tokens[:len(select_prefix)] == select_prefix:
        star = False
        rest = tokens[len(select_prefix):]
        # schema-item words never include "of", so the last "of" splits the
        # item list from the table phrase; agg words may contain "of"
        of_positions = [i for i, t in enumerate(rest) if t == "of"]
        split_at = of_positions[-1]
        items_tokens, table_tokens = rest[:split_at], rest[split_at + 1:]
    else:
        raise ValueError(f"question does not match the {style!r} template: {question!r}")

    tables = tuple(schema.table_index("_".join(part))
                   for part in _split_on(table_tokens, ["joined", "with"]))

    items = []
    if not star:
        agg_by_words = sorted(((tokenize(words), agg) for agg, words in st["agg"].items()),
                              key=lambda kv: -len(kv[0]))
        for part in _split_on(items_tokens, ["and", "the"]):
            agg = None
            for words, name in agg_by_words:
                if part[:len(words)] == words:
                    agg, part = name, part[len(words):]
                    break
            items.append(sc.SelectItem(agg, _col_by_words(part, schema, tables)))

    connective, conds = None, []
    if conds_tokens:
        connective = "OR" if "or" in _strip_cond_words(conds_tokens) else "AND"
        for part in _split_on(conds_tokens, [connective.lower()]):
            if part[-1] != "value":
                raise ValueError(f"condition does not end in 'value': {' '.join(part)!r}")
            body = part[:-1]
            is_pos = body.index("is")
            col = _col_by_words(body[:is_pos], schema, tables)
            op_words = body[is_pos:]
            op = next(op for op, words in _OP_WORDS.items() if tokenize(words) == op_words)
            conds.append(sc.Condition(col, op))

    group = _col_by_words(group_words, schema, tables) if group_words is not None else None
    order = None
    if order_words is not None:
        order = sc.OrderBy(_col_by_words(order_words, schema, tables), descending, limit)

    core = QueryCore(tables, star, tuple(items), connective, tuple(conds), group, order)
    ast = core.to_ast(convention)
    sc.validate_ast(ast, schema)
    return ast


def _strip_cond_words(tokens: list[str]) -> list[str]:
    """Connective tokens are the 'and'/'or' occurrences directly after 'value'."""
    out = []
    for i, t in enumerate(tokens):
        if t in ("and", "or") and i > 0 and tokens[i - 1] == "value":
            out.append(t)
    return out


# ---------------------------------------------------------------------------
# Schema generation.
# ---------------------------------------------------------------------------


def content_columns(schema: sc.Schema, tables) -> list[int]:
    """Columns usable in questions: not primary keys, not foreign keys."""
    keyed = set(schema.primary_keys)
    for src, dst in schema.foreign_keys:
        keyed.add(src)
        keyed.add(dst)
    listed = set(tables)
    return [i for i, c in enumerate(schema.columns) if c.table in listed and i not in keyed]


def gen_schema(seed, n_tables: int = 2, cols_per_table: int = 3,
               schema_id: str | None = None, bank_offset: int = 0) -> sc.Schema:
    """Themed schema with an FK chain through consecutive tables."""
    if n_tables < 1:
        raise ValueError("need at least one table")
    rng = np.random.default_rng(seed)
    table_pool = TABLE_BANK[bank_offset:] + TABLE_BANK[:bank_offset]
    tables = tuple(str(t) for t in rng.choice(table_pool, size=n_tables, replace=False))

    numeric_pool = list(rng.permutation(NUMERIC_COLUMN_BANK))
    text_pool = list(rng.permutation(TEXT_COLUMN_BANK))

    columns: list[sc.Column] = []
    primary_keys: list[int] = []
    foreign_keys: list[tuple[int, int]] = []
    values: dict[int, tuple[str, ...]] = {}
    for t, _ in enumerate(tables):
        primary_keys.append(len(columns))
        columns.append(sc.Column("id", t, "number"))
        if t > 0:
            fk_idx = len(columns)
            columns.append(sc.Column(f"{tables[t - 1]}_id", t, "number"))
            foreign_keys.append((fk_idx, primary_keys[t - 1]))
        picks = [("number", numeric_pool.pop()), ("text", text_pool.pop())]
        for _ in range(max(0, cols_per_table - 2)):
            pool, ctype = (numeric_pool, "number") if rng.random() < 0.5 else (text_pool, "text")
            picks.append((ctype, pool.pop()))
        for ctype, name in picks:
            idx = len(columns)
            columns.append(sc.Column(name, t, ctype))
            bank = NUMERIC_VALUE_BANK if ctype == "number" else TEXT_VALUE_BANK
            values[idx] = tuple(str(v) for v in rng.choice(bank, size=3, replace=False))

    return sc.Schema(schema_id or f"syn-{seed}", tables, tuple(columns),
                     tuple(primary_keys), tuple(foreign_keys), values)


# ---------------------------------------------------------------------------
# Core sampling and per-turn mutations.
# ---------------------------------------------------------------------------


def _sample_core(schema: sc.Schema, rng: np.random.Generator,
                 allow_star: bool = True) -> QueryCore:
    tables = [int(rng.integers(len(schema.tables)))]
    if rng.random() < 0.2:
        frontier = sorted(schema.fk_adjacent_tables(tables[0]))
        if frontier:
            tables.append(int(rng.choice(frontier)))
    cols = content_columns(schema, tables)
    numeric = [c for c in cols if schema.columns[c].ctype == "number"]
    text = [c for c in cols if schema.columns[c].ctype == "text"]

    star = allow_star and rng.random() < 0.06
    items: list[sc.SelectItem] = []
    if not star:
        n_items = 1 + int(rng.random() < 0.3)
        picked = [int(c) for c in rng.choice(cols, size=min(n_items, len(cols)), replace=False)]
        for col in picked:
            agg = None
            if rng.random() < 0.25:
                agg = "count" if schema.columns[col].ctype == "text" else str(rng.choice(sc.AGGREGATORS))
            items.append(sc.SelectItem(agg, col))

    connective, conds = None, []
    r = rng.random()
    n_conds = 0 if r < 0.45 else (1 if r < 0.85 else 2)
    if n_conds:
        connective = "AND" if rng.random() < 0.5 else "OR"
        for col in rng.choice(cols, size=min(n_conds, len(cols)), replace=False):
            col = int(col)
            ops = ("=", "!=", "LIKE") if schema.columns[col].ctype == "text" else \
                ("=", ">", "<", ">=", "<=", "!=")
            conds.append(sc.Condition(col, str(rng.choice(ops))))

    group = None
    item_cols = {i.column for i in items}
    group_candidates = [c for c in text if c not in item_cols]
    if not star and group_candidates and rng.random() < 0.18:
        group = int(rng.choice(group_candidates))

    order = None
    if numeric and rng.random() < 0.3:
        order = sc.OrderBy(int(rng.choice(numeric)), bool(rng.random() < 0.5),
                           1 if rng.random() < 0.5 else None)
    return QueryCore(tuple(tables), star, tuple(items), connective, tuple(conds), group, order)


def gen_single_turn(schema: sc.Schema, seed, style: str = "main",
                    convention: str = CONVENTION_GROUP_IN_SELECT):
    """A standalone (complete question, gold AST) pair."""
    core = _sample_core(schema, np.random.default_rng(seed))
    ast = core.to_ast(convention)
    sc.validate_ast(ast, schema)
    return render_question(core, schema, style), ast


def _mutate_add_condition(core: QueryCore, schema: sc.Schema, rng) -> QueryCore:
    if len(core.conds) >= sc.MAX_CONDITIONS:
        raise PhenomenonInapplicable("condition list already at the cap")
    cols = content_columns(schema, core.tables)
    fresh = [c for c in cols if c not in {x.column for x in core.conds}]
    pool = fresh or cols
    for _ in range(10):
        col = int(rng.choice(pool))
        ops = ("=", "!=", "LIKE") if schema.columns[col].ctype == "text" else \
            ("=", ">", "<", ">=", "<=", "!=")
        cond = sc.Condition(col, str(rng.choice(ops)))
        if cond not in core.conds:
            connective = core.connective or ("AND" if rng.random() < 0.5 else "OR")
            return replace(core, connective=connective, conds=core.conds + (cond,))
    raise PhenomenonInapplicable("no fresh condition available")


def _mutate_change_column(core: QueryCore, schema: sc.Schema, rng) -> QueryCore:
    if core.star or not core.items:
        raise PhenomenonInapplicable("no select item to substitute")
    idx = int(rng.integers(len(core.items)))
    old = core.items[idx]
    taken = {i.column for i in core.items} | ({core.group} if core.group is not None else set())
    candidates = [c for c in content_columns(schema, core.tables) if c not in taken]
    if not candidates:
        raise PhenomenonInapplicable("no substitute column available")
    new_col = int(rng.choice(candidates))
    items = list(core.items)
    items[idx] = sc.SelectItem(old.agg, new_col)
    return replace(core, items=tuple(items))


def _mutate_change_aggregate(core: QueryCore, schema: sc.Schema, rng) -> QueryCore:
    if core.star or not core.items:
        raise PhenomenonInapplicable("no select item to re-aggregate")
    order = [int(i) for i in rng.permutation(len(core.items))]
    for idx in order:
        old = core.items[idx]
        if schema.columns[old.column].ctype == "text":
            choices = [a for a in ("count",) if a != old.agg]
        else:
            choices = [a for a in sc.AGGREGATORS if a != old.agg]
        if choices:
            items = list(core.items)
            items[idx] = sc.SelectItem(str(rng.choice(choices)), old.column)
            return replace(core, items=tuple(items))
    raise PhenomenonInapplicable("no aggregate substitution possible")


def _mutate_add_superlative(core: QueryCore, schema: sc.Schema, rng) -> QueryCore:
    if core.order is not None or core.star or not core.items:
        raise PhenomenonInapplicable("turn cannot take a fresh superlative")
    first = core.items[0]
    if first.agg is not None or schema.columns[first.column].ctype != "number":
        raise PhenomenonInapplicable("first select item is not a plain numeric column")
    order = sc.OrderBy(first.column, bool(rng.random() < 0.5), 1)
    return replace(core, order=order)


def _mutate_join_column(core: QueryCore, schema: sc.Schema, rng) -> QueryCore:
    if core.star or not core.items or len(core.tables) != 1:
        raise PhenomenonInapplicable("bridging needs a single-table turn with items")
    neighbors = sorted(schema.fk_adjacent_tables(core.tables[0]))
    if not neighbors:
        raise PhenomenonInapplicable("no FK neighbor to bridge to")
    t2 = int(rng.choice(neighbors))
    candidates = content_columns(schema, [t2])
    if not candidates:
        raise PhenomenonInapplicable("neighbor table has no content columns")
    items = list(core.items)
    items[0] = sc.SelectItem(items[0].agg, int(rng.choice(candidates)))
    return replace(core, tables=core.tables + (t2,), items=tuple(items))


_MUTATION_FOR = {
    "CONTINUATION": _mutate_add_condition,
    "DEMONSTRATIVE_PRONOUN": _mutate_change_column,
    "POSSESSIVE_DETERMINER": _mutate_change_column,
    "DEFINITE_NOUN_PHRASE": _mutate_change_column,
    "SUBST_EXPLICIT_SCHEMA": _mutate_change_column,
    "SUBST_IMPLICIT_SCHEMA": _mutate_change_column,
    "SUBST_EXPLICIT_OPERATOR": _mutate_change_aggregate,
    "SUBST_IMPLICIT_OPERATOR": _mutate_change_aggregate,
    "ONE_ANAPHORA": _mutate_add_superlative,
    "BRIDGING_ANAPHORA": _mutate_join_column,
}


# ---------------------------------------------------------------------------
# Phenomenon application (complete question -> corrupted utterance).
# ---------------------------------------------------------------------------


def _require(condition: bool, why: str) -> None:
    if not condition:
        raise PhenomenonInapplicable(why)


def _single_item_change(cur: QueryCore, prev: QueryCore) -> int:
    _require(not cur.star and not prev.star and len(cur.items) == len(prev.items),
             "select lists not comparable")
    diff = [i for i, (a, b) in enumerate(zip(cur.items, prev.items)) if a != b]
    _require(len(diff) == 1, "expected exactly one substituted select item")
    return diff[0]


def _context_frame_unchanged(cur: QueryCore, prev: QueryCore) -> None:
    _require(cur.tables == prev.tables and cur.conds == prev.conds
             and cur.connective == prev.connective and cur.group == prev.group
             and cur.order == prev.order, "restriction context changed")


def apply_phenomenon(current: TurnPlan, context: list[TurnPlan], phenomenon: str,
                     schema: sc.Schema, style: str = "main") -> str:
    """Corrupt the current complete question per one taxonomy phenomenon.

    Raises PhenomenonInapplicable when the relation between this turn and the
    previous one does not license the phenomenon.
    """
    _require(bool(context), "first turns cannot be corrupted")
    if phenomenon not in PHENOMENON_TYPES:
        raise ValueError(f"unknown phenomenon {phenomenon!r}")
    st = _STYLES[style]
    cur, prev = current.core, context[-1].core

    if phenomenon == "CONTINUATION":
        _require(cur.conds[:-1] == prev.conds and len(cur.conds) == len(prev.conds) + 1,
                 "turn does not extend the previous conditions")
        _require(cur.tables == prev.tables and cur.items == prev.items
                 and cur.star == prev.star and cur.group == prev.group
                 and cur.order == prev.order, "continuation must keep the rest of the turn")
        corrupted = f"also {_cond_phrase(cur.conds[-1], schema)}"

    elif phenomenon == "DEMONSTRATIVE_PRONOUN":
        _context_frame_unchanged(cur, prev)
        _single_item_change(cur, prev)
        corrupted = f"{st['select']} {_items_phrase(cur.items, schema, st)} of those"

    elif phenomenon == "POSSESSIVE_DETERMINER":
        _context_frame_unchanged(cur, prev)
        _single_item_change(cur, prev)
        corrupted = f"{st['select_their']} {_items_phrase(cur.items, schema, st)}"

    elif phenomenon == "DEFINITE_NOUN_PHRASE":
        _context_frame_unchanged(cur, prev)
        _single_item_change(cur, prev)
        _require(bool(cur.conds), "definite reference needs a restricted prior set")
        corrupted = (f"{st['select']} {_items_phrase(cur.items, schema, st)} "
                     f"of the {_words(schema.tables[cur.tables[0]])}")

    elif phenomenon == "ONE_ANAPHORA":
        _require(prev.order is None and cur.order is not None and cur.order.limit == 1,
                 "turn must add a limit-1 superlative")
        _require(cur.items == prev.items and cur.tables == prev.tables
                 and cur.conds == prev.conds, "superlative must be the only change")
        _require(bool(cur.items) and cur.items[0].column == cur.order.column,
                 "superlative column must echo the first select item")
        corrupted = f"what about the {'largest' if cur.order.descending else 'smallest'} one"

    elif phenomenon == "BRIDGING_ANAPHORA":
        _require(len(cur.tables) == len(prev.tables) + 1
                 and cur.tables[:-1] == prev.tables, "turn must bridge to one new table")
        joined = f" joined with {_words(schema.tables[cur.tables[-1]])}"
        _require(joined in current.question, "question does not mention the bridged table")
        corrupted = current.question.replace(joined, "", 1)

    elif phenomenon in ("SUBST_EXPLICIT_SCHEMA", "SUBST_IMPLICIT_SCHEMA"):
        _context_frame_unchanged(cur, prev)
        idx = _single_item_change(cur, prev)
        _require(cur.items[idx].agg == prev.items[idx].agg
                 and cur.items[idx].column != prev.items[idx].column,
                 "schema substitution must swap the column only")
        new = _col_words(schema, cur.items[idx].column)
        if phenomenon == "SUBST_EXPLICIT_SCHEMA":
            old = _col_words(schema, prev.items[idx].column)
            corrupted = f"what about the {new} instead of the {old}"
        else:
            corrupted = f"what about the {new}"

    else:  # operator substitutions
        _context_frame_unchanged(cur, prev)
        idx = _single_item_change(cur, prev)
        _require(cur.items[idx].column == prev.items[idx].column
                 and cur.items[idx].agg != prev.items[idx].agg,
                 "operator substitution must swap the aggregate only")
        new = _item_phrase(cur.items[idx], schema, st)
        if phenomenon == "SUBST_EXPLICIT_OPERATOR":
            old = _item_phrase(prev.items[idx], schema, st)
            corrupted = f"what about the {new} instead of the {old}"
        else:
            corrupted = f"what about the {new} among them"

    _require(corrupted != current.question, "corruption left the question unchanged")
    return corrupted


# ---------------------------------------------------------------------------
# Dialogues and corpora.
# ---------------------------------------------------------------------------


@dataclass
class Turn:
    utterance: str
    gold_rewrite: str | None
    gold_sql: str
    gold_actions: tuple[str, ...]
    phenomena: tuple[str, ...]
    ast: sc.SqlAst | None = None


@dataclass
class ToyDialogue:
    schema_id: str
    turns: list[Turn]


def _make_turn(utterance: str, plan: TurnPlan, schema: sc.Schema, convention: str,
               phenomena: tuple[str, ...]) -> Turn:
    ast = plan.core.to_ast(convention)
    actions = sc.linearize(ast, schema)
    return Turn(utterance=utterance, gold_rewrite=plan.question,
                gold_sql=sc.render(ast, schema),
                gold_actions=tuple(str(a) for a in actions),
                phenomena=phenomena, ast=ast)


def gen_dialogue(schema: sc.Schema, n_turns: int, seed, style: str = "main",
                 convention: str = CONVENTION_GROUP_IN_SELECT,
                 phenomenon_weights: dict[str, float] | None = None) -> ToyDialogue:
    """One dialogue: complete first turn, then phenomenon-corrupted follow-ups."""
    if n_turns < 1:
        raise ValueError("need at least one turn")
    rng = np.random.default_rng(seed)
    weights = np.array([(phenomenon_weights or {}).get(p, 1.0) for p in PHENOMENON_TYPES])
    weights = weights / weights.sum()

    core = _sample_core(schema, rng, allow_star=False)
    plan = TurnPlan(core, render_question(core, schema, style))
    plans = [plan]
    turns = [_make_turn(plan.question, plan, schema, convention, ())]

    for _ in range(1, n_turns):
        for _attempt in range(80):
            phenomenon = str(rng.choice(PHENOMENON_TYPES, p=weights))
            try:
                new_core = _MUTATION_FOR[phenomenon](plans[-1].core, schema, rng)
                new_plan = TurnPlan(new_core, render_question(new_core, schema, style))
                corrupted = apply_phenomenon(new_plan, plans, phenomenon, schema, style)
                break
            except PhenomenonInapplicable:
                continue
        else:
            raise RuntimeError("no phenomenon applicable after 80 attempts")
        plans.append(new_plan)
        turns.append(_make_turn(corrupted, new_plan, schema, convention, (phenomenon,)))
    return ToyDialogue(schema.schema_id, turns)


@dataclass(frozen=True)
class CorpusConfig:
    n_schemas: int = 20
    dialogues_per_schema: int = 30
    n_tables: int = 2
    cols_per_table: int = 3
    p_four_turns: float = 0.35
    seed: int = 0
    style: str = "main"
    convention: str = CONVENTION_GROUP_IN_SELECT
    bank_offset: int = 0
    single_turn: bool = False
    phenomenon_weights: dict[str, float] | None = field(default=None, hash=False)


def gen_corpus(cfg: CorpusConfig, schemas: list[sc.Schema] | None = None):
    """Schemas plus dialogues; per-dialogue seeds derive from the master seed."""
    if schemas is None:
        schemas = [gen_schema((cfg.seed, i), n_tables=cfg.n_tables,
                              cols_per_table=cfg.cols_per_table,
                              schema_id=f"syn-{cfg.seed}-{i}", bank_offset=cfg.bank_offset)
                   for i in range(cfg.n_schemas)]
    dialogues = []
    for i, schema in enumerate(schemas):
        for j in range(cfg.dialogues_per_schema):
            taster = np.random.default_rng((cfg.seed, i, j, 7))
            n_turns = 1 if cfg.single_turn else 3 + int(taster.random() < cfg.p_four_turns)
            dialogues.append(gen_dialogue(schema, n_turns, (cfg.seed, i, j),
                                          style=cfg.style, convention=cfg.convention,
                                          phenomenon_weights=cfg.phenomenon_weights))
    return schemas, dialogues


def split(corpus: list[ToyDialogue], labeled_fraction: float, seed):
    """Dialogue-level split; the unlabeled side hides gold rewrites, keeps SQL."""
    if not 0.0 < labeled_fraction < 1.0:
        raise ValueError("labeled fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(corpus))
    n_labeled = int(round(labeled_fraction * len(corpus)))
    if n_labeled == 0 or n_labeled == len(corpus):
        raise ValueError("split would leave one side empty")
    labeled_idx = sorted(int(i) for i in order[:n_labeled])
    unlabeled_idx = sorted(int(i) for i in order[n_labeled:])
    labeled = [corpus[i] for i in labeled_idx]
    unlabeled = [ToyDialogue(corpus[i].schema_id,
                             [replace(t, gold_rewrite=None) for t in corpus[i].turns])
                 for i in unlabeled_idx]
    return labeled, unlabeled


def save_corpus(path, dialogues: list[ToyDialogue]) -> None:
    with open(path, "w") as fh:
        for d in dialogues:
            record = {
                "v": 1,
                "schema_id": d.schema_id,
                "turns": [{
                    "x": t.utterance,
                    "gold_rewrite": t.gold_rewrite,
                    "gold_sql_text": t.gold_sql,
                    "gold_actions": list(t.gold_actions),
                    "phenomena": list(t.phenomena),
                } for t in d.turns],
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def load_corpus(path, schemas: dict[str, sc.Schema]) -> list[ToyDialogue]:
    dialogues = []
    with open(path) as fh:
        for line in fh:
            record = json.loads(line)
            if record.get("v") != 1:
                raise ValueError(f"unsupported corpus record version {record.get('v')!r}")
            schema = schemas[record["schema_id"]]
            turns = []
            for t in record["turns"]:
                actions = [sc.action_from_str(a) for a in t["gold_actions"]]
                turns.append(Turn(
                    utterance=t["x"], gold_rewrite=t["gold_rewrite"],
                    gold_sql=t["gold_sql_text"], gold_actions=tuple(t["gold_actions"]),
                    phenomena=tuple(t["phenomena"]),
                    ast=sc.delinearize(actions, schema)))
            dialogues.append(ToyDialogue(record["schema_id"], turns))
    return dialogues


def iter_turns(dialogues: list[ToyDialogue]):
    """Yield (dialogue, turn_index, turn, history_utterances) over all turns."""
    for d in dialogues:
        history: list[str] = []
        for i, turn in enumerate(d.turns):
            yield d, i, turn, list(history)
            history.append(turn.utterance)


def corpus_texts(dialogues: list[ToyDialogue]) -> list[str]:
    """All visible utterances and rewrites (for vocabulary construction)."""
    out = []
    for d in dialogues:
        for t in d.turns:
            out.append(t.utterance)
            if t.gold_rewrite is not None:
                out.append(t.gold_rewrite)
    return out

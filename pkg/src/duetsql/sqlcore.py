"""Toy relational schemas and the SQL abstract-syntax layer.

The grammar is deliberately small: single-level WHERE under one connective,
optional GROUP BY / ORDER BY with LIMIT 1, FK-chained joins, and a fixed
aggregator/comparison vocabulary. ASTs linearize to a pre-order action
sequence (ApplyRule / SelectColumn / SelectTable) via depth-first traversal;
`DerivationState` is the single source of truth for which actions are legal
at each step, shared by the delinearizer and the constrained decoder.

FROM is derived before SELECT so that every column slot can be masked to
columns of already-chosen tables, making constrained decoding schema-safe.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

GRAMMAR_VERSION = "1"

AGGREGATORS = ("count", "max", "min", "avg", "sum")
COMPARISON_OPS = ("=", ">", "<", ">=", "<=", "!=", "LIKE")
VALUE_PLACEHOLDER = "'value'"

# arity bounds make every derivation finite, so greedy constrained decoding
# always terminates under the step cap
MAX_SELECT_ITEMS = 4
MAX_CONDITIONS = 4


class SchemaError(ValueError):
    """Schema or AST violates a structural invariant."""


class DerivationError(ValueError):
    """An action sequence cannot be extended or completed."""

    def __init__(self, message: str, position: int | None = None, legal=None):
        super().__init__(message)
        self.position = position
        self.legal = legal


class IncompleteDerivationError(DerivationError):
    pass


# ---------------------------------------------------------------------------
# Schema.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Column:
    name: str
    table: int
    ctype: str  # "number" | "text"


@dataclass
class Schema:
    schema_id: str
    tables: tuple[str, ...]
    columns: tuple[Column, ...]
    primary_keys: tuple[int, ...]  # one column index per table
    foreign_keys: tuple[tuple[int, int], ...]  # (source col, target col)
    values: dict[int, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        self.tables = tuple(self.tables)
        self.columns = tuple(self.columns)
        self.primary_keys = tuple(self.primary_keys)
        self.foreign_keys = tuple(tuple(fk) for fk in self.foreign_keys)
        self.validate()

    def validate(self) -> None:
        nt, nc = len(self.tables), len(self.columns)
        if nt == 0:
            raise SchemaError("schema has no tables")
        for col in self.columns:
            if not 0 <= col.table < nt:
                raise SchemaError(f"column {col.name!r} owned by unknown table {col.table}")
        per_table = [0] * nt
        for col in self.columns:
            per_table[col.table] += 1
        if any(n == 0 for n in per_table):
            raise SchemaError("every table needs at least one column")
        if len(self.primary_keys) != nt:
            raise SchemaError("exactly one primary key per table required")
        for t, pk in enumerate(self.primary_keys):
            if not 0 <= pk < nc or self.columns[pk].table != t:
                raise SchemaError(f"primary key {pk} does not belong to table {t}")
        for src, dst in self.foreign_keys:
            if not (0 <= src < nc and 0 <= dst < nc):
                raise SchemaError("foreign key references unknown column")
            if self.columns[src].table == self.columns[dst].table:
                raise SchemaError("foreign key must connect distinct tables")

    def columns_of(self, table: int) -> list[int]:
        return [i for i, c in enumerate(self.columns) if c.table == table]

    def column_full_name(self, col: int) -> str:
        c = self.columns[col]
        return f"{self.tables[c.table]}.{c.name}"

    def table_index(self, name: str) -> int:
        return self.tables.index(name)

    def column_index(self, table: str, name: str) -> int:
        t = self.table_index(table)
        for i, c in enumerate(self.columns):
            if c.table == t and c.name == name:
                return i
        raise SchemaError(f"no column {table}.{name}")

    def fk_adjacent_tables(self, table: int) -> set[int]:
        out = set()
        for src, dst in self.foreign_keys:
            ts, td = self.columns[src].table, self.columns[dst].table
            if ts == table:
                out.add(td)
            if td == table:
                out.add(ts)
        return out

    def to_dict(self) -> dict:
        return {
            "format": "duetsql-schema/v1",
            "schema_id": self.schema_id,
            "tables": list(self.tables),
            "columns": [{"name": c.name, "table": c.table, "type": c.ctype} for c in self.columns],
            "primary_keys": list(self.primary_keys),
            "foreign_keys": [list(fk) for fk in self.foreign_keys],
            "values": {str(k): list(v) for k, v in sorted(self.values.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Schema":
        if d.get("format") != "duetsql-schema/v1":
            raise SchemaError(f"unsupported schema format {d.get('format')!r}")
        return cls(
            schema_id=d["schema_id"],
            tables=tuple(d["tables"]),
            columns=tuple(Column(c["name"], c["table"], c["type"]) for c in d["columns"]),
            primary_keys=tuple(d["primary_keys"]),
            foreign_keys=tuple(tuple(fk) for fk in d["foreign_keys"]),
            values={int(k): tuple(v) for k, v in d.get("values", {}).items()},
        )


def schemas_equal(a: Schema, b: Schema) -> bool:
    return a.to_dict() == b.to_dict()


def save_schemas(path, schemas: list[Schema]) -> None:
    doc = {"format": "duetsql-schemas/v1", "schemas": [s.to_dict() for s in schemas]}
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_schemas(path) -> dict[str, Schema]:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != "duetsql-schemas/v1":
        raise SchemaError("unsupported schemas file")
    schemas = [Schema.from_dict(d) for d in doc["schemas"]]
    return {s.schema_id: s for s in schemas}


# ---------------------------------------------------------------------------
# AST.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SelectItem:
    agg: str | None
    column: int


@dataclass(frozen=True)
class Condition:
    column: int
    op: str


@dataclass(frozen=True)
class OrderBy:
    column: int
    descending: bool
    limit: int | None


@dataclass(frozen=True)
class SqlAst:
    tables: tuple[int, ...]
    select_star: bool
    select_items: tuple[SelectItem, ...]
    where_connective: str | None
    where: tuple[Condition, ...]
    group_by: int | None
    order_by: OrderBy | None


def validate_ast(ast: SqlAst, schema: Schema) -> None:
    if not ast.tables:
        raise SchemaError("query references no tables")
    if len(set(ast.tables)) != len(ast.tables):
        raise SchemaError("duplicate table in join path")
    for i, t in enumerate(ast.tables):
        if not 0 <= t < len(schema.tables):
            raise SchemaError(f"unknown table index {t}")
        if i > 0 and not (schema.fk_adjacent_tables(t) & set(ast.tables[:i])):
            raise SchemaError(f"table {schema.tables[t]!r} not FK-connected to the join path")
    listed = set(ast.tables)

    def check_col(col: int, where: str) -> None:
        if not 0 <= col < len(schema.columns):
            raise SchemaError(f"unknown column index {col} in {where}")
        if schema.columns[col].table not in listed:
            raise SchemaError(f"column {schema.column_full_name(col)} not in listed tables ({where})")

    if ast.select_star:
        if ast.select_items:
            raise SchemaError("star select cannot carry items")
    else:
        if not ast.select_items:
            raise SchemaError("empty select")
        if len(ast.select_items) > MAX_SELECT_ITEMS:
            raise SchemaError(f"more than {MAX_SELECT_ITEMS} select items")
        for item in ast.select_items:
            if item.agg is not None and item.agg not in AGGREGATORS:
                raise SchemaError(f"unknown aggregator {item.agg!r}")
            check_col(item.column, "select")
    if (ast.where_connective is None) != (len(ast.where) == 0):
        raise SchemaError("where connective must be present exactly when conditions are")
    if ast.where_connective is not None and ast.where_connective not in ("AND", "OR"):
        raise SchemaError(f"bad connective {ast.where_connective!r}")
    if len(ast.where) > MAX_CONDITIONS:
        raise SchemaError(f"more than {MAX_CONDITIONS} where conditions")
    for cond in ast.where:
        if cond.op not in COMPARISON_OPS:
            raise SchemaError(f"unknown comparison {cond.op!r}")
        check_col(cond.column, "where")
    if ast.group_by is not None:
        check_col(ast.group_by, "group by")
    if ast.order_by is not None:
        check_col(ast.order_by.column, "order by")
        if ast.order_by.limit is not None and ast.order_by.limit <= 0:
            raise SchemaError("limit must be positive")


# ---------------------------------------------------------------------------
# Grammar.
# ---------------------------------------------------------------------------

# Slot symbols consumed by SELECT_COLUMN / SELECT_TABLE actions.
TABLE_FIRST = "TABLE_FIRST"
TABLE_MORE = "TABLE_MORE"
COL_ITEM = "COL_ITEM"
COL_COND = "COL_COND"
COL_GROUP = "COL_GROUP"
COL_ORDER = "COL_ORDER"
_COLUMN_SLOTS = {COL_ITEM, COL_COND, COL_GROUP, COL_ORDER}
_TABLE_SLOTS = {TABLE_FIRST, TABLE_MORE}


@dataclass(frozen=True)
class Rule:
    rule_id: int
    lhs: str
    label: str
    rhs: tuple[str, ...]


def _build_grammar() -> tuple[Rule, ...]:
    rules: list[Rule] = []

    def rule(lhs: str, label: str, *rhs: str) -> None:
        rules.append(Rule(len(rules), lhs, label, tuple(rhs)))

    rule("sql", "sql_query", TABLE_FIRST, "from_tail", "select", "where", "group", "order")
    rule("from_tail", "from_join", TABLE_MORE, "from_tail")
    rule("from_tail", "from_done")
    rule("select", "select_star")
    rule("select", "select_items", "items")
    rule("items", "items_more", "item", "items")
    rule("items", "items_one", "item")
    rule("item", "item_plain", COL_ITEM)
    rule("item", "item_agg", "agg", COL_ITEM)
    for agg in AGGREGATORS:
        rule("agg", f"agg_{agg}")
    rule("where", "where_none")
    rule("where", "where_and", "conds")
    rule("where", "where_or", "conds")
    rule("conds", "conds_more", "cond", "conds")
    rule("conds", "conds_one", "cond")
    for op in COMPARISON_OPS:
        rule("cond", f"cond_{op}", COL_COND)
    rule("group", "group_none")
    rule("group", "group_by", COL_GROUP)
    rule("order", "order_none")
    rule("order", "order_asc", COL_ORDER, "limit")
    rule("order", "order_desc", COL_ORDER, "limit")
    rule("limit", "limit_none")
    rule("limit", "limit_one")
    return tuple(rules)


GRAMMAR: tuple[Rule, ...] = _build_grammar()
NUM_RULES = len(GRAMMAR)
_RULES_BY_LHS: dict[str, tuple[Rule, ...]] = {}
for _r in GRAMMAR:
    _RULES_BY_LHS.setdefault(_r.lhs, ())
    _RULES_BY_LHS[_r.lhs] = _RULES_BY_LHS[_r.lhs] + (_r,)
_RULE_BY_LABEL = {r.label: r for r in GRAMMAR}


def rule_by_label(label: str) -> Rule:
    return _RULE_BY_LABEL[label]


def grammar_table_lines() -> list[str]:
    lines = [f"grammar version {GRAMMAR_VERSION} ({NUM_RULES} rules)"]
    for r in GRAMMAR:
        rhs = " ".join(r.rhs) if r.rhs else "()"
        lines.append(f"R{r.rule_id:<3} {r.lhs:<10} -> {rhs:<42} [{r.label}]")
    return lines


# ---------------------------------------------------------------------------
# Actions.
# ---------------------------------------------------------------------------

APPLY_RULE = "APPLY_RULE"
SELECT_COLUMN = "SELECT_COLUMN"
SELECT_TABLE = "SELECT_TABLE"


@dataclass(frozen=True)
class Action:
    kind: str
    index: int

    def __post_init__(self):
        if self.kind not in (APPLY_RULE, SELECT_COLUMN, SELECT_TABLE):
            raise ValueError(f"unknown action kind {self.kind!r}")
        if self.kind == APPLY_RULE and not 0 <= self.index < NUM_RULES:
            raise ValueError(f"rule id {self.index} outside grammar")

    def __str__(self):
        tag = {APPLY_RULE: "R", SELECT_COLUMN: "C", SELECT_TABLE: "T"}[self.kind]
        return f"{tag}{self.index}"


def apply_rule(label: str) -> Action:
    return Action(APPLY_RULE, rule_by_label(label).rule_id)


def action_from_str(s: str) -> Action:
    kind = {"R": APPLY_RULE, "C": SELECT_COLUMN, "T": SELECT_TABLE}[s[0]]
    return Action(kind, int(s[1:]))


# ---------------------------------------------------------------------------
# Derivation state machine (masking + delinearization).
# ---------------------------------------------------------------------------


class DerivationState:
    """Tracks the frontier of an in-progress derivation against one schema."""

    def __init__(self, schema: Schema):
        self.schema = schema
        self.stack: list[str] = ["sql"]
        self.position = 0
        self.tables: list[int] = []
        self.star = False
        self.items: list[SelectItem] = []
        self.where_connective: str | None = None
        self.conds: list[Condition] = []
        self.group: int | None = None
        self.order_desc: bool | None = None
        self.order_col: int | None = None
        self.limit: int | None = None
        self._pending_agg: str | None = None
        self._pending_op: str | None = None

    @property
    def finished(self) -> bool:
        return not self.stack

    def _legal_more_tables(self) -> list[int]:
        chosen = set(self.tables)
        out: set[int] = set()
        for t in chosen:
            out |= self.schema.fk_adjacent_tables(t)
        return sorted(out - chosen)

    def _legal_columns(self) -> list[int]:
        listed = set(self.tables)
        return [i for i, c in enumerate(self.schema.columns) if c.table in listed]

    def legal_actions(self) -> list[Action]:
        if self.finished:
            return []
        top = self.stack[-1]
        if top in _TABLE_SLOTS:
            if top == TABLE_FIRST:
                return [Action(SELECT_TABLE, t) for t in range(len(self.schema.tables))]
            return [Action(SELECT_TABLE, t) for t in self._legal_more_tables()]
        if top in _COLUMN_SLOTS:
            return [Action(SELECT_COLUMN, c) for c in self._legal_columns()]
        legal = []
        for rule in _RULES_BY_LHS[top]:
            if rule.label == "from_join" and not self._legal_more_tables():
                continue
            if rule.label == "items_more" and len(self.items) >= MAX_SELECT_ITEMS - 1:
                continue
            if rule.label == "conds_more" and len(self.conds) >= MAX_CONDITIONS - 1:
                continue
            legal.append(Action(APPLY_RULE, rule.rule_id))
        return legal

    def apply(self, action: Action) -> None:
        legal = self.legal_actions()
        if action not in legal:
            expected = ", ".join(str(a) for a in legal[:12]) or "<none: derivation complete>"
            raise DerivationError(
                f"illegal action {action} at position {self.position} (legal: {expected})",
                position=self.position, legal=legal)
        top = self.stack.pop()
        if action.kind == APPLY_RULE:
            rule = GRAMMAR[action.index]
            self.stack.extend(reversed(rule.rhs))
            label = rule.label
            if label == "select_star":
                self.star = True
            elif label == "where_and":
                self.where_connective = "AND"
            elif label == "where_or":
                self.where_connective = "OR"
            elif label.startswith("agg_"):
                self._pending_agg = label[4:]
            elif label.startswith("cond_"):
                self._pending_op = label[5:]
            elif label == "order_asc":
                self.order_desc = False
            elif label == "order_desc":
                self.order_desc = True
            elif label == "limit_one":
                self.limit = 1
        elif action.kind == SELECT_TABLE:
            self.tables.append(action.index)
        else:
            if top == COL_ITEM:
                self.items.append(SelectItem(self._pending_agg, action.index))
                self._pending_agg = None
            elif top == COL_COND:
                self.conds.append(Condition(action.index, self._pending_op))
                self._pending_op = None
            elif top == COL_GROUP:
                self.group = action.index
            else:
                self.order_col = action.index
        self.position += 1

    def result(self) -> SqlAst:
        if not self.finished:
            raise IncompleteDerivationError(
                f"derivation incomplete after {self.position} actions "
                f"(frontier: {', '.join(reversed(self.stack))})", position=self.position)
        order = None
        if self.order_desc is not None:
            order = OrderBy(self.order_col, self.order_desc, self.limit)
        ast = SqlAst(
            tables=tuple(self.tables),
            select_star=self.star,
            select_items=tuple(self.items),
            where_connective=self.where_connective,
            where=tuple(self.conds),
            group_by=self.group,
            order_by=order,
        )
        validate_ast(ast, self.schema)
        return ast


def linearize(ast: SqlAst, schema: Schema) -> list[Action]:
    """Pre-order (depth-first) action sequence for a valid AST."""
    validate_ast(ast, schema)
    acts: list[Action] = [apply_rule("sql_query"), Action(SELECT_TABLE, ast.tables[0])]
    for t in ast.tables[1:]:
        acts.append(apply_rule("from_join"))
        acts.append(Action(SELECT_TABLE, t))
    acts.append(apply_rule("from_done"))

    if ast.select_star:
        acts.append(apply_rule("select_star"))
    else:
        acts.append(apply_rule("select_items"))
        for i, item in enumerate(ast.select_items):
            acts.append(apply_rule("items_more" if i < len(ast.select_items) - 1 else "items_one"))
            if item.agg is None:
                acts.append(apply_rule("item_plain"))
            else:
                acts.append(apply_rule("item_agg"))
                acts.append(apply_rule(f"agg_{item.agg}"))
            acts.append(Action(SELECT_COLUMN, item.column))

    if not ast.where:
        acts.append(apply_rule("where_none"))
    else:
        acts.append(apply_rule("where_and" if ast.where_connective == "AND" else "where_or"))
        for i, cond in enumerate(ast.where):
            acts.append(apply_rule("conds_more" if i < len(ast.where) - 1 else "conds_one"))
            acts.append(apply_rule(f"cond_{cond.op}"))
            acts.append(Action(SELECT_COLUMN, cond.column))

    if ast.group_by is None:
        acts.append(apply_rule("group_none"))
    else:
        acts.append(apply_rule("group_by"))
        acts.append(Action(SELECT_COLUMN, ast.group_by))

    if ast.order_by is None:
        acts.append(apply_rule("order_none"))
    else:
        acts.append(apply_rule("order_desc" if ast.order_by.descending else "order_asc"))
        acts.append(Action(SELECT_COLUMN, ast.order_by.column))
        acts.append(apply_rule("limit_one" if ast.order_by.limit else "limit_none"))
    return acts


def delinearize(actions: list[Action], schema: Schema) -> SqlAst:
    """Rebuild the unique AST from a complete action sequence."""
    state = DerivationState(schema)
    for action in actions:
        if state.finished:
            raise DerivationError(
                f"trailing action {action} at position {state.position}: derivation already complete",
                position=state.position)
        state.apply(action)
    return state.result()


# ---------------------------------------------------------------------------
# Canonical equality and rendering.
# ---------------------------------------------------------------------------


def canonical_form(ast: SqlAst, schema: Schema):
    validate_ast(ast, schema)
    conn = ast.where_connective if len(ast.where) > 1 else None
    return (
        tuple(sorted(ast.tables)),
        ast.select_star,
        tuple(sorted((item.agg or "", item.column) for item in ast.select_items)),
        conn,
        tuple(sorted((c.column, c.op) for c in ast.where)),
        ast.group_by,
        (ast.order_by.column, ast.order_by.descending, ast.order_by.limit) if ast.order_by else None,
    )


def sql_equal(a: SqlAst, b: SqlAst, schema: Schema, schema_b: Schema | None = None) -> bool:
    """Exact set match: select multiset, condition set, anonymized values."""
    if schema_b is not None and not schemas_equal(schema, schema_b):
        raise SchemaError("cannot compare SQL across different schemas")
    return canonical_form(a, schema) == canonical_form(b, schema)


def render(ast: SqlAst, schema: Schema) -> str:
    """Deterministic SQL text with table-qualified columns and 'value' literals."""
    validate_ast(ast, schema)
    if ast.select_star:
        items = "*"
    else:
        parts = []
        for item in ast.select_items:
            col = schema.column_full_name(item.column)
            parts.append(f"{item.agg.upper()}({col})" if item.agg else col)
        items = ", ".join(parts)
    text = f"SELECT {items} FROM " + " JOIN ".join(schema.tables[t] for t in ast.tables)
    if ast.where:
        conds = [f"{schema.column_full_name(c.column)} {c.op} {VALUE_PLACEHOLDER}" for c in ast.where]
        text += " WHERE " + f" {ast.where_connective} ".join(conds)
    if ast.group_by is not None:
        text += f" GROUP BY {schema.column_full_name(ast.group_by)}"
    if ast.order_by is not None:
        text += f" ORDER BY {schema.column_full_name(ast.order_by.column)}"
        text += " DESC" if ast.order_by.descending else " ASC"
        if ast.order_by.limit:
            text += f" LIMIT {ast.order_by.limit}"
    return text


def _parse_qualified(token: str, schema: Schema) -> int:
    table, _, name = token.partition(".")
    return schema.column_index(table, name)


def read_sql(text: str, schema: Schema) -> SqlAst:
    """Companion reader for `render` output (round-trip checks)."""
    rest = text.strip()
    if not rest.startswith("SELECT "):
        raise SchemaError(f"cannot read SQL: {text!r}")
    rest = rest[len("SELECT "):]
    items_part, _, rest = rest.partition(" FROM ")

    def split_clause(s: str, keyword: str) -> tuple[str, str]:
        head, sep, tail = s.partition(f" {keyword} ")
        return (head, tail) if sep else (s, "")

    from_part, where_part = split_clause(rest, "WHERE")
    if where_part:
        where_part, group_part = split_clause(where_part, "GROUP BY")
    else:
        from_part, group_part = split_clause(from_part, "GROUP BY")
    if group_part:
        group_part, order_part = split_clause(group_part, "ORDER BY")
    elif where_part:
        where_part, order_part = split_clause(where_part, "ORDER BY")
    else:
        from_part, order_part = split_clause(from_part, "ORDER BY")

    tables = tuple(schema.table_index(t.strip()) for t in from_part.split(" JOIN "))

    star = items_part.strip() == "*"
    items = []
    if not star:
        for raw in items_part.split(","):
            raw = raw.strip()
            if "(" in raw:
                agg, _, inner = raw.partition("(")
                items.append(SelectItem(agg.lower(), _parse_qualified(inner.rstrip(")"), schema)))
            else:
                items.append(SelectItem(None, _parse_qualified(raw, schema)))

    connective = None
    conds = []
    if where_part:
        connective = "OR" if " OR " in where_part else "AND"
        for raw in where_part.split(f" {connective} "):
            col_tok, op, _ = raw.strip().split(" ", 2)
            conds.append(Condition(_parse_qualified(col_tok, schema), op))

    group = _parse_qualified(group_part.strip(), schema) if group_part else None

    order = None
    if order_part:
        toks = order_part.split()
        limit = int(toks[toks.index("LIMIT") + 1]) if "LIMIT" in toks else None
        order = OrderBy(_parse_qualified(toks[0], schema), toks[1] == "DESC", limit)

    ast = SqlAst(tables, star, tuple(items), connective, tuple(conds), group, order)
    validate_ast(ast, schema)
    return ast


# ---------------------------------------------------------------------------
# Random AST sampling (property tests, corpus seeds).
# ---------------------------------------------------------------------------


def random_ast(schema: Schema, rng: np.random.Generator,
               p_join: float = 0.3, p_star: float = 0.08, p_agg: float = 0.3,
               p_where: float = 0.55, p_group: float = 0.15, p_order: float = 0.3) -> SqlAst:
    tables = [int(rng.integers(len(schema.tables)))]
    while rng.random() < p_join and len(tables) < 3:
        frontier = sorted(set().union(*(schema.fk_adjacent_tables(t) for t in tables)) - set(tables))
        if not frontier:
            break
        tables.append(int(rng.choice(frontier)))
    cols = [i for i, c in enumerate(schema.columns) if c.table in set(tables)]

    def pick_col() -> int:
        return int(rng.choice(cols))

    star = rng.random() < p_star
    items: list[SelectItem] = []
    if not star:
        for _ in range(1 + int(rng.random() < 0.25)):
            agg = str(rng.choice(AGGREGATORS)) if rng.random() < p_agg else None
            items.append(SelectItem(agg, pick_col()))

    connective, conds = None, []
    if rng.random() < p_where:
        connective = "AND" if rng.random() < 0.5 else "OR"
        for _ in range(1 + int(rng.random() < 0.3)):
            conds.append(Condition(pick_col(), str(rng.choice(COMPARISON_OPS))))

    group = pick_col() if rng.random() < p_group else None
    order = None
    if rng.random() < p_order:
        order = OrderBy(pick_col(), bool(rng.random() < 0.5), 1 if rng.random() < 0.5 else None)

    return SqlAst(tuple(tables), star, tuple(items), connective, tuple(conds), group, order)

"""Tokenizer, parser, validator and canonical printer for the continuous query / rule dialect.

The dialect covers the SELECT and CONSTRUCT forms used for stream queries
and reasoning rules, plus a SHACL-shaped wrapper for rule documents::

    ssr:rule_w_1 a sh:NodeShape ;
      ssr:weight 1.0 ;
      sh:rule [ a sh:CQELSRule ; sh:construct \"\"\" CONSTRUCT {...} WHERE {...} \"\"\" ] .
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Union

from .rdfstar import (
    DEFAULT_PREFIXES,
    MAX_QUOTE_DEPTH,
    RDF_TYPE,
    Iri,
    Literal,
    Path,
    QuotedTriple,
    Variable,
    compact,
)

RESULT_TIME = Iri(DEFAULT_PREFIXES["sosa"] + "resultTime")
SSR_WEIGHT = Iri(DEFAULT_PREFIXES["ssr"] + "weight")
SSR_SOFT = Iri(DEFAULT_PREFIXES["ssr"] + "SoftRule")
SH = DEFAULT_PREFIXES["sh"]

BUILTIN_ARITY = {"iou": 2, "appDist": 2}
AGGREGATES = ("COUNT", "SUM", "MIN", "MAX", "AVG")

_UNIT_MS = {
    "ms": 1, "s": 1000, "sec": 1000, "secs": 1000, "second": 1000, "seconds": 1000,
    "m": 60_000, "min": 60_000, "mins": 60_000, "minute": 60_000, "minutes": 60_000,
    "h": 3_600_000, "hour": 3_600_000, "hours": 3_600_000,
}


# ---------------------------------------------------------------------------
# diagnostics


@dataclass(frozen=True)
class Diagnostic:
    kind: str  # lexical | grammar | validation | wrapper
    message: str
    line: int = 0
    column: int = 0
    expected: tuple = ()

    def __str__(self) -> str:
        text = f"{self.line}:{self.column}: {self.kind} error: {self.message}"
        if self.expected:
            text += f" (expected one of: {', '.join(self.expected)})"
        return text


class QueryError(ValueError):
    def __init__(self, errors: list[Diagnostic]):
        super().__init__("\n".join(str(e) for e in errors))
        self.errors = errors


# ---------------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class TriplePattern:
    subject: object
    predicate: object
    object: object
    time: Variable | None = None

    def terms(self):
        return (self.subject, self.predicate, self.object)


@dataclass(frozen=True)
class Anchor:
    """A bare ``<< s p o >> @ ?T`` statement: the quoted triple occurs in the stream at ?T."""

    quoted: QuotedTriple
    time: Variable


Pattern = Union[TriplePattern, Anchor]


@dataclass(frozen=True)
class TimeWindow:
    width_ms: int
    on: Iri | None = None


@dataclass(frozen=True)
class StreamBlock:
    source: Union[Iri, Variable]
    window: TimeWindow | None  # None: current tick only
    patterns: tuple


@dataclass(frozen=True)
class BinOp:
    op: str
    left: object
    right: object


@dataclass(frozen=True)
class UnaryOp:
    op: str
    operand: object


@dataclass(frozen=True)
class Call:
    name: str
    args: tuple


@dataclass(frozen=True)
class Aggregate:
    func: str
    arg: Variable | None  # None means COUNT(*)
    distinct: bool = False


@dataclass(frozen=True)
class AggregateAs:
    aggregate: Aggregate
    alias: Variable


@dataclass(frozen=True)
class Select:
    items: tuple
    distinct: bool = False


@dataclass(frozen=True)
class Construct:
    template: tuple


@dataclass(frozen=True)
class OrderBy:
    expr: object
    descending: bool = False


@dataclass(frozen=True)
class Query:
    form: Union[Select, Construct]
    stream_blocks: tuple = ()
    static_patterns: tuple = ()
    filters: tuple = ()
    naf_blocks: tuple = ()
    group_by: tuple = ()
    having: object = None
    order_by: OrderBy | None = None

    @property
    def is_select(self) -> bool:
        return isinstance(self.form, Select)

    def aggregates(self) -> list[AggregateAs]:
        if not self.is_select:
            return []
        return [i for i in self.form.items if isinstance(i, AggregateAs)]


@dataclass(frozen=True)
class Rule:
    id: Iri
    weight: float | None  # None: hard rule
    query: Query

    @property
    def is_soft(self) -> bool:
        return self.weight is not None

    @property
    def head(self) -> tuple:
        return self.query.form.template

    def with_weight(self, weight: float) -> "Rule":
        return Rule(self.id, weight, self.query)


# ---------------------------------------------------------------------------
# lexer

_TOKENS = [
    ("WS", r"[ \t\r\n]+"),
    ("COMMENT", r"#[^\n]*|//[^\n]*"),
    ("LONGSTRING", r'"""(?:[^"\\]|\\.|"(?!""))*"""'),
    ("STRING", r"'(?:[^'\\\n]|\\.)*'|\"(?:[^\"\\\n]|\\.)*\""),
    ("QOPEN", r"<<"),
    ("QCLOSE", r">>"),
    ("IRIREF", r"<[^<>\s\"{}|^`\\]*>"),
    ("OP", r"&&|\|\||!=|<=|>=|[<>=!+*/-]"),
    ("VAR", r"[?$][A-Za-z_][A-Za-z0-9_]*"),
    ("DURATION", r"\d+(?:\.\d+)?(?:ms|seconds|second|secs|sec|s|minutes|minute|mins|min|m|hours|hour|h)\b"),
    ("NUMBER", r"\d+\.\d+|\d+"),
    ("PREFIX_DECL", r"@prefix\b"),
    ("BNODE", r"_:[A-Za-z0-9_\-]+"),
    ("PNAME", r"(?:[A-Za-z][A-Za-z0-9_\-]*)?:(?:[A-Za-z0-9_](?:[A-Za-z0-9_.\-]*[A-Za-z0-9_\-])?)?"),
    ("IDENT", r"[A-Za-z_][A-Za-z0-9_]*"),
    ("PUNCT", r"[{}()\[\].;,@]"),
]
_LEX = re.compile("|".join(f"(?P<{n}>{p})" for n, p in _TOKENS))


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    line: int
    col: int

    def is_kw(self, *words: str) -> bool:
        return self.kind == "IDENT" and self.text.upper() in words


def tokenize(text: str, line: int = 1, col: int = 1) -> list[Token]:
    tokens = []
    pos = 0
    line_start = -(col - 1)
    while pos < len(text):
        m = _LEX.match(text, pos)
        if m is None:
            raise QueryError([Diagnostic("lexical", f"unexpected character {text[pos]!r}", line, pos - line_start + 1)])
        kind, chunk = m.lastgroup, m.group()
        if kind not in ("WS", "COMMENT"):
            tokens.append(Token(kind, chunk, line, pos - line_start + 1))
        nl = chunk.count("\n")
        if nl:
            line += nl
            line_start = pos + chunk.rfind("\n") + 1
        pos = m.end()
    tokens.append(Token("EOF", "", line, pos - line_start + 1))
    return tokens


def _unescape(body: str) -> str:
    return re.sub(r"\\(.)", lambda m: {"n": "\n", "t": "\t"}.get(m.group(1), m.group(1)), body)


# ---------------------------------------------------------------------------
# parser


class _Parser:
    def __init__(self, tokens: list[Token], prefixes: Mapping[str, str] | None = None):
        self.tokens = tokens
        self.i = 0
        self.positions: dict = {}
        self.prefixes = dict(DEFAULT_PREFIXES)
        if prefixes:
            self.prefixes.update(prefixes)

    @property
    def tok(self) -> Token:
        return self.tokens[self.i]

    def peek(self, k: int = 1) -> Token:
        return self.tokens[min(self.i + k, len(self.tokens) - 1)]

    def fail(self, message: str, expected: Iterable[str] = (), tok: Token | None = None):
        tok = tok or self.tok
        raise QueryError([Diagnostic("grammar", message, tok.line, tok.col, tuple(expected))])

    def found(self) -> str:
        return repr(self.tok.text) if self.tok.kind != "EOF" else "end of input"

    def accept(self, text: str) -> bool:
        if self.tok.text == text and self.tok.kind in ("PUNCT", "OP", "QOPEN", "QCLOSE"):
            self.i += 1
            return True
        return False

    def expect(self, text: str) -> Token:
        tok = self.tok
        if not self.accept(text):
            self.fail(f"unexpected {self.found()}", [repr(text)])
        return tok

    def accept_kw(self, *words: str) -> Token | None:
        if self.tok.is_kw(*words):
            tok = self.tok
            self.i += 1
            return tok
        return None

    def expect_kw(self, word: str) -> Token:
        tok = self.accept_kw(word)
        if tok is None:
            self.fail(f"unexpected {self.found()}", [word])
        return tok

    # -- terms ------------------------------------------------------------

    def resolve_pname(self, tok: Token) -> Iri:
        pre, _, local = tok.text.partition(":")
        if pre not in self.prefixes:
            raise QueryError([Diagnostic("grammar", f"unknown prefix {pre + ':'!r}", tok.line, tok.col)])
        return Iri(self.prefixes[pre] + local)

    def iri_ref(self, tok: Token) -> Iri:
        body = tok.text[1:-1]
        # <pre:local> with a bound prefix is read as the prefixed name
        m = re.fullmatch(r"([A-Za-z][A-Za-z0-9_\-]*)?:([^/].*)?", body)
        if m and "://" not in body and (m.group(1) or "") in self.prefixes:
            return Iri(self.prefixes[m.group(1) or ""] + (m.group(2) or ""))
        return Iri(body)

    def named(self) -> Iri | None:
        tok = self.tok
        if tok.kind == "IRIREF":
            self.i += 1
            return self.iri_ref(tok)
        if tok.kind == "PNAME":
            self.i += 1
            return self.resolve_pname(tok)
        return None

    def mark(self, node, tok: Token):
        self.positions.setdefault(node, (tok.line, tok.col))
        return node

    def var(self) -> Variable:
        tok = self.tok
        if tok.kind != "VAR":
            self.fail(f"unexpected {self.found()}", ["variable"])
        self.i += 1
        return self.mark(Variable(tok.text[1:]), tok)

    def literal(self) -> Literal | None:
        tok = self.tok
        if tok.kind == "STRING":
            self.i += 1
            return Literal(_unescape(tok.text[1:-1]), "string")
        if tok.kind == "NUMBER":
            self.i += 1
            return Literal(tok.text, "decimal" if "." in tok.text else "integer")
        if tok.is_kw("TRUE", "FALSE"):
            self.i += 1
            return Literal(tok.text.lower(), "boolean")
        return None

    def node(self, depth: int = 0, allow_literal: bool = True):
        tok = self.tok
        if tok.kind == "VAR":
            return self.var()
        if tok.kind == "QOPEN":
            if depth + 1 > MAX_QUOTE_DEPTH:
                self.fail("quoted triple nesting depth exceeded")
            self.i += 1
            s = self.node(depth + 1, allow_literal=False)
            p = self.verb(allow_path=False)
            o = self.node(depth + 1)
            if self.tok.kind != "QCLOSE":
                self.fail(f"unexpected {self.found()}", ["'>>'"])
            self.i += 1
            return QuotedTriple(s, p, o)
        named = self.named()
        if named is not None:
            return named
        if allow_literal:
            lit = self.literal()
            if lit is not None:
                return lit
        self.fail(f"unexpected {self.found()}", ["variable", "IRI", "'<<'"] + (["literal"] if allow_literal else []))

    def verb(self, allow_path: bool = True):
        tok = self.tok
        if tok.kind == "IDENT" and tok.text == "a":
            self.i += 1
            first = Iri(RDF_TYPE)
        elif tok.kind == "VAR":
            return self.var()
        else:
            first = self.named()
            if first is None:
                self.fail(f"unexpected {self.found()}", ["predicate"])
        if allow_path and self.tok.text == "/" and self.tok.kind == "OP":
            steps = [first]
            while self.accept("/"):
                if self.tok.kind == "IDENT" and self.tok.text == "a":
                    self.i += 1
                    steps.append(Iri(RDF_TYPE))
                else:
                    nxt = self.named()
                    if nxt is None:
                        self.fail(f"unexpected {self.found()}", ["IRI"])
                    steps.append(nxt)
            return Path(tuple(steps))
        return first

    def time_annotation(self) -> Variable | None:
        if self.accept("@"):
            return self.var()
        return None

    # -- triples blocks ---------------------------------------------------

    def starts_node(self) -> bool:
        t = self.tok
        return t.kind in ("VAR", "QOPEN", "IRIREF", "PNAME")

    def triples(self, out: list) -> None:
        """One subject with its predicate-object list; trailing '.' optional."""
        subject = self.node(allow_literal=False)
        t = self.time_annotation()
        have_pairs = True
        if t is not None:
            if not isinstance(subject, QuotedTriple):
                self.fail("'@' on a bare subject requires a quoted triple")
            out.append(Anchor(subject, t))
            if not self.accept(";"):
                have_pairs = False
        if have_pairs:
            while True:
                pred = self.verb()
                obj = self.node()
                out.append(TriplePattern(subject, pred, obj, self.time_annotation()))
                if self.accept(";"):
                    if self.tok.text in (".", "}") or self.tok.kind == "EOF":
                        break
                    continue
                break
        self.accept(".")

    def template(self) -> tuple:
        self.expect("{")
        out: list = []
        while not self.accept("}"):
            if self.tok.kind == "EOF":
                self.fail("unexpected end of input", ["'}'"])
            self.triples(out)
        return tuple(out)

    # -- windows / stream blocks -----------------------------------------

    def duration(self) -> int:
        tok = self.tok
        if tok.kind == "DURATION":
            self.i += 1
            m = re.fullmatch(r"(\d+(?:\.\d+)?)([a-z]+)", tok.text)
            return int(round(float(m.group(1)) * _UNIT_MS[m.group(2)]))
        if tok.kind == "NUMBER":
            self.i += 1
            unit = self.tok
            if unit.kind == "IDENT" and unit.text.lower() in _UNIT_MS:
                self.i += 1
                return int(round(float(tok.text) * _UNIT_MS[unit.text.lower()]))
            self.fail(f"unexpected {self.found()}", ["time unit"])
        self.fail(f"unexpected {self.found()}", ["duration"])

    def window(self) -> TimeWindow | None:
        if self.accept_kw("WINDOW"):
            self.expect("[")
            width = self.duration()
            self.expect("]")
            return TimeWindow(width)
        if self.tok.text == "[" and self.tok.kind == "PUNCT":
            self.i += 1
            if self.accept_kw("NOW"):
                self.expect("]")
                return None
            self.expect_kw("RANGE")
            width = self.duration()
            on = None
            if self.accept_kw("ON"):
                self.mark("on", self.tok)
                on = self.named()
                if on is None:
                    self.fail(f"unexpected {self.found()}", ["IRI"])
            self.expect("]")
            return TimeWindow(width, on)
        return None

    def stream_block(self, filters: list | None) -> StreamBlock:
        start = self.expect_kw("STREAM")
        if self.tok.kind == "VAR":
            source = self.var()
        else:
            source = self.named()
            if source is None:
                self.fail(f"unexpected {self.found()}", ["IRI", "variable"])
        win = self.window()
        self.expect("{")
        patterns: list = []
        while not self.accept("}"):
            if self.tok.is_kw("FILTER"):
                if filters is None:
                    self.fail("FILTER is not allowed inside a NAF block")
                self.i += 1
                filters.append(self.expression())
            elif self.starts_node():
                self.triples(patterns)
            else:
                self.fail(f"unexpected {self.found()}", ["triple pattern", "FILTER", "'}'"])
        return self.mark(StreamBlock(source, win, tuple(patterns)), start)

    def where(self) -> dict:
        self.accept_kw("WHERE")
        self.expect("{")
        parts = {"stream_blocks": [], "static_patterns": [], "filters": [], "naf_blocks": []}
        while not self.accept("}"):
            tok = self.tok
            if tok.is_kw("STREAM"):
                parts["stream_blocks"].append(self.stream_block(parts["filters"]))
            elif tok.is_kw("NAF"):
                self.i += 1
                parts["naf_blocks"].append(self.stream_block(None))
            elif tok.is_kw("FILTER"):
                self.i += 1
                parts["filters"].append(self.expression())
            elif self.starts_node():
                self.triples(parts["static_patterns"])
            elif tok.text == "." and tok.kind == "PUNCT":
                self.i += 1
            else:
                self.fail(f"unexpected {self.found()}", ["STREAM", "NAF", "FILTER", "triple pattern", "'}'"])
        return {k: tuple(v) for k, v in parts.items()}

    # -- expressions ------------------------------------------------------

    def expression(self):
        return self.or_expr()

    def or_expr(self):
        left = self.and_expr()
        while self.tok.text == "||" and self.tok.kind == "OP":
            self.i += 1
            left = BinOp("||", left, self.and_expr())
        return left

    def and_expr(self):
        left = self.comparison()
        while self.tok.text == "&&" and self.tok.kind == "OP":
            self.i += 1
            left = BinOp("&&", left, self.comparison())
        return left

    def comparison(self):
        left = self.additive()
        if self.tok.kind == "OP" and self.tok.text in ("<", ">", "=", "<=", ">=", "!="):
            op = self.tok.text
            self.i += 1
            return BinOp(op, left, self.additive())
        return left

    def additive(self):
        left = self.multiplicative()
        while self.tok.kind == "OP" and self.tok.text in ("+", "-"):
            op = self.tok.text
            self.i += 1
            left = BinOp(op, left, self.multiplicative())
        return left

    def multiplicative(self):
        left = self.unary()
        while self.tok.kind == "OP" and self.tok.text in ("*", "/"):
            op = self.tok.text
            self.i += 1
            left = BinOp(op, left, self.unary())
        return left

    def unary(self):
        if self.tok.kind == "OP" and self.tok.text in ("!", "-"):
            op = self.tok.text
            self.i += 1
            return UnaryOp(op, self.unary())
        return self.primary()

    def aggregate(self) -> Aggregate:
        start = self.tok
        func = self.tok.text.upper()
        self.i += 1
        self.expect("(")
        distinct = bool(self.accept_kw("DISTINCT"))
        if func == "COUNT" and self.accept("*"):
            arg = None
        else:
            arg = self.var()
        self.expect(")")
        return self.mark(Aggregate(func, arg, distinct), start)

    def primary(self):
        tok = self.tok
        if tok.text == "(" and tok.kind == "PUNCT":
            self.i += 1
            e = self.expression()
            self.expect(")")
            return e
        if tok.kind == "VAR":
            return self.var()
        if tok.kind == "IDENT" and tok.text.upper() in AGGREGATES and self.peek().text == "(":
            return self.aggregate()
        if tok.kind == "IDENT" and self.peek().text == "(" and not tok.is_kw("TRUE", "FALSE"):
            self.i += 2
            args = []
            if not self.accept(")"):
                args.append(self.expression())
                while self.accept(","):
                    args.append(self.expression())
                self.expect(")")
            return self.mark(Call(tok.text, tuple(args)), tok)
        lit = self.literal()
        if lit is not None:
            return lit
        named = self.named()
        if named is not None:
            return named
        self.fail(f"unexpected {self.found()}", ["expression"])

    # -- top level --------------------------------------------------------

    def prologue(self) -> None:
        while True:
            if self.accept_kw("PREFIX"):
                name = self.tok
                if name.kind != "PNAME" or not name.text.endswith(":"):
                    self.fail(f"unexpected {self.found()}", ["prefix name"])
                self.i += 1
                ref = self.tok
                if ref.kind != "IRIREF":
                    self.fail(f"unexpected {self.found()}", ["IRI"])
                self.i += 1
                self.prefixes[name.text[:-1]] = ref.text[1:-1]
            elif self.tok.kind == "PREFIX_DECL":
                self.i += 1
                name, ref = self.tok, self.peek()
                if name.kind != "PNAME" or ref.kind != "IRIREF":
                    self.fail(f"unexpected {self.found()}", ["prefix declaration"])
                self.i += 2
                self.prefixes[name.text[:-1]] = ref.text[1:-1]
                self.expect(".")
            else:
                return

    def query(self) -> Query:
        self.prologue()
        if self.accept_kw("SELECT"):
            distinct = bool(self.accept_kw("DISTINCT"))
            items = []
            while True:
                if self.tok.kind == "VAR":
                    items.append(self.var())
                elif self.tok.text == "(" and self.tok.kind == "PUNCT":
                    self.i += 1
                    if not (self.tok.kind == "IDENT" and self.tok.text.upper() in AGGREGATES):
                        self.fail(f"unexpected {self.found()}", list(AGGREGATES))
                    agg = self.aggregate()
                    self.expect_kw("AS")
                    items.append(AggregateAs(agg, self.var()))
                    self.expect(")")
                else:
                    break
            if not items:
                self.fail(f"unexpected {self.found()}", ["variable", "'('"])
            form = Select(tuple(items), distinct)
        elif self.accept_kw("CONSTRUCT"):
            form = Construct(self.template())
        else:
            self.fail(f"unexpected {self.found()}", ["SELECT", "CONSTRUCT", "PREFIX"])
        parts = self.where()
        group_by: list = []
        having = None
        order_by = None
        if self.accept_kw("GROUP"):
            self.expect_kw("BY")
            group_by.append(self.var())
            while self.tok.kind == "VAR":
                group_by.append(self.var())
        if self.tok.is_kw("HAVING"):
            self.mark("having", self.tok)
            self.i += 1
            having = self.expression()
        if self.accept_kw("ORDER"):
            self.expect_kw("BY")
            desc = False
            kw = self.accept_kw("ASC", "DESC")
            if kw is not None:
                desc = kw.text.upper() == "DESC"
                self.expect("(")
                expr = self.expression()
                self.expect(")")
            elif self.tok.kind == "VAR":
                expr = self.var()
            else:
                expr = self.primary()
            order_by = OrderBy(expr, desc)
        if self.tok.kind != "EOF":
            self.fail(f"unexpected {self.found()}", ["GROUP", "HAVING", "ORDER", "end of input"])
        return Query(form, group_by=tuple(group_by), having=having, order_by=order_by, **parts)


# ---------------------------------------------------------------------------
# validation


def pattern_vars(p) -> set:
    out: set = set()

    def walk(t):
        if isinstance(t, Variable):
            out.add(t)
        elif isinstance(t, QuotedTriple):
            for x in t.as_triple():
                walk(x)

    if isinstance(p, Anchor):
        walk(p.quoted)
        out.add(p.time)
    else:
        for t in p.terms():
            if not isinstance(t, Path):
                walk(t)
        if p.time is not None:
            out.add(p.time)
    return out


def expr_vars(e, inside_aggregates: bool = True) -> set:
    if isinstance(e, Variable):
        return {e}
    if isinstance(e, BinOp):
        return expr_vars(e.left, inside_aggregates) | expr_vars(e.right, inside_aggregates)
    if isinstance(e, UnaryOp):
        return expr_vars(e.operand, inside_aggregates)
    if isinstance(e, Call):
        out: set = set()
        for a in e.args:
            out |= expr_vars(a, inside_aggregates)
        return out
    if isinstance(e, Aggregate):
        return {e.arg} if (inside_aggregates and e.arg is not None) else set()
    return set()


def expr_nodes(e):
    yield e
    if isinstance(e, BinOp):
        yield from expr_nodes(e.left)
        yield from expr_nodes(e.right)
    elif isinstance(e, UnaryOp):
        yield from expr_nodes(e.operand)
    elif isinstance(e, Call):
        for a in e.args:
            yield from expr_nodes(a)


def bound_vars(q: Query) -> set:
    out: set = set()
    for b in q.stream_blocks:
        if isinstance(b.source, Variable):
            out.add(b.source)
        for p in b.patterns:
            out |= pattern_vars(p)
    for p in q.static_patterns:
        out |= pattern_vars(p)
    return out


def validate(q: Query, positions: Mapping | None = None) -> list[Diagnostic]:
    """Static checks; ``positions`` maps AST nodes to (line, column) for diagnostics."""
    errs: list[Diagnostic] = []
    positions = positions or {}

    def err(msg, at=None):
        line, col = positions.get(at, (0, 0)) if at is not None else (0, 0)
        errs.append(Diagnostic("validation", msg, line, col))

    bound = bound_vars(q)
    static_vars: set = set()
    for p in q.static_patterns:
        static_vars |= pattern_vars(p)
    for b in q.stream_blocks + q.naf_blocks:
        if isinstance(b.source, Variable) and b.source not in static_vars:
            err(f"stream variable {b.source.n3()} is not constrained by any static pattern", b.source)
        if b.window is not None and b.window.on is not None and b.window.on != RESULT_TIME:
            err(f"unsupported window attribute {b.window.on.n3()} (only sosa:resultTime)", "on")
        for p in b.patterns:
            if isinstance(p, TriplePattern) and isinstance(p.predicate, Path):
                err("property paths are only allowed in static patterns", b)
    aliases = set()
    if q.is_select:
        aggs = q.aggregates()
        aliases = {a.alias for a in aggs}
        for item in q.form.items:
            if isinstance(item, Variable):
                if item not in bound:
                    err(f"projected variable {item.n3()} is unbound", item)
                elif aggs and item not in q.group_by:
                    err(f"projected variable {item.n3()} must appear in GROUP BY", item)
            else:
                if item.aggregate.arg is not None and item.aggregate.arg not in bound:
                    err(f"aggregated variable {item.aggregate.arg.n3()} is unbound", item.aggregate.arg)
                if item.alias in bound:
                    err(f"alias {item.alias.n3()} clashes with a pattern variable", item.alias)
        if aggs and not q.group_by:
            err("aggregates require GROUP BY", aggs[0].aggregate)
    else:
        for p in q.form.template:
            for v in sorted(pattern_vars(p), key=lambda v: v.name):
                if v not in bound:
                    err(f"template variable {v.n3()} is unbound", v)
        if q.group_by or q.having is not None:
            err("GROUP BY / HAVING require the SELECT form", q.group_by[0] if q.group_by else "having")
    for v in q.group_by:
        if v not in bound:
            err(f"GROUP BY variable {v.n3()} is unbound", v)
    has_agg_select = q.is_select and bool(q.aggregates())
    if q.having is not None:
        if not q.group_by:
            err("HAVING requires GROUP BY", "having")
        for v in expr_vars(q.having, inside_aggregates=False):
            if v not in q.group_by and v not in aliases:
                err(f"HAVING variable {v.n3()} is not a group key", v)
        for n in expr_nodes(q.having):
            if isinstance(n, Aggregate) and n.arg is not None and n.arg not in bound:
                err(f"aggregated variable {n.arg.n3()} is unbound", n)
    for f in q.filters:
        for n in expr_nodes(f):
            if isinstance(n, Aggregate):
                err("aggregates are not allowed in FILTER", n)
        for v in expr_vars(f):
            if v not in bound:
                err(f"filter variable {v.n3()} is unbound", v)
    for e in list(q.filters) + ([q.having] if q.having is not None else []):
        for n in expr_nodes(e):
            if isinstance(n, Call):
                if n.name not in BUILTIN_ARITY:
                    err(f"unknown function {n.name!r}", n)
                elif len(n.args) != BUILTIN_ARITY[n.name]:
                    err(f"{n.name} expects {BUILTIN_ARITY[n.name]} arguments, got {len(n.args)}", n)
    if q.order_by is not None:
        for v in expr_vars(q.order_by.expr, inside_aggregates=False):
            if v not in bound and v not in aliases:
                err(f"ORDER BY variable {v.n3()} is unbound", v)
            elif has_agg_select and v not in q.group_by and v not in aliases:
                err(f"ORDER BY variable {v.n3()} is not a group key", v)
    return errs


def parse_query(text: str, prefixes: Mapping[str, str] | None = None, *, line: int = 1, col: int = 1) -> Query:
    """Parse and validate one query; raises :class:`QueryError` with positioned diagnostics."""
    parser = _Parser(tokenize(text, line, col), prefixes)
    q = parser.query()
    errs = validate(q, parser.positions)
    if errs:
        raise QueryError(errs)
    return q


# ---------------------------------------------------------------------------
# rule documents


@dataclass
class _Node:
    props: list = field(default_factory=list)  # (Iri, value, Token)


class _WrapperParser(_Parser):
    """Turtle-ish reader for SHACL-shaped rule documents."""

    def value(self):
        tok = self.tok
        if tok.text == "[" and tok.kind == "PUNCT":
            self.i += 1
            node = _Node()
            if not self.accept("]"):
                self.pred_obj_list(node)
                self.expect("]")
            return node
        if tok.kind == "LONGSTRING":
            self.i += 1
            return (tok.text[3:-3], tok)
        named = self.named()
        if named is not None:
            return named
        lit = self.literal()
        if lit is not None:
            return lit
        self.fail(f"unexpected {self.found()}", ["IRI", "literal", "'['", '\'"""\''])

    def wrapper_verb(self) -> Iri:
        if self.tok.kind == "IDENT" and self.tok.text == "a":
            self.i += 1
            return Iri(RDF_TYPE)
        named = self.named()
        if named is None:
            self.fail(f"unexpected {self.found()}", ["predicate"])
        return named

    def starts_statement(self) -> bool:
        return self.tok.kind in ("PNAME", "IRIREF") and self.peek().kind == "IDENT" and self.peek().text == "a"

    def pred_obj_list(self, node: _Node) -> None:
        while True:
            tok = self.tok
            pred = self.wrapper_verb()
            node.props.append((pred, self.value(), tok))
            while self.accept(","):
                node.props.append((pred, self.value(), tok))
            if not self.accept(";"):
                return
            if self.tok.text in ("]", ".") or self.tok.kind == "EOF" or self.starts_statement():
                return

    def document(self) -> list:
        shapes = []
        while self.tok.kind != "EOF":
            if self.tok.kind == "PREFIX_DECL" or self.tok.is_kw("PREFIX"):
                self.prologue()
                continue
            tok = self.tok
            subject = self.named()
            if subject is None:
                self.fail(f"unexpected {self.found()}", ["rule shape IRI"])
            node = _Node()
            self.pred_obj_list(node)
            self.accept(".")
            shapes.append((subject, node, tok))
        return shapes


def _rules_from_shape(subject: Iri, node: _Node, tok: Token, prefixes) -> list[Rule]:
    types = [v for p, v, _ in node.props if p.value == RDF_TYPE]
    if Iri(SH + "NodeShape") not in types:
        raise QueryError([Diagnostic("wrapper", f"{compact(subject)} is not typed sh:NodeShape", tok.line, tok.col)])
    weights = [(v, t) for p, v, t in node.props if p == SSR_WEIGHT]
    weight = None
    if len(weights) > 1:
        raise QueryError([Diagnostic("wrapper", "more than one ssr:weight", weights[1][1].line, weights[1][1].col)])
    if weights:
        w, wt = weights[0]
        num = w.numeric() if isinstance(w, Literal) and w.datatype != "string" else None
        if num is None or not (num > 0) or math.isinf(num):
            raise QueryError([Diagnostic("wrapper", "ssr:weight must be a positive number", wt.line, wt.col)])
        weight = float(num)
    elif SSR_SOFT in types:
        raise QueryError([Diagnostic("wrapper", "soft rule without ssr:weight", tok.line, tok.col)])
    bodies = [(v, t) for p, v, t in node.props if p == Iri(SH + "rule")]
    if not bodies:
        raise QueryError([Diagnostic("wrapper", "shape has no sh:rule", tok.line, tok.col)])
    rules = []
    for k, (body, bt) in enumerate(bodies):
        if not isinstance(body, _Node):
            raise QueryError([Diagnostic("wrapper", "sh:rule must be a blank node", bt.line, bt.col)])
        btypes = [v for p, v, _ in body.props if p.value == RDF_TYPE]
        if Iri(SH + "CQELSRule") not in btypes:
            raise QueryError([Diagnostic("wrapper", "sh:rule node is not typed sh:CQELSRule", bt.line, bt.col)])
        constructs = [v for p, v, _ in body.props if p == Iri(SH + "construct")]
        if len(constructs) != 1 or not isinstance(constructs[0], tuple):
            raise QueryError([Diagnostic("wrapper", "sh:rule needs exactly one sh:construct long string", bt.line, bt.col)])
        text, st = constructs[0]
        q = parse_query(_unescape(text), prefixes, line=st.line, col=st.col + 3)
        if q.is_select:
            raise QueryError([Diagnostic("wrapper", "sh:construct must hold a CONSTRUCT query", st.line, st.col)])
        rid = subject if len(bodies) == 1 else Iri(f"{subject.value}_{k + 1}")
        rules.append(Rule(rid, weight, q))
    return rules


def parse_rule_document(text: str) -> list[Rule]:
    """Parse a rule document into rules, in document order."""
    parser = _WrapperParser(tokenize(text))
    shapes = parser.document()
    rules: list[Rule] = []
    for subject, node, tok in shapes:
        rules.extend(_rules_from_shape(subject, node, tok, parser.prefixes))
    ids = [r.id for r in rules]
    if len(set(ids)) != len(ids):
        raise QueryError([Diagnostic("wrapper", "duplicate rule id")])
    return rules


# ---------------------------------------------------------------------------
# canonical printing


def _term(t, predicate: bool = False) -> str:
    if isinstance(t, Path):
        return "/".join(_term(s, True) for s in t.steps)
    if isinstance(t, QuotedTriple):
        return f"<<{_term(t.subject)} {_term(t.predicate, True)} {_term(t.object)}>>"
    if isinstance(t, Literal) and t.datatype == "decimal" and not re.fullmatch(r"\d+\.\d+", t.lexical):
        return t.lexical  # unreachable for parsed input
    return compact(t, DEFAULT_PREFIXES, predicate=predicate)


def _pattern(p) -> str:
    if isinstance(p, Anchor):
        return f"{_term(p.quoted)} @ {p.time.n3()} ."
    text = f"{_term(p.subject)} {_term(p.predicate, True)} {_term(p.object)}"
    if p.time is not None:
        text += f" @ {p.time.n3()}"
    return text + " ."


def _duration(ms: int) -> str:
    for unit, size in (("h", 3_600_000), ("m", 60_000), ("s", 1000)):
        if ms % size == 0:
            return f"{ms // size}{unit}"
    return f"{ms}ms"


def serialize_expr(e) -> str:
    if isinstance(e, BinOp):
        return f"({serialize_expr(e.left)} {e.op} {serialize_expr(e.right)})"
    if isinstance(e, UnaryOp):
        return f"{e.op}{serialize_expr(e.operand)}"
    if isinstance(e, Call):
        return f"{e.name}({', '.join(serialize_expr(a) for a in e.args)})"
    if isinstance(e, Aggregate):
        inner = "*" if e.arg is None else e.arg.n3()
        return f"{e.func}({'DISTINCT ' if e.distinct else ''}{inner})"
    return _term(e)


def _block(b: StreamBlock, indent: str, naf: bool = False) -> list[str]:
    src = b.source.n3() if isinstance(b.source, Variable) else _term(b.source)
    if b.window is None:
        win = " [NOW]"
    else:
        on = f" ON {_term(b.window.on)}" if b.window.on is not None else ""
        win = f" [RANGE {_duration(b.window.width_ms)}{on}]"
    lines = [f"{indent}{'NAF ' if naf else ''}STREAM {src}{win} {{"]
    lines += [f"{indent}  {_pattern(p)}" for p in b.patterns]
    lines.append(f"{indent}}}")
    return lines


def serialize_query(q: Query) -> str:
    lines = []
    if q.is_select:
        items = []
        for it in q.form.items:
            if isinstance(it, Variable):
                items.append(it.n3())
            else:
                items.append(f"({serialize_expr(it.aggregate)} AS {it.alias.n3()})")
        lines.append(f"SELECT {'DISTINCT ' if q.form.distinct else ''}{' '.join(items)}")
    else:
        lines.append("CONSTRUCT {")
        lines += [f"  {_pattern(p)}" for p in q.form.template]
        lines.append("}")
    lines.append("WHERE {")
    for b in q.stream_blocks:
        lines += _block(b, "  ")
    for p in q.static_patterns:
        lines.append(f"  {_pattern(p)}")
    for b in q.naf_blocks:
        lines += _block(b, "  ", naf=True)
    for f in q.filters:
        lines.append(f"  FILTER {serialize_expr(f) if isinstance(f, BinOp) else '(' + serialize_expr(f) + ')'}")
    lines.append("}")
    if q.group_by:
        lines.append("GROUP BY " + " ".join(v.n3() for v in q.group_by))
    if q.having is not None:
        lines.append(f"HAVING ({serialize_expr(q.having)})")
    if q.order_by is not None:
        lines.append(f"ORDER BY {'DESC' if q.order_by.descending else 'ASC'}({serialize_expr(q.order_by.expr)})")
    return "\n".join(lines) + "\n"


def _decimal_text(value: float) -> str:
    text = repr(float(value))
    if "e" in text or "E" in text:
        text = format(float(value), ".20f").rstrip("0")
        if text.endswith("."):
            text += "0"
    return text


def serialize_rule(rule: Rule) -> str:
    body = serialize_query(rule.query).replace('"""', '\\"""')
    lines = [f"{_term(rule.id)} a sh:NodeShape ;"]
    if rule.weight is not None:
        lines.append(f"  ssr:weight {_decimal_text(rule.weight)} ;")
    lines.append("  sh:rule [")
    lines.append("    a sh:CQELSRule ;")
    lines.append(f'    sh:construct """\n{body}""" ;')
    lines.append("  ] .")
    return "\n".join(lines) + "\n"


def serialize_ast(node) -> str:
    """Canonical text for a Query, a Rule, or a list of Rules."""
    if isinstance(node, Query):
        return serialize_query(node)
    if isinstance(node, Rule):
        return serialize_rule(node)
    return "\n".join(serialize_rule(r) for r in node)

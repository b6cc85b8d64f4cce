"""RDF-star terms, timed streams, knowledge graphs and a Turtle-star subset parser."""

from __future__ import annotations

import bisect
import re
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Union

MAX_QUOTE_DEPTH = 8

RDF_TYPE = "http://www.w3.org/1999/02/22-rdf-syntax-ns#type"

DEFAULT_PREFIXES: dict[str, str] = {
    "": "http://thoth.example.org/ns#",
    "rdf": "http://www.w3.org/1999/02/22-rdf-syntax-ns#",
    "rdfs": "http://www.w3.org/2000/01/rdf-schema#",
    "xsd": "http://www.w3.org/2001/XMLSchema#",
    "sosa": "http://www.w3.org/ns/sosa/",
    "ssr": "http://thoth.example.org/ssr#",
    "prov": "http://www.w3.org/ns/prov#",
    "sh": "http://www.w3.org/ns/shacl#",
}

DATATYPES = ("string", "integer", "decimal", "boolean")
_DECIMAL_FORM = re.compile(r"^[+-]?(\d+(\.\d*)?|\.\d+)$")


class RdfSyntaxError(ValueError):
    """Parse failure with a 1-based source position."""

    def __init__(self, message: str, line: int = 0, column: int = 0):
        super().__init__(f"{line}:{column}: {message}")
        self.message = message
        self.line = line
        self.column = column


@dataclass(frozen=True, order=True)
class Iri:
    value: str

    def n3(self) -> str:
        return f"<{self.value}>"


@dataclass(frozen=True)
class Literal:
    lexical: str
    datatype: str = "string"

    def __post_init__(self):
        if self.datatype not in DATATYPES:
            raise ValueError(f"unsupported datatype {self.datatype!r}")

    def n3(self) -> str:
        if self.datatype == "string":
            escaped = self.lexical.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n")
            return f'"{escaped}"'
        return self.lexical

    def numeric(self) -> float | None:
        """Numeric value, coercing strings that look like decimals."""
        if self.datatype in ("integer", "decimal"):
            return float(self.lexical)
        if self.datatype == "string" and _DECIMAL_FORM.match(self.lexical.strip()):
            return float(self.lexical)
        return None

    def python(self):
        if self.datatype == "integer":
            return int(self.lexical)
        if self.datatype == "decimal":
            return float(self.lexical)
        if self.datatype == "boolean":
            return self.lexical == "true"
        return self.lexical


@dataclass(frozen=True)
class BlankNode:
    label: str

    def n3(self) -> str:
        return f"_:{self.label}"


@dataclass(frozen=True)
class Variable:
    name: str

    def n3(self) -> str:
        return f"?{self.name}"


@dataclass(frozen=True)
class QuotedTriple:
    subject: "Term"
    predicate: "Term"
    object: "Term"

    def n3(self) -> str:
        return f"<< {self.subject.n3()} {self.predicate.n3()} {self.object.n3()} >>"

    def depth(self) -> int:
        inner = [t.depth() for t in (self.subject, self.object) if isinstance(t, QuotedTriple)]
        return 1 + max(inner, default=0)

    def as_triple(self) -> "Triple":
        return (self.subject, self.predicate, self.object)


Term = Union[Iri, Literal, BlankNode, Variable, QuotedTriple]
Triple = tuple  # (Term, Term, Term)


def integer(value: int) -> Literal:
    return Literal(str(int(value)), "integer")


def decimal(value: float) -> Literal:
    return Literal(repr(float(value)), "decimal")


def string(value: str) -> Literal:
    return Literal(value, "string")


def iri(name: str, prefixes: Mapping[str, str] | None = None) -> Iri:
    """Expand ``pre:local`` against ``prefixes`` (defaults); full IRIs pass through."""
    prefixes = DEFAULT_PREFIXES if prefixes is None else prefixes
    if name == "a":
        return Iri(RDF_TYPE)
    if "://" in name or name.startswith("urn:"):
        return Iri(name)
    pre, sep, local = name.partition(":")
    if sep and pre in prefixes:
        return Iri(prefixes[pre] + local)
    raise KeyError(f"unknown prefix in {name!r}")


def compact(term: Term, prefixes: Mapping[str, str] | None = None, predicate: bool = False) -> str:
    """Human-readable form using prefixed names where possible."""
    prefixes = DEFAULT_PREFIXES if prefixes is None else prefixes
    if isinstance(term, Iri):
        if predicate and term.value == RDF_TYPE:
            return "a"
        best = None
        for pre, ns in prefixes.items():
            if term.value.startswith(ns) and (best is None or len(ns) > len(prefixes[best])):
                local = term.value[len(ns):]
                if _LOCAL_RE.fullmatch(local):
                    best = pre
        if best is not None:
            return f"{best}:{term.value[len(prefixes[best]):]}"
        return term.n3()
    if isinstance(term, QuotedTriple):
        return "<< " + format_triple(term.as_triple(), prefixes) + " >>"
    return term.n3()


def format_triple(triple: Triple, prefixes: Mapping[str, str] | None = None) -> str:
    s, p, o = triple
    return f"{compact(s, prefixes)} {compact(p, prefixes, predicate=True)} {compact(o, prefixes)}"


def term_key(term: Term) -> str:
    return term.n3()


def triple_key(triple: Triple) -> str:
    return " ".join(t.n3() for t in triple)


def is_ground(term: Term) -> bool:
    if isinstance(term, Variable):
        return False
    if isinstance(term, QuotedTriple):
        return all(is_ground(t) for t in term.as_triple())
    return True


def check_triple(triple: Triple) -> None:
    s, p, o = triple
    if not isinstance(p, Iri):
        raise ValueError(f"predicate must be an IRI, got {p!r}")
    for t in (s, o):
        if isinstance(t, QuotedTriple):
            if t.depth() > MAX_QUOTE_DEPTH:
                raise ValueError("quoted triple nesting exceeds cap")
            check_triple(t.as_triple())


# ---------------------------------------------------------------------------
# matching


Binding = dict  # Variable -> Term


def unify(pattern: Term, data: Term, binding: Binding) -> Binding | None:
    """Extend ``binding`` so that ``pattern`` equals ``data``; None on mismatch."""
    if isinstance(pattern, Variable):
        bound = binding.get(pattern)
        if bound is None:
            out = dict(binding)
            out[pattern] = data
            return out
        return binding if bound == data else None
    if isinstance(pattern, QuotedTriple):
        if not isinstance(data, QuotedTriple):
            return None
        for p, d in zip(pattern.as_triple(), data.as_triple()):
            binding = unify(p, d, binding)
            if binding is None:
                return None
        return binding
    return binding if pattern == data else None


def unify_triple(pattern: Triple, triple: Triple, binding: Binding) -> Binding | None:
    for p, d in zip(pattern, triple):
        binding = unify(p, d, binding)
        if binding is None:
            return None
    return binding


def substitute(term: Term, binding: Mapping) -> Term:
    if isinstance(term, Variable):
        return binding.get(term, term)
    if isinstance(term, QuotedTriple):
        return QuotedTriple(*(substitute(t, binding) for t in term.as_triple()))
    return term


def binding_sort_key(binding: Mapping) -> tuple:
    return tuple((v.name, binding[v].n3()) for v in sorted(binding, key=lambda v: v.name))


@dataclass(frozen=True)
class Path:
    """Sequence property path ``p1/p2/...`` (only usable in graph patterns)."""

    steps: tuple

    def n3(self) -> str:
        return "/".join(s.n3() for s in self.steps)


class KnowledgeGraph:
    """A set of ground triples with predicate-indexed pattern matching."""

    def __init__(self, triples: Iterable[Triple] = ()):
        self._triples: set = set()
        self._by_pred: dict = {}
        for t in triples:
            self.add(t)

    def add(self, triple: Triple) -> None:
        triple = tuple(triple)
        if triple in self._triples:
            return
        check_triple(triple)
        if not all(is_ground(t) for t in triple):
            raise ValueError("variables cannot be stored in a graph")
        self._triples.add(triple)
        self._by_pred.setdefault(triple[1], []).append(triple)

    def update(self, triples: Iterable[Triple]) -> None:
        for t in triples:
            self.add(t)

    def __contains__(self, triple) -> bool:
        return tuple(triple) in self._triples

    def __len__(self) -> int:
        return len(self._triples)

    def __iter__(self) -> Iterator[Triple]:
        return iter(sorted(self._triples, key=triple_key))

    def candidates(self, predicate: Term) -> Iterable[Triple]:
        if isinstance(predicate, Variable):
            return self._triples
        return self._by_pred.get(predicate, ())

    def match(self, pattern: Triple, binding: Binding | None = None) -> list[Binding]:
        return graph_match(self, pattern, binding)

    def copy(self) -> "KnowledgeGraph":
        return KnowledgeGraph(self._triples)


def _match_raw(graph: KnowledgeGraph, pattern: Triple, binding: Binding) -> Iterator[Binding]:
    s, p, o = pattern
    if isinstance(p, Path):
        yield from _match_path(graph, s, list(p.steps), o, binding)
        return
    pred = substitute(p, binding)
    for triple in graph.candidates(pred):
        b = unify_triple(pattern, triple, binding)
        if b is not None:
            yield b


def _match_path(graph, s, steps, o, binding, depth=0) -> Iterator[Binding]:
    if len(steps) == 1:
        yield from _match_raw(graph, (s, steps[0], o), binding)
        return
    mid = Variable(f"_path{depth}")
    for b in _match_raw(graph, (s, steps[0], mid), binding):
        node = b[mid]
        rest = {k: v for k, v in b.items() if k != mid}
        nxt = _match_path(graph, node, steps[1:], o, rest, depth + 1)
        yield from nxt


def graph_match(graph: KnowledgeGraph, pattern: Triple, binding: Binding | None = None) -> list[Binding]:
    """All bindings of the pattern's variables under which it is in ``graph``.

    Results are de-duplicated and ordered by the canonical serialization of
    the bound terms.
    """
    binding = dict(binding or {})
    seen = {}
    for b in _match_raw(graph, tuple(pattern), binding):
        key = binding_sort_key(b)
        seen.setdefault(key, b)
    return [seen[k] for k in sorted(seen)]


# ---------------------------------------------------------------------------
# streams


@dataclass(frozen=True)
class TimedTriple:
    triple: Triple
    timestamp: int

    def __post_init__(self):
        if self.timestamp < 0:
            raise ValueError("timestamp must be >= 0")


@dataclass
class SemanticStream:
    uri: Iri
    elements: list = field(default_factory=list)
    metadata: KnowledgeGraph = field(default_factory=KnowledgeGraph)

    def __post_init__(self):
        self._times = [e.timestamp for e in self.elements]
        if self._times != sorted(self._times):
            raise ValueError("stream elements out of timestamp order")

    def append(self, triple: Triple, timestamp: int) -> TimedTriple:
        if self._times and timestamp < self._times[-1]:
            raise ValueError(
                f"timestamp {timestamp} precedes last element {self._times[-1]} in {self.uri.value}"
            )
        triple = tuple(triple)
        check_triple(triple)
        if not all(is_ground(t) for t in triple):
            raise ValueError("variables cannot be stored in a stream")
        element = TimedTriple(triple, timestamp)
        self.elements.append(element)
        self._times.append(timestamp)
        return element

    def extend(self, triples: Iterable[Triple], timestamp: int) -> None:
        for t in triples:
            self.append(t, timestamp)

    def range(self, lo_exclusive: int, hi_inclusive: int) -> list[TimedTriple]:
        lo = bisect.bisect_right(self._times, lo_exclusive)
        hi = bisect.bisect_right(self._times, hi_inclusive)
        return self.elements[lo:hi]

    def __len__(self) -> int:
        return len(self.elements)


def window(stream: SemanticStream, now: int, width: int) -> list[TimedTriple]:
    """Elements with timestamp in (now - width, now]."""
    if width <= 0:
        raise ValueError("window width must be positive")
    return stream.range(now - width, now)


# ---------------------------------------------------------------------------
# Turtle-star subset

_LOCAL_RE = re.compile(r"[A-Za-z0-9_](?:[A-Za-z0-9_.\-]*[A-Za-z0-9_\-])?|")

_TOKEN_SPEC = [
    ("WS", r"[ \t\r\n]+"),
    ("COMMENT", r"(?://|#)[^\n]*"),
    ("QOPEN", r"<<"),
    ("QCLOSE", r">>"),
    ("IRIREF", r"<[^<>\s\"{}|^`\\]*>"),
    ("PREFIX_KW", r"@prefix\b"),
    ("TIME_KW", r"@time\b"),
    ("STRING", r"'(?:[^'\\\n]|\\.)*'|\"(?:[^\"\\\n]|\\.)*\""),
    ("NUMBER", r"[+-]?(?:\d+\.\d+|\d+)(?![A-Za-z_:])"),
    ("BNODE", r"_:[A-Za-z0-9_\-]+"),
    ("PNAME", r"(?:[A-Za-z][A-Za-z0-9_\-]*)?:(?:[A-Za-z0-9_](?:[A-Za-z0-9_.\-]*[A-Za-z0-9_\-])?)?"),
    ("KEYWORD", r"[A-Za-z]+\b"),
    ("PUNCT", r"[.;,]"),
]
_TOKEN_RE = re.compile("|".join(f"(?P<{n}>{p})" for n, p in _TOKEN_SPEC))


@dataclass(frozen=True)
class _Tok:
    kind: str
    text: str
    line: int
    col: int


def _tokenize(text: str) -> list[_Tok]:
    tokens = []
    pos, line, line_start = 0, 1, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise RdfSyntaxError(f"unexpected character {text[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        chunk = m.group()
        if kind not in ("WS", "COMMENT"):
            tokens.append(_Tok(kind, chunk, line, pos - line_start + 1))
        newlines = chunk.count("\n")
        if newlines:
            line += newlines
            line_start = pos + chunk.rfind("\n") + 1
        pos = m.end()
    tokens.append(_Tok("EOF", "", line, pos - line_start + 1))
    return tokens


def _unescape(body: str) -> str:
    return re.sub(r"\\(.)", lambda m: {"n": "\n", "t": "\t"}.get(m.group(1), m.group(1)), body)


class _TurtleParser:
    def __init__(self, text: str, prefixes: Mapping[str, str] | None, max_depth: int):
        self.tokens = _tokenize(text)
        self.i = 0
        self.prefixes = dict(DEFAULT_PREFIXES if prefixes is None else prefixes)
        self.max_depth = max_depth
        self.time = 0
        self.out: list = []

    @property
    def tok(self) -> _Tok:
        return self.tokens[self.i]

    def error(self, msg: str, tok: _Tok | None = None) -> RdfSyntaxError:
        tok = tok or self.tok
        return RdfSyntaxError(msg, tok.line, tok.col)

    def expect(self, text: str) -> _Tok:
        if self.tok.text != text:
            raise self.error(f"expected {text!r}, found {self.tok.text or 'end of input'!r}")
        tok = self.tok
        self.i += 1
        return tok

    def parse(self) -> list:
        while self.tok.kind != "EOF":
            if self.tok.kind == "PREFIX_KW":
                self.i += 1
                name = self.tok
                if name.kind != "PNAME" or not name.text.endswith(":"):
                    raise self.error("expected prefix name")
                self.i += 1
                ref = self.tok
                if ref.kind != "IRIREF":
                    raise self.error("expected IRI")
                self.i += 1
                self.prefixes[name.text[:-1]] = ref.text[1:-1]
                self.expect(".")
            elif self.tok.kind == "TIME_KW":
                self.i += 1
                if self.tok.kind != "NUMBER" or "." in self.tok.text:
                    raise self.error("expected integer tick")
                self.time = int(self.tok.text)
                self.i += 1
                self.expect(".")
            else:
                self.statement()
        return self.out

    def statement(self) -> None:
        subject = self.term(0, position="subject")
        while True:
            pred = self.verb()
            obj = self.term(0, position="object")
            self.out.append(((subject, pred, obj), self.time))
            if self.tok.text == ";":
                self.i += 1
                if self.tok.text == ".":
                    break
                continue
            break
        self.expect(".")

    def verb(self) -> Iri:
        tok = self.tok
        if tok.kind == "KEYWORD" and tok.text == "a":
            self.i += 1
            return Iri(RDF_TYPE)
        if tok.kind in ("IRIREF", "PNAME"):
            return self.named()
        raise self.error("expected predicate IRI")

    def named(self) -> Iri:
        tok = self.tok
        self.i += 1
        if tok.kind == "IRIREF":
            return Iri(tok.text[1:-1])
        pre, _, local = tok.text.partition(":")
        if pre not in self.prefixes:
            raise self.error(f"unknown prefix {pre + ':'!r}", tok)
        return Iri(self.prefixes[pre] + local)

    def term(self, depth: int, position: str):
        tok = self.tok
        if tok.kind == "QOPEN":
            if depth + 1 > self.max_depth:
                raise self.error("quoted triple nesting depth exceeded")
            self.i += 1
            s = self.term(depth + 1, "subject")
            p = self.verb()
            o = self.term(depth + 1, "object")
            if self.tok.kind != "QCLOSE":
                raise self.error("expected '>>'")
            self.i += 1
            return QuotedTriple(s, p, o)
        if tok.kind in ("IRIREF", "PNAME"):
            return self.named()
        if tok.kind == "BNODE":
            self.i += 1
            return BlankNode(tok.text[2:])
        if position == "object":
            if tok.kind == "STRING":
                self.i += 1
                return Literal(_unescape(tok.text[1:-1]), "string")
            if tok.kind == "NUMBER":
                self.i += 1
                return Literal(tok.text, "decimal" if "." in tok.text else "integer")
            if tok.kind == "KEYWORD" and tok.text in ("true", "false"):
                self.i += 1
                return Literal(tok.text, "boolean")
        raise self.error(f"unexpected {tok.text or 'end of input'!r} in {position} position")


def parse_turtle_star(
    text: str, prefixes: Mapping[str, str] | None = None, max_depth: int = MAX_QUOTE_DEPTH
) -> list[Triple]:
    """Parse the Turtle-star subset into asserted triples (in document order).

    Quoted triples are terms only; they are not asserted.
    """
    return [t for t, _ in _TurtleParser(text, prefixes, max_depth).parse()]


def parse_timed(
    text: str, prefixes: Mapping[str, str] | None = None, max_depth: int = MAX_QUOTE_DEPTH
) -> list[TimedTriple]:
    """Like :func:`parse_turtle_star` but honours ``@time N .`` directives."""
    return [TimedTriple(t, ts) for t, ts in _TurtleParser(text, prefixes, max_depth).parse()]


def serialize_turtle_star(triples: Iterable[Triple], prefixes: Mapping[str, str] | None = None) -> str:
    """One statement per line; output re-parses to the same triples."""
    prefixes = DEFAULT_PREFIXES if prefixes is None else prefixes
    lines = [f"@prefix {p}: <{ns}> ." for p, ns in sorted(prefixes.items())]
    for t in triples:
        lines.append(format_triple(t, prefixes) + " .")
    return "\n".join(lines) + "\n"


def serialize_timed(elements: Iterable[TimedTriple], prefixes: Mapping[str, str] | None = None) -> str:
    prefixes = DEFAULT_PREFIXES if prefixes is None else prefixes
    lines = [f"@prefix {p}: <{ns}> ." for p, ns in sorted(prefixes.items())]
    current = None
    for e in elements:
        if e.timestamp != current:
            current = e.timestamp
            lines.append(f"@time {current} .")
        lines.append(format_triple(e.triple, prefixes) + " .")
    return "\n".join(lines) + "\n"


def stream_from_timed(uri: Iri, elements: Iterable[TimedTriple]) -> SemanticStream:
    stream = SemanticStream(uri)
    for e in sorted(elements, key=lambda e: e.timestamp):
        stream.append(e.triple, e.timestamp)
    return stream


def parse_term(text: str, prefixes: Mapping[str, str] | None = None) -> Term:
    """Parse a single term written as in an object position."""
    p = _TurtleParser(text, prefixes, MAX_QUOTE_DEPTH)
    term = p.term(0, "object")
    if p.tok.kind != "EOF":
        raise p.error(f"trailing input {p.tok.text!r}")
    return term

"""Text form of the query algebra, plus typed-literal parsing for the CLI.

Grammar (AND binds tighter than OR; NOT binds tightest):

    expr    := or
    or      := and ('OR' and)*
    and     := term ('AND' term)*
    term    := 'NOT' term | '(' expr ')' | atom
    atom    := schema:"name"
             | member-of:<document-id>
             | content:"token"
             | count(prop) ('=' | '!=') ('single' | 'multiple')
             | exists(prop)
             | prop op literal
    op      := = | != | < | <= | > | >=      (unicode forms accepted)
    literal := "text" | integer | float | ISO-8601 date-time | true | false

Literal type follows syntax: quoted is Text, bare digits Integer, a decimal
point or exponent Float, an ISO date-time Timestamp, true/false Boolean.
Keywords are uppercase. Errors carry the character offset.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from harland.errors import ParseError
from harland.model import DocumentId, Value
from harland.query import (
    And,
    Card,
    Cardinality,
    Cmp,
    CmpOp,
    ContentContains,
    Exists,
    HasSchema,
    MemberOf,
    Not,
    Or,
    QueryExpr,
)

_INT_RE = re.compile(r"^[+-]?\d+$")
_FLOAT_RE = re.compile(r"^[+-]?(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?$")
_DATETIME_RE = re.compile(r"^\d{4}-\d{2}-\d{2}T\d{2}:\d{2}:\d{2}(?:\.\d+)?(?:Z|[+-]\d{2}:\d{2})?$")

_OP_ALIASES = {"≠": "!=", "≤": "<=", "≥": ">="}
_WORD_BREAK = set(' \t\r\n()"=!<>≠≤≥')


@dataclass(frozen=True)
class _Token:
    kind: str  # "(" ")" "op" "string" "word" "end"
    text: str
    pos: int


def _lex(source: str) -> list[_Token]:
    tokens: list[_Token] = []
    i, n = 0, len(source)
    while i < n:
        ch = source[i]
        if ch.isspace():
            i += 1
            continue
        if ch in "()":
            tokens.append(_Token(ch, ch, i))
            i += 1
            continue
        if ch == '"':
            start = i
            i += 1
            out = []
            while i < n and source[i] != '"':
                if source[i] == "\\" and i + 1 < n:
                    out.append(source[i + 1])
                    i += 2
                else:
                    out.append(source[i])
                    i += 1
            if i >= n:
                raise ParseError("unterminated string", start)
            i += 1
            tokens.append(_Token("string", "".join(out), start))
            continue
        if ch in _OP_ALIASES:
            tokens.append(_Token("op", _OP_ALIASES[ch], i))
            i += 1
            continue
        if ch in "=<>!":
            start = i
            if ch == "=":
                tokens.append(_Token("op", "=", start))
                i += 1
            elif i + 1 < n and source[i + 1] == "=":
                if ch == "!":
                    tokens.append(_Token("op", "!=", start))
                else:
                    tokens.append(_Token("op", ch + "=", start))
                i += 2
            elif ch in "<>":
                tokens.append(_Token("op", ch, start))
                i += 1
            else:
                raise ParseError(f"unexpected character {ch!r}", start)
            continue
        start = i
        while i < n and source[i] not in _WORD_BREAK:
            i += 1
        tokens.append(_Token("word", source[start:i], start))
    tokens.append(_Token("end", "", n))
    return tokens


class _Parser:
    def __init__(self, source: str):
        self.source = source
        self.tokens = _lex(source)
        self.index = 0

    def peek(self) -> _Token:
        return self.tokens[self.index]

    def advance(self) -> _Token:
        tok = self.tokens[self.index]
        self.index += 1
        return tok

    def expect(self, kind: str, what: str) -> _Token:
        tok = self.peek()
        if tok.kind != kind:
            raise ParseError(f"expected {what}", tok.pos)
        return self.advance()

    # expr := and ('OR' and)*
    def parse_expr(self) -> QueryExpr:
        terms = [self.parse_and()]
        while self.peek().kind == "word" and self.peek().text == "OR":
            self.advance()
            terms.append(self.parse_and())
        return terms[0] if len(terms) == 1 else Or(tuple(terms))

    def parse_and(self) -> QueryExpr:
        terms = [self.parse_term()]
        while self.peek().kind == "word" and self.peek().text == "AND":
            self.advance()
            terms.append(self.parse_term())
        return terms[0] if len(terms) == 1 else And(tuple(terms))

    def parse_term(self) -> QueryExpr:
        tok = self.peek()
        if tok.kind == "word" and tok.text == "NOT":
            self.advance()
            return Not(self.parse_term())
        if tok.kind == "(":
            self.advance()
            inner = self.parse_expr()
            self.expect(")", "')'")
            return inner
        return self.parse_atom()

    def parse_atom(self) -> QueryExpr:
        tok = self.peek()
        if tok.kind != "word":
            raise ParseError("expected a predicate", tok.pos)
        word = tok.text
        if word == "schema:":
            self.advance()
            name = self.expect("string", 'a quoted schema name after schema:')
            return HasSchema(name.text)
        if word == "content:":
            self.advance()
            token = self.expect("string", 'a quoted token after content:')
            return ContentContains(token.text)
        if word.startswith("member-of:"):
            self.advance()
            id_text = word[len("member-of:"):]
            try:
                return MemberOf(DocumentId.parse(id_text))
            except ValueError:
                raise ParseError("malformed document id", tok.pos + len("member-of:")) from None
        if word == "count":
            self.advance()
            prop = self._parenthesized_name()
            op = self.expect("op", "'=' or '!=' after count(...)")
            if op.text not in ("=", "!="):
                raise ParseError("count() supports only '=' and '!='", op.pos)
            mode = self.expect("word", "'single' or 'multiple'")
            if mode.text not in ("single", "multiple"):
                raise ParseError("expected 'single' or 'multiple'", mode.pos)
            card = Cardinality(prop, Card.SINGLE if mode.text == "single" else Card.MULTIPLE)
            return Not(card) if op.text == "!=" else card
        if word == "exists":
            self.advance()
            return Exists(self._parenthesized_name())
        # prop op literal
        self.advance()
        op = self.expect("op", "a comparison operator")
        lit_tok = self.advance()
        literal = self._literal(lit_tok)
        return Cmp(word, CmpOp(op.text), literal)

    def _parenthesized_name(self) -> str:
        self.expect("(", "'('")
        name = self.expect("word", "a property name")
        self.expect(")", "')'")
        return name.text

    def _literal(self, tok: _Token) -> Value:
        if tok.kind == "string":
            return Value.text(tok.text)
        if tok.kind != "word":
            raise ParseError("expected a literal", tok.pos)
        return _classify_bare_literal(tok.text, tok.pos)


def _classify_bare_literal(text: str, pos: int) -> Value:
    if text == "true":
        return Value.boolean(True)
    if text == "false":
        return Value.boolean(False)
    if _INT_RE.match(text):
        try:
            return Value.integer(int(text))
        except ValueError as exc:
            raise ParseError(str(exc), pos) from None
    if _DATETIME_RE.match(text):
        try:
            return Value.timestamp_text(text)
        except ValueError as exc:
            raise ParseError(str(exc), pos) from None
    if _FLOAT_RE.match(text) and any(c in text for c in ".eE"):
        return Value.floating(float(text))
    raise ParseError(f"not a literal: {text!r}", pos)


def parse_query(source: str) -> QueryExpr:
    """Parse query text; raises ParseError with a character position."""
    parser = _Parser(source)
    expr = parser.parse_expr()
    tail = parser.peek()
    if tail.kind != "end":
        raise ParseError("unexpected trailing input", tail.pos)
    return expr


def _unquote(body: str) -> str:
    out = []
    i = 0
    while i < len(body):
        if body[i] == "\\" and i + 1 < len(body):
            out.append(body[i + 1])
            i += 2
        else:
            out.append(body[i])
            i += 1
    return "".join(out)


def parse_cli_literal(text: str) -> Value:
    """Typed literal as given on a command line, where the shell has already
    eaten any quotes. An explicit `<type>:` tag forces the type; otherwise
    the bare word is classified by syntax and falls back to Text."""
    if len(text) >= 2 and text.startswith('"') and text.endswith('"'):
        return Value.text(_unquote(text[1:-1]))
    tag, sep, rest = text.partition(":")
    if sep:
        try:
            if tag == "text":
                return Value.text(rest)
            if tag == "integer":
                return Value.integer(int(rest))
            if tag == "float":
                return Value.floating(float(rest))
            if tag == "boolean":
                if rest not in ("true", "false"):
                    raise ValueError(f"not a boolean: {rest!r}")
                return Value.boolean(rest == "true")
            if tag == "timestamp":
                return Value.timestamp_text(rest)
            if tag == "bytes":
                return Value.binary(bytes.fromhex(rest))
        except ValueError as exc:
            raise ParseError(f"bad {tag} literal: {exc}", len(tag) + 1) from None
    try:
        return _classify_bare_literal(text, 0)
    except ParseError:
        return Value.text(text)


def render_literal(value: Value) -> str:
    """Human-facing rendering; parse_cli_literal reads it back."""
    from harland.model import ValueType

    t = value.vtype
    if t is ValueType.TEXT:
        escaped = value.payload.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    if t is ValueType.INTEGER:
        return str(value.payload)
    if t is ValueType.FLOAT:
        body = repr(value.payload)
        if _FLOAT_RE.match(body) and any(c in body for c in ".eE"):
            return body
        return f"float:{body}"  # infinities have no bare decimal form
    if t is ValueType.BOOLEAN:
        return "true" if value.payload else "false"
    if t is ValueType.TIMESTAMP:
        return value.to_timestamp_text()
    return f"bytes:{value.payload.hex()}"

"""Text formats: TAB-separated fact files and the rule language.

Fact files are UTF-8 lines with five TAB-separated fields
(fact_type, id, attr, value, value_type).  A ``#`` in column 0 starts a
comment line, blank lines are skipped, and ``\\t``/``\\n``/``\\\\`` escapes
are honored inside fields.  Parsing stops at the first malformed line and
reports its number.

The rule language is whitespace-insensitive::

    rule "usd profit" {
        when:
            (DailySales ?s profitEUR ?p double)
            (DailySales ?s EURUSD ?f double)
        then:
            add (DailySales ?s profitUSD (?p * ?f) double)
    }

Bare identifiers in term positions are string constants; ``?name`` is a
variable; a trailing ``[ (?a < ?b) ... ]`` block attaches comparison tests
to a condition.  A rule with an empty ``then:`` block is a query.
"""

from __future__ import annotations

import re
from typing import Iterable, Iterator, NamedTuple

from .model import (
    Action,
    ActionKind,
    Condition,
    Expr,
    Fact,
    HANDLE_KIND,
    NUMERIC_TYPES,
    POS_ATTR,
    POS_ID,
    POS_VALUE,
    Rule,
    Template,
    CompareOp,
    ValueType,
    Variable,
    VariableJoinTest,
    decode_value,
    encode_value,
    slot_kind,
)
from .strings import StringDictionary


class ParseError(Exception):
    """Input rejected; carries a 1-based line number for diagnostics."""

    def __init__(self, message: str, line: int, col: int | None = None):
        self.message = message
        self.line = line
        self.col = col
        where = f"line {line}" if col is None else f"line {line}, column {col}"
        super().__init__(f"{where}: {message}")


# ---------------------------------------------------------------------------
# Fact files
# ---------------------------------------------------------------------------

_INT_RE = re.compile(r"[+-]?[0-9]+\Z")
_FLOAT_RE = re.compile(r"[+-]?([0-9]+\.?[0-9]*|\.[0-9]+)([eE][+-]?[0-9]+)?\Z")


def escape_field(text: str) -> str:
    return text.replace("\\", "\\\\").replace("\t", "\\t").replace("\n", "\\n")


def unescape_field(text: str, line_no: int) -> str:
    if "\\" not in text:
        return text
    out = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch != "\\":
            out.append(ch)
            i += 1
            continue
        if i + 1 >= len(text):
            raise ParseError("dangling escape at end of field", line_no)
        nxt = text[i + 1]
        if nxt == "t":
            out.append("\t")
        elif nxt == "n":
            out.append("\n")
        elif nxt == "\\":
            out.append("\\")
        else:
            raise ParseError(f"unknown escape \\{nxt}", line_no)
        i += 2
    return "".join(out)


def parse_numeric_text(value_type: ValueType, text: str, line_no: int):
    """Parse the value field of a fact line according to its declared type."""
    if value_type is ValueType.STRING:
        return text
    if value_type is ValueType.BOOL:
        if text == "true":
            return True
        if text == "false":
            return False
        raise ParseError(f"bad bool literal {text!r}", line_no)
    if value_type in (ValueType.FLOAT, ValueType.DOUBLE):
        if not _FLOAT_RE.match(text):
            raise ParseError(f"bad float literal {text!r}", line_no)
        return float(text)
    if not _INT_RE.match(text):
        raise ParseError(f"bad integer literal {text!r}", line_no)
    return int(text)


def iter_facts(lines: Iterable[str], dictionary: StringDictionary) -> Iterator[Fact]:
    """Parse fact lines, interning handles into ``dictionary``.

    Yields facts in file order; duplicates are the caller's concern.
    """
    for line_no, raw in enumerate(lines, start=1):
        line = raw.rstrip("\n")
        if not line.strip():
            continue
        if line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 5:
            raise ParseError(
                f"expected 5 TAB-separated fields, got {len(fields)}", line_no
            )
        type_text, id_text, attr_text, value_text, vt_text = (
            unescape_field(f, line_no) for f in fields
        )
        try:
            value_type = ValueType.from_name(vt_text)
        except ValueError as exc:
            raise ParseError(str(exc), line_no) from None
        payload = parse_numeric_text(value_type, value_text, line_no)
        if value_type is ValueType.STRING:
            payload = dictionary.intern(payload)
        try:
            bits = encode_value(value_type, payload)
        except (ValueError, TypeError) as exc:
            raise ParseError(str(exc), line_no) from None
        yield Fact(
            dictionary.intern(type_text),
            dictionary.intern(id_text),
            dictionary.intern(attr_text),
            int(value_type),
            bits,
        )


def parse_facts(text: str, dictionary: StringDictionary) -> list[Fact]:
    return list(iter_facts(text.splitlines(), dictionary))


def format_value(value_type: ValueType, bits: int, dictionary: StringDictionary) -> str:
    """Render a stored value as fact-file text."""
    value = decode_value(value_type, bits)
    if value_type is ValueType.STRING:
        return dictionary.resolve(value)
    if value_type is ValueType.BOOL:
        return "true" if value else "false"
    return repr(value)


def serialize_fact(fact: Fact, dictionary: StringDictionary) -> str:
    value_type = ValueType(fact.value_type)
    fields = [
        dictionary.resolve(fact.fact_type),
        dictionary.resolve(fact.id),
        dictionary.resolve(fact.attr),
        format_value(value_type, fact.value, dictionary),
        value_type.type_name,
    ]
    return "\t".join(escape_field(f) for f in fields)


# ---------------------------------------------------------------------------
# Rule language tokenizer
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"""
      (?P<ws>\s+)
    | (?P<comment>\#[^\n]*)
    | (?P<var>\?[A-Za-z_][A-Za-z0-9_]*)
    | (?P<number>([0-9]+\.[0-9]*|\.[0-9]+|[0-9]+)([eE][+-]?[0-9]+)?)
    | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
    | (?P<qstring>'(?:\\.|[^'\\\n])*'|"(?:\\.|[^"\\\n])*")
    | (?P<punct>==|!=|<=|>=|[<>+\-*/(){}\[\],:])
    """,
    re.VERBOSE,
)

_QSTRING_ESCAPES = {"t": "\t", "n": "\n", "\\": "\\", "'": "'", '"': '"'}


class Token(NamedTuple):
    kind: str  # var | number | ident | qstring | punct | eof
    text: str
    line: int
    col: int


def _tokenize(text: str) -> list[Token]:
    tokens = []
    line = 1
    line_start = 0
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ParseError(
                f"unexpected character {text[pos]!r}", line, pos - line_start + 1
            )
        kind = m.lastgroup
        chunk = m.group()
        if kind not in ("ws", "comment"):
            tokens.append(Token(kind, chunk, line, pos - line_start + 1))
        newlines = chunk.count("\n")
        if newlines:
            line += newlines
            line_start = pos + chunk.rindex("\n") + 1
        pos = m.end()
    tokens.append(Token("eof", "", line, pos - line_start + 1))
    return tokens


def _unquote(token: Token) -> str:
    body = token.text[1:-1]
    if "\\" not in body:
        return body
    out = []
    i = 0
    while i < len(body):
        ch = body[i]
        if ch != "\\":
            out.append(ch)
            i += 1
            continue
        nxt = body[i + 1]  # regex guarantees a following char
        try:
            out.append(_QSTRING_ESCAPES[nxt])
        except KeyError:
            raise ParseError(
                f"unknown escape \\{nxt} in string", token.line, token.col
            ) from None
        i += 2
    return "".join(out)


# ---------------------------------------------------------------------------
# Rule parser
# ---------------------------------------------------------------------------

_KEYWORDS = {"rule", "when", "then", "add", "delete", "replace", "true", "false"}
_SLOT_NAMES = {POS_ID: "id", POS_ATTR: "attr", POS_VALUE: "value"}
_TEST_OPS = {op.value: op for op in CompareOp}


class _RuleParser:
    def __init__(self, text: str, dictionary: StringDictionary):
        self.tokens = _tokenize(text)
        self.pos = 0
        self.dictionary = dictionary

    # -- token plumbing -----------------------------------------------------

    def peek(self) -> Token:
        return self.tokens[self.pos]

    def advance(self) -> Token:
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def error(self, message: str, tok: Token | None = None) -> ParseError:
        tok = tok or self.peek()
        return ParseError(message, tok.line, tok.col)

    def expect_punct(self, text: str) -> Token:
        tok = self.peek()
        if tok.kind != "punct" or tok.text != text:
            raise self.error(f"expected {text!r}, got {tok.text!r}")
        return self.advance()

    def expect_keyword(self, word: str) -> Token:
        tok = self.peek()
        if tok.kind != "ident" or tok.text != word:
            raise self.error(f"expected {word!r}, got {tok.text!r}")
        return self.advance()

    def at_punct(self, text: str) -> bool:
        tok = self.peek()
        return tok.kind == "punct" and tok.text == text

    def at_keyword(self, word: str) -> bool:
        tok = self.peek()
        return tok.kind == "ident" and tok.text == word

    # -- grammar ------------------------------------------------------------

    def parse(self) -> list[Rule]:
        rules = []
        seen: dict[str, int] = {}
        while self.peek().kind != "eof":
            tok = self.peek()
            rule = self.rule()
            if rule.name in seen:
                raise ParseError(
                    f"duplicate rule name {rule.name!r} (first at line {seen[rule.name]})",
                    tok.line,
                    tok.col,
                )
            seen[rule.name] = tok.line
            rules.append(rule)
        return rules

    def rule(self) -> Rule:
        self.expect_keyword("rule")
        name_tok = self.peek()
        if name_tok.kind != "qstring":
            raise self.error("expected quoted rule name")
        self.advance()
        name = _unquote(name_tok)
        self.expect_punct("{")
        self.expect_keyword("when")
        self.expect_punct(":")
        conditions = []
        while self.at_punct("("):
            conditions.append(self.condition())
        if not conditions:
            raise self.error("rule needs at least one condition")
        self.expect_keyword("then")
        self.expect_punct(":")
        actions = []
        while not self.at_punct("}"):
            actions.append(self.action())
        self.expect_punct("}")
        rule = Rule(name, tuple(conditions), tuple(actions))
        _validate_rule(rule, name_tok)
        return rule

    def condition(self) -> Condition:
        self.expect_punct("(")
        fact_type = self.constant_ident("fact type")
        raw_terms = [self.raw_term(), self.raw_term(), self.raw_term()]
        value_type = self.value_type_name()
        tests = []
        if self.at_punct("["):
            self.advance()
            while self.at_punct("("):
                tests.append(self.join_test())
            if not tests:
                raise self.error("empty test block")
            self.expect_punct("]")
        close = self.expect_punct(")")
        terms = [
            self.bind_term(raw, pos, value_type)
            for pos, raw in enumerate(raw_terms)
        ]
        cond = Condition(
            fact_type, terms[0], terms[1], terms[2], value_type, tuple(tests)
        )
        own_vars = {v.name for _, v in cond.variables()}
        for test in tests:
            if test.left.name not in own_vars and test.right.name not in own_vars:
                raise ParseError(
                    f"test ({test.left!r} {test.op.value} {test.right!r}) references "
                    "no variable of its condition",
                    close.line,
                    close.col,
                )
        return cond

    def constant_ident(self, what: str) -> int:
        tok = self.peek()
        if tok.kind == "var":
            raise self.error(f"{what} must be constant")
        if tok.kind == "ident":
            self.advance()
            return self.dictionary.intern(tok.text)
        raise self.error(f"expected {what} identifier, got {tok.text!r}")

    def raw_term(self) -> Token:
        tok = self.peek()
        if tok.kind in ("var", "qstring", "ident"):
            return self.advance()
        if tok.kind == "number":
            return self.advance()
        if tok.kind == "punct" and tok.text == "-":
            minus = self.advance()
            num = self.peek()
            if num.kind != "number":
                raise self.error("expected number after '-'")
            self.advance()
            return Token("number", "-" + num.text, minus.line, minus.col)
        raise self.error(f"expected term, got {tok.text!r}")

    def value_type_name(self) -> ValueType:
        tok = self.peek()
        if tok.kind != "ident":
            raise self.error("expected value type name")
        try:
            vt = ValueType.from_name(tok.text)
        except ValueError as exc:
            raise self.error(str(exc)) from None
        self.advance()
        return vt

    def bind_term(self, tok: Token, pos: int, value_type: ValueType):
        """Turn a raw term token into a Variable or an encoded constant."""
        if tok.kind == "var":
            return Variable(tok.text[1:])
        if pos in (POS_ID, POS_ATTR):
            if tok.kind == "qstring":
                return self.dictionary.intern(_unquote(tok))
            if tok.kind == "ident":
                return self.dictionary.intern(tok.text)
            raise ParseError(
                f"{_SLOT_NAMES[pos]} slot takes a variable or string constant",
                tok.line,
                tok.col,
            )
        # value slot: interpretation follows the declared value type
        if value_type is ValueType.STRING:
            if tok.kind == "qstring":
                return self.dictionary.intern(_unquote(tok))
            if tok.kind == "ident":
                return self.dictionary.intern(tok.text)
            raise ParseError(
                "numeric literal in string-typed value slot", tok.line, tok.col
            )
        if value_type is ValueType.BOOL:
            if tok.kind == "ident" and tok.text in ("true", "false"):
                return encode_value(ValueType.BOOL, tok.text == "true")
            raise ParseError("expected true or false", tok.line, tok.col)
        if tok.kind != "number":
            raise ParseError(
                f"expected numeric literal for {value_type.type_name} slot",
                tok.line,
                tok.col,
            )
        return self.encode_number(tok, value_type)

    def encode_number(self, tok: Token, value_type: ValueType) -> int:
        is_float = any(c in tok.text for c in ".eE")
        if value_type in (ValueType.FLOAT, ValueType.DOUBLE):
            payload = float(tok.text)
        elif is_float:
            raise ParseError(
                f"non-integer literal for {value_type.type_name} slot",
                tok.line,
                tok.col,
            )
        else:
            payload = int(tok.text)
        try:
            return encode_value(value_type, payload)
        except ValueError as exc:
            raise ParseError(str(exc), tok.line, tok.col) from None

    def join_test(self) -> VariableJoinTest:
        self.expect_punct("(")
        left = self.test_var()
        op_tok = self.peek()
        if op_tok.kind != "punct" or op_tok.text not in _TEST_OPS:
            raise self.error(f"expected comparison operator, got {op_tok.text!r}")
        self.advance()
        right = self.test_var()
        self.expect_punct(")")
        return VariableJoinTest(left, _TEST_OPS[op_tok.text], right)

    def test_var(self) -> Variable:
        tok = self.peek()
        if tok.kind != "var":
            raise self.error("tests compare variables")
        self.advance()
        return Variable(tok.text[1:])

    def action(self) -> Action:
        tok = self.peek()
        if self.at_keyword("add") or self.at_keyword("delete"):
            self.advance()
            kind = ActionKind.ADD if tok.text == "add" else ActionKind.DELETE
            return Action(kind, self.template())
        if self.at_keyword("replace"):
            self.advance()
            self.expect_punct("(")
            old = self.template()
            self.expect_punct(",")
            new = self.template()
            self.expect_punct(")")
            return Action(ActionKind.REPLACE, old, new)
        raise self.error(f"expected add, delete, or replace, got {tok.text!r}")

    def template(self) -> Template:
        self.expect_punct("(")
        fact_type = self.constant_ident("fact type")
        raw_terms = [self.template_term(), self.template_term(), self.template_term()]
        value_type = self.value_type_name()
        self.expect_punct(")")
        terms = []
        for pos, raw in enumerate(raw_terms):
            if not isinstance(raw, Token):  # parenthesized arithmetic
                expr, open_tok = raw
                if pos != POS_VALUE:
                    raise ParseError(
                        "arithmetic is only allowed in the value slot",
                        open_tok.line,
                        open_tok.col,
                    )
                if value_type not in NUMERIC_TYPES:
                    raise ParseError(
                        f"arithmetic result needs a numeric value type, "
                        f"got {value_type.type_name}",
                        open_tok.line,
                        open_tok.col,
                    )
                terms.append(expr)
            else:
                terms.append(self.bind_term(raw, pos, value_type))
        return Template(fact_type, terms[0], terms[1], terms[2], value_type)

    def template_term(self):
        if self.at_punct("("):
            open_tok = self.advance()
            left = self.expr_operand()
            op_tok = self.peek()
            if op_tok.kind != "punct" or op_tok.text not in "+-*/":
                raise self.error(f"expected arithmetic operator, got {op_tok.text!r}")
            self.advance()
            right = self.expr_operand()
            self.expect_punct(")")
            return (Expr(op_tok.text, left, right), open_tok)
        return self.raw_term()

    def expr_operand(self):
        tok = self.peek()
        if tok.kind == "var":
            self.advance()
            return Variable(tok.text[1:])
        if tok.kind == "number":
            self.advance()
            return float(tok.text) if any(c in tok.text for c in ".eE") else int(tok.text)
        if tok.kind == "punct" and tok.text == "-":
            self.advance()
            num = self.peek()
            if num.kind != "number":
                raise self.error("expected number after '-'")
            self.advance()
            val = float(num.text) if any(c in num.text for c in ".eE") else int(num.text)
            return -val
        raise self.error("expected variable or number in arithmetic")


def _condition_var_kinds(rule: Rule) -> dict[str, object]:
    """Variable name -> slot kind, first binding wins."""
    kinds: dict[str, object] = {}
    for cond in rule.conditions:
        for pos, var in cond.variables():
            kinds.setdefault(var.name, slot_kind(pos, cond.value_type))
    return kinds


def _validate_rule(rule: Rule, where: Token) -> None:
    kinds = _condition_var_kinds(rule)

    def fail(message: str):
        raise ParseError(f"rule {rule.name!r}: {message}", where.line, where.col)

    for cond in rule.conditions:
        for test in cond.tests:
            for var in (test.left, test.right):
                if var.name not in kinds:
                    fail(f"test variable ?{var.name} is bound by no condition")
    for action in rule.actions:
        templates = [action.template]
        if action.replacement is not None:
            templates.append(action.replacement)
        for template in templates:
            for pos, term in enumerate(template.terms()):
                if isinstance(term, Variable):
                    kind = kinds.get(term.name)
                    if kind is None:
                        fail(f"template variable ?{term.name} is bound by no condition")
                    expected = slot_kind(pos, template.value_type)
                    if kind != expected:
                        fail(
                            f"template variable ?{term.name} has kind {kind!r}, "
                            f"slot expects {expected!r}"
                        )
                elif isinstance(term, Expr):
                    for operand in (term.left, term.right):
                        if isinstance(operand, Variable):
                            kind = kinds.get(operand.name)
                            if kind is None:
                                fail(
                                    f"template variable ?{operand.name} is bound "
                                    "by no condition"
                                )
                            if kind not in NUMERIC_TYPES:
                                fail(
                                    f"arithmetic over non-numeric variable "
                                    f"?{operand.name}"
                                )


def parse_rules(text: str, dictionary: StringDictionary) -> list[Rule]:
    """Parse a rules file; raises :class:`ParseError` with position info."""
    return _RuleParser(text, dictionary).parse()


# ---------------------------------------------------------------------------
# Rule serialization (canonical text, reparses to an equal structure)
# ---------------------------------------------------------------------------

_IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")


def _quote(text: str) -> str:
    body = (
        text.replace("\\", "\\\\")
        .replace("\t", "\\t")
        .replace("\n", "\\n")
        .replace('"', '\\"')
    )
    return f'"{body}"'


def _string_token(text: str) -> str:
    if _IDENT_RE.match(text) and text not in _KEYWORDS:
        return text
    return _quote(text)


def _format_number(value) -> str:
    return repr(value)


def _serialize_term(term, pos: int, value_type: ValueType, dictionary) -> str:
    if isinstance(term, Variable):
        return f"?{term.name}"
    if isinstance(term, Expr):
        left = _serialize_operand(term.left)
        right = _serialize_operand(term.right)
        return f"({left} {term.op} {right})"
    if pos in (POS_ID, POS_ATTR) or value_type is ValueType.STRING:
        return _string_token(dictionary.resolve(term))
    if value_type is ValueType.BOOL:
        return "true" if term else "false"
    return _format_number(decode_value(value_type, term))


def _serialize_operand(operand) -> str:
    if isinstance(operand, Variable):
        return f"?{operand.name}"
    return _format_number(operand)


def _serialize_condition(cond: Condition, dictionary) -> str:
    parts = [dictionary.resolve(cond.fact_type)]
    for pos in (POS_ID, POS_ATTR, POS_VALUE):
        parts.append(_serialize_term(cond.term(pos), pos, cond.value_type, dictionary))
    parts.append(cond.value_type.type_name)
    body = " ".join(parts)
    if cond.tests:
        tests = " ".join(
            f"(?{t.left.name} {t.op.value} ?{t.right.name})" for t in cond.tests
        )
        body += f" [ {tests} ]"
    return f"({body})"


def _serialize_template(template: Template, dictionary) -> str:
    parts = [dictionary.resolve(template.fact_type)]
    for pos, term in enumerate(template.terms()):
        parts.append(_serialize_term(term, pos, template.value_type, dictionary))
    parts.append(template.value_type.type_name)
    return "({})".format(" ".join(parts))


def serialize_rules(rules: Iterable[Rule], dictionary: StringDictionary) -> str:
    chunks = []
    for rule in rules:
        lines = [f"rule {_quote(rule.name)} {{", "    when:"]
        for cond in rule.conditions:
            lines.append(f"        {_serialize_condition(cond, dictionary)}")
        lines.append("    then:")
        for action in rule.actions:
            if action.kind is ActionKind.REPLACE:
                old = _serialize_template(action.template, dictionary)
                new = _serialize_template(action.replacement, dictionary)
                lines.append(f"        replace ({old}, {new})")
            else:
                tmpl = _serialize_template(action.template, dictionary)
                lines.append(f"        {action.kind.value} {tmpl}")
        lines.append("}")
        chunks.append("\n".join(lines))
    return "\n\n".join(chunks) + ("\n" if chunks else "")

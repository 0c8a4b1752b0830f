"""Filter expression language: lexer, parser, validator, evaluator.

Grammar (whitespace insignificant):

    expr       := orExpr
    orExpr     := andExpr { ("|" | "||") andExpr }
    andExpr    := atom { ("&" | "&&") atom }
    atom       := comparison | "(" expr ")"
    comparison := IDENT OP NUMBER
    OP         := "<" | ">" | "<=" | ">=" | "==" | "!="

`&` binds tighter than `|`; both chains are left-associative. The parser
produces a canonical AST: Group nodes appear exactly where parentheses
are structurally required (an Or operand of an And, or a right-nested
chain of the same operator), so render() emits parentheses only where
precedence demands and parse(render(e)) is the identity on canonical
trees.

Equality comparisons are exact double comparisons; the reference corpus
only uses integer thresholds, so this is documented rather than fuzzy.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

from .events import IDENT_RE, Event, Schema

MAX_DEPTH = 64

COMPARISON_OPS = ("<=", ">=", "==", "!=", "<", ">")


class FilterError(Exception):
    pass


class FilterSyntaxError(FilterError):
    """Parse failure with byte offset and the token set that was expected."""

    def __init__(self, message: str, offset: int, expected: tuple[str, ...] = ()):
        detail = f"{message} at offset {offset}"
        if expected:
            detail += " (expected " + " or ".join(expected) + ")"
        super().__init__(detail)
        self.offset = offset
        self.expected = expected


class FilterEvalError(FilterError):
    """Evaluation hit a variable the schema does not define.

    Unknown variables must fault rather than silently evaluate to false:
    a silent false would corrupt selections.
    """


@dataclass(frozen=True)
class Comparison:
    variable: str
    op: str
    literal: float


@dataclass(frozen=True)
class And:
    left: "FilterExpr"
    right: "FilterExpr"


@dataclass(frozen=True)
class Or:
    left: "FilterExpr"
    right: "FilterExpr"


@dataclass(frozen=True)
class Group:
    inner: "FilterExpr"


FilterExpr = Comparison | And | Or | Group


@dataclass(frozen=True)
class Calibration:
    """Per-variable affine transform applied before comparison: v' = scale*v + offset."""

    entries: dict[str, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        for name, (scale, offset) in self.entries.items():
            if not IDENT_RE.match(name):
                raise ValueError(f"invalid calibration variable {name!r}")
            if not math.isfinite(scale) or scale == 0.0:
                raise ValueError(f"calibration scale for {name!r} must be finite and non-zero")
            if not math.isfinite(offset):
                raise ValueError(f"calibration offset for {name!r} must be finite")

    def validate(self, schema: Schema) -> list[str]:
        return sorted(name for name in self.entries if name not in schema)

    def apply(self, name: str, value: float) -> float:
        entry = self.entries.get(name)
        if entry is None:
            return value
        scale, offset = entry
        return scale * value + offset

    def apply_to_event(self, event: Event, schema: Schema) -> Event:
        """Calibrated copy of an event; only named variables change."""
        values = tuple(
            self.apply(name, value)
            for name, value in zip(schema.variables, event.values)
        )
        return Event(event.event_id, values, event.tracks, event.vertices, event.payload)

    def to_json(self) -> dict:
        return {
            name: {"scale": scale, "offset": offset}
            for name, (scale, offset) in self.entries.items()
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Calibration":
        entries = {}
        for name, spec in obj.items():
            entries[name] = (float(spec["scale"]), float(spec["offset"]))
        return cls(entries)


# --- lexer ---------------------------------------------------------------

_NUMBER_RE = re.compile(r"[+-]?(\d+(\.\d*)?|\.\d+)([eE][+-]?\d+)?")
_IDENT_TOKEN_RE = re.compile(r"[a-zA-Z_][a-zA-Z0-9_]*")


@dataclass(frozen=True)
class _Token:
    kind: str  # IDENT, NUMBER, OP, AND, OR, LPAREN, RPAREN, EOF
    text: str
    offset: int


def _tokenize(text: str) -> list[_Token]:
    tokens = []
    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if ch.isspace():
            i += 1
            continue
        if ch == "(":
            tokens.append(_Token("LPAREN", ch, i))
            i += 1
        elif ch == ")":
            tokens.append(_Token("RPAREN", ch, i))
            i += 1
        elif ch == "&":
            width = 2 if text.startswith("&&", i) else 1
            tokens.append(_Token("AND", text[i:i + width], i))
            i += width
        elif ch == "|":
            width = 2 if text.startswith("||", i) else 1
            tokens.append(_Token("OR", text[i:i + width], i))
            i += width
        elif text.startswith(("<=", ">=", "==", "!=") , i):
            tokens.append(_Token("OP", text[i:i + 2], i))
            i += 2
        elif ch in "<>":
            tokens.append(_Token("OP", ch, i))
            i += 1
        elif ch.isdigit() or ch == "." or ch in "+-":
            m = _NUMBER_RE.match(text, i)
            if not m:
                raise FilterSyntaxError(f"unexpected character {ch!r}", i, ("number",))
            tokens.append(_Token("NUMBER", m.group(0), i))
            i = m.end()
        else:
            m = _IDENT_TOKEN_RE.match(text, i)
            if not m:
                raise FilterSyntaxError(f"unexpected character {ch!r}", i)
            tokens.append(_Token("IDENT", m.group(0), i))
            i = m.end()
    tokens.append(_Token("EOF", "", n))
    return tokens


# --- parser --------------------------------------------------------------

def _needs_group(child: FilterExpr, parent: str, right: bool) -> bool:
    """Whether `child` needs explicit grouping in position under `parent`."""
    if isinstance(child, Group):
        return False
    if parent == "and":
        if isinstance(child, Or):
            return True
        return right and isinstance(child, And)
    if parent == "or":
        return right and isinstance(child, Or)
    return False


def _grouped(child: FilterExpr, parent: str, right: bool) -> FilterExpr:
    return Group(child) if _needs_group(child, parent, right) else child


class _Parser:
    def __init__(self, tokens: list[_Token]):
        self.tokens = tokens
        self.pos = 0
        self.depth = 0

    def peek(self) -> _Token:
        return self.tokens[self.pos]

    def advance(self) -> _Token:
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def parse_expr(self) -> FilterExpr:
        self.depth += 1
        if self.depth > MAX_DEPTH:
            raise FilterSyntaxError("expression nested too deeply", self.peek().offset)
        try:
            left = self.parse_and()
            while self.peek().kind == "OR":
                self.advance()
                right = self.parse_and()
                left = Or(_grouped(left, "or", False), _grouped(right, "or", True))
            return left
        finally:
            self.depth -= 1

    def parse_and(self) -> FilterExpr:
        left = self.parse_atom()
        while self.peek().kind == "AND":
            self.advance()
            right = self.parse_atom()
            left = And(_grouped(left, "and", False), _grouped(right, "and", True))
        return left

    def parse_atom(self) -> FilterExpr:
        tok = self.peek()
        if tok.kind == "LPAREN":
            self.advance()
            inner = self.parse_expr()
            closing = self.peek()
            if closing.kind != "RPAREN":
                raise FilterSyntaxError("unclosed parenthesis", closing.offset, (")",))
            self.advance()
            return _strip_group(inner)
        if tok.kind == "IDENT":
            return self.parse_comparison()
        raise FilterSyntaxError(
            f"unexpected {tok.kind.lower() if tok.kind != 'EOF' else 'end of input'}",
            tok.offset,
            ("variable", "("),
        )

    def parse_comparison(self) -> Comparison:
        ident = self.advance()
        op = self.peek()
        if op.kind != "OP":
            raise FilterSyntaxError("expected comparison operator", op.offset, COMPARISON_OPS)
        self.advance()
        num = self.peek()
        if num.kind != "NUMBER":
            raise FilterSyntaxError("expected numeric literal", num.offset, ("number",))
        self.advance()
        value = float(num.text)
        if not math.isfinite(value):
            raise FilterSyntaxError("literal overflows a double", num.offset)
        return Comparison(ident.text, op.text, value)


def _strip_group(expr: FilterExpr) -> FilterExpr:
    # Redundant source parentheses are dropped; _grouped reinstates
    # exactly the structurally required ones.
    while isinstance(expr, Group):
        expr = expr.inner
    return expr


def parse(text: str) -> FilterExpr:
    """Parse filter text into a canonical AST.

    Raises FilterSyntaxError (with byte offset) on malformed input,
    including empty input.
    """
    tokens = _tokenize(text)
    if tokens[0].kind == "EOF":
        raise FilterSyntaxError("empty filter", 0, ("variable", "("))
    parser = _Parser(tokens)
    expr = parser.parse_expr()
    trailing = parser.peek()
    if trailing.kind != "EOF":
        raise FilterSyntaxError(f"unexpected {trailing.text!r}", trailing.offset)
    return expr


# --- validation / evaluation / rendering ---------------------------------

def variables_of(expr: FilterExpr) -> set[str]:
    if isinstance(expr, Comparison):
        return {expr.variable}
    if isinstance(expr, Group):
        return variables_of(expr.inner)
    return variables_of(expr.left) | variables_of(expr.right)


def validate(expr: FilterExpr, schema: Schema) -> list[str]:
    """Return one error per unknown variable; an empty list means ok."""
    unknown = sorted(name for name in variables_of(expr) if name not in schema)
    return [f"unknown variable '{name}'" for name in unknown]


def _compare(value: float, op: str, literal: float) -> bool:
    if op == "<":
        return value < literal
    if op == ">":
        return value > literal
    if op == "<=":
        return value <= literal
    if op == ">=":
        return value >= literal
    if op == "==":
        return value == literal
    if op == "!=":
        return value != literal
    raise FilterError(f"unknown operator {op!r}")


def evaluate(expr: FilterExpr, event: Event, schema: Schema,
             calibration: Calibration | None = None) -> bool:
    """Evaluate a validated expression against one event.

    Both operands of And/Or are always evaluated, so an unknown variable
    faults regardless of where it sits in the tree.
    """
    if isinstance(expr, Comparison):
        try:
            index = schema.index_of(expr.variable)
        except ValueError:
            raise FilterEvalError(
                f"variable '{expr.variable}' is not in the schema"
            ) from None
        value = event.values[index]
        if calibration is not None:
            value = calibration.apply(expr.variable, value)
        return _compare(value, expr.op, expr.literal)
    if isinstance(expr, Group):
        return evaluate(expr.inner, event, schema, calibration)
    if isinstance(expr, And):
        left = evaluate(expr.left, event, schema, calibration)
        right = evaluate(expr.right, event, schema, calibration)
        return left and right
    if isinstance(expr, Or):
        left = evaluate(expr.left, event, schema, calibration)
        right = evaluate(expr.right, event, schema, calibration)
        return left or right
    raise FilterError(f"unknown node {expr!r}")


def format_literal(value: float) -> str:
    if value == int(value) and abs(value) < 1e15:
        return str(int(value))
    return repr(value)


def _canon_child(child: FilterExpr, parent: str, right: bool) -> FilterExpr:
    # Hand-built trees may carry redundant Groups or lack required ones;
    # canonical output keeps a Group exactly where removing it would
    # change how the text re-parses.
    inner = _strip_group(child)
    return Group(inner) if _needs_group(inner, parent, right) else inner


def render(expr: FilterExpr) -> str:
    """Canonical text: single & / | tokens, no spaces, minimal parentheses."""
    expr = _strip_group(expr)
    if isinstance(expr, Comparison):
        return f"{expr.variable}{expr.op}{format_literal(expr.literal)}"
    if isinstance(expr, And):
        left = _render_child(_canon_child(expr.left, "and", False))
        right = _render_child(_canon_child(expr.right, "and", True))
        return f"{left}&{right}"
    if isinstance(expr, Or):
        left = _render_child(_canon_child(expr.left, "or", False))
        right = _render_child(_canon_child(expr.right, "or", True))
        return f"{left}|{right}"
    raise FilterError(f"unknown node {expr!r}")


def _render_child(child: FilterExpr) -> str:
    if isinstance(child, Group):
        return f"({render(child.inner)})"
    return render(child)


def canonicalize(text: str) -> str:
    return render(parse(text))

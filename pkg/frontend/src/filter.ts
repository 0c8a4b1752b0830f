/**
 * Client-side filter expression parser.
 *
 * Mirrors the service grammar exactly, including error byte offsets, so
 * the form can reject bad filters before any request is sent:
 *
 *   expr       := orExpr
 *   orExpr     := andExpr { ("|" | "||") andExpr }
 *   andExpr    := atom { ("&" | "&&") atom }
 *   atom       := comparison | "(" expr ")"
 *   comparison := IDENT OP NUMBER        OP := < > <= >= == !=
 *
 * Conformance with the service parser is pinned by the shared corpus
 * fixture (tests/data/filter_corpus.json in the repository root).
 */

export type ComparisonOp = "<" | ">" | "<=" | ">=" | "==" | "!=";

export type FilterExpr =
  | { kind: "cmp"; variable: string; op: ComparisonOp; literal: number }
  | { kind: "and"; left: FilterExpr; right: FilterExpr }
  | { kind: "or"; left: FilterExpr; right: FilterExpr }
  | { kind: "group"; inner: FilterExpr };

export class FilterSyntaxError extends Error {
  readonly offset: number;
  readonly expected: string[];

  constructor(message: string, offset: number, expected: string[] = []) {
    let detail = `${message} at offset ${offset}`;
    if (expected.length > 0) {
      detail += ` (expected ${expected.join(" or ")})`;
    }
    super(detail);
    this.offset = offset;
    this.expected = expected;
  }
}

const MAX_DEPTH = 64;

type TokenKind = "IDENT" | "NUMBER" | "OP" | "AND" | "OR" | "LPAREN" | "RPAREN" | "EOF";

interface Token {
  kind: TokenKind;
  text: string;
  offset: number;
}

const NUMBER_RE = /[+-]?(\d+(\.\d*)?|\.\d+)([eE][+-]?\d+)?/y;
const IDENT_RE = /[a-zA-Z_][a-zA-Z0-9_]*/y;

function tokenize(text: string): Token[] {
  const tokens: Token[] = [];
  let i = 0;
  while (i < text.length) {
    const ch = text[i];
    if (/\s/.test(ch)) {
      i += 1;
    } else if (ch === "(") {
      tokens.push({ kind: "LPAREN", text: ch, offset: i });
      i += 1;
    } else if (ch === ")") {
      tokens.push({ kind: "RPAREN", text: ch, offset: i });
      i += 1;
    } else if (ch === "&") {
      const width = text.startsWith("&&", i) ? 2 : 1;
      tokens.push({ kind: "AND", text: text.slice(i, i + width), offset: i });
      i += width;
    } else if (ch === "|") {
      const width = text.startsWith("||", i) ? 2 : 1;
      tokens.push({ kind: "OR", text: text.slice(i, i + width), offset: i });
      i += width;
    } else if (["<=", ">=", "==", "!="].some((op) => text.startsWith(op, i))) {
      tokens.push({ kind: "OP", text: text.slice(i, i + 2), offset: i });
      i += 2;
    } else if (ch === "<" || ch === ">") {
      tokens.push({ kind: "OP", text: ch, offset: i });
      i += 1;
    } else if (/[0-9.+-]/.test(ch)) {
      NUMBER_RE.lastIndex = i;
      const m = NUMBER_RE.exec(text);
      if (!m) {
        throw new FilterSyntaxError(`unexpected character '${ch}'`, i, ["number"]);
      }
      tokens.push({ kind: "NUMBER", text: m[0], offset: i });
      i = NUMBER_RE.lastIndex;
    } else {
      IDENT_RE.lastIndex = i;
      const m = IDENT_RE.exec(text);
      if (!m) {
        throw new FilterSyntaxError(`unexpected character '${ch}'`, i, []);
      }
      tokens.push({ kind: "IDENT", text: m[0], offset: i });
      i = IDENT_RE.lastIndex;
    }
  }
  tokens.push({ kind: "EOF", text: "", offset: text.length });
  return tokens;
}

function needsGroup(child: FilterExpr, parent: "and" | "or", right: boolean): boolean {
  if (child.kind === "group") return false;
  if (parent === "and") {
    if (child.kind === "or") return true;
    return right && child.kind === "and";
  }
  return right && child.kind === "or";
}

function grouped(child: FilterExpr, parent: "and" | "or", right: boolean): FilterExpr {
  return needsGroup(child, parent, right) ? { kind: "group", inner: child } : child;
}

function stripGroup(expr: FilterExpr): FilterExpr {
  while (expr.kind === "group") expr = expr.inner;
  return expr;
}

class Parser {
  private pos = 0;
  private depth = 0;

  constructor(private readonly tokens: Token[]) {}

  peek(): Token {
    return this.tokens[this.pos];
  }

  advance(): Token {
    return this.tokens[this.pos++];
  }

  parseExpr(): FilterExpr {
    this.depth += 1;
    if (this.depth > MAX_DEPTH) {
      throw new FilterSyntaxError("expression nested too deeply", this.peek().offset);
    }
    try {
      let left = this.parseAnd();
      while (this.peek().kind === "OR") {
        this.advance();
        const right = this.parseAnd();
        left = { kind: "or", left: grouped(left, "or", false), right: grouped(right, "or", true) };
      }
      return left;
    } finally {
      this.depth -= 1;
    }
  }

  parseAnd(): FilterExpr {
    let left = this.parseAtom();
    while (this.peek().kind === "AND") {
      this.advance();
      const right = this.parseAtom();
      left = { kind: "and", left: grouped(left, "and", false), right: grouped(right, "and", true) };
    }
    return left;
  }

  parseAtom(): FilterExpr {
    const tok = this.peek();
    if (tok.kind === "LPAREN") {
      this.advance();
      const inner = this.parseExpr();
      const closing = this.peek();
      if (closing.kind !== "RPAREN") {
        throw new FilterSyntaxError("unclosed parenthesis", closing.offset, [")"]);
      }
      this.advance();
      return stripGroup(inner);
    }
    if (tok.kind === "IDENT") {
      return this.parseComparison();
    }
    const what = tok.kind === "EOF" ? "end of input" : tok.kind.toLowerCase();
    throw new FilterSyntaxError(`unexpected ${what}`, tok.offset, ["variable", "("]);
  }

  parseComparison(): FilterExpr {
    const ident = this.advance();
    const op = this.peek();
    if (op.kind !== "OP") {
      throw new FilterSyntaxError("expected comparison operator", op.offset,
        ["<=", ">=", "==", "!=", "<", ">"]);
    }
    this.advance();
    const num = this.peek();
    if (num.kind !== "NUMBER") {
      throw new FilterSyntaxError("expected numeric literal", num.offset, ["number"]);
    }
    this.advance();
    const value = Number(num.text);
    if (!Number.isFinite(value)) {
      throw new FilterSyntaxError("literal overflows a double", num.offset);
    }
    return { kind: "cmp", variable: ident.text, op: op.text as ComparisonOp, literal: value };
  }
}

export function parse(text: string): FilterExpr {
  const tokens = tokenize(text);
  if (tokens[0].kind === "EOF") {
    throw new FilterSyntaxError("empty filter", 0, ["variable", "("]);
  }
  const parser = new Parser(tokens);
  const expr = parser.parseExpr();
  const trailing = parser.peek();
  if (trailing.kind !== "EOF") {
    throw new FilterSyntaxError(`unexpected '${trailing.text}'`, trailing.offset);
  }
  return expr;
}

export function variablesOf(expr: FilterExpr): Set<string> {
  switch (expr.kind) {
    case "cmp":
      return new Set([expr.variable]);
    case "group":
      return variablesOf(expr.inner);
    default: {
      const vars = variablesOf(expr.left);
      for (const v of variablesOf(expr.right)) vars.add(v);
      return vars;
    }
  }
}

export function formatLiteral(value: number): string {
  // JS number-to-string is shortest-round-trip, which coincides with the
  // service's canonical literal spelling across the corpus range.
  return String(value);
}

function canonChild(child: FilterExpr, parent: "and" | "or", right: boolean): FilterExpr {
  const inner = stripGroup(child);
  return needsGroup(inner, parent, right) ? { kind: "group", inner } : inner;
}

function renderChild(child: FilterExpr): string {
  if (child.kind === "group") {
    return `(${render(child.inner)})`;
  }
  return render(child);
}

/** Canonical spelling: single `&`/`|`, no spaces, minimal parentheses. */
export function render(expr: FilterExpr): string {
  expr = stripGroup(expr);
  switch (expr.kind) {
    case "cmp":
      return `${expr.variable}${expr.op}${formatLiteral(expr.literal)}`;
    case "and":
      return `${renderChild(canonChild(expr.left, "and", false))}&` +
        `${renderChild(canonChild(expr.right, "and", true))}`;
    case "or":
      return `${renderChild(canonChild(expr.left, "or", false))}|` +
        `${renderChild(canonChild(expr.right, "or", true))}`;
    default:
      throw new Error("unreachable");
  }
}

/** Pre-submit check; returns null when the text parses. */
export function syntaxProblem(text: string): FilterSyntaxError | null {
  try {
    parse(text);
    return null;
  } catch (err) {
    if (err instanceof FilterSyntaxError) return err;
    throw err;
  }
}

"""Tiny expression language for dynamics and cost formulas.

Grammar (case-sensitive):

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := '-' unary | power
    power  := atom ('^' unary)?        right-associative; binds above unary minus
    atom   := NUMBER | VAR | FUNC '(' expr ')' | '(' expr ')'
    VAR    := 'u'<k> | 'y'<k>          1-based component index, e.g. u1, y2
    FUNC   := 'sin' | 'cos'

so "-y1^2" means -(y1^2) and "2^3^2" means 2^(3^2).  Numbers accept anything
float() accepts.  Evaluation is vectorized: variables broadcast over leading
axes of the supplied u and y arrays.
"""

from __future__ import annotations

import numpy as np

_FUNCS = ("sin", "cos")


class ExprError(ValueError):
    """Parse or validation failure, carrying 1-based line/column."""

    def __init__(self, message, line, col):
        super().__init__(f"{message} (line {line}, column {col})")
        self.line = line
        self.col = col


class _Token:
    __slots__ = ("kind", "text", "line", "col")

    def __init__(self, kind, text, line, col):
        self.kind = kind
        self.text = text
        self.line = line
        self.col = col


def _tokenize(src):
    tokens = []
    line, col = 1, 1
    i = 0
    n = len(src)
    while i < n:
        ch = src[i]
        if ch == "\n":
            line += 1
            col = 1
            i += 1
            continue
        if ch in " \t\r":
            i += 1
            col += 1
            continue
        if ch in "+-*/^(),":
            tokens.append(_Token(ch, ch, line, col))
            i += 1
            col += 1
            continue
        if ch.isdigit() or ch == ".":
            j = i
            while j < n and (src[j].isdigit() or src[j] == "."):
                j += 1
            if j < n and src[j] in "eE":
                k = j + 1
                if k < n and src[k] in "+-":
                    k += 1
                if k < n and src[k].isdigit():
                    j = k
                    while j < n and src[j].isdigit():
                        j += 1
            text = src[i:j]
            try:
                float(text)
            except ValueError:
                raise ExprError(f"bad number {text!r}", line, col)
            tokens.append(_Token("num", text, line, col))
            col += j - i
            i = j
            continue
        if ch.isalpha() or ch == "_":
            j = i
            while j < n and (src[j].isalnum() or src[j] == "_"):
                j += 1
            tokens.append(_Token("ident", src[i:j], line, col))
            col += j - i
            i = j
            continue
        raise ExprError(f"unexpected character {ch!r}", line, col)
    tokens.append(_Token("end", "", line, col))
    return tokens


class _Parser:
    def __init__(self, tokens):
        self.tokens = tokens
        self.pos = 0

    def peek(self):
        return self.tokens[self.pos]

    def take(self, kind=None):
        tok = self.tokens[self.pos]
        if kind is not None and tok.kind != kind:
            what = tok.text or "end of input"
            raise ExprError(f"expected {kind!r}, found {what!r}", tok.line, tok.col)
        self.pos += 1
        return tok

    def parse(self):
        node = self.expr()
        tok = self.peek()
        if tok.kind != "end":
            raise ExprError(f"unexpected {tok.text!r} after expression", tok.line, tok.col)
        return node

    def expr(self):
        node = self.term()
        while self.peek().kind in ("+", "-"):
            op = self.take().kind
            rhs = self.term()
            node = ("add" if op == "+" else "sub", node, rhs)
        return node

    def term(self):
        node = self.unary()
        while self.peek().kind in ("*", "/"):
            op = self.take().kind
            rhs = self.unary()
            node = ("mul" if op == "*" else "div", node, rhs)
        return node

    def unary(self):
        if self.peek().kind == "-":
            self.take()
            return ("neg", self.unary())
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek().kind == "^":
            self.take()
            return ("pow", base, self.unary())
        return base

    def atom(self):
        tok = self.peek()
        if tok.kind == "num":
            self.take()
            return ("num", float(tok.text))
        if tok.kind == "(":
            self.take()
            node = self.expr()
            self.take(")")
            return node
        if tok.kind == "ident":
            self.take()
            name = tok.text
            if name in _FUNCS:
                self.take("(")
                arg = self.expr()
                self.take(")")
                return (name, arg)
            if len(name) >= 2 and name[0] in "uy" and name[1:].isdigit():
                idx = int(name[1:])
                if idx < 1:
                    raise ExprError(f"variable index must be >= 1 in {name!r}",
                                    tok.line, tok.col)
                return ("var", name[0], idx - 1)
            raise ExprError(f"unknown identifier {name!r}", tok.line, tok.col)
        what = tok.text or "end of input"
        raise ExprError(f"expected a value, found {what!r}", tok.line, tok.col)


def parse(src):
    """Parse source text into an AST of nested tuples."""
    return _Parser(_tokenize(src)).parse()


def used_vars(node):
    """Set of ('u'|'y', zero_based_index) referenced by the AST."""
    kind = node[0]
    if kind == "num":
        return set()
    if kind == "var":
        return {(node[1], node[2])}
    return set().union(*(used_vars(ch) for ch in node[1:]))


def evaluate(node, u, y):
    """Evaluate over batched arrays u (..., n) and y (..., m), returns (...)."""
    kind = node[0]
    if kind == "num":
        return node[1]
    if kind == "var":
        arr = u if node[1] == "u" else y
        return arr[..., node[2]]
    if kind == "neg":
        return -evaluate(node[1], u, y)
    if kind == "add":
        return evaluate(node[1], u, y) + evaluate(node[2], u, y)
    if kind == "sub":
        return evaluate(node[1], u, y) - evaluate(node[2], u, y)
    if kind == "mul":
        return evaluate(node[1], u, y) * evaluate(node[2], u, y)
    if kind == "div":
        return evaluate(node[1], u, y) / evaluate(node[2], u, y)
    if kind == "pow":
        base = evaluate(node[1], u, y)
        exp = node[2]
        # integer constant exponents keep the fast exact numpy path
        if exp[0] == "num" and float(exp[1]).is_integer():
            return base ** int(exp[1])
        return base ** evaluate(exp, u, y)
    if kind == "sin":
        return np.sin(evaluate(node[1], u, y))
    if kind == "cos":
        return np.cos(evaluate(node[1], u, y))
    raise AssertionError(f"unhandled node {kind!r}")
